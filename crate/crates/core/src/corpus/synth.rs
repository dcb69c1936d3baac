//! Template-grammar generator for task-oriented booking dialogues.
//!
//! Each dialogue pursues a goal (domain plus slot values). The agent asks
//! for one slot at a time and the user answers it, so the question predicts
//! the form of the answer; values recur across turns (user repeats, agent
//! echoes), so history predicts the words of later user turns. After an offer
//! that does not name the venue's attributes the user may ask to confirm the
//! values they gave earlier, which only the user's own history predicts.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, Turn};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotCategory {
    Food,
    Area,
    Price,
    Stars,
    People,
    Day,
    Time,
    Nights,
    Destination,
    Departure,
}

impl SlotCategory {
    fn question_templates(self) -> &'static [&'static str] {
        use SlotCategory::*;
        match self {
            Food => &[
                "what type of food would you like ?",
                "what cuisine are you interested in ?",
            ],
            Area => &[
                "what area would you like ?",
                "which part of town do you prefer ?",
            ],
            Price => &[
                "what price range are you looking for ?",
                "do you have a price range in mind ?",
            ],
            Stars => &["how many stars should the hotel have ?"],
            People => &[
                "how many people will be in your party ?",
                "for how many people ?",
            ],
            Day => &["what day would you like ?", "which day will that be ?"],
            Time => &["what time would you like ?", "at what time ?"],
            Nights => &["how many nights will you be staying ?"],
            Destination => &["where are you travelling to ?"],
            Departure => &["where will you be leaving from ?"],
        }
    }

    fn answer_templates(self) -> &'static [&'static str] {
        use SlotCategory::*;
        match self {
            Food => &[
                "i would like some {} food please",
                "we want to eat {} food tonight",
                "{} food would be great thanks",
            ],
            Area => &[
                "somewhere in the {} of town please",
                "i would prefer the {} of town",
                "it should be in the {} area",
            ],
            Price => &[
                "something in the {} price range please",
                "i would like a {} place",
                "it should be {} if possible",
            ],
            Stars => &["it should have {} stars please", "a {} star place would be good"],
            People => &[
                "there will be {} people in my party",
                "it is for {} people please",
                "book it for {} people",
            ],
            Day => &[
                "i would like to go on {} please",
                "it should be for {} please",
                "we want to go on {}",
            ],
            Time => &["at {} if that is possible", "i would like it around {} please"],
            Nights => &["we will stay for {} nights", "i need it for {} nights please"],
            Destination => &["i am travelling to {} please", "i want to go to {}"],
            Departure => &["i will be leaving from {}", "it should depart from {} please"],
        }
    }
}

/// Slot values, venue names and acoustically confusable word pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub values: BTreeMap<SlotCategory, Vec<String>>,
    pub restaurant_names: Vec<String>,
    pub hotel_names: Vec<String>,
    /// Word pairs that sound alike; consumed by the speech synthesizer.
    pub confusable: Vec<(String, String)>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Vocabulary {
    fn default() -> Self {
        use SlotCategory::*;
        let cities = strings(&[
            "cambridge",
            "london",
            "norwich",
            "ely",
            "stevenage",
            "leicester",
            "peterborough",
            "broxbourne",
        ]);
        let mut values = BTreeMap::new();
        values.insert(
            Food,
            strings(&[
                "italian", "indian", "chinese", "french", "thai", "turkish", "british", "spanish",
            ]),
        );
        values.insert(Area, strings(&["north", "south", "east", "west", "centre"]));
        values.insert(Price, strings(&["cheap", "moderate", "expensive"]));
        values.insert(Stars, strings(&["two", "three", "four", "five"]));
        values.insert(
            People,
            strings(&["one", "two", "three", "four", "five", "six", "seven", "eight"]),
        );
        values.insert(
            Day,
            strings(&[
                "monday",
                "tuesday",
                "wednesday",
                "thursday",
                "friday",
                "saturday",
                "sunday",
            ]),
        );
        values.insert(
            Time,
            strings(&[
                "ten am", "eleven am", "noon", "one pm", "two pm", "six pm", "seven pm", "eight pm",
            ]),
        );
        values.insert(Nights, strings(&["one", "two", "three", "four", "five"]));
        values.insert(Destination, cities.clone());
        values.insert(Departure, cities);
        let pairs = [
            ("monday", "sunday"),
            ("tuesday", "thursday"),
            ("north", "south"),
            ("east", "west"),
            ("italian", "indian"),
            ("thai", "spanish"),
            ("two", "three"),
            ("four", "five"),
            ("six", "seven"),
            ("norwich", "ely"),
            ("london", "leicester"),
            ("cheap", "moderate"),
        ];
        Vocabulary {
            values,
            restaurant_names: strings(&[
                "golden house",
                "lucky star",
                "river bar",
                "curry garden",
                "little seoul",
                "royal spice",
                "pizza express",
                "the copper kettle",
                "bedouin",
                "the nirala",
            ]),
            hotel_names: strings(&[
                "acorn guest house",
                "alpha milton",
                "city centre north",
                "el shaddai",
                "the lensfield",
                "hamilton lodge",
                "ashley hotel",
                "worth house",
            ]),
            confusable: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }
}

impl Vocabulary {
    pub fn validate(&self) -> Result<()> {
        use SlotCategory::*;
        let required = [
            Food, Area, Price, Stars, People, Day, Time, Nights, Destination, Departure,
        ];
        for cat in required {
            if self.values.get(&cat).is_none_or(|v| v.is_empty()) {
                return Err(Error::config(format!("vocabulary has no {cat:?} values")));
            }
        }
        if self.restaurant_names.is_empty() || self.hotel_names.is_empty() {
            return Err(Error::config("vocabulary has no venue names"));
        }
        Ok(())
    }

    fn pick<'a, R: Rng>(&'a self, cat: SlotCategory, rng: &mut R) -> &'a str {
        self.values[&cat].choose(rng).expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_dialogues: usize,
    /// Inclusive range of turns per dialogue.
    pub turns_per_dialogue: (usize, usize),
    pub vocabulary: Vocabulary,
    pub seed: u64,
    /// Prefix of generated dialogue ids.
    pub id_prefix: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_dialogues: 300,
            turns_per_dialogue: (5, 8),
            vocabulary: Vocabulary::default(),
            seed: 0,
            id_prefix: "dlg".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Restaurant,
    Hotel,
    Train,
}

impl Domain {
    fn search_slots(self) -> &'static [SlotCategory] {
        use SlotCategory::*;
        match self {
            Domain::Restaurant => &[Food, Area, Price],
            Domain::Hotel => &[Area, Price, Stars],
            Domain::Train => &[Destination, Departure, Day, Time],
        }
    }

    fn booking_slots(self) -> &'static [SlotCategory] {
        use SlotCategory::*;
        match self {
            Domain::Restaurant => &[People, Day, Time],
            Domain::Hotel => &[People, Day, Nights],
            Domain::Train => &[People],
        }
    }
}

struct Exchange {
    user: String,
    agent: String,
}

/// Dialogue-wide goal: values are fixed once and reused by every mention.
struct Goal {
    values: BTreeMap<SlotCategory, String>,
}

impl Goal {
    fn sample<R: Rng>(vocab: &Vocabulary, rng: &mut R) -> Self {
        let mut values = BTreeMap::new();
        for (cat, _) in &vocab.values {
            values.insert(*cat, vocab.pick(*cat, rng).to_string());
        }
        while values[&SlotCategory::Departure] == values[&SlotCategory::Destination] {
            values.insert(
                SlotCategory::Departure,
                vocab.pick(SlotCategory::Departure, rng).to_string(),
            );
        }
        Goal { values }
    }

    fn get(&self, cat: SlotCategory) -> &str {
        &self.values[&cat]
    }
}

fn fill(template: &str, value: &str) -> String {
    template.replacen("{}", value, 1)
}

fn choose_template<R: Rng>(templates: &'static [&'static str], rng: &mut R) -> &'static str {
    templates.choose(rng).expect("non-empty template list")
}

fn opener<R: Rng>(
    domain: Domain,
    goal: &Goal,
    informed: &mut Vec<SlotCategory>,
    follow_up: bool,
    rng: &mut R,
) -> String {
    use SlotCategory::*;
    let lead = if follow_up { "i also need" } else { "i am looking for" };
    let text = match domain {
        Domain::Restaurant => match rng.random_range(0..3) {
            0 => {
                informed.push(Food);
                format!("{lead} a {} restaurant", goal.get(Food))
            }
            1 => {
                informed.push(Area);
                format!("{lead} a restaurant in the {}", goal.get(Area))
            }
            _ => format!("{lead} a restaurant"),
        },
        Domain::Hotel => match rng.random_range(0..3) {
            0 => {
                informed.push(Price);
                format!("{lead} a {} hotel", goal.get(Price))
            }
            1 => {
                informed.push(Area);
                format!("{lead} a hotel in the {}", goal.get(Area))
            }
            _ => format!("{lead} a place to stay"),
        },
        Domain::Train => {
            informed.push(Destination);
            if follow_up && rng.random_bool(0.7) {
                informed.push(Day);
                format!(
                    "{lead} a train to {} on {}",
                    goal.get(Destination),
                    goal.get(Day)
                )
            } else {
                format!("{lead} a train to {}", goal.get(Destination))
            }
        }
    };
    text
}

fn offer<R: Rng>(
    domain: Domain,
    goal: &Goal,
    name: &str,
    echo: bool,
    rng: &mut R,
) -> String {
    use SlotCategory::*;
    let body = match (domain, echo) {
        (Domain::Restaurant, true) => format!(
            "{name} is a {} {} restaurant in the {}",
            goal.get(Price),
            goal.get(Food),
            goal.get(Area)
        ),
        (Domain::Hotel, true) => format!(
            "{name} is a {} {} star hotel in the {}",
            goal.get(Price),
            goal.get(Stars),
            goal.get(Area)
        ),
        (Domain::Train, true) => format!(
            "there is a train from {} to {} on {} at {}",
            goal.get(Departure),
            goal.get(Destination),
            goal.get(Day),
            goal.get(Time)
        ),
        (Domain::Train, false) => "i have a train that fits".to_string(),
        (_, false) => format!("i found {name} for you"),
    };
    let question = *[
        "would you like me to book it ?",
        "shall i make a booking ?",
    ]
    .choose(rng)
    .expect("non-empty");
    format!("{body} . {question}")
}

fn confirmation(domain: Domain, goal: &Goal, echo: bool) -> String {
    use SlotCategory::*;
    let body = if !echo {
        "booking was successful".to_string()
    } else {
        match domain {
            Domain::Restaurant => format!(
                "i have booked a table for {} people on {} at {}",
                goal.get(People),
                goal.get(Day),
                goal.get(Time)
            ),
            Domain::Hotel => format!(
                "i have booked {} nights for {} people from {}",
                goal.get(Nights),
                goal.get(People),
                goal.get(Day)
            ),
            Domain::Train => format!("i have booked {} tickets", goal.get(People)),
        }
    };
    format!("{body} . is there anything else i can help with ?")
}

/// Clause restating a search value in a confirmation question.
fn check_clause(slot: SlotCategory, value: &str) -> Option<String> {
    use SlotCategory::*;
    Some(match slot {
        Food => format!("serves {value} food"),
        Area => format!("is in the {value}"),
        Price => format!("is in the {value} price range"),
        Stars => format!("has {value} stars"),
        Destination => format!("goes to {value}"),
        Departure => format!("leaves from {value}"),
        Day => format!("runs on {value}"),
        Time => format!("leaves at {value}"),
        People | Nights => return None,
    })
}

/// Exchanges for one domain. Goal values are shared by every domain, so a
/// follow-up opener may repeat values stated earlier in the dialogue.
fn domain_exchanges<R: Rng>(
    domain: Domain,
    goal: &Goal,
    vocab: &Vocabulary,
    follow_up: bool,
    rng: &mut R,
) -> Vec<Exchange> {
    let mut informed = Vec::new();
    let mut user = opener(domain, goal, &mut informed, follow_up, rng);
    let mut out = Vec::new();

    let mut asked: Vec<SlotCategory> = informed.clone();
    let mut pending: Vec<SlotCategory> = domain
        .search_slots()
        .iter()
        .copied()
        .filter(|s| !informed.contains(s))
        .collect();
    // Ask a random subset of the remaining search slots.
    pending.retain(|_| rng.random_bool(0.7));

    let name = match domain {
        Domain::Restaurant => vocab.restaurant_names.choose(rng).cloned(),
        Domain::Hotel => vocab.hotel_names.choose(rng).cloned(),
        Domain::Train => None,
    }
    .unwrap_or_default();

    asked.extend(pending.iter().copied());
    for slot in pending {
        let agent = choose_template(slot.question_templates(), rng).to_string();
        out.push(Exchange {
            user: std::mem::take(&mut user),
            agent,
        });
        user = fill(choose_template(slot.answer_templates(), rng), goal.get(slot));
    }

    let echo_offer = rng.random_bool(0.5);
    out.push(Exchange {
        user: std::mem::take(&mut user),
        agent: offer(domain, goal, &name, echo_offer, rng),
    });
    let clauses: Vec<String> = asked
        .iter()
        .filter_map(|&s| check_clause(s, goal.get(s)))
        .collect();
    if !echo_offer && !clauses.is_empty() && rng.random_bool(0.6) {
        let question = *["would you like me to book it ?", "shall i make a booking ?"]
            .choose(rng)
            .expect("non-empty");
        out.push(Exchange {
            user: format!("just to confirm it {}", clauses.join(" and ")),
            agent: format!("yes that is right . {question}"),
        });
    }

    let booking = domain.booking_slots();
    let mut remaining: Vec<SlotCategory> = booking.to_vec();
    user = if rng.random_bool(0.5) {
        remaining.retain(|&s| s != SlotCategory::People);
        format!(
            "yes please book it for {} people",
            goal.get(SlotCategory::People)
        )
    } else {
        "yes please go ahead and book it".to_string()
    };
    if domain == Domain::Train && !asked.contains(&SlotCategory::Day) {
        remaining.insert(0, SlotCategory::Day);
    }
    for slot in remaining {
        let agent = choose_template(slot.question_templates(), rng).to_string();
        out.push(Exchange {
            user: std::mem::take(&mut user),
            agent,
        });
        user = fill(choose_template(slot.answer_templates(), rng), goal.get(slot));
    }
    out.push(Exchange {
        user,
        agent: confirmation(domain, goal, rng.random_bool(0.5)),
    });
    out
}

fn generate_one(cfg: &GenerationConfig, index: usize) -> Dialogue {
    let mut rng = seed::rng(cfg.seed, "generate_dialogue", index as u64);
    let (lo, hi) = cfg.turns_per_dialogue;
    let n_turns = rng.random_range(lo..=hi);
    let goal = Goal::sample(&cfg.vocabulary, &mut rng);

    let domains = [Domain::Restaurant, Domain::Hotel, Domain::Train];
    let first = *domains.choose(&mut rng).expect("non-empty");
    let mut exchanges = domain_exchanges(first, &goal, &cfg.vocabulary, false, &mut rng);
    let mut previous = first;
    while exchanges.len() + 1 < n_turns {
        let others: Vec<Domain> = domains.iter().copied().filter(|&d| d != previous).collect();
        let next = *others.choose(&mut rng).expect("two other domains");
        exchanges.extend(domain_exchanges(next, &goal, &cfg.vocabulary, true, &mut rng));
        previous = next;
    }
    exchanges.truncate(n_turns.saturating_sub(1));

    let closing_user = *[
        "thank you that is all i need",
        "no that is all thanks goodbye",
        "that is everything thank you",
    ]
    .choose(&mut rng)
    .expect("non-empty");
    let closing_agent = *["you are welcome goodbye", "have a nice day", ""]
        .choose(&mut rng)
        .expect("non-empty");
    exchanges.push(Exchange {
        user: closing_user.to_string(),
        agent: closing_agent.to_string(),
    });

    Dialogue {
        id: format!("{}{:05}", cfg.id_prefix, index),
        turns: exchanges
            .into_iter()
            .enumerate()
            .map(|(i, e)| Turn::new(i + 1, e.user, e.agent))
            .collect(),
    }
}

/// Generate `cfg.n_dialogues` dialogues; each dialogue draws from its own
/// derived seed.
pub fn generate_synthetic_dialogues(cfg: &GenerationConfig) -> Result<Vec<Dialogue>> {
    cfg.vocabulary.validate()?;
    let (lo, hi) = cfg.turns_per_dialogue;
    if lo < 1 || lo > hi {
        return Err(Error::config(format!(
            "invalid turns_per_dialogue range {lo}..={hi}"
        )));
    }
    Ok((0..cfg.n_dialogues).map(|i| generate_one(cfg, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, turns: (usize, usize), seed: u64) -> GenerationConfig {
        GenerationConfig {
            n_dialogues: n,
            turns_per_dialogue: turns,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_dialogues(&cfg(1, (3, 3), 7)).unwrap();
        let b = generate_synthetic_dialogues(&cfg(1, (3, 3), 7)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].turns.len(), 3);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn seeds_differ_but_schema_holds() {
        let a = generate_synthetic_dialogues(&cfg(100, (5, 8), 1)).unwrap();
        let b = generate_synthetic_dialogues(&cfg(100, (5, 8), 2)).unwrap();
        assert_ne!(a, b);
        for d in a.iter().chain(&b) {
            d.validate().unwrap();
            assert!((5..=8).contains(&d.turns.len()));
        }
    }

    #[test]
    fn confirmations_repeat_values_the_user_gave_earlier() {
        let dialogues = generate_synthetic_dialogues(&cfg(300, (5, 8), 3)).unwrap();
        let vocab = Vocabulary::default();
        let all_values: Vec<&String> = vocab.values.values().flatten().collect();
        let mut checks = 0;
        for d in &dialogues {
            for (i, t) in d.turns.iter().enumerate() {
                let Some(rest) = t.user_text.strip_prefix("just to confirm it ") else {
                    continue;
                };
                checks += 1;
                let earlier: String = d.turns[..i].iter().map(|t| format!(" {} ", t.user_text)).collect();
                for v in all_values.iter().filter(|v| format!(" {rest} ").contains(&format!(" {v} "))) {
                    assert!(earlier.contains(&format!(" {v} ")), "{v} not stated before in {}", d.id);
                }
            }
        }
        assert!(checks > 30, "only {checks} confirmation turns");
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let mut c = cfg(1, (3, 3), 0);
        c.vocabulary.values.clear();
        assert!(matches!(
            generate_synthetic_dialogues(&c),
            Err(Error::Config(_))
        ));
    }
}
