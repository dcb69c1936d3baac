use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ctxasr::audio::{apply_noise, mask_audio, measured_snr_db, FeatureSequence, MaskConfig, NoiseConfig};
use ctxasr::corpus::{ContextWindow, Role};
use ctxasr::eval::{evaluate, ContextMode, EvalOptions, MetricsReport};
use ctxasr::model::Checkpoint;
use ctxasr::run::{self, AsrKind, RunConfig};
use ctxasr::textnorm::{corpus_counts, normalize};
use ctxasr::training::{word_drop, CnrlVariant, WordDropConfig};
use ctxasr::{seed, Error};

mod plot;

/// Exit status for configuration errors (also used by argument parsing).
const EXIT_CONFIG: u8 = 2;
/// Exit status for a failed stage or any other runtime error.
const EXIT_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "ctxasr", version, about = "Context-aware dialogue speech recognition")]
struct Cli {
    /// Run configuration (JSON). Defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Pretrained,
    SpeechOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseArg {
    Random,
    Pretrained,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective run configuration.
    Config,
    /// Generate dialogues, speech features and splits.
    GenData,
    /// Text-only pre-training of the context encoder and decoder.
    Pretrain,
    /// Fine-tune a recognizer.
    Finetune {
        /// Decoder initialization; defaults to `flags.decoder_init`.
        #[arg(long, value_enum)]
        init: Option<InitArg>,
    },
    /// Transcribe the training split fold by fold to collect noisy contexts.
    GenNoisy,
    /// Filter noisy contexts and build a CNRL training set.
    BuildCnrl {
        /// S1, S2, S3 or S4; defaults to `cnrl_variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Fine-tune the context encoder of a recognizer on noisy contexts.
    Cnrl {
        #[arg(long, value_enum, default_value = "pretrained")]
        base: BaseArg,
    },
    /// Fine-tune the whole recognizer on S4 contexts.
    FullFinetuneS4,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated conditions, e.g. `clean,20,0`.
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<String>>,
        /// Condition on reference transcripts instead of the model's own.
        #[arg(long)]
        ground_truth_context: bool,
        /// BOS-only contexts.
        #[arg(long, conflicts_with = "ground_truth_context")]
        no_context: bool,
        /// Directory for the metrics JSON, per-turn CSV and SVG plot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus WER of line-aligned reference and hypothesis files.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Add noise from the run's noise bank to a feature file.
    MixNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        snr: f64,
        /// Key selecting the clip and offset.
        #[arg(long, default_value = "0")]
        key: String,
    },
    /// Apply training-time chunk masking to a feature file.
    Mask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Probability that the sample is masked.
        #[arg(long, default_value_t = 0.10)]
        p: f64,
        /// Fraction of the duration to mask.
        #[arg(long, default_value_t = 0.20)]
        frac: f64,
        #[arg(long, default_value_t = 0)]
        key: u64,
    },
    /// Delete words from user utterances (one per line) until a target WER.
    CorruptText {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        target_wer: Option<f64>,
        #[arg(long)]
        per_word_p: Option<f64>,
    },
    /// Run every stage and write the combined report.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.apply_env_overrides();
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_manifest(m: &run::StageManifest) -> Result<()> {
    print_json(&serde_json::json!({
        "stage": m.stage,
        "manifest": m.self_ref,
        "outputs": m.outputs.len(),
        "selected_epoch": m.selected_epoch,
        "selected_metric": m.selected_metric,
        "summary": m.summary,
    }))
}

fn parse_conditions(list: &[String], cfg: &RunConfig) -> Result<Vec<NoiseConfig>> {
    list.iter()
        .map(|s| {
            let s = s.trim();
            if s.eq_ignore_ascii_case("clean") || s.eq_ignore_ascii_case("no_noise") {
                Ok(NoiseConfig::clean())
            } else {
                let db: f64 = s.parse().map_err(|_| Error::config(format!("bad SNR value {s:?}")))?;
                if !db.is_finite() {
                    return Err(Error::config(format!("SNR must be finite, got {s}")).into());
                }
                Ok(NoiseConfig::at_snr(db, cfg.noise_bank_seed()))
            }
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    snr: Option<&[String]>,
    mode: ContextMode,
    out: Option<&Path>,
) -> Result<()> {
    let corpus = run::load_corpus(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.vocab != corpus.vocab {
        bail!(Error::precondition("checkpoint vocabulary differs from the corpus"));
    }
    let conditions = match snr {
        Some(list) => parse_conditions(list, cfg)?,
        None => cfg.noise_conditions(),
    };
    if conditions.is_empty() {
        bail!(Error::config("no evaluation conditions"));
    }
    let bank = run::noise_bank(cfg);
    let label = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let report = evaluate(
        &ckpt.model,
        &ckpt.vocab,
        &corpus.test(),
        &conditions,
        &EvalOptions {
            label: label.clone(),
            mode,
            bank: &bank,
            seed: run::eval_seed(cfg),
            checkpoint: Some(ctxasr::model::file_digest(checkpoint)?),
        },
    )?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.reports.clone());
    write_eval_outputs(&dir, &label, &report)?;
    print_json(&serde_json::json!({ "model": label, "wer": report.wers(), "out": dir }))
}

fn write_eval_outputs(dir: &Path, label: &str, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(format!("{label}.metrics.json")), report.to_json()?)?;
    std::fs::write(dir.join(format!("{label}.turns.csv")), report.per_turn_csv())?;
    plot::wer_by_turn(&dir.join(format!("{label}.wer_by_turn.svg")), report)?;
    Ok(())
}

fn cmd_wer(reference: &Path, hyp: &Path) -> Result<()> {
    let refs = read_lines(reference)?;
    let hyps = read_lines(hyp)?;
    if refs.len() != hyps.len() {
        bail!(Error::invalid(format!(
            "{} reference lines vs {} hypothesis lines",
            refs.len(),
            hyps.len()
        )));
    }
    let pairs: Vec<(&str, &str)> = refs.iter().map(String::as_str).zip(hyps.iter().map(String::as_str)).collect();
    let c = corpus_counts(&pairs)?;
    print_json(&serde_json::json!({
        "wer": c.rate(),
        "S": c.substitutions,
        "D": c.deletions,
        "I": c.insertions,
        "N": c.ref_words,
    }))
}

fn cmd_mix_noise(cfg: &RunConfig, input: &Path, output: &Path, snr: f64, key: &str) -> Result<()> {
    if !snr.is_finite() {
        bail!(Error::config("SNR must be finite"));
    }
    let signal = FeatureSequence::load(input)?;
    let bank = run::noise_bank(cfg);
    let noise = NoiseConfig::at_snr(snr, cfg.noise_bank_seed());
    let mut rng = seed::rng(cfg.seed, "mix_noise", seed::string_id(key));
    let mixed = apply_noise(&signal, &noise, &bank, &mut rng)?;
    mixed.save(output)?;
    print_json(&serde_json::json!({ "snr_db": snr, "measured_snr_db": measured_snr_db(&signal, &mixed) }))
}

fn cmd_mask(cfg: &RunConfig, input: &Path, output: &Path, p: f64, frac: f64, key: u64) -> Result<()> {
    let mask = MaskConfig {
        select_prob: p,
        mask_fraction: frac,
        ..cfg.mask
    };
    mask.validate()?;
    let features = FeatureSequence::load(input)?;
    let (masked, report) = mask_audio(&features, &mask, &mut seed::rng(cfg.seed, "mask", key));
    masked.save(output)?;
    print_json(&report)
}

fn cmd_corrupt_text(
    cfg: &RunConfig,
    input: &Path,
    output: Option<&Path>,
    target_wer: Option<f64>,
    per_word_p: Option<f64>,
) -> Result<()> {
    let lines: Vec<String> = read_lines(input)?
        .iter()
        .map(|l| normalize(l))
        .filter(|l| !l.is_empty())
        .collect();
    let window = ContextWindow {
        entries: lines.iter().map(|l| (Role::User, l.clone())).collect(),
        token_ids: Vec::new(),
    };
    let wd = WordDropConfig {
        target_wer: target_wer.unwrap_or(cfg.word_drop.target_wer),
        per_word_p: per_word_p.unwrap_or(cfg.word_drop.per_word_p),
        ..cfg.word_drop
    };
    let outcome = word_drop(&window, &wd, &mut seed::rng(cfg.seed, "corrupt_text", 0))?;
    let text: String = outcome.context.user_texts().map(|t| format!("{t}\n")).collect();
    match output {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    eprintln!(
        "{}",
        serde_json::json!({ "achieved_wer": outcome.achieved_wer, "deletions": outcome.deletions, "rounds": outcome.rounds })
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Config => print_json(&cfg),
        Command::GenData => print_manifest(&run::gen_data(&cfg)?),
        Command::Pretrain => print_manifest(&run::pretrain(&cfg)?),
        Command::Finetune { init } => {
            let kind = match init {
                Some(InitArg::Random) => AsrKind::Random,
                Some(InitArg::Pretrained) => AsrKind::Pretrained,
                Some(InitArg::SpeechOnly) => AsrKind::SpeechOnly,
                None => AsrKind::from(cfg.flags.decoder_init),
            };
            print_manifest(&run::finetune(&cfg, kind)?)
        }
        Command::GenNoisy => print_manifest(&run::gen_noisy(&cfg)?),
        Command::BuildCnrl { variant } => {
            let v = match variant {
                Some(s) => s.parse::<CnrlVariant>()?,
                None => cfg.cnrl_variant,
            };
            print_manifest(&run::build_cnrl(&cfg, v)?)
        }
        Command::Cnrl { base } => {
            let kind = match base {
                BaseArg::Random => AsrKind::Random,
                BaseArg::Pretrained => AsrKind::Pretrained,
            };
            print_manifest(&run::cnrl(&cfg, kind)?)
        }
        Command::FullFinetuneS4 => print_manifest(&run::full_finetune_s4(&cfg)?),
        Command::Eval {
            checkpoint,
            snr,
            ground_truth_context,
            no_context,
            out,
        } => {
            let mode = if *no_context {
                ContextMode::None
            } else if *ground_truth_context || cfg.flags.use_ground_truth_context {
                ContextMode::GroundTruth
            } else {
                ContextMode::Autoregressive
            };
            cmd_eval(&cfg, checkpoint, snr.as_deref(), mode, out.as_deref())
        }
        Command::Wer { reference, hyp } => cmd_wer(reference, hyp),
        Command::MixNoise {
            input,
            output,
            snr,
            key,
        } => cmd_mix_noise(&cfg, input, output, *snr, key),
        Command::Mask {
            input,
            output,
            p,
            frac,
            key,
        } => cmd_mask(&cfg, input, output, *p, *frac, *key),
        Command::CorruptText {
            input,
            output,
            target_wer,
            per_word_p,
        } => cmd_corrupt_text(&cfg, input, output.as_deref(), *target_wer, *per_word_p),
        Command::Pipeline => {
            let report = run::run_pipeline(&cfg)?;
            print_json(&report.models)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}
