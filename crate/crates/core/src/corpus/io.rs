use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Dialogue;
use crate::error::{Error, Result};

/// One JSON object per line: `{"id", "turns": [{"index", "user_text",
/// "agent_text", "speech_ref"}]}`.
pub fn write_dialogues_jsonl(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dialogues_jsonl(path: &Path) -> Result<Vec<Dialogue>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dialogues = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        d.validate()?;
        dialogues.push(d);
    }
    Ok(dialogues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;

    #[test]
    fn jsonl_roundtrip_keeps_speech_refs() {
        let mut t = Turn::new(1, "hello there", "hi");
        t.speech_ref = Some("feats/d0_1.feat".into());
        let d = vec![Dialogue {
            id: "d0".into(),
            turns: vec![t, Turn::new(2, "bye", "")],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dialogues.jsonl");
        write_dialogues_jsonl(&p, &d).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"speech_ref\":\"feats/d0_1.feat\""));
        assert_eq!(read_dialogues_jsonl(&p).unwrap(), d);
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"turns\":[]}\nnot json\n").unwrap();
        let err = read_dialogues_jsonl(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
