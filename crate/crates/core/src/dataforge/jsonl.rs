use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Alphabet, PairMeta, PreferencePair};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    prompt: String,
    chosen: String,
    rejected: String,
    first_edit_index: Option<usize>,
    meta: PairMeta,
}

pub fn to_jsonl_line(pair: &PreferencePair) -> Result<String> {
    let record = Record {
        id: pair.id,
        prompt: Alphabet::decode(&pair.prompt)?,
        chosen: Alphabet::decode(&pair.chosen)?,
        rejected: Alphabet::decode(&pair.rejected)?,
        first_edit_index: pair.first_edit_index,
        meta: pair.meta.clone(),
    };
    serde_json::to_string(&record).map_err(|e| Error::Contract(format!("serialize pair: {e}")))
}

/// Parses one line; `line` is 1-based and only used in errors.
pub fn from_jsonl_line(text: &str, line: usize) -> Result<PreferencePair> {
    let r: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    PreferencePair::new(
        r.id,
        Alphabet::encode_prompt(&r.prompt)?,
        Alphabet::encode(&r.chosen)?,
        Alphabet::encode(&r.rejected)?,
        r.first_edit_index,
        r.meta,
    )
    .map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

pub fn write_jsonl_to<W: Write>(pairs: &[PreferencePair], mut out: W) -> Result<()> {
    let io = |e| Error::io("<jsonl>", e);
    for pair in pairs {
        writeln!(out, "{}", to_jsonl_line(pair)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_jsonl(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl_to(pairs, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads pairs back; blank lines are ignored.
pub fn read_jsonl_from<R: BufRead>(input: R) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(from_jsonl_line(&line, i + 1)?);
    }
    Ok(pairs)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{forge, DataConfig};

    #[test]
    fn round_trip() {
        let pairs = forge(&DataConfig {
            n_pairs: 25,
            ..DataConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&pairs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }

    #[test]
    fn line_format() {
        let pairs = forge(&DataConfig {
            n_pairs: 1,
            ..DataConfig::default()
        })
        .unwrap();
        let line = to_jsonl_line(&pairs[0]).unwrap();
        assert!(line.starts_with(r#"{"id":0,"prompt":"Q: "#), "{line}");
        assert!(line.contains(r#""meta":{"generator":"calc_chain","seed":"#));
    }

    #[test]
    fn missing_field_names_the_field_and_line() {
        let good = r#"{"id":0,"prompt":"Q: 01 + 02 + 03 = ?","chosen":"01","rejected":"02","first_edit_index":1,"meta":{"generator":"x","seed":1}}"#;
        let bad = r#"{"id":1,"prompt":"Q","chosen":"01","first_edit_index":null,"meta":{"generator":"x","seed":1}}"#;
        let text = format!("{good}\n{bad}\n");
        match read_jsonl_from(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("rejected"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_characters_are_listed() {
        let line = r#"{"id":0,"prompt":"Qé","chosen":"01","rejected":"0ü","first_edit_index":null,"meta":{"generator":"x","seed":1}}"#;
        match from_jsonl_line(line, 1) {
            Err(Error::Tokenize(chars)) => assert_eq!(chars, vec!['é']),
            other => panic!("{other:?}"),
        }
        let line = r#"{"id":0,"prompt":"Q","chosen":"01","rejected":"0ü","first_edit_index":null,"meta":{"generator":"x","seed":1}}"#;
        assert!(matches!(from_jsonl_line(line, 1), Err(Error::Tokenize(c)) if c == vec!['ü']));
    }
}
