use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Dataset, Utterance};
use crate::error::{Error, Result};

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut utterances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        u.validate()
            .map_err(|e| Error::Validation(format!("line {lineno}: {e}")))?;
        utterances.push(u);
    }
    Dataset::new(utterances)
}

pub fn save_jsonl(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(d, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<W: Write>(d: &Dataset, w: &mut W) -> Result<()> {
    for u in &d.utterances {
        serde_json::to_writer(&mut *w, u)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let src = r#"{"id":"1","tokens":["play","jazz"],"intent":"PlayMusic","tags":["O","B-Genre"]}"#;
        let d = read_jsonl(src.as_bytes()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.intent_vocab.as_slice(), &["PlayMusic".to_string()]);
        assert!(d.tag_vocab.contains("B-Genre"));
    }

    #[test]
    fn length_mismatch_is_validation_error() {
        let src = r#"{"id":"1","tokens":["play","jazz"],"intent":"PlayMusic","tags":["O"]}"#;
        assert!(matches!(read_jsonl(src.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let src = "{\"id\":\"1\",\"tokens\":[\"a\"]}\n{not json}\n";
        match read_jsonl(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_labeled_and_unlabeled() {
        let src = concat!(
            r#"{"id":"a","tokens":["wake","me"],"intent":"SetAlarm","tags":["O","O"]}"#,
            "\n",
            r#"{"id":"b","tokens":["hello"],"intent":null,"tags":null}"#,
            "\n",
            r#"{"id":"c","tokens":["play","it"],"intent":"PlayMusic","tags":["O","B-Song"],"domain":"music"}"#,
            "\n"
        );
        let d = read_jsonl(src.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(
            d.intent_vocab.as_slice(),
            &["SetAlarm".to_string(), "PlayMusic".to_string()]
        );
        assert_eq!(d.tag_vocab.len(), 2);
        assert!(!d.utterances[1].is_labeled());
    }

    #[test]
    fn writes_explicit_nulls() {
        let d = Dataset::new(vec![Utterance::unlabeled("x", vec!["a".into()])]).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&d, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"id":"x","tokens":["a"],"intent":null,"tags":null,"domain":null}"#
        );
    }
}
