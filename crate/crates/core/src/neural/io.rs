//! Binary model files.
//!
//! Layout (little endian): magic `SSLFMDL\0`, format version `u32`, five
//! `u32` dimensions, three `u64` vocabulary hashes (words, intents, tags),
//! the three vocabularies as `u32` counts of `u32`-length-prefixed UTF-8
//! strings, a `u64` parameter count, then the parameters as `f64`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{Model, ModelVocab};
use super::params::{ModelDims, ModelParams};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSLFMDL\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn vocab_hash<S: AsRef<str>>(items: &[S]) -> u64 {
    let mut h = Sha256::new();
    for s in items {
        h.update((s.as_ref().len() as u32).to_le_bytes());
        h.update(s.as_ref().as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn put_strings(out: &mut Vec<u8>, items: &[String]) {
    out.extend((items.len() as u32).to_le_bytes());
    for s in items {
        out.extend((s.len() as u32).to_le_bytes());
        out.extend(s.as_bytes());
    }
}

pub fn encode_model(m: &Model) -> Vec<u8> {
    let d = m.params.dims();
    let mut out = Vec::with_capacity(64 + m.params.len() * 8);
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    for x in [d.vocab_size, d.emb_dim, d.hidden, d.n_intents, d.n_tags] {
        out.extend((x as u32).to_le_bytes());
    }
    out.extend(vocab_hash(m.vocab.words()).to_le_bytes());
    out.extend(vocab_hash(m.vocab.intents.as_slice()).to_le_bytes());
    out.extend(vocab_hash(m.vocab.tags.as_slice()).to_le_bytes());
    put_strings(&mut out, m.vocab.words());
    put_strings(&mut out, m.vocab.intents.as_slice());
    put_strings(&mut out, m.vocab.tags.as_slice());
    out.extend((m.params.len() as u64).to_le_bytes());
    for x in m.params.as_slice() {
        out.extend(x.to_le_bytes());
    }
    out
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated model file".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let mut buf = vec![0u8; len];
            self.0
                .read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated string".into()))?;
            out.push(String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8".into()))?);
        }
        Ok(out)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut dim = [0usize; 5];
    for x in dim.iter_mut() {
        *x = r.u32()? as usize;
    }
    let dims = ModelDims {
        vocab_size: dim[0],
        emb_dim: dim[1],
        hidden: dim[2],
        n_intents: dim[3],
        n_tags: dim[4],
    };
    let hashes = [r.u64()?, r.u64()?, r.u64()?];
    let words = r.strings()?;
    let intents = r.strings()?;
    let tags = r.strings()?;
    for (h, items, name) in [
        (hashes[0], &words, "word"),
        (hashes[1], &intents, "intent"),
        (hashes[2], &tags, "tag"),
    ] {
        if vocab_hash(items) != h {
            return Err(Error::Format(format!("{name} vocabulary hash mismatch")));
        }
    }
    if words.len() != dims.vocab_size || tags.len() != dims.n_tags {
        return Err(Error::Format("vocabulary sizes disagree with dimensions".into()));
    }
    let n = r.u64()? as usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(r.bytes()?));
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    let params = ModelParams::from_data(dims, data)?;
    let mut vocab = ModelVocab::new(words, LabelSet::from_labels(intents), LabelSet::from_labels(tags));
    vocab.rebuild_index();
    Ok(Model { vocab, params })
}

pub fn save_model(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Replaces embedding rows of known words with vectors from a text file of
/// `word v1 v2 ...` lines (an optional `count dim` header line is skipped).
/// Returns the number of rows replaced.
pub fn load_pretrained_embeddings(m: &mut Model, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = m.params.dims().emb_dim;
    let mut replaced = 0;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: "non-numeric embedding value".into(),
            })?;
        if i == 0 && values.len() == 1 {
            continue;
        }
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = m.vocab.word_id(word);
        if id != 0 || word == super::model::UNK {
            m.params.embedding_mut(id).copy_from_slice(&values);
            replaced += 1;
        }
    }
    Ok(replaced)
}
