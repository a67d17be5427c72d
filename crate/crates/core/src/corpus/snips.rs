//! Loader for the public SNIPS benchmark layout: one JSON file per intent,
//! `{"<Intent>": [{"data": [{"text": "..", "entity": ".."}, ..]}, ..]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Dataset, Utterance, OUTSIDE};
use crate::error::{Error, Result};

pub const SNIPS_INTENTS: [&str; 7] = [
    "AddToPlaylist",
    "BookRestaurant",
    "GetWeather",
    "PlayMusic",
    "RateBook",
    "SearchCreativeWork",
    "SearchScreeningEvent",
];

#[derive(Deserialize)]
struct Query {
    data: Vec<Chunk>,
}

#[derive(Deserialize)]
struct Chunk {
    text: String,
    #[serde(default)]
    entity: Option<String>,
}

fn candidates(dir: &Path, intent: &str, prefix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let names = if prefix == "train" {
        vec![format!("train_{intent}_full.json"), format!("train_{intent}.json")]
    } else {
        vec![format!("{prefix}_{intent}.json")]
    };
    for name in names {
        out.push(dir.join(intent).join(&name));
        out.push(dir.join(&name));
    }
    out
}

fn find_file(dir: &Path, intent: &str, prefix: &str) -> Option<PathBuf> {
    candidates(dir, intent, prefix).into_iter().find(|p| p.is_file())
}

fn parse_intent_file(path: &Path, intent: &str, start_id: usize) -> Result<Vec<Utterance>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // A few of the public files are not valid UTF-8.
    let text = String::from_utf8_lossy(&bytes);
    let parsed: BTreeMap<String, Vec<Query>> = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let queries = parsed
        .get(intent)
        .ok_or_else(|| Error::Load(format!("{} has no `{intent}` key", path.display())))?;
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for chunk in &q.data {
            let words: Vec<String> = chunk
                .text
                .split_whitespace()
                .map(str::to_lowercase)
                .collect();
            for (wi, w) in words.into_iter().enumerate() {
                let tag = match &chunk.entity {
                    Some(ent) if wi == 0 => format!("B-{ent}"),
                    Some(ent) => format!("I-{ent}"),
                    None => OUTSIDE.to_string(),
                };
                tokens.push(w);
                tags.push(tag);
            }
        }
        if tokens.is_empty() {
            continue;
        }
        out.push(
            Utterance::labeled(format!("snips-{:06}", start_id + qi), tokens, intent, tags)
                .with_domain("snips"),
        );
    }
    Ok(out)
}

fn load_split(dir: &Path, prefix: &str, strict: bool) -> Result<Dataset> {
    let mut missing = Vec::new();
    let mut found = Vec::new();
    for intent in SNIPS_INTENTS {
        match find_file(dir, intent, prefix) {
            Some(p) => found.push((intent, p)),
            None => missing.push(intent),
        }
    }
    if found.is_empty() || (strict && !missing.is_empty()) {
        return Err(Error::Load(format!(
            "{}: missing SNIPS intent files for {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let mut utts = Vec::new();
    for (intent, path) in found {
        let next = utts.len();
        utts.extend(parse_intent_file(&path, intent, next)?);
    }
    Dataset::new(utts)
}

/// Loads whichever of the seven SNIPS intent files are present under `dir`
/// (`train_<Intent>_full.json`, falling back to `train_<Intent>.json`).
/// Fails when none are present.
pub fn load_snips(dir: impl AsRef<Path>) -> Result<Dataset> {
    load_split(dir.as_ref(), "train", false)
}

/// Requires all seven intents; `prefix` is `train` or `validate`.
pub fn load_snips_strict(dir: impl AsRef<Path>, prefix: &str) -> Result<Dataset> {
    load_split(dir.as_ref(), prefix, true)
}
