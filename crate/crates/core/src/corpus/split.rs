use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Largest-remainder allocation of `n` items over `fractions`.
fn allocate(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Splits `d` so that each intent's share of every split matches `fractions`
/// to within one utterance. Utterances keep their original relative order
/// inside each split.
pub fn stratified_split(d: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }

    let mut groups: Vec<(Option<&str>, Vec<usize>)> = Vec::new();
    for (i, u) in d.utterances.iter().enumerate() {
        let key = u.intent.as_deref();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (_, members) in groups.iter_mut() {
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), fractions);
        let mut start = 0;
        for (split, c) in counts.into_iter().enumerate() {
            assigned[split].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }

    Ok(assigned
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            Dataset {
                utterances: idx.into_iter().map(|i| d.utterances[i].clone()).collect(),
                intent_vocab: d.intent_vocab.clone(),
                tag_vocab: d.tag_vocab.clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{toks, Utterance};

    fn two_intents(n: usize) -> Dataset {
        let utts = (0..n)
            .map(|i| {
                let intent = if i % 2 == 0 { "A" } else { "B" };
                Utterance::labeled(format!("u{i:03}"), toks(&["w"]), intent, toks(&["O"]))
            })
            .collect();
        Dataset::new(utts).unwrap()
    }

    fn count(d: &Dataset, intent: &str) -> usize {
        d.iter().filter(|u| u.intent.as_deref() == Some(intent)).count()
    }

    #[test]
    fn identity_partition() {
        let d = two_intents(10);
        let parts = stratified_split(&d, &[1.0], 3).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], d);
    }

    #[test]
    fn eighty_twenty() {
        let d = two_intents(100);
        let parts = stratified_split(&d, &[0.8, 0.2], 9).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        assert_eq!((count(&parts[0], "A"), count(&parts[0], "B")), (40, 40));
        assert_eq!((count(&parts[1], "A"), count(&parts[1], "B")), (10, 10));
    }

    #[test]
    fn bad_sum() {
        let d = two_intents(10);
        assert!(matches!(
            stratified_split(&d, &[0.5, 0.6], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_and_partitioning() {
        let d = two_intents(37);
        let a = stratified_split(&d, &[0.5, 0.3, 0.2], 5).unwrap();
        let b = stratified_split(&d, &[0.5, 0.3, 0.2], 5).unwrap();
        assert_eq!(a, b);
        let total: usize = a.iter().map(Dataset::len).sum();
        assert_eq!(total, 37);
        for (part, f) in a.iter().zip([0.5, 0.3, 0.2]) {
            for intent in ["A", "B"] {
                let n = count(&d, intent) as f64;
                assert!((count(part, intent) as f64 - n * f).abs() <= 1.0);
            }
        }
    }
}
