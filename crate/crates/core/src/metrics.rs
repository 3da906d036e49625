use crate::error::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance over reference length; may exceed 1.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("error rate needs a nonempty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level rate: total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let words: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if words == 0 {
        return Err(Error::Input("error rate needs nonempty references".into()));
    }
    let edits: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    Ok(edits as f64 / words as f64)
}

fn ngram_counts<T: Hash + Eq>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 in `[0, 100]`.
///
/// Clipped n-gram matches are summed over the corpus. A zero unigram
/// precision gives 0; a zero higher-order precision is replaced by
/// `1 / (total + 1)`.
pub fn bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Input("BLEU needs a nonempty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((100.0 * bp * log_p.exp()).min(100.0))
}

/// BLEU over whitespace-tokenized sentences.
pub fn bleu_text(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    let split = |s: &[&str]| -> Vec<Vec<String>> {
        s.iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hyps), &split(refs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&words("a x c"), &words("a b c")).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&words("a b c"), &words("a")).unwrap(), 2.0);
        assert_eq!(wer(&words(""), &words("a b")).unwrap(), 1.0);
        assert!(wer(&words("a"), &words("")).is_err());
    }

    #[test]
    fn bleu_examples() {
        let b = bleu_text(&["a b c d e"], &["a b c d"]).unwrap();
        let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((b - expected).abs() < 1e-9);
        assert!((b - 66.9).abs() < 0.05);
        assert_eq!(bleu_text(&["x y z"], &["a b c"]).unwrap(), 0.0);
        let same = ["the cat sat on the mat", "a b"];
        assert_eq!(bleu_text(&same, &same).unwrap(), 100.0);
        assert!(bleu_text(&[], &[]).is_err());
        assert!(bleu_text(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn bleu_ignores_sentence_order() {
        let h = ["a b c d", "e f g", "a a b"];
        let r = ["a b c e", "e f g h", "a b b"];
        let forward = bleu_text(&h, &r).unwrap();
        let backward = bleu_text(&[h[2], h[0], h[1]], &[r[2], r[0], r[1]]).unwrap();
        assert_eq!(forward, backward);
        assert!(forward > 0.0 && forward < 100.0);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let full = bleu_text(&["a b c d e f"], &["a b c d e f"]).unwrap();
        let short = bleu_text(&["a b c d"], &["a b c d e f"]).unwrap();
        assert!(short < full);
        let bp = (1.0f64 - 6.0 / 4.0).exp();
        assert!((short - 100.0 * bp).abs() < 1e-9);
    }
}
