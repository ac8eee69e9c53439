use std::collections::HashMap;

use crate::{Error, Result};

fn ngrams<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over whitespace tokens: geometric mean of clipped 1- to
/// 4-gram precisions times the brevity penalty, scaled to `[0, 100]`.
/// No smoothing: if any order has no match the score is 0.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("BLEU of an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(&h, n);
            let rc = ngrams(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_and_disjoint() {
        let refs = s(&["the cat sat on the mat", "a b c d e"]);
        assert_eq!(bleu(&refs, &refs).unwrap(), 100.0);
        assert_eq!(bleu(&s(&["x y z w"]), &s(&["a b c d"])).unwrap(), 0.0);
    }

    #[test]
    fn missing_fourgram_gives_zero() {
        assert_eq!(bleu(&s(&["a b c d"]), &s(&["a b c e"])).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&s(&["a"]), &[]).is_err());
    }
}
