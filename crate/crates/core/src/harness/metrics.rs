//! Edit-distance error rates, corpus BLEU and token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

/// Levenshtein alignment counts with unit costs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_len += o.ref_len;
    }

    /// Errors per reference token; an empty reference gives 0 if the
    /// hypothesis is empty too, else infinity.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.ref_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

/// Minimum-cost alignment; among equal-cost alignments the backtrace
/// prefers a match or substitution, then a deletion, then an insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in d[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        ref_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Summed counts over a corpus of token sequences.
pub fn corpus_counts<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> EditCounts {
    let mut total = EditCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&edit_distance(r, h));
    }
    total
}

/// Word error rate over whitespace-separated words.
pub fn wer(refs: &[&str], hyps: &[&str]) -> f64 {
    fn split<'a>(s: &[&'a str]) -> Vec<Vec<&'a str>> {
        s.iter().map(|x| x.split_whitespace().collect()).collect()
    }
    corpus_counts(&split(refs), &split(hyps)).rate()
}

/// Character error rate; whitespace is ignored.
pub fn cer(refs: &[&str], hyps: &[&str]) -> f64 {
    let split = |s: &[&str]| {
        s.iter()
            .map(|x| x.chars().filter(|c| !c.is_whitespace()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    corpus_counts(&split(refs), &split(hyps)).rate()
}

fn ngrams<T: Hash + Eq + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Per-order clipped matches and hypothesis n-gram totals.
pub fn bleu_stats<T: Hash + Eq + Clone>(refs: &[Vec<T>], hyps: &[Vec<T>], max_n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    for (r, h) in refs.iter().zip(hyps) {
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    (matches, totals)
}

/// Corpus BLEU in `[0, 1]`: geometric mean of n-gram precisions times the
/// brevity penalty. Orders `n ≥ 2` use add-one smoothing.
pub fn bleu<T: Hash + Eq + Clone>(refs: &[Vec<T>], hyps: &[Vec<T>], max_n: usize) -> f64 {
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 || max_n == 0 {
        return 0.0;
    }
    let (m, t) = bleu_stats(refs, hyps, max_n);
    let mut log_p = 0.0;
    for n in 0..max_n {
        let s = if n == 0 { 0.0 } else { 1.0 };
        let p = (m[n] as f64 + s) / (t[n] as f64 + s);
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln() / max_n as f64;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Fraction of positions where hypothesis and reference agree, over the
/// summed reference lengths.
pub fn token_accuracy<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        hit += r.iter().zip(h).filter(|(a, b)| a == b).count();
        n += r.len();
    }
    if n == 0 {
        1.0
    } else {
        hit as f64 / n as f64
    }
}
