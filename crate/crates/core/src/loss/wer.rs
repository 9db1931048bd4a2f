//! Word error rate: Levenshtein alignment with substitution / insertion /
//! deletion accounting, aggregated corpus-wide as count sums over total
//! reference length (never an average of per-sentence rates).

use super::GlossSequence;

/// Minimum-cost alignment counts between a reference and a hypothesis.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditAlignment {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// May exceed 1 when the hypothesis is longer than the reference.
    pub fn wer(&self) -> f64 {
        self.distance() as f64 / self.ref_len as f64
    }
}

/// Unit-cost Levenshtein DP. Among cost-equal alignments the backtrace
/// prefers substitution over deletion over insertion, so counts are
/// deterministic.
pub fn edit_alignment(reference: &GlossSequence, hypothesis: &GlossSequence) -> EditAlignment {
    let r = reference.ids();
    let h = hypothesis.ids();
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut out = EditAlignment {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[i * w + j];
        if i > 0 && j > 0 && cur == dp[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                out.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == dp[(i - 1) * w + j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Corpus-level rates: sums of counts over all pairs divided by the total
/// reference length. Lower is better.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct WerSummary {
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

pub fn wer(pairs: &[(GlossSequence, GlossSequence)]) -> Option<WerSummary> {
    let mut acc = WerSummary::default();
    for (reference, hypothesis) in pairs {
        let a = edit_alignment(reference, hypothesis);
        acc.substitutions += a.substitutions;
        acc.insertions += a.insertions;
        acc.deletions += a.deletions;
        acc.ref_len += a.ref_len;
    }
    if acc.ref_len == 0 {
        return None;
    }
    let total = acc.ref_len as f64;
    acc.wer = (acc.substitutions + acc.insertions + acc.deletions) as f64 / total;
    acc.del_rate = acc.deletions as f64 / total;
    acc.ins_rate = acc.insertions as f64 / total;
    Some(acc)
}

/// Plain Levenshtein distance with no backtrace. Kept textbook-simple and
/// independent of `edit_alignment` so tests can cross-check the two.
pub fn levenshtein_oracle(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
