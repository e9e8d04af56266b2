//! Token error rate via Levenshtein alignment.
//!
//! `edit_counts` runs the usual dynamic program with traceback so the error
//! total splits into substitutions, insertions and deletions. A separate
//! memoized recursive distance (`edit_distance_recursive`) exists purely to
//! cross-check the DP; it shares no code with it.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl WerCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimal-edit alignment counts between reference and hypothesis.
/// Tie preference during traceback: match/substitution, then deletion,
/// then insertion (any consistent choice yields the same total).
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> WerCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i;
    }
    for j in 0..=m {
        d[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[at(i, j)] = (d[at(i - 1, j - 1)] + sub_cost)
                .min(d[at(i - 1, j)] + 1)
                .min(d[at(i, j - 1)] + 1);
        }
    }
    let mut counts = WerCounts { substitutions: 0, insertions: 0, deletions: 0 };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[at(i, j)] == d[at(i - 1, j - 1)] + sub_cost {
                counts.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(counts.total(), d[at(n, m)]);
    counts
}

/// Error rate (S+I+D) / len(reference), with an empty reference scored
/// against a denominator of 1 so pure insertions still register.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> (f64, WerCounts) {
    let counts = edit_counts(reference, hypothesis);
    let rate = counts.total() as f64 / reference.len().max(1) as f64;
    (rate, counts)
}

/// Independent edit-distance oracle: plain recursion over suffixes with
/// memoization, no tabulation order shared with the DP above.
pub fn edit_distance_recursive(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut Vec<Option<usize>>) -> usize {
        let key = i * (b.len() + 1) + j;
        if let Some(v) = memo[key] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            let sub = go(a, b, i + 1, j + 1, memo);
            let del = go(a, b, i + 1, j, memo);
            let ins = go(a, b, i, j + 1, memo);
            1 + sub.min(del).min(ins)
        };
        memo[key] = Some(v);
        v
    }
    let mut memo = vec![None; (a.len() + 1) * (b.len() + 1)];
    go(a, b, 0, 0, &mut memo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identical_sequences_score_zero() {
        let (rate, counts) = wer(&[3, 1, 4, 1, 5], &[3, 1, 4, 1, 5]);
        assert_eq!(rate, 0.0);
        assert_eq!(counts.total(), 0);
    }

    #[test]
    fn single_substitution() {
        let (rate, counts) = wer(&[10, 11], &[10, 12]);
        assert_eq!(counts, WerCounts { substitutions: 1, insertions: 0, deletions: 0 });
        assert!((rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_deletions_one_match() {
        let (rate, counts) = wer(&[1, 2, 3], &[2]);
        assert_eq!(counts.total(), 2);
        assert_eq!(counts.deletions, 2);
        assert_eq!(counts.substitutions, 0);
        assert!((rate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let (rate, counts) = wer(&[], &[5, 6, 7]);
        assert_eq!(counts, WerCounts { substitutions: 0, insertions: 3, deletions: 0 });
        assert!((rate - 3.0).abs() < 1e-12);
        let (rate0, counts0) = wer(&[], &[]);
        assert_eq!(rate0, 0.0);
        assert_eq!(counts0.total(), 0);
    }

    #[test]
    fn empty_hypothesis_counts_deletions() {
        let (rate, counts) = wer(&[1, 2], &[]);
        assert_eq!(counts.deletions, 2);
        assert!((rate - 1.0).abs() < 1e-12);
    }

    fn random_seq(rng: &mut Rng, max_len: usize, vocab: usize) -> Vec<usize> {
        let len = rng.uniform_range(0, max_len as u64) as usize;
        (0..len).map(|_| 1 + rng.uniform_range(0, vocab as u64 - 1) as usize).collect()
    }

    #[test]
    fn dp_matches_recursive_oracle() {
        let mut rng = Rng::new(1301);
        for _ in 0..100 {
            let a = random_seq(&mut rng, 12, 6);
            let b = random_seq(&mut rng, 12, 6);
            let dp = edit_counts(&a, &b).total();
            let rec = edit_distance_recursive(&a, &b);
            assert_eq!(dp, rec, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn distance_symmetry_and_triangle() {
        let mut rng = Rng::new(1302);
        for _ in 0..50 {
            let a = random_seq(&mut rng, 10, 5);
            let b = random_seq(&mut rng, 10, 5);
            let c = random_seq(&mut rng, 10, 5);
            let dab = edit_counts(&a, &b).total();
            let dba = edit_counts(&b, &a).total();
            assert_eq!(dab, dba);
            let dac = edit_counts(&a, &c).total();
            let dcb = edit_counts(&c, &b).total();
            assert!(dab <= dac + dcb, "triangle violated: {dab} > {dac} + {dcb}");
        }
    }
}
