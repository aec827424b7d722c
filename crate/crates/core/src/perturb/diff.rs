//! Longest-common-subsequence alignment and diff-derived token labels.

/// Matched `(original, perturbed)` index pairs of a longest common
/// subsequence. Ties prefer advancing through the original first, so the
/// alignment is a pure function of the two sequences.
pub fn lcs_alignment<T: PartialEq>(original: &[T], perturbed: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (original.len(), perturbed.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[at(i, j)] = if original[i] == perturbed[j] {
                dp[at(i + 1, j + 1)] + 1
            } else {
                dp[at(i + 1, j)].max(dp[at(i, j + 1)])
            };
        }
    }
    let mut pairs = Vec::with_capacity(dp[at(0, 0)] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if original[i] == perturbed[j] && dp[at(i, j)] == dp[at(i + 1, j + 1)] + 1 {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if dp[at(i + 1, j)] >= dp[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Per-token labels of `perturbed` relative to `original`.
///
/// Aligned tokens are good. An unaligned token is still good when an identical
/// original token, itself unaligned, sits within `window` positions of the
/// alignment frontier (one past the original index of the previous match).
pub fn label_tokens<T: PartialEq>(original: &[T], perturbed: &[T], window: usize) -> Vec<u8> {
    let pairs = lcs_alignment(original, perturbed);
    let mut orig_aligned = vec![false; original.len()];
    let mut labels = vec![0u8; perturbed.len()];
    let mut frontier_of = vec![0usize; perturbed.len()];
    let mut next_pair = 0;
    let mut frontier = 0;
    for (j, slot) in frontier_of.iter_mut().enumerate() {
        if next_pair < pairs.len() && pairs[next_pair].1 == j {
            let (i, _) = pairs[next_pair];
            orig_aligned[i] = true;
            labels[j] = 1;
            frontier = i + 1;
            next_pair += 1;
        }
        *slot = frontier;
    }
    for j in 0..perturbed.len() {
        if labels[j] == 1 {
            continue;
        }
        let f = frontier_of[j];
        let lo = f.saturating_sub(window);
        let hi = (f + window).min(original.len().saturating_sub(1));
        if lo <= hi && (lo..=hi).any(|k| !orig_aligned[k] && original[k] == perturbed[j]) {
            labels[j] = 1;
        }
    }
    labels
}

/// Positions changed by the diff: unaligned original and unaligned perturbed indices.
pub fn changed_positions<T: PartialEq>(original: &[T], perturbed: &[T]) -> (Vec<usize>, Vec<usize>) {
    let pairs = lcs_alignment(original, perturbed);
    let mut orig = vec![true; original.len()];
    let mut pert = vec![true; perturbed.len()];
    for (i, j) in pairs {
        orig[i] = false;
        pert[j] = false;
    }
    let pick = |v: Vec<bool>| v.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i).collect();
    (pick(orig), pick(pert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_substitution() {
        assert_eq!(label_tokens(&["a", "red", "mug"], &["a", "green", "mug"], 3), vec![1, 0, 1]);
    }

    #[test]
    fn identity_is_all_ones() {
        let s = ["the", "cat", "is", "left", "of", "the", "table", "."];
        assert_eq!(label_tokens(&s, &s, 3), vec![1; s.len()]);
    }

    #[test]
    fn appended_sentence_is_all_zero() {
        let o = ["a", "red", "mug", "."];
        let p = ["a", "red", "mug", ".", "there", "is", "no", "red", "mug", "."];
        assert_eq!(label_tokens(&o, &p, 3), vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn unaligned_duplicate_near_frontier_is_rescued() {
        // "x" moves one step; LCS keeps "a b" and leaves both copies of "x" unaligned.
        assert_eq!(label_tokens(&["x", "a", "b"], &["a", "x", "b"], 3), vec![1, 1, 1]);
        assert_eq!(label_tokens(&["x", "a", "b"], &["a", "x", "b"], 0), vec![1, 0, 1]);
    }

    #[test]
    fn alignment_has_lcs_length() {
        let pairs = lcs_alignment(&"ABCBDAB".chars().collect::<Vec<_>>(), &"BDCABA".chars().collect::<Vec<_>>());
        assert_eq!(pairs.len(), 4);
    }

    proptest! {
        #[test]
        fn alignment_is_monotone_and_matching(a in prop::collection::vec(0u8..4, 0..20), b in prop::collection::vec(0u8..4, 0..20)) {
            let pairs = lcs_alignment(&a, &b);
            for w in pairs.windows(2) {
                prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
            }
            for &(i, j) in &pairs {
                prop_assert_eq!(a[i], b[j]);
            }
            prop_assert_eq!(label_tokens(&a, &a, 3), vec![1u8; a.len()]);
        }
    }
}
