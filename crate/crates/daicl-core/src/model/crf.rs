//! Linear-chain CRF: forward-algorithm likelihood, marginals for the
//! backward pass, and Viterbi decoding.
//!
//! A path `y` over `K` tags scores
//! `start[y_1] + Σ_i em[i, y_i] + Σ_i trans[y_i, y_{i+1}] + end[y_n]`,
//! and the negative log-likelihood is `logZ − score(y)` with `logZ` computed
//! by the forward recursion in log space.

use alloc::vec;
use alloc::vec::Vec;

use super::mat::Mat;
use super::ModelError;

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| libm::exp(x - m)).sum();
    m + libm::log(s)
}

fn check_inputs(em: &Mat, trans: &Mat, start: &Mat, end: &Mat) -> Result<usize, ModelError> {
    let k = em.cols;
    if trans.rows != k || trans.cols != k || start.cols != k || end.cols != k {
        return Err(ModelError::ShapeMismatch("crf parameter shapes"));
    }
    if em.rows == 0 {
        return Err(ModelError::ShapeMismatch("crf needs at least one position"));
    }
    Ok(k)
}

/// Score of one tag path.
pub fn path_score(em: &Mat, trans: &Mat, start: &Mat, end: &Mat, tags: &[usize]) -> f64 {
    let n = tags.len();
    let mut s = start.at(0, tags[0]) + end.at(0, tags[n - 1]);
    for (i, &t) in tags.iter().enumerate() {
        s += em.at(i, t);
    }
    for w in tags.windows(2) {
        s += trans.at(w[0], w[1]);
    }
    s
}

/// Log-partition via the forward algorithm.
pub fn log_partition(em: &Mat, trans: &Mat, start: &Mat, end: &Mat) -> f64 {
    let (n, k) = (em.rows, em.cols);
    let mut alpha: Vec<f64> = (0..k).map(|t| start.at(0, t) + em.at(0, t)).collect();
    let mut scratch = vec![0.0; k];
    for i in 1..n {
        let mut next = vec![0.0; k];
        for (t, slot) in next.iter_mut().enumerate() {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = alpha[j] + trans.at(j, t);
            }
            *slot = em.at(i, t) + logsumexp(&scratch);
        }
        alpha = next;
    }
    for (t, a) in alpha.iter_mut().enumerate() {
        *a += end.at(0, t);
    }
    logsumexp(&alpha)
}

/// Negative log-likelihood of `tags` given emissions and CRF parameters.
pub fn crf_nll(
    em: &Mat,
    trans: &Mat,
    start: &Mat,
    end: &Mat,
    tags: &[usize],
) -> Result<f64, ModelError> {
    let k = check_inputs(em, trans, start, end)?;
    if tags.len() != em.rows {
        return Err(ModelError::ShapeMismatch("tags vs emission rows"));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(ModelError::BadTag { tag: bad, k });
    }
    Ok(log_partition(em, trans, start, end) - path_score(em, trans, start, end, tags))
}

/// Gradients of `upstream · nll` with respect to all CRF inputs, via the
/// forward-backward marginals: `d logZ / d em[i,t] = P(y_i = t)`, and the
/// observed path subtracts one at its own features.
#[allow(clippy::type_complexity)]
pub fn crf_nll_backward(
    em: &Mat,
    trans: &Mat,
    start: &Mat,
    end: &Mat,
    tags: &[usize],
    upstream: f64,
) -> (Mat, Mat, Mat, Mat) {
    let (n, k) = (em.rows, em.cols);

    // alpha[i][t]: log sum over paths ending at i with tag t (emissions
    // included up to i, start included).
    let mut alpha = Mat::zeros(n, k);
    for t in 0..k {
        alpha.set(0, t, start.at(0, t) + em.at(0, t));
    }
    let mut scratch = vec![0.0; k];
    for i in 1..n {
        for t in 0..k {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = alpha.at(i - 1, j) + trans.at(j, t);
            }
            alpha.set(i, t, em.at(i, t) + logsumexp(&scratch));
        }
    }
    // beta[i][t]: log sum over path suffixes starting after i given tag t
    // (end included, emissions after i included).
    let mut beta = Mat::zeros(n, k);
    for t in 0..k {
        beta.set(n - 1, t, end.at(0, t));
    }
    for i in (0..n - 1).rev() {
        for t in 0..k {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = trans.at(t, j) + em.at(i + 1, j) + beta.at(i + 1, j);
            }
            beta.set(i, t, logsumexp(&scratch));
        }
    }
    let log_z = {
        let finals: Vec<f64> = (0..k).map(|t| alpha.at(n - 1, t) + beta.at(n - 1, t)).collect();
        logsumexp(&finals)
    };

    let mut d_em = Mat::zeros(n, k);
    let mut d_trans = Mat::zeros(k, k);
    let mut d_start = Mat::zeros(1, k);
    let mut d_end = Mat::zeros(1, k);

    // Unary marginals.
    for i in 0..n {
        for t in 0..k {
            let p = libm::exp(alpha.at(i, t) + beta.at(i, t) - log_z);
            d_em.set(i, t, p);
        }
    }
    for t in 0..k {
        d_start.set(0, t, d_em.at(0, t));
        d_end.set(0, t, d_em.at(n - 1, t));
    }
    // Pairwise marginals.
    for i in 0..n - 1 {
        for j in 0..k {
            for t in 0..k {
                let p = libm::exp(
                    alpha.at(i, j) + trans.at(j, t) + em.at(i + 1, t) + beta.at(i + 1, t) - log_z,
                );
                let v = d_trans.at(j, t) + p;
                d_trans.set(j, t, v);
            }
        }
    }
    // Observed path.
    for (i, &t) in tags.iter().enumerate() {
        let v = d_em.at(i, t) - 1.0;
        d_em.set(i, t, v);
    }
    for w in tags.windows(2) {
        let v = d_trans.at(w[0], w[1]) - 1.0;
        d_trans.set(w[0], w[1], v);
    }
    d_start.set(0, tags[0], d_start.at(0, tags[0]) - 1.0);
    d_end.set(0, tags[n - 1], d_end.at(0, tags[n - 1]) - 1.0);

    for m in [&mut d_em, &mut d_trans, &mut d_start, &mut d_end] {
        m.scale_assign(upstream);
    }
    (d_em, d_trans, d_start, d_end)
}

/// Viterbi decoding. Among all maximum-score paths, returns the
/// lexicographically smallest tag sequence: the DP runs over suffixes and the
/// path is then chosen greedily from the front, taking the smallest tag that
/// still attains the maximum.
pub fn crf_decode(em: &Mat, trans: &Mat, start: &Mat, end: &Mat) -> Vec<usize> {
    let (n, k) = (em.rows, em.cols);
    if n == 0 {
        return Vec::new();
    }
    // gamma[i][t]: best score of the path suffix i..n with y_i = t.
    let mut gamma = Mat::zeros(n, k);
    for t in 0..k {
        gamma.set(n - 1, t, em.at(n - 1, t) + end.at(0, t));
    }
    for i in (0..n - 1).rev() {
        for t in 0..k {
            let mut best = f64::NEG_INFINITY;
            for j in 0..k {
                let s = trans.at(t, j) + gamma.at(i + 1, j);
                if s > best {
                    best = s;
                }
            }
            gamma.set(i, t, em.at(i, t) + best);
        }
    }
    let argmax_smallest = |scores: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = f64::NEG_INFINITY;
        let mut at = 0;
        for (j, s) in scores.enumerate() {
            if s > best {
                best = s;
                at = j;
            }
        }
        at
    };
    let mut tags = Vec::with_capacity(n);
    let first = argmax_smallest(&mut (0..k).map(|t| start.at(0, t) + gamma.at(0, t)));
    tags.push(first);
    for i in 1..n {
        let prev = tags[i - 1];
        let next = argmax_smallest(&mut (0..k).map(|t| trans.at(prev, t) + gamma.at(i, t)));
        tags.push(next);
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, std_normal};

    fn random_case(
        seed: u64,
        n: usize,
        k: usize,
    ) -> (Mat, Mat, Mat, Mat) {
        let mut rng = rng_from_seed(seed);
        let mut fill = |rows: usize, cols: usize| {
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| std_normal(&mut rng)).collect(),
            )
        };
        (fill(n, k), fill(k, k), fill(1, k), fill(1, k))
    }

    /// All K^n paths, enumerated.
    fn all_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![Vec::new()];
        for _ in 0..n {
            let mut next = Vec::with_capacity(paths.len() * k);
            for p in &paths {
                for t in 0..k {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            paths = next;
        }
        paths
    }

    fn enumeration_nll(em: &Mat, trans: &Mat, start: &Mat, end: &Mat, tags: &[usize]) -> f64 {
        let scores: Vec<f64> = all_paths(em.rows, em.cols)
            .iter()
            .map(|p| path_score(em, trans, start, end, p))
            .collect();
        logsumexp(&scores) - path_score(em, trans, start, end, tags)
    }

    #[test]
    fn single_tag_has_zero_nll() {
        let (em, trans, start, end) = random_case(3, 5, 1);
        let nll = crf_nll(&em, &trans, &start, &end, &[0, 0, 0, 0, 0]).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn all_zero_parameters_give_n_ln_k() {
        for (n, k) in [(1usize, 2usize), (3, 3), (5, 4)] {
            let em = Mat::zeros(n, k);
            let trans = Mat::zeros(k, k);
            let start = Mat::zeros(1, k);
            let end = Mat::zeros(1, k);
            let nll = crf_nll(&em, &trans, &start, &end, &vec![0; n]).unwrap();
            assert!((nll - n as f64 * libm::log(k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_enumeration_on_random_instances() {
        let mut rng = rng_from_seed(11);
        use rand::Rng;
        for case in 0..50u64 {
            let n = rng.gen_range(1..=6usize);
            let k = rng.gen_range(1..=4usize);
            let (em, trans, start, end) = random_case(1000 + case, n, k);
            let tags: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let fast = crf_nll(&em, &trans, &start, &end, &tags).unwrap();
            let slow = enumeration_nll(&em, &trans, &start, &end, &tags);
            assert!((fast - slow).abs() <= 1e-10, "n={n} k={k}: {fast} vs {slow}");
            assert!(fast >= -1e-12, "nll must be nonnegative");
        }
    }

    #[test]
    fn decode_matches_exhaustive_argmax() {
        let mut rng = rng_from_seed(23);
        use rand::Rng;
        for case in 0..50u64 {
            let n = rng.gen_range(1..=5usize);
            let k = rng.gen_range(1..=3usize);
            let (em, trans, start, end) = random_case(2000 + case, n, k);
            let fast = crf_decode(&em, &trans, &start, &end);
            let best = all_paths(n, k)
                .into_iter()
                .map(|p| {
                    let s = path_score(&em, &trans, &start, &end, &p);
                    (p, s)
                })
                .fold(None::<(Vec<usize>, f64)>, |acc, (p, s)| match acc {
                    None => Some((p, s)),
                    Some((bp, bs)) => {
                        if s > bs || (s == bs && p < bp) {
                            Some((p, s))
                        } else {
                            Some((bp, bs))
                        }
                    }
                })
                .unwrap()
                .0;
            assert_eq!(fast, best, "case {case}");
        }
    }

    #[test]
    fn decode_breaks_exact_ties_lexicographically() {
        // Integer-valued parameters so tied totals are bit-equal.
        let em = Mat::from_vec(3, 3, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let trans = Mat::zeros(3, 3);
        let start = Mat::zeros(1, 3);
        let end = Mat::zeros(1, 3);
        // Positions 0 and 2 each have two-way ties; smallest wins everywhere.
        assert_eq!(crf_decode(&em, &trans, &start, &end), vec![0, 0, 1]);
    }

    #[test]
    fn diagonal_dominant_emissions_decode_positionwise() {
        let em = Mat::from_vec(4, 3, vec![
            9.0, 0.0, 0.0,
            0.0, 9.0, 0.0,
            0.0, 0.0, 9.0,
            0.0, 9.0, 0.0,
        ]);
        let trans = Mat::zeros(3, 3);
        let start = Mat::zeros(1, 3);
        let end = Mat::zeros(1, 3);
        assert_eq!(crf_decode(&em, &trans, &start, &end), vec![0, 1, 2, 1]);
    }

    #[test]
    fn single_tag_decodes_to_zeros() {
        let (em, trans, start, end) = random_case(7, 4, 1);
        assert_eq!(crf_decode(&em, &trans, &start, &end), vec![0; 4]);
    }

    #[test]
    fn partition_dominates_any_single_path() {
        let (em, trans, start, end) = random_case(31, 4, 3);
        let log_z = log_partition(&em, &trans, &start, &end);
        for p in all_paths(4, 3) {
            assert!(log_z >= path_score(&em, &trans, &start, &end, &p));
        }
    }

    #[test]
    fn bad_tag_is_rejected() {
        let (em, trans, start, end) = random_case(1, 3, 2);
        assert!(matches!(
            crf_nll(&em, &trans, &start, &end, &[0, 1, 2]).unwrap_err(),
            ModelError::BadTag { tag: 2, k: 2 }
        ));
    }

    #[test]
    fn marginal_gradients_match_finite_differences() {
        let (em, trans, start, end) = random_case(17, 4, 3);
        let tags = vec![0, 2, 1, 1];
        let (d_em, d_trans, d_start, d_end) =
            crf_nll_backward(&em, &trans, &start, &end, &tags, 1.0);
        let eps = 1e-6;
        let check = |analytic: &Mat, target: &Mat, which: usize| {
            let mut target = target.clone();
            for idx in 0..target.data.len() {
                let orig = target.data[idx];
                target.data[idx] = orig + eps;
                let (a, b, c, d) = (&em, &trans, &start, &end);
                let plus = match which {
                    0 => crf_nll(&target, b, c, d, &tags),
                    1 => crf_nll(a, &target, c, d, &tags),
                    2 => crf_nll(a, b, &target, d, &tags),
                    _ => crf_nll(a, b, c, &target, &tags),
                }
                .unwrap();
                target.data[idx] = orig - eps;
                let minus = match which {
                    0 => crf_nll(&target, b, c, d, &tags),
                    1 => crf_nll(a, &target, c, d, &tags),
                    2 => crf_nll(a, b, &target, d, &tags),
                    _ => crf_nll(a, b, c, &target, &tags),
                }
                .unwrap();
                target.data[idx] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a_val = analytic.data[idx];
                assert!(
                    (a_val - numeric).abs() / (a_val.abs() + numeric.abs() + 1e-12) < 1e-6,
                    "which={which} idx={idx}: {a_val} vs {numeric}"
                );
            }
        };
        check(&d_em, &em, 0);
        check(&d_trans, &trans, 1);
        check(&d_start, &start, 2);
        check(&d_end, &end, 3);
    }
}
