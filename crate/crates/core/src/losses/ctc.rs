//! Connectionist temporal classification in log space.

use crate::data::BLANK;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{log_add, Graph, Tensor, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Blank-interleaved label sequence `b y1 b y2 … b`.
pub fn extend_with_blanks(targets: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(BLANK);
    for &y in targets {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Fewest frames any alignment of `targets` needs: one per label plus one
/// blank between each pair of repeated neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(log_probs: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(dim_err!("CTC expects [T × V] log-probabilities, got {:?}", log_probs.shape()));
    }
    let (t, v) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = targets.iter().find(|&&y| y == BLANK || y >= v) {
        return Err(Error::Index(format!("CTC target id {bad} is blank or outside {v} classes")));
    }
    if t == 0 || min_frames(targets) > t {
        return Err(Error::ImpossibleAlignment(format!(
            "{} labels need at least {} frames, got {t}",
            targets.len(),
            min_frames(targets)
        )));
    }
    Ok((t, v))
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `α[t][s]` (log space, emissions included).
pub fn ctc_alpha(log_probs: &Tensor, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (t_len, _) = check_inputs(log_probs, targets)?;
    let ext = extend_with_blanks(targets);
    let s_len = ext.len();
    let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
    alpha[0][0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(&ext, s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            if a != NEG_INF {
                alpha[t][s] = a + log_probs.get(t, ext[s]);
            }
        }
    }
    Ok(alpha)
}

/// Backward variables `β[t][s]` (log space, emissions included).
pub fn ctc_beta(log_probs: &Tensor, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (t_len, _) = check_inputs(log_probs, targets)?;
    let ext = extend_with_blanks(targets);
    let s_len = ext.len();
    let mut beta = vec![vec![NEG_INF; s_len]; t_len];
    let last = t_len - 1;
    beta[last][s_len - 1] = log_probs.get(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last][s_len - 2] = log_probs.get(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            if b != NEG_INF {
                beta[t][s] = b + log_probs.get(t, ext[s]);
            }
        }
    }
    Ok(beta)
}

fn total(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s = last.len();
    if s == 1 {
        last[0]
    } else {
        log_add(last[s - 1], last[s - 2])
    }
}

/// `log p_ctc(targets | X)` summed over every alignment. Blank is id 0.
pub fn ctc_log_likelihood(log_probs: &Tensor, targets: &[usize]) -> Result<f64> {
    let alpha = ctc_alpha(log_probs, targets)?;
    let lp = total(&alpha);
    if !lp.is_finite() {
        return Err(Error::ImpossibleAlignment("no alignment has non-zero probability".into()));
    }
    Ok(lp)
}

/// `−log p_ctc` as a graph node; the gradient w.r.t. each log-probability
/// comes from the forward-backward occupancies.
pub fn ctc_nll(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let lp_t = g.value(log_probs).clone();
    let alpha = ctc_alpha(&lp_t, targets)?;
    let log_p = total(&alpha);
    if !log_p.is_finite() {
        return Err(Error::ImpossibleAlignment("no alignment has non-zero probability".into()));
    }
    let beta = ctc_beta(&lp_t, targets)?;
    let ext = extend_with_blanks(targets);
    let (t_len, v) = (lp_t.rows(), lp_t.cols());
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for (s, &k) in ext.iter().enumerate() {
            let occ = alpha[t][s] + beta[t][s];
            if occ != NEG_INF {
                grad[t * v + k] -= (occ - lp_t.get(t, k) - log_p).exp();
            }
        }
    }
    g.scalar_fn(log_probs, -log_p, grad)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, log_sum_exp};

    fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
        let mut data = Vec::with_capacity(t * v);
        for _ in 0..t {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = log_sum_exp(&row);
            data.extend(row.iter().map(|x| x - z));
        }
        Tensor::new(vec![t, v], data).unwrap()
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &p in path {
            if Some(p) != prev && p != BLANK {
                out.push(p);
            }
            prev = Some(p);
        }
        out
    }

    fn brute_force(lp: &Tensor, targets: &[usize]) -> f64 {
        let (t, v) = (lp.rows(), lp.cols());
        let mut scores = Vec::new();
        let mut path = vec![0; t];
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % v;
                c /= v;
            }
            if collapse(&path) == targets {
                scores.push(path.iter().enumerate().map(|(i, &k)| lp.get(i, k)).sum());
            }
        }
        log_sum_exp(&scores)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = Tensor::from_rows(&[vec![-1.5, -0.4, -2.0]]).unwrap();
        assert_eq!(ctc_log_likelihood(&lp, &[1]).unwrap(), -0.4);
    }

    #[test]
    fn two_frames_three_alignments() {
        let lp = Tensor::from_rows(&[vec![-1.0, -0.7, -2.1], vec![-0.3, -1.9, -2.5]]).unwrap();
        let k = 1;
        let paths = [
            lp.get(0, k) + lp.get(1, k),
            lp.get(0, k) + lp.get(1, 0),
            lp.get(0, 0) + lp.get(1, k),
        ];
        let expected = log_sum_exp(&paths);
        assert!((ctc_log_likelihood(&lp, &[k]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lp = random_log_probs(&mut rng, 6, 4);
        for targets in [vec![1, 2, 3], vec![2, 2, 1], vec![3], vec![], vec![1, 1, 1]] {
            let fast = ctc_log_likelihood(&lp, &targets).unwrap();
            assert!((fast - brute_force(&lp, &targets)).abs() < 1e-9, "{targets:?}");
        }
    }

    #[test]
    fn impossible_alignment_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let lp = random_log_probs(&mut rng, 3, 4);
        assert!(matches!(ctc_log_likelihood(&lp, &[1, 1, 2]), Err(Error::ImpossibleAlignment(_))));
        assert!(matches!(ctc_log_likelihood(&lp, &[1, 2, 3, 1]), Err(Error::ImpossibleAlignment(_))));
        assert!(ctc_log_likelihood(&lp, &[1, 2, 3]).is_ok());
        assert!(matches!(ctc_log_likelihood(&lp, &[0]), Err(Error::Index(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let lp = random_log_probs(&mut rng, 5, 3);
            let err = grad_check(&lp, 1e-5, |g, x| ctc_nll(g, x, &[1, 2])).unwrap();
            assert!(err < 1e-5, "{err}");
            let logits = random_log_probs(&mut rng, 5, 3);
            let err = grad_check(&logits, 1e-5, |g, x| {
                let lp = g.log_softmax(x)?;
                ctc_nll(g, lp, &[2, 2])
            })
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn beta_agrees_with_alpha_at_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let lp = random_log_probs(&mut rng, 6, 4);
        let targets = [1, 3, 3];
        let (a, b) = (ctc_alpha(&lp, &targets).unwrap(), ctc_beta(&lp, &targets).unwrap());
        let ext = extend_with_blanks(&targets);
        let total = ctc_log_likelihood(&lp, &targets).unwrap();
        for t in 0..6 {
            let occ: Vec<f64> = (0..ext.len()).map(|s| a[t][s] + b[t][s] - lp.get(t, ext[s])).collect();
            assert!((log_sum_exp(&occ) - total).abs() < 1e-10);
        }
    }
}
