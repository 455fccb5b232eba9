//! Incremental CTC prefix probabilities for joint decoding.

use crate::data::{BLANK, SOS_EOS};
use crate::error::{dim_err, Result};
use crate::tensor::{log_add, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Forward variables of one prefix, split by whether the path ends in a
/// blank (`r_b`) or in the prefix's last label (`r_n`).
#[derive(Clone, Debug, PartialEq)]
pub struct CtcState {
    pub r_n: Vec<f64>,
    pub r_b: Vec<f64>,
    /// `log p(prefix…)`: probability of every label sequence that starts
    /// with the prefix.
    pub score: f64,
    pub last: Option<usize>,
}

impl CtcState {
    /// State for the empty prefix (just the start symbol).
    pub fn initial(log_probs: &Tensor) -> Result<Self> {
        check(log_probs)?;
        let mut r_b = Vec::with_capacity(log_probs.rows());
        let mut acc = 0.0;
        for t in 0..log_probs.rows() {
            acc += log_probs.get(t, BLANK);
            r_b.push(acc);
        }
        Ok(CtcState {
            r_n: vec![NEG_INF; log_probs.rows()],
            r_b,
            score: 0.0,
            last: None,
        })
    }

    /// `log p_ctc(prefix | X)` for the prefix as a complete sequence.
    pub fn final_score(&self) -> f64 {
        let t = self.r_n.len() - 1;
        log_add(self.r_n[t], self.r_b[t])
    }

    /// State after appending a non-blank, non-end label.
    pub fn extend(&self, log_probs: &Tensor, c: usize) -> CtcState {
        let t_len = log_probs.rows();
        let mut r_n = vec![NEG_INF; t_len];
        let mut r_b = vec![NEG_INF; t_len];
        if self.last.is_none() {
            r_n[0] = log_probs.get(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if self.last == Some(c) {
                self.r_b[t - 1]
            } else {
                log_add(self.r_b[t - 1], self.r_n[t - 1])
            };
            let emit = log_probs.get(t, c);
            r_n[t] = log_add(r_n[t - 1], phi) + emit;
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + log_probs.get(t, BLANK);
            psi = log_add(psi, phi + emit);
        }
        CtcState {
            r_n,
            r_b,
            score: psi,
            last: Some(c),
        }
    }
}

fn check(log_probs: &Tensor) -> Result<()> {
    if log_probs.rank() != 2 || log_probs.rows() == 0 {
        return Err(dim_err!(
            "CTC prefix scoring needs [T × V] log-probabilities with T > 0, got {:?}",
            log_probs.shape()
        ));
    }
    Ok(())
}

/// Score change from appending `token` to the prefix held in `state`.
///
/// `token == SOS_EOS` terminates the prefix and returns the state
/// unchanged apart from its score, which becomes the complete-sequence
/// probability. An impossible extension scores `−∞`.
pub fn ctc_prefix_score(state: &CtcState, token: usize, log_probs: &Tensor) -> Result<(f64, CtcState)> {
    check(log_probs)?;
    if token >= log_probs.cols() || token == BLANK {
        return Err(dim_err!("cannot extend a CTC prefix with id {token}"));
    }
    let next = if token == SOS_EOS {
        CtcState {
            score: state.final_score(),
            ..state.clone()
        }
    } else {
        state.extend(log_probs, token)
    };
    let delta = if next.score == NEG_INF { NEG_INF } else { next.score - state.score };
    Ok((delta, next))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::losses::ctc_log_likelihood;
    use crate::tensor::log_sum_exp;

    fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..t {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..1.0)).collect();
            let z = log_sum_exp(&row);
            data.extend(row.iter().map(|x| x - z));
        }
        Tensor::new(vec![t, v], data).unwrap()
    }

    fn chain(lp: &Tensor, targets: &[usize]) -> f64 {
        let mut state = CtcState::initial(lp).unwrap();
        let mut total = 0.0;
        for &y in targets.iter().chain(std::iter::once(&SOS_EOS)) {
            let (d, s) = ctc_prefix_score(&state, y, lp).unwrap();
            total += d;
            state = s;
        }
        total
    }

    #[test]
    fn one_frame_single_label() {
        let lp = Tensor::from_rows(&[vec![-2.0, -1.5, -3.0, -0.4]]).unwrap();
        let s0 = CtcState::initial(&lp).unwrap();
        let (d, _) = ctc_prefix_score(&s0, 3, &lp).unwrap();
        assert_eq!(d, -0.4);
    }

    #[test]
    fn chained_scores_equal_the_full_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let t = rng.random_range(1..=6);
            let lp = random_log_probs(&mut rng, t, 5);
            let len = rng.random_range(0..=3);
            let targets: Vec<usize> = (0..len).map(|_| if rng.random_bool(0.5) { 3 } else { 4 }).collect();
            let total = chain(&lp, &targets);
            match ctc_log_likelihood(&lp, &targets) {
                Ok(expected) => assert!((total - expected).abs() < 1e-9, "{targets:?}: {total} vs {expected}"),
                Err(_) => assert_eq!(total, NEG_INF),
            }
        }
    }

    #[test]
    fn prefix_score_marginalizes_continuations() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let lp = random_log_probs(&mut rng, 3, 4);
        let s = CtcState::initial(&lp).unwrap().extend(&lp, 3);
        let mut seqs = vec![vec![3]];
        for a in 1..4 {
            seqs.push(vec![3, a]);
            for b in 1..4 {
                seqs.push(vec![3, a, b]);
            }
        }
        let probs: Vec<f64> = seqs.iter().filter_map(|y| ctc_log_likelihood(&lp, y).ok()).collect();
        assert!((s.score - log_sum_exp(&probs)).abs() < 1e-10);
    }

    #[test]
    fn impossible_prefix_is_negative_infinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let lp = random_log_probs(&mut rng, 2, 5);
        let s0 = CtcState::initial(&lp).unwrap();
        let (_, s1) = ctc_prefix_score(&s0, 3, &lp).unwrap();
        let (_, s2) = ctc_prefix_score(&s1, 3, &lp).unwrap();
        assert_eq!(s2.score, NEG_INF);
        let (d, s3) = ctc_prefix_score(&s2, 4, &lp).unwrap();
        assert_eq!(d, NEG_INF);
        assert!(!s3.score.is_nan() && !d.is_nan());
        let (d, _) = ctc_prefix_score(&s3, SOS_EOS, &lp).unwrap();
        assert_eq!(d, NEG_INF);
    }
}
