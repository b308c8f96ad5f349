//! Focal loss over edge scores.

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.0;

const P_MIN: f64 = 1e-7;
const P_MAX: f64 = 1.0 - 1e-7;

fn check(scores: &[f64], labels: &[bool], gamma: f64) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Length {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Validation(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if let Some(k) = scores.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Validation(format!("score {k} outside [0, 1]: {}", scores[k])));
    }
    Ok(())
}

fn p_true(score: f64, label: bool) -> f64 {
    if label {
        score
    } else {
        1.0 - score
    }
}

/// Mean over edges of `-(1 - p_t)^gamma * ln p_t`; `p_t` is clamped to
/// `[1e-7, 1 - 1e-7]`. An empty edge set has loss 0.
pub fn focal_loss(scores: &[f64], labels: &[bool], gamma: f64) -> Result<f64> {
    check(scores, labels, gamma)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = p_true(s, y).clamp(P_MIN, P_MAX);
            -(1.0 - p).powf(gamma) * p.ln()
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Derivative of [`focal_loss`] with respect to each score. Clamped entries
/// have zero derivative.
pub fn focal_loss_grad(scores: &[f64], labels: &[bool], gamma: f64) -> Result<Vec<f64>> {
    check(scores, labels, gamma)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = p_true(s, y);
            if !(P_MIN..=P_MAX).contains(&p) {
                return 0.0;
            }
            let q = 1.0 - p;
            // d/dp [-(1-p)^g ln p]
            let tilt = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p.ln()
            };
            let dp = tilt - q.powf(gamma) / p;
            let sign = if y { 1.0 } else { -1.0 };
            sign * dp / n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_at_half() {
        let l = focal_loss(&[0.5], &[true], 1.0).unwrap();
        assert!((l - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.34657).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        assert!(focal_loss(&[1.0], &[true], 1.0).unwrap() < 1e-12);
        assert!(focal_loss(&[0.0], &[false], 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s: f64 = rng.random_range(0.01..0.99);
            let y: bool = rng.random();
            let ce = if y { -s.ln() } else { -(1.0 - s).ln() };
            assert!((focal_loss(&[s], &[y], 0.0).unwrap() - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scores = [0.2, 0.7, 0.55, 0.9];
        let labels = [true, false, true, true];
        for gamma in [0.0, 1.0, 2.0] {
            let g = focal_loss_grad(&scores, &labels, gamma).unwrap();
            for k in 0..4 {
                let mut a = scores;
                a[k] += 1e-6;
                let mut b = scores;
                b[k] -= 1e-6;
                let fd = (focal_loss(&a, &labels, gamma).unwrap()
                    - focal_loss(&b, &labels, gamma).unwrap())
                    / 2e-6;
                assert!((fd - g[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn validates_inputs() {
        assert!(focal_loss(&[0.5], &[], 1.0).is_err());
        assert!(focal_loss(&[1.5], &[true], 1.0).is_err());
        assert!(focal_loss(&[0.5], &[true], -1.0).is_err());
        assert_eq!(focal_loss(&[], &[], 1.0).unwrap(), 0.0);
    }
}
