//! Hybrid binary cross-entropy + Dice loss over per-class sigmoid
//! probabilities laid out `B×S×S×K`.

use ndarray::{Array4, ArrayView4, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the BCE term.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: probs {probs:?} vs target {target:?}")]
    ShapeMismatch { probs: Vec<usize>, target: Vec<usize> },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, LossError> {
        let w = Self {
            alpha,
            beta,
            ..Default::default()
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(LossError::InvalidWeights(format!(
                "need alpha, beta >= 0 and alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(LossError::InvalidWeights("dice_smooth must be >= 0".into()));
        }
        Ok(())
    }
}

fn check(probs: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Result<(), LossError> {
    if probs.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            probs: probs.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over every pixel and class of `-[t ln p + (1-t) ln(1-p)]`.
pub fn bce_loss(probs: ArrayView4<f64>, target: ArrayView4<f64>) -> Result<f64, LossError> {
    check(&probs, &target)?;
    let n = probs.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    Zip::from(&probs).and(&target).for_each(|&p, &t| {
        let p = p.clamp(EPS, 1.0 - EPS);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    });
    Ok(sum / n as f64)
}

/// Per-class sums (Σp·t, Σp, Σt) over the batch and all pixels.
fn dice_sums(probs: &ArrayView4<f64>, target: &ArrayView4<f64>) -> Vec<(f64, f64, f64)> {
    let k = probs.shape()[3];
    let mut sums = vec![(0.0, 0.0, 0.0); k];
    for (lane_p, lane_t) in probs.rows().into_iter().zip(target.rows()) {
        for c in 0..k {
            let (p, t) = (lane_p[c], lane_t[c]);
            sums[c].0 += p * t;
            sums[c].1 += p;
            sums[c].2 += t;
        }
    }
    sums
}

/// Macro average over classes of `1 - (2Σpt + s) / (Σp + Σt + s)`.
pub fn dice_loss(probs: ArrayView4<f64>, target: ArrayView4<f64>, smooth: f64) -> Result<f64, LossError> {
    check(&probs, &target)?;
    let k = probs.shape()[3];
    if k == 0 {
        return Ok(0.0);
    }
    let total: f64 = dice_sums(&probs, &target)
        .into_iter()
        .map(|(i, p, t)| {
            let denom = p + t + smooth;
            if denom == 0.0 {
                0.0
            } else {
                1.0 - (2.0 * i + smooth) / denom
            }
        })
        .sum();
    Ok(total / k as f64)
}

/// `alpha * bce + beta * dice`.
pub fn hybrid_loss(probs: ArrayView4<f64>, target: ArrayView4<f64>, w: &LossWeights) -> Result<f64, LossError> {
    w.validate()?;
    let bce = bce_loss(probs, target)?;
    let dice = dice_loss(probs, target, w.dice_smooth)?;
    Ok(w.alpha * bce + w.beta * dice)
}

/// Hybrid loss and its gradient with respect to `probs`.
pub fn hybrid_loss_grad(
    probs: ArrayView4<f64>,
    target: ArrayView4<f64>,
    w: &LossWeights,
) -> Result<(f64, Array4<f64>), LossError> {
    let loss = hybrid_loss(probs, target, w)?;
    let shape = probs.raw_dim();
    let k = probs.shape()[3];
    let n = probs.len().max(1) as f64;
    let sums = dice_sums(&probs, &target);
    // d/dp of the dice term for class c: -(2t·D - (2I + s)) / D², D = Σp+Σt+s
    let dice_coef: Vec<(f64, f64)> = sums
        .iter()
        .map(|&(i, p, t)| {
            let d = p + t + w.dice_smooth;
            if d == 0.0 {
                (0.0, 0.0)
            } else {
                (2.0 / d, (2.0 * i + w.dice_smooth) / (d * d))
            }
        })
        .collect();
    let mut grad = Array4::<f64>::zeros(shape);
    Zip::indexed(&mut grad)
        .and(&probs)
        .and(&target)
        .for_each(|(_, _, _, c), g, &p, &t| {
            let bce = if p > EPS && p < 1.0 - EPS {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            } else {
                0.0
            };
            let (a, b) = dice_coef[c];
            let dice = -(a * t - b) / k as f64;
            *g = w.alpha * bce + w.beta * dice;
        });
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> (Array4<f64>, Array4<f64>) {
        let probs = Array4::from_shape_fn(shape, |_| rng.random_range(0.02..0.98));
        let target = Array4::from_shape_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        (probs, target)
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = Array4::from_elem((1, 2, 2, 3), 0.5);
        let t = Array4::from_shape_fn((1, 2, 2, 3), |(_, r, c, k)| ((r + c + k) % 2) as f64);
        let l = bce_loss(p.view(), t.view()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_eps_level() {
        let t = Array4::from_shape_fn((1, 3, 3, 3), |(_, r, c, k)| ((r * 3 + c + k) % 2) as f64);
        let p = t.mapv(|v| if v == 1.0 { 1.0 - EPS } else { EPS });
        let l = bce_loss(p.view(), t.view()).unwrap();
        assert!(l >= 0.0 && l <= 1.2e-7 * EPS.ln().abs(), "{l}");
    }

    #[test]
    fn bce_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, t) = random_instance(&mut rng, (2, 4, 4, 3));
        let mut sum = 0.0;
        let mut n = 0.0;
        for b in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    for k in 0..3 {
                        let (pp, tt) = (p[[b, r, c, k]], t[[b, r, c, k]]);
                        sum += -(tt * pp.ln() + (1.0 - tt) * (1.0 - pp).ln());
                        n += 1.0;
                    }
                }
            }
        }
        assert!((bce_loss(p.view(), t.view()).unwrap() - sum / n).abs() < 1e-10);
    }

    #[test]
    fn dice_closed_forms() {
        let t = Array4::from_shape_fn((1, 2, 2, 2), |(_, r, c, k)| ((r + c + k) % 2) as f64);
        assert_eq!(dice_loss(t.view(), t.view(), 1.0).unwrap(), 0.0);

        let n = 9.0;
        let zeros = Array4::<f64>::zeros((1, 3, 3, 1));
        let ones = Array4::<f64>::ones((1, 3, 3, 1));
        let d = dice_loss(zeros.view(), ones.view(), 1.0).unwrap();
        assert!((d - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-15);

        // p = t on two pixels, p = 0 / t = 1 on the other two.
        let p = Array4::from_shape_vec((1, 1, 4, 1), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let t = Array4::from_shape_vec((1, 1, 4, 1), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let d = dice_loss(p.view(), t.view(), 0.0).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hybrid_degenerate_weights_are_bitwise_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, t) = random_instance(&mut rng, (2, 4, 4, 3));
        let bce = bce_loss(p.view(), t.view()).unwrap();
        let dice = dice_loss(p.view(), t.view(), 1.0).unwrap();
        let only_bce = hybrid_loss(p.view(), t.view(), &LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        let only_dice = hybrid_loss(p.view(), t.view(), &LossWeights::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(only_bce.to_bits(), bce.to_bits());
        assert_eq!(only_dice.to_bits(), dice.to_bits());
        let half = hybrid_loss(p.view(), t.view(), &LossWeights::default()).unwrap();
        assert!((half - 0.5 * (bce + dice)).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = Array4::<f64>::zeros((1, 2, 2, 3));
        let b = Array4::<f64>::zeros((1, 2, 2, 2));
        assert!(matches!(bce_loss(a.view(), b.view()), Err(LossError::ShapeMismatch { .. })));
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 2.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = LossWeights::new(0.7, 0.3).unwrap();
        let (p, t) = random_instance(&mut rng, (2, 4, 4, 3));
        let (_, g) = hybrid_loss_grad(p.view(), t.view(), &w).unwrap();
        let h = 1e-4;
        for (idx, &an) in g.indexed_iter() {
            let mut plus = p.clone();
            plus[idx] += h;
            let mut minus = p.clone();
            minus[idx] -= h;
            let fd = (hybrid_loss(plus.view(), t.view(), &w).unwrap()
                - hybrid_loss(minus.view(), t.view(), &w).unwrap())
                / (2.0 * h);
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel <= 1e-4, "{idx:?}: fd {fd} analytic {an}");
        }
    }
}
