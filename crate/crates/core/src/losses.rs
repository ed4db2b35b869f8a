//! Binary cross-entropy, focal and dice losses and their unweighted sum.
//!
//! All losses take predicted probabilities `p` (a tape variable) and a fixed
//! target tensor `y` of the same shape. BCE and focal are averaged over every
//! element; dice is evaluated per sample (first axis) over the flattened
//! remaining axes and then averaged over the batch. A 1-D tensor is a single
//! sample.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive smoothing in the dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the positive class in the focal term.
    pub alpha: f64,
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Probabilities are clipped into `[clip_epsilon, 1 - clip_epsilon]` before logs.
    pub clip_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            clip_epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon <= 0.01) {
            return Err(Error::InvalidArgument(format!(
                "clip_epsilon must be in (0, 0.01], got {}",
                self.clip_epsilon
            )));
        }
        Ok(())
    }
}

/// Class weighting of the focal term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FocalWeight {
    /// `alpha` for positives, `1 - alpha` for negatives.
    Alpha(f64),
    /// No class weighting.
    Unit,
}

impl FocalWeight {
    fn weights(self) -> (f64, f64) {
        match self {
            FocalWeight::Alpha(a) => (a, 1.0 - a),
            FocalWeight::Unit => (1.0, 1.0),
        }
    }
}

/// Loss value and d(loss)/dp per element.
struct Evaluated {
    value: f64,
    grad: Vec<f64>,
}

fn check_pair<T: Real>(op: &'static str, p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", p.shape(), y.shape())));
    }
    Ok(())
}

/// Clipped probability and the derivative of the clip.
#[inline]
fn clip(p: f64, eps: f64) -> (f64, f64) {
    if p < eps {
        (eps, 0.0)
    } else if p > 1.0 - eps {
        (1.0 - eps, 0.0)
    } else {
        (p, 1.0)
    }
}

fn eval_bce(p: &[f64], y: &[f64], eps: f64) -> Evaluated {
    let m = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let (pc, dclip) = clip(p, eps);
            value += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            -(y / pc - (1.0 - y) / (1.0 - pc)) * dclip / m
        })
        .collect();
    Evaluated { value: value / m, grad }
}

fn eval_focal(p: &[f64], y: &[f64], weight: FocalWeight, gamma: f64, eps: f64) -> Evaluated {
    let (a_pos, a_neg) = weight.weights();
    let m = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let (pc, dclip) = clip(p, eps);
            let q = 1.0 - pc;
            // positive part: -a (1 - p)^g ln p ; negative part: -(1 - a) p^g ln(1 - p)
            let pos = -a_pos * q.powf(gamma) * pc.ln();
            let neg = -a_neg * pc.powf(gamma) * q.ln();
            value += y * pos + (1.0 - y) * neg;
            let dpos = -a_pos * (q.powf(gamma) / pc - gamma * q.powf(gamma - 1.0) * pc.ln());
            let dneg = -a_neg * (gamma * pc.powf(gamma - 1.0) * q.ln() - pc.powf(gamma) / q);
            (y * dpos + (1.0 - y) * dneg) * dclip / m
        })
        .collect();
    Evaluated { value: value / m, grad }
}

fn eval_dice(p: &[f64], y: &[f64], samples: usize) -> Evaluated {
    let per = p.len() / samples;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for s in 0..samples {
        let range = s * per..(s + 1) * per;
        let (ps, ys) = (&p[range.clone()], &y[range.clone()]);
        let inter: f64 = ps.iter().zip(ys).map(|(a, b)| a * b).sum();
        let mass: f64 = ps.iter().sum::<f64>() + ys.iter().sum::<f64>();
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = mass + DICE_SMOOTHING;
        value += 1.0 - num / den;
        for (g, &yi) in grad[range].iter_mut().zip(ys) {
            *g = -(2.0 * yi * den - num) / (den * den) / samples as f64;
        }
    }
    Evaluated { value: value / samples as f64, grad }
}

fn samples_of(shape: &[usize]) -> usize {
    if shape.len() > 1 {
        shape[0]
    } else {
        1
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

impl<T: Real> Tape<T> {
    fn record_loss(&mut self, p: Var, eval: Evaluated) -> Var {
        let shape = self.shape(p).to_vec();
        let grad: Vec<T> = eval.grad.into_iter().map(T::of).collect();
        self.record(
            &[p],
            Tensor::scalar(T::of(eval.value)),
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let data = grad.iter().map(|&v| v * g).collect();
                vec![Some(Tensor::new(shape.clone(), data).expect("loss grad"))]
            }),
        )
    }

    pub fn bce_loss(&mut self, p: Var, y: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
        check_pair("bce_loss", self.value(p), y)?;
        let eval = eval_bce(&to_f64(self.value(p)), &to_f64(y), cfg.clip_epsilon);
        Ok(self.record_loss(p, eval))
    }

    pub fn focal_loss(&mut self, p: Var, y: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
        self.focal_loss_weighted(p, y, FocalWeight::Alpha(cfg.alpha), cfg.gamma, cfg.clip_epsilon)
    }

    /// Focal loss with explicit class weighting; `p_t` is `p` for positives and
    /// `1 - p` for negatives.
    pub fn focal_loss_weighted(
        &mut self,
        p: Var,
        y: &Tensor<T>,
        weight: FocalWeight,
        gamma: f64,
        clip_epsilon: f64,
    ) -> Result<Var> {
        check_pair("focal_loss", self.value(p), y)?;
        let eval = eval_focal(&to_f64(self.value(p)), &to_f64(y), weight, gamma, clip_epsilon);
        Ok(self.record_loss(p, eval))
    }

    pub fn dice_loss(&mut self, p: Var, y: &Tensor<T>) -> Result<Var> {
        check_pair("dice_loss", self.value(p), y)?;
        let samples = samples_of(y.shape());
        let eval = eval_dice(&to_f64(self.value(p)), &to_f64(y), samples);
        Ok(self.record_loss(p, eval))
    }

    /// `(bce + focal) + dice`, plus the components for logging.
    pub fn multi_loss(&mut self, p: Var, y: &Tensor<T>, cfg: &LossConfig) -> Result<MultiLoss> {
        let bce = self.bce_loss(p, y, cfg)?;
        let focal = self.focal_loss(p, y, cfg)?;
        let dice = self.dice_loss(p, y)?;
        let partial = self.add(bce, focal)?;
        let total = self.add(partial, dice)?;
        let read = |v: Var| self.value(v).data()[0].as_f64();
        Ok(MultiLoss {
            total,
            components: LossComponents {
                bce: read(bce),
                focal: read(focal),
                dice: read(dice),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bce: f64,
    pub focal: f64,
    pub dice: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        (self.bce + self.focal) + self.dice
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiLoss {
    pub total: Var,
    pub components: LossComponents,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, y: f64) -> (Tape<f64>, Var, Tensor<f64>) {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::scalar(p), true);
        (tape, pv, Tensor::scalar(y))
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn bce_at_half_is_ln2_both_classes() {
        let cfg = LossConfig::default();
        for y in [0.0, 1.0] {
            let (mut tape, p, y) = single(0.5, y);
            let l = tape.bce_loss(p, &y, &cfg).unwrap();
            assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_vanishes_at_confident_truth() {
        let cfg = LossConfig::default();
        let (mut tape, p, y) = single(1.0, 1.0);
        let l = tape.bce_loss(p, &y, &cfg).unwrap();
        let v = scalar(&tape, l);
        assert!(v > 0.0 && v < 2e-7, "{v}");
    }

    #[test]
    fn focal_single_pixel() {
        let cfg = LossConfig::default();
        let (mut tape, p, y) = single(0.5, 1.0);
        let l = tape.focal_loss(p, &y, &cfg).unwrap();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((scalar(&tape, l) - expected).abs() < 1e-15);
        assert!((expected - 0.0433217).abs() < 1e-7);
    }

    #[test]
    fn focal_decays_faster_than_bce() {
        let cfg = LossConfig::default();
        for p in [0.9, 0.99, 0.999] {
            let (mut tape, pv, y) = single(p, 1.0);
            let b = tape.bce_loss(pv, &y, &cfg).unwrap();
            let f = tape.focal_loss_weighted(pv, &y, FocalWeight::Unit, 2.0, 1e-7).unwrap();
            let ratio = scalar(&tape, f) / scalar(&tape, b);
            assert!((ratio - (1.0 - p).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_edge_cases() {
        let mut tape = Tape::<f64>::new();
        let zeros = Tensor::zeros([1, 1, 2, 2]);
        let ones = Tensor::ones([1, 1, 2, 2]);
        let pz = tape.constant(zeros.clone());
        let po = tape.constant(ones.clone());
        let empty = tape.dice_loss(pz, &zeros).unwrap();
        let perfect = tape.dice_loss(po, &ones).unwrap();
        let miss = tape.dice_loss(pz, &ones).unwrap();
        assert_eq!(scalar(&tape, empty), 0.0);
        assert_eq!(scalar(&tape, perfect), 0.0);
        // 1 - (2*0 + 1) / (4 + 0 + 1)
        assert!((scalar(&tape, miss) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn multi_loss_worked_example() {
        let cfg = LossConfig::default();
        let (mut tape, p, y) = single(0.9, 1.0);
        let ml = tape.multi_loss(p, &y, &cfg).unwrap();
        let c = ml.components;
        assert!((c.bce - 0.105361).abs() < 1e-6);
        assert!((c.focal - 0.000263).abs() < 1e-6);
        assert!((c.dice - 0.034483).abs() < 1e-6);
        assert!((scalar(&tape, ml.total) - 0.140107).abs() < 1e-6);
        assert_eq!(scalar(&tape, ml.total), c.total());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([4], 0.5));
        let y = Tensor::ones([2, 2]);
        assert!(tape.bce_loss(p, &y, &cfg).is_err());
        assert!(tape.focal_loss(p, &y, &cfg).is_err());
        assert!(tape.dice_loss(p, &y).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for cfg in [
            LossConfig { alpha: 0.0, ..Default::default() },
            LossConfig { alpha: 1.0, ..Default::default() },
            LossConfig { gamma: -1.0, ..Default::default() },
            LossConfig { clip_epsilon: 0.0, ..Default::default() },
            LossConfig { clip_epsilon: 0.02, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
