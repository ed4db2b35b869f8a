//! Adam training loop, validation and training-curve logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{batch, write_json, Augmentation, LabeledSample};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::losses::{LossComponents, LossConfig};
use crate::metrics::{binarize, iou, DEFAULT_THRESHOLD};
use crate::network::HistoSeg;
use crate::params::{Gradients, ParamKind, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub loss: LossConfig,
    pub augmentation: Augmentation,
    /// When false the `seconds` log column is written as 0 so that logs of
    /// repeated runs compare byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            batch_size: 8,
            epochs: 30,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 42,
            loss: LossConfig::default(),
            augmentation: Augmentation::default(),
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. `t` is the
/// 1-based step index.
pub fn adam_step<T: Real>(
    store: &mut ParameterStore<T>,
    grads: &Gradients<T>,
    cfg: &AdamConfig,
    t: usize,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    for (name, p) in store.iter() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.value.shape()),
            ));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in store.iter_mut() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = &grads[name];
        let shape = p.value.shape().to_vec();
        let m = p.m.get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = p.v.get_or_insert_with(|| Tensor::zeros(shape));
        for (((w, m), v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let g = g.as_f64();
            let mn = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = T::of(mn);
            *v = T::of(vn);
            let step = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            *w = T::of(w.as_f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub bce: f64,
    pub focal: f64,
    pub dice: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,bce,focal,dice,val_loss,val_iou,seconds";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.bce, r.focal, r.dice, r.val_loss, r.val_iou, r.seconds
            );
        }
        out
    }

    /// Trailing moving average of validation loss over up to `window` epochs
    /// ending at each epoch.
    pub fn smoothed_val_loss(&self, window: usize) -> Vec<f64> {
        let v: Vec<f64> = self.epochs.iter().map(|r| r.val_loss).collect();
        (0..v.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("log.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        write_json(&dir.join("log.json"), self)
    }
}

/// Loss and IoU of a model on a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: LossComponents,
    /// Mean per-image foreground IoU of the binarized prediction.
    pub iou: f64,
}

/// Infer-mode evaluation in chunks of `batch_size`.
pub fn evaluate<T: Real>(
    net: &HistoSeg,
    store: &ParameterStore<T>,
    samples: &[LabeledSample],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let mut sum = LossComponents::default();
    let mut iou_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (x, y) = batch::<T>(&refs)?;
        let mut ctx = ForwardCtx::infer(store);
        let xv = ctx.tape.constant(x);
        let p = net.forward(&mut ctx, xv)?;
        let l = ctx.tape.multi_loss(p, &y, loss)?.components;
        let k = chunk.len() as f64;
        sum.bce += l.bce * k;
        sum.focal += l.focal * k;
        sum.dice += l.dice * k;
        let prob = ctx.tape.value(p);
        let [_, _, h, w] = prob.dims4("evaluate")?;
        for (s, plane) in chunk.iter().zip(prob.data().chunks_exact(h * w)) {
            let map = Tensor::new(vec![h, w], plane.to_vec())?;
            iou_sum += iou(&binarize(&map, DEFAULT_THRESHOLD)?, &s.mask)?;
        }
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: LossComponents {
            bce: sum.bce / n,
            focal: sum.focal / n,
            dice: sum.dice / n,
        },
        iou: iou_sum / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub log: TrainingLog,
    /// 1-based epoch with the best validation IoU (earliest on ties).
    pub best_epoch: usize,
    pub best_val_iou: f64,
    /// Parameters at the best epoch.
    pub best: ParameterStore<T>,
}

/// Trains `store` in place for `cfg.epochs` epochs.
///
/// Each epoch shuffles the training set, drops a final partial batch, and
/// evaluates on `val` in infer mode. With `out_dir` set, `best.ckpt`,
/// `last.ckpt`, `log.csv` and `log.json` are written there; the logs are
/// rewritten after every epoch.
pub fn train<T: Real>(
    net: &HistoSeg,
    store: &mut ParameterStore<T>,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training set has {} samples, fewer than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainingLog::default();
    let mut best = (0, f64::NEG_INFINITY, store.clone());
    let mut t = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut steps = 0;
        for (step, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let augmented: Vec<LabeledSample>;
            let refs: Vec<&LabeledSample> = if cfg.augmentation.is_identity() {
                idx.iter().map(|&i| &train_set[i]).collect()
            } else {
                augmented = idx.iter().map(|&i| cfg.augmentation.apply(&train_set[i], &mut rng)).collect();
                augmented.iter().collect()
            };
            let (x, y) = batch::<T>(&refs)?;
            let dropout_seed = rng.random();
            let mut ctx = ForwardCtx::train(store, dropout_seed);
            let xv = ctx.tape.constant(x);
            let p = net.forward(&mut ctx, xv)?;
            let loss = ctx.tape.multi_loss(p, &y, &cfg.loss)?;
            let c = loss.components;
            if !c.total().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    samples: refs.iter().map(|s| s.id.clone()).collect(),
                });
            }
            ctx.backward(loss.total)?;
            let grads = ctx.gradients();
            drop(ctx);
            t += 1;
            adam_step(store, &grads, &adam, t)?;
            sum.bce += c.bce;
            sum.focal += c.focal;
            sum.dice += c.dice;
            steps += 1;
        }
        let k = steps as f64;
        let (bce, focal, dice) = (sum.bce / k, sum.focal / k, sum.dice / k);
        let val = evaluate(net, store, val_set, cfg.batch_size, &cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: (bce + focal) + dice,
            bce,
            focal,
            dice,
            val_loss: val.loss.total(),
            val_iou: val.iou,
            seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if !record.val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: 0,
                samples: vec!["validation".into()],
            });
        }
        log.epochs.push(record);
        if val.iou > best.1 {
            best = (epoch, val.iou, store.clone());
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), store)?;
            }
        }
        if let Some(dir) = out_dir {
            log.write(dir)?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("last.ckpt"), store)?;
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_iou: best.1,
        best: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(w), ParamKind::Trainable).unwrap();
        s.insert("buf", Tensor::scalar(5.0), ParamKind::Buffer).unwrap();
        s
    }

    fn grads(g: f64) -> Gradients<f64> {
        [("w".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &grads(1.0), &cfg, 1).unwrap();
        let m1 = s.entry("w").unwrap().m.clone().unwrap().data()[0];
        let w1 = s.get("w").unwrap().data()[0];
        adam_step(&mut s, &grads(0.0), &cfg, 2).unwrap();
        // moments keep decaying, so the parameter still drifts
        let m2 = 0.9 * m1;
        let v2 = 0.999 * 0.001;
        let want = w1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        assert!((s.entry("w").unwrap().m.as_ref().unwrap().data()[0] - m2).abs() < 1e-15);
        let mut fresh = scalar_store(1.5);
        adam_step(&mut fresh, &grads(0.0), &cfg, 1).unwrap();
        assert_eq!(fresh.get("w").unwrap().data()[0], 1.5);
        assert_eq!(fresh.get("buf").unwrap().data()[0], 5.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 1e3] {
            let mut s = scalar_store(0.0);
            adam_step(&mut s, &grads(g), &AdamConfig::default(), 1).unwrap();
            let w = s.get("w").unwrap().data()[0];
            assert!((w + 0.01 * g.signum()).abs() < 1e-8, "{w}");
        }
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut s = scalar_store(0.0);
        let err = adam_step(&mut s, &Gradients::new(), &AdamConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert!(adam_step(&mut s, &grads(1.0), &AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn quadratic_converges() {
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig::default();
        for t in 1..=2000 {
            let w = s.get("w").unwrap().data()[0];
            adam_step(&mut s, &grads(2.0 * (w - 3.0)), &cfg, t).unwrap();
        }
        assert!((s.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_scale_barely_matters_on_first_step() {
        let mut a = scalar_store(0.0);
        let mut b = scalar_store(0.0);
        adam_step(&mut a, &grads(0.5), &AdamConfig::default(), 1).unwrap();
        adam_step(&mut b, &grads(0.5 * 37.0), &AdamConfig::default(), 1).unwrap();
        let (wa, wb) = (a.get("w").unwrap().data()[0], b.get("w").unwrap().data()[0]);
        assert!((wa - wb).abs() <= 1e-3 * wa.abs());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn smoothing_window() {
        let log = TrainingLog {
            epochs: [4.0, 2.0, 3.0, 1.0]
                .iter()
                .enumerate()
                .map(|(i, &v)| EpochRecord {
                    epoch: i + 1,
                    train_loss: 0.0,
                    bce: 0.0,
                    focal: 0.0,
                    dice: 0.0,
                    val_loss: v,
                    val_iou: 0.0,
                    seconds: 0.0,
                })
                .collect(),
        };
        assert_eq!(log.smoothed_val_loss(2), [4.0, 3.0, 2.5, 2.0]);
        assert!(log.to_csv().starts_with(LOG_HEADER));
        assert_eq!(log.to_csv().lines().count(), 5);
    }
}
