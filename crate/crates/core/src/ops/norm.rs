use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::Mode;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running mean and variance used in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormOptions {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self {
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

impl<T: Real> Tape<T> {
    /// Batch normalization over N, H, W per channel.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased estimate into `stats`; infer mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        opts: BatchNormOptions,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats cover {} channels, input has {c}", stats.mean.len()),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::of(opts.epsilon);
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::of(count as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        sq += x[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::of(count as f64);
                }
                let keep = T::of(opts.momentum);
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    stats.mean[ch] = keep * stats.mean[ch] + (T::one() - keep) * mean[ch];
                    stats.var[ch] = keep * stats.var[ch] + (T::one() - keep) * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Infer => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], out)?;
        Ok(self.record(
            &[input, gamma, beta],
            out,
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let mut g_gamma = vec![T::zero(); c];
                let mut g_beta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            g_beta[ch] += go[i];
                            g_gamma[ch] += go[i] * xhat[i];
                        }
                    }
                }
                let g_input = ctx.wants[0].then(|| {
                    let mut gi = vec![T::zero(); go.len()];
                    let m = T::of(count as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                gi[i] = match mode {
                                    // dx = gamma * inv_std / M * (M dy - sum dy - xhat sum(dy xhat))
                                    Mode::Train => {
                                        gm[ch] * inv_std[ch] / m
                                            * (m * go[i] - g_beta[ch] - xhat[i] * g_gamma[ch])
                                    }
                                    Mode::Infer => gm[ch] * inv_std[ch] * go[i],
                                };
                            }
                        }
                    }
                    Tensor::new([n, c, h, w], gi).expect("bn grad shape")
                });
                vec![
                    g_input,
                    ctx.wants[1].then(|| Tensor::new([c], g_gamma).expect("gamma grad")),
                    ctx.wants[2].then(|| Tensor::new([c], g_beta).expect("beta grad")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, c: usize, hw: usize) -> Tensor<f64> {
        let vals: Vec<f64> = (0..n * c * hw * hw)
            .map(|i| ((i * 7919) % 101) as f64 / 10.0 - 3.0 + (i % c) as f64)
            .collect();
        Tensor::from_f64([n, c, hw, hw], &vals).unwrap()
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let input = sample(2, 3, 4);
        let x = tape.constant(input.clone());
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let mut stats = RunningStats {
            mean: vec![0.0; 3],
            var: vec![1.0; 3],
        };
        let opts = BatchNormOptions {
            epsilon: 0.0,
            ..Default::default()
        };
        let y = tape.batch_norm(x, g, b, &mut stats, Mode::Infer, opts).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn train_normalizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(sample(3, 2, 5));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let mut stats = RunningStats::new(2);
        let y = tape
            .batch_norm(x, g, b, &mut stats, Mode::Train, BatchNormOptions::default())
            .unwrap();
        let y = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| y[(n * 2 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running stats moved off their initial values
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn gamma_length_checked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(sample(1, 2, 3));
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([2]));
        let mut stats = RunningStats::new(2);
        assert!(tape
            .batch_norm(x, g, b, &mut stats, Mode::Train, Default::default())
            .is_err());
    }
}
