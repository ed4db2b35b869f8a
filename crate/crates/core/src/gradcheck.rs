//! Central finite-difference verification of every differentiable operator,
//! the composite blocks and a reduced network, in 64-bit precision.
//!
//! Operator checks compare every input element: `|a - n| / max(|a|, |n|, floor)`.
//! Module checks compare whole parameter tensors on a seeded sample of
//! elements: `||a - n|| / max(||a||, ||n||, floor)`.
//!
//! Relu kinks make a central difference wrong when the perturbation crosses
//! one. A crossing changes the tape's activation pattern; the element is then
//! re-probed with a smaller step, and left out if even the smallest step
//! crosses.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::blocks::{AsppBlock, AsppConfig, ExpandedConvBlock, ExpandedConvConfig, QuickAttention};
use crate::error::Result;
use crate::layers::ForwardCtx;
use crate::losses::{FocalWeight, LossConfig};
use crate::network::{HistoSeg, NetworkSpec};
use crate::ops::{BatchNormOptions, ConvOptions, RunningStats};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::Mode;

/// Tolerance for single operators.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-6;
/// Tolerance for blocks and the network.
pub const COMPOSED_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Elementwise,
    Composed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Elements compared.
    pub elements: usize,
    /// Elements left out because every step crossed a kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<36} {:<12} {:>9} {:>8} {:>12} {:>9}  status\n", "check", "kind", "elements", "skipped", "max_rel_err", "tol");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<36} {:<12} {:>9} {:>8} {:>12.3e} {:>9.0e}  {}",
                r.name,
                format!("{:?}", r.kind).to_lowercase(),
                r.elements,
                r.skipped,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "{} checks in {:.1}s", self.results.len(), self.seconds);
        out
    }
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    /// Initial step.
    pub step: f64,
    /// Smallest step tried when a perturbation crosses a kink.
    pub min_step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many elements per tensor (all when `None`).
    pub per_tensor: Option<usize>,
}

impl Default for Probe {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_step: 1e-7,
            floor: 1e-3,
            per_tensor: None,
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Random values bounded away from zero, so relu kinks are not probed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn elements(n: usize, probe: &Probe, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match probe.per_tensor {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Central difference at `x0`, or `None` when every step down to the
/// minimum changes the activation pattern. `eval_at` evaluates with the
/// probed element set to its argument and returns the value and pattern.
fn central(pattern: u64, x0: f64, probe: &Probe, mut eval_at: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<Option<f64>> {
    let mut h = probe.step;
    while h >= probe.min_step * (1.0 - 1e-9) {
        let (fp, pp) = eval_at(x0 + h)?;
        let (fm, pm) = eval_at(x0 - h)?;
        if pp == pattern && pm == pattern {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
        h /= 10.0;
    }
    Ok(None)
}

type OpGraph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks the gradient of `graph` with respect to every input. Non-scalar
/// outputs are reduced with fixed random weights.
pub fn check_op(name: &str, inputs: &[Tensor<f64>], graph: &OpGraph<'_>, probe: &Probe, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Option<Tensor<f64>> = None;
    // value, activation pattern, input gradients
    type Eval = (f64, u64, Vec<Option<Tensor<f64>>>);
    let mut eval = |values: &[Tensor<f64>], grads: bool| -> Result<Eval> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), grads)).collect();
        let out = graph(&mut tape, &vars)?;
        let scalar = if tape.value(out).is_scalar() {
            out
        } else {
            let w = weights.get_or_insert_with(|| random(&mut rng, tape.shape(out), -1.0, 1.0));
            tape.weighted_sum(out, w)?
        };
        let f = tape.value(scalar).data()[0];
        let pattern = tape.activation_pattern();
        if !grads {
            return Ok((f, pattern, Vec::new()));
        }
        tape.backward(scalar)?;
        Ok((f, pattern, vars.iter().map(|&v| tape.grad(v).cloned()).collect()))
    };
    let (_, pattern, analytic) = eval(inputs, true)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (mut worst, mut count, mut skipped) = (0.0f64, 0, 0);
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape().to_vec());
        let a = analytic[k].as_ref().unwrap_or(&zeros);
        for i in elements(input.numel(), probe, &mut pick) {
            let x0 = input.data()[i];
            let n = central(pattern, x0, probe, |v| {
                work[k].data_mut()[i] = v;
                let (f, p, _) = eval(&work, false)?;
                Ok((f, p))
            })?;
            work[k].data_mut()[i] = x0;
            let Some(n) = n else {
                skipped += 1;
                continue;
            };
            let ai = a.data()[i];
            let err = (ai - n).abs() / ai.abs().max(n.abs()).max(probe.floor);
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(result(name, CheckKind::Elementwise, worst, count, skipped))
}

fn result(name: &str, kind: CheckKind, worst: f64, elements: usize, skipped: usize) -> CheckResult {
    let tolerance = match kind {
        CheckKind::Elementwise => ELEMENTWISE_TOLERANCE,
        CheckKind::Composed => COMPOSED_TOLERANCE,
    };
    CheckResult {
        name: name.to_string(),
        kind,
        max_rel_error: worst,
        tolerance,
        elements,
        skipped,
        passed: elements > 0 && worst.is_finite() && worst < tolerance,
    }
}

type ModuleGraph<'a> = dyn Fn(&mut ForwardCtx<'_, f64>, Var) -> Result<Var> + 'a;

/// Checks parameter and input gradients of a train-mode module. Dropout
/// masks repeat because every evaluation reseeds the context.
pub fn check_module(
    name: &str,
    store: &ParameterStore<f64>,
    x: &Tensor<f64>,
    forward: &ModuleGraph<'_>,
    probe: &Probe,
    seed: u64,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Option<Tensor<f64>> = None;
    // value, activation pattern, named gradients
    type Eval = (f64, u64, Vec<(String, Tensor<f64>)>);
    let mut eval = |store: &ParameterStore<f64>, x: &Tensor<f64>, grads: bool| -> Result<Eval> {
        let mut scratch = store.clone();
        let mut ctx = ForwardCtx::train(&mut scratch, seed);
        let xv = ctx.tape.leaf(x.clone(), grads);
        let out = forward(&mut ctx, xv)?;
        let w = weights.get_or_insert_with(|| random(&mut rng, ctx.tape.shape(out), -1.0, 1.0));
        let scalar = ctx.tape.weighted_sum(out, w)?;
        let f = ctx.tape.value(scalar).data()[0];
        let pattern = ctx.tape.activation_pattern();
        if !grads {
            return Ok((f, pattern, Vec::new()));
        }
        ctx.backward(scalar)?;
        let g = ctx.gradients();
        let mut named: Vec<(String, Tensor<f64>)> = store
            .names()
            .filter_map(|n| g.get(n).map(|t| (n.to_string(), t.clone())))
            .collect();
        let gx = ctx.tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        named.push(("input".into(), gx));
        Ok((f, pattern, named))
    };
    let (_, pattern, analytic) = eval(store, x, true)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x85eb_ca6b);
    let (mut worst, mut count, mut skipped) = (0.0f64, 0, 0);
    let mut work = store.clone();
    let mut xw = x.clone();
    for (pname, a) in &analytic {
        let idx = elements(a.numel(), probe, &mut pick);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let slot = |work: &mut ParameterStore<f64>, xw: &mut Tensor<f64>, v: Option<f64>| -> f64 {
                let t = if pname == "input" { xw } else { work.get_mut(pname).expect("named") };
                let old = t.data()[i];
                if let Some(v) = v {
                    t.data_mut()[i] = v;
                }
                old
            };
            let x0 = slot(&mut work, &mut xw, None);
            let n = central(pattern, x0, probe, |v| {
                slot(&mut work, &mut xw, Some(v));
                let (f, p, _) = eval(&work, &xw, false)?;
                Ok((f, p))
            })?;
            slot(&mut work, &mut xw, Some(x0));
            let Some(n) = n else {
                skipped += 1;
                continue;
            };
            let ai = a.data()[i];
            diff += (ai - n) * (ai - n);
            na += ai * ai;
            nn += n * n;
            count += 1;
        }
        let err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(probe.floor);
        worst = worst.max(err);
    }
    Ok(result(name, CheckKind::Composed, worst, count, skipped))
}

/// Reduced network spec used by the full-graph check.
pub fn reduced_spec() -> NetworkSpec {
    NetworkSpec {
        input_height: 32,
        input_width: 32,
        width_multiplier: 0.125,
        ..NetworkSpec::default()
    }
}

/// Runs the whole suite.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = Probe::default();
    let mut results = Vec::new();
    let mut op = |name: &str, inputs: Vec<Tensor<f64>>, graph: &OpGraph<'_>, rng: &mut ChaCha8Rng| -> Result<()> {
        results.push(check_op(name, &inputs, graph, &probe, rng.random())?);
        Ok(())
    };

    let x = random(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[4], -1.0, 1.0);
    for (label, opts) in [
        ("conv2d", ConvOptions::default()),
        ("conv2d stride 2", ConvOptions::same(2, 1)),
        ("conv2d dilation 2", ConvOptions::same(1, 2)),
    ] {
        op(
            label,
            vec![x.clone(), w.clone(), b.clone()],
            &|t, v| t.conv2d(v[0], v[1], Some(v[2]), opts),
            &mut rng,
        )?;
    }
    let pw = random(&mut rng, &[5, 3, 1, 1], -1.0, 1.0);
    op("conv2d 1x1", vec![x.clone(), pw], &|t, v| t.conv2d(v[0], v[1], None, ConvOptions::default()), &mut rng)?;
    let dw = random(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
    let db = random(&mut rng, &[3], -1.0, 1.0);
    for (label, opts) in [
        ("depthwise_conv2d", ConvOptions::default()),
        ("depthwise_conv2d stride 2", ConvOptions::same(2, 1)),
        ("depthwise_conv2d dilation 3", ConvOptions::same(1, 3)),
    ] {
        op(
            label,
            vec![x.clone(), dw.clone(), db.clone()],
            &|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), opts),
            &mut rng,
        )?;
    }

    let gamma = random(&mut rng, &[3], 0.5, 1.5);
    let beta = random(&mut rng, &[3], -0.5, 0.5);
    for (label, mode) in [("batch_norm train", Mode::Train), ("batch_norm infer", Mode::Infer)] {
        op(
            label,
            vec![x.clone(), gamma.clone(), beta.clone()],
            &|t, v| {
                let mut stats = RunningStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                t.batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormOptions::default())
            },
            &mut rng,
        )?;
    }

    let small = away_from_zero(&mut rng, &[2, 3, 4, 5]);
    op("relu", vec![small.clone()], &|t, v| Ok(t.relu(v[0])), &mut rng)?;
    op("sigmoid", vec![random(&mut rng, &[2, 3, 4, 5], -4.0, 4.0)], &|t, v| Ok(t.sigmoid(v[0])), &mut rng)?;
    let other = random(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    op("add", vec![small.clone(), other.clone()], &|t, v| t.add(v[0], v[1]), &mut rng)?;
    op("mul", vec![small.clone(), other.clone()], &|t, v| t.mul(v[0], v[1]), &mut rng)?;
    op("sum", vec![small.clone()], &|t, v| Ok(t.sum(v[0])), &mut rng)?;
    op("global_avg_pool", vec![small.clone()], &|t, v| t.global_avg_pool(v[0]), &mut rng)?;
    op("bilinear_resize up", vec![small.clone()], &|t, v| t.bilinear_resize(v[0], 9, 11), &mut rng)?;
    op("bilinear_resize down", vec![small.clone()], &|t, v| t.bilinear_resize(v[0], 3, 2), &mut rng)?;
    op("bilinear_resize from 1x1", vec![random(&mut rng, &[1, 2, 1, 1], -1.0, 1.0)], &|t, v| t.bilinear_resize(v[0], 3, 4), &mut rng)?;
    op(
        "concat",
        vec![small.clone(), random(&mut rng, &[2, 2, 4, 5], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1]]),
        &mut rng,
    )?;
    op(
        "dropout",
        vec![small.clone()],
        &|t, v| t.dropout(v[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)),
        &mut rng,
    )?;

    let p = random(&mut rng, &[2, 1, 4, 4], 0.05, 0.95);
    let y = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
    let cfg = LossConfig::default();
    op("bce_loss", vec![p.clone()], &|t, v| t.bce_loss(v[0], &y, &cfg), &mut rng)?;
    op("focal_loss", vec![p.clone()], &|t, v| t.focal_loss(v[0], &y, &cfg), &mut rng)?;
    op(
        "focal_loss unit weight gamma 0",
        vec![p.clone()],
        &|t, v| t.focal_loss_weighted(v[0], &y, FocalWeight::Unit, 0.0, cfg.clip_epsilon),
        &mut rng,
    )?;
    op("dice_loss", vec![p.clone()], &|t, v| t.dice_loss(v[0], &y), &mut rng)?;
    op("multi_loss", vec![p.clone()], &|t, v| Ok(t.multi_loss(v[0], &y, &cfg)?.total), &mut rng)?;

    let module_probe = Probe {
        per_tensor: Some(24),
        ..Probe::default()
    };
    let qa = QuickAttention::new("qa", 4);
    let mut store = ParameterStore::new();
    qa.init(&mut store, &mut rng)?;
    let xq = random(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    results.push(check_module("quick_attention", &store, &xq, &|c, x| qa.forward(c, x), &module_probe, rng.random())?);

    let block = ExpandedConvBlock::new(
        "block",
        ExpandedConvConfig {
            in_channels: 4,
            out_channels: 4,
            expansion: 3,
            stride: 1,
            dilation: 2,
        },
    );
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut rng)?;
    results.push(check_module("expanded_conv residual", &store, &xq, &|c, x| block.forward(c, x), &module_probe, rng.random())?);

    let strided = ExpandedConvBlock::new(
        "block",
        ExpandedConvConfig {
            in_channels: 4,
            out_channels: 6,
            expansion: 2,
            stride: 2,
            dilation: 1,
        },
    );
    let mut store = ParameterStore::new();
    strided.init(&mut store, &mut rng)?;
    results.push(check_module("expanded_conv stride 2", &store, &xq, &|c, x| strided.forward(c, x), &module_probe, rng.random())?);

    let aspp = AsppBlock::new(
        "aspp",
        AsppConfig {
            in_channels: 4,
            branch_channels: 3,
            out_channels: 4,
            rates: vec![1, 2, 3],
        },
    );
    let mut store = ParameterStore::new();
    aspp.init(&mut store, &mut rng)?;
    results.push(check_module("aspp", &store, &xq, &|c, x| aspp.forward(c, x), &module_probe, rng.random())?);

    let spec = reduced_spec();
    let net = HistoSeg::new(spec.clone())?;
    let store = net.init_params::<f64>(rng.random())?;
    let xn = random(&mut rng, &[2, 3, spec.input_height, spec.input_width], 0.0, 1.0);
    let yn = random(&mut rng, &[2, 1, spec.input_height, spec.input_width], 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
    let net_probe = Probe {
        per_tensor: Some(6),
        ..Probe::default()
    };
    results.push(check_module(
        "network (reduced) + multi_loss",
        &store,
        &xn,
        &|c, x| {
            let p = net.forward(c, x)?;
            Ok(c.tape.multi_loss(p, &yn, &cfg)?.total)
        },
        &net_probe,
        rng.random(),
    )?);

    Ok(GradcheckReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x * x evaluated through a graph with a deliberately broken rule.
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let graph = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let value = t.value(v[0]).map(|a| a * a);
            Ok(t.record(
                &[v[0]],
                value,
                Box::new(|ctx| vec![Some(ctx.grad.clone())]),
            ))
        };
        let r = check_op("broken", &[x], &graph, &Probe::default(), 1).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn passes_a_correct_gradient() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_op("square", &[x], &|t, v| t.mul(v[0], v[0]), &Probe::default(), 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.elements, 3);
    }

    #[test]
    fn relu_kinks_are_stepped_around() {
        // 3e-6 sits inside the default step; exactly 0 is never resolved
        let x = Tensor::new([3], vec![3e-6, -0.4, 0.0]).unwrap();
        let r = check_op("relu", &[x], &|t, v| Ok(t.relu(v[0])), &Probe::default(), 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!((r.elements, r.skipped), (2, 1));
    }

    #[test]
    fn pattern_tracks_relu_signs() {
        let run = |v: f64| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Tensor::new([2], vec![v, 1.0]).unwrap(), false);
            t.relu(x);
            t.activation_pattern()
        };
        assert_eq!(run(0.3), run(0.7));
        assert_ne!(run(0.3), run(-0.3));
    }
}
