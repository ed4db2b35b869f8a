//! Reference implementations shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use histoseg::data::{generate_synthetic, split, LabeledSample};
use histoseg::metrics::{object_f1, BinaryMask};
use histoseg::ops::{ConvOptions, Padding};
use histoseg::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- convolution

#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub n: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub same: bool,
    pub bias: bool,
    pub depthwise: bool,
}

impl ConvCase {
    pub fn random(rng: &mut ChaCha8Rng, depthwise: bool) -> Self {
        let k = [1, 2, 3, 3, 5][rng.random_range(0..5)];
        let dilation = rng.random_range(1..=3);
        let span = (k - 1) * dilation + 1;
        let same = rng.random_bool(0.7);
        let lo = if same { 1 } else { span };
        let in_c = rng.random_range(1..=5);
        Self {
            n: rng.random_range(1..=2),
            in_c,
            out_c: if depthwise { in_c } else { rng.random_range(1..=5) },
            h: rng.random_range(lo..=lo + 8),
            w: rng.random_range(lo..=lo + 8),
            k,
            stride: rng.random_range(1..=3),
            dilation,
            same,
            bias: rng.random_bool(0.5),
            depthwise,
        }
    }

    /// Output extent and leading pad along an axis of length `len`.
    fn axis(&self, len: usize) -> (usize, usize) {
        let span = (self.k - 1) * self.dilation + 1;
        if self.same {
            let out = len.div_ceil(self.stride);
            let need = (out - 1) * self.stride + span;
            (out, need.saturating_sub(len) / 2)
        } else {
            ((len - span) / self.stride + 1, 0)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let per_group = if self.depthwise { 1 } else { self.in_c };
        [self.out_c, per_group, self.k, self.k]
    }

    pub fn options(&self) -> ConvOptions {
        ConvOptions {
            stride: self.stride,
            dilation: self.dilation,
            padding: if self.same { Padding::Same } else { Padding::Valid },
        }
    }
}

/// Plain nested-loop convolution with its adjoint. Returns the output and,
/// for upstream gradient `g`, the input, weight and bias gradients.
pub struct ConvReference {
    pub y: Vec<f64>,
    pub out_hw: (usize, usize),
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv_reference(case: &ConvCase, x: &[f64], w: &[f64], b: Option<&[f64]>, g: Option<&[f64]>) -> ConvReference {
    let (oh, pt) = case.axis(case.h);
    let (ow, pl) = case.axis(case.w);
    let per_group = if case.depthwise { 1 } else { case.in_c };
    let k = case.k;
    let x_at = |n: usize, c: usize, y: usize, xx: usize| ((n * case.in_c + c) * case.h + y) * case.w + xx;
    let w_at = |o: usize, c: usize, i: usize, j: usize| ((o * per_group + c) * k + i) * k + j;
    let y_at = |n: usize, o: usize, y: usize, xx: usize| ((n * case.out_c + o) * oh + y) * ow + xx;
    let mut y = vec![0.0; case.n * case.out_c * oh * ow];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; case.out_c];
    for n in 0..case.n {
        for o in 0..case.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let yi = y_at(n, o, oy, ox);
                    let gv = g.map_or(0.0, |g| g[yi]);
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    db[o] += gv;
                    for cl in 0..per_group {
                        let c = if case.depthwise { o } else { cl };
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * case.stride + i * case.dilation) as isize - pt as isize;
                                let ix = (ox * case.stride + j * case.dilation) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= case.h as isize || ix >= case.w as isize {
                                    continue;
                                }
                                let xi = x_at(n, c, iy as usize, ix as usize);
                                let wi = w_at(o, cl, i, j);
                                acc += w[wi] * x[xi];
                                dw[wi] += gv * x[xi];
                                dx[xi] += gv * w[wi];
                            }
                        }
                    }
                    y[yi] = acc;
                }
            }
        }
    }
    ConvReference {
        y,
        out_hw: (oh, ow),
        dx,
        dw,
        db,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> Option<f64> {
    let worst = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs() / q.abs().max(1.0))
        .fold(0.0, f64::max);
    (a.len() == b.len() && worst <= tol).then_some(worst)
}

/// Runs `cases` random convolutions of each kind through the tape and the
/// reference, forward and backward. Returns the worst deviation.
pub fn conv_oracle_sweep(seed: u64, cases: usize, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..2 * cases {
        let case = ConvCase::random(&mut r, i % 2 == 1);
        let x = random_tensor(&mut r, &[case.n, case.in_c, case.h, case.w]);
        let w = random_tensor(&mut r, &case.weight_shape());
        let b = random_tensor(&mut r, &[case.out_c]);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
        let bias = case.bias.then_some(bv);
        let out = if case.depthwise {
            tape.depthwise_conv2d(xv, wv, bias, case.options())
        } else {
            tape.conv2d(xv, wv, bias, case.options())
        }
        .map_err(|e| format!("{case:?}: {e}"))?;
        let shape = tape.shape(out).to_vec();
        let g = random_tensor(&mut r, &shape);
        let loss = tape.weighted_sum(out, &g).unwrap();
        tape.backward(loss).unwrap();

        let reference = conv_reference(&case, x.data(), w.data(), case.bias.then_some(b.data()), Some(g.data()));
        let expected_shape = vec![case.n, case.out_c, reference.out_hw.0, reference.out_hw.1];
        if shape != expected_shape {
            return Err(format!("{case:?}: shape {shape:?}, expected {expected_shape:?}"));
        }
        let mut compare = |what: &str, got: &[f64], want: &[f64]| -> Result<(), String> {
            let e = close(got, want, tol).ok_or_else(|| format!("{case:?}: {what} deviates"))?;
            worst = worst.max(e);
            Ok(())
        };
        compare("output", tape.value(out).data(), &reference.y)?;
        compare("input gradient", tape.grad(xv).unwrap().data(), &reference.dx)?;
        compare("weight gradient", tape.grad(wv).unwrap().data(), &reference.dw)?;
        if case.bias {
            compare("bias gradient", tape.grad(bv).unwrap().data(), &reference.db)?;
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- object F1

/// 8-connected labels by union-find; label order is irrelevant here.
pub fn reference_objects(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for (dx, dy) in [(-1isize, -1isize), (0, -1), (1, -1), (-1, 0)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && mask.get(nx as usize, ny as usize) {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny as usize * w + nx as usize));
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..w * h {
        if mask.bits()[i] {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

pub struct ReferenceMatch {
    pub pred_objects: usize,
    pub gt_objects: usize,
    pub tp: usize,
    pub f1: f64,
}

/// Tries every one-to-one assignment of predicted objects to ground-truth
/// objects (or to nothing) and keeps the one with the most qualifying pairs.
pub fn reference_object_f1(pred: &BinaryMask, gt: &BinaryMask, overlap: f64) -> ReferenceMatch {
    let p = reference_objects(pred);
    let g = reference_objects(gt);
    let ok: Vec<Vec<bool>> = p
        .iter()
        .map(|po| {
            g.iter()
                .map(|go| {
                    let inter = po.iter().filter(|i| go.binary_search(i).is_ok()).count();
                    inter as f64 >= overlap * go.len() as f64
                })
                .collect()
        })
        .collect();
    fn best(i: usize, ok: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if i == ok.len() {
            return 0;
        }
        let mut top = best(i + 1, ok, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(ok[i][j] as usize + best(i + 1, ok, used));
                used[j] = false;
            }
        }
        top
    }
    let tp = best(0, &ok, &mut vec![false; g.len()]);
    let (fp, fnn) = (p.len() - tp, g.len() - tp);
    let f1 = if p.is_empty() && g.is_empty() {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    };
    ReferenceMatch {
        pred_objects: p.len(),
        gt_objects: g.len(),
        tp,
        f1,
    }
}

fn rectangles(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| rects.iter().any(|&(x0, y0, rw, rh)| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)).unwrap()
}

/// A ground-truth mask of a few rectangles and a prediction made of jittered,
/// dropped and spurious copies of them.
pub fn random_mask_pair(rng: &mut ChaCha8Rng) -> (BinaryMask, BinaryMask) {
    let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let rect = |rng: &mut ChaCha8Rng| {
        let rw = rng.random_range(1..=w.min(6));
        let rh = rng.random_range(1..=h.min(6));
        (rng.random_range(0..=w - rw), rng.random_range(0..=h - rh), rw, rh)
    };
    let gt_rects: Vec<_> = (0..rng.random_range(0..=5)).map(|_| rect(rng)).collect();
    let mut pred_rects = Vec::new();
    for &(x, y, rw, rh) in &gt_rects {
        if rng.random_bool(0.25) {
            continue;
        }
        let jitter = |rng: &mut ChaCha8Rng, v: usize, lim: usize| (v as isize + rng.random_range(-2i32..=2) as isize).clamp(0, lim as isize - 1) as usize;
        let (nx, ny) = (jitter(rng, x, w), jitter(rng, y, h));
        let nw = (rw as isize + rng.random_range(-2i32..=2) as isize).clamp(1, (w - nx) as isize) as usize;
        let nh = (rh as isize + rng.random_range(-2i32..=2) as isize).clamp(1, (h - ny) as isize) as usize;
        pred_rects.push((nx, ny, nw, nh));
    }
    for _ in 0..rng.random_range(0..=2) {
        pred_rects.push(rect(rng));
    }
    (rectangles(w, h, &gt_rects), rectangles(w, h, &pred_rects))
}

/// Compares `object_f1` with the exhaustive reference on `pairs` random mask
/// pairs. Returns the number of pairs with at least one true positive.
pub fn object_f1_oracle_sweep(seed: u64, pairs: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut with_matches = 0;
    for k in 0..pairs {
        let (gt, pred) = random_mask_pair(&mut r);
        let got = object_f1(&pred, &gt).map_err(|e| e.to_string())?;
        let want = reference_object_f1(&pred, &gt, 0.5);
        let same = got.pred_objects == want.pred_objects
            && got.gt_objects == want.gt_objects
            && got.true_positives == want.tp
            && got.false_positives == want.pred_objects - want.tp
            && got.false_negatives == want.gt_objects - want.tp
            && (got.f1 - want.f1).abs() <= 1e-12;
        if !same {
            return Err(format!(
                "pair {k}: got tp {} of {}/{}, f1 {}; reference tp {} of {}/{}, f1 {}",
                got.true_positives, got.pred_objects, got.gt_objects, got.f1, want.tp, want.pred_objects, want.gt_objects, want.f1
            ));
        }
        with_matches += (want.tp > 0) as usize;
    }
    Ok(with_matches)
}

// ---------------------------------------------------------------- data

/// The desk-scale synthetic dataset split into train, validation and test.
pub fn synthetic_splits(n: usize, size: usize, seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>) {
    let samples = generate_synthetic(n, size, seed).unwrap();
    let m = split(&samples, &[0.7, 0.2, 0.1], seed).unwrap();
    let pick = |ids: &[String]| -> Vec<LabeledSample> {
        ids.iter().map(|id| samples.iter().find(|s| &s.id == id).unwrap().clone()).collect()
    };
    (pick(&m.train), pick(&m.val), pick(&m.test))
}
