//! Segmentation metrics: object-level F1, Dice, pixel F1, IoU and mIoU.
//!
//! Degenerate pairs where both masks are empty score 1.0 on every metric.

use std::collections::VecDeque;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{width}x{height} mask needs {} bits, got {}", width * height, bits.len()),
            ));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    /// Builds a mask from a predicate on `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                "metrics",
                format!(
                    "mask extents differ: {}x{} vs {}x{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }

    fn intersection(&self, other: &Self) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Connected-component labeling of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledObjects {
    pub width: usize,
    pub height: usize,
    /// 0 is background, objects are 1..=count.
    pub labels: Vec<u32>,
    pub count: usize,
    /// Pixel count of object `k` at index `k - 1`.
    pub sizes: Vec<usize>,
}

/// 8-connected labeling. Labels follow the row-major order of each object's
/// first pixel.
pub fn connected_components(mask: &BinaryMask) -> LabeledObjects {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    LabeledObjects {
        width: w,
        height: h,
        count: sizes.len(),
        labels,
        sizes,
    }
}

/// Object-level detection counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ObjectMatch {
    pub pred_objects: usize,
    pub gt_objects: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub f1: f64,
}

/// Minimum fraction of a ground-truth object a prediction must cover.
pub const OBJECT_OVERLAP: f64 = 0.5;

pub fn object_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<ObjectMatch> {
    object_f1_with(pred, gt, OBJECT_OVERLAP)
}

/// Object F1 with a configurable overlap threshold.
///
/// A predicted object may match a ground-truth object when their intersection
/// covers at least `overlap` of the ground-truth object. Each prediction
/// prefers its unmatched candidate of largest intersection; augmenting paths
/// then reassign earlier choices when that frees a match, so the number of
/// true positives is the maximum over all one-to-one assignments.
pub fn object_f1_with(pred: &BinaryMask, gt: &BinaryMask, overlap: f64) -> Result<ObjectMatch> {
    pred.check_same(gt)?;
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::InvalidArgument(format!("overlap must be in (0, 1], got {overlap}")));
    }
    let p = connected_components(pred);
    let g = connected_components(gt);
    let mut inter = vec![vec![0usize; g.count]; p.count];
    for (&lp, &lg) in p.labels.iter().zip(&g.labels) {
        if lp != 0 && lg != 0 {
            inter[lp as usize - 1][lg as usize - 1] += 1;
        }
    }
    let candidates: Vec<Vec<usize>> = inter
        .iter()
        .map(|row| {
            let mut c: Vec<usize> = (0..g.count)
                .filter(|&j| row[j] > 0 && row[j] as f64 >= overlap * g.sizes[j] as f64)
                .collect();
            c.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
            c
        })
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; g.count];
    let mut tp = 0;
    for i in 0..p.count {
        let mut seen = vec![false; g.count];
        if augment(i, &candidates, &mut gt_owner, &mut seen) {
            tp += 1;
        }
    }
    let fp = p.count - tp;
    let fn_ = g.count - tp;
    let f1 = if p.count == 0 && g.count == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(ObjectMatch {
        pred_objects: p.count,
        gt_objects: g.count,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        f1,
    })
}

fn augment(i: usize, candidates: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &candidates[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|k| augment(k, candidates, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// `2|A∩B| / (|A| + |B|)`.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let (a, b, i) = (pred.count(), gt.count(), pred.intersection(gt));
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    })
}

/// Pixel-set F1 written as the harmonic mean of precision and recall:
/// `2 / (|A|/|A∩B| + |B|/|A∩B|)`.
pub fn pixel_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let (a, b, i) = (pred.count(), gt.count(), pred.intersection(gt));
    Ok(if a + b == 0 {
        1.0
    } else if i == 0 {
        0.0
    } else {
        let i = i as f64;
        2.0 / (a as f64 / i + b as f64 / i)
    })
}

/// Foreground intersection over union.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let i = pred.intersection(gt);
    let u = pred.count() + gt.count() - i;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Mean of foreground and background IoU for one image.
pub fn image_miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let fg = iou(pred, gt)?;
    let bg = iou(&pred.complement(), &gt.complement())?;
    Ok(0.5 * (fg + bg))
}

/// Average of per-image mIoU.
pub fn miou(records: &[ImageMetrics]) -> f64 {
    mean(records.iter().map(|r| r.miou))
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Foreground where the probability is at least `threshold`. The tensor must
/// hold a single map: `H x W` or any shape whose leading extents are all 1.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let shape = prob.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("binarize", format!("expected a single H x W map, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    BinaryMask::new(w, h, prob.data().iter().map(|&v| v.as_f64() >= threshold).collect())
}

/// Metrics of one prediction/ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub object_f1: f64,
    pub pixel_f1: f64,
    pub dice: f64,
    pub iou: f64,
    pub miou: f64,
    pub objects: ObjectMatch,
}

pub fn evaluate(name: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<ImageMetrics> {
    let objects = object_f1(pred, gt)?;
    Ok(ImageMetrics {
        name: name.into(),
        object_f1: objects.f1,
        pixel_f1: pixel_f1(pred, gt)?,
        dice: dice_score(pred, gt)?,
        iou: iou(pred, gt)?,
        miou: image_miou(pred, gt)?,
        objects,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A metric serialized both as a two-decimal percentage and as the raw value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score(pub f64);

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Score", 2)?;
        st.serialize_field("percent", &format!("{:.2}", self.0 * 100.0))?;
        st.serialize_field("value", &self.0)?;
        st.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreSet {
    pub object_f1: Score,
    pub pixel_f1: Score,
    pub dice: Score,
    pub iou: Score,
    pub miou: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEntry {
    pub name: String,
    #[serde(flatten)]
    pub scores: ScoreSet,
    pub objects: ObjectMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub images: usize,
    #[serde(flatten)]
    pub scores: ScoreSet,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Evaluation summary: per-image records and their means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageEntry>,
}

impl EvalReport {
    pub fn new(records: &[ImageMetrics]) -> Self {
        let scores = |r: &ImageMetrics| ScoreSet {
            object_f1: Score(r.object_f1),
            pixel_f1: Score(r.pixel_f1),
            dice: Score(r.dice),
            iou: Score(r.iou),
            miou: Score(r.miou),
        };
        let m = |f: fn(&ImageMetrics) -> f64| Score(mean(records.iter().map(f)));
        EvalReport {
            aggregate: Aggregate {
                images: records.len(),
                scores: ScoreSet {
                    object_f1: m(|r| r.object_f1),
                    pixel_f1: m(|r| r.pixel_f1),
                    dice: m(|r| r.dice),
                    iou: m(|r| r.iou),
                    miou: Score(miou(records)),
                },
                true_positives: records.iter().map(|r| r.objects.true_positives).sum(),
                false_positives: records.iter().map(|r| r.objects.false_positives).sum(),
                false_negatives: records.iter().map(|r| r.objects.false_negatives).sum(),
            },
            per_image: records
                .iter()
                .map(|r| ImageEntry {
                    name: r.name.clone(),
                    scores: scores(r),
                    objects: r.objects,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        BinaryMask::new(w, h, bits).unwrap()
    }

    #[test]
    fn components() {
        let two = mask(&["##..##", "##..##", "......"]);
        assert_eq!(connected_components(&two).count, 2);
        assert_eq!(connected_components(&mask(&["...", "..."])).count, 0);
        let diag = connected_components(&mask(&["#.", ".#"]));
        assert_eq!(diag.count, 1);
        assert_eq!(diag.sizes, [2]);
        let order = connected_components(&mask(&["..#", "#..", "#.."]));
        assert_eq!(order.labels, [0, 0, 1, 2, 0, 0, 2, 0, 0]);
    }

    #[test]
    fn object_f1_worked_examples() {
        let gt = mask(&["##.##.##", "##.##.##"]);
        assert_eq!(object_f1(&gt, &gt).unwrap().f1, 1.0);
        let pred = mask(&["##.##...", "##.##..."]);
        let m = object_f1(&pred, &gt).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 0, 1));
        assert!((m.f1 - 0.8).abs() < 1e-15);

        // 2 of 5 pixels = 40% of the object: not a detection
        let gt = mask(&["#####"]);
        let pred = mask(&["##..."]);
        let m = object_f1(&pred, &gt).unwrap();
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 1, 1));
    }

    #[test]
    fn overlap_threshold_filters_before_intersection() {
        // The prediction overlaps the large object more, but only covers the
        // small object by the threshold.
        let gt = mask(&["########.#", "########..", "########.."]);
        let pred = mask(&["#######..#", ".......###", ".........."]);
        let m = object_f1(&pred, &gt).unwrap();
        assert_eq!(m.true_positives, 1);
    }

    #[test]
    fn empty_cases() {
        let e = mask(&["...", "..."]);
        let f = mask(&["#..", "..."]);
        assert_eq!(object_f1(&e, &e).unwrap().f1, 1.0);
        assert_eq!(object_f1(&e, &f).unwrap().f1, 0.0);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(pixel_f1(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &f).unwrap(), 0.0);
    }

    #[test]
    fn subset_pair() {
        let b = BinaryMask::from_fn(10, 10, |_, _| true).unwrap();
        let a = BinaryMask::from_fn(10, 10, |_, y| y < 5).unwrap();
        assert!((dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((pixel_f1(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        // background: pred 50 px, gt 0 px
        assert_eq!(image_miou(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let a = mask(&["#."]);
        let b = mask(&["#", "."]);
        assert!(dice_score(&a, &b).is_err());
        assert!(object_f1(&a, &b).is_err());
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn binarize_ties_and_shapes() {
        let t = Tensor::<f32>::new([1, 1, 1, 3], vec![0.5, 0.49, 0.6]).unwrap();
        let m = binarize(&t, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, false, true]);
        assert!(binarize(&Tensor::<f32>::zeros([2, 2, 2]), 0.5).is_err());
        assert!(binarize(&t, 1.0).is_err());
    }

    #[test]
    fn report_formats_percentages() {
        let gt = mask(&["##.##.##"]);
        let pred = mask(&["##.##..."]);
        let r = evaluate("img", &pred, &gt).unwrap();
        let report = EvalReport::new(&[r]);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["aggregate"]["object_f1"]["percent"], "80.00");
        assert_eq!(json["per_image"][0]["name"], "img");
        assert_eq!(json["aggregate"]["images"], 1);
    }
}
