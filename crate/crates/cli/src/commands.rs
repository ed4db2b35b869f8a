use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use histoseg::checkpoint::load_into;
use histoseg::data::{
    extract_patches, generate_synthetic, load_dataset, load_image, load_mask, png_stems, reflect_pad, save_gray,
    save_mask, split, write_dataset, LabeledSample, SplitManifest,
};
use histoseg::gradcheck::run_suite;
use histoseg::layers::ForwardCtx;
use histoseg::metrics::{binarize, evaluate as score_image, BinaryMask, EvalReport, DEFAULT_THRESHOLD};
use histoseg::network::{build, count_flops, HistoSeg, OUTPUT_STRIDE};
use histoseg::tensor::Tensor;
use histoseg::trainer::{evaluate, train as run_training};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::{EvalArgs, FlopsArgs, GradcheckArgs, PatchArgs, PredictArgs, SynthArgs, TrainArgs};

const MANIFEST: &str = "manifest.json";

/// Sizes the global worker pool from `HISTOSEG_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HISTOSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("HISTOSEG_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    ensure!(a.n > 0, "--n must be at least 1");
    let samples = generate_synthetic(a.n, a.size, a.seed)?;
    let manifest = split(&samples, &a.fractions, a.seed)?;
    write_dataset(&a.out, &samples)?;
    manifest.save(&a.out.join(MANIFEST))?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        samples.len(),
        a.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct PatchSummary {
    size: usize,
    stride: usize,
    total: usize,
    sources: BTreeMap<String, usize>,
}

pub fn patch(a: &PatchArgs) -> Result<()> {
    let images = png_stems(&a.images)?;
    let masks = png_stems(&a.masks)?;
    if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
        bail!("image `{stem}` has no mask in {}", a.masks.display());
    }
    ensure!(!images.is_empty(), "no PNG images in {}", a.images.display());
    let per_source: Vec<(String, Vec<LabeledSample>)> = images
        .par_iter()
        .map(|(stem, path)| {
            let image = load_image(path)?;
            let mask = load_mask(&masks[stem])?;
            let patches = extract_patches(stem, &image, &mask, a.size, a.stride)?;
            Ok((stem.clone(), patches))
        })
        .collect::<Result<_>>()?;
    let mut sources = BTreeMap::new();
    for (stem, patches) in &per_source {
        write_dataset(&a.out, patches)?;
        sources.insert(stem.clone(), patches.len());
    }
    let summary = PatchSummary {
        size: a.size,
        stride: a.stride,
        total: sources.values().sum(),
        sources,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("wrote {} patches from {} images to {}", summary.total, summary.sources.len(), a.out.display());
    Ok(())
}

fn select(samples: &[LabeledSample], ids: &[String]) -> Result<Vec<LabeledSample>> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| anyhow!("manifest lists `{id}`, which is not in the dataset"))
        })
        .collect()
}

#[derive(Serialize)]
struct TestMetrics {
    samples: usize,
    best_epoch: usize,
    loss: f64,
    iou: f64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut overrides = a.config.overrides.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((key.to_string(), v));
        }
    };
    flag("data.dir", a.data.as_ref().map(|p| serde_json::to_string(p).expect("path")));
    flag("train.epochs", a.epochs.map(|v| v.to_string()));
    flag("train.learning_rate", a.lr.map(|v| v.to_string()));
    flag("train.batch_size", a.batch_size.map(|v| v.to_string()));
    flag("train.seed", a.seed.map(|v| v.to_string()));
    flag("network.width_multiplier", a.width.map(|v| v.to_string()));
    let cfg = RunConfig::resolve(a.config.config.as_deref(), &overrides)?;
    let dir = cfg.data.dir.clone().ok_or_else(|| anyhow!("no dataset: pass --data or set data.dir"))?;

    let samples = load_dataset(&dir)?;
    ensure!(!samples.is_empty(), "dataset {} is empty", dir.display());
    let (h, w) = (cfg.network.input_height, cfg.network.input_width);
    if let Some(s) = samples.iter().find(|s| (s.mask.height(), s.mask.width()) != (h, w)) {
        bail!(
            "sample `{}` is {}x{} but the network expects {h}x{w}; set network.input_height and network.input_width",
            s.id,
            s.mask.width(),
            s.mask.height()
        );
    }
    let manifest_path = dir.join(MANIFEST);
    let manifest = if manifest_path.exists() {
        SplitManifest::load(&manifest_path)?
    } else {
        split(&samples, &cfg.data.fractions, cfg.train.seed)?
    };
    let train_set = select(&samples, &manifest.train)?;
    let val_set = select(&samples, &manifest.val)?;
    let test_set = select(&samples, &manifest.test)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cfg.write(&a.out)?;
    let (net, mut store) = build::<f32>(&cfg.network, cfg.train.seed)?;
    let start = Instant::now();
    let outcome = run_training(&net, &mut store, &train_set, &val_set, &cfg.train, Some(&a.out))?;
    println!(
        "trained {} epochs in {:.1}s; best epoch {} with validation IoU {:.4}",
        cfg.train.epochs,
        start.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_iou
    );
    if !test_set.is_empty() {
        let ev = evaluate(&net, &outcome.best, &test_set, cfg.train.batch_size, &cfg.train.loss)?;
        let metrics = TestMetrics {
            samples: test_set.len(),
            best_epoch: outcome.best_epoch,
            loss: ev.loss.total(),
            iou: ev.iou,
        };
        write_json(&a.out.join("test-metrics.json"), &metrics)?;
        println!("test IoU {:.4} over {} samples", ev.iou, test_set.len());
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let beside = a.model.parent().map(|p| p.join(RESOLVED_CONFIG));
    let cfg = match (&a.config, beside) {
        (Some(path), _) => RunConfig::load_resolved(path)?,
        (None, Some(path)) if path.exists() => RunConfig::load_resolved(&path)?,
        _ => RunConfig::default(),
    };
    let net = HistoSeg::new(cfg.network.clone())?;
    let mut store = net.init_params::<f32>(0)?;
    load_into(&a.model, &mut store).with_context(|| format!("loading {}", a.model.display()))?;

    let image = load_image(&a.image)?;
    let (w, h) = (image.width(), image.height());
    let padded = reflect_pad(&image, OUTPUT_STRIDE);
    let mut ctx = ForwardCtx::infer(&store);
    let x = ctx.tape.constant(padded.to_tensor::<f32>());
    let p = net.forward(&mut ctx, x)?;
    let prob = ctx.tape.value(p);
    let pw = padded.width();
    let cropped: Vec<f32> = (0..h).flat_map(|y| prob.data()[y * pw..y * pw + w].iter().copied()).collect();

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    if a.prob {
        let levels: Vec<u8> = cropped.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        save_gray(&a.out, w, h, &levels)?;
    } else {
        let mask = binarize(&Tensor::new(vec![h, w], cropped)?, DEFAULT_THRESHOLD)?;
        save_mask(&a.out, &mask)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let gt = png_stems(&a.gt)?;
    let pred = png_stems(&a.pred)?;
    ensure!(!gt.is_empty(), "no PNG masks in {}", a.gt.display());
    if let Some(stem) = gt.keys().find(|s| !pred.contains_key(*s)) {
        bail!("ground truth `{stem}` has no prediction in {}", a.pred.display());
    }
    if let Some(stem) = pred.keys().find(|s| !gt.contains_key(*s)) {
        bail!("prediction `{stem}` has no ground truth in {}", a.gt.display());
    }
    let records = gt
        .par_iter()
        .map(|(stem, path)| {
            let g: BinaryMask = load_mask(path)?;
            let p = load_mask(&pred[stem])?;
            score_image(stem.clone(), &p, &g).with_context(|| format!("scoring `{stem}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(&records);
    write_json(&a.report, &report)?;
    let s = &report.aggregate;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = run_suite(a.seed)?;
    print!("{}", report.table());
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    ensure!(report.passed(), "gradient check failed");
    Ok(())
}

pub fn flops(a: &FlopsArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.config.config.as_deref(), &a.config.overrides)?;
    let report = count_flops(&cfg.network)?;
    println!("{:<28} {:<10} {:>14} {:>12}", "layer", "kind", "macs", "elementwise");
    for r in &report.rows {
        let kind = serde_json::to_value(r.kind)?;
        println!("{:<28} {:<10} {:>14} {:>12}", r.name, kind.as_str().unwrap_or(""), r.macs, r.elementwise);
    }
    println!("attention macs {}", report.attention_macs());
    println!("total macs {}", report.total_macs());
    if let Some(path) = &a.json {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [histoseg::network::LayerCost],
            attention_macs: u64,
            total_macs: u64,
        }
        write_json(
            path,
            &Out {
                rows: &report.rows,
                attention_macs: report.attention_macs(),
                total_macs: report.total_macs(),
            },
        )?;
    }
    Ok(())
}
