//! The full encoder-decoder segmentation network.
//!
//! Pipeline: stem (3x3 conv stride 2, BN, relu) -> 16 expanded convolution
//! blocks with a quick-attention unit after block 6 -> ASPP -> global
//! average pool -> biased 1x1 conv, relu -> bilinear resize back to the ASPP
//! resolution -> concat with the ASPP output -> 1x1 conv, BN, relu ->
//! dropout -> decoder quick attention -> + 1x1 projection of the encoder
//! attention output -> 1x1 conv to one channel -> sigmoid -> bilinear resize
//! to the input size.
//!
//! Output stride is 8: the stem and the first blocks of the second and third
//! width groups stride by 2, and later blocks use dilation instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{AsppBlock, AsppConfig, ExpandedConvBlock, ExpandedConvConfig, QuickAttention};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvBn, ForwardCtx};
use crate::params::ParameterStore;
use crate::tensor::Real;

pub const OUTPUT_STRIDE: usize = 8;
/// The encoder attention unit follows this (1-based) block.
pub const ENCODER_QA_AFTER_BLOCK: usize = 6;
pub const STEM_CHANNELS: usize = 32;

/// Width groups: (base output channels, repeats, stride of the first block, dilation).
pub const BLOCK_GROUPS: [(usize, usize, usize, usize); 6] = [
    (16, 1, 1, 1),
    (24, 2, 2, 1),
    (32, 3, 2, 1),
    (64, 4, 1, 2),
    (96, 3, 1, 2),
    (160, 3, 1, 4),
];

/// Scales a base width and rounds to a multiple of 8 (never below 8, never
/// more than 10% under the scaled value).
pub fn scale_width(base: usize, multiplier: f64) -> usize {
    let v = base as f64 * multiplier;
    let mut rounded = (((v + 4.0) / 8.0).floor() as usize * 8).max(8);
    if (rounded as f64) < 0.9 * v {
        rounded += 8;
    }
    rounded
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    /// Scales every channel width.
    pub width_multiplier: f64,
    /// Expansion factor of the expanded convolution blocks.
    pub expansion: usize,
    pub aspp_rates: Vec<usize>,
    /// Base ASPP branch and fuse width (before the multiplier).
    pub aspp_width: usize,
    /// Base decoder pool-projection and fuse width (before the multiplier).
    pub decoder_width: usize,
    pub dropout: f64,
    pub encoder_qa: bool,
    pub decoder_qa: bool,
    /// Projected encoder attention output added to the decoder attention output.
    pub qa_residual: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_height: 256,
            input_width: 256,
            width_multiplier: 0.25,
            expansion: 6,
            aspp_rates: vec![6, 12, 18],
            aspp_width: 256,
            decoder_width: 256,
            dropout: 0.1,
            encoder_qa: true,
            decoder_qa: true,
            qa_residual: true,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return bad(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.expansion == 0 || self.aspp_width == 0 || self.decoder_width == 0 {
            return bad("expansion and widths must be positive".into());
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad(format!("aspp_rates must be non-empty and positive, got {:?}", self.aspp_rates));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        check_input_size(self.input_height, self.input_width)
    }

    pub fn stem_channels(&self) -> usize {
        scale_width(STEM_CHANNELS, self.width_multiplier)
    }

    pub fn aspp_channels(&self) -> usize {
        scale_width(self.aspp_width, self.width_multiplier)
    }

    pub fn decoder_channels(&self) -> usize {
        scale_width(self.decoder_width, self.width_multiplier)
    }

    /// The 16 block configurations in order.
    pub fn block_configs(&self) -> Vec<ExpandedConvConfig> {
        let mut in_c = self.stem_channels();
        let mut out = Vec::new();
        for &(base, repeats, stride, dilation) in &BLOCK_GROUPS {
            let c = scale_width(base, self.width_multiplier);
            for i in 0..repeats {
                out.push(ExpandedConvConfig {
                    in_channels: in_c,
                    out_channels: c,
                    expansion: self.expansion,
                    stride: if i == 0 { stride } else { 1 },
                    dilation,
                });
                in_c = c;
            }
        }
        out
    }
}

fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(OUTPUT_STRIDE) || !w.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::InvalidArgument(format!(
            "input {h}x{w} must have positive extents divisible by {OUTPUT_STRIDE}; pad the image first"
        )));
    }
    Ok(())
}

/// Layer graph of the network. Parameters live in a separate
/// [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct HistoSeg {
    pub spec: NetworkSpec,
    pub stem: ConvBn,
    pub blocks: Vec<ExpandedConvBlock>,
    pub encoder_qa: Option<QuickAttention>,
    pub aspp: AsppBlock,
    pub pool_proj: Conv2d,
    pub decoder_fuse: ConvBn,
    pub decoder_qa: Option<QuickAttention>,
    pub skip_proj: Option<Conv2d>,
    pub head: Conv2d,
}

/// Builds the graph and initializes its parameters: He-normal conv weights,
/// zero biases, unit BN scale and zero shift.
pub fn build<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<(HistoSeg, ParameterStore<T>)> {
    let net = HistoSeg::new(spec.clone())?;
    let store = net.init_params(seed)?;
    Ok((net, store))
}

impl HistoSeg {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let stem = ConvBn::new(Conv2d::new("stem", 3, spec.stem_channels(), 3).stride(2), true);
        let configs = spec.block_configs();
        let blocks: Vec<_> = configs
            .iter()
            .enumerate()
            .map(|(i, &cfg)| ExpandedConvBlock::new(&format!("block{}", i + 1), cfg))
            .collect();
        let enc_c = configs[ENCODER_QA_AFTER_BLOCK - 1].out_channels;
        let deep_c = configs.last().expect("16 blocks").out_channels;
        let (aspp_c, dec_c) = (spec.aspp_channels(), spec.decoder_channels());
        let aspp = AsppBlock::new(
            "aspp",
            AsppConfig {
                in_channels: deep_c,
                branch_channels: aspp_c,
                out_channels: aspp_c,
                rates: spec.aspp_rates.clone(),
            },
        );
        Ok(Self {
            stem,
            blocks,
            encoder_qa: spec.encoder_qa.then(|| QuickAttention::new("encoder_qa", enc_c)),
            aspp,
            pool_proj: Conv2d::pointwise("decoder.pool_proj", aspp_c, dec_c).with_bias(),
            decoder_fuse: ConvBn::new(Conv2d::pointwise("decoder.fuse", aspp_c + dec_c, dec_c), true),
            decoder_qa: spec.decoder_qa.then(|| QuickAttention::new("decoder_qa", dec_c)),
            skip_proj: spec
                .qa_residual
                .then(|| Conv2d::pointwise("decoder.skip_proj", enc_c, dec_c).with_bias()),
            head: Conv2d::pointwise("head", dec_c, 1).with_bias(),
            spec,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.stem.init(&mut store, &mut rng)?;
        for b in &self.blocks {
            b.init(&mut store, &mut rng)?;
        }
        if let Some(qa) = &self.encoder_qa {
            qa.init(&mut store, &mut rng)?;
        }
        self.aspp.init(&mut store, &mut rng)?;
        self.pool_proj.init(&mut store, &mut rng)?;
        self.decoder_fuse.init(&mut store, &mut rng)?;
        if let Some(qa) = &self.decoder_qa {
            qa.init(&mut store, &mut rng)?;
        }
        if let Some(p) = &self.skip_proj {
            p.init(&mut store, &mut rng)?;
        }
        self.head.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Maps an `N x 3 x H x W` batch to per-pixel foreground probabilities
    /// `N x 1 x H x W`, strictly inside (0, 1).
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).dims4("histoseg")?;
        if c != 3 {
            return Err(Error::shape("histoseg", format!("expected 3 input channels, got {c}")));
        }
        check_input_size(h, w)?;
        ctx.record_shape("input", x);

        let mut y = self.stem.forward(ctx, x)?;
        ctx.record_shape("stem", y);
        let mut skip = None;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(ctx, y)?;
            ctx.record_shape(format!("block{}", i + 1), y);
            if i + 1 == ENCODER_QA_AFTER_BLOCK {
                if let Some(qa) = &self.encoder_qa {
                    y = qa.forward(ctx, y)?;
                    ctx.record_shape("encoder_qa", y);
                }
                skip = Some(y);
            }
        }

        let aspp = self.aspp.forward(ctx, y)?;
        ctx.record_shape("aspp", aspp);
        let [_, _, fh, fw] = ctx.tape.value(aspp).dims4("histoseg")?;
        let pooled = ctx.tape.global_avg_pool(aspp)?;
        ctx.record_shape("gap", pooled);
        let pooled = self.pool_proj.forward(ctx, pooled)?;
        let pooled = ctx.tape.relu(pooled);
        let up = ctx.tape.bilinear_resize(pooled, fh, fw)?;
        ctx.record_shape("pool_upsample", up);
        let cat = ctx.tape.concat(&[aspp, up])?;
        ctx.record_shape("concat", cat);
        let mut d = self.decoder_fuse.forward(ctx, cat)?;
        ctx.record_shape("decoder_fuse", d);
        d = ctx.dropout(d, self.spec.dropout)?;
        if let Some(qa) = &self.decoder_qa {
            d = qa.forward(ctx, d)?;
            ctx.record_shape("decoder_qa", d);
        }
        if let (Some(proj), Some(skip)) = (&self.skip_proj, skip) {
            let s = proj.forward(ctx, skip)?;
            d = ctx.tape.add(d, s)?;
            ctx.record_shape("qa_residual", d);
        }
        let logits = self.head.forward(ctx, d)?;
        let prob = ctx.tape.sigmoid(logits);
        ctx.record_shape("sigmoid", prob);
        let out = ctx.tape.bilinear_resize(prob, h, w)?;
        ctx.record_shape("output", out);
        Ok(out)
    }

    /// Per-layer multiply-add counts for one sample at the spec's input size.
    pub fn flops(&self) -> FlopReport {
        let mut rows = Vec::new();
        let (mut h, mut w) = (self.spec.input_height, self.spec.input_width);
        let conv = |rows: &mut Vec<LayerCost>, c: &Conv2d, h: usize, w: usize| {
            rows.push(LayerCost {
                name: c.name.clone(),
                kind: if c.depthwise { LayerKind::Depthwise } else { LayerKind::Conv },
                macs: c.macs(h, w),
                elementwise: 0,
            });
            c.output_hw(h, w)
        };
        (h, w) = conv(&mut rows, &self.stem.conv, h, w);
        let mut skip_hw = (h, w);
        for (i, block) in self.blocks.iter().enumerate() {
            for c in block.convs() {
                (h, w) = conv(&mut rows, c, h, w);
            }
            if i + 1 == ENCODER_QA_AFTER_BLOCK {
                if let Some(qa) = &self.encoder_qa {
                    rows.push(qa_row("encoder_qa", qa, h, w));
                }
                skip_hw = (h, w);
            }
        }
        conv(&mut rows, &self.aspp.branch_1x1.conv, h, w);
        for b in &self.aspp.dilated {
            conv(&mut rows, &b.conv, h, w);
        }
        conv(&mut rows, &self.aspp.pool_conv, 1, 1);
        conv(&mut rows, &self.aspp.fuse.conv, h, w);
        conv(&mut rows, &self.pool_proj, 1, 1);
        conv(&mut rows, &self.decoder_fuse.conv, h, w);
        if let Some(qa) = &self.decoder_qa {
            rows.push(qa_row("decoder_qa", qa, h, w));
        }
        if let Some(p) = &self.skip_proj {
            conv(&mut rows, p, skip_hw.0, skip_hw.1);
        }
        conv(&mut rows, &self.head, h, w);
        FlopReport { rows }
    }
}

fn qa_row(name: &str, qa: &QuickAttention, h: usize, w: usize) -> LayerCost {
    let (macs, elementwise) = qa.cost(h, w);
    LayerCost {
        name: name.to_string(),
        kind: LayerKind::Attention,
        macs,
        elementwise,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
    /// Elementwise operations (attention rows only).
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub rows: Vec<LayerCost>,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Multiply-adds spent in quick-attention units.
    pub fn attention_macs(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == LayerKind::Attention)
            .map(|r| r.macs)
            .sum()
    }
}

/// Analytic multiply-add count for a spec.
pub fn count_flops(spec: &NetworkSpec) -> Result<FlopReport> {
    Ok(HistoSeg::new(spec.clone())?.flops())
}
