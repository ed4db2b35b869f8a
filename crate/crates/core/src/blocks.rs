//! Composite building blocks: quick attention, expanded (inverted residual)
//! convolutions and atrous spatial pyramid pooling.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvBn, ForwardCtx};
use crate::params::ParameterStore;
use crate::tensor::Real;

/// `sigmoid(conv1x1(x)) + x` with a square, biased 1x1 convolution.
///
/// Since the sigmoid lies in (0, 1), every output element lies strictly
/// between `x` and `x + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuickAttention {
    pub conv: Conv2d,
}

impl QuickAttention {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            conv: Conv2d::pointwise(name, channels, channels).with_bias(),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels
    }

    /// He-normal weight, zero bias.
    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).dims4("quick_attention")?[1];
        if c != self.channels() {
            return Err(Error::shape(
                "quick_attention",
                format!("layer has {} channels, input has {c}", self.channels()),
            ));
        }
        let gate = self.conv.forward(ctx, x)?;
        let gate = ctx.tape.sigmoid(gate);
        ctx.tape.add(gate, x)
    }

    /// Multiply-adds of the 1x1 convolution and the elementwise sigmoid + add
    /// count for one sample.
    pub fn cost(&self, h: usize, w: usize) -> (u64, u64) {
        let c = self.channels() as u64;
        let hw = (h * w) as u64;
        (c * c * hw, 2 * c * hw)
    }
}

/// Static configuration of one expanded convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpandedConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// 1x1 expand, BN, relu, 3x3 depthwise (dilated), BN, relu, 1x1 project, BN.
/// The projection is linear. An identity skip is added when input and output
/// shapes match.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedConvBlock {
    pub config: ExpandedConvConfig,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl ExpandedConvBlock {
    pub fn new(name: &str, config: ExpandedConvConfig) -> Self {
        let hidden = config.in_channels * config.expansion;
        Self {
            config,
            expand: ConvBn::new(Conv2d::pointwise(format!("{name}.expand"), config.in_channels, hidden), true),
            depthwise: ConvBn::new(
                Conv2d::depthwise(format!("{name}.depthwise"), hidden, 3)
                    .stride(config.stride)
                    .dilation(config.dilation),
                true,
            ),
            project: ConvBn::new(
                Conv2d::pointwise(format!("{name}.project"), hidden, config.out_channels),
                false,
            ),
            residual: config.stride == 1 && config.in_channels == config.out_channels,
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.expand.init(store, rng)?;
        self.depthwise.init(store, rng)?;
        self.project.init(store, rng)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).dims4("expanded_conv")?[1];
        if c != self.config.in_channels {
            return Err(Error::shape(
                "expanded_conv",
                format!("block expects {} channels, input has {c}", self.config.in_channels),
            ));
        }
        let h = self.expand.forward(ctx, x)?;
        let h = self.depthwise.forward(ctx, h)?;
        let h = self.project.forward(ctx, h)?;
        if self.residual {
            ctx.tape.add(h, x)
        } else {
            Ok(h)
        }
    }

    pub fn convs(&self) -> [&Conv2d; 3] {
        [&self.expand.conv, &self.depthwise.conv, &self.project.conv]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsppConfig {
    pub in_channels: usize,
    /// Width of every branch.
    pub branch_channels: usize,
    /// Output width after the fusing 1x1 convolution.
    pub out_channels: usize,
    pub rates: Vec<usize>,
}

/// Atrous spatial pyramid pooling: a 1x1 branch, one dilated 3x3 branch per
/// rate and an image-pooling branch (global average pool, biased 1x1 conv,
/// relu, bilinear resize back), concatenated and fused by a 1x1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct AsppBlock {
    pub config: AsppConfig,
    pub branch_1x1: ConvBn,
    pub dilated: Vec<ConvBn>,
    pub pool_conv: Conv2d,
    pub fuse: ConvBn,
}

impl AsppBlock {
    pub fn new(name: &str, config: AsppConfig) -> Self {
        let (cin, cb) = (config.in_channels, config.branch_channels);
        let dilated = config
            .rates
            .iter()
            .map(|&r| ConvBn::new(Conv2d::new(format!("{name}.rate{r}"), cin, cb, 3).dilation(r), true))
            .collect();
        let branches = config.rates.len() + 2;
        Self {
            branch_1x1: ConvBn::new(Conv2d::pointwise(format!("{name}.branch1x1"), cin, cb), true),
            dilated,
            pool_conv: Conv2d::pointwise(format!("{name}.pool"), cin, cb).with_bias(),
            fuse: ConvBn::new(
                Conv2d::pointwise(format!("{name}.fuse"), branches * cb, config.out_channels),
                true,
            ),
            config,
        }
    }

    pub fn concat_channels(&self) -> usize {
        (self.config.rates.len() + 2) * self.config.branch_channels
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.branch_1x1.init(store, rng)?;
        for b in &self.dilated {
            b.init(store, rng)?;
        }
        self.pool_conv.init(store, rng)?;
        self.fuse.init(store, rng)
    }

    /// The five branch outputs, in concatenation order.
    pub fn branches<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = ctx.tape.value(x).dims4("aspp")?;
        let mut outs = vec![self.branch_1x1.forward(ctx, x)?];
        for b in &self.dilated {
            outs.push(b.forward(ctx, x)?);
        }
        let pooled = ctx.tape.global_avg_pool(x)?;
        let pooled = self.pool_conv.forward(ctx, pooled)?;
        let pooled = ctx.tape.relu(pooled);
        outs.push(ctx.tape.bilinear_resize(pooled, h, w)?);
        Ok(outs)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let outs = self.branches(ctx, x)?;
        let cat = ctx.tape.concat(&outs)?;
        self.fuse.forward(ctx, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn zero_attention_adds_one_half() {
        let qa = QuickAttention::new("qa", 3);
        let mut store = ParameterStore::<f64>::new();
        qa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.get_mut("qa.weight").unwrap().data_mut().fill(0.0);
        let x = random([2, 3, 4, 5], 1);
        let mut ctx = ForwardCtx::infer(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = qa.forward(&mut ctx, xv).unwrap();
        let out = ctx.tape.value(y);
        assert_eq!(out.shape(), x.shape());
        for (o, i) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, i + 0.5);
        }
    }

    #[test]
    fn attention_on_zero_input_is_sigmoid_of_bias() {
        let qa = QuickAttention::new("qa", 2);
        let mut store = ParameterStore::<f64>::new();
        qa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.get_mut("qa.bias").unwrap().data_mut().copy_from_slice(&[1.0, -2.0]);
        let mut ctx = ForwardCtx::infer(&store);
        let xv = ctx.tape.constant(Tensor::zeros([1, 2, 3, 3]));
        let y = qa.forward(&mut ctx, xv).unwrap();
        let out = ctx.tape.value(y).data();
        let s = |b: f64| 1.0 / (1.0 + (-b).exp());
        assert!((out[0] - s(1.0)).abs() < 1e-15);
        assert!((out[9] - s(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_channel_mismatch() {
        let qa = QuickAttention::new("qa", 4);
        let mut store = ParameterStore::<f64>::new();
        qa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut ctx = ForwardCtx::infer(&store);
        let xv = ctx.tape.constant(Tensor::zeros([1, 3, 2, 2]));
        assert!(qa.forward(&mut ctx, xv).is_err());
    }

    #[test]
    fn expanded_block_with_silent_projection_is_identity() {
        let cfg = ExpandedConvConfig {
            in_channels: 4,
            out_channels: 4,
            expansion: 3,
            stride: 1,
            dilation: 2,
        };
        let block = ExpandedConvBlock::new("b", cfg);
        assert!(block.residual);
        let mut store = ParameterStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        store.get_mut("b.project.bn.gamma").unwrap().data_mut().fill(0.0);
        let x = random([1, 4, 6, 6], 2);
        let mut ctx = ForwardCtx::infer(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.value(y), &x);
    }

    #[test]
    fn strided_block_halves_extent_without_skip() {
        let cfg = ExpandedConvConfig {
            in_channels: 4,
            out_channels: 8,
            expansion: 2,
            stride: 2,
            dilation: 1,
        };
        let block = ExpandedConvBlock::new("b", cfg);
        assert!(!block.residual);
        let mut store = ParameterStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ctx = ForwardCtx::train(&mut store, 0);
        let xv = ctx.tape.constant(random([2, 4, 7, 7], 5));
        let y = block.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 8, 4, 4]);
    }

    #[test]
    fn aspp_shapes_and_constant_response() {
        let cfg = AsppConfig {
            in_channels: 3,
            branch_channels: 2,
            out_channels: 5,
            rates: vec![1, 2, 3],
        };
        let aspp = AsppBlock::new("aspp", cfg);
        assert_eq!(aspp.concat_channels(), 10);
        let mut store = ParameterStore::<f64>::new();
        aspp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // Every branch averages channels through its center tap only.
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names.iter().filter(|n| n.ends_with(".weight") && !n.starts_with("aspp.fuse")) {
            let w = store.get_mut(name).unwrap();
            let [_, cin, k, _] = w.dims4("test").unwrap();
            let taps = k * k;
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = if i % taps == taps / 2 { 1.0 / cin as f64 } else { 0.0 };
            }
        }
        let mut ctx = ForwardCtx::infer(&store);
        let xv = ctx.tape.constant(Tensor::full([1, 3, 5, 5], 2.0));
        let branches = aspp.branches(&mut ctx, xv).unwrap();
        assert_eq!(branches.len(), 5);
        // BN branches see running variance 1 plus epsilon; the pooled branch has no BN.
        let bn_scaled = 2.0 / (1.0 + crate::ops::BN_EPSILON).sqrt();
        for (i, b) in branches.into_iter().enumerate() {
            assert_eq!(ctx.tape.shape(b), &[1, 2, 5, 5]);
            let want = if i == 4 { 2.0 } else { bn_scaled };
            assert!(ctx.tape.value(b).data().iter().all(|&v| (v - want).abs() < 1e-12));
        }
        let y = aspp.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 5, 5, 5]);
    }
}
