//! Parameterized layers and the per-pass context that binds stored
//! parameters onto a fresh tape.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{conv_output_len, BatchNormOptions, ConvOptions, RunningStats};
use crate::params::{Gradients, ParamKind, ParameterStore};
use crate::tensor::{Real, Tensor};
use crate::Mode;

enum StoreRef<'s, T> {
    Shared(&'s ParameterStore<T>),
    Exclusive(&'s mut ParameterStore<T>),
}

impl<T> StoreRef<'_, T> {
    fn get(&self) -> &ParameterStore<T> {
        match self {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }
}

/// One shape record of an instrumented forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: String,
    pub shape: Vec<usize>,
}

/// State for a single forward (and optional backward) pass.
///
/// Parameters are copied onto the tape the first time a layer asks for
/// them. Train mode needs exclusive access to the store because batch norm
/// updates its running statistics.
pub struct ForwardCtx<'s, T: Real> {
    pub tape: Tape<T>,
    store: StoreRef<'s, T>,
    bound: IndexMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceEntry>>,
}

impl<'s, T: Real> ForwardCtx<'s, T> {
    /// Context that records gradients for every trainable parameter.
    pub fn train(store: &'s mut ParameterStore<T>, dropout_seed: u64) -> Self {
        Self::with_store(StoreRef::Exclusive(store), Mode::Train, true, dropout_seed)
    }

    /// Inference context; never mutates the store.
    pub fn infer(store: &'s ParameterStore<T>) -> Self {
        Self::with_store(StoreRef::Shared(store), Mode::Infer, false, 0)
    }

    /// General constructor for either mode with gradient tracking.
    pub fn new(store: &'s mut ParameterStore<T>, mode: Mode, dropout_seed: u64) -> Self {
        Self::with_store(StoreRef::Exclusive(store), mode, true, dropout_seed)
    }

    fn with_store(store: StoreRef<'s, T>, mode: Mode, track_grads: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
            mode,
            track_grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: None,
        }
    }

    /// Records the shape of named stages during the pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn record_shape(&mut self, stage: impl Into<String>, v: Var) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                stage: stage.into(),
                shape: self.tape.shape(v).to_vec(),
            });
        }
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store.get()
    }

    /// The tape variable bound to a stored parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get().require(name)?;
        let requires_grad = self.track_grads && p.kind == ParamKind::Trainable;
        let value = p.value.clone();
        let v = self.tape.leaf(value, requires_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Dropout driven by the context's seeded generator; identity in infer mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, &mut self.rng)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every trainable parameter bound in this pass. Parameters
    /// the loss does not depend on get zeros.
    pub fn gradients(&self) -> Gradients<T> {
        let store = self.store.get();
        self.bound
            .iter()
            .filter(|(name, _)| store.entry(name).is_some_and(|p| p.kind == ParamKind::Trainable))
            .map(|(name, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let store = self.store.get();
        let mut stats = RunningStats {
            mean: store.require(&mean_name)?.value.data().to_vec(),
            var: store.require(&var_name)?.value.data().to_vec(),
        };
        let out = self
            .tape
            .batch_norm(x, gamma, beta, &mut stats, self.mode, BatchNormOptions::default())?;
        if self.mode == Mode::Train {
            let StoreRef::Exclusive(store) = &mut self.store else {
                return Err(Error::InvalidArgument(
                    "train-mode batch norm needs a mutable parameter store".into(),
                ));
            };
            store.require_mut(&mean_name)?.value.data_mut().copy_from_slice(&stats.mean);
            store.require_mut(&var_name)?.value.data_mut().copy_from_slice(&stats.var);
        }
        Ok(out)
    }
}

/// He-normal sample with the given fan-in.
pub(crate) fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Dense or depthwise convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
    /// One filter per channel instead of a dense kernel.
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            bias: false,
            depthwise: false,
        }
    }

    pub fn pointwise(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(name, in_channels, out_channels, 1)
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self {
            depthwise: true,
            ..Self::new(name, channels, channels, kernel)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn in_per_group(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.in_channels
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn options(&self) -> ConvOptions {
        ConvOptions::same(self.stride, self.dilation)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let fan_in = self.in_per_group() * self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            he_normal(rng, &self.weight_shape(), fan_in),
            ParamKind::Trainable,
        )?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([self.out_channels]), ParamKind::Trainable)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        if self.depthwise {
            ctx.tape.depthwise_conv2d(x, w, b, self.options())
        } else {
            ctx.tape.conv2d(x, w, b, self.options())
        }
    }

    /// Output extent for a given input extent.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let opts = self.options();
        let oh = conv_output_len(h, self.kernel, opts).expect("same padding").0;
        let ow = conv_output_len(w, self.kernel, opts).expect("same padding").0;
        (oh, ow)
    }

    /// Multiply-adds for one sample, counting every kernel tap.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        (self.out_channels * self.in_per_group() * self.kernel * self.kernel * oh * ow) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones([c]), ParamKind::Trainable)?;
        store.insert(format!("{}.beta", self.name), Tensor::zeros([c]), ParamKind::Trainable)?;
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros([c]), ParamKind::Buffer)?;
        store.insert(format!("{}.running_var", self.name), Tensor::ones([c]), ParamKind::Buffer)?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        ctx.batch_norm(x, &self.name)
    }
}

/// Convolution, batch norm, optional relu.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(conv: Conv2d, relu: bool) -> Self {
        let bn = BatchNorm::new(format!("{}.bn", conv.name), conv.out_channels);
        Self { conv, bn, relu }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)?;
        self.bn.init(store)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }
}
