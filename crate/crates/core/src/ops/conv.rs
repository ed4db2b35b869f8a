//! Grouped 2-D convolution (regular and depthwise) with stride and dilation.
//!
//! Kernels parallelize over independent output planes only; every output
//! value is accumulated in a fixed order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split symmetrically with
    /// the odd pixel on the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvOptions {
    pub fn same(stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: Padding::Same,
        }
    }
}

/// Output extent and leading pad along one axis.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    opts: ConvOptions,
) -> Option<(usize, usize)> {
    let span = (kernel - 1) * opts.dilation + 1;
    match opts.padding {
        Padding::Same => {
            let out = input.div_ceil(opts.stride);
            let total = ((out - 1) * opts.stride + span).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            (input >= span).then(|| ((input - span) / opts.stride + 1, 0))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
    in_per_group: usize,
    out_per_group: usize,
}

impl Geometry {
    fn new<T: Real>(
        op: &'static str,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        groups: usize,
        opts: ConvOptions,
    ) -> Result<Self> {
        let [n, in_c, in_h, in_w] = input.dims4(op)?;
        let [out_c, in_per_group, kh, kw] = weight.dims4(op)?;
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: stride and dilation must be positive"
            )));
        }
        if in_c % groups != 0 || out_c % groups != 0 || in_c / groups != in_per_group {
            return Err(Error::shape(
                op,
                format!(
                    "input has {in_c} channels but weight {:?} expects {} per group over {groups} groups",
                    weight.shape(),
                    in_per_group
                ),
            ));
        }
        let (out_h, pad_top) = conv_output_len(in_h, kh, opts).ok_or_else(|| {
            Error::shape(op, format!("input height {in_h} smaller than dilated kernel"))
        })?;
        let (out_w, pad_left) = conv_output_len(in_w, kw, opts).ok_or_else(|| {
            Error::shape(op, format!("input width {in_w} smaller than dilated kernel"))
        })?;
        Ok(Self {
            n,
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kh,
            kw,
            stride: opts.stride,
            dilation: opts.dilation,
            pad_top,
            pad_left,
            in_per_group,
            out_per_group: out_c / groups,
        })
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Output indices `o` whose input index `o * stride + offset` is in bounds.
    fn valid(&self, out_len: usize, in_len: usize, offset: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
        let last = in_len as isize - 1 - offset;
        if last < 0 {
            return (0, 0);
        }
        let hi = ((last / s) as usize + 1).min(out_len);
        (lo.min(hi), hi)
    }

    fn row_offset(&self, ky: usize) -> isize {
        (ky * self.dilation) as isize - self.pad_top as isize
    }

    fn col_offset(&self, kx: usize) -> isize {
        (kx * self.dilation) as isize - self.pad_left as isize
    }
}

/// `acc[o] += w * src[o * stride + offset]` over the valid output span.
#[inline]
fn axpy_strided<T: Real>(acc: &mut [T], src: &[T], w: T, lo: usize, hi: usize, stride: usize, offset: isize) {
    if lo >= hi {
        return;
    }
    let start = (lo as isize * stride as isize + offset) as usize;
    if stride == 1 {
        for (a, &s) in acc[lo..hi].iter_mut().zip(&src[start..start + (hi - lo)]) {
            *a += w * s;
        }
    } else {
        for (a, &s) in acc[lo..hi].iter_mut().zip(src[start..].iter().step_by(stride)) {
            *a += w * s;
        }
    }
}

fn forward_kernel<T: Real>(g: &Geometry, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_c * g.out_plane()];
    let ksize = g.in_per_group * g.kh * g.kw;
    out.par_chunks_mut(g.out_plane()).enumerate().for_each(|(plane, out_p)| {
        let (n, oc) = (plane / g.out_c, plane % g.out_c);
        if let Some(b) = bias {
            out_p.fill(b[oc]);
        }
        let group = oc / g.out_per_group;
        let w_oc = &weight[oc * ksize..(oc + 1) * ksize];
        for icg in 0..g.in_per_group {
            let ic = group * g.in_per_group + icg;
            let in_p = &input[(n * g.in_c + ic) * g.in_plane()..][..g.in_plane()];
            if g.is_pointwise() {
                let w = w_oc[icg];
                for (a, &s) in out_p.iter_mut().zip(in_p) {
                    *a += w * s;
                }
                continue;
            }
            for ky in 0..g.kh {
                let roff = g.row_offset(ky);
                let (oy0, oy1) = g.valid(g.out_h, g.in_h, roff);
                for kx in 0..g.kw {
                    let w = w_oc[(icg * g.kh + ky) * g.kw + kx];
                    let coff = g.col_offset(kx);
                    let (ox0, ox1) = g.valid(g.out_w, g.in_w, coff);
                    for oy in oy0..oy1 {
                        let iy = (oy as isize * g.stride as isize + roff) as usize;
                        axpy_strided(
                            &mut out_p[oy * g.out_w..(oy + 1) * g.out_w],
                            &in_p[iy * g.in_w..(iy + 1) * g.in_w],
                            w,
                            ox0,
                            ox1,
                            g.stride,
                            coff,
                        );
                    }
                }
            }
        }
    });
    out
}

fn grad_input_kernel<T: Real>(g: &Geometry, weight: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gin = vec![T::zero(); g.n * g.in_c * g.in_plane()];
    let ksize = g.in_per_group * g.kh * g.kw;
    gin.par_chunks_mut(g.in_plane()).enumerate().for_each(|(plane, gin_p)| {
        let (n, ic) = (plane / g.in_c, plane % g.in_c);
        let group = ic / g.in_per_group;
        let icg = ic % g.in_per_group;
        for ocg in 0..g.out_per_group {
            let oc = group * g.out_per_group + ocg;
            let go_p = &grad_out[(n * g.out_c + oc) * g.out_plane()..][..g.out_plane()];
            let w_oc = &weight[oc * ksize..(oc + 1) * ksize];
            if g.is_pointwise() {
                let w = w_oc[icg];
                for (a, &s) in gin_p.iter_mut().zip(go_p) {
                    *a += w * s;
                }
                continue;
            }
            for ky in 0..g.kh {
                let roff = g.row_offset(ky);
                let (oy0, oy1) = g.valid(g.out_h, g.in_h, roff);
                for kx in 0..g.kw {
                    let w = w_oc[(icg * g.kh + ky) * g.kw + kx];
                    let coff = g.col_offset(kx);
                    let (ox0, ox1) = g.valid(g.out_w, g.in_w, coff);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy as isize * g.stride as isize + roff) as usize;
                        let go_row = &go_p[oy * g.out_w..(oy + 1) * g.out_w];
                        let gin_row = &mut gin_p[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in ox0..ox1 {
                            let ix = (ox as isize * g.stride as isize + coff) as usize;
                            gin_row[ix] += w * go_row[ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

fn grad_weight_kernel<T: Real>(g: &Geometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let ksize = g.in_per_group * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.out_c * ksize];
    gw.par_chunks_mut(ksize).enumerate().for_each(|(oc, gw_oc)| {
        let group = oc / g.out_per_group;
        for n in 0..g.n {
            let go_p = &grad_out[(n * g.out_c + oc) * g.out_plane()..][..g.out_plane()];
            for icg in 0..g.in_per_group {
                let ic = group * g.in_per_group + icg;
                let in_p = &input[(n * g.in_c + ic) * g.in_plane()..][..g.in_plane()];
                if g.is_pointwise() {
                    gw_oc[icg] += go_p.iter().zip(in_p).map(|(&a, &b)| a * b).sum::<T>();
                    continue;
                }
                for ky in 0..g.kh {
                    let roff = g.row_offset(ky);
                    let (oy0, oy1) = g.valid(g.out_h, g.in_h, roff);
                    for kx in 0..g.kw {
                        let coff = g.col_offset(kx);
                        let (ox0, ox1) = g.valid(g.out_w, g.in_w, coff);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = (oy as isize * g.stride as isize + roff) as usize;
                            let go_row = &go_p[oy * g.out_w..(oy + 1) * g.out_w];
                            let in_row = &in_p[iy * g.in_w..(iy + 1) * g.in_w];
                            let start = (ox0 as isize * g.stride as isize + coff) as usize;
                            acc += go_row[ox0..ox1]
                                .iter()
                                .zip(in_row[start..].iter().step_by(g.stride))
                                .map(|(&a, &b)| a * b)
                                .sum::<T>();
                        }
                        gw_oc[(icg * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn grad_bias<T: Real>(g: &Geometry, grad_out: &[T]) -> Vec<T> {
    (0..g.out_c)
        .map(|oc| {
            (0..g.n)
                .map(|n| {
                    grad_out[(n * g.out_c + oc) * g.out_plane()..][..g.out_plane()]
                        .iter()
                        .copied()
                        .sum::<T>()
                })
                .sum()
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Dense convolution. `weight` is `OutC x InC x Kh x Kw`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        self.grouped_conv("conv2d", input, weight, bias, 1, opts)
    }

    /// Per-channel convolution. `weight` is `C x 1 x Kh x Kw`.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: ConvOptions) -> Result<Var> {
        let channels = self.value(input).dims4("depthwise_conv2d")?[1];
        let wc = self.value(weight).dims4("depthwise_conv2d")?[0];
        if wc != channels {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {channels} channels but weight has {wc} filters"),
            ));
        }
        self.grouped_conv("depthwise_conv2d", input, weight, bias, channels, opts)
    }

    fn grouped_conv(
        &mut self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        opts: ConvOptions,
    ) -> Result<Var> {
        let geom = Geometry::new(op, self.value(input), self.value(weight), groups, opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_c] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?} does not match {} filters", self.shape(b), geom.out_c),
                ));
            }
        }
        let out = forward_kernel(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new([geom.n, geom.out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let w_shape = self.shape(weight).to_vec();
        let in_shape = self.shape(input).to_vec();
        Ok(self.record(
            &inputs,
            out,
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let gi = ctx.wants[0].then(|| {
                    Tensor::new(in_shape.clone(), grad_input_kernel(&geom, ctx.inputs[1].data(), go))
                        .expect("grad input shape")
                });
                let gw = ctx.wants[1].then(|| {
                    Tensor::new(w_shape.clone(), grad_weight_kernel(&geom, ctx.inputs[0].data(), go))
                        .expect("grad weight shape")
                });
                let mut grads = vec![gi, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.wants[2].then(|| {
                        Tensor::new([geom.out_c], grad_bias(&geom, go)).expect("grad bias shape")
                    }));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_conv(input: Tensor<f64>, weight: Tensor<f64>, opts: ConvOptions) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let w = tape.constant(weight);
        let y = tape.conv2d(x, w, None, opts).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn ones_kernel_counts_in_bounds_taps() {
        let y = run_conv(Tensor::ones([1, 1, 3, 3]), Tensor::ones([1, 1, 3, 3]), ConvOptions::default());
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let vals: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::from_f64([1, 2, 5, 4], &vals).unwrap();
        let mut w = Tensor::zeros([2, 2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[18 + 9 + 4] = 1.0;
        assert_eq!(run_conv(x.clone(), w, ConvOptions::default()), x);
    }

    #[test]
    fn same_padding_output_is_ceil_of_stride() {
        for (len, stride) in [(7, 2), (8, 2), (9, 3), (1, 2)] {
            let (out, _) = conv_output_len(len, 3, ConvOptions::same(stride, 1)).unwrap();
            assert_eq!(out, len.div_ceil(stride));
        }
        let y = run_conv(Tensor::ones([1, 1, 7, 5]), Tensor::ones([2, 1, 3, 3]), ConvOptions::same(2, 1));
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
    }

    #[test]
    fn valid_padding_shrinks() {
        let opts = ConvOptions {
            padding: Padding::Valid,
            ..Default::default()
        };
        let y = run_conv(Tensor::ones([1, 1, 5, 5]), Tensor::ones([1, 1, 3, 3]), opts);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, ConvOptions::default()).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn depthwise_dilated_taps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.depthwise_conv2d(x, w, None, ConvOptions::same(1, 2)).unwrap();
        let y = tape.value(y);
        assert_eq!(y.data()[12], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn depthwise_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 3, 5, 5]));
        let w = tape.constant(Tensor::ones([2, 1, 3, 3]));
        assert!(tape.depthwise_conv2d(x, w, None, ConvOptions::default()).is_err());
    }
}
