use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Source taps for one output coordinate: `(lo, hi, weight_of_hi)`.
///
/// Half-pixel centers: `src = (dst + 0.5) * in / out - 0.5`, clamped to
/// `[0, in - 1]`.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear interpolation kept inside `[min(a, b), max(a, b)]` despite rounding.
#[inline]
fn lerp<T: Real>(a: T, b: T, w: T) -> T {
    (a + (b - a) * w).max(a.min(b)).min(a.max(b))
}

impl<T: Real> Tape<T> {
    /// Per-channel spatial mean, `N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([n, c, 1, 1], out)?;
        Ok(self.record(
            &[input],
            out,
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(n * c * plane);
                for &go in ctx.grad.data() {
                    g.extend(std::iter::repeat_n(go * inv, plane));
                }
                vec![Some(Tensor::new([n, c, h, w], g).expect("pool grad"))]
            }),
        ))
    }

    /// Bilinear interpolation to `out_h x out_w` with half-pixel centers.
    /// Each output is a convex combination of at most four inputs.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, in_h, in_w] = self.value(input).dims4("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize extents must be positive".into()));
        }
        if (out_h, out_w) == (in_h, in_w) {
            let out = self.value(input).clone();
            return Ok(self.record(&[input], out, Box::new(|ctx| vec![Some(ctx.grad.clone())])));
        }
        let rows = resize_taps(in_h, out_h);
        let cols = resize_taps(in_w, out_w);
        let in_plane = in_h * in_w;
        let out_plane = out_h * out_w;
        let mut out = vec![T::zero(); n * c * out_plane];
        let src = self.value(input).data();
        out.par_chunks_mut(out_plane).enumerate().for_each(|(p, o)| {
            let s = &src[p * in_plane..][..in_plane];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                let wy = T::of(wy);
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let wx = T::of(wx);
                    let top = lerp(s[y0 * in_w + x0], s[y0 * in_w + x1], wx);
                    let bot = lerp(s[y1 * in_w + x0], s[y1 * in_w + x1], wx);
                    o[oy * out_w + ox] = lerp(top, bot, wy);
                }
            }
        });
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        Ok(self.record(
            &[input],
            out,
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let mut g = vec![T::zero(); n * c * in_plane];
                g.par_chunks_mut(in_plane).enumerate().for_each(|(p, gi)| {
                    let gp = &go[p * out_plane..][..out_plane];
                    for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                        let wy = T::of(wy);
                        for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                            let wx = T::of(wx);
                            let v = gp[oy * out_w + ox];
                            let top = v * (T::one() - wy);
                            let bot = v * wy;
                            gi[y0 * in_w + x0] += top * (T::one() - wx);
                            gi[y0 * in_w + x1] += top * wx;
                            gi[y1 * in_w + x0] += bot * (T::one() - wx);
                            gi[y1 * in_w + x1] += bot * wx;
                        }
                    }
                });
                vec![Some(Tensor::new([n, c, in_h, in_w], g).expect("resize grad"))]
            }),
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let [n, _, h, w] = self.value(first).dims4("concat")?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4("concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match {:?} outside the channel axis", self.shape(v), self.shape(first)),
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..][..c * plane]);
            }
        }
        let out = Tensor::new([n, total, h, w], out)?;
        Ok(self.record(
            inputs,
            out,
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let mut offset = 0;
                channels
                    .iter()
                    .zip(&ctx.wants)
                    .map(|(&c, &want)| {
                        let start = offset;
                        offset += c;
                        want.then(|| {
                            let mut g = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                g.extend_from_slice(&go[(b * total + start) * plane..][..c * plane]);
                            }
                            Tensor::new([n, c, h, w], g).expect("concat grad")
                        })
                    })
                    .collect()
            }),
        ))
    }
}
