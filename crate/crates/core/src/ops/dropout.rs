use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::Mode;

impl<T: Real> Tape<T> {
    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`. Infer mode and
    /// `rate == 0` are the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            let out = self.value(input).clone();
            return Ok(self.record(&[input], out, Box::new(|ctx| vec![Some(ctx.grad.clone())])));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(input).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(self.shape(input).to_vec(), data)?;
        Ok(self.record(
            &[input],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), g).expect("dropout grad"))]
            }),
        ))
    }
}
