use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Logistic function, saturating at the representable values nearest to 0
/// and 1 so the result stays strictly inside the open unit interval. NaN
/// passes through.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    // split by sign so exp never overflows
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(below_one)
}

impl<T: Real> Tape<T> {
    /// Rectified linear unit; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.mark_active(out.data().iter().map(|&v| v > T::zero()));
        self.record(
            &[input],
            out,
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                let g: Vec<T> = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), g).expect("relu grad"))]
            }),
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid_scalar);
        self.record(
            &[input],
            out,
            Box::new(|ctx| {
                let g: Vec<T> = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape().to_vec(), g).expect("sigmoid grad"))]
            }),
        )
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    ctx.wants[0].then(|| ctx.grad.clone()),
                    ctx.wants[1].then(|| ctx.grad.clone()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(
            &[a, b],
            out,
            Box::new(|ctx| {
                let prod = |other: &Tensor<T>| {
                    let d = ctx.grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
                    Tensor::new(ctx.grad.shape().to_vec(), d).expect("mul grad")
                };
                vec![
                    ctx.wants[0].then(|| prod(ctx.inputs[1])),
                    ctx.wants[1].then(|| prod(ctx.inputs[0])),
                ]
            }),
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let shape = self.shape(input).to_vec();
        self.record(
            &[input],
            out,
            Box::new(move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.data()[0]))]),
        )
    }

    /// `sum(input * weights)` for a fixed weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(input) != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(input), weights.shape()),
            ));
        }
        let total = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let weights = weights.clone();
        Ok(self.record(
            &[input],
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(weights.map(|w| w * g))]
            }),
        ))
    }
}
