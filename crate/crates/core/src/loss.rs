//! Composite training objective: MSE plus alpha times the Pearson loss.

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Weighting of the composite objective. `pearson_only` is the explicit
/// "alpha = infinity" regime in which the MSE term is dropped entirely.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub alpha: f64,
    pub pearson_eps: f64,
    pub pearson_only: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { alpha: 0.1, pearson_eps: 1e-8, pearson_only: false }
    }
}

impl LossParams {
    pub fn with_alpha(alpha: f64) -> Self {
        LossParams { alpha, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(
                "alpha must be finite and non-negative (use pearson_only for the infinite regime)"
                    .into(),
            ));
        }
        if !(self.pearson_eps > 0.0) {
            return Err(Error::Config("pearson_eps must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes<T>(x_hat: &[T], x: &[T], cols: usize) -> Result<()> {
    if x_hat.len() != x.len() {
        return Err(Error::shape(format!(
            "loss inputs differ in size: {} vs {}",
            x_hat.len(),
            x.len()
        )));
    }
    if cols == 0 || x.len() % cols != 0 {
        return Err(Error::shape(format!(
            "row length {cols} does not divide {} elements",
            x.len()
        )));
    }
    Ok(())
}

/// Mean squared error over all cells.
pub fn mse_loss<T: Scalar>(x_hat: &[T], x: &[T]) -> Result<T> {
    check_shapes(x_hat, x, x.len().max(1))?;
    if x.is_empty() {
        return Err(Error::invalid("mse of empty input"));
    }
    let n = T::from_f64(x.len() as f64);
    Ok(x_hat
        .iter()
        .zip(x)
        .fold(T::zero(), |acc, (&p, &t)| {
            let d = p - t;
            acc + d * d
        })
        / n)
}

/// Mean over leads of (1 - r), rows of length `cols`. The eps added to each
/// denominator factor keeps constant leads finite (r ~ 0, contribution ~ 1).
pub fn pearson_loss<T: Scalar>(x_hat: &[T], x: &[T], cols: usize, eps: T) -> Result<T> {
    check_shapes(x_hat, x, cols)?;
    let rows = x.len() / cols;
    let mut total = T::zero();
    for l in 0..rows {
        let p = &x_hat[l * cols..(l + 1) * cols];
        let t = &x[l * cols..(l + 1) * cols];
        total += T::one() - pearson_r(p, t, eps);
    }
    Ok(total / T::from_f64(rows as f64))
}

/// Sample correlation coefficient with eps-regularized denominator factors.
pub fn pearson_r<T: Scalar>(a: &[T], b: &[T], eps: T) -> T {
    let n = T::from_f64(a.len() as f64);
    let ma = a.iter().fold(T::zero(), |acc, &v| acc + v) / n;
    let mb = b.iter().fold(T::zero(), |acc, &v| acc + v) / n;
    let mut sab = T::zero();
    let mut saa = T::zero();
    let mut sbb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let da = x - ma;
        let db = y - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    sab / ((saa.sqrt() + eps) * (sbb.sqrt() + eps))
}

/// mse + alpha * pearson. With alpha = 0 this is bitwise the MSE path; in
/// `pearson_only` mode it is the Pearson term alone.
pub fn composite_loss<T: Scalar>(
    x_hat: &[T],
    x: &[T],
    cols: usize,
    params: &LossParams,
) -> Result<T> {
    params.validate()?;
    if params.pearson_only {
        return pearson_loss(x_hat, x, cols, T::from_f64(params.pearson_eps));
    }
    let mse = mse_loss(x_hat, x)?;
    if params.alpha == 0.0 {
        return Ok(mse);
    }
    let pearson = pearson_loss(x_hat, x, cols, T::from_f64(params.pearson_eps))?;
    Ok(mse + T::from_f64(params.alpha) * pearson)
}

/// Loss nodes attached to a prediction on the tape.
pub struct LossNodes {
    pub composite: NodeId,
    pub mse: NodeId,
    pub pearson: NodeId,
}

/// Builds the differentiable composite objective on the tape; the component
/// nodes stay addressable for per-epoch logging.
pub fn attach_composite<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    params: &LossParams,
) -> Result<LossNodes> {
    params.validate()?;
    let mse = g.mse_loss(pred, target)?;
    let pearson = g.pearson_loss(pred, target, T::from_f64(params.pearson_eps))?;
    let composite = if params.pearson_only {
        g.affine_sum(&[(pearson, T::one())])?
    } else if params.alpha == 0.0 {
        g.affine_sum(&[(mse, T::one())])?
    } else {
        g.affine_sum(&[(mse, T::one()), (pearson, T::from_f64(params.alpha))])?
    };
    Ok(LossNodes { composite, mse, pearson })
}
