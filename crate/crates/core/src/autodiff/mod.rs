//! Reverse-mode autodiff over a tape of recorded operations, providing
//! exactly the layer set the reconstruction model needs.
//!
//! Compute is generic over the element type: training runs in f32, gradient
//! verification uses the f64 path for finite-difference headroom.

mod fd;
mod ops;

pub use fd::fd_check;

use crate::error::{Error, Result};
use num_traits::Float;
use rand::RngCore;

/// Element type of tensors: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float + num_traits::NumAssign + Default + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> f32 {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> f64 {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense tensor: flat data plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map_scalar<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv1d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Conv2d { x: NodeId, w: NodeId, stride: (usize, usize), pad: (usize, usize) },
    ConvT2d { x: NodeId, w: NodeId, stride: (usize, usize), pad: (usize, usize) },
    BatchNorm(BnCtx<T>),
    LeakyRelu { x: NodeId, slope: T },
    Tanh { x: NodeId },
    /// `keep_scale` is empty in eval mode (identity pass-through).
    Dropout { x: NodeId, keep_scale: Vec<T> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Reshape { x: NodeId },
    /// Extracts row `h` of a [C, H, W] tensor as a [C, W] tensor.
    IndexH { x: NodeId, h: usize },
    MseLoss { pred: NodeId, target: Tensor<T> },
    PearsonLoss { pred: NodeId, target: Tensor<T>, eps: T },
    /// Elementwise weighted sum of same-shape nodes.
    AffineSum { terms: Vec<(NodeId, T)> },
}

#[derive(Debug)]
pub(crate) struct BnCtx<T> {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    train: bool,
    /// Normalized input, saved for the gamma gradient.
    xhat: Vec<T>,
    /// Per-channel 1/sqrt(var + eps) actually used by the forward pass.
    inv_std: Vec<T>,
    /// Batch statistics (train mode), consumed by running-stat updates.
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Gradients keyed by node id after a backward pass.
pub struct Grads<T> {
    store: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.store.get(id.0).and_then(|g| g.as_deref())
    }
}

/// The tape. Nodes are appended in creation order, which is a topological
/// order; backward walks it once in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data[0]
    }

    /// Batch statistics of a batchnorm node (train mode only).
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm(ctx) if ctx.train => Some((&ctx.batch_mean, &ctx.batch_var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn child_requires_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let value = ops::conv1d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.child_requires_grad(&[x, w]);
        Ok(self.push(value, Op::Conv1d { x, w, stride, pad }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let value = ops::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.child_requires_grad(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let value = ops::convt2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.child_requires_grad(&[x, w]);
        Ok(self.push(value, Op::ConvT2d { x, w, stride, pad }, rg))
    }

    /// Batch normalization over all axes but the channel axis (axis 0).
    ///
    /// Train mode normalizes with the tensor's own statistics and records
    /// them for running-stat updates; eval mode uses the supplied running
    /// statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        mode: Mode,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<NodeId> {
        let (value, ctx) = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
            mode,
            running_mean,
            running_var,
            x,
            gamma,
            beta,
        )?;
        let rg = self.child_requires_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::BatchNorm(ctx), rg))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let value = Tensor {
            shape: self.value(x).shape.clone(),
            data: self
                .value(x)
                .data
                .iter()
                .map(|&v| if v >= T::zero() { v } else { slope * v })
                .collect(),
        };
        let rg = self.child_requires_grad(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh_act(&mut self, x: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v.tanh()).collect(),
        };
        let rg = self.child_requires_grad(&[x]);
        self.push(value, Op::Tanh { x }, rg)
    }

    /// Train mode zeroes each element with probability `p` and rescales
    /// survivors by 1/(1-p); eval mode (or p = 0) is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut dyn RngCore) -> NodeId {
        let keep_scale = if mode == Mode::Eval || p <= 0.0 {
            Vec::new()
        } else {
            let scale = T::from_f64(1.0 / (1.0 - p));
            self.value(x)
                .data
                .iter()
                .map(|_| {
                    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                    if u < p {
                        T::zero()
                    } else {
                        scale
                    }
                })
                .collect()
        };
        let data = if keep_scale.is_empty() {
            self.value(x).data.clone()
        } else {
            self.value(x).data.iter().zip(&keep_scale).map(|(&v, &k)| v * k).collect()
        };
        let value = Tensor { shape: self.value(x).shape.clone(), data };
        let rg = self.child_requires_grad(&[x]);
        self.push(value, Op::Dropout { x, keep_scale }, rg)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|&id| self.value(id)).collect();
        let value = ops::concat_forward(&tensors, axis)?;
        let rg = self.child_requires_grad(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.value(x).shape
            )));
        }
        let value = Tensor { shape, data: self.value(x).data.clone() };
        let rg = self.child_requires_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn index_h(&mut self, x: NodeId, h: usize) -> Result<NodeId> {
        let value = ops::index_h_forward(self.value(x), h)?;
        let rg = self.child_requires_grad(&[x]);
        Ok(self.push(value, Op::IndexH { x, h }, rg))
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape != target.shape {
            return Err(Error::shape(format!(
                "mse: prediction {:?} vs target {:?}",
                p.shape, target.shape
            )));
        }
        let value = Tensor::scalar(ops::mse_value(&p.data, &target.data));
        let rg = self.child_requires_grad(&[pred]);
        Ok(self.push(value, Op::MseLoss { pred, target: target.clone() }, rg))
    }

    /// Mean over rows of (1 - r), rows being all axes but the last.
    pub fn pearson_loss(&mut self, pred: NodeId, target: &Tensor<T>, eps: T) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape != target.shape {
            return Err(Error::shape(format!(
                "pearson: prediction {:?} vs target {:?}",
                p.shape, target.shape
            )));
        }
        let cols = *p.shape.last().ok_or_else(|| Error::shape("pearson: rank-0 input"))?;
        let value = Tensor::scalar(ops::pearson_value(&p.data, &target.data, cols, eps));
        let rg = self.child_requires_grad(&[pred]);
        Ok(self.push(value, Op::PearsonLoss { pred, target: target.clone(), eps }, rg))
    }

    pub fn affine_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::invalid("affine_sum of zero terms"))?;
        let shape = self.value(first.0).shape.clone();
        let mut data = vec![T::zero(); self.value(first.0).numel()];
        for &(id, c) in terms {
            let t = self.value(id);
            if t.shape != shape {
                return Err(Error::shape("affine_sum over mismatched shapes"));
            }
            for (acc, &v) in data.iter_mut().zip(&t.data) {
                *acc += c * v;
            }
        }
        let rg = self.child_requires_grad(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
        Ok(self.push(Tensor { shape, data }, Op::AffineSum { terms: terms.to_vec() }, rg))
    }

    /// Reverse pass from a scalar loss node. Visits each node exactly once
    /// in reverse creation (topological) order.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward expects a scalar loss node"));
        }
        let mut store: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        store[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if store[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gy = store[id].take().unwrap();
            self.backward_node(id, &gy, &mut store);
            store[id] = Some(gy);
        }
        Ok(Grads { store })
    }

    fn backward_node(&self, id: usize, gy: &[T], store: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, stride, pad } => {
                let (gx, gw) = ops::conv1d_backward(
                    self.value(*x),
                    self.value(*w),
                    &node.value.shape,
                    gy,
                    *stride,
                    *pad,
                );
                self.accumulate(store, *x, gx);
                self.accumulate(store, *w, gw);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &node.value.shape,
                    gy,
                    *stride,
                    *pad,
                );
                self.accumulate(store, *x, gx);
                self.accumulate(store, *w, gw);
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (gx, gw) = ops::convt2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &node.value.shape,
                    gy,
                    *stride,
                    *pad,
                );
                self.accumulate(store, *x, gx);
                self.accumulate(store, *w, gw);
            }
            Op::BatchNorm(ctx) => {
                let (gx, ggamma, gbeta) =
                    ops::batchnorm_backward(ctx_view(ctx), self.value(ctx.gamma), gy);
                self.accumulate(store, ctx.x, gx);
                self.accumulate(store, ctx.gamma, ggamma);
                self.accumulate(store, ctx.beta, gbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let gx: Vec<T> = self
                    .value(*x)
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v >= T::zero() { g } else { *slope * g })
                    .collect();
                self.accumulate(store, *x, gx);
            }
            Op::Tanh { x } => {
                let gx: Vec<T> = node
                    .value
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect();
                self.accumulate(store, *x, gx);
            }
            Op::Dropout { x, keep_scale } => {
                let gx: Vec<T> = if keep_scale.is_empty() {
                    gy.to_vec()
                } else {
                    gy.iter().zip(keep_scale).map(|(&g, &k)| g * k).collect()
                };
                self.accumulate(store, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<&[usize]> =
                    xs.iter().map(|&id| self.value(id).shape.as_slice()).collect();
                let parts = ops::concat_backward(&shapes, &node.value.shape, gy, *axis);
                for (&xid, part) in xs.iter().zip(parts) {
                    self.accumulate(store, xid, part);
                }
            }
            Op::Reshape { x } => {
                self.accumulate(store, *x, gy.to_vec());
            }
            Op::IndexH { x, h } => {
                let gx = ops::index_h_backward(&self.value(*x).shape, gy, *h);
                self.accumulate(store, *x, gx);
            }
            Op::MseLoss { pred, target } => {
                let gx = ops::mse_backward(&self.value(*pred).data, &target.data, gy[0]);
                self.accumulate(store, *pred, gx);
            }
            Op::PearsonLoss { pred, target, eps } => {
                let cols = *self.value(*pred).shape.last().unwrap();
                let gx =
                    ops::pearson_backward(&self.value(*pred).data, &target.data, cols, *eps, gy[0]);
                self.accumulate(store, *pred, gx);
            }
            Op::AffineSum { terms } => {
                for &(xid, c) in terms {
                    let gx: Vec<T> = gy.iter().map(|&g| c * g).collect();
                    self.accumulate(store, xid, gx);
                }
            }
        }
    }

    fn accumulate(&self, store: &mut [Option<Vec<T>>], id: NodeId, grad: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut store[id.0] {
            Some(existing) => {
                for (acc, g) in existing.iter_mut().zip(grad) {
                    *acc += g;
                }
            }
            slot => *slot = Some(grad),
        }
    }
}

pub(crate) struct BnView<'a, T> {
    pub xhat: &'a [T],
    pub inv_std: &'a [T],
    pub train: bool,
}

fn ctx_view<T>(ctx: &BnCtx<T>) -> BnView<'_, T> {
    BnView { xhat: &ctx.xhat, inv_std: &ctx.inv_std, train: ctx.train }
}

pub(crate) fn make_bn_ctx<T>(
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    train: bool,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
) -> BnCtx<T> {
    BnCtx { x, gamma, beta, train, xhat, inv_std, batch_mean, batch_var }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_on_axis0() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let b = g.input(Tensor::new(vec![1], vec![2.0]).unwrap(), false);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data, vec![1.0, 2.0]);
        assert_eq!(g.value(c).shape, vec![2]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = mse(x, 0) * numel = sum(x^2)/n; at x = 3, n = 1: d/dx = 6.
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let target = Tensor::scalar(0.0);
        let loss = g.mse_loss(x, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_values_and_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data, vec![3.0, -0.2]);
        let target = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let loss = g.mse_loss(y, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dx0 of (y0^2 + y1^2)/2 = y0 = 3; d/dx1 = y1 * 0.2 = -0.04.
        assert!((grads.get(x).unwrap()[0] - 3.0).abs() < 1e-12);
        assert!((grads.get(x).unwrap()[1] + 0.04).abs() < 1e-12);
    }

    #[test]
    fn tanh_saturates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0, 25.0, -25.0]).unwrap(), false);
        let y = g.tanh_act(x);
        assert_eq!(g.value(y).data[0], 0.0);
        assert!((g.value(y).data[1] - 1.0).abs() < 1e-10);
        assert!((g.value(y).data[2] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn dropout_eval_identity_and_p0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(t.clone(), false);
        let eval = g.dropout(x, 0.2, Mode::Eval, &mut rng);
        assert_eq!(g.value(eval).data, t.data);
        let p0 = g.dropout(x, 0.0, Mode::Train, &mut rng);
        assert_eq!(g.value(p0).data, t.data);
    }

    #[test]
    fn dropout_empirical_rate() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::new(vec![n], vec![1.0; n]).unwrap(), false);
        let y = g.dropout(x, 0.2, Mode::Train, &mut rng);
        let zeroed = g.value(y).data.iter().filter(|&&v| v == 0.0).count();
        let rate = zeroed as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.01, "zeroed fraction {rate}");
        let survivor = g.value(y).data.iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.25).abs() < 1e-12);
    }

    #[test]
    fn backward_traverses_shared_subgraph_once() {
        // loss depends on x through two paths; gradient must be the sum.
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(Tensor::scalar(2.0), true);
        let sum = g.affine_sum(&[(x, 1.0), (x, 3.0)]).unwrap();
        let target = Tensor::scalar(0.0);
        let loss = g.mse_loss(sum, &target).unwrap();
        // loss = (4x)^2 => d/dx = 32x = 64.
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 64.0).abs() < 1e-9);
    }
}
