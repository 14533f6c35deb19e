//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A [`Tape`] owns an arena of nodes in topological order (inputs always
//! precede their consumers, by construction). The forward pass happens while
//! recording; [`Tape::backward`] replays the tape once in reverse, applying
//! each operation's vector-Jacobian product and accumulating gradients into
//! every node that transitively depends on a trainable leaf. Gradients add
//! (never overwrite), so a value consumed by several operations receives the
//! sum of its downstream contributions.
//!
//! A tape is single-threaded; kernels may parallelize internally but two
//! tasks must never share one tape.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Conv1d { input: Var, kernel: Var },
    Gap { input: Var },
    Affine { x: Var, w: Var, b: Var },
    Softmax { input: Var },
    Sigmoid { input: Var },
    Relu { input: Var },
    ConcatChannels { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { input: Var, c: T },
    AddScalar { input: Var },
    ScaleChannels { input: Var, weights: Var },
    GatherLeading { input: Var, idx: Vec<usize> },
    GatherRows { input: Var, idx: Vec<usize> },
    LogClamped { input: Var, floor: T },
    Sum { input: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    trainable: bool,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            trainable: false,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf by copying the parameter's current value.
    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        let v = self.push(value.clone(), true, Op::Leaf);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears all gradient buffers so backward can run again from scratch.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest |input| seen by any rectifier or hinge on this tape. Used by
    /// the finite-difference harness to reject samples too close to a kink.
    pub fn min_kink_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for n in &self.nodes {
            if let Op::Relu { input } = n.op {
                for &v in self.nodes[input.0].value.data() {
                    let a = v.as_f64().abs();
                    best = Some(best.map_or(a, |b: f64| b.min(a)));
                }
            }
        }
        best
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, needs, Op::Conv2d { input, kernel, stride, pad }))
    }

    /// 1D cross-channel convolution; accepts `[C]` or `[B, C]`.
    pub fn conv1d_channels(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let value = match self.value(input).shape().len() {
            1 => ops::conv1d_channels(self.value(input), self.value(kernel))?,
            2 => ops::conv1d_rows(self.value(input), self.value(kernel))?,
            _ => {
                return Err(Error::shape(
                    "conv1d_channels",
                    format!("expected rank 1 or 2, got {:?}", self.value(input).shape()),
                ))
            }
        };
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, needs, Op::Conv1d { input, kernel }))
    }

    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let value = ops::global_average_pool(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Gap { input }))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::affine(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, needs, Op::Affine { x, w, b }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let value = ops::softmax(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Softmax { input }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = ops::sigmoid(self.value(input));
        let needs = self.needs(input);
        self.push(value, needs, Op::Sigmoid { input })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu { input })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::ConcatChannels { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::sub(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, input: Var, c: T) -> Var {
        let value = ops::scale(self.value(input), c);
        let needs = self.needs(input);
        self.push(value, needs, Op::Scale { input, c })
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let value = ops::add_scalar(self.value(input), c);
        let needs = self.needs(input);
        self.push(value, needs, Op::AddScalar { input })
    }

    pub fn scale_channels(&mut self, input: Var, weights: Var) -> Result<Var> {
        let value = ops::scale_channels(self.value(input), self.value(weights))?;
        let needs = self.needs(input) || self.needs(weights);
        Ok(self.push(value, needs, Op::ScaleChannels { input, weights }))
    }

    pub fn gather_leading(&mut self, input: Var, idx: Vec<usize>) -> Result<Var> {
        let value = ops::gather_leading(self.value(input), &idx)?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::GatherLeading { input, idx }))
    }

    pub fn gather_rows(&mut self, input: Var, idx: Vec<usize>) -> Result<Var> {
        let value = ops::gather_rows(self.value(input), &idx)?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::GatherRows { input, idx }))
    }

    pub fn log_clamped(&mut self, input: Var, floor: T) -> Var {
        let value = ops::log_clamped(self.value(input), floor);
        let needs = self.needs(input);
        self.push(value, needs, Op::LogClamped { input, floor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = ops::sum(self.value(input));
        let needs = self.needs(input);
        self.push(value, needs, Op::Sum { input })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => self.nodes[v.0].grad = Some(delta.clone()),
        }
    }

    /// Populates gradients of `loss` with respect to every node that needs
    /// one. `loss` must be a scalar. Trainable leaves unreachable from the
    /// loss end up with an explicit zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.accumulate_seed(loss);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i)?;
        }
        for n in &mut self.nodes {
            if n.trainable && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate_seed(&mut self, loss: Var) {
        let seed = Tensor::scalar(T::one());
        match &mut self.nodes[loss.0].grad {
            Some(g) => {
                g.data_mut()[0] += T::one();
            }
            None => self.nodes[loss.0].grad = Some(seed),
        }
    }

    fn backward_node(&mut self, i: usize) -> Result<()> {
        let g = self.nodes[i].grad.clone().expect("checked above");
        // Ops only reference strictly earlier nodes, so the borrows below are
        // safe through indices.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, pad } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                if self.needs(input) {
                    let d_in = ops::conv2d_backward_input(
                        &g,
                        self.value(kernel),
                        &self.value(input).shape().to_vec(),
                        stride,
                        pad,
                    )?;
                    self.accumulate(input, &d_in);
                }
                if self.needs(kernel) {
                    let d_k = ops::conv2d_backward_kernel(
                        &g,
                        self.value(input),
                        &self.value(kernel).shape().to_vec(),
                        stride,
                        pad,
                    )?;
                    self.accumulate(kernel, &d_k);
                }
            }
            Op::Conv1d { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                let in_shape = self.value(input).shape().to_vec();
                let rank1 = in_shape.len() == 1;
                let as_rows = |t: &Tensor<T>| -> Tensor<T> {
                    if rank1 {
                        t.clone().reshaped(&[1, t.len()]).expect("volume unchanged")
                    } else {
                        t.clone()
                    }
                };
                let (d_in, d_k) = ops::conv1d_rows_backward(
                    &as_rows(&g),
                    &as_rows(self.value(input)),
                    self.value(kernel),
                )?;
                if self.needs(input) {
                    let d_in = d_in.reshaped(&in_shape)?;
                    self.accumulate(input, &d_in);
                }
                if self.needs(kernel) {
                    self.accumulate(kernel, &d_k);
                }
            }
            Op::Gap { input } => {
                let input = *input;
                let d_in =
                    ops::global_average_pool_backward(&g, &self.value(input).shape().to_vec())?;
                self.accumulate(input, &d_in);
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (d_x, d_w, d_b) = ops::affine_backward(&g, self.value(x), self.value(w))?;
                if self.needs(x) {
                    self.accumulate(x, &d_x);
                }
                if self.needs(w) {
                    self.accumulate(w, &d_w);
                }
                if self.needs(b) {
                    self.accumulate(b, &d_b);
                }
            }
            Op::Softmax { input } => {
                let input = *input;
                let d_z = ops::softmax_backward(&g, &self.nodes[i].value)?;
                self.accumulate(input, &d_z);
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.shape());
                for ((dv, &gv), &yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *dv = gv * yv * (T::one() - yv);
                }
                self.accumulate(input, &d);
            }
            Op::Relu { input } => {
                let input = *input;
                let x = self.value(input);
                let mut d = Tensor::zeros(x.shape());
                for ((dv, &gv), &xv) in d.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *dv = if xv > T::zero() { gv } else { T::zero() };
                }
                self.accumulate(input, &d);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let a_shape = self.value(a).shape().to_vec();
                let b_shape = self.value(b).shape().to_vec();
                let (batch, ca, h, w) = (a_shape[0], a_shape[1], a_shape[2], a_shape[3]);
                let cb = b_shape[1];
                let plane = h * w;
                let (asz, bsz) = (ca * plane, cb * plane);
                let mut d_a = Tensor::zeros(&a_shape);
                let mut d_b = Tensor::zeros(&b_shape);
                for img in 0..batch {
                    let src = &g.data()[img * (asz + bsz)..(img + 1) * (asz + bsz)];
                    d_a.data_mut()[img * asz..(img + 1) * asz].copy_from_slice(&src[..asz]);
                    d_b.data_mut()[img * bsz..(img + 1) * bsz].copy_from_slice(&src[asz..]);
                }
                if self.needs(a) {
                    self.accumulate(a, &d_a);
                }
                if self.needs(b) {
                    self.accumulate(b, &d_b);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d_a = ops::mul(&g, self.value(b))?;
                    self.accumulate(a, &d_a);
                }
                if self.needs(b) {
                    let d_b = ops::mul(&g, self.value(a))?;
                    self.accumulate(b, &d_b);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                if self.needs(b) {
                    let neg = ops::scale(&g, -T::one());
                    self.accumulate(b, &neg);
                }
            }
            Op::Scale { input, c } => {
                let (input, c) = (*input, *c);
                let d = ops::scale(&g, c);
                self.accumulate(input, &d);
            }
            Op::AddScalar { input } => {
                let input = *input;
                self.accumulate(input, &g);
            }
            Op::ScaleChannels { input, weights } => {
                let (input, weights) = (*input, *weights);
                let (d_f, d_w) =
                    ops::scale_channels_backward(&g, self.value(input), self.value(weights))?;
                if self.needs(input) {
                    self.accumulate(input, &d_f);
                }
                if self.needs(weights) {
                    self.accumulate(weights, &d_w);
                }
            }
            Op::GatherLeading { input, idx } => {
                let input = *input;
                let idx = idx.clone();
                let in_shape = self.value(input).shape().to_vec();
                let item: usize = in_shape[1..].iter().product();
                let mut d = Tensor::zeros(&in_shape);
                for (m, &src) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[src * item..(src + 1) * item];
                    for (dv, &gv) in dst.iter_mut().zip(&g.data()[m * item..(m + 1) * item]) {
                        *dv += gv;
                    }
                }
                self.accumulate(input, &d);
            }
            Op::GatherRows { input, idx } => {
                let input = *input;
                let idx = idx.clone();
                let in_shape = self.value(input).shape().to_vec();
                let n = in_shape[1];
                let mut d = Tensor::zeros(&in_shape);
                for (row, &col) in idx.iter().enumerate() {
                    d.data_mut()[row * n + col] += g.data()[row];
                }
                self.accumulate(input, &d);
            }
            Op::LogClamped { input, floor } => {
                let (input, floor) = (*input, *floor);
                let x = self.value(input);
                let mut d = Tensor::zeros(x.shape());
                for ((dv, &gv), &xv) in d.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *dv = if xv > floor { gv / xv } else { T::zero() };
                }
                self.accumulate(input, &d);
            }
            Op::Sum { input } => {
                let input = *input;
                let gv = g.data()[0];
                let d = Tensor::filled(self.value(input).shape(), gv);
                self.accumulate(input, &d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng).with_grad();
        let xv = tape.param(&x);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert!(tape.grad(xv).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert_relative_eq!(gv, &(2.0 * xv), max_relative = 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::<f64>::zeros(&[2]).with_grad();
        let xv = tape.param(&x);
        assert!(tape.backward(xv).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let used = Tensor::<f64>::filled(&[2], 1.0).with_grad();
        let unused = Tensor::<f64>::filled(&[3], 1.0).with_grad();
        let uv = tape.param(&used);
        let nv = tape.param(&unused);
        let loss = tape.sum(uv);
        tape.backward(loss).unwrap();
        assert!(tape.grad(nv).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_after_reset_is_identical() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform(&[4, 4], -1.0, 1.0, &mut rng).with_grad();
        let xv = tape.param(&x);
        let s = tape.sigmoid(xv);
        let m = tape.mul(s, xv).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        let first = tape.grad(xv).unwrap().clone();
        tape.reset_grads();
        tape.backward(loss).unwrap();
        let second = tape.grad(xv).unwrap().clone();
        assert_eq!(first.data(), second.data());
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = 2x + 3x => dx = 5
        let mut tape = Tape::<f64>::new();
        let x = Tensor::scalar(1.0).with_grad();
        let xv = tape.param(&x);
        let a = tape.scale(xv, 2.0);
        let b = tape.scale(xv, 3.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap().data(), &[5.0]);
    }
}
