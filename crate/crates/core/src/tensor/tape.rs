use std::collections::BTreeMap;
use std::fmt;

use super::ops::{self, LEAKY_SLOPE};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, `None` where an input is not
    /// differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        padding: usize,
    },
    AddBias {
        input: usize,
        bias: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Concat(usize, usize),
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => write!(f, "Leaf"),
            Op::Conv2d { input, kernels, .. } => write!(f, "Conv2d({input}, {kernels})"),
            Op::AddBias { input, bias } => write!(f, "AddBias({input}, {bias})"),
            Op::Sigmoid(a) => write!(f, "Sigmoid({a})"),
            Op::Tanh(a) => write!(f, "Tanh({a})"),
            Op::LeakyRelu(a) => write!(f, "LeakyRelu({a})"),
            Op::Add(a, b) => write!(f, "Add({a}, {b})"),
            Op::Mul(a, b) => write!(f, "Mul({a}, {b})"),
            Op::Concat(a, b) => write!(f, "Concat({a}, {b})"),
            Op::Sum(a) => write!(f, "Sum({a})"),
            Op::Custom { inputs, op } => write!(f, "{}({inputs:?})", op.name()),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the tape from the end
/// visits every node after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_node.iter().map(|(&i, t)| (Var(i), t))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: receives a gradient entry on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// Frozen leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, needs_grad, false)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = ops::conv2d(self.value(input), self.value(kernels), stride, padding)?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
                padding,
            },
            &[input.0, kernels.0],
        ))
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let value = ops::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push_op(
            value,
            Op::AddBias {
                input: input.0,
                bias: bias.0,
            },
            &[input.0, bias.0],
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        self.push_op(value, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = ops::tanh(self.value(x));
        self.push_op(value, Op::Tanh(x.0), &[x.0])
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let value = ops::leaky_relu(self.value(x));
        self.push_op(value, Op::LeakyRelu(x.0), &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push_op(value, Op::Concat(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op(value, Op::Sum(x.0), &[x.0])
    }

    /// Records a caller-evaluated operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push_op(
            output,
            Op::Custom {
                inputs: idx.clone(),
                op,
            },
            &idx,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        out.by_node.insert(i, g);
                    }
                }
                &Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let x = &self.nodes[input].value;
                    let k = &self.nodes[kernels].value;
                    if self.nodes[input].needs_grad {
                        let gi = ops::conv2d_grad_input(x, k, &g, stride, padding)?;
                        accumulate(&mut grads, input, gi)?;
                    }
                    if self.nodes[kernels].needs_grad {
                        let gk = ops::conv2d_grad_kernels(x, k, &g, stride, padding)?;
                        accumulate(&mut grads, kernels, gk)?;
                    }
                }
                &Op::AddBias { input, bias } => {
                    if self.nodes[bias].needs_grad {
                        accumulate(&mut grads, bias, ops::channel_sums(&g)?)?;
                    }
                    if self.nodes[input].needs_grad {
                        accumulate(&mut grads, input, g)?;
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = ops::zip(&g, y, |gv, yv| gv * yv * (1.0 - yv))?;
                    accumulate(&mut grads, a, ga)?;
                }
                &Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = ops::zip(&g, y, |gv, yv| gv * (1.0 - yv * yv))?;
                    accumulate(&mut grads, a, ga)?;
                }
                &Op::LeakyRelu(a) => {
                    let x = &self.nodes[a].value;
                    let ga = ops::zip(&g, x, |gv, xv| if xv > 0.0 { gv } else { gv * LEAKY_SLOPE })?;
                    accumulate(&mut grads, a, ga)?;
                }
                &Op::Add(a, b) => {
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads, a, g.clone())?;
                    }
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads, b, g)?;
                    }
                }
                &Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads, a, ops::mul(&g, &self.nodes[b].value)?)?;
                    }
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads, b, ops::mul(&g, &self.nodes[a].value)?)?;
                    }
                }
                &Op::Concat(a, b) => {
                    let c1 = self.nodes[a].value.shape()[0];
                    let c = g.shape()[0];
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads, a, ops::slice_channels(&g, 0, c1)?)?;
                    }
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads, b, ops::slice_channels(&g, c1, c)?)?;
                    }
                }
                &Op::Sum(a) => {
                    let gv = g.item()?;
                    let ga = Tensor::full(self.nodes[a].value.shape(), gv);
                    accumulate(&mut grads, a, ga)?;
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let gs = op.backward(&vals, &node.value, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::contract(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if let Some(gj) = gj {
                            if self.nodes[j].needs_grad {
                                accumulate(&mut grads, j, gj)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} vs {:?} at node {idx}",
                    existing.shape(),
                    g.shape()
                )));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_fn(&[2, 2], |i| i as f64));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn gradient_of_square() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_leaves_get_no_entry() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[3], 2.0));
        let c = tape.constant(Tensor::full(&[3], 5.0));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[5.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }
}
