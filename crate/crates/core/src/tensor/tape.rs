use super::conv;
use super::{channel_layout, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv3d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    TransposedConv3d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Add(usize, usize),
    Scale(usize, T),
    Blend {
        a: usize,
        b: usize,
        alpha: T,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
        len: usize,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of executed operations. Values are kept for the
/// backward pass; [`Tape::backward`] walks the record in reverse.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::NotOnTape(v.0))
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].value.requires_grad)
    }

    /// Records a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var {
        let rg = self.needs_grad(inputs);
        self.push(value.with_requires_grad(rg), op)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv3d(
            self.value(input)?,
            self.value(kernel)?,
            self.value(bias)?,
            stride,
            pad,
        )?;
        let (input, kernel, bias) = (input.0, kernel.0, bias.0);
        Ok(self.record(
            out,
            &[input, kernel, bias],
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn transposed_conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::transposed_conv3d(
            self.value(input)?,
            self.value(kernel)?,
            self.value(bias)?,
            stride,
            pad,
        )?;
        let (input, kernel, bias) = (input.0, kernel.0, bias.0);
        Ok(self.record(
            out,
            &[input, kernel, bias],
            Op::TransposedConv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input)?;
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(out, &[input.0], Op::Relu(input.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, &[a.0, b.0], Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let x = self.value(input)?;
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(out, &[input.0], Op::Scale(input.0, factor)))
    }

    /// `(1 − α)·a + α·b`. The endpoints return exact copies of `a` or `b`.
    pub fn linear_blend(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::invalid(format!("blend weight {alpha:?} outside [0, 1]")));
        }
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        same_shape(ta, tb, "linear_blend")?;
        let data = if alpha == T::zero() {
            ta.data().to_vec()
        } else if alpha == T::one() {
            tb.data().to_vec()
        } else {
            let keep = T::one() - alpha;
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| {
                    // rounding can land one ulp outside [min(x,y), max(x,y)]
                    (keep * x + alpha * y).max(x.min(y)).min(x.max(y))
                })
                .collect()
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(out, &[a.0, b.0], Op::Blend { a: a.0, b: b.0, alpha }))
    }

    /// Mean of squared differences over all elements, as a `[1]` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred)?, self.value(target)?);
        same_shape(p, t, "mse_loss")?;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of_f64(sum / p.numel() as f64));
        Ok(self.record(
            out,
            &[pred.0, target.0],
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Concatenates along the channel axis (axis 0 of rank-4, axis 1 of rank-5).
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)?;
        let rank = first.rank();
        let (outer, _, inner) = channel_layout(first.shape())?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v)?;
            let (o, c, i) = channel_layout(t.shape())?;
            if t.rank() != rank || o != outer || i != inner {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = self.nodes[v.0].value.data();
                data.extend_from_slice(&src[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[rank - 4] = total;
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.record(out, &ids, Op::Concat(ids.clone())))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input)?;
        let (outer, c, inner) = channel_layout(x.shape())?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} of {c} channels",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * c + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        let axis = shape.len() - 4;
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            out,
            &[input.0],
            Op::Slice {
                input: input.0,
                start,
                len,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`. Populates `grad` on every
    /// `requires_grad` tensor the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.node(loss)?.value;
        if root.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let differentiable = root.requires_grad;
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !differentiable {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let rg = |i: usize| self.nodes[i].value.requires_grad;
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (gi, gk, gb) = conv::conv3d_backward(val(input), val(kernel), g, stride, pad)?;
                accumulate_if(grads, input, gi, rg(input));
                accumulate_if(grads, kernel, gk, rg(kernel));
                accumulate_if(grads, bias, gb, rg(bias));
            }
            &Op::TransposedConv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (gi, gk, gb) =
                    conv::transposed_conv3d_backward(val(input), val(kernel), g, stride, pad)?;
                accumulate_if(grads, input, gi, rg(input));
                accumulate_if(grads, kernel, gk, rg(kernel));
                accumulate_if(grads, bias, gb, rg(bias));
            }
            &Op::Relu(input) => {
                if rg(input) {
                    let gi = val(input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, input, gi);
                }
            }
            &Op::Add(a, b) => {
                accumulate_if(grads, a, g.to_vec(), rg(a));
                accumulate_if(grads, b, g.to_vec(), rg(b));
            }
            &Op::Scale(input, factor) => {
                if rg(input) {
                    accumulate(grads, input, g.iter().map(|&v| v * factor).collect());
                }
            }
            &Op::Blend { a, b, alpha } => {
                let keep = T::one() - alpha;
                accumulate_if(grads, a, g.iter().map(|&v| keep * v).collect(), rg(a));
                accumulate_if(grads, b, g.iter().map(|&v| alpha * v).collect(), rg(b));
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (val(pred), val(target));
                let coef = T::of_f64(2.0 / p.numel() as f64) * g[0];
                let diff: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| coef * (a - b))
                    .collect();
                if rg(target) {
                    accumulate(grads, target, diff.iter().map(|&v| -v).collect());
                }
                accumulate_if(grads, pred, diff, rg(pred));
            }
            Op::Concat(inputs) => {
                let (outer, total, inner) = channel_layout(self.nodes[id].value.shape())?;
                let mut offset = 0;
                for &i in inputs {
                    let (_, c, _) = channel_layout(val(i).shape())?;
                    if rg(i) {
                        let mut gi = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[base..base + c * inner]);
                        }
                        accumulate(grads, i, gi);
                    }
                    offset += c;
                }
            }
            &Op::Slice { input, start, len } => {
                if rg(input) {
                    let (outer, c, inner) = channel_layout(val(input).shape())?;
                    let mut gi = vec![T::zero(); outer * c * inner];
                    for o in 0..outer {
                        let dst = (o * c + start) * inner;
                        let src = o * len * inner;
                        gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(grads, input, gi);
                }
            }
        }
        Ok(())
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_if<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>, needed: bool) {
    if needed {
        accumulate(grads, id, g);
    }
}
