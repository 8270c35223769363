//! Tape of recorded operations and the reverse sweep over it.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (`n - 1` denominator), used for running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddChannel(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Mean {
        input: Var,
        axes: Vec<usize>,
    },
    SquaredError(Var, Var),
    Reshape(Var),
    Repeat {
        input: Var,
        axis: usize,
        count: usize,
    },
    Select {
        input: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    MixAxis {
        input: Var,
        axis: usize,
        weights: Arc<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in insertion order, so inputs always precede the
/// nodes that consume them and a single reverse pass is a valid topological
/// sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked (for inputs under test).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable, true)
    }

    /// Binds a parameter. Frozen parameters behave like constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id), trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds `bias[c]` along axis 1 of an `N × C × ...` tensor.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_channel",
                lhs: sx,
                rhs: sb,
            });
        }
        let (outer, c, inner) = outer_inner(&sx, 1);
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&sx, out)?, Op::AddChannel(x, bias), rg))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let err = || Error::Shape {
            op,
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 4 || sw.len() != 4 || stride == 0 {
            return Err(err());
        }
        let (n, c_in, h_in, w_in) = (si[0], si[1], si[2], si[3]);
        let (kh, kw) = (sw[2], sw[3]);
        if transposed {
            if sw[0] != c_in {
                return Err(err());
            }
            let span_h = (h_in - 1) * stride + kh;
            let span_w = (w_in - 1) * stride + kw;
            if span_h <= 2 * padding || span_w <= 2 * padding {
                return Err(err());
            }
            Ok(ConvGeom {
                n,
                c_in,
                h_in,
                w_in,
                c_out: sw[1],
                kh,
                kw,
                h_out: span_h - 2 * padding,
                w_out: span_w - 2 * padding,
                stride,
                padding,
            })
        } else {
            if sw[1] != c_in || h_in + 2 * padding < kh || w_in + 2 * padding < kw {
                return Err(err());
            }
            Ok(ConvGeom {
                n,
                c_in,
                h_in,
                w_in,
                c_out: sw[0],
                kh,
                kw,
                h_out: (h_in + 2 * padding - kh) / stride + 1,
                w_out: (w_in + 2 * padding - kw) / stride + 1,
                stride,
                padding,
            })
        }
    }

    /// NCHW convolution with an `out × in × kh × kw` kernel (no bias).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("conv2d", input, weight, stride, padding, false)?;
        let mut out = vec![0.0; geom.n * geom.c_out * geom.h_out * geom.w_out];
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let t = Tensor::new(&[geom.n, geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    /// NCHW transposed convolution with an `in × out × kh × kw` kernel (no bias).
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("conv_transpose2d", input, weight, stride, padding, true)?;
        let mut out = vec![0.0; geom.n * geom.c_out * geom.h_out * geom.w_out];
        kernels::conv_transpose2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        let t = Tensor::new(&[geom.n, geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel (axis 1) batch normalization with affine scale and shift.
    ///
    /// In train mode the returned [`BatchStats`] let the caller update its
    /// running estimates; eval mode reads the supplied statistics and
    /// mutates nothing.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(input).to_vec();
        let c = if sx.len() >= 2 { sx[1] } else { 0 };
        for (name, p) in [("batch_norm gamma", gamma), ("batch_norm beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::Shape {
                    op: name,
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (outer, _, inner) = outer_inner(&sx, 1);
        let m = outer * inner;
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let stats = match mode {
            BnMode::Train => {
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += x[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let mu = mean[ch];
                        var[ch] += x[base..base + inner]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                Some(BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                })
            }
            BnMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Shape {
                        op: "batch_norm running stats",
                        lhs: sx,
                        rhs: vec![rm.len(), rv.len()],
                    });
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                None
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let train = stats.is_some();
        let v = self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::sin);
        let rg = self.rg(a);
        self.push(v, Op::Sin(a), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::cos);
        let rg = self.rg(a);
        self.push(v, Op::Cos(a), rg)
    }

    /// Mean over the listed axes, which are removed from the shape.
    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Shape {
                op: "mean",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (out_shape, out_index) = reduction_map(&shape, &sorted);
        let count: usize = sorted.iter().map(|&a| shape[a]).product();
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (i, &x) in self.value(input).data().iter().enumerate() {
            out[out_index[i]] += x;
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Mean {
                input,
                axes: sorted,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len() as f64;
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        let m = self.mean(input, &axes)?;
        Ok(self.scale(m, n))
    }

    /// Mean of squared differences, a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::SquaredError(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Inserts a new axis of length `count` at `axis`, copying the input along it.
    pub fn repeat(&mut self, input: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis > shape.len() || count == 0 {
            return Err(Error::Shape {
                op: "repeat",
                lhs: shape,
                rhs: vec![axis, count],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&x[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, count);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Repeat { input, axis, count },
            rg,
        ))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, input: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Shape {
                op: "select",
                lhs: shape,
                rhs: vec![axis, index],
            });
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            out.extend_from_slice(&x[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Select { input, axis, index },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::Shape {
                op: "stack",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        for &v in inputs {
            self.same_shape("stack", *first, v)?;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, inputs.len());
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Applies a constant `M × N` matrix along an axis of length `N`.
    pub fn mix_axis(&mut self, input: Var, axis: usize, weights: Arc<Tensor>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let ws = weights.shape();
        if axis >= shape.len() || ws.len() != 2 || ws[1] != shape[axis] {
            return Err(Error::Shape {
                op: "mix_axis",
                lhs: shape,
                rhs: ws.to_vec(),
            });
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let m = ws[0];
        let x = self.value(input).data();
        let w = weights.data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for r in 0..m {
                let dst = (o * m + r) * inner;
                for c in 0..n {
                    let wrc = w[r * n + c];
                    if wrc == 0.0 {
                        continue;
                    }
                    let src = (o * n + c) * inner;
                    for i in 0..inner {
                        out[dst + i] += wrc * x[src + i];
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MixAxis {
                input,
                axis,
                weights,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss, returning gradients for every node
    /// that requires them.
    pub fn backward_grads(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut kept: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            if matches!(self.nodes[idx].op, Op::Param(_) | Op::Variable) {
                kept[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads: kept })
    }

    /// Runs the reverse sweep and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).grad_mut().add_assign(g);
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).expect("gradient shape matches node")
    }

    fn backward_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gy = gout.data();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, self.like(*b, gy.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(
                        grads,
                        *a,
                        self.like(*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    );
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(
                        grads,
                        *b,
                        self.like(*b, gy.iter().zip(av).map(|(g, x)| g * x).collect()),
                    );
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, self.like(*a, gy.iter().map(|g| g * c).collect()));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, gy.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| kernels::matmul_grad_a(gy, bv, da, m, k, n));
                self.accumulate_with(grads, *b, |db| kernels::matmul_grad_b(av, gy, db, m, k, n));
            }
            Op::AddChannel(x, bias) => {
                self.accumulate(grads, *x, gout.clone());
                if self.rg(*bias) {
                    let (outer, c, inner) = outer_inner(gout.shape(), 1);
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *d += gy[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (xv, wv) = (self.value(*input).data(), self.value(*weight).data());
                let mut dx = self.rg(*input).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*weight).then(|| vec![0.0; wv.len()]);
                kernels::conv2d_backward(geom, xv, wv, gy, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(d) = dx {
                    self.accumulate(grads, *input, self.like(*input, d));
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *weight, self.like(*weight, d));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                geom,
            } => {
                let (xv, wv) = (self.value(*input).data(), self.value(*weight).data());
                let mut dx = self.rg(*input).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*weight).then(|| vec![0.0; wv.len()]);
                kernels::conv_transpose2d_backward(
                    geom,
                    xv,
                    wv,
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *input, self.like(*input, d));
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *weight, self.like(*weight, d));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, c, inner) = outer_inner(gout.shape(), 1);
                let m = (outer * inner) as f64;
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_dy[ch] += gy[i];
                            sum_dy_xhat[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; gy.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] = if *train {
                                    k * (gy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, sum_dy_xhat));
                self.accumulate(grads, *beta, self.like(*beta, sum_dy));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(
                        *a,
                        gy.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(
                        *a,
                        gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    ),
                );
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(*a, gy.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect()),
                );
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(*a, gy.iter().zip(x).map(|(g, x)| g * x.cos()).collect()),
                );
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    self.like(*a, gy.iter().zip(x).map(|(g, x)| -g * x.sin()).collect()),
                );
            }
            Op::Mean { input, axes } => {
                let shape = self.shape(*input);
                let (_, out_index) = reduction_map(shape, axes);
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let inv = 1.0 / count as f64;
                let dx = out_index.iter().map(|&o| gy[o] * inv).collect();
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gy[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.like(*b, da.iter().map(|v| -v).collect()));
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Repeat { input, axis, count } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..*count {
                        let src = (o * count + r) * inner;
                        for i in 0..inner {
                            dx[o * inner + i] += gy[src + i];
                        }
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Select { input, axis, index } => {
                let (outer, n, inner) = outer_inner(self.shape(*input), *axis);
                let index = *index;
                self.accumulate_with(grads, *input, |dx| {
                    for o in 0..outer {
                        let base = (o * n + index) * inner;
                        for i in 0..inner {
                            dx[base + i] += gy[o * inner + i];
                        }
                    }
                });
            }
            Op::Stack { inputs, axis } => {
                let shape = self.shape(inputs[0]);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let m = inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut dx = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let src = (o * m + j) * inner;
                        dx.extend_from_slice(&gy[src..src + inner]);
                    }
                    self.accumulate(grads, v, self.like(v, dx));
                }
            }
            Op::MixAxis {
                input,
                axis,
                weights,
            } => {
                let (outer, n, inner) = outer_inner(self.shape(*input), *axis);
                let m = weights.shape()[0];
                let w = weights.data();
                self.accumulate_with(grads, *input, |dx| {
                    for o in 0..outer {
                        for r in 0..m {
                            let src = (o * m + r) * inner;
                            for c in 0..n {
                                let wrc = w[r * n + c];
                                if wrc == 0.0 {
                                    continue;
                                }
                                let dst = (o * n + c) * inner;
                                for i in 0..inner {
                                    dx[dst + i] += wrc * gy[src + i];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `tanh` through a single `exp`; libm's version is several times slower.
fn tanh(x: f64) -> f64 {
    let t = (-2.0 * x.abs()).exp();
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape after removing `axes`, and the output offset of every input element.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    // stride of each input axis within the output (0 when reduced)
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    let n: usize = shape.iter().product();
    let mut index = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..shape.len()).rev() {
            index[ax] += 1;
            off += strides[ax];
            if index[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            index[ax] = 0;
        }
    }
    (out_shape, map)
}
