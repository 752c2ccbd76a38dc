//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation records its output value and enough of its inputs to run
//! the adjoint. The tape is append-only, so node order is a valid topological
//! order and [`Tape::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::{GradientMap, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    AddN(Vec<Var>),
    L1Norm(Var),
    L2Norm(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MarginXent {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    AdaIn {
        content: Var,
        style: Var,
        eps: f64,
    },
    Cvar {
        inputs: Vec<Var>,
        eta: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record for one evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    kinks: Option<Vec<i8>>,
}

/// Adjoint of every node with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, &[0, 0, 0], t.shape())),
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

/// Per-channel spatial statistics `(mean, population std)` of a `(C, H, W)` map.
pub fn channel_moments(t: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (c, h, w) = rank3("channel_moments", t)?;
    let n = h * w;
    Ok(t.data()
        .chunks(n)
        .take(c)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, libm::sqrt(var))
        })
        .collect())
}

/// AdaIN forward: each channel of `content` is standardized with its own
/// spatial moments (stabilizer `eps` on the std) and re-scaled to the moments
/// of the matching `style` channel.
pub fn adain_forward(content: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    same_shape("adain", content, style)?;
    let (_, h, w) = rank3("adain", content)?;
    let n = h * w;
    let cm = channel_moments(content)?;
    let sm = channel_moments(style)?;
    let mut out = Vec::with_capacity(content.len());
    for (k, ch) in content.data().chunks(n).enumerate() {
        let (mu_c, sd_c) = cm[k];
        let (mu_s, sd_s) = sm[k];
        let denom = sd_c + eps;
        for &v in ch {
            let centered = v - mu_c;
            let normalized = if denom > 0.0 { centered / denom } else { 0.0 };
            out.push(sd_s * normalized + mu_s);
        }
    }
    Ok(Tensor::from_parts(content.shape().to_vec(), out))
}

/// Stable `(loss, softmax)` of softmax cross-entropy after subtracting
/// `margin` from the true-class logit.
pub(crate) fn margin_xent_forward(logits: &[f64], label: usize, margin: f64) -> (f64, Vec<f64>) {
    let mut z = logits.to_vec();
    z[label] -= margin;
    let (arg, m) = z
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| {
            if v > am {
                (i, v)
            } else {
                (ai, am)
            }
        });
    let others: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| libm::exp(v - m))
        .sum();
    let log_norm = libm::log1p(others);
    let loss = (m - z[label]) + log_norm;
    let probs = z.iter().map(|&v| libm::exp(v - m - log_norm)).collect();
    (loss, probs)
}

/// Objective `eta + sum_i [l_i - eta]_+ / (alpha * m)` at a fixed threshold.
pub(crate) fn cvar_objective(losses: &[f64], eta: f64, alpha: f64) -> f64 {
    let m = losses.len() as f64;
    let tail: f64 = losses.iter().map(|&l| f64::max(l - eta, 0.0)).sum();
    eta + tail / (alpha * m)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the activation pattern of every kinked operation, so that a
    /// finite-difference checker can detect when a perturbation crosses a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn kink_signature(&self) -> Option<&[i8]> {
        self.kinks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node: Op) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node });
        Ok(Var(self.nodes.len() - 1))
    }

    fn track(&mut self, pattern: impl Iterator<Item = i8>) {
        if let Some(k) = self.kinks.as_mut() {
            k.extend(pattern);
        }
    }

    /// A constant input. Gradients flow into it but are never reported.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter by name. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if self.params.len() < store.len() {
            self.params.resize(store.len(), None);
        }
        if let Some(v) = self.params[idx] {
            return Ok(v);
        }
        let v = self.push("param", store.value_at(idx).clone(), Op::Param)?;
        self.params[idx] = Some(v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.push("scale", t, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.push("shift", t, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| f64::max(v, 0.0)).collect(),
        );
        let pattern: Vec<i8> = if self.kinks.is_some() {
            x.data().iter().map(|&v| sign(v)).collect()
        } else {
            Vec::new()
        };
        self.track(pattern.into_iter());
        self.push("relu", t, Op::Relu(a))
    }

    /// `[a]_+`; an alias of [`Tape::relu`] for scalar margins.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.abs()).collect(),
        );
        let pattern: Vec<i8> = if self.kinks.is_some() {
            x.data().iter().map(|&v| sign(v)).collect()
        } else {
            Vec::new()
        };
        self.track(pattern.into_iter());
        self.push("abs", t, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::invalid("add_n needs at least one term"))?;
        let mut acc = self.value(first).clone();
        for &t in &terms[1..] {
            let v = self.value(t);
            same_shape("add_n", &acc, v)?;
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        self.push("add_n", acc, Op::AddN(terms.to_vec()))
    }

    /// Arithmetic mean of same-shaped tensors.
    pub fn mean_n(&mut self, terms: &[Var]) -> Result<Var> {
        let s = self.add_n(terms)?;
        self.scale(s, 1.0 / terms.len() as f64)
    }

    /// Entrywise L1 norm `sum |a|`.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().map(|v| v.abs()).sum();
        let pattern: Vec<i8> = if self.kinks.is_some() {
            x.data().iter().map(|&v| sign(v)).collect()
        } else {
            Vec::new()
        };
        self.track(pattern.into_iter());
        self.push("l1_norm", Tensor::scalar(s), Op::L1Norm(a))
    }

    /// Euclidean norm over all entries. The subgradient at 0 is 0.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).l2_norm();
        self.track(core::iter::once(sign(n)));
        self.push("l2_norm", Tensor::scalar(n), Op::L2Norm(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one part"))?;
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", self.value(first).shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
        )
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let Some(&lead) = x.shape().first() else {
            return Err(Error::shape("narrow", &[start + len], x.shape()));
        };
        if len == 0 || start + len > lead {
            return Err(Error::shape("narrow", &[start + len], x.shape()));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let data = x.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        self.push(
            "narrow",
            Tensor::from_parts(shape, data),
            Op::Narrow { input: a, start },
        )
    }

    /// Strided valid convolution. `input` is `(Cin, H, W)`, `weight` is
    /// `(Cout, Cin, k, k)`, `bias` is `(Cout)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (cin, h, wd) = rank3("conv2d", x)?;
        let [cout, wcin, k, k2] = *w.shape() else {
            return Err(Error::shape("conv2d.weight", &[0, cin, 0, 0], w.shape()));
        };
        if wcin != cin || k != k2 || k > h || k > wd || stride == 0 {
            return Err(Error::shape("conv2d", &[cout, cin, k, k], x.shape()));
        }
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d.bias", &[cout], b.shape()));
        }
        let ho = (h - k) / stride + 1;
        let wo = (wd - k) / stride + 1;
        let (xd, wdat, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bd[o];
                    for c in 0..cin {
                        for i in 0..k {
                            let row = (c * h + y * stride + i) * wd + xo * stride;
                            let wrow = ((o * cin + c) * k + i) * k;
                            for j in 0..k {
                                acc += wdat[wrow + j] * xd[row + j];
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xo] = acc;
                }
            }
        }
        let t = Tensor::from_parts(vec![cout, ho, wo], out);
        self.push(
            "conv2d",
            t,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            },
        )
    }

    /// Transposed convolution (learned upsampling). `input` is `(Cin, h, w)`,
    /// `weight` is `(Cin, Cout, k, k)`, output is `(Cout, (h-1)s+k, (w-1)s+k)`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (cin, h, wd) = rank3("conv_transpose2d", x)?;
        let [wcin, cout, k, k2] = *w.shape() else {
            return Err(Error::shape(
                "conv_transpose2d.weight",
                &[cin, 0, 0, 0],
                w.shape(),
            ));
        };
        if wcin != cin || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                &[cin, cout, k, k],
                x.shape(),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape("conv_transpose2d.bias", &[cout], b.shape()));
        }
        let ho = (h - 1) * stride + k;
        let wo = (wd - 1) * stride + k;
        let (xd, wdat, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            out[o * ho * wo..(o + 1) * ho * wo].fill(bd[o]);
        }
        for c in 0..cin {
            for y in 0..h {
                for xi in 0..wd {
                    let v = xd[(c * h + y) * wd + xi];
                    for o in 0..cout {
                        for i in 0..k {
                            let row = (o * ho + y * stride + i) * wo + xi * stride;
                            let wrow = ((c * cout + o) * k + i) * k;
                            for j in 0..k {
                                out[row + j] += v * wdat[wrow + j];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![cout, ho, wo], out);
        self.push(
            "conv_transpose2d",
            t,
            Op::ConvTranspose {
                input,
                weight,
                bias,
                stride,
            },
        )
    }

    /// `W x + b` with `x` flattened; `weight` is `(out, in)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let n = x.len();
        let [out_dim, in_dim] = *w.shape() else {
            return Err(Error::shape("dense.weight", &[0, n], w.shape()));
        };
        if in_dim != n {
            return Err(Error::shape("dense", &[in_dim], x.shape()));
        }
        if b.shape() != [out_dim] {
            return Err(Error::shape("dense.bias", &[out_dim], b.shape()));
        }
        let xd = x.data();
        let out = w
            .data()
            .chunks(n)
            .zip(b.data())
            .map(|(row, &bias)| bias + row.iter().zip(xd).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let t = Tensor::from_parts(vec![out_dim], out);
        self.push(
            "dense",
            t,
            Op::Dense {
                input,
                weight,
                bias,
            },
        )
    }

    /// Softmax cross-entropy with `margin` subtracted from the true-class
    /// logit before normalization. `margin = 0` is plain cross-entropy.
    pub fn margin_cross_entropy(&mut self, logits: Var, label: usize, margin: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 1 {
            return Err(Error::shape("cross_entropy", &[label + 1], z.shape()));
        }
        if label >= z.len() {
            return Err(Error::invalid(alloc::format!(
                "label {label} outside {} classes",
                z.len()
            )));
        }
        let (loss, probs) = margin_xent_forward(z.data(), label, margin);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::MarginXent {
                logits,
                label,
                probs,
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.margin_cross_entropy(logits, label, 0.0)
    }

    /// Adaptive instance normalization of `content` to the per-channel
    /// spatial moments of `style`.
    pub fn adain(&mut self, content: Var, style: Var, eps: f64) -> Result<Var> {
        let t = adain_forward(self.value(content), self.value(style), eps)?;
        if self.kinks.is_some() {
            let a = channel_moments(self.value(content))?;
            let b = channel_moments(self.value(style))?;
            self.track(a.into_iter().chain(b).map(|(_, s)| sign(s)));
        }
        self.push(
            "adain",
            t,
            Op::AdaIn {
                content,
                style,
                eps,
            },
        )
    }

    /// CVaR objective `eta + sum_i [l_i - eta]_+ / (alpha * m)` over scalar
    /// nodes with `eta` held constant.
    ///
    /// In the backward pass entries strictly above `eta` receive weight
    /// `1 / (alpha m)`. Entries tied with `eta` share the residual mass
    /// `max(0, 1 - above / (alpha m))`, which is the derivative of the
    /// minimized objective when `eta` sits on that breakpoint.
    pub fn cvar_at(&mut self, inputs: &[Var], eta: f64, alpha: f64) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("cvar over empty set"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid("cvar level must lie in (0, 1]"));
        }
        let mut losses = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("cvar", &[], t.shape()));
            }
            losses.push(t.item());
        }
        self.track(losses.iter().map(|&l| sign(l - eta)));
        let value = cvar_objective(&losses, eta, alpha);
        self.push(
            "cvar",
            Tensor::scalar(value),
            Op::Cvar {
                inputs: inputs.to_vec(),
                eta,
                alpha,
            },
        )
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", &[], out.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    accumulate(&mut grads[v.0], &shape_of(v), |t| {
                        t.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                    t.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                });
                accumulate(&mut grads[b.0], &shape_of(*b), |t| {
                    t.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                    for i in 0..t.len() {
                        t[i] += gd[i] * bv[i];
                    }
                });
                accumulate(&mut grads[b.0], &shape_of(*b), |t| {
                    for i in 0..t.len() {
                        t[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                t.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)
            }),
            Op::Shift(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                t.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                    for i in 0..t.len() {
                        if av[i] > 0.0 {
                            t[i] += gd[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                    for i in 0..t.len() {
                        t[i] += gd[i] * sign(av[i]) as f64;
                    }
                });
            }
            Op::Sum(a) => accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                t.iter_mut().for_each(|x| *x += gd[0])
            }),
            Op::AddN(terms) => {
                for &v in terms {
                    accumulate(&mut grads[v.0], &shape_of(v), |t| {
                        t.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::L1Norm(a) => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                    for i in 0..t.len() {
                        t[i] += gd[0] * sign(av[i]) as f64;
                    }
                });
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                if n > 0.0 {
                    let av = self.value(*a).data();
                    accumulate(&mut grads[a.0], &shape_of(*a), |t| {
                        for i in 0..t.len() {
                            t[i] += gd[0] * av[i] / n;
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(&mut grads[p.0], &shape_of(p), |t| {
                        t.iter_mut()
                            .zip(&gd[offset..offset + len])
                            .for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, start } => {
                let shape = shape_of(*input);
                let inner: usize = shape[1..].iter().product();
                let from = start * inner;
                accumulate(&mut grads[input.0], &shape, |t| {
                    t[from..from + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(x, y)| *x += y)
                });
            }
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            } => self.conv_backward(*input, *weight, *bias, *stride, g, grads),
            Op::ConvTranspose {
                input,
                weight,
                bias,
                stride,
            } => self.conv_transpose_backward(*input, *weight, *bias, *stride, g, grads),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let n = x.len();
                accumulate(&mut grads[input.0], &shape_of(*input), |t| {
                    for (o, &go) in gd.iter().enumerate() {
                        let row = &w[o * n..(o + 1) * n];
                        t.iter_mut().zip(row).for_each(|(x, w)| *x += go * w);
                    }
                });
                accumulate(&mut grads[weight.0], &shape_of(*weight), |t| {
                    for (o, &go) in gd.iter().enumerate() {
                        t[o * n..(o + 1) * n]
                            .iter_mut()
                            .zip(x)
                            .for_each(|(w, x)| *w += go * x);
                    }
                });
                accumulate(&mut grads[bias.0], &shape_of(*bias), |t| {
                    t.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                });
            }
            Op::MarginXent {
                logits,
                label,
                probs,
            } => {
                accumulate(&mut grads[logits.0], &shape_of(*logits), |t| {
                    for (i, &p) in probs.iter().enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        t[i] += gd[0] * (p - target);
                    }
                });
            }
            Op::AdaIn {
                content,
                style,
                eps,
            } => self.adain_backward(*content, *style, *eps, g, grads),
            Op::Cvar { inputs, eta, alpha } => {
                let losses: Vec<f64> = inputs.iter().map(|&v| self.value(v).item()).collect();
                let scale = 1.0 / (alpha * losses.len() as f64);
                let above = losses.iter().filter(|&&l| l > *eta).count();
                let tied = losses.iter().filter(|&&l| l == *eta).count();
                let residual = f64::max(0.0, 1.0 - above as f64 * scale);
                for (&v, &l) in inputs.iter().zip(&losses) {
                    let w = if l > *eta {
                        scale
                    } else if l == *eta {
                        residual / tied as f64
                    } else {
                        continue;
                    };
                    accumulate(&mut grads[v.0], &[], |t| t[0] += gd[0] * w);
                }
            }
        }
    }

    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let (xd, wdat, gd) = (x.data(), w.data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wdat.len()];
        let mut gb = vec![0.0; cout];
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let go = gd[(o * ho + y) * wo + xo];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    for c in 0..cin {
                        for i in 0..k {
                            let row = (c * h + y * stride + i) * wd + xo * stride;
                            let wrow = ((o * cin + c) * k + i) * k;
                            for j in 0..k {
                                gw[wrow + j] += go * xd[row + j];
                                gx[row + j] += go * wdat[wrow + j];
                            }
                        }
                    }
                }
            }
        }
        let add = |slot: &mut Option<Tensor>, shape: &[usize], src: &[f64]| {
            accumulate(slot, shape, |t| {
                t.iter_mut().zip(src).for_each(|(a, b)| *a += b)
            })
        };
        add(&mut grads[input.0], x.shape(), &gx);
        add(&mut grads[weight.0], w.shape(), &gw);
        add(&mut grads[bias.0], &[cout], &gb);
    }

    fn conv_transpose_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        let (ho, wo) = (g.shape()[1], g.shape()[2]);
        let (xd, wdat, gd) = (x.data(), w.data(), g.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wdat.len()];
        let mut gb = vec![0.0; cout];
        for o in 0..cout {
            gb[o] = gd[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        for c in 0..cin {
            for y in 0..h {
                for xi in 0..wd {
                    let xv = xd[(c * h + y) * wd + xi];
                    let mut acc = 0.0;
                    for o in 0..cout {
                        for i in 0..k {
                            let row = (o * ho + y * stride + i) * wo + xi * stride;
                            let wrow = ((c * cout + o) * k + i) * k;
                            for j in 0..k {
                                let go = gd[row + j];
                                acc += go * wdat[wrow + j];
                                gw[wrow + j] += go * xv;
                            }
                        }
                    }
                    gx[(c * h + y) * wd + xi] = acc;
                }
            }
        }
        let add = |slot: &mut Option<Tensor>, shape: &[usize], src: &[f64]| {
            accumulate(slot, shape, |t| {
                t.iter_mut().zip(src).for_each(|(a, b)| *a += b)
            })
        };
        add(&mut grads[input.0], x.shape(), &gx);
        add(&mut grads[weight.0], w.shape(), &gw);
        add(&mut grads[bias.0], &[cout], &gb);
    }

    fn adain_backward(
        &self,
        content: Var,
        style: Var,
        eps: f64,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(content);
        let s = self.value(style);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let nf = n as f64;
        let cm = channel_moments(x).expect("shape checked in forward");
        let sm = channel_moments(s).expect("shape checked in forward");
        let mut gx = vec![0.0; x.len()];
        let mut gs = vec![0.0; s.len()];
        for k in 0..c {
            let range = k * n..(k + 1) * n;
            let (xc, sc, gc) = (
                &x.data()[range.clone()],
                &s.data()[range.clone()],
                &g.data()[range.clone()],
            );
            let (mu_x, sd_x) = cm[k];
            let (mu_s, sd_s) = sm[k];
            let denom = sd_x + eps;
            let g_sum: f64 = gc.iter().sum();
            let gu: f64 = gc.iter().zip(xc).map(|(g, x)| g * (x - mu_x)).sum();
            let g_norm = if denom > 0.0 { gu / denom } else { 0.0 };
            if denom > 0.0 {
                let g_mean = g_sum / nf;
                for i in 0..n {
                    let u = xc[i] - mu_x;
                    let mut d = sd_s / denom * (gc[i] - g_mean);
                    if sd_x > 0.0 {
                        d -= sd_s / (denom * denom) * gu * u / (nf * sd_x);
                    }
                    gx[k * n + i] = d;
                }
            }
            for i in 0..n {
                let mut d = g_sum / nf;
                if sd_s > 0.0 {
                    d += g_norm * (sc[i] - mu_s) / (nf * sd_s);
                }
                gs[k * n + i] = d;
            }
        }
        accumulate(&mut grads[content.0], x.shape(), |t| {
            t.iter_mut().zip(&gx).for_each(|(a, b)| *a += b)
        });
        accumulate(&mut grads[style.0], s.shape(), |t| {
            t.iter_mut().zip(&gs).for_each(|(a, b)| *a += b)
        });
    }

    /// Collects `∂output/∂θ` for every parameter of `store`, zero where a
    /// parameter was never bound.
    pub fn param_gradients(&self, grads: &Gradients, store: &ParameterStore) -> GradientMap {
        let mut out = store.zeros_like();
        for (idx, var) in self.params.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                out.value_at_mut(idx).data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}
