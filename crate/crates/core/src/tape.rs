//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. [`Tape::backward`] walks the records in exact reverse order and
//! accumulates gradients additively, so a value consumed by several
//! operations receives the sum of all paths. A tape supports a single
//! backward pass; build a fresh one for the next step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    MaxPool2d,
    UpsampleNearest2x,
    UpsampleBilinear2x,
    ConcatChannels,
    Prelu,
    SoftmaxRows,
    Matmul,
    Add,
    Mul,
    Scale,
    Reshape,
    Permute,
    Sum,
    L1Loss,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::UpsampleNearest2x,
        OpKind::UpsampleBilinear2x,
        OpKind::ConcatChannels,
        OpKind::Prelu,
        OpKind::SoftmaxRows,
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Sum,
        OpKind::L1Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::UpsampleNearest2x => "upsample_nearest2x",
            OpKind::UpsampleBilinear2x => "upsample_bilinear2x",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Prelu => "prelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Sum => "sum",
            OpKind::L1Loss => "l1_loss",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown operation `{s}`")))
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest2x {
        input: Var,
    },
    UpsampleBilinear2x {
        input: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    SoftmaxRows {
        input: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        perm: [usize; 4],
    },
    Sum {
        input: Var,
    },
    L1Loss {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Named parameters registered on a tape.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not registered on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            vars: iter.into_iter().collect(),
        }
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    census: BTreeMap<OpKind, usize>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            census: BTreeMap::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` (input gradients scaled by 1.5).
    /// Used as a negative control for gradient checking.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Hash of every piecewise choice made by the forward pass: maxpool
    /// winners and the sign test of each PReLU input. Two evaluations with the
    /// same signature lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::Prelu { input, .. } => {
                    for v in self.value(*input).data() {
                        (*v < T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times each operation kind was recorded.
    pub fn census(&self) -> &BTreeMap<OpKind, usize> {
        &self.census
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.census.get(&kind).copied().unwrap_or(0)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn register_params(&mut self, params: &ParamStore<T>) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_owned(), self.variable(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers parameters as constants, for passes that need no gradients.
    pub fn register_frozen(&mut self, params: &ParamStore<T>) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_owned(), self.constant(t.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every registered parameter. A parameter the loss does not
    /// depend on gets an all-zero gradient.
    pub fn param_grads(&self, params: &ParamVars) -> Result<ParamStore<T>> {
        if !self.backward_done {
            return Err(Error::contract("parameter gradients requested before backward"));
        }
        Ok(params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.to_owned(), g)
            })
            .collect())
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, kind: OpKind, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.backward_done {
            return Err(Error::contract("tape is closed after backward; start a new tape"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        *self.census.entry(kind).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [_, cin, h, w] = self.shape(input).0;
        let [cout, wcin, kh, kw] = self.shape(weight).0;
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {kh} exceeds padded extent {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != cout {
                return Err(Error::dim(format!("conv2d bias has {} entries, expected {cout}", bs.numel())));
            }
        }
        let geometry = ConvGeometry {
            cin,
            h,
            w,
            k: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &geometry);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            OpKind::Conv2d,
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
        )
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(Error::dim(format!("maxpool2d needs even extents, got {s}")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input));
        self.push(OpKind::MaxPool2d, out, &[input], Op::MaxPool2d { input, argmax })
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2x_forward(self.value(input));
        self.push(OpKind::UpsampleNearest2x, out, &[input], Op::UpsampleNearest2x { input })
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.h() == 0 || s.w() == 0 {
            return Err(Error::dim(format!("upsample_bilinear2x needs non-empty extents, got {s}")));
        }
        let out = kernels::upsample_bilinear2x_forward(self.value(input));
        self.push(OpKind::UpsampleBilinear2x, out, &[input], Op::UpsampleBilinear2x { input })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::dim("concat_channels needs at least one input"))?;
        for &v in &inputs[1..] {
            let s = self.shape(v);
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::dim(format!("concat_channels cannot join {first} with {s}")));
            }
        }
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels_forward(&parts);
        self.push(
            OpKind::ConcatChannels,
            out,
            inputs,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let c = self.shape(input).c();
        let n_slope = self.shape(slope).numel();
        if n_slope != c {
            return Err(Error::dim(format!("prelu slope has {n_slope} entries for {c} channels")));
        }
        let out = kernels::prelu_forward(self.value(input), self.value(slope));
        self.push(OpKind::Prelu, out, &[input, slope], Op::Prelu { input, slope })
    }

    /// Softmax over the last axis; every other axis indexes a row.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        if self.shape(input).w() == 0 {
            return Err(Error::dim("softmax_rows needs at least one column"));
        }
        let out = kernels::softmax_rows_forward(self.value(input));
        self.push(OpKind::SoftmaxRows, out, &[input], Op::SoftmaxRows { input })
    }

    /// Batched matrix product over the trailing two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.c() != sb.c() {
            return Err(Error::dim(format!("matmul batch extents differ: {sa} vs {sb}")));
        }
        if sa.w() != sb.h() {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {} vs {}",
                sa.w(),
                sb.h()
            )));
        }
        let out = kernels::matmul_forward(self.value(a), self.value(b));
        self.push(OpKind::Matmul, out, &[a, b], Op::Matmul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "add", |x, y| x + y)?;
        self.push(OpKind::Add, out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values(a, b, "mul", |x, y| x * y)?;
        self.push(OpKind::Mul, out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(input).map(|v| v * factor);
        self.push(OpKind::Scale, out, &[input], Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        self.push(OpKind::Reshape, out, &[input], Op::Reshape { input })
    }

    /// `out` axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, input: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return Err(Error::dim(format!("{perm:?} is not a permutation of four axes")));
            }
            seen[p] = true;
        }
        let out = kernels::permute(self.value(input), perm);
        self.push(OpKind::Permute, out, &[input], Op::Permute { input, perm })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(OpKind::Sum, out, &[input], Op::Sum { input })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(pred);
        if ps != target.shape() {
            return Err(Error::dim(format!("l1_loss shapes differ: {ps} vs {}", target.shape())));
        }
        let p = self.value(pred);
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .sum();
        let out = Tensor::scalar(T::from_f64(total / ps.numel() as f64));
        self.push(
            OpKind::L1Loss,
            out,
            &[pred],
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
        )
    }

    fn zip_values(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("{what} shapes differ: {} vs {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    /// Seeds `d loss / d loss = 1` and propagates gradients to every
    /// recorded value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got {shape}")));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(i, &g);
            self.nodes[i].grad = Some(g);
            let corrupt = self.fault.is_some() && self.fault == self.kind_of(i);
            for (v, mut t) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                if corrupt {
                    t = t.map(|x| x * T::from_f64(1.5));
                }
                match &mut node.grad {
                    Some(acc) => acc.accumulate(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn kind_of(&self, i: usize) -> Option<OpKind> {
        Some(match &self.nodes[i].op {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::UpsampleNearest2x { .. } => OpKind::UpsampleNearest2x,
            Op::UpsampleBilinear2x { .. } => OpKind::UpsampleBilinear2x,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Sum { .. } => OpKind::Sum,
            Op::L1Loss { .. } => OpKind::L1Loss,
        })
    }

    fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, geometry);
                let mut out = vec![(*input, grads.input), (*weight, grads.weight)];
                if let Some(b) = bias {
                    let bias_grad = grads.bias.reshaped(self.shape(*b)).expect("bias extents");
                    out.push((*b, bias_grad));
                }
                out
            }
            Op::MaxPool2d { input, argmax } => {
                vec![(*input, kernels::maxpool2x2_backward(self.shape(*input), argmax, g))]
            }
            Op::UpsampleNearest2x { input } => {
                vec![(*input, kernels::upsample_nearest2x_backward(self.shape(*input), g))]
            }
            Op::UpsampleBilinear2x { input } => {
                vec![(*input, kernels::upsample_bilinear2x_backward(self.shape(*input), g))]
            }
            Op::ConcatChannels { inputs } => {
                let shapes: Vec<Shape> = inputs.iter().map(|&v| self.shape(v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(kernels::concat_channels_backward(&shapes, g))
                    .collect()
            }
            Op::Prelu { input, slope } => {
                let (dx, da) = kernels::prelu_backward(self.value(*input), self.value(*slope), g);
                vec![(*input, dx), (*slope, da)]
            }
            Op::SoftmaxRows { input } => {
                vec![(*input, kernels::softmax_rows_backward(&node.value, g))]
            }
            Op::Matmul { a, b } => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = elementwise(g, tb, |x, y| x * y);
                let db = elementwise(g, ta, |x, y| x * y);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => vec![(*input, g.map(|x| x * *factor))],
            Op::Reshape { input } => {
                vec![(*input, g.clone().reshaped(self.shape(*input)).expect("reshape extents"))]
            }
            Op::Permute { input, perm } => {
                vec![(*input, kernels::permute(g, kernels::inverse_permutation(*perm)))]
            }
            Op::Sum { input } => {
                vec![(*input, Tensor::full(self.shape(*input), g.data()[0]))]
            }
            Op::L1Loss { pred, target } => {
                let p = self.value(*pred);
                let scale = g.data()[0] / T::from_f64(p.numel() as f64);
                let d = elementwise(p, target, |a, b| {
                    let diff = a - b;
                    if diff > T::zero() {
                        scale
                    } else if diff < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                vec![(*pred, d)]
            }
        }
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise extents")
}
