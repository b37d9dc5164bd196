//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every value computed through it. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the backward pass. [`Var`] is a cheap handle into the tape; the
//! value, gradient and `requires_grad` flag live in the graph.

pub(crate) mod kernels;

use crate::error::{contract, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, UpConvGeom};

/// Handle to a differentiable tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    Upsample2x(Var),
    UpsampleConv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    L1Mean(Var),
    ChannelMeanAbs {
        input: Var,
        start: usize,
        len: usize,
    },
    MaskChannels {
        input: Var,
        keep: Vec<(usize, usize)>,
    },
    PairCrossEntropy {
        first: Var,
        second: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// 3x3 cross-correlation with one pixel of zero padding.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, 3, 3]`, `bias` is
    /// `[Cout]`; the result is `[N, Cout, H / stride, W / stride]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias, stride)?;
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &geom,
        );
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    fn conv_geom(&self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<ConvGeom> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 4 {
            return Err(contract(format!("conv2d input must be 4-D, got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(contract(format!(
                "conv2d weight must be [Cout, Cin, 3, 3], got {ws:?}"
            )));
        }
        if ws[1] != xs[1] {
            return Err(contract(format!(
                "conv2d input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(contract(format!(
                "conv2d bias must be [{}], got {bs:?}",
                ws[0]
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(contract(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if xs[2] % stride != 0 || xs[3] % stride != 0 {
            return Err(contract(format!(
                "conv2d spatial size {}x{} not divisible by stride {stride}",
                xs[2], xs[3]
            )));
        }
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            stride,
        })
    }

    /// Nearest-neighbour 2x upsampling of a `[N, C, H, W]` tensor.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(contract(format!(
                "upsample2x input must be 4-D, got {:?}",
                x.shape()
            )));
        }
        let out = kernels::upsample2x_forward(x);
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::Upsample2x(input)))
    }

    /// `conv2d(upsample2x(input), weight, bias, 1)` without materialising
    /// the upsampled tensor.
    pub fn upsample_conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let geom = self.upconv_geom(input, weight, bias)?;
        let out = kernels::upconv_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            &geom,
        );
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, rg, Op::UpsampleConv2d { input, weight, bias }))
    }

    fn upconv_geom(&self, input: Var, weight: Var, bias: Var) -> Result<UpConvGeom> {
        let g = self.conv_geom(input, weight, bias, 1)?;
        Ok(UpConvGeom {
            n: g.n,
            cin: g.cin,
            h: g.h,
            w: g.w,
            cout: g.cout,
        })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.needs(input);
        self.push(out, rg, Op::Relu(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.value(input).map(f32::tanh);
        let rg = self.needs(input);
        self.push(out, rg, Op::Tanh(input))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let out = self.value(input).map(f32::abs);
        let rg = self.needs(input);
        self.push(out, rg, Op::Abs(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.needs(input);
        self.push(out, rg, Op::Scale(input, factor))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f32 = self.value(input).data().iter().sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(s), rg, Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: f32 = x.data().iter().sum::<f32>() / x.numel() as f32;
        let rg = self.needs(input);
        self.push(Tensor::scalar(s), rg, Op::Mean(input))
    }

    /// Mean absolute value over all elements, as a `[1]` tensor.
    pub fn l1_mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = (x.data().iter().map(|&v| v.abs() as f64).sum::<f64>() / x.numel() as f64) as f32;
        let rg = self.needs(input);
        self.push(Tensor::scalar(s), rg, Op::L1Mean(input))
    }

    /// Per-sample mean absolute value over channels `start..start + len` of a
    /// `[N, C, ...]` tensor. Returns `[N]`.
    pub fn channel_mean_abs(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(contract(format!(
                "channel range {start}..{} invalid for shape {s:?}",
                start + len
            )));
        }
        let n = s[0];
        let per_channel: usize = s[2..].iter().product();
        let per_sample = s[1] * per_channel;
        let count = (len * per_channel) as f32;
        let out: Vec<f32> = (0..n)
            .map(|i| {
                let from = i * per_sample + start * per_channel;
                let block = &x.data()[from..from + len * per_channel];
                block.iter().map(|v| v.abs()).sum::<f32>() / count
            })
            .collect();
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::from_vec(out),
            rg,
            Op::ChannelMeanAbs { input, start, len },
        ))
    }

    /// Zeroes every channel of sample `i` outside `keep[i] = (start, len)`.
    /// Gradients into the zeroed channels are exactly zero.
    pub fn mask_channels(&mut self, input: Var, keep: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 || keep.len() != s[0] {
            return Err(contract(format!(
                "mask_channels needs one range per sample, got {} for shape {s:?}",
                keep.len()
            )));
        }
        if let Some(&(a, l)) = keep.iter().find(|&&(a, l)| a + l > s[1]) {
            return Err(contract(format!(
                "channel range {a}..{} exceeds {} channels",
                a + l,
                s[1]
            )));
        }
        let mut out = Tensor::zeros(s);
        let per_channel: usize = s[2..].iter().product();
        let per_sample = s[1] * per_channel;
        for (i, &(start, len)) in keep.iter().enumerate() {
            let from = i * per_sample + start * per_channel;
            let to = from + len * per_channel;
            out.data_mut()[from..to].copy_from_slice(&x.data()[from..to]);
        }
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::MaskChannels { input, keep }))
    }

    /// Per-sample softmax cross-entropy of the two-way logits
    /// `(first[i], second[i])` against class `targets[i]` (0 or 1). Returns `[N]`.
    pub fn pair_cross_entropy(
        &mut self,
        first: Var,
        second: Var,
        targets: Vec<usize>,
    ) -> Result<Var> {
        let a = self.value(first);
        let b = self.value(second);
        same_shape("pair_cross_entropy", a, b)?;
        if a.shape().len() != 1 || targets.len() != a.numel() || targets.iter().any(|&t| t > 1) {
            return Err(contract(
                "pair_cross_entropy needs [N] logits and N targets in {0, 1}",
            ));
        }
        let out: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .zip(&targets)
            .map(|((&x, &y), &t)| {
                let m = x.max(y);
                let lse = m + ((x - m).exp() + (y - m).exp()).ln();
                lse - if t == 0 { x } else { y }
            })
            .collect();
        let rg = self.needs(first) || self.needs(second);
        Ok(self.push(
            Tensor::from_vec(out),
            rg,
            Op::PairCrossEntropy {
                first,
                second,
                targets,
            },
        ))
    }

    /// Backpropagates from a one-element `loss`, accumulating into the
    /// gradients of every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, shape is {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, ig) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let geom = self
                    .conv_geom(input, weight, bias, stride)
                    .expect("validated at construction");
                let need = [self.needs(input), self.needs(weight), self.needs(bias)];
                let grads =
                    kernels::conv2d_backward(self.value(input), self.value(weight), g, &geom, need);
                [
                    (input, grads.input),
                    (weight, grads.weight),
                    (bias, grads.bias),
                ]
                .into_iter()
                .filter_map(|(v, t)| t.map(|t| (v, t)))
                .collect()
            }
            &Op::UpsampleConv2d {
                input,
                weight,
                bias,
            } => {
                let geom = self
                    .upconv_geom(input, weight, bias)
                    .expect("validated at construction");
                let need = [self.needs(input), self.needs(weight), self.needs(bias)];
                let grads =
                    kernels::upconv_backward(self.value(input), self.value(weight), g, &geom, need);
                [
                    (input, grads.input),
                    (weight, grads.weight),
                    (bias, grads.bias),
                ]
                .into_iter()
                .filter_map(|(v, t)| t.map(|t| (v, t)))
                .collect()
            }
            &Op::Upsample2x(input) => vec![(
                input,
                kernels::upsample2x_backward(g, self.value(input).shape()),
            )],
            &Op::Relu(input) => vec![(
                input,
                zip_map(out, g, |y, gy| if y > 0.0 { gy } else { 0.0 }),
            )],
            &Op::Tanh(input) => vec![(input, zip_map(out, g, |y, gy| gy * (1.0 - y * y)))],
            &Op::Abs(input) => vec![(
                input,
                zip_map(self.value(input), g, |x, gy| gy * sign(x)),
            )],
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            &Op::Mul(a, b) => vec![
                (a, zip_map(self.value(b), g, |y, gy| y * gy)),
                (b, zip_map(self.value(a), g, |x, gy| x * gy)),
            ],
            &Op::Scale(input, f) => vec![(input, g.map(|v| v * f))],
            &Op::Sum(input) => {
                let gv = g.data()[0];
                vec![(input, Tensor::full(self.value(input).shape(), gv))]
            }
            &Op::Mean(input) => {
                let x = self.value(input);
                let gv = g.data()[0] / x.numel() as f32;
                vec![(input, Tensor::full(x.shape(), gv))]
            }
            &Op::L1Mean(input) => {
                let x = self.value(input);
                let gv = g.data()[0] / x.numel() as f32;
                vec![(input, x.map(|v| gv * sign(v)))]
            }
            &Op::ChannelMeanAbs { input, start, len } => {
                let x = self.value(input);
                let s = x.shape();
                let per_channel: usize = s[2..].iter().product();
                let per_sample = s[1] * per_channel;
                let count = (len * per_channel) as f32;
                let mut dx = Tensor::zeros(s);
                for (n, &gn) in g.data().iter().enumerate() {
                    let from = n * per_sample + start * per_channel;
                    let to = from + len * per_channel;
                    let scale = gn / count;
                    for (d, &v) in dx.data_mut()[from..to].iter_mut().zip(&x.data()[from..to]) {
                        *d = scale * sign(v);
                    }
                }
                vec![(input, dx)]
            }
            Op::MaskChannels { input, keep } => {
                let s = out.shape();
                let per_channel: usize = s[2..].iter().product();
                let per_sample = s[1] * per_channel;
                let mut dx = Tensor::zeros(s);
                for (n, &(start, len)) in keep.iter().enumerate() {
                    let from = n * per_sample + start * per_channel;
                    let to = from + len * per_channel;
                    dx.data_mut()[from..to].copy_from_slice(&g.data()[from..to]);
                }
                vec![(*input, dx)]
            }
            Op::PairCrossEntropy {
                first,
                second,
                targets,
            } => {
                let a = self.value(*first).data();
                let b = self.value(*second).data();
                let mut da = Vec::with_capacity(a.len());
                let mut db = Vec::with_capacity(a.len());
                for (((&x, &y), &t), &gn) in a.iter().zip(b).zip(targets).zip(g.data()) {
                    let m = x.max(y);
                    let ex = (x - m).exp();
                    let ey = (y - m).exp();
                    let (px, py) = (ex / (ex + ey), ey / (ex + ey));
                    let (tx, ty) = if t == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                    da.push(gn * (px - tx));
                    db.push(gn * (py - ty));
                }
                vec![
                    (*first, Tensor::from_vec(da)),
                    (*second, Tensor::from_vec(db)),
                ]
            }
        }
    }
}
