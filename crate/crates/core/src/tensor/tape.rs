use std::fmt;

use super::conv::{col2im_add, conv_output_extent, im2col, ConvGeom};
use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module. Receives the input
/// values, the forward output and the upstream gradient; returns one gradient
/// (same length as the input) per input, or `None` for inputs it does not
/// differentiate.
pub type CustomBackward = Box<dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Scale(f64),
    Offset(f64),
    MaxScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Upsample2(Var),
    Concat {
        a: Var,
        b: Var,
        batch: usize,
        a_block: usize,
        b_block: usize,
    },
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-use record of a forward computation.
///
/// Values live on the tape until [`Tape::backward`] runs; after that the tape
/// is empty and any further backward call is rejected.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::domain(
            op,
            format!("expected [c,h,w] or [n,c,h,w], got {shape:?}"),
        )),
    }
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        assert!(!self.consumed, "tape values are released by backward");
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape shapes are valid")
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let n = self.node(x);
        let value: Vec<f64> = match kind {
            Unary::Neg => n.value.iter().map(|v| -v).collect(),
            Unary::Exp => n.value.iter().map(|v| v.exp()).collect(),
            Unary::Ln => {
                if let Some(bad) = n.value.iter().find(|v| **v <= 0.0 || v.is_nan()) {
                    return Err(Error::domain("ln", format!("non-positive input {bad}")));
                }
                n.value.iter().map(|v| v.ln()).collect()
            }
            Unary::Tanh => n.value.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => n.value.iter().map(|v| sigmoid(*v)).collect(),
            Unary::Relu => n.value.iter().map(|v| v.max(0.0)).collect(),
            Unary::Square => n.value.iter().map(|v| v * v).collect(),
            Unary::Scale(c) => n.value.iter().map(|v| v * c).collect(),
            Unary::Offset(c) => n.value.iter().map(|v| v + c).collect(),
            Unary::MaxScalar(c) => n.value.iter().map(|v| v.max(c)).collect(),
            Unary::Clamp(lo, hi) => n.value.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let shape = n.shape.clone();
        let needs = n.needs_grad;
        Ok(self.push(shape, value, Op::Unary(kind, x), needs))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    /// Natural log; rejects non-positive entries.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Offset(c), x)
    }
    /// `max(x, c)`; the subgradient at `x == c` is 0.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::MaxScalar(c), x)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::domain("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary(Unary::Clamp(lo, hi), x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op: binary_name(kind),
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        };
        let n = la.max(lb);
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let value: Vec<f64> = (0..n).map(|i| f(na.value[i % la], nb.value[i % lb])).collect();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(shape, value, Op::Binary(kind, a, b), needs))
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- reductions and linear algebra -------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let needs = n.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::SumAll(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let needs = n.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::MeanAll(x), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (m, k, k2, n) = match (na.shape.as_slice(), nb.shape.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: na.shape.clone(),
                    right: nb.shape.clone(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &na.value, false, &nb.value, false, 0.0, &mut out);
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), needs))
    }

    /// Adds `b` (length = last extent of `x`) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(b));
        let m = *nx.shape.last().unwrap();
        if nb.value.len() != m {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: nx.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let value: Vec<f64> = nx.value.iter().enumerate().map(|(i, v)| v + nb.value[i % m]).collect();
        let shape = nx.shape.clone();
        let needs = nx.needs_grad || nb.needs_grad;
        Ok(self.push(shape, value, Op::AddRowBias(x, b), needs))
    }

    /// Cross-correlation of `[c,h,w]` or `[n,c,h,w]` input with
    /// `[o,c,kh,kw]` kernels (kh, kw in {1, 3}) plus optional `[o]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let nx = self.node(x);
        let nw = self.node(w);
        let (batch, c, h, wd, batched) = nchw("conv2d", &nx.shape)?;
        let (o, kc, kh, kw) = match *nw.shape.as_slice() {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: nx.shape.clone(),
                    right: nw.shape.clone(),
                })
            }
        };
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: nx.shape.clone(),
                right: nw.shape.clone(),
            });
        }
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::domain(
                "conv2d",
                format!("kernel {kh}x{kw} not supported (1 or 3)"),
            ));
        }
        if let Some(b) = b {
            let nb = self.node(b);
            if nb.value.len() != o {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: nw.shape.clone(),
                    right: nb.shape.clone(),
                });
            }
        }
        let oh = conv_output_extent(h, kh, stride, pad)?;
        let ow = conv_output_extent(wd, kw, stride, pad)?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let (patch, np) = (geom.patch(), geom.out_pixels());
        let in_block = c * h * wd;
        let mut out = vec![0.0; batch * o * np];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; patch * np]
        };
        for n in 0..batch {
            let xi = &nx.value[n * in_block..(n + 1) * in_block];
            let colref: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(&geom, xi, &mut cols);
                &cols
            };
            let dst = &mut out[n * o * np..(n + 1) * o * np];
            gemm(o, patch, np, 1.0, &nw.value, false, colref, false, 0.0, dst);
            if let Some(b) = b {
                let bias = &self.nodes[b.0].value;
                for (oc, chunk) in dst.chunks_mut(np).enumerate() {
                    let bv = bias[oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let needs = nx.needs_grad || nw.needs_grad || b.is_some_and(|b| self.needs(b));
        let shape = image_shape(batched, batch, o, oh, ow);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geom, batch }, needs))
    }

    /// 2x2 / stride-2 max pooling; extents must be even. Ties go to the
    /// first element in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let (n, c, h, w, batched) = nchw("max_pool2", &nx.shape)?;
        check_even("max_pool2", h, w)?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if nx.value[idx] > nx.value[best] {
                            best = idx;
                        }
                    }
                    out.push(nx.value[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = nx.needs_grad;
        Ok(self.push(
            image_shape(batched, n, c, oh, ow),
            out,
            Op::MaxPool2 { x, argmax },
            needs,
        ))
    }

    /// 2x2 / stride-2 average pooling; extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let (n, c, h, w, batched) = nchw("avg_pool2", &nx.shape)?;
        check_even("avg_pool2", h, w)?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let p = &nx.value[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let s = p[2 * i * w + 2 * j]
                        + p[2 * i * w + 2 * j + 1]
                        + p[(2 * i + 1) * w + 2 * j]
                        + p[(2 * i + 1) * w + 2 * j + 1];
                    out.push(0.25 * s);
                }
            }
        }
        let needs = nx.needs_grad;
        Ok(self.push(image_shape(batched, n, c, oh, ow), out, Op::AvgPool2(x), needs))
    }

    /// Mean over spatial extent: `[n,c,h,w] -> [n,c]`, `[c,h,w] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let (n, c, h, w, batched) = nchw("global_avg_pool", &nx.shape)?;
        let hw = h * w;
        let out: Vec<f64> = nx.value.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let shape = if batched { vec![n, c] } else { vec![c] };
        let needs = nx.needs_grad;
        Ok(self.push(shape, out, Op::GlobalAvgPool(x), needs))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let (n, c, h, w, batched) = nchw("upsample2", &nx.shape)?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &nx.value[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let needs = nx.needs_grad;
        Ok(self.push(image_shape(batched, n, c, oh, ow), out, Op::Upsample2(x), needs))
    }

    /// Channel concatenation of two images with equal batch and spatial extent.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (n1, c1, h1, w1, bat1) = nchw("concat_channels", &na.shape)?;
        let (n2, c2, h2, w2, bat2) = nchw("concat_channels", &nb.shape)?;
        if (n1, h1, w1, bat1) != (n2, h2, w2, bat2) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let (a_block, b_block) = (c1 * h1 * w1, c2 * h1 * w1);
        let mut out = Vec::with_capacity(n1 * (a_block + b_block));
        for i in 0..n1 {
            out.extend_from_slice(&na.value[i * a_block..(i + 1) * a_block]);
            out.extend_from_slice(&nb.value[i * b_block..(i + 1) * b_block]);
        }
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(
            image_shape(bat1, n1, c1 + c2, h1, w1),
            out,
            Op::Concat {
                a,
                b,
                batch: n1,
                a_block,
                b_block,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let nx = self.node(x);
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != nx.value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: nx.shape.clone(),
                right: shape,
            });
        }
        let value = nx.value.clone();
        let needs = nx.needs_grad;
        Ok(self.push(shape, value, Op::Reshape(x), needs))
    }

    /// Records an op whose forward value is computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: CustomBackward,
    ) -> Result<Var> {
        if shape.is_empty() || shape.iter().product::<usize>() != value.len() {
            return Err(Error::invalid(format!(
                "custom op: shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        let needs = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            needs,
        ))
    }

    /// Smallest distance of any recorded non-smooth op from its kink:
    /// relu/max inputs from the threshold, clamp inputs from the bounds, and
    /// the gap between the two largest entries of each max-pool window.
    /// Finite differences with a step well below this margin are valid.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary(kind, x) => {
                    let xs = &self.nodes[x.0].value;
                    let m = match *kind {
                        Unary::Relu => xs.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min),
                        Unary::MaxScalar(c) => xs.iter().map(|v| (v - c).abs()).fold(f64::INFINITY, f64::min),
                        Unary::Clamp(lo, hi) => xs
                            .iter()
                            .map(|v| (v - lo).abs().min((v - hi).abs()))
                            .fold(f64::INFINITY, f64::min),
                        _ => f64::INFINITY,
                    };
                    margin = margin.min(m);
                }
                Op::MaxPool2 { x, .. } => {
                    let xn = &self.nodes[x.0];
                    let (_, _, h, w, _) = nchw("", &xn.shape).unwrap();
                    for plane in xn.value.chunks(h * w) {
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut win = [
                                    plane[2 * i * w + 2 * j],
                                    plane[2 * i * w + 2 * j + 1],
                                    plane[(2 * i + 1) * w + 2 * j],
                                    plane[(2 * i + 1) * w + 2 * j + 1],
                                ];
                                win.sort_by(|a, b| b.total_cmp(a));
                                margin = margin.min(win[0] - win[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss. Releases all recorded values; the
    /// tape cannot be replayed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", ln.value[0])));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            let keep = matches!(node.op, Op::Leaf) && node.needs_grad;
            if !keep {
                *g = None;
            } else if let Some(g) = g {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("leaf gradient entry {bad}")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::domain(op, format!("extent {h}x{w} must be even")));
    }
    Ok(())
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// need a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            let xs = &nodes[x.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..dx.len() {
                    let (xi, yi, gi) = (xs[i], y[i], g[i]);
                    dx[i] += match *kind {
                        Unary::Neg => -gi,
                        Unary::Exp => gi * yi,
                        Unary::Ln => gi / xi,
                        Unary::Tanh => gi * (1.0 - yi * yi),
                        Unary::Sigmoid => gi * yi * (1.0 - yi),
                        Unary::Relu => {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xi * gi,
                        Unary::Scale(c) => c * gi,
                        Unary::Offset(_) => gi,
                        Unary::MaxScalar(c) => {
                            if xi > c {
                                gi
                            } else {
                                0.0
                            }
                        }
                        Unary::Clamp(lo, hi) => {
                            if (lo..=hi).contains(&xi) {
                                gi
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (la, lb) = (av.len(), bv.len());
            if let Some(da) = slot(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => *gi,
                        Binary::Mul => gi * bv[i % lb],
                        Binary::Div => gi / bv[i % lb],
                    };
                    da[i % la] += d;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => *gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[i % la],
                        Binary::Div => {
                            let bi = bv[i % lb];
                            -gi * av[i % la] / (bi * bi)
                        }
                    };
                    db[i % lb] += d;
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::MeanAll(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Matmul(a, b) => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dC * B^T
                gemm(m, n, k, 1.0, g, false, &nb.value, true, 1.0, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = A^T * dC
                gemm(k, m, n, 1.0, &na.value, true, g, false, 1.0, db);
            }
        }
        Op::AddRowBias(x, b) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let m = db.len();
                for (i, gi) in g.iter().enumerate() {
                    db[i % m] += gi;
                }
            }
        }
        Op::Conv2d { x, w, b, geom, batch } => {
            let (patch, np) = (geom.patch(), geom.out_pixels());
            let o = nodes[w.0].shape[0];
            let in_block = geom.c * geom.h * geom.w;
            let xs = &nodes[x.0].value;
            let ws = &nodes[w.0].value;
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for n in 0..*batch {
                        for (oc, chunk) in g[n * o * np..(n + 1) * o * np].chunks(np).enumerate() {
                            db[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            if nodes[w.0].needs_grad {
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; patch * np]
                };
                let dw = slot(nodes, grads, *w).unwrap();
                for n in 0..*batch {
                    let xi = &xs[n * in_block..(n + 1) * in_block];
                    let colref: &[f64] = if geom.is_pointwise() {
                        xi
                    } else {
                        im2col(geom, xi, &mut cols);
                        &cols
                    };
                    let gn = &g[n * o * np..(n + 1) * o * np];
                    gemm(o, np, patch, 1.0, gn, false, colref, true, 1.0, dw);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dcols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; patch * np]
                };
                for n in 0..*batch {
                    let gn = &g[n * o * np..(n + 1) * o * np];
                    let dxi = &mut dx[n * in_block..(n + 1) * in_block];
                    if geom.is_pointwise() {
                        gemm(patch, o, np, 1.0, ws, true, gn, false, 1.0, dxi);
                    } else {
                        gemm(patch, o, np, 1.0, ws, true, gn, false, 0.0, &mut dcols);
                        col2im_add(geom, &dcols, dxi);
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
            }
        }
        Op::AvgPool2(x) => {
            let xs = &nodes[x.0].shape;
            let (_, _, h, w, _) = nchw("", xs).unwrap();
            let (oh, ow) = (h / 2, w / 2);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (plane, gp) in g.chunks(oh * ow).enumerate() {
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let q = 0.25 * gp[i * ow + j];
                            d[2 * i * w + 2 * j] += q;
                            d[2 * i * w + 2 * j + 1] += q;
                            d[(2 * i + 1) * w + 2 * j] += q;
                            d[(2 * i + 1) * w + 2 * j + 1] += q;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let (_, _, h, w, _) = nchw("", &nodes[x.0].shape).unwrap();
            let hw = h * w;
            if let Some(dx) = slot(nodes, grads, *x) {
                for (chunk, gi) in dx.chunks_mut(hw).zip(g) {
                    let s = gi / hw as f64;
                    chunk.iter_mut().for_each(|v| *v += s);
                }
            }
        }
        Op::Upsample2(x) => {
            let (_, _, h, w, _) = nchw("", &nodes[x.0].shape).unwrap();
            let (oh, ow) = (2 * h, 2 * w);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (plane, gp) in g.chunks(oh * ow).enumerate() {
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            d[(i / 2) * w + j / 2] += gp[i * ow + j];
                        }
                    }
                }
            }
        }
        Op::Concat {
            a,
            b,
            batch,
            a_block,
            b_block,
        } => {
            let stride = a_block + b_block;
            if let Some(da) = slot(nodes, grads, *a) {
                for n in 0..*batch {
                    let src = &g[n * stride..n * stride + a_block];
                    da[n * a_block..(n + 1) * a_block]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for n in 0..*batch {
                    let src = &g[n * stride + a_block..(n + 1) * stride];
                    db[n * b_block..(n + 1) * b_block]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Custom { inputs, backward } => {
            let vals: Vec<&[f64]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
            let result = backward(&vals, y, g);
            for (v, dg) in inputs.iter().zip(result) {
                let Some(dg) = dg else { continue };
                if let Some(dx) = slot(nodes, grads, *v) {
                    assert_eq!(dg.len(), dx.len(), "custom backward gradient length");
                    dx.iter_mut().zip(&dg).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}
