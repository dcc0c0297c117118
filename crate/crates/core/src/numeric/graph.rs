//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves created
//! with `requires_grad = true` receive gradients from [`Graph::backward`];
//! constants (images, masks, thresholds) never do. A graph lives for a single
//! training step on a single thread.

use crate::error::{Error, Result};

use super::array::{Element, NdArray};
use super::kernels::{self, AxisWeights, ConvGeometry, InstanceNormCache, PoolGeometry};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Epsilon guarding the channel L2 normalization against zero vectors.
pub const NORMALIZE_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
    },
    Relu(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: InstanceNormCache<T>,
    },
    Bilinear {
        x: Var,
        dims: (usize, usize, usize),
        ys: AxisWeights,
        xs: AxisWeights,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SliceChannels {
        x: Var,
        start: usize,
        plane: usize,
    },
    ChannelNormalize {
        x: Var,
        inv_norm: Vec<T>,
        clamped: Vec<bool>,
    },
    ChannelNorm(Var),
    Hinge(Var, T),
    ClampMax(Var, T),
}

struct Node<T> {
    value: NdArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` for nodes outside the differentiable path.
pub struct Gradients<T> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Element>(a: &NdArray<T>, b: &NdArray<T>, op: &'static str) -> Result<()> {
    a.ensure_same_shape(b, op)
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: NdArray<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        if self.value(b).len() != geom.c_out {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias length {} != out_channels {}",
                    self.value(b).len(),
                    geom.c_out
                ),
            ));
        }
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let needs = self.ng(&[x, k, b]);
        let value = NdArray::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv { x, k, b, geom, cols }, needs))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeometry::new(self.value(x).shape(), k, stride)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &geom);
        let value = NdArray::new(vec![geom.c, geom.h_out, geom.w_out], out)?;
        let needs = self.ng(&[x]);
        Ok(self.push(value, Op::AvgPool { x, geom }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.ng(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("instance_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "instance_norm",
                format!("affine parameters do not match {c} channels"),
            ));
        }
        let (y, cache) = kernels::instance_norm_forward(
            self.value(x).data(),
            (c, h * w),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = NdArray::new(vec![c, h, w], y)?;
        let needs = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
            needs,
        ))
    }

    pub fn bilinear_resize(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let dims = self.value(x).dims3("bilinear_resize")?;
        if h_out == 0 || w_out == 0 {
            return Err(Error::invalid("bilinear_resize", "output size must be >= 1"));
        }
        let ys = AxisWeights::new(dims.1, h_out);
        let xs = AxisWeights::new(dims.2, w_out);
        let out = kernels::bilinear_forward(self.value(x).data(), dims, &ys, &xs);
        let value = NdArray::new(vec![dims.0, h_out, w_out], out)?;
        let needs = self.ng(&[x]);
        Ok(self.push(value, Op::Bilinear { x, dims, ys, xs }, needs))
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<NdArray<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, op)?;
        NdArray::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        let needs = self.ng(&[x]);
        self.push(value, Op::Scale(x, k), needs)
    }

    /// Element-wise product with a constant array (no gradient into `c`).
    pub fn mul_const(&mut self, x: Var, c: &NdArray<T>) -> Result<Var> {
        same_shape(self.value(x), c, "mul_const")?;
        let value = NdArray::new(
            c.shape().to_vec(),
            self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect(),
        )?;
        let needs = self.ng(&[x]);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), needs))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.ng(&[x]);
        self.push(value, Op::Square(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = NdArray::scalar(T::from_f64_lossy(self.value(x).sum_f64()));
        let needs = self.ng(&[x]);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = NdArray::scalar(T::from_f64_lossy(self.value(x).mean_f64()));
        let needs = self.ng(&[x]);
        self.push(value, Op::Mean(x), needs)
    }

    /// Channels `[start, start + len)` of a `C x H x W` node.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let plane = h * w;
        let data = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let value = NdArray::new(vec![len, h, w], data)?;
        let needs = self.ng(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start, plane }, needs))
    }

    /// L2-normalizes the channel vector at every spatial location:
    /// `y = x / max(|x|, eps)`.
    pub fn channel_normalize(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("channel_normalize")?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut inv_norm = Vec::with_capacity(plane);
        let mut clamped = Vec::with_capacity(plane);
        for p in 0..plane {
            let sq: f64 = (0..c)
                .map(|ch| {
                    let v = src[ch * plane + p].to_f64().unwrap_or(f64::NAN);
                    v * v
                })
                .sum();
            let norm = sq.sqrt();
            clamped.push(norm <= NORMALIZE_EPS);
            inv_norm.push(T::from_f64_lossy(1.0 / norm.max(NORMALIZE_EPS)));
        }
        let data = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v * inv_norm[i % plane])
            .collect();
        let value = NdArray::new(vec![c, h, w], data)?;
        let needs = self.ng(&[x]);
        Ok(self.push(
            value,
            Op::ChannelNormalize {
                x,
                inv_norm,
                clamped,
            },
            needs,
        ))
    }

    /// Euclidean norm over channels at every location, shape `1 x H x W`.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("channel_norm")?;
        let plane = h * w;
        let src = self.value(x).data();
        let data = (0..plane)
            .map(|p| {
                let sq: f64 = (0..c)
                    .map(|ch| {
                        let v = src[ch * plane + p].to_f64().unwrap_or(f64::NAN);
                        v * v
                    })
                    .sum();
                T::from_f64_lossy(sq.sqrt())
            })
            .collect();
        let value = NdArray::new(vec![1, h, w], data)?;
        let needs = self.ng(&[x]);
        Ok(self.push(value, Op::ChannelNorm(x), needs))
    }

    /// `max(margin - x, 0)` element-wise.
    pub fn hinge(&mut self, x: Var, margin: T) -> Var {
        let value = self.value(x).map(|v| (margin - v).max(T::zero()));
        let needs = self.ng(&[x]);
        self.push(value, Op::Hinge(x, margin), needs)
    }

    /// `min(x, c)` element-wise.
    pub fn clamp_max(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v.min(c));
        let needs = self.ng(&[x]);
        self.push(value, Op::ClampMax(x, c), needs)
    }

    /// Smallest distance from any ReLU, hinge or clamp input to its kink; infinite
    /// when the graph has neither. Finite-difference checks use it to reject
    /// configurations where the function is not smooth at the probe scale.
    pub fn kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let (x, at) = match &node.op {
                Op::Relu(x) => (*x, 0.0),
                Op::Hinge(x, m) | Op::ClampMax(x, m) => (*x, m.to_f64().unwrap_or(f64::NAN)),
                _ => continue,
            };
            for v in self.value(x).data() {
                best = best.min((v.to_f64().unwrap_or(f64::NAN) - at).abs());
            }
        }
        best
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, k, b, geom, cols } => {
                    let r = kernels::conv2d_backward(
                        &g,
                        cols,
                        self.value(*k).data(),
                        geom,
                        wants(x),
                    );
                    if let Some(dx) = r.input {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if wants(k) {
                        accumulate(&mut grads[k.0], r.kernel);
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], r.bias);
                    }
                }
                Op::AvgPool { x, geom } => {
                    accumulate(&mut grads[x.0], kernels::avg_pool_backward(&g, geom));
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (c, h, w) = self.value(*x).dims3("instance_norm")?;
                    let r = kernels::instance_norm_backward(
                        &g,
                        cache,
                        (c, h * w),
                        self.value(*gamma).data(),
                    );
                    if wants(x) {
                        accumulate(&mut grads[x.0], r.input);
                    }
                    if wants(gamma) {
                        accumulate(&mut grads[gamma.0], r.gamma);
                    }
                    if wants(beta) {
                        accumulate(&mut grads[beta.0], r.beta);
                    }
                }
                Op::Bilinear { x, dims, ys, xs } => {
                    accumulate(&mut grads[x.0], kernels::bilinear_backward(&g, *dims, ys, xs));
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|&d| -d).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let d = g.iter().zip(self.value(*b).data()).map(|(&d, &v)| d * v).collect();
                        accumulate(&mut grads[a.0], d);
                    }
                    if wants(b) {
                        let d = g.iter().zip(self.value(*a).data()).map(|(&d, &v)| d * v).collect();
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Scale(x, k) => {
                    accumulate(&mut grads[x.0], g.iter().map(|&d| d * *k).collect());
                }
                Op::MulConst(x, c) => {
                    accumulate(&mut grads[x.0], g.iter().zip(c).map(|(&d, &m)| d * m).collect());
                }
                Op::Square(x) => {
                    let two = T::one() + T::one();
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| two * v * d)
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sum(x) => {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let d = g[0] / T::from_f64_lossy(n as f64);
                    accumulate(&mut grads[x.0], vec![d; n]);
                }
                Op::SliceChannels { x, start, plane } => {
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    d[start * plane..start * plane + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[x.0], d);
                }
                Op::ChannelNormalize {
                    x,
                    inv_norm,
                    clamped,
                } => {
                    let y = node.value.data();
                    let plane = inv_norm.len();
                    let c = y.len() / plane;
                    let mut d = vec![T::zero(); y.len()];
                    for p in 0..plane {
                        let inv = inv_norm[p];
                        if clamped[p] {
                            for ch in 0..c {
                                d[ch * plane + p] = g[ch * plane + p] * inv;
                            }
                            continue;
                        }
                        let dot: f64 = (0..c)
                            .map(|ch| {
                                let i = ch * plane + p;
                                y[i].to_f64().unwrap_or(0.0) * g[i].to_f64().unwrap_or(0.0)
                            })
                            .sum();
                        let dot = T::from_f64_lossy(dot);
                        for ch in 0..c {
                            let i = ch * plane + p;
                            d[i] = (g[i] - y[i] * dot) * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::ChannelNorm(x) => {
                    let src = self.value(*x).data();
                    let norms = node.value.data();
                    let plane = norms.len();
                    let d = src
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let n = norms[i % plane];
                            if n > T::zero() {
                                g[i % plane] * v / n
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Hinge(x, m) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| if *m - v > T::zero() { -d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::ClampMax(x, c) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&d, &v)| if v < *c { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => NdArray::new(node.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}
