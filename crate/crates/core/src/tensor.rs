//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that take [`Var`] handles and append a node;
//! nodes are therefore topologically ordered by construction. A single
//! call to [`Tape::backward`] walks the nodes in reverse and leaves the
//! adjoint of every gradient-requiring leaf on the tape.

use crate::error::{shape_err, Error, Result};
use crate::par;

/// Marks an output element of a routing op that is not copied from the
/// input (padding, masked columns).
const NO_SOURCE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches `data` and that every
    /// value is finite. A rank-0 shape holds exactly one value.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} of tensor with shape {shape:?}"
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for a single-element tensor of rank 0 or 1.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Width padding of a convolution. `Same` pads `kernel_w / 2` columns on
/// each side (odd kernels only); `Valid` pads nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    Same,
    Valid,
}

#[derive(Debug)]
struct ConvCtx {
    x: Var,
    w: Var,
    b: Var,
    geom: ConvGeom,
    valid_in: Vec<usize>,
    valid_out: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: f64,
    },
    DivScalar {
        x: Var,
        divisor: f64,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin {
        x: Var,
        min: f64,
    },
    Route {
        x: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Softmax(Var),
    PairwiseL2 {
        x: Var,
        y: Var,
    },
    Conv(Box<ConvCtx>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::PairwiseL2 { x, y } => vec![*x, *y],
            Op::Scale { x, .. }
            | Op::DivScalar { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Route { x, .. }
            | Op::SumAxis { x, .. } => vec![*x],
            Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv(c) => vec![c.x, c.w, c.b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint of a gradient-requiring leaf after [`Tape::backward`].
    /// `None` for leaves the output does not depend on and for interior
    /// nodes, whose adjoints are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    fn binary_shape(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape == vb.shape || vb.is_scalar() {
            Ok(va.shape.clone())
        } else {
            Err(shape_err!(
                "{name}: incompatible shapes {:?} and {:?}",
                va.shape,
                vb.shape
            ))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = self.binary_shape(a, b, name)?;
        let (xa, xb) = (self.data(a), self.data(b));
        let data = if xb.len() == xa.len() {
            xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let s = xb[0];
            xa.iter().map(|&p| f(p, s)).collect()
        };
        Ok(Tensor::from_parts(shape, data))
    }

    /// `a + b`; `b` may be a scalar tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape.clone(), v.data.iter().map(|p| p * factor).collect());
        self.push(t, Op::Scale { x, factor })
    }

    /// Division by a non-zero constant.
    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 || !divisor.is_finite() {
            return Err(Error::Domain(format!("division by {divisor}")));
        }
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape.clone(),
            v.data.iter().map(|p| p / divisor).collect(),
        );
        Ok(self.push(t, Op::DivScalar { x, divisor }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape.clone(),
            v.data
                .iter()
                .map(|&p| if p > 0.0 { p } else { 0.0 })
                .collect(),
        );
        self.push(t, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape.clone(), v.data.iter().map(|p| p.exp()).collect());
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(p) = v.data.iter().find(|&&p| p <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {p}")));
        }
        let t = Tensor::from_parts(v.shape.clone(), v.data.iter().map(|p| p.ln()).collect());
        Ok(self.push(t, Op::Log(x)))
    }

    /// Square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(p) = v.data.iter().find(|&&p| p < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {p}")));
        }
        let t = Tensor::from_parts(v.shape.clone(), v.data.iter().map(|p| p.sqrt()).collect());
        Ok(self.push(t, Op::Sqrt(x)))
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape.clone(),
            v.data
                .iter()
                .map(|&p| if p > min { p } else { min })
                .collect(),
        );
        self.push(t, Op::ClampMin { x, min })
    }

    // ---- linear algebra and reductions -------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (xa, xb) = (self.data(a), self.data(b));
        par::for_each_chunk(&mut out, n, |i, row| {
            for p in 0..k {
                let av = xa[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&xb[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        });
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(0.0, |acc, &p| acc + p);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::SumAxis { x, axis }))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err!("softmax expects rank 2, got {shape:?}"));
        }
        let cols = shape[1];
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &p| m.max(p));
            let mut total = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                total += *p;
            }
            for p in row.iter_mut() {
                *p /= total;
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x)))
    }

    /// Euclidean distances between every row of `x` [B×m] and every row
    /// of `y` [C×m], as a [B×C] tensor.
    pub fn pairwise_l2(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(shape_err!("pairwise_l2: incompatible {sx:?} and {sy:?}"));
        }
        let (b, c, m) = (sx[0], sy[0], sx[1]);
        let (dx, dy) = (self.data(x), self.data(y));
        let mut out = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = l2(&dx[i * m..(i + 1) * m], &dy[j * m..(j + 1) * m]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::PairwiseL2 { x, y }))
    }

    // ---- structural ops ----------------------------------------------

    fn route(&mut self, x: Var, shape: Vec<usize>, src: Vec<usize>, fill: f64) -> Var {
        let xd = self.data(x);
        let data = src
            .iter()
            .map(|&s| if s == NO_SOURCE { fill } else { xd[s] })
            .collect();
        self.push(Tensor::from_parts(shape, data), Op::Route { x, src })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() || shape.contains(&0) {
            return Err(shape_err!("reshape: {:?} into {shape:?}", v.shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data.clone());
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Elements at flat `indices`, as a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if indices.is_empty() {
            return Err(shape_err!("gather: empty index list"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err!(
                "gather: index {i} out of range for {n} elements"
            ));
        }
        Ok(self.route(x, vec![indices.len()], indices.to_vec(), 0.0))
    }

    /// `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("slice: axis {axis} out of range for {shape:?}"));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "slice: [{start}, {}) outside axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for d in start..start + len {
                let base = (o * dim + d) * inner;
                src.extend(base..base + inner);
            }
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.route(x, oshape, src, 0.0))
    }

    /// Pads the last axis with `left` and `right` cells of `value`.
    pub fn pad_width(&mut self, x: Var, left: usize, right: usize, value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&w) = shape.last() else {
            return Err(shape_err!("pad_width on a rank-0 tensor"));
        };
        let rows = self.value(x).len() / w;
        let nw = left + w + right;
        let mut src = Vec::with_capacity(rows * nw);
        for r in 0..rows {
            src.extend(std::iter::repeat_n(NO_SOURCE, left));
            src.extend(r * w..(r + 1) * w);
            src.extend(std::iter::repeat_n(NO_SOURCE, right));
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = nw;
        Ok(self.route(x, oshape, src, value))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(shape_err!(
                    "concat: {s:?} does not match {base:?} off axis {axis}"
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                data.extend_from_slice(&self.data(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(oshape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Maximum along `axis` and the winning position along that axis.
    /// Ties go to the lowest index; the adjoint flows only to the winners.
    pub fn reduce_max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!(
                "reduce_max_axis: axis {axis} out of range for {shape:?}"
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut src = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for d in 1..dim {
                    if xd[(o * dim + d) * inner + i] > xd[(o * dim + best) * inner + i] {
                        best = d;
                    }
                }
                argmax.push(best);
                src.push((o * dim + best) * inner + i);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        Ok((self.route(x, oshape, src, 0.0), argmax))
    }

    // ---- convolution and pooling --------------------------------------

    /// Cross-correlation of `x` [B×C×H×W] with `w` [O×C×KH×KW] plus `b`
    /// [O], stride along width only and no height padding.
    ///
    /// `valid` gives each example's used width; columns at or beyond it
    /// are treated as zero padding. Output columns at or beyond the output
    /// valid width are exactly zero. Each output element accumulates
    /// `bias`, then products in (kernel column, input channel, kernel row)
    /// order.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: ConvPadding,
        valid: Option<&[usize]>,
    ) -> Result<(Var, Vec<usize>)> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
            return Err(shape_err!("conv2d: ranks of {sx:?}, {sw:?}, {sb:?}"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if sw[1] != cin {
            return Err(shape_err!(
                "conv2d: input has {cin} channels, kernel expects {}",
                sw[1]
            ));
        }
        if sb[0] != cout {
            return Err(shape_err!(
                "conv2d: bias length {} for {cout} filters",
                sb[0]
            ));
        }
        if h < kh {
            return Err(shape_err!(
                "conv2d: height {h} smaller than kernel height {kh}"
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: zero stride"));
        }
        let (pad, wo) = match padding {
            ConvPadding::Same => {
                if kw % 2 == 0 {
                    return Err(shape_err!("conv2d: same padding needs an odd kernel width"));
                }
                (kw / 2, ceil_div(wd, stride))
            }
            ConvPadding::Valid => {
                if wd < kw {
                    return Err(shape_err!(
                        "conv2d: width {wd} smaller than kernel width {kw}"
                    ));
                }
                (0, (wd - kw) / stride + 1)
            }
        };
        let valid_in = resolve_valid(valid, batch, wd)?;
        let mut valid_out = Vec::with_capacity(batch);
        for &v in &valid_in {
            valid_out.push(match padding {
                ConvPadding::Same => ceil_div(v, stride),
                ConvPadding::Valid if v >= kw => (v - kw) / stride + 1,
                ConvPadding::Valid => {
                    return Err(shape_err!(
                        "conv2d: valid width {v} below kernel width {kw}"
                    ))
                }
            });
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: h - kh + 1,
            wo,
            stride,
            pad,
        };
        let out = conv_forward(
            &geom,
            self.data(x),
            self.data(w),
            self.data(b),
            &valid_in,
            &valid_out,
        );
        let t = Tensor::from_parts(vec![batch, cout, geom.ho, wo], out);
        let var = self.push(
            t,
            Op::Conv(Box::new(ConvCtx {
                x,
                w,
                b,
                geom,
                valid_in,
                valid_out: valid_out.clone(),
            })),
        );
        Ok((var, valid_out))
    }

    /// Sliding maximum along the width of `x` [B×C×H×W] with an odd
    /// `window`, same-size padding and width stride. Padding cells and
    /// columns beyond each example's valid width never win; ties go to the
    /// leftmost column.
    pub fn maxpool_width(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
        valid: Option<&[usize]>,
    ) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err!("maxpool_width expects rank 4, got {shape:?}"));
        }
        if window.is_multiple_of(2) || stride == 0 {
            return Err(shape_err!(
                "maxpool_width: window {window} / stride {stride}"
            ));
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let valid_in = resolve_valid(valid, batch, w)?;
        let valid_out: Vec<usize> = valid_in.iter().map(|&v| ceil_div(v, stride)).collect();
        let wo = ceil_div(w, stride);
        let half = window / 2;
        let xd = self.data(x);
        let mut src = vec![NO_SOURCE; batch * ch * h * wo];
        for bi in 0..batch {
            let vin = valid_in[bi];
            for row in 0..ch * h {
                let ibase = (bi * ch * h + row) * w;
                let obase = (bi * ch * h + row) * wo;
                for j in 0..valid_out[bi] {
                    let centre = j * stride;
                    let lo = centre.saturating_sub(half);
                    let hi = (centre + half + 1).min(vin);
                    let mut best = lo;
                    for c in lo + 1..hi {
                        if xd[ibase + c] > xd[ibase + best] {
                            best = c;
                        }
                    }
                    src[obase + j] = ibase + best;
                }
            }
        }
        let var = self.route(x, vec![batch, ch, h, wo], src, 0.0);
        Ok((var, valid_out))
    }

    /// Per-channel maximum of `x` [B×C×H×W] over all rows and the first
    /// `valid[b]` columns, giving [B×C]. Ties go to the lowest flat index.
    pub fn masked_global_max(&mut self, x: Var, valid: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err!("global max expects rank 4, got {shape:?}"));
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let valid_in = resolve_valid(valid, batch, w)?;
        if let Some(b) = valid_in.iter().position(|&v| v == 0) {
            return Err(shape_err!("global max: example {b} has no valid columns"));
        }
        let xd = self.data(x);
        let mut src = Vec::with_capacity(batch * ch);
        for (bi, &vin) in valid_in.iter().enumerate() {
            for c in 0..ch {
                let base = (bi * ch + c) * h * w;
                let mut best = base;
                for r in 0..h {
                    for col in 0..vin {
                        let i = base + r * w + col;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                src.push(best);
            }
        }
        Ok(self.route(x, vec![batch, ch], src, 0.0))
    }

    // ---- backward ------------------------------------------------------

    /// Propagates adjoints from a scalar `output`. May be called once per
    /// tape; afterwards every gradient-requiring leaf reachable from
    /// `output` holds its adjoint (see [`Tape::grad`]).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(shape_err!("backward on an empty tape"));
        }
        if self.value(output).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(&self.nodes, node, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (p, q)| {
            let d = p - q;
            acc + d * d
        })
        .sqrt()
}

fn resolve_valid(valid: Option<&[usize]>, batch: usize, w: usize) -> Result<Vec<usize>> {
    match valid {
        None => Ok(vec![w; batch]),
        Some(v) if v.len() != batch => Err(shape_err!(
            "{} valid widths given for batch of {batch}",
            v.len()
        )),
        Some(v) => {
            if let Some(&bad) = v.iter().find(|&&x| x > w) {
                return Err(shape_err!("valid width {bad} exceeds tensor width {w}"));
            }
            Ok(v.to_vec())
        }
    }
}

/// Output columns `j < limit` whose tap `j*stride + kx - pad` lands inside
/// `[0, vin)`.
fn tap_range(limit: usize, kx: usize, g: &ConvGeom, vin: usize) -> (usize, usize, isize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let lim = vin as isize - off;
    let hi = if lim <= 0 { 0 } else { (lim + s - 1) / s };
    let hi = (hi as usize).min(limit);
    (lo as usize, hi.max(lo as usize), off)
}

fn conv_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    valid_in: &[usize],
    valid_out: &[usize],
) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
    par::for_each_chunk(&mut out, g.ho * g.wo, |idx, chunk| {
        let (bi, oi) = (idx / g.cout, idx % g.cout);
        let (vin, vo) = (valid_in[bi], valid_out[bi]);
        for row in chunk.chunks_mut(g.wo) {
            row[..vo].fill(b[oi]);
        }
        for kx in 0..g.kw {
            let (lo, hi, off) = tap_range(vo, kx, g, vin);
            if lo >= hi {
                continue;
            }
            for ci in 0..g.cin {
                for khi in 0..g.kh {
                    let wv = w[((oi * g.cin + ci) * g.kh + khi) * g.kw + kx];
                    for r in 0..g.ho {
                        let xrow = &x[((bi * g.cin + ci) * g.h + r + khi) * g.w..][..g.w];
                        let orow = &mut chunk[r * g.wo..(r + 1) * g.wo];
                        if g.stride == 1 {
                            let start = (lo as isize + off) as usize;
                            for (o, &xv) in
                                orow[lo..hi].iter_mut().zip(&xrow[start..start + hi - lo])
                            {
                                *o += wv * xv;
                            }
                        } else {
                            for j in lo..hi {
                                orow[j] += wv * xrow[((j * g.stride) as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(
    g: &ConvGeom,
    gout: &[f64],
    w: &[f64],
    valid_in: &[usize],
    valid_out: &[usize],
) -> Vec<f64> {
    let mut gx = vec![0.0; g.batch * g.cin * g.h * g.w];
    par::for_each_chunk(&mut gx, g.h * g.w, |idx, chunk| {
        let (bi, ci) = (idx / g.cin, idx % g.cin);
        let (vin, vo) = (valid_in[bi], valid_out[bi]);
        for oi in 0..g.cout {
            for khi in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi, off) = tap_range(vo, kx, g, vin);
                    if lo >= hi {
                        continue;
                    }
                    let wv = w[((oi * g.cin + ci) * g.kh + khi) * g.kw + kx];
                    for r in 0..g.ho {
                        let grow = &gout[((bi * g.cout + oi) * g.ho + r) * g.wo..][..g.wo];
                        let xrow = &mut chunk[(r + khi) * g.w..(r + khi + 1) * g.w];
                        for j in lo..hi {
                            xrow[((j * g.stride) as isize + off) as usize] += wv * grow[j];
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_backward_weight(
    g: &ConvGeom,
    gout: &[f64],
    x: &[f64],
    valid_in: &[usize],
    valid_out: &[usize],
) -> Vec<f64> {
    let per = g.cin * g.kh * g.kw;
    let mut gw = vec![0.0; g.cout * per];
    par::for_each_chunk(&mut gw, per, |oi, chunk| {
        for bi in 0..g.batch {
            let (vin, vo) = (valid_in[bi], valid_out[bi]);
            for ci in 0..g.cin {
                for khi in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi, off) = tap_range(vo, kx, g, vin);
                        let mut acc = 0.0;
                        for r in 0..g.ho {
                            let grow = &gout[((bi * g.cout + oi) * g.ho + r) * g.wo..][..g.wo];
                            let xrow = &x[((bi * g.cin + ci) * g.h + r + khi) * g.w..][..g.w];
                            for j in lo..hi {
                                acc += grow[j] * xrow[((j * g.stride) as isize + off) as usize];
                            }
                        }
                        chunk[(ci * g.kh + khi) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn conv_backward_bias(g: &ConvGeom, gout: &[f64], valid_out: &[usize]) -> Vec<f64> {
    let mut gb = vec![0.0; g.cout];
    for (oi, slot) in gb.iter_mut().enumerate() {
        for (bi, &vo) in valid_out.iter().enumerate() {
            for r in 0..g.ho {
                let grow = &gout[((bi * g.cout + oi) * g.ho + r) * g.wo..][..vo];
                *slot += grow.iter().sum::<f64>();
            }
        }
    }
    gb
}

/// Adds `contribution(buffer)` into the adjoint slot of `v`, if `v` needs it.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value.data };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            });
            let scalar_b = val(*b).len() != g.len();
            accumulate(nodes, grads, *b, |gb| {
                if scalar_b {
                    gb[0] += sign * g.iter().sum::<f64>();
                } else {
                    gb.iter_mut().zip(g).for_each(|(p, q)| *p += sign * q);
                }
            });
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let scalar_b = xb.len() != g.len();
            accumulate(nodes, grads, *a, |ga| {
                if scalar_b {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q * xb[0]);
                } else {
                    ga.iter_mut()
                        .zip(g)
                        .zip(xb)
                        .for_each(|((p, q), r)| *p += q * r);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                if scalar_b {
                    gb[0] += g.iter().zip(xa).map(|(q, r)| q * r).sum::<f64>();
                } else {
                    gb.iter_mut()
                        .zip(g)
                        .zip(xa)
                        .for_each(|((p, q), r)| *p += q * r);
                }
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * factor)
            });
        }
        Op::DivScalar { x, divisor } => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q / divisor)
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (xa, xb) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                // grad_a = g · bᵀ
                let mut ga = vec![0.0; m * k];
                par::for_each_chunk(&mut ga, k, |i, row| {
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, slot) in row.iter_mut().enumerate() {
                        *slot = grow
                            .iter()
                            .zip(&xb[p * n..(p + 1) * n])
                            .fold(0.0, |acc, (q, r)| acc + q * r);
                    }
                });
                accumulate(nodes, grads, *a, |dst| {
                    dst.iter_mut().zip(&ga).for_each(|(p, q)| *p += q)
                });
            }
            if nodes[b.0].requires_grad {
                // grad_b = aᵀ · g
                let mut gb = vec![0.0; k * n];
                par::for_each_chunk(&mut gb, n, |p, row| {
                    for i in 0..m {
                        let av = xa[i * k + p];
                        for (slot, q) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *slot += av * q;
                        }
                    }
                });
                accumulate(nodes, grads, *b, |dst| {
                    dst.iter_mut().zip(&gb).for_each(|(p, q)| *p += q)
                });
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((p, q), r) in gx.iter_mut().zip(g).zip(xv) {
                    if *r > 0.0 {
                        *p += q;
                    }
                }
            });
        }
        Op::ClampMin { x, min } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((p, q), r) in gx.iter_mut().zip(g).zip(xv) {
                    if r > min {
                        *p += q;
                    }
                }
            });
        }
        Op::Exp(x) => {
            let y = &node.value.data;
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut()
                    .zip(g)
                    .zip(y)
                    .for_each(|((p, q), r)| *p += q * r)
            });
        }
        Op::Log(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut()
                    .zip(g)
                    .zip(xv)
                    .for_each(|((p, q), r)| *p += q / r)
            });
        }
        Op::Sqrt(x) => {
            let y = &node.value.data;
            accumulate(nodes, grads, *x, |gx| {
                for ((p, q), r) in gx.iter_mut().zip(g).zip(y) {
                    if *r > 0.0 {
                        *p += q * 0.5 / r;
                    }
                }
            });
        }
        Op::Route { x, src } => {
            accumulate(nodes, grads, *x, |gx| {
                for (&s, q) in src.iter().zip(g) {
                    if s != NO_SOURCE {
                        gx[s] += q;
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += q)
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.value.shape;
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let d = nodes[v.0].value.shape[*axis];
                accumulate(nodes, grads, v, |gv| {
                    for o in 0..outer {
                        let from =
                            &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        for (p, q) in gv[o * d * inner..(o + 1) * d * inner].iter_mut().zip(from) {
                            *p += q;
                        }
                    }
                });
                offset += d;
            }
        }
        Op::SumAxis { x, axis } => {
            let (outer, dim, inner) = split_axis(&nodes[x.0].value.shape, *axis);
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            gx[(o * dim + d) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().for_each(|p| *p += g[0])
            });
        }
        Op::Softmax(x) => {
            let y = &node.value.data;
            let cols = node.value.shape[1];
            accumulate(nodes, grads, *x, |gx| {
                for ((grow, yrow), dst) in
                    g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(q, r)| q * r).sum();
                    for ((p, q), r) in dst.iter_mut().zip(grow).zip(yrow) {
                        *p += r * (q - dot);
                    }
                }
            });
        }
        Op::PairwiseL2 { x, y } => {
            let (dx, dy) = (val(*x), val(*y));
            let d = &node.value.data;
            let (b, c) = (node.value.shape[0], node.value.shape[1]);
            let m = nodes[x.0].value.shape[1];
            let coeff = |i: usize, j: usize| {
                if d[i * c + j] > 0.0 {
                    g[i * c + j] / d[i * c + j]
                } else {
                    0.0
                }
            };
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..b {
                    for j in 0..c {
                        let s = coeff(i, j);
                        for k in 0..m {
                            gx[i * m + k] += s * (dx[i * m + k] - dy[j * m + k]);
                        }
                    }
                }
            });
            accumulate(nodes, grads, *y, |gy| {
                for i in 0..b {
                    for j in 0..c {
                        let s = coeff(i, j);
                        for k in 0..m {
                            gy[j * m + k] -= s * (dx[i * m + k] - dy[j * m + k]);
                        }
                    }
                }
            });
        }
        Op::Conv(ctx) => {
            let geom = &ctx.geom;
            if nodes[ctx.x.0].requires_grad {
                let gx = conv_backward_input(geom, g, val(ctx.w), &ctx.valid_in, &ctx.valid_out);
                accumulate(nodes, grads, ctx.x, |dst| {
                    dst.iter_mut().zip(&gx).for_each(|(p, q)| *p += q)
                });
            }
            if nodes[ctx.w.0].requires_grad {
                let gw = conv_backward_weight(geom, g, val(ctx.x), &ctx.valid_in, &ctx.valid_out);
                accumulate(nodes, grads, ctx.w, |dst| {
                    dst.iter_mut().zip(&gw).for_each(|(p, q)| *p += q)
                });
            }
            if nodes[ctx.b.0].requires_grad {
                let gb = conv_backward_bias(geom, g, &ctx.valid_out);
                accumulate(nodes, grads, ctx.b, |dst| {
                    dst.iter_mut().zip(&gb).for_each(|(p, q)| *p += q)
                });
            }
        }
    }
}
