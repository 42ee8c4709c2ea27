//! Reverse-mode differentiation over an explicit tape of primitive nodes.
//!
//! Every operation appends a node holding its output; `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products. Shape problems
//! are reported as [`Error::Shape`] naming the operation.

use std::collections::BTreeMap;

use super::kernels::{axpy, mm_nn, mm_nt, mm_tn};
use super::{numel, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`, padding split with the smaller half
    /// before.
    Same,
    /// No padding; output size `floor((in - k) / stride) + 1`.
    Valid,
}

/// Resolved spatial arithmetic of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::config("conv", "kernel and stride must be positive"));
        }
        let axis = |n: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Same => {
                    let out = n.div_ceil(stride);
                    let total = ((out - 1) * stride + kernel).saturating_sub(n);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if n < kernel {
                        return Err(Error::shape("conv2d", &[n], &[kernel]));
                    }
                    Ok(((n - kernel) / stride + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h)?;
        let (out_w, pad_left) = axis(in_w)?;
        Ok(Self {
            in_h,
            in_w,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }
}

type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    SumAll(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        din: usize,
        dout: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    HeadLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
        trans_w: bool,
        batch: usize,
        heads: usize,
        shared_x: bool,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        batch: usize,
        cin: usize,
        cout: usize,
        cols: Vec<T>,
    },
    LstmC {
        gates: Var,
        c_prev: Option<Var>,
        hidden: usize,
    },
    LstmH {
        gates: Var,
        c: Var,
        hidden: usize,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    ScatterRows {
        x: Var,
        targets: Vec<Option<usize>>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    TrajectoryHead {
        raw: Var,
        steps: usize,
        step_scale: T,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::SumAll(_) => "sum",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::HeadLinear { .. } => "head_linear",
            Op::Conv2d { .. } => "conv2d",
            Op::LstmC { .. } => "lstm_cell",
            Op::LstmH { .. } => "lstm_hidden",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::ScatterRows { .. } => "scatter_rows_to_grid",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(_) => "reshape",
            Op::TrajectoryHead { .. } => "trajectory_head",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
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

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("leaf", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, fill: T) -> Var {
        let n = numel(&shape);
        self.push(shape, vec![fill; n], Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(self.shape(a).to_vec(), value, op)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(a),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    /// Affine map over the last axis: `x[.., din] · w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", &ws, self.shape(b)));
            }
        }
        let rows = numel(&xs) / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        mm_nn(self.value(x), self.value(w), &mut out, rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(shape, out, Op::Linear { x, w, b, din, dout }))
    }

    /// Plain 2-D product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || self.shape(a)[1] != self.shape(b)[0] {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        self.linear(a, b, None)
    }

    /// Batched product `a[B,m,k] · b[B,k,n]` (or `b[B,n,k]ᵀ` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("bmm", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(err());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(err());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ai, bi, ci, m, k, n);
            } else {
                mm_nn(ai, bi, ci, m, k, n);
            }
        }
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Per-head affine maps: `out[b,l] = x[b,l] · W_l + b_l`, where `x` is
    /// `[B, L, din]` or `[B, din]` (shared by all heads) and `w` is
    /// `[L, din, dout]` (`[L, dout, din]` with `trans_w`).
    pub fn head_linear(&mut self, x: Var, w: Var, b: Option<Var>, trans_w: bool) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || Error::shape("head_linear", &xs, &ws);
        if ws.len() != 3 {
            return Err(err());
        }
        let heads = ws[0];
        let (din, dout) = if trans_w { (ws[2], ws[1]) } else { (ws[1], ws[2]) };
        let (batch, shared_x) = match xs.as_slice() {
            [bsz, d] if *d == din => (*bsz, true),
            [bsz, l, d] if *l == heads && *d == din => (*bsz, false),
            _ => return Err(err()),
        };
        if let Some(b) = b {
            if self.shape(b) != [heads, dout] {
                return Err(Error::shape("head_linear", &ws, self.shape(b)));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); batch * heads * dout];
        let mut xl = vec![T::zero(); batch * din];
        let mut yl = vec![T::zero(); batch * dout];
        for l in 0..heads {
            gather_head(xv, &mut xl, batch, heads, l, din, shared_x);
            yl.iter_mut().for_each(|v| *v = T::zero());
            if let Some(b) = b {
                let bl = &self.value(b)[l * dout..(l + 1) * dout];
                for r in 0..batch {
                    yl[r * dout..(r + 1) * dout].copy_from_slice(bl);
                }
            }
            let wl = &wv[l * din * dout..(l + 1) * din * dout];
            if trans_w {
                mm_nt(&xl, wl, &mut yl, batch, din, dout);
            } else {
                mm_nn(&xl, wl, &mut yl, batch, din, dout);
            }
            for r in 0..batch {
                let dst = (r * heads + l) * dout;
                out[dst..dst + dout].copy_from_slice(&yl[r * dout..(r + 1) * dout]);
            }
        }
        Ok(self.push(
            vec![batch, heads, dout],
            out,
            Op::HeadLinear {
                x,
                w,
                b,
                trans_w,
                batch,
                heads,
                shared_x,
                din,
                dout,
            },
        ))
    }

    /// 2-D convolution over `x[B, H, W, Cin]` with `w[k, k, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (batch, cin, cout, k) = (xs[0], xs[3], ws[3], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let geo = ConvGeometry::new(xs[1], xs[2], k, stride, padding)?;
        let patch = k * k * cin;
        let rows = batch * geo.out_h * geo.out_w;
        let cols = im2col(self.value(x), batch, cin, &geo);
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
        }
        mm_nn(&cols, self.value(w), &mut out, rows, patch, cout);
        Ok(self.push(
            vec![batch, geo.out_h, geo.out_w, cout],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                batch,
                cin,
                cout,
                cols,
            },
        ))
    }

    /// Cell-state update of an LSTM step. `gates[R, 4H]` holds the
    /// pre-activations in the order input, forget, candidate, output;
    /// a missing `c_prev` means a zero state.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Result<Var> {
        let gs = self.shape(gates).to_vec();
        if gs.len() != 2 || !gs[1].is_multiple_of(4) {
            return Err(Error::shape("lstm_cell", &gs, &[]));
        }
        let (rows, hidden) = (gs[0], gs[1] / 4);
        if let Some(c) = c_prev {
            if self.shape(c) != [rows, hidden] {
                return Err(Error::shape("lstm_cell", &gs, self.shape(c)));
            }
        }
        let gv = self.value(gates);
        let mut out = vec![T::zero(); rows * hidden];
        for r in 0..rows {
            let g = &gv[r * 4 * hidden..(r + 1) * 4 * hidden];
            for j in 0..hidden {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[hidden + j]);
                let cand = g[2 * hidden + j].tanh();
                let prev = c_prev.map_or(T::zero(), |c| self.value(c)[r * hidden + j]);
                out[r * hidden + j] = f * prev + i * cand;
            }
        }
        Ok(self.push(
            vec![rows, hidden],
            out,
            Op::LstmC {
                gates,
                c_prev,
                hidden,
            },
        ))
    }

    /// Hidden output `σ(o) · tanh(c)` of an LSTM step.
    pub fn lstm_hidden(&mut self, gates: Var, c: Var) -> Result<Var> {
        let gs = self.shape(gates).to_vec();
        let cs = self.shape(c).to_vec();
        if gs.len() != 2 || cs.len() != 2 || gs[0] != cs[0] || gs[1] != 4 * cs[1] {
            return Err(Error::shape("lstm_hidden", &gs, &cs));
        }
        let (rows, hidden) = (cs[0], cs[1]);
        let gv = self.value(gates);
        let cv = self.value(c);
        let mut out = vec![T::zero(); rows * hidden];
        for r in 0..rows {
            for j in 0..hidden {
                let o = sigmoid(gv[r * 4 * hidden + 3 * hidden + j]);
                out[r * hidden + j] = o * cv[r * hidden + j].tanh();
            }
        }
        Ok(self.push(cs, out, Op::LstmH { gates, c, hidden }))
    }

    /// One LSTM step returning `(h, c)`.
    pub fn lstm_step(&mut self, gates: Var, c_prev: Option<Var>) -> Result<(Var, Var)> {
        let c = self.lstm_cell(gates, c_prev)?;
        let h = self.lstm_hidden(gates, c)?;
        Ok((h, c))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        if n == 0 {
            return Err(Error::shape("softmax", &shape, &[]));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            // the denominator is accumulated in f64 so that rows of a few
            // hundred f32 entries still sum to one within 1e-6
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += v.to_f64();
            }
            for v in row.iter_mut() {
                *v = T::of(v.to_f64() / sum);
            }
        }
        Ok(self.push(shape, out, Op::Softmax(a)))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec())))
    }

    /// Writes row `i` of `x[R, C]` into output row `targets[i]` of a zero
    /// tensor with shape `out_shape` (last axis `C`). Rows with `None` are
    /// dropped; two rows may not share a target.
    pub fn scatter_rows(&mut self, x: Var, targets: Vec<Option<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || targets.len() != xs[0] || out_shape.last() != Some(&xs[1]) {
            return Err(Error::shape("scatter_rows_to_grid", &xs, &out_shape));
        }
        let c = xs[1];
        let out_rows = numel(&out_shape) / c.max(1);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut used = vec![false; out_rows];
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= out_rows || used[t] {
                    return Err(Error::shape("scatter_rows_to_grid", &[i, t], &out_shape));
                }
                used[t] = true;
                out[t * c..(t + 1) * c].copy_from_slice(&self.value(x)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(out_shape, out, Op::ScatterRows { x, targets }))
    }

    /// Gathers rows along the first axis (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || idx.iter().any(|&i| i >= xs[0]) {
            return Err(Error::shape("select_rows", &xs, &[idx.len()]));
        }
        let w = numel(&xs[1..]);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
        }
        let mut shape = xs;
        shape[0] = idx.len();
        Ok(self.push(shape, out, Op::SelectRows { x, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape(x)))
    }

    /// Collapses all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s.first().copied().unwrap_or(1);
        let rest = numel(&s[1..]);
        self.reshape(x, vec![rows, rest])
    }

    /// Maps raw decoder outputs `[R, steps·5]` to Gaussian parameters
    /// `[R, steps, 5]`: means are cumulative sums of `step_scale`-scaled raw
    /// displacements, `σ = clamp(exp(raw), 1e-3, 50)` and `ρ = 0.999·tanh(raw)`.
    pub fn trajectory_head(&mut self, raw: Var, steps: usize, step_scale: T) -> Result<Var> {
        let rs = self.shape(raw).to_vec();
        if rs.len() != 2 || rs[1] != steps * 5 {
            return Err(Error::shape("trajectory_head", &rs, &[steps * 5]));
        }
        let rows = rs[0];
        let rv = self.value(raw);
        let mut out = vec![T::zero(); rows * steps * 5];
        let (lo, hi) = (T::of(SIGMA_MIN), T::of(SIGMA_MAX));
        for r in 0..rows {
            let (mut mx, mut my) = (T::zero(), T::zero());
            for t in 0..steps {
                let i = (r * steps + t) * 5;
                mx += step_scale * rv[i];
                my += step_scale * rv[i + 1];
                out[i] = mx;
                out[i + 1] = my;
                out[i + 2] = rv[i + 2].exp().max(lo).min(hi);
                out[i + 3] = rv[i + 3].exp().max(lo).min(hi);
                out[i + 4] = T::of(RHO_SCALE) * rv[i + 4].tanh();
            }
        }
        Ok(self.push(
            vec![rows, steps, 5],
            out,
            Op::TrajectoryHead {
                raw,
                steps,
                step_scale,
            },
        ))
    }

    /// Node with a caller-supplied backward rule. `backward` receives the
    /// input values, the output value and the output gradient and returns
    /// one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        backward: impl Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>> + 'static,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("custom", &shape, &[value.len()]));
        }
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        ))
    }

    /// Reverse sweep from the given output cotangents.
    pub fn backward(&self, seeds: &[(Var, Vec<T>)]) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                return Err(Error::shape("backward", &self.nodes[v.0].shape, &[g.len()]));
            }
            acc(&mut grads, self, *v).iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.node_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn node_backward(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(acc(grads, self, *a), g);
                add_into(acc(grads, self, *b), g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, gi), bi) in acc(grads, self, *a).iter_mut().zip(g).zip(bv) {
                    *d += *gi * *bi;
                }
                for ((d, gi), ai) in acc(grads, self, *b).iter_mut().zip(g).zip(av) {
                    *d += *gi * *ai;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                for (d, gi) in acc(grads, self, *a).iter_mut().zip(g) {
                    *d += *gi * s;
                }
            }
            Op::Tanh(a) => {
                for ((d, gi), yi) in acc(grads, self, *a).iter_mut().zip(g).zip(y) {
                    *d += *gi * (T::one() - *yi * *yi);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, gi), yi) in acc(grads, self, *a).iter_mut().zip(g).zip(y) {
                    *d += *gi * *yi * (T::one() - *yi);
                }
            }
            Op::Exp(a) => {
                for ((d, gi), yi) in acc(grads, self, *a).iter_mut().zip(g).zip(y) {
                    *d += *gi * *yi;
                }
            }
            Op::Softplus(a) => {
                let xv = self.value(*a);
                for ((d, gi), xi) in acc(grads, self, *a).iter_mut().zip(g).zip(xv) {
                    *d += *gi * sigmoid(*xi);
                }
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                acc(grads, self, *a).iter_mut().for_each(|d| *d += g0);
            }
            Op::Linear { x, w, b, din, dout } => {
                let (din, dout) = (*din, *dout);
                let rows = g.len() / dout;
                let xv = self.value(*x);
                let wv = self.value(*w);
                mm_nt(g, wv, acc(grads, self, *x), rows, dout, din);
                mm_tn(xv, g, acc(grads, self, *w), rows, din, dout);
                if let Some(b) = b {
                    let db = acc(grads, self, *b);
                    for r in 0..rows {
                        add_into(db, &g[r * dout..(r + 1) * dout]);
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let da = acc(grads, self, *a);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            mm_nn(gi, bi, dai, m, n, k);
                        } else {
                            mm_nt(gi, bi, dai, m, n, k);
                        }
                    }
                }
                let db = acc(grads, self, *b);
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        mm_tn(gi, ai, dbi, m, n, k);
                    } else {
                        mm_tn(ai, gi, dbi, m, k, n);
                    }
                }
            }
            Op::HeadLinear {
                x,
                w,
                b,
                trans_w,
                batch,
                heads,
                shared_x,
                din,
                dout,
            } => {
                let (batch, heads, din, dout) = (*batch, *heads, *din, *dout);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut xl = vec![T::zero(); batch * din];
                let mut gl = vec![T::zero(); batch * dout];
                let mut dxl = vec![T::zero(); batch * din];
                for l in 0..heads {
                    gather_head(xv, &mut xl, batch, heads, l, din, *shared_x);
                    for r in 0..batch {
                        let src = (r * heads + l) * dout;
                        gl[r * dout..(r + 1) * dout].copy_from_slice(&g[src..src + dout]);
                    }
                    let wl = &wv[l * din * dout..(l + 1) * din * dout];
                    dxl.iter_mut().for_each(|v| *v = T::zero());
                    if *trans_w {
                        mm_nn(&gl, wl, &mut dxl, batch, dout, din);
                    } else {
                        mm_nt(&gl, wl, &mut dxl, batch, dout, din);
                    }
                    {
                        let dx = acc(grads, self, *x);
                        for r in 0..batch {
                            let dst = if *shared_x { r * din } else { (r * heads + l) * din };
                            add_into(&mut dx[dst..dst + din], &dxl[r * din..(r + 1) * din]);
                        }
                    }
                    {
                        let dw = &mut acc(grads, self, *w)[l * din * dout..(l + 1) * din * dout];
                        if *trans_w {
                            mm_tn(&gl, &xl, dw, batch, dout, din);
                        } else {
                            mm_tn(&xl, &gl, dw, batch, din, dout);
                        }
                    }
                    if let Some(b) = b {
                        let db = &mut acc(grads, self, *b)[l * dout..(l + 1) * dout];
                        for r in 0..batch {
                            add_into(db, &gl[r * dout..(r + 1) * dout]);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                batch,
                cin,
                cout,
                cols,
            } => {
                let patch = geo.kernel * geo.kernel * cin;
                let rows = batch * geo.out_h * geo.out_w;
                mm_tn(cols, g, acc(grads, self, *w), rows, patch, *cout);
                if let Some(b) = b {
                    let db = acc(grads, self, *b);
                    for r in 0..rows {
                        add_into(db, &g[r * cout..(r + 1) * cout]);
                    }
                }
                let mut dcols = vec![T::zero(); rows * patch];
                mm_nt(g, self.value(*w), &mut dcols, rows, *cout, patch);
                col2im(&dcols, acc(grads, self, *x), *batch, *cin, geo);
            }
            Op::LstmC {
                gates,
                c_prev,
                hidden,
            } => {
                let h = *hidden;
                let rows = g.len() / h;
                let gv = self.value(*gates);
                let prev: Option<&[T]> = c_prev.map(|c| self.value(c));
                let mut dgates = vec![T::zero(); rows * 4 * h];
                let mut dprev = vec![T::zero(); rows * h];
                for r in 0..rows {
                    let gr = &gv[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let dc = g[r * h + j];
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let cand = gr[2 * h + j].tanh();
                        let p = prev.map_or(T::zero(), |c| c[r * h + j]);
                        let base = r * 4 * h;
                        dgates[base + j] = dc * cand * i * (T::one() - i);
                        dgates[base + h + j] = dc * p * f * (T::one() - f);
                        dgates[base + 2 * h + j] = dc * i * (T::one() - cand * cand);
                        dprev[r * h + j] = dc * f;
                    }
                }
                add_into(acc(grads, self, *gates), &dgates);
                if let Some(c) = c_prev {
                    add_into(acc(grads, self, *c), &dprev);
                }
            }
            Op::LstmH { gates, c, hidden } => {
                let h = *hidden;
                let rows = g.len() / h;
                let gv = self.value(*gates);
                let cv = self.value(*c);
                let mut dgates = vec![T::zero(); rows * 4 * h];
                let mut dc = vec![T::zero(); rows * h];
                for r in 0..rows {
                    for j in 0..h {
                        let o = sigmoid(gv[r * 4 * h + 3 * h + j]);
                        let tc = cv[r * h + j].tanh();
                        let gi = g[r * h + j];
                        dgates[r * 4 * h + 3 * h + j] = gi * tc * o * (T::one() - o);
                        dc[r * h + j] = gi * o * (T::one() - tc * tc);
                    }
                }
                add_into(acc(grads, self, *gates), &dgates);
                add_into(acc(grads, self, *c), &dc);
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                let da = acc(grads, self, *a);
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(p, q)| *p * *q).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += *yi * (*gi - dot);
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let dp = acc(grads, self, *p);
                    for r in 0..rows {
                        add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::ScatterRows { x, targets } => {
                let c = *self.shape(*x).last().unwrap();
                let dx = acc(grads, self, *x);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[t * c..(t + 1) * c]);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let w = numel(&self.shape(*x)[1..]);
                let dx = acc(grads, self, *x);
                for (o, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * w..(i + 1) * w], &g[o * w..(o + 1) * w]);
                }
            }
            Op::Reshape(x) => add_into(acc(grads, self, *x), g),
            Op::TrajectoryHead {
                raw,
                steps,
                step_scale,
            } => {
                let steps = *steps;
                let rows = g.len() / (steps * 5);
                let rv = self.value(*raw);
                let dr = acc(grads, self, *raw);
                let (lo, hi) = (T::of(SIGMA_MIN), T::of(SIGMA_MAX));
                for r in 0..rows {
                    // the mean at step t sums raw steps 0..=t, so raw step s
                    // collects the mean gradients of steps s..steps
                    let (mut sx, mut sy) = (T::zero(), T::zero());
                    for t in (0..steps).rev() {
                        let i = (r * steps + t) * 5;
                        sx += g[i];
                        sy += g[i + 1];
                        dr[i] += *step_scale * sx;
                        dr[i + 1] += *step_scale * sy;
                        for c in 2..4 {
                            let e = rv[i + c].exp();
                            if e > lo && e < hi {
                                dr[i + c] += g[i + c] * e;
                            }
                        }
                        let th = rv[i + 4].tanh();
                        dr[i + 4] += g[i + 4] * T::of(RHO_SCALE) * (T::one() - th * th);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(&vals, y, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    add_into(acc(grads, self, *v), &gi);
                }
            }
        }
    }
}

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 50.0;
pub const RHO_SCALE: f64 = 0.999;

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], tape: &Tape<T>, v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); tape.nodes[v.0].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    axpy(dst, T::one(), src);
}

fn gather_head<T: Real>(xv: &[T], xl: &mut [T], batch: usize, heads: usize, l: usize, din: usize, shared: bool) {
    for r in 0..batch {
        let src = if shared { r * din } else { (r * heads + l) * din };
        xl[r * din..(r + 1) * din].copy_from_slice(&xv[src..src + din]);
    }
}

fn im2col<T: Real>(x: &[T], batch: usize, cin: usize, geo: &ConvGeometry) -> Vec<T> {
    let k = geo.kernel;
    let patch = k * k * cin;
    let mut cols = vec![T::zero(); batch * geo.out_h * geo.out_w * patch];
    for b in 0..batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let row = (b * geo.out_h + oy) * geo.out_w + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad_top as isize;
                    if iy < 0 || iy >= geo.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad_left as isize;
                        if ix < 0 || ix >= geo.in_w as isize {
                            continue;
                        }
                        let src = ((b * geo.in_h + iy as usize) * geo.in_w + ix as usize) * cin;
                        let d = (ky * k + kx) * cin;
                        dst[d..d + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], dx: &mut [T], batch: usize, cin: usize, geo: &ConvGeometry) {
    let k = geo.kernel;
    let patch = k * k * cin;
    for b in 0..batch {
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let row = (b * geo.out_h + oy) * geo.out_w + ox;
                let src = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad_top as isize;
                    if iy < 0 || iy >= geo.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad_left as isize;
                        if ix < 0 || ix >= geo.in_w as isize {
                            continue;
                        }
                        let dst = ((b * geo.in_h + iy as usize) * geo.in_w + ix as usize) * cin;
                        let s = (ky * k + kx) * cin;
                        add_into(&mut dx[dst..dst + cin], &src[s..s + cin]);
                    }
                }
            }
        }
    }
}

/// A tape plus the binding of named parameters to leaves.
pub struct Graph<T> {
    pub tape: Tape<T>,
    bindings: BTreeMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            tape: Tape::new(),
            bindings: BTreeMap::new(),
        }
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let v = self.tape.leaf(t.shape.clone(), t.values.clone())?;
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds the gradients of all bound parameters into `store`.
    pub fn accumulate(&self, grads: &Grads<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in &self.bindings {
            if let Some(g) = grads.get(*v) {
                add_into(&mut store.get_mut(name)?.grad, g);
            }
        }
        Ok(())
    }
}
