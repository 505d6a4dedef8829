use std::fmt;
use std::str::FromStr;

use super::conv::{col2im_add, im2col, ConvGeom};
use super::Real;
use crate::error::{Error, Result};

/// Reduction target for [`OpKind::Sum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumAxis {
    /// Reduce everything to a scalar.
    All,
    /// Reduce the trailing dimension.
    Last,
}

/// The closed set of differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `(m,k) x (k,n) -> (m,n)`.
    MatMul,
    /// Elementwise sum; the second input may also be a scalar or a vector
    /// matching the trailing dimension of the first.
    Add,
    /// Multiply by a constant.
    Scale(f64),
    /// `x (N,C,H,W)` or `(C,H,W)`, `w (O,C,kh,kw)`, optional bias `(O,)`.
    Conv2d { stride: usize, pad: usize },
    Relu,
    /// 2×2 mean pooling with stride 2 over the trailing two dimensions.
    AvgPool2,
    /// Mean over the trailing two dimensions.
    GlobalAvgPool,
    /// `(N, ...) -> (N, prod(...))`.
    Flatten,
    /// Over the trailing dimension.
    LogSoftmax,
    /// Elementwise product, same broadcasting as [`OpKind::Add`].
    Mul,
    Sum(SumAxis),
    Mean,
    /// Divide each trailing-dimension row by its Euclidean norm.
    L2Normalize,
    Exp,
    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    Ln { floor: f64 },
    /// Square root with subgradient 0 at 0.
    Sqrt,
    /// Rows `start..end` of the leading dimension.
    SliceRows { start: usize, end: usize },
    /// Identity on values, blocks gradient flow.
    Detach,
}

pub(crate) const NORM_EPS: f64 = 1e-12;

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::AvgPool2 => "avg_pool2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Flatten => "flatten",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Mul => "mul",
            OpKind::Sum(_) => "sum",
            OpKind::Mean => "mean",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Exp => "exp",
            OpKind::Ln { .. } => "ln",
            OpKind::Sqrt => "sqrt",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::Detach => "detach",
        }
    }

    /// Every op kind with representative attributes.
    pub fn all() -> Vec<OpKind> {
        vec![
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Scale(1.0),
            OpKind::Conv2d { stride: 1, pad: 0 },
            OpKind::Relu,
            OpKind::AvgPool2,
            OpKind::GlobalAvgPool,
            OpKind::Flatten,
            OpKind::LogSoftmax,
            OpKind::Mul,
            OpKind::Sum(SumAxis::All),
            OpKind::Mean,
            OpKind::L2Normalize,
            OpKind::Exp,
            OpKind::Ln { floor: 0.0 },
            OpKind::Sqrt,
            OpKind::SliceRows { start: 0, end: 1 },
            OpKind::Detach,
        ]
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses an op name with default attributes.
    fn from_str(s: &str) -> Result<Self> {
        OpKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// How the second operand of a binary elementwise op maps onto the first.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row(usize),
    Scalar,
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.iter().product::<usize>() == 1 && b.len() <= 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Ok(Broadcast::Row(b[0]))
    } else {
        Err(Error::shape(op, format!("cannot combine {a:?} with {b:?}")))
    }
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Row(n) => i % n,
            Broadcast::Scalar => 0,
        }
    }
}

/// Borrowed view of a node's forward value.
pub(crate) struct Operand<'a, T> {
    pub shape: &'a [usize],
    pub value: &'a [T],
}

pub(crate) struct Forward<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Op-specific context kept for the backward pass.
    pub saved: Vec<T>,
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&d) if d > 0 => Ok((shape.iter().product::<usize>() / d, d)),
        _ => Err(Error::shape(op, format!("needs a non-empty trailing dim, got {shape:?}"))),
    }
}

fn expect_arity(kind: &OpKind, inputs: usize, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs) {
        Ok(())
    } else {
        Err(Error::shape(
            kind.name(),
            format!("expects {allowed:?} inputs, got {inputs}"),
        ))
    }
}

fn unary<T: Real>(x: &Operand<'_, T>, f: impl Fn(T) -> T) -> Forward<T> {
    Forward {
        shape: x.shape.to_vec(),
        value: x.value.iter().map(|&v| f(v)).collect(),
        saved: Vec::new(),
    }
}

struct ConvShapes {
    batched: bool,
    n: usize,
    out_ch: usize,
    geom: ConvGeom,
}

fn conv_shapes(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvShapes> {
    let (batched, n, c, h, wd) = match *x {
        [n, c, h, wd] => (true, n, c, h, wd),
        [c, h, wd] => (false, 1, c, h, wd),
        _ => return Err(Error::shape("conv2d", format!("input must be 3-D or 4-D, got {x:?}"))),
    };
    let [o, wc, kh, kw] = *w else {
        return Err(Error::shape("conv2d", format!("weight must be 4-D, got {w:?}")));
    };
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        ));
    }
    let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"),
        )
    })?;
    Ok(ConvShapes {
        batched,
        n,
        out_ch: o,
        geom,
    })
}

pub(crate) fn forward<T: Real>(kind: &OpKind, inputs: &[Operand<'_, T>]) -> Result<Forward<T>> {
    let name = kind.name();
    match kind {
        OpKind::MatMul => {
            expect_arity(kind, inputs.len(), &[2])?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let ([m, k], [k2, n]) = (a.shape, b.shape) else {
                return Err(Error::shape(name, format!("needs 2-D operands, got {:?} and {:?}", a.shape, b.shape)));
            };
            if k != k2 {
                return Err(Error::shape(name, format!("inner dims {k} and {k2} differ ({:?} x {:?})", a.shape, b.shape)));
            }
            let (m, k, n) = (*m, *k, *n);
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.value, k as isize, 1, b.value, n as isize, 1, T::zero(), &mut out, n as isize, 1);
            Ok(Forward { shape: vec![m, n], value: out, saved: Vec::new() })
        }
        OpKind::Add | OpKind::Mul => {
            expect_arity(kind, inputs.len(), &[2])?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let rule = broadcast_rule(name, a.shape, b.shape)?;
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.value[rule.index(i)];
                    if matches!(kind, OpKind::Add) { x + y } else { x * y }
                })
                .collect();
            Ok(Forward { shape: a.shape.to_vec(), value, saved: Vec::new() })
        }
        OpKind::Scale(c) => {
            expect_arity(kind, inputs.len(), &[1])?;
            let c = T::lit(*c);
            Ok(unary(&inputs[0], |v| v * c))
        }
        OpKind::Conv2d { stride, pad } => {
            expect_arity(kind, inputs.len(), &[2, 3])?;
            let (x, w) = (&inputs[0], &inputs[1]);
            let s = conv_shapes(x.shape, w.shape, *stride, *pad)?;
            let bias = inputs.get(2);
            if let Some(b) = bias {
                if b.shape != [s.out_ch] {
                    return Err(Error::shape(name, format!("bias must be ({},), got {:?}", s.out_ch, b.shape)));
                }
            }
            let g = s.geom;
            let (kl, p) = (g.patch_len(), g.out_len());
            // one image-sized column buffer; backward recomputes it
            let mut col = vec![T::zero(); kl * p];
            let mut out = vec![T::zero(); s.n * s.out_ch * p];
            for i in 0..s.n {
                let img = &x.value[i * g.in_len()..(i + 1) * g.in_len()];
                let dst = &mut out[i * s.out_ch * p..(i + 1) * s.out_ch * p];
                if let Some(b) = bias {
                    for (o, row) in dst.chunks_mut(p).enumerate() {
                        row.fill(b.value[o]);
                    }
                }
                im2col(&g, img, &mut col);
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                T::gemm(s.out_ch, kl, p, w.value, kl as isize, 1, &col, p as isize, 1, beta, dst, p as isize, 1);
            }
            let shape = if s.batched {
                vec![s.n, s.out_ch, g.out_h, g.out_w]
            } else {
                vec![s.out_ch, g.out_h, g.out_w]
            };
            Ok(Forward { shape, value: out, saved: Vec::new() })
        }
        OpKind::Relu => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok(unary(&inputs[0], |v| if v > T::zero() { v } else { T::zero() }))
        }
        OpKind::AvgPool2 => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            let r = x.shape.len();
            if r < 2 || !x.shape[r - 2].is_multiple_of(2) || !x.shape[r - 1].is_multiple_of(2) {
                return Err(Error::shape(name, format!("needs even trailing dims, got {:?}", x.shape)));
            }
            let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
            let planes = x.value.len() / (h * w);
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); planes * oh * ow];
            for pl in 0..planes {
                let src = &x.value[pl * h * w..(pl + 1) * h * w];
                let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = 2 * y * w + 2 * xx;
                        dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                    }
                }
            }
            let mut shape = x.shape.to_vec();
            shape[r - 2] = oh;
            shape[r - 1] = ow;
            Ok(Forward { shape, value: out, saved: Vec::new() })
        }
        OpKind::GlobalAvgPool => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            let r = x.shape.len();
            if r < 2 || x.shape[r - 1] * x.shape[r - 2] == 0 {
                return Err(Error::shape(name, format!("needs at least 2 non-empty dims, got {:?}", x.shape)));
            }
            let hw = x.shape[r - 1] * x.shape[r - 2];
            let inv = T::one() / T::lit(hw as f64);
            let value = x.value.chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
            Ok(Forward { shape: x.shape[..r - 2].to_vec(), value, saved: Vec::new() })
        }
        OpKind::Flatten => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            if x.shape.is_empty() {
                return Err(Error::shape(name, "cannot flatten a scalar"));
            }
            let rest: usize = x.shape[1..].iter().product();
            Ok(Forward { shape: vec![x.shape[0], rest], value: x.value.to_vec(), saved: Vec::new() })
        }
        OpKind::LogSoftmax => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            let (_, d) = last_dim(name, x.shape)?;
            let mut out = Vec::with_capacity(x.value.len());
            for row in x.value.chunks(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                out.extend(row.iter().map(|&v| v - lse));
            }
            Ok(Forward { shape: x.shape.to_vec(), value: out, saved: Vec::new() })
        }
        OpKind::Sum(axis) => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            match axis {
                SumAxis::All => Ok(Forward { shape: Vec::new(), value: vec![x.value.iter().copied().sum()], saved: Vec::new() }),
                SumAxis::Last => {
                    let (_, d) = last_dim(name, x.shape)?;
                    let value = x.value.chunks(d).map(|c| c.iter().copied().sum()).collect();
                    Ok(Forward { shape: x.shape[..x.shape.len() - 1].to_vec(), value, saved: Vec::new() })
                }
            }
        }
        OpKind::Mean => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            if x.value.is_empty() {
                return Err(Error::shape(name, "mean of an empty tensor"));
            }
            let s: T = x.value.iter().copied().sum();
            Ok(Forward { shape: Vec::new(), value: vec![s / T::lit(x.value.len() as f64)], saved: Vec::new() })
        }
        OpKind::L2Normalize => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            let (_, d) = last_dim(name, x.shape)?;
            let eps = T::lit(NORM_EPS);
            let mut out = Vec::with_capacity(x.value.len());
            let mut norms = Vec::with_capacity(x.value.len() / d);
            for row in x.value.chunks(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                norms.push(n);
                out.extend(row.iter().map(|&v| v / n));
            }
            Ok(Forward { shape: x.shape.to_vec(), value: out, saved: norms })
        }
        OpKind::Exp => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok(unary(&inputs[0], |v| v.exp()))
        }
        OpKind::Ln { floor } => {
            expect_arity(kind, inputs.len(), &[1])?;
            let fl = T::lit(*floor);
            Ok(unary(&inputs[0], |v| v.max(fl).ln()))
        }
        OpKind::Sqrt => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok(unary(&inputs[0], |v| v.sqrt()))
        }
        OpKind::SliceRows { start, end } => {
            expect_arity(kind, inputs.len(), &[1])?;
            let x = &inputs[0];
            let rows = *x.shape.first().ok_or_else(|| Error::shape(name, "cannot slice a scalar"))?;
            if start > end || *end > rows {
                return Err(Error::shape(name, format!("rows {start}..{end} out of 0..{rows}")));
            }
            let stride: usize = x.shape[1..].iter().product();
            let mut shape = x.shape.to_vec();
            shape[0] = end - start;
            Ok(Forward { shape, value: x.value[start * stride..end * stride].to_vec(), saved: Vec::new() })
        }
        OpKind::Detach => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok(unary(&inputs[0], |v| v))
        }
    }
}

pub(crate) fn accumulate<T: Real>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a = *a + b),
        None => *dst = Some(src),
    }
}

/// Computes input gradients given the output gradient `g`. `need[i]` marks
/// inputs that require a gradient; others are left as `None`.
pub(crate) fn backward<T: Real>(
    kind: &OpKind,
    inputs: &[Operand<'_, T>],
    out: &Operand<'_, T>,
    saved: &[T],
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut grads: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    match kind {
        OpKind::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if need[0] {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, n as isize, 1, b.value, 1, n as isize, T::zero(), &mut da, k as isize, 1);
                grads[0] = Some(da);
            }
            if need[1] {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, a.value, 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                grads[1] = Some(db);
            }
        }
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let rule = broadcast_rule(kind.name(), a.shape, b.shape).expect("validated in forward");
            let is_add = matches!(kind, OpKind::Add);
            if need[0] {
                grads[0] = Some(if is_add {
                    g.to_vec()
                } else {
                    g.iter().enumerate().map(|(i, &gi)| gi * b.value[rule.index(i)]).collect()
                });
            }
            if need[1] {
                let mut db = vec![T::zero(); b.value.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = rule.index(i);
                    db[j] = db[j] + if is_add { gi } else { gi * a.value[i] };
                }
                grads[1] = Some(db);
            }
        }
        OpKind::Scale(c) => {
            let c = T::lit(*c);
            grads[0] = Some(g.iter().map(|&v| v * c).collect());
        }
        OpKind::Conv2d { stride, pad } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            let s = conv_shapes(x.shape, w.shape, *stride, *pad).expect("validated in forward");
            let geom = s.geom;
            let (kl, p, o) = (geom.patch_len(), geom.out_len(), s.out_ch);
            let mut dw = if need[1] { vec![T::zero(); o * kl] } else { Vec::new() };
            let mut dx = if need[0] { vec![T::zero(); x.value.len()] } else { Vec::new() };
            let mut col = vec![T::zero(); kl * p];
            for i in 0..s.n {
                let gi = &g[i * o * p..(i + 1) * o * p];
                if need[1] {
                    im2col(&geom, &x.value[i * geom.in_len()..(i + 1) * geom.in_len()], &mut col);
                    T::gemm(o, p, kl, gi, p as isize, 1, &col, 1, p as isize, T::one(), &mut dw, kl as isize, 1);
                }
                if need[0] {
                    T::gemm(kl, o, p, w.value, 1, kl as isize, gi, p as isize, 1, T::zero(), &mut col, p as isize, 1);
                    col2im_add(&geom, &col, &mut dx[i * geom.in_len()..(i + 1) * geom.in_len()]);
                }
            }
            if need[0] {
                grads[0] = Some(dx);
            }
            if need[1] {
                grads[1] = Some(dw);
            }
            if inputs.len() == 3 && need[2] {
                let mut db = vec![T::zero(); o];
                for (idx, row) in g.chunks(p).enumerate() {
                    db[idx % o] = db[idx % o] + row.iter().copied().sum::<T>();
                }
                grads[2] = Some(db);
            }
        }
        OpKind::Relu => {
            grads[0] = Some(
                inputs[0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                    .collect(),
            );
        }
        OpKind::AvgPool2 => {
            let x = &inputs[0];
            let r = x.shape.len();
            let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut dx = vec![T::zero(); x.value.len()];
            for (pl, gp) in g.chunks(oh * ow).enumerate() {
                let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = gp[y * ow + xx] * quarter;
                        let i = 2 * y * w + 2 * xx;
                        dst[i] = v;
                        dst[i + 1] = v;
                        dst[i + w] = v;
                        dst[i + w + 1] = v;
                    }
                }
            }
            grads[0] = Some(dx);
        }
        OpKind::GlobalAvgPool => {
            let x = &inputs[0];
            let r = x.shape.len();
            let hw = x.shape[r - 1] * x.shape[r - 2];
            let inv = T::one() / T::lit(hw as f64);
            let mut dx = Vec::with_capacity(x.value.len());
            for &gi in g {
                dx.extend(std::iter::repeat_n(gi * inv, hw));
            }
            grads[0] = Some(dx);
        }
        OpKind::Flatten => {
            grads[0] = Some(g.to_vec());
        }
        OpKind::LogSoftmax => {
            let d = *out.shape.last().expect("non-empty");
            let mut dx = Vec::with_capacity(g.len());
            for (orow, grow) in out.value.chunks(d).zip(g.chunks(d)) {
                let gs: T = grow.iter().copied().sum();
                dx.extend(orow.iter().zip(grow).map(|(&y, &gi)| gi - y.exp() * gs));
            }
            grads[0] = Some(dx);
        }
        OpKind::Sum(SumAxis::All) => {
            grads[0] = Some(vec![g[0]; inputs[0].value.len()]);
        }
        OpKind::Sum(SumAxis::Last) => {
            let d = *inputs[0].shape.last().expect("non-empty");
            let mut dx = Vec::with_capacity(inputs[0].value.len());
            for &gi in g {
                dx.extend(std::iter::repeat_n(gi, d));
            }
            grads[0] = Some(dx);
        }
        OpKind::Mean => {
            let n = inputs[0].value.len();
            grads[0] = Some(vec![g[0] / T::lit(n as f64); n]);
        }
        OpKind::L2Normalize => {
            let d = *out.shape.last().expect("non-empty");
            let eps = T::lit(NORM_EPS);
            let mut dx = Vec::with_capacity(g.len());
            for ((yrow, grow), &n) in out.value.chunks(d).zip(g.chunks(d)).zip(saved) {
                if n > eps {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &gi)| y * gi).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&y, &gi)| (gi - y * dot) / n));
                } else {
                    dx.extend(grow.iter().map(|&gi| gi / n));
                }
            }
            grads[0] = Some(dx);
        }
        OpKind::Exp => {
            grads[0] = Some(out.value.iter().zip(g).map(|(&y, &gi)| y * gi).collect());
        }
        OpKind::Ln { floor } => {
            let fl = T::lit(*floor);
            grads[0] = Some(
                inputs[0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > fl { gi / x } else { T::zero() })
                    .collect(),
            );
        }
        OpKind::Sqrt => {
            let two = T::lit(2.0);
            grads[0] = Some(
                out.value
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| if y > T::zero() { gi / (two * y) } else { T::zero() })
                    .collect(),
            );
        }
        OpKind::SliceRows { start, .. } => {
            let x = &inputs[0];
            let stride: usize = x.shape[1..].iter().product();
            let mut dx = vec![T::zero(); x.value.len()];
            dx[start * stride..start * stride + g.len()].copy_from_slice(g);
            grads[0] = Some(dx);
        }
        OpKind::Detach => {}
    }
    for (slot, &n) in grads.iter_mut().zip(need) {
        if !n {
            *slot = None;
        }
    }
    grads
}
