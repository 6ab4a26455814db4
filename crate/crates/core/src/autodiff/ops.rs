use super::{record, record_unchecked, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, transpose, Tensor};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the offset of the element of `src_shape`
/// it reads under broadcasting.
fn broadcast_offsets(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - src_shape.len();
    let mut src_strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..src_shape.len()).rev() {
        src_strides[i + pad] = if src_shape[i] == 1 { 0 } else { stride };
        stride *= src_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0; rank];
    let mut off = 0;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += src_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}

fn reduce_to(grad: &[f64], offsets: Option<&[usize]>, shape: &[usize]) -> Tensor {
    match offsets {
        None => Tensor::from_parts(shape.to_vec(), grad.to_vec()),
        Some(offsets) => {
            let mut out = Tensor::zeros(shape);
            let data = out.data_mut();
            for (&o, &g) in offsets.iter().zip(grad) {
                data[o] += g;
            }
            out
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

impl Var {
    fn binary(&self, other: &Var, op: BinaryOp) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        if matches!(op, BinaryOp::Div) && b.data().contains(&0.0) {
            return Err(Error::ZeroInput { op: "div" });
        }
        let out_shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
        let (ia, ib) = if a.shape() == b.shape() {
            (None, None)
        } else {
            let ia = (a.shape() != out_shape.as_slice()).then(|| broadcast_offsets(a.shape(), &out_shape));
            let ib = (b.shape() != out_shape.as_slice()).then(|| broadcast_offsets(b.shape(), &out_shape));
            (ia, ib)
        };
        let numel: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let at = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
        let bt = |i: usize| ib.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = if ia.is_none() && ib.is_none() {
            ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            (0..numel).map(|i| op.apply(ad[at(i)], bd[bt(i)])).collect()
        };
        let value = Tensor::from_parts(out_shape, data);

        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        let (av, bv) = (self.value.clone(), other.value.clone());
        record(value, &[self, other], move |g| {
            let g = g.data();
            let (ad, bd) = (av.data(), bv.data());
            let at = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| ib.as_ref().map_or(i, |m| m[i]);
            let ga: Option<Vec<f64>> = a_req.then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => (0..g.len()).map(|i| g[i] * bd[bt(i)]).collect(),
                BinaryOp::Div => (0..g.len()).map(|i| g[i] / bd[bt(i)]).collect(),
            });
            let gb: Option<Vec<f64>> = b_req.then(|| match op {
                BinaryOp::Add => g.to_vec(),
                BinaryOp::Sub => g.iter().map(|x| -x).collect(),
                BinaryOp::Mul => (0..g.len()).map(|i| g[i] * ad[at(i)]).collect(),
                BinaryOp::Div => (0..g.len())
                    .map(|i| {
                        let y = bd[bt(i)];
                        -g[i] * ad[at(i)] / (y * y)
                    })
                    .collect(),
            });
            vec![
                ga.map(|ga| reduce_to(&ga, ia.as_deref(), av.shape())),
                gb.map(|gb| reduce_to(&gb, ib.as_deref(), bv.shape())),
            ]
        })
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryOp::Mul)
    }

    /// Element-wise division; a denominator containing an exact zero is rejected.
    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinaryOp::Div)
    }

    /// Applies `f` element-wise; `df(x, y)` is the derivative given input and output.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value.map(f);
        let x = self.value.clone();
        let y = std::rc::Rc::new(value.clone());
        let yc = y.clone();
        record_unchecked(value, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, p: f64) -> Var {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log; exact zeros and negative inputs are rejected.
    pub fn ln(&self) -> Result<Var> {
        if self.value.data().contains(&0.0) {
            return Err(Error::ZeroInput { op: "ln" });
        }
        if self.value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain { op: "ln" });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Var> {
        if self.value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain { op: "sqrt" });
        }
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary(gelu, gelu_grad)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value.reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(record_unchecked(value, &[self], move |g| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        }))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Var> {
        if self.value.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let value = Tensor::from_parts(vec![n, m], transpose(self.value.data(), m, n));
        Ok(record_unchecked(value, &[self], move |g| {
            vec![Some(Tensor::from_parts(vec![m, n], transpose(g.data(), n, m)))]
        }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let offsets = broadcast_offsets(self.shape(), shape);
        let src = self.value.data();
        let value = Tensor::from_parts(shape.to_vec(), offsets.iter().map(|&o| src[o]).collect());
        let in_shape = self.shape().to_vec();
        Ok(record_unchecked(value, &[self], move |g| {
            vec![Some(reduce_to(g.data(), Some(&offsets), &in_shape))]
        }))
    }

    /// Matrix product of two rank-2 variables.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = self.value.matmul(&other.value)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.value.clone(), other.value.clone());
        record(value, &[self, other], move |g| {
            let ga = a_req.then(|| {
                let mut out = vec![0.0; m * k];
                gemm_nt(g.data(), b.data(), &mut out, m, n, k);
                Tensor::from_parts(vec![m, k], out)
            });
            let gb = b_req.then(|| {
                let mut out = vec![0.0; k * n];
                gemm_tn(a.data(), g.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![k, n], out)
            });
            vec![ga, gb]
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value.data(), other.value.data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.value.clone(), other.value.clone());
        record(value, &[self, other], move |g| {
            // out = a bᵀ: da = g b, db = gᵀ a
            let ga = a_req.then(|| {
                let mut out = vec![0.0; m * k];
                gemm(g.data(), b.data(), &mut out, m, n, k);
                Tensor::from_parts(vec![m, k], out)
            });
            let gb = b_req.then(|| {
                let mut out = vec![0.0; n * k];
                gemm_tn(g.data(), a.data(), &mut out, m, n, k);
                Tensor::from_parts(vec![n, k], out)
            });
            vec![ga, gb]
        })
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        record_unchecked(value, &[self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`; the axis is kept with length one when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("sum_axis", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(record_unchecked(value, &[self], move |g| {
            let g = g.data();
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    out[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), out))]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len))
    }

    fn extreme_axis(&self, axis: usize, keepdim: bool, take_max: bool) -> Result<Var> {
        check_axis("max/min", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * len * inner + i];
                let mut best_a = 0;
                for a in 1..len {
                    let v = src[(o * len + a) * inner + i];
                    if (take_max && v > best) || (!take_max && v < best) {
                        best = v;
                        best_a = a;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_a;
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(record_unchecked(value, &[self], move |g| {
            let g = g.data();
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let a = arg[o * inner + i];
                    out[(o * len + a) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), out))]
        }))
    }

    /// Maximum over `axis`; the gradient flows to the first maximizing entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        self.extreme_axis(axis, keepdim, true)
    }

    /// Minimum over `axis`; the gradient flows to the first minimizing entry.
    pub fn min_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        self.extreme_axis(axis, keepdim, false)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Var {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let y = std::rc::Rc::new(Tensor::from_parts(shape.clone(), out));
        let yc = y.clone();
        record_unchecked((*y).clone(), &[self], move |g| {
            let mut out = vec![0.0; g.numel()];
            for ((grow, yrow), orow) in g.data().chunks(n).zip(yc.data().chunks(n)).zip(out.chunks_mut(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), out))]
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} out of bounds on axis {axis}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        Ok(record_unchecked(value, &[self], move |g| {
            let mut out = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), out))]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[&Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        check_axis("concat", first.shape(), axis)?;
        let base_shape = first.shape();
        for v in &vars[1..] {
            let s = v.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let lens: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vars.iter().zip(&lens) {
                let d = v.value.data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape.to_vec();
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, out);
        let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape().to_vec()).collect();
        let reqs: Vec<bool> = vars.iter().map(|v| v.requires_grad()).collect();
        record(value, vars, move |g| {
            let g = g.data();
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(&reqs)
                .map(|((gv, s), &r)| r.then(|| Tensor::from_parts(s.clone(), gv)))
                .collect()
        })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn broadcasting_add_and_grad() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Tensor::new(&[3], vec![10., 20., 30.]).unwrap());
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let g = c.sum().backward().unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.get(&a).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn column_broadcast() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Tensor::new(&[2, 1], vec![2., 3.]).unwrap());
        let c = a.mul(&b).unwrap();
        assert_eq!(c.value().data(), &[2., 4., 6., 12., 15., 18.]);
        let g = c.sum().backward().unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[6., 15.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn ln_and_div_reject_exact_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_slice(&[1.0, 0.0]));
        assert!(z.ln().is_err());
        let one = tape.constant(Tensor::from_slice(&[1.0, 1.0]));
        assert!(one.div(&z).is_err());
        assert!(z.add_scalar(1e-8).ln().is_ok());
    }

    #[test]
    fn uniform_softmax() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(x.softmax().value().data(), &[0.25; 4]);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap());
        let l = x.narrow(1, 0, 1).unwrap();
        let r = x.narrow(1, 1, 3).unwrap();
        let y = crate::autodiff::Var::concat(&[&l, &r], 1).unwrap();
        assert_eq!(y.value(), x.value());
        let g = y.scale(2.0).sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0; 8]);
    }

    #[test]
    fn max_min_reductions() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], vec![1., 5., 2., 7., 0., 3.]).unwrap());
        assert_eq!(x.max_axis(1, false).unwrap().value().data(), &[5., 7.]);
        let mn = x.min_axis(0, false).unwrap();
        assert_eq!(mn.value().data(), &[1., 0., 2.]);
        let g = mn.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1., 0., 1., 0., 1., 0.]);
    }
}
