//! Differentiable ops on [`Var`]. Shapes are explicit: apart from the
//! trailing-dimension affine in `add_bias`/`layer_norm` and the scalar in
//! `mul_scalar`, operands must match exactly.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{split_axis, strides, Tensor};
use crate::error::{bail, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = op(a) * op(b)` for logical shapes a:[m,k], b:[k,n], c:[m,n].
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above, and `c` does
    // not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

fn last_dim(op: &str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) => Ok(d),
        None => bail!(Dimension, "{op}: needs at least one dimension"),
    }
}

fn check_axis(op: &str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        bail!(Dimension, "{op}: axis {axis} out of range for shape {:?}", t.shape());
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(
        self,
        out: Vec<f64>,
        grad: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(Tensor::raw(x.shape().to_vec(), out));
        let y_saved = Rc::clone(&y);
        self.tape.push(y, &[self], move |g| vec![grad(x.data(), y_saved.data(), g)])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.tape
            .push(Tensor::raw(a.shape().to_vec(), out), &[self, other], |g| vec![g.to_vec(), g.to_vec()])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.tape.push(Tensor::raw(a.shape().to_vec(), out), &[self, other], |g| {
            vec![g.to_vec(), g.iter().map(|v| -v).collect()]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let shape = a.shape().to_vec();
        self.tape.push(Tensor::raw(shape, out), &[self, other], move |g| {
            let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![ga, gb]
        })
    }

    /// Multiplies every element by the scalar held in `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            bail!(Dimension, "mul_scalar: factor has shape {:?}", sv.shape());
        }
        let k = sv.data()[0];
        let out = a.data().iter().map(|x| x * k).collect();
        self.tape.push(Tensor::raw(a.shape().to_vec(), out), &[self, s], move |g| {
            let ga = g.iter().map(|g| g * k).collect();
            let gs = g.iter().zip(a.data()).map(|(g, x)| g * x).sum();
            vec![ga, vec![gs]]
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.data().iter().map(|v| v * c).collect();
        self.unary(out, move |_, _, g| g.iter().map(|g| g * c).collect())
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.value().data().iter().map(|v| v.exp()).collect();
        self.unary(out, |_, y, g| g.iter().zip(y).map(|(g, y)| g * y).collect())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(self, floor: f64) -> Result<Var<'t>> {
        let out = self.value().data().iter().map(|v| v.max(floor).ln()).collect();
        self.unary(out, move |x, _, g| {
            g.iter().zip(x).map(|(g, &x)| if x > floor { g / x } else { 0.0 }).collect()
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        let out = self
            .value()
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.unary(out, |x, _, g| {
            g.iter()
                .zip(x)
                .map(|(g, &x)| {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                })
                .collect()
        })
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(self, lambda: f64) -> Result<Var<'t>> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            bail!(Config, "gradient reversal needs lambda > 0, got {lambda}");
        }
        let out = self.value().data().to_vec();
        self.unary(out, move |_, _, g| g.iter().map(|g| -lambda * g).collect())
    }

    /// Stop-gradient copy.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// Element-wise product with a constant of identical shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        same_shape("mul_const", &x, c)?;
        let c = c.data().to_vec();
        let out = x.data().iter().zip(&c).map(|(x, c)| x * c).collect();
        self.unary(out, move |_, _, g| g.iter().zip(&c).map(|(g, c)| g * c).collect())
    }

    /// Element-wise sum with a constant of identical shape.
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        same_shape("add_const", &x, c)?;
        let out = x.data().iter().zip(c.data()).map(|(x, c)| x + c).collect();
        self.unary(out, |_, _, g| g.to_vec())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            bail!(Dimension, "matmul: {:?} x {:?}", a.shape(), b.shape());
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out);
        self.tape.push(Tensor::raw(vec![m, n], out), &[self, other], move |g| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, b.data(), true, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, a.data(), true, g, false, &mut gb);
            vec![ga, gb]
        })
    }

    /// Batched product over the leading axis: `[G,m,k] x [G,k,n] -> [G,m,n]`.
    /// With `transpose_rhs` the right operand is given as `[G,n,k]`.
    pub fn bmm(self, other: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
            bail!(Dimension, "bmm: {:?} x {:?}", a.shape(), b.shape());
        }
        let (groups, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if transpose_rhs { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
        if bk != k {
            bail!(Dimension, "bmm: inner extents {k} and {bk} differ");
        }
        let mut out = vec![0.0; groups * m * n];
        for gi in 0..groups {
            gemm(
                m,
                k,
                n,
                &a.data()[gi * m * k..],
                false,
                &b.data()[gi * k * n..],
                transpose_rhs,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        self.tape.push(Tensor::raw(vec![groups, m, n], out), &[self, other], move |g| {
            let mut ga = vec![0.0; groups * m * k];
            let mut gb = vec![0.0; groups * k * n];
            for gi in 0..groups {
                let gs = &g[gi * m * n..(gi + 1) * m * n];
                let av = &a.data()[gi * m * k..(gi + 1) * m * k];
                let bv = &b.data()[gi * k * n..(gi + 1) * k * n];
                // dA = dC * B^T
                gemm(m, n, k, gs, false, bv, !transpose_rhs, &mut ga[gi * m * k..(gi + 1) * m * k]);
                let gbs = &mut gb[gi * k * n..(gi + 1) * k * n];
                if transpose_rhs {
                    // stored [n,k]: dC^T * A
                    gemm(n, m, k, gs, true, av, false, gbs);
                } else {
                    gemm(k, m, n, av, true, gs, false, gbs);
                }
            }
            vec![ga, gb]
        })
    }

    /// Adds a `[d]` bias along the trailing dimension.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let d = last_dim("add_bias", &x)?;
        if b.shape() != [d] {
            bail!(Dimension, "add_bias: bias {:?} for input {:?}", b.shape(), x.shape());
        }
        let out = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % d]).collect();
        self.tape.push(Tensor::raw(x.shape().to_vec(), out), &[self, bias], move |g| {
            let mut gb = vec![0.0; d];
            for row in g.chunks_exact(d) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            vec![g.to_vec(), gb]
        })
    }

    /// Normalizes each trailing-dim slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = last_dim("layer_norm", &x)?;
        if d < 2 {
            bail!(Dimension, "layer_norm: trailing extent must be at least 2");
        }
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            bail!(Dimension, "layer_norm: affine shapes {:?}/{:?} for d={d}", gv.shape(), bv.shape());
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let s = &x.data()[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (s[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.push(Tensor::raw(x.shape().to_vec(), out), &[self, gain, bias], move |g| {
            let mut gx = vec![0.0; rows * d];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            let gain = gv.data();
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..d {
                    let dh = gr[j] * gain[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for j in 0..d {
                    let dh = gr[j] * gain[j];
                    gx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![gx, gg, gb]
        })
    }

    /// Softmax over the trailing dimension, max-subtracted.
    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = last_dim("softmax", &x)?;
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_into(src, dst);
        }
        self.unary(out, move |_, y, g| {
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            gx
        })
    }

    pub fn log_softmax_lastdim(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = last_dim("log_softmax", &x)?;
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v - lse);
        }
        self.unary(out, move |_, y, g| {
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    dst[j] = gr[j] - yr[j].exp() * total;
                }
            }
            gx
        })
    }

    /// Divides each trailing-dim slice by its sum. Slices must have a positive sum.
    pub fn normalize_sum_lastdim(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = last_dim("normalize_sum", &x)?;
        let mut sums = Vec::with_capacity(x.numel() / d);
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let s: f64 = src.iter().sum();
            if s <= 0.0 {
                bail!(Contract, "normalize_sum: slice sum {s} is not positive");
            }
            sums.push(s);
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v / s);
        }
        self.unary(out, move |_, y, g| {
            let mut gx = vec![0.0; y.len()];
            for (r, ((yr, gr), dst)) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dst[j] = (gr[j] - dot) / sums[r];
                }
            }
            gx
        })
    }

    /// Scales each trailing-dim slice to unit Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize_lastdim(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = last_dim("l2_normalize", &x)?;
        let mut norms = Vec::with_capacity(x.numel() / d);
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = n.max(eps);
            norms.push(n);
            dst.iter_mut().zip(src).for_each(|(o, v)| *o = v / n);
        }
        self.unary(out, move |_, y, g| {
            let mut gx = vec![0.0; y.len()];
            for (r, ((yr, gr), dst)) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                let clamped = norms[r] <= eps;
                let dot: f64 = if clamped { 0.0 } else { yr.iter().zip(gr).map(|(y, g)| y * g).sum() };
                for j in 0..d {
                    dst[j] = (gr[j] - yr[j] * dot) / norms[r];
                }
            }
            gx
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&d| d == 0) {
            bail!(Dimension, "reshape: {:?} -> {:?}", x.shape(), shape);
        }
        self.tape.push(Tensor::raw(shape, x.data().to_vec()), &[self], |g| vec![g.to_vec()])
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            bail!(Dimension, "permute: {axes:?} is not a permutation of rank {nd}");
        }
        let in_strides = strides(x.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        // For each output position, the flat source index.
        let gather: Rc<Vec<usize>> = Rc::new(permute_indices(&out_shape, axes, &in_strides));
        let out = gather.iter().map(|&i| x.data()[i]).collect();
        let n = x.numel();
        self.tape.push(Tensor::raw(out_shape, out), &[self], move |g| {
            let mut gx = vec![0.0; n];
            for (o, &src) in gather.iter().enumerate() {
                gx[src] = g[o];
            }
            vec![gx]
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.numel();
        let s = x.data().iter().sum();
        self.tape.push(Tensor::raw(Vec::new(), vec![s]), &[self], move |g| vec![vec![g[0]; n]])
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum_axis", &x, axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(Tensor::raw(shape, out), &[self], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![gx]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("mean_axis", &x, axis)?;
        let len = x.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / len)
    }

    /// Max along an axis; the gradient goes to the first maximal element.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("max_axis", &x, axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x.data()[(o * len + a) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = (o * len + a) * inner + i;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let n = x.numel();
        self.tape.push(Tensor::raw(shape, out), &[self], move |g| {
            let mut gx = vec![0.0; n];
            for (o, &src) in arg.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![gx]
        })
    }

    /// Inserts a new axis at `axis` holding `count` copies.
    pub fn repeat_axis(self, axis: usize, count: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis > x.ndim() || count == 0 {
            bail!(Dimension, "repeat_axis: axis {axis} count {count} for {:?}", x.shape());
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let src = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                out.extend_from_slice(src);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, count);
        self.tape.push(Tensor::raw(shape, out), &[self], move |g| {
            let mut gx = vec![0.0; outer * inner];
            for o in 0..outer {
                for c in 0..count {
                    let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                    gx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            vec![gx]
        })
    }

    /// Picks one index along an axis, dropping that axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("select", &x, axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if index >= len {
            bail!(Dimension, "select: index {index} out of range {len}");
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * len + index) * inner..(o * len + index + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.tape.push(Tensor::raw(shape, out), &[self], move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                gx[(o * len + index) * inner..(o * len + index + 1) * inner]
                    .copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
            vec![gx]
        })
    }

    /// Diagonal of a square matrix.
    pub fn diag(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 || x.shape()[0] != x.shape()[1] {
            bail!(Dimension, "diag: needs a square matrix, got {:?}", x.shape());
        }
        let n = x.shape()[0];
        let out = (0..n).map(|i| x.data()[i * n + i]).collect();
        self.tape.push(Tensor::raw(vec![n], out), &[self], move |g| {
            let mut gx = vec![0.0; n * n];
            for i in 0..n {
                gx[i * n + i] = g[i];
            }
            vec![gx]
        })
    }

    /// Row lookup into a `[V, d]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.ndim() != 2 || ids.is_empty() {
            bail!(Dimension, "gather_rows: table {:?}, {} ids", table.shape(), ids.len());
        }
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            bail!(Input, "gather_rows: id {bad} out of range {rows}");
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.tape.push(Tensor::raw(vec![ids.len(), d], out), &[self], move |g| {
            let mut gt = vec![0.0; rows * d];
            for (r, &i) in ids.iter().enumerate() {
                gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, v)| *a += v);
            }
            vec![gt]
        })
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        bail!(Dimension, "concat: no inputs");
    };
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &values[0], axis)?;
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            bail!(Dimension, "concat: {:?} does not match {:?} off axis {axis}", s, base);
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    first.tape.push(Tensor::raw(shape, out), parts, move |g| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gp, &len) in grads.iter_mut().zip(&lens) {
                gp.extend_from_slice(&g[pos..pos + len * inner]);
                pos += len * inner;
            }
        }
        grads
    })
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

fn permute_indices(out_shape: &[usize], axes: &[usize], in_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; out_shape.len()];
    let mut result = Vec::with_capacity(n);
    let mut flat = 0usize;
    for _ in 0..n {
        result.push(flat);
        // odometer increment
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    result
}
