//! Forward and backward kernels on plain tensors.

use super::{Real, Tensor};
use crate::error::{Error, Result};

fn last_dim<R: Real>(op: &'static str, x: &Tensor<R>) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid(op, "expected at least one dimension"))
}

pub(super) fn same_shape<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![R::zero(); m * n];
    R::gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out, false);
    Tensor::new(&[m, n], out)
}

/// Gradients of `a·b` given the upstream gradient of the product.
pub(super) fn matmul_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    grad: &Tensor<R>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<R>>, Option<Tensor<R>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = need_a.then(|| {
        let mut out = vec![R::zero(); m * k];
        // dA = dC · Bᵀ
        R::gemm(m, n, k, grad.data(), (n as isize, 1), b.data(), (1, n as isize), &mut out, false);
        Tensor::new(&[m, k], out).expect("shape")
    });
    let gb = need_b.then(|| {
        let mut out = vec![R::zero(); k * n];
        // dB = Aᵀ · dC
        R::gemm(k, m, n, a.data(), (1, k as isize), grad.data(), (n as isize, 1), &mut out, false);
        Tensor::new(&[k, n], out).expect("shape")
    });
    (ga, gb)
}

pub(super) fn batch_matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(Error::shape("batch_matmul", sa, sb));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![R::zero(); bs * m * n];
    for i in 0..bs {
        R::gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
            &b.data()[i * k * n..(i + 1) * k * n],
            (n as isize, 1),
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Tensor::new(&[bs, m, n], out)
}

pub(super) fn batch_matmul_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    grad: &Tensor<R>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<R>>, Option<Tensor<R>>) {
    let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let ga = need_a.then(|| {
        let mut out = vec![R::zero(); bs * m * k];
        for i in 0..bs {
            R::gemm(
                m,
                n,
                k,
                &grad.data()[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                (1, n as isize),
                &mut out[i * m * k..(i + 1) * m * k],
                false,
            );
        }
        Tensor::new(&[bs, m, k], out).expect("shape")
    });
    let gb = need_b.then(|| {
        let mut out = vec![R::zero(); bs * k * n];
        for i in 0..bs {
            R::gemm(
                k,
                m,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                (1, k as isize),
                &grad.data()[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
                &mut out[i * k * n..(i + 1) * k * n],
                false,
            );
        }
        Tensor::new(&[bs, k, n], out).expect("shape")
    });
    (ga, gb)
}

pub(super) fn add_bias<R: Real>(x: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let n = last_dim("add_bias", x)?;
    if bias.shape() != [n] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

pub(super) fn column_sum<R: Real>(grad: &Tensor<R>, n: usize) -> Tensor<R> {
    let mut out = vec![R::zero(); n];
    for row in grad.data().chunks_exact(n) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o = *o + g;
        }
    }
    Tensor::new(&[n], out).expect("shape")
}

pub(super) fn permute<R: Real>(x: &Tensor<R>, axes: &[usize]) -> Result<Tensor<R>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let src = x.data();
    for _ in 0..x.numel() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub(super) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(super) fn gelu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let half = R::from_f64_lossy(0.5);
    let inv_sqrt2 = R::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (R::one() + (v * inv_sqrt2).erf()))
}

pub(super) fn gelu_backward<R: Real>(x: &Tensor<R>, grad: &Tensor<R>) -> Tensor<R> {
    let half = R::from_f64_lossy(0.5);
    let inv_sqrt2 = R::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let pdf = R::from_f64_lossy(FRAC_1_SQRT_2PI);
    x.zip_map(grad, |v, g| {
        let cdf = half * (R::one() + (v * inv_sqrt2).erf());
        g * (cdf + v * pdf * (-half * v * v).exp())
    })
    .expect("shape")
}

/// Softmax over the last dimension, stabilized by subtracting the row maximum.
pub fn softmax_rows<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let n = last_dim("softmax_rows", x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
        let mut total = R::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

pub(super) fn softmax_backward<R: Real>(y: &Tensor<R>, grad: &Tensor<R>) -> Tensor<R> {
    let n = *y.shape().last().expect("rank");
    let mut out = grad.clone();
    for (row, yrow) in out.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
        let dot: R = row.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
        for (g, &p) in row.iter_mut().zip(yrow) {
            *g = p * (*g - dot);
        }
    }
    out
}

pub(super) const LAYERNORM_EPS: f64 = 1e-6;

/// Returns the output, the normalized input and the per-row inverse std.
pub(super) fn layernorm<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    bias: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>, Vec<R>)> {
    let d = last_dim("layernorm", x)?;
    if d < 2 {
        return Err(Error::invalid("layernorm", "feature dimension must be at least 2"));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    let eps = R::from_f64_lossy(LAYERNORM_EPS);
    let dn = R::from_usize(d).expect("dim");
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.numel() / d);
    for row in xhat.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().copied().sum::<R>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
        let inv = R::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok((out, xhat, inv_std))
}

pub(super) fn layernorm_backward<R: Real>(
    xhat: &Tensor<R>,
    inv_std: &[R],
    gain: &Tensor<R>,
    grad: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let d = gain.numel();
    let dn = R::from_usize(d).expect("dim");
    let mut dx = grad.clone();
    let mut dgain = vec![R::zero(); d];
    let mut dbias = vec![R::zero(); d];
    for ((row, xrow), &inv) in dx
        .data_mut()
        .chunks_exact_mut(d)
        .zip(xhat.data().chunks_exact(d))
        .zip(inv_std)
    {
        let mut sum_dxhat = R::zero();
        let mut sum_dxhat_xhat = R::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + row[j] * xrow[j];
            dbias[j] = dbias[j] + row[j];
            let dxh = row[j] * gain.data()[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xrow[j];
        }
        for j in 0..d {
            let dxh = row[j] * gain.data()[j];
            row[j] = inv / dn * (dn * dxh - sum_dxhat - xrow[j] * sum_dxhat_xhat);
        }
    }
    (
        dx,
        Tensor::new(&[d], dgain).expect("shape"),
        Tensor::new(&[d], dbias).expect("shape"),
    )
}

pub(super) fn mean_axis<R: Real>(x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid("mean_axis", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let scale = R::one() / R::from_usize(len).expect("len");
    let mut out = vec![R::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc = *acc + v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * scale);
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Tensor::new(&out_shape, out)
}

pub(super) fn mean_axis_backward<R: Real>(in_shape: &[usize], axis: usize, grad: &Tensor<R>) -> Tensor<R> {
    let outer: usize = in_shape[..axis].iter().product();
    let len = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let scale = R::one() / R::from_usize(len).expect("len");
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend(grad.data()[o * inner..(o + 1) * inner].iter().map(|&g| g * scale));
        }
    }
    Tensor::new(in_shape, out).expect("shape")
}

pub(super) fn l2_norm<R: Real>(x: &Tensor<R>) -> R {
    x.data().iter().map(|&v| v * v).sum::<R>().sqrt()
}

/// Neumaier-compensated dot product. The cosine loss sits close to 1, so
/// plain summation noise would dominate finite differences of it.
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let (mut sum, mut comp) = (R::zero(), R::zero());
    for (&x, &y) in a.iter().zip(b) {
        let term = x * y;
        let t = sum + term;
        comp = comp
            + if sum.abs() >= term.abs() {
                (sum - t) + term
            } else {
                (term - t) + sum
            };
        sum = t;
    }
    sum + comp
}

/// `(a·b) / (‖a‖‖b‖ + eps)` over the flattened tensors.
pub fn cosine_similarity<R: Real>(a: &Tensor<R>, b: &Tensor<R>, eps: R) -> Result<R> {
    if a.numel() != b.numel() {
        return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
    }
    Ok(cosine_slices(a.data(), b.data(), eps))
}

fn cosine_slices<R: Real>(a: &[R], b: &[R], eps: R) -> R {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / (na * nb + eps)
}

/// Adds `scale · ∂cos/∂a` and `scale · ∂cos/∂b` into the given buffers.
fn cosine_slices_backward<R: Real>(
    a: &[R],
    b: &[R],
    eps: R,
    scale: R,
    ga: Option<&mut [R]>,
    gb: Option<&mut [R]>,
) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let ab = dot(a, b);
    let den = na * nb + eps;
    let fill = |x: &[R], y: &[R], nx: R, ny: R, out: &mut [R]| {
        // ∂/∂x [x·y / (‖x‖‖y‖+eps)] = y/den − (x·y)(‖y‖/‖x‖) x / den²
        let radial = if nx > R::zero() {
            ab * ny / (nx * den * den)
        } else {
            R::zero()
        };
        for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
            *o = *o + scale * (yi / den - radial * xi);
        }
    };
    if let Some(out) = ga {
        fill(a, b, na, nb, out);
    }
    if let Some(out) = gb {
        fill(b, a, nb, na, out);
    }
}

pub(super) fn cosine_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    eps: R,
    upstream: R,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<R>>, Option<Tensor<R>>) {
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    cosine_slices_backward(
        a.data(),
        b.data(),
        eps,
        upstream,
        ga.as_mut().map(|t| t.data_mut()),
        gb.as_mut().map(|t| t.data_mut()),
    );
    (ga, gb)
}

pub(super) fn cosine_rows<R: Real>(a: &Tensor<R>, b: &Tensor<R>, eps: R) -> Result<Tensor<R>> {
    same_shape("cosine_rows", a, b)?;
    let d = last_dim("cosine_rows", a)?;
    let rows = a.numel() / d;
    let out = a
        .data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| cosine_slices(x, y, eps))
        .collect();
    Tensor::new(&[rows], out)
}

pub(super) fn cosine_rows_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    eps: R,
    grad: &Tensor<R>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<R>>, Option<Tensor<R>>) {
    let d = *a.shape().last().expect("rank");
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    for (i, &g) in grad.data().iter().enumerate() {
        let span = i * d..(i + 1) * d;
        cosine_slices_backward(
            &a.data()[span.clone()],
            &b.data()[span.clone()],
            eps,
            g,
            ga.as_mut().map(|t| &mut t.data_mut()[span.clone()]),
            gb.as_mut().map(|t| &mut t.data_mut()[span.clone()]),
        );
    }
    (ga, gb)
}
