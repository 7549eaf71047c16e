//! Tensor primitives not covered efficiently by candle's CPU backend.
//!
//! Each op here is a custom candle op with a hand-written backward pass:
//! a same-padded stride-1 convolution (im2col plus single-threaded GEMM),
//! group normalization with an optional fused SiLU, and 2× nearest
//! upsampling. Everything runs single-threaded so results are
//! bit-reproducible.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Result, Shape, Tensor, WithDType};
use gemm::Parallelism;

const NORM_EPS: f64 = 1e-5;

/// Same-padded stride-1 convolution of `x: (B, Cin, H, W)` with
/// `weight: (Cout, Cin, k, k)` for odd `k`, plus a per-channel `bias: (Cout)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv)
}

/// `1 / (1 + e^{-x})`, built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Group normalization over `(B, C, H, W)` with per-channel affine terms.
/// Statistics come from the current call only.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    norm_op(x, groups, gamma, beta, false)
}

/// `silu(group_norm(x))` in one pass.
pub fn group_norm_silu(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    norm_op(x, groups, gamma, beta, true)
}

fn norm_op(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, silu: bool) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.dims() != [c] || beta.dims() != [c] {
        candle_core::bail!("group_norm: {c} channels, {groups} groups, gamma {:?}, beta {:?}", gamma.dims(), beta.dims());
    }
    let affine = Tensor::stack(&[gamma, beta], 0)?;
    x.contiguous()?.apply_op2(&affine, GroupNorm { groups, silu })
}

/// Nearest-neighbour upsampling of `(B, C, H, W)` to `(B, C, 2H, 2W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom ops expect contiguous operands"),
    }
}

/// Runs `$body` with `$T` bound to the float type stored in `$storage`.
macro_rules! float_op {
    ($storage:expr, |$T:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(_) => {
                type $T = f32;
                $body
            }
            CpuStorage::F64(_) => {
                type $T = f64;
                $body
            }
            _ => candle_core::bail!("only f32 and f64 tensors are supported"),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl ConvGeom {
    fn new(x: &Shape, weight: &Shape) -> Result<Self> {
        let (batch, c_in, h, w) = x.dims4()?;
        let (c_out, wc_in, k, k2) = weight.dims4()?;
        if wc_in != c_in || k != k2 || k % 2 == 0 {
            candle_core::bail!("conv2d: input {x:?} incompatible with weight {weight:?}");
        }
        Ok(Self { batch, c_in, c_out, k, h, w })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Lays out the `k×k` neighbourhoods of one image as a `(Cin·k·k, H·W)`
/// row-major matrix, zero outside the image.
fn im2col<T: WithDType>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = g.hw();
    cols.fill(T::from_f64(0.0));
    for ci in 0..g.c_in {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx.max(0)) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = (sy as usize * w) as isize + dx;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[(s + x0 as isize) as usize..(s + x1 as isize) as usize]);
                }
            }
        }
    }
}

/// Row-major `dst (m×n) [+]= lhs (m×k) · rhs (k×n)` where each operand is
/// described by its (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_strides: (usize, usize),
    rhs: &[T],
    rhs_strides: (usize, usize),
) {
    assert!(dst.len() >= m * n);
    assert!(m == 0 || k == 0 || lhs.len() > (m - 1) * lhs_strides.0 + (k - 1) * lhs_strides.1);
    assert!(n == 0 || k == 0 || rhs.len() > (k - 1) * rhs_strides.0 + (n - 1) * rhs_strides.1);
    // SAFETY: the assertions above bound every index addressed by the given
    // dimensions and strides.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1 as isize,
            lhs_strides.0 as isize,
            rhs.as_ptr(),
            rhs_strides.1 as isize,
            rhs_strides.0 as isize,
            T::from_f64(1.0),
            T::from_f64(1.0),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn conv_forward<T: WithDType>(x: &[T], wt: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, rows) = (g.hw(), g.rows());
    let mut out = vec![T::from_f64(0.0); g.batch * g.c_out * hw];
    let mut cols = vec![T::from_f64(0.0); if g.k == 1 { 0 } else { rows * hw }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let cols: &[T] = if g.k == 1 {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        for (row, &bv) in ob.chunks_mut(hw).zip(bias) {
            row.fill(bv);
        }
        matmul(g.c_out, hw, rows, ob, true, wt, (rows, 1), cols, (hw, 1));
    }
    out
}

/// The adjoint of a same-padded correlation is the same-padded correlation
/// of the output gradient with the spatially flipped, channel-transposed
/// kernel.
fn conv_grad_input<T: WithDType>(grad: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let k2 = g.k * g.k;
    let mut flipped = vec![T::from_f64(0.0); wt.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for j in 0..k2 {
                flipped[(ci * g.c_out + co) * k2 + (k2 - 1 - j)] = wt[(co * g.c_in + ci) * k2 + j];
            }
        }
    }
    let adjoint = ConvGeom { c_in: g.c_out, c_out: g.c_in, ..*g };
    conv_forward(grad, &flipped, &vec![T::from_f64(0.0); g.c_in], &adjoint)
}

fn conv_grad_weight<T: WithDType>(x: &[T], grad: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw, rows) = (g.hw(), g.rows());
    // Accumulated transposed, `(Cin·k·k, Cout)`, which GEMM handles faster.
    let mut acc = vec![T::from_f64(0.0); rows * g.c_out];
    let mut cols = vec![T::from_f64(0.0); if g.k == 1 { 0 } else { rows * hw }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let cols: &[T] = if g.k == 1 {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let gb = &grad[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        matmul(rows, g.c_out, hw, &mut acc, b > 0, cols, (hw, 1), gb, (1, hw));
    }
    let mut out = vec![T::from_f64(0.0); g.c_out * rows];
    for r in 0..rows {
        for co in 0..g.c_out {
            out[co * rows + r] = acc[r * g.c_out + co];
        }
    }
    out
}

fn channel_sums<T: WithDType>(grad: &[T], channels: usize, hw: usize) -> Vec<T> {
    let mut acc = vec![0f64; channels];
    for (i, plane) in grad.chunks(hw).enumerate() {
        acc[i % channels] += plane.iter().map(|v| v.to_f64()).sum::<f64>();
    }
    acc.into_iter().map(T::from_f64).collect()
}

struct Conv;

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "cts-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.shape(), l2.shape())?;
        if l3.shape().dims() != [g.c_out] {
            candle_core::bail!("conv2d: bias {:?} does not match {} output channels", l3.shape(), g.c_out);
        }
        let shape = Shape::from((g.batch, g.c_out, g.h, g.w));
        float_op!(s1, |T| {
            let out = conv_forward::<T>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, &g);
            Ok((T::to_cpu_storage_owned(out), shape))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(weight, &ConvGradInput { x_shape: x.shape().clone() })?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { w_shape: weight.shape().clone() })?;
        let gb = grad.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

struct ConvGradInput {
    x_shape: Shape,
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "cts-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(&self.x_shape, l2.shape())?;
        float_op!(s1, |T| {
            let out = conv_grad_input::<T>(slice(s1, l1)?, slice(s2, l2)?, &g);
            Ok((T::to_cpu_storage_owned(out), self.x_shape.clone()))
        })
    }
}

struct ConvGradWeight {
    w_shape: Shape,
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "cts-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.shape(), &self.w_shape)?;
        float_op!(s1, |T| {
            let out = conv_grad_weight::<T>(slice(s1, l1)?, slice(s2, l2)?, &g);
            Ok((T::to_cpu_storage_owned(out), self.w_shape.clone()))
        })
    }
}

/// Sum over batch and spatial axes of `(B, C, H, W)`, giving `(C)`.
struct ChannelSum;

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "cts-channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l.shape().dims4()?;
        float_op!(s, |T| {
            let out = channel_sums::<T>(slice(s, l)?, c, h * w);
            Ok((T::to_cpu_storage_owned(out), Shape::from(c)))
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct NormGeom {
    batch: usize,
    channels: usize,
    groups: usize,
    hw: usize,
}

impl NormGeom {
    fn new(x: &Shape, groups: usize) -> Result<Self> {
        let (batch, channels, h, w) = x.dims4()?;
        Ok(Self { batch, channels, groups, hw: h * w })
    }

    fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    /// `(first channel, flat range)` of every `(batch, group)` block.
    fn blocks(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        let len = self.per_group() * self.hw;
        (0..self.batch * self.groups).map(move |i| ((i % self.groups) * self.per_group(), i * len..(i + 1) * len))
    }

    fn stats<T: WithDType>(&self, block: &[T]) -> (f64, f64) {
        let n = block.len() as f64;
        let mean = block.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = block.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + NORM_EPS).sqrt())
    }
}

/// Float element types the custom ops compute in natively.
trait Real: WithDType + std::ops::Neg<Output = Self> {
    fn exp(self) -> Self;
}

impl Real for f32 {
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// `(silu(y), silu'(y))`.
fn silu_parts<T: Real>(y: T) -> (T, T) {
    let one = T::from_f64(1.0);
    let s = one / (one + (-y).exp());
    (y * s, s * (one + y * (one - s)))
}

fn norm_forward<T: Real>(x: &[T], affine: &[T], g: &NormGeom, silu: bool) -> Vec<T> {
    let (gamma, beta) = affine.split_at(g.channels);
    let mut out = vec![T::from_f64(0.0); x.len()];
    for (c0, range) in g.blocks() {
        let (mean, inv_std) = g.stats(&x[range.clone()]);
        let planes = out[range.clone()].chunks_mut(g.hw).zip(x[range].chunks(g.hw));
        for (c, (o, v)) in (c0..).zip(planes) {
            let scale = inv_std * gamma[c].to_f64();
            let shift = T::from_f64(beta[c].to_f64() - mean * scale);
            let scale = T::from_f64(scale);
            for (o, &v) in o.iter_mut().zip(v) {
                let y = v * scale + shift;
                *o = if silu { silu_parts(y).0 } else { y };
            }
        }
    }
    out
}

/// Returns `[dx; dgamma; dbeta]` flattened into one vector.
fn norm_backward<T: Real>(x: &[T], affine: &[T], grad: &[T], g: &NormGeom, silu: bool) -> Vec<T> {
    let (gamma, beta) = affine.split_at(g.channels);
    let mut dx = vec![T::from_f64(0.0); x.len()];
    let mut dgamma = vec![0f64; g.channels];
    let mut dbeta = vec![0f64; g.channels];
    let mut xhat = vec![T::from_f64(0.0); g.per_group() * g.hw];
    let mut dxhat = vec![T::from_f64(0.0); g.per_group() * g.hw];
    for (c0, range) in g.blocks() {
        let (mean, inv_std) = g.stats(&x[range.clone()]);
        let planes = x[range.clone()].chunks(g.hw).zip(grad[range.clone()].chunks(g.hw));
        let scratch = xhat.chunks_mut(g.hw).zip(dxhat.chunks_mut(g.hw));
        for (c, ((xs, gs), (xh, dxh))) in (c0..).zip(planes.zip(scratch)) {
            let (gm, bt) = (gamma[c], beta[c]);
            let (mean, inv_std) = (T::from_f64(mean), T::from_f64(inv_std));
            let (mut dg, mut db) = (0.0, 0.0);
            for (((&v, &gr), xh), dxh) in xs.iter().zip(gs).zip(xh.iter_mut()).zip(dxh.iter_mut()) {
                *xh = (v - mean) * inv_std;
                let dy = if silu { gr * silu_parts(*xh * gm + bt).1 } else { gr };
                dg += (dy * *xh).to_f64();
                db += dy.to_f64();
                *dxh = dy * gm;
            }
            dgamma[c] += dg;
            dbeta[c] += db;
        }
        let n = xhat.len() as f64;
        let mean_d = T::from_f64(dxhat.iter().map(|d| d.to_f64()).sum::<f64>() / n);
        let mean_dx = T::from_f64(dxhat.iter().zip(&xhat).map(|(&d, &x)| (d * x).to_f64()).sum::<f64>() / n);
        let inv_std = T::from_f64(inv_std);
        for ((o, &d), &xh) in dx[range].iter_mut().zip(&dxhat).zip(&xhat) {
            *o = inv_std * (d - mean_d - xh * mean_dx);
        }
    }
    dx.into_iter().chain(dgamma.into_iter().chain(dbeta).map(T::from_f64)).collect()
}

struct GroupNorm {
    groups: usize,
    silu: bool,
}

impl CustomOp2 for GroupNorm {
    fn name(&self) -> &'static str {
        "cts-group-norm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = NormGeom::new(l1.shape(), self.groups)?;
        float_op!(s1, |T| {
            let out = norm_forward::<T>(slice(s1, l1)?, slice(s2, l2)?, &g, self.silu);
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }

    fn bwd(&self, x: &Tensor, affine: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let op = GroupNormGrad { groups: self.groups, silu: self.silu };
        let flat = x.apply_op3_no_bwd(affine, &grad.contiguous()?, &op)?;
        let n = x.elem_count();
        let gx = flat.narrow(0, 0, n)?.reshape(x.shape())?;
        let ga = flat.narrow(0, n, affine.elem_count())?.reshape(affine.shape())?;
        Ok((Some(gx), Some(ga)))
    }
}

struct GroupNormGrad {
    groups: usize,
    silu: bool,
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "cts-group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = NormGeom::new(l1.shape(), self.groups)?;
        float_op!(s1, |T| {
            let out = norm_backward::<T>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, &g, self.silu);
            let len = out.len();
            Ok((T::to_cpu_storage_owned(out), Shape::from(len)))
        })
    }
}

fn upsample_forward<T: WithDType>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.chunks(h * w) {
        for row in plane.chunks(w) {
            let start = out.len();
            for &v in row {
                out.push(v);
                out.push(v);
            }
            out.extend_from_within(start..start + 2 * w);
        }
    }
    out
}

/// Adjoint of [`upsample_forward`]: sums each 2×2 block.
fn upsample_backward<T: WithDType>(grad: &[T], h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(grad.len() / 4);
    for plane in grad.chunks(h2 * w2) {
        for y in 0..h {
            let (r0, r1) = (&plane[2 * y * w2..][..w2], &plane[(2 * y + 1) * w2..][..w2]);
            for x in 0..w {
                out.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

struct Upsample2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "cts-upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        float_op!(s, |T| {
            let out = upsample_forward::<T>(slice(s, l)?, h, w);
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, 2 * h, 2 * w))))
        })
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Upsample2Grad)?))
    }
}

struct Upsample2Grad;

impl CustomOp1 for Upsample2Grad {
    fn name(&self) -> &'static str {
        "cts-upsample2x-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = l.shape().dims4()?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            candle_core::bail!("upsample gradient needs even sizes, got {h2}x{w2}");
        }
        float_op!(s, |T| {
            let out = upsample_backward::<T>(slice(s, l)?, h2 / 2, w2 / 2);
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, h2 / 2, w2 / 2))))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    /// Checks the analytic gradient of `sum(f(vars) * proj)` for every
    /// element of every variable against central differences.
    fn check_gradients(vars: &[&Var], f: impl Fn(&[Tensor]) -> Tensor, tol: f64) {
        let proj = randn(f(&vars.iter().map(|v| v.as_tensor().clone()).collect::<Vec<_>>()).dims(), 99);
        let objective = |ts: &[Tensor]| (f(ts) * &proj).unwrap().sum_all().unwrap();
        let base: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let grads = objective(&base).backward().unwrap();
        for (vi, var) in vars.iter().enumerate() {
            let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let flat: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[i] += delta;
                    let mut ts = base.clone();
                    ts[vi] = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap();
                    objective(&ts).to_scalar::<f64>().unwrap()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                assert!((fd - g[i]).abs() < tol * (1.0 + fd.abs()), "var {vi} elem {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn conv_matches_candle_reference() {
        for k in [1, 3, 5] {
            let x = randn(&[2, 3, 5, 6], 1);
            let w = randn(&[4, 3, k, k], 2);
            let b = randn(&[4], 3);
            let ours = conv2d(&x, &w, &b).unwrap();
            let theirs = x
                .conv2d(&w, k / 2, 1, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert!(max_diff(&ours, &theirs) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            let x = Var::from_tensor(&randn(&[2, 2, 4, 3], 3)).unwrap();
            let w = Var::from_tensor(&randn(&[3, 2, k, k], 4)).unwrap();
            let b = Var::from_tensor(&randn(&[3], 5)).unwrap();
            check_gradients(&[&x, &w, &b], |t| conv2d(&t[0], &t[1], &t[2]).unwrap(), 1e-7);
        }
    }

    /// Group norm from differentiable candle primitives.
    fn reference_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let grouped = x.reshape((b, groups, (c / groups) * h * w)).unwrap();
        let mean = grouped.mean_keepdim(2).unwrap();
        let centered = grouped.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(2).unwrap();
        let normed = centered.broadcast_div(&(var + NORM_EPS).unwrap().sqrt().unwrap()).unwrap();
        normed
            .reshape((b, c, h, w))
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn group_norm_matches_reference() {
        let x = randn(&[2, 6, 3, 4], 6);
        let gamma = randn(&[6], 7);
        let beta = randn(&[6], 8);
        for groups in [1, 2, 3, 6] {
            let expect = reference_norm(&x, groups, &gamma, &beta);
            assert!(max_diff(&group_norm(&x, groups, &gamma, &beta).unwrap(), &expect) < 1e-12);
            let fused = group_norm_silu(&x, groups, &gamma, &beta).unwrap();
            assert!(max_diff(&fused, &expect.silu().unwrap()) < 1e-12);
        }
        assert!(group_norm(&x, 4, &gamma, &beta).is_err());
    }

    #[test]
    fn group_norm_gradients() {
        let x = Var::from_tensor(&randn(&[2, 4, 3, 2], 9)).unwrap();
        let gamma = Var::from_tensor(&randn(&[4], 10)).unwrap();
        let beta = Var::from_tensor(&randn(&[4], 11)).unwrap();
        for silu in [false, true] {
            check_gradients(
                &[&x, &gamma, &beta],
                |t| norm_op(&t[0], 2, &t[1], &t[2], silu).unwrap(),
                1e-6,
            );
        }
    }

    #[test]
    fn upsample_matches_candle_and_has_adjoint_gradient() {
        let x = randn(&[2, 3, 3, 4], 12);
        let ours = upsample2x(&x).unwrap();
        assert!(max_diff(&ours, &x.upsample_nearest2d(6, 8).unwrap()) < 1e-15);
        let v = Var::from_tensor(&x).unwrap();
        check_gradients(&[&v], |t| upsample2x(&t[0]).unwrap(), 1e-7);
    }
}
