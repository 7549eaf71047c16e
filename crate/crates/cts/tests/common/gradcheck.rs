//! Central finite-difference checks of the hand-written backward passes.

use candle_core::{DType, Device, Tensor, Var};
use cts::networks::{channel_attention_fuse, consistency_forward, init_params, ArchitectureConfig, ChannelGate};
use cts::params::ModelParams;
use cts_core::ScheduleConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-2;
/// Absolute differences below this are float noise, not gradient errors.
const ABS_FLOOR: f64 = 1e-8;

pub fn uniform(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Largest errors seen by a gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    /// Over entries whose absolute error exceeds the float-noise floor.
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub entries: usize,
}

impl FdReport {
    fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            worst_rel: self.worst_rel.max(other.worst_rel),
            worst_abs: self.worst_abs.max(other.worst_abs),
            entries: self.entries + other.entries,
        }
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries, worst rel {:.2e}, worst abs {:.2e}",
            self.entries, self.worst_rel, self.worst_abs
        )
    }
}

/// Compares `analytic` against `(f(i, h) − f(i, −h)) / 2h`, failing on the
/// first entry off by more than the relative tolerance.
pub fn fd_compare(analytic: &[f64], f: impl Fn(usize, f64) -> f64, what: &str) -> Result<FdReport, String> {
    let mut report = FdReport { entries: analytic.len(), ..FdReport::default() };
    for (i, &a) in analytic.iter().enumerate() {
        let fd = (f(i, STEP) - f(i, -STEP)) / (2.0 * STEP);
        let err = (fd - a).abs();
        report.worst_abs = report.worst_abs.max(err);
        if err > ABS_FLOOR {
            let rel = err / fd.abs().max(a.abs());
            report.worst_rel = report.worst_rel.max(rel);
            if rel > TOLERANCE {
                return Err(format!("{what}[{i}]: finite difference {fd} vs analytic {a} (rel {rel:.3e})"));
            }
        }
    }
    Ok(report)
}

fn scalar(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn replaced(base: &[f64], i: usize, h: f64, like: &Tensor) -> Tensor {
    let mut v = base.to_vec();
    v[i] += h;
    Tensor::from_vec(v, like.shape(), &Device::Cpu).unwrap()
}

/// Gate parameters and both inputs of the channel-attention fusion, on 4×4
/// maps with 4 channels.
pub fn check_channel_attention_fuse() -> Result<FdReport, String> {
    let (c, r) = (4, 2);
    let (_, params) = ChannelGate::init(c, r, 3, DType::F64).unwrap();
    let u = uniform(&[2, c, 4, 4], 4, DType::F64);
    let s = uniform(&[2, c, 4, 4], 5, DType::F64);
    let proj = uniform(&[2, c, 4, 4], 6, DType::F64);
    let objective = |p: &ModelParams, u: &Tensor, s: &Tensor| -> f64 {
        let gate = ChannelGate::bind(p, "", c, r).unwrap();
        scalar((channel_attention_fuse(u, s, &gate).unwrap() * &proj).unwrap().sum_all().unwrap())
    };

    let vars = params.to_vars().unwrap();
    let uv = Var::from_tensor(&u).unwrap();
    let sv = Var::from_tensor(&s).unwrap();
    let gate = ChannelGate::bind(&params.with_vars(&vars).unwrap(), "", c, r).unwrap();
    let grads = (channel_attention_fuse(uv.as_tensor(), sv.as_tensor(), &gate).unwrap() * &proj)
        .unwrap()
        .sum_all()
        .unwrap()
        .backward()
        .unwrap();

    let mut worst = FdReport::default();
    for (k, (name, var)) in params.names().iter().zip(&vars).enumerate() {
        let base = to_vec(var.as_tensor());
        let e = fd_compare(
            &to_vec(grads.get(var).unwrap()),
            |i, h| {
                let mut ts = params.tensors().to_vec();
                ts[k] = replaced(&base, i, h, var.as_tensor());
                objective(&params.with_tensors(ts).unwrap(), &u, &s)
            },
            name,
        )?;
        worst = worst.merge(e);
    }
    let base_u = to_vec(&u);
    worst = worst.merge(fd_compare(
        &to_vec(grads.get(&uv).unwrap()),
        |i, h| objective(&params, &replaced(&base_u, i, h, &u), &s),
        "u",
    )?);
    let base_s = to_vec(&s);
    worst = worst.merge(fd_compare(
        &to_vec(grads.get(&sv).unwrap()),
        |i, h| objective(&params, &u, &replaced(&base_s, i, h, &s)),
        "s",
    )?);
    Ok(worst)
}

/// Depth-2, width-2 network on 4×4 inputs.
pub fn miniature_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        depth: 2,
        base_channels: 2,
        channel_mult: vec![1, 2],
        time_embed_dim: 4,
        attention_reduction: 2,
        norm_groups: 2,
        zero_init_output: false,
    }
}

/// Every parameter and both inputs of a miniature consistency function,
/// with and without multi-scale fusion.
pub fn check_consistency_forward() -> Result<FdReport, String> {
    let arch = miniature_arch();
    let sched = ScheduleConfig::default();
    let params = init_params(&arch, 11, DType::F64).unwrap();
    let x_n = (uniform(&[2, 1, 4, 4], 12, DType::F64) * 3.0).unwrap();
    let x_d = uniform(&[2, 1, 4, 4], 13, DType::F64);
    let p_y = uniform(&[2, 1, 4, 4], 14, DType::F64);
    let p_aux = uniform(&[2, 1, 4, 4], 15, DType::F64);
    let t = 2.5;
    let mut worst = FdReport::default();
    for multiscale in [true, false] {
        let objective = |p: &ModelParams, x_n: &Tensor, x_d: &Tensor| -> Tensor {
            let out = consistency_forward(p, &arch, &sched, x_n, x_d, t, multiscale).unwrap();
            let a = (out.y * &p_y).unwrap().sum_all().unwrap();
            let b = (out.aux_logits * &p_aux).unwrap().sum_all().unwrap();
            (a + b).unwrap()
        };
        let vars = params.to_vars().unwrap();
        let xv = Var::from_tensor(&x_n).unwrap();
        let dv = Var::from_tensor(&x_d).unwrap();
        let grads = objective(&params.with_vars(&vars).unwrap(), xv.as_tensor(), dv.as_tensor())
            .backward()
            .unwrap();
        let tag = if multiscale { "multiscale" } else { "no multiscale" };
        for (k, (name, var)) in params.names().iter().zip(&vars).enumerate() {
            let base = to_vec(var.as_tensor());
            let analytic = grads.get(var).map(to_vec).unwrap_or_else(|| vec![0.0; var.elem_count()]);
            let e = fd_compare(
                &analytic,
                |i, h| {
                    let mut ts = params.tensors().to_vec();
                    ts[k] = replaced(&base, i, h, var.as_tensor());
                    scalar(objective(&params.with_tensors(ts).unwrap(), &x_n, &x_d))
                },
                &format!("{name} ({tag})"),
            )?;
            worst = worst.merge(e);
        }
        let base = to_vec(&x_n);
        worst = worst.merge(fd_compare(
            &to_vec(grads.get(&xv).unwrap()),
            |i, h| scalar(objective(&params, &replaced(&base, i, h, &x_n), &x_d)),
            &format!("x_n ({tag})"),
        )?);
        let base = to_vec(&x_d);
        worst = worst.merge(fd_compare(
            &to_vec(grads.get(&dv).unwrap()),
            |i, h| scalar(objective(&params, &x_n, &replaced(&base, i, h, &x_d))),
            &format!("x_d ({tag})"),
        )?);
    }
    Ok(worst)
}
