//! The consistency-training loop: joint loss, AdamW on the online parameters,
//! a gradient-free target branch, and the EMA target update.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use cts_core::ema::ema_update;
use cts_core::objective::total_loss;
use cts_core::schedule::{ema_decay, karras_sigmas, step_schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{batch_indices, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::networks::{init_params, ConsistencyModel};
use crate::ops::sigmoid;
use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Optimizer steps K.
    pub total_steps: u64,
    /// Weight of the segmentation loss.
    pub alpha: f64,
    /// Constant weight λ of the consistency loss.
    pub lambda: f64,
    /// Validation every this many steps (0 = only at the end).
    pub eval_interval: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: u64,
    pub seed: u64,
    /// Fuse the encoder's multi-scale features into the denoiser.
    pub use_multiscale: bool,
    /// Reserved for a frequency-domain fusion variant; must stay false.
    pub use_fftp: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 4,
            total_steps: 5_000,
            alpha: 1.0,
            lambda: 1.0,
            eval_interval: 500,
            checkpoint_interval: 1_000,
            seed: 0,
            use_multiscale: true,
            use_fftp: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay and grad_clip must be >= 0, adam_eps > 0".into());
        }
        if self.use_fftp {
            return bad("use_fftp is reserved and not implemented".into());
        }
        Ok(())
    }
}

/// Per-step record written to the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_ct: f64,
    pub l_s: f64,
    pub l_total: f64,
    /// Sampled discretization index, 1-based in `1..N(k)`.
    pub n: u32,
    #[serde(rename = "N_k")]
    pub n_k: u32,
    pub mu_k: f64,
    pub wall_ms: f64,
}

/// Validation record written to the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub split: Split,
    pub dice: f64,
    pub iou: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub step: u64,
    pub online: Vec<Var>,
    pub target: ModelParams,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    /// Fresh state: `θ^TM ← θ^M`, zero moments, `k = 0`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let online = init_params(&cfg.arch, cfg.train.seed, DType::F32)?;
        Self::from_params(online, cfg.train.seed)
    }

    pub fn from_params(online: ModelParams, seed: u64) -> Result<Self> {
        let target = online.detached_copy()?;
        let zeros = || {
            online
                .tensors()
                .iter()
                .map(|t| Ok(t.zeros_like()?))
                .collect::<Result<Vec<_>>>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            step: 0,
            online: online.to_vars()?,
            adam_m: zeros()?,
            adam_v: zeros()?,
            target,
            rng,
        })
    }

    /// Online parameters as a named set sharing storage with the variables.
    pub fn online_params(&self) -> Result<ModelParams> {
        self.target.with_vars(&self.online)
    }
}

/// `λ · mean((y_online − y_target)²)`.
pub fn ct_loss(y_online: &Tensor, y_target: &Tensor, lambda: f64) -> Result<Tensor> {
    if y_online.dims() != y_target.dims() {
        return Err(Error::InvalidArgument(format!(
            "consistency loss operands differ: {:?} vs {:?}",
            y_online.dims(),
            y_target.dims()
        )));
    }
    Ok(((y_online - y_target)?.sqr()?.mean_all()? * lambda)?)
}

/// `mean((sigmoid(logits) − mask)²)` with `mask` in label space.
pub fn seg_loss(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if logits.dims() != mask.dims() {
        return Err(Error::InvalidArgument(format!(
            "segmentation loss operands differ: {:?} vs {:?}",
            logits.dims(),
            mask.dims()
        )));
    }
    let values: Vec<f64> = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("segmentation target value {v} is not 0 or 1")));
    }
    Ok((sigmoid(logits)? - mask)?.sqr()?.mean_all()?)
}

/// Elementwise `μ·θ_TM + (1−μ)·θ_M`, producing fresh untracked tensors.
pub fn ema_update_params(target: &ModelParams, online: &ModelParams, mu: f64) -> Result<ModelParams> {
    target.ensure_congruent(online)?;
    let tensors = target
        .tensors()
        .iter()
        .zip(online.tensors())
        .map(|(t, o)| {
            let mut buf: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let src: Vec<f32> = o.flatten_all()?.to_vec1()?;
            ema_update(&mut buf, &src, mu)?;
            Ok(Tensor::from_vec(buf, t.shape(), &Device::Cpu)?)
        })
        .collect::<Result<Vec<_>>>()?;
    target.with_tensors(tensors)
}

/// Internals of one step exposed for verification.
#[derive(Debug, Clone)]
pub struct StepProbe {
    /// The standard-normal draw shared by both noise levels.
    pub z: Tensor,
    pub t_n: f64,
    pub t_n1: f64,
    /// `x + t_{n+1}·z`, fed to the online model.
    pub online_input: Tensor,
    /// `x + t_n·z`, fed to the target model.
    pub target_input: Tensor,
    /// Sum of |gradient| over every target tensor (absent counts as zero).
    pub target_grad_abs_sum: f64,
    /// Online parameters right after the optimizer step.
    pub online_after: ModelParams,
    /// Target parameters before the EMA update.
    pub target_before: ModelParams,
}

/// Settings that stay fixed across steps.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub model: ConsistencyModel,
    pub train: TrainerConfig,
    /// Replaces the scheduled EMA decay (testing hook).
    pub mu_override: Option<f64>,
}

impl StepContext {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            model: cfg.model(),
            train: cfg.train.clone(),
            mu_override: None,
        }
    }
}

/// One iteration of consistency training; advances `state.step`.
pub fn train_step(state: &mut TrainerState, batch: &Batch, ctx: &StepContext) -> Result<LossBreakdown> {
    train_step_probed(state, batch, ctx).map(|(b, _)| b)
}

pub fn train_step_probed(
    state: &mut TrainerState,
    batch: &Batch,
    ctx: &StepContext,
) -> Result<(LossBreakdown, StepProbe)> {
    let started = Instant::now();
    let sched = &ctx.model.schedule;
    let k = state.step;
    if k >= sched.total_train_steps {
        return Err(Error::InvalidArgument(format!(
            "step {k} is past the planned {} steps",
            sched.total_train_steps
        )));
    }
    let n_k = step_schedule(k, sched)?;
    let sigmas = karras_sigmas(n_k as usize, sched)?;
    let n = state.rng.random_range(1..n_k);
    let (t_n, t_n1) = (sigmas[n as usize - 1], sigmas[n as usize]);

    let x = &batch.masks_encoded;
    let z: Vec<f32> = (0..x.elem_count())
        .map(|_| state.rng.sample::<f32, _>(StandardNormal))
        .collect();
    let z = Tensor::from_vec(z, x.shape(), &Device::Cpu)?;
    let online_input = (x + (&z * t_n1)?)?;
    let target_input = (x + (&z * t_n)?)?;

    let online = state.online_params()?;
    let out_online = ctx.model.forward(&online, &online_input, &batch.images, t_n1)?;
    let out_target = ctx.model.forward(&state.target, &target_input, &batch.images, t_n)?;

    let l_ct = ct_loss(&out_online.y, &out_target.y.detach(), ctx.train.lambda)?;
    let l_s = seg_loss(&out_online.aux_logits, &batch.masks)?;
    let objective = (&l_ct + (&l_s * ctx.train.alpha)?)?;
    let l_ct_v = l_ct.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let l_s_v = l_s.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let l_total = total_loss(l_ct_v, l_s_v, ctx.train.alpha);
    if !l_total.is_finite() {
        return Err(Error::NonFinite { step: k, l_ct: l_ct_v, l_s: l_s_v });
    }

    let grads = objective.backward()?;
    let mut target_grad_abs_sum = 0.0;
    for t in state.target.tensors() {
        if let Some(g) = grads.get(t) {
            target_grad_abs_sum += g.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let grad_list = state
        .online
        .iter()
        .map(|v| match grads.get(v) {
            Some(g) => Ok(g.clone()),
            None => Ok(v.zeros_like()?),
        })
        .collect::<Result<Vec<_>>>()?;
    adamw_step(state, &grad_list, &ctx.train)?;

    let online_after = state.online_params()?.detached_copy()?;
    let mu = match ctx.mu_override {
        Some(mu) => mu,
        None => ema_decay(k, sched)?,
    };
    let target_before = state.target.clone();
    state.target = ema_update_params(&state.target, &online_after, mu)?;
    state.step += 1;

    let breakdown = LossBreakdown {
        step: k,
        l_ct: l_ct_v,
        l_s: l_s_v,
        l_total,
        n,
        n_k,
        mu_k: mu,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let probe = StepProbe {
        z,
        t_n,
        t_n1,
        online_input,
        target_input,
        target_grad_abs_sum,
        online_after,
        target_before,
    };
    Ok((breakdown, probe))
}

fn adamw_step(state: &mut TrainerState, grads: &[Tensor], cfg: &TrainerConfig) -> Result<()> {
    let mut sq = 0.0;
    for g in grads {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / (norm + 1e-6)
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, var) in state.online.iter().enumerate() {
        let g = (&grads[i] * scale)?;
        let m = ((&state.adam_m[i] * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
        let v = ((&state.adam_v[i] * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
        let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + cfg.adam_eps)?)?;
        let theta = var.as_tensor().detach();
        let decayed = (&theta * (1.0 - cfg.lr * cfg.weight_decay))?;
        var.set(&(decayed - (update * cfg.lr)?)?)?;
        state.adam_m[i] = m;
        state.adam_v[i] = v;
    }
    Ok(())
}

/// The minibatch consumed at step `k`: a pure function of `(seed, k)`, so a
/// resumed run sees the same data as an uninterrupted one.
pub fn batch_for_step(dataset: &Dataset, batch_size: usize, seed: u64, k: u64) -> Result<Batch> {
    let pairs = dataset.split(Split::Train);
    let per_epoch = pairs.len().div_ceil(batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let epoch = k / per_epoch;
    let epoch_seed = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let groups = batch_indices(pairs.len(), batch_size, epoch_seed)?;
    let idx = &groups[(k % per_epoch) as usize];
    Batch::from_pairs(&idx.iter().map(|&i| &pairs[i]).collect::<Vec<_>>())
}

/// Progress notifications from [`train_loop`].
#[derive(Debug)]
pub enum LoopEvent<'a> {
    Step(&'a LossBreakdown),
    Eval(&'a EvalRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_checkpoint: PathBuf,
    pub last_eval: Option<EvalRecord>,
    pub stopped_early: bool,
}

pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step:07}"))
}

fn append_json<T: Serialize>(log: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(Error::json("log record"))?;
    writeln!(log, "{line}").and_then(|_| log.flush()).map_err(Error::io(path))
}

/// Validation Dice/IoU of the target parameters with single-step sampling.
pub fn validate(cfg: &RunConfig, state: &TrainerState, dataset: &Dataset) -> Result<EvalReport> {
    let params = if cfg.sampler.use_target {
        state.target.clone()
    } else {
        state.online_params()?.detached_copy()?
    };
    evaluate(&cfg.model(), &params, dataset.split(Split::Val), cfg.train.seed, cfg.sampler.threshold)
}

/// Runs steps `state.step..K`, logging each step, validating and
/// checkpointing on the configured intervals and after the last step.
///
/// `observer` may stop the run early by returning `ControlFlow::Break`; a
/// final checkpoint is still written.
pub fn train_loop(
    cfg: &RunConfig,
    state: &mut TrainerState,
    dataset: &Dataset,
    run_dir: &Path,
    mut observer: impl FnMut(LoopEvent<'_>) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(Error::io(run_dir))?;
    let log_path = run_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(file);
    let ctx = StepContext::new(cfg);
    let total = cfg.train.total_steps;
    let start = state.step;
    let mut last_eval = None;
    let mut stopped_early = false;
    let mut last_saved = None;

    while state.step < total {
        let batch = batch_for_step(dataset, cfg.train.batch_size, cfg.train.seed, state.step)?;
        let record = train_step(state, &batch, &ctx)?;
        append_json(&mut log, &log_path, &record)?;
        let mut flow = observer(LoopEvent::Step(&record));
        let k = state.step;
        let due = |interval: u64| interval > 0 && k % interval == 0;
        if due(cfg.train.eval_interval) || k == total {
            let report = validate(cfg, state, dataset)?;
            let rec = EvalRecord {
                step: k,
                split: Split::Val,
                dice: report.mean_dice,
                iou: report.mean_iou,
            };
            append_json(&mut log, &log_path, &rec)?;
            if observer(LoopEvent::Eval(&rec)).is_break() {
                flow = ControlFlow::Break(());
            }
            last_eval = Some(rec);
        }
        if due(cfg.train.checkpoint_interval) || k == total || flow.is_break() {
            save_checkpoint(state, cfg, last_eval.as_ref(), &checkpoint_dir(run_dir, k))?;
            last_saved = Some(k);
        }
        if flow.is_break() {
            stopped_early = state.step < total;
            break;
        }
    }
    let final_step = state.step;
    if last_saved != Some(final_step) {
        save_checkpoint(state, cfg, last_eval.as_ref(), &checkpoint_dir(run_dir, final_step))?;
    }
    Ok(TrainOutcome {
        steps_run: final_step - start,
        final_checkpoint: checkpoint_dir(run_dir, final_step),
        last_eval,
        stopped_early,
    })
}
