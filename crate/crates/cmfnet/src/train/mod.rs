//! Patch-based training loop: Adam + cosine annealing, deterministic under a
//! fixed seed, resumable from checkpoints with bit-identical continuation.

mod adam;
mod checkpoint;
mod schedule;

pub use adam::{clip_global_norm, collect_grads, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use schedule::{cosine_lr, Schedule};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, sample_patch, stack_batch, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{evaluate_pair, total_loss, EvalProtocol, LossConfig};
use crate::model::{cmfnet_forward, CmfnetConfig, CmfnetParams};

/// Parameter initialization draws from a stream decorrelated from the batch
/// sampler so resuming never replays init randomness.
const PARAM_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: CmfnetConfig,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub patch: usize,
    pub iters: usize,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    /// 0 disables periodic checkpoints (a final one is always written when a
    /// path is given).
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn desk_default(model: CmfnetConfig, iters: usize) -> Result<Self> {
        Ok(TrainConfig {
            model,
            loss: LossConfig::default(),
            schedule: Schedule::cosine_default(iters.max(1))?,
            batch_size: 2,
            patch: 64,
            iters,
            seed: 0,
            log_every: 50,
            eval_every: 250,
            checkpoint_every: 0,
            clip_norm: None,
        })
    }
}

/// Training pairs plus the held-out evaluation pair. With a single pair the
/// holdout aliases it (the overfitting setup); otherwise the last pair is
/// withheld from training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub holdout: ImagePair,
}

impl Dataset {
    pub fn from_pairs(mut pairs: Vec<ImagePair>) -> Result<Self> {
        match pairs.len() {
            0 => Err(Error::Data("dataset needs at least one pair".into())),
            1 => {
                let holdout = pairs[0].clone();
                Ok(Dataset { pairs, holdout })
            }
            _ => {
                let holdout = pairs.pop().unwrap();
                Ok(Dataset { pairs, holdout })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: CmfnetParams<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl TrainState {
    /// Fresh state at step 0.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let params = CmfnetParams::init(&cfg.model, cfg.seed ^ PARAM_SEED_SALT)?;
        let adam = AdamState::new(&params);
        Ok(TrainState { adam, params, rng: ChaCha8Rng::seed_from_u64(cfg.seed), step: 0 })
    }

    pub fn checkpoint(&self, model: &CmfnetConfig) -> Checkpoint {
        Checkpoint::from_state(model, &self.params, &self.adam, &self.rng, self.step as u64)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.build_params()?;
        let adam = ckpt.build_adam(&params)?;
        Ok(TrainState { params, adam, rng: ckpt.rng(), step: ckpt.step as usize })
    }
}

fn draw_batch(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(crate::Tensor<f32>, crate::Tensor<f32>)> {
    let mut degraded = Vec::with_capacity(cfg.batch_size);
    let mut clean = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let pair = &data.pairs[rng.gen_range(0..data.pairs.len())];
        let patch = sample_patch(pair, cfg.patch, rng)?;
        let patch = augment(&patch, rng)?;
        degraded.push(patch.degraded);
        clean.push(patch.clean);
    }
    Ok((
        stack_batch(&degraded.iter().collect::<Vec<_>>())?,
        stack_batch(&clean.iter().collect::<Vec<_>>())?,
    ))
}

/// PSNR/SSIM of the current parameters on the held-out pair.
pub fn eval_holdout(params: &CmfnetParams<f32>, model: &CmfnetConfig, holdout: &ImagePair) -> Result<(f64, f64)> {
    let degraded = stack_batch(&[&holdout.degraded])?;
    let restored = cmfnet_forward(&degraded, model, &params.detached())?;
    let clean = stack_batch(&[&holdout.clean])?;
    evaluate_pair(&restored, &clean, EvalProtocol::Rgb)
}

/// Run iterations `state.step .. cfg.iters`, mutating `state` in place and
/// returning the log. A non-finite loss or parameter aborts with a
/// diagnostic; `ckpt_path` receives periodic checkpoints and a final one.
pub fn train_loop(
    cfg: &TrainConfig,
    data: &Dataset,
    state: &mut TrainState,
    ckpt_path: Option<&Path>,
) -> Result<Vec<LogEntry>> {
    if cfg.iters > cfg.schedule.total {
        return Err(Error::InvalidConfig(format!(
            "iters {} exceed the schedule horizon {}",
            cfg.iters, cfg.schedule.total
        )));
    }
    let mut log = Vec::new();
    while state.step < cfg.iters {
        let step = state.step;
        let lr = cosine_lr(step, &cfg.schedule);
        let (degraded, clean) = draw_batch(data, cfg, &mut state.rng)?;
        let restored = cmfnet_forward(&degraded, &cfg.model, &state.params)?;
        let terms = total_loss(&restored, &clean, &cfg.loss)?;
        let loss = terms.total.item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                detail: format!(
                    "fidelity {} edge {}",
                    terms.fidelity.item(),
                    terms.edge.item()
                ),
            });
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.iters {
            let (psnr, ssim) = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let (p, s) = eval_holdout(&state.params, &cfg.model, &data.holdout)?;
                (Some(p), Some(s))
            } else {
                (None, None)
            };
            log.push(LogEntry { step, lr, loss, psnr, ssim });
        }

        terms.total.backward()?;
        let mut grads = collect_grads(&state.params)?;
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        state.adam.step(&mut state.params, &grads, lr as f32)?;
        if !state.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        state.step += 1;

        if let (Some(path), true) = (ckpt_path, cfg.checkpoint_every > 0) {
            if state.step % cfg.checkpoint_every == 0 && state.step < cfg.iters {
                state.checkpoint(&cfg.model).write(path)?;
            }
        }
    }
    if let Some(path) = ckpt_path {
        state.checkpoint(&cfg.model).write(path)?;
    }
    Ok(log)
}

/// Write the metrics log as `step,lr,loss,psnr,ssim` CSV (header included;
/// empty metric fields on non-evaluation rows).
pub fn write_log_csv(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut out = String::from("step,lr,loss,psnr,ssim\n");
    for e in log {
        let psnr = e.psnr.map(|v| v.to_string()).unwrap_or_default();
        let ssim = e.ssim.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", e.step, e.lr, e.loss, psnr, ssim));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Convenience used by the CLI and tests: fresh state, full run, optional
/// checkpoint/log outputs.
pub fn train_from_scratch(
    cfg: &TrainConfig,
    data: &Dataset,
    ckpt_path: Option<&Path>,
    log_path: Option<&PathBuf>,
) -> Result<(TrainState, Vec<LogEntry>)> {
    let mut state = TrainState::init(cfg)?;
    let log = train_loop(cfg, data, &mut state, ckpt_path)?;
    if let Some(p) = log_path {
        write_log_csv(p, &log)?;
    }
    Ok((state, log))
}
