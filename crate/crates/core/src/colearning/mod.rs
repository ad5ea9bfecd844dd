//! The four-branch co-learning step, Adam with cosine decay, checkpoints
//! and the training loop.

mod checkpoint;
mod config;
mod optim;
mod step;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, SharingGroup};
pub use config::{DataSpec, MaskStrategy, TrainConfig};
pub use optim::{adam_slice, adam_update, cosine_lr, AdamState, BETA1, BETA2, EPS};
pub use step::{
    clip_cls_weights, forward_objective, probe_cls_weights, similarity_matrix, BranchPlan, ObjectiveOutput,
    PlanSource, StepPlan,
};

use crate::data::{batches, Batch, Dataset};
use crate::encoders::{Forward, ModelParams};
use crate::error::{bail, Result};
use crate::evalcli::{attention_row, AttentionRow};
use crate::numerics::Tape;
use crate::objectives::{total_loss, LossRecord};

/// What one training step reports.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossRecord,
    pub attention: AttentionRow,
}

/// Parameters, optimizer state and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt: AdamState,
    /// Completed steps.
    pub step: u64,
}

/// Per-step generator: one ChaCha stream per step, so a resumed run draws
/// the same masks as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Indices of the batch used at `step`: epochs are reshuffled with a seed
/// derived from the run seed and the epoch number.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let per_epoch = (n / batch_size.max(1)).max(1) as u64;
    let epoch = step / per_epoch;
    let epoch_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch);
    let all = batches(n, batch_size, epoch_seed)?;
    Ok(all[(step % per_epoch) as usize].clone())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.encoder, config.seed)?;
        let opt = AdamState::new(&params);
        Ok(Self { config, params, opt, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self { config: ck.config, params: ck.params, opt: ck.opt, step: ck.step }
    }

    fn learning_rates(&self) -> (f64, f64) {
        let t = self.config.horizon();
        (cosine_lr(self.config.lr_backbone, self.step, t), cosine_lr(self.config.lr_new, self.step, t))
    }

    /// One co-learning step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let cfg = self.config.clone();
        let mut rng = step_rng(cfg.seed, self.step);
        let (lr_b, lr_n) = self.learning_rates();

        let tape = Tape::new();
        let fw = Forward::new(&tape, &self.params, true);
        let out = forward_objective(&fw, batch, &cfg, PlanSource::Sample(&mut rng), true)?;
        let values = out.parts.values()?;
        let total = values.total(&cfg.weights);
        if !total.is_finite() || ![values.vtc, values.vtc_h, values.vvc_h, values.vtc_l, values.vvc_l, values.adv]
            .iter()
            .all(|v| v.is_finite())
        {
            bail!(NonFinite, "loss at step {} is not finite: {values:?}", self.step);
        }
        let record = LossRecord::new(self.step, &values, total);
        let attention = attention_row(self.step, &out.plan.cls_weights);

        if cfg.sequential_branches {
            let plan = out.plan.clone();
            let grads = {
                let g = tape.backward(out.parts.vtc)?;
                fw.param_grads(&g)
            };
            drop(fw);
            adam_update(&mut self.params, &grads, &mut self.opt, lr_b, lr_n)?;
            let (h_on, l_on) = cfg.active_branches();
            let w = cfg.weights;
            let stages: [(bool, u8); 3] = [(h_on, 0), (l_on && w.beta > 0.0, 1), (l_on && w.gamma > 0.0, 2)];
            for (on, which) in stages {
                if !on {
                    continue;
                }
                let tape = Tape::new();
                let fw = Forward::new(&tape, &self.params, true);
                let o = forward_objective::<ChaCha8Rng>(&fw, batch, &cfg, PlanSource::Fixed(&plan), true)?;
                let p = o.parts;
                let loss = match which {
                    0 => p.vtc_h.add(p.vvc_h)?.scale(w.alpha)?,
                    1 => p.vtc_l.add(p.vvc_l)?.scale(w.beta)?,
                    _ => p.adv.scale(w.gamma)?,
                };
                let grads = fw.param_grads(&tape.backward(loss)?);
                drop(fw);
                adam_update(&mut self.params, &grads, &mut self.opt, lr_b, lr_n)?;
            }
        } else {
            let loss = total_loss(&out.parts, &cfg.weights)?;
            let grads = fw.param_grads(&tape.backward(loss)?);
            drop(fw);
            adam_update(&mut self.params, &grads, &mut self.opt, lr_b, lr_n)?;
        }
        self.step += 1;
        Ok(StepOutcome { losses: record, attention })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, self.step, &self.params, &self.opt)
    }
}

/// Files written by [`run_training`].
#[derive(Clone, Debug, Default)]
pub struct TrainArtifacts {
    pub losses: Vec<LossRecord>,
    pub attention: Vec<AttentionRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains until `trainer.config.steps`, writing `losses.jsonl`,
/// `attention.csv` and checkpoints under `out` when given. A trainer that
/// already has steps appends to existing trace files.
pub fn run_training(trainer: &mut Trainer, data: &Dataset, out: Option<&Path>) -> Result<TrainArtifacts> {
    let cfg = trainer.config.clone();
    if cfg.batch_size > data.len() {
        bail!(Config, "batch size {} exceeds dataset size {}", cfg.batch_size, data.len());
    }
    let mut writers = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let open = |name: &str| -> Result<BufWriter<File>> {
                let f = if trainer.step == 0 {
                    File::create(dir.join(name))?
                } else {
                    OpenOptions::new().append(true).create(true).open(dir.join(name))?
                };
                Ok(BufWriter::new(f))
            };
            let losses = open("losses.jsonl")?;
            let mut attn = open("attention.csv")?;
            if trainer.step == 0 {
                writeln!(attn, "step,meanW_top30,meanW_bot30")?;
            }
            Some((losses, attn))
        }
        None => None,
    };
    let mut art = TrainArtifacts::default();
    while trainer.step < cfg.steps {
        let idx = batch_for_step(data.len(), cfg.batch_size, cfg.seed, trainer.step)?;
        let batch = data.batch(&idx)?;
        let o = trainer.train_step(&batch)?;
        log::debug!("step {} total {:.6}", o.losses.step, o.losses.total);
        if let Some((lw, aw)) = writers.as_mut() {
            serde_json::to_writer(&mut *lw, &o.losses)?;
            lw.write_all(b"\n")?;
            writeln!(aw, "{},{},{}", o.attention.step, o.attention.top30, o.attention.bot30)?;
        }
        art.losses.push(o.losses);
        art.attention.push(o.attention);
        if let Some(dir) = out {
            let periodic = cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0;
            if periodic || trainer.step == cfg.steps {
                let path = dir.join(format!("step{:06}.ckpt", trainer.step));
                trainer.save(&path)?;
                art.checkpoints.push(path);
            }
        }
    }
    if let Some((mut lw, mut aw)) = writers {
        lw.flush()?;
        aw.flush()?;
    }
    Ok(art)
}
