//! Optimization loop, learning-rate schedule, windows cut from recorded
//! episodes, AdamW, checkpoints and the metrics log.

mod checkpoint;
mod data;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    frame_depth_tokens, frame_tokens, future_frame, inverse_depth_tokens, record_condition, view_tokens, widen,
    window_example, window_starts, window_targets,
};
pub use optim::{clip_global_norm, global_norm, AdamW, ADAM_EPS, BETA1, BETA2};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{fit_normalizer, CodecError, NormalizerStats};
use crate::diffusion::{training_loss, DiffusionError, LossComponents, LossWeights, Regime, TrainExample};
use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::{Graph, NumericsError};
use crate::worldsim::{child_seed, load_dataset, DatasetError, EpisodeRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(DiffusionError),
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Law of `(t_O, t_a)`; the ANS variant carries its mixture probability.
    pub regime: Regime,
    pub seed: u64,
    pub model: ModelConfig,
    /// Train with the interleaved depth branch attached.
    pub depth_branch: bool,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub dataset: PathBuf,
    /// Use only the first `n` episodes.
    pub max_episodes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            warmup_steps: 200,
            peak_lr: 3e-4,
            batch_size: 16,
            weights: LossWeights::default(),
            regime: Regime::Ans { p: crate::diffusion::DEFAULT_ANS_P },
            seed: 0,
            model: ModelConfig::default(),
            depth_branch: true,
            weight_decay: 0.01,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            dataset: PathBuf::from("data"),
            max_episodes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.warmup_steps >= self.total_steps {
            return bad("warmup must be shorter than the run");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("clip norm must be positive and weight decay non-negative");
        }
        if let Regime::Ans { p } = self.regime {
            if !(0.0..=1.0).contains(&p) {
                return bad("ANS probability must lie in [0, 1]");
            }
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = (step as f64).min(total);
    if s < w {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * (s - w) / (total - w)).cos())
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossComponents,
    pub grad_norm: f64,
    /// Drawn `(t_O, t_a)` per sample.
    pub levels: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    record: &'a StepRecord,
    wall_secs: f64,
}

/// Append-only JSON-lines metrics file.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    started: Instant,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Ok(Self { path: path.to_path_buf(), file, started: Instant::now() })
    }

    pub fn append(&mut self, record: &StepRecord) -> Result<(), TrainError> {
        let line = LogLine { record, wall_secs: self.started.elapsed().as_secs_f64() };
        let text = serde_json::to_string(&line).expect("record serializes");
        writeln!(self.file, "{text}").map_err(|source| TrainError::Io { path: self.path.clone(), source })
    }
}

/// Reads a metrics log back, dropping the wall-clock column.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })
        })
        .collect()
}

fn non_finite(step: usize, e: DiffusionError) -> TrainError {
    match e {
        DiffusionError::NonFinite { component } => TrainError::NonFinite { step, component },
        DiffusionError::Model(ModelError::Numerics(NumericsError::NonFinite { .. })) => {
            TrainError::NonFinite { step, component: "forward" }
        }
        other => TrainError::Diffusion(other),
    }
}

/// Training state over an in-memory episode set.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub stats: NormalizerStats,
    /// Completed steps.
    pub step: usize,
    episodes: Vec<EpisodeRecord>,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(config: TrainConfig, episodes: Vec<EpisodeRecord>, stats: NormalizerStats) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = Model::new(config.model, child_seed(config.seed, u64::MAX))?;
        if config.depth_branch {
            model.init_depth_branch(config.model.depth_blocks, child_seed(config.seed, u64::MAX - 1))?;
        }
        let optimizer = AdamW::new(&model.params.tensors, config.weight_decay);
        Self::assemble(config, model, optimizer, stats, 0, episodes)
    }

    /// Continues from a checkpoint over the same episodes.
    pub fn resume(ckpt: Checkpoint, episodes: Vec<EpisodeRecord>) -> Result<Self, TrainError> {
        Self::assemble(ckpt.config, ckpt.model, ckpt.optimizer, ckpt.stats, ckpt.step, episodes)
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        optimizer: AdamW,
        stats: NormalizerStats,
        step: usize,
        episodes: Vec<EpisodeRecord>,
    ) -> Result<Self, TrainError> {
        let usable: Vec<EpisodeRecord> = episodes.into_iter().filter(|e| window_starts(e) > 0).collect();
        if usable.is_empty() {
            return Err(TrainError::Config("no episode has two or more frames".into()));
        }
        let decay = model.params.names.iter().map(|n| n.ends_with(".w")).collect();
        Ok(Self { config, model, optimizer, stats, step, episodes: usable, decay })
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    /// Per-step generator; depends only on the seed and the step index.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(child_seed(self.config.seed, step as u64))
    }

    /// Draws the batch windows and noise levels for `step`.
    pub fn draw_batch<R: Rng>(&self, rng: &mut R) -> Result<(Vec<TrainExample>, Vec<(f64, f64)>), TrainError> {
        let picks: Vec<(usize, usize)> = (0..self.config.batch_size)
            .map(|_| {
                let e = rng.random_range(0..self.episodes.len());
                (e, rng.random_range(0..window_starts(&self.episodes[e])))
            })
            .collect();
        let levels = (0..picks.len()).map(|_| self.config.regime.sample(rng)).collect();
        let examples = picks
            .par_iter()
            .map(|&(e, s)| window_example(&self.episodes[e], s, &self.config.model, &self.stats))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((examples, levels))
    }

    /// Loss components of the next step's batch without updating anything.
    pub fn evaluate_step(&self, step: usize) -> Result<LossComponents, TrainError> {
        let mut rng = self.step_rng(step);
        let (examples, levels) = self.draw_batch(&mut rng)?;
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g, false);
        let masks = (&self.stats.state_mask[..], &self.stats.action_mask[..]);
        let vars = training_loss(&mut g, &p, &self.model, &examples, &levels, &mut rng, &self.config.weights, masks)
            .map_err(|e| non_finite(step, e))?;
        vars.components(&g).map_err(|e| non_finite(step, e))
    }

    /// One AdamW step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.step;
        let mut rng = self.step_rng(step);
        let (examples, levels) = self.draw_batch(&mut rng)?;
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g, true);
        let masks = (&self.stats.state_mask[..], &self.stats.action_mask[..]);
        let vars = training_loss(&mut g, &p, &self.model, &examples, &levels, &mut rng, &self.config.weights, masks)
            .map_err(|e| non_finite(step, e))?;
        let loss = vars.components(&g).map_err(|e| non_finite(step, e))?;
        let mut grads_all = g.backward(vars.total).map_err(|_| TrainError::NonFinite { step, component: "gradient" })?;
        let mut grads: Vec<_> = p.iter().map(|&v| grads_all.take(v)).collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { step, component: "gradient" });
        }
        let lr = lr_at(step, &self.config);
        self.optimizer.update(&mut self.model.params.tensors, &grads, &self.decay, lr);
        self.step += 1;
        Ok(StepRecord { step, lr, loss, grad_norm, levels })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            config: self.config.clone(),
            stats: self.stats.clone(),
        }
    }

    /// Steps until `until` completed steps, logging each and writing
    /// periodic checkpoints into `out` when given.
    pub fn run_until(
        &mut self,
        until: usize,
        mut log: Option<&mut MetricsLog>,
        out: Option<&Path>,
    ) -> Result<Vec<StepRecord>, TrainError> {
        let mut records = Vec::new();
        while self.step < until.min(self.config.total_steps) {
            let r = self.train_step()?;
            if let Some(l) = log.as_deref_mut() {
                l.append(&r)?;
            }
            if r.step % 100 == 0 {
                log::info!(
                    "step {} lr {:.2e} loss {:.4} (video {:.4} state {:.4} action {:.4} depth {:.4})",
                    r.step, r.lr, r.loss.total, r.loss.video, r.loss.state, r.loss.action, r.loss.depth
                );
            }
            records.push(r);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.total_steps {
                    self.checkpoint().save(&dir.join(checkpoint_file_name(self.step)))?;
                }
            }
        }
        Ok(records)
    }
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("step_{step:06}.xwck")
}

pub const FINAL_CHECKPOINT: &str = "final.xwck";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Loads the configured dataset and its normalizer (stored or refitted).
pub fn load_training_data(config: &TrainConfig) -> Result<(Vec<EpisodeRecord>, NormalizerStats), TrainError> {
    let (manifest, mut episodes) = load_dataset(&config.dataset)?;
    if let Some(n) = config.max_episodes {
        episodes.truncate(n);
    }
    let stats = match (&manifest.normalizer, config.max_episodes) {
        (Some(s), None) => s.clone(),
        _ => {
            let (s, warnings) = fit_normalizer(&episodes)?;
            for w in warnings {
                log::warn!("{w}");
            }
            s
        }
    };
    Ok((episodes, stats))
}

/// Full training run into `out`: metrics log, periodic and final
/// checkpoints. With `resume`, continues the run stored there.
pub fn train_run(config: TrainConfig, out: &Path, resume: Option<&Path>) -> Result<(PathBuf, Vec<StepRecord>), TrainError> {
    std::fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.to_path_buf(), source })?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (episodes, _) = load_training_data(&ckpt.config)?;
            Trainer::resume(ckpt, episodes)?
        }
        None => {
            let (episodes, stats) = load_training_data(&config)?;
            Trainer::new(config, episodes, stats)?
        }
    };
    let mut log = MetricsLog::open(&out.join(METRICS_FILE))?;
    let total = trainer.config.total_steps;
    let records = trainer.run_until(total, Some(&mut log), Some(out))?;
    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    Ok((path, records))
}
