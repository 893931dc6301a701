//! Optimization loop for the co-generation model and the action refiner.

mod data;
mod optim;

pub use data::{Dataset, MAX_UNREADABLE};
pub use optim::{clip_global_norm, learning_rate, AdamW, AdamWConfig};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, Component};
use crate::error::{CovarError, Result};
use crate::evalsuite::{self, CovarPolicy};
use crate::flowcore::{interpolate, sample_timestep, velocity_target, JointState, LossMask, LossWeights};
use crate::model::{CovarModel, ForwardOptions, ModelConfig};
use crate::params::ParamStore;
use crate::refiner::{make_coarse, refiner_loss_graph, CoarseSampler, Refiner, RefinerConfig};
use crate::tensor::Tensor;
use crate::toyworld::io::write_atomic;

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const LOG_NAME: &str = "train_log.jsonl";
pub const LOCK_NAME: &str = "train.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_path: PathBuf,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Rollout evaluation period in steps; 0 disables it.
    pub eval_every: u64,
    pub eval_scenes: usize,
    pub checkpoint_every: u64,
    /// Euler steps for evaluation rollouts and model-sampled coarse actions.
    pub sample_steps: usize,
    /// Use at most this many training episodes.
    pub max_episodes: Option<usize>,
    pub loss_weights: LossWeights,
    pub adamw: AdamWConfig,
    pub model: ModelConfig,
    pub refiner: RefinerConfig,
    /// Trained co-generation checkpoint supplying model-sampled coarse
    /// actions for refiner training.
    pub covar_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_path: PathBuf::from("data"),
            batch_size: 32,
            steps: 20_000,
            learning_rate: 3e-4,
            warmup_steps: 500,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 1000,
            eval_scenes: 20,
            checkpoint_every: 1000,
            sample_steps: crate::flowcore::DEFAULT_STEPS,
            max_episodes: None,
            loss_weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
            model: ModelConfig::default(),
            refiner: RefinerConfig::default(),
            covar_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CovarError::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.checkpoint_every == 0 || self.sample_steps == 0 {
            return bad("checkpoint_every and sample_steps must be positive");
        }
        if self.max_episodes == Some(0) {
            return bad("max_episodes must be positive");
        }
        let w = self.loss_weights;
        if !(w.video >= 0.0 && w.action >= 0.0 && w.video + w.action > 0.0) {
            return bad("loss weights must be non-negative and not both zero");
        }
        let a = self.adamw;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return bad("invalid AdamW hyperparameters");
        }
        self.model.validate()?;
        self.refiner.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub video_loss: Option<f64>,
    pub action_loss: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

/// RNG for step `step`: a dedicated ChaCha stream, so any step can be
/// replayed without running the ones before it.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

#[derive(Clone, Debug)]
pub enum Objective {
    Covar(CovarModel),
    Refiner {
        refiner: Refiner,
        /// One model-sampled action sequence per training episode.
        model_samples: Option<Vec<Tensor<f32>>>,
    },
}

impl Objective {
    pub fn component(&self) -> Component {
        match self {
            Objective::Covar(_) => Component::Covar,
            Objective::Refiner { .. } => Component::Refiner,
        }
    }

    fn config_json(&self) -> serde_json::Value {
        match self {
            Objective::Covar(m) => serde_json::to_value(&m.config),
            Objective::Refiner { refiner, .. } => serde_json::to_value(&refiner.config),
        }
        .expect("config serializes")
    }
}

impl CoarseSampler for Vec<Tensor<f32>> {
    fn sample(&self, index: usize) -> Result<Tensor<f32>> {
        self.get(index)
            .cloned()
            .ok_or_else(|| CovarError::MissingModel(format!("no model sample for episode {index}")))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub objective: Objective,
    pub data: Dataset,
    pub params: ParamStore<f32>,
    pub opt: AdamW,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Trainer {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: TrainConfig, objective: Objective, data: Dataset) -> Result<Self> {
        config.validate()?;
        check_data(&objective, &data)?;
        let mut rng = init_rng(config.seed);
        let params = match &objective {
            Objective::Covar(m) => m.init_params(&mut rng),
            Objective::Refiner { refiner, .. } => refiner.init_params(&mut rng),
        };
        let opt = AdamW::new(config.adamw, &params);
        Ok(Self {
            config,
            objective,
            data,
            params,
            opt,
            step: 0,
        })
    }

    /// Continues from `ck`, which must come from the same objective, model
    /// configuration and seed.
    pub fn resume(config: TrainConfig, objective: Objective, data: Dataset, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, objective, data)?;
        if ck.component != t.objective.component() || ck.config != t.objective.config_json() {
            return Err(CovarError::Checkpoint("checkpoint was trained with a different model".into()));
        }
        if ck.seed != t.config.seed {
            return Err(CovarError::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                ck.seed, t.config.seed
            )));
        }
        let moments = ck
            .moments
            .ok_or_else(|| CovarError::Checkpoint("checkpoint has no optimizer state".into()))?;
        t.opt = AdamW::with_moments(t.config.adamw, moments, &ck.params)?;
        t.params = ck.params;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            component: self.objective.component(),
            config: self.objective.config_json(),
            train: Some(self.config.to_json()),
            step: self.step,
            seed: self.config.seed,
            params: self.params.clone(),
            moments: Some(self.opt.moments.clone()),
        }
    }

    /// One optimizer update. Everything random (batch indices, noise, flow
    /// times, coarse corruption) comes from [`step_rng`] for the current step.
    pub fn train_step(&mut self) -> Result<TrainLogRow> {
        let started = Instant::now();
        let step = self.step;
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, step);
        let n = self.data.len();
        if n == 0 {
            return Err(CovarError::Dataset("empty batch".into()));
        }
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let cond = self.data.cond_batch(&idx);
        let mut g = Graph::new(&self.params);
        let (total, video_loss, action_loss) = match &self.objective {
            Objective::Covar(model) => {
                let x0 = JointState {
                    video: if model.config.video_branch_enabled {
                        Some(self.data.video_batch(&idx)?)
                    } else {
                        None
                    },
                    action: Some(self.data.action_batch(&idx)?),
                    t: vec![0.0; idx.len()],
                };
                let x1 = model.noise_state(idx.len(), &mut rng);
                let t = sample_timestep(idx.len(), &mut rng);
                let xt = interpolate(&x0, &x1, &t)?;
                let target = velocity_target(&x0, &x1)?;
                let mask = LossMask::conditioning(model.config.frames);
                let lv = model.loss(&mut g, &xt, &cond, &target, &mask, cfg.loss_weights, ForwardOptions::default())?;
                let scalar = |v| g.value(v).data()[0] as f64;
                (lv.total, lv.video.map(scalar), Some(scalar(lv.action)))
            }
            Objective::Refiner { refiner, model_samples } => {
                let curriculum = refiner.config.noise_curriculum;
                let mut coarse = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let sampler = model_samples.as_ref().map(|s| (s as &dyn CoarseSampler, i));
                    coarse.push(make_coarse(&self.data.episodes[i].actions, &mut rng, &curriculum, sampler)?);
                }
                let coarse = Tensor::stack(&coarse)?;
                let target = self.data.action_batch(&idx)?;
                let pred = refiner.forward(&mut g, &coarse, &cond)?;
                let l = refiner_loss_graph(&mut g, pred, &target)?;
                (l, None, Some(g.value(l).data()[0] as f64))
            }
        };
        let loss = g.value(total).data()[0] as f64;
        if !loss.is_finite() {
            return Err(CovarError::NonFinite {
                stage: "train_step",
                index: step as usize,
            });
        }
        let mut grads = g.backward(total)?.params;
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(CovarError::NonFinite {
                stage: "train_step gradients",
                index: step as usize,
            });
        }
        let lr = learning_rate(step, cfg.learning_rate, cfg.warmup_steps, cfg.steps);
        self.opt.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(TrainLogRow {
            step,
            loss,
            video_loss,
            action_loss,
            grad_norm,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
            eval: None,
        })
    }

    /// Rollout success (co-generation) or coarse-vs-refined error (refiner)
    /// on the first `eval_scenes` validation scenes.
    pub fn evaluate(&self) -> Result<Option<serde_json::Value>> {
        let n = self.config.eval_scenes.min(self.data.val_scenes.len());
        if n == 0 {
            return Ok(None);
        }
        let scenes = &self.data.val_scenes[..n];
        let (frames, res) = (self.data.frames(), self.data.resolution());
        let report = match &self.objective {
            Objective::Covar(model) => {
                let policy = CovarPolicy::new(model, &self.params, self.config.sample_steps, self.config.seed);
                serde_json::to_value(evalsuite::rollout_success(&policy, scenes, frames, res)?)?
            }
            Objective::Refiner { refiner, .. } => {
                let pairs = evalsuite::coarse_pairs(
                    scenes,
                    frames,
                    res,
                    &refiner.config.noise_curriculum,
                    self.config.seed,
                )?;
                serde_json::to_value(evalsuite::refiner_gain(refiner, &self.params, &pairs)?)?
            }
        };
        Ok(Some(report))
    }
}

fn check_data(objective: &Objective, data: &Dataset) -> Result<()> {
    let (t, res, l) = (data.frames(), data.resolution(), data.action_dim());
    let (ft, fh, fw, fl) = match objective {
        Objective::Covar(m) => (m.config.frames, m.config.height, m.config.width, m.config.action_dim),
        Objective::Refiner { refiner, model_samples } => {
            if let Some(s) = model_samples {
                if s.len() != data.len() {
                    return Err(CovarError::Dataset(format!(
                        "{} model samples for {} episodes",
                        s.len(),
                        data.len()
                    )));
                }
            }
            let c = &refiner.config;
            (c.frames, c.height, c.width, c.action_dim)
        }
    };
    if (ft, fh, fw, fl) != (t, res.height, res.width, l) {
        return Err(CovarError::Config(format!(
            "model expects T={ft} {fh}x{fw} L={fl}, dataset has T={t} {}x{} L={l}",
            res.height, res.width
        )));
    }
    Ok(())
}

/// Exclusive claim on a training directory; released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if is_stale(&path) {
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path)?;
                    return Self::acquire(dir);
                }
                Err(CovarError::Training {
                    step: 0,
                    reason: format!("{} exists; another run is training into this directory", path.display()),
                })
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// A lock whose recorded process no longer exists (Linux only; elsewhere a
/// lock is never considered stale).
fn is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(pid) = text.trim().parse::<u32>() else {
        return false;
    };
    let proc = Path::new("/proc");
    proc.is_dir() && pid != std::process::id() && !proc.join(pid.to_string()).exists()
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Keeps only log rows for steps already covered by the checkpoint.
fn truncate_log(path: &Path, steps_done: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        if let Ok(row) = serde_json::from_str::<TrainLogRow>(line) {
            if row.step < steps_done {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Runs `trainer` to `config.steps`, logging to `out_dir/train_log.jsonl` and
/// checkpointing to `out_dir/checkpoint.ckpt`. Returns the final checkpoint.
pub fn run(trainer: &mut Trainer, out_dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let ck_path = out_dir.join(CHECKPOINT_NAME);
    let log_path = out_dir.join(LOG_NAME);
    if trainer.step == 0 {
        write_atomic(&log_path, b"")?;
    } else {
        truncate_log(&log_path, trainer.step)?;
    }
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut last_good: Option<u64> = None;
    if trainer.step == 0 || !ck_path.exists() {
        trainer.checkpoint().save(&ck_path)?;
    }
    last_good.get_or_insert(trainer.step);
    let total = trainer.config.steps;
    while trainer.step < total {
        let mut row = trainer.train_step().map_err(|e| match e {
            CovarError::NonFinite { stage, index } => CovarError::Training {
                step: index as u64,
                reason: format!(
                    "non-finite values in {stage}; last good checkpoint {} (step {})",
                    ck_path.display(),
                    last_good.unwrap_or(0)
                ),
            },
            other => other,
        })?;
        let done = trainer.step;
        let cfg = &trainer.config;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            row.eval = trainer.evaluate()?;
        }
        serde_json::to_writer(&mut log, &row)?;
        log.write_all(b"\n")?;
        if done % cfg.checkpoint_every == 0 || done == total {
            log.flush()?;
            trainer.checkpoint().save(&ck_path)?;
            last_good = Some(done);
            log::info!("step {done}: loss {:.5}", row.loss);
        }
    }
    log.flush()?;
    Ok(trainer.checkpoint())
}

/// Loads the dataset, builds or resumes a trainer for `component`, and runs it.
pub fn train(config: &TrainConfig, component: Component, out_dir: &Path, resume: bool) -> Result<Checkpoint> {
    config.validate()?;
    let data = Dataset::load(&config.dataset_path, config.max_episodes)?;
    let objective = build_objective(config, component, &data)?;
    let ck_path = out_dir.join(CHECKPOINT_NAME);
    let mut trainer = if resume && ck_path.exists() {
        let template = Trainer::new(config.clone(), objective.clone(), data.clone())?.params;
        let ck = Checkpoint::from_bytes(&fs::read(&ck_path)?, &template)?;
        Trainer::resume(config.clone(), objective, data, ck)?
    } else {
        Trainer::new(config.clone(), objective, data)?
    };
    run(&mut trainer, out_dir)
}

fn build_objective(config: &TrainConfig, component: Component, data: &Dataset) -> Result<Objective> {
    Ok(match component {
        Component::Covar => Objective::Covar(CovarModel::new(config.model.clone())?),
        Component::Refiner => {
            let refiner = Refiner::new(config.refiner.clone())?;
            let needs_model = refiner.config.noise_curriculum.mix_model_fraction > 0.0;
            let model_samples = match (&config.covar_checkpoint, needs_model) {
                (Some(path), true) => Some(sample_training_actions(path, config, data)?),
                (None, true) => {
                    return Err(CovarError::MissingModel(
                        "mix_model_fraction > 0 requires covar_checkpoint".into(),
                    ))
                }
                (_, false) => None,
            };
            Objective::Refiner { refiner, model_samples }
        }
    })
}

/// Generates one model action sequence per training episode.
pub fn sample_training_actions(path: &Path, config: &TrainConfig, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
    let (model, params) = evalsuite::load_covar(path)?;
    let policy = CovarPolicy::new(&model, &params, config.sample_steps, config.seed);
    let scenes: Vec<_> = data.episodes.iter().map(|e| e.scene.clone()).collect();
    Ok(evalsuite::Policy::generate(&policy, &scenes, data.frames(), data.resolution())?
        .into_iter()
        .map(|g| g.actions)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{generate_episodes, Resolution, TaskFamily};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 3,
            warmup_steps: 1,
            eval_every: 0,
            model: ModelConfig {
                hidden_dim: 16,
                heads: 2,
                block_pairs: 1,
                frames: 6,
                height: 16,
                width: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn data(cfg: &TrainConfig) -> Dataset {
        let res = Resolution { height: 16, width: 16 };
        let eps = generate_episodes(&[1, 2, 3], TaskFamily::PickPlace, cfg.model.frames, res, crate::par::global()).unwrap();
        Dataset::from_episodes(eps, vec![]).unwrap()
    }

    fn trainer(cfg: &TrainConfig) -> Trainer {
        let obj = Objective::Covar(CovarModel::new(cfg.model.clone()).unwrap());
        Trainer::new(cfg.clone(), obj, data(cfg)).unwrap()
    }

    #[test]
    fn zero_grad_clip_is_rejected() {
        let cfg = TrainConfig {
            grad_clip: 0.0,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(CovarError::Config(_))));
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = tiny_config();
        let (mut a, mut b) = (trainer(&cfg), trainer(&cfg));
        for _ in 0..3 {
            let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.grad_norm, rb.grad_norm);
        }
    }

    #[test]
    fn resume_continues_bit_identically() {
        let cfg = tiny_config();
        let mut full = trainer(&cfg);
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.push(full.train_step().unwrap().loss);
        }
        let mut first = trainer(&cfg);
        first.train_step().unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes, &first.params).unwrap();
        let obj = Objective::Covar(CovarModel::new(cfg.model.clone()).unwrap());
        let mut resumed = Trainer::resume(cfg.clone(), obj, data(&cfg), ck).unwrap();
        assert_eq!(resumed.train_step().unwrap().loss, rows[1]);
        assert_eq!(resumed.train_step().unwrap().loss, rows[2]);
        for ((_, p), (_, q)) in resumed.params.iter().zip(full.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn run_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let mut t = trainer(&cfg);
        let ck = run(&mut t, dir.path()).unwrap();
        assert_eq!(ck.step, 3);
        let log = fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
        let steps: Vec<u64> = log
            .lines()
            .map(|l| serde_json::from_str::<TrainLogRow>(l).unwrap().step)
            .collect();
        assert_eq!(steps, [0, 1, 2]);
        assert!(!dir.path().join(LOCK_NAME).exists());
    }
}
