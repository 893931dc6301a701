//! Open-loop rollouts of generated action sequences in the toy world.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{action_errors, psnr, ssim};
use super::stats::sign_test;
use crate::checkpoint::{peek, Checkpoint, Component};
use crate::error::{CovarError, Result};
use crate::flowcore::{euler_sample, JointState};
use crate::model::{ConditionedField, Conditioning, CovarModel, ModelConfig};
use crate::par;
use crate::params::ParamStore;
use crate::refiner::{make_coarse, CoarsePair, NoiseCurriculum, Refiner, RefinerConfig};
use crate::tensor::Tensor;
use crate::toyworld::{actions_from_tensor, check_success, execute, expert_demo, Resolution, SceneSpec};

/// Scenes per sampler batch.
const CHUNK: usize = 16;

/// One generated rollout: `T×L` actions and, when the policy produces video,
/// `T×3×H×W` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub actions: Tensor<f32>,
    pub video: Option<Tensor<f32>>,
}

pub trait Policy: Sync {
    fn name(&self) -> String;

    /// Hex SHA-256 of everything that determines the policy's output.
    fn fingerprint(&self) -> String;

    fn seed(&self) -> u64 {
        0
    }

    fn generate(&self, scenes: &[SceneSpec], frames: usize, res: Resolution) -> Result<Vec<Generated>>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The trained co-generation model, optionally followed by the refiner.
pub struct CovarPolicy<'a> {
    pub model: &'a CovarModel,
    pub params: &'a ParamStore<f32>,
    pub refiner: Option<(&'a Refiner, &'a ParamStore<f32>)>,
    pub steps: usize,
    pub seed: u64,
}

impl<'a> CovarPolicy<'a> {
    pub fn new(model: &'a CovarModel, params: &'a ParamStore<f32>, steps: usize, seed: u64) -> Self {
        Self {
            model,
            params,
            refiner: None,
            steps,
            seed,
        }
    }

    pub fn with_refiner(mut self, refiner: &'a Refiner, params: &'a ParamStore<f32>) -> Self {
        self.refiner = Some((refiner, params));
        self
    }

    /// Starting noise for one scene. Each scene has its own ChaCha stream,
    /// so results do not depend on batching or scene order.
    fn scene_noise(&self, scene: &SceneSpec) -> JointState<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(scene.seed);
        self.model.noise_state(1, &mut rng)
    }
}

fn stack_first(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let rows: Vec<Tensor<f32>> = parts.iter().map(|t| t.index0(0)).collect();
    Tensor::stack(&rows)
}

impl Policy for CovarPolicy<'_> {
    fn name(&self) -> String {
        let base = format!("covar[{:?}]", self.model.config.attention_mode);
        if self.refiner.is_some() {
            format!("{base}+refiner")
        } else {
            base
        }
    }

    fn fingerprint(&self) -> String {
        let cfg = serde_json::json!({
            "model": self.model.config,
            "refiner": self.refiner.map(|(r, _)| r.config.clone()),
            "steps": self.steps,
            "seed": self.seed,
        });
        sha256_hex(cfg.to_string().as_bytes())
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn generate(&self, scenes: &[SceneSpec], frames: usize, res: Resolution) -> Result<Vec<Generated>> {
        let cfg = &self.model.config;
        if (cfg.frames, cfg.height, cfg.width) != (frames, res.height, res.width) {
            return Err(CovarError::Config(format!(
                "model generates T={} {}x{}, evaluation asks for T={frames} {}x{}",
                cfg.frames, cfg.height, cfg.width, res.height, res.width
            )));
        }
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(CHUNK) {
            let cond: Vec<Conditioning<f32>> = chunk.iter().map(|s| Conditioning::from_scene(s, res)).collect();
            let noise: Vec<JointState<f32>> = chunk.iter().map(|s| self.scene_noise(s)).collect();
            let x1 = JointState {
                video: if cfg.video_branch_enabled {
                    Some(stack_first(noise.iter().map(|n| n.video.clone().unwrap()).collect())?)
                } else {
                    None
                },
                action: Some(stack_first(noise.iter().map(|n| n.action.clone().unwrap()).collect())?),
                t: vec![1.0; chunk.len()],
            };
            let field = ConditionedField {
                model: self.model,
                params: self.params,
                cond: &cond,
            };
            let x0 = euler_sample(&field, x1, self.steps)?;
            let mut actions = x0.action.expect("action branch is always on");
            if let Some((r, p)) = self.refiner {
                actions = r.refine(p, &actions, &cond)?;
            }
            for b in 0..chunk.len() {
                out.push(Generated {
                    actions: actions.index0(b),
                    video: x0.video.as_ref().map(|v| v.index0(b)),
                });
            }
        }
        Ok(out)
    }
}

/// Replays the scripted expert.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn name(&self) -> String {
        "expert".into()
    }

    fn fingerprint(&self) -> String {
        sha256_hex(b"expert")
    }

    fn generate(&self, scenes: &[SceneSpec], frames: usize, res: Resolution) -> Result<Vec<Generated>> {
        scenes
            .iter()
            .map(|s| {
                let ep = expert_demo(s, frames, res)?;
                Ok(Generated {
                    actions: ep.actions,
                    video: Some(ep.frames),
                })
            })
            .collect()
    }
}

/// Commands the origin with the gripper open at every step.
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn name(&self) -> String {
        "zero".into()
    }

    fn fingerprint(&self) -> String {
        sha256_hex(b"zero")
    }

    fn generate(&self, scenes: &[SceneSpec], frames: usize, _res: Resolution) -> Result<Vec<Generated>> {
        Ok(scenes
            .iter()
            .map(|_| Generated {
                actions: Tensor::zeros([frames, self.action_dim]),
                video: None,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    /// Over generated frames 1..T (frame 0 is the conditioning frame).
    pub psnr_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    pub action_mse: f64,
    pub final_pos_error: f64,
    pub successes: usize,
    pub success_rate: f64,
    pub n_episodes: usize,
    /// Whether every generated frame 0 equals the conditioning render bit for bit.
    pub frame0_exact: Option<bool>,
    pub config_fingerprint: String,
    pub seed: u64,
}

struct SceneScore {
    success: bool,
    mse: f64,
    final_pos: f64,
    image: Option<(f64, f64, bool)>,
}

/// Generates actions for every scene, executes them open loop and scores
/// success, action error against the scripted expert and, when video is
/// generated, PSNR/SSIM against the expert's frames.
pub fn rollout_success(policy: &dyn Policy, scenes: &[SceneSpec], frames: usize, res: Resolution) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(CovarError::Config("no evaluation scenes".into()));
    }
    let generated = policy.generate(scenes, frames, res)?;
    let scores = par::map_indexed(scenes.len(), par::global(), |i| -> Result<SceneScore> {
        let (scene, g) = (&scenes[i], &generated[i]);
        let gt = expert_demo(scene, frames, res)?;
        let states = execute(scene, &actions_from_tensor(&g.actions));
        let success = states.last().is_some_and(|s| check_success(scene, s));
        let err = action_errors(&g.actions, &gt.actions)?;
        let image = match &g.video {
            Some(v) => {
                let cond = Conditioning::<f32>::from_scene(scene, res);
                let exact = v.index0(0) == cond.initial_frame;
                let rest = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
                    let n = t.shape()[0];
                    let per = t.numel() / n;
                    let mut shape = t.shape().to_vec();
                    shape[0] = n - 1;
                    Tensor::new(shape, t.data()[per..].to_vec())
                };
                let (gv, ge) = (rest(v)?, rest(&gt.frames)?);
                let clamped = gv.map(|x| x.clamp(0.0, 1.0));
                Some((psnr(&clamped, &ge)?, ssim(&clamped, &ge)?, exact))
            }
            None => None,
        };
        Ok(SceneScore {
            success,
            mse: err.mse,
            final_pos: err.final_pos_error,
            image,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = scores.len();
    let mean = |f: &dyn Fn(&SceneScore) -> f64| scores.iter().map(f).sum::<f64>() / n as f64;
    let successes = scores.iter().filter(|s| s.success).count();
    let has_video = scores.iter().all(|s| s.image.is_some());
    Ok(EvalReport {
        policy: policy.name(),
        psnr_mean: has_video.then(|| mean(&|s| s.image.unwrap().0)),
        ssim_mean: has_video.then(|| mean(&|s| s.image.unwrap().1)),
        action_mse: mean(&|s| s.mse),
        final_pos_error: mean(&|s| s.final_pos),
        successes,
        success_rate: successes as f64 / n as f64,
        n_episodes: n,
        frame0_exact: has_video.then(|| scores.iter().all(|s| s.image.unwrap().2)),
        config_fingerprint: policy.fingerprint(),
        seed: policy.seed(),
    })
}

/// Loads a co-generation checkpoint, rebuilding the model from its header.
pub fn load_covar(path: &Path) -> Result<(CovarModel, ParamStore<f32>)> {
    let (component, config) = peek(path)?;
    if component != Component::Covar {
        return Err(CovarError::Checkpoint(format!("{} is a {component:?} checkpoint", path.display())));
    }
    let cfg: ModelConfig = serde_json::from_value(config)?;
    let model = CovarModel::new(cfg)?;
    let template = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let ck = Checkpoint::from_bytes(&fs::read(path)?, &template)?;
    Ok((model, ck.params))
}

pub fn load_refiner(path: &Path) -> Result<(Refiner, ParamStore<f32>)> {
    let (component, config) = peek(path)?;
    if component != Component::Refiner {
        return Err(CovarError::Checkpoint(format!("{} is a {component:?} checkpoint", path.display())));
    }
    let cfg: RefinerConfig = serde_json::from_value(config)?;
    let refiner = Refiner::new(cfg)?;
    let template = refiner.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let ck = Checkpoint::from_bytes(&fs::read(path)?, &template)?;
    Ok((refiner, ck.params))
}

/// Synthetic coarse/expert pairs for the given scenes (smoothing and jitter
/// only), each drawn from its own seeded stream.
pub fn coarse_pairs(
    scenes: &[SceneSpec],
    frames: usize,
    res: Resolution,
    curriculum: &NoiseCurriculum,
    seed: u64,
) -> Result<Vec<CoarsePair>> {
    let synthetic = NoiseCurriculum {
        mix_model_fraction: 0.0,
        ..*curriculum
    };
    scenes
        .iter()
        .map(|s| {
            let ep = expert_demo(s, frames, res)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s.seed);
            Ok(CoarsePair {
                coarse: make_coarse(&ep.actions, &mut rng, &synthetic, None)?,
                target: ep.actions,
                cond: Conditioning::from_scene(s, res),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerReport {
    pub n_pairs: usize,
    pub median_final_error_before: f64,
    pub median_final_error_after: f64,
    /// `1 − after / before` on the medians.
    pub median_reduction: f64,
    pub mean_final_error_before: f64,
    pub mean_final_error_after: f64,
    pub mse_before: f64,
    pub mse_after: f64,
    pub improved: usize,
    pub worsened: usize,
    /// One-sided sign test that refinement lowers final-position error.
    pub sign_test_p: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Final-position error of coarse inputs versus refined outputs.
pub fn refiner_gain(refiner: &Refiner, params: &ParamStore<f32>, pairs: &[CoarsePair]) -> Result<RefinerReport> {
    if pairs.is_empty() {
        return Err(CovarError::Config("no coarse pairs".into()));
    }
    let mut before = Vec::new();
    let mut after = Vec::new();
    let (mut mse_b, mut mse_a) = (0.0, 0.0);
    for chunk in pairs.chunks(32) {
        let coarse = Tensor::stack(&chunk.iter().map(|p| p.coarse.clone()).collect::<Vec<_>>())?;
        let cond: Vec<_> = chunk.iter().map(|p| p.cond.clone()).collect();
        let refined = refiner.refine(params, &coarse, &cond)?;
        for (b, p) in chunk.iter().enumerate() {
            let eb = action_errors(&p.coarse, &p.target)?;
            let ea = action_errors(&refined.index0(b), &p.target)?;
            before.push(eb.final_pos_error);
            after.push(ea.final_pos_error);
            mse_b += eb.mse;
            mse_a += ea.mse;
        }
    }
    let improved = before.iter().zip(&after).filter(|(b, a)| a < b).count();
    let worsened = before.iter().zip(&after).filter(|(b, a)| a > b).count();
    let n = pairs.len();
    let (mb, ma) = (median(&mut before.clone()), median(&mut after.clone()));
    Ok(RefinerReport {
        n_pairs: n,
        median_final_error_before: mb,
        median_final_error_after: ma,
        median_reduction: if mb > 0.0 { 1.0 - ma / mb } else { 0.0 },
        mean_final_error_before: before.iter().sum::<f64>() / n as f64,
        mean_final_error_after: after.iter().sum::<f64>() / n as f64,
        mse_before: mse_b / n as f64,
        mse_after: mse_a / n as f64,
        improved,
        worsened,
        sign_test_p: sign_test(improved, worsened),
    })
}
