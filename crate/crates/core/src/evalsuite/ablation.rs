//! The ablation grid: attention mode, action decoder and video branch.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rollout::{load_covar, rollout_success, CovarPolicy, EvalReport};
use super::stats::{config_diff, rank_sum_greater};
use crate::checkpoint::Component;
use crate::error::{CovarError, Result};
use crate::model::{ActionDecoder, AttentionMode};
use crate::toyworld::{Resolution, SceneSpec};
use crate::trainer::{self, TrainConfig, CHECKPOINT_NAME};

/// Significance level for the "full beats arm" ordering check.
pub const ORDERING_ALPHA: f64 = 0.1;

/// Fields an arm may change relative to the base configuration.
pub const ARM_FIELDS: [&str; 4] = [
    "model.attention_mode",
    "model.action_decoder",
    "model.video_branch_enabled",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub attention_mode: AttentionMode,
    pub action_decoder: ActionDecoder,
    pub video_branch_enabled: bool,
}

impl AblationArm {
    pub fn new(name: &str, mode: AttentionMode, decoder: ActionDecoder, video: bool) -> Self {
        Self {
            name: name.into(),
            attention_mode: mode,
            action_decoder: decoder,
            video_branch_enabled: video,
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.attention_mode = self.attention_mode;
        cfg.model.action_decoder = self.action_decoder;
        cfg.model.video_branch_enabled = self.video_branch_enabled;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// The first arm is the reference that every other arm is compared to.
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        use ActionDecoder::*;
        use AttentionMode::*;
        Self {
            arms: vec![
                AblationArm::new("full", Bridge, Unet, true),
                AblationArm::new("self_attention", SelfAttn, Unet, true),
                AblationArm::new("cross_attention", Cross, Unet, true),
                AblationArm::new("mlp_decoder", Bridge, Mlp, true),
                AblationArm::new("action_only", Bridge, Unet, false),
            ],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub completed: usize,
    pub mean_success: Option<f64>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    /// Exact one-sided rank-sum p-value for "reference > this arm".
    pub p_reference_greater: Option<f64>,
    pub reference_greater: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<ArmRun>,
    pub summary: Vec<ArmSummary>,
    /// The reference arm completed and beats every other arm in mean and at
    /// [`ORDERING_ALPHA`].
    pub ordering_holds: bool,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>4} {:>8} {:>8} {:>8} {:>10}",
            "arm", "runs", "success", "psnr", "ssim", "p(ref>arm)"
        );
        for a in &self.summary {
            let _ = writeln!(
                s,
                "{:<18} {:>4} {:>8} {:>8} {:>8} {:>10}",
                a.arm,
                a.completed,
                fmt(a.mean_success, 3),
                fmt(a.mean_psnr, 2),
                fmt(a.mean_ssim, 3),
                fmt(a.p_reference_greater, 3)
            );
        }
        s
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Summaries and ordering verdict from finished runs; the first arm in
/// `grid` is the reference.
pub fn summarize(grid: &AblationGrid, runs: Vec<ArmRun>) -> AblationReport {
    let successes = |name: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.arm == name)
            .filter_map(|r| r.report.as_ref().map(|e| e.success_rate))
            .collect()
    };
    let reference = grid.arms.first().map(|a| successes(&a.name)).unwrap_or_default();
    let mut ordering_holds = !reference.is_empty();
    let summary = grid
        .arms
        .iter()
        .enumerate()
        .map(|(i, arm)| {
            let reports: Vec<&EvalReport> = runs
                .iter()
                .filter(|r| r.arm == arm.name)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let succ = successes(&arm.name);
            let img = |f: fn(&EvalReport) -> Option<f64>| mean(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (p, greater) = if i == 0 {
                (None, None)
            } else if succ.is_empty() || reference.is_empty() {
                ordering_holds = false;
                (None, None)
            } else {
                let p = rank_sum_greater(&reference, &succ);
                let g = mean(&reference) > mean(&succ) && p < ORDERING_ALPHA;
                ordering_holds &= g;
                (Some(p), Some(g))
            };
            ArmSummary {
                arm: arm.name.clone(),
                completed: reports.len(),
                mean_success: mean(&succ),
                mean_psnr: img(|r| r.psnr_mean),
                mean_ssim: img(|r| r.ssim_mean),
                p_reference_greater: p,
                reference_greater: greater,
            }
        })
        .collect();
    AblationReport {
        runs,
        summary,
        ordering_holds,
    }
}

/// Trains every arm × seed under `base`'s budget into
/// `out_dir/{arm}/seed{seed}` (resuming finished or partial runs), then
/// evaluates each on `scenes`. A failing arm is recorded and the grid
/// continues.
pub fn run_ablation(
    base: &TrainConfig,
    grid: &AblationGrid,
    out_dir: &Path,
    scenes: &[SceneSpec],
    eval_seed: u64,
) -> Result<AblationReport> {
    if grid.arms.is_empty() || grid.seeds.is_empty() {
        return Err(CovarError::Config("ablation grid needs at least one arm and one seed".into()));
    }
    let res = Resolution {
        height: base.model.height,
        width: base.model.width,
    };
    let mut runs = Vec::new();
    for arm in &grid.arms {
        for &seed in &grid.seeds {
            let cfg = arm.apply(base, seed);
            let diff = config_diff(&base.to_json(), &cfg.to_json());
            if let Some(extra) = diff.iter().find(|d| !ARM_FIELDS.contains(&d.as_str())) {
                return Err(CovarError::Config(format!("arm {} changes {extra}", arm.name)));
            }
            let dir = out_dir.join(&arm.name).join(format!("seed{seed}"));
            let outcome = trainer::train(&cfg, Component::Covar, &dir, true).and_then(|_| {
                let (model, params) = load_covar(&dir.join(CHECKPOINT_NAME))?;
                let policy = CovarPolicy::new(&model, &params, cfg.sample_steps, eval_seed);
                rollout_success(&policy, scenes, cfg.model.frames, res)
            });
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => {
                    log::warn!("arm {} seed {seed} failed: {e}", arm.name);
                    (None, Some(e.to_string()))
                }
            };
            runs.push(ArmRun {
                arm: arm.name.clone(),
                seed,
                report,
                error,
            });
        }
    }
    Ok(summarize(grid, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(success: f64) -> EvalReport {
        EvalReport {
            policy: "x".into(),
            psnr_mean: None,
            ssim_mean: None,
            action_mse: 0.0,
            final_pos_error: 0.0,
            successes: 0,
            success_rate: success,
            n_episodes: 1,
            frame0_exact: None,
            config_fingerprint: String::new(),
            seed: 0,
        }
    }

    fn run(arm: &str, seed: u64, s: Option<f64>) -> ArmRun {
        ArmRun {
            arm: arm.into(),
            seed,
            report: s.map(report),
            error: s.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn arms_differ_only_in_flagged_fields() {
        let base = TrainConfig::default();
        for arm in AblationGrid::default().arms {
            let diff = config_diff(&base.to_json(), &arm.apply(&base, 5).to_json());
            assert!(diff.iter().all(|d| ARM_FIELDS.contains(&d.as_str())), "{diff:?}");
        }
    }

    #[test]
    fn ordering_verdict() {
        let grid = AblationGrid {
            arms: AblationGrid::default().arms[..2].to_vec(),
            seeds: vec![0, 1, 2],
        };
        let runs = (0..3)
            .flat_map(|s| [run("full", s, Some(0.7 + 0.01 * s as f64)), run("self_attention", s, Some(0.3))])
            .collect();
        let r = summarize(&grid, runs);
        assert!(r.ordering_holds);
        assert!((r.summary[1].p_reference_greater.unwrap() - 0.05).abs() < 1e-12);
        assert!(r.table().lines().count() == 3);
    }

    #[test]
    fn failed_arm_breaks_ordering_but_is_kept() {
        let grid = AblationGrid {
            arms: AblationGrid::default().arms[..2].to_vec(),
            seeds: vec![0],
        };
        let r = summarize(&grid, vec![run("full", 0, Some(0.5)), run("self_attention", 0, None)]);
        assert!(!r.ordering_holds);
        assert_eq!(r.runs.len(), 2);
        assert_eq!(r.summary[1].completed, 0);
    }
}
