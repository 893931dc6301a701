use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use covar_core::checkpoint::{peek_train, Component};
use covar_core::evalsuite::{
    self, frame_strip, load_covar, load_refiner, rollout_success, AblationGrid, CovarPolicy, ExpertPolicy, Policy,
    ZeroPolicy,
};
use covar_core::model::Conditioning;
use covar_core::toyworld::io::{encode_episode, write_atomic, write_dataset, Manifest, Split, MANIFEST_NAME};
use covar_core::toyworld::{
    actions_from_tensor, check_success, execute, expert_demo, render_rollout, sample_scene,
    Resolution, SceneSpec, TaskFamily, ACTION_DIM,
};
use covar_core::trainer::{self, TrainConfig, CHECKPOINT_NAME, LOG_NAME};
use serde::{Deserialize, Serialize};

use crate::config::{decode, load_table};
use crate::manifest::RunManifest;
use crate::{Command, ConfigArgs, Unmet, Usage};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            episodes,
            task,
            seed,
            frames,
            height,
            width,
            val,
            test,
            force,
        } => gen_data(&GenData {
            out,
            episodes,
            task,
            seed,
            frames,
            res: Resolution { height, width },
            val: val.unwrap_or(episodes / 10),
            test: test.unwrap_or(episodes / 10),
            force,
        }),
        Command::Train {
            cfg,
            out,
            dataset,
            resume,
            force,
        } => train(Component::Covar, &cfg, &out, dataset, None, resume, force),
        Command::TrainRefiner {
            cfg,
            out,
            dataset,
            covar_ckpt,
            resume,
            force,
        } => train(Component::Refiner, &cfg, &out, dataset, covar_ckpt, resume, force),
        Command::Sample {
            ckpt,
            scene_seed,
            task,
            steps,
            noise_seed,
            refine,
            scale,
            out,
            force,
        } => sample(&SampleArgs {
            ckpt,
            scene_seed,
            task,
            steps,
            noise_seed,
            refine,
            scale,
            out,
            force,
        }),
        Command::Eval {
            cfg,
            out,
            ckpt,
            refine,
            policy,
            dataset,
            scenes,
            steps,
            seed,
            min_success,
            force,
        } => {
            let mut sets = cfg.overrides.clone();
            let quote = |p: &Path| format!("{:?}", p.display().to_string());
            sets.extend(ckpt.map(|p| format!("checkpoint={}", quote(&p))));
            sets.extend(refine.map(|p| format!("refiner_checkpoint={}", quote(&p))));
            sets.extend(policy.map(|p| format!("policy={p:?}")));
            sets.extend(dataset.map(|p| format!("dataset_path={}", quote(&p))));
            sets.extend(scenes.map(|n| format!("scenes={n}")));
            sets.extend(steps.map(|n| format!("steps={n}")));
            sets.extend(seed.map(|n| format!("seed={n}")));
            sets.extend(min_success.map(|v| format!("min_success={v:?}")));
            eval(
                &ConfigArgs {
                    config: cfg.config,
                    overrides: sets,
                },
                &out,
                force,
            )
        }
        Command::Ablate {
            cfg,
            out,
            arms,
            seeds,
            force,
        } => ablate(&cfg, &out, &arms, &seeds, force),
    }
}

/// Creates `dir`; refuses a non-empty existing directory unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("{} is not a readable directory", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(Usage(format!("{} is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn require_dataset(path: &Path) -> Result<()> {
    if !path.join(MANIFEST_NAME).is_file() {
        bail!(Usage(format!("no dataset manifest at {}", path.join(MANIFEST_NAME).display())));
    }
    Ok(())
}

fn usage(e: covar_core::CovarError) -> anyhow::Error {
    anyhow::Error::new(Usage(e.to_string()))
}

struct GenData {
    out: PathBuf,
    episodes: usize,
    task: TaskFamily,
    seed: u64,
    frames: usize,
    res: Resolution,
    val: usize,
    test: usize,
    force: bool,
}

fn gen_data(a: &GenData) -> Result<()> {
    if a.val + a.test > a.episodes {
        bail!(Usage(format!(
            "{} validation + {} test episodes exceed the total of {}",
            a.val, a.test, a.episodes
        )));
    }
    prepare_out(&a.out, a.force)?;
    let n_train = a.episodes - a.val - a.test;
    if a.episodes == 0 {
        log::warn!("--episodes 0: writing an empty manifest");
    } else {
        // surface bad shapes as usage errors before anything is written
        let scene = sample_scene(a.seed, a.task.task_for(a.seed)).map_err(usage)?;
        expert_demo(&scene, a.frames, a.res).map_err(usage)?;
    }
    write_dataset(&a.out, a.seed, [n_train, a.val, a.test], a.task, a.frames, a.res, covar_core::par::global())?;
    let path = a.out.join(MANIFEST_NAME);
    let cfg = serde_json::json!({
        "episodes": a.episodes, "task": a.task, "seed": a.seed, "frames": a.frames,
        "height": a.res.height, "width": a.res.width, "val": a.val, "test": a.test,
    });
    RunManifest::new("gen-data", Some(a.seed), cfg).output(&path)?.write(&a.out)?;
    println!("wrote {} episodes to {}", a.episodes, a.out.display());
    Ok(())
}

fn train(
    component: Component,
    cfg: &ConfigArgs,
    out: &Path,
    dataset: Option<PathBuf>,
    covar_ckpt: Option<PathBuf>,
    resume: bool,
    force: bool,
) -> Result<()> {
    let mut config: TrainConfig = decode(load_table(cfg.config.as_deref(), &cfg.overrides)?).map_err(|e| Usage(format!("{e:#}")))?;
    if let Some(d) = dataset {
        config.dataset_path = d;
    }
    if let Some(c) = covar_ckpt {
        config.covar_checkpoint = Some(c);
    }
    config.validate().map_err(usage)?;
    require_dataset(&config.dataset_path)?;
    config.dataset_path = fs::canonicalize(&config.dataset_path)?;
    prepare_out(out, force || resume)?;
    let ck = trainer::train(&config, component, out, resume)?;
    let resolved = toml::to_string_pretty(&config)?;
    write_atomic(&out.join("config.toml"), resolved.as_bytes())?;
    let mut m = RunManifest::new(
        match component {
            Component::Covar => "train",
            Component::Refiner => "train-refiner",
        },
        Some(config.seed),
        config.to_json(),
    )
    .input(&config.dataset_path.join(MANIFEST_NAME))?;
    if let Some(c) = &config.covar_checkpoint {
        m = m.input(c)?;
    }
    m.output(&out.join(CHECKPOINT_NAME))?.output(&out.join(LOG_NAME))?.write(out)?;
    println!("trained {} steps; checkpoint {}", ck.step, out.join(CHECKPOINT_NAME).display());
    Ok(())
}

struct SampleArgs {
    ckpt: PathBuf,
    scene_seed: u64,
    task: TaskFamily,
    steps: usize,
    noise_seed: u64,
    refine: Option<PathBuf>,
    scale: u32,
    out: PathBuf,
    force: bool,
}

#[derive(Serialize)]
struct SampleSummary {
    scene_seed: u64,
    instruction: String,
    frame0_exact: bool,
    success: bool,
    generated_actions: Vec<[f32; ACTION_DIM]>,
    expert_actions: Vec<[f32; ACTION_DIM]>,
}

fn sample(a: &SampleArgs) -> Result<()> {
    if a.steps == 0 {
        bail!(Usage("--steps must be positive".into()));
    }
    let (model, params) = load_covar(&a.ckpt).map_err(usage)?;
    let refiner = a.refine.as_deref().map(load_refiner).transpose().map_err(usage)?;
    prepare_out(&a.out, a.force)?;
    let cfg = &model.config;
    let res = Resolution {
        height: cfg.height,
        width: cfg.width,
    };
    let scene = sample_scene(a.scene_seed, a.task.task_for(a.scene_seed))?;
    let mut policy = CovarPolicy::new(&model, &params, a.steps, a.noise_seed);
    if let Some((r, p)) = &refiner {
        policy = policy.with_refiner(r, p);
    }
    let g = policy.generate(std::slice::from_ref(&scene), cfg.frames, res)?.remove(0);
    let rows = actions_from_tensor(&g.actions);
    // Without a video branch the strip shows the executed rollout instead.
    let video = match g.video {
        Some(v) => v,
        None => render_rollout(&scene, &rows, res).0,
    };
    let cond = Conditioning::<f32>::from_scene(&scene, res);
    let frame0_exact = video.index0(0) == cond.initial_frame;
    let success = execute(&scene, &rows).last().is_some_and(|s| check_success(&scene, s));
    let expert = expert_demo(&scene, cfg.frames, res).ok();

    let video_path = a.out.join("generated.covr");
    write_atomic(&video_path, &encode_episode(&video, &g.actions, &scene.tokens(), scene.seed)?)?;
    let strip_path = a.out.join("strip.png");
    frame_strip(&video, expert.as_ref().map(|e| &e.actions), &g.actions, a.scale)?.save(&strip_path)?;
    let summary = SampleSummary {
        scene_seed: a.scene_seed,
        instruction: scene.instruction.clone(),
        frame0_exact,
        success,
        generated_actions: rows.iter().map(|r| r.0).collect(),
        expert_actions: expert.map(|e| e.action_rows().iter().map(|r| r.0).collect()).unwrap_or_default(),
    };
    let actions_path = a.out.join("actions.json");
    write_atomic(&actions_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let mut m = RunManifest::new(
        "sample",
        Some(a.noise_seed),
        serde_json::json!({
            "scene_seed": a.scene_seed, "task": a.task, "steps": a.steps, "noise_seed": a.noise_seed,
            "scale": a.scale, "model": model.config,
        }),
    )
    .input(&a.ckpt)?;
    if let Some(r) = &a.refine {
        m = m.input(r)?;
    }
    m.output(&video_path)?.output(&actions_path)?.output(&strip_path)?.write(&a.out)?;
    println!(
        "scene {} \"{}\": success={success} frame0_exact={frame0_exact}",
        a.scene_seed, scene.instruction
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PolicyKind {
    Covar,
    Expert,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    policy: PolicyKind,
    checkpoint: Option<PathBuf>,
    refiner_checkpoint: Option<PathBuf>,
    /// Scenes come from this dataset's test split when set.
    dataset_path: Option<PathBuf>,
    scenes: usize,
    task: TaskFamily,
    /// First scene seed when no dataset is given.
    scene_seed_start: u64,
    steps: usize,
    seed: u64,
    /// Used by the expert and zero policies.
    frames: usize,
    height: usize,
    width: usize,
    /// Strip images written for the first scenes.
    strips: usize,
    min_success: Option<f64>,
    max_final_pos_error: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Covar,
            checkpoint: None,
            refiner_checkpoint: None,
            dataset_path: None,
            scenes: 200,
            task: TaskFamily::PickPlace,
            scene_seed_start: 1_000_000,
            steps: covar_core::flowcore::DEFAULT_STEPS,
            seed: 0,
            frames: 8,
            height: 32,
            width: 32,
            strips: 0,
            min_success: None,
            max_final_pos_error: None,
        }
    }
}

/// Test-split scenes of a dataset, or consecutive seeds.
fn eval_scenes(cfg: &EvalConfig) -> Result<Vec<SceneSpec>> {
    match &cfg.dataset_path {
        Some(dir) => {
            require_dataset(dir)?;
            let m = Manifest::load(dir)?;
            m.episodes
                .iter()
                .filter(|e| e.split == Split::Test)
                .take(cfg.scenes)
                .map(|e| Ok(sample_scene(e.seed, e.task)?))
                .collect()
        }
        None => (cfg.scene_seed_start..cfg.scene_seed_start + cfg.scenes as u64)
            .map(|s| Ok(sample_scene(s, cfg.task.task_for(s))?))
            .collect(),
    }
}

/// Fails if any scene seed was a training seed of the checkpoint's dataset.
fn check_disjoint(ckpt: &Path, scenes: &[SceneSpec]) -> Result<()> {
    let Some(train) = peek_train(ckpt)? else {
        return Ok(());
    };
    let Some(dir) = train.get("dataset_path").and_then(|v| v.as_str()) else {
        return Ok(());
    };
    let Ok(m) = Manifest::load(Path::new(dir)) else {
        log::warn!("cannot check scene disjointness: dataset {dir} not found");
        return Ok(());
    };
    if let Some(s) = scenes.iter().find(|s| m.splits.train.contains(s.seed)) {
        bail!(Usage(format!("evaluation scene seed {} is a training seed", s.seed)));
    }
    Ok(())
}

fn eval(args: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg: EvalConfig =
        decode(load_table(args.config.as_deref(), &args.overrides)?).map_err(|e| Usage(format!("{e:#}")))?;
    if cfg.scenes == 0 || cfg.steps == 0 {
        bail!(Usage("scenes and steps must be positive".into()));
    }
    let scenes = eval_scenes(&cfg)?;
    if scenes.is_empty() {
        bail!(Usage("no evaluation scenes".into()));
    }
    let covar = match cfg.policy {
        PolicyKind::Covar => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| Usage("the covar policy needs --ckpt".into()))?;
            check_disjoint(path, &scenes)?;
            Some(load_covar(path).map_err(usage)?)
        }
        _ => None,
    };
    let refiner = cfg.refiner_checkpoint.as_deref().map(load_refiner).transpose().map_err(usage)?;
    prepare_out(out, force)?;
    let (policy, frames, res): (Box<dyn Policy + '_>, usize, Resolution) = match (&cfg.policy, &covar) {
        (PolicyKind::Covar, Some((model, params))) => {
            let mut p = CovarPolicy::new(model, params, cfg.steps, cfg.seed);
            if let Some((r, rp)) = &refiner {
                p = p.with_refiner(r, rp);
            }
            let c = &model.config;
            (Box::new(p), c.frames, Resolution { height: c.height, width: c.width })
        }
        (PolicyKind::Expert, _) => (Box::new(ExpertPolicy), cfg.frames, Resolution { height: cfg.height, width: cfg.width }),
        _ => (
            Box::new(ZeroPolicy { action_dim: ACTION_DIM }),
            cfg.frames,
            Resolution { height: cfg.height, width: cfg.width },
        ),
    };
    let report = rollout_success(policy.as_ref(), &scenes, frames, res)?;
    let report_path = out.join("eval_report.json");
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = RunManifest::new("eval", Some(cfg.seed), serde_json::to_value(&cfg)?);
    for p in cfg.checkpoint.iter().chain(&cfg.refiner_checkpoint) {
        m = m.input(p)?;
    }
    m = m.output(&report_path)?;
    if cfg.strips > 0 {
        let n = cfg.strips.min(scenes.len());
        let generated = policy.generate(&scenes[..n], frames, res)?;
        for (scene, g) in scenes.iter().zip(generated) {
            let rows = actions_from_tensor(&g.actions);
            let video = g.video.unwrap_or_else(|| render_rollout(scene, &rows, res).0);
            let gt = expert_demo(scene, frames, res)?;
            let path = out.join(format!("strip_{:08}.png", scene.seed));
            frame_strip(&video, Some(&gt.actions), &g.actions, 4)?.save(&path)?;
            m = m.output(&path)?;
        }
    }
    m.write(out)?;
    let opt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
    println!(
        "{}: success {}/{} = {:.3}  action_mse {:.5}  final_pos {:.4}  psnr {}  ssim {}",
        report.policy,
        report.successes,
        report.n_episodes,
        report.success_rate,
        report.action_mse,
        report.final_pos_error,
        opt(report.psnr_mean),
        opt(report.ssim_mean)
    );
    let mut unmet = Vec::new();
    if let Some(min) = cfg.min_success {
        if report.success_rate < min {
            unmet.push(format!("success rate {:.3} < {min}", report.success_rate));
        }
    }
    if let Some(max) = cfg.max_final_pos_error {
        if report.final_pos_error > max {
            unmet.push(format!("final position error {:.4} > {max}", report.final_pos_error));
        }
    }
    if !unmet.is_empty() {
        bail!(Unmet(format!("thresholds not met: {}", unmet.join("; "))));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateConfig {
    train: TrainConfig,
    grid: AblationGrid,
    /// Held-out scenes from the dataset's test split.
    scenes: usize,
    eval_seed: u64,
    /// Exit nonzero unless the reference arm beats every other arm.
    require_ordering: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            grid: AblationGrid::default(),
            scenes: 200,
            eval_seed: 0,
            require_ordering: true,
        }
    }
}

fn ablate(args: &ConfigArgs, out: &Path, arms: &[String], seeds: &[u64], force: bool) -> Result<()> {
    let mut cfg: AblateConfig =
        decode(load_table(args.config.as_deref(), &args.overrides)?).map_err(|e| Usage(format!("{e:#}")))?;
    if !arms.is_empty() {
        let mut kept = Vec::new();
        for name in arms {
            let arm = cfg
                .grid
                .arms
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| Usage(format!("unknown arm {name}")))?;
            kept.push(arm.clone());
        }
        cfg.grid.arms = kept;
    }
    if !seeds.is_empty() {
        cfg.grid.seeds = seeds.to_vec();
    }
    cfg.train.validate().map_err(usage)?;
    require_dataset(&cfg.train.dataset_path)?;
    prepare_out(out, force)?;
    let m = Manifest::load(&cfg.train.dataset_path)?;
    let scenes: Vec<SceneSpec> = m
        .episodes
        .iter()
        .filter(|e| e.split == Split::Test)
        .take(cfg.scenes)
        .map(|e| sample_scene(e.seed, e.task))
        .collect::<covar_core::Result<_>>()?;
    if scenes.is_empty() {
        bail!(Usage("dataset has no test scenes".into()));
    }
    let report = evalsuite::run_ablation(&cfg.train, &cfg.grid, out, &scenes, cfg.eval_seed)?;
    let json_path = out.join("ablation_report.json");
    let table_path = out.join("ablation_table.txt");
    write_atomic(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let table = report.table();
    write_atomic(&table_path, table.as_bytes())?;
    RunManifest::new("ablate", Some(cfg.train.seed), serde_json::to_value(&cfg)?)
        .input(&cfg.train.dataset_path.join(MANIFEST_NAME))?
        .output(&json_path)?
        .output(&table_path)?
        .write(out)?;
    print!("{table}");
    println!("ordering holds: {}", report.ordering_holds);
    if cfg.require_ordering && !report.ordering_holds {
        bail!(Unmet("the reference arm does not beat every ablated arm".into()));
    }
    Ok(())
}
