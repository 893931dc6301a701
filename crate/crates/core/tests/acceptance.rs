//! Acceptance suite. Every test prints one `PASS`/`FAIL` line with the
//! measured value before asserting; run with `--nocapture` to see them.
//!
//! The two full-budget runs (desk-scale policy, ablation ordering) are
//! `#[ignore]`d: they train for hours. Point `COVAR_E2E_DIR` at a persistent
//! directory to resume them across invocations.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use covar_core::autograd::Graph;
use covar_core::evalsuite::{
    coarse_pairs, load_covar, psnr, refiner_gain, rollout_success, run_ablation, ssim, AblationGrid, CovarPolicy,
    Policy,
};
use covar_core::flowcore::{
    euler_sample, flow_loss, interpolate, masked_mse_graph, velocity_target, JointState, LossMask, LossWeights,
    VelocityPair,
};
use covar_core::model::{
    bridge_attention, ActionDecoder, AttentionMode, Conditioning, CovarModel, ForwardOptions, ModelConfig,
};
use covar_core::nn::{add_linear, block_diagonal_mask};
use covar_core::params::{Init, ParamStore};
use covar_core::refiner::{refiner_loss, CoarsePair, NoiseCurriculum, Refiner, RefinerConfig};
use covar_core::tensor::Tensor;
use covar_core::toyworld::io::{write_dataset, Manifest, Split};
use covar_core::toyworld::{generate_episodes, sample_scene, Resolution, SceneSpec, Task, TaskFamily};
use covar_core::trainer::{self, Dataset, Objective, TrainConfig, Trainer, CHECKPOINT_NAME};
use covar_core::checkpoint::Component;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written straight to the stderr handle so the line survives the test
/// harness's output capture.
fn verdict(name: &str, pass: bool, detail: impl Display) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn scenes(start: u64, n: u64) -> Vec<SceneSpec> {
    (start..start + n).map(|s| sample_scene(s, Task::PickPlace).unwrap()).collect()
}

// ---------------------------------------------------------------------------
// bridge attention under a block-diagonal mask

/// Dense `n×c` row-major matrix times `c×d` plus bias.
fn affine(x: &[f64], n: usize, w: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let c = w.len() / d;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = b[j] + (0..c).map(|k| x[i * c + k] * w[k * d + j]).sum::<f64>();
        }
    }
    out
}

/// Multi-head self-attention of one token set with its own projections,
/// plus the residual, written with plain loops.
fn self_attention_oracle(p: &ParamStore<f32>, prefix: &str, x: &[f64], n: usize, c: usize, heads: usize) -> Vec<f64> {
    let get = |k: &str, part: &str| -> Vec<f64> {
        p.by_name(&format!("{prefix}.{k}.{part}")).unwrap().data().iter().map(|&v| v as f64).collect()
    };
    let proj = |k: &str, input: &[f64]| affine(input, n, &get(k, "weight"), &get(k, "bias"), c);
    let (q, k, v) = (proj("q", x), proj("k", x), proj("v", x));
    let d = c / heads;
    let mut mixed = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = w.iter().sum();
            for e in 0..d {
                mixed[i * c + h * d + e] = (0..n).map(|j| w[j] / z * v[j * c + h * d + e]).sum();
            }
        }
    }
    let o = proj("o", &mixed);
    o.iter().zip(x).map(|(a, b)| a + b).collect()
}

#[test]
fn bridge_attention_reduces_to_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..5);
        let (b, nv, na) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..6));
        let mut p = ParamStore::<f32>::new();
        for m in ["v", "a"] {
            for k in ["q", "k", "v", "o"] {
                add_linear(&mut p, &format!("{m}.{k}"), c, c, Init::Zeros, true, &mut rng);
            }
        }
        p.randomize(0.5, &mut rng);
        let fv = Tensor::<f32>::randn([b, nv, c], &mut rng);
        let fa = Tensor::<f32>::randn([b, na, c], &mut rng);
        let mask = block_diagonal_mask::<f32>(nv, na);
        let mut g = Graph::inference(&p);
        let (xv, xa) = (g.constant(fv.clone()), g.constant(fa.clone()));
        let (ov, oa) = bridge_attention(&mut g, xv, xa, ["v", "a"], ["v.o", "a.o"], heads, Some(&mask)).unwrap();
        for (out, input, n, prefix) in [(ov, &fv, nv, "v"), (oa, &fa, na, "a")] {
            for s in 0..b {
                let x: Vec<f64> = input.index0_slice(s).iter().map(|&v| v as f64).collect();
                let want = self_attention_oracle(&p, prefix, &x, n, c, heads);
                let got = g.value(out).index0_slice(s);
                for (a, w) in got.iter().zip(&want) {
                    worst = worst.max((*a as f64 - w).abs());
                }
            }
        }
    }
    let pass = worst < 1e-5;
    verdict(
        "bridge attention with a block-diagonal mask equals per-modality self-attention (100 draws)",
        pass,
        format!("max abs diff {worst:.2e} < 1e-5"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// analytic gradients against central differences

fn tiny_arm(mode: AttentionMode, decoder: ActionDecoder, video: bool) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        heads: 2,
        block_pairs: 2,
        patch_size: 8,
        frames: 4,
        height: 16,
        width: 16,
        attention_mode: mode,
        action_decoder: decoder,
        video_branch_enabled: video,
        ..Default::default()
    }
}

struct GradProblem {
    model: CovarModel,
    xt: JointState<f64>,
    cond: Vec<Conditioning<f64>>,
    target: VelocityPair<f64>,
    mask: LossMask,
}

impl GradProblem {
    fn new(cfg: ModelConfig, seed: u64) -> Self {
        let model = CovarModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = Resolution {
            height: model.config.height,
            width: model.config.width,
        };
        let cond = scenes(seed, 2).iter().map(|s| Conditioning::from_scene(s, res)).collect();
        let x0 = model.noise_state(2, &mut rng);
        let x1 = model.noise_state(2, &mut rng);
        let t: Vec<f64> = (0..2).map(|_| rng.random_range(0.05..0.95)).collect();
        let xt = interpolate(&x0, &x1, &t).unwrap();
        let target = velocity_target(&x0, &x1).unwrap();
        let mask = LossMask::conditioning(model.config.frames);
        Self {
            model,
            xt,
            cond,
            target,
            mask,
        }
    }

    fn loss(&self, p: &ParamStore<f64>) -> f64 {
        let mut g = Graph::inference(p);
        let l = self.model.loss(&mut g, &self.xt, &self.cond, &self.target, &self.mask, LossWeights::default(), ForwardOptions::default());
        g.value(l.unwrap().total).data()[0]
    }
}

#[test]
fn gradients_match_central_differences() {
    let arms = [
        ("bridge", tiny_arm(AttentionMode::Bridge, ActionDecoder::Unet, true)),
        ("self", tiny_arm(AttentionMode::SelfAttn, ActionDecoder::Unet, true)),
        ("cross", tiny_arm(AttentionMode::Cross, ActionDecoder::Unet, true)),
        ("mlp decoder", tiny_arm(AttentionMode::Bridge, ActionDecoder::Mlp, true)),
        ("action only", tiny_arm(AttentionMode::Bridge, ActionDecoder::Unet, false)),
    ];
    let h = 1e-4;
    let mut all = true;
    for (i, (name, cfg)) in arms.into_iter().enumerate() {
        let prob = GradProblem::new(cfg, 10 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut params: ParamStore<f64> = prob.model.init_params(&mut rng);
        params.randomize(0.2, &mut rng);
        let grads = {
            let mut g = Graph::new(&params);
            let l = prob.model
                .loss(&mut g, &prob.xt, &prob.cond, &prob.target, &prob.mask, LossWeights::default(), ForwardOptions::default())
                .unwrap();
            g.backward(l.total).unwrap().params
        };
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        let (mut checked, mut tries, mut worst) = (0, 0, 0.0f64);
        while checked < 10 && tries < 200 {
            tries += 1;
            let id = ids[rng.random_range(0..ids.len())];
            let k = rng.random_range(0..params.get(id).numel());
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            if analytic.abs() < 1e-6 {
                continue;
            }
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + h;
            let up = prob.loss(&params);
            params.get_mut(id).data_mut()[k] = orig - h;
            let down = prob.loss(&params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
            checked += 1;
        }
        let pass = checked == 10 && worst < 1e-3;
        all &= pass;
        verdict(
            &format!("gradient check, {name} arm"),
            pass,
            format!("{checked} parameters, max relative error {worst:.2e} < 1e-3"),
        );
    }
    assert!(all);
}

// ---------------------------------------------------------------------------
// sampler and loss

#[test]
fn euler_sampler_recovers_data_under_a_constant_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = JointState::<f32> {
        video: Some(Tensor::randn([2, 8, 3, 16, 16], &mut rng)),
        action: Some(Tensor::randn([2, 8, 3], &mut rng)),
        t: vec![0.0; 2],
    };
    let x1 = JointState::<f32> {
        video: Some(Tensor::randn([2, 8, 3, 16, 16], &mut rng)),
        action: Some(Tensor::randn([2, 8, 3], &mut rng)),
        t: vec![1.0; 2],
    };
    let v = velocity_target(&x0, &x1).unwrap();
    let field = |_: &JointState<f32>| Ok(v.clone());
    let mut worst = 0.0f32;
    for steps in [1, 7, 30] {
        let out = euler_sample(&field, x1.clone(), steps).unwrap();
        let dv = out.video.unwrap().max_abs_diff(x0.video.as_ref().unwrap());
        let da = out.action.unwrap().max_abs_diff(x0.action.as_ref().unwrap());
        worst = worst.max(dv).max(da);
    }
    let pass = worst < 1e-5;
    verdict(
        "euler sampler integrates a constant field exactly (1, 7, 30 steps)",
        pass,
        format!("max abs error {worst:.2e} < 1e-5"),
    );
    assert!(pass);
}

/// Masked mean of squared entries, summed over modalities, by explicit
/// index arithmetic over `b, f, rest`.
fn brute_force_loss(x0: &JointState<f64>, x1: &JointState<f64>, mask: &LossMask) -> f64 {
    let term = |a: &Tensor<f64>, z: &Tensor<f64>, m: &[bool]| {
        let s = a.shape();
        let (b, f) = (s[0], s[1]);
        let rest: usize = s[2..].iter().product();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..b {
            for j in 0..f {
                if !m[j] {
                    continue;
                }
                for r in 0..rest {
                    let idx = (i * f + j) * rest + r;
                    sum += (z.data()[idx] - a.data()[idx]).powi(2);
                    count += 1;
                }
            }
        }
        sum / count as f64
    };
    term(x0.video.as_ref().unwrap(), x1.video.as_ref().unwrap(), &mask.video)
        + term(x0.action.as_ref().unwrap(), x1.action.as_ref().unwrap(), &mask.action)
}

#[test]
fn flow_loss_optimum_and_zero_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut exact_zero, mut worst) = (true, 0.0f64);
    for trial in 0..20 {
        let frames = rng.random_range(2..7);
        let mk = |rng: &mut ChaCha8Rng| JointState::<f64> {
            video: Some(Tensor::randn([3, frames, 3, 4, 4], rng)),
            action: Some(Tensor::randn([3, frames, 3], rng)),
            t: vec![0.0; 3],
        };
        let (x0, x1) = (mk(&mut rng), mk(&mut rng));
        let mut mask = if trial % 2 == 0 {
            LossMask::conditioning(frames)
        } else {
            LossMask {
                video: (0..frames).map(|_| rng.random_bool(0.6)).collect(),
                action: (0..frames).map(|_| rng.random_bool(0.6)).collect(),
            }
        };
        mask.video[frames - 1] = true;
        mask.action[frames - 1] = true;
        let target = velocity_target(&x0, &x1).unwrap();
        exact_zero &= flow_loss(&target, &target, &mask).unwrap().total == 0.0;
        let zero = VelocityPair {
            video: target.video.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
            action: target.action.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())),
        };
        let want = brute_force_loss(&x0, &x1, &mask);
        let got = flow_loss(&zero, &target, &mask).unwrap().total;
        // the differentiable form used in training agrees as well
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let mut graph_total = 0.0;
        for (z, t, m) in [
            (zero.video.as_ref().unwrap(), target.video.as_ref().unwrap(), &mask.video),
            (zero.action.as_ref().unwrap(), target.action.as_ref().unwrap(), &mask.action),
        ] {
            let p = g.constant(z.clone());
            let l = masked_mse_graph(&mut g, "term", p, t, m).unwrap();
            graph_total += g.value(l).data()[0];
        }
        worst = worst.max((got - want).abs() / want).max((graph_total - want).abs() / want);
    }
    let pass = exact_zero && worst < 1e-12;
    verdict(
        "flow loss is exactly 0 at the target and matches the brute-force masked mean at 0",
        pass,
        format!("exact zero: {exact_zero}, max relative deviation {worst:.2e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// image metrics

#[test]
fn metric_oracles_and_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = |rng: &mut ChaCha8Rng| Tensor::<f32>::from_fn([3, 16, 16], |_| rng.random::<f32>());

    let mut ssim_self = 0.0f64;
    for _ in 0..20 {
        let x = img(&mut rng);
        ssim_self = ssim_self.max((ssim(&x, &x).unwrap() - 1.0).abs());
    }

    // 48 of 75 pixels off by 1/8: MSE = 48/75/64 = 0.01
    let a = Tensor::<f32>::full([3, 5, 5], 0.5);
    let b = Tensor::<f32>::from_fn([3, 5, 5], |i| if i < 48 { 0.625 } else { 0.5 });
    let p20 = psnr(&a, &b).unwrap();

    let levels = [0.02f32, 0.05, 0.15];
    let mut monotone = 0;
    for _ in 0..100 {
        let x = img(&mut rng);
        let n = Tensor::<f32>::randn([3, 16, 16], &mut rng);
        let scores: Vec<(f64, f64)> = levels
            .iter()
            .map(|&s| {
                let y = x.zip_map(&n, |a, e| a + s * e).unwrap();
                (psnr(&x, &y).unwrap(), ssim(&x, &y).unwrap())
            })
            .collect();
        let dec = scores.windows(2).all(|w| w[1].0 < w[0].0 && w[1].1 < w[0].1);
        monotone += dec as usize;
    }
    let pass = ssim_self <= 1e-6 && (p20 - 20.0).abs() < 1e-9 && monotone == 100;
    verdict(
        "metric oracles",
        pass,
        format!(
            "|ssim(x,x)-1| = {ssim_self:.1e}, psnr at MSE 0.01 = {p20:.12} dB, strictly decreasing in noise for {monotone}/100 pairs"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// memorization

/// The small configuration used for the memorization check.
fn overfit_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 10,
        steps: 2000,
        learning_rate: 3e-3,
        warmup_steps: 100,
        eval_every: 0,
        model: ModelConfig {
            hidden_dim: 64,
            heads: 4,
            block_pairs: 2,
            patch_size: 4,
            frames: 8,
            height: 16,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.adamw.weight_decay = 0.0;
    cfg
}

#[test]
fn tiny_config_memorizes_ten_episodes() {
    let cfg = overfit_config();
    let res = Resolution {
        height: cfg.model.height,
        width: cfg.model.width,
    };
    let seeds: Vec<u64> = (0..10).collect();
    let episodes = generate_episodes(&seeds, TaskFamily::PickPlace, cfg.model.frames, res, covar_core::par::global()).unwrap();
    let scenes: Vec<SceneSpec> = episodes.iter().map(|e| e.scene.clone()).collect();
    let data = Dataset::from_episodes(episodes, Vec::new()).unwrap();
    let model = CovarModel::new(cfg.model.clone()).unwrap();
    let mut tr = Trainer::new(cfg.clone(), Objective::Covar(model.clone()), data).unwrap();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    while tr.step < cfg.steps {
        losses.push(tr.train_step().unwrap().loss);
    }
    // single-step losses are noisy through the random flow time; compare
    // window means
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (initial, last) = (mean(&losses[..10]), mean(&losses[losses.len() - 100..]));
    let ratio = last / initial;
    let policy = CovarPolicy::new(&model, &tr.params, cfg.sample_steps, 0);
    let report = rollout_success(&policy, &scenes, cfg.model.frames, res).unwrap();
    let pass_loss = ratio < 0.1;
    let pass_success = report.successes == 10 && report.action_mse < 0.01;
    verdict(
        "memorization: training loss below 10% of initial within 2000 steps",
        pass_loss,
        format!("first-10 mean {initial:.4}, last-100 mean {last:.4}, ratio {ratio:.4}"),
    );
    verdict(
        "memorization: sampled actions succeed on all 10 training scenes",
        pass_success,
        format!("success {}/10, action mse {:.5} < 0.01", report.successes, report.action_mse),
    );
    assert!(pass_loss && pass_success);
}

// ---------------------------------------------------------------------------
// refiner

/// Synthetic-curriculum refiner training; the loss sits on a plateau for
/// roughly 2000 steps before the refiner starts reading the goal from the
/// image, hence the budget.
fn refiner_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 32,
        steps: 4000,
        learning_rate: 3e-3,
        warmup_steps: 100,
        eval_every: 0,
        refiner: RefinerConfig {
            noise_curriculum: NoiseCurriculum {
                mix_model_fraction: 0.0,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.adamw.weight_decay = 0.0;
    cfg
}

#[test]
fn refiner_gain_and_identity() {
    let cfg = refiner_train_config();
    let res = Resolution::default();
    let seeds: Vec<u64> = (0..2000).collect();
    let episodes = generate_episodes(&seeds, TaskFamily::PickPlace, 8, res, covar_core::par::global()).unwrap();
    let data = Dataset::from_episodes(episodes, Vec::new()).unwrap();
    let refiner = Refiner::new(cfg.refiner.clone()).unwrap();
    let objective = Objective::Refiner {
        refiner: refiner.clone(),
        model_samples: None,
    };
    let mut tr = Trainer::new(cfg.clone(), objective, data).unwrap();
    while tr.step < cfg.steps {
        tr.train_step().unwrap();
    }
    let held_out = scenes(1_000_000, 200);
    let pairs = coarse_pairs(&held_out, 8, res, &cfg.refiner.noise_curriculum, 7).unwrap();
    let report = refiner_gain(&refiner, &tr.params, &pairs).unwrap();
    let pass_gain = report.n_pairs >= 200 && report.median_reduction >= 0.3;
    verdict(
        "refiner reduces median final-position error by at least 30% on 200 held-out pairs",
        pass_gain,
        format!(
            "median {:.4} -> {:.4}, reduction {:.1}% (mean {:.4} -> {:.4}), improved {}/{}",
            report.median_final_error_before,
            report.median_final_error_after,
            100.0 * report.median_reduction,
            report.mean_final_error_before,
            report.mean_final_error_after,
            report.improved,
            report.n_pairs
        ),
    );

    let pass_sign = report.sign_test_p < 0.01;
    verdict(
        "refinement lowers final-position error more often than not (sign test)",
        pass_sign,
        format!("{} better, {} worse, p = {:.2e} < 0.01", report.improved, report.worsened, report.sign_test_p),
    );

    // pairing each coarse sequence with another scene's image must hurt
    let loss_with = |shift: usize| -> f64 {
        let coarse = Tensor::stack(&pairs.iter().map(|p| p.coarse.clone()).collect::<Vec<_>>()).unwrap();
        let target = Tensor::stack(&pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>()).unwrap();
        let cond: Vec<_> = (0..pairs.len()).map(|i| pairs[(i + shift) % pairs.len()].cond.clone()).collect();
        refiner_loss(&refiner.refine(&tr.params, &coarse, &cond).unwrap(), &target).unwrap()
    };
    let (matched, shuffled) = (loss_with(0), loss_with(1));
    let mismatched: Vec<_> = (0..pairs.len())
        .map(|i| CoarsePair { cond: pairs[(i + 1) % pairs.len()].cond.clone(), ..pairs[i].clone() })
        .collect();
    let blind = refiner_gain(&refiner, &tr.params, &mismatched).unwrap();
    let pass_cond = shuffled > matched;
    verdict(
        "refiner uses the scene image (mismatched images raise the loss)",
        pass_cond,
        format!(
            "loss matched {matched:.6e}, mismatched {shuffled:.6e}; median final error {:.4} vs {:.4}",
            report.median_final_error_after, blind.median_final_error_after
        ),
    );

    let mut zeroed = tr.params.clone();
    for name in ["decoder.out.weight", "decoder.out.bias"] {
        let t = zeroed.by_name_mut(name).unwrap();
        t.data_mut().fill(0.0);
    }
    let mut worst = 0.0f32;
    for chunk in pairs.chunks(32) {
        let coarse = Tensor::stack(&chunk.iter().map(|p| p.target.clone()).collect::<Vec<_>>()).unwrap();
        let cond: Vec<_> = chunk.iter().map(|p| p.cond.clone()).collect();
        let out = refiner.refine(&zeroed, &coarse, &cond).unwrap();
        worst = worst.max(out.max_abs_diff(&coarse));
    }
    let pass_identity = worst <= 1e-6;
    verdict(
        "refiner with a zeroed decoder maps zero-noise coarse actions to themselves",
        pass_identity,
        format!("max abs diff {worst:.1e} <= 1e-6"),
    );
    assert!(pass_gain && pass_sign && pass_cond && pass_identity);
}

// ---------------------------------------------------------------------------
// conditioning fidelity

#[test]
fn generated_first_frame_equals_conditioning() {
    let cfg = ModelConfig {
        hidden_dim: 32,
        block_pairs: 2,
        ..Default::default()
    };
    let model = CovarModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params: ParamStore<f32> = model.init_params(&mut rng);
    // untrained but non-trivial: every output head produces a velocity
    params.randomize(0.05, &mut rng);
    let res = Resolution::default();
    let scenes = scenes(50_000, 50);
    let policy = CovarPolicy::new(&model, &params, 30, 0);
    let generated = policy.generate(&scenes, model.config.frames, res).unwrap();
    let mut exact = 0;
    for (g, s) in generated.iter().zip(&scenes) {
        let video = g.video.as_ref().unwrap();
        let cond = Conditioning::<f32>::from_scene(s, res);
        exact += (video.index0(0).data() == cond.initial_frame.data()) as usize;
    }
    let moved = generated[0].video.as_ref().unwrap().index0(1).data() != Conditioning::<f32>::from_scene(&scenes[0], res).initial_frame.data();
    let pass = exact == 50 && moved;
    verdict(
        "generated frame 0 is bit-identical to the conditioning frame",
        pass,
        format!("{exact}/50 scenes exact"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// full-budget runs

fn e2e_dir() -> PathBuf {
    std::env::var_os("COVAR_E2E_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("e2e"))
}

/// 2000 train / 200 val / 200 test pick-and-place episodes at the default
/// shape, generated once.
fn e2e_dataset(root: &Path) -> PathBuf {
    let dir = root.join("data");
    if Manifest::load(&dir).is_err() {
        write_dataset(&dir, 0, [2000, 200, 200], TaskFamily::PickPlace, 8, Resolution::default(), covar_core::par::global()).unwrap();
    }
    dir.canonicalize().unwrap()
}

/// Default model and budget. The stock lr 3e-4 with weight decay 0.01 sits on
/// the position-blind plateau (action loss ~0.77, no successes) for at least
/// 2300 steps on this data; 1e-3 without decay leaves it within ~1000.
fn e2e_train_config(data: &Path) -> TrainConfig {
    let mut cfg = TrainConfig { dataset_path: data.to_path_buf(), learning_rate: 1e-3, ..Default::default() };
    cfg.adamw.weight_decay = 0.0;
    cfg
}

fn test_scenes(data: &Path) -> Vec<SceneSpec> {
    let m = Manifest::load(data).unwrap();
    m.episodes
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| sample_scene(e.seed, e.task).unwrap())
        .collect()
}

#[test]
#[ignore = "trains the default model for 20000 steps (about 6 hours on one core)"]
fn default_model_reaches_target_success() {
    let root = e2e_dir();
    let data = e2e_dataset(&root);
    let cfg = e2e_train_config(&data);
    let run = root.join("run");
    trainer::train(&cfg, Component::Covar, &run, true).unwrap();
    let (model, params) = load_covar(&run.join(CHECKPOINT_NAME)).unwrap();
    let held_out = test_scenes(&data);
    let policy = CovarPolicy::new(&model, &params, cfg.sample_steps, 0);
    let r = rollout_success(&policy, &held_out, cfg.model.frames, Resolution::default()).unwrap();
    let pass = r.n_episodes == 200 && r.success_rate >= 0.6;
    verdict(
        "default model success on 200 held-out scenes",
        pass,
        format!(
            "{}/{} = {:.3} (target >= 0.6), psnr {:.2}, ssim {:.3}",
            r.successes,
            r.n_episodes,
            r.success_rate,
            r.psnr_mean.unwrap_or(f64::NAN),
            r.ssim_mean.unwrap_or(f64::NAN)
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "fifteen full-budget training runs (several days on one core)"]
fn full_model_outranks_every_ablation() {
    let root = e2e_dir();
    let data = e2e_dataset(&root);
    let base = e2e_train_config(&data);
    let grid = AblationGrid::default();
    let report = run_ablation(&base, &grid, &root.join("ablation"), &test_scenes(&data), 0).unwrap();
    println!("{}", report.table());
    verdict(
        "full model beats each ablated arm (rank-sum across seeds, p < 0.1)",
        report.ordering_holds,
        format!("{} runs", report.runs.len()),
    );
    assert!(report.ordering_holds);
}
