//! Action refinement: a small transformer that maps coarse action sequences
//! to precise ones, conditioned on the first frame and the instruction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CovarError, Result};
use crate::flowcore::masked_mse_graph;
use crate::model::{cross_attention, Conditioning};
use crate::nn::{self, add_linear, linear, mlp, INIT_STD, LN_EPS};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::toyworld::{ACTION_DIM, TOKEN_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCurriculum {
    /// Temporal Gaussian blur width as a fraction of the sequence length.
    pub smooth_sigma: f64,
    pub jitter_sigma: f64,
    /// Probability of drawing the coarse sequence from the trained model.
    pub mix_model_fraction: f64,
}

impl Default for NoiseCurriculum {
    fn default() -> Self {
        Self {
            smooth_sigma: 0.15,
            jitter_sigma: 0.1,
            mix_model_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub self_blocks: usize,
    pub cross_blocks: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub action_dim: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub mlp_ratio: usize,
    pub noise_curriculum: NoiseCurriculum,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            heads: 4,
            self_blocks: 2,
            cross_blocks: 2,
            patch_size: 8,
            frames: 8,
            height: 32,
            width: 32,
            action_dim: ACTION_DIM,
            vocab_size: 32,
            text_len: TOKEN_LEN,
            mlp_ratio: 4,
            noise_curriculum: NoiseCurriculum::default(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.hidden_dim;
        let n = &self.noise_curriculum;
        let positive = [
            c,
            self.heads,
            self.self_blocks,
            self.cross_blocks,
            self.patch_size,
            self.frames,
            self.action_dim,
            self.text_len,
            self.vocab_size,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(CovarError::Config("refiner sizes must be positive".into()));
        }
        if c % self.heads != 0 || c % 8 != 0 {
            return Err(CovarError::Config(format!(
                "refiner hidden_dim {c} must be a multiple of 8 and of heads {}",
                self.heads
            )));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(CovarError::Config("refiner frame not divisible by patch_size".into()));
        }
        if n.smooth_sigma < 0.0 || n.jitter_sigma < 0.0 || !(0.0..=1.0).contains(&n.mix_model_fraction) {
            return Err(CovarError::Config(format!("invalid noise curriculum {n:?}")));
        }
        Ok(())
    }
}

/// A coarse action sequence and the expert sequence it should map to.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePair {
    pub coarse: Tensor<f32>,
    pub target: Tensor<f32>,
    pub cond: Conditioning<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    pub config: RefinerConfig,
}

impl Refiner {
    pub fn new(config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Fresh parameters; the decoder's output layer starts at zero so an
    /// untrained refiner is the identity.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<S> {
        let cfg = &self.config;
        let (c, l) = (cfg.hidden_dim, cfg.action_dim);
        let f = cfg.mlp_ratio * c;
        let p = 3 * cfg.patch_size * cfg.patch_size;
        let tn = Init::TruncNormal(INIT_STD);
        let mut s = ParamStore::new();
        add_linear(&mut s, "action_embed.fc1", l, c, tn, true, rng);
        add_linear(&mut s, "action_embed.fc2", c, c, tn, true, rng);
        add_linear(&mut s, "patch_embed", p, c, tn, true, rng);
        s.add("text.embed", &[cfg.vocab_size, c], tn, rng);
        let blocks = (0..cfg.self_blocks)
            .map(|j| format!("self.{j}"))
            .chain((0..cfg.cross_blocks).map(|j| format!("cross.{j}")));
        for pre in blocks {
            for k in ["q", "k", "v", "o"] {
                add_linear(&mut s, &format!("{pre}.attn.{k}"), c, c, tn, true, rng);
            }
            add_linear(&mut s, &format!("{pre}.mlp.fc1"), c, f, tn, true, rng);
            add_linear(&mut s, &format!("{pre}.mlp.fc2"), f, c, tn, true, rng);
        }
        add_linear(&mut s, "decoder.fc1", c, c, tn, true, rng);
        add_linear(&mut s, "decoder.out", c, l, Init::Zeros, true, rng);
        s
    }

    /// `coarse` is `B×T×L`; returns refined actions of the same shape.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        coarse: &Tensor<S>,
        cond: &[Conditioning<S>],
    ) -> Result<Var> {
        let cfg = &self.config;
        let (c, t, l) = (cfg.hidden_dim, cfg.frames, cfg.action_dim);
        let b = cond.len();
        if coarse.shape() != [b, t, l] {
            return Err(CovarError::Shape(format!(
                "coarse actions {:?}, expected {:?}",
                coarse.shape(),
                [b, t, l]
            )));
        }
        for cd in cond {
            if cd.initial_frame.shape() != [3, cfg.height, cfg.width] || cd.tokens.len() != cfg.text_len {
                return Err(CovarError::Shape("refiner conditioning does not match config".into()));
            }
            if cd.tokens.iter().any(|&i| i < 0 || i as usize >= cfg.vocab_size) {
                return Err(CovarError::Vocabulary("token id outside refiner vocabulary".into()));
            }
        }
        let coarse_v = g.constant(coarse.clone());
        let a = mlp(g, "action_embed", coarse_v)?;
        let ape = g.constant(nn::temporal_pe(t, c));
        let a = g.add(a, ape)?;

        let frames: Vec<Tensor<S>> = cond.iter().map(|c| c.initial_frame.clone()).collect();
        let v0 = Tensor::stack(&frames)?.reshape(vec![b, 1, 3, cfg.height, cfg.width])?;
        let raw = g.constant(nn::patchify(&v0, cfg.patch_size)?);
        let img = linear(g, "patch_embed", raw)?;
        let (hp, wp) = (cfg.height / cfg.patch_size, cfg.width / cfg.patch_size);
        let ipe = g.constant(nn::spacetime_pe(1, hp, wp, c));
        let img = g.add(img, ipe)?;

        let ids: Vec<usize> = cond.iter().flat_map(|c| c.tokens.iter().map(|&i| i as usize)).collect();
        let text = nn::embedding(g, "text.embed", &ids)?;
        let text = g.reshape(text, &[b, cfg.text_len, c])?;
        let tpe = g.constant(nn::temporal_pe(cfg.text_len, c));
        let text = g.add(text, tpe)?;

        let mut x = g.concat(&[a, img], 1)?;
        for j in 0..cfg.self_blocks {
            x = self.block(g, &format!("self.{j}"), x, None)?;
        }
        for j in 0..cfg.cross_blocks {
            x = self.block(g, &format!("cross.{j}"), x, Some(text))?;
        }
        let h = g.narrow(x, 1, 0, t)?;
        let h = g.layer_norm(h, LN_EPS);
        let h = linear(g, "decoder.fc1", h)?;
        let h = g.gelu(h);
        let delta = linear(g, "decoder.out", h)?;
        g.add(coarse_v, delta)
    }

    /// Pre-norm attention (self-attention, or cross-attention onto `ctx`)
    /// followed by a pre-norm MLP.
    fn block<S: Scalar>(&self, g: &mut Graph<'_, S>, pre: &str, x: Var, ctx: Option<Var>) -> Result<Var> {
        let h = g.layer_norm(x, LN_EPS);
        let kv = ctx.unwrap_or(h);
        let o = cross_attention(g, &format!("{pre}.attn"), h, kv, self.config.heads)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, LN_EPS);
        let o = mlp(g, &format!("{pre}.mlp"), h)?;
        g.add(x, o)
    }

    pub fn refine<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        coarse: &Tensor<S>,
        cond: &[Conditioning<S>],
    ) -> Result<Tensor<S>> {
        let mut g = Graph::inference(params);
        let out = self.forward(&mut g, coarse, cond)?;
        Ok(g.value(out).clone())
    }
}

/// Mean squared error between refined and target actions.
pub fn refiner_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    if pred.numel() == 0 {
        return Err(CovarError::EmptyMask("refiner"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Graph form of [`refiner_loss`] for training.
pub fn refiner_loss_graph<S: Scalar>(g: &mut Graph<'_, S>, pred: Var, target: &Tensor<S>) -> Result<Var> {
    let frames = target.shape()[1];
    masked_mse_graph(g, "refiner", pred, target, &vec![true; frames])
}

/// Gaussian blur along time (axis 0 of a `T×L` tensor) with replicated
/// edges; `sigma` is in steps.
pub fn smooth_time(x: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let (t, l) = (x.shape()[0], x.shape()[1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    Tensor::from_fn([t, l], |i| {
        let (row, col) = ((i / l) as isize, i % l);
        let acc: f64 = (-radius..=radius)
            .zip(&weights)
            .map(|(d, w)| {
                let r = (row + d).clamp(0, t as isize - 1) as usize;
                w * x.data()[r * l + col] as f64
            })
            .sum();
        (acc / norm) as f32
    })
}

/// Source of model-generated coarse actions for the curriculum's mixed branch.
pub trait CoarseSampler {
    fn sample(&self, index: usize) -> Result<Tensor<f32>>;
}

/// Builds a coarse version of `target` (`T×L`). With probability
/// `1 − mix_model_fraction` it is the blurred target plus Gaussian jitter;
/// otherwise it comes from `model` (an error if none is available).
pub fn make_coarse<R: Rng + ?Sized>(
    target: &Tensor<f32>,
    rng: &mut R,
    cfg: &NoiseCurriculum,
    model: Option<(&dyn CoarseSampler, usize)>,
) -> Result<Tensor<f32>> {
    if !target.is_finite() {
        return Err(CovarError::NonFinite {
            stage: "make_coarse",
            index: 0,
        });
    }
    let u: f64 = rng.random();
    if u < cfg.mix_model_fraction {
        let (sampler, index) = model.ok_or_else(|| {
            CovarError::MissingModel("the curriculum requests model samples but no checkpoint was given".into())
        })?;
        return sampler.sample(index);
    }
    let t = target.shape()[0];
    let mut out = smooth_time(target, cfg.smooth_sigma * t as f64);
    if cfg.jitter_sigma > 0.0 {
        for v in out.data_mut() {
            *v += (rng.sample::<f64, _>(StandardNormal) * cfg.jitter_sigma) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{expert_demo, sample_scene, Resolution, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Refiner {
        Refiner::new(RefinerConfig {
            hidden_dim: 16,
            heads: 2,
            self_blocks: 1,
            cross_blocks: 1,
            frames: 8,
            height: 16,
            width: 16,
            ..Default::default()
        })
        .unwrap()
    }

    fn cond() -> Vec<Conditioning<f32>> {
        let res = Resolution { height: 16, width: 16 };
        vec![Conditioning::from_scene(&sample_scene(1, Task::PickPlace).unwrap(), res)]
    }

    #[test]
    fn zero_decoder_is_identity() {
        let r = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p: ParamStore<f32> = r.init_params(&mut rng);
        let out_w = p.by_name("decoder.out.weight").unwrap().clone();
        p.randomize(0.3, &mut rng);
        p.set("decoder.out.weight", out_w.clone()).unwrap();
        p.set("decoder.out.bias", Tensor::zeros([3])).unwrap();
        let coarse = Tensor::randn([1, 8, 3], &mut rng);
        let out = r.refine(&p, &coarse, &cond()).unwrap();
        assert!(out.max_abs_diff(&coarse) <= 1e-6);
        assert_eq!(out.shape(), &[1, 8, 3]);
    }

    #[test]
    fn loss_values() {
        let a = Tensor::from_fn([8, 3], |i| i as f32 * 0.1);
        assert_eq!(refiner_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((refiner_loss(&b, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coarse_identity_and_determinism() {
        let s = sample_scene(2, Task::PickPlace).unwrap();
        let ep = expert_demo(&s, 8, Resolution::default()).unwrap();
        let off = NoiseCurriculum {
            smooth_sigma: 0.0,
            jitter_sigma: 0.0,
            mix_model_fraction: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(make_coarse(&ep.actions, &mut rng, &off, None).unwrap(), ep.actions);
        let cur = NoiseCurriculum {
            mix_model_fraction: 0.0,
            ..Default::default()
        };
        let a = make_coarse(&ep.actions, &mut ChaCha8Rng::seed_from_u64(5), &cur, None).unwrap();
        let b = make_coarse(&ep.actions, &mut ChaCha8Rng::seed_from_u64(5), &cur, None).unwrap();
        assert_eq!(a, b);
        let all_model = NoiseCurriculum {
            mix_model_fraction: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            make_coarse(&ep.actions, &mut rng, &all_model, None),
            Err(CovarError::MissingModel(_))
        ));
    }
}
