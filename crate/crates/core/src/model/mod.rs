//! The co-generation network: parallel video and action DiT branches coupled
//! by bridge attention, with text cross-attention and a 1-D UNet action head.

mod config;
mod decoder;

pub use config::{ActionDecoder, AttentionMode, ModelConfig};

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CovarError, Result};
use crate::flowcore::{self, masked_mse_graph, JointState, LossMask, LossWeights, VelocityField, VelocityPair};
use crate::nn::{self, add_linear, attention, linear, mlp, modulate, INIT_STD};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::toyworld::{render, EnvState, Resolution, SceneSpec};

/// What generation is conditioned on: the first frame `v₀` (`3×H×W`), the
/// initial joint state `a₀` (length `L`) and the instruction token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<S> {
    pub initial_frame: Tensor<S>,
    pub initial_action: Tensor<S>,
    pub tokens: Vec<i32>,
}

impl<S: Scalar> Conditioning<S> {
    pub fn from_scene(scene: &SceneSpec, res: Resolution) -> Self {
        let state = EnvState::initial(scene);
        Self {
            initial_frame: render(&state, scene, res).cast(),
            initial_action: Tensor::new(vec![3], state.as_action().0.map(|v| S::of(v as f64)).to_vec())
                .expect("three components"),
            tokens: scene.tokens().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Mask every cross-modal attention score (diagnostics only).
    pub block_diagonal: bool,
}

/// Graph handles for the predicted velocities.
#[derive(Clone, Copy, Debug)]
pub struct VelocityVars {
    pub video: Option<Var>,
    pub action: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub video: Option<Var>,
    pub action: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarModel {
    pub config: ModelConfig,
}

/// Overwrites frame 0 of every sample with its conditioning frame.
pub fn pin_first_frame<S: Scalar>(video: &mut Tensor<S>, cond: &[Conditioning<S>]) {
    let per_sample = video.numel() / cond.len().max(1);
    let frame = cond.first().map_or(0, |c| c.initial_frame.numel());
    for (b, c) in cond.iter().enumerate() {
        let start = b * per_sample;
        video.data_mut()[start..start + frame].copy_from_slice(c.initial_frame.data());
    }
}

/// Per-modality `(q, k, v)` projections followed by joint attention over the
/// concatenated `[f_v; f_a]` sequence; the result is split back at `N_v` and
/// passed through each modality's output projection. No residual.
///
/// `qkv` names the projection prefixes for the video and action tokens
/// (`{prefix}.q` etc.), `out` the output projections.
pub fn bridge_attention_core<S: Scalar>(
    g: &mut Graph<'_, S>,
    fv: Var,
    fa: Var,
    qkv: [&str; 2],
    out: [&str; 2],
    heads: usize,
    mask: Option<&Tensor<S>>,
) -> Result<(Var, Var)> {
    let (nv, na) = (g.shape(fv)[1], g.shape(fa)[1]);
    let mut proj = |kind: &str| -> Result<Var> {
        let a = linear(g, &format!("{}.{kind}", qkv[0]), fv)?;
        let b = linear(g, &format!("{}.{kind}", qkv[1]), fa)?;
        g.concat(&[a, b], 1)
    };
    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
    let o = attention(g, q, k, v, heads, mask)?;
    let ov = g.narrow(o, 1, 0, nv)?;
    let oa = g.narrow(o, 1, nv, na)?;
    Ok((linear(g, out[0], ov)?, linear(g, out[1], oa)?))
}

/// [`bridge_attention_core`] with residual connections: `(f_v + o_v, f_a + o_a)`.
pub fn bridge_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    fv: Var,
    fa: Var,
    qkv: [&str; 2],
    out: [&str; 2],
    heads: usize,
    mask: Option<&Tensor<S>>,
) -> Result<(Var, Var)> {
    let (ov, oa) = bridge_attention_core(g, fv, fa, qkv, out, heads, mask)?;
    Ok((g.add(fv, ov)?, g.add(fa, oa)?))
}

/// Queries from `x`, keys and values from `ctx`, all projections under `prefix`.
pub fn cross_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    prefix: &str,
    x: Var,
    ctx: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, &format!("{prefix}.q"), x)?;
    let k = linear(g, &format!("{prefix}.k"), ctx)?;
    let v = linear(g, &format!("{prefix}.v"), ctx)?;
    let o = attention(g, q, k, v, heads, None)?;
    linear(g, &format!("{prefix}.o"), o)
}

fn add_attn_set<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    kinds: &[&str],
    c: usize,
    rng: &mut R,
) {
    for k in kinds {
        add_linear(store, &format!("{prefix}.{k}"), c, c, Init::TruncNormal(INIT_STD), true, rng);
    }
}

impl CovarModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn branches(&self) -> &'static [&'static str] {
        if self.config.video_branch_enabled {
            &["video", "action"]
        } else {
            &["action"]
        }
    }

    /// Fresh parameters: truncated normal (σ = 0.02) weights, zero biases,
    /// zero adaptive-norm modulations and zero final projections.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<S> {
        let cfg = &self.config;
        let (c, l, p) = (cfg.hidden_dim, cfg.action_dim, cfg.patch_dim());
        let f = cfg.mlp_ratio * c;
        let tn = Init::TruncNormal(INIT_STD);
        let mut s = ParamStore::new();
        add_linear(&mut s, "t_embed.fc1", c, c, tn, true, rng);
        add_linear(&mut s, "t_embed.fc2", c, c, tn, true, rng);
        s.add("text.embed", &[cfg.vocab_size, c], tn, rng);
        add_linear(&mut s, "patch_embed", p, c, tn, true, rng);
        add_linear(&mut s, "action_embed.fc1", l, c, tn, true, rng);
        add_linear(&mut s, "action_embed.fc2", c, c, tn, true, rng);

        for i in 0..cfg.block_pairs {
            let pre = format!("blocks.{i}");
            for m in self.branches() {
                add_linear(&mut s, &format!("{pre}.{m}.ada"), c, cfg.sublayers() * 3 * c, Init::Zeros, true, rng);
                add_attn_set(&mut s, &format!("{pre}.{m}.text"), &["q", "k", "v", "o"], c, rng);
                add_linear(&mut s, &format!("{pre}.{m}.mlp.fc1"), c, f, tn, true, rng);
                add_linear(&mut s, &format!("{pre}.{m}.mlp.fc2"), f, c, tn, true, rng);
            }
            if !cfg.video_branch_enabled {
                add_attn_set(&mut s, &format!("{pre}.attn.action"), &["q", "k", "v", "o"], c, rng);
                continue;
            }
            match cfg.attention_mode {
                AttentionMode::SelfAttn => {
                    add_attn_set(&mut s, &format!("{pre}.attn.shared"), &["q", "k", "v"], c, rng);
                    add_attn_set(&mut s, &format!("{pre}.attn.video"), &["o"], c, rng);
                    add_attn_set(&mut s, &format!("{pre}.attn.action"), &["o"], c, rng);
                }
                AttentionMode::Bridge | AttentionMode::Cross => {
                    add_attn_set(&mut s, &format!("{pre}.attn.video"), &["q", "k", "v", "o"], c, rng);
                    add_attn_set(&mut s, &format!("{pre}.attn.action"), &["q", "k", "v", "o"], c, rng);
                }
            }
            if cfg.attention_mode == AttentionMode::Cross {
                add_attn_set(&mut s, &format!("{pre}.cross.video"), &["q", "k", "v", "o"], c, rng);
                add_attn_set(&mut s, &format!("{pre}.cross.action"), &["q", "k", "v", "o"], c, rng);
            }
        }

        if cfg.video_branch_enabled {
            add_linear(&mut s, "video_head.ada", c, 2 * c, Init::Zeros, true, rng);
            add_linear(&mut s, "video_head.proj", c, p, Init::Zeros, true, rng);
        }
        add_linear(&mut s, "action_head.ada", c, 2 * c, Init::Zeros, true, rng);
        decoder::add_params(&mut s, cfg, rng);
        s
    }

    fn check_inputs<S: Scalar>(&self, x: &JointState<S>, cond: &[Conditioning<S>]) -> Result<usize> {
        let cfg = &self.config;
        let b = cond.len();
        let action = x
            .action
            .as_ref()
            .ok_or_else(|| CovarError::Shape("the action modality is required".into()))?;
        if b == 0 || action.shape() != [b, cfg.frames, cfg.action_dim] || x.t.len() != b {
            return Err(CovarError::Shape(format!(
                "action {:?} / {} flow times / {b} conditionings do not match T={} L={}",
                action.shape(),
                x.t.len(),
                cfg.frames,
                cfg.action_dim
            )));
        }
        match (&x.video, cfg.video_branch_enabled) {
            (Some(v), true) => {
                let want = [b, cfg.frames, 3, cfg.height, cfg.width];
                if v.shape() != want {
                    return Err(CovarError::Shape(format!("video {:?}, expected {want:?}", v.shape())));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(CovarError::Shape("video given to an action-only model".into()))
            }
            (None, true) => return Err(CovarError::Shape("video modality missing".into())),
        }
        for c in cond {
            if c.initial_frame.shape() != [3, cfg.height, cfg.width]
                || c.initial_action.shape() != [cfg.action_dim]
                || c.tokens.len() != cfg.text_len
            {
                return Err(CovarError::Shape(format!(
                    "conditioning frame {:?}, a0 {:?}, {} tokens do not match the config",
                    c.initial_frame.shape(),
                    c.initial_action.shape(),
                    c.tokens.len()
                )));
            }
            if let Some(&bad) = c.tokens.iter().find(|&&t| t < 0 || t as usize >= cfg.vocab_size) {
                return Err(CovarError::Vocabulary(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        Ok(b)
    }

    fn embed_frames<S: Scalar>(&self, g: &mut Graph<'_, S>, video: &Tensor<S>) -> Result<Var> {
        let cfg = &self.config;
        let frames = video.shape()[1];
        let (hp, wp) = cfg.grid();
        let raw = g.constant(nn::patchify(video, cfg.patch_size)?);
        let x = linear(g, "patch_embed", raw)?;
        let pe = g.constant(nn::spacetime_pe(frames, hp, wp, cfg.hidden_dim));
        g.add(x, pe)
    }

    /// Runs the network; returns velocity handles inside `g`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: &JointState<S>,
        cond: &[Conditioning<S>],
        opts: ForwardOptions,
    ) -> Result<VelocityVars> {
        let cfg = &self.config;
        let b = self.check_inputs(x, cond)?;
        let (c, t, l, heads) = (cfg.hidden_dim, cfg.frames, cfg.action_dim, cfg.heads);

        // flow-time conditioning shared by both branches
        let tf = g.constant(nn::timestep_features(&x.t, c));
        let te = mlp_silu(g, "t_embed", tf)?;
        let te = g.silu(te);
        let te = g.reshape(te, &[b, 1, c])?;

        // instruction tokens
        let ids: Vec<usize> = cond.iter().flat_map(|c| c.tokens.iter().map(|&i| i as usize)).collect();
        let text = nn::embedding(g, "text.embed", &ids)?;
        let text = g.reshape(text, &[b, cfg.text_len, c])?;
        let tpe = g.constant(nn::temporal_pe(cfg.text_len, c));
        let text = g.add(text, tpe)?;

        // action stream: a₀ token followed by the noisy steps
        let mut a_in = Vec::with_capacity(b * (t + 1) * l);
        let noisy = x.action.as_ref().expect("checked");
        for (i, cnd) in cond.iter().enumerate() {
            a_in.extend_from_slice(cnd.initial_action.data());
            a_in.extend_from_slice(noisy.index0_slice(i));
        }
        let a_in = g.constant(Tensor::new(vec![b, t + 1, l], a_in)?);
        let fa = mlp(g, "action_embed", a_in)?;
        let ape = g.constant(nn::temporal_pe(t + 1, c));
        let mut fa = g.add(fa, ape)?;

        let mut fv = None;
        let mut ctx = text;
        if let Some(video) = &x.video {
            let mut v = video.clone();
            pin_first_frame(&mut v, cond);
            fv = Some(self.embed_frames(g, &v)?);
        } else {
            // action-only: the first frame reaches the branch through the
            // cross-attention context
            let frames: Vec<Tensor<S>> = cond.iter().map(|c| c.initial_frame.clone()).collect();
            let v0 = Tensor::stack(&frames)?.reshape(vec![b, 1, 3, cfg.height, cfg.width])?;
            let img = self.embed_frames(g, &v0)?;
            ctx = g.concat(&[text, img], 1)?;
        }

        let mask = match (opts.block_diagonal, fv) {
            (true, Some(_)) => Some(nn::block_diagonal_mask(cfg.video_tokens(), t + 1)),
            _ => None,
        };

        for i in 0..cfg.block_pairs {
            let pre = format!("blocks.{i}");
            let nsub = cfg.sublayers();
            let ada_a = linear(g, &format!("{pre}.action.ada"), te)?;
            let ma = nn::chunks(g, ada_a, 3 * nsub)?;
            match fv {
                Some(v) => {
                    let ada_v = linear(g, &format!("{pre}.video.ada"), te)?;
                    let mv = nn::chunks(g, ada_v, 3 * nsub)?;
                    let (nv, na) = self.attention_stage(g, i, v, fa, &mv, &ma, mask.as_ref())?;
                    let (mut nv, mut na) = (nv, na);
                    let mut s = 1;
                    if cfg.attention_mode == AttentionMode::Cross {
                        let hv = modulate(g, nv, mv[3], mv[4])?;
                        let ha = modulate(g, na, ma[3], ma[4])?;
                        let cv = cross_attention(g, &format!("{pre}.cross.video"), hv, ha, heads)?;
                        let ca = cross_attention(g, &format!("{pre}.cross.action"), ha, hv, heads)?;
                        nv = gated(g, nv, mv[5], cv)?;
                        na = gated(g, na, ma[5], ca)?;
                        s = 2;
                    }
                    nv = self.text_and_mlp(g, &format!("{pre}.video"), nv, ctx, &mv[3 * s..])?;
                    na = self.text_and_mlp(g, &format!("{pre}.action"), na, ctx, &ma[3 * s..])?;
                    fv = Some(nv);
                    fa = na;
                }
                None => {
                    let h = modulate(g, fa, ma[0], ma[1])?;
                    let o = self_attention(g, &format!("{pre}.attn.action"), h, heads)?;
                    fa = gated(g, fa, ma[2], o)?;
                    fa = self.text_and_mlp(g, &format!("{pre}.action"), fa, ctx, &ma[3..])?;
                }
            }
            let finite = g.value(fa).is_finite() && fv.is_none_or(|v| g.value(v).is_finite());
            if !finite {
                return Err(CovarError::NonFinite { stage: "forward", index: i });
            }
        }

        let video = match fv {
            Some(v) => {
                let ada = linear(g, "video_head.ada", te)?;
                let m = nn::chunks(g, ada, 2)?;
                let h = modulate(g, v, m[0], m[1])?;
                let out = linear(g, "video_head.proj", h)?;
                Some(nn::unpatchify_graph(g, out, t, cfg.height, cfg.width, cfg.patch_size)?)
            }
            None => None,
        };
        let ada = linear(g, "action_head.ada", te)?;
        let m = nn::chunks(g, ada, 2)?;
        let h = modulate(g, fa, m[0], m[1])?;
        let action = decoder::decode(g, cfg, h)?;
        Ok(VelocityVars { video, action })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_stage<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        block: usize,
        fv: Var,
        fa: Var,
        mv: &[Var],
        ma: &[Var],
        mask: Option<&Tensor<S>>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let pre = format!("blocks.{block}.attn");
        let hv = modulate(g, fv, mv[0], mv[1])?;
        let ha = modulate(g, fa, ma[0], ma[1])?;
        let (vo, ao) = (format!("{pre}.video.o"), format!("{pre}.action.o"));
        let (ov, oa) = match cfg.attention_mode {
            AttentionMode::SelfAttn => {
                let shared = format!("{pre}.shared");
                bridge_attention_core(g, hv, ha, [&shared, &shared], [&vo, &ao], cfg.heads, mask)?
            }
            AttentionMode::Bridge if block % cfg.bridge_interval == 0 || mask.is_some() => {
                let (v, a) = (format!("{pre}.video"), format!("{pre}.action"));
                bridge_attention_core(g, hv, ha, [&v, &a], [&vo, &ao], cfg.heads, mask)?
            }
            _ => (
                self_attention(g, &format!("{pre}.video"), hv, cfg.heads)?,
                self_attention(g, &format!("{pre}.action"), ha, cfg.heads)?,
            ),
        };
        Ok((gated(g, fv, mv[2], ov)?, gated(g, fa, ma[2], oa)?))
    }

    /// Text cross-attention then the MLP, each with its own modulation triple.
    fn text_and_mlp<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        prefix: &str,
        x: Var,
        ctx: Var,
        m: &[Var],
    ) -> Result<Var> {
        let h = modulate(g, x, m[0], m[1])?;
        let o = cross_attention(g, &format!("{prefix}.text"), h, ctx, self.config.heads)?;
        let x = gated(g, x, m[2], o)?;
        let h = modulate(g, x, m[3], m[4])?;
        let o = mlp(g, &format!("{prefix}.mlp"), h)?;
        gated(g, x, m[5], o)
    }

    /// Forward pass plus the masked two-term flow loss.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: &JointState<S>,
        cond: &[Conditioning<S>],
        target: &VelocityPair<S>,
        mask: &LossMask,
        weights: LossWeights,
        opts: ForwardOptions,
    ) -> Result<LossVars> {
        let out = self.forward(g, x, cond, opts)?;
        let ta = target
            .action
            .as_ref()
            .ok_or_else(|| CovarError::Shape("action target missing".into()))?;
        let la = masked_mse_graph(g, "action", out.action, ta, &mask.action)?;
        let mut total = g.scale(la, S::of(weights.action));
        let mut video = None;
        if let (Some(pv), Some(tv)) = (out.video, target.video.as_ref()) {
            let lv = masked_mse_graph(g, "video", pv, tv, &mask.video)?;
            let w = g.scale(lv, S::of(weights.video));
            total = g.add(total, w)?;
            video = Some(lv);
        }
        Ok(LossVars {
            total,
            video,
            action: la,
        })
    }

    /// Inference-only velocity prediction.
    pub fn predict<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &JointState<S>,
        cond: &[Conditioning<S>],
    ) -> Result<VelocityPair<S>> {
        let mut g = Graph::inference(params);
        let out = self.forward(&mut g, x, cond, ForwardOptions::default())?;
        Ok(VelocityPair {
            video: out.video.map(|v| g.value(v).clone()),
            action: Some(g.value(out.action).clone()),
        })
    }

    /// Standard-normal starting point at `t = 1` (video first, then action).
    pub fn noise_state<S: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> JointState<S> {
        let cfg = &self.config;
        let video = cfg.video_branch_enabled.then(|| {
            flowcore::noise(&[batch, cfg.frames, 3, cfg.height, cfg.width], rng)
        });
        let action = Some(flowcore::noise(&[batch, cfg.frames, cfg.action_dim], rng));
        JointState {
            video,
            action,
            t: vec![1.0; batch],
        }
    }

    /// Euler-integrates the learned field from fresh noise.
    pub fn sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<S>,
        cond: &[Conditioning<S>],
        steps: usize,
        rng: &mut R,
    ) -> Result<JointState<S>> {
        let x1 = self.noise_state(cond.len(), rng);
        let field = ConditionedField {
            model: self,
            params,
            cond,
        };
        flowcore::euler_sample(&field, x1, steps)
    }
}

fn gated<S: Scalar>(g: &mut Graph<'_, S>, x: Var, gate: Var, out: Var) -> Result<Var> {
    let o = g.mul(out, gate)?;
    g.add(x, o)
}

fn self_attention<S: Scalar>(g: &mut Graph<'_, S>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    cross_attention(g, prefix, x, x, heads)
}

/// `fc2(silu(fc1(x)))`, the timestep MLP.
fn mlp_silu<S: Scalar>(g: &mut Graph<'_, S>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{name}.fc1"), x)?;
    let h = g.silu(h);
    linear(g, &format!("{name}.fc2"), h)
}

/// The model bound to parameters and a conditioning batch, as a sampler field.
pub struct ConditionedField<'a, S: Scalar> {
    pub model: &'a CovarModel,
    pub params: &'a ParamStore<S>,
    pub cond: &'a [Conditioning<S>],
}

impl<S: Scalar> VelocityField<S> for ConditionedField<'_, S> {
    fn velocity(&self, x: &JointState<S>) -> Result<VelocityPair<S>> {
        self.model.predict(self.params, x, self.cond)
    }

    fn pin(&self, x: &mut JointState<S>) {
        if let Some(v) = x.video.as_mut() {
            pin_first_frame(v, self.cond);
        }
    }
}
