//! Multimodal rectified flow: the straight interpolation path between data
//! (`t = 0`) and Gaussian noise (`t = 1`), its velocity target, the masked
//! two-term loss and the Euler sampler.
//!
//! Tensors carry a leading batch axis: video is `B×T×3×H×W`, action is
//! `B×T×L`, and `t` holds one flow time per sample. A modality set to `None`
//! is disabled; every operation then reduces to single-modality flow.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CovarError, Result};
use crate::tensor::{Scalar, Tensor};

/// Default Euler step count.
pub const DEFAULT_STEPS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct JointState<S> {
    pub video: Option<Tensor<S>>,
    pub action: Option<Tensor<S>>,
    pub t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPair<S> {
    pub video: Option<Tensor<S>>,
    pub action: Option<Tensor<S>>,
}

/// Frame-level loss masks, shared by every sample in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub video: Vec<bool>,
    pub action: Vec<bool>,
}

impl LossMask {
    pub fn full(frames: usize) -> Self {
        Self {
            video: vec![true; frames],
            action: vec![true; frames],
        }
    }

    /// The training mask: the clean conditioning frame carries no loss.
    pub fn conditioning(frames: usize) -> Self {
        let mut m = Self::full(frames);
        m.video[0] = false;
        m
    }
}

/// Per-modality loss weights; unit weights give the plain two-term sum.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub video: f64,
    pub action: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            video: 1.0,
            action: 1.0,
        }
    }
}

fn batch_of<S: Scalar>(x: &JointState<S>) -> Option<usize> {
    x.video
        .as_ref()
        .or(x.action.as_ref())
        .map(|t| t.shape()[0])
}

fn pair<'a, S: Scalar>(
    what: &str,
    a: Option<&'a Tensor<S>>,
    b: Option<&'a Tensor<S>>,
) -> Result<Option<(&'a Tensor<S>, &'a Tensor<S>)>> {
    match (a, b) {
        (Some(a), Some(b)) => {
            a.expect_same_shape(b)?;
            Ok(Some((a, b)))
        }
        (None, None) => Ok(None),
        _ => Err(CovarError::Shape(format!(
            "{what}: modality present on one side only"
        ))),
    }
}

/// `x0 + t·(x1 − x0)` with per-sample `t`.
fn lerp<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: &[f64]) -> Tensor<S> {
    let per = x0.numel() / t.len().max(1);
    let mut out = x0.clone();
    for (b, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
        let tb = S::of(t[b]);
        let off = b * per;
        for (i, v) in chunk.iter_mut().enumerate() {
            let (a, z) = (x0.data()[off + i], x1.data()[off + i]);
            *v = a + tb * (z - a);
        }
    }
    out
}

/// Point on the straight path between data `x0` and noise `x1`.
/// The flow times stored in `x0`/`x1` are ignored.
pub fn interpolate<S: Scalar>(
    x0: &JointState<S>,
    x1: &JointState<S>,
    t: &[f64],
) -> Result<JointState<S>> {
    if let Some(&bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CovarError::Config(format!("flow time {bad} outside [0, 1]")));
    }
    let batch = batch_of(x0).unwrap_or(t.len());
    if t.len() != batch {
        return Err(CovarError::Shape(format!(
            "{} flow times for a batch of {batch}",
            t.len()
        )));
    }
    let video = pair("interpolate", x0.video.as_ref(), x1.video.as_ref())?
        .map(|(a, b)| lerp(a, b, t));
    let action = pair("interpolate", x0.action.as_ref(), x1.action.as_ref())?
        .map(|(a, b)| lerp(a, b, t));
    Ok(JointState {
        video,
        action,
        t: t.to_vec(),
    })
}

/// `x1 − x0` per modality; independent of `t`.
pub fn velocity_target<S: Scalar>(
    x0: &JointState<S>,
    x1: &JointState<S>,
) -> Result<VelocityPair<S>> {
    let sub = |p: Option<(&Tensor<S>, &Tensor<S>)>| -> Result<Option<Tensor<S>>> {
        p.map(|(a, b)| b.zip_map(a, |z, a| z - a)).transpose()
    };
    Ok(VelocityPair {
        video: sub(pair("velocity_target", x0.video.as_ref(), x1.video.as_ref())?)?,
        action: sub(pair("velocity_target", x0.action.as_ref(), x1.action.as_ref())?)?,
    })
}

/// Mean squared error over the frames selected by `mask`. The frame axis is
/// axis 1 of `pred`.
fn masked_mse<S: Scalar>(
    what: &'static str,
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mask: &[bool],
) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let (b, frames) = (pred.shape()[0], pred.shape()[1]);
    if mask.len() != frames {
        return Err(CovarError::Shape(format!(
            "{what} mask has {} entries for {frames} frames",
            mask.len()
        )));
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(CovarError::EmptyMask(what));
    }
    let per_frame = pred.numel() / (b * frames).max(1);
    let mut acc = 0.0;
    for (i, (p, q)) in pred
        .data()
        .chunks(per_frame)
        .zip(target.data().chunks(per_frame))
        .enumerate()
    {
        if mask[i % frames] {
            acc += p
                .iter()
                .zip(q)
                .map(|(&x, &y)| (x - y).to_f64_lossy().powi(2))
                .sum::<f64>();
        }
    }
    Ok(acc / (b * live * per_frame) as f64)
}

/// Per-modality masked losses and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowLoss {
    pub video: Option<f64>,
    pub action: Option<f64>,
    pub total: f64,
}

pub fn flow_loss<S: Scalar>(
    pred: &VelocityPair<S>,
    target: &VelocityPair<S>,
    mask: &LossMask,
) -> Result<FlowLoss> {
    flow_loss_weighted(pred, target, mask, LossWeights::default())
}

pub fn flow_loss_weighted<S: Scalar>(
    pred: &VelocityPair<S>,
    target: &VelocityPair<S>,
    mask: &LossMask,
    weights: LossWeights,
) -> Result<FlowLoss> {
    let video = pair("flow_loss", pred.video.as_ref(), target.video.as_ref())?
        .map(|(p, q)| masked_mse("video", p, q, &mask.video))
        .transpose()?;
    let action = pair("flow_loss", pred.action.as_ref(), target.action.as_ref())?
        .map(|(p, q)| masked_mse("action", p, q, &mask.action))
        .transpose()?;
    let total = video.map_or(0.0, |v| weights.video * v) + action.map_or(0.0, |a| weights.action * a);
    Ok(FlowLoss {
        video,
        action,
        total,
    })
}

/// Differentiable masked MSE inside a [`Graph`]; `pred` has frames on axis 1.
pub fn masked_mse_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    what: &'static str,
    pred: Var,
    target: &Tensor<S>,
    mask: &[bool],
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(CovarError::Shape(format!(
            "{what}: prediction {shape:?} vs target {:?}",
            target.shape()
        )));
    }
    if mask.len() != shape[1] {
        return Err(CovarError::Shape(format!(
            "{what} mask has {} entries for {} frames",
            mask.len(),
            shape[1]
        )));
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(CovarError::EmptyMask(what));
    }
    let mut mshape = vec![1; shape.len()];
    mshape[1] = shape[1];
    let m = Tensor::new(
        mshape,
        mask.iter().map(|&b| if b { S::one() } else { S::zero() }).collect(),
    )?;
    let tgt = g.constant(target.clone());
    let diff = g.sub(pred, tgt)?;
    let m = g.constant(m);
    let d = g.mul(diff, m)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq);
    let per_frame = target.numel() / (shape[0] * shape[1]);
    Ok(g.scale(total, S::of(1.0 / (shape[0] * live * per_frame) as f64)))
}

/// Draws one flow time per sample, uniform on `[0, 1]`.
pub fn sample_timestep<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<f64> {
    (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Standard-normal tensor of the given shape.
pub fn noise<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    Tensor::randn(shape.to_vec(), rng)
}

/// A learned (or analytic) velocity field `v(X_t, t)`.
pub trait VelocityField<S: Scalar> {
    fn velocity(&self, x: &JointState<S>) -> Result<VelocityPair<S>>;

    /// Re-imposes conditioning slots (e.g. a clean first frame) on `x`.
    fn pin(&self, _x: &mut JointState<S>) {}
}

impl<S: Scalar, F> VelocityField<S> for F
where
    F: Fn(&JointState<S>) -> Result<VelocityPair<S>>,
{
    fn velocity(&self, x: &JointState<S>) -> Result<VelocityPair<S>> {
        self(x)
    }
}

fn euler_update<S: Scalar>(x: &mut Tensor<S>, v: &Tensor<S>, dt: S) -> Result<()> {
    x.expect_same_shape(v)?;
    for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
        *a -= dt * b;
    }
    Ok(())
}

/// Integrates the field from `x1` at `t = 1` down to `t = 0` with `steps`
/// uniform Euler steps; conditioning is pinned at start and after each step.
pub fn euler_sample<S: Scalar>(
    field: &impl VelocityField<S>,
    mut x: JointState<S>,
    steps: usize,
) -> Result<JointState<S>> {
    if steps == 0 {
        return Err(CovarError::Config("euler_sample needs at least one step".into()));
    }
    let batch = batch_of(&x).unwrap_or(0);
    let dt = 1.0 / steps as f64;
    field.pin(&mut x);
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        x.t = vec![t; batch];
        let v = field.velocity(&x)?;
        let finite = v.video.as_ref().is_none_or(Tensor::is_finite)
            && v.action.as_ref().is_none_or(Tensor::is_finite);
        if !finite {
            return Err(CovarError::NonFinite {
                stage: "euler_sample",
                index: k,
            });
        }
        for (slot, vel) in [(&mut x.video, &v.video), (&mut x.action, &v.action)] {
            match (slot.as_mut(), vel) {
                (Some(s), Some(v)) => euler_update(s, v, S::of(dt))?,
                (None, None) => {}
                _ => {
                    return Err(CovarError::Shape(
                        "velocity modalities do not match the state".into(),
                    ))
                }
            }
        }
        field.pin(&mut x);
    }
    x.t = vec![0.0; batch];
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(v: Tensor<f64>, a: Tensor<f64>) -> JointState<f64> {
        JointState {
            video: Some(v),
            action: Some(a),
            t: vec![0.0; 1],
        }
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = state(Tensor::zeros([1, 2, 3, 2, 2]), Tensor::zeros([1, 2, 3]));
        let x1 = state(Tensor::full([1, 2, 3, 2, 2], 2.0), Tensor::full([1, 2, 3], 2.0));
        assert_eq!(interpolate(&x0, &x1, &[0.0]).unwrap().video, x0.video);
        assert_eq!(interpolate(&x0, &x1, &[1.0]).unwrap().action, x1.action);
        let mid = interpolate(&x0, &x1, &[0.5]).unwrap();
        assert!(mid.video.unwrap().data().iter().all(|&v| v == 1.0));
        assert!(interpolate(&x0, &x1, &[1.5]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x0 = state(Tensor::zeros([1, 2, 3, 2, 2]), Tensor::zeros([1, 2, 3]));
        let x1 = state(Tensor::zeros([1, 2, 3, 2, 2]), Tensor::zeros([1, 3, 3]));
        assert!(interpolate(&x0, &x1, &[0.5]).is_err());
        assert!(velocity_target(&x0, &x1).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let zero = VelocityPair {
            video: Some(Tensor::<f64>::zeros([2, 3, 3, 2, 2])),
            action: Some(Tensor::zeros([2, 3, 3])),
        };
        let ones = VelocityPair {
            video: Some(Tensor::full([2, 3, 3, 2, 2], 1.0)),
            action: Some(Tensor::full([2, 3, 3], 1.0)),
        };
        let l = flow_loss(&zero, &ones, &LossMask::full(3)).unwrap();
        assert_eq!(l.total, 2.0);
        assert_eq!(flow_loss(&ones, &ones, &LossMask::full(3)).unwrap().total, 0.0);
        let mut empty = LossMask::full(3);
        empty.action = vec![false; 3];
        assert!(matches!(
            flow_loss(&zero, &ones, &empty),
            Err(CovarError::EmptyMask("action"))
        ));
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Tensor<f64> = Tensor::randn([2, 4, 3, 2, 2], &mut rng);
        let tgt: Tensor<f64> = Tensor::randn([2, 4, 3, 2, 2], &mut rng);
        let mask = [false, true, true, false];
        let store = crate::params::ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = g.input(pred.clone());
        let l = masked_mse_graph(&mut g, "video", p, &tgt, &mask).unwrap();
        let direct = masked_mse("video", &pred, &tgt, &mask).unwrap();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn timesteps_are_uniform_and_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = sample_timestep(100_000, &mut a);
        assert_eq!(ta, sample_timestep(100_000, &mut b));
        assert!(ta.iter().all(|t| (0.0..=1.0).contains(t)));
        let mean = ta.iter().sum::<f64>() / ta.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = state(Tensor::randn([1, 2, 3, 2, 2], &mut rng), Tensor::randn([1, 2, 3], &mut rng));
        let c = 0.25;
        let field = |x: &JointState<f64>| -> Result<VelocityPair<f64>> {
            Ok(VelocityPair {
                video: x.video.as_ref().map(|v| Tensor::full(v.shape().to_vec(), c)),
                action: x.action.as_ref().map(|v| Tensor::full(v.shape().to_vec(), c)),
            })
        };
        for steps in [1, 4, 30] {
            let out = euler_sample(&field, x1.clone(), steps).unwrap();
            let want = x1.video.as_ref().unwrap().map(|v| v - c);
            assert!(out.video.unwrap().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn non_finite_velocity_reports_step() {
        let x1 = state(Tensor::zeros([1, 2, 3, 2, 2]), Tensor::zeros([1, 2, 3]));
        let field = |x: &JointState<f64>| -> Result<VelocityPair<f64>> {
            let bad = if x.t[0] < 0.6 { f64::NAN } else { 0.0 };
            Ok(VelocityPair {
                video: x.video.as_ref().map(|v| Tensor::full(v.shape().to_vec(), bad)),
                action: x.action.clone(),
            })
        };
        match euler_sample(&field, x1, 4) {
            Err(CovarError::NonFinite { stage, index }) => {
                assert_eq!(stage, "euler_sample");
                assert_eq!(index, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
