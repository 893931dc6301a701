//! Action heads: a two-level 1-D temporal UNet (default) or a per-step MLP.

use rand::Rng;

use super::config::{ActionDecoder, ModelConfig};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{add_linear, linear, INIT_STD};
use crate::params::{Init, ParamStore};
use crate::tensor::Scalar;

const KERNEL: usize = 3;

pub(super) fn add_params<S: Scalar, R: Rng + ?Sized>(
    s: &mut ParamStore<S>,
    cfg: &ModelConfig,
    rng: &mut R,
) {
    let (c, l) = (cfg.hidden_dim, cfg.action_dim);
    let tn = Init::TruncNormal(INIT_STD);
    match cfg.action_decoder {
        ActionDecoder::Unet => {
            let k = KERNEL;
            add_linear(s, "action_head.unet.down1", k * c, 2 * c, tn, true, rng);
            add_linear(s, "action_head.unet.down2", k * 2 * c, 4 * c, tn, true, rng);
            add_linear(s, "action_head.unet.mid", k * 4 * c, 4 * c, tn, true, rng);
            add_linear(s, "action_head.unet.up1", k * 6 * c, 2 * c, tn, true, rng);
            add_linear(s, "action_head.unet.up0", k * 3 * c, c, tn, true, rng);
            add_linear(s, "action_head.unet.out", c, l, Init::Zeros, true, rng);
        }
        ActionDecoder::Mlp => {
            add_linear(s, "action_head.mlp.fc1", c, c, tn, true, rng);
            add_linear(s, "action_head.mlp.out", c, l, Init::Zeros, true, rng);
        }
    }
}

/// Kernel-3 convolution along time as unfold + linear.
fn conv<S: Scalar>(g: &mut Graph<'_, S>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let cols = g.unfold1d(x, KERNEL, stride, KERNEL / 2)?;
    let y = linear(g, name, cols)?;
    Ok(g.gelu(y))
}

/// Nearest upsampling by 2, cropped to the skip connection's length.
fn up_to<S: Scalar>(g: &mut Graph<'_, S>, x: Var, len: usize) -> Result<Var> {
    let u = g.upsample1d(x, 2)?;
    g.narrow(u, 1, 0, len)
}

/// Maps action-stream features `B×(T+1)×C` to velocities `B×T×L`; the
/// conditioning token at index 0 is dropped first.
pub(super) fn decode<S: Scalar>(g: &mut Graph<'_, S>, cfg: &ModelConfig, fa: Var) -> Result<Var> {
    let t = cfg.frames;
    let x = g.narrow(fa, 1, 1, t)?;
    match cfg.action_decoder {
        ActionDecoder::Unet => {
            let d1 = conv(g, "action_head.unet.down1", x, 2)?;
            let d2 = conv(g, "action_head.unet.down2", d1, 2)?;
            let mid = conv(g, "action_head.unet.mid", d2, 1)?;
            let t1 = g.shape(d1)[1];
            let u1 = up_to(g, mid, t1)?;
            let u1 = g.concat(&[u1, d1], 2)?;
            let u1 = conv(g, "action_head.unet.up1", u1, 1)?;
            let u0 = up_to(g, u1, t)?;
            let u0 = g.concat(&[u0, x], 2)?;
            let u0 = conv(g, "action_head.unet.up0", u0, 1)?;
            linear(g, "action_head.unet.out", u0)
        }
        ActionDecoder::Mlp => {
            let h = linear(g, "action_head.mlp.fc1", x)?;
            let h = g.gelu(h);
            linear(g, "action_head.mlp.out", h)
        }
    }
}
