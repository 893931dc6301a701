//! Layer helpers over [`Graph`]: named linear layers, multi-head attention,
//! adaptive layer-norm modulation and sinusoidal encodings.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CovarError, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Registers `{name}.weight` (`din×dout`) and, if `bias`, `{name}.bias`.
pub fn add_linear<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    din: usize,
    dout: usize,
    init: Init,
    bias: bool,
    rng: &mut R,
) {
    store.add(format!("{name}.weight"), &[din, dout], init, rng);
    if bias {
        store.add(format!("{name}.bias"), &[dout], Init::Zeros, rng);
    }
}

/// Element count of a layer registered with [`add_linear`].
pub fn linear_size(din: usize, dout: usize, bias: bool) -> usize {
    din * dout + if bias { dout } else { 0 }
}

fn param<S: Scalar>(g: &mut Graph<'_, S>, name: &str) -> Result<Var> {
    let id = g
        .params()
        .id(name)
        .ok_or_else(|| CovarError::MissingModel(format!("parameter {name} is not registered")))?;
    Ok(g.param(id))
}

pub fn linear<S: Scalar>(g: &mut Graph<'_, S>, name: &str, x: Var) -> Result<Var> {
    let w = param(g, &format!("{name}.weight"))?;
    let bname = format!("{name}.bias");
    let b = match g.params().id(&bname) {
        Some(id) => Some(g.param(id)),
        None => None,
    };
    g.linear(x, w, b)
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp<S: Scalar>(g: &mut Graph<'_, S>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, &format!("{name}.fc2"), h)
}

pub fn embedding<S: Scalar>(g: &mut Graph<'_, S>, name: &str, ids: &[usize]) -> Result<Var> {
    let table = param(g, name)?;
    g.gather_rows(table, ids)
}

/// Multi-head scaled dot-product attention. `q` is `B×N×C`, `k`/`v` are
/// `B×M×C`; `mask` (`N×M`, additive, `-inf` blocks) is optional.
pub fn attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Tensor<S>>,
) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != ks {
        return Err(CovarError::Shape(format!(
            "attention: q {qs:?}, k {ks:?}, v {:?}",
            g.shape(v)
        )));
    }
    let (b, n, c) = (qs[0], qs[1], qs[2]);
    let m = ks[1];
    if heads == 0 || c % heads != 0 {
        return Err(CovarError::Shape(format!("{heads} heads do not divide width {c}")));
    }
    let d = c / heads;
    let split = |g: &mut Graph<'_, S>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, d])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, len, d])
    };
    let qh = split(g, q, n)?;
    let kh = split(g, k, m)?;
    let vh = split(g, v, m)?;
    let scores = g.bmm(qh, kh, false, true)?;
    let mut scores = g.scale(scores, S::of(1.0 / (d as f64).sqrt()));
    if let Some(mask) = mask {
        if mask.shape() != [n, m] {
            return Err(CovarError::Shape(format!(
                "attention mask {:?} for {n}×{m} scores",
                mask.shape()
            )));
        }
        let mv = g.constant(mask.clone());
        scores = g.add(scores, mv)?;
    }
    let p = g.softmax(scores);
    let o = g.bmm(p, vh, false, false)?;
    let o = g.reshape(o, &[b, heads, n, d])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, n, c])
}

/// Additive mask that blocks attention between the first `n1` and the
/// remaining `n2` tokens.
pub fn block_diagonal_mask<S: Scalar>(n1: usize, n2: usize) -> Tensor<S> {
    let n = n1 + n2;
    Tensor::from_fn([n, n], |i| {
        let (r, c) = (i / n, i % n);
        if (r < n1) == (c < n1) {
            S::zero()
        } else {
            S::neg_infinity()
        }
    })
}

/// `LN(x)·(1 + scale) + shift`, with `shift`/`scale` shaped `B×1×C`.
pub fn modulate<S: Scalar>(g: &mut Graph<'_, S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm(x, LN_EPS);
    let s1 = g.add_scalar(scale, S::one());
    let h = g.mul(h, s1)?;
    g.add(h, shift)
}

/// Splits an adaptive-norm projection `B×1×(n·C)` into `n` chunks of width `C`.
pub fn chunks<S: Scalar>(g: &mut Graph<'_, S>, x: Var, n: usize) -> Result<Vec<Var>> {
    let w = g.shape(x)[2];
    let c = w / n;
    (0..n).map(|i| g.narrow(x, 2, i * c, c)).collect()
}

/// Classic sinusoidal table `n×dim`: even columns `sin`, odd columns `cos`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = (10000f64).powf(-((2 * i) as f64) / dim as f64);
            out[r * dim + 2 * i] = (p * freq).sin();
            out[r * dim + 2 * i + 1] = (p * freq).cos();
        }
    }
    out
}

/// Flow-time features fed to the timestep MLP (`t` scaled to `[0, 1000]`).
pub fn timestep_features<S: Scalar>(t: &[f64], dim: usize) -> Tensor<S> {
    let pos: Vec<f64> = t.iter().map(|t| t * 1000.0).collect();
    let data = sinusoidal(&pos, dim).into_iter().map(S::of).collect();
    Tensor::new(vec![t.len(), dim], data).expect("table size")
}

/// Sequence positions `0..n` encoded at width `dim`.
pub fn temporal_pe<S: Scalar>(n: usize, dim: usize) -> Tensor<S> {
    let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let data = sinusoidal(&pos, dim).into_iter().map(S::of).collect();
    Tensor::new(vec![n, dim], data).expect("table size")
}

/// Space-time encoding for a `frames×rows×cols` token grid: half the width
/// encodes time, a quarter each row and column. `dim` must be a multiple of 8.
pub fn spacetime_pe<S: Scalar>(frames: usize, rows: usize, cols: usize, dim: usize) -> Tensor<S> {
    let (dt, ds) = (dim / 2, dim / 4);
    let te = sinusoidal(&(0..frames).map(|i| i as f64).collect::<Vec<_>>(), dt);
    let re = sinusoidal(&(0..rows).map(|i| i as f64).collect::<Vec<_>>(), ds);
    let ce = sinusoidal(&(0..cols).map(|i| i as f64).collect::<Vec<_>>(), ds);
    let mut out = Vec::with_capacity(frames * rows * cols * dim);
    for f in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                out.extend(te[f * dt..(f + 1) * dt].iter().map(|&v| S::of(v)));
                out.extend(re[r * ds..(r + 1) * ds].iter().map(|&v| S::of(v)));
                out.extend(ce[c * ds..(c + 1) * ds].iter().map(|&v| S::of(v)));
            }
        }
    }
    Tensor::new(vec![frames * rows * cols, dim], out).expect("table size")
}

/// Rearranges `B×T×3×H×W` video into `B×N×(3·p²)` patch rows, patches
/// ordered by (frame, row, col) and each patch by (channel, y, x).
pub fn patchify<S: Scalar>(video: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let s = video.shape();
    if s.len() != 5 || s[2] != 3 {
        return Err(CovarError::Shape(format!("patchify expects B×T×3×H×W, got {s:?}")));
    }
    let (b, t, h, w) = (s[0], s[1], s[3], s[4]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CovarError::Shape(format!(
            "frame {h}×{w} is not divisible by patch size {patch}"
        )));
    }
    let (hp, wp) = (h / patch, w / patch);
    video
        .clone()
        .reshape(vec![b, t, 3, hp, patch, wp, patch])?
        .permute(&[0, 1, 3, 5, 2, 4, 6])?
        .reshape(vec![b, t * hp * wp, 3 * patch * patch])
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(
    tokens: &Tensor<S>,
    frames: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor<S>> {
    let b = tokens.shape()[0];
    let (hp, wp) = (height / patch, width / patch);
    tokens
        .clone()
        .reshape(vec![b, frames, hp, wp, 3, patch, patch])?
        .permute(&[0, 1, 4, 2, 5, 3, 6])?
        .reshape(vec![b, frames, 3, height, width])
}

/// Graph version of [`unpatchify`] for the video head.
pub fn unpatchify_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    tokens: Var,
    frames: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Var> {
    let b = g.shape(tokens)[0];
    let (hp, wp) = (height / patch, width / patch);
    let x = g.reshape(tokens, &[b, frames, hp, wp, 3, patch, patch])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3, 6])?;
    g.reshape(x, &[b, frames, 3, height, width])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Tensor<f32> = Tensor::randn([2, 3, 3, 8, 16], &mut rng);
        let p = patchify(&v, 4).unwrap();
        assert_eq!(p.shape(), &[2, 3 * 2 * 4, 48]);
        assert_eq!(unpatchify(&p, 3, 8, 16, 4).unwrap(), v);
        assert!(patchify(&v, 3).is_err());
    }

    #[test]
    fn patch_layout_matches_index_formula() {
        let v = Tensor::<f64>::from_fn([1, 2, 3, 4, 4], |i| i as f64);
        let p = patchify(&v, 2).unwrap();
        // token (t=1, row=0, col=1), element (c=2, y=1, x=0)
        let (t, r, c, ch, y, x) = (1, 0, 1, 2, 1, 0);
        let tok = t * 4 + r * 2 + c;
        let el = ch * 4 + y * 2 + x;
        let src = (((t * 3 + ch) * 4) + r * 2 + y) * 4 + c * 2 + x;
        assert_eq!(p.data()[tok * 12 + el], src as f64);
    }

    #[test]
    fn spacetime_pe_layout() {
        let pe = spacetime_pe::<f64>(2, 2, 3, 16);
        assert_eq!(pe.shape(), &[12, 16]);
        // time part is shared across a frame's tokens, column part across rows
        let row = |i: usize| &pe.data()[i * 16..(i + 1) * 16];
        assert_eq!(row(0)[..8], row(5)[..8]);
        assert_ne!(row(0)[..8], row(6)[..8]);
        assert_eq!(row(1)[12..], row(4)[12..]);
        assert_eq!(row(0)[0], 0.0);
        assert_eq!(row(0)[1], 1.0);
    }

    #[test]
    fn mask_blocks_cross_terms() {
        let m = block_diagonal_mask::<f32>(2, 1);
        assert_eq!(m.data()[1], 0.0);
        assert_eq!(m.data()[2], f32::NEG_INFINITY);
        assert_eq!(m.data()[8], 0.0);
    }
}
