//! Numeric kernels shared by the forward and backward passes.

use crate::error::{CovarError, Result};
use crate::par;
use crate::tensor::{gemm, MatRef, Scalar};

const PAR_MIN_WORK: usize = 1 << 15;

/// Broadcast plan: output shape and per-axis element strides of both operands
/// (zero on broadcast axes).
#[derive(Clone, Debug)]
pub(crate) struct Bcast {
    pub out_shape: Vec<usize>,
    pub sa: Vec<usize>,
    pub sb: Vec<usize>,
}

pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(CovarError::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
        out.push(d);
    }
    let strides = |p: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            s[i] = if p[i] == 1 { 0 } else { acc };
            acc *= p[i];
        }
        s
    };
    Ok(Bcast {
        sa: strides(&pa),
        sb: strides(&pb),
        out_shape: out,
    })
}

/// Visits every output element as `f(out, ia, ib)` in row-major order.
#[inline]
pub(crate) fn bcast_for_each(bc: &Bcast, mut f: impl FnMut(usize, usize, usize)) {
    let rank = bc.out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = bc.out_shape[rank - 1];
    let (ia_step, ib_step) = (bc.sa[rank - 1], bc.sb[rank - 1]);
    let outer: usize = bc.out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ba, mut bb) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (ba, bb);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            ba += bc.sa[ax];
            bb += bc.sb[ax];
            if idx[ax] < bc.out_shape[ax] {
                break;
            }
            ba -= bc.sa[ax] * bc.out_shape[ax];
            bb -= bc.sb[ax] * bc.out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `y[rows×n] = x[rows×k]·w[k×n] (+ bias)`, split over row blocks.
pub(crate) fn linear_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    rows: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut y = vec![S::zero(); rows * n];
    if let Some(b) = bias {
        for row in y.chunks_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { S::one() } else { S::zero() };
    let exec = par::global();
    let per = par::rows_per_task(rows, k * n, PAR_MIN_WORK);
    par::for_each_chunk_mut(&mut y, per * n, exec, |ci, yc| {
        let r0 = ci * per;
        let r = yc.len() / n;
        gemm(
            r,
            k,
            n,
            S::one(),
            MatRef { data: &x[r0 * k..(r0 + r) * k], trans: false },
            MatRef { data: w, trans: false },
            beta,
            yc,
        );
    });
    y
}

/// `dx[rows×k] = dy[rows×n]·wᵀ`.
pub(crate) fn linear_backward_input<S: Scalar>(
    dy: &[S],
    w: &[S],
    rows: usize,
    k: usize,
    n: usize,
    dx: &mut [S],
) {
    let exec = par::global();
    let per = par::rows_per_task(rows, k * n, PAR_MIN_WORK);
    par::for_each_chunk_mut(dx, per * k, exec, |ci, dxc| {
        let r0 = ci * per;
        let r = dxc.len() / k;
        gemm(
            r,
            n,
            k,
            S::one(),
            MatRef { data: &dy[r0 * n..(r0 + r) * n], trans: false },
            MatRef { data: w, trans: true },
            S::one(),
            dxc,
        );
    });
}

/// Batched `c[g] = op(a[g])·op(b[g])`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<S: Scalar>(
    a: &[S],
    b: &[S],
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [S],
    beta: S,
) {
    let exec = par::global();
    let per = par::rows_per_task(groups, m * n * k.max(1), PAR_MIN_WORK);
    par::for_each_chunk_mut(out, per * m * n, exec, |ci, oc| {
        let g0 = ci * per;
        for (j, c) in oc.chunks_mut(m * n).enumerate() {
            let g = g0 + j;
            gemm(
                m,
                k,
                n,
                S::one(),
                MatRef { data: &a[g * m * k..(g + 1) * m * k], trans: ta },
                MatRef { data: &b[g * k * n..(g + 1) * k * n], trans: tb },
                beta,
                c,
            );
        }
    });
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], n: usize) -> Vec<S> {
    let mut y = x.to_vec();
    let exec = par::global();
    let rows = x.len() / n.max(1);
    let per = par::rows_per_task(rows, n, PAR_MIN_WORK);
    par::for_each_chunk_mut(&mut y, per * n, exec, |_, chunk| {
        for row in chunk.chunks_mut(n) {
            let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut s = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = S::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    });
    y
}

pub(crate) fn softmax_rows_backward<S: Scalar>(y: &[S], dy: &[S], n: usize, dx: &mut [S]) {
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

/// Normalizes each row to zero mean and unit variance; returns `(y, rstd)`.
pub(crate) fn layer_norm_rows<S: Scalar>(x: &[S], n: usize, eps: S) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / n.max(1);
    let mut y = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let inv_n = S::one() / S::of(n as f64);
    for ((xr, yr), rs) in x.chunks(n).zip(y.chunks_mut(n)).zip(rstd.iter_mut()) {
        let mean = xr.iter().copied().sum::<S>() * inv_n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
        let r = S::one() / (var + eps).sqrt();
        *rs = r;
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
    }
    (y, rstd)
}

pub(crate) fn layer_norm_rows_backward<S: Scalar>(
    y: &[S],
    rstd: &[S],
    dy: &[S],
    n: usize,
    dx: &mut [S],
) {
    let inv_n = S::one() / S::of(n as f64);
    for (((yr, gr), dr), &r) in y
        .chunks(n)
        .zip(dy.chunks(n))
        .zip(dx.chunks_mut(n))
        .zip(rstd)
    {
        let mean_g = gr.iter().copied().sum::<S>() * inv_n;
        let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<S>() * inv_n;
        for ((d, &g), &v) in dr.iter_mut().zip(gr).zip(yr) {
            *d += r * (g - mean_g - v * mean_gy);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + th) + half * x * (S::one() - th * th) * du
}

#[inline]
pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<S: Scalar>(x: S) -> S {
    let s = S::one() / (S::one() + (-x).exp());
    s * (S::one() + x * (S::one() - s))
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
