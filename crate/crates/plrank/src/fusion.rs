//! Conflict-aware multi-scale fusion of a dense-token stream into the
//! contrastive embedding.
//!
//! The pipeline per item: 1D spatial-pyramid pooling over the token sequence
//! with bins {2, 4, 8}, channel then spatial attention over the multi-scale
//! rows, one self-attention layer, mean pooling with a projection to the
//! embedding dimension, and finally a gated additive combination
//! `fused = v_c + alpha (*) u` whose per-dimension gate alpha is a sigmoid of
//! the joint linear map of both streams. Because the residual enters through
//! alpha, the angle between `fused` and `v_c` is bounded by
//! `arcsin(||alpha||_inf * ||u|| / ||v_c||)`, which [`alignment_angle_bound`]
//! checks sample by sample.
//!
//! The image and text branches use separate parameter sets; nothing here is
//! shared across modalities.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};
use crate::transitions::xavier_uniform;
use rand::Rng;

pub const SPP_BINS: [usize; 3] = [2, 4, 8];
/// Rows appended by the pyramid: 2 + 4 + 8.
pub const SPP_EXTRA_ROWS: usize = 14;

/// Weights for one fusion branch.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub token_dim: usize,
    pub out_dim: usize,
    pub channel_hidden: usize,
    /// Channel attention MLP, shared between the mean and max paths.
    pub ch_w1: Matrix, // hidden x d_S
    pub ch_w2: Matrix, // d_S x hidden
    /// Spatial attention: per-row [mean, max] stats projected to a scalar.
    pub sp_w: Matrix, // 2 x 1
    pub sp_b: Matrix, // 1 x 1
    /// Self-attention refiner.
    pub sa_wq: Matrix, // d_S x d_S
    pub sa_wk: Matrix, // d_S x d_S
    pub sa_wv: Matrix, // d_S x d_S
    pub sa_wo: Matrix, // d_S x d_S
    /// Projection from token dim to embedding dim.
    pub proj: Matrix, // d x d_S
    /// Conflict gate.
    pub gate_w: Matrix, // d x 2d
    pub gate_b: Matrix, // 1 x d
}

impl FusionParams {
    pub fn init(token_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = (token_dim / 2).max(1);
        FusionParams {
            token_dim,
            out_dim,
            channel_hidden: hidden,
            ch_w1: xavier_uniform(hidden, token_dim, rng),
            ch_w2: xavier_uniform(token_dim, hidden, rng),
            sp_w: xavier_uniform(2, 1, rng),
            sp_b: Matrix::zeros(1, 1),
            sa_wq: xavier_uniform(token_dim, token_dim, rng),
            sa_wk: xavier_uniform(token_dim, token_dim, rng),
            sa_wv: xavier_uniform(token_dim, token_dim, rng),
            sa_wo: xavier_uniform(token_dim, token_dim, rng),
            proj: xavier_uniform(out_dim, token_dim, rng),
            gate_w: xavier_uniform(out_dim, 2 * out_dim, rng),
            gate_b: Matrix::zeros(1, out_dim),
        }
    }
}

/// Tape handles mirroring [`FusionParams`].
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub token_dim: usize,
    pub out_dim: usize,
    pub ch_w1: Var,
    pub ch_w2: Var,
    pub sp_w: Var,
    pub sp_b: Var,
    pub sa_wq: Var,
    pub sa_wk: Var,
    pub sa_wv: Var,
    pub sa_wo: Var,
    pub proj: Var,
    pub gate_w: Var,
    pub gate_b: Var,
}

impl FusionVars {
    pub fn register(tape: &mut Tape, p: &FusionParams) -> Self {
        FusionVars {
            token_dim: p.token_dim,
            out_dim: p.out_dim,
            ch_w1: tape.var(p.ch_w1.clone()),
            ch_w2: tape.var(p.ch_w2.clone()),
            sp_w: tape.var(p.sp_w.clone()),
            sp_b: tape.var(p.sp_b.clone()),
            sa_wq: tape.var(p.sa_wq.clone()),
            sa_wk: tape.var(p.sa_wk.clone()),
            sa_wv: tape.var(p.sa_wv.clone()),
            sa_wo: tape.var(p.sa_wo.clone()),
            proj: tape.var(p.proj.clone()),
            gate_w: tape.var(p.gate_w.clone()),
            gate_b: tape.var(p.gate_b.clone()),
        }
    }
}

/// Contiguous index ranges splitting `len` rows into `bins` groups whose
/// sizes differ by at most one.
pub fn even_partition(len: usize, bins: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / bins;
    let extra = len % bins;
    let mut out = Vec::with_capacity(bins);
    let mut at = 0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        out.push(at..at + size);
        at += size;
    }
    out
}

/// 1D spatial pyramid pooling: the original L tokens concatenated with the
/// bin means at each pyramid level, (L + 14) x d_S in total.
pub fn spp_1d(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let l = tape.value(tokens).rows();
    let max_bins = *SPP_BINS.iter().max().expect("non-empty");
    if l < max_bins {
        return Err(Error::InsufficientTokens {
            got: l,
            need: max_bins,
        });
    }
    let mut parts = vec![tokens];
    for &bins in &SPP_BINS {
        for range in even_partition(l, bins) {
            let idx: Vec<usize> = range.collect();
            let rows = tape.gather_rows(tokens, &idx);
            let mean = tape.mean_over_rows(rows);
            parts.push(mean);
        }
    }
    tape.concat_rows(&parts)
}

/// Sequential channel then spatial attention over the multi-scale rows.
pub fn channel_spatial_attend(tape: &mut Tape, u: Var, p: &FusionVars) -> Result<Var> {
    // Channel attention: mean and max pooled over rows through a shared MLP.
    let mean = tape.mean_over_rows(u);
    let mx = tape.max_over_rows(u);
    let mlp = |tape: &mut Tape, x: Var| -> Result<Var> {
        let w1t = tape.transpose(p.ch_w1);
        let h = tape.matmul(x, w1t)?;
        let h = tape.relu(h);
        let w2t = tape.transpose(p.ch_w2);
        tape.matmul(h, w2t)
    };
    let a = mlp(tape, mean)?;
    let b = mlp(tape, mx)?;
    let logits = tape.add(a, b)?;
    let ch_scale = tape.sigmoid(logits);
    let u1 = tape.scale_cols(u, ch_scale)?;

    // Spatial attention: per-row mean and max over channels, projected to a
    // scalar score per row.
    let row_mean = tape.mean_over_cols(u1);
    let row_max = tape.max_over_cols(u1);
    let stats = tape.concat_cols(&[row_mean, row_max])?;
    let score = tape.matmul(stats, p.sp_w)?;
    let score = tape.add_scalar_broadcast(score, p.sp_b);
    let sp_scale = tape.sigmoid(score);
    tape.scale_rows(u1, sp_scale)
}

/// One self-attention layer over the rows, mean pooled and projected to the
/// embedding dimension. Returns a 1 x d row.
pub fn refine_and_pool(tape: &mut Tape, u: Var, p: &FusionVars) -> Result<Var> {
    let wqt = tape.transpose(p.sa_wq);
    let wkt = tape.transpose(p.sa_wk);
    let wvt = tape.transpose(p.sa_wv);
    let q = tape.matmul(u, wqt)?;
    let k = tape.matmul(u, wkt)?;
    let v = tape.matmul(u, wvt)?;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (p.token_dim as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v)?;
    let wot = tape.transpose(p.sa_wo);
    let back = tape.matmul(mixed, wot)?;
    let pooled = tape.mean_over_rows(back);
    let projt = tape.transpose(p.proj);
    tape.matmul(pooled, projt)
}

/// The fused embedding with the pieces needed for the angle-bound check.
#[derive(Debug, Clone, Copy)]
pub struct FusedEmbedding {
    pub fused: Var,
    pub v_c: Var,
    pub u: Var,
    pub alpha: Var,
}

/// Gated additive combination `fused = v_c + alpha (*) u` with
/// `alpha = sigmoid(W [v_c; u] + b)`.
pub fn conflict_gate_fuse(tape: &mut Tape, v_c: Var, u: Var, p: &FusionVars) -> Result<Var> {
    Ok(conflict_gate_fuse_full(tape, v_c, u, p)?.fused)
}

pub fn conflict_gate_fuse_full(
    tape: &mut Tape,
    v_c: Var,
    u: Var,
    p: &FusionVars,
) -> Result<FusedEmbedding> {
    let d = p.out_dim;
    for (name, var) in [("v_c", v_c), ("u", u)] {
        let m = tape.value(var);
        if m.shape() != (1, d) {
            return Err(Error::Shape {
                op: "conflict_gate_fuse",
                left: format!("{name} 1x{d}"),
                right: format!("{}x{}", m.rows(), m.cols()),
            });
        }
    }
    let joint = tape.concat_entries(&[v_c, u])?;
    let wt = tape.transpose(p.gate_w);
    let pre = tape.matmul(joint, wt)?;
    let pre = tape.add(pre, p.gate_b)?;
    let alpha = tape.sigmoid(pre);
    let scaled = tape.mul_elem(alpha, u)?;
    let fused = tape.add(v_c, scaled)?;
    Ok(FusedEmbedding {
        fused,
        v_c,
        u,
        alpha,
    })
}

/// Result of the alignment bound check for one sample.
#[derive(Debug, Clone, Copy)]
pub struct AngleBound {
    /// Angle between fused and v_c, radians.
    pub actual: f64,
    /// arcsin(eps * ||u|| / ||v_c||), capped at pi/2 when the premise fails.
    pub bound: f64,
    /// True when eps * ||u|| / ||v_c|| exceeded 1 and the bound is vacuous.
    pub capped: bool,
}

/// Checks the alignment-preservation bound on plain values. `fused` must be
/// `v_c + alpha (*) u` for the contract `actual <= bound + 1e-12` to hold.
pub fn alignment_angle_bound(
    v_c: &[f64],
    u: &[f64],
    alpha: &[f64],
    fused: &[f64],
) -> Result<AngleBound> {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nv = norm(v_c);
    if nv == 0.0 {
        return Err(Error::UndefinedAngle("v_c has zero norm"));
    }
    let nf = norm(fused);
    if nf == 0.0 {
        return Err(Error::UndefinedAngle("fused embedding has zero norm"));
    }
    let eps = alpha.iter().fold(0.0f64, |m, &a| m.max(a.abs()));
    let ratio = eps * norm(u) / nv;
    let (bound, capped) = if ratio <= 1.0 {
        (ratio.asin(), false)
    } else {
        (std::f64::consts::FRAC_PI_2, true)
    };
    let cos = v_c.iter().zip(fused).map(|(a, b)| a * b).sum::<f64>() / (nv * nf);
    let actual = cos.clamp(-1.0, 1.0).acos();
    Ok(AngleBound {
        actual,
        bound,
        capped,
    })
}
