//! The Plackett-Luce probability family at orders 0 through R.
//!
//! A ranking over a batch is scored position by position: at position k the
//! chosen item's utility competes in a softmax against every not-yet-chosen
//! candidate. Order 0 ignores the utilities entirely (uniform choices, total
//! probability 1/N!). Order 1 uses the per-item utility theta alone. Orders
//! 2 and 3 add the pairwise and pair-history corrections from
//! [`crate::transitions`], and orders r >= 4 add history-encoder corrections,
//! each limited to a window of the last r-1 picks.
//!
//! Two evaluation paths share one forward kernel: a plain path for oracles
//! and held-out metrics, and a tape path whose single fused node carries the
//! hand-derived backward for the whole per-row loss. Corrections for a row
//! are evaluated lazily against the pairs that actually occur in that row's
//! permutation; no order-3 tensor over the full batch is ever materialised.
//!
//! Selected items are excluded from the candidate set rather than being fed
//! -inf scores, so no arithmetic ever runs on sentinel values.

use crate::error::{Error, Result};
use crate::numerics::matrix::{argsort_desc, Matrix};
use crate::numerics::tape::{Tape, Var};
use crate::transitions::{
    history_encode, history_scores, HistoryHead, HistoryHeadVars, TripleHead,
};

/// A reference ordering plus the ordering being scored.
#[derive(Debug, Clone)]
pub struct RankingState {
    /// Permutation evaluated position by position.
    pub scored_order: Vec<usize>,
    /// Ordering induced by the reference similarity row. In the rank losses
    /// the scored permutation is exactly this ordering; the field records
    /// provenance and does not enter the probability.
    pub reference_order: Vec<usize>,
}

impl RankingState {
    pub fn new(scored_order: Vec<usize>, reference_order: Vec<usize>) -> Result<Self> {
        if !is_permutation(&scored_order) || !is_permutation(&reference_order) {
            return Err(Error::InvalidParameter(
                "ranking orders must be bijections on 0..N".into(),
            ));
        }
        if scored_order.len() != reference_order.len() {
            return Err(Error::InvalidParameter(
                "scored and reference orders must have equal length".into(),
            ));
        }
        Ok(RankingState {
            scored_order,
            reference_order,
        })
    }

    /// State whose scored permutation is the descending argsort of the
    /// reference similarity row (stable tie-break by ascending index).
    pub fn from_reference_row(reference_row: &[f64]) -> Self {
        let order = argsort_desc(reference_row);
        RankingState {
            scored_order: order.clone(),
            reference_order: order,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.scored_order.len()
    }
}

fn is_permutation(order: &[usize]) -> bool {
    let n = order.len();
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// ln(n!) computed as the log of the exact integer product while n! fits in
/// an f64 mantissa, and as a sum of logs beyond that.
pub fn ln_factorial(n: usize) -> f64 {
    if n <= 18 {
        let mut p = 1.0f64;
        for k in 2..=n {
            p *= k as f64;
        }
        p.ln()
    } else {
        (2..=n).map(|k| (k as f64).ln()).sum()
    }
}

/// Subtracts the mean over `remaining` from those entries, leaving all other
/// entries untouched.
pub fn row_centre(row: &[f64], remaining: &[usize]) -> Result<Vec<f64>> {
    if remaining.is_empty() {
        return Err(Error::EmptyCandidates("row_centre over empty remaining set"));
    }
    let mean: f64 = remaining.iter().map(|&i| row[i]).sum::<f64>() / remaining.len() as f64;
    let mut out = row.to_vec();
    for &i in remaining {
        out[i] -= mean;
    }
    Ok(out)
}

/// Lazily evaluated correction source for the plain path.
pub enum PlainGamma {
    /// Precomputed table: row a*N+b holds scores for all candidates d.
    Table(Matrix),
    /// Evaluate rows on demand from the head weights and embeddings.
    Params {
        triple: TripleHead,
        emb: Matrix,
        head_dim: usize,
    },
}

impl PlainGamma {
    fn row(&self, a: usize, b: usize) -> Result<Vec<f64>> {
        match self {
            PlainGamma::Table(t) => {
                let n = t.cols();
                Ok(t.row(a * n + b).to_vec())
            }
            PlainGamma::Params {
                triple,
                emb,
                head_dim,
            } => {
                let h_ab = crate::transitions::pair_history_vector(triple, emb.row(a), emb.row(b))?;
                let q = Matrix::row_vector(&h_ab).matmul(&triple.wq.transpose())?;
                let k = emb.matmul(&triple.wk.transpose())?;
                let out = q
                    .matmul(&k.transpose())?
                    .scale(1.0 / (*head_dim as f64).sqrt());
                Ok(out.row(0).to_vec())
            }
        }
    }
}

/// History-encoder source for orders r >= 4 on the plain path.
pub struct PlainHistory {
    pub head: HistoryHead,
    pub emb: Matrix,
    pub head_dim: usize,
}

impl PlainHistory {
    fn scores_for(&self, hist_idx: &[usize]) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = hist_idx.iter().map(|&i| self.emb.row(i).to_vec()).collect();
        let hist = Matrix::from_rows(&rows);
        let hv = history_encode(&self.head, &hist, self.head_dim)?;
        history_scores(&self.head, &hv, &self.emb, self.head_dim)
    }
}

/// Correction stack for the plain evaluation path. `lambdas[0]` gates order 2.
pub struct PlainCorrections {
    pub order: usize,
    pub lambdas: Vec<f64>,
    pub beta: Option<Matrix>,
    pub gamma: Option<PlainGamma>,
    pub history: Vec<PlainHistory>,
}

impl PlainCorrections {
    /// Orders 0 and 1 carry no corrections.
    pub fn none(order: usize) -> Self {
        PlainCorrections {
            order,
            lambdas: vec![1.0; order.saturating_sub(1)],
            beta: None,
            gamma: None,
            history: Vec::new(),
        }
    }

    pub fn lambda(&self, r: usize) -> f64 {
        self.lambdas.get(r - 2).copied().unwrap_or(1.0)
    }
}

/// Values captured at one position of a directed evaluation.
struct PositionCapture {
    remaining: Vec<usize>,
    probs: Vec<f64>,
    chosen: usize,
    /// (order r, raw gated-input correction over `remaining`).
    corr_raw: Vec<(usize, Vec<f64>)>,
}

struct DirectedForward {
    nll: f64,
    positions: Vec<PositionCapture>,
}

/// Value-level view of the correction rows a single directed evaluation
/// needs. Row k of `gamma_rows` scores candidates after the pair at
/// positions (k+1, k+2) of the permutation.
struct CorrRowsView<'a> {
    order: usize,
    lambdas: &'a [f64],
    beta: Option<&'a Matrix>,
    gamma_rows: Option<&'a Matrix>,
    /// (r, position k 1-based, scores for all candidates).
    history_rows: &'a [(usize, usize, Vec<f64>)],
}

/// Shared forward kernel: walks the permutation, assembling per-position
/// logits z_d = theta_d + sum_r lambda_r * centred corr, and accumulates the
/// negative log-likelihood via max-subtracted log-sum-exp over the remaining
/// candidates.
fn directed_forward(
    theta: &[f64],
    perm: &[usize],
    corr: &CorrRowsView<'_>,
    centring: bool,
) -> Result<DirectedForward> {
    let n = perm.len();
    let mut taken = vec![false; n];
    let mut nll = 0.0;
    let mut positions = Vec::with_capacity(n);

    for k in 1..=n {
        let remaining: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        let m = remaining.len();
        let mut z: Vec<f64> = remaining.iter().map(|&i| theta[i]).collect();
        let mut corr_raw: Vec<(usize, Vec<f64>)> = Vec::new();

        let max_r = corr.order.min(k);
        for r in 2..=max_r {
            let full_row: Option<Vec<f64>> = match r {
                2 => corr
                    .beta
                    .map(|b| b.row(perm[k - 2]).to_vec()),
                3 => corr.gamma_rows.map(|g| g.row(k - 3).to_vec()),
                _ => corr
                    .history_rows
                    .iter()
                    .find(|&&(hr, hk, _)| hr == r && hk == k)
                    .map(|(_, _, row)| row.clone()),
            };
            let Some(full_row) = full_row else { continue };
            let lambda = corr.lambdas.get(r - 2).copied().unwrap_or(1.0);
            let gated: Vec<f64> = remaining.iter().map(|&i| lambda * full_row[i]).collect();
            // An exactly-zero correction row leaves the logits bit-identical
            // to the lower-order evaluation (hierarchy nesting).
            if gated.iter().any(|&v| v != 0.0) {
                let mean = if centring {
                    gated.iter().sum::<f64>() / m as f64
                } else {
                    0.0
                };
                for (zi, &gi) in z.iter_mut().zip(&gated) {
                    *zi += gi - mean;
                }
            }
            corr_raw.push((r, gated));
        }

        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rel: Vec<f64> = z.iter().map(|&v| v - max).collect();
        let rel_lse = rel.iter().map(|&v| v.exp()).sum::<f64>().ln();
        let chosen = remaining
            .iter()
            .position(|&i| i == perm[k - 1])
            .expect("permutation item must be in the remaining set");
        nll += rel_lse - rel[chosen];
        let probs: Vec<f64> = rel.iter().map(|&v| (v - rel_lse).exp()).collect();
        positions.push(PositionCapture {
            remaining,
            probs,
            chosen,
            corr_raw,
        });
        taken[perm[k - 1]] = true;
    }

    Ok(DirectedForward { nll, positions })
}

fn plain_gamma_rows(corr: &PlainCorrections, perm: &[usize]) -> Result<Option<Matrix>> {
    let n = perm.len();
    if corr.order < 3 || n < 3 {
        return Ok(None);
    }
    let Some(gamma) = &corr.gamma else {
        return Ok(None);
    };
    let mut rows = Vec::with_capacity(n - 2);
    for k in 3..=n {
        rows.push(gamma.row(perm[k - 3], perm[k - 2])?);
    }
    Ok(Some(Matrix::from_rows(&rows)))
}

fn plain_history_rows(
    corr: &PlainCorrections,
    perm: &[usize],
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let n = perm.len();
    let mut out = Vec::new();
    for hist in &corr.history {
        let r = hist.head.order;
        if r > corr.order {
            continue;
        }
        for k in r..=n {
            let hist_idx: Vec<usize> = perm[k - r..k - 1].to_vec();
            out.push((r, k, hist.scores_for(&hist_idx)?));
        }
    }
    Ok(out)
}

/// Log-probability of choosing `state.scored_order[k-1]` at position k given
/// the earlier picks. Positions are 1-based.
pub fn pl_position_logprob(
    k: usize,
    state: &RankingState,
    theta: &[f64],
    corr: &PlainCorrections,
    centring: bool,
) -> Result<f64> {
    let n = state.batch_size();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "position {k} outside 1..={n}"
        )));
    }
    if corr.order == 0 {
        let n_k = n - k + 1;
        return Ok(-((n_k as f64).ln()));
    }
    let fwd = directed_plain(state, theta, corr, centring)?;
    let cap = &fwd.positions[k - 1];
    Ok(cap.probs[cap.chosen].ln())
}

fn directed_plain(
    state: &RankingState,
    theta: &[f64],
    corr: &PlainCorrections,
    centring: bool,
) -> Result<DirectedForward> {
    let perm = &state.scored_order;
    let gamma_rows = plain_gamma_rows(corr, perm)?;
    let history_rows = plain_history_rows(corr, perm)?;
    let view = CorrRowsView {
        order: corr.order,
        lambdas: &corr.lambdas,
        beta: corr.beta.as_ref(),
        gamma_rows: gamma_rows.as_ref(),
        history_rows: &history_rows,
    };
    directed_forward(theta, perm, &view, centring)
}

/// Log-probability of the full scored ordering. At order 0 this is the
/// closed form -ln(N!), independent of every parameter.
pub fn pl_ranking_logprob(
    state: &RankingState,
    theta: &[f64],
    corr: &PlainCorrections,
    centring: bool,
) -> Result<f64> {
    let n = state.batch_size();
    if theta.len() != n {
        return Err(Error::Shape {
            op: "pl_ranking_logprob",
            left: format!("theta len {}", theta.len()),
            right: format!("batch {}", n),
        });
    }
    if corr.order == 0 {
        return Ok(-ln_factorial(n));
    }
    Ok(-directed_plain(state, theta, corr, centring)?.nll)
}

/// One gate on the tape: the sigmoid of the (possibly detached) logit.
#[derive(Debug, Clone, Copy)]
pub struct TapeGate {
    pub order: usize,
    pub lambda: Var,
    pub frozen: bool,
}

/// Triple-head weight handles for lazy per-row evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TripleHeadVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub wq: Var,
    pub wk: Var,
}

/// Correction stack on the tape for one modality. `beta` is precomputed for
/// the batch; gamma and history rows are evaluated per scored row against
/// the pairs that actually occur.
pub struct TapeCorrections {
    pub order: usize,
    pub head_dim: usize,
    pub emb: Var,
    pub beta: Option<Var>,
    pub triple: Option<TripleHeadVars>,
    pub history: Vec<HistoryHeadVars>,
    pub gates: Vec<TapeGate>,
}

impl TapeCorrections {
    /// Orders 0 and 1: no corrections, no gates.
    pub fn none(tape: &mut Tape, order: usize, emb: Var) -> Self {
        let _ = tape;
        TapeCorrections {
            order,
            head_dim: 1,
            emb,
            beta: None,
            triple: None,
            history: Vec::new(),
            gates: Vec::new(),
        }
    }

    fn frozen(&self, r: usize) -> bool {
        self.gates
            .iter()
            .find(|g| g.order == r)
            .map(|g| g.frozen)
            .unwrap_or(false)
    }
}

/// Builds the (N-2) x N gamma score rows for one permutation on the tape.
fn gamma_rows_tape(
    tape: &mut Tape,
    corr: &TapeCorrections,
    perm: &[usize],
) -> Result<Option<Var>> {
    let n = perm.len();
    if corr.order < 3 || n < 3 {
        return Ok(None);
    }
    let Some(triple) = corr.triple else {
        return Ok(None);
    };
    let first: Vec<usize> = (3..=n).map(|k| perm[k - 3]).collect();
    let second: Vec<usize> = (3..=n).map(|k| perm[k - 2]).collect();
    let ea = tape.gather_rows(corr.emb, &first);
    let eb = tape.gather_rows(corr.emb, &second);
    let w1t = tape.transpose(triple.w1);
    let w2t = tape.transpose(triple.w2);
    let w3t = tape.transpose(triple.w3);
    let p1 = tape.matmul(ea, w1t)?;
    let p2 = tape.matmul(eb, w2t)?;
    let eab = tape.mul_elem(ea, eb)?;
    let p3 = tape.matmul(eab, w3t)?;
    let s12 = tape.add(p1, p2)?;
    let mix = tape.add(s12, p3)?;
    let h = tape.layer_norm_rows(mix, crate::numerics::LAYER_NORM_EPS);
    let wqt = tape.transpose(triple.wq);
    let wkt = tape.transpose(triple.wk);
    let q = tape.matmul(h, wqt)?;
    let keys = tape.matmul(corr.emb, wkt)?;
    let kt = tape.transpose(keys);
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (corr.head_dim as f64).sqrt());
    Ok(Some(if corr.frozen(3) {
        tape.detach(scaled)
    } else {
        scaled
    }))
}

fn history_rows_tape(
    tape: &mut Tape,
    corr: &TapeCorrections,
    perm: &[usize],
) -> Result<Vec<(usize, usize, Var)>> {
    let n = perm.len();
    let mut out = Vec::new();
    for head in &corr.history {
        let r = head.order;
        if r > corr.order {
            continue;
        }
        for k in r..=n {
            let hist_idx: Vec<usize> = perm[k - r..k - 1].to_vec();
            let scores = crate::transitions::history_scores_tape(
                tape,
                head,
                corr.emb,
                &hist_idx,
                corr.head_dim,
            )?;
            let scores = if corr.frozen(r) {
                tape.detach(scores)
            } else {
                scores
            };
            out.push((r, k, scores));
        }
    }
    Ok(out)
}

/// Negative log-likelihood of one permutation under `theta` plus gated,
/// row-centred corrections, as a single tape node with a fused backward.
pub fn directed_nll_tape(
    tape: &mut Tape,
    theta: Var,
    perm: &[usize],
    corr: &TapeCorrections,
    centring: bool,
) -> Result<Var> {
    let n = perm.len();
    let theta_vals = tape.value(theta).row(0).to_vec();
    if theta_vals.len() != n {
        return Err(Error::Shape {
            op: "directed_nll_tape",
            left: format!("theta len {}", theta_vals.len()),
            right: format!("perm len {}", n),
        });
    }
    if corr.order == 0 {
        return Ok(tape.scalar(ln_factorial(n)));
    }

    let gamma_rows = gamma_rows_tape(tape, corr, perm)?;
    let history_rows = history_rows_tape(tape, corr, perm)?;
    let lambda_vals: Vec<f64> = corr.gates.iter().map(|g| tape.value(g.lambda).item()).collect();

    let beta_val = corr.beta.map(|b| tape.value(b).clone());
    let gamma_val = gamma_rows.map(|g| tape.value(g).clone());
    let history_val: Vec<(usize, usize, Vec<f64>)> = history_rows
        .iter()
        .map(|&(r, k, v)| (r, k, tape.value(v).row(0).to_vec()))
        .collect();

    let view = CorrRowsView {
        order: corr.order,
        lambdas: &lambda_vals,
        beta: beta_val.as_ref(),
        gamma_rows: gamma_val.as_ref(),
        history_rows: &history_val,
    };
    let fwd = directed_forward(&theta_vals, perm, &view, centring)?;

    // Everything the backward needs, captured by value.
    let perm = perm.to_vec();
    let theta_id = theta.id();
    let beta_id = corr.beta.map(|v| v.id());
    let gamma_id = gamma_rows.map(|v| v.id());
    let history_ids: Vec<(usize, usize, usize)> =
        history_rows.iter().map(|&(r, k, v)| (r, k, v.id())).collect();
    let gate_ids: Vec<(usize, usize, bool)> = corr
        .gates
        .iter()
        .map(|g| (g.order, g.lambda.id(), g.frozen))
        .collect();
    let lambdas = lambda_vals.clone();
    let positions = fwd.positions;
    let nll = fwd.nll;
    let out = tape.push_custom(
        Matrix::scalar(nll),
        Box::new(move |_vals, gout, gs| {
            let g = gout.item();
            for (km1, cap) in positions.iter().enumerate() {
                let k = km1 + 1;
                let m = cap.remaining.len();
                // d nll / d z over the remaining set.
                let mut dz = vec![0.0; m];
                for (i, &p) in cap.probs.iter().enumerate() {
                    dz[i] = g * p;
                }
                dz[cap.chosen] -= g;
                for (i, &item) in cap.remaining.iter().enumerate() {
                    gs.add_at(theta_id, item, dz[i]);
                }
                for (r, gated) in &cap.corr_raw {
                    let gate_idx = r - 2;
                    let lambda = lambdas.get(gate_idx).copied().unwrap_or(1.0);
                    // Gradient to the raw correction entries: centring drops
                    // out because dz sums to zero across the softmax.
                    match *r {
                        2 => {
                            if let Some(bid) = beta_id {
                                let prev = perm[k - 2];
                                for (i, &item) in cap.remaining.iter().enumerate() {
                                    gs.add_at(bid, prev * perm.len() + item, lambda * dz[i]);
                                }
                            }
                        }
                        3 => {
                            if let Some(gid) = gamma_id {
                                for (i, &item) in cap.remaining.iter().enumerate() {
                                    gs.add_at(gid, (k - 3) * perm.len() + item, lambda * dz[i]);
                                }
                            }
                        }
                        r => {
                            if let Some(&(_, _, hid)) = history_ids
                                .iter()
                                .find(|&&(hr, hk, _)| hr == r && hk == k)
                            {
                                for (i, &item) in cap.remaining.iter().enumerate() {
                                    gs.add_at(hid, item, lambda * dz[i]);
                                }
                            }
                        }
                    }
                    // Gradient to the gate value lambda_r.
                    if let Some(&(_, lid, frozen)) =
                        gate_ids.iter().find(|&&(go, _, _)| go == *r)
                    {
                        if !frozen && lambda != 0.0 {
                            let mean = if centring {
                                gated.iter().sum::<f64>() / m as f64
                            } else {
                                0.0
                            };
                            let mut dl = 0.0;
                            for (i, &gv) in gated.iter().enumerate() {
                                dl += dz[i] * (gv - mean) / lambda;
                            }
                            gs.add_at(lid, 0, dl);
                        }
                    }
                }
            }
        }),
    );
    Ok(out)
}

/// Directions of one symmetrised rank loss: rows of `reference` induce the
/// permutations, rows of `utilities` supply theta, and `corr` is the stack
/// of the modality whose similarities are being scored.
struct DirectedTerm<'a> {
    reference: Var,
    utilities: Var,
    corr: &'a TapeCorrections,
}

fn symmetrised_rank_loss(
    tape: &mut Tape,
    a: DirectedTerm<'_>,
    b: DirectedTerm<'_>,
    centring: bool,
) -> Result<Var> {
    let n = tape.value(a.reference).rows();
    for term in [&a, &b] {
        let (r, c) = tape.value(term.reference).shape();
        if r != c || r != n {
            return Err(Error::Shape {
                op: "symmetrised_rank_loss",
                left: format!("{n}x{n}"),
                right: format!("{r}x{c}"),
            });
        }
    }
    if a.corr.order == 0 && b.corr.order == 0 {
        // Order 0 ranks uniformly at every position, so each row's NLL is the
        // constant ln(N!) with no dependence on any parameter.
        return Ok(tape.scalar(ln_factorial(n)));
    }
    let mut total = tape.scalar(0.0);
    for i in 0..n {
        for term in [&a, &b] {
            let perm = argsort_desc(tape.value(term.reference).row(i));
            let theta = tape.gather_rows(term.utilities, &[i]);
            let nll = directed_nll_tape(tape, theta, &perm, term.corr, centring)?;
            total = tape.add(total, nll)?;
        }
    }
    Ok(tape.scale(total, 0.5 / n as f64))
}

/// Cross-modal rank loss, symmetrised over both ranking directions and
/// averaged over batch rows. For each row, the permutation induced by one
/// direction's similarities is scored under the other direction's utilities;
/// the corrections come from the modality of the candidates in the scored
/// permutation, since they model how likely a candidate is to follow the
/// history inside that list.
pub fn rank_loss_cross(
    tape: &mut Tape,
    sim_vt: Var,
    sim_tv: Var,
    corr_v: &TapeCorrections,
    corr_t: &TapeCorrections,
    centring: bool,
) -> Result<Var> {
    symmetrised_rank_loss(
        tape,
        // Image candidates ranked by each text anchor, scored with
        // image-anchor utilities.
        DirectedTerm {
            reference: sim_tv,
            utilities: sim_vt,
            corr: corr_v,
        },
        // Text candidates ranked by each image anchor.
        DirectedTerm {
            reference: sim_vt,
            utilities: sim_tv,
            corr: corr_t,
        },
        centring,
    )
}

/// In-modal rank loss: text-text rankings scored against image-image
/// utilities and vice versa, symmetrised and batch-averaged.
pub fn rank_loss_inmodal(
    tape: &mut Tape,
    sim_tt: Var,
    sim_ii: Var,
    corr_t: &TapeCorrections,
    corr_v: &TapeCorrections,
    centring: bool,
) -> Result<Var> {
    symmetrised_rank_loss(
        tape,
        DirectedTerm {
            reference: sim_tt,
            utilities: sim_ii,
            corr: corr_t,
        },
        DirectedTerm {
            reference: sim_ii,
            utilities: sim_tt,
            corr: corr_v,
        },
        centring,
    )
}

/// Plain-path mirror of [`rank_loss_cross`] for evaluation without a tape.
pub fn rank_loss_cross_plain(
    sim_vt: &Matrix,
    sim_tv: &Matrix,
    corr_v: &PlainCorrections,
    corr_t: &PlainCorrections,
) -> Result<f64> {
    let term1 = directed_nll_rows_plain(sim_tv, sim_vt, corr_v)?;
    let term2 = directed_nll_rows_plain(sim_vt, sim_tv, corr_t)?;
    Ok(0.5 * (term1 + term2))
}

/// Plain-path mirror of [`rank_loss_inmodal`].
pub fn rank_loss_inmodal_plain(
    sim_tt: &Matrix,
    sim_ii: &Matrix,
    corr_t: &PlainCorrections,
    corr_v: &PlainCorrections,
) -> Result<f64> {
    let term1 = directed_nll_rows_plain(sim_tt, sim_ii, corr_t)?;
    let term2 = directed_nll_rows_plain(sim_ii, sim_tt, corr_v)?;
    Ok(0.5 * (term1 + term2))
}

/// Batch-mean NLL of the permutations induced by `reference` rows under the
/// utilities in the matching `utilities` rows; `corr` belongs to the
/// modality of the ranked candidates.
fn directed_nll_rows_plain(
    reference: &Matrix,
    utilities: &Matrix,
    corr: &PlainCorrections,
) -> Result<f64> {
    let n = reference.rows();
    if corr.order == 0 {
        return Ok(ln_factorial(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        let state = RankingState::from_reference_row(reference.row(i));
        total -= pl_ranking_logprob(&state, utilities.row(i), corr, true)?;
    }
    Ok(total / n as f64)
}
