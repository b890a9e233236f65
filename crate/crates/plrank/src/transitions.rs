//! Attention-parameterised transition heads for the high-order ranking model.
//!
//! Order 2 scores a candidate against the previous pick with a bilinear
//! attention head. Order 3 first compresses the previous pair into a history
//! vector (three linear projections plus a multiplicative interaction, then
//! layer norm) and attends that against the candidate. Orders four and above
//! reuse the same factored form with a single self-attention history encoder
//! over the ordered history, mean-pooled to one vector.
//!
//! Every head is modality-specific: vision-side and text-side parameters
//! never mix. Each order's contribution is gated by a learned scalar
//! `lambda_r = sigmoid(s_r)` initialised close to zero so training starts
//! effectively first-order.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{sigmoid, Tape, Var};
use crate::numerics::LAYER_NORM_EPS;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Vision => "v",
            Modality::Text => "t",
        }
    }
}

/// Bilinear pairwise head (order 2).
#[derive(Debug, Clone)]
pub struct PairHead {
    pub wq: Matrix, // h x D
    pub wk: Matrix, // h x D
}

/// Pair-history head (order 3).
#[derive(Debug, Clone)]
pub struct TripleHead {
    pub w1: Matrix, // D x D
    pub w2: Matrix, // D x D
    pub w3: Matrix, // D x D
    pub wq: Matrix, // h x D
    pub wk: Matrix, // h x D
}

/// Self-attention history encoder plus scoring head for one order r >= 4.
#[derive(Debug, Clone)]
pub struct HistoryHead {
    pub order: usize,
    pub wq: Matrix,       // h x D
    pub wk: Matrix,       // h x D
    pub wv: Matrix,       // h x D
    pub wo: Matrix,       // D x h
    pub pos: Matrix,      // (r-1) x D learned positional offsets
    pub wq_score: Matrix, // h x D
    pub wk_score: Matrix, // h x D
}

/// All transition-head weights for one modality at a given order.
#[derive(Debug, Clone)]
pub struct TransitionParams {
    pub modality: Modality,
    pub dim: usize,
    pub head_dim: usize,
    pub order: usize,
    pub pair: Option<PairHead>,
    pub triple: Option<TripleHead>,
    pub history: Vec<HistoryHead>,
}

/// Xavier-uniform initialisation with bounds +-sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::new(rows, cols, data)
}

impl TransitionParams {
    pub fn init(modality: Modality, dim: usize, head_dim: usize, order: usize, rng: &mut impl Rng) -> Self {
        let pair = (order >= 2).then(|| PairHead {
            wq: xavier_uniform(head_dim, dim, rng),
            wk: xavier_uniform(head_dim, dim, rng),
        });
        let triple = (order >= 3).then(|| TripleHead {
            w1: xavier_uniform(dim, dim, rng),
            w2: xavier_uniform(dim, dim, rng),
            w3: xavier_uniform(dim, dim, rng),
            wq: xavier_uniform(head_dim, dim, rng),
            wk: xavier_uniform(head_dim, dim, rng),
        });
        let history = (4..=order)
            .map(|r| HistoryHead {
                order: r,
                wq: xavier_uniform(head_dim, dim, rng),
                wk: xavier_uniform(head_dim, dim, rng),
                wv: xavier_uniform(head_dim, dim, rng),
                wo: xavier_uniform(dim, head_dim, rng),
                pos: xavier_uniform(r - 1, dim, rng),
                wq_score: xavier_uniform(head_dim, dim, rng),
                wk_score: xavier_uniform(head_dim, dim, rng),
            })
            .collect();
        TransitionParams {
            modality,
            dim,
            head_dim,
            order,
            pair,
            triple,
            history,
        }
    }

    /// Same structure with every weight set to zero (all corrections vanish).
    pub fn zeroed(modality: Modality, dim: usize, head_dim: usize, order: usize) -> Self {
        let z = |r, c| Matrix::zeros(r, c);
        TransitionParams {
            modality,
            dim,
            head_dim,
            order,
            pair: (order >= 2).then(|| PairHead {
                wq: z(head_dim, dim),
                wk: z(head_dim, dim),
            }),
            triple: (order >= 3).then(|| TripleHead {
                w1: z(dim, dim),
                w2: z(dim, dim),
                w3: z(dim, dim),
                wq: z(head_dim, dim),
                wk: z(head_dim, dim),
            }),
            history: (4..=order)
                .map(|r| HistoryHead {
                    order: r,
                    wq: z(head_dim, dim),
                    wk: z(head_dim, dim),
                    wv: z(head_dim, dim),
                    wo: z(dim, head_dim),
                    pos: z(r - 1, dim),
                    wq_score: z(head_dim, dim),
                    wk_score: z(head_dim, dim),
                })
                .collect(),
        }
    }
}

/// Per-order sigmoid gates for one modality, stored as unconstrained logits.
#[derive(Debug, Clone)]
pub struct GateBank {
    pub modality: Modality,
    /// Logits s_r for r = 2..=order (index 0 is r = 2).
    pub logits: Vec<f64>,
}

impl GateBank {
    /// Initial values: s_2 = -3, s_3 = -5, s_r = s_2 - 2(r - 2) for r >= 4.
    pub fn init(modality: Modality, order: usize) -> Self {
        let logits = (2..=order)
            .map(|r| match r {
                2 => -3.0,
                3 => -5.0,
                r => -3.0 - 2.0 * (r as f64 - 2.0),
            })
            .collect();
        GateBank { modality, logits }
    }

    pub fn order(&self) -> usize {
        self.logits.len() + 1
    }

    pub fn logit(&self, r: usize) -> f64 {
        self.logits[r - 2]
    }

    pub fn lambda(&self, r: usize) -> f64 {
        sigmoid(self.logit(r))
    }
}

/// Pairwise scores for a batch of embeddings as a plain matrix. Off-diagonal
/// entries hold (Wq e_a)^T (Wk e_b) / sqrt(h); the diagonal is the -inf mask
/// sentinel because an item can never follow itself.
pub fn beta_matrix(pair: &PairHead, emb: &Matrix, head_dim: usize) -> Result<Matrix> {
    let q = emb.matmul(&pair.wq.transpose())?; // N x h
    let k = emb.matmul(&pair.wk.transpose())?; // N x h
    let mut scores = q.matmul(&k.transpose())?.scale(1.0 / (head_dim as f64).sqrt());
    let n = scores.rows();
    for i in 0..n {
        scores.set(i, i, f64::NEG_INFINITY);
    }
    Ok(scores)
}

/// Tape version of [`beta_matrix`]. The diagonal is left at its raw value
/// here; consumers exclude self-transitions structurally, so the sentinel
/// never has to flow through arithmetic.
pub fn beta_scores_tape(tape: &mut Tape, wq: Var, wk: Var, emb: Var, head_dim: usize) -> Result<Var> {
    let wq_t = tape.transpose(wq);
    let wk_t = tape.transpose(wk);
    let q = tape.matmul(emb, wq_t)?;
    let k = tape.matmul(emb, wk_t)?;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    Ok(tape.scale(raw, 1.0 / (head_dim as f64).sqrt()))
}

/// History vector for the previous pair (a, b):
/// LN(W1 e_a + W2 e_b + W3 (e_a (*) e_b)).
pub fn pair_history_vector(triple: &TripleHead, e_a: &[f64], e_b: &[f64]) -> Result<Vec<f64>> {
    let a = Matrix::row_vector(e_a);
    let b = Matrix::row_vector(e_b);
    let ab = a.mul_elem(&b)?;
    let mix = a
        .matmul(&triple.w1.transpose())?
        .add(&b.matmul(&triple.w2.transpose())?)?
        .add(&ab.matmul(&triple.w3.transpose())?)?;
    Ok(crate::numerics::layer_norm_forward(mix.row(0), LAYER_NORM_EPS))
}

/// Triple score gamma_{a,b,d} for one (history pair, candidate) triple.
pub fn gamma_score(
    triple: &TripleHead,
    e_a: &[f64],
    e_b: &[f64],
    e_d: &[f64],
    head_dim: usize,
) -> Result<f64> {
    let h_ab = pair_history_vector(triple, e_a, e_b)?;
    let q = Matrix::row_vector(&h_ab).matmul(&triple.wq.transpose())?;
    let k = Matrix::row_vector(e_d).matmul(&triple.wk.transpose())?;
    let dot: f64 = q.row(0).iter().zip(k.row(0)).map(|(a, b)| a * b).sum();
    Ok(dot / (head_dim as f64).sqrt())
}

/// Full gamma table for a batch: row a*N+b holds the scores of every
/// candidate d after history (a, b). Plain version.
pub fn gamma_table(triple: &TripleHead, emb: &Matrix, head_dim: usize) -> Result<Matrix> {
    let n = emb.rows();
    let (first, second) = pair_index_vectors(n);
    let ea = gather(emb, &first);
    let eb = gather(emb, &second);
    let mix = ea
        .matmul(&triple.w1.transpose())?
        .add(&eb.matmul(&triple.w2.transpose())?)?
        .add(&ea.mul_elem(&eb)?.matmul(&triple.w3.transpose())?)?;
    let mut h = mix.clone();
    for r in 0..h.rows() {
        let normed = crate::numerics::layer_norm_forward(mix.row(r), LAYER_NORM_EPS);
        h.row_mut(r).copy_from_slice(&normed);
    }
    let q = h.matmul(&triple.wq.transpose())?; // N^2 x h
    let k = emb.matmul(&triple.wk.transpose())?; // N x h
    Ok(q.matmul(&k.transpose())?.scale(1.0 / (head_dim as f64).sqrt()))
}

/// Tape version of [`gamma_table`].
#[allow(clippy::too_many_arguments)]
pub fn gamma_table_tape(
    tape: &mut Tape,
    w1: Var,
    w2: Var,
    w3: Var,
    wq: Var,
    wk: Var,
    emb: Var,
    head_dim: usize,
) -> Result<Var> {
    let n = tape.value(emb).rows();
    let (first, second) = pair_index_vectors(n);
    let ea = tape.gather_rows(emb, &first);
    let eb = tape.gather_rows(emb, &second);
    let w1t = tape.transpose(w1);
    let w2t = tape.transpose(w2);
    let w3t = tape.transpose(w3);
    let p1 = tape.matmul(ea, w1t)?;
    let p2 = tape.matmul(eb, w2t)?;
    let eab = tape.mul_elem(ea, eb)?;
    let p3 = tape.matmul(eab, w3t)?;
    let s12 = tape.add(p1, p2)?;
    let mix = tape.add(s12, p3)?;
    let h = tape.layer_norm_rows(mix, LAYER_NORM_EPS);
    let wqt = tape.transpose(wq);
    let wkt = tape.transpose(wk);
    let q = tape.matmul(h, wqt)?;
    let k = tape.matmul(emb, wkt)?;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    Ok(tape.scale(raw, 1.0 / (head_dim as f64).sqrt()))
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows)
}

fn pair_index_vectors(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut first = Vec::with_capacity(n * n);
    let mut second = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            first.push(a);
            second.push(b);
        }
    }
    (first, second)
}

/// Encodes an ordered history of r-1 embeddings into one vector: positional
/// offsets, one self-attention layer, mean pool.
pub fn history_encode(head: &HistoryHead, history: &Matrix, head_dim: usize) -> Result<Vec<f64>> {
    let expect = head.order - 1;
    if history.rows() != expect {
        return Err(Error::InvalidParameter(format!(
            "history length {} does not match order {} (need {})",
            history.rows(),
            head.order,
            expect
        )));
    }
    let x = history.add(&head.pos)?;
    let q = x.matmul(&head.wq.transpose())?;
    let k = x.matmul(&head.wk.transpose())?;
    let v = x.matmul(&head.wv.transpose())?;
    let mut scores = q.matmul(&k.transpose())?.scale(1.0 / (head_dim as f64).sqrt());
    for r in 0..scores.rows() {
        let p = crate::numerics::softmax_forward(scores.row(r));
        scores.row_mut(r).copy_from_slice(&p);
    }
    let attended = scores.matmul(&v)?.matmul(&head.wo.transpose())?;
    Ok(attended.mean_rows().row(0).to_vec())
}

/// Scores every candidate in `emb` against an encoded history vector, in the
/// same factored form the triple head uses.
pub fn history_scores(
    head: &HistoryHead,
    hist_vec: &[f64],
    emb: &Matrix,
    head_dim: usize,
) -> Result<Vec<f64>> {
    let q = Matrix::row_vector(hist_vec).matmul(&head.wq_score.transpose())?;
    let k = emb.matmul(&head.wk_score.transpose())?;
    let out = q.matmul(&k.transpose())?.scale(1.0 / (head_dim as f64).sqrt());
    Ok(out.row(0).to_vec())
}

/// Tape handles for one history head.
#[derive(Debug, Clone, Copy)]
pub struct HistoryHeadVars {
    pub order: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub pos: Var,
    pub wq_score: Var,
    pub wk_score: Var,
}

/// Tape version of history encoding plus candidate scoring. Returns a 1 x N
/// row of scores.
pub fn history_scores_tape(
    tape: &mut Tape,
    head: &HistoryHeadVars,
    emb: Var,
    hist_idx: &[usize],
    head_dim: usize,
) -> Result<Var> {
    if hist_idx.len() != head.order - 1 {
        return Err(Error::InvalidParameter(format!(
            "history length {} does not match order {}",
            hist_idx.len(),
            head.order
        )));
    }
    let gathered = tape.gather_rows(emb, hist_idx);
    let x = tape.add(gathered, head.pos)?;
    let wqt = tape.transpose(head.wq);
    let wkt = tape.transpose(head.wk);
    let wvt = tape.transpose(head.wv);
    let q = tape.matmul(x, wqt)?;
    let k = tape.matmul(x, wkt)?;
    let v = tape.matmul(x, wvt)?;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (head_dim as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v)?;
    let wot = tape.transpose(head.wo);
    let back = tape.matmul(mixed, wot)?;
    let pooled = tape.mean_over_rows(back);
    let wqst = tape.transpose(head.wq_score);
    let wkst = tape.transpose(head.wk_score);
    let qs = tape.matmul(pooled, wqst)?;
    let ks = tape.matmul(emb, wkst)?;
    let kst = tape.transpose(ks);
    let scores = tape.matmul(qs, kst)?;
    Ok(tape.scale(scores, 1.0 / (head_dim as f64).sqrt()))
}

/// L1 penalty on the gates: sum_r eta_r * lambda_r (lambda is positive, so
/// |lambda| = lambda). `frozen` orders contribute their value but no
/// gradient.
pub fn gate_l1_penalty_tape(
    tape: &mut Tape,
    gate_logits: &[(usize, Var, bool)],
    etas: &[(usize, f64)],
) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for &(r, logit, frozen) in gate_logits {
        let eta = etas
            .iter()
            .find(|&&(er, _)| er == r)
            .map(|&(_, e)| e)
            .ok_or_else(|| Error::InvalidParameter(format!("no eta for order {r}")))?;
        let src = if frozen { tape.detach(logit) } else { logit };
        let lambda = tape.sigmoid(src);
        let term = tape.scale(lambda, eta);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Plain value of the gate penalty.
pub fn gate_l1_penalty(gates: &GateBank, etas: &[(usize, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for r in 2..=gates.order() {
        let eta = etas
            .iter()
            .find(|&&(er, _)| er == r)
            .map(|&(_, e)| e)
            .ok_or_else(|| Error::InvalidParameter(format!("no eta for order {r}")))?;
        total += eta * gates.lambda(r);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_zero_beta() {
        let pair = PairHead {
            wq: Matrix::zeros(2, 3),
            wk: Matrix::zeros(2, 3),
        };
        let emb = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let beta = beta_matrix(&pair, &emb, 2).unwrap();
        assert_eq!(beta.get(0, 1), 0.0);
        assert_eq!(beta.get(1, 0), 0.0);
        assert_eq!(beta.get(0, 0), f64::NEG_INFINITY);
    }

    #[test]
    fn beta_hand_evaluated_bilinear_form() {
        // h = 1, D = 1, Wq = Wk = [1], e = [2, 3]: beta_01 = 2*3 / sqrt(1) = 6.
        let pair = PairHead {
            wq: Matrix::scalar(1.0),
            wk: Matrix::scalar(1.0),
        };
        let emb = Matrix::from_rows(&[vec![2.0], vec![3.0]]);
        let beta = beta_matrix(&pair, &emb, 1).unwrap();
        assert_eq!(beta.get(0, 1), 6.0);
        assert_eq!(beta.get(1, 0), 6.0);
    }

    #[test]
    fn gamma_zero_query_weights_give_zero() {
        let mut r = rng(1);
        let mut triple = TripleHead {
            w1: xavier_uniform(4, 4, &mut r),
            w2: xavier_uniform(4, 4, &mut r),
            w3: xavier_uniform(4, 4, &mut r),
            wq: Matrix::zeros(2, 4),
            wk: xavier_uniform(2, 4, &mut r),
        };
        let e: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1];
        let g = gamma_score(&triple, &e, &e, &e, 2).unwrap();
        assert_eq!(g, 0.0);
        triple.wq = xavier_uniform(2, 4, &mut r);
        let g2 = gamma_score(&triple, &e, &e, &e, 2).unwrap();
        assert!(g2 != 0.0);
    }

    #[test]
    fn gamma_symmetric_history_when_w3_zero_and_w1_eq_w2() {
        let mut r = rng(2);
        let w = xavier_uniform(4, 4, &mut r);
        let triple = TripleHead {
            w1: w.clone(),
            w2: w,
            w3: Matrix::zeros(4, 4),
            wq: xavier_uniform(2, 4, &mut r),
            wk: xavier_uniform(2, 4, &mut r),
        };
        let a = vec![0.3, -0.2, 0.9, 0.1];
        let b = vec![-0.5, 0.7, 0.2, -0.8];
        let d = vec![0.1, 0.4, -0.6, 0.2];
        let g_ab = gamma_score(&triple, &a, &b, &d, 2).unwrap();
        let g_ba = gamma_score(&triple, &b, &a, &d, 2).unwrap();
        assert!((g_ab - g_ba).abs() < 1e-14);
    }

    #[test]
    fn gamma_table_matches_single_scores() {
        let mut r = rng(3);
        let triple = TripleHead {
            w1: xavier_uniform(4, 4, &mut r),
            w2: xavier_uniform(4, 4, &mut r),
            w3: xavier_uniform(4, 4, &mut r),
            wq: xavier_uniform(2, 4, &mut r),
            wk: xavier_uniform(2, 4, &mut r),
        };
        let emb = xavier_uniform(3, 4, &mut r);
        let table = gamma_table(&triple, &emb, 2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for d in 0..3 {
                    let single =
                        gamma_score(&triple, emb.row(a), emb.row(b), emb.row(d), 2).unwrap();
                    assert!((table.get(a * 3 + b, d) - single).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn history_zero_weights_give_zero_scores() {
        let head = HistoryHead {
            order: 4,
            wq: Matrix::zeros(2, 3),
            wk: Matrix::zeros(2, 3),
            wv: Matrix::zeros(2, 3),
            wo: Matrix::zeros(3, 2),
            pos: Matrix::zeros(3, 3),
            wq_score: Matrix::zeros(2, 3),
            wk_score: Matrix::zeros(2, 3),
        };
        let mut r = rng(4);
        let hist = xavier_uniform(3, 3, &mut r);
        let emb = xavier_uniform(5, 3, &mut r);
        let hv = history_encode(&head, &hist, 2).unwrap();
        assert!(hv.iter().all(|&x| x == 0.0));
        let scores = history_scores(&head, &hv, &emb, 2).unwrap();
        assert!(scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn history_order_sensitivity_needs_positional_offsets() {
        let mut r = rng(5);
        let mut head = HistoryHead {
            order: 4,
            wq: xavier_uniform(2, 3, &mut r),
            wk: xavier_uniform(2, 3, &mut r),
            wv: xavier_uniform(2, 3, &mut r),
            wo: xavier_uniform(3, 2, &mut r),
            pos: Matrix::zeros(3, 3),
            wq_score: xavier_uniform(2, 3, &mut r),
            wk_score: xavier_uniform(2, 3, &mut r),
        };
        let a = vec![0.4, -0.1, 0.3];
        let b = vec![-0.6, 0.2, 0.5];
        let c = vec![0.1, 0.9, -0.4];
        let abc = Matrix::from_rows(&[a.clone(), b.clone(), c.clone()]);
        let cba = Matrix::from_rows(&[c, b, a]);

        // Permutation equivariance of attention + mean pooling: with zero
        // positional offsets the two orderings encode identically.
        let h1 = history_encode(&head, &abc, 2).unwrap();
        let h2 = history_encode(&head, &cba, 2).unwrap();
        for (x, y) in h1.iter().zip(&h2) {
            assert!((x - y).abs() < 1e-12);
        }

        head.pos = xavier_uniform(3, 3, &mut r);
        let h1 = history_encode(&head, &abc, 2).unwrap();
        let h2 = history_encode(&head, &cba, 2).unwrap();
        let diff: f64 = h1.iter().zip(&h2).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "offsets should break order symmetry, diff {diff}");
    }

    #[test]
    fn history_wrong_length_errors() {
        let mut r = rng(6);
        let head = HistoryHead {
            order: 4,
            wq: xavier_uniform(2, 3, &mut r),
            wk: xavier_uniform(2, 3, &mut r),
            wv: xavier_uniform(2, 3, &mut r),
            wo: xavier_uniform(3, 2, &mut r),
            pos: xavier_uniform(3, 3, &mut r),
            wq_score: xavier_uniform(2, 3, &mut r),
            wk_score: xavier_uniform(2, 3, &mut r),
        };
        let short = xavier_uniform(2, 3, &mut r);
        assert!(history_encode(&head, &short, 2).is_err());
    }

    #[test]
    fn gate_bank_initial_values() {
        let g = GateBank::init(Modality::Vision, 5);
        assert_eq!(g.logit(2), -3.0);
        assert_eq!(g.logit(3), -5.0);
        assert_eq!(g.logit(4), -7.0);
        assert_eq!(g.logit(5), -9.0);
        assert!((g.lambda(2) - 0.04742587317756678).abs() < 1e-15);
    }

    #[test]
    fn gate_penalty_direct_evaluation() {
        let g = GateBank::init(Modality::Text, 3);
        let p = gate_l1_penalty(&g, &[(2, 1e-4), (3, 1e-3)]).unwrap();
        let expect = 1e-4 * sigmoid(-3.0) + 1e-3 * sigmoid(-5.0);
        assert!((p - expect).abs() < 1e-18);
    }

    #[test]
    fn modality_separation_of_params() {
        let mut r = rng(7);
        let v = TransitionParams::init(Modality::Vision, 4, 2, 3, &mut r);
        let t = TransitionParams::init(Modality::Text, 4, 2, 3, &mut r);
        let emb = xavier_uniform(3, 4, &mut r);
        let before = beta_matrix(t.pair.as_ref().unwrap(), &emb, 2).unwrap();
        // Mutating vision-side weights must leave text-side scores untouched.
        let mut v2 = v;
        v2.pair.as_mut().unwrap().wq = Matrix::zeros(2, 4);
        let after = beta_matrix(t.pair.as_ref().unwrap(), &emb, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(before.get(i, j).to_bits(), after.get(i, j).to_bits());
                }
            }
        }
    }
}
