//! The training objective: symmetric InfoNCE, the rank-weight schedule, the
//! warm-start state machine, the total loss, and the AdamW optimiser.
//!
//! The total loss combines the contrastive term on fused embeddings, the
//! order-R in-modal and cross-modal rank losses weighted by a shared cosine
//! schedule, the image and text distillation terms, and the L1 penalty on
//! the transition gates. Orders still inside their warm-start window
//! contribute value but exactly zero gradient.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};
use serde::Serialize;

/// Symmetric InfoNCE over an in-batch similarity matrix with a learnable
/// log-temperature node: cross-entropy of the matched pair against each row
/// and each column, averaged.
pub fn clip_infonce(tape: &mut Tape, sim: Var, log_tau: Var) -> Result<Var> {
    let (n, c) = tape.value(sim).shape();
    if n != c {
        return Err(Error::Shape {
            op: "clip_infonce",
            left: format!("{n}x{n}"),
            right: format!("{n}x{c}"),
        });
    }
    let neg_log_tau = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg_log_tau);
    let logits = tape.scale_by(sim, inv_tau);
    let logits_t = tape.transpose(logits);
    let mask = vec![false; n];
    let mut total = tape.scalar(0.0);
    for i in 0..n {
        for m in [logits, logits_t] {
            let row = tape.gather_rows(m, &[i]);
            let ls = tape.log_softmax_masked(row, &mask)?;
            let diag = tape.gather_entry(ls, i);
            total = tape.add(total, diag)?;
        }
    }
    Ok(tape.scale(total, -0.5 / n as f64))
}

/// Plain InfoNCE used by evaluation; `tau` must be positive.
pub fn clip_infonce_plain(sim: &Matrix, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (n, c) = sim.shape();
    if n != c {
        return Err(Error::Shape {
            op: "clip_infonce",
            left: format!("{n}x{n}"),
            right: format!("{n}x{c}"),
        });
    }
    let mask = vec![false; n];
    let t = sim.transpose();
    let mut total = 0.0;
    for i in 0..n {
        for m in [sim, &t] {
            let scaled: Vec<f64> = m.row(i).iter().map(|v| v / tau).collect();
            let ls = crate::numerics::log_softmax_masked_forward(&scaled, &mask)?;
            total += ls[i];
        }
    }
    Ok(-0.5 * total / n as f64)
}

/// Cosine ramp on the rank-loss weights: clip((3i - 1)/(n - 1), 0, 2).
pub fn mu_schedule(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs < 2 {
        return Err(Error::InvalidParameter(format!(
            "schedule needs at least 2 epochs, got {total_epochs}"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    let raw = (3.0 * epoch as f64 - 1.0) / (total_epochs as f64 - 1.0);
    Ok(raw.clamp(0.0, 2.0))
}

/// Epoch-indexed freeze flags for the staged warm-start: first-order only in
/// [0,3), order 2 unfreezes at epoch 3, everything else at epoch 6. Flags
/// are monotone in the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarmStartState {
    pub epoch: usize,
}

impl WarmStartState {
    pub fn new(epoch: usize) -> Self {
        WarmStartState { epoch }
    }

    pub fn unfreeze_epoch(order: usize) -> usize {
        match order {
            0 | 1 => 0,
            2 => 3,
            _ => 6,
        }
    }

    pub fn frozen(&self, order: usize) -> bool {
        self.epoch < Self::unfreeze_epoch(order)
    }
}

/// Static loss weights; the mu pair comes from [`mu_schedule`] per epoch.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub order: usize,
    pub mu_d: f64,
    pub rho: f64,
    pub tau_init: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            order: 3,
            mu_d: 0.5,
            rho: 0.5,
            tau_init: 0.07,
        }
    }
}

/// Gate L1 weights: eta_2 = 1e-4, eta_3 = 1e-3, one decade per order beyond
/// (monotone in r).
pub fn eta_for_order(r: usize) -> f64 {
    match r {
        2 => 1e-4,
        3 => 1e-3,
        r => 1e-3 * 10f64.powi(r as i32 - 3),
    }
}

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub clip: f64,
    pub rank_in: f64,
    pub rank_cross: f64,
    pub gram_img: f64,
    pub rel_img: f64,
    pub gram_txt: f64,
    pub rel_txt: f64,
    pub gate_penalty: f64,
    pub mu: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.total,
            self.clip,
            self.rank_in,
            self.rank_cross,
            self.gram_img,
            self.rel_img,
            self.gram_txt,
            self.rel_txt,
            self.gate_penalty,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Component nodes assembled by the model forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub clip: Var,
    pub rank_in: Var,
    pub rank_cross: Var,
    pub gram_img: Var,
    pub rel_img: Var,
    pub gram_txt: Var,
    pub rel_txt: Var,
    pub gate_penalty: Var,
}

/// Weighted sum of the components:
/// clip + mu1*in + mu2*cross + mu_d*(gram_img + rel_img + rho*(gram_txt + rel_txt)) + gates.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    mu1: f64,
    mu2: f64,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let mut total = terms.clip;
    if mu1 != 0.0 {
        let t = tape.scale(terms.rank_in, mu1);
        total = tape.add(total, t)?;
    }
    if mu2 != 0.0 {
        let t = tape.scale(terms.rank_cross, mu2);
        total = tape.add(total, t)?;
    }
    if weights.mu_d != 0.0 {
        let img = tape.add(terms.gram_img, terms.rel_img)?;
        let txt = tape.add(terms.gram_txt, terms.rel_txt)?;
        let txt = tape.scale(txt, weights.rho);
        let distill = tape.add(img, txt)?;
        let distill = tape.scale(distill, weights.mu_d);
        total = tape.add(total, distill)?;
    }
    total = tape.add(total, terms.gate_penalty)?;
    let report = LossReport {
        total: tape.value(total).item(),
        clip: tape.value(terms.clip).item(),
        rank_in: tape.value(terms.rank_in).item(),
        rank_cross: tape.value(terms.rank_cross).item(),
        gram_img: tape.value(terms.gram_img).item(),
        rel_img: tape.value(terms.rel_img).item(),
        gram_txt: tape.value(terms.gram_txt).item(),
        rel_txt: tape.value(terms.rel_txt).item(),
        gate_penalty: tape.value(terms.gate_penalty).item(),
        mu: mu1,
    };
    if !report.all_finite() {
        return Err(Error::NonFinite {
            context: "total_loss",
            name: "loss term".into(),
        });
    }
    Ok((total, report))
}

/// Which slice of the model a parameter belongs to, for warm-start freezing
/// and weight-decay exemptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Encoders, fusion, students: always trainable, weight-decayed.
    Base,
    /// Always trainable, never decayed (biases, log-temperature).
    NoDecay,
    /// Transition-head weights of a given order: decayed, frozen until the
    /// order's warm-start epoch.
    Order(usize),
    /// Gate logit of a given order: frozen with the order, never decayed.
    GateLogit(usize),
}

impl ParamKind {
    pub fn order(&self) -> Option<usize> {
        match self {
            ParamKind::Order(r) | ParamKind::GateLogit(r) => Some(*r),
            _ => None,
        }
    }

    pub fn decayed(&self) -> bool {
        matches!(self, ParamKind::Base | ParamKind::Order(_))
    }
}

/// A named, flat collection of matrices with stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Matrix, ParamKind)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, kind: ParamKind) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value, kind));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _, _)| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn kind(&self, idx: usize) -> ParamKind {
        self.entries[idx].2
    }

    pub fn value(&self, idx: usize) -> &Matrix {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> &Matrix {
        let idx = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.value(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix, ParamKind)> {
        self.entries.iter().map(|(n, m, k)| (n.as_str(), m, *k))
    }

    /// Registers every parameter on a fresh tape, in insertion order.
    pub fn register_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, m, _)| tape.var(m.clone()))
            .collect()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

/// First and second moment accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, mat, _)| Matrix::zeros(mat.rows(), mat.cols()))
            .collect::<Vec<_>>();
        AdamWState {
            step: 0,
            m: m.clone(),
            v: m,
        }
    }
}

/// One decoupled-weight-decay Adam step over every unfrozen parameter.
/// Frozen parameters are untouched, including their decay. A non-finite
/// gradient aborts with the offending parameter's name.
pub fn adamw_step(
    state: &mut AdamWState,
    store: &mut ParamStore,
    grads: &[Matrix],
    lr: f64,
    warm: WarmStartState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: format!("{} grads", grads.len()),
            right: format!("{} params", store.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for idx in 0..store.len() {
        let kind = store.kind(idx);
        if let Some(order) = kind.order() {
            if warm.frozen(order) {
                continue;
            }
        }
        let g = &grads[idx];
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: "adamw_step gradient",
                name: store.name(idx).to_string(),
            });
        }
        let decay = if kind.decayed() { cfg.weight_decay } else { 0.0 };
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = store.value_mut(idx).data_mut();
        for ((pi, gi), (mi, vi)) in p
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let update = m_hat / (v_hat.sqrt() + cfg.eps) + decay * *pi;
            *pi -= lr * update;
        }
    }
    Ok(())
}

/// Learning rate with linear warmup to the peak followed by cosine decay to
/// zero.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step.saturating_sub(warmup_steps)) as f64 / span as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_uniform_similarities() {
        // S = 0 everywhere: every row and column softmax is uniform, so the
        // loss is ln(B).
        let sim = Matrix::zeros(4, 4);
        let loss = clip_infonce_plain(&sim, 0.07).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_diagonal_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 3.0, 9.0, 27.0] {
            let mut sim = Matrix::zeros(4, 4);
            for i in 0..4 {
                sim.set(i, i, margin);
            }
            let loss = clip_infonce_plain(&sim, 1.0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn infonce_rejects_nonpositive_temperature() {
        let sim = Matrix::zeros(2, 2);
        assert!(clip_infonce_plain(&sim, 0.0).is_err());
        assert!(clip_infonce_plain(&sim, -1.0).is_err());
    }

    #[test]
    fn infonce_tape_matches_plain() {
        let mut vals = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                vals.set(i, j, (i as f64 * 0.31 - j as f64 * 0.17).sin());
            }
        }
        let tau = 0.2;
        let plain = clip_infonce_plain(&vals, tau).unwrap();
        let mut tape = Tape::new();
        let sim = tape.var(vals);
        let log_tau = tape.scalar(tau.ln());
        let loss = clip_infonce(&mut tape, sim, log_tau).unwrap();
        assert!((tape.value(loss).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn mu_schedule_endpoints_and_interior() {
        assert_eq!(mu_schedule(0, 10).unwrap(), 0.0);
        assert_eq!(mu_schedule(63, 64).unwrap(), 2.0);
        let v = mu_schedule(21, 64).unwrap();
        assert!((v - 62.0 / 63.0).abs() < 1e-15);
        for n in 3..=128 {
            assert_eq!(mu_schedule(0, n).unwrap(), 0.0);
            assert_eq!(mu_schedule(n - 1, n).unwrap(), 2.0);
        }
    }

    #[test]
    fn mu_schedule_rejects_tiny_runs() {
        assert!(mu_schedule(0, 1).is_err());
        assert!(mu_schedule(5, 5).is_err());
    }

    #[test]
    fn warm_start_windows() {
        for epoch in 0..3 {
            let w = WarmStartState::new(epoch);
            assert!(w.frozen(2) && w.frozen(3) && w.frozen(4));
        }
        for epoch in 3..6 {
            let w = WarmStartState::new(epoch);
            assert!(!w.frozen(2));
            assert!(w.frozen(3) && w.frozen(5));
        }
        let w = WarmStartState::new(6);
        assert!(!w.frozen(2) && !w.frozen(3) && !w.frozen(4));
        // Monotone: once unfrozen never refrozen.
        for order in 2..=5 {
            let mut was_unfrozen = false;
            for epoch in 0..10 {
                let frozen = WarmStartState::new(epoch).frozen(order);
                if was_unfrozen {
                    assert!(!frozen);
                }
                was_unfrozen = !frozen;
            }
        }
    }

    #[test]
    fn eta_monotone_in_order() {
        assert_eq!(eta_for_order(2), 1e-4);
        assert_eq!(eta_for_order(3), 1e-3);
        let mut prev = 0.0;
        for r in 2..=6 {
            let e = eta_for_order(r);
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(&[1.0, -2.0]), ParamKind::NoDecay);
        let mut state = AdamWState::new(&store);
        let grads = vec![Matrix::zeros(1, 2)];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(0),
            &cfg,
        )
        .unwrap();
        assert_eq!(store.get("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_single_step_hand_trace() {
        // Scalar parameter, constant gradient 1, lr 0.1, beta = (0.9, 0.98):
        // m = 0.1, m_hat = 1; v = 0.02, v_hat = 1; update = 1/(1 + eps).
        let mut store = ParamStore::new();
        store.add("w", Matrix::scalar(1.0), ParamKind::NoDecay);
        let mut state = AdamWState::new(&store);
        let grads = vec![Matrix::scalar(1.0)];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(0),
            &cfg,
        )
        .unwrap();
        let expect: f64 = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert_eq!(store.get("w").item().to_bits(), expect.to_bits());
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::scalar(3.0), ParamKind::Base);
        let mut state = AdamWState::new(&store);
        let grads = vec![Matrix::scalar(0.0)];
        let cfg = AdamWConfig::default(); // wd 0.2
        adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(0),
            &cfg,
        )
        .unwrap();
        // Scaled by (1 - lr*wd) = 0.98.
        assert!((store.get("w").item() - 3.0 * (1.0 - 0.02)).abs() < 1e-15);
    }

    #[test]
    fn adamw_skips_frozen_orders_entirely() {
        let mut store = ParamStore::new();
        store.add("beta_head", Matrix::scalar(1.0), ParamKind::Order(2));
        store.add("gate2", Matrix::scalar(-3.0), ParamKind::GateLogit(2));
        let mut state = AdamWState::new(&store);
        let grads = vec![Matrix::scalar(5.0), Matrix::scalar(5.0)];
        adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(1),
            &AdamWConfig::default(),
        )
        .unwrap();
        assert_eq!(store.get("beta_head").item(), 1.0);
        assert_eq!(store.get("gate2").item(), -3.0);
        // After the window the same step moves them.
        adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(3),
            &AdamWConfig::default(),
        )
        .unwrap();
        assert!(store.get("beta_head").item() != 1.0);
        assert!(store.get("gate2").item() != -3.0);
    }

    #[test]
    fn adamw_aborts_on_nonfinite_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::scalar(1.0), ParamKind::Base);
        let mut state = AdamWState::new(&store);
        let grads = vec![Matrix::scalar(f64::NAN)];
        let err = adamw_step(
            &mut state,
            &mut store,
            &grads,
            0.1,
            WarmStartState::new(0),
            &AdamWConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { name, .. } => assert_eq!(name, "w"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let peak = 5e-4;
        let total = 100;
        let warmup = 5;
        assert!(lr_at(0, total, peak, warmup) > 0.0);
        assert!((lr_at(4, total, peak, warmup) - peak).abs() < 1e-18);
        let mid = lr_at(52, total, peak, warmup);
        assert!(mid < peak && mid > 0.0);
        let end = lr_at(99, total, peak, warmup);
        assert!(end < 0.01 * peak);
        // Monotone decay after warmup.
        let mut prev = peak;
        for s in warmup..total {
            let lr = lr_at(s, total, peak, warmup);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
