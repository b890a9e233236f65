//! The desk-scale model: two-layer perceptron trunk encoders, per-position
//! student token maps, fusion branches, transition heads, and gates, all
//! held in one flat parameter store.
//!
//! The encoders stand in for the paper-scale transformers; the loss family,
//! not the encoder, is the subject here. One forward pass registers every
//! parameter on a fresh tape, produces fused unit-norm embeddings for both
//! modalities, and assembles every loss component. Evaluation reuses the
//! same forward and reads values without running backward.

use crate::distill;
use crate::error::Result;
use crate::fusion::{self, FusionParams, FusionVars};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};
use crate::objective::{self, LossTerms, ParamKind, ParamStore, WarmStartState};
use crate::ranking::{self, TapeCorrections, TapeGate, TripleHeadVars};
use crate::transitions::{
    self, GateBank, HistoryHead, HistoryHeadVars, Modality, PairHead, TransitionParams, TripleHead,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::corpus::mix_seed;

const MODALITIES: [Modality; 2] = [Modality::Vision, Modality::Text];

/// Model dimensions duplicated out of the config for readability.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub raw: usize,
    pub dim: usize,
    pub hidden: usize,
    pub student: usize,
    pub tokens: usize,
    pub head: usize,
    pub order: usize,
}

impl Dims {
    pub fn from_config(config: &RunConfig) -> Self {
        Dims {
            raw: config.raw_dim,
            dim: config.dim,
            hidden: config.encoder_hidden,
            student: config.student_dim,
            tokens: config.tokens,
            head: config.head_dim,
            order: config.order,
        }
    }
}

pub struct Model {
    pub dims: Dims,
    pub store: ParamStore,
}

/// Teacher slices for one batch.
pub struct BatchTeacher {
    pub img_grams: Vec<Matrix>,
    pub img_cls: Matrix,
    pub txt_grams: Vec<Matrix>,
    pub txt_cls: Matrix,
}

/// Everything a training step needs from one batch.
pub struct BatchData {
    pub image_raw: Matrix,
    pub text_raw: Matrix,
    pub teacher: BatchTeacher,
    pub triples: Vec<(usize, usize, usize)>,
}

/// Handles produced by one forward pass.
pub struct ForwardOutput {
    pub terms: LossTerms,
    pub v_hat: Var,
    pub t_hat: Var,
    pub sim_vt: Var,
    pub fused_v: Vec<fusion::FusedEmbedding>,
    pub fused_t: Vec<fusion::FusedEmbedding>,
}

impl Model {
    pub fn init(config: &RunConfig, seed: u64) -> Self {
        let dims = Dims::from_config(config);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
        let mut store = ParamStore::new();
        store.add(
            "log_tau",
            Matrix::scalar(config.tau_init.ln()),
            ParamKind::NoDecay,
        );
        for modality in MODALITIES {
            let m = modality.tag();
            let xavier = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
                transitions::xavier_uniform(r, c, rng)
            };
            store.add(
                format!("enc.{m}.w1"),
                xavier(dims.hidden, dims.raw, &mut rng),
                ParamKind::Base,
            );
            store.add(
                format!("enc.{m}.b1"),
                Matrix::zeros(1, dims.hidden),
                ParamKind::NoDecay,
            );
            store.add(
                format!("enc.{m}.w2"),
                xavier(dims.dim, dims.hidden, &mut rng),
                ParamKind::Base,
            );
            store.add(
                format!("enc.{m}.b2"),
                Matrix::zeros(1, dims.dim),
                ParamKind::NoDecay,
            );
            store.add(
                format!("student.{m}.map"),
                xavier(dims.tokens * dims.student, dims.raw, &mut rng),
                ParamKind::Base,
            );
            let fp = FusionParams::init(dims.student, dims.dim, &mut rng);
            store.add(format!("fusion.{m}.ch_w1"), fp.ch_w1, ParamKind::Base);
            store.add(format!("fusion.{m}.ch_w2"), fp.ch_w2, ParamKind::Base);
            store.add(format!("fusion.{m}.sp_w"), fp.sp_w, ParamKind::Base);
            store.add(format!("fusion.{m}.sp_b"), fp.sp_b, ParamKind::NoDecay);
            store.add(format!("fusion.{m}.sa_wq"), fp.sa_wq, ParamKind::Base);
            store.add(format!("fusion.{m}.sa_wk"), fp.sa_wk, ParamKind::Base);
            store.add(format!("fusion.{m}.sa_wv"), fp.sa_wv, ParamKind::Base);
            store.add(format!("fusion.{m}.sa_wo"), fp.sa_wo, ParamKind::Base);
            store.add(format!("fusion.{m}.proj"), fp.proj, ParamKind::Base);
            store.add(format!("fusion.{m}.gate_w"), fp.gate_w, ParamKind::Base);
            store.add(format!("fusion.{m}.gate_b"), fp.gate_b, ParamKind::NoDecay);
            let tp = TransitionParams::init(modality, dims.dim, dims.head, dims.order, &mut rng);
            if let Some(pair) = tp.pair {
                store.add(format!("trans.{m}.pair.wq"), pair.wq, ParamKind::Order(2));
                store.add(format!("trans.{m}.pair.wk"), pair.wk, ParamKind::Order(2));
            }
            if let Some(triple) = tp.triple {
                store.add(format!("trans.{m}.triple.w1"), triple.w1, ParamKind::Order(3));
                store.add(format!("trans.{m}.triple.w2"), triple.w2, ParamKind::Order(3));
                store.add(format!("trans.{m}.triple.w3"), triple.w3, ParamKind::Order(3));
                store.add(format!("trans.{m}.triple.wq"), triple.wq, ParamKind::Order(3));
                store.add(format!("trans.{m}.triple.wk"), triple.wk, ParamKind::Order(3));
            }
            for head in tp.history {
                let r = head.order;
                let kind = ParamKind::Order(r);
                store.add(format!("trans.{m}.hist{r}.wq"), head.wq, kind);
                store.add(format!("trans.{m}.hist{r}.wk"), head.wk, kind);
                store.add(format!("trans.{m}.hist{r}.wv"), head.wv, kind);
                store.add(format!("trans.{m}.hist{r}.wo"), head.wo, kind);
                store.add(format!("trans.{m}.hist{r}.pos"), head.pos, kind);
                store.add(format!("trans.{m}.hist{r}.wq_score"), head.wq_score, kind);
                store.add(format!("trans.{m}.hist{r}.wk_score"), head.wk_score, kind);
            }
            let gates = GateBank::init(modality, dims.order);
            for r in 2..=dims.order {
                store.add(
                    format!("gate.{m}.s{r}"),
                    Matrix::scalar(gates.logit(r)),
                    ParamKind::GateLogit(r),
                );
            }
        }
        Model { dims, store }
    }

    /// Zeroes every transition-head weight, leaving gates and the rest of
    /// the model untouched (the hierarchy-collapse configuration).
    pub fn zero_transition_heads(&mut self) {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(name, _, _)| name.starts_with("trans."))
            .map(|(name, _, _)| name.to_string())
            .collect();
        for name in names {
            let idx = self.store.index_of(&name).expect("listed above");
            let (r, c) = self.store.value(idx).shape();
            *self.store.value_mut(idx) = Matrix::zeros(r, c);
        }
    }

    fn fusion_vars(&self, vars: &[Var], modality: Modality) -> FusionVars {
        let m = modality.tag();
        let v = |suffix: &str| {
            vars[self
                .store
                .index_of(&format!("fusion.{m}.{suffix}"))
                .expect("fusion param registered")]
        };
        FusionVars {
            token_dim: self.dims.student,
            out_dim: self.dims.dim,
            ch_w1: v("ch_w1"),
            ch_w2: v("ch_w2"),
            sp_w: v("sp_w"),
            sp_b: v("sp_b"),
            sa_wq: v("sa_wq"),
            sa_wk: v("sa_wk"),
            sa_wv: v("sa_wv"),
            sa_wo: v("sa_wo"),
            proj: v("proj"),
            gate_w: v("gate_w"),
            gate_b: v("gate_b"),
        }
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))]
    }

    /// Encoder, student tokens, and fusion for one modality. Returns the
    /// unit-normalised fused batch, the per-item student tokens, the student
    /// class-token batch, and the per-item fused views.
    #[allow(clippy::type_complexity)]
    fn encode_branch(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        modality: Modality,
        raw: &Matrix,
    ) -> Result<(Var, Vec<Var>, Var, Vec<fusion::FusedEmbedding>)> {
        let m = modality.tag();
        let b = raw.rows();
        let x = tape.var(raw.clone());
        let w1t = tape.transpose(self.var(vars, &format!("enc.{m}.w1")));
        let h = tape.matmul(x, w1t)?;
        let h = tape.add_row_broadcast(h, self.var(vars, &format!("enc.{m}.b1")))?;
        let h = tape.relu(h);
        let w2t = tape.transpose(self.var(vars, &format!("enc.{m}.w2")));
        let e = tape.matmul(h, w2t)?;
        let e = tape.add_row_broadcast(e, self.var(vars, &format!("enc.{m}.b2")))?;

        let map_t = tape.transpose(self.var(vars, &format!("student.{m}.map")));
        let fvars = self.fusion_vars(vars, modality);
        let mut fused_rows = Vec::with_capacity(b);
        let mut tokens_per_item = Vec::with_capacity(b);
        let mut cls_rows = Vec::with_capacity(b);
        let mut fused_views = Vec::with_capacity(b);
        for i in 0..b {
            let x_i = tape.gather_rows(x, &[i]);
            let flat = tape.matmul(x_i, map_t)?;
            let tokens = tape.reshape(flat, self.dims.tokens, self.dims.student)?;
            let cls = tape.mean_over_rows(tokens);
            let pyramid = fusion::spp_1d(tape, tokens)?;
            let attended = fusion::channel_spatial_attend(tape, pyramid, &fvars)?;
            let u = fusion::refine_and_pool(tape, attended, &fvars)?;
            let v_c = tape.gather_rows(e, &[i]);
            let fe = fusion::conflict_gate_fuse_full(tape, v_c, u, &fvars)?;
            fused_rows.push(fe.fused);
            fused_views.push(fe);
            tokens_per_item.push(tokens);
            cls_rows.push(cls);
        }
        let fused = tape.concat_rows(&fused_rows)?;
        let hat = tape.unit_rows(fused, 1e-12);
        let cls = tape.concat_rows(&cls_rows)?;
        Ok((hat, tokens_per_item, cls, fused_views))
    }

    /// Assembles the correction stack for one modality over the given
    /// embedding node, applying warm-start detachment order by order.
    fn correction_stack(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        modality: Modality,
        emb: Var,
        warm: WarmStartState,
    ) -> Result<TapeCorrections> {
        let m = modality.tag();
        let order = self.dims.order;
        if order < 2 {
            return Ok(TapeCorrections::none(tape, order, emb));
        }
        let mut gates = Vec::new();
        for r in 2..=order {
            let logit = self.var(vars, &format!("gate.{m}.s{r}"));
            let frozen = warm.frozen(r);
            let source = if frozen { tape.detach(logit) } else { logit };
            let lambda = tape.sigmoid(source);
            gates.push(TapeGate {
                order: r,
                lambda,
                frozen,
            });
        }
        let beta = if order >= 2 {
            let wq = self.var(vars, &format!("trans.{m}.pair.wq"));
            let wk = self.var(vars, &format!("trans.{m}.pair.wk"));
            let raw = transitions::beta_scores_tape(tape, wq, wk, emb, self.dims.head)?;
            Some(if warm.frozen(2) { tape.detach(raw) } else { raw })
        } else {
            None
        };
        let triple = (order >= 3).then(|| TripleHeadVars {
            w1: self.var(vars, &format!("trans.{m}.triple.w1")),
            w2: self.var(vars, &format!("trans.{m}.triple.w2")),
            w3: self.var(vars, &format!("trans.{m}.triple.w3")),
            wq: self.var(vars, &format!("trans.{m}.triple.wq")),
            wk: self.var(vars, &format!("trans.{m}.triple.wk")),
        });
        let history = (4..=order)
            .map(|r| HistoryHeadVars {
                order: r,
                wq: self.var(vars, &format!("trans.{m}.hist{r}.wq")),
                wk: self.var(vars, &format!("trans.{m}.hist{r}.wk")),
                wv: self.var(vars, &format!("trans.{m}.hist{r}.wv")),
                wo: self.var(vars, &format!("trans.{m}.hist{r}.wo")),
                pos: self.var(vars, &format!("trans.{m}.hist{r}.pos")),
                wq_score: self.var(vars, &format!("trans.{m}.hist{r}.wq_score")),
                wk_score: self.var(vars, &format!("trans.{m}.hist{r}.wk_score")),
            })
            .collect();
        Ok(TapeCorrections {
            order,
            head_dim: self.dims.head,
            emb,
            beta,
            triple,
            history,
            gates,
        })
    }

    /// Full forward pass. Registers parameters, encodes both branches, and
    /// assembles every loss component on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &BatchData,
        warm: WarmStartState,
    ) -> Result<(ForwardOutput, Vec<Var>)> {
        let vars = self.store.register_all(tape);
        let (v_hat, v_tokens, v_cls, fused_v) =
            self.encode_branch(tape, &vars, Modality::Vision, &batch.image_raw)?;
        let (t_hat, t_tokens, t_cls, fused_t) =
            self.encode_branch(tape, &vars, Modality::Text, &batch.text_raw)?;

        let t_hat_t = tape.transpose(t_hat);
        let sim_vt = tape.matmul(v_hat, t_hat_t)?;
        let sim_tv = tape.transpose(sim_vt);
        let v_hat_t = tape.transpose(v_hat);
        let sim_ii = tape.matmul(v_hat, v_hat_t)?;
        let t_hat_t2 = tape.transpose(t_hat);
        let sim_tt = tape.matmul(t_hat, t_hat_t2)?;

        let clip = objective::clip_infonce(tape, sim_vt, self.var(&vars, "log_tau"))?;

        let corr_v = self.correction_stack(tape, &vars, Modality::Vision, v_hat, warm)?;
        let corr_t = self.correction_stack(tape, &vars, Modality::Text, t_hat, warm)?;
        let rank_cross = ranking::rank_loss_cross(tape, sim_vt, sim_tv, &corr_v, &corr_t, true)?;
        let rank_in = ranking::rank_loss_inmodal(tape, sim_tt, sim_ii, &corr_t, &corr_v, true)?;

        let gram_img = distill::gram_loss_tape(tape, &v_tokens, &batch.teacher.img_grams)?;
        let gram_txt = distill::gram_loss_tape(tape, &t_tokens, &batch.teacher.txt_grams)?;
        let (rel_img, _) =
            distill::relational_loss_tape(tape, v_cls, &batch.teacher.img_cls, &batch.triples)?;
        let (rel_txt, _) =
            distill::relational_loss_tape(tape, t_cls, &batch.teacher.txt_cls, &batch.triples)?;

        let mut gate_logits = Vec::new();
        let mut etas = Vec::new();
        for modality in MODALITIES {
            let m = modality.tag();
            for r in 2..=self.dims.order {
                gate_logits.push((
                    r,
                    self.var(&vars, &format!("gate.{m}.s{r}")),
                    warm.frozen(r),
                ));
            }
        }
        for r in 2..=self.dims.order {
            etas.push((r, objective::eta_for_order(r)));
        }
        let gate_penalty = if self.dims.order >= 2 {
            transitions::gate_l1_penalty_tape(tape, &gate_logits, &etas)?
        } else {
            tape.scalar(0.0)
        };

        Ok((
            ForwardOutput {
                terms: LossTerms {
                    clip,
                    rank_in,
                    rank_cross,
                    gram_img,
                    rel_img,
                    gram_txt,
                    rel_txt,
                    gate_penalty,
                },
                v_hat,
                t_hat,
                sim_vt,
                fused_v,
                fused_t,
            },
            vars,
        ))
    }

    /// Reconstructs the plain transition parameters for one modality from
    /// the store.
    pub fn transition_params(&self, modality: Modality) -> TransitionParams {
        let m = modality.tag();
        let order = self.dims.order;
        let pair = (order >= 2).then(|| PairHead {
            wq: self.store.get(&format!("trans.{m}.pair.wq")).clone(),
            wk: self.store.get(&format!("trans.{m}.pair.wk")).clone(),
        });
        let triple = (order >= 3).then(|| TripleHead {
            w1: self.store.get(&format!("trans.{m}.triple.w1")).clone(),
            w2: self.store.get(&format!("trans.{m}.triple.w2")).clone(),
            w3: self.store.get(&format!("trans.{m}.triple.w3")).clone(),
            wq: self.store.get(&format!("trans.{m}.triple.wq")).clone(),
            wk: self.store.get(&format!("trans.{m}.triple.wk")).clone(),
        });
        let history = (4..=order)
            .map(|r| HistoryHead {
                order: r,
                wq: self.store.get(&format!("trans.{m}.hist{r}.wq")).clone(),
                wk: self.store.get(&format!("trans.{m}.hist{r}.wk")).clone(),
                wv: self.store.get(&format!("trans.{m}.hist{r}.wv")).clone(),
                wo: self.store.get(&format!("trans.{m}.hist{r}.wo")).clone(),
                pos: self.store.get(&format!("trans.{m}.hist{r}.pos")).clone(),
                wq_score: self
                    .store
                    .get(&format!("trans.{m}.hist{r}.wq_score"))
                    .clone(),
                wk_score: self
                    .store
                    .get(&format!("trans.{m}.hist{r}.wk_score"))
                    .clone(),
            })
            .collect();
        TransitionParams {
            modality,
            dim: self.dims.dim,
            head_dim: self.dims.head,
            order,
            pair,
            triple,
            history,
        }
    }

    /// Plain correction stack over fixed embedding values, for evaluation.
    pub fn plain_corrections(
        &self,
        modality: Modality,
        emb: &Matrix,
    ) -> Result<ranking::PlainCorrections> {
        let m = modality.tag();
        let order = self.dims.order;
        if order < 2 {
            return Ok(ranking::PlainCorrections::none(order));
        }
        let params = self.transition_params(modality);
        let lambdas: Vec<f64> = (2..=order)
            .map(|r| {
                crate::numerics::sigmoid(self.store.get(&format!("gate.{m}.s{r}")).item())
            })
            .collect();
        let beta = params
            .pair
            .as_ref()
            .map(|p| transitions::beta_matrix(p, emb, self.dims.head))
            .transpose()?;
        let gamma = params.triple.as_ref().map(|t| ranking::PlainGamma::Params {
            triple: t.clone(),
            emb: emb.clone(),
            head_dim: self.dims.head,
        });
        let history = params
            .history
            .iter()
            .map(|h| ranking::PlainHistory {
                head: h.clone(),
                emb: emb.clone(),
                head_dim: self.dims.head,
            })
            .collect();
        Ok(ranking::PlainCorrections {
            order,
            lambdas,
            beta,
            gamma,
            history,
        })
    }
}

/// Evaluation forward: runs the tape forward and returns the fused embedding
/// values without touching gradients.
pub fn embed_batch(model: &Model, batch: &BatchData) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    // Warm-start state is irrelevant for values; detachment changes nothing.
    let (out, _) = model.forward(&mut tape, batch, WarmStartState::new(usize::MAX >> 1))?;
    Ok((tape.value(out.v_hat).clone(), tape.value(out.t_hat).clone()))
}
