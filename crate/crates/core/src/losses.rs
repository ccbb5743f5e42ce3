//! Objective terms: triplet base loss, threshold-consistent margin (TCM)
//! regularizer, the two auxiliary pair-classification losses and their
//! weighted combination.
//!
//! Pair-classification targets follow the convention `0` = positive pair,
//! `1` = negative pair.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::kernels::{sigmoid, softplus};
use crate::diffmath::{GradTape, ParamStore, ParamVars, Tensor, Var, LAYER_NORM_EPS};
use crate::mining::{self, Batch, Blocking};
use crate::model::AlcModel;
use crate::pair_reps::pair_features;

pub const TARGET_POSITIVE: f64 = 0.0;
pub const TARGET_NEGATIVE: f64 = 1.0;

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("triplet loss needs at least one negative")]
    EmptyNegatives,
    #[error("blocking for query {query} has {positives} positive pairs, expected exactly 1")]
    BadBlocking { query: usize, positives: usize },
    #[error("invalid TCM margins: need -1 <= m_minus < m_plus <= 1, got m_plus={m_plus}, m_minus={m_minus}")]
    InvalidTcm { m_plus: f64, m_minus: f64 },
    #[error("batch has no query with a usable negative")]
    NoUsableQueries,
}

/// Margins of the threshold-consistent margin regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcmConfig {
    pub m_plus: f64,
    pub m_minus: f64,
}

impl Default for TcmConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.8,
            m_minus: 0.5,
        }
    }
}

impl TcmConfig {
    pub fn new(m_plus: f64, m_minus: f64) -> Result<Self, LossError> {
        let cfg = Self { m_plus, m_minus };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let ok = -1.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(LossError::InvalidTcm {
                m_plus: self.m_plus,
                m_minus: self.m_minus,
            })
        }
    }
}

/// Per-step (or per-epoch averaged) objective values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub tcm: f64,
    pub xe_ql: f64,
    pub xe_qb: f64,
    pub total: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LossBreakdown {
    /// `base + tcm + β1·xe_ql + β2·xe_qb`, accumulated in that order.
    pub fn recomputed_total(&self) -> f64 {
        self.base + self.tcm + self.beta1 * self.xe_ql + self.beta2 * self.xe_qb
    }
}

/// Value and gradient of a scalar loss over a list of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean over negatives of `max(0, margin − s_pos + s_neg)`.
pub fn triplet_base_loss(s_pos: f64, s_negs: &[f64], margin: f64) -> Result<f64, LossError> {
    triplet_with_grad(s_pos, s_negs, margin).map(|(v, _, _)| v)
}

/// Triplet loss with derivatives `(value, ∂/∂s_pos, ∂/∂s_negs)`. A hinge
/// term sitting exactly at zero is treated as inactive.
pub fn triplet_with_grad(
    s_pos: f64,
    s_negs: &[f64],
    margin: f64,
) -> Result<(f64, f64, Vec<f64>), LossError> {
    if s_negs.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    let n = s_negs.len() as f64;
    let mut total = 0.0;
    let mut d_pos = 0.0;
    let mut d_negs = Vec::with_capacity(s_negs.len());
    for &s in s_negs {
        let h = margin - s_pos + s;
        if h > 0.0 {
            total += h;
            d_pos -= 1.0 / n;
            d_negs.push(1.0 / n);
        } else {
            d_negs.push(0.0);
        }
    }
    Ok((total / n, d_pos, d_negs))
}

/// Hard positives are below `m_plus`, hard negatives above `m_minus`
/// (strict inequalities). Each non-empty hard set contributes its mean
/// margin violation; an empty one contributes 0.
pub fn tcm_loss(pos_sims: &[f64], neg_sims: &[f64], cfg: &TcmConfig) -> f64 {
    tcm_with_grad(pos_sims, neg_sims, cfg).0
}

/// TCM value with gradients with respect to `pos_sims` and `neg_sims`.
pub fn tcm_with_grad(
    pos_sims: &[f64],
    neg_sims: &[f64],
    cfg: &TcmConfig,
) -> (f64, Vec<f64>, Vec<f64>) {
    let hard_pos: Vec<usize> = (0..pos_sims.len())
        .filter(|&i| pos_sims[i] < cfg.m_plus)
        .collect();
    let hard_neg: Vec<usize> = (0..neg_sims.len())
        .filter(|&i| neg_sims[i] > cfg.m_minus)
        .collect();
    let mut value = 0.0;
    let mut d_pos = vec![0.0; pos_sims.len()];
    let mut d_neg = vec![0.0; neg_sims.len()];
    if !hard_pos.is_empty() {
        let n = hard_pos.len() as f64;
        value += hard_pos
            .iter()
            .map(|&i| cfg.m_plus - pos_sims[i])
            .sum::<f64>()
            / n;
        for &i in &hard_pos {
            d_pos[i] = -1.0 / n;
        }
    }
    if !hard_neg.is_empty() {
        let n = hard_neg.len() as f64;
        value += hard_neg
            .iter()
            .map(|&i| neg_sims[i] - cfg.m_minus)
            .sum::<f64>()
            / n;
        for &i in &hard_neg {
            d_neg[i] = 1.0 / n;
        }
    }
    (value, d_pos, d_neg)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
/// computed through softplus so saturated logits stay finite.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> ScoredLoss {
    assert_eq!(logits.len(), targets.len(), "logits/targets length");
    assert!(!logits.is_empty(), "bce over no pairs");
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        total += y * softplus(-z) + (1.0 - y) * softplus(z);
        grad.push((sigmoid(z) - y) / n);
    }
    ScoredLoss {
        value: total / n,
        grad,
    }
}

/// Binary classifier head: linear → layer-norm → dropout → GeLU → linear,
/// one logit per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub dropout_rate: f64,
}

impl MlpHead {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden: usize, dropout_rate: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&dropout_rate),
            "dropout rate must be in [0, 1)"
        );
        Self {
            prefix: prefix.into(),
            in_dim,
            hidden,
            dropout_rate,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, store: &mut ParamStore) {
        let n1 = Normal::new(0.0, 1.0 / (self.in_dim as f64).sqrt()).expect("valid std");
        let w1 = (0..self.in_dim * self.hidden)
            .map(|_| n1.sample(rng))
            .collect();
        let n2 = Normal::new(0.0, 1.0 / (self.hidden as f64).sqrt()).expect("valid std");
        let w2 = (0..self.hidden).map(|_| n2.sample(rng)).collect();
        store.insert(
            self.name("fc1.weight"),
            Tensor::matrix(self.in_dim, self.hidden, w1),
        );
        store.insert(self.name("fc1.bias"), Tensor::zeros(&[self.hidden]));
        store.insert(self.name("ln.gain"), Tensor::filled(&[self.hidden], 1.0));
        store.insert(self.name("ln.bias"), Tensor::zeros(&[self.hidden]));
        store.insert(self.name("fc2.weight"), Tensor::matrix(self.hidden, 1, w2));
        store.insert(self.name("fc2.bias"), Tensor::zeros(&[1]));
    }

    /// Logits (`n × 1`) for the rows of `x`. Dropout is applied only when
    /// an RNG is supplied.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut GradTape,
        vars: &ParamVars,
        x: Var,
        dropout: Option<&mut R>,
    ) -> Var {
        let h = tape.matmul(x, vars.get(&self.name("fc1.weight")));
        let h = tape.add_row(h, vars.get(&self.name("fc1.bias")));
        let h = tape.layer_norm(
            h,
            vars.get(&self.name("ln.gain")),
            vars.get(&self.name("ln.bias")),
            LAYER_NORM_EPS,
        );
        let h = match dropout {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout_rate);
                let n = tape.value(h).len();
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < self.dropout_rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                tape.mask(h, mask)
            }
            _ => h,
        };
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.get(&self.name("fc2.weight")));
        tape.add_row(h, vars.get(&self.name("fc2.bias")))
    }
}

fn check_blockings(blockings: &[Blocking]) -> Result<(), LossError> {
    for b in blockings {
        let positives = b.targets.iter().filter(|&&t| t == TARGET_POSITIVE).count();
        if positives != 1 {
            return Err(LossError::BadBlocking {
                query: b.query,
                positives,
            });
        }
    }
    Ok(())
}

fn bce_node(tape: &mut GradTape, logits: Var, targets: &[f64]) -> Var {
    let loss = bce_with_logits(tape.value(logits).values(), targets);
    tape.custom_scalar(logits, loss.value, loss.grad)
}

/// Pair-level auxiliary loss: BCE of `c_ψ(Γ)` over every pair of every
/// blocking. `gamma` holds the Γ rows of all blockings back to back.
pub fn aux_loss_ql<R: Rng>(
    tape: &mut GradTape,
    vars: &ParamVars,
    head: &MlpHead,
    gamma: Var,
    blockings: &[Blocking],
    dropout: Option<&mut R>,
) -> Result<Var, LossError> {
    check_blockings(blockings)?;
    let targets: Vec<f64> = blockings
        .iter()
        .flat_map(|b| b.targets.iter().copied())
        .collect();
    assert_eq!(
        targets.len(),
        tape.value(gamma).rows(),
        "Γ rows vs blocking pairs"
    );
    let logits = head.forward(tape, vars, gamma, dropout);
    Ok(bce_node(tape, logits, &targets))
}

/// Blocking-aware auxiliary loss: each blocking's Γ rows are contextualized
/// by the transformer block into Λ, combined into Δ and scored by `c_ω`.
/// Blockings with fewer than two pairs have nothing to attend to and are
/// left out.
pub fn aux_loss_qb<R: Rng>(
    tape: &mut GradTape,
    vars: &ParamVars,
    model: &AlcModel,
    gamma: Var,
    blockings: &[Blocking],
    dropout: Option<&mut R>,
) -> Result<Option<Var>, LossError> {
    check_blockings(blockings)?;
    let mut deltas = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for b in blockings {
        let k = b.labels.len();
        if k >= 2 {
            let rows: Vec<usize> = (offset..offset + k).collect();
            let g = tape.gather_rows(gamma, &rows);
            let lambda = model.block.forward(tape, vars, g);
            deltas.push(pair_features(tape, g, lambda));
            targets.extend_from_slice(&b.targets);
        }
        offset += k;
    }
    if deltas.is_empty() {
        return Ok(None);
    }
    let delta = tape.concat_rows(&deltas);
    let logits = model.qb_head.forward(tape, vars, delta, dropout);
    Ok(Some(bce_node(tape, logits, &targets)))
}

/// Weights and switches of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub tcm: Option<TcmConfig>,
    pub triplet_margin: f64,
    pub blocking_size: usize,
    /// Stop auxiliary-loss gradients at the embeddings.
    pub detach_aux: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 0.5,
            tcm: Some(TcmConfig::default()),
            triplet_margin: DEFAULT_TRIPLET_MARGIN,
            blocking_size: 5,
            detach_aux: false,
        }
    }
}

/// What a forward pass of the objective produced besides the loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    pub blockings: Vec<Blocking>,
    /// Blockings that had fewer than `K − 1` negatives available.
    pub shrunk_blockings: usize,
    /// Queries left out of the base loss for lack of negatives.
    pub skipped_queries: usize,
}

/// Featurized texts of the whole dataset, indexed like the dataset.
pub struct FeatureBank<'a> {
    pub queries: &'a [crate::encoder::Features],
    pub labels: &'a [crate::encoder::Features],
}

/// Builds the full objective for one batch on `tape`:
/// `base (+ tcm) + β1·xe_ql + β2·xe_qb`.
///
/// Terms that are switched off (zero weight, TCM disabled) are not
/// evaluated and report exactly 0.
pub fn total_loss<R: Rng>(
    tape: &mut GradTape,
    vars: &ParamVars,
    model: &AlcModel,
    batch: &Batch,
    features: &FeatureBank<'_>,
    cfg: &ObjectiveConfig,
    mut dropout: Option<&mut R>,
) -> Result<(Var, LossBreakdown, StepInfo), LossError> {
    let labels = batch.label_set();
    let column = |label: usize| labels.binary_search(&label).expect("label in batch set");

    let qf: Vec<_> = batch
        .query_ids
        .iter()
        .map(|&q| &features.queries[q])
        .collect();
    let lf: Vec<_> = labels.iter().map(|&l| &features.labels[l]).collect();
    let hq = model.encoder.forward(tape, vars, &qf);
    let hl = model.encoder.forward(tape, vars, &lf);
    let sims = tape.matmul_bt(hq, hl);
    let width = labels.len();
    let sim_vals = tape.value(sims).values().to_vec();
    let sim_at = |slot: usize, label: usize| sim_vals[slot * width + column(label)];

    let mut info = StepInfo::default();

    // base triplet loss, averaged over queries that have negatives
    let mut base_grad = vec![0.0; sim_vals.len()];
    let mut base_sum = 0.0;
    let mut used = 0usize;
    let mut hinge_pattern = 0u64;
    for (slot, negs) in batch.neg_pools.iter().enumerate() {
        if negs.is_empty() {
            info.skipped_queries += 1;
            continue;
        }
        let pos = batch.pos_label_ids[slot];
        let s_negs: Vec<f64> = negs.iter().map(|&l| sim_at(slot, l)).collect();
        let (v, d_pos, d_negs) = triplet_with_grad(sim_at(slot, pos), &s_negs, cfg.triplet_margin)?;
        base_sum += v;
        used += 1;
        base_grad[slot * width + column(pos)] += d_pos;
        for (&l, d) in negs.iter().zip(d_negs) {
            base_grad[slot * width + column(l)] += d;
            hinge_pattern = hinge_pattern.rotate_left(1) ^ u64::from(d != 0.0);
        }
    }
    if used == 0 {
        return Err(LossError::NoUsableQueries);
    }
    tape.record_branch(hinge_pattern);
    let scale = 1.0 / used as f64;
    base_grad.iter_mut().for_each(|g| *g *= scale);
    let base = tape.custom_scalar(sims, base_sum * scale, base_grad);

    let mut breakdown = LossBreakdown {
        base: tape.value(base).item(),
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..Default::default()
    };
    let mut terms = vec![(base, 1.0)];

    if let Some(tcm_cfg) = &cfg.tcm {
        let mut pos_cells = Vec::new();
        let mut neg_cells = Vec::new();
        for (slot, negs) in batch.neg_pools.iter().enumerate() {
            pos_cells.push(slot * width + column(batch.pos_label_ids[slot]));
            neg_cells.extend(negs.iter().map(|&l| slot * width + column(l)));
        }
        let pos_sims: Vec<f64> = pos_cells.iter().map(|&c| sim_vals[c]).collect();
        let neg_sims: Vec<f64> = neg_cells.iter().map(|&c| sim_vals[c]).collect();
        let (value, d_pos, d_neg) = tcm_with_grad(&pos_sims, &neg_sims, tcm_cfg);
        let mut grad = vec![0.0; sim_vals.len()];
        let mut pattern = 0u64;
        for (&c, d) in pos_cells
            .iter()
            .zip(&d_pos)
            .chain(neg_cells.iter().zip(&d_neg))
        {
            grad[c] += d;
            pattern = pattern.rotate_left(1) ^ u64::from(*d != 0.0);
        }
        tape.record_branch(pattern);
        let tcm = tape.custom_scalar(sims, value, grad);
        breakdown.tcm = value;
        terms.push((tcm, 1.0));
    }

    if cfg.beta1 != 0.0 || cfg.beta2 != 0.0 {
        let set = mining::build_blockings(batch, &batch.neg_pools, sim_at, cfg.blocking_size);
        info.shrunk_blockings = set.shrunk;
        let blockings = set.blockings;
        for b in &blockings {
            for &l in &b.labels {
                tape.record_branch(((b.query as u64) << 32) ^ l as u64);
            }
        }

        let (eq, el) = if cfg.detach_aux {
            (tape.detach(hq), tape.detach(hl))
        } else {
            (hq, hl)
        };
        let mut q_rows = Vec::new();
        let mut l_rows = Vec::new();
        for (slot, b) in blockings.iter().enumerate() {
            debug_assert_eq!(batch.query_ids[slot], b.query);
            for &l in &b.labels {
                q_rows.push(slot);
                l_rows.push(column(l));
            }
        }
        let gq = tape.gather_rows(eq, &q_rows);
        let gl = tape.gather_rows(el, &l_rows);
        let gamma = pair_features(tape, gq, gl);

        if cfg.beta1 != 0.0 {
            let xe = aux_loss_ql(
                tape,
                vars,
                &model.ql_head,
                gamma,
                &blockings,
                dropout.as_deref_mut(),
            )?;
            breakdown.xe_ql = tape.value(xe).item();
            terms.push((xe, cfg.beta1));
        }
        if cfg.beta2 != 0.0 {
            if let Some(xe) =
                aux_loss_qb(tape, vars, model, gamma, &blockings, dropout.as_deref_mut())?
            {
                breakdown.xe_qb = tape.value(xe).item();
                terms.push((xe, cfg.beta2));
            }
        }
        info.blockings = blockings;
    }

    let total = tape.weighted_sum(&terms);
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_base_loss(0.9, &[0.2], 0.3).unwrap(), 0.0);
        assert!((triplet_base_loss(0.5, &[0.5], 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((triplet_base_loss(0.4, &[0.1, 0.6], 0.3).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(
            triplet_base_loss(0.4, &[], 0.3),
            Err(LossError::EmptyNegatives)
        );
    }

    #[test]
    fn tcm_examples() {
        let cfg = TcmConfig::default();
        assert_eq!(tcm_loss(&[0.9], &[0.3], &cfg), 0.0);
        assert!((tcm_loss(&[0.6], &[0.7], &cfg) - 0.4).abs() < 1e-15);
        assert!((tcm_loss(&[0.6, 0.9], &[0.55, 0.45], &cfg) - 0.25).abs() < 1e-15);
        assert_eq!(tcm_loss(&[], &[], &cfg), 0.0);
    }

    #[test]
    fn tcm_margin_validation() {
        assert!(TcmConfig::new(0.8, 0.5).is_ok());
        assert!(TcmConfig::new(0.5, 0.5).is_err());
        assert!(TcmConfig::new(1.2, 0.5).is_err());
        assert!(TcmConfig::new(0.8, -1.5).is_err());
    }

    #[test]
    fn bce_examples() {
        let l = bce_with_logits(&[0.0, 0.0, 0.0], &[0.0, 1.0, 1.0]);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_with_logits(&[-40.0, 40.0], &[TARGET_POSITIVE, TARGET_NEGATIVE]);
        assert!(l.value < 1e-6 && l.value > 0.0);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let l = bce_with_logits(&[0.3, -1.2], &[1.0, 0.0]);
        assert!((l.grad[0] - (sigmoid(0.3) - 1.0) / 2.0).abs() < 1e-15);
        assert!((l.grad[1] - sigmoid(-1.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn bad_blocking_is_rejected() {
        let b = Blocking {
            query: 3,
            labels: vec![1, 2],
            targets: vec![TARGET_NEGATIVE, TARGET_NEGATIVE],
        };
        assert_eq!(
            check_blockings(&[b]),
            Err(LossError::BadBlocking {
                query: 3,
                positives: 0
            })
        );
    }
}
