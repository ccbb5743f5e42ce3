//! Query-label pair representations.
//!
//! `Γ(h_q, h_l) = [h_q, h_l, |h_q − h_l|, h_q ⊙ h_l]` (width 4d). A blocking
//! of K such rows is contextualized by one pre-norm transformer encoder
//! block into `Λ`, and `Δ = [Γ, Λ, |Γ − Λ|, Γ ⊙ Λ]` (width 16d) compares each
//! pair before and after contextualization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::{GradTape, ParamStore, ParamVars, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PairRepError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("blocking needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

/// `[a, b, |a − b|, a ⊙ b]` on rows of two equally shaped matrices.
pub fn pair_features(tape: &mut GradTape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    let absdiff = tape.abs(diff);
    let prod = tape.mul(a, b);
    tape.concat_cols(&[a, b, absdiff, prod])
}

fn check_same_len(a: &Tensor, b: &Tensor) -> Result<(), PairRepError> {
    if a.len() != b.len() {
        return Err(PairRepError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn pair_features_of(a: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = GradTape::new();
    let va = tape.constant(Tensor::vector(a.values().to_vec()));
    let vb = tape.constant(Tensor::vector(b.values().to_vec()));
    let out = pair_features(&mut tape, va, vb);
    tape.value(out).clone()
}

/// Γ for a single pair of embeddings.
pub fn build_gamma(h_q: &Tensor, h_l: &Tensor) -> Result<Tensor, PairRepError> {
    check_same_len(h_q, h_l)?;
    Ok(pair_features_of(h_q, h_l))
}

/// Δ from a Γ row and its contextualized Λ row.
pub fn build_delta(gamma: &Tensor, lambda: &Tensor) -> Result<Tensor, PairRepError> {
    check_same_len(gamma, lambda)?;
    Ok(pair_features_of(gamma, lambda))
}

/// One pre-norm transformer encoder block `a_φ` over the K pairs of a
/// blocking: single-head scaled dot-product self-attention and a GeLU
/// feed-forward layer (width ×2), each wrapped in a residual connection.
/// No positional encoding, so the block is permutation-equivariant.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockContext {
    prefix: String,
    width: usize,
}

impl BlockContext {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, store: &mut ParamStore) {
        let w = self.width;
        let mut dense = |name: String, rows: usize, cols: usize, rng: &mut R| {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
            let vals = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            store.insert(name, Tensor::matrix(rows, cols, vals));
        };
        for part in ["attn.query", "attn.key", "attn.value", "attn.output"] {
            dense(self.name(part), w, w, rng);
        }
        dense(self.name("ff1.weight"), w, 2 * w, rng);
        dense(self.name("ff2.weight"), 2 * w, w, rng);
        store.insert(self.name("ff1.bias"), Tensor::zeros(&[2 * w]));
        store.insert(self.name("ff2.bias"), Tensor::zeros(&[w]));
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.gain")), Tensor::filled(&[w], 1.0));
            store.insert(self.name(&format!("{ln}.bias")), Tensor::zeros(&[w]));
        }
    }

    /// Attention weights of the block for input rows `x` (`K × width`).
    pub fn attention(&self, tape: &mut GradTape, vars: &ParamVars, x: Var) -> (Var, Var) {
        let n1 = tape.layer_norm(
            x,
            vars.get(&self.name("ln1.gain")),
            vars.get(&self.name("ln1.bias")),
            LAYER_NORM_EPS,
        );
        let q = tape.matmul(n1, vars.get(&self.name("attn.query")));
        let k = tape.matmul(n1, vars.get(&self.name("attn.key")));
        let v = tape.matmul(n1, vars.get(&self.name("attn.value")));
        let scores = tape.matmul_bt(q, k);
        let scaled = tape.scale(scores, 1.0 / (self.width as f64).sqrt());
        (tape.softmax(scaled), v)
    }

    /// Contextualizes the rows of `x` (`K × width`) into `Λ` of the same shape.
    pub fn forward(&self, tape: &mut GradTape, vars: &ParamVars, x: Var) -> Var {
        let (weights, v) = self.attention(tape, vars, x);
        let ctx = tape.attend(weights, v);
        let attn_out = tape.matmul(ctx, vars.get(&self.name("attn.output")));
        let x1 = tape.add(x, attn_out);

        let n2 = tape.layer_norm(
            x1,
            vars.get(&self.name("ln2.gain")),
            vars.get(&self.name("ln2.bias")),
            LAYER_NORM_EPS,
        );
        let h = tape.matmul(n2, vars.get(&self.name("ff1.weight")));
        let h = tape.add_row(h, vars.get(&self.name("ff1.bias")));
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.get(&self.name("ff2.weight")));
        let h = tape.add_row(h, vars.get(&self.name("ff2.bias")));
        tape.add(x1, h)
    }

    /// Inference-only contextualization of a blocking's Γ rows.
    pub fn contextualize(
        &self,
        params: &ParamStore,
        gammas: &[Tensor],
    ) -> Result<Vec<Tensor>, PairRepError> {
        if gammas.len() < 2 {
            return Err(PairRepError::TooFewPairs(gammas.len()));
        }
        let mut values = Vec::with_capacity(gammas.len() * self.width);
        for g in gammas {
            if g.len() != self.width {
                return Err(PairRepError::DimensionMismatch(g.len(), self.width));
            }
            values.extend_from_slice(g.values());
        }
        let mut tape = GradTape::new();
        let vars = tape.register_params(params);
        let x = tape.constant(Tensor::matrix(gammas.len(), self.width, values));
        let out = self.forward(&mut tape, &vars, x);
        let t = tape.value(out);
        Ok((0..t.rows())
            .map(|i| Tensor::vector(t.row(i).to_vec()))
            .collect())
    }
}
