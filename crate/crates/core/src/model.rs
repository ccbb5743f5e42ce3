//! Parameter layout of the full model: the text encoder plus the
//! auxiliary heads and the blocking transformer, which only exist to shape
//! the embedding space during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::ParamStore;
use crate::encoder::{Encoder, EncoderConfig};
use crate::losses::{MlpHead, DEFAULT_DROPOUT};
use crate::pair_reps::BlockContext;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            dropout: DEFAULT_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlcModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// `c_ψ` over Γ (width 4d).
    pub ql_head: MlpHead,
    /// `c_ω` over Δ (width 16d).
    pub qb_head: MlpHead,
    /// `a_φ` over blockings of Γ rows.
    pub block: BlockContext,
}

impl AlcModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let d = cfg.encoder.dim;
        Self {
            cfg,
            encoder: Encoder::new(cfg.encoder),
            ql_head: MlpHead::new("head_ql", 4 * d, 4 * d, cfg.dropout),
            qb_head: MlpHead::new("head_qb", 16 * d, 16 * d, cfg.dropout),
            block: BlockContext::new("block", 4 * d),
        }
    }

    /// Fresh parameters, fully determined by `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut rng, &mut store);
        self.ql_head.init_params(&mut rng, &mut store);
        self.qb_head.init_params(&mut rng, &mut store);
        self.block.init_params(&mut rng, &mut store);
        store
    }

    /// Checks that `store` has exactly this model's tensors and shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<(), String> {
        let reference = self.init_params(0);
        for (name, t) in reference.iter() {
            match store.get(name) {
                None => return Err(format!("missing parameter `{name}`")),
                Some(s) if s.dims() != t.dims() => {
                    return Err(format!(
                        "parameter `{name}` has dims {:?}, expected {:?}",
                        s.dims(),
                        t.dims()
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(format!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }
}
