//! Hashed character-trigram bag encoder.
//!
//! Text is lowercased, truncated, padded with `#` and cut into character
//! trigrams. Each trigram is hashed (FNV-1a, 64 bit) into one of `H`
//! buckets. The embedding is the count-weighted mean of the active bucket
//! rows, projected to `d` dimensions and L2-normalized, so dot products
//! between embeddings are cosine similarities.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::{GradTape, ParamStore, ParamVars, Tensor, Var};

pub const MAX_TEXT_CHARS: usize = 128;
pub const PAD: char = '#';
pub const MIN_BUCKETS: usize = 1024;

pub const BUCKET_TABLE: &str = "encoder.bucket_table";
pub const PROJECTION: &str = "encoder.projection";

/// A query or label text with its collection-unique id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: u64,
    pub text: String,
}

/// Sparse trigram counts, sorted by bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    counts: Vec<(usize, u32)>,
}

impl Features {
    pub fn counts(&self) -> &[(usize, u32)] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().map(|(_, c)| c).sum()
    }

    /// Mean-pool weights, one per active bucket.
    pub fn pool_weights(&self) -> Vec<(usize, f64)> {
        let total = f64::from(self.total());
        self.counts
            .iter()
            .map(|&(b, c)| (b, f64::from(c) / total))
            .collect()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Character trigrams of the normalized, padded text.
pub fn trigrams(text: &str) -> Vec<String> {
    let lowered: String = text
        .chars()
        .take(MAX_TEXT_CHARS)
        .collect::<String>()
        .to_lowercase();
    if lowered.is_empty() {
        return Vec::new();
    }
    let padded: Vec<char> = std::iter::once(PAD)
        .chain(lowered.chars())
        .chain(std::iter::once(PAD))
        .collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn featurize(text: &str, buckets: usize) -> Features {
    assert!(buckets > 0);
    let grams = trigrams(text);
    if grams.is_empty() {
        return Features {
            counts: vec![(0, 1)],
        };
    }
    let mut ids: Vec<usize> = grams
        .iter()
        .map(|g| (fnv1a64(g.as_bytes()) % buckets as u64) as usize)
        .collect();
    ids.sort_unstable();
    let mut counts: Vec<(usize, u32)> = Vec::new();
    for b in ids {
        match counts.last_mut() {
            Some((last, c)) if *last == b => *c += 1,
            _ => counts.push((b, 1)),
        }
    }
    Features { counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hash buckets `H`.
    pub buckets: usize,
    /// Width of a bucket row.
    pub d_in: usize,
    /// Output embedding dimension `d`.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            buckets: 4096,
            d_in: 64,
            dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.buckets < MIN_BUCKETS {
            return Err(format!(
                "buckets must be >= {MIN_BUCKETS}, got {}",
                self.buckets
            ));
        }
        if self.dim < 2 {
            return Err(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.d_in < 1 {
            return Err("d_in must be positive".into());
        }
        Ok(())
    }
}

/// The text encoder `f_θ`. Parameters live in a [`ParamStore`] under
/// [`BUCKET_TABLE`] (`H × d_in`) and [`PROJECTION`] (`d_in × d`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R, store: &mut ParamStore) {
        let EncoderConfig { buckets, d_in, dim } = self.cfg;
        let uniform = Uniform::new(-0.05, 0.05).expect("valid range");
        let table: Vec<f64> = (0..buckets * d_in).map(|_| uniform.sample(rng)).collect();
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let proj: Vec<f64> = (0..d_in * dim).map(|_| normal.sample(rng)).collect();
        store.insert(BUCKET_TABLE, Tensor::matrix(buckets, d_in, table));
        store.insert(PROJECTION, Tensor::matrix(d_in, dim, proj));
    }

    pub fn featurize(&self, text: &str) -> Features {
        featurize(text, self.cfg.buckets)
    }

    /// Embeds a batch of featurized texts as rows of an `n × d` matrix.
    pub fn forward(&self, tape: &mut GradTape, vars: &ParamVars, feats: &[&Features]) -> Var {
        let bags = feats.iter().map(|f| f.pool_weights()).collect();
        let pooled = tape.bag_mean(vars.get(BUCKET_TABLE), bags);
        let projected = tape.matmul(pooled, vars.get(PROJECTION));
        tape.l2_normalize(projected)
    }

    /// Inference-only embedding of many texts.
    pub fn embed_all(&self, params: &ParamStore, feats: &[&Features]) -> Vec<Vec<f64>> {
        if feats.is_empty() {
            return Vec::new();
        }
        let table = params.get(BUCKET_TABLE).expect("encoder params present");
        let proj = params.get(PROJECTION).expect("encoder params present");
        let mut tape = GradTape::new();
        let t = tape.constant(table.clone());
        let p = tape.constant(proj.clone());
        let bags = feats.iter().map(|f| f.pool_weights()).collect();
        let pooled = tape.bag_mean(t, bags);
        let projected = tape.matmul(pooled, p);
        let out = tape.l2_normalize(projected);
        let v = tape.value(out);
        (0..v.rows()).map(|i| v.row(i).to_vec()).collect()
    }

    pub fn encode(&self, params: &ParamStore, text: &str) -> Tensor {
        let f = self.featurize(text);
        Tensor::vector(self.embed_all(params, &[&f]).remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn trigrams_of_short_text() {
        assert_eq!(trigrams("ab"), vec!["#ab", "ab#"]);
        assert_eq!(trigrams("x"), vec!["#x#"]);
        assert!(trigrams("").is_empty());
    }

    #[test]
    fn featurize_examples() {
        let f = featurize("ab", 4096);
        assert_eq!(f.total(), 2);
        let expected_a = (fnv1a64(b"#ab") % 4096) as usize;
        let expected_b = (fnv1a64(b"ab#") % 4096) as usize;
        assert!(f.counts().iter().any(|&(b, _)| b == expected_a));
        assert!(f.counts().iter().any(|&(b, _)| b == expected_b));

        assert_eq!(featurize("", 4096).counts(), &[(0, 1)]);
        assert_eq!(featurize("AB", 4096), featurize("ab", 4096));
    }

    #[test]
    fn featurize_truncates() {
        let long: String = "abcdefghij".repeat(20);
        let f = featurize(&long, 4096);
        assert_eq!(f.total() as usize, MAX_TEXT_CHARS);
        assert_eq!(f, featurize(&long[..MAX_TEXT_CHARS], 4096));
    }

    fn small_encoder() -> (Encoder, ParamStore) {
        let enc = Encoder::new(EncoderConfig {
            buckets: 1024,
            d_in: 6,
            dim: 4,
        });
        let mut store = ParamStore::new();
        enc.init_params(&mut ChaCha8Rng::seed_from_u64(3), &mut store);
        (enc, store)
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let (enc, store) = small_encoder();
        for text in ["oreo choc sandwich 17oz", "", "Z"] {
            let e = enc.encode(&store, text);
            let norm: f64 = e.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert_eq!(e, enc.encode(&store, text));
        }
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let (enc, store) = small_encoder();
        let f1 = enc.featurize("chips ahoy orig 13oz");
        let f2 = enc.featurize("lotus bisc sndwch");
        let target = Tensor::matrix(2, 4, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.7]);
        let prog = |tape: &mut GradTape, vars: &ParamVars| {
            let h = enc.forward(tape, vars, &[&f1, &f2]);
            let t = tape.constant(target.clone());
            let prod = tape.mul(h, t);
            tape.sum(prod)
        };
        let r = grad_check(&store, prog, 11, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
