//! Training loop, Adam updates and the binary checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io;
use crate::diffmath::{GradTape, ParamStore, Tensor};
use crate::encoder::{EncoderConfig, Features};
use crate::losses::{
    total_loss, FeatureBank, LossBreakdown, LossError, ObjectiveConfig, TcmConfig, TARGET_POSITIVE,
};
use crate::mining::{self, Batch, Dataset, MiningError};
use crate::model::{AlcModel, ModelConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("blocking of query {query} at step {step} has {positives} positives")]
    BlockingInvariant {
        step: usize,
        query: usize,
        positives: usize,
    },
    #[error("shape mismatch for `{name}`")]
    ShapeMismatch { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Batches of semantically related queries; negatives come from the batch.
    Cluster,
    /// Random batches plus one negative per query from its hardest-negative pool.
    Ance,
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Cluster => "cluster",
            Sampler::Ance => "ance",
        })
    }
}

impl FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cluster" => Ok(Sampler::Cluster),
            "ance" => Ok(Sampler::Ance),
            other => Err(format!(
                "unknown sampler `{other}` (expected cluster or ance)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Blocking size `K`.
    pub blocking_size: usize,
    pub tcm_enabled: bool,
    pub m_plus: f64,
    pub m_minus: f64,
    pub sampler: Sampler,
    pub pool_size: usize,
    pub triplet_margin: f64,
    pub seed: u64,
    /// Epochs between cluster / pool refreshes.
    pub refresh_cadence: usize,
    pub detach_aux: bool,
    pub dim: usize,
    pub d_in: usize,
    pub buckets: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tcm = TcmConfig::default();
        let enc = EncoderConfig::default();
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 1.0,
            beta2: 0.5,
            blocking_size: 5,
            tcm_enabled: true,
            m_plus: tcm.m_plus,
            m_minus: tcm.m_minus,
            sampler: Sampler::Cluster,
            pool_size: 20,
            triplet_margin: crate::losses::DEFAULT_TRIPLET_MARGIN,
            seed: 0,
            refresh_cadence: 5,
            detach_aux: false,
            dim: enc.dim,
            d_in: enc.d_in,
            buckets: enc.buckets,
            dropout: crate::losses::DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.blocking_size < 2 {
            return bad(format!(
                "blocking size K must be at least 2, got {}",
                self.blocking_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.triplet_margin > 0.0 && self.triplet_margin.is_finite()) {
            return bad(format!(
                "triplet_margin must be positive, got {}",
                self.triplet_margin
            ));
        }
        if self.tcm_enabled {
            TcmConfig::new(self.m_plus, self.m_minus)
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        if self.pool_size < 1 {
            return bad("pool_size must be at least 1".into());
        }
        if self.refresh_cadence < 1 {
            return bad("refresh_cadence must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.encoder().validate().map_err(TrainError::Config)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            buckets: self.buckets,
            d_in: self.d_in,
            dim: self.dim,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            dropout: self.dropout,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            tcm: self.tcm_enabled.then_some(TcmConfig {
                m_plus: self.m_plus,
                m_minus: self.m_minus,
            }),
            triplet_margin: self.triplet_margin,
            blocking_size: self.blocking_size,
            detach_aux: self.detach_aux,
        }
    }

    /// The config as named numbers, the form stored in checkpoints.
    fn to_entries(self) -> Vec<(&'static str, f64)> {
        vec![
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("blocking_size", self.blocking_size as f64),
            ("tcm_enabled", f64::from(u8::from(self.tcm_enabled))),
            ("m_plus", self.m_plus),
            ("m_minus", self.m_minus),
            (
                "sampler",
                if self.sampler == Sampler::Ance {
                    1.0
                } else {
                    0.0
                },
            ),
            ("pool_size", self.pool_size as f64),
            ("triplet_margin", self.triplet_margin),
            ("seed_hi", (self.seed >> 32) as f64),
            ("seed_lo", (self.seed & 0xffff_ffff) as f64),
            ("refresh_cadence", self.refresh_cadence as f64),
            ("detach_aux", f64::from(u8::from(self.detach_aux))),
            ("dim", self.dim as f64),
            ("d_in", self.d_in as f64),
            ("buckets", self.buckets as f64),
            ("dropout", self.dropout),
        ]
    }

    fn from_entries(entries: &BTreeMap<String, f64>) -> Result<Self, CheckpointError> {
        let get = |k: &str| {
            entries
                .get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Missing(format!("{CONFIG_PREFIX}{k}")))
        };
        let count = |k: &str| -> Result<usize, CheckpointError> {
            let v = get(k)?;
            if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                Ok(v as usize)
            } else {
                Err(CheckpointError::Malformed(format!(
                    "config `{k}` is not a count: {v}"
                )))
            }
        };
        let cfg = Self {
            epochs: count("epochs")?,
            batch_size: count("batch_size")?,
            learning_rate: get("learning_rate")?,
            beta1: get("beta1")?,
            beta2: get("beta2")?,
            blocking_size: count("blocking_size")?,
            tcm_enabled: count("tcm_enabled")? != 0,
            m_plus: get("m_plus")?,
            m_minus: get("m_minus")?,
            sampler: if count("sampler")? == 1 {
                Sampler::Ance
            } else {
                Sampler::Cluster
            },
            pool_size: count("pool_size")?,
            triplet_margin: get("triplet_margin")?,
            seed: ((count("seed_hi")? as u64) << 32) | count("seed_lo")? as u64,
            refresh_cadence: count("refresh_cadence")?,
            detach_aux: count("detach_aux")? != 0,
            dim: count("dim")?,
            d_in: count("d_in")?,
            buckets: count("buckets")?,
            dropout: get("dropout")?,
        };
        Ok(cfg)
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: ParamStore = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Parameters without a gradient entry are
/// left alone, as are their moments.
pub fn update_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let shape_ok = params.get(name).is_some_and(|p| p.dims() == g.dims())
            && state.m.get(name).is_some_and(|m| m.dims() == g.dims())
            && state.v.get(name).is_some_and(|v| v.dims() == g.dims());
        if !shape_ok {
            return Err(TrainError::ShapeMismatch { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked").values_mut();
        let m = state.m.get_mut(name).expect("checked").values_mut();
        let v = state.v.get_mut(name).expect("checked").values_mut();
        for (((p, m), v), &g) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(g.values())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Mean loss components over one epoch's steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub base: f64,
    pub tcm: f64,
    pub xe_ql: f64,
    pub xe_qb: f64,
    pub total: f64,
}

impl EpochLog {
    pub fn recomputed_total(&self, beta1: f64, beta2: f64) -> f64 {
        self.base + self.tcm + beta1 * self.xe_ql + beta2 * self.xe_qb
    }
}

/// Counters collected over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Batches skipped because no query had a negative.
    pub skipped_steps: usize,
    pub blockings: usize,
    pub shrunk_blockings: usize,
    pub skipped_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
}

/// Writes the epoch log as JSON lines.
pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("plain struct serializes") + "\n")
        .collect()
}

fn check_dataset(dataset: &Dataset) -> Result<(), TrainError> {
    let bad = |msg: String| Err(TrainError::Dataset(msg));
    if dataset.positives.len() != dataset.queries.len() {
        return bad("one positive set per query required".into());
    }
    for (q, set) in dataset.positives.iter().enumerate() {
        if set.is_empty() {
            return bad(format!("query {} has no positives", dataset.queries[q].id));
        }
        if set.iter().any(|&l| l >= dataset.labels.len()) || set.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "query {} has a malformed positive set",
                dataset.queries[q].id
            ));
        }
    }
    Ok(())
}

struct Refresh {
    batches: Vec<Vec<usize>>,
    pools: Vec<Vec<usize>>,
}

fn refresh<R: Rng>(
    model: &AlcModel,
    params: &ParamStore,
    dataset: &Dataset,
    bank: &FeatureBank<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Refresh, TrainError> {
    let q: Vec<&Features> = bank.queries.iter().collect();
    let q_embs = model.encoder.embed_all(params, &q);
    match cfg.sampler {
        Sampler::Cluster => Ok(Refresh {
            batches: mining::cluster_batches(&q_embs, cfg.batch_size, rng.random())?,
            pools: Vec::new(),
        }),
        Sampler::Ance => {
            let l: Vec<&Features> = bank.labels.iter().collect();
            let l_embs = model.encoder.embed_all(params, &l);
            Ok(Refresh {
                batches: Vec::new(),
                pools: mining::ance_pool(&q_embs, &l_embs, &dataset.positives, cfg.pool_size),
            })
        }
    }
}

/// Trains a fresh model on `dataset`. Every random decision derives from
/// `cfg.seed`, so equal inputs give bit-identical checkpoints.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_dataset(dataset)?;
    if dataset.queries.len() < cfg.batch_size {
        return Err(MiningError::TooFewQueries {
            queries: dataset.queries.len(),
            batch_size: cfg.batch_size,
        }
        .into());
    }
    let model = AlcModel::new(cfg.model());
    let objective = cfg.objective();
    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::new(&params);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let query_features: Vec<Features> = dataset
        .queries
        .iter()
        .map(|q| model.encoder.featurize(&q.text))
        .collect();
    let label_features: Vec<Features> = dataset
        .labels
        .iter()
        .map(|l| model.encoder.featurize(&l.text))
        .collect();
    let bank = FeatureBank {
        queries: &query_features,
        labels: &label_features,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut stats = TrainStats::default();
    let mut current: Option<Refresh> = None;
    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_cadence == 0 {
            current = Some(refresh(&model, &params, dataset, &bank, cfg, &mut rng)?);
            log::debug!("epoch {epoch}: refreshed {} sampler state", cfg.sampler);
        }
        let state = current.as_ref().expect("refreshed at epoch 0");
        let batches = match cfg.sampler {
            Sampler::Cluster => {
                let mut b = state.batches.clone();
                b.shuffle(&mut rng);
                b
            }
            Sampler::Ance => {
                mining::random_batches(dataset.queries.len(), cfg.batch_size, &mut rng)?
            }
        };

        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for query_ids in batches {
            let pos = mining::sample_positives(dataset, &query_ids, &mut rng);
            let shared = match cfg.sampler {
                Sampler::Cluster => Vec::new(),
                Sampler::Ance => {
                    let pools: Vec<&[usize]> = query_ids
                        .iter()
                        .map(|&q| state.pools[q].as_slice())
                        .collect();
                    mining::sample_from_pools(&pools, &mut rng)
                }
            };
            let batch = Batch::assemble(dataset, query_ids, pos, &shared);

            let mut tape = GradTape::new();
            let vars = tape.register_params(&params);
            let step = stats.steps + stats.skipped_steps;
            let (loss, breakdown, info) = match total_loss(
                &mut tape,
                &vars,
                &model,
                &batch,
                &bank,
                &objective,
                Some(&mut dropout_rng),
            ) {
                Ok(r) => r,
                Err(LossError::NoUsableQueries) => {
                    log::warn!("step {step}: no query in the batch has a negative, skipping");
                    stats.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            for b in &info.blockings {
                let positives = b.targets.iter().filter(|&&t| t == TARGET_POSITIVE).count();
                if positives != 1
                    || dataset.positives[b.query]
                        .binary_search(&b.labels[0])
                        .is_err()
                {
                    return Err(TrainError::BlockingInvariant {
                        step,
                        query: b.query,
                        positives,
                    });
                }
            }
            stats.blockings += info.blockings.len();
            stats.shrunk_blockings += info.shrunk_blockings;
            stats.skipped_queries += info.skipped_queries;

            let grads = tape.backward(loss).into_params();
            drop(vars);
            drop(tape);
            if grads.values().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            update_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;

            sum.base += breakdown.base;
            sum.tcm += breakdown.tcm;
            sum.xe_ql += breakdown.xe_ql;
            sum.xe_qb += breakdown.xe_qb;
            sum.total += breakdown.total;
            steps += 1;
            stats.steps += 1;
        }
        let n = steps.max(1) as f64;
        let entry = EpochLog {
            epoch,
            base: sum.base / n,
            tcm: sum.tcm / n,
            xe_ql: sum.xe_ql / n,
            xe_qb: sum.xe_qb / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch}: total {:.5} (base {:.5}, tcm {:.5}, xe_ql {:.5}, xe_qb {:.5})",
            entry.total,
            entry.base,
            entry.tcm,
            entry.xe_ql,
            entry.xe_qb
        );
        log.push(entry);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            optimizer: adam,
            config: *cfg,
            epoch: cfg.epochs,
        },
        log,
        stats,
    })
}

const MAGIC: &[u8; 4] = b"ALC1";
const CONFIG_PREFIX: &str = "config.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";
const EPOCH: &str = "meta.epoch";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks `{0}`")]
    Missing(String),
}

/// Everything needed to resume or evaluate a run: parameters, optimizer
/// moments, the config snapshot and the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn model(&self) -> AlcModel {
        AlcModel::new(self.config.model())
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        for (n, t) in self.optimizer.m.iter() {
            out.push((format!("{ADAM_M_PREFIX}{n}"), t.clone()));
        }
        for (n, t) in self.optimizer.v.iter() {
            out.push((format!("{ADAM_V_PREFIX}{n}"), t.clone()));
        }
        out.push((
            ADAM_STEP.to_string(),
            Tensor::scalar(self.optimizer.step as f64),
        ));
        out.push((EPOCH.to_string(), Tensor::scalar(self.epoch as f64)));
        for (k, v) in self.config.to_entries() {
            out.push((format!("{CONFIG_PREFIX}{k}"), Tensor::scalar(v)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            let name = name.as_bytes();
            let len = u16::try_from(name.len()).expect("tensor names are short");
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(t.rank() as u8);
            for &d in t.dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut scalars: BTreeMap<String, f64> = BTreeMap::new();
        let mut config = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or(CheckpointError::Truncated("values"))?;
            let values = (0..n)
                .map(|_| r.f64("values"))
                .collect::<Result<Vec<_>, _>>()?;
            let tensor = Tensor::new(dims, values)
                .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
            if let Some(k) = name.strip_prefix(CONFIG_PREFIX) {
                config.insert(k.to_string(), single(&name, &tensor)?);
            } else if let Some(k) = name.strip_prefix(ADAM_M_PREFIX) {
                m.insert(k, tensor);
            } else if let Some(k) = name.strip_prefix(ADAM_V_PREFIX) {
                v.insert(k, tensor);
            } else if name == ADAM_STEP || name == EPOCH {
                scalars.insert(name.clone(), single(&name, &tensor)?);
            } else {
                params.insert(name, tensor);
            }
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        let config = TrainConfig::from_entries(&config)?;
        let scalar = |k: &str| {
            scalars
                .get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Missing(k.to_string()))
        };
        let ckpt = Self {
            params,
            optimizer: AdamState {
                m,
                v,
                step: scalar(ADAM_STEP)? as u64,
            },
            config,
            epoch: scalar(EPOCH)? as usize,
        };
        ckpt.model()
            .check_params(&ckpt.params)
            .map_err(CheckpointError::Malformed)?;
        Ok(ckpt)
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        data_io::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn single(name: &str, t: &Tensor) -> Result<f64, CheckpointError> {
    if t.len() == 1 {
        Ok(t.values()[0])
    } else {
        Err(CheckpointError::Malformed(format!(
            "`{name}` should hold one value"
        )))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TextRecord;

    fn store(vals: &[f64]) -> ParamStore {
        [("w".to_string(), Tensor::vector(vals.to_vec()))]
            .into_iter()
            .collect()
    }

    fn grads(vals: &[f64]) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::vector(vals.to_vec()))]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(&[0.5, -2.0]);
        let mut s = AdamState::new(&p);
        for _ in 0..10 {
            update_step(&mut p, &grads(&[0.0, 0.0]), &mut s, 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().values(), &[0.5, -2.0]);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let lr = 0.01;
        let mut p = store(&[0.0, 0.0]);
        let mut s = AdamState::new(&p);
        let mut prev = p.get("w").unwrap().values().to_vec();
        for t in 1..=2000 {
            update_step(&mut p, &grads(&[3.0, -0.5]), &mut s, lr).unwrap();
            let cur = p.get("w").unwrap().values().to_vec();
            // bias correction makes m̂ = g and v̂ = g² exactly for a constant g
            let expected = lr * 3.0 / (3.0 + ADAM_EPS);
            assert!(((prev[0] - cur[0]) - expected).abs() < 1e-12, "step {t}");
            assert!(((cur[1] - prev[1]) - lr * 0.5 / (0.5 + ADAM_EPS)).abs() < 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[0.0, 0.0]);
        let mut s = AdamState::new(&p);
        let err = update_step(&mut p, &grads(&[1.0]), &mut s, 0.1).unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch { ref name } if name == "w"));
        assert_eq!(s.step, 0);
    }

    fn toy_dataset() -> Dataset {
        let labels: Vec<TextRecord> = (0..12)
            .map(|i| TextRecord {
                id: i,
                text: format!("family{} item {}", i % 4, i),
            })
            .collect();
        let queries: Vec<TextRecord> = (0..10)
            .map(|i| TextRecord {
                id: 100 + i,
                text: format!("itm {} famly{}", i, i % 4),
            })
            .collect();
        let positives = (0..10).map(|i| vec![i as usize]).collect();
        Dataset {
            labels,
            queries,
            positives,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            blocking_size: 3,
            dim: 8,
            d_in: 8,
            buckets: 1024,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let out = train(&toy_dataset(), &small_cfg()).unwrap();
        let bytes = out.checkpoint.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let out = train(&toy_dataset(), &small_cfg()).unwrap();
        let bytes = out.checkpoint.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..small_cfg()
            },
            TrainConfig {
                batch_size: 1,
                ..small_cfg()
            },
            TrainConfig {
                blocking_size: 1,
                ..small_cfg()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..small_cfg()
            },
            TrainConfig {
                m_plus: 0.4,
                ..small_cfg()
            },
        ] {
            assert!(
                matches!(train(&toy_dataset(), &cfg), Err(TrainError::Config(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn sampler_names_parse() {
        assert_eq!("ance".parse::<Sampler>().unwrap(), Sampler::Ance);
        assert_eq!(Sampler::Cluster.to_string(), "cluster");
        assert!("random".parse::<Sampler>().is_err());
    }
}
