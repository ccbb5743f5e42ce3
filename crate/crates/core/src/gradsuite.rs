//! Ready-made gradient checks: every tape kernel in isolation and the full
//! objective on a micro configuration (d = 8, B = 6, K = 3, 20 labels,
//! dropout off).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{
    grad_check, grad_check_with_step, DiffError, GradCheckReport, GradTape, ParamStore, ParamVars,
    Tensor, Var,
};
use crate::encoder::{EncoderConfig, Features, TextRecord};
use crate::losses::{total_loss, FeatureBank, ObjectiveConfig, TcmConfig};
use crate::mining::{sample_positives, Batch, Dataset};
use crate::model::{AlcModel, ModelConfig};

pub const MICRO_DIM: usize = 8;
pub const MICRO_BATCH: usize = 6;
pub const MICRO_BLOCKING: usize = 3;
pub const MICRO_LABELS: usize = 20;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 ";

fn random_text<R: Rng>(rng: &mut R) -> String {
    let len = rng.random_range(3..24);
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

/// A self-contained micro problem for checking the full objective.
pub struct MicroProblem {
    pub model: AlcModel,
    pub params: ParamStore,
    pub dataset: Dataset,
    pub query_features: Vec<Features>,
    pub label_features: Vec<Features>,
    pub batch: Batch,
    pub objective: ObjectiveConfig,
}

impl MicroProblem {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AlcModel::new(ModelConfig {
            encoder: EncoderConfig {
                buckets: 1024,
                d_in: 8,
                dim: MICRO_DIM,
            },
            dropout: 0.1,
        });
        let params = model.init_params(rng.random());
        let labels: Vec<TextRecord> = (0..MICRO_LABELS)
            .map(|i| TextRecord {
                id: i as u64,
                text: random_text(&mut rng),
            })
            .collect();
        let queries: Vec<TextRecord> = (0..MICRO_BATCH)
            .map(|i| TextRecord {
                id: i as u64,
                text: random_text(&mut rng),
            })
            .collect();
        let positives = (0..MICRO_BATCH)
            .map(|_| {
                let k = rng.random_range(1..=2);
                let mut p = index::sample(&mut rng, MICRO_LABELS, k).into_vec();
                p.sort_unstable();
                p
            })
            .collect();
        let dataset = Dataset {
            labels,
            queries,
            positives,
        };
        let query_ids: Vec<usize> = (0..MICRO_BATCH).collect();
        let pos = sample_positives(&dataset, &query_ids, &mut rng);
        let shared: Vec<usize> = index::sample(&mut rng, MICRO_LABELS, 4).into_vec();
        let batch = Batch::assemble(&dataset, query_ids, pos, &shared);
        let query_features = dataset
            .queries
            .iter()
            .map(|q| model.encoder.featurize(&q.text))
            .collect();
        let label_features = dataset
            .labels
            .iter()
            .map(|l| model.encoder.featurize(&l.text))
            .collect();
        Self {
            model,
            params,
            dataset,
            query_features,
            label_features,
            batch,
            objective: ObjectiveConfig {
                beta1: 1.0,
                beta2: 0.5,
                tcm: Some(TcmConfig::default()),
                triplet_margin: 0.3,
                blocking_size: MICRO_BLOCKING,
                detach_aux: false,
            },
        }
    }

    pub fn loss(&self, tape: &mut GradTape, vars: &ParamVars) -> Var {
        let bank = FeatureBank {
            queries: &self.query_features,
            labels: &self.label_features,
        };
        let (total, _, _) = total_loss::<ChaCha8Rng>(
            tape,
            vars,
            &self.model,
            &self.batch,
            &bank,
            &self.objective,
            None,
        )
        .expect("micro problem is well formed");
        total
    }
}

/// Gradient check of the full objective on the micro problem of `seed`.
pub fn check_total_loss(seed: u64, tol: f64) -> Result<GradCheckReport, DiffError> {
    let problem = MicroProblem::new(seed);
    grad_check(
        &problem.params,
        |tape, vars| problem.loss(tape, vars),
        seed,
        tol,
    )
}

/// [`check_total_loss`] with a different difference step; the same
/// coordinates are sampled.
pub fn check_total_loss_with_step(
    seed: u64,
    tol: f64,
    step: f64,
) -> Result<GradCheckReport, DiffError> {
    let problem = MicroProblem::new(seed);
    grad_check_with_step(
        &problem.params,
        |tape, vars| problem.loss(tape, vars),
        seed,
        tol,
        step,
    )
}

/// Tape kernels covered by [`check_kernel`].
pub const KERNELS: &[&str] = &[
    "matmul",
    "matmul_bt",
    "attend",
    "add",
    "add_row",
    "sub",
    "hadamard",
    "scale",
    "concat",
    "concat_rows",
    "gather_rows",
    "abs",
    "sigmoid",
    "gelu",
    "layer_norm",
    "softmax",
    "mean_pool",
    "l2_normalize",
    "row_dot",
    "mean",
];

fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    )
}

/// Checks one kernel's backward against finite differences. The kernel
/// output is contracted with a fixed random probe so every output
/// coordinate contributes to the scalar.
pub fn check_kernel(kernel: &str, seed: u64, tol: f64) -> Result<GradCheckReport, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let (m, n, k) = (
        rng.random_range(2..5),
        rng.random_range(2..6),
        rng.random_range(2..5),
    );
    let mut store = ParamStore::new();
    store.insert("a", random_tensor(&mut rng, m, n));
    store.insert("b", random_tensor(&mut rng, m, n));
    store.insert("c", random_tensor(&mut rng, n, k));
    store.insert("row", random_tensor(&mut rng, 1, n));
    store.insert("gain", random_tensor(&mut rng, 1, n));
    store.insert("table", random_tensor(&mut rng, 7, n));
    let bags: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|_| {
            let picks = rng.random_range(1..4);
            (0..picks)
                .map(|_| (rng.random_range(0..7), 1.0 / picks as f64))
                .collect()
        })
        .collect();
    let gather: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
    let probe_seed: u64 = rng.random();

    let program = |tape: &mut GradTape, vars: &ParamVars| {
        let (a, b, c) = (vars.get("a"), vars.get("b"), vars.get("c"));
        let out = match kernel {
            "matmul" => tape.matmul(a, c),
            "matmul_bt" => tape.matmul_bt(a, b),
            "attend" => tape.attend(a, c),
            "add" => tape.add(a, b),
            "add_row" => tape.add_row(a, vars.get("row")),
            "sub" => tape.sub(a, b),
            "hadamard" => tape.mul(a, b),
            "scale" => tape.scale(a, -1.7),
            "concat" => tape.concat_cols(&[a, b, a]),
            "concat_rows" => tape.concat_rows(&[b, a]),
            "gather_rows" => tape.gather_rows(a, &gather),
            "abs" => tape.abs(a),
            "sigmoid" => tape.sigmoid(a),
            "gelu" => tape.gelu(a),
            "layer_norm" => tape.layer_norm(
                a,
                vars.get("gain"),
                vars.get("row"),
                crate::diffmath::LAYER_NORM_EPS,
            ),
            "softmax" => tape.softmax(a),
            "mean_pool" => tape.bag_mean(vars.get("table"), bags.clone()),
            "l2_normalize" => tape.l2_normalize(a),
            "row_dot" => tape.row_dot(a, b),
            "mean" => tape.mean(a),
            other => panic!("unknown kernel `{other}`"),
        };
        let t = tape.value(out);
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe = Tensor::new(
            t.dims().to_vec(),
            (0..t.len()).map(|_| prng.random_range(-1.0..1.0)).collect(),
        )
        .expect("probe dims");
        let p = tape.constant(probe);
        let prod = tape.mul(out, p);
        tape.sum(prod)
    };
    grad_check(&store, program, seed, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes_one_seed() {
        for k in KERNELS {
            let r = check_kernel(k, 1, 1e-4).unwrap();
            assert!(r.pass, "{k}: {r:?}");
        }
    }

    #[test]
    fn total_loss_micro_check() {
        let r = check_total_loss(7, 1e-4).unwrap();
        assert!(r.checked > 1000, "{}", r.checked);
        // coordinates this small are below what a step of 1e-5 resolves on
        // a loss of order 1 (see the acceptance suite)
        for c in r
            .coords
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) >= 1e-6)
        {
            assert!(c.relative_error <= 1e-4, "{c:?}");
        }
    }
}
