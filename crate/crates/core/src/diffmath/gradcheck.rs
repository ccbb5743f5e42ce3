//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, GradTape, ParamStore, ParamVars, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Upper bound on checked coordinates per parameter tensor.
pub const MAX_COORDS_PER_TENSOR: usize = 256;
/// Denominator floor of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a kink or changed a
    /// discrete selection.
    pub skipped: usize,
    pub worst: Option<CoordError>,
    /// Every checked coordinate, in check order.
    pub coords: Vec<CoordError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

type SharedParams = Vec<(String, Rc<Tensor>)>;

fn evaluate<F>(params: &SharedParams, program: &F) -> (f64, u64)
where
    F: Fn(&mut GradTape, &ParamVars) -> Var,
{
    let mut tape = GradTape::new();
    let vars: ParamVars = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.shared_param(name, Rc::clone(t))))
        .collect();
    let out = program(&mut tape, &vars);
    (tape.value(out).item(), tape.branch_signature())
}

/// Compares the tape gradient of `program` against central differences.
///
/// `program` must be deterministic in `params`. Coordinates are sampled
/// per tensor (all of them for tensors with at most
/// [`MAX_COORDS_PER_TENSOR`] entries) using `seed`.
pub fn grad_check<F>(
    params: &ParamStore,
    program: F,
    seed: u64,
    tol: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut GradTape, &ParamVars) -> Var,
{
    grad_check_with_step(params, program, seed, tol, FD_STEP)
}

/// [`grad_check`] with a caller-chosen difference step.
pub fn grad_check_with_step<F>(
    params: &ParamStore,
    program: F,
    seed: u64,
    tol: f64,
    step: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut GradTape, &ParamVars) -> Var,
{
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(step > 0.0, "step must be positive");
    let mut tape = GradTape::new();
    let vars = tape.register_params(params);
    let out = program(&mut tape, &vars);
    let base_signature = tape.branch_signature();
    let grads = tape.backward(out);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: SharedParams = params
        .iter()
        .map(|(name, t)| (name.clone(), Rc::new(t.clone())))
        .collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        pass: true,
        checked: 0,
        skipped: 0,
        worst: None,
        coords: Vec::new(),
    };

    for slot in 0..work.len() {
        let name = work[slot].0.clone();
        let analytic = &grads.params()[&name];
        let len = analytic.len();
        let coords: Vec<usize> = if len <= MAX_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            let mut c = index::sample(&mut rng, len, MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = work[slot].1.values()[i];
            Rc::make_mut(&mut work[slot].1).values_mut()[i] = original + step;
            let (plus, sig_plus) = evaluate(&work, &program);
            Rc::make_mut(&mut work[slot].1).values_mut()[i] = original - step;
            let (minus, sig_minus) = evaluate(&work, &program);
            Rc::make_mut(&mut work[slot].1).values_mut()[i] = original;

            let a = analytic.values()[i];
            let numeric = (plus - minus) / (2.0 * step);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(DiffError::NonFiniteGradient {
                    param: name.clone(),
                    index: i,
                });
            }
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = relative_error(a, numeric);
            let coord = CoordError {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: rel,
            };
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some(coord.clone());
            }
            report.coords.push(coord);
        }
    }
    report.pass = report.max_relative_error <= tol;
    Ok(report)
}
