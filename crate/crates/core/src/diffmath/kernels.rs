//! Scalar and row-wise kernels with their analytic derivatives.
//!
//! Everything here is a pure function; the tape in [`super::tape`] strings
//! these together and saves whatever the backward formulas need.

use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// GeLU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    // 0.5 (1 + tanh u) = sigmoid(2u)
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    x * sigmoid(2.0 * u)
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// Subgradient of |x| with 0 at the kink.
pub fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Euclidean norm computed with max-abs scaling so tiny or huge inputs
/// neither underflow nor overflow.
pub fn stable_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let ss: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * ss.sqrt()
}

/// Unit-length copy of `v`; the zero vector maps to itself.
pub fn l2_normalize_slice(v: &[f64]) -> Vec<f64> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return vec![0.0; v.len()];
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / scale).collect();
    let n = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
    scaled.into_iter().map(|x| x / n).collect()
}

pub fn l2_normalize(v: &Tensor) -> Tensor {
    Tensor::new(v.dims().to_vec(), l2_normalize_slice(v.values())).expect("same dims")
}

/// Per-row statistics saved by a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Layer normalization of a single vector.
pub fn layer_norm(v: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    assert_eq!(v.len(), gain.len());
    assert_eq!(v.len(), bias.len());
    let (out, _) = layer_norm_row(v.values(), gain.values(), bias.values(), eps);
    Tensor::new(v.dims().to_vec(), out).expect("same dims")
}

/// Backward through one layer-norm row. Returns dx and accumulates into
/// the gain and bias gradients.
pub fn layer_norm_row_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = Vec::with_capacity(dy.len());
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.normalized[i];
        dbias[i] += dy[i];
        dxhat.push(dy[i] * gain[i]);
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dh = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| d * h)
        .sum::<f64>()
        / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dh))
        .collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total = order_free_sum(&mut exps.clone());
    exps.into_iter().map(|e| e / total).collect()
}

/// Sum whose rounding does not depend on the order of `terms` (they are
/// sorted first). Keeps the attention block exactly permutation-equivariant.
pub fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `C (m×n) = beta·C + A·B` with arbitrary element strides on A and B,
/// so transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, a_strides, b, b_strides, beta, c);
        return;
    }
    let max_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let max_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!(
        max_a >= 0 && (max_a as usize) < a.len(),
        "gemm: A out of bounds"
    );
    assert!(
        max_b >= 0 && (max_b as usize) < b.len(),
        "gemm: B out of bounds"
    );
    // SAFETY: the asserts above bound every index matrixmultiply will touch
    // in A and B; C is contiguous row-major with m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many multiply-adds the packing done by `dgemm` costs more
/// than it saves.
const SMALL_GEMM: usize = 1 << 16;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ar, ac): (isize, isize),
    b: &[f64],
    (br, bc): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    let (ar, ac, br, bc) = (ar as usize, ac as usize, br as usize, bc as usize);
    let mut row = vec![0.0; n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let x = a[i * ar + p * ac];
            let base = p * br;
            if bc == 1 {
                for (r, y) in row.iter_mut().zip(&b[base..base + n]) {
                    *r += x * y;
                }
            } else {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += x * b[base + j * bc];
                }
            }
        }
        let out = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            out.copy_from_slice(&row);
        } else {
            for (o, r) in out.iter_mut().zip(&row) {
                *o = beta * *o + r;
            }
        }
    }
}

/// Plain row-major matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims");
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.values(),
        (k as isize, 1),
        b.values(),
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Tensor::matrix(m, n, out)
}
