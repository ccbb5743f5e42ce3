//! Reverse-mode gradient tape.
//!
//! Every kernel application is appended to a linear record together with
//! the forward activations its backward formula needs. `backward` walks
//! the record once in reverse. Rank-1 tensors are treated as single rows.
//!
//! The tape also keeps a branch signature: a running hash of every
//! data-dependent discrete decision made during forward (signs at |x|
//! kinks, active hinge terms, hard-set membership, top-k selections). Two
//! forward passes with the same signature evaluated the same smooth piece
//! of the program, which is what finite-difference checking relies on.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::rc::Rc;

use fnv::FnvHasher;

use super::kernels::{self, LayerNormCache};
use super::{ParamStore, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        caches: Vec<LayerNormCache>,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BagMean {
        table: Var,
        bags: Vec<Vec<(usize, f64)>>,
    },
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    Mask(Var, Vec<f64>),
    Custom {
        input: Var,
        local_grad: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Single-writer record of one forward pass.
#[derive(Debug)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    branch: u64,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every tensor of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl ParamVars {
    /// Panics when `name` was never registered; parameter names are fixed
    /// by model construction, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not registered on tape"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            branch: FnvHasher::default().finish(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite activation from {op:?}");
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.shared_param(name, Rc::new(value.clone()))
    }

    /// Registers a parameter without copying its values.
    pub fn shared_param(&mut self, name: &str, value: Rc<Tensor>) -> Var {
        debug_assert!(value.is_finite(), "non-finite parameter `{name}`");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn register_params(&mut self, store: &ParamStore) -> ParamVars {
        let vars = store
            .names()
            .map(|name| {
                let t = Rc::clone(store.get_shared(name).expect("own name"));
                (name.clone(), self.shared_param(name, t))
            })
            .collect();
        ParamVars { vars }
    }

    /// A leaf that never receives a gradient of interest.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Folds a discrete forward decision into the branch signature.
    pub fn record_branch(&mut self, tag: u64) {
        let mut h = FnvHasher::with_key(self.branch);
        h.write_u64(tag);
        self.branch = h.finish();
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_dims_or_panic(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).dims(),
            self.value(b).dims(),
            "{what}: operand dims differ"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `weights · values` where every output entry is an
    /// [`kernels::order_free_sum`], so permuting the rows of `values` along
    /// with the columns of `weights` leaves the result bit-identical.
    pub fn attend(&mut self, weights: Var, values: Var) -> Var {
        let (m, k) = self.shape(weights);
        let (k2, n) = self.shape(values);
        assert_eq!(k, k2, "attend inner dims");
        let (w, v) = (self.value(weights), self.value(values));
        let mut out = Vec::with_capacity(m * n);
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for c in 0..n {
                for (j, t) in terms.iter_mut().enumerate() {
                    *t = w.row(i)[j] * v.row(j)[c];
                }
                out.push(kernels::order_free_sum(&mut terms));
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::MatMul(weights, values))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).values(),
            (k as isize, 1),
            self.value(b).values(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let vals = ta
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.dims().to_vec(), vals).expect("same dims")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.dims().to_vec(),
            ta.values().iter().map(|x| f(*x)).collect(),
        )
        .expect("same dims")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_dims_or_panic(a, b, "add");
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.value(row).len(), n, "add_row width");
        let r = self.value(row).values().to_vec();
        let mut vals = self.value(a).values().to_vec();
        for i in 0..m {
            for j in 0..n {
                vals[i * n + j] += r[j];
            }
        }
        let dims = self.value(a).dims().to_vec();
        self.push(
            Tensor::new(dims, vals).expect("same dims"),
            Op::AddRow(a, row),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_dims_or_panic(a, b, "sub");
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_dims_or_panic(a, b, "mul");
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut h = FnvHasher::default();
        for &x in self.value(a).values() {
            h.write_u8(if x > 0.0 {
                2
            } else if x < 0.0 {
                0
            } else {
                1
            });
        }
        self.record_branch(h.finish());
        let out = self.map(a, f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.value(gain).len(), n, "layer_norm gain width");
        assert_eq!(self.value(bias).len(), n, "layer_norm bias width");
        let mut vals = Vec::with_capacity(m * n);
        let mut caches = Vec::with_capacity(m);
        {
            let tx = self.value(x);
            let g = self.value(gain).values();
            let b = self.value(bias).values();
            for i in 0..m {
                let (row, cache) = kernels::layer_norm_row(tx.row(i), g, b, eps);
                vals.extend(row);
                caches.push(cache);
            }
        }
        let dims = self.value(x).dims().to_vec();
        self.push(
            Tensor::new(dims, vals).expect("same dims"),
            Op::LayerNorm {
                x,
                gain,
                bias,
                caches,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let mut vals = Vec::with_capacity(self.value(a).len());
        for i in 0..m {
            vals.extend(kernels::softmax_row(self.value(a).row(i)));
        }
        let dims = self.value(a).dims().to_vec();
        self.push(Tensor::new(dims, vals).expect("same dims"), Op::Softmax(a))
    }

    /// Row-wise L2 normalization; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let mut vals = Vec::with_capacity(self.value(a).len());
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.value(a).row(i);
            norms.push(kernels::stable_norm(row));
            vals.extend(kernels::l2_normalize_slice(row));
        }
        let dims = self.value(a).dims().to_vec();
        self.push(
            Tensor::new(dims, vals).expect("same dims"),
            Op::L2Normalize { x: a, norms },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|p| self.shape(*p).0 == m),
            "concat_cols: row counts differ"
        );
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut vals = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                vals.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = if self.value(parts[0]).rank() == 1 {
            Tensor::vector(vals)
        } else {
            Tensor::matrix(m, total, vals)
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        assert!(
            parts.iter().all(|p| self.shape(*p).1 == n),
            "concat_rows: widths differ"
        );
        let mut vals = Vec::new();
        for p in parts {
            vals.extend_from_slice(self.value(*p).values());
        }
        let m = vals.len() / n;
        self.push(Tensor::matrix(m, n, vals), Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let n = self.shape(a).1;
        let mut vals = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            vals.extend_from_slice(self.value(a).row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), n, vals),
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    /// Weighted sum of table rows per bag: `out[r] = Σ w · table[idx]`.
    pub fn bag_mean(&mut self, table: Var, bags: Vec<Vec<(usize, f64)>>) -> Var {
        assert!(!bags.is_empty(), "bag_mean with no bags");
        let n = self.shape(table).1;
        let mut vals = vec![0.0; bags.len() * n];
        {
            let t = self.value(table);
            for (r, bag) in bags.iter().enumerate() {
                let out = &mut vals[r * n..(r + 1) * n];
                for &(idx, w) in bag {
                    for (o, x) in out.iter_mut().zip(t.row(idx)) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(bags.len(), n, vals),
            Op::BagMean { table, bags },
        )
    }

    /// Row-wise dot products of two equally shaped matrices, as a vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        self.same_dims_or_panic(a, b, "row_dot");
        let (m, _) = self.shape(a);
        let vals = (0..m)
            .map(|i| {
                self.value(a)
                    .row(i)
                    .iter()
                    .zip(self.value(b).row(i))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(vals), Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Element-wise multiplication by a fixed mask (inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mask length");
        let ta = self.value(a);
        let vals = ta.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let dims = ta.dims().to_vec();
        self.push(
            Tensor::new(dims, vals).expect("same dims"),
            Op::Mask(a, mask),
        )
    }

    /// Scalar node whose value and gradient with respect to `input` were
    /// computed outside the tape.
    pub fn custom_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Var {
        assert_eq!(
            local_grad.len(),
            self.value(input).len(),
            "custom grad length"
        );
        self.push(Tensor::scalar(value), Op::Custom { input, local_grad })
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let dims = self.value(*v).dims().to_vec();
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
                (name.clone(), Tensor::new(dims, g).expect("grad dims"))
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                // dA = dY · Bᵀ
                with_slot(grads, *a, m * k, |da, beta| {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        dy,
                        (n as isize, 1),
                        self.value(*b).values(),
                        (1, n as isize),
                        beta,
                        da,
                    )
                });
                // dB = Aᵀ · dY
                with_slot(grads, *b, k * n, |db, beta| {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).values(),
                        (1, k as isize),
                        dy,
                        (n as isize, 1),
                        beta,
                        db,
                    )
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                // Y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                with_slot(grads, *a, m * k, |da, beta| {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        dy,
                        (n as isize, 1),
                        self.value(*b).values(),
                        (k as isize, 1),
                        beta,
                        da,
                    )
                });
                with_slot(grads, *b, n * k, |db, beta| {
                    kernels::gemm(
                        n,
                        m,
                        k,
                        dy,
                        (1, n as isize),
                        self.value(*a).values(),
                        (k as isize, 1),
                        beta,
                        db,
                    )
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy);
                accumulate(grads, *b, dy);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, dy);
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in dy.chunks(n) {
                    for (d, g) in dr.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                accumulate_owned(grads, *row, dr);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                accumulate_owned(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).values();
                let vb = self.value(*b).values();
                let da: Vec<f64> = dy.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = dy.iter().zip(va).map(|(g, x)| g * x).collect();
                accumulate_owned(grads, *a, da);
                accumulate_owned(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = dy.iter().map(|g| c * g).collect();
                accumulate_owned(grads, *a, da);
            }
            Op::Abs(a) => {
                let va = self.value(*a).values();
                let da: Vec<f64> = dy
                    .iter()
                    .zip(va)
                    .map(|(g, x)| g * kernels::abs_grad(*x))
                    .collect();
                accumulate_owned(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = node.value.values();
                let da: Vec<f64> = dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate_owned(grads, *a, da);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).values();
                let da: Vec<f64> = dy
                    .iter()
                    .zip(va)
                    .map(|(g, x)| g * kernels::gelu_grad(*x))
                    .collect();
                accumulate_owned(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                caches,
            } => {
                let n = self.shape(*x).1;
                let g = self.value(*gain).values();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = Vec::with_capacity(dy.len());
                for (chunk, cache) in dy.chunks(n).zip(caches) {
                    dx.extend(kernels::layer_norm_row_backward(
                        chunk, g, cache, &mut dgain, &mut dbias,
                    ));
                }
                accumulate_owned(grads, *x, dx);
                accumulate_owned(grads, *gain, dgain);
                accumulate_owned(grads, *bias, dbias);
            }
            Op::Softmax(a) => {
                let n = self.shape(*a).1;
                let y = node.value.values();
                let mut da = Vec::with_capacity(dy.len());
                for (gr, yr) in dy.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                    da.extend(gr.iter().zip(yr).map(|(g, p)| p * (g - dot)));
                }
                accumulate_owned(grads, *a, da);
            }
            Op::L2Normalize { x, norms } => {
                let n = self.shape(*x).1;
                let y = node.value.values();
                let mut dx = Vec::with_capacity(dy.len());
                for ((gr, yr), &norm) in dy.chunks(n).zip(y.chunks(n)).zip(norms) {
                    if norm == 0.0 {
                        dx.extend(std::iter::repeat_n(0.0, n));
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(yr).map(|(g, u)| g * u).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, u)| (g - u * dot) / norm));
                }
                accumulate_owned(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                    }
                    accumulate_owned(grads, *p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, *p, &dy[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.shape(*a).1;
                let slot = grads[a.0].get_or_insert_with(|| vec![0.0; self.value(*a).len()]);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, g) in slot[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&dy[r * n..(r + 1) * n])
                    {
                        *d += g;
                    }
                }
            }
            Op::BagMean { table, bags } => {
                let n = self.shape(*table).1;
                let slot =
                    grads[table.0].get_or_insert_with(|| vec![0.0; self.value(*table).len()]);
                for (r, bag) in bags.iter().enumerate() {
                    let gr = &dy[r * n..(r + 1) * n];
                    for &(idx, w) in bag {
                        for (d, g) in slot[idx * n..(idx + 1) * n].iter_mut().zip(gr) {
                            *d += w * g;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let n = self.shape(*a).1;
                let va = self.value(*a).values();
                let vb = self.value(*b).values();
                let mut da = Vec::with_capacity(va.len());
                let mut db = Vec::with_capacity(vb.len());
                for (i, g) in dy.iter().enumerate() {
                    da.extend(vb[i * n..(i + 1) * n].iter().map(|y| g * y));
                    db.extend(va[i * n..(i + 1) * n].iter().map(|x| g * x));
                }
                accumulate_owned(grads, *a, da);
                accumulate_owned(grads, *b, db);
            }
            Op::Sum(a) => {
                let da = vec![dy[0]; self.value(*a).len()];
                accumulate_owned(grads, *a, da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![dy[0] / n as f64; n];
                accumulate_owned(grads, *a, da);
            }
            Op::Mask(a, mask) => {
                let da: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate_owned(grads, *a, da);
            }
            Op::Custom { input, local_grad } => {
                let da: Vec<f64> = local_grad.iter().map(|g| g * dy[0]).collect();
                accumulate_owned(grads, *input, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, &[w * dy[0]]);
                }
            }
        }
    }
}

/// Runs `f` on the gradient slot of `v`; `beta` is 0 for a fresh slot and 1
/// when adding to an existing one.
fn with_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64], f64)) {
    match &mut grads[v.0] {
        Some(existing) => f(existing, 1.0),
        slot @ None => {
            let mut g = vec![0.0; len];
            f(&mut g, 0.0);
            *slot = Some(g);
        }
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient flowing into `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every registered parameter; untouched ones are zero.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
