//! SGC classifier head: L2-regularized softmax regression on propagated features.
//!
//! Parameters are flattened class-major: block `c` holds `W[0..D, c]`
//! followed by `b[c]`, so `θ` has length `(D+1)·C`. With `a = [z; 1]` the
//! per-sample gradient is `(p − e_y) ⊗ a` and the per-sample Hessian is
//! `(diag(p) − p pᵀ) ⊗ a aᵀ`. The Hessian is only ever applied to vectors.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EmbeddingMatrix, LabeledSplit};
use crate::linalg::{conjugate_gradient, norm};

pub const FLATTEN_ORDER: &str = "class-major: for each class c, W[0..D, c] then b[c]";

/// Relative residual required from Hessian solves.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl TrainConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            grad_tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    theta: Array1<f64>,
    feature_dim: usize,
    num_classes: usize,
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            theta: Array1::zeros((feature_dim + 1) * num_classes),
            feature_dim,
            num_classes,
        }
    }

    pub fn from_flat(theta: Array1<f64>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if theta.len() != (feature_dim + 1) * num_classes {
            return Err(Error::Validation(format!(
                "theta has {} entries, expected ({feature_dim}+1)*{num_classes}",
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("theta has non-finite entries".into()));
        }
        Ok(Self {
            theta,
            feature_dim,
            num_classes,
        })
    }

    pub fn flat(&self) -> &Array1<f64> {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `W` as a `D × C` matrix.
    pub fn weights(&self) -> Array2<f64> {
        let d = self.feature_dim;
        Array2::from_shape_fn((d, self.num_classes), |(i, c)| self.theta[c * (d + 1) + i])
    }

    pub fn bias(&self) -> Array1<f64> {
        let d = self.feature_dim;
        Array1::from_shape_fn(self.num_classes, |c| self.theta[c * (d + 1) + d])
    }

    fn with_theta(&self, theta: Array1<f64>) -> Self {
        Self {
            theta,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn logits(&self, z: ArrayView1<f64>) -> Array1<f64> {
        let d = self.feature_dim;
        Array1::from_shape_fn(self.num_classes, |c| {
            let block = self.theta.slice(s![c * (d + 1)..(c + 1) * (d + 1)]);
            block.slice(s![..d]).dot(&z) + block[d]
        })
    }

    pub fn probabilities(&self, z: ArrayView1<f64>) -> Array1<f64> {
        softmax(self.logits(z))
    }

    pub fn predict(&self, z: ArrayView1<f64>) -> usize {
        argmax(&self.logits(z))
    }
}

fn softmax(mut logits: Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    logits.mapv_inplace(|x| (x - max).exp());
    let total = logits.sum();
    logits / total
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy `−log p_y`, computed through log-sum-exp.
pub fn sample_loss(params: &ModelParams, z: ArrayView1<f64>, y: usize) -> f64 {
    let logits = params.logits(z);
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Exact gradient `(p − e_y) ⊗ [z; 1]`.
pub fn sample_gradient(params: &ModelParams, z: ArrayView1<f64>, y: usize) -> Array1<f64> {
    let mut out = Array1::zeros(params.len());
    add_sample_gradient(params, z, y, 1.0, &mut out);
    out
}

fn add_sample_gradient(params: &ModelParams, z: ArrayView1<f64>, y: usize, weight: f64, out: &mut Array1<f64>) {
    let d = params.feature_dim;
    let p = params.probabilities(z);
    for c in 0..params.num_classes {
        let coef = weight * (p[c] - if c == y { 1.0 } else { 0.0 });
        if coef == 0.0 {
            continue;
        }
        let mut block = out.slice_mut(s![c * (d + 1)..(c + 1) * (d + 1)]);
        block.slice_mut(s![..d]).scaled_add(coef, &z);
        block[d] += coef;
    }
}

/// Adds `weight · ∇²ℓ(z) v` using the Kronecker factorization.
fn add_sample_hvp(
    params: &ModelParams,
    z: ArrayView1<f64>,
    probs: &Array1<f64>,
    v: &Array1<f64>,
    weight: f64,
    out: &mut Array1<f64>,
) {
    let d = params.feature_dim;
    let classes = params.num_classes;
    // u_c = a · v_c
    let u = Array1::from_shape_fn(classes, |c| {
        let block = v.slice(s![c * (d + 1)..(c + 1) * (d + 1)]);
        block.slice(s![..d]).dot(&z) + block[d]
    });
    let pu = probs.dot(&u);
    for c in 0..classes {
        let t = weight * probs[c] * (u[c] - pu);
        if t == 0.0 {
            continue;
        }
        let mut block = out.slice_mut(s![c * (d + 1)..(c + 1) * (d + 1)]);
        block.slice_mut(s![..d]).scaled_add(t, &z);
        block[d] += t;
    }
}

/// Weighted training samples: the objective is `Σ w_i ℓ(z_i, y_i) + λ/2 ‖θ‖²`.
///
/// The standard objective uses `w_i = 1/N`; other weights realize the
/// down-weighted problems used by the influence probes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub num_classes: usize,
}

impl TrainingData {
    /// Uniform `1/N` weights over the listed rows.
    pub fn new(z: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if z.nrows() != labels.len() {
            return Err(Error::Validation("one label per training row required".into()));
        }
        if labels.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {num_classes})")));
        }
        let n = labels.len();
        Ok(Self {
            z,
            labels,
            weights: vec![1.0 / n as f64; n],
            num_classes,
        })
    }

    /// Training rows of `embedding` in split order.
    pub fn from_split(embedding: &EmbeddingMatrix, split: &LabeledSplit) -> Result<Self> {
        let dim = embedding.z.ncols();
        let mut z = Array2::zeros((split.train.len(), dim));
        for (r, &v) in split.train.iter().enumerate() {
            z.row_mut(r).assign(&embedding.row(v));
        }
        let labels = split.train.iter().map(|&v| split.label(v)).collect();
        Self::new(z, labels, split.num_classes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn param_len(&self) -> usize {
        (self.feature_dim() + 1) * self.num_classes
    }

    pub fn objective(&self, params: &ModelParams, lambda: f64) -> f64 {
        let data: f64 = (0..self.len())
            .map(|i| self.weights[i] * sample_loss(params, self.z.row(i), self.labels[i]))
            .sum();
        data + 0.5 * lambda * params.theta.dot(&params.theta)
    }

    pub fn gradient(&self, params: &ModelParams, lambda: f64) -> Array1<f64> {
        let mut g = lambda * &params.theta;
        for i in 0..self.len() {
            add_sample_gradient(params, self.z.row(i), self.labels[i], self.weights[i], &mut g);
        }
        g
    }

    /// `H v` with `H = Σ w_i ∇²ℓ_i + λ I`, accumulated sample by sample in row order.
    pub fn hessian_vector_product(&self, params: &ModelParams, lambda: f64, v: &Array1<f64>) -> Array1<f64> {
        let probs = self.probabilities(params);
        self.hvp_with(params, &probs, lambda, v)
    }

    fn probabilities(&self, params: &ModelParams) -> Vec<Array1<f64>> {
        (0..self.len()).map(|i| params.probabilities(self.z.row(i))).collect()
    }

    fn hvp_with(&self, params: &ModelParams, probs: &[Array1<f64>], lambda: f64, v: &Array1<f64>) -> Array1<f64> {
        let mut out = lambda * v;
        for i in 0..self.len() {
            add_sample_hvp(params, self.z.row(i), &probs[i], v, self.weights[i], &mut out);
        }
        out
    }

    /// `H⁻¹ g` by conjugate gradients; cap `10·|θ|` iterations.
    pub fn solve_hessian_system(&self, params: &ModelParams, lambda: f64, g: &Array1<f64>) -> Result<Array1<f64>> {
        self.solve_hessian_system_tol(params, lambda, g, SOLVE_TOLERANCE)
    }

    pub fn solve_hessian_system_tol(
        &self,
        params: &ModelParams,
        lambda: f64,
        g: &Array1<f64>,
        rel_tol: f64,
    ) -> Result<Array1<f64>> {
        if lambda <= 0.0 {
            return Err(Error::Validation("lambda must be positive for Hessian solves".into()));
        }
        let probs = self.probabilities(params);
        let out = conjugate_gradient(
            |v| self.hvp_with(params, &probs, lambda, v),
            g,
            rel_tol,
            10 * params.len(),
        );
        if !out.converged {
            return Err(Error::SolverStall {
                iters: out.iterations,
                residual: out.relative_residual,
            });
        }
        Ok(out.x)
    }

    /// Materializes `H` column by column from Hessian-vector products.
    pub fn dense_hessian(&self, params: &ModelParams, lambda: f64) -> Array2<f64> {
        let probs = self.probabilities(params);
        let n = params.len();
        let mut h = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            h.column_mut(j).assign(&self.hvp_with(params, &probs, lambda, &e));
            e[j] = 0.0;
        }
        (&h + &h.t()) / 2.0
    }

    /// Smallest eigenvalue over the per-sample Hessians `∇²ℓ(z_i, y_i)`.
    ///
    /// `a aᵀ` has rank one, so for `D ≥ 1` some eigenvalue is exactly zero.
    /// Only the bias-only case needs an eigensolve of `diag(p) − p pᵀ`.
    pub fn per_sample_hessian_sigma_min(&self, params: &ModelParams) -> f64 {
        if self.feature_dim() + 1 > 1 {
            return 0.0;
        }
        let c = self.num_classes;
        (0..self.len())
            .map(|i| {
                let p = params.probabilities(self.z.row(i));
                let m = DMatrix::from_fn(c, c, |a, b| if a == b { p[a] } else { 0.0 } - p[a] * p[b]);
                SymmetricEigen::new(m).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimizes the objective by Newton-CG with backtracking, from `init`.
    pub fn fit(&self, config: &TrainConfig, init: ModelParams) -> Result<(ModelParams, usize)> {
        if config.lambda <= 0.0 {
            return Err(Error::Validation("lambda must be positive".into()));
        }
        let lambda = config.lambda;
        let mut params = init;
        let mut value = self.objective(&params, lambda);
        let mut grad = self.gradient(&params, lambda);
        let mut grad_norm = norm(&grad);
        for iter in 0..config.max_iters {
            if grad_norm <= config.grad_tol {
                return Ok((params, iter));
            }
            let probs = self.probabilities(&params);
            let forcing = grad_norm.min(0.1);
            let neg_grad = -&grad;
            let step = conjugate_gradient(
                |v| self.hvp_with(&params, &probs, lambda, v),
                &neg_grad,
                forcing,
                10 * params.len(),
            )
            .x;
            let slope = grad.dot(&step);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let candidate = params.with_theta(&params.theta + &(alpha * &step));
                let cand_value = self.objective(&candidate, lambda);
                let cand_grad = self.gradient(&candidate, lambda);
                let cand_norm = norm(&cand_grad);
                // near the optimum the Armijo test drowns in rounding; a shrinking gradient also counts
                if cand_value <= value + 1e-4 * alpha * slope || (alpha == 1.0 && cand_norm < grad_norm) {
                    accepted = Some((candidate, cand_value, cand_grad, cand_norm));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((p, v, g, n)) => {
                    params = p;
                    value = v;
                    grad = g;
                    grad_norm = n;
                }
                None => {
                    return Err(Error::NonConvergence {
                        iters: iter,
                        grad_norm,
                    })
                }
            }
        }
        if grad_norm <= config.grad_tol {
            return Ok((params, config.max_iters));
        }
        Err(Error::NonConvergence {
            iters: config.max_iters,
            grad_norm,
        })
    }
}

/// How `H⁻¹ g` is computed for influence estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HessianSolver {
    /// Matrix-free conjugate gradients; one solve per right-hand side.
    #[default]
    ConjugateGradient,
    /// Cholesky factor of the materialized Hessian, computed once and reused.
    /// Exactly linear in the right-hand side, so sums of solves equal the
    /// solve of the sum up to rounding. Only sensible for small `|θ|`.
    DenseCholesky,
}

/// Fitted SGC head together with the training rows it was fitted on.
#[derive(Clone, Debug)]
pub struct SgcModel {
    pub k: usize,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub data: TrainingData,
    pub train_nodes: Vec<usize>,
    pub iterations: usize,
    solver: HessianSolver,
    factor: OnceLock<Cholesky<f64, Dyn>>,
}

impl SgcModel {
    pub fn new(
        k: usize,
        config: TrainConfig,
        params: ModelParams,
        data: TrainingData,
        train_nodes: Vec<usize>,
    ) -> Result<Self> {
        if data.len() != train_nodes.len() || params.len() != data.param_len() {
            return Err(Error::Validation("model parameters do not match the training data".into()));
        }
        Ok(Self {
            k,
            config,
            params,
            data,
            train_nodes,
            iterations: 0,
            solver: HessianSolver::default(),
            factor: OnceLock::new(),
        })
    }

    pub fn with_solver(mut self, solver: HessianSolver) -> Self {
        self.solver = solver;
        self
    }

    pub fn solver(&self) -> HessianSolver {
        self.solver
    }

    /// Row of `node` in the training data, if it is a training node.
    pub fn train_row(&self, node: usize) -> Option<usize> {
        self.train_nodes.iter().position(|&v| v == node)
    }

    pub fn num_train(&self) -> usize {
        self.data.len()
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn hessian_vector_product(&self, v: &Array1<f64>) -> Array1<f64> {
        self.data.hessian_vector_product(&self.params, self.config.lambda, v)
    }

    pub fn solve_hessian_system(&self, g: &Array1<f64>) -> Result<Array1<f64>> {
        match self.solver {
            HessianSolver::ConjugateGradient => self.data.solve_hessian_system(&self.params, self.config.lambda, g),
            HessianSolver::DenseCholesky => {
                let factor = self.dense_factor()?;
                let x = factor.solve(&DVector::from_iterator(g.len(), g.iter().copied()));
                Ok(Array1::from_iter(x.iter().copied()))
            }
        }
    }

    fn dense_factor(&self) -> Result<&Cholesky<f64, Dyn>> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let h = self.data.dense_hessian(&self.params, self.config.lambda);
        let n = h.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| h[[i, j]]);
        let factor = Cholesky::new(m).ok_or_else(|| Error::DegenerateInput("Hessian is not positive definite".into()))?;
        Ok(self.factor.get_or_init(|| factor))
    }

    pub fn objective_gradient(&self) -> Array1<f64> {
        self.data.gradient(&self.params, self.config.lambda)
    }

    pub fn sigma_min(&self) -> f64 {
        self.data.per_sample_hessian_sigma_min(&self.params)
    }

    pub fn accuracy(&self, embedding: &EmbeddingMatrix, nodes: &[usize], split: &LabeledSplit) -> f64 {
        accuracy(&self.params, embedding, nodes, split)
    }

    /// Un-averaged cross-entropy over `nodes`.
    pub fn total_loss(&self, embedding: &EmbeddingMatrix, nodes: &[usize], split: &LabeledSplit) -> f64 {
        total_loss(&self.params, embedding, nodes, split)
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            k: self.k,
            lambda: self.config.lambda,
            num_classes: self.params.num_classes,
            feature_dim: self.params.feature_dim,
            flatten_order: FLATTEN_ORDER.to_string(),
            theta: self.params.theta.to_vec(),
        }
    }
}

pub fn accuracy(params: &ModelParams, embedding: &EmbeddingMatrix, nodes: &[usize], split: &LabeledSplit) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&v| params.predict(embedding.row(v)) == split.label(v))
        .count();
    hits as f64 / nodes.len() as f64
}

pub fn total_loss(params: &ModelParams, embedding: &EmbeddingMatrix, nodes: &[usize], split: &LabeledSplit) -> f64 {
    nodes
        .iter()
        .map(|&v| sample_loss(params, embedding.row(v), split.label(v)))
        .sum()
}

/// Fits the SGC head on the training rows of `embedding`, starting from `θ = 0`.
pub fn train(embedding: &EmbeddingMatrix, split: &LabeledSplit, config: &TrainConfig) -> Result<SgcModel> {
    let data = TrainingData::from_split(embedding, split)?;
    let init = ModelParams::zeros(data.feature_dim(), data.num_classes);
    let (params, iterations) = data.fit(config, init)?;
    let mut model = SgcModel::new(embedding.k, *config, params, data, split.train.clone())?;
    model.iterations = iterations;
    Ok(model)
}

/// On-disk model: JSON with the flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub k: usize,
    pub lambda: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub flatten_order: String,
    pub theta: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn params(&self) -> Result<ModelParams> {
        if self.flatten_order != FLATTEN_ORDER {
            return Err(Error::Validation(format!(
                "unsupported flatten_order {:?}",
                self.flatten_order
            )));
        }
        ModelParams::from_flat(Array1::from(self.theta.clone()), self.feature_dim, self.num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
