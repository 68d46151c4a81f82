//! Dense reference implementations used as test oracles.
//!
//! Everything here works on nalgebra matrices and builds Hessians explicitly,
//! sharing no numerical code with the library under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgc_influence::graph::{AttributedGraph, LabeledSplit};

pub fn to_dvector(v: &Array1<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

pub fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` built densely from the edge list.
pub fn dense_operator(graph: &AttributedGraph) -> DMatrix<f64> {
    let n = graph.num_nodes();
    let mut a = DMatrix::<f64>::identity(n, n);
    for e in graph.edges() {
        let (i, j) = e.endpoints();
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt())
}

/// `S^k X` by dense matrix powers.
pub fn dense_propagate(graph: &AttributedGraph, k: usize) -> DMatrix<f64> {
    let s = dense_operator(graph);
    let mut z = to_dmatrix(graph.features());
    for _ in 0..k {
        z = &s * z;
    }
    z
}

/// Softmax regression with explicit Kronecker-structured Hessians.
pub struct DenseSoftmax {
    pub z: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub classes: usize,
    pub lambda: f64,
}

impl DenseSoftmax {
    pub fn new(z: DMatrix<f64>, labels: Vec<usize>, classes: usize, lambda: f64) -> Self {
        let n = labels.len();
        Self {
            z,
            labels,
            weights: vec![1.0 / n as f64; n],
            classes,
            lambda,
        }
    }

    /// Training rows of a dense embedding in split order.
    pub fn from_split(z: &DMatrix<f64>, split: &LabeledSplit, lambda: f64) -> Self {
        let rows: Vec<_> = split.train.iter().map(|&v| z.row(v).into_owned()).collect();
        let z = DMatrix::from_rows(&rows);
        let labels = split.train.iter().map(|&v| split.label(v)).collect();
        Self::new(z, labels, split.num_classes(), lambda)
    }

    pub fn dim(&self) -> usize {
        (self.z.ncols() + 1) * self.classes
    }

    fn augmented(&self, i: usize) -> DVector<f64> {
        let d = self.z.ncols();
        DVector::from_fn(d + 1, |j, _| if j < d { self.z[(i, j)] } else { 1.0 })
    }

    /// Weight matrix in `(D+1) × C` layout, column `c` being block `c` of θ.
    fn unflatten(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.z.ncols() + 1, self.classes, theta.as_slice())
    }

    fn probs(&self, theta: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let logits = self.unflatten(theta).transpose() * a;
        let max = logits.max();
        let e = logits.map(|x| (x - max).exp());
        let s = e.sum();
        e / s
    }

    pub fn sample_loss(&self, theta: &DVector<f64>, a: &DVector<f64>, y: usize) -> f64 {
        -self.probs(theta, a)[y].ln()
    }

    pub fn sample_gradient(&self, theta: &DVector<f64>, a: &DVector<f64>, y: usize) -> DVector<f64> {
        let mut r = self.probs(theta, a);
        r[y] -= 1.0;
        r.kronecker(a)
    }

    /// `(diag(p) − ppᵀ) ⊗ aaᵀ`.
    pub fn sample_hessian(&self, theta: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        let p = self.probs(theta, a);
        let softmax_part = DMatrix::from_diagonal(&p) - &p * p.transpose();
        softmax_part.kronecker(&(a * a.transpose()))
    }

    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        let data: f64 = (0..self.labels.len())
            .map(|i| self.weights[i] * self.sample_loss(theta, &self.augmented(i), self.labels[i]))
            .sum();
        data + 0.5 * self.lambda * theta.norm_squared()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut g = theta * self.lambda;
        for i in 0..self.labels.len() {
            g += self.sample_gradient(theta, &self.augmented(i), self.labels[i]) * self.weights[i];
        }
        g
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::identity(n, n) * self.lambda;
        for i in 0..self.labels.len() {
            h += self.sample_hessian(theta, &self.augmented(i)) * self.weights[i];
        }
        h
    }

    /// Damped Newton from zero with dense LU solves.
    pub fn fit(&self) -> DVector<f64> {
        let mut theta = DVector::zeros(self.dim());
        for _ in 0..200 {
            let g = self.gradient(&theta);
            if g.norm() < 1e-13 {
                break;
            }
            let step = self.hessian(&theta).lu().solve(&(-&g)).expect("Hessian is invertible");
            let f0 = self.objective(&theta);
            let mut t = 1.0;
            while self.objective(&(&theta + &step * t)) > f0 + 1e-4 * t * g.dot(&step) && t > 1e-10 {
                t *= 0.5;
            }
            theta += step * t;
        }
        theta
    }
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, dim: usize) -> AttributedGraph {
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    AttributedGraph::new(x, edges).unwrap()
}

/// Two noisy feature clusters on a random graph; every third node trains.
pub fn small_instance(seed: u64, n: usize, p: f64) -> (AttributedGraph, LabeledSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|v| v % 2).collect();
    let x = Array2::from_shape_fn((n, 3), |(v, d)| {
        let sign = if labels[v] == 0 { 1.0 } else { -1.0 };
        let centre = if d == 0 { sign } else { 0.0 };
        centre + rng.random_range(-1.0..1.0)
    });
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = AttributedGraph::new(x, edges).unwrap();
    let train: Vec<usize> = (0..n).filter(|v| v % 3 != 2).collect();
    let val: Vec<usize> = (0..n).filter(|v| v % 3 == 2).collect();
    let split = LabeledSplit::new(labels.into_iter().map(Some).collect(), 2, train, val, vec![]).unwrap();
    (graph, split)
}

pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    diff.dot(&diff).sqrt() / b.dot(b).sqrt()
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}
