mod common;

use common::{dense_propagate, DenseSoftmax};
use nalgebra::{DVector, Matrix3, Vector3};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgc_influence::bounds::{
    bound_for, edge_error_bound, estimate_lipschitz_c, lambda_sweep, BoundInputs, HessianOperator,
    LipschitzConstant, LipschitzSource, SweepPlan,
};
use sgc_influence::graph::{AttributedGraph, Edge, LabeledSplit};
use sgc_influence::influence::estimate;
use sgc_influence::model::TrainConfig;
use sgc_influence::oracle::Experiment;
use sgc_influence::perturbation::Target;

/// Mean binary logistic loss over fixed points `a_i = (x1, x2, 1)`.
struct BinaryLogistic {
    points: Vec<Vector3<f64>>,
    lambda: f64,
    center: Vector3<f64>,
}

impl BinaryLogistic {
    fn hessian(&self, theta: &Vector3<f64>) -> Matrix3<f64> {
        let mut h = Matrix3::identity() * self.lambda;
        for a in &self.points {
            let s = 1.0 / (1.0 + (-theta.dot(a)).exp());
            h += a * a.transpose() * (s * (1.0 - s) / self.points.len() as f64);
        }
        h
    }
}

impl HessianOperator for BinaryLogistic {
    fn dim(&self) -> usize {
        3
    }

    fn center(&self) -> Array1<f64> {
        Array1::from_iter(self.center.iter().copied())
    }

    fn hvp(&self, theta: &Array1<f64>, v: &Array1<f64>) -> Array1<f64> {
        let h = self.hessian(&Vector3::new(theta[0], theta[1], theta[2]));
        Array1::from_iter((h * Vector3::new(v[0], v[1], v[2])).iter().copied())
    }
}

fn spectral_norm(m: Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().amax()
}

/// Largest Hessian difference quotient between neighbouring points of a cubic
/// grid with spacing `step`, restricted to the ball of `radius`.
fn grid_lipschitz(op: &BinaryLogistic, radius: f64, step: f64) -> f64 {
    let m = (radius / step).round() as i64;
    let inside = |i: i64, j: i64, l: i64| (i * i + j * j + l * l) as f64 * step * step <= radius * radius + 1e-12;
    let point = |i: i64, j: i64, l: i64| op.center + Vector3::new(i as f64, j as f64, l as f64) * step;
    let mut dirs = Vec::new();
    for di in -1..=1i64 {
        for dj in -1..=1i64 {
            for dl in -1..=1i64 {
                if (di, dj, dl) > (0, 0, 0) {
                    dirs.push((di, dj, dl));
                }
            }
        }
    }
    let mut best = 0.0f64;
    for i in -m..=m {
        for j in -m..=m {
            for l in -m..=m {
                if !inside(i, j, l) {
                    continue;
                }
                let h = op.hessian(&point(i, j, l));
                for &(di, dj, dl) in &dirs {
                    if !inside(i + di, j + dj, l + dl) {
                        continue;
                    }
                    let h2 = op.hessian(&point(i + di, j + dj, l + dl));
                    let dist = (((di * di + dj * dj + dl * dl) as f64).sqrt()) * step;
                    best = best.max(spectral_norm(h - h2) / dist);
                }
            }
        }
    }
    best
}

fn logistic_instance() -> BinaryLogistic {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let points = (0..8)
        .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 1.0))
        .collect();
    BinaryLogistic {
        points,
        lambda: 0.1,
        center: Vector3::new(0.5, -0.3, 0.2),
    }
}

#[test]
fn lipschitz_estimate_within_factor_two_of_grid_search() {
    let op = logistic_instance();
    let radius = 0.3;
    let brute = grid_lipschitz(&op, radius, 1e-2);
    let est = estimate_lipschitz_c(&op, 200, radius, 0).unwrap().value;
    assert!(est <= 2.0 * brute && est >= brute / 2.0, "estimate {est} vs grid {brute}");
}

#[test]
fn lipschitz_estimate_grows_with_probe_count() {
    let op = logistic_instance();
    let mut last = 0.0;
    for probes in [2, 5, 10, 40, 80] {
        let c = estimate_lipschitz_c(&op, probes, 0.3, 3).unwrap().value;
        assert!(c >= last, "{probes} probes: {c} < {last}");
        last = c;
    }
}

/// Ten nodes, one feature, two classes: four parameters.
fn binary_instance() -> (AttributedGraph, LabeledSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let labels: Vec<usize> = (0..10).map(|v| v % 2).collect();
    let x = Array2::from_shape_fn((10, 1), |(v, _)| {
        let centre = if labels[v] == 0 { 1.0 } else { -1.0 };
        centre + rng.random_range(-1.2..1.2)
    });
    let mut edges = Vec::new();
    for i in 0..10 {
        for j in i + 1..10 {
            if rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let graph = AttributedGraph::new(x, edges).unwrap();
    let train: Vec<usize> = (0..10).filter(|v| v % 3 != 2).collect();
    let val: Vec<usize> = (0..10).filter(|v| v % 3 == 2).collect();
    let split = LabeledSplit::new(labels.into_iter().map(Some).collect(), 2, train, val, vec![]).unwrap();
    (graph, split)
}

/// Hessian Lipschitz constant over the box spanned by `thetas`, by grid search.
///
/// With two classes the Hessian depends on θ only through the class
/// difference `d = (w0 − w1, b0 − b1)`, and `‖Δd‖ ≤ √2‖Δθ‖` with equality for
/// antisymmetric steps, so `C_θ = √2 · C_d`.
fn brute_force_binary_c(dense: &DenseSoftmax, thetas: &[Array1<f64>], step: f64) -> f64 {
    let diffs: Vec<(f64, f64)> = thetas.iter().map(|t| (t[0] - t[2], t[1] - t[3])).collect();
    let pad = 0.05;
    let lo = |f: fn(&(f64, f64)) -> f64| diffs.iter().map(f).fold(f64::INFINITY, f64::min) - pad;
    let hi = |f: fn(&(f64, f64)) -> f64| diffs.iter().map(f).fold(f64::NEG_INFINITY, f64::max) + pad;
    let (w0, w1, b0, b1) = (lo(|d| d.0), hi(|d| d.0), lo(|d| d.1), hi(|d| d.1));
    let nw = ((w1 - w0) / step).ceil() as usize;
    let nb = ((b1 - b0) / step).ceil() as usize;
    let h = |i: usize, j: usize| dense.hessian(&DVector::from_vec(vec![w0 + i as f64 * step, b0 + j as f64 * step, 0.0, 0.0]));
    let grid: Vec<Vec<_>> = (0..=nw).map(|i| (0..=nb).map(|j| h(i, j)).collect()).collect();
    let mut best = 0.0f64;
    for i in 0..=nw {
        for j in 0..=nb {
            for (di, dj) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                let (a, b) = (i as i64 + di, j as i64 + dj);
                if a < 0 || b < 0 || a > nw as i64 || b > nb as i64 {
                    continue;
                }
                let diff = &grid[i][j] - &grid[a as usize][b as usize];
                let norm = diff.symmetric_eigenvalues().amax();
                let dist = ((di * di + dj * dj) as f64).sqrt() * step;
                best = best.max(norm / dist);
            }
        }
    }
    std::f64::consts::SQRT_2 * best
}

#[test]
fn bound_dominates_observed_error_with_brute_forced_constant() {
    let (graph, split) = binary_instance();
    let exp = Experiment::fit(&graph, &split, 2, TrainConfig::new(0.1), split.val.clone()).unwrap();
    let deltas = exp.deltas();
    let edges: Vec<Edge> = graph.edges().collect();
    let actuals: Vec<_> = edges.iter().map(|&e| exp.retrain(Target::Edge(e)).unwrap()).collect();
    let mut thetas = vec![exp.model.params.flat().clone()];
    thetas.extend(actuals.iter().map(|a| exp.model.params.flat() + &a.param_change));
    let dense = DenseSoftmax::from_split(&dense_propagate(&graph, 2), &split, 0.1);
    let c = brute_force_binary_c(&dense, &thetas, 1e-2);
    assert!(c > 0.0);
    for (&e, actual) in edges.iter().zip(&actuals) {
        let delta = deltas.edge_removal(e).unwrap();
        let est = estimate(&exp.model, &delta, None).unwrap();
        let observed = (&actual.param_change - &est.param_change).mapv(|x| x * x).sum().sqrt();
        let report = bound_for(&exp.model, &delta, LipschitzConstant::supplied(c), Some(actual.sigma_min)).unwrap();
        assert!(report.bound >= observed, "{e}: bound {} < observed {observed}", report.bound);
    }
}

#[test]
fn bound_is_non_increasing_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let base = BoundInputs {
            n,
            lambda: 0.0,
            affected_count: rng.random_range(0..=n),
            sigma_min: rng.random_range(0.0..1.0),
            sigma_min_prime: Some(rng.random_range(0.0..1.0)),
            lipschitz: LipschitzConstant::supplied(rng.random_range(0.0..5.0)),
            grad_diff_norm: rng.random_range(0.0..3.0),
        };
        let mut last = f64::INFINITY;
        for lambda in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let b = edge_error_bound(&BoundInputs { lambda, ..base.clone() }).unwrap().bound;
            assert!(b <= last);
            last = b;
        }
    }
}

#[test]
fn isolated_non_training_node_has_zero_bound() {
    let x = Array2::from_shape_fn((5, 2), |(i, j)| (i * 3 + j) as f64 * 0.2 - 0.7);
    let graph = AttributedGraph::new(x, [(0, 1), (1, 2), (2, 3)]).unwrap();
    let labels = vec![Some(0), Some(1), Some(0), Some(1), Some(1)];
    let split = LabeledSplit::new(labels, 2, vec![0, 1, 2, 3], vec![4], vec![]).unwrap();
    let exp = Experiment::fit(&graph, &split, 2, TrainConfig::new(0.1), vec![4]).unwrap();
    let delta = exp.deltas().node_removal(4).unwrap();
    let report = bound_for(&exp.model, &delta, LipschitzConstant::supplied(3.0), None).unwrap();
    assert_eq!(report.bound, 0.0);
    assert_eq!(report.removed_grad_norm, Some(0.0));
}

#[test]
fn single_lambda_single_edge_sweep() {
    let (graph, split) = binary_instance();
    let edge = graph.edges().nth(1).unwrap();
    let plan = SweepPlan {
        graph: &graph,
        split: &split,
        k: 2,
        base: TrainConfig::default(),
        lambdas: vec![0.1],
        edges: vec![edge],
        eval_set: split.val.clone(),
        lipschitz: LipschitzSource::Supplied(1.0),
    };
    let records = lambda_sweep(&plan);
    assert_eq!(records.len(), 1);
    let rec = &records[0];
    assert!(rec.error.is_none());
    assert_eq!(rec.rows.len(), 1);
    let row = &rec.rows[0];
    assert_eq!(row.edge, edge);
    assert!(row.estimated.is_finite() && row.actual.is_finite());
    assert!(rec.rho.is_none());
    let (a, b) = edge.endpoints();
    assert_eq!(row.degree_sum, graph.degree(a) + graph.degree(b));
    assert_eq!(row.bound.observed_err, Some(row.observed_err));
}
