//! Ground truth by retraining, plus rank correlation for comparing it with estimates.

use std::io::Write;

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{propagate, AttributedGraph, EmbeddingMatrix, LabeledSplit};
use crate::influence::{batch_influences, make_eval_probe, EvalProbe, InfluenceEstimate};
use crate::linalg::norm;
use crate::model::{total_loss, train, ModelParams, SgcModel, TrainConfig, TrainingData};
use crate::perturbation::{DeltaContext, Target};

/// A fitted model on an unedited graph, with a designated evaluation set.
///
/// Evaluation losses are always measured on the original embeddings, so
/// actual and estimated loss changes both isolate the effect of the
/// parameter change.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub graph: &'a AttributedGraph,
    pub split: &'a LabeledSplit,
    pub config: TrainConfig,
    pub embedding: EmbeddingMatrix,
    pub model: SgcModel,
    pub eval_set: Vec<usize>,
    /// Start retrains from `θ̂` instead of zero. Same tolerance either way.
    pub warm_start: bool,
    /// Refit a removed training node's objective as the mean over `N − 1`
    /// samples. Off by default: the remaining terms keep weight `1/N`,
    /// which is the counterfactual the influence estimates describe.
    pub renormalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActualInfluence {
    pub target: Target,
    /// `θ̂(−·) − θ̂`.
    pub param_change: Array1<f64>,
    /// Retrained minus original evaluation loss.
    pub eval_change: f64,
    pub retrain_iters: usize,
    /// Smallest per-sample Hessian eigenvalue at the retrained parameters.
    pub sigma_min: f64,
}

impl<'a> Experiment<'a> {
    pub fn fit(
        graph: &'a AttributedGraph,
        split: &'a LabeledSplit,
        k: usize,
        config: TrainConfig,
        eval_set: Vec<usize>,
    ) -> Result<Self> {
        if split.num_nodes() != graph.num_nodes() {
            return Err(Error::Validation(format!(
                "split covers {} nodes but the graph has {}",
                split.num_nodes(),
                graph.num_nodes()
            )));
        }
        let embedding = propagate(graph, k);
        let model = train(&embedding, split, &config)?;
        Ok(Self {
            graph,
            split,
            config,
            embedding,
            model,
            eval_set,
            warm_start: false,
            renormalize: false,
        })
    }

    pub fn k(&self) -> usize {
        self.model.k
    }

    pub fn deltas(&self) -> DeltaContext<'a> {
        DeltaContext::with_embedding(self.graph, self.embedding.clone())
    }

    pub fn probe(&self) -> Result<EvalProbe> {
        make_eval_probe(&self.model, &self.embedding, self.split, &self.eval_set)
    }

    pub fn eval_loss(&self, params: &ModelParams, skip: Option<usize>) -> f64 {
        let nodes: Vec<usize> = self.eval_set.iter().copied().filter(|&v| Some(v) != skip).collect();
        total_loss(params, &self.embedding, &nodes, self.split)
    }

    /// Applies the removal, re-propagates, and refits with the same configuration.
    pub fn retrain(&self, target: Target) -> Result<ActualInfluence> {
        let (embedding, split, skip) = match target {
            Target::Edge(e) => (propagate(&self.graph.remove_edge(e)?, self.k()), self.split.clone(), None),
            Target::Node(v) => (
                propagate(&self.graph.remove_node(v)?, self.k()),
                self.split.without_train_node(v),
                Some(v),
            ),
            Target::Sample(v) => {
                if !self.split.is_train(v) {
                    return Err(Error::Validation(format!("node {v} is not a training node")));
                }
                (self.embedding.clone(), self.split.without_train_node(v), None)
            }
        };
        let mut data = TrainingData::from_split(&embedding, &split)?;
        if !self.renormalize {
            let w = 1.0 / self.model.num_train() as f64;
            data.weights.iter_mut().for_each(|x| *x = w);
        }
        let init = if self.warm_start {
            self.model.params.clone()
        } else {
            ModelParams::zeros(data.feature_dim(), data.num_classes)
        };
        let (params, retrain_iters) = data.fit(&self.config, init)?;
        let eval_change = self.eval_loss(&params, skip) - self.eval_loss(&self.model.params, skip);
        Ok(ActualInfluence {
            target,
            param_change: params.flat() - self.model.params.flat(),
            eval_change,
            retrain_iters,
            sigma_min: data.per_sample_hessian_sigma_min(&params),
        })
    }

    /// `(θ̂(ε) − θ̂)/ε` where sample `v`'s weight drops from `1/N` to `1/N − ε`.
    ///
    /// Negative `ε` up-weights instead. The limit `ε → 0` is `H⁻¹ ∇ℓ(z_v)`.
    pub fn epsilon_downweight_probe(&self, v: usize, epsilon: f64) -> Result<Array1<f64>> {
        let row = self
            .model
            .train_row(v)
            .ok_or_else(|| Error::Validation(format!("node {v} is not a training node")))?;
        let n = self.model.num_train() as f64;
        if epsilon == 0.0 || epsilon.abs() >= 1.0 / n {
            return Err(Error::Validation(format!("epsilon must satisfy 0 < |ε| < 1/N, got {epsilon}")));
        }
        let mut data = self.model.data.clone();
        data.weights[row] -= epsilon;
        let config = TrainConfig {
            grad_tol: self.config.grad_tol.min(1e-13),
            ..self.config
        };
        let (params, _) = data.fit(&config, self.model.params.clone())?;
        Ok((params.flat() - self.model.params.flat()) / epsilon)
    }

    /// Average of the probes at `+ε` and `−ε`; the first-order error cancels.
    pub fn central_epsilon_probe(&self, v: usize, epsilon: f64) -> Result<Array1<f64>> {
        let up = self.epsilon_downweight_probe(v, epsilon)?;
        let down = self.epsilon_downweight_probe(v, -epsilon)?;
        Ok((up + down) / 2.0)
    }
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DegenerateInput(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two pairs".into()));
    }
    if xs.iter().chain(ys).any(|x| x.is_nan()) {
        return Err(Error::DegenerateInput("NaN in input".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant input has no ranking".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Seeded choice of `n` distinct targets; all of them if `n` is at least the pool size.
pub fn sample_targets(pool: &[Target], n: usize, seed: u64) -> Vec<Target> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose_multiple(&mut rng, n.min(pool.len())).copied().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub target: Target,
    pub estimated: f64,
    pub actual: f64,
    pub estimated_param_norm: f64,
    pub actual_param_norm: f64,
    /// `‖I* − I‖₂`.
    pub param_error: f64,
}

#[derive(Debug)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub failures: Vec<(Target, Error)>,
    /// `None` when the ranking is undefined (fewer than two rows or a constant column).
    pub rho: Option<f64>,
}

impl ValidationReport {
    pub fn n_targets(&self) -> usize {
        self.rows.len() + self.failures.len()
    }

    pub fn estimated(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.estimated).collect()
    }

    pub fn actual(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.actual).collect()
    }

    pub fn spearman(&self) -> Result<f64> {
        spearman(&self.estimated(), &self.actual())
    }

    pub fn write_scatter_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            target_type: &'static str,
            target_a: usize,
            target_b: Option<usize>,
            estimated: f64,
            actual: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            let (a, b) = r.target.columns();
            w.serialize(Row {
                target_type: r.target.kind(),
                target_a: a,
                target_b: b,
                estimated: r.estimated,
                actual: r.actual,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> ValidationSummary {
        ValidationSummary {
            rho: self.rho,
            n_targets: self.n_targets(),
            n_failed: self.failures.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub rho: Option<f64>,
    pub n_targets: usize,
    pub n_failed: usize,
}

/// Estimates every target, retrains for each, and correlates the loss changes.
pub fn validate_influence(exp: &Experiment<'_>, targets: &[Target]) -> Result<ValidationReport> {
    if targets.is_empty() {
        return Err(Error::Validation("no targets to validate".into()));
    }
    let probe = exp.probe()?;
    let estimates = batch_influences(&exp.model, &exp.deltas(), targets, Some(&probe));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&target, est) in targets.iter().zip(estimates) {
        match est.and_then(|e| exp.retrain(target).map(|a| (e, a))) {
            Ok((e, a)) => rows.push(compare(&e, &a)),
            Err(err) => failures.push((target, err)),
        }
    }
    let mut report = ValidationReport {
        rows,
        failures,
        rho: None,
    };
    report.rho = report.spearman().ok();
    Ok(report)
}

fn compare(est: &InfluenceEstimate, actual: &ActualInfluence) -> ValidationRow {
    ValidationRow {
        target: est.target,
        estimated: est.eval_change.unwrap_or(f64::NAN),
        actual: actual.eval_change,
        estimated_param_norm: est.param_change_norm(),
        actual_param_norm: norm(&actual.param_change),
        param_error: norm(&(&actual.param_change - &est.param_change)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force Spearman: Pearson correlation of tie-averaged ranks,
    /// where each rank is computed by counting smaller and equal values.
    fn spearman_by_counting(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64], x: f64| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        };
        let rx: Vec<f64> = xs.iter().map(|&x| rank(xs, x)).collect();
        let ry: Vec<f64> = ys.iter().map(|&y| rank(ys, y)).collect();
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0);
        let tied = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((tied - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        let brute = spearman_by_counting(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((tied - brute).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let pool: Vec<Target> = (0..50).map(Target::Node).collect();
        let a = sample_targets(&pool, 10, 7);
        assert_eq!(a, sample_targets(&pool, 10, 7));
        assert_ne!(a, sample_targets(&pool, 10, 8));
        let mut all = sample_targets(&pool, 99, 1);
        all.sort();
        assert_eq!(all, pool);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_counting_oracle(pairs in prop::collection::vec((0i32..6, 0i32..6), 2..20)) {
                let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
                let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
                match spearman(&xs, &ys) {
                    Ok(rho) => prop_assert!((rho - spearman_by_counting(&xs, &ys)).abs() < 1e-12),
                    Err(_) => prop_assert!(xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0])),
                }
            }

            #[test]
            fn invariant_under_monotone_maps(xs in prop::collection::vec(-5.0f64..5.0, 3..15), seed in 0u64..100) {
                let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + (i as u64 * seed % 7) as f64).collect();
                if let Ok(rho) = spearman(&xs, &ys) {
                    let mapped: Vec<f64> = xs.iter().map(|x| x.exp() * 3.0 - 1.0).collect();
                    prop_assert!((rho - spearman(&mapped, &ys).unwrap()).abs() < 1e-12);
                }
            }
        }
    }
}
