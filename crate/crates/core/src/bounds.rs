//! Upper bounds on `‖I* − I‖₂` for edge and node removals, and the λ sweep
//! that checks them against retraining.

use std::io::Write;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, Edge, LabeledSplit};
use crate::influence::{estimate, gradient_change};
use crate::linalg::norm;
use crate::model::{sample_gradient, ModelParams, SgcModel, TrainConfig};
use crate::oracle::{spearman, Experiment};
use crate::perturbation::{PerturbationDelta, Target};

/// Where the Lipschitz constant of the Hessian came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CProvenance {
    Supplied,
    /// Sampled lower estimate; see [`estimate_lipschitz_c`].
    Estimated { num_probes: usize, radius: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzConstant {
    pub value: f64,
    pub provenance: CProvenance,
}

impl LipschitzConstant {
    pub fn supplied(value: f64) -> Self {
        Self {
            value,
            provenance: CProvenance::Supplied,
        }
    }
}

/// Whether `σ'_min` came from a retrained model or was set equal to `σ_min`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaPrimeSource {
    Retrained,
    APriori,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    pub lambda: f64,
    pub n: usize,
    /// `|L|` or `|S|`.
    pub affected_count: usize,
    pub sigma_min: f64,
    pub sigma_min_prime: f64,
    pub sigma_prime_source: SigmaPrimeSource,
    pub lipschitz: LipschitzConstant,
    /// Norm of the summed gradient differences over the affected set.
    pub grad_diff_norm: f64,
    pub m: Option<f64>,
    /// Gradient norm of a removed training node, 0 otherwise.
    pub removed_grad_norm: Option<f64>,
    pub term1: f64,
    pub term2: f64,
    pub term3: Option<f64>,
    pub term4: Option<f64>,
    pub bound: f64,
    pub observed_err: Option<f64>,
}

/// Everything the bound formulas consume.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs {
    pub n: usize,
    pub lambda: f64,
    pub affected_count: usize,
    pub sigma_min: f64,
    /// `None` substitutes `σ_min` and marks the bound a-priori.
    pub sigma_min_prime: Option<f64>,
    pub lipschitz: LipschitzConstant,
    pub grad_diff_norm: f64,
}

impl BoundInputs {
    fn check(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.affected_count <= self.n
            && self.lipschitz.value >= 0.0
            && self.sigma_min >= 0.0
            && self.sigma_min_prime.is_none_or(|s| s >= 0.0)
            && self.grad_diff_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("bound inputs out of range: {self:?}")))
        }
    }

    fn sigma_prime(&self) -> (f64, SigmaPrimeSource) {
        match self.sigma_min_prime {
            Some(s) => (s, SigmaPrimeSource::Retrained),
            None => (self.sigma_min, SigmaPrimeSource::APriori),
        }
    }
}

fn positive(d: f64) -> Result<f64> {
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::DegenerateDenominator(d))
    }
}

/// Edge-removal bound: `term1 + term2` with `g = grad_diff_norm`,
///
/// `term1 = N³C g² / (Nλ + (N−|L|)σ + σ'|L|)³`,
/// `term2 = N g / (Nλ + (N−|L|)σ + min(σ, σ')|L|)`.
pub fn edge_error_bound(inputs: &BoundInputs) -> Result<ErrorBoundReport> {
    inputs.check()?;
    let n = inputs.n as f64;
    let l = inputs.affected_count as f64;
    let (s, sp) = (inputs.sigma_min, inputs.sigma_prime());
    let c = inputs.lipschitz.value;
    let g = inputs.grad_diff_norm;
    let d1 = positive(n * inputs.lambda + (n - l) * s + sp.0 * l)?;
    let d2 = positive(n * inputs.lambda + (n - l) * s + s.min(sp.0) * l)?;
    let term1 = n.powi(3) * c / d1.powi(3) * g * g;
    let term2 = n / d2 * g;
    Ok(ErrorBoundReport {
        lambda: inputs.lambda,
        n: inputs.n,
        affected_count: inputs.affected_count,
        sigma_min: s,
        sigma_min_prime: sp.0,
        sigma_prime_source: sp.1,
        lipschitz: inputs.lipschitz.clone(),
        grad_diff_norm: g,
        m: None,
        removed_grad_norm: None,
        term1,
        term2,
        term3: None,
        term4: None,
        bound: term1 + term2,
        observed_err: None,
    })
}

/// Node-removal bound with `m = grad_diff_norm` (the full objective-gradient
/// change, removed sample included) and `r = removed_grad_norm`:
///
/// `N³m²C/((N−1)λ + (N−|S|)σ + σ'|S|)³ + (N−1)m/(Nλ + (N−|S|)σ + min(σ,σ')|S|)`
/// `+ N³C r²/(Nλ + (N−1)σ)³ + N r/(Nλ + Nσ)`.
pub fn node_error_bound(inputs: &BoundInputs, removed_grad_norm: f64) -> Result<ErrorBoundReport> {
    inputs.check()?;
    if !(removed_grad_norm >= 0.0) || inputs.n == 0 {
        return Err(Error::Validation("node bound needs N ≥ 1 and a non-negative gradient norm".into()));
    }
    let n = inputs.n as f64;
    let s_count = inputs.affected_count as f64;
    let (s, sp) = (inputs.sigma_min, inputs.sigma_prime());
    let c = inputs.lipschitz.value;
    let m = inputs.grad_diff_norm;
    let r = removed_grad_norm;
    let lambda = inputs.lambda;
    let d1 = positive((n - 1.0) * lambda + (n - s_count) * s + sp.0 * s_count)?;
    let d2 = positive(n * lambda + (n - s_count) * s + s.min(sp.0) * s_count)?;
    let d3 = positive(n * lambda + (n - 1.0) * s)?;
    let d4 = positive(n * lambda + n * s)?;
    let term1 = n.powi(3) * m * m * c / d1.powi(3);
    let term2 = (n - 1.0) * m / d2;
    let term3 = n.powi(3) * c / d3.powi(3) * r * r;
    let term4 = n / d4 * r;
    Ok(ErrorBoundReport {
        lambda,
        n: inputs.n,
        affected_count: inputs.affected_count,
        sigma_min: s,
        sigma_min_prime: sp.0,
        sigma_prime_source: sp.1,
        lipschitz: inputs.lipschitz.clone(),
        grad_diff_norm: m,
        m: Some(m),
        removed_grad_norm: Some(r),
        term1,
        term2,
        term3: Some(term3),
        term4: Some(term4),
        bound: term1 + term2 + term3 + term4,
        observed_err: None,
    })
}

/// Bound for one removal on a fitted model. `sigma_min_prime` comes from a
/// retrained model when one is available.
pub fn bound_for(
    model: &SgcModel,
    delta: &PerturbationDelta,
    lipschitz: LipschitzConstant,
    sigma_min_prime: Option<f64>,
) -> Result<ErrorBoundReport> {
    let g = gradient_change(model, delta)?;
    let removed = match delta.target {
        Target::Node(v) | Target::Sample(v) => Some(v),
        Target::Edge(_) => None,
    };
    let affected_count = delta
        .support()
        .filter(|&v| Some(v) != removed && model.train_row(v).is_some())
        .count();
    let inputs = BoundInputs {
        n: model.num_train(),
        lambda: model.lambda(),
        affected_count,
        sigma_min: model.sigma_min(),
        sigma_min_prime,
        lipschitz,
        grad_diff_norm: norm(&g),
    };
    match delta.target {
        Target::Edge(_) => edge_error_bound(&inputs),
        Target::Node(v) | Target::Sample(v) => {
            let r = model.train_row(v).map_or(0.0, |row| {
                norm(&sample_gradient(&model.params, model.data.z.row(row), model.data.labels[row]))
            });
            node_error_bound(&inputs, r)
        }
    }
}

/// A twice-differentiable objective whose Hessian can be applied at any point.
pub trait HessianOperator {
    fn dim(&self) -> usize;
    /// Point the probes are centred on.
    fn center(&self) -> Array1<f64>;
    fn hvp(&self, theta: &Array1<f64>, v: &Array1<f64>) -> Array1<f64>;
}

impl HessianOperator for SgcModel {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn center(&self) -> Array1<f64> {
        self.params.flat().clone()
    }

    fn hvp(&self, theta: &Array1<f64>, v: &Array1<f64>) -> Array1<f64> {
        let p = ModelParams::from_flat(theta.clone(), self.params.feature_dim(), self.params.num_classes())
            .expect("probe point has the model's shape");
        self.data.hessian_vector_product(&p, self.config.lambda, v)
    }
}

const POWER_ITERATIONS: usize = 50;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let len = norm(&v);
        if len > 1e-12 {
            return v / len;
        }
    }
}

/// Largest `‖H(θ₁) − H(θ₂)‖_op / ‖θ₁ − θ₂‖` over `num_probes` sampled pairs.
///
/// Each pair is a point `θ₁` drawn uniformly from the ball of `radius` around
/// the centre and `θ₂ = θ₁ + radius/10 · u` for a random unit `u`. Operator
/// norms come from power iteration on the Hessian difference. The result is a
/// lower estimate of the local constant. Probes are drawn in sequence from one
/// seeded stream, so the estimate never decreases as `num_probes` grows.
pub fn estimate_lipschitz_c<H: HessianOperator>(op: &H, num_probes: usize, radius: f64, seed: u64) -> Result<LipschitzConstant> {
    if num_probes < 2 || !(radius > 0.0) {
        return Err(Error::Validation("need num_probes ≥ 2 and a positive radius".into()));
    }
    let dim = op.dim();
    let center = op.center();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..num_probes {
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        let t1 = &center + &(r * &random_unit(&mut rng, dim));
        let step = random_unit(&mut rng, dim) * (radius / 10.0);
        let t2 = &t1 + &step;
        let diff = |x: &Array1<f64>| op.hvp(&t1, x) - op.hvp(&t2, x);
        let mut x = random_unit(&mut rng, dim);
        let mut op_norm = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let y = diff(&x);
            op_norm = norm(&y);
            if op_norm == 0.0 {
                break;
            }
            x = y / op_norm;
        }
        best = best.max(op_norm / norm(&step));
    }
    Ok(LipschitzConstant {
        value: best,
        provenance: CProvenance::Estimated {
            num_probes,
            radius,
            seed,
        },
    })
}

/// How each λ in a sweep obtains `C`.
#[derive(Clone, Debug, PartialEq)]
pub enum LipschitzSource {
    Supplied(f64),
    Estimate { num_probes: usize, radius: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub edge: Edge,
    pub degree_sum: usize,
    pub estimated: f64,
    pub actual: f64,
    pub observed_err: f64,
    pub bound: ErrorBoundReport,
}

#[derive(Debug)]
pub struct SweepRecord {
    pub lambda: f64,
    pub rows: Vec<SweepRow>,
    pub rho: Option<f64>,
    pub lipschitz: Option<LipschitzConstant>,
    /// Set when training or an estimate failed for this λ; the sweep carries on.
    pub error: Option<Error>,
}

impl SweepRecord {
    pub fn mean_observed_err(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.observed_err))
    }

    pub fn mean_bound(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.bound.bound))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Inputs of a λ sweep.
#[derive(Clone, Debug)]
pub struct SweepPlan<'a> {
    pub graph: &'a AttributedGraph,
    pub split: &'a LabeledSplit,
    pub k: usize,
    /// Tolerance and iteration cap; `lambda` is overridden per record.
    pub base: TrainConfig,
    pub lambdas: Vec<f64>,
    pub edges: Vec<Edge>,
    pub eval_set: Vec<usize>,
    pub lipschitz: LipschitzSource,
}

/// Retrains at each λ, estimates and retrains every edge, and evaluates its bound.
pub fn lambda_sweep(plan: &SweepPlan<'_>) -> Vec<SweepRecord> {
    plan.lambdas
        .iter()
        .map(|&lambda| {
            sweep_one(plan, TrainConfig { lambda, ..plan.base }).unwrap_or_else(|e| SweepRecord {
                lambda,
                rows: Vec::new(),
                rho: None,
                lipschitz: None,
                error: Some(e),
            })
        })
        .collect()
}

fn sweep_one(plan: &SweepPlan<'_>, config: TrainConfig) -> Result<SweepRecord> {
    let exp = Experiment::fit(plan.graph, plan.split, plan.k, config, plan.eval_set.clone())?;
    let c = match plan.lipschitz {
        LipschitzSource::Supplied(v) => LipschitzConstant::supplied(v),
        LipschitzSource::Estimate {
            num_probes,
            radius,
            seed,
        } => estimate_lipschitz_c(&exp.model, num_probes, radius, seed)?,
    };
    let probe = exp.probe()?;
    let deltas = exp.deltas();
    let mut rows = Vec::with_capacity(plan.edges.len());
    for &edge in &plan.edges {
        let delta = deltas.edge_removal(edge)?;
        let est = estimate(&exp.model, &delta, Some(&probe))?;
        let actual = exp.retrain(Target::Edge(edge))?;
        let observed_err = norm(&(&actual.param_change - &est.param_change));
        let mut bound = bound_for(&exp.model, &delta, c.clone(), Some(actual.sigma_min))?;
        bound.observed_err = Some(observed_err);
        let (a, b) = edge.endpoints();
        rows.push(SweepRow {
            lambda: config.lambda,
            edge,
            degree_sum: plan.graph.degree(a) + plan.graph.degree(b),
            estimated: est.eval_change.unwrap_or(f64::NAN),
            actual: actual.eval_change,
            observed_err,
            bound,
        });
    }
    let est: Vec<f64> = rows.iter().map(|r| r.estimated).collect();
    let act: Vec<f64> = rows.iter().map(|r| r.actual).collect();
    Ok(SweepRecord {
        lambda: config.lambda,
        rho: spearman(&est, &act).ok(),
        rows,
        lipschitz: Some(c),
        error: None,
    })
}

/// Writes `lambda,edge_i,edge_j,degree_sum,estimated,actual,observed_err,bound,term1,term2`.
pub fn write_sweep_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        lambda: f64,
        edge_i: usize,
        edge_j: usize,
        degree_sum: usize,
        estimated: f64,
        actual: f64,
        observed_err: f64,
        bound: f64,
        term1: f64,
        term2: f64,
    }
    let mut w = csv::Writer::from_writer(out);
    for rec in records {
        for r in &rec.rows {
            let (i, j) = r.edge.endpoints();
            w.serialize(Row {
                lambda: r.lambda,
                edge_i: i,
                edge_j: j,
                degree_sum: r.degree_sum,
                estimated: r.estimated,
                actual: r.actual,
                observed_err: r.observed_err,
                bound: r.bound.bound,
                term1: r.bound.term1,
                term2: r.bound.term2,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
