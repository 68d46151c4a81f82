//! Seeded stochastic-block-model graphs with planted inter-class noise edges.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{emit_dataset, Dataset};
use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, Edge, LabeledSplit};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Planted inter-class edges, as a fraction of the block-model edge count.
    pub noise_rate: f64,
    pub feature_dim: usize,
    /// Distance between class means, in units of the per-coordinate noise.
    pub separation: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 2,
            nodes_per_block: 100,
            p_in: 0.05,
            p_out: 0.005,
            noise_rate: 0.1,
            feature_dim: 16,
            separation: 1.8,
            train_per_class: 20,
            val_per_class: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Inter-class edges added on top of the block model.
    pub planted: Vec<Edge>,
    pub config: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    config: SynthConfig,
    planted_edges: Vec<(usize, usize)>,
}

impl SyntheticDataset {
    /// Writes the bundle plus `ground_truth.json` listing the planted edges.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        emit_dataset(dir, &self.dataset)?;
        let truth = GroundTruth {
            config: self.config.clone(),
            planted_edges: self.planted.iter().map(|e| e.endpoints()).collect(),
        };
        std::fs::write(dir.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(&truth)?)?;
        Ok(())
    }

    pub fn is_planted(&self, e: Edge) -> bool {
        self.planted.binary_search(&e).is_ok()
    }
}

/// Planted edges recorded next to a bundle.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<Edge>> {
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(dir.join(GROUND_TRUTH_FILE))?)?;
    truth.planted_edges.into_iter().map(|(a, b)| Edge::new(a, b)).collect()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    let c = config;
    let prob = |p: f64| (0.0..=1.0).contains(&p);
    if !prob(c.p_in) || !prob(c.p_out) || c.p_in <= c.p_out {
        return Err(Error::Validation(format!(
            "need 0 ≤ p_out < p_in ≤ 1, got p_in={} p_out={}",
            c.p_in, c.p_out
        )));
    }
    if c.blocks == 0 || c.feature_dim == 0 || !(c.noise_rate >= 0.0) {
        return Err(Error::Validation("blocks and feature_dim must be positive, noise_rate non-negative".into()));
    }
    if c.train_per_class + c.val_per_class > c.nodes_per_block {
        return Err(Error::Validation(format!(
            "{} nodes per block cannot hold {} train + {} val",
            c.nodes_per_block, c.train_per_class, c.val_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let n = c.blocks * c.nodes_per_block;
    let block = |v: usize| v / c.nodes_per_block;

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { c.p_in } else { c.p_out };
            if rng.random::<f64>() < p {
                edges.push(Edge::new(i, j)?);
            }
        }
    }
    let mut planted = Vec::new();
    if c.blocks > 1 {
        let target = (c.noise_rate * edges.len() as f64).round() as usize;
        let existing: std::collections::BTreeSet<Edge> = edges.iter().copied().collect();
        let capacity = n * n / 2;
        let mut attempts = 0;
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < target && attempts < 100 * capacity {
            attempts += 1;
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if block(a) == block(b) {
                continue;
            }
            let e = Edge::new(a, b)?;
            if !existing.contains(&e) {
                chosen.insert(e);
            }
        }
        planted = chosen.into_iter().collect();
    }

    let means: Vec<Vec<f64>> = (0..c.blocks)
        .map(|_| {
            let raw: Vec<f64> = (0..c.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            // pairs of random unit directions sit about √2 apart
            raw.iter().map(|x| x / len * c.separation / std::f64::consts::SQRT_2).collect()
        })
        .collect();
    let mut features = Array2::zeros((n, c.feature_dim));
    for v in 0..n {
        for d in 0..c.feature_dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[v, d]] = means[block(v)][d] + noise;
        }
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..c.blocks {
        let mut members: Vec<usize> = (b * c.nodes_per_block..(b + 1) * c.nodes_per_block).collect();
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..c.train_per_class]);
        val.extend_from_slice(&members[c.train_per_class..c.train_per_class + c.val_per_class]);
        test.extend_from_slice(&members[c.train_per_class + c.val_per_class..]);
    }
    for set in [&mut train, &mut val, &mut test] {
        set.sort_unstable();
    }

    let labels = (0..n).map(|v| Some(block(v))).collect();
    let split = LabeledSplit::new(labels, c.blocks, train, val, test)?;
    let graph = AttributedGraph::new(features, edges.iter().chain(&planted).map(|e| e.endpoints()))?;
    Ok(SyntheticDataset {
        dataset: Dataset { graph, split },
        planted,
        config: c.clone(),
    })
}
