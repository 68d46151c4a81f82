//! Dataset bundles on disk.
//!
//! A bundle is a directory with `edges.tsv` (two tab-separated node ids per
//! line, undirected), `features.csv` (one comma-separated row per node),
//! `labels.tsv` (node id, tab, class id) and `splits.json` (integer arrays
//! `train`, `val`, `test`). Node ids are 0-based and dense.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, LabeledSplit};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: AttributedGraph,
    pub split: LabeledSplit,
}

/// Counts observed while reading a bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub num_nodes: usize,
    /// Non-empty lines of `edges.tsv`, before merging duplicates and reversals.
    pub edge_lines: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn parse_error(file: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path, delimiter: u8) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => parse_error(path, 0, format!("{other:?}")),
        })?)
}

fn records(path: &Path, delimiter: u8) -> Result<Vec<(u64, Vec<String>)>> {
    let mut out = Vec::new();
    for rec in reader(path, delimiter)?.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, fields));
    }
    Ok(out)
}

fn parse_pair(path: &Path, line: u64, fields: &[String], what: &str) -> Result<(usize, usize)> {
    if fields.len() != 2 {
        return Err(parse_error(path, line, format!("expected 2 {what} columns, found {}", fields.len())));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_error(path, line, format!("{s:?} is not a non-negative integer")))
    };
    Ok((parse(&fields[0])?, parse(&fields[1])?))
}

/// Reads and validates a bundle.
pub fn ingest_dataset(dir: &Path) -> Result<(Dataset, IngestReport)> {
    let features_path = dir.join(FEATURES_FILE);
    let rows = records(&features_path, b',')?;
    if rows.is_empty() {
        return Err(parse_error(&features_path, 1, "no feature rows"));
    }
    let dim = rows[0].1.len();
    let mut features = Array2::zeros((rows.len(), dim));
    for (r, (line, fields)) in rows.iter().enumerate() {
        if fields.len() != dim {
            return Err(parse_error(
                &features_path,
                *line,
                format!("expected {dim} features, found {}", fields.len()),
            ));
        }
        for (c, f) in fields.iter().enumerate() {
            features[[r, c]] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_error(&features_path, *line, format!("{f:?} is not a finite decimal")))?;
        }
    }
    let n = rows.len();

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (line, fields) in records(&edges_path, b'\t')? {
        let (a, b) = parse_pair(&edges_path, line, &fields, "edge")?;
        if a >= n || b >= n {
            return Err(Error::Validation(format!(
                "{}:{line}: edge ({a}, {b}) references a node outside [0, {n})",
                edges_path.display()
            )));
        }
        if a == b {
            return Err(Error::Validation(format!("{}:{line}: self-loop on node {a}", edges_path.display())));
        }
        edges.push((a, b));
    }
    let edge_lines = edges.len();

    let labels_path = dir.join(LABELS_FILE);
    let mut labels = vec![None; n];
    for (line, fields) in records(&labels_path, b'\t')? {
        let (v, c) = parse_pair(&labels_path, line, &fields, "label")?;
        if v >= n {
            return Err(Error::Validation(format!(
                "{}:{line}: node {v} has no feature row",
                labels_path.display()
            )));
        }
        if labels[v].replace(c).is_some() {
            return Err(Error::Validation(format!("{}:{line}: node {v} labeled twice", labels_path.display())));
        }
    }
    let num_classes = labels.iter().flatten().max().map_or(0, |&c| c + 1);

    let splits_path = dir.join(SPLITS_FILE);
    let text = std::fs::read_to_string(&splits_path)?;
    let splits: Splits = serde_json::from_str(&text).map_err(|e| parse_error(&splits_path, e.line() as u64, e.to_string()))?;

    let graph = AttributedGraph::new(features, edges)?;
    let split = LabeledSplit::new(labels, num_classes, splits.train, splits.val, splits.test)?;
    let report = IngestReport {
        num_nodes: n,
        edge_lines,
        num_edges: graph.num_edges(),
        num_classes,
        feature_dim: dim,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
    };
    Ok((Dataset { graph, split }, report))
}

/// Writes a bundle; values use shortest round-trip formatting, so ingest is exact.
pub fn emit_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };

    let mut w = create(EDGES_FILE)?;
    for e in dataset.graph.edges() {
        let (a, b) = e.endpoints();
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;

    let mut w = create(FEATURES_FILE)?;
    for row in dataset.graph.features().rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;

    let mut w = create(LABELS_FILE)?;
    for (v, label) in dataset.split.labels().iter().enumerate() {
        if let Some(c) = label {
            writeln!(w, "{v}\t{c}")?;
        }
    }
    w.flush()?;

    let splits = Splits {
        train: dataset.split.train.clone(),
        val: dataset.split.val.clone(),
        test: dataset.split.test.clone(),
    };
    std::fs::write(dir.join(SPLITS_FILE), serde_json::to_string(&splits)?)?;
    Ok(())
}

/// Paths of the four bundle files, in a fixed order.
pub fn bundle_files(dir: &Path) -> [PathBuf; 4] {
    [EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE].map(|f| dir.join(f))
}
