//! Routing-decision log (one JSON object per line) and the expert
//! utilisation summary computed from it.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::moe::load_balance_stats;
use crate::moe::GateDecision;
use crate::network::FeaturePyramid;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub iteration: u64,
    pub stage: usize,
    pub path: String,
    pub num_experts: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub struct GateLogWriter {
    out: BufWriter<std::fs::File>,
}

impl GateLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &GateRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    /// One record per image and stage of the pyramid.
    pub fn write_pyramid(&mut self, iteration: u64, pyramid: &FeaturePyramid, num_experts: usize) -> Result<()> {
        for (stage, decisions) in pyramid.decisions.iter().enumerate() {
            for d in decisions {
                self.write(&GateRecord {
                    iteration,
                    stage,
                    path: pyramid.path.to_string(),
                    num_experts,
                    indices: d.indices.clone(),
                    weights: d.weights.clone(),
                })?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub decisions: usize,
    /// Per-expert selection frequency; sums to k.
    pub frequencies: Vec<f64>,
    /// Entropy in nats of the frequencies normalised to a distribution.
    pub entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateStats {
    /// Keyed by `(stage, path)`.
    pub groups: BTreeMap<(usize, String), GroupStats>,
    pub skipped_lines: usize,
}

impl GateStats {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("stage path  decisions  entropy  frequencies\n");
        for ((stage, path), g) in &self.groups {
            let freqs: Vec<String> = g.frequencies.iter().map(|f| format!("{f:.4}")).collect();
            s.push_str(&format!(
                "{stage:>5} {path:<5} {:>9} {:>8.4}  [{}]\n",
                g.decisions,
                g.entropy,
                freqs.join(", ")
            ));
        }
        if self.skipped_lines > 0 {
            s.push_str(&format!("skipped {} malformed lines\n", self.skipped_lines));
        }
        s
    }
}

pub fn entropy(frequencies: &[f64]) -> f64 {
    let total: f64 = frequencies.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    frequencies
        .iter()
        .filter(|f| **f > 0.0)
        .map(|f| {
            let p = f / total;
            -p * p.ln()
        })
        .sum()
}

/// Summarises a list of records; records with an out-of-range expert index
/// are counted as skipped.
pub fn summarize(records: &[GateRecord]) -> GateStats {
    let mut grouped: BTreeMap<(usize, String), (usize, Vec<GateDecision>)> = BTreeMap::new();
    let mut skipped = 0;
    for r in records {
        if r.num_experts == 0 || r.indices.iter().any(|i| *i >= r.num_experts) {
            skipped += 1;
            continue;
        }
        let entry = grouped
            .entry((r.stage, r.path.clone()))
            .or_insert_with(|| (r.num_experts, Vec::new()));
        entry.0 = entry.0.max(r.num_experts);
        entry.1.push(GateDecision {
            indices: r.indices.clone(),
            weights: r.weights.clone(),
        });
    }
    let groups = grouped
        .into_iter()
        .map(|(key, (m, decisions))| {
            let frequencies = load_balance_stats(&decisions, m);
            let g = GroupStats {
                decisions: decisions.len(),
                entropy: entropy(&frequencies),
                frequencies,
            };
            (key, g)
        })
        .collect();
    GateStats {
        groups,
        skipped_lines: skipped,
    }
}

/// Reads a gate log, warning about and skipping malformed lines.
pub fn gate_stats(path: &Path) -> Result<GateStats> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GateRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), n + 1);
                skipped += 1;
            }
        }
    }
    let mut stats = summarize(&records);
    stats.skipped_lines += skipped;
    Ok(stats)
}
