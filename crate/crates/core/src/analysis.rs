//! Circuit-structure analysis: set similarity, inclusion frequency,
//! stability categories, intersections/unions, and binary-circuit
//! evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CircuitMask, EdgeType, Graph};
use crate::model::Model;
use crate::patching::{patched_accuracy, PatchMode, RunCache};

/// A set of masks over one graph with shared provenance.
#[derive(Debug, Clone)]
pub struct CircuitEnsemble {
    pub masks: Vec<CircuitMask>,
    pub provenance: EnsembleProvenance,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub class_label: Option<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub threshold: f64,
}

impl CircuitEnsemble {
    /// All masks must carry the same graph fingerprint.
    pub fn new(masks: Vec<CircuitMask>, provenance: EnsembleProvenance) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Argument("ensemble needs at least one mask".into()));
        }
        let fp = masks[0].fingerprint();
        if masks.iter().any(|m| m.fingerprint() != fp) {
            return Err(Error::Fingerprint(
                "ensemble masks belong to different graphs".into(),
            ));
        }
        Ok(Self { masks, provenance })
    }
}

/// Jaccard similarity |A ∩ B| / |A ∪ B| of two edge sets. Defined as 1
/// for two empty sets.
pub fn jaccard(a: &CircuitMask, b: &CircuitMask) -> Result<f64> {
    let inter = a.intersection(b)?.popcount();
    let union = a.union(b)?.popcount();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean and standard deviation of pairwise Jaccard over an ensemble
/// (all unordered pairs). A single-mask ensemble yields (1.0, 0.0).
pub fn mean_pairwise_jaccard(masks: &[CircuitMask]) -> Result<(f64, f64)> {
    if masks.len() < 2 {
        return Ok((1.0, 0.0));
    }
    let mut values = Vec::new();
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            values.push(jaccard(&masks[i], &masks[j])?);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

/// The edge universe over which inclusion frequencies are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyUniverse {
    /// Edges appearing in at least one run (the default convention).
    EverIncluded,
    /// Every edge of the graph.
    AllEdges,
}

/// Per-edge fraction of ensemble masks containing it, indexed by edge.
/// Needs at least two masks to be meaningful.
pub fn inclusion_frequency(ensemble: &CircuitEnsemble) -> Result<Vec<f64>> {
    if ensemble.masks.len() < 2 {
        return Err(Error::Argument(
            "inclusion frequency needs at least two masks".into(),
        ));
    }
    let n_edges = ensemble.masks[0].len();
    let n = ensemble.masks.len() as f64;
    let mut freq = vec![0.0; n_edges];
    for mask in &ensemble.masks {
        for idx in mask.edge_indices() {
            freq[idx] += 1.0;
        }
    }
    for f in &mut freq {
        *f /= n;
    }
    Ok(freq)
}

/// Stability buckets: stable above 90%, borderline in [50%, 90%],
/// unstable below 50%. Both boundaries land in borderline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Borderline,
    Unstable,
}

pub fn stability_of(freq: f64) -> Stability {
    if freq > 0.9 {
        Stability::Stable
    } else if freq >= 0.5 {
        Stability::Borderline
    } else {
        Stability::Unstable
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityCounts {
    pub stable: usize,
    pub borderline: usize,
    pub unstable: usize,
}

/// Histogram of stability categories per edge type. The universe defaults
/// to edges included in at least one run; `AllEdges` is exposed for the
/// alternative pooling convention.
pub fn stability_categories(
    graph: &Graph,
    frequencies: &[f64],
    universe: FrequencyUniverse,
) -> Result<BTreeMap<String, StabilityCounts>> {
    if frequencies.len() != graph.edge_count() {
        return Err(Error::Argument(
            "one frequency per graph edge is required".into(),
        ));
    }
    let mut out: BTreeMap<String, StabilityCounts> = BTreeMap::new();
    for t in EdgeType::ALL {
        out.insert(t.label().to_string(), StabilityCounts::default());
    }
    for (i, edge) in graph.edges().iter().enumerate() {
        let f = frequencies[i];
        if universe == FrequencyUniverse::EverIncluded && f == 0.0 {
            continue;
        }
        let counts = out
            .get_mut(edge.edge_type.label())
            .expect("all edge types pre-seeded");
        match stability_of(f) {
            Stability::Stable => counts.stable += 1,
            Stability::Borderline => counts.borderline += 1,
            Stability::Unstable => counts.unstable += 1,
        }
    }
    Ok(out)
}

/// Edges present in every run: the fold-left intersection of all masks.
pub fn core_edges(ensemble: &CircuitEnsemble) -> Result<CircuitMask> {
    let mut acc = ensemble.masks[0].clone();
    for m in &ensemble.masks[1..] {
        acc = acc.intersection(m)?;
    }
    Ok(acc)
}

/// Edgewise OR of two circuits.
pub fn circuit_union(a: &CircuitMask, b: &CircuitMask) -> Result<CircuitMask> {
    a.union(b)
}

/// Four-way partition of a binary circuit's edges against the two
/// per-class circuit unions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePartition {
    pub a_only: usize,
    pub b_only: usize,
    pub both: usize,
    pub only_in_binary: usize,
}

impl EdgePartition {
    pub fn total(&self) -> usize {
        self.a_only + self.b_only + self.both + self.only_in_binary
    }
}

#[derive(Debug, Clone)]
pub struct BinaryCircuitReport {
    pub accuracy: f64,
    pub partition: EdgePartition,
}

/// Evaluate a binary circuit on a two-class pair set (expected to be drawn
/// half from each class) and break its edges down against the per-class
/// unions.
pub fn binary_circuit_eval(
    model: &Model,
    graph: &Graph,
    circuit: &CircuitMask,
    union_a: &CircuitMask,
    union_b: &CircuitMask,
    cache: &RunCache,
    labels: &[usize],
    mode: PatchMode,
) -> Result<BinaryCircuitReport> {
    circuit.check_graph(graph)?;
    let accuracy = patched_accuracy(model, graph, cache, labels, circuit, mode)?;
    let mut partition = EdgePartition::default();
    for idx in circuit.edge_indices() {
        match (union_a.contains(idx), union_b.contains(idx)) {
            (true, true) => partition.both += 1,
            (true, false) => partition.a_only += 1,
            (false, true) => partition.b_only += 1,
            (false, false) => partition.only_in_binary += 1,
        }
    }
    Ok(BinaryCircuitReport {
        accuracy,
        partition,
    })
}

// ---------------------------------------------------------------------------
// Ensemble report
// ---------------------------------------------------------------------------

/// The per-ensemble analysis report emitted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub circuits: usize,
    pub mean_pairwise_jaccard: f64,
    pub jaccard_std: f64,
    pub size_min: usize,
    pub size_mean: f64,
    pub size_max: usize,
    pub stability_by_edge_type: BTreeMap<String, StabilityCounts>,
    pub core_edges: Vec<(String, String)>,
    pub provenance: EnsembleProvenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

pub fn ensemble_report(graph: &Graph, ensemble: &CircuitEnsemble) -> Result<EnsembleReport> {
    let (mean, std) = mean_pairwise_jaccard(&ensemble.masks)?;
    let sizes: Vec<usize> = ensemble.masks.iter().map(CircuitMask::popcount).collect();
    let core = core_edges(ensemble)?;
    let freq = if ensemble.masks.len() >= 2 {
        inclusion_frequency(ensemble)?
    } else {
        ensemble.masks[0]
            .edge_indices()
            .into_iter()
            .fold(vec![0.0; ensemble.masks[0].len()], |mut acc, i| {
                acc[i] = 1.0;
                acc
            })
    };
    Ok(EnsembleReport {
        circuits: ensemble.masks.len(),
        mean_pairwise_jaccard: mean,
        jaccard_std: std,
        size_min: sizes.iter().copied().min().unwrap_or(0),
        size_mean: sizes.iter().sum::<usize>() as f64 / sizes.len() as f64,
        size_max: sizes.iter().copied().max().unwrap_or(0),
        stability_by_edge_type: stability_categories(
            graph,
            &freq,
            FrequencyUniverse::EverIncluded,
        )?,
        core_edges: core
            .edge_indices()
            .into_iter()
            .map(|i| {
                let e = &graph.edges()[i];
                (e.sender.canonical_name(), e.receiver.canonical_name())
            })
            .collect(),
        provenance: ensemble.provenance.clone(),
        manifest_digest: None,
    })
}

pub const SIMILARITY_CSV_HEADER: &str = "class_a,class_b,jaccard_mean,jaccard_std";

/// Cross-class similarity rows: for each unordered class pair, the mean
/// and std of Jaccard over all cross-ensemble mask pairs (within-class
/// pairs for the diagonal).
pub fn similarity_csv(groups: &BTreeMap<usize, Vec<CircuitMask>>) -> Result<String> {
    let mut out = String::from(SIMILARITY_CSV_HEADER);
    out.push('\n');
    let classes: Vec<usize> = groups.keys().copied().collect();
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i..] {
            let mut values = Vec::new();
            if a == b {
                let masks = &groups[&a];
                for x in 0..masks.len() {
                    for y in (x + 1)..masks.len() {
                        values.push(jaccard(&masks[x], &masks[y])?);
                    }
                }
                if values.is_empty() {
                    values.push(1.0);
                }
            } else {
                for ma in &groups[&a] {
                    for mb in &groups[&b] {
                        values.push(jaccard(ma, mb)?);
                    }
                }
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            out.push_str(&format!("{a},{b},{mean},{}\n", var.sqrt()));
        }
    }
    Ok(out)
}
