//! Paired clean/corrupted dataset production: a synthetic planted-signal
//! generator (an inpainting analogue with ground truth by construction)
//! and a loader for externally prepared pairs.
//!
//! Tokens are generated pre-embedding (raw patch vectors), so one dataset
//! serves models of any width. The class token occupies row 0 and is a
//! constant zero row; image patches fill rows 1..P. A clean example
//! plants the class pattern on a random foreground patch subset over a
//! Gaussian background; its corrupted counterpart keeps the identical
//! background realization and resamples the foreground patches from the
//! background distribution, so the two differ only on masked patches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::linalg::{argmax, Mat};
use crate::model::{forward_with_trace, Model};
use crate::rng::SeededRng;

/// Images per class circuit in the reference protocol.
pub const DEFAULT_PAIRS_PER_CLASS: usize = 128;

/// An aligned clean/corrupted pair with labels and the corruption mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub clean: Mat,
    pub corrupted: Mat,
    pub label: usize,
    pub attack_target: Option<usize>,
    /// Per-position corruption mask; row 0 (class token) is never masked.
    pub foreground: Vec<bool>,
}

impl PairedExample {
    pub fn token_pair(&self) -> (Mat, Mat) {
        (self.clean.clone(), self.corrupted.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    /// Raw token width d_in.
    pub token_dim: usize,
    /// Positions including the class token at row 0.
    pub patch_count: usize,
    /// Per-class foreground pattern vectors, pairwise distinct.
    pub class_patterns: Vec<Vec<f64>>,
    pub background_std: f64,
    /// Fraction of image patches carrying the pattern.
    pub foreground_fraction: f64,
    /// Relative jitter of the planted pattern amplitude per patch.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Patterns along distinct coordinate axes, scaled by `gain`. The
    /// default geometry is a 4x4 patch grid plus the class token.
    pub fn coordinate_patterns(
        num_classes: usize,
        token_dim: usize,
        gain: f64,
        seed: u64,
    ) -> Result<Self> {
        if token_dim < num_classes {
            return Err(Error::Argument(
                "token_dim must be at least num_classes for coordinate patterns".into(),
            ));
        }
        let class_patterns = (0..num_classes)
            .map(|c| {
                let mut p = vec![0.0; token_dim];
                p[c] = gain;
                p
            })
            .collect();
        Ok(Self {
            num_classes,
            token_dim,
            patch_count: 17,
            class_patterns,
            background_std: 1.0,
            foreground_fraction: 0.4,
            noise_scale: 0.0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.class_patterns.len() != self.num_classes {
            return Err(Error::Argument(
                "one pattern per class is required (at least two classes)".into(),
            ));
        }
        if self.patch_count < 2 {
            return Err(Error::Argument("patch_count must be at least 2".into()));
        }
        for (i, p) in self.class_patterns.iter().enumerate() {
            if p.len() != self.token_dim {
                return Err(Error::Argument(format!(
                    "pattern {i} has length {}, expected {}",
                    p.len(),
                    self.token_dim
                )));
            }
            for q in &self.class_patterns[..i] {
                if p == q {
                    return Err(Error::Argument("class patterns must be distinct".into()));
                }
            }
        }
        if !(self.foreground_fraction > 0.0 && self.foreground_fraction <= 1.0) {
            return Err(Error::Argument(
                "foreground_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        crate::graph::digest_bytes(json.as_bytes())
    }

    fn image_patches(&self) -> usize {
        self.patch_count - 1
    }

    fn foreground_size(&self) -> usize {
        ((self.foreground_fraction * self.image_patches() as f64).round() as usize)
            .clamp(1, self.image_patches())
    }
}

fn background(spec: &SyntheticTaskSpec, rng: &mut SeededRng) -> Mat {
    let mut m = Mat::zeros(spec.patch_count, spec.token_dim);
    for r in 1..spec.patch_count {
        for j in 0..spec.token_dim {
            m.set(r, j, rng.normal_f32(spec.background_std));
        }
    }
    m
}

fn plant_pattern(
    spec: &SyntheticTaskSpec,
    tokens: &mut Mat,
    class: usize,
    mask: &[usize],
    rng: &mut SeededRng,
) {
    for &p in mask {
        let jitter = 1.0 + spec.noise_scale * rng.normal();
        for j in 0..spec.token_dim {
            let v = tokens.get(p, j) + jitter * spec.class_patterns[class][j];
            tokens.set(p, j, (v as f32) as f64);
        }
    }
}

/// Generate `n` clean/corrupted pairs for one class.
pub fn generate_class_pairs(
    spec: &SyntheticTaskSpec,
    class: usize,
    n: usize,
) -> Result<Vec<PairedExample>> {
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::Argument(format!(
            "class {class} out of range (C = {})",
            spec.num_classes
        )));
    }
    if n < 1 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let root = SeededRng::new(spec.seed ^ (class as u64).wrapping_mul(0x9e37_79b9));
    Ok((0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let bg = background(spec, &mut rng);
            let k = spec.foreground_size();
            let mask_positions: Vec<usize> = rng
                .sample_indices(spec.image_patches(), k)
                .into_iter()
                .map(|p| p + 1)
                .collect();

            let mut clean = bg.clone();
            plant_pattern(spec, &mut clean, class, &mask_positions, &mut rng);

            // Inpainting analogue: resample masked patches from the
            // background distribution; everything else stays bit-identical.
            let mut corrupted = bg;
            for &p in &mask_positions {
                for j in 0..spec.token_dim {
                    corrupted.set(p, j, rng.normal_f32(spec.background_std));
                }
            }

            let mut foreground = vec![false; spec.patch_count];
            for &p in &mask_positions {
                foreground[p] = true;
            }
            PairedExample {
                clean,
                corrupted,
                label: class,
                attack_target: None,
                foreground,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Typographic attacks
// ---------------------------------------------------------------------------

/// Where the overlay pattern is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Edge patches of the square grid.
    Border,
    /// A random patch subset of the requested coverage.
    Scattered,
    /// One contiguous square block at a random position.
    Block,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Overlay pattern, distinct from every class pattern.
    pub pattern: Vec<f64>,
    pub amplitude: f64,
    /// The class the attack tries to force.
    pub target: usize,
    pub placement: Placement,
    /// Fraction of image patches covered (scattered/block placements).
    pub coverage: f64,
    /// Attack identifier recorded in artifacts.
    pub id: String,
}

fn grid_side(image_patches: usize) -> Result<usize> {
    let side = (image_patches as f64).sqrt().round() as usize;
    if side * side != image_patches {
        return Err(Error::Argument(format!(
            "{image_patches} image patches do not form a square grid"
        )));
    }
    Ok(side)
}

fn placement_positions(
    spec: &SyntheticTaskSpec,
    attack: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let n = spec.image_patches();
    match attack.placement {
        Placement::Border => {
            let side = grid_side(n)?;
            let mut positions = Vec::new();
            for r in 0..side {
                for c in 0..side {
                    if r == 0 || c == 0 || r == side - 1 || c == side - 1 {
                        positions.push(1 + r * side + c);
                    }
                }
            }
            Ok(positions)
        }
        Placement::Scattered => {
            let k = ((attack.coverage * n as f64).round() as usize).clamp(1, n);
            Ok(rng.sample_indices(n, k).into_iter().map(|p| p + 1).collect())
        }
        Placement::Block => {
            let side = grid_side(n)?;
            let b = ((attack.coverage * n as f64).sqrt().round() as usize).clamp(1, side);
            let r0 = rng.below(side - b + 1);
            let c0 = rng.below(side - b + 1);
            let mut positions = Vec::new();
            for r in r0..r0 + b {
                for c in c0..c0 + b {
                    positions.push(1 + r * side + c);
                }
            }
            Ok(positions)
        }
    }
}

/// Generate attacked pairs: `clean` holds the original class image,
/// `corrupted` holds the same image with the overlay pattern added on the
/// placement patches, and `attack_target` records the forced class. The
/// overlay never fully occludes the foreground.
pub fn generate_typographic_pairs(
    spec: &SyntheticTaskSpec,
    attack: &AttackSpec,
    n: usize,
) -> Result<Vec<PairedExample>> {
    spec.validate()?;
    if attack.pattern.len() != spec.token_dim {
        return Err(Error::Argument(
            "attack pattern width must match token_dim".into(),
        ));
    }
    if spec.class_patterns.iter().any(|p| *p == attack.pattern) {
        return Err(Error::Argument(
            "attack pattern must be distinct from class patterns".into(),
        ));
    }
    if attack.target >= spec.num_classes {
        return Err(Error::Argument("attack target out of range".into()));
    }
    if n < 1 {
        return Err(Error::Argument("n must be at least 1".into()));
    }

    let root = SeededRng::new(spec.seed ^ 0x7970_6f67_7261_7068);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.fork(i as u64);
        // Images of the attack-target class itself cannot witness a
        // successful attack, so sample among the other classes.
        let class = {
            let c = rng.below(spec.num_classes - 1);
            if c >= attack.target {
                c + 1
            } else {
                c
            }
        };
        let positions = placement_positions(spec, attack, &mut rng)?;

        // Resample the foreground until at least one patch escapes the
        // overlay, so the attack never fully occludes the object.
        let k = spec.foreground_size();
        let mut mask_positions = None;
        for _ in 0..32 {
            let candidate: Vec<usize> = rng
                .sample_indices(spec.image_patches(), k)
                .into_iter()
                .map(|p| p + 1)
                .collect();
            if candidate.iter().any(|p| !positions.contains(p)) {
                mask_positions = Some(candidate);
                break;
            }
        }
        let mask_positions = mask_positions.ok_or_else(|| {
            Error::Argument(
                "placement fully occludes the foreground for every sampled mask".into(),
            )
        })?;

        let bg = background(spec, &mut rng);
        let mut clean = bg;
        plant_pattern(spec, &mut clean, class, &mask_positions, &mut rng);

        let mut attacked = clean.clone();
        if attack.amplitude != 0.0 {
            for &p in &positions {
                for j in 0..spec.token_dim {
                    let v = attacked.get(p, j) + attack.amplitude * attack.pattern[j];
                    attacked.set(p, j, (v as f32) as f64);
                }
            }
        }

        let mut overlay = vec![false; spec.patch_count];
        for &p in &positions {
            overlay[p] = true;
        }
        out.push(PairedExample {
            clean,
            corrupted: attacked,
            label: class,
            attack_target: Some(attack.target),
            foreground: overlay,
        });
    }
    Ok(out)
}

/// Keep the examples whose clean input the model classifies correctly.
/// An empty result is not an error; callers decide how to proceed.
pub fn filter_correct(model: &Model, examples: &[PairedExample]) -> Result<Vec<PairedExample>> {
    let mut kept = Vec::new();
    for ex in examples {
        let trace = forward_with_trace(model, &ex.clean)?;
        if argmax(&trace.logits) == ex.label {
            kept.push(ex.clone());
        }
    }
    Ok(kept)
}

/// The attack-circuit analogue of [`filter_correct`]: keep pairs whose
/// attacked half (the corrupted slot) the model classifies as the attack
/// target, i.e. the attacks that actually succeeded.
pub fn filter_attack_successful(
    model: &Model,
    examples: &[PairedExample],
) -> Result<Vec<PairedExample>> {
    let mut kept = Vec::new();
    for ex in examples {
        let Some(target) = ex.attack_target else {
            continue;
        };
        let trace = forward_with_trace(model, &ex.corrupted)?;
        if argmax(&trace.logits) == target {
            kept.push(ex.clone());
        }
    }
    Ok(kept)
}

// ---------------------------------------------------------------------------
// Linear probe (signal certification oracle)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSide {
    Clean,
    Corrupted,
}

/// Ridge least-squares solve of (X^T X + lambda I) W = X^T Y via Gaussian
/// elimination with partial pivoting.
fn ridge_solve(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let c = y[0].len();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![vec![0.0; c]; d];
    for i in 0..n {
        for p in 0..d {
            let xp = x[i][p];
            if xp == 0.0 {
                continue;
            }
            for q in 0..d {
                a[p][q] += xp * x[i][q];
            }
            for t in 0..c {
                b[p][t] += xp * y[i][t];
            }
        }
    }
    for p in 0..d {
        a[p][p] += lambda;
    }

    // Elimination.
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        if diag.abs() < 1e-12 {
            continue;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let factor = a[r][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for q in col..d {
                a[r][q] -= factor * a[col][q];
            }
            for t in 0..c {
                b[r][t] -= factor * b[col][t];
            }
        }
    }
    let mut w = vec![vec![0.0; c]; d];
    for p in 0..d {
        let diag = a[p][p];
        if diag.abs() < 1e-12 {
            continue;
        }
        for t in 0..c {
            w[p][t] = b[p][t] / diag;
        }
    }
    w
}

/// Patch-mean features: the planted pattern lands on a random patch
/// subset, so position-resolved features would not generalize across the
/// split.
fn probe_features(tokens: &Mat) -> Vec<f64> {
    let d = tokens.cols();
    let mut f = vec![0.0; d + 1];
    for r in 0..tokens.rows() {
        for (j, v) in tokens.row(r).iter().enumerate() {
            f[j] += v;
        }
    }
    for v in f.iter_mut().take(d) {
        *v /= tokens.rows() as f64;
    }
    f[d] = 1.0; // bias
    f
}

/// Train a ridge linear probe on a split half and report held-out
/// accuracy on the other half. Certifies signal presence (clean side) or
/// absence (corrupted side) of a generated suite.
pub fn probe_split_accuracy(
    examples: &[PairedExample],
    side: TokenSide,
    num_classes: usize,
    seed: u64,
) -> Result<f64> {
    if examples.len() < 4 {
        return Err(Error::Argument("probe needs at least 4 examples".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = SeededRng::new(seed);
    for i in (1..order.len()).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let split = examples.len() / 2;
    let tokens = |i: usize| match side {
        TokenSide::Clean => &examples[i].clean,
        TokenSide::Corrupted => &examples[i].corrupted,
    };

    let train_x: Vec<Vec<f64>> = order[..split].iter().map(|&i| probe_features(tokens(i))).collect();
    let train_y: Vec<Vec<f64>> = order[..split]
        .iter()
        .map(|&i| {
            let mut y = vec![0.0; num_classes];
            y[examples[i].label] = 1.0;
            y
        })
        .collect();
    let w = ridge_solve(&train_x, &train_y, 1e-3);

    let mut correct = 0usize;
    for &i in &order[split..] {
        let f = probe_features(tokens(i));
        let mut scores = vec![0.0; num_classes];
        for (p, fp) in f.iter().enumerate() {
            if *fp == 0.0 {
                continue;
            }
            for t in 0..num_classes {
                scores[t] += fp * w[p][t];
            }
        }
        if argmax(&scores) == examples[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / (examples.len() - split) as f64)
}

// ---------------------------------------------------------------------------
// Pair container IO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec_digest: String,
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub attack_targets: Vec<Option<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

pub const PAIRS_FILE: &str = "pairs.cfw";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write pairs as `{id}.clean` / `{id}.corrupted` / `{id}.mask` tensors
/// plus a manifest with labels.
pub fn save_pairs(
    dir: &Path,
    examples: &[PairedExample],
    spec_digest: &str,
    num_classes: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut archive = TensorArchive::new(serde_json::json!({ "spec_digest": spec_digest }));
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let id = format!("{i:06}");
        archive.insert_mat(&format!("{id}.clean"), &ex.clean)?;
        archive.insert_mat(&format!("{id}.corrupted"), &ex.corrupted)?;
        archive.insert(
            &format!("{id}.mask"),
            vec![ex.foreground.len()],
            ex.foreground
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )?;
        ids.push(id);
        labels.push(ex.label);
        targets.push(ex.attack_target);
    }
    archive.save(&dir.join(PAIRS_FILE))?;
    let manifest = DatasetManifest {
        spec_digest: spec_digest.to_string(),
        num_classes,
        ids,
        labels,
        attack_targets: targets,
        manifest_digest: None,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Load pairs saved by [`save_pairs`], validating alignment and shapes.
pub fn load_pairs(dir: &Path) -> Result<(Vec<PairedExample>, DatasetManifest)> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)?;
    if manifest.labels.len() != manifest.ids.len()
        || manifest.attack_targets.len() != manifest.ids.len()
    {
        return Err(Error::Format(
            "manifest ids, labels and attack targets are misaligned".into(),
        ));
    }
    let archive = TensorArchive::load(&dir.join(PAIRS_FILE))?;

    // Orphaned halves are collected and reported together.
    let mut orphans = Vec::new();
    for id in &manifest.ids {
        let has_clean = archive.contains(&format!("{id}.clean"));
        let has_corrupted = archive.contains(&format!("{id}.corrupted"));
        if has_clean != has_corrupted || !has_clean {
            orphans.push(id.clone());
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Format(format!(
            "orphaned or missing pair halves for ids: {}",
            orphans.join(", ")
        )));
    }

    let mut examples = Vec::with_capacity(manifest.ids.len());
    let mut shape: Option<(usize, usize)> = None;
    for (i, id) in manifest.ids.iter().enumerate() {
        let clean = archive.get_mat(&format!("{id}.clean"))?;
        let corrupted = archive.get_mat(&format!("{id}.corrupted"))?;
        let this_shape = (clean.rows(), clean.cols());
        if (corrupted.rows(), corrupted.cols()) != this_shape {
            return Err(Error::Format(format!(
                "pair {id}: clean and corrupted shapes differ"
            )));
        }
        match shape {
            None => shape = Some(this_shape),
            Some(s) if s != this_shape => {
                return Err(Error::Format(format!(
                    "pair {id}: shape {this_shape:?} differs from {s:?}"
                )));
            }
            _ => {}
        }
        let label = manifest.labels[i];
        if label >= manifest.num_classes {
            return Err(Error::Format(format!(
                "pair {id}: label {label} out of range (C = {})",
                manifest.num_classes
            )));
        }
        let foreground = if archive.contains(&format!("{id}.mask")) {
            archive
                .get_vec(&format!("{id}.mask"))?
                .into_iter()
                .map(|v| v != 0.0)
                .collect()
        } else {
            // Fall back to the rows where the halves differ.
            (0..clean.rows())
                .map(|r| clean.row(r) != corrupted.row(r))
                .collect()
        };
        examples.push(PairedExample {
            clean,
            corrupted,
            label,
            attack_target: manifest.attack_targets[i],
            foreground,
        });
    }
    Ok((examples, manifest))
}
