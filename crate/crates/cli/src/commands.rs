//! Command implementations. The binary is a thin argument parser over
//! these functions so integration tests can drive them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vicd_core::analysis::{ensemble_report, similarity_csv, CircuitEnsemble, EnsembleProvenance};
use vicd_core::archive::{load_model, model_to_bytes};
use vicd_core::data::{
    filter_correct, generate_class_pairs, generate_typographic_pairs, load_pairs, save_pairs,
    AttackSpec, PairedExample, Placement, SyntheticTaskSpec,
};
use vicd_core::discovery::{
    eap_scores, eapig_scores, mask_from_scores, sweep_csv, sweep_faithfulness, vicd_discover,
    DiscoveryConfig, Method, SelectRule, SweepPoint, DEFAULT_MAX_VISITED_NODES,
};
use vicd_core::graph::{build_graph, CircuitFile, CircuitMask, CircuitMetadata};
use vicd_core::model::Model;
use vicd_core::patching::{cache_runs, patched_accuracy, MetricSpec, PatchMode, RunCache};
use vicd_core::steering::{
    attack_metrics, circuit_senders, compute_directions, directions_to_archive, steer_sweep_csv,
    DirectionRegime, SteeringScope, DEFAULT_EPSILON,
};
use vicd_core::{Error, Result};

use crate::config::{parse_usize_list, ExperimentConfig, DataGenConfig, ModelGenConfig};
use crate::manifest::{atomic_write, manifest_path, RunManifest};

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Run the data harness (and optional model emission) from a config file.
pub fn cmd_gen(config_path: &Path) -> Result<()> {
    let started = Instant::now();
    let config = ExperimentConfig::load(config_path)?;
    if config.model.is_none() && config.data.is_none() {
        return Err(Error::Config(
            "config has neither a model nor a data section".into(),
        ));
    }
    let mut manifest = RunManifest::new("gen", config.digest(), vec![]).input(config_path);

    if let Some(model_cfg) = &config.model {
        let (model, out) = build_model_from_config(model_cfg)?;
        atomic_write(out, &model_to_bytes(&model)?)?;
        manifest = manifest.output(out);
    }

    if let Some(data_cfg) = &config.data {
        let out = generate_dataset(data_cfg)?;
        manifest.seeds.push(data_cfg.seed);
        manifest = manifest.output(&out);
    }

    manifest.wall_clock_ms = started.elapsed().as_millis();
    let sidecar = config_path.with_extension("manifest.json");
    manifest.write(&sidecar)?;
    Ok(())
}

fn build_model_from_config(cfg: &ModelGenConfig) -> Result<(Model, &PathBuf)> {
    use vicd_core::planted;
    match cfg {
        ModelGenConfig::SingleHead {
            classes,
            dim,
            patches,
            heads,
            gain,
            out,
        } => Ok((
            planted::single_signal_head_model(*classes, *dim, *patches, *heads, *gain)?,
            out,
        )),
        ModelGenConfig::MultiHead {
            classes,
            dim,
            patches,
            heads,
            gains,
            out,
        } => Ok((
            planted::multi_head_signal_model(*classes, *dim, *patches, *heads, gains)?,
            out,
        )),
        ModelGenConfig::TwoHop {
            classes,
            stage_gain,
            out,
        } => {
            let mut spec = planted::TwoHopSpec::standard(*classes);
            if let Some(g) = stage_gain {
                spec.stage_gain = *g;
            }
            Ok((planted::two_hop_model(&spec)?, out))
        }
        ModelGenConfig::Attack {
            classes,
            target,
            signal_gain,
            attack_gain,
            out,
        } => {
            let mut spec = planted::AttackModelSpec::standard(*classes, *target);
            if let Some(g) = signal_gain {
                spec.signal_gain = *g;
            }
            if let Some(g) = attack_gain {
                spec.attack_gain = *g;
            }
            Ok((planted::attack_sensitive_model(&spec)?, out))
        }
        ModelGenConfig::Random {
            layers,
            heads,
            dim,
            patches,
            classes,
            std,
            seed,
            linear,
            out,
        } => {
            let model = if *linear {
                vicd_core::model::random_linear_model(
                    *layers, *heads, *dim, *patches, *classes, *seed,
                )?
            } else {
                vicd_core::model::random_model(&vicd_core::model::RandomModelSpec {
                    config: vicd_core::model::ModelConfig::tiny(
                        *layers, *heads, *dim, *patches, *classes,
                    ),
                    weight_std: *std,
                    seed: *seed,
                    constant_attention: false,
                })?
            };
            Ok((model, out))
        }
    }
}

fn task_from_config(cfg: &DataGenConfig) -> Result<SyntheticTaskSpec> {
    let mut task =
        SyntheticTaskSpec::coordinate_patterns(cfg.classes, cfg.dim, cfg.pattern_gain, cfg.seed)?;
    task.patch_count = cfg.patches;
    task.background_std = cfg.background_std;
    task.foreground_fraction = cfg.foreground_fraction;
    task.noise_scale = cfg.noise_scale;
    Ok(task)
}

fn generate_dataset(cfg: &DataGenConfig) -> Result<PathBuf> {
    let task = task_from_config(cfg)?;
    let examples: Vec<PairedExample> = match cfg.kind.as_str() {
        "class" => match cfg.class {
            Some(class) => generate_class_pairs(&task, class, cfg.n)?,
            None => {
                let mut all = Vec::new();
                for class in 0..task.num_classes {
                    all.extend(generate_class_pairs(&task, class, cfg.n)?);
                }
                all
            }
        },
        "typographic" => {
            let attack = AttackSpec {
                pattern: {
                    let mut p = vec![0.0; cfg.dim];
                    p[vicd_core::planted::attack_dim(cfg.classes)] = 1.0;
                    p
                },
                amplitude: cfg.amplitude.ok_or_else(|| {
                    Error::Config("typographic data needs an amplitude".into())
                })?,
                target: cfg
                    .target
                    .ok_or_else(|| Error::Config("typographic data needs a target".into()))?,
                placement: cfg.placement.unwrap_or(Placement::Border),
                coverage: cfg.coverage.unwrap_or(0.5),
                id: "overlay".into(),
            };
            generate_typographic_pairs(&task, &attack, cfg.n)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown data kind '{other}' (expected class or typographic)"
            )))
        }
    };
    save_pairs(&cfg.out, &examples, &task.digest(), task.num_classes)?;
    Ok(cfg.out.clone())
}

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

fn load_run_inputs(
    model_path: &Path,
    pairs_path: &Path,
    swap_pairs: bool,
    filter: bool,
) -> Result<(Model, Vec<PairedExample>)> {
    let model = load_model(model_path)?;
    let (mut examples, _manifest) = load_pairs(pairs_path)?;
    if filter {
        // Class circuits keep correctly classified clean inputs; attack
        // circuits (swapped pairs) keep the attacks that succeeded.
        examples = if swap_pairs {
            vicd_core::data::filter_attack_successful(&model, &examples)?
        } else {
            filter_correct(&model, &examples)?
        };
        if examples.is_empty() {
            return Err(Error::Argument(
                "no examples survive correct-classification filtering".into(),
            ));
        }
    }
    if swap_pairs {
        for ex in &mut examples {
            std::mem::swap(&mut ex.clean, &mut ex.corrupted);
        }
    }
    // Shape check against the model configuration.
    for ex in &examples {
        if ex.clean.rows() != model.config.patch_count
            || ex.clean.cols() != model.config.input_dim
        {
            return Err(Error::Fingerprint(format!(
                "pair shape {}x{} does not match the model's {}x{}",
                ex.clean.rows(),
                ex.clean.cols(),
                model.config.patch_count,
                model.config.input_dim
            )));
        }
    }
    Ok((model, examples))
}

fn build_cache(model: &Model, examples: &[PairedExample]) -> Result<(RunCache, Vec<usize>)> {
    let pairs: Vec<_> = examples.iter().map(PairedExample::token_pair).collect();
    let cache = cache_runs(model, &pairs)?;
    let labels = examples.iter().map(|e| e.label).collect();
    Ok((cache, labels))
}

fn metric_from_flags(
    metric: &str,
    target: Option<usize>,
    examples: &[PairedExample],
) -> Result<MetricSpec> {
    match metric {
        "logitdiff" => {
            let target = target
                .or_else(|| examples.first().map(|e| e.label))
                .ok_or_else(|| Error::Argument("logitdiff metric needs a target class".into()))?;
            Ok(MetricSpec::logit_diff(target))
        }
        "kl" => Ok(MetricSpec::kl()),
        other => Err(Error::Argument(format!(
            "unknown metric '{other}' (expected logitdiff or kl)"
        ))),
    }
}

/// Parse a method token: `vicd`, `eap`, `eapig` (+ `--steps`) or
/// `eapig<N>`, `random`.
pub fn parse_method(token: &str, steps: Option<usize>) -> Result<Method> {
    match token {
        "vicd" => Ok(Method::Vicd),
        "eap" => Ok(Method::Eap),
        "random" => Ok(Method::Random),
        "eapig" => Ok(Method::EapIg {
            steps: steps.unwrap_or(5),
        }),
        other => {
            if let Some(rest) = other.strip_prefix("eapig") {
                let n: usize = rest
                    .parse()
                    .map_err(|_| Error::Argument(format!("unknown method '{other}'")))?;
                return Ok(Method::EapIg { steps: n });
            }
            Err(Error::Argument(format!("unknown method '{other}'")))
        }
    }
}

// ---------------------------------------------------------------------------
// discover
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiscoverArgs {
    pub model: PathBuf,
    pub pairs: PathBuf,
    pub method: String,
    pub threshold: Option<f64>,
    pub steps: Option<usize>,
    pub size: Option<usize>,
    pub metric: String,
    pub target: Option<usize>,
    pub max_visited: usize,
    pub seed: u64,
    pub swap_pairs: bool,
    pub no_filter: bool,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

impl DiscoverArgs {
    pub fn new(model: PathBuf, pairs: PathBuf, method: &str, out: PathBuf) -> Self {
        Self {
            model,
            pairs,
            method: method.to_string(),
            threshold: None,
            steps: None,
            size: None,
            metric: "logitdiff".into(),
            target: None,
            max_visited: DEFAULT_MAX_VISITED_NODES,
            seed: 0,
            swap_pairs: false,
            no_filter: false,
            out,
            config: None,
        }
    }

    /// Fill unset flags from the config file's discovery section.
    fn merged(&self) -> Result<DiscoverArgs> {
        let mut args = self.clone();
        if let Some(path) = &self.config {
            let config = ExperimentConfig::load(path)?;
            if let Some(d) = config.discovery {
                if args.threshold.is_none() {
                    args.threshold = d.threshold;
                }
                if args.target.is_none() {
                    args.target = d.target;
                }
                if args.steps.is_none() {
                    args.steps = d.steps;
                }
            }
        }
        Ok(args)
    }

    fn validate(&self) -> Result<()> {
        match self.method.as_str() {
            "vicd" => {
                if self.threshold.is_none() {
                    return Err(Error::Argument("vicd requires --threshold".into()));
                }
                if self.steps.is_some() || self.size.is_some() {
                    return Err(Error::Argument(
                        "--steps and --size are not valid with vicd".into(),
                    ));
                }
            }
            "eap" => {
                if self.steps.is_some() {
                    return Err(Error::Argument("--steps is only valid with eapig".into()));
                }
                if self.threshold.is_some() == self.size.is_some() {
                    return Err(Error::Argument(
                        "eap requires exactly one of --threshold or --size".into(),
                    ));
                }
            }
            "eapig" => {
                if self.threshold.is_some() == self.size.is_some() {
                    return Err(Error::Argument(
                        "eapig requires exactly one of --threshold or --size".into(),
                    ));
                }
            }
            "random" => {
                if self.size.is_none() {
                    return Err(Error::Argument("random requires --size".into()));
                }
                if self.threshold.is_some() || self.steps.is_some() {
                    return Err(Error::Argument(
                        "--threshold and --steps are not valid with random".into(),
                    ));
                }
            }
            other => return Err(Error::Argument(format!("unknown method '{other}'"))),
        }
        Ok(())
    }
}

/// Mine a circuit and write the circuit file plus a decision log.
pub fn cmd_discover(args: &DiscoverArgs) -> Result<()> {
    let started = Instant::now();
    let args = args.merged()?;
    args.validate()?;
    let (model, examples) =
        load_run_inputs(&args.model, &args.pairs, args.swap_pairs, !args.no_filter)?;
    let graph = build_graph(&model.config);
    let (cache, _labels) = build_cache(&model, &examples)?;
    // Attack circuits default their target to the attack-target label.
    let target = args.target.or_else(|| {
        if args.swap_pairs {
            examples.first().and_then(|e| e.attack_target)
        } else {
            None
        }
    });
    let metric = metric_from_flags(&args.metric, target, &examples)?;

    let mut decisions_log = String::new();
    let mask = match args.method.as_str() {
        "vicd" => {
            let mut config = DiscoveryConfig::new(args.threshold.unwrap(), metric);
            config.max_visited_nodes = args.max_visited;
            config.seed = args.seed;
            let outcome = vicd_discover(&model, &graph, &cache, &config)?;
            decisions_log.push_str("edge,sender,receiver,degradation,removed\n");
            for d in &outcome.decisions {
                let e = &graph.edges()[d.edge_index];
                decisions_log.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.edge_index,
                    e.sender.canonical_name(),
                    e.receiver.canonical_name(),
                    d.degradation,
                    d.removed
                ));
            }
            outcome.mask
        }
        "eap" | "eapig" => {
            let scores = if args.method == "eap" {
                eap_scores(&model, &graph, &cache, &metric)?
            } else {
                eapig_scores(&model, &graph, &cache, &metric, args.steps.unwrap_or(5))?
            };
            let rule = match (args.threshold, args.size) {
                (Some(t), None) => SelectRule::Threshold(t),
                (None, Some(k)) => SelectRule::TopK(k),
                _ => unreachable!("validated above"),
            };
            mask_from_scores(&graph, &scores, rule)?
        }
        "random" => CircuitMask::random(&graph, args.size.unwrap(), args.seed)?,
        _ => unreachable!("validated above"),
    };

    let mut manifest = RunManifest::new("discover", discover_digest(&args), vec![args.seed])
        .input(&args.model)
        .input(&args.pairs)
        .output(&args.out);
    let metadata = CircuitMetadata {
        method: args.method.clone(),
        threshold: args.threshold,
        metric: metric.label(),
        seed: args.seed,
        class: match metric.kind {
            vicd_core::patching::MetricKind::TargetLogitDiff { target } => Some(target),
            _ => None,
        },
        manifest_digest: Some(manifest.digest()),
    };
    let file = CircuitFile::from_mask(&graph, &mask, model.digest(), metadata)?;
    atomic_write(&args.out, file.to_json()?.as_bytes())?;
    if !decisions_log.is_empty() {
        let log_path = args.out.with_extension("decisions.csv");
        atomic_write(&log_path, decisions_log.as_bytes())?;
    }
    manifest.wall_clock_ms = started.elapsed().as_millis();
    manifest.write(&manifest_path(&args.out))?;
    Ok(())
}

fn discover_digest(args: &DiscoverArgs) -> String {
    vicd_core::graph::digest_bytes(format!("{args:?}").as_bytes())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub circuit: PathBuf,
    pub pairs: PathBuf,
    pub out: PathBuf,
}

/// Evaluate one circuit's faithfulness and sparsity; emits a one-row CSV.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (model, examples) = load_run_inputs(&args.model, &args.pairs, false, false)?;
    let graph = build_graph(&model.config);
    let file = CircuitFile::load(&args.circuit)?;
    if file.model_digest != model.digest() {
        return Err(Error::Fingerprint(
            "circuit was mined on a different model".into(),
        ));
    }
    let mask = file.to_mask(&graph)?;
    let (cache, labels) = build_cache(&model, &examples)?;
    let accuracy = patched_accuracy(&model, &graph, &cache, &labels, &mask, PatchMode::Live)?;

    let point = SweepPoint {
        method: file.metadata.method.clone(),
        fraction: mask.popcount() as f64 / graph.edge_count() as f64,
        edges: mask.popcount(),
        accuracy,
        seed: file.metadata.seed,
    };
    atomic_write(&args.out, sweep_csv(&[point]).as_bytes())?;
    let mut manifest = RunManifest::new("eval", String::new(), vec![])
        .input(&args.model)
        .input(&args.circuit)
        .input(&args.pairs)
        .output(&args.out);
    manifest.wall_clock_ms = started.elapsed().as_millis();
    manifest.write(&manifest_path(&args.out))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub model: PathBuf,
    pub pairs: PathBuf,
    /// Comma-separated method tokens (`vicd,eap,eapig10,random`).
    pub methods: String,
    pub grid: Vec<f64>,
    pub steps: Option<usize>,
    pub metric: String,
    pub target: Option<usize>,
    pub seed: u64,
    pub eval_pairs: Option<PathBuf>,
    pub no_filter: bool,
    pub out: PathBuf,
}

/// Faithfulness/sparsity curves for several methods on one pair set.
pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let started = Instant::now();
    let (model, examples) = load_run_inputs(&args.model, &args.pairs, false, !args.no_filter)?;
    let graph = build_graph(&model.config);
    let (train_cache, _) = build_cache(&model, &examples)?;
    let (eval_cache, eval_labels) = match &args.eval_pairs {
        Some(path) => {
            let (eval_examples, _) = load_pairs(path)?;
            build_cache(&model, &eval_examples)?
        }
        None => build_cache(&model, &examples)?,
    };
    let metric = metric_from_flags(&args.metric, args.target, &examples)?;

    let mut base = DiscoveryConfig::new(1e-4, metric);
    base.seed = args.seed;

    let mut points = Vec::new();
    for token in args.methods.split(',') {
        let method = parse_method(token.trim(), args.steps)?;
        points.extend(sweep_faithfulness(
            method,
            &model,
            &graph,
            &train_cache,
            &eval_cache,
            &eval_labels,
            &args.grid,
            &base,
        )?);
    }
    atomic_write(&args.out, sweep_csv(&points).as_bytes())?;
    let mut manifest = RunManifest::new("sweep", String::new(), vec![args.seed])
        .input(&args.model)
        .input(&args.pairs)
        .output(&args.out);
    manifest.wall_clock_ms = started.elapsed().as_millis();
    manifest.write(&manifest_path(&args.out))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub circuits: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

/// Ensemble analysis over a set of circuit files: per-class reports with
/// stability histograms plus a pairwise similarity CSV.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let started = Instant::now();
    if args.circuits.is_empty() {
        return Err(Error::Argument("no circuit files given".into()));
    }
    let files: Vec<CircuitFile> = args
        .circuits
        .iter()
        .map(|p| CircuitFile::load(p))
        .collect::<Result<_>>()?;
    let graph = files[0].rebuild_graph()?;
    for f in &files[1..] {
        if f.graph_fingerprint != files[0].graph_fingerprint {
            return Err(Error::Fingerprint(
                "circuits were mined on different graphs".into(),
            ));
        }
    }

    let mut groups: BTreeMap<usize, Vec<CircuitMask>> = BTreeMap::new();
    let mut group_meta: BTreeMap<usize, (u64, f64)> = BTreeMap::new();
    for f in &files {
        let class = f.metadata.class.unwrap_or(usize::MAX);
        groups.entry(class).or_default().push(f.to_mask(&graph)?);
        group_meta
            .entry(class)
            .or_insert((f.metadata.seed, f.metadata.threshold.unwrap_or(0.0)));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let mut reports = BTreeMap::new();
    for (class, masks) in &groups {
        let (seed, threshold) = group_meta[class];
        let ensemble = CircuitEnsemble::new(
            masks.clone(),
            EnsembleProvenance {
                class_label: (*class != usize::MAX).then_some(*class),
                seed,
                batch_size: 0,
                threshold,
            },
        )?;
        let report = ensemble_report(&graph, &ensemble)?;
        reports.insert(class.to_string(), report);
    }
    let mut report_json =
        serde_json::to_string_pretty(&reports).map_err(vicd_core::Error::from)?;
    report_json.push('\n');
    let report_path = args.out_dir.join("report.json");
    atomic_write(&report_path, report_json.as_bytes())?;

    let named_groups: BTreeMap<usize, Vec<CircuitMask>> = groups
        .into_iter()
        .filter(|(class, _)| *class != usize::MAX)
        .collect();
    let csv_path = args.out_dir.join("similarity.csv");
    atomic_write(&csv_path, similarity_csv(&named_groups)?.as_bytes())?;

    let mut manifest = RunManifest::new("analyze", String::new(), vec![])
        .output(&report_path)
        .output(&csv_path);
    for p in &args.circuits {
        manifest = manifest.input(p);
    }
    manifest.wall_clock_ms = started.elapsed().as_millis();
    manifest.write(&args.out_dir.join("analysis.manifest.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// steer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SteerArgs {
    pub model: PathBuf,
    pub circuit: PathBuf,
    pub pairs_attacked: PathBuf,
    pub pairs_clean: PathBuf,
    pub regime: String,
    pub epsilon: f64,
    pub alpha_grid: Vec<f64>,
    pub layer_grid: Option<Vec<usize>>,
    /// Cap on pairs used for direction estimation.
    pub direction_pairs: usize,
    pub sender_global: bool,
    pub out_dir: PathBuf,
}

impl SteerArgs {
    pub fn new(
        model: PathBuf,
        circuit: PathBuf,
        pairs_attacked: PathBuf,
        pairs_clean: PathBuf,
        out_dir: PathBuf,
    ) -> Self {
        Self {
            model,
            circuit,
            pairs_attacked,
            pairs_clean,
            regime: "pre_normed:mean".into(),
            epsilon: DEFAULT_EPSILON,
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            layer_grid: None,
            direction_pairs: 160,
            sender_global: false,
            out_dir,
        }
    }
}

/// Estimate directions from attacked pairs, sweep (alpha, layer cutoff)
/// and emit the directions file plus the sweep CSV.
pub fn cmd_steer(args: &SteerArgs) -> Result<()> {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let graph = build_graph(&model.config);
    let file = CircuitFile::load(&args.circuit)?;
    if file.model_digest != model.digest() {
        return Err(Error::Fingerprint(
            "circuit was mined on a different model".into(),
        ));
    }
    let circuit = file.to_mask(&graph)?;

    let (attacked_examples, attacked_manifest) = load_pairs(&args.pairs_attacked)?;
    let (clean_examples, _) = load_pairs(&args.pairs_clean)?;
    let regime = DirectionRegime::parse(&args.regime)?;

    // The attacked file stores the overlaid image in the corrupted slot;
    // direction estimation wants (attack-bearing, counterpart).
    let estimation_pairs: Vec<(vicd_core::linalg::Mat, vicd_core::linalg::Mat)> =
        attacked_examples
            .iter()
            .take(args.direction_pairs)
            .map(|e| (e.corrupted.clone(), e.clean.clone()))
            .collect();
    let senders = circuit_senders(&graph, &circuit);
    let mut directions =
        compute_directions(&model, &estimation_pairs, &senders, regime, args.epsilon)?;
    directions.attack_id = attacked_manifest.spec_digest.clone();

    let clean_set: Vec<(vicd_core::linalg::Mat, usize)> = clean_examples
        .iter()
        .map(|e| (e.clean.clone(), e.label))
        .collect();
    let attacked_set: Vec<(vicd_core::linalg::Mat, usize, usize)> = attacked_examples
        .iter()
        .map(|e| {
            let target = e.attack_target.ok_or_else(|| {
                Error::Argument("attacked pairs are missing attack-target labels".into())
            })?;
            Ok((e.corrupted.clone(), e.label, target))
        })
        .collect::<Result<_>>()?;

    let layer_grid = args
        .layer_grid
        .clone()
        .unwrap_or_else(|| (0..=model.config.layers).collect());
    let scope = if args.sender_global {
        SteeringScope::SenderGlobal
    } else {
        SteeringScope::EdgeGated
    };
    let rows = attack_metrics(
        &model,
        &graph,
        &circuit,
        &directions,
        &clean_set,
        &attacked_set,
        &args.alpha_grid,
        &layer_grid,
        scope,
    )?;

    std::fs::create_dir_all(&args.out_dir)?;
    let dirs_path = args.out_dir.join("directions.cfw");
    atomic_write(&dirs_path, &directions_to_archive(&directions)?.to_bytes()?)?;
    let csv_path = args.out_dir.join("steer_sweep.csv");
    atomic_write(&csv_path, steer_sweep_csv(&rows).as_bytes())?;

    let mut manifest = RunManifest::new("steer", String::new(), vec![])
        .input(&args.model)
        .input(&args.circuit)
        .input(&args.pairs_attacked)
        .input(&args.pairs_clean)
        .output(&dirs_path)
        .output(&csv_path);
    manifest.wall_clock_ms = started.elapsed().as_millis();
    manifest.write(&args.out_dir.join("steer.manifest.json"))?;
    Ok(())
}

/// Parse comma-separated layer cutoffs.
pub fn parse_layer_grid(s: &str) -> Result<Vec<usize>> {
    parse_usize_list(s)
}
