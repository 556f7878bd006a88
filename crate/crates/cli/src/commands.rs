//! Subcommand implementations. Each returns what it wrote so callers (and
//! tests) can inspect results without re-reading files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ddescent_core::report::{
    read_curve_csv, render_svg, summarize, write_atomic, CurveRow, LabeledCurve, RegimeSummary,
    ShapeClass, SvgOptions,
};
use ddescent_core::sweep::{
    replicate_many, AggregateCurve, ModelFamily, Phase, RegimeConfig, RegimeKind, RegimeSpec,
    ReplicateData, ReplicateSettings, INTERPOLATION_TOL,
};
use ddescent_core::synthgen::{generate_friedman1, noise_free_targets};
use ddescent_core::vcf_ingest::{ingest, IngestManifest};
use ddescent_core::{Dataset, Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, Emit, EvalTarget, RunConfig, SynthData};

/// Name of the file written last by `sweep` and `repro`; its absence marks an
/// incomplete run.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VERDICT_FILE: &str = "verdict.json";

/// Noise level of the built-in replication suite. With unit noise the
/// irreducible error swamps the variance a single deep tree adds, so the
/// capacity sweeps cannot turn upward; see the README.
pub const REPRO_NOISE_SIGMA: f64 = 0.2;
pub const REPRO_REPLICATES: usize = 10;

fn progress(msg: impl std::fmt::Display) {
    eprintln!("[ddescent] {msg}");
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable value");
    bytes.push(b'\n');
    bytes
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolve an output path: absolute paths are kept, others live under
/// `output_dir`.
pub fn output_path(cfg: &RunConfig, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        cfg.output_dir.join(p)
    }
}

/// Size the global rayon pool. The first call wins; later calls are no-ops.
pub fn init_workers(workers: Option<usize>) {
    let n = workers.or_else(|| {
        std::env::var("DDESCENT_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub command: String,
    pub n_samples: usize,
    pub n_features: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub dataset: PathBuf,
}

/// Write `dataset.csv` and `synth_manifest.json` under the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthManifest> {
    cfg.validate()?;
    let synth = match &cfg.data {
        DataConfig::Synth(s) => *s,
        _ => return Err(Error::Config("synth needs a synth data section".into())),
    };
    let spec = synth.spec(cfg.seed);
    let ds = generate_friedman1(&spec)?;
    create_dir(&cfg.output_dir)?;
    let path = output_path(cfg, Path::new("dataset.csv"));
    write_atomic(&path, ds.to_csv_string().as_bytes())?;
    let manifest = SynthManifest {
        command: "synth".into(),
        n_samples: spec.n_samples,
        n_features: spec.n_features,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
        dataset: PathBuf::from("dataset.csv"),
    };
    write_atomic(&output_path(cfg, Path::new("synth_manifest.json")), &to_json(&manifest))?;
    progress(format_args!("wrote {}", path.display()));
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub command: String,
    pub matrix: PathBuf,
    #[serde(flatten)]
    pub manifest: IngestManifest,
}

/// Write `matrix.csv` (features plus the 0/1 label as target) and
/// `ingest_manifest.json`.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<(Dataset, IngestReport)> {
    cfg.validate()?;
    let ic = match &cfg.data {
        DataConfig::Ingest(ic) => ic,
        _ => return Err(Error::Config("ingest needs an ingest data section".into())),
    };
    let out = ingest(ic)?;
    let ds = out.matrix.to_dataset()?;
    create_dir(&cfg.output_dir)?;
    let path = output_path(cfg, Path::new("matrix.csv"));
    write_atomic(&path, ds.to_csv_string().as_bytes())?;
    let report = IngestReport {
        command: "ingest".into(),
        matrix: PathBuf::from("matrix.csv"),
        manifest: out.manifest,
    };
    write_atomic(&output_path(cfg, Path::new("ingest_manifest.json")), &to_json(&report))?;
    progress(format_args!(
        "wrote {} ({} samples x {} columns)",
        path.display(),
        ds.n_samples(),
        ds.n_features()
    ));
    Ok((ds, report))
}

fn binary_labels(targets: &[f64]) -> Option<Vec<u8>> {
    targets
        .iter()
        .map(|&t| {
            if t == 0.0 {
                Some(0)
            } else if t == 1.0 {
                Some(1)
            } else {
                None
            }
        })
        .collect()
}

fn stratify_labels(cfg: &RunConfig, ds: &Dataset) -> Result<Option<Vec<u8>>> {
    let labels = binary_labels(ds.targets());
    match (cfg.stratify, labels) {
        (Some(false), _) => Ok(None),
        (None, l) => Ok(l),
        (Some(true), Some(l)) => Ok(Some(l)),
        (Some(true), None) => Err(Error::Config(
            "stratify = true needs 0/1 targets".into(),
        )),
    }
}

enum Source {
    Synth(SynthData),
    Fixed(Dataset),
}

fn load_source(cfg: &RunConfig) -> Result<Source> {
    Ok(match &cfg.data {
        DataConfig::Synth(s) => Source::Synth(*s),
        DataConfig::Ingest(ic) => Source::Fixed(ingest(ic)?.matrix.to_dataset()?),
        DataConfig::Csv { path } => Source::Fixed(Dataset::read_csv_path(path)?),
    })
}

fn replicate_data(cfg: &RunConfig, source: &Source, data_seed: u64) -> Result<ReplicateData> {
    let dataset = match source {
        Source::Synth(s) => generate_friedman1(&s.spec(data_seed))?,
        Source::Fixed(ds) => ds.clone(),
    };
    let score_targets = match cfg.evaluate_against {
        EvalTarget::Observed => None,
        EvalTarget::NoiseFree => Some(noise_free_targets(&dataset)?),
    };
    let stratify = stratify_labels(cfg, &dataset)?;
    Ok(ReplicateData {
        dataset,
        score_targets,
        stratify,
    })
}

/// Per-regime JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    #[serde(flatten)]
    pub summary: RegimeSummary,
    pub seed: u64,
    pub min_test_mse: f64,
    pub max_test_mse: f64,
    pub seed_thresholds: Vec<Option<usize>>,
    /// `per_seed_test_mse[j][i]` is seed `j`'s test MSE at grid point `i`.
    pub per_seed_test_mse: Vec<Vec<f64>>,
}

impl RegimeReport {
    fn new(agg: &AggregateCurve, noise_tol: Option<f64>) -> Result<Self> {
        let summary = summarize(agg, noise_tol)?;
        let test = agg.mean_test_mse();
        Ok(Self {
            min_test_mse: test[summary.min_test_index],
            max_test_mse: test[summary.max_test_index],
            seed: agg.regime.seed,
            seed_thresholds: agg.seed_thresholds.clone(),
            per_seed_test_mse: (0..agg.n_seeds).map(|j| agg.seed_test_mse(j)).collect(),
            summary,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: RunConfig,
    pub regimes: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Everything a sweep produced.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub curves: Vec<AggregateCurve>,
    pub reports: Vec<RegimeReport>,
    pub files: Vec<PathBuf>,
}

fn regime_svg(cfg: &RunConfig, agg: &AggregateCurve) -> Result<Vec<u8>> {
    let curve = LabeledCurve::test_mse(agg.regime.name.clone(), agg);
    render_svg(
        &[curve],
        &SvgOptions {
            log_x: cfg.log_x,
            threshold_marker: true,
            title: agg.regime.name.clone(),
        },
    )
}

fn run_sweep(cfg: &RunConfig, command: &str) -> Result<SweepOutcome> {
    cfg.validate()?;
    let specs = cfg.regime_specs()?;
    if specs.is_empty() {
        return Err(Error::Config("no regimes configured".into()));
    }
    create_dir(&cfg.output_dir)?;
    let manifest_path = output_path(cfg, Path::new(MANIFEST_FILE));
    match std::fs::remove_file(&manifest_path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(&manifest_path, e)),
    }
    init_workers(cfg.workers);

    let source = load_source(cfg)?;
    let settings = ReplicateSettings {
        base_seed: cfg.seed,
        n_seeds: cfg.replicates,
        split_fraction: cfg.split_fraction,
    };
    let points: usize = specs.iter().map(|s| s.grid.len()).sum();
    progress(format_args!(
        "{command}: {} regimes, {points} grid points, {} replicates",
        specs.len(),
        cfg.replicates
    ));
    let curves = replicate_many(&specs, &settings, |seed| replicate_data(cfg, &source, seed))?;

    let mut files = Vec::new();
    let mut reports = Vec::new();
    for agg in &curves {
        let name = &agg.regime.name;
        let report = RegimeReport::new(agg, cfg.noise_tol)?;
        if cfg.emits(Emit::Csv) {
            let f = PathBuf::from(format!("{name}.csv"));
            ddescent_core::report::write_curve_csv(agg, &output_path(cfg, &f))?;
            files.push(f);
        }
        if cfg.emits(Emit::Svg) {
            let f = PathBuf::from(format!("{name}.svg"));
            write_atomic(&output_path(cfg, &f), &regime_svg(cfg, agg)?)?;
            files.push(f);
        }
        if cfg.emits(Emit::Json) {
            let f = PathBuf::from(format!("{name}.json"));
            write_atomic(&output_path(cfg, &f), &to_json(&report))?;
            files.push(f);
        }
        progress(format_args!(
            "{name}: {} (threshold {})",
            report.summary.shape.classification,
            report.summary.threshold_label.as_deref().unwrap_or("none")
        ));
        reports.push(report);
    }
    Ok(SweepOutcome {
        curves,
        reports,
        files,
    })
}

fn write_manifest(cfg: &RunConfig, command: &str, outcome: &SweepOutcome) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        status: "complete".into(),
        config: cfg.clone(),
        regimes: outcome.curves.iter().map(|c| c.regime.name.clone()).collect(),
        files: outcome.files.clone(),
    };
    write_atomic(&output_path(cfg, Path::new(MANIFEST_FILE)), &to_json(&manifest))
}

/// Run the configured regimes; `manifest.json` is written only once every
/// other artifact is in place.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    let outcome = run_sweep(cfg, "sweep")?;
    write_manifest(cfg, "sweep", &outcome)?;
    Ok(outcome)
}

fn regime(name: String, kind: &str, f: impl FnOnce(&mut RegimeConfig)) -> RegimeConfig {
    let mut r = RegimeConfig {
        name: Some(name),
        kind: kind.into(),
        ..Default::default()
    };
    f(&mut r);
    r
}

/// The replication suite: every sweep of the synthetic tree and boosting
/// figures.
pub fn paper_regimes() -> Vec<RegimeConfig> {
    let mut v = Vec::new();
    for ens in [1, 5, 10, 50] {
        v.push(regime(format!("leaf_sweep_ens{ens}"), "leaf_sweep", |r| r.ens = Some(ens)));
    }
    for leaf in [20, 50, 100, 500] {
        v.push(regime(format!("ens_sweep_leaf{leaf}"), "ens_sweep", |r| r.leaf = Some(leaf)));
    }
    for l_max in [50, 100, 200, 500] {
        v.push(regime(format!("composite_tree_lmax{l_max}"), "composite_tree", |r| {
            r.l_max = Some(l_max)
        }));
    }
    for ens in [1, 5, 10, 50] {
        v.push(regime(format!("boost_sweep_ens{ens}"), "boost_sweep", |r| r.ens = Some(ens)));
    }
    for boost in [20, 50, 100, 200] {
        v.push(regime(format!("gbm_ens_sweep_boost{boost}"), "ens_sweep", |r| {
            r.boost = Some(boost)
        }));
    }
    v.push(regime("composite_gbm".into(), "composite_gbm", |_| {}));
    v
}

/// Default configuration of `repro`.
pub fn repro_config() -> RunConfig {
    RunConfig {
        data: DataConfig::Synth(SynthData {
            noise_sigma: REPRO_NOISE_SIGMA,
            ..SynthData::default()
        }),
        regimes: paper_regimes(),
        replicates: REPRO_REPLICATES,
        output_dir: PathBuf::from("repro"),
        ..RunConfig::default()
    }
}

/// Shape a regime is expected to take, where there is one.
pub fn expected_shape(spec: &RegimeSpec) -> Option<ShapeClass> {
    match spec.kind {
        RegimeKind::EnsSweep => Some(ShapeClass::LShape),
        RegimeKind::LeafSweep if spec.fixed_params.get("ens") == Some(&1.0) => Some(ShapeClass::UShape),
        RegimeKind::CompositeTree | RegimeKind::CompositeGbm => Some(ShapeClass::DoubleDescent),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub name: String,
    pub kind: RegimeKind,
    pub model_family: ModelFamily,
    pub expected: Option<ShapeClass>,
    pub observed: ShapeClass,
    pub matches: Option<bool>,
    pub threshold_index: Option<usize>,
    pub peak_index: usize,
    pub first_test_mse: f64,
    pub last_test_mse: f64,
    /// Seeds whose final test MSE exceeds their first.
    pub seeds_last_above_first: usize,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub regimes: Vec<VerdictEntry>,
    pub expected_total: usize,
    pub expected_matched: usize,
}

fn verdict(outcome: &SweepOutcome) -> Verdict {
    let regimes: Vec<VerdictEntry> = outcome
        .curves
        .iter()
        .zip(&outcome.reports)
        .map(|(agg, rep)| {
            let expected = expected_shape(&agg.regime);
            let observed = rep.summary.shape.classification;
            let test = agg.mean_test_mse();
            let last = test.len() - 1;
            VerdictEntry {
                name: agg.regime.name.clone(),
                kind: agg.regime.kind,
                model_family: agg.regime.model_family,
                expected,
                observed,
                matches: expected.map(|e| e == observed),
                threshold_index: agg.threshold_index,
                peak_index: rep.summary.max_test_index,
                first_test_mse: test[0],
                last_test_mse: test[last],
                seeds_last_above_first: (0..agg.n_seeds)
                    .filter(|&j| agg.points[last].test_mse_per_seed[j] > agg.points[0].test_mse_per_seed[j])
                    .count(),
                n_seeds: agg.n_seeds,
            }
        })
        .collect();
    Verdict {
        expected_total: regimes.iter().filter(|r| r.expected.is_some()).count(),
        expected_matched: regimes.iter().filter(|r| r.matches == Some(true)).count(),
        regimes,
    }
}

/// Run the replication suite (the configured regimes, or the built-in set
/// when none are given) and write `verdict.json` beside the curve artifacts.
pub fn cmd_repro(cfg: &RunConfig) -> Result<(SweepOutcome, Verdict)> {
    let mut cfg = cfg.clone();
    if cfg.regimes.is_empty() {
        cfg.regimes = paper_regimes();
    }
    if !matches!(cfg.data, DataConfig::Synth(_)) {
        return Err(Error::Config("repro runs on synthetic data only".into()));
    }
    let mut outcome = run_sweep(&cfg, "repro")?;
    let v = verdict(&outcome);
    write_atomic(&output_path(&cfg, Path::new(VERDICT_FILE)), &to_json(&v))?;
    outcome.files.push(PathBuf::from(VERDICT_FILE));
    write_manifest(&cfg, "repro", &outcome)?;
    progress(format_args!(
        "repro: {}/{} regimes match their expected shape",
        v.expected_matched, v.expected_total
    ));
    Ok((outcome, v))
}

/// Rebuild a plottable series from CSV rows.
pub fn labeled_from_rows(name: impl Into<String>, rows: &[CurveRow]) -> Result<LabeledCurve> {
    if rows.is_empty() {
        return Err(Error::Data("curve CSV has no rows".into()));
    }
    let first_ens = rows.iter().position(|r| r.phase == Phase::Ensemble);
    let phase_boundary = match first_ens {
        Some(k) if k > 0 && rows[k..].iter().all(|r| r.phase == Phase::Ensemble) => Some(k),
        _ => None,
    };
    Ok(LabeledCurve {
        name: name.into(),
        labels: rows.iter().map(|r| r.label.clone()).collect(),
        values: rows.iter().map(|r| r.test_mse).collect(),
        threshold_index: rows
            .iter()
            .position(|r| r.interpolated || r.train_mse <= INTERPOLATION_TOL),
        phase_boundary,
        family: if rows.iter().any(|r| r.param_boost.is_some()) {
            ModelFamily::Gbm
        } else {
            ModelFamily::TreeForest
        },
    })
}

/// Re-render an SVG from one or more curve CSVs.
pub fn cmd_plot(inputs: &[PathBuf], output: &Path, opts: &SvgOptions) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Usage("plot needs at least one curve CSV".into()));
    }
    let curves: Vec<LabeledCurve> = inputs
        .iter()
        .map(|p| {
            let rows = read_curve_csv(p)?;
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            labeled_from_rows(name, &rows).map_err(|e| e.context(p.display()))
        })
        .collect::<Result<_>>()?;
    let n = curves[0].values.len();
    if curves.iter().any(|c| c.values.len() != n) {
        return Err(Error::Data("curves to overlay must have the same number of points".into()));
    }
    let svg = render_svg(&curves, opts)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(output, &svg)?;
    progress(format_args!("wrote {}", output.display()));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunEntry {
    pub name: String,
    pub kind: RegimeKind,
    pub model_family: ModelFamily,
    pub seed: u64,
    pub phase_boundary: Option<usize>,
    pub fixed_params: BTreeMap<String, f64>,
    pub labels: Vec<String>,
    pub grid: Vec<ddescent_core::sweep::GridPoint>,
}

/// Fully expanded grids as pretty JSON, without fitting anything.
pub fn dry_run(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let entries: Vec<DryRunEntry> = cfg
        .regime_specs()?
        .into_iter()
        .map(|s| DryRunEntry {
            phase_boundary: s.phase_boundary(),
            labels: s.grid.iter().map(|g| g.label.clone()).collect(),
            name: s.name,
            kind: s.kind,
            model_family: s.model_family,
            seed: s.seed,
            fixed_params: s.fixed_params,
            grid: s.grid,
        })
        .collect();
    Ok(String::from_utf8(to_json(&entries)).expect("json is utf-8"))
}

/// Process exit status for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } => 3,
        Error::Io { .. } => 4,
        Error::Usage(_) => 5,
    }
}
