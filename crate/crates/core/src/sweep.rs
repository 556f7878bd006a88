//! Complexity regimes: declarative grids over learner capacity and ensemble
//! size, their execution on a fixed train/test split, replication across
//! seeds and interpolation-threshold detection.
//!
//! Five regime kinds are supported:
//!
//! | kind            | swept axis                  | held fixed          |
//! |-----------------|-----------------------------|---------------------|
//! | `leaf_sweep`    | tree leaf budget            | forest size         |
//! | `ens_sweep`     | ensemble size               | leaf budget / stages|
//! | `boost_sweep`   | boosting stages             | ensemble size       |
//! | `composite_tree`| leaves up to `l_max`, then forest size at `l_max` | |
//! | `composite_gbm` | stages up to `boost`, then GBM-ensemble size      | |
//!
//! Every point of a regime shares the regime's model seed. Since ensemble
//! members and boosting stages are nested (the first `k` members/stages of a
//! larger model are the smaller model), one fit per model family answers all
//! points of a grid; [`Workbench`] caches those fits, so several regimes run
//! against the same split reuse them.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensembles::{bootstrap_rows, fit_forest, ForestModel, GbmModel, GbmParams};
use crate::rng::derive_stream;
use crate::{mse, split_dataset, Dataset, Error, Result, SplitIndices};

/// Train MSE at or below this counts as interpolation.
pub const INTERPOLATION_TOL: f64 = 1e-12;

pub const DEFAULT_LEAF_LADDER: [usize; 8] = [2, 5, 10, 20, 50, 100, 200, 500];
/// Composite boosting starts from a single stage so the underfitting side of
/// the capacity phase is visible.
pub const DEFAULT_COMPOSITE_BOOST_STOPS: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 200];
pub const DEFAULT_BOOST_STOPS: [usize; 5] = [10, 20, 50, 100, 200];
pub const DEFAULT_ENSEMBLE_PHASE: [usize; 6] = [1, 2, 5, 10, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    LeafSweep,
    EnsSweep,
    BoostSweep,
    CompositeTree,
    CompositeGbm,
}

impl RegimeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::LeafSweep => "leaf_sweep",
            RegimeKind::EnsSweep => "ens_sweep",
            RegimeKind::BoostSweep => "boost_sweep",
            RegimeKind::CompositeTree => "composite_tree",
            RegimeKind::CompositeGbm => "composite_gbm",
        }
    }

    pub fn is_composite(self) -> bool {
        matches!(self, RegimeKind::CompositeTree | RegimeKind::CompositeGbm)
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "leafsweep" => RegimeKind::LeafSweep,
            "enssweep" => RegimeKind::EnsSweep,
            "boostsweep" => RegimeKind::BoostSweep,
            "compositetree" => RegimeKind::CompositeTree,
            "compositegbm" => RegimeKind::CompositeGbm,
            _ => return Err(Error::config(format!("unknown regime {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    TreeForest,
    Gbm,
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tree_forest" | "tree" | "forest" | "rf" => Ok(ModelFamily::TreeForest),
            "gbm" | "boosting" => Ok(ModelFamily::Gbm),
            _ => Err(Error::config(format!("unknown model family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Capacity,
    Ensemble,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Capacity => "capacity",
            Phase::Ensemble => "ensemble",
        }
    }
}

/// Fully resolved model parameters of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointParams {
    /// Tree leaf budget (forests) or per-stage leaf budget (GBMs).
    pub leaf_budget: usize,
    /// Boosting stages; `None` for forests.
    pub n_stages: Option<usize>,
    pub n_members: usize,
    pub bootstrap: bool,
    /// Boosting learning rate; `None` for forests.
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub phase: Phase,
    pub params: PointParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub name: String,
    pub kind: RegimeKind,
    pub model_family: ModelFamily,
    pub fixed_params: BTreeMap<String, f64>,
    pub grid: Vec<GridPoint>,
    pub seed: u64,
}

impl RegimeSpec {
    /// Index of the first ensemble-phase point of a composite regime.
    pub fn phase_boundary(&self) -> Option<usize> {
        if !self.kind.is_composite() {
            return None;
        }
        self.grid.iter().position(|p| p.phase == Phase::Ensemble)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config(format!("regime {:?} has an empty grid", self.name)));
        }
        if let Some(b) = self.phase_boundary() {
            if self.grid[b..].iter().any(|p| p.phase != Phase::Ensemble) {
                return Err(Error::config("composite phases must be contiguous"));
            }
        }
        for w in self.grid.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.phase != b.phase {
                continue;
            }
            let increasing = match (self.kind, a.phase) {
                (RegimeKind::EnsSweep, _) | (_, Phase::Ensemble) => {
                    a.params.n_members < b.params.n_members
                }
                (RegimeKind::LeafSweep | RegimeKind::CompositeTree, Phase::Capacity) => {
                    a.params.leaf_budget < b.params.leaf_budget
                }
                (RegimeKind::BoostSweep | RegimeKind::CompositeGbm, Phase::Capacity) => {
                    a.params.n_stages < b.params.n_stages
                }
            };
            if !increasing {
                return Err(Error::config(format!(
                    "regime {:?}: grid is not strictly increasing at {} -> {}",
                    self.name, a.label, b.label
                )));
            }
        }
        for p in &self.grid {
            if p.params.leaf_budget == 0 || p.params.n_members == 0 {
                return Err(Error::config(format!(
                    "regime {:?}: point {} has a zero leaf budget or member count",
                    self.name, p.label
                )));
            }
            if let Some(lr) = p.params.learning_rate {
                GbmParams {
                    n_stages: p.params.n_stages.unwrap_or(0),
                    stage_leaf_budget: p.params.leaf_budget,
                    learning_rate: lr,
                }
                .validate()?;
            }
        }
        Ok(())
    }

    /// The same regime with a different model seed.
    pub fn with_seed(&self, seed: u64) -> RegimeSpec {
        RegimeSpec {
            seed,
            ..self.clone()
        }
    }
}

/// User-facing regime description; unset fields fall back to the defaults
/// of the chosen kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeConfig {
    pub name: Option<String>,
    pub kind: String,
    pub family: Option<String>,
    /// Fixed ensemble size for leaf/boost sweeps.
    pub ens: Option<usize>,
    /// Fixed leaf budget for a tree `ens_sweep`.
    pub leaf: Option<usize>,
    /// Fixed stage count for a GBM `ens_sweep` or `composite_gbm`.
    pub boost: Option<usize>,
    /// Final single-tree budget of `composite_tree`.
    pub l_max: Option<usize>,
    pub leaf_stops: Option<Vec<usize>>,
    pub ens_stops: Option<Vec<usize>>,
    pub boost_stops: Option<Vec<usize>>,
    pub learning_rate: Option<f64>,
    pub stage_leaf_budget: Option<usize>,
    /// Bootstrap ensemble members (default true). Single learners on the
    /// capacity axis always see the full training partition.
    pub bootstrap: Option<bool>,
    pub seed: Option<u64>,
}

fn forbid(kind: RegimeKind, fields: &[(&str, bool)]) -> Result<()> {
    for (name, set) in fields {
        if *set {
            return Err(Error::config(format!(
                "{} sweeps `{name}`; it cannot also be fixed",
                kind.as_str()
            )));
        }
    }
    Ok(())
}

fn stops(given: &Option<Vec<usize>>, default: &[usize]) -> Vec<usize> {
    given.clone().unwrap_or_else(|| default.to_vec())
}

/// Materialise the grid of a regime.
pub fn expand_regime(cfg: &RegimeConfig, default_seed: u64) -> Result<RegimeSpec> {
    let kind: RegimeKind = cfg.kind.parse()?;
    let seed = cfg.seed.unwrap_or(default_seed);
    let bootstrap = cfg.bootstrap.unwrap_or(true);
    let lr = cfg.learning_rate.unwrap_or(0.85);
    let stage_leaves = cfg.stage_leaf_budget.unwrap_or(10);
    let family = match (&cfg.family, kind) {
        (_, RegimeKind::LeafSweep | RegimeKind::CompositeTree) => ModelFamily::TreeForest,
        (_, RegimeKind::BoostSweep | RegimeKind::CompositeGbm) => ModelFamily::Gbm,
        (Some(f), RegimeKind::EnsSweep) => f.parse()?,
        (None, RegimeKind::EnsSweep) => {
            if cfg.boost.is_some() {
                ModelFamily::Gbm
            } else {
                ModelFamily::TreeForest
            }
        }
    };
    if let Some(f) = &cfg.family {
        if f.parse::<ModelFamily>()? != family {
            return Err(Error::config(format!(
                "{} only supports the {family:?} family",
                kind.as_str()
            )));
        }
    }

    let forest = |leaf: usize, members: usize, bootstrap: bool| PointParams {
        leaf_budget: leaf,
        n_stages: None,
        n_members: members,
        bootstrap,
        learning_rate: None,
    };
    let gbm = |stages: usize, members: usize, bootstrap: bool| PointParams {
        leaf_budget: stage_leaves,
        n_stages: Some(stages),
        n_members: members,
        bootstrap,
        learning_rate: Some(lr),
    };
    let point = |label: String, phase: Phase, params: PointParams| GridPoint {
        label,
        phase,
        params,
    };
    let ens_label = |k: usize| match family {
        ModelFamily::TreeForest => format!("RF{k}"),
        ModelFamily::Gbm => format!("GB{k}"),
    };

    let mut fixed = BTreeMap::new();
    let grid: Vec<GridPoint> = match kind {
        RegimeKind::LeafSweep => {
            forbid(kind, &[("leaf", cfg.leaf.is_some()), ("l_max", cfg.l_max.is_some())])?;
            let ens = cfg.ens.unwrap_or(1);
            fixed.insert("ens".into(), ens as f64);
            stops(&cfg.leaf_stops, &DEFAULT_LEAF_LADDER)
                .into_iter()
                .map(|l| point(format!("L{l}"), Phase::Capacity, forest(l, ens, bootstrap && ens > 1)))
                .collect()
        }
        RegimeKind::EnsSweep => {
            forbid(kind, &[("ens", cfg.ens.is_some())])?;
            let ens_stops = stops(&cfg.ens_stops, &(1..=50).collect::<Vec<_>>());
            match family {
                ModelFamily::TreeForest => {
                    let leaf = cfg.leaf.unwrap_or(100);
                    fixed.insert("leaf".into(), leaf as f64);
                    ens_stops
                        .into_iter()
                        .map(|k| point(ens_label(k), Phase::Ensemble, forest(leaf, k, bootstrap)))
                        .collect()
                }
                ModelFamily::Gbm => {
                    let boost = cfg.boost.unwrap_or(200);
                    fixed.insert("boost".into(), boost as f64);
                    fixed.insert("learning_rate".into(), lr);
                    fixed.insert("stage_leaf_budget".into(), stage_leaves as f64);
                    ens_stops
                        .into_iter()
                        .map(|k| point(ens_label(k), Phase::Ensemble, gbm(boost, k, bootstrap)))
                        .collect()
                }
            }
        }
        RegimeKind::BoostSweep => {
            forbid(kind, &[("boost", cfg.boost.is_some())])?;
            let ens = cfg.ens.unwrap_or(1);
            fixed.insert("ens".into(), ens as f64);
            fixed.insert("learning_rate".into(), lr);
            fixed.insert("stage_leaf_budget".into(), stage_leaves as f64);
            stops(&cfg.boost_stops, &DEFAULT_BOOST_STOPS)
                .into_iter()
                .map(|b| point(format!("B{b}"), Phase::Capacity, gbm(b, ens, bootstrap && ens > 1)))
                .collect()
        }
        RegimeKind::CompositeTree => {
            forbid(kind, &[("ens", cfg.ens.is_some()), ("leaf", cfg.leaf.is_some())])?;
            let l_max = cfg.l_max.unwrap_or(500);
            fixed.insert("l_max".into(), l_max as f64);
            let mut leaves: Vec<usize> = stops(&cfg.leaf_stops, &DEFAULT_LEAF_LADDER)
                .into_iter()
                .filter(|&l| l < l_max)
                .collect();
            leaves.push(l_max);
            let mut g: Vec<GridPoint> = leaves
                .into_iter()
                .map(|l| point(format!("L{l}"), Phase::Capacity, forest(l, 1, false)))
                .collect();
            g.extend(
                stops(&cfg.ens_stops, &DEFAULT_ENSEMBLE_PHASE)
                    .into_iter()
                    .map(|k| point(ens_label(k), Phase::Ensemble, forest(l_max, k, bootstrap))),
            );
            g
        }
        RegimeKind::CompositeGbm => {
            forbid(kind, &[("ens", cfg.ens.is_some())])?;
            let boost = cfg.boost.unwrap_or(200);
            fixed.insert("boost".into(), boost as f64);
            fixed.insert("learning_rate".into(), lr);
            fixed.insert("stage_leaf_budget".into(), stage_leaves as f64);
            let mut stages: Vec<usize> = stops(&cfg.boost_stops, &DEFAULT_COMPOSITE_BOOST_STOPS)
                .into_iter()
                .filter(|&b| b < boost)
                .collect();
            stages.push(boost);
            let mut g: Vec<GridPoint> = stages
                .into_iter()
                .map(|b| point(format!("B{b}"), Phase::Capacity, gbm(b, 1, false)))
                .collect();
            g.extend(
                stops(&cfg.ens_stops, &DEFAULT_ENSEMBLE_PHASE)
                    .into_iter()
                    .map(|k| point(ens_label(k), Phase::Ensemble, gbm(boost, k, bootstrap))),
            );
            g
        }
    };
    let spec = RegimeSpec {
        name: cfg.name.clone().unwrap_or_else(|| kind.as_str().to_string()),
        kind,
        model_family: family,
        fixed_params: fixed,
        grid,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: usize,
    pub label: String,
    pub phase: Phase,
    pub params: PointParams,
    pub train_mse: f64,
    pub test_mse: f64,
    pub train_interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub regime: RegimeSpec,
    pub points: Vec<CurvePoint>,
    pub threshold_index: Option<usize>,
}

impl Curve {
    pub fn test_mse(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test_mse).collect()
    }

    pub fn train_mse(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.train_mse).collect()
    }
}

/// Smallest index whose train MSE is at most [`INTERPOLATION_TOL`].
pub fn first_interpolating(train_mse: &[f64]) -> Option<usize> {
    train_mse.iter().position(|&m| m <= INTERPOLATION_TOL)
}

pub fn detect_interpolation_threshold(curve: &Curve) -> Option<usize> {
    first_interpolating(&curve.train_mse())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ModelKey {
    Forest {
        leaf_budget: usize,
        bootstrap: bool,
        seed: u64,
    },
    Gbm {
        stage_leaf_budget: usize,
        learning_rate_bits: u64,
        bootstrap: bool,
        seed: u64,
    },
}

impl ModelKey {
    fn of(p: &PointParams, seed: u64) -> ModelKey {
        match p.learning_rate {
            None => ModelKey::Forest {
                leaf_budget: p.leaf_budget,
                bootstrap: p.bootstrap,
                seed,
            },
            Some(lr) => ModelKey::Gbm {
                stage_leaf_budget: p.leaf_budget,
                learning_rate_bits: lr.to_bits(),
                bootstrap: p.bootstrap,
                seed,
            },
        }
    }
}

#[derive(Debug)]
enum Fitted {
    Forest(ForestModel),
    /// Without bootstrap every member is the same model, so only one is fit.
    Gbm { members: Vec<GbmModel>, shared: bool },
}

impl Fitted {
    fn capacity(&self) -> (usize, usize) {
        match self {
            Fitted::Forest(f) => (f.trees().len(), 0),
            Fitted::Gbm { members, shared } => {
                let m = if *shared { usize::MAX } else { members.len() };
                (m, members[0].stages().len())
            }
        }
    }
}

/// Train/test partitions of one dataset plus a cache of fitted model
/// families.
pub struct Workbench {
    train: Dataset,
    test: Dataset,
    test_scores: Vec<f64>,
    cache: Mutex<HashMap<ModelKey, Arc<Fitted>>>,
}

impl Workbench {
    /// Test MSE is scored against the observed targets.
    pub fn new(ds: &Dataset, split: &SplitIndices) -> Result<Self> {
        Self::with_score_targets(ds, split, None)
    }

    /// `score_targets`, when given, is aligned with the rows of `ds` and
    /// replaces the observed targets when scoring the test partition (for
    /// instance noise-free synthetic targets).
    pub fn with_score_targets(
        ds: &Dataset,
        split: &SplitIndices,
        score_targets: Option<&[f64]>,
    ) -> Result<Self> {
        split.validate(ds.n_samples())?;
        if let Some(s) = score_targets {
            if s.len() != ds.n_samples() {
                return Err(Error::usage(format!(
                    "{} score targets for {} samples",
                    s.len(),
                    ds.n_samples()
                )));
            }
        }
        let train = ds.select_rows(&split.train)?;
        let test = ds.select_rows(&split.test)?;
        let test_scores = match score_targets {
            Some(s) => split.test.iter().map(|&i| s[i]).collect(),
            None => test.targets().to_vec(),
        };
        Ok(Self {
            train,
            test,
            test_scores,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn test(&self) -> &Dataset {
        &self.test
    }

    fn needs(spec: &RegimeSpec) -> HashMap<ModelKey, (usize, usize)> {
        let mut need: HashMap<ModelKey, (usize, usize)> = HashMap::new();
        for p in &spec.grid {
            let e = need.entry(ModelKey::of(&p.params, spec.seed)).or_default();
            e.0 = e.0.max(p.params.n_members);
            e.1 = e.1.max(p.params.n_stages.unwrap_or(0));
        }
        need
    }

    /// Fit everything the given regimes will ask for, merging requirements so
    /// each model family is fit once.
    pub fn prepare(&self, specs: &[&RegimeSpec]) -> Result<()> {
        let mut need: HashMap<ModelKey, (usize, usize)> = HashMap::new();
        for s in specs {
            s.validate()?;
            for (k, (m, st)) in Self::needs(s) {
                let e = need.entry(k).or_default();
                e.0 = e.0.max(m);
                e.1 = e.1.max(st);
            }
        }
        let missing: Vec<(ModelKey, usize, usize)> = {
            let cache = self.cache.lock().unwrap();
            let mut v: Vec<_> = need
                .into_iter()
                .filter(|(k, (m, st))| {
                    cache.get(k).map_or(true, |f| {
                        let (cm, cs) = f.capacity();
                        cm < *m || cs < *st
                    })
                })
                .map(|(k, (m, st))| (k, m, st))
                .collect();
            // Deterministic fitting order.
            v.sort_by_key(|(k, m, st)| (format!("{k:?}"), *m, *st));
            v
        };
        let fitted: Vec<(ModelKey, Fitted)> = missing
            .into_par_iter()
            .map(|(k, m, st)| Ok((k, self.fit(k, m, st)?)))
            .collect::<Result<_>>()?;
        let mut cache = self.cache.lock().unwrap();
        for (k, f) in fitted {
            cache.insert(k, Arc::new(f));
        }
        Ok(())
    }

    fn fit(&self, key: ModelKey, members: usize, stages: usize) -> Result<Fitted> {
        match key {
            ModelKey::Forest {
                leaf_budget,
                bootstrap,
                seed,
            } => {
                let members = if bootstrap { members } else { 1 };
                Ok(Fitted::Forest(fit_forest(&self.train, members, leaf_budget, bootstrap, seed)?))
            }
            ModelKey::Gbm {
                stage_leaf_budget,
                learning_rate_bits,
                bootstrap,
                seed,
            } => {
                let params = GbmParams {
                    n_stages: stages,
                    stage_leaf_budget,
                    learning_rate: f64::from_bits(learning_rate_bits),
                };
                let n = self.train.n_samples();
                let count = if bootstrap { members } else { 1 };
                let members = (0..count)
                    .into_par_iter()
                    .map(|j| {
                        if bootstrap {
                            let rows = bootstrap_rows(n, seed, j as u64);
                            crate::ensembles::fit_gbm_rows(&self.train, &rows, &params, seed)
                        } else {
                            crate::ensembles::fit_gbm(
                                &self.train,
                                params.n_stages,
                                params.stage_leaf_budget,
                                params.learning_rate,
                                seed,
                            )
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Fitted::Gbm {
                    members,
                    shared: !bootstrap,
                })
            }
        }
    }

    fn fitted(&self, key: &ModelKey) -> Arc<Fitted> {
        self.cache.lock().unwrap()[key].clone()
    }

    /// Train and test MSE for every point of a regime.
    pub fn evaluate(&self, spec: &RegimeSpec) -> Result<Curve> {
        self.prepare(&[spec])?;
        // Group points by model family so each family's predictions are
        // produced in one pass.
        let mut groups: Vec<(ModelKey, Vec<usize>)> = Vec::new();
        for (i, p) in spec.grid.iter().enumerate() {
            let key = ModelKey::of(&p.params, spec.seed);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        let mut results = vec![(0.0, 0.0); spec.grid.len()];
        for (key, idx) in groups {
            let fitted = self.fitted(&key);
            let wanted: Vec<(usize, usize)> = idx
                .iter()
                .map(|&i| {
                    let p = &spec.grid[i].params;
                    (p.n_members, p.n_stages.unwrap_or(0))
                })
                .collect();
            let train_preds = predictions(&fitted, &self.train, &wanted)?;
            let test_preds = predictions(&fitted, &self.test, &wanted)?;
            for (j, &i) in idx.iter().enumerate() {
                let label = &spec.grid[i].label;
                let tr = mse(&train_preds[j], self.train.targets()).map_err(|e| e.context(label))?;
                let te = mse(&test_preds[j], &self.test_scores).map_err(|e| e.context(label))?;
                results[i] = (tr, te);
            }
        }
        let points: Vec<CurvePoint> = spec
            .grid
            .iter()
            .zip(results)
            .enumerate()
            .map(|(index, (g, (train_mse, test_mse)))| CurvePoint {
                index,
                label: g.label.clone(),
                phase: g.phase,
                params: g.params,
                train_mse,
                test_mse,
                train_interpolated: train_mse <= INTERPOLATION_TOL,
            })
            .collect();
        let threshold_index = first_interpolating(&points.iter().map(|p| p.train_mse).collect::<Vec<_>>());
        Ok(Curve {
            regime: spec.clone(),
            points,
            threshold_index,
        })
    }
}

/// Predictions for each `(members, stages)` request against one fitted
/// family.
fn predictions(fitted: &Fitted, ds: &Dataset, wanted: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
    match fitted {
        Fitted::Forest(forest) => {
            if !forest.bootstrap() {
                // Identical members: every forest size predicts like one tree.
                let single = forest.trees()[0].predict_dataset(ds)?;
                return Ok(vec![single; wanted.len()]);
            }
            let mut counts: Vec<usize> = wanted.iter().map(|w| w.0).collect();
            counts.sort_unstable();
            counts.dedup();
            let pre = forest.prefix_predictions(ds, &counts)?;
            Ok(wanted
                .iter()
                .map(|w| pre[counts.binary_search(&w.0).unwrap()].clone())
                .collect())
        }
        Fitted::Gbm { members, shared } => {
            let mut stage_counts: Vec<usize> = wanted.iter().map(|w| w.1).collect();
            stage_counts.sort_unstable();
            stage_counts.dedup();
            let max_members = wanted.iter().map(|w| w.0).max().unwrap_or(1);
            let used = if *shared { 1 } else { max_members };
            let staged: Vec<Vec<Vec<f64>>> = members[..used]
                .par_iter()
                .map(|m| m.staged_predictions(ds, &stage_counts))
                .collect::<Result<_>>()?;
            Ok(wanted
                .iter()
                .map(|&(k, s)| {
                    let j = stage_counts.binary_search(&s).unwrap();
                    if *shared {
                        staged[0][j].clone()
                    } else {
                        let mut sums = vec![0.0; ds.n_samples()];
                        for m in &staged[..k] {
                            for (acc, v) in sums.iter_mut().zip(&m[j]) {
                                *acc += v;
                            }
                        }
                        sums.into_iter().map(|v| v / k as f64).collect()
                    }
                })
                .collect())
        }
    }
}

/// Fit and score every grid point on one split.
pub fn run_regime(spec: &RegimeSpec, ds: &Dataset, split: &SplitIndices) -> Result<Curve> {
    Workbench::new(ds, split)?.evaluate(spec)
}

/// One replicate's data: the dataset, optional replacement targets for test
/// scoring, and optional binary labels to stratify the split on.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub dataset: Dataset,
    pub score_targets: Option<Vec<f64>>,
    pub stratify: Option<Vec<u8>>,
}

impl From<Dataset> for ReplicateData {
    fn from(dataset: Dataset) -> Self {
        Self {
            dataset,
            score_targets: None,
            stratify: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSettings {
    pub base_seed: u64,
    pub n_seeds: usize,
    pub split_fraction: f64,
}

/// Seeds for replicate `j`: data generation, train/test split.
pub fn replicate_seeds(base_seed: u64, j: usize) -> (u64, u64) {
    let mut s = derive_stream(base_seed, j as u64);
    (s.next_u64(), s.next_u64())
}

/// Model seed of `spec` in replicate `j`.
pub fn replicate_model_seed(spec_seed: u64, j: usize) -> u64 {
    derive_stream(spec_seed, j as u64).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub index: usize,
    pub label: String,
    pub phase: Phase,
    pub params: PointParams,
    pub train_mse_mean: f64,
    pub train_mse_sd: f64,
    pub test_mse_mean: f64,
    pub test_mse_sd: f64,
    pub train_mse_per_seed: Vec<f64>,
    pub test_mse_per_seed: Vec<f64>,
    /// True when every seed interpolates at this point.
    pub interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub regime: RegimeSpec,
    pub n_seeds: usize,
    pub points: Vec<AggregatePoint>,
    pub threshold_index: Option<usize>,
    pub seed_thresholds: Vec<Option<usize>>,
}

impl AggregateCurve {
    pub fn from_curves(regime: &RegimeSpec, curves: &[Curve]) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::usage("cannot aggregate zero curves"));
        }
        let n = curves.len();
        let points: Vec<AggregatePoint> = regime
            .grid
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let train: Vec<f64> = curves.iter().map(|c| c.points[i].train_mse).collect();
                let test: Vec<f64> = curves.iter().map(|c| c.points[i].test_mse).collect();
                let (train_mean, train_sd) = mean_sd(&train);
                let (test_mean, test_sd) = mean_sd(&test);
                AggregatePoint {
                    index: i,
                    label: g.label.clone(),
                    phase: g.phase,
                    params: g.params,
                    train_mse_mean: train_mean,
                    train_mse_sd: train_sd,
                    test_mse_mean: test_mean,
                    test_mse_sd: test_sd,
                    interpolated: train.iter().all(|&m| m <= INTERPOLATION_TOL),
                    train_mse_per_seed: train,
                    test_mse_per_seed: test,
                }
            })
            .collect();
        let threshold_index = points.iter().position(|p| p.interpolated);
        Ok(AggregateCurve {
            regime: regime.clone(),
            n_seeds: n,
            points,
            threshold_index,
            seed_thresholds: curves.iter().map(|c| c.threshold_index).collect(),
        })
    }

    pub fn mean_test_mse(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.test_mse_mean).collect()
    }

    pub fn mean_train_mse(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.train_mse_mean).collect()
    }

    /// Test MSE of seed `j` along the grid.
    pub fn seed_test_mse(&self, j: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.test_mse_per_seed[j]).collect()
    }

    /// Half the average across-seed standard deviation of test MSE.
    pub fn default_noise_tol(&self) -> f64 {
        let sd: f64 = self.points.iter().map(|p| p.test_mse_sd).sum::<f64>() / self.points.len() as f64;
        0.5 * sd
    }
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Run one regime across `settings.n_seeds` replicates.
pub fn replicate<F>(spec: &RegimeSpec, settings: &ReplicateSettings, generator: F) -> Result<AggregateCurve>
where
    F: Fn(u64) -> Result<ReplicateData> + Sync,
{
    Ok(replicate_many(&[spec.clone()], settings, generator)?.remove(0))
}

/// Run several regimes across replicates. Within replicate `j` the data and
/// the train/test split are produced once and shared by every regime.
pub fn replicate_many<F>(
    specs: &[RegimeSpec],
    settings: &ReplicateSettings,
    generator: F,
) -> Result<Vec<AggregateCurve>>
where
    F: Fn(u64) -> Result<ReplicateData> + Sync,
{
    if settings.n_seeds == 0 {
        return Err(Error::config("replicates must be at least 1"));
    }
    for s in specs {
        s.validate()?;
    }
    let per_seed: Vec<Vec<Curve>> = (0..settings.n_seeds)
        .into_par_iter()
        .map(|j| {
            let (data_seed, split_seed) = replicate_seeds(settings.base_seed, j);
            let data = generator(data_seed)?;
            let split = split_dataset(
                &data.dataset,
                settings.split_fraction,
                split_seed,
                data.stratify.as_deref(),
            )?;
            let bench =
                Workbench::with_score_targets(&data.dataset, &split, data.score_targets.as_deref())?;
            let seeded: Vec<RegimeSpec> = specs
                .iter()
                .map(|s| s.with_seed(replicate_model_seed(s.seed, j)))
                .collect();
            bench.prepare(&seeded.iter().collect::<Vec<_>>())?;
            seeded.iter().map(|s| bench.evaluate(s)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let curves: Vec<Curve> = per_seed.iter().map(|c| c[i].clone()).collect();
            AggregateCurve::from_curves(spec, &curves)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cart::fit_tree;
    use crate::ensembles::{fit_gbm, fit_gbm_ensemble};
    use crate::synthgen::{generate_friedman1, Friedman1Spec};

    fn cfg(kind: &str) -> RegimeConfig {
        RegimeConfig {
            kind: kind.into(),
            ..Default::default()
        }
    }

    fn friedman(n: usize, p: usize, seed: u64) -> Dataset {
        generate_friedman1(&Friedman1Spec {
            n_samples: n,
            n_features: p,
            noise_sigma: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn composite_tree_grid() {
        let spec = expand_regime(
            &RegimeConfig {
                l_max: Some(500),
                ..cfg("composite_tree")
            },
            0,
        )
        .unwrap();
        let labels: Vec<&str> = spec.grid.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(
            labels,
            ["L2", "L5", "L10", "L20", "L50", "L100", "L200", "L500", "RF1", "RF2", "RF5", "RF10", "RF20", "RF50"]
        );
        assert_eq!(spec.phase_boundary(), Some(8));
        assert!(spec.grid[8..].iter().all(|g| g.params.leaf_budget == 500 && g.params.bootstrap));
        assert!(spec.grid[..8].iter().all(|g| g.params.n_members == 1 && !g.params.bootstrap));
    }

    #[test]
    fn leaf_sweep_grid_is_the_stops() {
        let spec = expand_regime(
            &RegimeConfig {
                ens: Some(1),
                leaf_stops: Some(vec![2, 7, 40]),
                ..cfg("LeafSweep")
            },
            0,
        )
        .unwrap();
        let leaves: Vec<usize> = spec.grid.iter().map(|g| g.params.leaf_budget).collect();
        assert_eq!(leaves, [2, 7, 40]);
        assert_eq!(spec.fixed_params["ens"], 1.0);
    }

    #[test]
    fn composite_gbm_ensemble_phase_fixes_stages() {
        let spec = expand_regime(&cfg("composite_gbm"), 0).unwrap();
        let b = spec.phase_boundary().unwrap();
        assert!(spec.grid[b..].iter().all(|g| g.params.n_stages == Some(200)));
        let members: Vec<usize> = spec.grid[b..].iter().map(|g| g.params.n_members).collect();
        assert_eq!(members, DEFAULT_ENSEMBLE_PHASE);
        assert_eq!(spec.grid[b - 1].params.n_stages, Some(200));
        assert!(spec.grid.iter().all(|g| g.params.learning_rate == Some(0.85)));
    }

    #[test]
    fn expand_errors() {
        assert!(matches!(expand_regime(&cfg("triple_descent"), 0), Err(Error::Config(_))));
        let empty = RegimeConfig {
            leaf_stops: Some(vec![]),
            ..cfg("leaf_sweep")
        };
        assert!(matches!(expand_regime(&empty, 0), Err(Error::Config(_))));
        let unordered = RegimeConfig {
            leaf_stops: Some(vec![5, 2]),
            ..cfg("leaf_sweep")
        };
        assert!(matches!(expand_regime(&unordered, 0), Err(Error::Config(_))));
        let clash = RegimeConfig {
            ens: Some(3),
            ..cfg("ens_sweep")
        };
        assert!(matches!(expand_regime(&clash, 0), Err(Error::Config(_))));
        let bad_lr = RegimeConfig {
            learning_rate: Some(2.0),
            ..cfg("boost_sweep")
        };
        assert!(matches!(expand_regime(&bad_lr, 0), Err(Error::Config(_))));
    }

    #[test]
    fn threshold_detection() {
        assert_eq!(first_interpolating(&[0.3, 0.2, 0.1]), None);
        assert_eq!(first_interpolating(&[0.1, 0.0, 0.0]), Some(1));
        assert_eq!(first_interpolating(&[0.1, 1e-13, 0.0]), Some(1));
    }

    #[test]
    fn single_leaf_point_scores_test_variance_around_train_mean() {
        let ds = friedman(60, 6, 1);
        let split = split_dataset(&ds, 0.7, 3, None).unwrap();
        let spec = expand_regime(
            &RegimeConfig {
                leaf_stops: Some(vec![1]),
                ..cfg("leaf_sweep")
            },
            0,
        )
        .unwrap();
        let curve = run_regime(&spec, &ds, &split).unwrap();
        let train_mean: f64 =
            split.train.iter().map(|&i| ds.targets()[i]).sum::<f64>() / split.train.len() as f64;
        let expect = split
            .test
            .iter()
            .map(|&i| (ds.targets()[i] - train_mean).powi(2))
            .sum::<f64>()
            / split.test.len() as f64;
        assert!((curve.points[0].test_mse - expect).abs() < 1e-12);
    }

    #[test]
    fn cached_points_equal_direct_fits() {
        let ds = friedman(80, 6, 2);
        let split = split_dataset(&ds, 0.7, 4, None).unwrap();
        let bench = Workbench::new(&ds, &split).unwrap();
        let train = bench.train().clone();
        let test = bench.test().clone();

        let tree_spec = expand_regime(
            &RegimeConfig {
                l_max: Some(30),
                leaf_stops: Some(vec![2, 8]),
                ens_stops: Some(vec![1, 3, 7]),
                seed: Some(17),
                ..cfg("composite_tree")
            },
            0,
        )
        .unwrap();
        let curve = bench.evaluate(&tree_spec).unwrap();
        for p in &curve.points {
            let f = fit_forest(&train, p.params.n_members, p.params.leaf_budget, p.params.bootstrap, 17)
                .unwrap();
            let te = mse(&f.predict_dataset(&test).unwrap(), test.targets()).unwrap();
            let tr = mse(&f.predict_dataset(&train).unwrap(), train.targets()).unwrap();
            assert_eq!((p.train_mse, p.test_mse), (tr, te), "{}", p.label);
        }
        // The L2 point is a plain tree.
        let t = fit_tree(&train, 2).unwrap();
        assert_eq!(
            curve.points[0].test_mse,
            mse(&t.predict_dataset(&test).unwrap(), test.targets()).unwrap()
        );

        let gbm_spec = expand_regime(
            &RegimeConfig {
                boost: Some(12),
                boost_stops: Some(vec![3, 6]),
                ens_stops: Some(vec![1, 2, 4]),
                seed: Some(5),
                ..cfg("composite_gbm")
            },
            0,
        )
        .unwrap();
        let curve = bench.evaluate(&gbm_spec).unwrap();
        for p in &curve.points {
            let stages = p.params.n_stages.unwrap();
            let preds = if p.params.bootstrap {
                let params = GbmParams {
                    n_stages: stages,
                    stage_leaf_budget: 10,
                    learning_rate: 0.85,
                };
                fit_gbm_ensemble(&train, p.params.n_members, &params, 5)
                    .unwrap()
                    .predict_dataset(&test)
                    .unwrap()
            } else {
                fit_gbm(&train, stages, 10, 0.85, 5).unwrap().predict_dataset(&test).unwrap()
            };
            assert_eq!(p.test_mse, mse(&preds, test.targets()).unwrap(), "{}", p.label);
        }
    }

    #[test]
    fn run_regime_is_deterministic() {
        let ds = friedman(70, 6, 3);
        let split = split_dataset(&ds, 0.7, 5, None).unwrap();
        let spec = expand_regime(
            &RegimeConfig {
                leaf: Some(10),
                ens_stops: Some(vec![1, 2, 5]),
                ..cfg("ens_sweep")
            },
            9,
        )
        .unwrap();
        assert_eq!(run_regime(&spec, &ds, &split).unwrap(), run_regime(&spec, &ds, &split).unwrap());
    }

    #[test]
    fn composite_tree_interpolates_at_capacity_end() {
        let ds = friedman(120, 10, 4);
        let split = split_dataset(&ds, 0.7, 6, None).unwrap();
        let spec = expand_regime(
            &RegimeConfig {
                l_max: Some(100),
                ..cfg("composite_tree")
            },
            1,
        )
        .unwrap();
        let curve = run_regime(&spec, &ds, &split).unwrap();
        let end = spec.phase_boundary().unwrap() - 1;
        assert_eq!(curve.threshold_index, Some(end));
        assert_eq!(detect_interpolation_threshold(&curve), Some(end));
        assert!(curve.points[end].train_interpolated);
    }

    #[test]
    fn replicate_single_seed_has_zero_sd() {
        let spec = expand_regime(
            &RegimeConfig {
                leaf_stops: Some(vec![2, 10]),
                ..cfg("leaf_sweep")
            },
            3,
        )
        .unwrap();
        let settings = ReplicateSettings {
            base_seed: 1,
            n_seeds: 1,
            split_fraction: 0.7,
        };
        let agg = replicate(&spec, &settings, |s| Ok(friedman(60, 6, s).into())).unwrap();
        assert!(agg.points.iter().all(|p| p.test_mse_sd == 0.0));
        assert!(agg.points.iter().all(|p| p.test_mse_mean == p.test_mse_per_seed[0]));
    }

    #[test]
    fn replicate_aggregates_exactly() {
        let spec = expand_regime(
            &RegimeConfig {
                leaf: Some(8),
                ens_stops: Some(vec![1, 3]),
                ..cfg("ens_sweep")
            },
            3,
        )
        .unwrap();
        let settings = ReplicateSettings {
            base_seed: 2,
            n_seeds: 4,
            split_fraction: 0.7,
        };
        let agg = replicate(&spec, &settings, |s| Ok(friedman(50, 6, s).into())).unwrap();
        for p in &agg.points {
            let m = p.test_mse_per_seed.iter().sum::<f64>() / 4.0;
            assert!((m - p.test_mse_mean).abs() <= 1e-12);
            assert!(p.test_mse_sd > 0.0);
        }
        // Replicate j reproduces a direct run with the derived seeds.
        let (data_seed, split_seed) = replicate_seeds(2, 1);
        let ds = friedman(50, 6, data_seed);
        let split = split_dataset(&ds, 0.7, split_seed, None).unwrap();
        let curve = run_regime(&spec.with_seed(replicate_model_seed(3, 1)), &ds, &split).unwrap();
        assert_eq!(curve.test_mse(), agg.seed_test_mse(1));
    }

    #[test]
    fn shared_workbench_matches_fresh_runs() {
        let ds = friedman(70, 6, 8);
        let split = split_dataset(&ds, 0.7, 1, None).unwrap();
        let a = expand_regime(&RegimeConfig { ens: Some(5), leaf_stops: Some(vec![4, 16]), ..cfg("leaf_sweep") }, 2).unwrap();
        let b = expand_regime(&RegimeConfig { leaf: Some(16), ens_stops: Some(vec![2, 5, 9]), ..cfg("ens_sweep") }, 2).unwrap();
        let bench = Workbench::new(&ds, &split).unwrap();
        bench.prepare(&[&a, &b]).unwrap();
        assert_eq!(bench.evaluate(&a).unwrap(), run_regime(&a, &ds, &split).unwrap());
        assert_eq!(bench.evaluate(&b).unwrap(), run_regime(&b, &ds, &split).unwrap());
    }
}
