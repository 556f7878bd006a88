//! Bagged forests, squared-loss gradient boosting and averaged GBMs.
//!
//! All members draw their bootstrap resample from `derive_stream(seed, k)`
//! where `k` is the member position, so the first `k` members of a larger
//! ensemble are exactly the members of a `k`-member ensemble with the same
//! seed. Induction itself is deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{fit_tree, Presorted, RegressionTree};
use crate::numeric::mean;
use crate::rng::derive_stream;
use crate::{Dataset, Error, Result};

/// `n` row indices drawn with replacement from stream `(seed, stream_id)`.
pub fn bootstrap_rows(n: usize, seed: u64, stream_id: u64) -> Vec<usize> {
    let mut rng = derive_stream(seed, stream_id);
    (0..n).map(|_| rng.next_below(n)).collect()
}

fn member_rows(n: usize, bootstrap: bool, seed: u64, k: usize) -> Vec<usize> {
    if bootstrap {
        bootstrap_rows(n, seed, k as u64)
    } else {
        (0..n).collect()
    }
}

fn check_width(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::usage(format!("model expects {expected} features, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<RegressionTree>,
    bootstrap: bool,
    seed: u64,
}

impl ForestModel {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn bootstrap(&self) -> bool {
        self.bootstrap
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_features(&self) -> usize {
        self.trees[0].n_features()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_width(self.n_features(), x.len())?;
        Ok(self.predict_prefix_unchecked(x, self.trees.len()))
    }

    /// Mean of the first `k` members; equals a `k`-tree forest's prediction.
    /// Without bootstrap every member is the same tree, and its prediction is
    /// returned as is so that forest size cannot perturb the last bit.
    fn predict_prefix_unchecked(&self, x: &[f64], k: usize) -> f64 {
        if !self.bootstrap {
            return self.trees[0].predict_unchecked(x);
        }
        let mut sum = 0.0;
        for t in &self.trees[..k] {
            sum += t.predict_unchecked(x);
        }
        sum / k as f64
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        check_width(self.n_features(), ds.n_features())?;
        Ok(ds
            .rows()
            .map(|r| self.predict_prefix_unchecked(r, self.trees.len()))
            .collect())
    }

    /// Per-row running sums over members, evaluated after each count in
    /// `counts` (ascending, each in `1..=len`), divided into means.
    pub fn prefix_predictions(&self, ds: &Dataset, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_width(self.n_features(), ds.n_features())?;
        check_prefix(counts, self.trees.len(), "trees")?;
        if !self.bootstrap {
            let single = self.trees[0].predict_dataset(ds)?;
            return Ok(vec![single; counts.len()]);
        }
        let per_member: Vec<Vec<f64>> = self
            .trees
            .iter()
            .take(counts.last().copied().unwrap_or(0))
            .map(|t| ds.rows().map(|r| t.predict_unchecked(r)).collect())
            .collect();
        Ok(running_means(&per_member, counts, ds.n_samples()))
    }
}

fn check_prefix(counts: &[usize], available: usize, what: &str) -> Result<()> {
    if counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::usage(format!("{what} counts must be ascending")));
    }
    if let Some(&bad) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(Error::usage(format!(
            "{what} count {bad} outside 1..={available}"
        )));
    }
    Ok(())
}

/// Running means in member order, summed exactly as a single ensemble
/// prediction would be.
fn running_means(per_member: &[Vec<f64>], counts: &[usize], n_rows: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(counts.len());
    let mut sums = vec![0.0; n_rows];
    let mut used = 0;
    for &c in counts {
        while used < c {
            for (s, v) in sums.iter_mut().zip(&per_member[used]) {
                *s += v;
            }
            used += 1;
        }
        out.push(sums.iter().map(|s| s / c as f64).collect());
    }
    out
}

pub fn predict_forest(model: &ForestModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Fit `n_trees` CART trees, each on a bootstrap resample (or on the full
/// training set when `bootstrap` is false). Every split considers every
/// feature.
pub fn fit_forest(
    train: &Dataset,
    n_trees: usize,
    leaf_budget: usize,
    bootstrap: bool,
    seed: u64,
) -> Result<ForestModel> {
    if n_trees == 0 {
        return Err(Error::usage("a forest needs at least one tree"));
    }
    if leaf_budget == 0 {
        return Err(Error::usage("leaf_budget must be at least 1"));
    }
    let n = train.n_samples();
    if !bootstrap {
        let tree = fit_tree(train, leaf_budget)?;
        return Ok(ForestModel {
            trees: vec![tree; n_trees],
            bootstrap,
            seed,
        });
    }
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|k| {
            let rows = member_rows(n, bootstrap, seed, k);
            let sorted = Presorted::new(train, &rows)?;
            let targets: Vec<f64> = rows.iter().map(|&r| train.targets()[r]).collect();
            Ok(sorted.grow(&targets, leaf_budget))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        trees,
        bootstrap,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmParams {
    pub n_stages: usize,
    pub stage_leaf_budget: usize,
    pub learning_rate: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            n_stages: 200,
            stage_leaf_budget: 10,
            learning_rate: 0.85,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config(format!(
                "learning rate {} must lie in (0, 1]",
                self.learning_rate
            )));
        }
        if self.n_stages > 0 && self.stage_leaf_budget < 2 {
            return Err(Error::config(format!(
                "stage_leaf_budget must be >= 2 when boosting, got {}",
                self.stage_leaf_budget
            )));
        }
        Ok(())
    }
}

/// `prediction(x) = f0 + learning_rate * sum_k stages[k](x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    f0: f64,
    stages: Vec<RegressionTree>,
    learning_rate: f64,
    stage_leaf_budget: usize,
    n_features: usize,
    seed: u64,
}

impl GbmModel {
    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn stages(&self) -> &[RegressionTree] {
        &self.stages
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn stage_leaf_budget(&self) -> usize {
        self.stage_leaf_budget
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_width(self.n_features, x.len())?;
        Ok(self.predict_stages_unchecked(x, self.stages.len()))
    }

    #[inline]
    fn predict_stages_unchecked(&self, x: &[f64], k: usize) -> f64 {
        let mut sum = 0.0;
        for t in &self.stages[..k] {
            sum += t.predict_unchecked(x);
        }
        self.f0 + self.learning_rate * sum
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        check_width(self.n_features, ds.n_features())?;
        Ok(ds
            .rows()
            .map(|r| self.predict_stages_unchecked(r, self.stages.len()))
            .collect())
    }

    /// Predictions after each stage count in `counts` (ascending, each at
    /// most the fitted stage count; zero means `f0` alone). Bit-identical to
    /// the prediction of a model fitted with that many stages.
    pub fn staged_predictions(&self, ds: &Dataset, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_width(self.n_features, ds.n_features())?;
        if counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::usage("stage counts must be ascending"));
        }
        if let Some(&bad) = counts.iter().find(|&&c| c > self.stages.len()) {
            return Err(Error::usage(format!(
                "stage count {bad} exceeds the {} fitted stages",
                self.stages.len()
            )));
        }
        let mut sums = vec![0.0; ds.n_samples()];
        let mut used = 0;
        let mut out = Vec::with_capacity(counts.len());
        for &c in counts {
            while used < c {
                let t = &self.stages[used];
                for (s, r) in sums.iter_mut().zip(ds.rows()) {
                    *s += t.predict_unchecked(r);
                }
                used += 1;
            }
            out.push(sums.iter().map(|s| self.f0 + self.learning_rate * s).collect());
        }
        Ok(out)
    }
}

pub fn predict_gbm(model: &GbmModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Squared-loss gradient boosting. Each stage fits a best-first CART tree to
/// the current residuals; the model after `k` stages is
/// `f0 + learning_rate * (t_1 + ... + t_k)`.
pub fn fit_gbm(
    train: &Dataset,
    n_stages: usize,
    stage_leaf_budget: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<GbmModel> {
    let params = GbmParams {
        n_stages,
        stage_leaf_budget,
        learning_rate,
    };
    let rows: Vec<usize> = (0..train.n_samples()).collect();
    fit_gbm_rows(train, &rows, &params, seed)
}

pub(crate) fn fit_gbm_rows(train: &Dataset, rows: &[usize], params: &GbmParams, seed: u64) -> Result<GbmModel> {
    params.validate()?;
    let sorted = Presorted::new(train, rows)?;
    let y: Vec<f64> = rows.iter().map(|&r| train.targets()[r]).collect();
    let f0 = mean(&y);
    let lr = params.learning_rate;
    let mut stage_sum = vec![0.0; sorted.n_slots()];
    let mut residual = vec![0.0; sorted.n_slots()];
    let mut stages = Vec::with_capacity(params.n_stages);
    for _ in 0..params.n_stages {
        for s in 0..residual.len() {
            residual[s] = y[s] - (f0 + lr * stage_sum[s]);
        }
        let tree = sorted.grow(&residual, params.stage_leaf_budget);
        for (s, &r) in rows.iter().enumerate() {
            stage_sum[s] += tree.predict_unchecked(train.row(r));
        }
        stages.push(tree);
    }
    Ok(GbmModel {
        f0,
        stages,
        learning_rate: lr,
        stage_leaf_budget: params.stage_leaf_budget,
        n_features: train.n_features(),
        seed,
    })
}

/// Average of independently bootstrapped GBMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmEnsemble {
    members: Vec<GbmModel>,
    member_seed_offsets: Vec<u64>,
}

impl GbmEnsemble {
    pub fn members(&self) -> &[GbmModel] {
        &self.members
    }

    pub fn member_seed_offsets(&self) -> &[u64] {
        &self.member_seed_offsets
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_width(self.members[0].n_features(), x.len())?;
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.predict_stages_unchecked(x, m.stages.len());
        }
        Ok(sum / self.members.len() as f64)
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.rows().map(|r| self.predict(r)).collect()
    }

    /// Ensemble predictions for every `(members, stages)` combination:
    /// `out[i][j]` uses the first `member_counts[i]` members truncated to
    /// `stage_counts[j]` stages.
    pub fn prefix_predictions(
        &self,
        ds: &Dataset,
        member_counts: &[usize],
        stage_counts: &[usize],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        check_prefix(member_counts, self.members.len(), "member")?;
        let needed = member_counts.last().copied().unwrap_or(0);
        // staged[m][j] = member m at stage_counts[j]
        let staged: Vec<Vec<Vec<f64>>> = self.members[..needed]
            .par_iter()
            .map(|m| m.staged_predictions(ds, stage_counts))
            .collect::<Result<_>>()?;
        let n = ds.n_samples();
        let mut out = Vec::with_capacity(member_counts.len());
        for &k in member_counts {
            let per_stage = (0..stage_counts.len())
                .map(|j| {
                    let mut sums = vec![0.0; n];
                    for m in &staged[..k] {
                        for (s, v) in sums.iter_mut().zip(&m[j]) {
                            *s += v;
                        }
                    }
                    sums.into_iter().map(|s| s / k as f64).collect()
                })
                .collect();
            out.push(per_stage);
        }
        Ok(out)
    }
}

/// Member `j` is a GBM fit on the bootstrap resample drawn from stream
/// `(seed, j)`.
pub fn fit_gbm_ensemble(
    train: &Dataset,
    n_members: usize,
    params: &GbmParams,
    seed: u64,
) -> Result<GbmEnsemble> {
    if n_members == 0 {
        return Err(Error::usage("a GBM ensemble needs at least one member"));
    }
    params.validate()?;
    let n = train.n_samples();
    let members = (0..n_members)
        .into_par_iter()
        .map(|j| fit_gbm_rows(train, &bootstrap_rows(n, seed, j as u64), params, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(GbmEnsemble {
        members,
        member_seed_offsets: (0..n_members as u64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cart::fit_tree;
    use crate::dataset::mse;
    use crate::synthgen::{generate_friedman1, Friedman1Spec};
    use crate::numeric::KahanSum;

    /// Population variance of `y`.
    fn variance(y: &[f64]) -> f64 {
        let m = mean(y);
        let mut acc = KahanSum::new();
        for v in y {
            acc.add((v - m) * (v - m));
        }
        acc.value() / y.len() as f64
    }

    fn friedman(n: usize, seed: u64) -> Dataset {
        generate_friedman1(&Friedman1Spec {
            n_samples: n,
            n_features: 10,
            noise_sigma: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn one_tree_no_bootstrap_equals_fit_tree() {
        let d = friedman(120, 1);
        let f = fit_forest(&d, 1, 15, false, 9).unwrap();
        let t = fit_tree(&d, 15).unwrap();
        assert_eq!(f.predict_dataset(&d).unwrap(), t.predict_dataset(&d).unwrap());
    }

    #[test]
    fn identical_members_without_bootstrap() {
        let d = friedman(120, 2);
        let f = fit_forest(&d, 50, 20, false, 3).unwrap();
        assert!(f.trees().iter().all(|t| t == &f.trees()[0]));
        let single = fit_forest(&d, 1, 20, false, 3).unwrap();
        let a = single.predict_dataset(&d).unwrap();
        let b = f.predict_dataset(&d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn forest_averages_members() {
        let d = friedman(80, 3);
        let f = fit_forest(&d, 7, 8, true, 11).unwrap();
        let x = d.row(5);
        let direct: f64 = f.trees().iter().map(|t| t.predict(x).unwrap()).sum::<f64>() / 7.0;
        assert!((f.predict(x).unwrap() - direct).abs() <= 1e-12);
        // Running mean member by member.
        let mut running = 0.0;
        for (k, t) in f.trees().iter().enumerate() {
            running += (t.predict(x).unwrap() - running) / (k + 1) as f64;
        }
        assert!((running - f.predict(x).unwrap()).abs() <= 1e-12);
        assert!(matches!(f.predict(&[0.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn forest_prefix_equals_smaller_forest() {
        let d = friedman(90, 4);
        let big = fit_forest(&d, 12, 16, true, 5).unwrap();
        let pre = big.prefix_predictions(&d, &[1, 5, 12]).unwrap();
        for (i, k) in [1usize, 5, 12].into_iter().enumerate() {
            let small = fit_forest(&d, k, 16, true, 5).unwrap();
            assert_eq!(pre[i], small.predict_dataset(&d).unwrap());
        }
    }

    #[test]
    fn forest_is_permutation_invariant() {
        let d = friedman(60, 5);
        let f = fit_forest(&d, 6, 10, true, 2).unwrap();
        let mut rev = f.clone();
        rev.trees.reverse();
        for r in d.rows() {
            assert!((f.predict(r).unwrap() - rev.predict(r).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn gbm_zero_stages_is_mean() {
        let d = friedman(100, 6);
        let g = fit_gbm(&d, 0, 10, 0.85, 0).unwrap();
        let m = d.targets().iter().sum::<f64>() / 100.0;
        assert!((g.f0() - m).abs() <= 1e-12);
        let p = g.predict_dataset(&d).unwrap();
        let train_mse = mse(&p, d.targets()).unwrap();
        assert!((train_mse - variance(d.targets())).abs() <= 1e-12);
    }

    #[test]
    fn gbm_one_full_stage_interpolates() {
        let d = friedman(60, 7);
        let g = fit_gbm(&d, 1, 60, 1.0, 0).unwrap();
        let p = g.predict_dataset(&d).unwrap();
        assert!(mse(&p, d.targets()).unwrap() <= 1e-12);
    }

    #[test]
    fn gbm_rejects_bad_params() {
        let d = friedman(20, 8);
        assert!(matches!(fit_gbm(&d, 5, 10, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(fit_gbm(&d, 5, 10, 1.5, 0), Err(Error::Config(_))));
        assert!(matches!(fit_gbm(&d, 5, 1, 0.5, 0), Err(Error::Config(_))));
        assert!(fit_gbm(&d, 0, 1, 0.5, 0).is_ok());
    }

    #[test]
    fn gbm_train_sse_non_increasing() {
        let d = friedman(150, 9);
        let g = fit_gbm(&d, 60, 10, 0.85, 0).unwrap();
        let counts: Vec<usize> = (0..=60).collect();
        let staged = g.staged_predictions(&d, &counts).unwrap();
        let mut last = f64::INFINITY;
        for p in &staged {
            let m = mse(p, d.targets()).unwrap();
            assert!(m <= last + 1e-12, "{m} > {last}");
            last = m;
        }
    }

    #[test]
    fn gbm_staged_matches_refit() {
        let d = friedman(100, 10);
        let g = fit_gbm(&d, 30, 6, 0.85, 0).unwrap();
        let staged = g.staged_predictions(&d, &[0, 7, 30]).unwrap();
        for (i, k) in [0usize, 7, 30].into_iter().enumerate() {
            let small = fit_gbm(&d, k, 6, 0.85, 0).unwrap();
            assert_eq!(staged[i], small.predict_dataset(&d).unwrap());
        }
    }

    #[test]
    fn gbm_constant_stage() {
        // Constant targets: every stage is a single leaf predicting 0.
        let d = Dataset::new(vec![0.0, 1.0, 2.0], 1, vec![3.0; 3]).unwrap();
        let g = fit_gbm(&d, 4, 5, 0.5, 0).unwrap();
        assert_eq!(g.predict(&[1.0]).unwrap(), 3.0);
    }

    #[test]
    fn gbm_tiny_learning_rate_stays_near_f0() {
        let d = friedman(80, 12);
        let lr = 1e-6;
        let g = fit_gbm(&d, 20, 10, lr, 0).unwrap();
        for r in d.rows() {
            let bound: f64 = g
                .stages()
                .iter()
                .map(|t| t.predict(r).unwrap().abs())
                .sum::<f64>()
                * lr;
            assert!((g.predict(r).unwrap() - g.f0()).abs() <= bound + 1e-15);
            assert!(bound < 1e-4);
        }
    }

    #[test]
    fn gbm_ensemble_is_member_mean_and_deterministic() {
        let d = friedman(70, 13);
        let params = GbmParams {
            n_stages: 15,
            stage_leaf_budget: 6,
            learning_rate: 0.85,
        };
        let e = fit_gbm_ensemble(&d, 4, &params, 77).unwrap();
        assert_eq!(e, fit_gbm_ensemble(&d, 4, &params, 77).unwrap());
        for r in d.rows().take(10) {
            let m: f64 = e.members().iter().map(|g| g.predict(r).unwrap()).sum::<f64>() / 4.0;
            assert!((e.predict(r).unwrap() - m).abs() <= 1e-12);
        }
        // One member is the bootstrap GBM on stream (seed, 0).
        let single = fit_gbm_ensemble(&d, 1, &params, 77).unwrap();
        let rows = bootstrap_rows(70, 77, 0);
        let direct = fit_gbm(&d.select_rows(&rows).unwrap(), 15, 6, 0.85, 77).unwrap();
        assert_eq!(
            single.predict_dataset(&d).unwrap(),
            direct.predict_dataset(&d).unwrap()
        );
        let pre = e.prefix_predictions(&d, &[1, 4], &[0, 15]).unwrap();
        assert_eq!(pre[1][1], e.predict_dataset(&d).unwrap());
        assert_eq!(pre[0][1], single.predict_dataset(&d).unwrap());
    }
}
