//! Shared data containers, the MSE metric and the train/test split protocol.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::{fmt_f64, KahanSum};
use crate::rng::derive_stream;
use crate::{Error, Result};

/// Stream id reserved for train/test shuffling.
const SPLIT_STREAM: u64 = 0x5354_5249_4154_4946;

/// Dense row-major feature matrix with an aligned target vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_samples: usize,
    n_features: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    /// Build from a row-major buffer of `targets.len() * n_features` values.
    pub fn new(features: Vec<f64>, n_features: usize, targets: Vec<f64>) -> Result<Self> {
        let n_samples = targets.len();
        if n_samples == 0 || n_features == 0 {
            return Err(Error::usage(format!(
                "dataset must have at least one sample and one feature (got {n_samples}x{n_features})"
            )));
        }
        if features.len() != n_samples * n_features {
            return Err(Error::usage(format!(
                "feature buffer holds {} values, expected {n_samples}x{n_features}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite feature at row {}, column {}",
                i / n_features,
                i % n_features
            )));
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite target at row {i}")));
        }
        Ok(Self {
            n_samples,
            n_features,
            features,
            targets,
            feature_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.len() != targets.len() {
            return Err(Error::usage(format!(
                "{} feature rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != n_features) {
            return Err(Error::usage(format!("row {r} has a different width than row 0")));
        }
        Self::new(rows.concat(), n_features, targets)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(Error::usage(format!(
                "{} feature names for {} features",
                names.len(),
                self.n_features
            )));
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.features[row * self.n_features + feature]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features)
    }

    /// New dataset made of the given rows (repeats allowed), in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::usage("cannot select an empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_samples) {
            return Err(Error::usage(format!(
                "row index {bad} out of range for {} samples",
                self.n_samples
            )));
        }
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Ok(Dataset {
            n_samples: rows.len(),
            n_features: self.n_features,
            features,
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Same features, different targets.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Dataset> {
        if targets.len() != self.n_samples {
            return Err(Error::usage(format!(
                "{} targets for {} samples",
                targets.len(),
                self.n_samples
            )));
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite target at row {i}")));
        }
        Ok(Dataset {
            targets,
            ..self.clone()
        })
    }

    fn column_names(&self) -> Vec<String> {
        match &self.feature_names {
            Some(names) => names.clone(),
            None => (0..self.n_features).map(|j| format!("x{}", j + 1)).collect(),
        }
    }

    /// CSV with a header row and the target in a final `target` column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map_err = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
        let mut header = self.column_names();
        header.push("target".to_string());
        w.write_record(&header).map_err(map_err)?;
        let mut record = Vec::with_capacity(self.n_features + 1);
        for (i, row) in self.rows().enumerate() {
            record.clear();
            record.extend(row.iter().map(|&v| fmt_f64(v)));
            record.push(fmt_f64(self.targets[i]));
            w.write_record(&record).map_err(map_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::format(Some(1), e.to_string()))?
            .clone();
        if header.len() < 2 || &header[header.len() - 1] != "target" {
            return Err(Error::format(
                Some(1),
                "dataset CSV needs feature columns followed by a final `target` column",
            ));
        }
        let n_features = header.len() - 1;
        let names: Vec<String> = header.iter().take(n_features).map(str::to_string).collect();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
            if rec.len() != header.len() {
                return Err(Error::format(
                    Some(line),
                    format!("expected {} fields, found {}", header.len(), rec.len()),
                ));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format(Some(line), format!("column {} is not a number: {field:?}", j + 1))
                })?;
                if j < n_features {
                    features.push(v);
                } else {
                    targets.push(v);
                }
            }
        }
        Dataset::new(features, n_features, targets)?.with_feature_names(names)
    }

    pub fn read_csv_path(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_csv(std::io::BufReader::new(file)).map_err(|e| e.context(path.display()))
    }
}

/// Disjoint, sorted train/test row indices covering every row exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn n_samples(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Checks that the split partitions `0..n` exactly.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_samples() != n {
            return Err(Error::usage(format!(
                "split covers {} rows, dataset has {n}",
                self.n_samples()
            )));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::usage("split must have non-empty train and test partitions"));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::usage(format!("split row {i} is out of range or repeated")));
            }
        }
        Ok(())
    }
}

/// Mean squared error.
pub fn mse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::usage(format!(
            "mse: {} predictions vs {} targets",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::usage("mse of empty vectors"));
    }
    if predictions.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::usage("mse inputs must be finite"));
    }
    let mut acc = KahanSum::new();
    for (p, t) in predictions.iter().zip(truth) {
        let d = p - t;
        acc.add(d * d);
    }
    Ok(acc.value() / predictions.len() as f64)
}

/// Deterministic train/test split.
///
/// Without stratification `|train| = round(fraction * n)`. With a binary
/// label vector each class is rounded on its own, then the per-class counts
/// are reconciled with the global target by moving at most one sample per
/// class (largest rounding remainder first).
pub fn split_dataset(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
    stratify_on: Option<&[u8]>,
) -> Result<SplitIndices> {
    let n = ds.n_samples();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::usage("need at least two samples to split"));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config(format!(
            "split fraction {fraction} leaves an empty partition for {n} samples"
        )));
    }
    let mut rng = derive_stream(seed, SPLIT_STREAM);

    let (mut train, mut test) = match stratify_on {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let test = idx.split_off(n_train);
            (idx, test)
        }
        Some(labels) => stratified(labels, n, n_train, fraction, &mut rng)?,
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

fn stratified(
    labels: &[u8],
    n: usize,
    n_train: usize,
    fraction: f64,
    rng: &mut crate::RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != n {
        return Err(Error::usage(format!(
            "{} stratification labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::usage(format!("stratification labels must be 0/1, found {bad}")));
    }
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[l as usize].push(i);
    }
    let present: Vec<usize> = (0..2).filter(|&c| !classes[c].is_empty()).collect();

    let mut counts = [0usize; 2];
    let mut remainders = [0f64; 2];
    for &c in &present {
        let exact = fraction * classes[c].len() as f64;
        counts[c] = exact.round() as usize;
        remainders[c] = exact - counts[c] as f64;
    }
    // Reconcile with the global count, at most one sample per class.
    let mut total: usize = counts.iter().sum();
    let mut order = present.clone();
    if total < n_train {
        order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
        for &c in &order {
            if total == n_train {
                break;
            }
            counts[c] += 1;
            total += 1;
        }
    } else if total > n_train {
        order.sort_by(|&a, &b| remainders[a].total_cmp(&remainders[b]).then(a.cmp(&b)));
        for &c in &order {
            if total == n_train {
                break;
            }
            counts[c] -= 1;
            total -= 1;
        }
    }
    for &c in &present {
        if counts[c] == 0 || counts[c] >= classes[c].len() {
            return Err(Error::config(format!(
                "class {c} has {} members, too few to stratify at fraction {fraction}",
                classes[c].len()
            )));
        }
    }

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    for &c in &present {
        let mut members = classes[c].clone();
        rng.shuffle(&mut members);
        let rest = members.split_off(counts[c]);
        train.extend(members);
        test.extend(rest);
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| i as f64).collect(), 1, vec![0.0; n]).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.5; 4], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.25);
    }

    #[test]
    fn mse_errors() {
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Usage(_))));
        assert!(matches!(mse(&[], &[]), Err(Error::Usage(_))));
        assert!(matches!(mse(&[f64::NAN], &[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn dataset_invariants_enforced() {
        assert!(Dataset::new(vec![1.0, 2.0], 2, vec![1.0, 2.0]).is_err());
        assert!(Dataset::new(vec![f64::INFINITY], 1, vec![1.0]).is_err());
        assert!(Dataset::new(vec![], 1, vec![]).is_err());
        assert!(Dataset::new(vec![1.0], 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(&toy(10), 0.7, 1, None).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        s.validate(10).unwrap();
    }

    #[test]
    fn stratified_250_250() {
        let labels: Vec<u8> = (0..500).map(|i| (i % 2) as u8).collect();
        let s = split_dataset(&toy(500), 0.7, 11, Some(&labels)).unwrap();
        assert_eq!(s.train.len(), 350);
        let ones = s.train.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(ones, 175);
        assert_eq!(s.train.len() - ones, 175);
    }

    #[test]
    fn stratified_reconciles_rounding() {
        // 5 + 5 at 0.75: each class rounds 3.75 -> 4, total 8 = round(7.5).
        // 3 + 4 at 0.5: 1.5 -> 2 and 2 -> 2 gives 4 = round(3.5).
        // 3 + 3 at 0.5: 1.5 -> 2 twice gives 4, reconciled down to 3.
        let labels = [0u8, 0, 0, 1, 1, 1];
        let s = split_dataset(&toy(6), 0.5, 3, Some(&labels)).unwrap();
        assert_eq!(s.train.len(), 3);
        for c in 0..2u8 {
            let k = s.train.iter().filter(|&&i| labels[i] == c).count();
            assert!((k as f64 - 1.5).abs() <= 1.0);
        }
    }

    #[test]
    fn stratify_rejects_tiny_class() {
        let labels = [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let err = split_dataset(&toy(10), 0.7, 3, Some(&labels)).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("class 1")), "{err}");
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(matches!(split_dataset(&toy(10), 1.0, 0, None), Err(Error::Config(_))));
        assert!(matches!(split_dataset(&toy(10), 0.0, 0, None), Err(Error::Config(_))));
        assert!(matches!(split_dataset(&toy(1), 0.5, 0, None), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::new(vec![0.1, 1.0 / 3.0, -7.25, 1e-9], 2, vec![std::f64::consts::E, 2.0])
            .unwrap();
        let text = ds.to_csv_string();
        assert!(text.starts_with("x1,x2,target\n"));
        let back = Dataset::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.targets(), ds.targets());
    }

    #[test]
    fn csv_rejects_missing_target_column() {
        let err = Dataset::read_csv("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn mse_self_is_zero(a in prop::collection::vec(-1e6f64..1e6, 1..50)) {
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn mse_permutation_invariant(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40),
            seed in any::<u64>(),
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            derive_stream(seed, 0).shuffle(&mut idx);
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let a = mse(&p, &t).unwrap();
            let b = mse(&pp, &tp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn split_partitions_exactly(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let ds = toy(n);
            match split_dataset(&ds, frac, seed, None) {
                Ok(s) => {
                    s.validate(n).unwrap();
                    prop_assert_eq!(s.train.len(), (frac * n as f64).round() as usize);
                    prop_assert_eq!(split_dataset(&ds, frac, seed, None).unwrap(), s);
                }
                Err(Error::Config(_)) => {
                    let k = (frac * n as f64).round() as usize;
                    prop_assert!(k == 0 || k == n);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn stratified_split_per_class_fraction(
            labels in prop::collection::vec(0u8..2, 10..200),
            seed in any::<u64>(),
        ) {
            let n = labels.len();
            let ds = toy(n);
            if let Ok(s) = split_dataset(&ds, 0.7, seed, Some(&labels)) {
                s.validate(n).unwrap();
                prop_assert_eq!(s.train.len(), (0.7 * n as f64).round() as usize);
                for c in 0..2u8 {
                    let size = labels.iter().filter(|&&l| l == c).count();
                    let k = s.train.iter().filter(|&&i| labels[i] == c).count();
                    prop_assert!((k as f64 - 0.7 * size as f64).abs() <= 1.0);
                }
            }
        }
    }
}
