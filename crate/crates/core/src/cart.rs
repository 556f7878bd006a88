//! CART regression trees grown best-first under an exact leaf budget.
//!
//! Growth starts from a single root leaf. Every frontier leaf carries its best
//! variance-reduction split; at each step the leaf with the largest reduction
//! is split (earliest-created leaf wins ties) until the budget is reached or
//! no leaf has an SSE-reducing split left. Because the split sequence does not
//! depend on the budget, a tree with budget `k` is always the first `k - 1`
//! splits of any larger-budget tree on the same data.
//!
//! Candidate thresholds are midpoints between consecutive distinct values of
//! a feature, and routing is left-inclusive (`x <= threshold` goes left).
//! Split ties are resolved by lowest feature index, then lowest threshold.

use serde::{Deserialize, Serialize};

use crate::numeric::KahanSum;
use crate::{Dataset, Error, Result};

/// Relative tolerance for comparing SSE reductions. Two reductions closer
/// than `TIE_REL * parent_sse` are treated as equal, and a split must reduce
/// SSE by more than that to be taken.
const TIE_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature_index: usize,
    pub threshold: f64,
    pub sse_reduction: f64,
    pub left_count: usize,
    pub right_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Position of this split in the best-first growth sequence.
        split_order: usize,
        sample_count: usize,
    },
    Leaf {
        prediction: f64,
        sample_count: usize,
    },
}

/// Binary regression tree stored as a pre-order node array (root at 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    leaf_count: usize,
    leaf_budget: usize,
    n_features: usize,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn leaf_budget(&self) -> usize {
        self.leaf_budget
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::usage(format!(
                "tree expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { prediction, .. } => return prediction,
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.check_width(ds.n_features())?;
        Ok(ds.rows().map(|r| self.predict_unchecked(r)).collect())
    }

    pub(crate) fn check_width(&self, width: usize) -> Result<()> {
        if width != self.n_features {
            return Err(Error::usage(format!(
                "tree expects {} features, got {width}",
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(None, format!("tree json: {e}")))
    }
}

/// Route `x` through the tree.
pub fn predict_tree(tree: &RegressionTree, x: &[f64]) -> Result<f64> {
    tree.predict(x)
}

/// Fit a tree with at most `leaf_budget` leaves on the whole dataset.
pub fn fit_tree(train: &Dataset, leaf_budget: usize) -> Result<RegressionTree> {
    if leaf_budget == 0 {
        return Err(Error::usage("leaf_budget must be at least 1"));
    }
    let rows: Vec<usize> = (0..train.n_samples()).collect();
    let sorted = Presorted::new(train, &rows)?;
    Ok(sorted.grow(train.targets(), leaf_budget))
}

/// Best variance-reduction split of `rows`, evaluated exhaustively.
pub fn best_split(rows: &[usize], ds: &Dataset) -> Result<Option<SplitCandidate>> {
    if rows.len() < 2 {
        return Err(Error::usage(format!(
            "best_split needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let sorted = Presorted::new(ds, rows)?;
    let targets: Vec<f64> = rows.iter().map(|&r| ds.targets()[r]).collect();
    Ok(sorted
        .best_split_in(&sorted.order, &targets, 0, rows.len())
        .map(|(c, _)| c))
}

/// Column-major copy of the training rows plus per-feature sort orders.
///
/// A "slot" is a position in the row list handed to [`Presorted::new`]; the
/// same row may occupy several slots (bootstrap resamples). Targets passed
/// to [`Presorted::grow`] are indexed by slot.
#[derive(Debug, Clone)]
pub(crate) struct Presorted {
    n_slots: usize,
    n_features: usize,
    /// `cols[f * n_slots + s]` is feature `f` of slot `s`.
    cols: Vec<f64>,
    /// `order[f * n_slots + k]` is the slot with the k-th smallest value of
    /// feature `f` (ties by slot index).
    order: Vec<u32>,
}

struct Frontier {
    node: usize,
    start: usize,
    end: usize,
    split: Option<(SplitCandidate, f64)>,
}

enum BuildNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        split_order: usize,
        sample_count: usize,
    },
}

impl Presorted {
    pub(crate) fn new(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::usage("cannot fit a tree on zero rows"));
        }
        if rows.len() > u32::MAX as usize {
            return Err(Error::usage("too many rows for a single tree"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= ds.n_samples()) {
            return Err(Error::usage(format!("row {bad} out of range")));
        }
        let n = rows.len();
        let p = ds.n_features();
        let mut cols = vec![0.0; n * p];
        for (s, &r) in rows.iter().enumerate() {
            for (f, &v) in ds.row(r).iter().enumerate() {
                cols[f * n + s] = v;
            }
        }
        let mut order = Vec::with_capacity(n * p);
        for f in 0..p {
            let col = &cols[f * n..(f + 1) * n];
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_unstable_by(|&a, &b| {
                col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b))
            });
            order.extend(idx);
        }
        Ok(Self {
            n_slots: n,
            n_features: p,
            cols,
            order,
        })
    }

    pub(crate) fn n_slots(&self) -> usize {
        self.n_slots
    }

    /// Best split among slots `order[f*n + start .. f*n + end]`, with the
    /// parent SSE it was measured against.
    fn best_split_in(
        &self,
        order: &[u32],
        targets: &[f64],
        start: usize,
        end: usize,
    ) -> Option<(SplitCandidate, f64)> {
        let m = end - start;
        if m < 2 {
            return None;
        }
        let n = self.n_slots;
        let slots = &order[start..end];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut total = KahanSum::new();
        for &s in slots {
            let y = targets[s as usize];
            lo = lo.min(y);
            hi = hi.max(y);
            total.add(y);
        }
        if lo == hi {
            return None;
        }
        let mean = total.value() / m as f64;
        // Work with centred targets so the score does not cancel badly.
        let mut centred_total = KahanSum::new();
        let mut parent_sse = KahanSum::new();
        for &s in slots {
            let c = targets[s as usize] - mean;
            centred_total.add(c);
            parent_sse.add(c * c);
        }
        let c_tot = centred_total.value();
        let parent_sse = parent_sse.value();
        let base = c_tot * c_tot / m as f64;
        let eps = TIE_REL * parent_sse;

        let mut best: Option<SplitCandidate> = None;
        for f in 0..self.n_features {
            let col = &self.cols[f * n..(f + 1) * n];
            let seg = &order[f * n + start..f * n + end];
            let mut c_l = 0.0;
            for k in 0..m - 1 {
                let s = seg[k] as usize;
                c_l += targets[s] - mean;
                let a = col[s];
                let b = col[seg[k + 1] as usize];
                if a >= b {
                    continue;
                }
                let n_l = (k + 1) as f64;
                let n_r = (m - k - 1) as f64;
                let c_r = c_tot - c_l;
                let red = c_l * c_l / n_l + c_r * c_r / n_r - base;
                if best.map_or(true, |b| red > b.sse_reduction + eps) {
                    let mut threshold = a + (b - a) * 0.5;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(SplitCandidate {
                        feature_index: f,
                        threshold,
                        sse_reduction: red.max(0.0),
                        left_count: k + 1,
                        right_count: m - k - 1,
                    });
                }
            }
        }
        best.map(|b| (b, parent_sse))
    }

    /// Best-first growth on per-slot `targets`.
    pub(crate) fn grow(&self, targets: &[f64], leaf_budget: usize) -> RegressionTree {
        debug_assert_eq!(targets.len(), self.n_slots);
        let n = self.n_slots;
        let mut order = self.order.clone();
        let mut scratch: Vec<u32> = Vec::with_capacity(n);
        let mut goes_left = vec![false; n];

        let mut nodes = vec![BuildNode::Leaf { start: 0, end: n }];
        let mut frontier = vec![Frontier {
            node: 0,
            start: 0,
            end: n,
            split: if leaf_budget > 1 {
                self.best_split_in(&order, targets, 0, n)
            } else {
                None
            },
        }];
        let mut leaf_count = 1;
        let mut split_order = 0;

        while leaf_count < leaf_budget {
            // Frontier is kept in creation order, so a strict comparison
            // keeps the earliest leaf on ties.
            let mut pick: Option<usize> = None;
            for (i, leaf) in frontier.iter().enumerate() {
                let Some((cand, scale)) = leaf.split else { continue };
                if cand.sse_reduction <= TIE_REL * scale {
                    continue;
                }
                let better = match pick {
                    None => true,
                    Some(j) => {
                        let (best, best_scale) = frontier[j].split.unwrap();
                        cand.sse_reduction > best.sse_reduction + TIE_REL * scale.max(best_scale)
                    }
                };
                if better {
                    pick = Some(i);
                }
            }
            let Some(i) = pick else { break };
            let leaf = frontier.remove(i);
            let (cand, _) = leaf.split.unwrap();
            let (start, end) = (leaf.start, leaf.end);

            let fcol = &self.cols[cand.feature_index * n..(cand.feature_index + 1) * n];
            for &s in &order[cand.feature_index * n + start..cand.feature_index * n + end] {
                goes_left[s as usize] = fcol[s as usize] <= cand.threshold;
            }
            let mid = start + cand.left_count;
            for f in 0..self.n_features {
                let seg = &mut order[f * n + start..f * n + end];
                scratch.clear();
                let mut w = 0;
                for k in 0..seg.len() {
                    let s = seg[k];
                    if goes_left[s as usize] {
                        seg[w] = s;
                        w += 1;
                    } else {
                        scratch.push(s);
                    }
                }
                debug_assert_eq!(start + w, mid);
                seg[w..].copy_from_slice(&scratch);
            }

            let left_id = nodes.len();
            let right_id = left_id + 1;
            nodes.push(BuildNode::Leaf { start, end: mid });
            nodes.push(BuildNode::Leaf { start: mid, end });
            nodes[leaf.node] = BuildNode::Internal {
                feature: cand.feature_index,
                threshold: cand.threshold,
                left: left_id,
                right: right_id,
                split_order,
                sample_count: end - start,
            };
            split_order += 1;
            leaf_count += 1;

            let want = leaf_count < leaf_budget;
            for (id, s, e) in [(left_id, start, mid), (right_id, mid, end)] {
                frontier.push(Frontier {
                    node: id,
                    start: s,
                    end: e,
                    split: if want {
                        self.best_split_in(&order, targets, s, e)
                    } else {
                        None
                    },
                });
            }
            if !want {
                break;
            }
        }

        // Any feature segment lists the slots of each leaf; use feature 0.
        let leaf_mean = |start: usize, end: usize| {
            let mut acc = KahanSum::new();
            for &s in &order[start..end] {
                acc.add(targets[s as usize]);
            }
            acc.value() / (end - start) as f64
        };
        let nodes = into_preorder(&nodes, leaf_mean);
        RegressionTree {
            nodes,
            leaf_count,
            leaf_budget,
            n_features: self.n_features,
        }
    }
}

fn into_preorder(nodes: &[BuildNode], leaf_mean: impl Fn(usize, usize) -> f64) -> Vec<Node> {
    let mut sequence = Vec::with_capacity(nodes.len());
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        sequence.push(id);
        if let BuildNode::Internal { left, right, .. } = nodes[id] {
            stack.push(right);
            stack.push(left);
        }
    }
    let mut new_id = vec![0usize; nodes.len()];
    for (pos, &id) in sequence.iter().enumerate() {
        new_id[id] = pos;
    }
    sequence
        .iter()
        .map(|&id| match nodes[id] {
            BuildNode::Leaf { start, end } => Node::Leaf {
                prediction: leaf_mean(start, end),
                sample_count: end - start,
            },
            BuildNode::Internal {
                feature,
                threshold,
                left,
                right,
                split_order,
                sample_count,
            } => Node::Internal {
                feature,
                threshold,
                left: new_id[left],
                right: new_id[right],
                split_order,
                sample_count,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::mse;
    use proptest::prelude::*;

    fn ds(x: &[&[f64]], y: &[f64]) -> Dataset {
        let rows: Vec<Vec<f64>> = x.iter().map(|r| r.to_vec()).collect();
        Dataset::from_rows(&rows, y.to_vec()).unwrap()
    }

    #[test]
    fn two_point_split() {
        let d = ds(&[&[0.0], &[1.0]], &[0.0, 1.0]);
        let c = best_split(&[0, 1], &d).unwrap().unwrap();
        assert_eq!(c.feature_index, 0);
        assert_eq!(c.threshold, 0.5);
        assert!((c.sse_reduction - 0.5).abs() < 1e-15);
        assert_eq!((c.left_count, c.right_count), (1, 1));
    }

    #[test]
    fn four_point_split_is_pure() {
        let d = ds(&[&[1.0], &[2.0], &[3.0], &[4.0]], &[0.0, 0.0, 1.0, 1.0]);
        let c = best_split(&[0, 1, 2, 3], &d).unwrap().unwrap();
        assert_eq!(c.threshold, 2.5);
        assert!((c.sse_reduction - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_targets_or_features_have_no_split() {
        let d = ds(&[&[1.0], &[2.0], &[3.0]], &[4.0, 4.0, 4.0]);
        assert!(best_split(&[0, 1, 2], &d).unwrap().is_none());
        let d = ds(&[&[1.0, 5.0], &[1.0, 5.0]], &[0.0, 1.0]);
        assert!(best_split(&[0, 1], &d).unwrap().is_none());
    }

    #[test]
    fn best_split_needs_two_rows() {
        let d = ds(&[&[1.0]], &[1.0]);
        assert!(matches!(best_split(&[0], &d), Err(Error::Usage(_))));
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // Features 0 and 1 are identical; y is symmetric so thresholds 1.5
        // and 2.5 on either feature score the same.
        let d = ds(
            &[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0], &[4.0, 4.0]],
            &[0.0, 1.0, 1.0, 0.0],
        );
        let c = best_split(&[0, 1, 2, 3], &d).unwrap().unwrap();
        assert_eq!(c.feature_index, 0);
        assert_eq!(c.threshold, 1.5);
    }

    #[test]
    fn single_leaf_predicts_mean() {
        let d = ds(&[&[1.0], &[2.0], &[9.0]], &[1.0, 2.0, 6.0]);
        let t = fit_tree(&d, 1).unwrap();
        assert_eq!(t.leaf_count(), 1);
        assert_eq!(t.predict(&[100.0]).unwrap(), 3.0);
    }

    #[test]
    fn routing_is_left_inclusive() {
        let d = ds(&[&[1.0], &[2.0], &[3.0], &[4.0]], &[0.0, 0.0, 1.0, 1.0]);
        let t = fit_tree(&d, 2).unwrap();
        assert_eq!(t.predict(&[2.5]).unwrap(), 0.0);
        assert_eq!(t.predict(&[2.9]).unwrap(), 1.0);
        assert_eq!(t.predict(&[2.5000001]).unwrap(), 1.0);
        assert!(matches!(t.predict(&[1.0, 2.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_budget_rejected() {
        let d = ds(&[&[1.0]], &[1.0]);
        assert!(matches!(fit_tree(&d, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn full_budget_interpolates() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![((i * 17) % 40) as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 7919) % 13) as f64 * 0.3).collect();
        let d = Dataset::from_rows(&x, y.clone()).unwrap();
        let t = fit_tree(&d, 100).unwrap();
        let p = t.predict_dataset(&d).unwrap();
        assert!(mse(&p, &y).unwrap() <= 1e-12);
        assert!(t.leaf_count() <= 40);
    }

    #[test]
    fn json_round_trip() {
        let d = ds(&[&[1.0], &[2.0], &[3.0], &[4.0]], &[0.0, 0.5, 1.0, 3.0]);
        let t = fit_tree(&d, 3).unwrap();
        let back = RegressionTree::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert!(matches!(t.nodes()[0], Node::Internal { split_order: 0, .. }));
    }

    fn random_data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut r = crate::derive_stream(seed, 0);
        let x: Vec<f64> = (0..n * p).map(|_| r.next_f64()).collect();
        let y: Vec<f64> = (0..n).map(|_| r.next_normal()).collect();
        Dataset::new(x, p, y).unwrap()
    }

    fn leaf_stats(t: &RegressionTree) -> (usize, f64) {
        let mut count = 0;
        let mut mass = 0.0;
        for node in t.nodes() {
            if let Node::Leaf {
                prediction,
                sample_count,
            } = node
            {
                count += sample_count;
                mass += *sample_count as f64 * prediction;
            }
        }
        (count, mass)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn train_mse_non_increasing_in_budget(seed in any::<u64>(), n in 5usize..60) {
            let d = random_data(seed, n, 3);
            let mut last = f64::INFINITY;
            for budget in 1..=n + 2 {
                let t = fit_tree(&d, budget).unwrap();
                prop_assert!(t.leaf_count() <= budget);
                let m = mse(&t.predict_dataset(&d).unwrap(), d.targets()).unwrap();
                prop_assert!(m <= last + 1e-12);
                last = m;
            }
            prop_assert!(last <= 1e-12);
        }

        #[test]
        fn mass_is_conserved(seed in any::<u64>(), n in 2usize..80, budget in 1usize..30) {
            let d = random_data(seed, n, 2);
            let t = fit_tree(&d, budget).unwrap();
            let (count, mass) = leaf_stats(&t);
            prop_assert_eq!(count, n);
            let total: f64 = d.targets().iter().sum();
            prop_assert!((mass - total).abs() < 1e-9 * (1.0 + total.abs()));
        }

        #[test]
        fn induction_is_deterministic(seed in any::<u64>(), budget in 1usize..20) {
            let d = random_data(seed, 30, 4);
            prop_assert_eq!(fit_tree(&d, budget).unwrap(), fit_tree(&d, budget).unwrap());
        }

        #[test]
        fn smaller_budget_is_a_prefix(seed in any::<u64>(), k in 1usize..15) {
            let d = random_data(seed, 40, 3);
            let small = fit_tree(&d, k).unwrap();
            let big = fit_tree(&d, k + 10).unwrap();
            let splits = |t: &RegressionTree| {
                let mut v: Vec<(usize, usize, u64)> = t.nodes().iter().filter_map(|n| match n {
                    Node::Internal { feature, threshold, split_order, .. } =>
                        Some((*split_order, *feature, threshold.to_bits())),
                    _ => None,
                }).collect();
                v.sort_unstable();
                v
            };
            let s = splits(&small);
            prop_assert_eq!(&splits(&big)[..s.len()], &s[..]);
        }
    }
}
