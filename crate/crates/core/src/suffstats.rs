//! Three-tier sufficient-statistics ledger: per-mini-batch, per-stream, and
//! overall weighted moment summaries for each cluster. The overall tier is
//! the knowledge that survives once a dataset leaves memory — global mixture
//! updates never need raw observations again.

use crate::numerics::SymMatrix;
use crate::{Error, Result};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Stable cluster identifier; never reused after merges or drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchId(pub u64);

/// Weighted moment summary of one cluster: total responsibility mass,
/// first moment Σ γ ẑ and second moment Σ γ ẑ ẑᵀ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub weight: f64,
    pub first: Vec<f64>,
    pub second: SymMatrix,
}

impl ClusterStats {
    pub fn zero(dim: usize) -> Self {
        Self { weight: 0.0, first: vec![0.0; dim], second: SymMatrix::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn add_assign(&mut self, other: &ClusterStats) {
        self.weight += other.weight;
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        self.second.add_assign(&other.second);
    }

    pub fn sub_assign(&mut self, other: &ClusterStats) {
        self.weight -= other.weight;
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a -= b;
        }
        self.second.sub_assign(&other.second);
    }

    /// Pooled copy of two summaries.
    pub fn pooled(&self, other: &ClusterStats) -> ClusterStats {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Derived quantities for the mixture's global update.
    pub fn to_totals(&self) -> ClusterTotals {
        let dim = self.dim();
        if self.weight <= 0.0 {
            return ClusterTotals {
                n: 0.0,
                mean: vec![0.0; dim],
                scatter: SymMatrix::zeros(dim),
            };
        }
        let mean: Vec<f64> = self.first.iter().map(|s| s / self.weight).collect();
        let mut scatter = self.second.scaled(1.0 / self.weight);
        scatter.add_scaled_outer(&mean, -1.0);
        ClusterTotals { n: self.weight, mean, scatter }
    }
}

/// Per-cluster totals in the form the mixture update consumes:
/// mass N, weighted mean z̄ and scatter about the mean.
#[derive(Debug, Clone)]
pub struct ClusterTotals {
    pub n: f64,
    pub mean: Vec<f64>,
    pub scatter: SymMatrix,
}

impl ClusterTotals {
    pub fn is_empty(&self) -> bool {
        self.n <= 0.0
    }
}

/// Mini-batch summaries from responsibilities and averaged latent draws:
/// one `ClusterStats` per responsibility column.
pub fn compute_batch_stats(resp: ArrayView2<f64>, zhat: ArrayView2<f64>) -> Vec<ClusterStats> {
    let (n, t) = resp.dim();
    let dim = zhat.ncols();
    debug_assert_eq!(n, zhat.nrows());
    let mut out = vec![ClusterStats::zero(dim); t];
    for row in 0..n {
        let z = zhat.row(row);
        let z_slice = z.as_slice().expect("contiguous latent row");
        for k in 0..t {
            let g = resp[[row, k]];
            if g == 0.0 {
                continue;
            }
            let stats = &mut out[k];
            stats.weight += g;
            for (a, zv) in stats.first.iter_mut().zip(z_slice) {
                *a += g * zv;
            }
            stats.second.add_scaled_outer(z_slice, g);
        }
    }
    out
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StreamSlot {
    total: BTreeMap<ClusterId, ClusterStats>,
    batches: BTreeMap<BatchId, BTreeMap<ClusterId, ClusterStats>>,
    committed: bool,
}

/// The three-tier ledger. Maps are lazy: an absent entry is an all-zero
/// summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsLedger {
    dim: usize,
    overall: BTreeMap<ClusterId, ClusterStats>,
    streams: BTreeMap<StreamId, StreamSlot>,
}

impl StatsLedger {
    pub fn new(dim: usize) -> Self {
        Self { dim, overall: BTreeMap::new(), streams: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Registers a stream slot. Swapping against an unregistered stream is a
    /// contract error.
    pub fn begin_stream(&mut self, j: StreamId) -> Result<()> {
        if self.streams.contains_key(&j) {
            return Err(Error::Contract(format!("stream {j:?} already registered")));
        }
        self.streams.insert(j, StreamSlot::default());
        Ok(())
    }

    pub fn has_stream(&self, j: StreamId) -> bool {
        self.streams.contains_key(&j)
    }

    /// Replaces mini-batch (j,i)'s contribution: the stream total drops the
    /// old summary and absorbs the fresh one.
    pub fn swap_minibatch(
        &mut self,
        j: StreamId,
        i: BatchId,
        fresh: &[(ClusterId, ClusterStats)],
    ) -> Result<()> {
        let dim = self.dim;
        let slot = self
            .streams
            .get_mut(&j)
            .ok_or_else(|| Error::Contract(format!("unknown stream {j:?}")))?;
        if slot.committed {
            return Err(Error::Contract(format!("stream {j:?} already committed")));
        }
        let old = slot.batches.entry(i).or_default();
        for (id, stats) in fresh {
            let total = slot
                .total
                .entry(*id)
                .or_insert_with(|| ClusterStats::zero(dim));
            if let Some(prev) = old.get(id) {
                total.sub_assign(prev);
            }
            total.add_assign(stats);
            if total.weight < 0.0 {
                if total.weight < -1e-9 {
                    return Err(Error::Contract(format!(
                        "negative stream weight {} for cluster {id:?}",
                        total.weight
                    )));
                }
                total.weight = 0.0;
            }
            old.insert(*id, stats.clone());
        }
        Ok(())
    }

    /// Folds the stream totals into the overall tier and archives the slot.
    pub fn commit_stream(&mut self, j: StreamId) -> Result<()> {
        let slot = self
            .streams
            .get_mut(&j)
            .ok_or_else(|| Error::Contract(format!("unknown stream {j:?}")))?;
        if slot.committed {
            return Err(Error::Contract(format!("stream {j:?} committed twice")));
        }
        for (id, stats) in &slot.total {
            self.overall
                .entry(*id)
                .or_insert_with(|| ClusterStats::zero(stats.dim()))
                .add_assign(stats);
        }
        slot.committed = true;
        Ok(())
    }

    /// Archived knowledge plus the current stream, as raw summaries, aligned
    /// with `ids`.
    pub fn assembled_stats(&self, j: StreamId, ids: &[ClusterId]) -> Vec<ClusterStats> {
        ids.iter()
            .map(|id| {
                let mut acc = self
                    .overall
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| ClusterStats::zero(self.dim));
                if let Some(slot) = self.streams.get(&j) {
                    if !slot.committed {
                        if let Some(s) = slot.total.get(id) {
                            acc.add_assign(s);
                        }
                    }
                }
                acc
            })
            .collect()
    }

    /// Totals for the mixture's global update: overall plus current stream,
    /// converted to (N, z̄, scatter). Empty clusters come back prior-neutral.
    pub fn stats_for_global_step(&self, j: StreamId, ids: &[ClusterId]) -> Vec<ClusterTotals> {
        self.assembled_stats(j, ids)
            .iter()
            .map(ClusterStats::to_totals)
            .collect()
    }

    pub fn overall_stats(&self, id: ClusterId) -> ClusterStats {
        self.overall
            .get(&id)
            .cloned()
            .unwrap_or_else(|| ClusterStats::zero(self.dim))
    }

    pub fn overall_ids(&self) -> Vec<ClusterId> {
        self.overall.keys().copied().collect()
    }

    pub fn current_stream_total(&self, j: StreamId, id: ClusterId) -> ClusterStats {
        self.streams
            .get(&j)
            .and_then(|s| s.total.get(&id))
            .cloned()
            .unwrap_or_else(|| ClusterStats::zero(self.dim))
    }

    /// Pools every tier of `consumed` into `survivor` and removes `consumed`.
    /// Merges keep the ledger exact because responsibilities are additive in
    /// the merged column.
    pub fn merge_clusters(&mut self, survivor: ClusterId, consumed: ClusterId) {
        let dim = self.dim;
        if let Some(stats) = self.overall.remove(&consumed) {
            self.overall
                .entry(survivor)
                .or_insert_with(|| ClusterStats::zero(dim))
                .add_assign(&stats);
        }
        for slot in self.streams.values_mut() {
            if let Some(stats) = slot.total.remove(&consumed) {
                slot.total
                    .entry(survivor)
                    .or_insert_with(|| ClusterStats::zero(dim))
                    .add_assign(&stats);
            }
            for batch in slot.batches.values_mut() {
                if let Some(stats) = batch.remove(&consumed) {
                    batch
                        .entry(survivor)
                        .or_insert_with(|| ClusterStats::zero(dim))
                        .add_assign(&stats);
                }
            }
        }
    }

    /// Removes a cluster from every tier (dropped birth proposals).
    pub fn remove_cluster(&mut self, id: ClusterId) {
        self.overall.remove(&id);
        for slot in self.streams.values_mut() {
            slot.total.remove(&id);
            for batch in slot.batches.values_mut() {
                batch.remove(&id);
            }
        }
    }

    /// Sum of all committed stream totals per cluster; used by the additivity
    /// audit against the overall tier.
    pub fn committed_sum(&self) -> BTreeMap<ClusterId, ClusterStats> {
        let mut acc: BTreeMap<ClusterId, ClusterStats> = BTreeMap::new();
        for slot in self.streams.values() {
            if !slot.committed {
                continue;
            }
            for (id, stats) in &slot.total {
                acc.entry(*id)
                    .or_insert_with(|| ClusterStats::zero(stats.dim()))
                    .add_assign(stats);
            }
        }
        acc
    }

    /// Drops archived per-batch maps, keeping totals (used when persisting).
    pub fn compact_archived(&mut self) {
        for slot in self.streams.values_mut() {
            if slot.committed {
                slot.batches.clear();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64, n: usize, t: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut resp = Array2::zeros((n, t));
        for mut row in resp.rows_mut() {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = rng.random_range(0.01..1.0);
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        let zhat = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
        (resp, zhat)
    }

    #[test]
    fn batch_stats_empty_and_singleton() {
        let resp = Array2::<f64>::zeros((0, 2));
        let zhat = Array2::<f64>::zeros((0, 3));
        let stats = compute_batch_stats(resp.view(), zhat.view());
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.weight == 0.0));

        let resp = array![[1.0]];
        let zhat = array![[2.0, -1.0]];
        let stats = compute_batch_stats(resp.view(), zhat.view());
        assert_eq!(stats[0].weight, 1.0);
        assert_eq!(stats[0].first, vec![2.0, -1.0]);
        assert_eq!(stats[0].second.get(0, 0), 4.0);
        assert_eq!(stats[0].second.get(0, 1), -2.0);
        assert_eq!(stats[0].second.get(1, 1), 1.0);
    }

    #[test]
    fn batch_stats_match_naive_loop() {
        let (resp, zhat) = random_case(5, 5, 3, 2);
        let stats = compute_batch_stats(resp.view(), zhat.view());
        for k in 0..3 {
            let mut w = 0.0;
            let mut s1 = vec![0.0; 2];
            let mut s2 = [[0.0; 2]; 2];
            for n in 0..5 {
                let g = resp[[n, k]];
                w += g;
                for d in 0..2 {
                    s1[d] += g * zhat[[n, d]];
                    for e in 0..2 {
                        s2[d][e] += g * zhat[[n, d]] * zhat[[n, e]];
                    }
                }
            }
            assert!((stats[k].weight - w).abs() < 1e-12);
            for d in 0..2 {
                assert!((stats[k].first[d] - s1[d]).abs() < 1e-12);
                for e in 0..2 {
                    assert!((stats[k].second.get(d, e) - s2[d][e]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn swap_is_idempotent_and_additive() {
        let (resp, zhat) = random_case(9, 8, 2, 2);
        let ids = [ClusterId(0), ClusterId(1)];
        let stats: Vec<_> = ids
            .iter()
            .copied()
            .zip(compute_batch_stats(resp.view(), zhat.view()))
            .collect();

        let mut ledger = StatsLedger::new(2);
        let j = StreamId(0);
        ledger.begin_stream(j).unwrap();
        ledger.swap_minibatch(j, BatchId(0), &stats).unwrap();
        let before = ledger.current_stream_total(j, ClusterId(0));
        ledger.swap_minibatch(j, BatchId(0), &stats).unwrap();
        let after = ledger.current_stream_total(j, ClusterId(0));
        assert!((before.weight - after.weight).abs() < 1e-12);
        assert!(before.second.max_abs_diff(&after.second) < 1e-12);

        // Second batch: stream total is the sum of both fresh summaries.
        let (resp2, zhat2) = random_case(10, 4, 2, 2);
        let stats2: Vec<_> = ids
            .iter()
            .copied()
            .zip(compute_batch_stats(resp2.view(), zhat2.view()))
            .collect();
        ledger.swap_minibatch(j, BatchId(1), &stats2).unwrap();
        let total = ledger.current_stream_total(j, ClusterId(1));
        let expect = stats[1].1.pooled(&stats2[1].1);
        assert!((total.weight - expect.weight).abs() < 1e-9);
        assert!(total.second.max_abs_diff(&expect.second) < 1e-9);
    }

    #[test]
    fn swap_unknown_stream_errors() {
        let mut ledger = StatsLedger::new(2);
        let err = ledger.swap_minibatch(StreamId(3), BatchId(0), &[]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn commit_accumulates_and_rejects_double() {
        let mut ledger = StatsLedger::new(1);
        let j0 = StreamId(0);
        ledger.begin_stream(j0).unwrap();
        // All-zero stream commit leaves overall unchanged.
        ledger.commit_stream(j0).unwrap();
        assert_eq!(ledger.overall_stats(ClusterId(0)).weight, 0.0);
        assert!(ledger.commit_stream(j0).is_err());

        let j1 = StreamId(1);
        ledger.begin_stream(j1).unwrap();
        let mut s = ClusterStats::zero(1);
        s.weight = 2.0;
        s.first[0] = 4.0;
        s.second.set(0, 0, 9.0);
        ledger
            .swap_minibatch(j1, BatchId(0), &[(ClusterId(0), s.clone())])
            .unwrap();
        ledger.commit_stream(j1).unwrap();
        assert!((ledger.overall_stats(ClusterId(0)).weight - 2.0).abs() < 1e-12);

        let j2 = StreamId(2);
        ledger.begin_stream(j2).unwrap();
        ledger
            .swap_minibatch(j2, BatchId(0), &[(ClusterId(0), s)])
            .unwrap();
        ledger.commit_stream(j2).unwrap();
        // Two committed streams: overall equals the elementwise sum.
        assert!((ledger.overall_stats(ClusterId(0)).weight - 4.0).abs() < 1e-12);
        assert!((ledger.overall_stats(ClusterId(0)).first[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn totals_symmetric_pair_and_empty_flag() {
        // Two points at ±1 with full responsibility: N=2, mean 0, scatter 1.
        let resp = array![[1.0], [1.0]];
        let zhat = array![[1.0], [-1.0]];
        let stats = compute_batch_stats(resp.view(), zhat.view());
        let totals = stats[0].to_totals();
        assert!((totals.n - 2.0).abs() < 1e-12);
        assert!(totals.mean[0].abs() < 1e-12);
        assert!((totals.scatter.get(0, 0) - 1.0).abs() < 1e-12);

        assert!(ClusterStats::zero(3).to_totals().is_empty());
    }

    #[test]
    fn totals_match_raw_recomputation() {
        let (resp, zhat) = random_case(77, 40, 3, 4);
        let stats = compute_batch_stats(resp.view(), zhat.view());
        for k in 0..3 {
            let totals = stats[k].to_totals();
            let nk: f64 = resp.column(k).sum();
            let mut mean = vec![0.0; 4];
            for n in 0..40 {
                for d in 0..4 {
                    mean[d] += resp[[n, k]] * zhat[[n, d]] / nk;
                }
            }
            let mut scatter = [[0.0f64; 4]; 4];
            for n in 0..40 {
                for d in 0..4 {
                    for e in 0..4 {
                        scatter[d][e] +=
                            resp[[n, k]] * (zhat[[n, d]] - mean[d]) * (zhat[[n, e]] - mean[e]) / nk;
                    }
                }
            }
            assert!((totals.n - nk).abs() < 1e-10);
            for d in 0..4 {
                assert!((totals.mean[d] - mean[d]).abs() < 1e-10);
                for e in 0..4 {
                    assert!((totals.scatter.get(d, e) - scatter[d][e]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn minibatch_partitions_are_order_independent() {
        let (resp, zhat) = random_case(123, 60, 2, 3);
        let ids = [ClusterId(0), ClusterId(1)];
        let whole: Vec<_> = ids
            .iter()
            .copied()
            .zip(compute_batch_stats(resp.view(), zhat.view()))
            .collect();

        // Partition into 3 chunks and swap in a scrambled order.
        let chunk = 20;
        let mut ledger = StatsLedger::new(3);
        let j = StreamId(0);
        ledger.begin_stream(j).unwrap();
        for &i in &[2usize, 0, 1] {
            let r = resp.slice(ndarray::s![i * chunk..(i + 1) * chunk, ..]);
            let z = zhat.slice(ndarray::s![i * chunk..(i + 1) * chunk, ..]);
            let stats: Vec<_> = ids
                .iter()
                .copied()
                .zip(compute_batch_stats(r, z))
                .collect();
            ledger.swap_minibatch(j, BatchId(i as u64), &stats).unwrap();
        }
        for (id, expect) in &whole {
            let got = ledger.current_stream_total(j, *id);
            assert!((got.weight - expect.weight).abs() < 1e-9);
            for d in 0..3 {
                assert!((got.first[d] - expect.first[d]).abs() < 1e-9);
            }
            assert!(got.second.max_abs_diff(&expect.second) < 1e-9);
        }
    }

    #[test]
    fn merge_pools_every_tier() {
        let mut ledger = StatsLedger::new(1);
        let j = StreamId(0);
        ledger.begin_stream(j).unwrap();
        let mut a = ClusterStats::zero(1);
        a.weight = 1.0;
        a.first[0] = 2.0;
        let mut b = ClusterStats::zero(1);
        b.weight = 3.0;
        b.first[0] = -1.0;
        ledger
            .swap_minibatch(j, BatchId(0), &[(ClusterId(0), a), (ClusterId(1), b)])
            .unwrap();
        ledger.merge_clusters(ClusterId(0), ClusterId(1));
        let total = ledger.current_stream_total(j, ClusterId(0));
        assert!((total.weight - 4.0).abs() < 1e-12);
        assert!((total.first[0] - 1.0).abs() < 1e-12);
        assert_eq!(ledger.current_stream_total(j, ClusterId(1)).weight, 0.0);
    }
}
