//! Cluster expansion and redundancy removal: birth moves proposed from
//! cached hard-to-fit latents, and merge moves gated on the variational
//! objective with a provenance constraint — two components that both survived
//! earlier datasets are never merged, so knowledge from data that is gone
//! cannot be collapsed away.

use crate::dpmm::{
    nw_log_evidence, responsibility_entropy, Component, MixtureState, Responsibilities,
};
use crate::suffstats::{compute_batch_stats, ClusterId, ClusterStats, StatsLedger, StreamId};
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-cluster reservoir of latent vectors whose responsibility exceeded the
/// admission threshold.
#[derive(Debug, Clone)]
pub struct BirthCache {
    capacity: usize,
    threshold: f64,
    reservoirs: BTreeMap<ClusterId, Reservoir>,
}

#[derive(Debug, Clone, Default)]
struct Reservoir {
    seen: u64,
    items: Vec<Vec<f64>>,
}

impl BirthCache {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        Self { capacity, threshold, reservoirs: BTreeMap::new() }
    }

    pub fn clear(&mut self) {
        self.reservoirs.clear();
    }

    pub fn len(&self, cluster: ClusterId) -> usize {
        self.reservoirs.get(&cluster).map_or(0, |r| r.items.len())
    }

    pub fn is_empty(&self) -> bool {
        self.reservoirs.values().all(|r| r.items.is_empty())
    }

    pub fn items(&self, cluster: ClusterId) -> &[Vec<f64>] {
        self.reservoirs
            .get(&cluster)
            .map_or(&[], |r| r.items.as_slice())
    }

    /// The cluster with the largest reservoir, excluding `skip`.
    pub fn largest_cluster(&self, skip: &[ClusterId]) -> Option<(ClusterId, usize)> {
        self.reservoirs
            .iter()
            .filter(|(id, r)| !skip.contains(id) && !r.items.is_empty())
            .map(|(id, r)| (*id, r.items.len()))
            .max_by_key(|(id, len)| (*len, std::cmp::Reverse(*id)))
    }

    /// Admits observations with γ above the threshold into each cluster's
    /// reservoir (uniform reservoir sampling once capacity is hit).
    pub fn cache_candidates<R: Rng>(
        &mut self,
        resp: &Responsibilities,
        zhat: ArrayView2<f64>,
        ids: &[ClusterId],
        rng: &mut R,
    ) {
        let gamma = resp.view();
        for row in 0..gamma.nrows() {
            for (k, id) in ids.iter().enumerate() {
                if gamma[[row, k]] <= self.threshold {
                    continue;
                }
                let slot = self.reservoirs.entry(*id).or_default();
                slot.seen += 1;
                let vec: Vec<f64> = zhat.row(row).to_vec();
                if slot.items.len() < self.capacity {
                    slot.items.push(vec);
                } else {
                    let j = rng.random_range(0..slot.seen);
                    if (j as usize) < self.capacity {
                        slot.items[j as usize] = vec;
                    }
                }
            }
        }
    }
}

/// One record of the move log, serialized one-per-line for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "move", rename_all = "snake_case")]
pub enum MoveRecord {
    Birth {
        source: u64,
        proposed: Vec<u64>,
        accepted: Vec<u64>,
        elbo_before: f64,
        elbo_after: f64,
    },
    BirthSkipped {
        source: u64,
        cache_len: usize,
    },
    Merge {
        a: u64,
        b: u64,
        survivor: u64,
        elbo_before: f64,
        elbo_after: f64,
        a_pre_existing: bool,
        b_pre_existing: bool,
    },
}

/// The objective every move is gated on: data terms reassembled from the
/// ledger (archived tiers plus the current stream), parameter-prior terms,
/// and the entropy of the tracked responsibilities. Equals `dpmm_elbo` plus
/// the archived contributions whenever the ledger matches the latents.
pub fn monitored_objective(
    state: &MixtureState,
    ledger: &StatsLedger,
    stream: StreamId,
    resp: &Responsibilities,
) -> Result<f64> {
    let stats = ledger.assembled_stats(stream, &state.ids());
    Ok(state.expected_loglik_from_stats(&stats)?
        + state.prior_kl_terms()?
        + responsibility_entropy(resp))
}

/// Outcome of a birth proposal.
#[derive(Debug)]
pub enum BirthProposal {
    /// Too few cached vectors (or a degenerate cache fit): no move.
    Skipped { source: ClusterId, cache_len: usize },
    /// Model expanded with fresh proposal components; acceptance is decided
    /// after the next sweep (proposals ending with mass below one are
    /// dropped).
    Expanded {
        state: MixtureState,
        source: ClusterId,
        proposed: Vec<ClusterId>,
    },
}

/// k-means++-style seed selection over cached vectors.
fn kmeanspp_seeds<R: Rng>(z: &Array2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = z.nrows();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(rng.random_range(0..n));
    let mut dist2 = vec![f64::INFINITY; n];
    while seeds.len() < k.min(n) {
        let last = *seeds.last().unwrap();
        for i in 0..n {
            let mut d = 0.0;
            for j in 0..z.ncols() {
                let diff = z[[i, j]] - z[[last, j]];
                d += diff * diff;
            }
            dist2[i] = dist2[i].min(d);
        }
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u: f64 = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in dist2.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        seeds.push(pick);
    }
    seeds
}

/// Fits a fresh one-component mixture to the target cluster's cache, splits
/// it into `proposals` components seeded k-means++-style plus one
/// local/global sweep, and returns the expanded state. Proposals join with
/// provenance `pre_existing = false`; their fate is decided by the following
/// sweep.
///
/// Stick parameters of the expanded state are re-seeded from
/// `current_masses` (existing components) and the cache fit (proposals).
/// Without this, fresh components sit at the stick tail with α-only Beta
/// parameters and start several nats behind, starving before the acceptance
/// sweep can judge them. The seeding double-counts the cached mass for one
/// sweep; the next global step re-derives every stick from true totals.
pub fn propose_birth<R: Rng>(
    state: &MixtureState,
    cache: &BirthCache,
    target: ClusterId,
    proposals: usize,
    min_cache: usize,
    current_masses: &[f64],
    rng: &mut R,
) -> Result<BirthProposal> {
    if current_masses.len() != state.ncomponents() {
        return Err(Error::Shape(format!(
            "{} masses for {} components",
            current_masses.len(),
            state.ncomponents()
        )));
    }
    let items = cache.items(target);
    if items.len() < min_cache {
        return Ok(BirthProposal::Skipped { source: target, cache_len: items.len() });
    }
    let m = items.len();
    let d = state.dim();
    let mut z = Array2::zeros((m, d));
    for (i, v) in items.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            z[[i, j]] = *x;
        }
    }

    // Single-component fit over the cache; a degenerate cache (non-PD
    // scatter even after jitter) skips the move rather than erroring out.
    let mut base = MixtureState::init(state.prior.clone(), state.alpha)?;
    let ones = Responsibilities(Array2::from_elem((m, 1), 1.0));
    let stats = compute_batch_stats(ones.view(), z.view());
    let totals: Vec<_> = stats.iter().map(ClusterStats::to_totals).collect();
    if base.global_step(&totals).is_err() {
        return Ok(BirthProposal::Skipped { source: target, cache_len: m });
    }

    // Split: k-means++ seeding, hard assignment, one global step, then one
    // soft local/global sweep.
    let k = proposals.min(m);
    let seeds = kmeanspp_seeds(&z, k, rng);
    let mut components = Vec::with_capacity(k);
    for (i, _) in seeds.iter().enumerate() {
        components.push(Component {
            id: ClusterId(i as u64),
            mean: state.prior.mean.clone(),
            beta: state.prior.beta,
            scale: state.prior.scale.clone(),
            dof: state.prior.dof,
            stick: (1.0, state.alpha),
            pre_existing: false,
        });
    }
    let mut fit = MixtureState::from_parts(state.prior.clone(), state.alpha, components, k as u64)?;
    let mut hard = Array2::zeros((m, k));
    for i in 0..m {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (s, &seed_row) in seeds.iter().enumerate() {
            let mut dist = 0.0;
            for j in 0..d {
                let diff = z[[i, j]] - z[[seed_row, j]];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = s;
            }
        }
        hard[[i, best]] = 1.0;
    }
    let hard_stats = compute_batch_stats(hard.view(), z.view());
    let hard_totals: Vec<_> = hard_stats.iter().map(ClusterStats::to_totals).collect();
    fit.global_step(&hard_totals)?;
    let soft = fit.local_step(z.view())?;
    let soft_stats = compute_batch_stats(soft.view(), z.view());
    let soft_totals: Vec<_> = soft_stats.iter().map(ClusterStats::to_totals).collect();
    fit.global_step(&soft_totals)?;

    // Soft cache masses of the proposals, used to seed their sticks.
    let proposal_masses: Vec<f64> = soft_stats.iter().map(|s| s.weight).collect();

    let mut expanded = state.clone();
    let mut proposed = Vec::with_capacity(k);
    for (comp, mass) in fit.components.into_iter().zip(&proposal_masses) {
        let id = expanded.allocate_id();
        expanded.components.push(Component {
            id,
            mean: comp.mean,
            beta: comp.beta,
            scale: comp.scale,
            dof: comp.dof,
            stick: (1.0 + mass, state.alpha),
            pre_existing: false,
        });
        proposed.push(id);
    }
    // Stick re-seed across the whole expanded state from pseudo-masses.
    let pseudo: Vec<f64> = current_masses
        .iter()
        .copied()
        .chain(proposal_masses.iter().copied())
        .collect();
    let mut tail = 0.0;
    for pos in (0..expanded.components.len()).rev() {
        expanded.components[pos].stick = (1.0 + pseudo[pos], state.alpha + tail);
        tail += pseudo[pos];
    }
    Ok(BirthProposal::Expanded { state: expanded, source: target, proposed })
}

/// A merge candidate with its marginal-likelihood gain.
#[derive(Debug, Clone, Copy)]
pub struct MergeCandidate {
    pub a: ClusterId,
    pub b: ClusterId,
    pub gain: f64,
}

/// Scores every admissible pair (at most one member pre-existing) by the
/// closed-form Normal-Wishart evidence of pooled versus separate summaries;
/// pairs whose pooled evidence wins come back sorted by gain, best first.
pub fn select_merge_candidates(
    state: &MixtureState,
    assembled: &[ClusterStats],
) -> Result<Vec<MergeCandidate>> {
    let t = state.ncomponents();
    if assembled.len() != t {
        return Err(Error::Shape(format!("{} stat blocks for {t} components", assembled.len())));
    }
    let mut evidence = Vec::with_capacity(t);
    for stats in assembled {
        evidence.push(nw_log_evidence(&state.prior, stats)?);
    }
    let mut out = Vec::new();
    for i in 0..t {
        for j in (i + 1)..t {
            let (ci, cj) = (&state.components[i], &state.components[j]);
            if ci.pre_existing && cj.pre_existing {
                continue;
            }
            let pooled = assembled[i].pooled(&assembled[j]);
            let gain = nw_log_evidence(&state.prior, &pooled)? - evidence[i] - evidence[j];
            if gain > 0.0 {
                out.push(MergeCandidate { a: ci.id, b: cj.id, gain });
            }
        }
    }
    out.sort_by(|x, y| y.gain.total_cmp(&x.gain));
    Ok(out)
}

/// Builds the merged state (pooled summaries across every ledger tier, one
/// global step) and keeps it iff the monitored objective does not decrease.
/// The surviving component takes the lower cluster id and inherits
/// `pre_existing` if either input had it.
pub fn attempt_merge(
    state: &mut MixtureState,
    ledger: &mut StatsLedger,
    stream: StreamId,
    resp: &mut Responsibilities,
    a: ClusterId,
    b: ClusterId,
) -> Result<Option<MoveRecord>> {
    let pos_a = state
        .position_of(a)
        .ok_or_else(|| Error::Contract(format!("unknown component {a:?}")))?;
    let pos_b = state
        .position_of(b)
        .ok_or_else(|| Error::Contract(format!("unknown component {b:?}")))?;
    if pos_a == pos_b {
        return Err(Error::Contract("cannot merge a component with itself".into()));
    }
    let (pre_a, pre_b) = (state.components[pos_a].pre_existing, state.components[pos_b].pre_existing);
    if pre_a && pre_b {
        return Err(Error::Contract(format!(
            "merge of two pre-existing components {a:?}, {b:?}"
        )));
    }

    let before = monitored_objective(state, ledger, stream, resp)?;

    let (survivor, consumed) = if a.0 <= b.0 { (a, b) } else { (b, a) };
    let (surv_pos, cons_pos) = if a.0 <= b.0 { (pos_a, pos_b) } else { (pos_b, pos_a) };

    let mut cand_state = state.clone();
    cand_state.components[surv_pos].pre_existing = pre_a || pre_b;
    cand_state.components.remove(cons_pos);
    let mut cand_ledger = ledger.clone();
    cand_ledger.merge_clusters(survivor, consumed);

    let n = resp.nrows();
    let t = resp.ncomponents();
    let mut merged = Array2::zeros((n, t - 1));
    for row in 0..n {
        let mut out_col = 0;
        for col in 0..t {
            if col == cons_pos {
                continue;
            }
            let mut v = resp.0[[row, col]];
            if col == surv_pos {
                v += resp.0[[row, cons_pos]];
            }
            merged[[row, out_col]] = v;
            out_col += 1;
        }
    }
    let cand_resp = Responsibilities(merged);

    let totals = cand_ledger.stats_for_global_step(stream, &cand_state.ids());
    cand_state.global_step(&totals)?;
    let after = monitored_objective(&cand_state, &cand_ledger, stream, &cand_resp)?;

    if after >= before {
        *state = cand_state;
        *ledger = cand_ledger;
        *resp = cand_resp;
        Ok(Some(MoveRecord::Merge {
            a: a.0,
            b: b.0,
            survivor: survivor.0,
            elbo_before: before,
            elbo_after: after,
            a_pre_existing: pre_a,
            b_pre_existing: pre_b,
        }))
    } else {
        Ok(None)
    }
}
