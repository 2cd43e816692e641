//! Training orchestration: alternating network optimization and mixture
//! inference over datasets, epochs and mini-batches, in batch and lifelong
//! modes.
//!
//! Per epoch: (i) H Adam iterations on the variational network loss with the
//! mixture fixed; (ii) re-encode the stream; (iii) per mini-batch, repeat
//! {local step → stats swap → global step → birth → merge} until the
//! monitored objective converges. Streams commit their statistics when they
//! finish; surviving components become pre-existing at dataset boundaries.
//!
//! The monitored objective is assembled from the ledger (archived tiers plus
//! the current stream) rather than raw latents, so the coordinate-ascent
//! monotonicity guarantee extends across mini-batches and datasets whose raw
//! observations are gone.

use crate::cerr::{
    attempt_merge, monitored_objective, propose_birth, select_merge_candidates, BirthCache,
    BirthProposal, MoveRecord,
};
use crate::dpmm::{MixtureState, NwPrior, Responsibilities};
use crate::mlp::NetParams;
use crate::replay::{generate_replay, mix_into_stream, ReplayBuffer};
use crate::suffstats::{compute_batch_stats, BatchId, ClusterId, StatsLedger, StreamId};
use crate::dataio::TaskData;
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Cluster expansion / redundancy removal switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CerrConfig {
    pub enabled: bool,
    pub birth_threshold: f64,
    pub reservoir_capacity: usize,
    pub min_cache: usize,
    pub proposals: usize,
}

impl Default for CerrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            birth_threshold: 0.1,
            reservoir_capacity: 256,
            min_cache: 20,
            proposals: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// H network iterations per epoch.
    pub net_iters: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub stream_size: usize,
    pub minibatches_per_stream: usize,
    /// Monte Carlo draws during training.
    pub mc_samples: usize,
    /// Monte Carlo draws during evaluation.
    pub eval_mc_samples: usize,
    pub replay_count: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub cerr: CerrConfig,
    /// Inner loop stops when the relative objective gain drops below this.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Evaluation callback cadence in network iterations (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: vec![500, 500, 2000],
            epochs: 15,
            net_iters: 50,
            learning_rate: 2e-4,
            lr_decay: 0.9,
            batch_size: 1500,
            stream_size: 1000,
            minibatches_per_stream: 2,
            mc_samples: 1,
            eval_mc_samples: 10,
            replay_count: 100,
            warmup_epochs: 5,
            seed: 0,
            alpha: 1.0,
            cerr: CerrConfig::default(),
            inner_tol: 1e-4,
            inner_max_iters: 50,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(v: usize, name: &str) -> Result<()> {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
            Ok(())
        }
        positive(self.latent_dim, "latent_dim")?;
        positive(self.net_iters, "net_iters")?;
        positive(self.batch_size, "batch_size")?;
        positive(self.stream_size, "stream_size")?;
        positive(self.minibatches_per_stream, "minibatches_per_stream")?;
        positive(self.mc_samples, "mc_samples")?;
        positive(self.eval_mc_samples, "eval_mc_samples")?;
        positive(self.inner_max_iters, "inner_max_iters")?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Contract(format!("lr_decay must be in (0,1], got {}", self.lr_decay)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Contract("learning_rate must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Contract("alpha must be positive".into()));
        }
        if self.inner_tol <= 0.0 {
            return Err(Error::Contract("inner_tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cerr.birth_threshold) {
            return Err(Error::Contract("birth_threshold must be in [0,1)".into()));
        }
        if self.cerr.proposals == 0 || self.cerr.min_cache == 0 || self.cerr.reservoir_capacity == 0
        {
            return Err(Error::Contract("cerr counts must be positive".into()));
        }
        Ok(())
    }
}

/// One line-delimited metric record: step, task, metric name, value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub task: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamSummary {
    pub task: usize,
    pub stream: usize,
    pub final_elbo: f64,
    pub cluster_count: usize,
    pub net_iters: u64,
}

/// Training outcome report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// One monitored-objective value per (stream, epoch).
    pub elbo_trajectory: Vec<f64>,
    pub stream_summaries: Vec<StreamSummary>,
    pub final_cluster_count: usize,
    pub move_records: Vec<MoveRecord>,
    pub metric_records: Vec<MetricRecord>,
    pub wall_clock_secs: f64,
}

/// Snapshot handed to the evaluation callback.
pub struct EvalSnapshot<'a> {
    pub net: &'a NetParams,
    pub mixture: &'a MixtureState,
    pub net_iters: u64,
    pub task_idx: usize,
}

/// Snapshot handed to the stream-boundary (checkpoint) callback.
pub struct StreamEndSnapshot<'a> {
    pub net: &'a NetParams,
    pub mixture: &'a MixtureState,
    pub ledger: &'a StatsLedger,
    pub rngs: RngSuiteState,
    pub progress: Progress,
    pub replay: Option<&'a ReplayBuffer>,
    pub finished_task: usize,
    pub finished_stream: usize,
}

/// Position to resume from: the next (task, stream) pair plus counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub task_idx: usize,
    pub stream_idx: usize,
    pub net_iters: u64,
    pub stream_seq: u64,
}

type EvalHook<'a> = dyn FnMut(&EvalSnapshot) -> Vec<MetricRecord> + 'a;
type StreamHook<'a> = dyn FnMut(&StreamEndSnapshot) + 'a;

/// Optional observer callbacks. Evaluation fires every `eval_every` network
/// iterations; the stream hook fires after each committed stream (the
/// checkpoint point); the abort hook fires with the last consistent state
/// when training fails.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub on_eval: Option<&'a mut EvalHook<'a>>,
    pub on_stream_end: Option<&'a mut StreamHook<'a>>,
    pub on_abort: Option<&'a mut StreamHook<'a>>,
}

/// Independent, seekable random streams for each stochastic concern.
#[derive(Debug, Clone)]
pub struct RngSuite {
    pub net_init: ChaCha8Rng,
    pub draws: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub cerr: ChaCha8Rng,
    pub replay: ChaCha8Rng,
}

/// Serializable positions of every rng in the suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSuiteState {
    pub states: Vec<RngState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSuite {
    pub fn from_seed(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Self { net_init: mk(0), draws: mk(1), shuffle: mk(2), cerr: mk(3), replay: mk(4) }
    }

    pub fn capture(&self) -> RngSuiteState {
        let cap = |r: &ChaCha8Rng| RngState {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        };
        RngSuiteState {
            states: vec![
                cap(&self.net_init),
                cap(&self.draws),
                cap(&self.shuffle),
                cap(&self.cerr),
                cap(&self.replay),
            ],
        }
    }

    pub fn restore(state: &RngSuiteState) -> Result<Self> {
        if state.states.len() != 5 {
            return Err(Error::Checkpoint(format!(
                "expected 5 rng states, got {}",
                state.states.len()
            )));
        }
        let mk = |s: &RngState| {
            let mut r = ChaCha8Rng::from_seed(s.seed);
            r.set_stream(s.stream);
            r.set_word_pos(s.word_pos);
            r
        };
        Ok(Self {
            net_init: mk(&state.states[0]),
            draws: mk(&state.states[1]),
            shuffle: mk(&state.states[2]),
            cerr: mk(&state.states[3]),
            replay: mk(&state.states[4]),
        })
    }
}

/// Complete state needed to continue a run from a stream boundary.
pub struct ResumeState {
    pub net: NetParams,
    pub mixture: MixtureState,
    pub ledger: StatsLedger,
    pub rngs: RngSuiteState,
    pub progress: Progress,
    pub replay: Option<ReplayBuffer>,
}

pub struct TrainOutcome {
    pub net: NetParams,
    pub mixture: MixtureState,
    pub ledger: StatsLedger,
    pub report: TrainReport,
}

/// Hard cluster assignments for evaluation: encode, average `l_eval` seeded
/// draws, argmax responsibilities. Deterministic per seed.
pub fn evaluate_assignments(
    net: &NetParams,
    state: &MixtureState,
    x: ArrayView2<f64>,
    l_eval: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let lb = net.encode(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(9);
    let sampled = lb.sample_latent(l_eval.max(1), &mut rng);
    state.hard_assign(sampled.zhat.view())
}

/// Reconstruction pretraining of the networks through the deterministic
/// mean path (mixture terms masked; the mixture is untouched and never
/// consulted). Stands in for an autoencoder initialization.
pub fn warmup(
    cfg: &TrainConfig,
    x: ArrayView2<f64>,
    net: &mut NetParams,
    shuffle: &mut ChaCha8Rng,
) -> Result<()> {
    for epoch in 0..cfg.warmup_epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        for _ in 0..cfg.net_iters {
            let batch = sample_batch(&x.to_owned(), cfg.batch_size, shuffle);
            let (_, grads) = net.reconstruction_and_gradients(batch.view())?;
            net.adam_step(&grads, lr, 0.9, 0.999, 1e-8)?;
        }
    }
    Ok(())
}

fn sample_batch(pool: &Array2<f64>, batch_size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = pool.nrows();
    if n <= batch_size {
        return pool.clone();
    }
    let idx = rand::seq::index::sample(rng, n, batch_size);
    let mut out = Array2::zeros((batch_size, pool.ncols()));
    for (row, src) in idx.into_iter().enumerate() {
        out.row_mut(row).assign(&pool.row(src));
    }
    out
}

fn gather_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

struct PendingBirth {
    source: ClusterId,
    proposed: Vec<ClusterId>,
    elbo_before: f64,
}

/// Birth proposals stay on probation for the rest of their mini-batch pass:
/// any sweep they end below unit mass drops them. A proposal consumed by an
/// accepted merge graduates (the merge gate already vouched for it).
struct Probation {
    source: ClusterId,
    proposed: Vec<ClusterId>,
    elbo_before: f64,
}

struct Engine<'cfg, 'h, 'hk> {
    cfg: &'cfg TrainConfig,
    net: NetParams,
    state: MixtureState,
    ledger: StatsLedger,
    rngs: RngSuite,
    net_iters: u64,
    stream_seq: u64,
    report: TrainReport,
    hooks: &'h mut TrainHooks<'hk>,
    current_task: usize,
}

impl<'cfg, 'h, 'hk> Engine<'cfg, 'h, 'hk> {
    fn fresh(cfg: &'cfg TrainConfig, input_dim: usize, hooks: &'h mut TrainHooks<'hk>) -> Result<Self> {
        cfg.validate()?;
        let mut rngs = RngSuite::from_seed(cfg.seed);
        let net = NetParams::new(input_dim, cfg.latent_dim, &cfg.hidden, &mut rngs.net_init);
        let state = MixtureState::init(NwPrior::default_for_dim(cfg.latent_dim), cfg.alpha)?;
        let ledger = StatsLedger::new(cfg.latent_dim);
        Ok(Self {
            cfg,
            net,
            state,
            ledger,
            rngs,
            net_iters: 0,
            stream_seq: 0,
            report: TrainReport::default(),
            hooks,
            current_task: 0,
        })
    }

    fn from_resume(cfg: &'cfg TrainConfig, resume: &ResumeState, hooks: &'h mut TrainHooks<'hk>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            net: resume.net.clone(),
            state: resume.mixture.clone(),
            ledger: resume.ledger.clone(),
            rngs: RngSuite::restore(&resume.rngs)?,
            net_iters: resume.progress.net_iters,
            stream_seq: resume.progress.stream_seq,
            report: TrainReport::default(),
            hooks,
            current_task: resume.progress.task_idx,
        })
    }

    fn fire_eval(&mut self) {
        if self.cfg.eval_every > 0 && self.net_iters % self.cfg.eval_every as u64 == 0 {
            if let Some(cb) = self.hooks.on_eval.as_mut() {
                let snapshot = EvalSnapshot {
                    net: &self.net,
                    mixture: &self.state,
                    net_iters: self.net_iters,
                    task_idx: self.current_task,
                };
                let records = cb(&snapshot);
                self.report.metric_records.extend(records);
            }
        }
    }

    fn net_phase(&mut self, pool: &Array2<f64>, lr: f64) -> Result<()> {
        for _ in 0..self.cfg.net_iters {
            let batch = sample_batch(pool, self.cfg.batch_size, &mut self.rngs.shuffle);
            let lb = self.net.encode(batch.view())?;
            let resp = self.state.local_step(lb.zhat.view())?;
            let (_, grads) = self.net.elbo_vae_and_gradients(
                batch.view(),
                Some((&self.state, &resp)),
                self.cfg.mc_samples,
                &mut self.rngs.draws,
            )?;
            self.net.adam_step(&grads, lr, 0.9, 0.999, 1e-8)?;
            self.net_iters += 1;
            self.fire_eval();
        }
        Ok(())
    }

    /// One local/swap/global sweep of a mini-batch, keeping the tracked
    /// responsibilities and the ledger in lock-step.
    fn sweep_batch(
        &mut self,
        j: StreamId,
        batch_id: BatchId,
        rows: &[usize],
        z_batch: &Array2<f64>,
        stream_resp: &mut Responsibilities,
        cache: Option<&mut BirthCache>,
    ) -> Result<()> {
        let resp_b = self.state.local_step(z_batch.view())?;
        for (bi, &r) in rows.iter().enumerate() {
            stream_resp.0.row_mut(r).assign(&resp_b.0.row(bi));
        }
        let ids = self.state.ids();
        if let Some(cache) = cache {
            cache.cache_candidates(&resp_b, z_batch.view(), &ids, &mut self.rngs.cerr);
        }
        let stats = compute_batch_stats(resp_b.view(), z_batch.view());
        let pairs: Vec<_> = ids.iter().copied().zip(stats).collect();
        self.ledger.swap_minibatch(j, batch_id, &pairs)?;
        let totals = self.ledger.stats_for_global_step(j, &ids);
        self.state.global_step(&totals)?;
        Ok(())
    }

    fn try_propose_birth(
        &mut self,
        j: StreamId,
        stream_resp: &mut Responsibilities,
        cache: &BirthCache,
    ) -> Result<Option<PendingBirth>> {
        let Some((target, _)) = cache.largest_cluster(&[]) else {
            return Ok(None);
        };
        let ids = self.state.ids();
        let masses: Vec<f64> = self
            .ledger
            .stats_for_global_step(j, &ids)
            .iter()
            .map(|t| t.n)
            .collect();
        let proposal = propose_birth(
            &self.state,
            cache,
            target,
            self.cfg.cerr.proposals,
            self.cfg.cerr.min_cache,
            &masses,
            &mut self.rngs.cerr,
        )?;
        match proposal {
            BirthProposal::Skipped { source, cache_len } => {
                self.report
                    .move_records
                    .push(MoveRecord::BirthSkipped { source: source.0, cache_len });
                Ok(None)
            }
            BirthProposal::Expanded { state, source, proposed } => {
                let elbo_before = monitored_objective(&self.state, &self.ledger, j, stream_resp)?;
                let n = stream_resp.nrows();
                let old_t = stream_resp.ncomponents();
                let mut widened = Array2::zeros((n, old_t + proposed.len()));
                widened
                    .slice_mut(ndarray::s![.., 0..old_t])
                    .assign(&stream_resp.0);
                *stream_resp = Responsibilities(widened);
                self.state = state;
                Ok(Some(PendingBirth { source, proposed, elbo_before }))
            }
        }
    }

    /// Drops probation proposals that ended this sweep below unit mass and
    /// restores ledger/responsibility consistency. Returns whether anything
    /// was dropped.
    fn probation_drop(
        &mut self,
        j: StreamId,
        batch_id: BatchId,
        rows: &[usize],
        z_batch: &Array2<f64>,
        stream_resp: &mut Responsibilities,
        proposed: &[ClusterId],
    ) -> Result<bool> {
        let ids = self.state.ids();
        let totals = self.ledger.stats_for_global_step(j, &ids);
        let mut dropped = Vec::new();
        let mut dropped_pos = Vec::new();
        for (pos, comp) in self.state.components.iter().enumerate() {
            if proposed.contains(&comp.id) && totals[pos].n < 1.0 {
                dropped.push(comp.id);
                dropped_pos.push(pos);
            }
        }
        if dropped.is_empty() {
            return Ok(false);
        }
        for id in &dropped {
            let pos = self.state.position_of(*id).expect("component exists");
            self.state.components.remove(pos);
            self.ledger.remove_cluster(*id);
        }
        let n = stream_resp.nrows();
        let keep: Vec<usize> =
            (0..stream_resp.ncomponents()).filter(|p| !dropped_pos.contains(p)).collect();
        let mut narrowed = Array2::zeros((n, keep.len()));
        for (new_col, &old_col) in keep.iter().enumerate() {
            narrowed.column_mut(new_col).assign(&stream_resp.0.column(old_col));
        }
        *stream_resp = Responsibilities(narrowed);
        // The dropped proposals held (sub-unit) mass from this batch; one
        // restorative sweep renormalizes rows and re-syncs the ledger
        // exactly.
        self.sweep_batch(j, batch_id, rows, z_batch, stream_resp, None)?;
        Ok(true)
    }

    /// Completes the birth record once the mini-batch pass ends: whatever is
    /// still alive (or graduated through a merge) counts as accepted.
    fn close_birth(
        &mut self,
        j: StreamId,
        stream_resp: &Responsibilities,
        probation: Probation,
    ) -> Result<()> {
        let accepted: Vec<u64> = probation
            .proposed
            .iter()
            .filter(|id| self.state.position_of(**id).is_some())
            .map(|id| id.0)
            .collect();
        let elbo_after = monitored_objective(&self.state, &self.ledger, j, stream_resp)?;
        self.report.move_records.push(MoveRecord::Birth {
            source: probation.source.0,
            proposed: probation.proposed.iter().map(|c| c.0).collect(),
            accepted,
            elbo_before: probation.elbo_before,
            elbo_after,
        });
        Ok(())
    }

    fn merge_phase(&mut self, j: StreamId, stream_resp: &mut Responsibilities) -> Result<()> {
        let assembled = self.ledger.assembled_stats(j, &self.state.ids());
        let candidates = select_merge_candidates(&self.state, &assembled)?;
        for cand in candidates {
            let (Some(pa), Some(pb)) =
                (self.state.position_of(cand.a), self.state.position_of(cand.b))
            else {
                continue;
            };
            // Provenance can change as survivors inherit flags; re-validate.
            if self.state.components[pa].pre_existing && self.state.components[pb].pre_existing {
                continue;
            }
            if let Some(record) = attempt_merge(
                &mut self.state,
                &mut self.ledger,
                j,
                stream_resp,
                cand.a,
                cand.b,
            )? {
                self.report.move_records.push(record);
            }
        }
        Ok(())
    }

    fn dpmm_minibatch_pass(
        &mut self,
        j: StreamId,
        batch_id: BatchId,
        rows: &[usize],
        zhat: &Array2<f64>,
        stream_resp: &mut Responsibilities,
        cache: &mut BirthCache,
    ) -> Result<()> {
        let z_batch = gather_rows(zhat, rows);
        let mut prev: Option<f64> = None;
        let mut birth_attempted = false;
        let mut probation: Option<Probation> = None;
        let mut swept_once = false;
        let mut iters = 0;
        loop {
            iters += 1;
            self.sweep_batch(j, batch_id, rows, &z_batch, stream_resp, Some(cache))?;
            let mut rebaselined = false;
            if let Some(p) = probation.as_mut() {
                if swept_once {
                    let dropped = self.probation_drop(
                        j,
                        batch_id,
                        rows,
                        &z_batch,
                        stream_resp,
                        &p.proposed.clone(),
                    )?;
                    if dropped {
                        rebaselined = true;
                    }
                } else {
                    // Freshly proposed components just had their first sweep.
                    swept_once = true;
                    rebaselined = true;
                }
            } else if self.cfg.cerr.enabled && !birth_attempted {
                birth_attempted = true;
                if let Some(p) = self.try_propose_birth(j, stream_resp, cache)? {
                    probation = Some(Probation {
                        source: p.source,
                        proposed: p.proposed,
                        elbo_before: p.elbo_before,
                    });
                    swept_once = false;
                    rebaselined = true;
                }
            }
            // Merges wait until proposals have been swept and vetted once.
            if self.cfg.cerr.enabled && (probation.is_none() || swept_once) {
                self.merge_phase(j, stream_resp)?;
            }
            let elbo = monitored_objective(&self.state, &self.ledger, j, stream_resp)?;
            if let Some(p) = prev {
                if !rebaselined && elbo - p < self.cfg.inner_tol * p.abs().max(1.0) {
                    break;
                }
            }
            prev = Some(elbo);
            if iters >= self.cfg.inner_max_iters {
                break;
            }
        }
        if let Some(p) = probation.take() {
            if !swept_once {
                // The loop ended right after a proposal; give it its sweep
                // and judge it before leaving the mini-batch.
                self.sweep_batch(j, batch_id, rows, &z_batch, stream_resp, Some(cache))?;
                self.probation_drop(j, batch_id, rows, &z_batch, stream_resp, &p.proposed.clone())?;
            }
            self.close_birth(j, stream_resp, p)?;
        }
        Ok(())
    }

    fn run_stream(
        &mut self,
        task_idx: usize,
        stream_idx: usize,
        stream_x: &Array2<f64>,
        minibatches: &[Vec<usize>],
        replay: Option<&ReplayBuffer>,
    ) -> Result<()> {
        let j = StreamId(self.stream_seq);
        self.stream_seq += 1;
        self.ledger.begin_stream(j)?;

        // Replay joins the network-update pool only; the ledger never sees it.
        let pool = match replay {
            Some(buf) if !buf.is_empty() => {
                mix_into_stream(buf, stream_x.view(), &mut self.rngs.shuffle)?
            }
            _ => stream_x.to_owned(),
        };

        let mut cache = BirthCache::new(self.cfg.cerr.reservoir_capacity, self.cfg.cerr.birth_threshold);
        let mut last_elbo = f64::NEG_INFINITY;
        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.learning_rate * self.cfg.lr_decay.powi(epoch as i32);
            self.net_phase(&pool, lr)?;

            // Refresh latents: ẑ from L draws, frozen for the whole inner
            // phase of this epoch. Cached candidate vectors from older
            // encoders are stale, so the reservoirs restart too.
            let lb = self.net.encode(stream_x.view())?;
            let sampled = lb.sample_latent(self.cfg.mc_samples, &mut self.rngs.draws);
            let zhat = sampled.zhat;
            cache.clear();
            let mut stream_resp = self.state.local_step(zhat.view())?;
            for (i, rows) in minibatches.iter().enumerate() {
                self.dpmm_minibatch_pass(
                    j,
                    BatchId(i as u64),
                    rows,
                    &zhat,
                    &mut stream_resp,
                    &mut cache,
                )?;
            }
            last_elbo = monitored_objective(&self.state, &self.ledger, j, &stream_resp)?;
            self.report.elbo_trajectory.push(last_elbo);
        }

        self.ledger.commit_stream(j)?;
        self.report.stream_summaries.push(StreamSummary {
            task: task_idx,
            stream: stream_idx,
            final_elbo: last_elbo,
            cluster_count: self.state.ncomponents(),
            net_iters: self.net_iters,
        });
        Ok(())
    }

    fn run(
        &mut self,
        tasks: &[TaskData],
        start_task: usize,
        start_stream: usize,
        mut replay_buf: Option<ReplayBuffer>,
        fresh: bool,
    ) -> Result<()> {
        let started = std::time::Instant::now();
        if tasks.is_empty() {
            return Err(Error::Contract("at least one task required".into()));
        }
        if fresh && self.cfg.warmup_epochs > 0 {
            let first = &tasks[0];
            let rows = first.streams[0].rows();
            let pool = gather_rows(&first.x, &rows);
            for epoch in 0..self.cfg.warmup_epochs {
                let lr = self.cfg.learning_rate * self.cfg.lr_decay.powi(epoch as i32);
                for _ in 0..self.cfg.net_iters {
                    let batch = sample_batch(&pool, self.cfg.batch_size, &mut self.rngs.shuffle);
                    let (_, grads) = self.net.reconstruction_and_gradients(batch.view())?;
                    self.net.adam_step(&grads, lr, 0.9, 0.999, 1e-8)?;
                    self.net_iters += 1;
                    self.fire_eval();
                }
            }
        }

        for t in start_task..tasks.len() {
            self.current_task = t;
            let task = &tasks[t];
            let first_stream = if t == start_task { start_stream } else { 0 };
            if t > 0 && first_stream == 0 {
                // New dataset boundary: regenerate the replay buffer from
                // the model trained on everything before it.
                replay_buf = Some(generate_replay(
                    &self.state,
                    &self.net,
                    self.cfg.replay_count,
                    format!("after-task-{}", t - 1),
                    &mut self.rngs.replay,
                )?);
            }
            for s in first_stream..task.streams.len() {
                let rows = task.streams[s].rows();
                let stream_x = gather_rows(&task.x, &rows);
                // Mini-batch index lists relative to the gathered stream.
                let mut minibatches = Vec::with_capacity(task.streams[s].minibatches.len());
                let mut offset = 0;
                for mb in &task.streams[s].minibatches {
                    minibatches.push((offset..offset + mb.len()).collect::<Vec<_>>());
                    offset += mb.len();
                }
                let replay_ref = if t > 0 { replay_buf.as_ref() } else { None };
                self.run_stream(t, s, &stream_x, &minibatches, replay_ref)?;

                let last_of_task = s + 1 == task.streams.len();
                if last_of_task {
                    self.state.mark_all_pre_existing();
                }
                let progress = if last_of_task {
                    Progress {
                        task_idx: t + 1,
                        stream_idx: 0,
                        net_iters: self.net_iters,
                        stream_seq: self.stream_seq,
                    }
                } else {
                    Progress {
                        task_idx: t,
                        stream_idx: s + 1,
                        net_iters: self.net_iters,
                        stream_seq: self.stream_seq,
                    }
                };
                if self.hooks.on_stream_end.is_some() {
                    let snap = StreamEndSnapshot {
                        net: &self.net,
                        mixture: &self.state,
                        ledger: &self.ledger,
                        rngs: self.rngs.capture(),
                        progress,
                        replay: if t > 0 { replay_buf.as_ref() } else { None },
                        finished_task: t,
                        finished_stream: s,
                    };
                    if let Some(cb) = self.hooks.on_stream_end.as_mut() {
                        cb(&snap);
                    }
                }
            }
        }
        self.report.final_cluster_count = self.state.ncomponents();
        self.report.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(())
    }

    fn finish(self) -> TrainOutcome {
        TrainOutcome {
            net: self.net,
            mixture: self.state,
            ledger: self.ledger,
            report: self.report,
        }
    }

    fn abort_snapshot(&mut self) {
        if self.hooks.on_abort.is_some() {
            let progress = Progress {
                task_idx: self.current_task,
                stream_idx: 0,
                net_iters: self.net_iters,
                stream_seq: self.stream_seq,
            };
            let snap = StreamEndSnapshot {
                net: &self.net,
                mixture: &self.state,
                ledger: &self.ledger,
                rngs: self.rngs.capture(),
                progress,
                replay: None,
                finished_task: self.current_task,
                finished_stream: 0,
            };
            if let Some(cb) = self.hooks.on_abort.as_mut() {
                cb(&snap);
            }
        }
    }
}

/// Batch training: the dataset is one stream; its statistics commit once at
/// the end of the last epoch.
pub fn train_batch(
    cfg: &TrainConfig,
    task: &TaskData,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let tasks = std::slice::from_ref(task);
    let mut engine = Engine::fresh(cfg, task.x.ncols(), hooks)?;
    match engine.run(tasks, 0, 0, None, true) {
        Ok(()) => Ok(engine.finish()),
        Err(e) => {
            engine.abort_snapshot();
            Err(e)
        }
    }
}

/// Lifelong training over an ordered task sequence with generative replay at
/// dataset boundaries and commit-per-stream knowledge preservation.
pub fn train_lifelong(
    cfg: &TrainConfig,
    tasks: &[TaskData],
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    if tasks.is_empty() {
        return Err(Error::Contract("at least one task required".into()));
    }
    let mut engine = Engine::fresh(cfg, tasks[0].x.ncols(), hooks)?;
    match engine.run(tasks, 0, 0, None, true) {
        Ok(()) => Ok(engine.finish()),
        Err(e) => {
            engine.abort_snapshot();
            Err(e)
        }
    }
}

/// Continues a lifelong run from a stream-boundary checkpoint; with the same
/// config and tasks the continuation reproduces the uninterrupted run.
pub fn train_lifelong_resume(
    cfg: &TrainConfig,
    tasks: &[TaskData],
    resume: &ResumeState,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let mut engine = Engine::from_resume(cfg, resume, hooks)?;
    let start_task = resume.progress.task_idx;
    let start_stream = resume.progress.stream_idx;
    match engine.run(tasks, start_task, start_stream, resume.replay.clone(), false) {
        Ok(()) => Ok(engine.finish()),
        Err(e) => {
            engine.abort_snapshot();
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{build_split_tasks, synth_gmm};
    use crate::metrics::ari;
    use crate::numerics::SymMatrix;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            latent_dim: 2,
            hidden: vec![16],
            epochs: 4,
            net_iters: 10,
            learning_rate: 2e-3,
            lr_decay: 0.9,
            batch_size: 128,
            stream_size: 150,
            minibatches_per_stream: 2,
            mc_samples: 1,
            eval_mc_samples: 4,
            replay_count: 40,
            warmup_epochs: 1,
            seed: 11,
            alpha: 1.0,
            cerr: CerrConfig::default(),
            inner_tol: 1e-4,
            inner_max_iters: 12,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn three_mode_dataset(seed: u64) -> crate::dataio::Dataset {
        let means = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let covs = vec![SymMatrix::identity(2).scaled(0.09); 3];
        synth_gmm(&means, &covs, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 300, seed).unwrap()
    }

    #[test]
    fn zero_epoch_run_returns_initial_state() {
        let ds = three_mode_dataset(5);
        let (task, _) = ds.into_single_task(128);
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        cfg.warmup_epochs = 0;
        let mut hooks = TrainHooks::default();
        let out = train_batch(&cfg, &task, &mut hooks).unwrap();
        assert_eq!(out.mixture.ncomponents(), 1);
        assert!(out.report.elbo_trajectory.is_empty());
    }

    #[test]
    fn batch_training_recovers_three_modes() {
        let ds = three_mode_dataset(5);
        let labels: Vec<usize> = ds.eval_handle().unwrap().labels().to_vec();
        let x = ds.x.clone();
        let (task, _) = ds.into_single_task(128);
        let cfg = small_cfg();
        let mut hooks = TrainHooks::default();
        let out = train_batch(&cfg, &task, &mut hooks).unwrap();
        assert_eq!(out.mixture.ncomponents(), 3, "final T");
        let assigns =
            evaluate_assignments(&out.net, &out.mixture, x.view(), cfg.eval_mc_samples, cfg.seed)
                .unwrap();
        let score = ari(&assigns, &labels).unwrap();
        assert!(score >= 0.99, "ARI {score}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let ds = three_mode_dataset(9);
            let (task, _) = ds.into_single_task(100);
            let mut cfg = small_cfg();
            cfg.epochs = 2;
            let mut hooks = TrainHooks::default();
            train_batch(&cfg, &task, &mut hooks).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report.elbo_trajectory.len(), b.report.elbo_trajectory.len());
        for (x, y) in a.report.elbo_trajectory.iter().zip(&b.report.elbo_trajectory) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.mixture.ncomponents(), b.mixture.ncomponents());
        for (ca, cb) in a.mixture.components.iter().zip(&b.mixture.components) {
            assert_eq!(ca.mean, cb.mean);
        }
    }

    #[test]
    fn warmup_reduces_reconstruction_and_ignores_mixture() {
        let ds = three_mode_dataset(13);
        let cfg = TrainConfig {
            warmup_epochs: 5,
            net_iters: 20,
            learning_rate: 2e-3,
            batch_size: 128,
            latent_dim: 2,
            hidden: vec![16],
            mc_samples: 1,
            ..TrainConfig::default()
        };
        let mut rngs = RngSuite::from_seed(3);
        let mut net = NetParams::new(2, 2, &[16], &mut rngs.net_init);
        let recon_of = |net: &NetParams| -net.reconstruction_and_gradients(ds.x.view()).unwrap().0;
        let before = recon_of(&net);

        // Zero warmup epochs: parameters unchanged.
        let mut zero_cfg = cfg.clone();
        zero_cfg.warmup_epochs = 0;
        let mut untouched = net.clone();
        warmup(&zero_cfg, ds.x.view(), &mut untouched, &mut rngs.shuffle.clone()).unwrap();
        assert_eq!(untouched.encoder.layers[0].w, net.encoder.layers[0].w);

        warmup(&cfg, ds.x.view(), &mut net, &mut rngs.shuffle).unwrap();
        let after = recon_of(&net);
        assert!(after > before, "reconstruction term should rise: {before} -> {after}");

        // Mixture masking: the same warmup from the same seeds is
        // bit-identical no matter what any mixture looks like.
        let mut rngs_a = RngSuite::from_seed(3);
        let mut net_a = NetParams::new(2, 2, &[16], &mut rngs_a.net_init);
        warmup(&cfg, ds.x.view(), &mut net_a, &mut rngs_a.shuffle).unwrap();
        for (la, lb) in net.encoder.layers.iter().zip(&net_a.encoder.layers) {
            assert_eq!(la.w, lb.w);
        }
    }

    #[test]
    fn lifelong_two_tasks_grow_clusters_and_replay_mitigates_forgetting() {
        // Task 1: two modes; task 2: two new modes.
        let means = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0], vec![10.0, 10.0]];
        let covs = vec![SymMatrix::identity(2).scaled(0.09); 4];
        let ds = synth_gmm(&means, &covs, &[0.25; 4], 600, 31).unwrap();
        let stream = build_split_tasks(&ds, &[vec![0, 1], vec![2, 3]], 2, 2, None, 7).unwrap();
        let tasks: Vec<TaskData> = stream.tasks.iter().map(|t| t.train.clone()).collect();
        let evals: Vec<_> = stream.tasks.iter().map(|t| t.eval.clone()).collect();

        let run = |replay_count: usize| {
            let mut cfg = small_cfg();
            cfg.replay_count = replay_count;
            cfg.epochs = 3;
            let mut hooks = TrainHooks::default();
            let out = train_lifelong(&cfg, &tasks, &mut hooks).unwrap();
            // ARI on task 1 after both tasks.
            let assigns = evaluate_assignments(
                &out.net,
                &out.mixture,
                tasks[0].x.view(),
                cfg.eval_mc_samples,
                cfg.seed,
            )
            .unwrap();
            (out, ari(&assigns, evals[0].labels()).unwrap())
        };
        let (out_replay, ari_with_replay) = run(100);
        assert!(out_replay.mixture.ncomponents() >= 4, "T = {}", out_replay.mixture.ncomponents());
        assert!(
            ari_with_replay > 0.8,
            "task-1 ARI with replay {ari_with_replay}"
        );
        // Births were logged for the new modes.
        let births = out_replay
            .report
            .move_records
            .iter()
            .filter(|r| matches!(r, MoveRecord::Birth { .. }))
            .count();
        assert!(births > 0);
        // Provenance safety over the whole run.
        for rec in &out_replay.report.move_records {
            if let MoveRecord::Merge { a_pre_existing, b_pre_existing, elbo_before, elbo_after, .. } = rec {
                assert!(!(a_pre_existing & b_pre_existing));
                assert!(elbo_after >= &(elbo_before - 1e-8));
            }
        }
    }

    #[test]
    fn single_task_lifelong_equals_batch() {
        let ds = three_mode_dataset(17);
        let (task, _) = ds.into_single_task(100);
        let cfg = small_cfg();
        let mut hooks = TrainHooks::default();
        let batch = train_batch(&cfg, &task, &mut hooks).unwrap();
        let mut hooks = TrainHooks::default();
        let lifelong = train_lifelong(&cfg, std::slice::from_ref(&task), &mut hooks).unwrap();
        assert_eq!(batch.report.elbo_trajectory.len(), lifelong.report.elbo_trajectory.len());
        for (a, b) in batch
            .report
            .elbo_trajectory
            .iter()
            .zip(&lifelong.report.elbo_trajectory)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ledger_additivity_audit_after_training() {
        let ds = three_mode_dataset(23);
        let (task, _) = ds.into_single_task(100);
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let mut hooks = TrainHooks::default();
        let out = train_batch(&cfg, &task, &mut hooks).unwrap();
        let committed = out.ledger.committed_sum();
        for (id, stats) in &committed {
            let overall = out.ledger.overall_stats(*id);
            assert!((overall.weight - stats.weight).abs() < 1e-9);
            assert!(overall.second.max_abs_diff(&stats.second) < 1e-9);
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let means = vec![vec![0.0, 0.0], vec![8.0, 0.0]];
        let covs = vec![SymMatrix::identity(2).scaled(0.09); 2];
        let ds = synth_gmm(&means, &covs, &[0.5, 0.5], 300, 41).unwrap();
        let stream = build_split_tasks(&ds, &[vec![0], vec![1]], 2, 2, None, 3).unwrap();
        let tasks: Vec<TaskData> = stream.tasks.iter().map(|t| t.train.clone()).collect();
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        cfg.eval_every = 13;

        // Metric callback: record the monitored cluster count per step.
        let collect = |cfg: &TrainConfig, tasks: &[TaskData]| {
            let mut cb = |snap: &EvalSnapshot| {
                vec![MetricRecord {
                    step: snap.net_iters,
                    task: snap.task_idx,
                    metric: "clusters".into(),
                    value: snap.mixture.ncomponents() as f64,
                }]
            };
            let mut captured: Option<ResumeState> = None;
            let mut capture_hook = |snap: &StreamEndSnapshot| {
                if snap.finished_task == 0 && snap.finished_stream == 1 {
                    captured = Some(ResumeState {
                        net: snap.net.clone(),
                        mixture: snap.mixture.clone(),
                        ledger: snap.ledger.clone(),
                        rngs: snap.rngs.clone(),
                        progress: snap.progress,
                        replay: snap.replay.cloned(),
                    });
                }
            };
            let mut hooks = TrainHooks {
                on_eval: Some(&mut cb),
                on_stream_end: Some(&mut capture_hook),
                on_abort: None,
            };
            let out = train_lifelong(cfg, tasks, &mut hooks).unwrap();
            (out, captured.expect("checkpoint captured"))
        };
        let (full, checkpoint) = collect(&cfg, &tasks);

        // Resume from the captured stream boundary and compare the tail.
        let mut cb = |snap: &EvalSnapshot| {
            vec![MetricRecord {
                step: snap.net_iters,
                task: snap.task_idx,
                metric: "clusters".into(),
                value: snap.mixture.ncomponents() as f64,
            }]
        };
        let mut hooks = TrainHooks { on_eval: Some(&mut cb), on_stream_end: None, on_abort: None };
        let resumed = train_lifelong_resume(&cfg, &tasks, &checkpoint, &mut hooks).unwrap();

        let cut = checkpoint.progress.net_iters;
        let full_tail: Vec<_> = full
            .report
            .metric_records
            .iter()
            .filter(|r| r.step > cut)
            .cloned()
            .collect();
        assert_eq!(full_tail, resumed.report.metric_records);
        assert_eq!(full.mixture.ncomponents(), resumed.mixture.ncomponents());
        for (a, b) in full.mixture.components.iter().zip(&resumed.mixture.components) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.stick, b.stick);
        }
        for (a, b) in full
            .report
            .elbo_trajectory
            .iter()
            .skip(resumedskip_offset(&full, &resumed))
            .zip(&resumed.report.elbo_trajectory)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn resumedskip_offset(full: &TrainOutcome, resumed: &TrainOutcome) -> usize {
        full.report.elbo_trajectory.len() - resumed.report.elbo_trajectory.len()
    }
}
