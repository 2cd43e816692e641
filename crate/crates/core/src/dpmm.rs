//! Variational state and coordinate-ascent updates for the Dirichlet-process
//! Gaussian mixture over latent vectors: stick-breaking Beta factors, one
//! Normal-Wishart factor per component, and categorical responsibilities.

use crate::numerics::{
    cholesky_logdet_inverse, digamma, log_sum_exp, log_wishart_normalizer, CholeskyFactors,
    SymMatrix,
};
use crate::suffstats::{ClusterId, ClusterStats, ClusterTotals};
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.8378770664093453;

/// Normal-Wishart prior record λ₀ = (m₀, β₀, ν₀, W₀) plus the DP
/// concentration α. The scale inverse and log normalizer are cached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NwPrior {
    pub mean: Vec<f64>,
    pub beta: f64,
    pub dof: f64,
    pub scale: SymMatrix,
    scale_inv: SymMatrix,
    log_normalizer: f64,
}

impl NwPrior {
    pub fn new(mean: Vec<f64>, beta: f64, dof: f64, scale: SymMatrix) -> Result<Self> {
        let dim = mean.len();
        if scale.dim() != dim {
            return Err(Error::Shape(format!(
                "prior scale dim {} vs mean dim {dim}",
                scale.dim()
            )));
        }
        if beta <= 0.0 {
            return Err(Error::Domain(format!("prior beta must be positive, got {beta}")));
        }
        let scale_inv = cholesky_logdet_inverse(&scale)?.inverse;
        let log_normalizer = log_wishart_normalizer(&scale, dof)?;
        Ok(Self { mean, beta, dof, scale, scale_inv, log_normalizer })
    }

    /// Conventional default: m₀ = 0, β₀ = 0.2, ν₀ = D+2, W₀ = I.
    pub fn default_for_dim(dim: usize) -> Self {
        Self::new(vec![0.0; dim], 0.2, dim as f64 + 2.0, SymMatrix::identity(dim))
            .expect("default prior is well-formed")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale_inv(&self) -> &SymMatrix {
        &self.scale_inv
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }
}

/// One mixture component: Normal-Wishart variational parameters, the
/// stick-breaking Beta parameters, and a provenance flag that marks whether
/// the component survived a previous dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub id: ClusterId,
    pub mean: Vec<f64>,
    pub beta: f64,
    pub scale: SymMatrix,
    pub dof: f64,
    pub stick: (f64, f64),
    pub pre_existing: bool,
}

/// Per-observation responsibilities, rows summing to one.
#[derive(Debug, Clone)]
pub struct Responsibilities(pub Array2<f64>);

impl Responsibilities {
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncomponents(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Contract check: every row must sum to one.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.0.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "responsibility row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Expected log stick-breaking quantities for one component.
#[derive(Debug, Clone, Copy)]
pub struct StickLog {
    pub e_log_v: f64,
    pub e_log_one_minus_v: f64,
    /// E[log π_t] = E[log V_t] + Σ_{i<t} E[log(1−V_i)]
    pub e_log_pi: f64,
}

/// The entire clustering belief.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureState {
    pub prior: NwPrior,
    pub alpha: f64,
    pub components: Vec<Component>,
    next_id: u64,
}

impl MixtureState {
    /// Starts with a single component at the prior.
    pub fn init(prior: NwPrior, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        let first = Component {
            id: ClusterId(0),
            mean: prior.mean.clone(),
            beta: prior.beta,
            scale: prior.scale.clone(),
            dof: prior.dof,
            stick: (1.0, alpha),
            pre_existing: false,
        };
        Ok(Self { prior, alpha, components: vec![first], next_id: 1 })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn ncomponents(&self) -> usize {
        self.components.len()
    }

    pub fn ids(&self) -> Vec<ClusterId> {
        self.components.iter().map(|c| c.id).collect()
    }

    pub fn position_of(&self, id: ClusterId) -> Option<usize> {
        self.components.iter().position(|c| c.id == id)
    }

    pub fn allocate_id(&mut self) -> ClusterId {
        let id = ClusterId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Restores the id counter when rebuilding a state from a checkpoint.
    pub fn set_next_id(&mut self, next: u64) {
        self.next_id = next;
    }

    /// Marks every surviving component as pre-existing (dataset boundary).
    pub fn mark_all_pre_existing(&mut self) {
        for c in &mut self.components {
            c.pre_existing = true;
        }
    }

    /// E[log V_t], E[log(1−V_t)] and the cumulative E[log π_t] per component.
    pub fn expected_log_stick(&self) -> Result<Vec<StickLog>> {
        let mut out = Vec::with_capacity(self.components.len());
        let mut cum = 0.0;
        for c in &self.components {
            let (a, b) = c.stick;
            let psi_sum = digamma(a + b)?;
            let e_log_v = digamma(a)? - psi_sum;
            let e_log_one_minus_v = digamma(b)? - psi_sum;
            out.push(StickLog { e_log_v, e_log_one_minus_v, e_log_pi: e_log_v + cum });
            cum += e_log_one_minus_v;
        }
        Ok(out)
    }

    /// Unnormalized expected mixing proportions E[V_t]·Π_{i<t}(1−E[V_i]).
    pub fn expected_pi(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.components.len());
        let mut remain = 1.0;
        for c in &self.components {
            let (a, b) = c.stick;
            let ev = a / (a + b);
            out.push(ev * remain);
            remain *= 1.0 - ev;
        }
        out
    }

    /// log Λ̃_k = Σ_{i=1..D} ψ((ν_k+1−i)/2) + D log 2 + log|W_k|.
    fn log_lambda_tilde(&self, comp: &Component, logdet_scale: f64) -> Result<f64> {
        let d = self.dim();
        let mut s = 0.0;
        for i in 1..=d {
            s += digamma((comp.dof + 1.0 - i as f64) / 2.0)?;
        }
        Ok(s + d as f64 * std::f64::consts::LN_2 + logdet_scale)
    }

    fn component_factors(&self) -> Result<Vec<(CholeskyFactors, f64)>> {
        self.components
            .iter()
            .map(|c| {
                let f = cholesky_logdet_inverse(&c.scale)?;
                let llt = self.log_lambda_tilde(c, f.logdet)?;
                Ok((f, llt))
            })
            .collect()
    }

    /// Soft assignment of latent vectors to components:
    /// S_{n,t} = E[log π_t] + ½ log Λ̃_t − D/(2β_t)
    ///           − (ν_t/2)(ẑ_n − m_t)ᵀ W_t (ẑ_n − m_t),
    /// rows softmax-normalized.
    pub fn local_step(&self, zhat: ArrayView2<f64>) -> Result<Responsibilities> {
        let d = self.dim();
        if zhat.ncols() != d {
            return Err(Error::Shape(format!(
                "latent dim {} does not match mixture dim {d}",
                zhat.ncols()
            )));
        }
        let t = self.components.len();
        let sticks = self.expected_log_stick()?;
        let factors = self.component_factors()?;
        let consts: Vec<f64> = self
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                sticks[k].e_log_pi + 0.5 * factors[k].1 - d as f64 / (2.0 * c.beta)
            })
            .collect();

        let n = zhat.nrows();
        let mut resp = Array2::zeros((n, t));
        let mut scores = vec![0.0; t];
        let mut diff = vec![0.0; d];
        for row in 0..n {
            let z = zhat.row(row);
            for (k, c) in self.components.iter().enumerate() {
                for j in 0..d {
                    diff[j] = z[j] - c.mean[j];
                }
                let quad = c.scale.quad_form(&diff);
                scores[k] = consts[k] - 0.5 * c.dof * quad;
            }
            let lse = log_sum_exp(&scores)?;
            let mut out_row = resp.row_mut(row);
            for k in 0..t {
                out_row[k] = (scores[k] - lse).exp();
            }
            let s: f64 = out_row.sum();
            out_row.mapv_inplace(|v| v / s);
        }
        Ok(Responsibilities(resp))
    }

    /// Coordinate-ascent update of all Normal-Wishart and stick parameters
    /// from per-cluster totals (aligned with `components`).
    pub fn global_step(&mut self, totals: &[ClusterTotals]) -> Result<()> {
        if totals.len() != self.components.len() {
            return Err(Error::Shape(format!(
                "{} totals for {} components",
                totals.len(),
                self.components.len()
            )));
        }
        let d = self.dim();
        for tot in totals {
            if tot.n < 0.0 {
                return Err(Error::Contract(format!("negative cluster mass {}", tot.n)));
            }
        }
        // Stick updates: η_{k,1} = 1 + N_k, η_{k,2} = α + Σ_{j>k} N_j.
        let masses: Vec<f64> = totals.iter().map(|t| t.n).collect();
        let mut tail: f64 = 0.0;
        let mut tails = vec![0.0; masses.len()];
        for k in (0..masses.len()).rev() {
            tails[k] = tail;
            tail += masses[k];
        }
        let prior = self.prior.clone();
        for (k, comp) in self.components.iter_mut().enumerate() {
            let tot = &totals[k];
            comp.stick = (1.0 + tot.n, self.alpha + tails[k]);
            if tot.is_empty() {
                comp.mean = prior.mean.clone();
                comp.beta = prior.beta;
                comp.dof = prior.dof;
                comp.scale = prior.scale.clone();
                continue;
            }
            let nk = tot.n;
            comp.beta = prior.beta + nk;
            comp.dof = prior.dof + nk;
            let mut mean = vec![0.0; d];
            for j in 0..d {
                mean[j] = (prior.beta * prior.mean[j] + nk * tot.mean[j]) / comp.beta;
            }
            comp.mean = mean;
            // W_k⁻¹ = W₀⁻¹ + N_k S_k + β₀N_k/(β₀+N_k)(z̄−m₀)(z̄−m₀)ᵀ
            let mut w_inv = prior.scale_inv.clone();
            w_inv.add_assign(&tot.scatter.scaled(nk));
            let shift: Vec<f64> = tot
                .mean
                .iter()
                .zip(&prior.mean)
                .map(|(z, m)| z - m)
                .collect();
            w_inv.add_scaled_outer(&shift, prior.beta * nk / (prior.beta + nk));
            comp.scale = match cholesky_logdet_inverse(&w_inv) {
                Ok(f) => f.inverse,
                Err(Error::NotPositiveDefinite { .. }) => {
                    // Scatter matrices from near-empty clusters can be
                    // rank-deficient; retry once with jitter.
                    let mut jittered = w_inv.clone();
                    jittered.add_diagonal(1e-8);
                    cholesky_logdet_inverse(&jittered)?.inverse
                }
                Err(e) => return Err(e),
            };
        }
        Ok(())
    }

    /// Mixture-relevant ELBO terms (everything except reconstruction and
    /// encoder entropy), evaluated on the given latents and responsibilities.
    pub fn dpmm_elbo(&self, zhat: ArrayView2<f64>, resp: &Responsibilities) -> Result<f64> {
        let d = self.dim() as f64;
        let t = self.components.len();
        if resp.ncomponents() != t || resp.nrows() != zhat.nrows() {
            return Err(Error::Shape(format!(
                "elbo shapes: resp {}x{} latents {}x{} components {t}",
                resp.nrows(),
                resp.ncomponents(),
                zhat.nrows(),
                zhat.ncols()
            )));
        }
        let sticks = self.expected_log_stick()?;
        let factors = self.component_factors()?;
        let gamma = resp.view();

        let masses: Vec<f64> = (0..t).map(|k| gamma.column(k).sum()).collect();

        // E[log p(z|y,φ)]
        let mut e_logp_z = 0.0;
        let dim = self.dim();
        let mut diff = vec![0.0; dim];
        for (k, comp) in self.components.iter().enumerate() {
            let llt = factors[k].1;
            e_logp_z += 0.5 * masses[k] * (llt - d / comp.beta - d * LN_2PI);
            let mut weighted_quad = 0.0;
            for (row, z) in zhat.rows().into_iter().enumerate() {
                let g = gamma[[row, k]];
                if g == 0.0 {
                    continue;
                }
                for j in 0..dim {
                    diff[j] = z[j] - comp.mean[j];
                }
                weighted_quad += g * comp.scale.quad_form(&diff);
            }
            e_logp_z -= 0.5 * comp.dof * weighted_quad;
        }
        finite(e_logp_z, "E[log p(z|y,phi)]")?;

        // E[log p(y|v)] and −E[log q(y)]
        let mut e_logp_y = 0.0;
        for k in 0..t {
            e_logp_y += masses[k] * sticks[k].e_log_pi;
        }
        finite(e_logp_y, "E[log p(y|v)]")?;
        let mut e_logq_y = 0.0;
        for g in gamma.iter() {
            if *g > 0.0 {
                e_logq_y += g * g.ln();
            }
        }
        finite(e_logq_y, "E[log q(y)]")?;

        // E[log p(v)] − E[log q(v)]
        let mut e_logp_v = 0.0;
        let mut e_logq_v = 0.0;
        for (k, comp) in self.components.iter().enumerate() {
            let (a, b) = comp.stick;
            e_logp_v += self.alpha.ln() + (self.alpha - 1.0) * sticks[k].e_log_one_minus_v;
            e_logq_v += ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
                + (a - 1.0) * sticks[k].e_log_v
                + (b - 1.0) * sticks[k].e_log_one_minus_v;
        }
        finite(e_logp_v, "E[log p(v)]")?;
        finite(e_logq_v, "E[log q(v)]")?;

        // E[log p(φ)] − E[log q(φ)]
        let prior = &self.prior;
        let mut e_logp_phi = t as f64 * prior.log_normalizer();
        let mut e_logq_phi = 0.0;
        for (k, comp) in self.components.iter().enumerate() {
            let llt = factors[k].1;
            let shift: Vec<f64> = comp
                .mean
                .iter()
                .zip(&prior.mean)
                .map(|(m, m0)| m - m0)
                .collect();
            e_logp_phi += 0.5
                * (d * (prior.beta / (2.0 * std::f64::consts::PI)).ln() + llt
                    - d * prior.beta / comp.beta
                    - prior.beta * comp.dof * comp.scale.quad_form(&shift));
            e_logp_phi += 0.5 * (prior.dof - d - 1.0) * llt
                - 0.5 * comp.dof * prior.scale_inv().trace_product(&comp.scale);

            let log_b = log_wishart_normalizer(&comp.scale, comp.dof)?;
            let wishart_entropy =
                -log_b - 0.5 * (comp.dof - d - 1.0) * llt + 0.5 * comp.dof * d;
            e_logq_phi += 0.5 * llt + 0.5 * d * (comp.beta / (2.0 * std::f64::consts::PI)).ln()
                - 0.5 * d
                - wishart_entropy;
        }
        finite(e_logp_phi, "E[log p(phi)]")?;
        finite(e_logq_phi, "E[log q(phi)]")?;

        Ok(e_logp_z + e_logp_y + e_logp_v + e_logp_phi - e_logq_y - e_logq_v - e_logq_phi)
    }

    /// Expected log joint contribution of data summarized only by raw
    /// moments: E[log p(z|y,φ)] + E[log p(y|v)] for observations whose
    /// responsibilities are frozen inside `stats` (aligned with
    /// `components`). This is what lets archived datasets keep contributing
    /// to the objective without raw latents.
    pub fn expected_loglik_from_stats(&self, stats: &[ClusterStats]) -> Result<f64> {
        if stats.len() != self.components.len() {
            return Err(Error::Shape(format!(
                "{} stat blocks for {} components",
                stats.len(),
                self.components.len()
            )));
        }
        let d = self.dim() as f64;
        let sticks = self.expected_log_stick()?;
        let mut acc = 0.0;
        for (k, comp) in self.components.iter().enumerate() {
            let s = &stats[k];
            if s.weight <= 0.0 {
                continue;
            }
            let f = cholesky_logdet_inverse(&comp.scale)?;
            let llt = self.log_lambda_tilde(comp, f.logdet)?;
            // Σ_n γ (ẑ−m)ᵀW(ẑ−m) = Tr(W s2) − 2 mᵀW s1 + N mᵀW m
            let w_s1 = comp.scale.mul_vec(&s.first);
            let m_w_s1: f64 = comp.mean.iter().zip(&w_s1).map(|(m, v)| m * v).sum();
            let quad = comp.scale.trace_product(&s.second) - 2.0 * m_w_s1
                + s.weight * comp.scale.quad_form(&comp.mean);
            acc += s.weight * (sticks[k].e_log_pi + 0.5 * (llt - d / comp.beta - d * LN_2PI))
                - 0.5 * comp.dof * quad;
        }
        finite(acc, "archived E[log p(z,y)]")?;
        Ok(acc)
    }

    /// The parameter-prior terms of the ELBO:
    /// E[log p(v)] − E[log q(v)] + E[log p(φ)] − E[log q(φ)].
    ///
    /// Together with [`MixtureState::expected_loglik_from_stats`] and the
    /// responsibility entropy this reassembles `dpmm_elbo` exactly, which is
    /// what lets the trainer monitor the objective from the ledger alone.
    pub fn prior_kl_terms(&self) -> Result<f64> {
        let d = self.dim() as f64;
        let t = self.components.len();
        let sticks = self.expected_log_stick()?;
        let mut e_logp_v = 0.0;
        let mut e_logq_v = 0.0;
        for (k, comp) in self.components.iter().enumerate() {
            let (a, b) = comp.stick;
            e_logp_v += self.alpha.ln() + (self.alpha - 1.0) * sticks[k].e_log_one_minus_v;
            e_logq_v += ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
                + (a - 1.0) * sticks[k].e_log_v
                + (b - 1.0) * sticks[k].e_log_one_minus_v;
        }
        let prior = &self.prior;
        let mut e_logp_phi = t as f64 * prior.log_normalizer();
        let mut e_logq_phi = 0.0;
        for comp in &self.components {
            let f = cholesky_logdet_inverse(&comp.scale)?;
            let llt = self.log_lambda_tilde(comp, f.logdet)?;
            let shift: Vec<f64> = comp
                .mean
                .iter()
                .zip(&prior.mean)
                .map(|(m, m0)| m - m0)
                .collect();
            e_logp_phi += 0.5
                * (d * (prior.beta / (2.0 * std::f64::consts::PI)).ln() + llt
                    - d * prior.beta / comp.beta
                    - prior.beta * comp.dof * comp.scale.quad_form(&shift));
            e_logp_phi += 0.5 * (prior.dof - d - 1.0) * llt
                - 0.5 * comp.dof * prior.scale_inv().trace_product(&comp.scale);
            let log_b = log_wishart_normalizer(&comp.scale, comp.dof)?;
            let wishart_entropy = -log_b - 0.5 * (comp.dof - d - 1.0) * llt + 0.5 * comp.dof * d;
            e_logq_phi += 0.5 * llt + 0.5 * d * (comp.beta / (2.0 * std::f64::consts::PI)).ln()
                - 0.5 * d
                - wishart_entropy;
        }
        let total = e_logp_v - e_logq_v + e_logp_phi - e_logq_phi;
        finite(total, "prior KL terms")?;
        Ok(total)
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(
        prior: NwPrior,
        alpha: f64,
        components: Vec<Component>,
        next_id: u64,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Contract("mixture must keep at least one component".into()));
        }
        Ok(Self { prior, alpha, components, next_id })
    }

    /// Argmax cluster index per observation; ties break toward the lowest
    /// component index.
    pub fn hard_assign(&self, zhat: ArrayView2<f64>) -> Result<Vec<usize>> {
        let resp = self.local_step(zhat)?;
        Ok(resp
            .0
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = row[0];
                for (k, v) in row.iter().enumerate().skip(1) {
                    if *v > best_v {
                        best = k;
                        best_v = *v;
                    }
                }
                best
            })
            .collect())
    }
}

fn finite(v: f64, term: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term })
    }
}

/// −E[log q(y)]: the categorical entropy of a responsibility matrix.
pub fn responsibility_entropy(resp: &Responsibilities) -> f64 {
    let mut acc = 0.0;
    for g in resp.0.iter() {
        if *g > 0.0 {
            acc -= g * g.ln();
        }
    }
    acc
}

/// Normal-Wishart posterior parameters for a single cluster's totals.
pub fn nw_posterior(prior: &NwPrior, totals: &ClusterTotals) -> Result<(Vec<f64>, f64, SymMatrix, f64)> {
    let d = prior.dim();
    if totals.is_empty() {
        return Ok((prior.mean.clone(), prior.beta, prior.scale.clone(), prior.dof));
    }
    let nk = totals.n;
    let beta = prior.beta + nk;
    let dof = prior.dof + nk;
    let mut mean = vec![0.0; d];
    for j in 0..d {
        mean[j] = (prior.beta * prior.mean[j] + nk * totals.mean[j]) / beta;
    }
    let mut w_inv = prior.scale_inv().clone();
    w_inv.add_assign(&totals.scatter.scaled(nk));
    let shift: Vec<f64> = totals
        .mean
        .iter()
        .zip(&prior.mean)
        .map(|(z, m)| z - m)
        .collect();
    w_inv.add_scaled_outer(&shift, prior.beta * nk / (prior.beta + nk));
    let scale = match cholesky_logdet_inverse(&w_inv) {
        Ok(f) => f.inverse,
        Err(Error::NotPositiveDefinite { .. }) => {
            let mut jittered = w_inv;
            jittered.add_diagonal(1e-8);
            cholesky_logdet_inverse(&jittered)?.inverse
        }
        Err(e) => return Err(e),
    };
    Ok((mean, beta, scale, dof))
}

/// Closed-form log marginal likelihood of the (weighted) observations
/// summarized by `stats` under the Normal-Wishart prior:
/// log p(X) = −(N·D/2)·log 2π + (D/2)(log β₀ − log β_N)
///            + log B(W₀,ν₀) − log B(W_N,ν_N).
pub fn nw_log_evidence(prior: &NwPrior, stats: &ClusterStats) -> Result<f64> {
    if stats.weight <= 0.0 {
        return Ok(0.0);
    }
    let totals = stats.to_totals();
    let (_, beta_n, scale_n, dof_n) = nw_posterior(prior, &totals)?;
    let d = prior.dim() as f64;
    Ok(-0.5 * stats.weight * d * LN_2PI + 0.5 * d * (prior.beta.ln() - beta_n.ln())
        + prior.log_normalizer()
        - log_wishart_normalizer(&scale_n, dof_n)?)
}
