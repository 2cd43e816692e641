//! Generative replay: synthesize pseudo-observations from the current model
//! at each dataset boundary and mix them into the network-update phase, so
//! the encoder/decoder keep seeing what earlier data looked like. Replay
//! never touches the sufficient-statistics ledger.

use crate::dpmm::MixtureState;
use crate::mlp::NetParams;
use crate::numerics::cholesky_logdet_inverse;
use crate::suffstats::ClusterId;
use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Generated observations with their source clusters. Regenerated at each
/// dataset boundary, never accumulated.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub x: Array2<f64>,
    pub sources: Vec<ClusterId>,
    pub checkpoint_tag: String,
    /// How many draws fell back to the posterior-mean precision ν·W because
    /// ν ≤ D+1 left the mode-based covariance undefined.
    pub precision_fallbacks: usize,
}

impl ReplayBuffer {
    pub fn empty(dim: usize) -> Self {
        Self {
            x: Array2::zeros((0, dim)),
            sources: Vec::new(),
            checkpoint_tag: String::new(),
            precision_fallbacks: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `count` pseudo-observations: cluster k with probability E[π_k]
/// (normalized over the truncation), latent z from the component's posterior
/// Gaussian with covariance ((ν−D−1)·W)⁻¹ (precision mode; falls back to
/// (ν·W)⁻¹ when ν ≤ D+1), then the decoder mean as the emitted observation.
pub fn generate_replay<R: Rng>(
    state: &MixtureState,
    net: &NetParams,
    count: usize,
    tag: impl Into<String>,
    rng: &mut R,
) -> Result<ReplayBuffer> {
    let d = state.dim();
    if net.latent_dim() != d {
        return Err(Error::Shape(format!(
            "decoder latent dim {} vs mixture dim {d}",
            net.latent_dim()
        )));
    }
    if count == 0 {
        return Ok(ReplayBuffer::empty(net.input_dim()));
    }
    let raw_pi = state.expected_pi();
    let total: f64 = raw_pi.iter().sum();
    let weights: Vec<f64> = raw_pi.iter().map(|w| w / total).collect();

    // Per-component sampling factors: z = m + Lᵀ⁻¹ ε / √c with W = L Lᵀ.
    let mut factors = Vec::with_capacity(state.ncomponents());
    let mut fallbacks = 0usize;
    for comp in &state.components {
        let c = if comp.dof > d as f64 + 1.0 {
            comp.dof - d as f64 - 1.0
        } else {
            fallbacks += 1;
            comp.dof
        };
        factors.push((cholesky_logdet_inverse(&comp.scale)?, c));
    }

    let mut z = Array2::zeros((count, d));
    let mut sources = Vec::with_capacity(count);
    for i in 0..count {
        let u: f64 = rng.random();
        let mut k = weights.len() - 1;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                k = j;
                break;
            }
        }
        let comp = &state.components[k];
        let (chol, c) = &factors[k];
        let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let spread = chol.solve_upper(&eps);
        let scale = 1.0 / c.sqrt();
        for j in 0..d {
            z[[i, j]] = comp.mean[j] + scale * spread[j];
        }
        sources.push(comp.id);
    }
    let (mean, _var) = net.decode(z.view())?;
    Ok(ReplayBuffer {
        x: mean,
        sources,
        checkpoint_tag: tag.into(),
        precision_fallbacks: fallbacks,
    })
}

/// Concatenates replay samples with a real mini-batch and shuffles the rows.
/// Replay participates only in network updates; callers must not feed the
/// result into sufficient-statistic commits.
pub fn mix_into_stream<R: Rng>(
    buffer: &ReplayBuffer,
    batch: ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !buffer.is_empty() && buffer.x.ncols() != batch.ncols() {
        return Err(Error::Shape(format!(
            "replay dim {} vs batch dim {}",
            buffer.x.ncols(),
            batch.ncols()
        )));
    }
    let total = batch.nrows() + buffer.len();
    let mut order: Vec<usize> = (0..total).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    let mut out = Array2::zeros((total, batch.ncols()));
    for (row, &src) in order.iter().enumerate() {
        if src < batch.nrows() {
            out.row_mut(row).assign(&batch.row(src));
        } else {
            out.row_mut(row).assign(&buffer.x.row(src - batch.nrows()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpmm::NwPrior;
    use crate::numerics::SymMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_component_state(dim: usize) -> MixtureState {
        MixtureState::init(NwPrior::default_for_dim(dim), 1.0).unwrap()
    }

    #[test]
    fn zero_count_gives_empty_buffer() {
        let state = one_component_state(2);
        let net = NetParams::zeros(3, 2, &[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let buf = generate_replay(&state, &net, 0, "t", &mut rng).unwrap();
        assert!(buf.is_empty());
        assert_eq!(buf.x.ncols(), 3);
    }

    #[test]
    fn identity_decoder_concentrates_at_component_mean() {
        // Single-layer decoder with W = [I; 0] reproduces z exactly; the
        // component sits at the prior mean 0 with a concentrated posterior,
        // so emitted samples concentrate near 0.
        let d = 2;
        let mut state = one_component_state(d);
        state.components[0].dof = 103.0;
        state.components[0].beta = 100.2;
        state.components[0].scale = SymMatrix::identity(d).scaled(0.01);
        // Posterior covariance ≈ ((ν−D−1) W)⁻¹ = I with these numbers.
        let mut net = NetParams::zeros(d, d, &[]);
        let head = &mut net.decoder.layers[0];
        for j in 0..d {
            head.w[[j, j]] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buf = generate_replay(&state, &net, 400, "t", &mut rng).unwrap();
        assert_eq!(buf.x.dim(), (400, d));
        let posterior_std = 1.0;
        for j in 0..d {
            let mean: f64 = buf.x.column(j).sum() / 400.0;
            assert!(mean.abs() < 3.0 * posterior_std / (400f64).sqrt() * 3.0, "mean {mean}");
        }
        // Norm of the average stays well inside the posterior spread.
        let mean_norm: f64 = (0..d)
            .map(|j| (buf.x.column(j).sum() / 400.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(mean_norm < 3.0 * posterior_std);
        assert_eq!(buf.precision_fallbacks, 0);
    }

    #[test]
    fn low_dof_falls_back_and_is_counted() {
        let d = 2;
        let mut state = one_component_state(d);
        state.components[0].dof = d as f64 + 1.0;
        let net = NetParams::zeros(d, d, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buf = generate_replay(&state, &net, 10, "t", &mut rng).unwrap();
        assert_eq!(buf.precision_fallbacks, 1);
        assert_eq!(buf.len(), 10);
    }

    #[test]
    fn cluster_frequencies_match_expected_pi() {
        let mut state = one_component_state(1);
        // Three components with distinct sticks.
        for _ in 0..2 {
            let id = state.allocate_id();
            let mut c = state.components[0].clone();
            c.id = id;
            state.components.push(c);
        }
        state.components[0].stick = (3.0, 1.0);
        state.components[1].stick = (2.0, 2.0);
        state.components[2].stick = (1.0, 1.0);
        let net = NetParams::zeros(1, 1, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = 10_000usize;
        let buf = generate_replay(&state, &net, r, "t", &mut rng).unwrap();

        let raw = state.expected_pi();
        let total: f64 = raw.iter().sum();
        for (k, comp) in state.components.iter().enumerate() {
            let p = raw[k] / total;
            let freq = buf.sources.iter().filter(|s| **s == comp.id).count() as f64 / r as f64;
            let se = (p * (1.0 - p) / r as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "component {k}: freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn mix_preserves_rows_and_counts() {
        let buffer = ReplayBuffer::empty(2);
        let batch = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mixed = mix_into_stream(&buffer, batch.view(), &mut rng).unwrap();
        assert_eq!(mixed.dim(), (5, 2));
        // Same multiset of rows.
        let mut seen: Vec<Vec<u64>> = mixed
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        let mut expect: Vec<Vec<u64>> = batch
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        expect.sort();
        assert_eq!(seen, expect);

        let buffer = ReplayBuffer {
            x: Array2::from_elem((100, 2), 9.0),
            sources: vec![ClusterId(0); 100],
            checkpoint_tag: "t".into(),
            precision_fallbacks: 0,
        };
        let batch = Array2::zeros((500, 2));
        let mixed = mix_into_stream(&buffer, batch.view(), &mut rng).unwrap();
        assert_eq!(mixed.nrows(), 600);

        let a = mix_into_stream(&buffer, batch.view(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = mix_into_stream(&buffer, batch.view(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);

        let bad = Array2::zeros((4, 3));
        assert!(mix_into_stream(&buffer, bad.view(), &mut rng).is_err());
    }
}
