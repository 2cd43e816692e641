//! Encoder and decoder as fully connected networks with hand-derived
//! backpropagation and Adam, plus the reparameterized latent sampler.
//!
//! Layers use tanh on hidden units and linear heads. The encoder's final
//! layer emits 2·D values (latent mean, log-variance); the decoder's emits
//! 2·d (observation mean, log-variance). Log-variance heads are
//! exponentiated, which keeps variances positive without clamping.

use crate::dpmm::{MixtureState, Responsibilities};
use crate::{Error, Result};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Layer {
    /// out × in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..a));
        Layer { w, b: Array1::zeros(fan_out) }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer { w: Array2::zeros((fan_out, fan_in)), b: Array1::zeros(fan_out) }
    }
}

/// Fully connected stack; tanh on all layers except the (linear) last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// tanh outputs of hidden layers, needed for the derivative.
    hidden_outputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Mlp {
    fn new<R: Rng>(widths: &[usize], out: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        for win in widths.windows(2) {
            layers.push(Layer::xavier(win[0], win[1], rng));
        }
        layers.push(Layer::xavier(*widths.last().unwrap(), out, rng));
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut hidden_outputs = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let mut pre = h.dot(&layer.w.t());
            pre += &layer.b;
            if i + 1 < n_layers {
                pre.mapv_inplace(f64::tanh);
                hidden_outputs.push(pre.clone());
            }
            h = pre;
        }
        ForwardCache { inputs, hidden_outputs, output: h }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the linear head output);
    /// returns per-layer parameter gradients and the gradient w.r.t. the
    /// network input.
    fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: Array2<f64>,
    ) -> (Vec<LayerGrad>, Array2<f64>) {
        let n_layers = self.layers.len();
        let mut grads = vec![LayerGrad::default(); n_layers];
        let mut delta = grad_out;
        for i in (0..n_layers).rev() {
            if i + 1 < n_layers {
                // Through tanh: multiply by 1 − h².
                let h = &cache.hidden_outputs[i];
                delta.zip_mut_with(h, |d, &a| *d *= 1.0 - a * a);
            }
            grads[i] = LayerGrad {
                w: delta.t().dot(&cache.inputs[i]),
                b: delta.sum_axis(Axis(0)),
            };
            delta = delta.dot(&self.layers[i].w);
        }
        (grads, delta)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerGrad {
    fn add_assign(&mut self, other: &LayerGrad) {
        self.w += &other.w;
        self.b += &other.b;
    }

    fn zeros_like(layer: &Layer) -> Self {
        LayerGrad { w: Array2::zeros(layer.w.raw_dim()), b: Array1::zeros(layer.b.raw_dim()) }
    }
}

/// Gradients shaped like `NetParams`.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub encoder: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        NetGrads {
            encoder: params.encoder.layers.iter().map(LayerGrad::zeros_like).collect(),
            decoder: params.decoder.layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: LayerGrad,
    v: LayerGrad,
}

impl Moments {
    fn zeros_like(layer: &Layer) -> Self {
        Moments { m: LayerGrad::zeros_like(layer), v: LayerGrad::zeros_like(layer) }
    }
}

/// Encoder and decoder parameters plus Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    enc_moments: Vec<Moments>,
    dec_moments: Vec<Moments>,
    step: u64,
    input_dim: usize,
    latent_dim: usize,
}

/// Per-observation latent Gaussian plus Monte Carlo draws.
///
/// `zhat` is exactly the average of the draws; straight out of `encode`
/// (no draws yet) it equals the mean, the L→∞ limit.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
    pub draws: Vec<Array2<f64>>,
    pub zhat: Array2<f64>,
}

impl LatentBatch {
    /// Reparameterized draws z⁽ˡ⁾ = μ + ε⁽ˡ⁾ ⊙ σ with ε ~ N(0, I);
    /// recomputes ẑ as their average.
    pub fn sample_latent<R: Rng>(&self, l_draws: usize, rng: &mut R) -> LatentBatch {
        assert!(l_draws >= 1, "at least one Monte Carlo draw");
        let sigma = self.var.mapv(f64::sqrt);
        let mut draws = Vec::with_capacity(l_draws);
        let mut zhat = Array2::zeros(self.mean.raw_dim());
        for _ in 0..l_draws {
            let eps = Array2::from_shape_fn(self.mean.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let z = &self.mean + &(&eps * &sigma);
            zhat += &z;
            draws.push(z);
        }
        zhat.mapv_inplace(|v| v / l_draws as f64);
        LatentBatch { mean: self.mean.clone(), var: self.var.clone(), draws, zhat }
    }
}

/// Loss value with its constituent terms. The terms are contributions to the
/// maximized objective; `loss` is its negation.
#[derive(Debug, Clone, Copy)]
pub struct ElboVaeLoss {
    pub loss: f64,
    pub mixture_fit: f64,
    pub reconstruction: f64,
    pub entropy: f64,
}

impl NetParams {
    /// Xavier-uniform weights, zero biases. The encoder stacks
    /// `input_dim → hidden… → 2·latent_dim`; the decoder mirrors it.
    ///
    /// The log-variance halves of both heads start at zero (σ² = 1 for every
    /// input): a randomly initialized variance head scales with the input
    /// magnitude and can hand some observations enormous starting variances,
    /// whose draw noise then kills decoder columns before training can shape
    /// them.
    pub fn new<R: Rng>(input_dim: usize, latent_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut enc_widths = vec![input_dim];
        enc_widths.extend_from_slice(hidden);
        let mut encoder = Mlp::new(&enc_widths, 2 * latent_dim, rng);
        let mut dec_widths = vec![latent_dim];
        dec_widths.extend(hidden.iter().rev());
        let mut decoder = Mlp::new(&dec_widths, 2 * input_dim, rng);
        zero_logvar_head(&mut encoder, latent_dim);
        zero_logvar_head(&mut decoder, input_dim);
        let enc_moments = encoder.layers.iter().map(Moments::zeros_like).collect();
        let dec_moments = decoder.layers.iter().map(Moments::zeros_like).collect();
        NetParams { encoder, decoder, enc_moments, dec_moments, step: 0, input_dim, latent_dim }
    }

    /// All-zero parameters: μ heads emit 0 and log-variance heads emit 0, so
    /// σ² = 1 everywhere.
    pub fn zeros(input_dim: usize, latent_dim: usize, hidden: &[usize]) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut params = Self::new(input_dim, latent_dim, hidden, &mut rng);
        for layer in params
            .encoder
            .layers
            .iter_mut()
            .chain(params.decoder.layers.iter_mut())
        {
            *layer = Layer::zeros(layer.w.ncols(), layer.w.nrows());
        }
        params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn adam_step_count(&self) -> u64 {
        self.step
    }

    /// Restores the Adam step counter when loading a checkpoint.
    pub fn set_adam_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Read access to the Adam moments as (m_w, m_b, v_w, v_b) per layer,
    /// encoder then decoder; used by checkpointing.
    pub fn adam_moments(&self) -> Vec<(&Array2<f64>, &Array1<f64>, &Array2<f64>, &Array1<f64>)> {
        self.enc_moments
            .iter()
            .chain(self.dec_moments.iter())
            .map(|mo| (&mo.m.w, &mo.m.b, &mo.v.w, &mo.v.b))
            .collect()
    }

    /// Counterpart of [`NetParams::adam_moments`] for checkpoint restore.
    pub fn restore_adam_moments(
        &mut self,
        moments: Vec<(Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>)>,
    ) -> Result<()> {
        let n_enc = self.enc_moments.len();
        if moments.len() != n_enc + self.dec_moments.len() {
            return Err(Error::Checkpoint("adam moment count mismatch".into()));
        }
        for (slot, (mw, mb, vw, vb)) in self
            .enc_moments
            .iter_mut()
            .chain(self.dec_moments.iter_mut())
            .zip(moments)
        {
            slot.m = LayerGrad { w: mw, b: mb };
            slot.v = LayerGrad { w: vw, b: vb };
        }
        Ok(())
    }

    /// Deterministic forward pass of the encoder; the log-variance head is
    /// exponentiated into a variance.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<LatentBatch> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "encode expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let cache = self.encoder.forward(x);
        let d = self.latent_dim;
        let mean = cache.output.slice(s![.., 0..d]).to_owned();
        let var = cache.output.slice(s![.., d..2 * d]).mapv(f64::exp);
        let zhat = mean.clone();
        Ok(LatentBatch { mean, var, draws: Vec::new(), zhat })
    }

    /// Decoder forward pass: observation mean and (positive) variance.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if z.ncols() != self.latent_dim {
            return Err(Error::Shape(format!(
                "decode expects {} columns, got {}",
                self.latent_dim,
                z.ncols()
            )));
        }
        let cache = self.decoder.forward(z);
        let d = self.input_dim;
        let mean = cache.output.slice(s![.., 0..d]).to_owned();
        let var = cache.output.slice(s![.., d..2 * d]).mapv(f64::exp);
        Ok((mean, var))
    }

    /// Negated variational objective for the network phase together with
    /// exact analytic gradients for every weight and bias, propagated through
    /// the reparameterized draws. The ε draws are taken once from `rng` and
    /// shared by the loss and the gradients.
    ///
    /// With `mixture` present the objective carries the latent-mixture fit
    /// terms, the Gaussian reconstruction term averaged over `l_draws`, and
    /// the encoder entropy; without it (reconstruction warmup) the mixture
    /// term is masked.
    pub fn elbo_vae_and_gradients<R: Rng>(
        &self,
        x: ArrayView2<f64>,
        mixture: Option<(&MixtureState, &Responsibilities)>,
        l_draws: usize,
        rng: &mut R,
    ) -> Result<(ElboVaeLoss, NetGrads)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "loss expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let n = x.nrows();
        let d_lat = self.latent_dim;
        if let Some((state, resp)) = mixture {
            resp.validate()?;
            if resp.nrows() != n || resp.ncomponents() != state.ncomponents() {
                return Err(Error::Shape(format!(
                    "responsibilities {}x{} for {} observations and {} components",
                    resp.nrows(),
                    resp.ncomponents(),
                    n,
                    state.ncomponents()
                )));
            }
            if state.dim() != d_lat {
                return Err(Error::Shape(format!(
                    "mixture dim {} vs latent dim {d_lat}",
                    state.dim()
                )));
            }
        }

        // Encoder forward; split heads.
        let enc_cache = self.encoder.forward(x);
        let mu = enc_cache.output.slice(s![.., 0..d_lat]).to_owned();
        let logvar = enc_cache.output.slice(s![.., d_lat..2 * d_lat]).to_owned();
        let sigma = logvar.mapv(|v| (0.5 * v).exp());

        // Frozen reparameterization draws.
        let eps: Vec<Array2<f64>> = (0..l_draws)
            .map(|_| Array2::from_shape_fn((n, d_lat), |_| rng.sample(StandardNormal)))
            .collect();
        let draws: Vec<Array2<f64>> = eps.iter().map(|e| &mu + &(e * &sigma)).collect();
        let mut zhat = Array2::zeros((n, d_lat));
        for z in &draws {
            zhat += z;
        }
        zhat.mapv_inplace(|v| v / l_draws as f64);
        let mut eps_bar = Array2::zeros((n, d_lat));
        for e in &eps {
            eps_bar += e;
        }
        eps_bar.mapv_inplace(|v| v / l_draws as f64);

        // Latent-mixture fit: −½ Σ_n Σ_k γ_nk ν_k (ẑ_n−m_k)ᵀ W_k (ẑ_n−m_k),
        // gradient −Σ_k γ_nk ν_k W_k (ẑ_n−m_k) per observation.
        let mut term_fit = 0.0;
        let mut g_zhat = Array2::<f64>::zeros((n, d_lat));
        if let Some((state, resp)) = mixture {
            let gamma = resp.view();
            let mut diff = vec![0.0; d_lat];
            for (k, comp) in state.components.iter().enumerate() {
                for row in 0..n {
                    let g = gamma[[row, k]];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d_lat {
                        diff[j] = zhat[[row, j]] - comp.mean[j];
                    }
                    term_fit -= 0.5 * g * comp.dof * comp.scale.quad_form(&diff);
                    let wd = comp.scale.mul_vec(&diff);
                    for j in 0..d_lat {
                        g_zhat[[row, j]] -= g * comp.dof * wd[j];
                    }
                }
            }
            if !term_fit.is_finite() {
                return Err(Error::NonFinite { term: "latent-mixture fit" });
            }
        }

        // Reconstruction term, one decoder pass per draw.
        let d_obs = self.input_dim;
        let inv_l = 1.0 / l_draws as f64;
        let mut term_rec = 0.0;
        let mut dec_grads: Vec<LayerGrad> =
            self.decoder.layers.iter().map(LayerGrad::zeros_like).collect();
        let mut g_draws: Vec<Array2<f64>> = Vec::with_capacity(l_draws);
        for z in &draws {
            let dec_cache = self.decoder.forward(z.view());
            let mut grad_out = Array2::<f64>::zeros((n, 2 * d_obs));
            {
                let out = &dec_cache.output;
                for row in 0..n {
                    for j in 0..d_obs {
                        let lv = out[[row, d_obs + j]];
                        let v = lv.exp();
                        let r = x[[row, j]] - out[[row, j]];
                        term_rec -= 0.5 * inv_l * (lv + r * r / v);
                        grad_out[[row, j]] = inv_l * r / v;
                        grad_out[[row, d_obs + j]] = -0.5 * inv_l * (1.0 - r * r / v);
                    }
                }
            }
            let (grads, g_z) = self.decoder.backward(&dec_cache, grad_out);
            for (acc, g) in dec_grads.iter_mut().zip(&grads) {
                acc.add_assign(g);
            }
            g_draws.push(g_z);
        }
        if !term_rec.is_finite() {
            return Err(Error::NonFinite { term: "reconstruction" });
        }

        // Encoder entropy ½ log Det(2πe Σ), summed per observation.
        let ln_2pi_e = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let term_ent: f64 = 0.5 * (logvar.sum() + (n * d_lat) as f64 * ln_2pi_e);
        if !term_ent.is_finite() {
            return Err(Error::NonFinite { term: "encoder entropy" });
        }

        // Head gradients: dẑ/dμ = I, dẑ/dlogvar = ε̄ ⊙ σ/2; per draw
        // dz⁽ˡ⁾/dμ = I, dz⁽ˡ⁾/dlogvar = ε⁽ˡ⁾ ⊙ σ/2; entropy adds ½ per
        // log-variance coordinate.
        let mut g_mu = g_zhat.clone();
        let mut g_lv = &g_zhat * &(&eps_bar * &sigma) * 0.5;
        for (e, g_z) in eps.iter().zip(&g_draws) {
            g_mu += g_z;
            g_lv += &(g_z * &(e * &sigma) * 0.5);
        }
        g_lv += 0.5;

        let mut grad_enc_out = Array2::<f64>::zeros((n, 2 * d_lat));
        grad_enc_out.slice_mut(s![.., 0..d_lat]).assign(&g_mu);
        grad_enc_out.slice_mut(s![.., d_lat..2 * d_lat]).assign(&g_lv);
        let (enc_grads, _) = self.encoder.backward(&enc_cache, grad_enc_out);

        // The objective is maximized; loss and gradients are its negation.
        let objective = term_fit + term_rec + term_ent;
        let negate = |grads: Vec<LayerGrad>| {
            grads
                .into_iter()
                .map(|mut g| {
                    g.w.mapv_inplace(|v| -v);
                    g.b.mapv_inplace(|v| -v);
                    g
                })
                .collect()
        };
        Ok((
            ElboVaeLoss {
                loss: -objective,
                mixture_fit: term_fit,
                reconstruction: term_rec,
                entropy: term_ent,
            },
            NetGrads { encoder: negate(enc_grads), decoder: negate(dec_grads) },
        ))
    }

    /// Autoencoder pretraining loss: the Gaussian reconstruction term through
    /// the deterministic mean path (z = μ(x;ψ); no draws, no entropy, no
    /// mixture), negated, with gradients. The encoder's variance head gets
    /// zero gradient here.
    ///
    /// Adding the encoder entropy without any prior-on-z term makes the
    /// objective unbounded (the decoder variance head can absorb a subset of
    /// points at a bounded log penalty while their encoder entropy grows
    /// without limit), so pretraining sticks to plain reconstruction.
    pub fn reconstruction_and_gradients(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<(f64, NetGrads)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "loss expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let n = x.nrows();
        let d_lat = self.latent_dim;
        let d_obs = self.input_dim;
        let enc_cache = self.encoder.forward(x);
        let mu = enc_cache.output.slice(s![.., 0..d_lat]).to_owned();
        let dec_cache = self.decoder.forward(mu.view());
        let mut term_rec = 0.0;
        let mut grad_out = Array2::<f64>::zeros((n, 2 * d_obs));
        {
            let out = &dec_cache.output;
            for row in 0..n {
                for j in 0..d_obs {
                    let lv = out[[row, d_obs + j]];
                    let v = lv.exp();
                    let r = x[[row, j]] - out[[row, j]];
                    term_rec -= 0.5 * (lv + r * r / v);
                    grad_out[[row, j]] = r / v;
                    grad_out[[row, d_obs + j]] = -0.5 * (1.0 - r * r / v);
                }
            }
        }
        if !term_rec.is_finite() {
            return Err(Error::NonFinite { term: "reconstruction" });
        }
        let (dec_grads, g_z) = self.decoder.backward(&dec_cache, grad_out);
        let mut grad_enc_out = Array2::<f64>::zeros((n, 2 * d_lat));
        grad_enc_out.slice_mut(s![.., 0..d_lat]).assign(&g_z);
        let (enc_grads, _) = self.encoder.backward(&enc_cache, grad_enc_out);
        let negate = |grads: Vec<LayerGrad>| {
            grads
                .into_iter()
                .map(|mut g| {
                    g.w.mapv_inplace(|v| -v);
                    g.b.mapv_inplace(|v| -v);
                    g
                })
                .collect()
        };
        Ok((-term_rec, NetGrads { encoder: negate(enc_grads), decoder: negate(dec_grads) }))
    }

    /// Standard Adam update with bias correction; increments the step
    /// counter.
    pub fn adam_step(
        &mut self,
        grads: &NetGrads,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if grads.encoder.len() != self.encoder.layers.len()
            || grads.decoder.len() != self.decoder.layers.len()
        {
            return Err(Error::Contract("gradient layout does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step;
        for (layer, (g, mo)) in self
            .encoder
            .layers
            .iter_mut()
            .zip(grads.encoder.iter().zip(self.enc_moments.iter_mut()))
            .chain(
                self.decoder
                    .layers
                    .iter_mut()
                    .zip(grads.decoder.iter().zip(self.dec_moments.iter_mut())),
            )
        {
            if g.w.raw_dim() != layer.w.raw_dim() || g.b.raw_dim() != layer.b.raw_dim() {
                return Err(Error::Contract("gradient shape does not match parameters".into()));
            }
            adam_update(&mut layer.w, &g.w, &mut mo.m.w, &mut mo.v.w, t, lr, beta1, beta2, eps);
            adam_update_1d(&mut layer.b, &g.b, &mut mo.m.b, &mut mo.v.b, t, lr, beta1, beta2, eps);
        }
        Ok(())
    }
}

/// Zeroes the log-variance half of a head layer (rows `out..2·out`).
fn zero_logvar_head(mlp: &mut Mlp, out: usize) {
    let head = mlp.layers.last_mut().expect("at least one layer");
    for row in out..2 * out {
        head.w.row_mut(row).fill(0.0);
        head.b[row] = 0.0;
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
    });
}

#[allow(clippy::too_many_arguments)]
fn adam_update_1d(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
    });
}
