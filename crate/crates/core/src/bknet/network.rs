//! The gain network: three GRUs tracking `Q`, `Σ` and `B*ᵀS*⁻¹`, plus the
//! fully connected heads producing the Bussgang gain and the posterior
//! covariance feature.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{concat, Activation, Dense, DenseCache, GruCache, GruCell, Gradients, Parameters};
use crate::datagen::SequencePair;
use crate::error::{Error, Result};
use crate::filters::{Diagnostics, FilterRun};
use crate::quantizer::AdcBank;
use crate::ssmodel::StateSpaceModel;

/// Hidden size of the `P` tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainShape {
    /// `(an)²`: `B*` treated as square in the reduced space.
    #[default]
    ReducedSquare,
    /// `n · an`, the literal shape of `vec(B*ᵀS*⁻¹)`.
    FullByReduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// State dimension `m`.
    pub state_dim: usize,
    /// Reduced observation dimension `an`.
    pub obs_dim: usize,
    /// Full ADC count `n`, only used by [`GainShape::FullByReduced`].
    pub full_obs_dim: usize,
    pub gain_shape: GainShape,
    /// Gain-head hidden width as a multiple of `m · an`.
    pub gain_hidden_factor: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            state_dim: 3,
            obs_dim: 3,
            full_obs_dim: 3,
            gain_shape: GainShape::ReducedSquare,
            gain_hidden_factor: 4,
        }
    }
}

impl NetworkConfig {
    pub fn new(state_dim: usize, obs_dim: usize) -> Self {
        Self {
            state_dim,
            obs_dim,
            full_obs_dim: obs_dim,
            ..Self::default()
        }
    }

    pub fn p_dim(&self) -> usize {
        match self.gain_shape {
            GainShape::ReducedSquare => self.obs_dim * self.obs_dim,
            GainShape::FullByReduced => self.full_obs_dim * self.obs_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 || self.full_obs_dim < self.obs_dim || self.gain_hidden_factor == 0 {
            return Err(Error::invalid(format!("invalid network dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Network inputs at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// `x̂_{t−1|t−1} − x̂_{t−2|t−2}`
    pub dx_tilde: DVector<f64>,
    /// `x̂_{t−1|t−1} − x̂_{t−1|t−2}`
    pub dx_hat: DVector<f64>,
    /// `r*_t − r*_{t−1}`
    pub dr: DVector<f64>,
    /// `r*_t − r̂*_{t|t−1} = r*_t`
    pub dr_hat: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hidden {
    pub q: DVector<f64>,
    pub sigma: DVector<f64>,
    pub p: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `m × an` gain.
    pub gain: DMatrix<f64>,
    pub sigma_post: DMatrix<f64>,
    pub hidden: Hidden,
}

#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    embed_q: DenseCache,
    gru_q: GruCache,
    embed_sigma: DenseCache,
    gru_sigma: GruCache,
    embed_sigma_to_p: DenseCache,
    embed_res: DenseCache,
    gru_p: GruCache,
    gain_hidden: DenseCache,
    gain_out: DenseCache,
    sigma_head1: DenseCache,
    sigma_head2: DenseCache,
}

/// Adjoints flowing out of one step's backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepAdjoint {
    pub dx_tilde: DVector<f64>,
    pub dx_hat: DVector<f64>,
    pub hidden: Hidden,
}

/// Fixed per-component multipliers for the two state-difference features.
/// Not trained; set once from training-set statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScale {
    pub dx_tilde: DVector<f64>,
    pub dx_hat: DVector<f64>,
}

impl FeatureScale {
    /// Multipliers `1/rms` per component; components with no spread keep 1.
    pub fn from_rms(rms_tilde: &DVector<f64>, rms_hat: &DVector<f64>) -> Self {
        let inv = |v: &DVector<f64>| v.map(|r| if r > 1e-12 && r.is_finite() { 1.0 / r } else { 1.0 });
        Self {
            dx_tilde: inv(rms_tilde),
            dx_hat: inv(rms_hat),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GainNetwork {
    pub config: NetworkConfig,
    pub params: Parameters,
    feature_scale: Option<FeatureScale>,
    embed_q: Dense,
    gru_q: GruCell,
    embed_sigma: Dense,
    gru_sigma: GruCell,
    embed_sigma_to_p: Dense,
    embed_res: Dense,
    gru_p: GruCell,
    gain_hidden: Dense,
    gain_out: Dense,
    sigma_head1: Dense,
    sigma_head2: Dense,
}

impl GainNetwork {
    /// Random initialization: weights uniform in `±1/√fan_in`, zero biases.
    pub fn new(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Every parameter zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        Self::build::<ChaCha8Rng>(config, None)
    }

    fn build<R: Rng>(config: NetworkConfig, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let m = config.state_dim;
        let k = config.obs_dim;
        let m2 = m * m;
        let k2 = k * k;
        let pd = config.p_dim();
        let mk = m * k;
        let gh = config.gain_hidden_factor * mk;
        let mut params = Parameters::default();
        let p = &mut params;
        use Activation::{Linear, Relu};
        let embed_q = Dense::new(p, "embed_q", m, m2, Relu, rng.as_deref_mut());
        let gru_q = GruCell::new(p, "gru_q", m2, m2, rng.as_deref_mut());
        let embed_sigma = Dense::new(p, "embed_sigma", m2 + m, m2, Relu, rng.as_deref_mut());
        let gru_sigma = GruCell::new(p, "gru_sigma", 2 * m2, m2, rng.as_deref_mut());
        let embed_sigma_to_p = Dense::new(p, "embed_sigma_to_p", m2, k2, Relu, rng.as_deref_mut());
        let embed_res = Dense::new(p, "embed_res", 2 * k, k2, Relu, rng.as_deref_mut());
        let gru_p = GruCell::new(p, "gru_p", 2 * k2, pd, rng.as_deref_mut());
        let gain_hidden = Dense::new(p, "gain_hidden", m2 + pd, gh, Relu, rng.as_deref_mut());
        let gain_out = Dense::new(p, "gain_out", gh, mk, Linear, rng.as_deref_mut());
        let sigma_head1 = Dense::new(p, "sigma_head1", mk + pd, m2, Relu, rng.as_deref_mut());
        let sigma_head2 = Dense::new(p, "sigma_head2", 2 * m2, m2, Linear, rng.as_deref_mut());
        let net = Self {
            config,
            params,
            feature_scale: None,
            embed_q,
            gru_q,
            embed_sigma,
            gru_sigma,
            embed_sigma_to_p,
            embed_res,
            gru_p,
            gain_hidden,
            gain_out,
            sigma_head1,
            sigma_head2,
        };
        log::debug!("gain network built with {} parameters", net.params.scalar_count());
        Ok(net)
    }

    pub fn feature_scale(&self) -> Option<&FeatureScale> {
        self.feature_scale.as_ref()
    }

    pub fn set_feature_scale(&mut self, scale: Option<FeatureScale>) -> Result<()> {
        if let Some(s) = &scale {
            let m = self.config.state_dim;
            let ok = |v: &DVector<f64>| v.len() == m && v.iter().all(|x| x.is_finite() && *x > 0.0);
            if !ok(&s.dx_tilde) || !ok(&s.dx_hat) {
                return Err(Error::invalid("feature scale must hold m positive finite entries per feature"));
            }
        }
        self.feature_scale = scale;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Index of the gain head's output bias, whose value is the emitted gain
    /// (row-major) when every weight is zero.
    pub fn gain_bias_id(&self) -> usize {
        self.gain_out.bias_id()
    }

    /// `h_Q = 0`, `h_Σ = vec(Σ_{0|0})`, `h_P = 0`.
    pub fn initial_hidden(&self, sigma0: &DMatrix<f64>) -> Result<Hidden> {
        let m = self.config.state_dim;
        if sigma0.shape() != (m, m) {
            return Err(Error::invalid("initial covariance does not match the state dimension"));
        }
        Ok(Hidden {
            q: DVector::zeros(m * m),
            sigma: DVector::from_column_slice(sigma0.as_slice()),
            p: DVector::zeros(self.config.p_dim()),
        })
    }

    pub fn zero_features(&self) -> Features {
        let m = self.config.state_dim;
        let k = self.config.obs_dim;
        Features {
            dx_tilde: DVector::zeros(m),
            dx_hat: DVector::zeros(m),
            dr: DVector::zeros(k),
            dr_hat: DVector::zeros(k),
        }
    }

    /// One pass through the network.
    pub fn forward(&self, features: &Features, hidden: &Hidden) -> Result<StepOutput> {
        self.forward_cached(features, hidden).map(|(out, _)| out)
    }

    pub(crate) fn forward_cached(&self, ft: &Features, hidden: &Hidden) -> Result<(StepOutput, StepCache)> {
        let scaled;
        let ft = match &self.feature_scale {
            Some(s) => {
                scaled = Features {
                    dx_tilde: ft.dx_tilde.component_mul(&s.dx_tilde),
                    dx_hat: ft.dx_hat.component_mul(&s.dx_hat),
                    dr: ft.dr.clone(),
                    dr_hat: ft.dr_hat.clone(),
                };
                &scaled
            }
            None => ft,
        };
        let p = &self.params;
        let m = self.config.state_dim;
        let k = self.config.obs_dim;
        let (e_q, c_eq) = self.embed_q.forward(p, &ft.dx_tilde)?;
        let (h_q, c_gq) = self.gru_q.forward(p, &e_q, &hidden.q)?;
        let (e_s, c_es) = self.embed_sigma.forward(p, &concat(&[&h_q, &ft.dx_hat]))?;
        let (sp, c_gs) = self.gru_sigma.forward(p, &concat(&[&e_s, &h_q]), &hidden.sigma)?;
        let (e_sp, c_esp) = self.embed_sigma_to_p.forward(p, &sp)?;
        let (e_r, c_er) = self.embed_res.forward(p, &concat(&[&ft.dr, &ft.dr_hat]))?;
        let (h_p, c_gp) = self.gru_p.forward(p, &concat(&[&e_sp, &e_r]), &hidden.p)?;
        let (g1, c_g1) = self.gain_hidden.forward(p, &concat(&[&sp, &h_p]))?;
        let (bg, c_g2) = self.gain_out.forward(p, &g1)?;
        let (u1, c_s1) = self.sigma_head1.forward(p, &concat(&[&bg, &h_p]))?;
        let (s_post, c_s2) = self.sigma_head2.forward(p, &concat(&[&u1, &sp]))?;
        let out = StepOutput {
            gain: DMatrix::from_row_slice(m, k, bg.as_slice()),
            sigma_post: DMatrix::from_column_slice(m, m, s_post.as_slice()),
            hidden: Hidden {
                q: h_q,
                sigma: s_post,
                p: h_p,
            },
        };
        let cache = StepCache {
            embed_q: c_eq,
            gru_q: c_gq,
            embed_sigma: c_es,
            gru_sigma: c_gs,
            embed_sigma_to_p: c_esp,
            embed_res: c_er,
            gru_p: c_gp,
            gain_hidden: c_g1,
            gain_out: c_g2,
            sigma_head1: c_s1,
            sigma_head2: c_s2,
        };
        Ok((out, cache))
    }

    /// Reverse pass of one step. `g_gain` is the adjoint of the gain (m × an),
    /// `g_next` the adjoints of the three emitted hidden states.
    pub(crate) fn backward_step(
        &self,
        cache: &StepCache,
        g_gain: &DMatrix<f64>,
        g_next: &Hidden,
        grads: &mut Gradients,
    ) -> StepAdjoint {
        let p = &self.params;
        let m = self.config.state_dim;
        let m2 = m * m;
        let mk = m * self.config.obs_dim;
        let k2 = self.config.obs_dim * self.config.obs_dim;
        let pd = self.config.p_dim();

        let g_in_s2 = self.sigma_head2.backward(p, &cache.sigma_head2, &g_next.sigma, grads);
        let g_u1 = g_in_s2.rows(0, m2).into_owned();
        let mut g_sp = g_in_s2.rows(m2, m2).into_owned();

        let g_in_s1 = self.sigma_head1.backward(p, &cache.sigma_head1, &g_u1, grads);
        // gain adjoint in row-major vec order
        let mut g_bg = DVector::from_row_slice(g_gain.transpose().as_slice());
        g_bg += g_in_s1.rows(0, mk);
        let mut g_hp = &g_next.p + g_in_s1.rows(mk, pd);

        let g_g1 = self.gain_out.backward(p, &cache.gain_out, &g_bg, grads);
        let g_in_g = self.gain_hidden.backward(p, &cache.gain_hidden, &g_g1, grads);
        g_sp += g_in_g.rows(0, m2);
        g_hp += g_in_g.rows(m2, pd);

        let (g_in_p, g_hp_prev) = self.gru_p.backward(p, &cache.gru_p, &g_hp, grads);
        self.embed_res.backward(p, &cache.embed_res, &g_in_p.rows(k2, k2).into_owned(), grads);
        g_sp += self.embed_sigma_to_p.backward(p, &cache.embed_sigma_to_p, &g_in_p.rows(0, k2).into_owned(), grads);

        let (g_in_s, g_hs_prev) = self.gru_sigma.backward(p, &cache.gru_sigma, &g_sp, grads);
        let mut g_hq = &g_next.q + g_in_s.rows(m2, m2);
        let g_in_es = self.embed_sigma.backward(p, &cache.embed_sigma, &g_in_s.rows(0, m2).into_owned(), grads);
        g_hq += g_in_es.rows(0, m2);
        let g_dx_hat = g_in_es.rows(m2, m).into_owned();

        let (g_eq, g_hq_prev) = self.gru_q.backward(p, &cache.gru_q, &g_hq, grads);
        let mut g_dx_tilde = self.embed_q.backward(p, &cache.embed_q, &g_eq, grads);
        let mut g_dx_hat = g_dx_hat;
        if let Some(s) = &self.feature_scale {
            g_dx_tilde.component_mul_assign(&s.dx_tilde);
            g_dx_hat.component_mul_assign(&s.dx_hat);
        }
        StepAdjoint {
            dx_tilde: g_dx_tilde,
            dx_hat: g_dx_hat,
            hidden: Hidden {
                q: g_hq_prev,
                sigma: g_hs_prev,
                p: g_hp_prev,
            },
        }
    }
}

/// Recursion state of a BKNet filter between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BknetState {
    /// `x̂_{t|t}`
    pub x_post: DVector<f64>,
    /// `x̂_{t−1|t−1}`, absent at `t = 0`.
    pub x_post_prev: Option<DVector<f64>>,
    /// `x̂_{t|t−1}`, absent at `t = 0`.
    pub x_prior_prev: Option<DVector<f64>>,
    /// `r*_t`, zero at `t = 0`.
    pub r_prev: DVector<f64>,
    pub hidden: Hidden,
    pub sigma_post: DMatrix<f64>,
    pub t: usize,
}

impl BknetState {
    pub fn new(net: &GainNetwork, x0: DVector<f64>, sigma0: &DMatrix<f64>) -> Result<Self> {
        if x0.len() != net.config.state_dim {
            return Err(Error::invalid("initial estimate does not match the network"));
        }
        Ok(Self {
            x_post: x0,
            x_post_prev: None,
            x_prior_prev: None,
            r_prev: DVector::zeros(net.config.obs_dim),
            hidden: net.initial_hidden(sigma0)?,
            sigma_post: sigma0.clone(),
            t: 0,
        })
    }

    pub fn features(&self, r_star: &DVector<f64>) -> Features {
        let m = self.x_post.len();
        Features {
            dx_tilde: self
                .x_post_prev
                .as_ref()
                .map_or_else(|| DVector::zeros(m), |p| &self.x_post - p),
            dx_hat: self
                .x_prior_prev
                .as_ref()
                .map_or_else(|| DVector::zeros(m), |p| &self.x_post - p),
            dr: r_star - &self.r_prev,
            dr_hat: r_star.clone(),
        }
    }
}

/// `x̂_{t|t} = f(x̂_{t−1|t−1}) + BG_t · r*_t`. Only `f` of `model` is used.
pub fn bknet_step(
    state: &mut BknetState,
    r_star: &DVector<f64>,
    model: &dyn StateSpaceModel,
    net: &GainNetwork,
) -> Result<()> {
    bknet_step_cached(state, r_star, model, net).map(|_| ())
}

pub(crate) fn bknet_step_cached(
    state: &mut BknetState,
    r_star: &DVector<f64>,
    model: &dyn StateSpaceModel,
    net: &GainNetwork,
) -> Result<(StepOutput, StepCache, DVector<f64>)> {
    if r_star.len() != net.config.obs_dim {
        return Err(Error::invalid("r* does not match the network's observation size"));
    }
    let x_prior = model.f(&state.x_post);
    let features = state.features(r_star);
    let (out, cache) = net.forward_cached(&features, &state.hidden)?;
    let x_post = &x_prior + &out.gain * r_star;
    if !x_post.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite BKNet estimate").at_step(state.t + 1));
    }
    let prev = std::mem::replace(&mut state.x_post, x_post);
    state.x_post_prev = Some(prev);
    state.x_prior_prev = Some(x_prior.clone());
    state.r_prev = r_star.clone();
    state.hidden = out.hidden.clone();
    state.sigma_post = out.sigma_post.clone();
    state.t += 1;
    Ok((out, cache, x_prior))
}

/// One recorded step of a closed-loop run.
#[derive(Debug, Clone)]
pub(crate) struct TapeStep {
    pub x_prior: DVector<f64>,
    pub x_post: DVector<f64>,
    pub r_star: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub cache: StepCache,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub x0: DVector<f64>,
    pub steps: Vec<TapeStep>,
}

/// Closed-loop pass: dither from the network's own prediction, project,
/// update. `record` keeps the per-step caches for the reverse pass.
pub(crate) fn run_closed_loop(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    seq: &SequencePair,
    sigma0: &DMatrix<f64>,
    record: bool,
) -> Result<(FilterRun, Option<Tape>)> {
    let m = net.config.state_dim;
    if model.state_dim() != m || model.meas_dim() != bank.len() || seq.measurements.ncols() != bank.len() {
        return Err(Error::invalid("model, ADC bank, sequence and network dimensions disagree"));
    }
    let projection = bank.projection();
    if projection.reduced_dim() != net.config.obs_dim {
        return Err(Error::invalid("network observation size does not match the reduced ADC dimension"));
    }
    let mut bank = bank.clone();
    let mut state = BknetState::new(net, seq.initial_estimate.clone(), sigma0)?;
    let steps = seq.len();
    let mut estimates = DMatrix::zeros(steps, m);
    let mut covariances = Vec::with_capacity(steps);
    let mut tape = record.then(|| Tape {
        x0: seq.initial_estimate.clone(),
        steps: Vec::with_capacity(steps),
    });
    for t in 0..steps {
        let x_prior = model.f(&state.x_post);
        let y_prior = model.h(&x_prior);
        let r = bank.observe(&seq.measurement(t), &y_prior).map_err(|e| e.at_step(t + 1))?;
        let r_star = projection.apply(&r)?;
        let (out, cache, x_prior) = bknet_step_cached(&mut state, &r_star, model, net)?;
        estimates.set_row(t, &state.x_post.transpose());
        covariances.push(out.sigma_post);
        if let Some(tape) = tape.as_mut() {
            tape.steps.push(TapeStep {
                x_prior,
                x_post: state.x_post.clone(),
                r_star,
                gain: out.gain,
                cache,
            });
        }
    }
    let run = FilterRun {
        estimates,
        covariances,
        diagnostics: Diagnostics {
            steps,
            ..Diagnostics::default()
        },
    };
    Ok((run, tape))
}

/// Run a trained network over one sequence.
pub fn run_bknet(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    seq: &SequencePair,
    sigma0: &DMatrix<f64>,
) -> Result<FilterRun> {
    run_closed_loop(net, model, bank, seq, sigma0, false).map(|(run, _)| run)
}
