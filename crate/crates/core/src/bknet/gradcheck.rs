//! Central-difference verification of the reverse pass.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bptt::{backward_through_time, loss_sequence, weighted_gradient, BpttOptions};
use super::layers::{Gradients, Parameters};
use super::network::{run_bknet, run_closed_loop, GainNetwork, NetworkConfig};
use crate::datagen::{generate_dataset, DatasetMeta, GenerationSpec, SequenceDataset, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::quantizer::AdcBank;
use crate::ssmodel::StateSpaceModel;

/// `x' = F·x + c·sin(x)`, `y = x`: a small smooth nonlinear model.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub f: DMatrix<f64>,
    pub curvature: f64,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl ToyModel {
    pub fn new(dim: usize, q2: f64, r2: f64) -> Self {
        let f = DMatrix::from_fn(dim, dim, |i, j| match (i, j) {
            _ if i == j => 0.95,
            _ if j == i + 1 => 0.2,
            _ if i == j + 1 => -0.15,
            _ => 0.0,
        });
        Self {
            f,
            curvature: 0.1,
            q: DMatrix::identity(dim, dim) * q2,
            r: DMatrix::identity(dim, dim) * r2,
        }
    }
}

impl StateSpaceModel for ToyModel {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn meas_dim(&self) -> usize {
        self.f.nrows()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x + x.map(f64::sin) * self.curvature
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.f + DMatrix::from_diagonal(&(x.map(f64::cos) * self.curvature))
    }
    fn jac_h(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub state_dim: usize,
    pub steps: usize,
    pub sequences: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            state_dim: 2,
            steps: 5,
            sequences: 1,
            seed: 17,
        }
    }
}

/// Everything needed to run a network on the toy problem.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub model: ToyModel,
    pub bank: AdcBank,
    pub dataset: SequenceDataset,
    pub sigma0: DMatrix<f64>,
    pub net_config: NetworkConfig,
}

pub fn toy_problem(spec: &ToySpec) -> Result<ToyProblem> {
    let m = spec.state_dim;
    let model = ToyModel::new(m, 0.01, 0.1);
    let bank = AdcBank::identical(m, 1, 0.1)?;
    let gen = GenerationSpec {
        count: spec.sequences,
        length: spec.steps,
        burn_in: 0,
        init_low: vec![-1.0; m],
        init_high: vec![1.0; m],
        init_estimate_std: 0.1,
        master_seed: spec.seed,
    };
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        model: "toy".into(),
        count: 0,
        length: 0,
        state_dim: m,
        meas_dim: m,
        dt: 1.0,
        q2: 0.01,
        adc_per_feature: 1,
        features: m,
        noise_variances: vec![0.1; m],
        generation: None,
    };
    let dataset = generate_dataset(&model, &gen, meta)?;
    Ok(ToyProblem {
        model,
        bank,
        dataset,
        sigma0: DMatrix::identity(m, m) * 0.1,
        net_config: NetworkConfig::new(m, m),
    })
}

/// Largest per-entry relative error between `analytic` and central
/// differences of `loss`. Entries where both magnitudes are below `floor`
/// are compared absolutely against `floor`.
pub fn check_gradients<L>(params: &Parameters, analytic: &Gradients, loss: L, eps: f64, floor: f64) -> Result<f64>
where
    L: Fn(&Parameters) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.scalar_count() {
        let v = params.flat_get(i);
        probe.flat_set(i, v + eps);
        let up = loss(&probe)?;
        probe.flat_set(i, v - eps);
        let down = loss(&probe)?;
        probe.flat_set(i, v);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.flat_get(i);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameters: usize,
}

/// Relative-error floor: gradients smaller than this are compared in
/// absolute terms, since central differences cannot resolve them.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compare the full-sequence reverse pass against central differences over
/// every parameter of `net` on the toy problem.
pub fn grad_check(net: &GainNetwork, toy: &ToyProblem, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let lambda = 1e-3;
    let mut worst: f64 = 0.0;
    for seq in &toy.dataset.sequences {
        let g = backward_through_time(net, &toy.model, &toy.bank, seq, &toy.sigma0, lambda, BpttOptions::default())?;
        let loss = |p: &Parameters| {
            let mut probe = net.clone();
            probe.params = p.clone();
            let run = run_bknet(&probe, &toy.model, &toy.bank, seq, &toy.sigma0)?;
            loss_sequence(&run.estimates, &seq.states, p, lambda)
        };
        worst = worst.max(check_gradients(&net.params, &g.grads, loss, eps, GRADCHECK_FLOOR)?);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        parameters: net.parameter_count(),
    })
}

/// Largest entrywise gap between the reverse pass's adjoint of each gain
/// `BG_t` (with `ℓ_t` alone as the loss) and the closed form
/// `2(BG_t·r*_t − Δx_t)·r*_tᵀ`, `Δx_t = x_t − x̂_{t|t−1}`.
pub fn gain_gradient_check(net: &GainNetwork, toy: &ToyProblem) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seq in &toy.dataset.sequences {
        let (_, tape) = run_closed_loop(net, &toy.model, &toy.bank, seq, &toy.sigma0, true)?;
        let tape = tape.expect("recording requested");
        for t in 0..seq.len() {
            let mut w = vec![0.0; seq.len()];
            w[t] = 1.0;
            let g = weighted_gradient(net, &toy.model, &toy.bank, seq, &toy.sigma0, &w, BpttOptions::default())?;
            let step = &tape.steps[t];
            let dx = seq.state(t) - &step.x_prior;
            let closed = (&step.gain * &step.r_star - dx) * step.r_star.transpose() * 2.0;
            worst = worst.max((&g.gain_adjoints[t] - closed).amax());
        }
    }
    Ok(worst)
}

/// A random parameter point: standard initialization plus biases uniform in
/// `±0.1`. Zero biases put every ReLU of the first step exactly on its kink,
/// because all features are zero there.
pub fn random_point_network(config: NetworkConfig, seed: u64) -> Result<GainNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GainNetwork::new(config, &mut rng)?;
    for p in net.params.items.iter_mut().filter(|p| p.is_vector) {
        p.value.apply(|v| *v = rng.random_range(-0.1..0.1));
    }
    Ok(net)
}

/// Random network on the default toy problem, checked with `eps`.
pub fn default_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let toy = toy_problem(&ToySpec::default())?;
    grad_check(&random_point_network(toy.net_config, seed)?, &toy, eps)
}
