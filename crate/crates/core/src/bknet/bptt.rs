//! Sequence loss and reverse-mode gradients through the unrolled recursion.
//!
//! The estimate feeds back into the next prior through `f`, into the input
//! features through the state differences, and into the dither threshold.
//! The threshold path goes through `sign(·)` and carries no gradient.

use nalgebra::{DMatrix, DVector};

use super::layers::{Gradients, Parameters};
use super::network::{run_closed_loop, GainNetwork, Hidden, Tape};
use crate::datagen::SequencePair;
use crate::error::{Error, Result};
use crate::quantizer::AdcBank;
use crate::ssmodel::StateSpaceModel;

/// `(1/T) Σ ‖x_t − x̂_{t|t}‖² + λ‖Θ‖²`.
pub fn loss_sequence(estimates: &DMatrix<f64>, truth: &DMatrix<f64>, params: &Parameters, lambda: f64) -> Result<f64> {
    if estimates.shape() != truth.shape() {
        return Err(Error::invalid("estimate and truth shapes differ"));
    }
    let steps = estimates.nrows().max(1) as f64;
    Ok((estimates - truth).norm_squared() / steps + lambda * params.norm_squared())
}

/// Output of [`backward_through_time`].
#[derive(Debug, Clone)]
pub struct SequenceGradient {
    /// Data term plus regularizer.
    pub loss: f64,
    pub grads: Gradients,
    /// Adjoint of each step's gain, `∂L/∂BG_t`.
    pub gain_adjoints: Vec<DMatrix<f64>>,
    pub estimates: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BpttOptions {
    /// Truncate the reverse pass every `window` steps.
    pub window: Option<usize>,
}

/// Run the network closed-loop over `seq` and return the loss and its exact
/// gradient with respect to every parameter.
pub fn backward_through_time(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    seq: &SequencePair,
    sigma0: &DMatrix<f64>,
    lambda: f64,
    opts: BpttOptions,
) -> Result<SequenceGradient> {
    let steps = seq.len();
    let weights = vec![1.0 / steps.max(1) as f64; steps];
    let mut out = weighted_gradient(net, model, bank, seq, sigma0, &weights, opts)?;
    out.loss += lambda * net.params.norm_squared();
    for (g, p) in out.grads.0.iter_mut().zip(&net.params.items) {
        *g += &p.value * (2.0 * lambda);
    }
    Ok(out)
}

/// Gradient of `Σ_t w_t ‖x_t − x̂_{t|t}‖²`.
pub(crate) fn weighted_gradient(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    seq: &SequencePair,
    sigma0: &DMatrix<f64>,
    weights: &[f64],
    opts: BpttOptions,
) -> Result<SequenceGradient> {
    let (run, tape) = run_closed_loop(net, model, bank, seq, sigma0, true)?;
    let tape = tape.expect("recording requested");
    let mut loss = 0.0;
    for (t, w) in weights.iter().enumerate() {
        loss += w * (seq.state(t) - &tape.steps[t].x_post).norm_squared();
    }
    let (grads, gain_adjoints) = reverse(net, model, &tape, &seq.states, weights, opts);
    Ok(SequenceGradient {
        loss,
        grads,
        gain_adjoints,
        estimates: run.estimates,
    })
}

fn reverse(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    tape: &Tape,
    truth: &DMatrix<f64>,
    weights: &[f64],
    opts: BpttOptions,
) -> (Gradients, Vec<DMatrix<f64>>) {
    let n = tape.steps.len();
    let m = tape.x0.len();
    let mut grads = net.params.zeros_like();
    // index t holds the adjoint of x̂_{t|t} (t = 0 is the fixed initial
    // estimate) and of x̂_{t|t−1}
    let mut g_post: Vec<DVector<f64>> = vec![DVector::zeros(m); n + 1];
    let mut g_prior: Vec<DVector<f64>> = vec![DVector::zeros(m); n + 1];
    for t in 1..=n {
        let err = &tape.steps[t - 1].x_post - truth.row(t - 1).transpose();
        g_post[t] = err * (2.0 * weights[t - 1]);
    }
    let mut g_hidden = Hidden {
        q: DVector::zeros(m * m),
        sigma: DVector::zeros(m * m),
        p: DVector::zeros(net.config.p_dim()),
    };
    let mut gain_adjoints = vec![DMatrix::zeros(0, 0); n];

    for t in (1..=n).rev() {
        let step = &tape.steps[t - 1];
        let gp = g_post[t].clone();
        let g_gain = &gp * step.r_star.transpose();
        g_prior[t] += &gp;
        let adj = net.backward_step(&step.cache, &g_gain, &g_hidden, &mut grads);
        gain_adjoints[t - 1] = g_gain;

        let cut = opts.window.is_some_and(|w| w > 0 && (t - 1) % w == 0);
        if t >= 2 && !cut {
            g_post[t - 1] += &adj.dx_tilde + &adj.dx_hat;
            g_prior[t - 1] -= &adj.dx_hat;
            if t >= 3 {
                g_post[t - 2] -= &adj.dx_tilde;
            }
            let x_prev = &tape.steps[t - 2].x_post;
            let jac = model.jac_f_exact(x_prev);
            g_post[t - 1] += jac.tr_mul(&g_prior[t]);
            g_hidden = adj.hidden;
        } else {
            g_hidden.q.fill(0.0);
            g_hidden.sigma.fill(0.0);
            g_hidden.p.fill(0.0);
        }
    }
    (grads, gain_adjoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bknet::gradcheck::{toy_problem, ToySpec};
    use crate::bknet::network::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        let params = Parameters::default();
        let x = DMatrix::from_element(4, 2, 1.0);
        assert_eq!(loss_sequence(&x, &x, &params, 0.0).unwrap(), 0.0);
        let e = DMatrix::from_fn(4, 2, |_, j| if j == 0 { 2.0 } else { 1.0 });
        assert_eq!(loss_sequence(&e, &x, &params, 0.0).unwrap(), 1.0);

        let net = GainNetwork::new(NetworkConfig::new(2, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let l = loss_sequence(&x, &x, &net.params, 0.3).unwrap();
        assert_eq!(l, 0.3 * net.params.norm_squared());
    }

    #[test]
    fn regularizer_gradient_is_two_lambda_theta() {
        let toy = toy_problem(&ToySpec::default()).unwrap();
        let net = GainNetwork::new(toy.net_config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let seq = &toy.dataset.sequences[0];
        let base = backward_through_time(&net, &toy.model, &toy.bank, seq, &toy.sigma0, 0.0, BpttOptions::default())
            .unwrap();
        let reg = backward_through_time(&net, &toy.model, &toy.bank, seq, &toy.sigma0, 0.25, BpttOptions::default())
            .unwrap();
        for ((a, b), p) in reg.grads.0.iter().zip(&base.grads.0).zip(&net.params.items) {
            assert!((a - b - &p.value * 0.5).amax() < 1e-14);
        }
    }

    #[test]
    fn truncation_window_changes_only_long_range_terms() {
        let toy = toy_problem(&ToySpec::default()).unwrap();
        let net = GainNetwork::new(toy.net_config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let seq = &toy.dataset.sequences[0];
        let full = backward_through_time(&net, &toy.model, &toy.bank, seq, &toy.sigma0, 0.0, BpttOptions::default())
            .unwrap();
        let long = BpttOptions { window: Some(100) };
        let same = backward_through_time(&net, &toy.model, &toy.bank, seq, &toy.sigma0, 0.0, long).unwrap();
        assert_eq!(full.grads, same.grads);
        let short = BpttOptions { window: Some(1) };
        let cut = backward_through_time(&net, &toy.model, &toy.bank, seq, &toy.sigma0, 0.0, short).unwrap();
        assert_ne!(full.grads, cut.grads);
        assert_eq!(full.loss, cut.loss);
    }
}
