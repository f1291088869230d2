//! Mini-batch training of the gain network with Adam.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bptt::{backward_through_time, BpttOptions, SequenceGradient};
use super::layers::{Gradients, Parameters};
use super::network::{run_bknet, run_closed_loop, FeatureScale, GainNetwork};
use crate::datagen::{mse_db, SequencePair};
use crate::error::{Error, Result};
use crate::quantizer::AdcBank;
use crate::ssmodel::StateSpaceModel;

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Truncation window of the reverse pass; `None` is full BPTT.
    pub bptt_window: Option<usize>,
    /// Worker threads for per-sequence gradients; results are summed in
    /// sequence order, so the outcome does not depend on this.
    pub threads: usize,
    /// Return the parameters with the best validation MSE instead of the
    /// final ones.
    pub keep_best: bool,
    /// Divide the state-difference features by their training-set RMS,
    /// measured once with the initial network and then frozen.
    pub standardize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda: 1e-4,
            batch_size: 8,
            epochs: 300,
            seed: 0,
            clip_norm: 10.0,
            bptt_window: Some(20),
            threads: 1,
            keep_best: false,
            standardize_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps_adam > 0.0
            && self.lambda >= 0.0
            && self.batch_size >= 1
            && self.clip_norm > 0.0
            && self.threads >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam step with bias correction. The gradient is rescaled to
/// `clip_norm` first when its global norm exceeds it. Returns the
/// pre-clipping norm.
pub fn adam_update(params: &mut Parameters, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
    if grads.0.len() != params.len() || state.m.0.len() != params.len() {
        return Err(Error::invalid("optimizer state does not match the parameters"));
    }
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .items
        .iter_mut()
        .zip(&grads.0)
        .zip(&mut state.m.0)
        .zip(&mut state.v.0)
    {
        for i in 0..g.len() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: GainNetwork,
    pub curve: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initial).
    pub selected_epoch: usize,
}

/// Everything a training run needs besides the network and hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub bank: &'a AdcBank,
    pub sigma0: &'a DMatrix<f64>,
    pub train: &'a [SequencePair],
    pub validation: &'a [SequencePair],
}

/// RMS of the state-difference features `net` sees in closed loop over
/// the training set, as multipliers. The all-zero first step is skipped.
pub fn measure_feature_scale(net: &GainNetwork, data: &TrainingData<'_>) -> Result<FeatureScale> {
    let m = net.config.state_dim;
    let (mut sq_tilde, mut sq_hat) = (DVector::zeros(m), DVector::zeros(m));
    let mut count = 0usize;
    for seq in data.train {
        let (_, tape) = run_closed_loop(net, data.model, data.bank, seq, data.sigma0, true)?;
        let tape = tape.expect("recorded");
        // step t sees the differences formed at step t − 1
        let mut before = &tape.x0;
        for step in tape.steps.iter().take(tape.steps.len().saturating_sub(1)) {
            sq_tilde += (&step.x_post - before).map(|v| v * v);
            sq_hat += (&step.x_post - &step.x_prior).map(|v| v * v);
            before = &step.x_post;
            count += 1;
        }
    }
    let rms = |v: DVector<f64>| v.map(|s| (s / count.max(1) as f64).sqrt());
    Ok(FeatureScale::from_rms(&rms(sq_tilde), &rms(sq_hat)))
}

/// Validation MSE in dB of `net` over `seqs`.
pub fn evaluate_bknet(
    net: &GainNetwork,
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    seqs: &[SequencePair],
    sigma0: &DMatrix<f64>,
) -> Result<f64> {
    let mut est = Vec::with_capacity(seqs.len());
    let mut truth = Vec::with_capacity(seqs.len());
    for s in seqs {
        est.push(run_bknet(net, model, bank, s, sigma0)?.estimates);
        truth.push(s.states.clone());
    }
    mse_db(&est, &truth)
}

fn batch_gradients(
    net: &GainNetwork,
    data: &TrainingData<'_>,
    batch: &[usize],
    cfg: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<Result<SequenceGradient>> {
    let opts = BpttOptions { window: cfg.bptt_window };
    let one = |&i: &usize| backward_through_time(net, data.model, data.bank, &data.train[i], data.sigma0, cfg.lambda, opts);
    match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(one).collect()),
        None => batch.iter().map(one).collect(),
    }
}

/// Train `net` on `data.train`. Quantization runs online inside the loop:
/// the dither threshold follows the network's own predictions.
pub fn train(mut net: GainNetwork, data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            net,
            curve,
            selected_epoch: 0,
        });
    }
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    if cfg.standardize_features && net.feature_scale().is_none() {
        let scale = measure_feature_scale(&net, data)?;
        log::info!("feature scale {:?} / {:?}", scale.dx_tilde.as_slice(), scale.dx_hat.as_slice());
        net.set_feature_scale(Some(scale))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&net.params);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch_gradients(&net, data, batch, cfg, pool.as_ref());
            let mut total = net.params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let g = r.map_err(|e| match e {
                    Error::Numeric { .. } => Error::Divergence {
                        epoch,
                        loss: f64::INFINITY,
                    },
                    other => other,
                })?;
                batch_loss += g.loss;
                total.add(&g.grads);
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() || batch_loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { epoch, loss: batch_loss });
            }
            total.scale(1.0 / n);
            adam_update(&mut net.params, &total, &mut adam, cfg).map_err(|_| Error::Divergence {
                epoch,
                loss: batch_loss,
            })?;
            epoch_loss += batch_loss * n;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_mse_db = if data.validation.is_empty() {
            f64::NAN
        } else {
            match evaluate_bknet(&net, data.model, data.bank, data.validation, data.sigma0) {
                Ok(v) => v,
                Err(Error::Numeric { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            }
        };
        log::info!("epoch {epoch}: train loss {train_loss:.5}, validation {val_mse_db:.2} dB");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_mse_db,
        });
        if cfg.keep_best && best.as_ref().is_none_or(|(b, _, _)| val_mse_db < *b) {
            best = Some((val_mse_db, epoch, net.params.clone()));
        }
    }
    let mut selected_epoch = cfg.epochs;
    if let Some((_, epoch, params)) = best {
        net.params = params;
        selected_epoch = epoch;
    }
    Ok(TrainOutcome {
        net,
        curve,
        selected_epoch,
    })
}

/// Loss curve as CSV `epoch,train_loss,val_mse_db`.
pub fn write_loss_curve(path: &std::path::Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["epoch", "train_loss", "val_mse_db"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in curve {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_mse_db.to_string()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
