//! EKF baseline and the two model-based 1-bit filters (BKF, rBKF).
//!
//! Every step is a pure function of its inputs. [`run_filter`] drives the
//! closed loop: predict, set the dither threshold to the predicted
//! measurement, quantize, update.

use std::f64::consts::{FRAC_2_PI, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::SequencePair;
use crate::error::{Error, Result};
use crate::linalg::{
    all_finite_mat, all_finite_vec, asymmetry, condition_number_sym, min_eigenvalue, solve_spd_jittered, symmetrize,
};
use crate::quantizer::{AdcBank, ProjectionOperator};
use crate::ssmodel::StateSpaceModel;

/// Posterior symmetry tolerance checked after every step.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Posterior PSD tolerance, relative to the trace.
pub const PSD_REL_TOL: f64 = 1e-9;
/// EKF refuses innovation covariances with a larger condition number.
pub const MAX_CONDITION: f64 = 1e12;

/// Posterior mean and covariance at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub t: usize,
}

impl FilterState {
    pub fn new(x: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.shape() != (x.len(), x.len()) {
            return Err(Error::invalid("covariance shape does not match the state"));
        }
        Ok(Self { x, sigma, t: 0 })
    }

    /// Σ symmetric within [`SYMMETRY_TOL`] and PSD within `-PSD_REL_TOL·trace`.
    pub fn covariance_ok(&self) -> bool {
        all_finite_mat(&self.sigma)
            && asymmetry(&self.sigma) <= SYMMETRY_TOL
            && min_eigenvalue(&self.sigma) >= -PSD_REL_TOL * self.sigma.trace().abs()
    }
}

/// One prediction step's outputs, shared by the BKF and rBKF updates.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    pub x_prior: DVector<f64>,
    pub sigma_prior: DMatrix<f64>,
    pub y_prior: DVector<f64>,
    /// Measurement error covariance `H Σ Hᵀ + R`.
    pub p: DMatrix<f64>,
    /// Diagonal of `D = diag(P)^{-1/2}`.
    pub d: DVector<f64>,
    /// Diagonal of the Bussgang matrix `B = √(2/π)·D`.
    pub b: DVector<f64>,
    /// Quantized-observation covariance from the arcsin law. Empty when the
    /// prior came from [`rbkf_predict`] with a non-trivial projection.
    pub s: DMatrix<f64>,
    /// `A·S·Aᵀ`, filled in by [`rbkf_predict`].
    pub s_star: Option<DMatrix<f64>>,
    /// Measurement Jacobian at `x_prior`.
    pub h: DMatrix<f64>,
    /// Transition Jacobian used for the covariance prediction.
    pub f: DMatrix<f64>,
    /// Correlations clamped into [-1, 1] while forming `s`.
    pub clamps: usize,
    pub t: usize,
}

impl PriorBundle {
    /// `B·H`.
    pub fn bh(&self) -> DMatrix<f64> {
        let mut bh = self.h.clone();
        for (i, mut row) in bh.row_iter_mut().enumerate() {
            row *= self.b[i];
        }
        bh
    }
}

/// Counters accumulated over a filter run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub clamps: usize,
    pub jitter_events: usize,
    pub symmetry_violations: usize,
    pub psd_violations: usize,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.steps += other.steps;
        self.clamps += other.clamps;
        self.jitter_events += other.jitter_events;
        self.symmetry_violations += other.symmetry_violations;
        self.psd_violations += other.psd_violations;
    }

    /// Count one step and any symmetry or PSD violation in `state`.
    pub fn check(&mut self, state: &FilterState) {
        self.steps += 1;
        if !all_finite_mat(&state.sigma) || asymmetry(&state.sigma) > SYMMETRY_TOL {
            self.symmetry_violations += 1;
        }
        if !all_finite_mat(&state.sigma) || min_eigenvalue(&state.sigma) < -PSD_REL_TOL * state.sigma.trace().abs() {
            self.psd_violations += 1;
        }
    }
}

struct Moments {
    x_prior: DVector<f64>,
    sigma_prior: DMatrix<f64>,
    y_prior: DVector<f64>,
    p: DMatrix<f64>,
    h: DMatrix<f64>,
    f: DMatrix<f64>,
}

fn predict_moments(state: &FilterState, model: &dyn StateSpaceModel) -> Result<Moments> {
    if state.x.len() != model.state_dim() {
        return Err(Error::invalid("state dimension does not match the model"));
    }
    let x_prior = model.f(&state.x);
    let f = model.jac_f(&state.x);
    let mut sigma_prior = &f * &state.sigma * f.transpose() + model.process_noise();
    symmetrize(&mut sigma_prior);
    let y_prior = model.h(&x_prior);
    let h = model.jac_h(&x_prior);
    let mut p = &h * &sigma_prior * h.transpose() + model.measurement_noise();
    symmetrize(&mut p);
    if !all_finite_vec(&x_prior) || !all_finite_mat(&sigma_prior) || !all_finite_mat(&p) {
        return Err(Error::numeric("prediction produced non-finite moments"));
    }
    Ok(Moments {
        x_prior,
        sigma_prior,
        y_prior,
        p,
        h,
        f,
    })
}

/// Standard EKF predict/update on an ideal measurement `y`.
pub fn ekf_step(state: &FilterState, y: &DVector<f64>, model: &dyn StateSpaceModel) -> Result<FilterState> {
    let m = predict_moments(state, model).map_err(|e| e.at_step(state.t + 1))?;
    ekf_update(m, y, state.t + 1)
}

fn ekf_update(m: Moments, y: &DVector<f64>, t: usize) -> Result<FilterState> {
    if y.len() != m.y_prior.len() {
        return Err(Error::invalid("measurement length does not match the model"));
    }
    let cond = condition_number_sym(&m.p);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numeric {
            step: Some(t),
            msg: format!("innovation covariance is singular (condition number {cond:e})"),
        });
    }
    let chol = m.p.clone().cholesky().ok_or(Error::Numeric {
        step: Some(t),
        msg: "innovation covariance is not positive definite".into(),
    })?;
    // KG = Σ Hᵀ P⁻¹  ⇒  KGᵀ = P⁻¹ H Σ
    let u = &m.h * &m.sigma_prior;
    let kg_t = chol.solve(&u);
    let x = &m.x_prior + kg_t.transpose() * (y - &m.y_prior);
    let mut sigma = &m.sigma_prior - kg_t.transpose() * &u;
    symmetrize(&mut sigma);
    Ok(FilterState { x, sigma, t })
}

fn inverse_std(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !p.is_square() {
        return Err(Error::invalid("covariance must be square"));
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN in measurement covariance"));
    }
    let mut inv_sd = DVector::zeros(p.nrows());
    for i in 0..p.nrows() {
        let v = p[(i, i)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::numeric(format!("diagonal entry {i} of P is {v}, covariance collapsed")));
        }
        inv_sd[i] = 1.0 / v.sqrt();
    }
    Ok(inv_sd)
}

/// `(2/π)·asin(c)` for the off-diagonal correlation of `P` at `(i, j)`,
/// clamped into [-1, 1]. The flag reports a clamp.
#[inline]
fn arcsin_entry(p: &DMatrix<f64>, inv_sd: &DVector<f64>, i: usize, j: usize) -> (f64, bool) {
    let c = 0.5 * (p[(i, j)] + p[(j, i)]) * inv_sd[i] * inv_sd[j];
    if c > 1.0 {
        (1.0, true)
    } else if c < -1.0 {
        (-1.0, true)
    } else {
        (FRAC_2_PI * c.asin(), false)
    }
}

/// `(2/π)·arcsin(D P D)` with correlations clamped to [-1, 1].
///
/// Returns the matrix together with the number of off-diagonal entries whose
/// correlation fell outside [-1, 1] before clamping.
pub fn arcsin_covariance(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let inv_sd = inverse_std(p)?;
    let n = p.nrows();
    let mut s = DMatrix::identity(n, n);
    let mut clamps = 0;
    for j in 0..n {
        for i in (j + 1)..n {
            let (v, clamped) = arcsin_entry(p, &inv_sd, i, j);
            clamps += clamped as usize;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok((s, clamps))
}

/// `A·S·Aᵀ` with `S = arcsin_covariance(P)`, accumulated block by block
/// without forming `S`. Clamps are counted over the entries of `S`.
///
/// Within one feature block the correlations of duplicate ADCs often repeat
/// exactly, so the arcsine is only re-evaluated when the correlation changes.
pub fn reduced_arcsin_covariance(p: &DMatrix<f64>, a: &ProjectionOperator) -> Result<(DMatrix<f64>, usize)> {
    let inv_sd = inverse_std(p)?;
    if p.nrows() != a.full_dim() {
        return Err(Error::invalid("projection does not match the measurement covariance"));
    }
    let k = a.reduced_dim();
    let copies = a.copies();
    let mut out = DMatrix::zeros(k, k);
    let mut clamps = 0;
    // (correlation, value) of the last evaluation per feature pair
    let mut memo = vec![(f64::NAN, 0.0); k * k];
    for fj in 0..k {
        for fi in fj..k {
            let slot = &mut memo[fi + k * fj];
            let mut acc = 0.0;
            for bj in 0..copies {
                let j = bj * k + fj;
                for bi in 0..copies {
                    let i = bi * k + fi;
                    if i == j {
                        acc += 1.0;
                        continue;
                    }
                    if fi == fj && i < j {
                        // counted through its mirror (j, i)
                        continue;
                    }
                    let c = 0.5 * (p[(i, j)] + p[(j, i)]) * inv_sd[i] * inv_sd[j];
                    let v = if c == slot.0 {
                        slot.1
                    } else {
                        let (v, clamped) = arcsin_entry(p, &inv_sd, i, j);
                        clamps += clamped as usize;
                        if !clamped {
                            *slot = (c, v);
                        }
                        v
                    };
                    acc += if fi == fj { 2.0 * v } else { v };
                }
            }
            out[(fi, fj)] = acc;
            out[(fj, fi)] = acc;
        }
    }
    let scale = a.ratio() * a.ratio();
    Ok((out * scale, clamps))
}

/// Empirical `E[sign(z) sign(z)ᵀ]` for `z ~ N(0, P)`, deterministic in `seed`.
pub fn monte_carlo_sign_covariance(p: &DMatrix<f64>, samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let n = p.nrows();
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("covariance is not positive definite"))?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let mut e = DVector::<f64>::zeros(n);
    let mut signs = vec![0.0; n];
    for _ in 0..samples {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z = &l * &e;
        for (s, zi) in signs.iter_mut().zip(z.iter()) {
            *s = if *zi > 0.0 { 1.0 } else { -1.0 };
        }
        for j in 0..n {
            for i in j..n {
                acc[(i, j)] += signs[i] * signs[j];
            }
        }
    }
    acc /= samples as f64;
    for j in 0..n {
        for i in (j + 1)..n {
            acc[(j, i)] = acc[(i, j)];
        }
    }
    Ok(acc)
}

/// BKF prediction: state and measurement moments, Bussgang matrix, arcsin-law `S`.
pub fn bkf_predict(state: &FilterState, model: &dyn StateSpaceModel) -> Result<PriorBundle> {
    let t = state.t + 1;
    let m = predict_moments(state, model).map_err(|e| e.at_step(t))?;
    let (s, clamps) = arcsin_covariance(&m.p).map_err(|e| e.at_step(t))?;
    let d = DVector::from_fn(m.p.nrows(), |i, _| 1.0 / m.p[(i, i)].sqrt());
    let b = &d * (2.0 / PI).sqrt();
    Ok(PriorBundle {
        x_prior: m.x_prior,
        sigma_prior: m.sigma_prior,
        y_prior: m.y_prior,
        p: m.p,
        d,
        b,
        s,
        s_star: None,
        h: m.h,
        f: m.f,
        clamps,
        t,
    })
}

/// BKF prediction for the reduced update: carries `S* = A·S·Aᵀ` instead of
/// the full `S`. With `A = I` this is [`bkf_predict`].
pub fn rbkf_predict(state: &FilterState, model: &dyn StateSpaceModel, a: &ProjectionOperator) -> Result<PriorBundle> {
    if a.is_identity() {
        return bkf_predict(state, model);
    }
    let t = state.t + 1;
    let m = predict_moments(state, model).map_err(|e| e.at_step(t))?;
    let (s_star, clamps) = reduced_arcsin_covariance(&m.p, a).map_err(|e| e.at_step(t))?;
    let d = DVector::from_fn(m.p.nrows(), |i, _| 1.0 / m.p[(i, i)].sqrt());
    let b = &d * (2.0 / PI).sqrt();
    Ok(PriorBundle {
        x_prior: m.x_prior,
        sigma_prior: m.sigma_prior,
        y_prior: m.y_prior,
        p: m.p,
        d,
        b,
        s: DMatrix::zeros(0, 0),
        s_star: Some(s_star),
        h: m.h,
        f: m.f,
        clamps,
        t,
    })
}

/// Gain and posterior for the linearized observation `obs = (BH)·x + noise` with
/// observation covariance `s`.
fn bussgang_correct(
    prior: &PriorBundle,
    bh: &DMatrix<f64>,
    s: &DMatrix<f64>,
    obs: &DVector<f64>,
    diag: &mut Diagnostics,
) -> Result<FilterState> {
    if obs.len() != s.nrows() || bh.nrows() != s.nrows() {
        return Err(Error::invalid("observation length does not match the prior"));
    }
    // BG = Σ (BH)ᵀ S⁻¹  ⇒  BGᵀ = S⁻¹ (BH) Σ
    let u = bh * &prior.sigma_prior;
    let sol = solve_spd_jittered(s, &u).map_err(|e| e.at_step(prior.t))?;
    if sol.jitter > 0.0 {
        diag.jitter_events += 1;
    }
    let bg_t = sol.solution;
    let x = &prior.x_prior + bg_t.transpose() * obs;
    // BG S BGᵀ = Σ (BH)ᵀ S⁻¹ (BH) Σ
    let mut sigma = &prior.sigma_prior - bg_t.transpose() * &u;
    symmetrize(&mut sigma);
    if !all_finite_vec(&x) || !all_finite_mat(&sigma) {
        return Err(Error::Numeric {
            step: Some(prior.t),
            msg: "update produced non-finite posterior".into(),
        });
    }
    Ok(FilterState { x, sigma, t: prior.t })
}

/// Bussgang gain `Σ (BH)ᵀ S⁻¹` of the full filter.
pub fn bussgang_gain(prior: &PriorBundle) -> Result<DMatrix<f64>> {
    let u = prior.bh() * &prior.sigma_prior;
    Ok(solve_spd_jittered(&prior.s, &u)?.solution.transpose())
}

/// Reduced gain `Σ (B*H)ᵀ S*⁻¹` with `B* = A·B`, `S* = A S Aᵀ`.
pub fn reduced_bussgang_gain(prior: &PriorBundle, a: &ProjectionOperator) -> Result<DMatrix<f64>> {
    let bh = a.apply_rows(&prior.bh())?;
    let s = reduced_s(prior, a)?;
    let u = bh * &prior.sigma_prior;
    Ok(solve_spd_jittered(&s, &u)?.solution.transpose())
}

fn reduced_s(prior: &PriorBundle, a: &ProjectionOperator) -> Result<DMatrix<f64>> {
    match &prior.s_star {
        Some(s) if s.nrows() == a.reduced_dim() => Ok(s.clone()),
        _ => a.project_square(&prior.s),
    }
}

/// BKF update with the full quantized vector `r`.
pub fn bkf_update(prior: &PriorBundle, r: &DVector<f64>) -> Result<FilterState> {
    bkf_update_with(prior, r, &mut Diagnostics::default())
}

pub fn bkf_update_with(prior: &PriorBundle, r: &DVector<f64>, diag: &mut Diagnostics) -> Result<FilterState> {
    bussgang_correct(prior, &prior.bh(), &prior.s, r, diag)
}

/// rBKF update with the projected observation `r* = A·r`.
pub fn rbkf_update(prior: &PriorBundle, r_star: &DVector<f64>, a: &ProjectionOperator) -> Result<FilterState> {
    rbkf_update_with(prior, r_star, a, &mut Diagnostics::default())
}

pub fn rbkf_update_with(
    prior: &PriorBundle,
    r_star: &DVector<f64>,
    a: &ProjectionOperator,
    diag: &mut Diagnostics,
) -> Result<FilterState> {
    if a.is_identity() {
        let s = prior.s_star.as_ref().unwrap_or(&prior.s);
        return bussgang_correct(prior, &prior.bh(), s, r_star, diag);
    }
    let bh = a.apply_rows(&prior.bh())?;
    let s = reduced_s(prior, a)?;
    bussgang_correct(prior, &bh, &s, r_star, diag)
}

/// Estimator driven by [`run_filter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// EKF on the unquantized measurements.
    EkfIdeal,
    /// EKF fed the dithered 1-bit outputs as if they were measurements.
    EkfOnBits,
    Bkf,
    Rbkf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::EkfIdeal, Variant::EkfOnBits, Variant::Bkf, Variant::Rbkf];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::EkfIdeal => "ekf_ideal",
            Variant::EkfOnBits => "ekf_on_bits",
            Variant::Bkf => "bkf",
            Variant::Rbkf => "rbkf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown filter variant {s:?}")))
    }
}

/// Output of a filter run over one sequence.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// `T × m` posterior means.
    pub estimates: DMatrix<f64>,
    /// Posterior covariance after every step.
    pub covariances: Vec<DMatrix<f64>>,
    pub diagnostics: Diagnostics,
}

/// Run `variant` over `seq` in closed loop.
///
/// `model` is the filter's model: for the 1-bit variants its measurement
/// dimension equals the ADC count of `bank`; for [`Variant::EkfIdeal`] it
/// matches the columns of `seq.measurements`.
pub fn run_filter(
    model: &dyn StateSpaceModel,
    bank: &AdcBank,
    variant: Variant,
    seq: &SequencePair,
    sigma0: &DMatrix<f64>,
) -> Result<FilterRun> {
    let m = model.state_dim();
    let steps = seq.len();
    let mut state = FilterState::new(seq.initial_estimate.clone(), sigma0.clone())?;
    if state.x.len() != m {
        return Err(Error::invalid("initial estimate does not match the model"));
    }
    if seq.measurements.ncols() != model.meas_dim() {
        return Err(Error::invalid(format!(
            "sequence has {} measurement columns, model expects {}",
            seq.measurements.ncols(),
            model.meas_dim()
        )));
    }
    if variant != Variant::EkfIdeal && bank.len() != model.meas_dim() {
        return Err(Error::invalid("ADC bank size does not match the model"));
    }
    let mut bank = bank.clone();
    let projection = bank.projection();
    let mut diag = Diagnostics::default();
    let mut estimates = DMatrix::zeros(steps, m);
    let mut covariances = Vec::with_capacity(steps);

    for t in 0..steps {
        let y: DVector<f64> = seq.measurements.row(t).transpose();
        let step = t + 1;
        state = match variant {
            Variant::EkfIdeal => ekf_step(&state, &y, model),
            Variant::EkfOnBits => {
                let mom = predict_moments(&state, model).map_err(|e| e.at_step(step))?;
                let r = bank.observe(&y, &mom.y_prior)?;
                ekf_update(mom, &r, step)
            }
            Variant::Bkf => {
                let prior = bkf_predict(&state, model)?;
                diag.clamps += prior.clamps;
                let r = bank.observe(&y, &prior.y_prior)?;
                bkf_update_with(&prior, &r, &mut diag)
            }
            Variant::Rbkf => {
                let prior = rbkf_predict(&state, model, &projection)?;
                diag.clamps += prior.clamps;
                let r = bank.observe(&y, &prior.y_prior)?;
                let r_star = if projection.is_identity() { r } else { projection.apply(&r)? };
                rbkf_update_with(&prior, &r_star, &projection, &mut diag)
            }
        }
        .map_err(|e| e.at_step(step))?;
        diag.check(&state);
        estimates.set_row(t, &state.x.transpose());
        covariances.push(state.sigma.clone());
    }
    Ok(FilterRun {
        estimates,
        covariances,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::build_projection;
    use crate::ssmodel::LinearModel;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn scalar_model(q: f64, r: f64) -> LinearModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        LinearModel::new(one.clone(), one, DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap()
    }

    fn scalar_state(x: f64, s: f64) -> FilterState {
        FilterState::new(DVector::from_element(1, x), DMatrix::from_element(1, 1, s)).unwrap()
    }

    #[test]
    fn ekf_scalar_arithmetic() {
        let model = scalar_model(0.0, 1.0);
        let out = ekf_step(&scalar_state(0.0, 1.0), &DVector::from_element(1, 2.0), &model).unwrap();
        // Σ_prior = 1, P = 2, KG = 0.5
        assert_abs_diff_eq!(out.sigma[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-15);
        assert_eq!(out.t, 1);
    }

    #[test]
    fn ekf_zero_gain_limit() {
        let model = scalar_model(0.0, 1e12);
        let start = scalar_state(3.0, 1.0);
        let out = ekf_step(&start, &DVector::from_element(1, -50.0), &model).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-5 * 3.0);
    }

    #[test]
    fn ekf_rejects_singular_innovation() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let h = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let model = LinearModel::new(one.clone(), h, DMatrix::zeros(1, 1), DMatrix::zeros(2, 2)).unwrap();
        let err = ekf_step(&scalar_state(0.0, 1.0), &DVector::from_element(2, 1.0), &model).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: Some(1), .. }), "{err}");
    }

    /// Filtered marginals from the joint information-form least-squares problem
    /// over `x_0..x_t`.
    fn batch_filtered(
        f: &DMatrix<f64>,
        h: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        x0: &DVector<f64>,
        s0: &DMatrix<f64>,
        ys: &[DVector<f64>],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = x0.len();
        let t = ys.len();
        let dim = (t + 1) * m;
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        let mut vec = DVector::<f64>::zeros(dim);
        let s0i = s0.clone().try_inverse().unwrap();
        let qi = q.clone().try_inverse().unwrap();
        let ri = r.clone().try_inverse().unwrap();
        info.view_mut((0, 0), (m, m)).add_assign(&s0i);
        vec.rows_mut(0, m).add_assign(&(&s0i * x0));
        for k in 1..=t {
            // dynamics residual x_k - F x_{k-1}: [−F  I]
            let mut g = DMatrix::<f64>::zeros(m, 2 * m);
            g.view_mut((0, 0), (m, m)).copy_from(&(-f));
            g.view_mut((0, m), (m, m)).copy_from(&DMatrix::identity(m, m));
            let blk = g.transpose() * &qi * &g;
            info.view_mut(((k - 1) * m, (k - 1) * m), (2 * m, 2 * m)).add_assign(&blk);
            let hk = h.transpose() * &ri * h;
            info.view_mut((k * m, k * m), (m, m)).add_assign(&hk);
            vec.rows_mut(k * m, m).add_assign(&(h.transpose() * &ri * &ys[k - 1]));
        }
        let cov = info.try_inverse().unwrap();
        let mean = &cov * vec;
        (mean.rows(t * m, m).into_owned(), cov.view((t * m, t * m), (m, m)).into_owned())
    }

    use std::ops::AddAssign;

    #[test]
    fn ekf_matches_batch_information_form() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.95]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let q = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.05]);
        let r = DMatrix::from_element(1, 1, 0.3);
        let model = LinearModel::new(f.clone(), h.clone(), q.clone(), r.clone()).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let s0 = DMatrix::identity(2, 2) * 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ys: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_element(1, rng.random_range(-2.0..2.0))).collect();

        let mut state = FilterState::new(x0.clone(), s0.clone()).unwrap();
        for (k, y) in ys.iter().enumerate() {
            state = ekf_step(&state, y, &model).unwrap();
            if k < 5 {
                let (mean, cov) = batch_filtered(&f, &h, &q, &r, &x0, &s0, &ys[..=k]);
                assert!((&state.x - mean).amax() < 1e-8);
                assert!((&state.sigma - cov).amax() < 1e-8);
            }
        }
        let (mean, cov) = batch_filtered(&f, &h, &q, &r, &x0, &s0, &ys);
        assert!((&state.x - mean).amax() < 1e-8);
        assert!((&state.sigma - cov).amax() < 1e-8);
    }

    fn prior_with_p(p: DMatrix<f64>) -> PriorBundle {
        let n = p.nrows();
        let (s, clamps) = arcsin_covariance(&p).unwrap();
        let d = DVector::from_fn(n, |i, _| 1.0 / p[(i, i)].sqrt());
        PriorBundle {
            x_prior: DVector::zeros(n),
            sigma_prior: DMatrix::identity(n, n),
            y_prior: DVector::zeros(n),
            b: &d * (2.0 / PI).sqrt(),
            d,
            s,
            s_star: None,
            h: DMatrix::identity(n, n),
            f: DMatrix::identity(n, n),
            p,
            clamps,
            t: 1,
        }
    }

    #[test]
    fn reduced_arcsin_matches_projected_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for copies in [1, 2, 5] {
            let k = 3;
            let n = k * copies;
            let g = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
            let mut p = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            // duplicate ADCs with identical noise repeat their correlations
            for i in 0..n {
                for j in 0..n {
                    p[(i, j)] = p[(i % k, j % k)] + if i == j { 0.3 } else { 0.0 };
                }
            }
            let a = build_projection(1.0 / copies as f64, n).unwrap();
            let (full, full_clamps) = arcsin_covariance(&p).unwrap();
            let (red, red_clamps) = reduced_arcsin_covariance(&p, &a).unwrap();
            assert_abs_diff_eq!(red, a.project_square(&full).unwrap(), epsilon = 1e-14);
            assert_eq!(red_clamps, full_clamps);
        }
        let mut over = DMatrix::identity(4, 4);
        over[(0, 2)] = 1.5;
        over[(2, 0)] = 1.5;
        let a = build_projection(0.5, 4).unwrap();
        assert_eq!(reduced_arcsin_covariance(&over, &a).unwrap().1, 1);
    }

    #[test]
    fn rbkf_predict_carries_the_reduced_s() {
        let p = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else if i % 3 == j % 3 { 0.6 } else { 0.1 });
        let mut prior = prior_with_p(p.clone());
        let a = build_projection(0.5, 6).unwrap();
        let r = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0, 1.0, -1.0]);
        let r_star = a.apply(&r).unwrap();
        let want = rbkf_update(&prior, &r_star, &a).unwrap();
        prior.s_star = Some(reduced_arcsin_covariance(&p, &a).unwrap().0);
        prior.s = DMatrix::zeros(0, 0);
        let got = rbkf_update(&prior, &r_star, &a).unwrap();
        assert_abs_diff_eq!(got.x, want.x, epsilon = 1e-12);
        assert_abs_diff_eq!(got.sigma, want.sigma, epsilon = 1e-12);
        assert!(bkf_update(&prior, &r).is_err());
    }

    #[test]
    fn bkf_predict_examples() {
        let sigma2 = 4.0;
        let model = scalar_model(0.0, sigma2 - 1.0);
        let prior = bkf_predict(&scalar_state(0.0, 1.0), &model).unwrap();
        assert_abs_diff_eq!(prior.p[(0, 0)], sigma2, epsilon = 1e-15);
        assert_abs_diff_eq!(prior.b[0], (2.0 / PI).sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(prior.s[(0, 0)], 1.0);

        let p = prior_with_p(DMatrix::identity(2, 2));
        assert_eq!(p.s, DMatrix::identity(2, 2));
        let p = prior_with_p(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
        assert_abs_diff_eq!(p.s, DMatrix::from_row_slice(2, 2, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]), epsilon = 1e-15);
        // D P D has unit diagonal
        let dpd = DMatrix::from_diagonal(&p.d) * &p.p * DMatrix::from_diagonal(&p.d);
        assert!((dpd.diagonal() - DVector::from_element(2, 1.0)).amax() < 1e-12);
    }

    #[test]
    fn bkf_predict_rejects_collapsed_covariance() {
        let model = scalar_model(0.0, 0.0);
        let err = bkf_predict(&scalar_state(0.0, 0.0), &model).unwrap_err();
        assert!(matches!(err, Error::Numeric { step: Some(1), .. }));
    }

    #[test]
    fn arcsin_examples() {
        let (s, clamps) = arcsin_covariance(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s, DMatrix::identity(3, 3));
        assert_eq!(clamps, 0);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (s, _) = arcsin_covariance(&(&v * v.transpose())).unwrap();
        let signs = v.map(f64::signum);
        assert!((s - &signs * signs.transpose()).amax() < 1e-6);
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(arcsin_covariance(&bad), Err(Error::Numeric { .. })));
        // correlation slightly above one is clamped and counted
        let over = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 1e-9, 1.0 + 1e-9, 1.0]);
        let (s, clamps) = arcsin_covariance(&over).unwrap();
        assert_eq!(clamps, 1);
        assert_eq!(s[(0, 1)], 1.0);
    }

    #[test]
    fn monte_carlo_examples() {
        let mc = monte_carlo_sign_covariance(&DMatrix::identity(3, 3), 1_000_000, 1).unwrap();
        for i in 0..3 {
            assert_eq!(mc[(i, i)], 1.0);
            for j in 0..3 {
                if i != j {
                    assert!(mc[(i, j)].abs() < 0.005);
                }
            }
        }
        let one = monte_carlo_sign_covariance(&DMatrix::identity(3, 3), 1, 4).unwrap();
        assert!(one.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(one.diagonal(), DVector::from_element(3, 1.0));
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(
            monte_carlo_sign_covariance(&p, 1000, 77).unwrap(),
            monte_carlo_sign_covariance(&p, 1000, 77).unwrap()
        );
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(monte_carlo_sign_covariance(&indefinite, 10, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn bkf_scalar_update() {
        let model = scalar_model(0.0, 0.5);
        let prior = bkf_predict(&scalar_state(0.0, 0.5), &model).unwrap();
        let post = bkf_update(&prior, &DVector::from_element(1, 1.0)).unwrap();
        let bg = (2.0 / PI).sqrt() * 0.5;
        assert_abs_diff_eq!(prior.b[0], (2.0 / PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(post.x[0], bg, epsilon = 1e-15);
        assert_abs_diff_eq!(post.sigma[(0, 0)], 0.5 - bg * bg, epsilon = 1e-15);
        assert_abs_diff_eq!(bg, 0.398942, epsilon = 1e-6);
        assert_abs_diff_eq!(0.5 - bg * bg, 0.340845, epsilon = 1e-6);

        // Monte-Carlo conditional-mean oracle: x ~ N(0, .5), y = x + v, r = sign(y)
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 400_000;
        let (mut sum_pos, mut cnt_pos, mut resid2) = (0.0, 0usize, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = 0.5f64.sqrt() * z;
            let w: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5f64.sqrt() * w;
            let r = if x + v > 0.0 { 1.0 } else { -1.0 };
            if r > 0.0 {
                sum_pos += x;
                cnt_pos += 1;
            }
            resid2 += (x - bg * r).powi(2);
        }
        assert!((sum_pos / cnt_pos as f64 - bg).abs() < 0.005);
        assert!((resid2 / n as f64 - (0.5 - bg * bg)).abs() < 0.005);
    }

    #[test]
    fn bkf_update_is_odd_in_r_and_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let model = LinearModel::new(
            DMatrix::identity(3, 3),
            a,
            DMatrix::identity(3, 3) * 0.1,
            DMatrix::identity(3, 3) * 0.2,
        )
        .unwrap();
        let state = FilterState::new(DVector::from_vec(vec![1.0, 2.0, 3.0]), DMatrix::identity(3, 3)).unwrap();
        let prior = bkf_predict(&state, &model).unwrap();
        let r = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let plus = bkf_update(&prior, &r).unwrap();
        let minus = bkf_update(&prior, &(-&r)).unwrap();
        assert!((&plus.x + &minus.x - &prior.x_prior * 2.0).amax() < 1e-12);
        assert!(plus.sigma.trace() < prior.sigma_prior.trace());
        // Σ_prior − Σ_post is PSD
        assert!(min_eigenvalue(&(&prior.sigma_prior - &plus.sigma)) > -1e-12);
        assert!(plus.covariance_ok());

        // gain identity BG S BGᵀ = Σ (BH)ᵀ S⁻¹ (BH) Σ
        let bg = bussgang_gain(&prior).unwrap();
        let bh = prior.bh();
        let sinv = prior.s.clone().try_inverse().unwrap();
        let lhs = &bg * &prior.s * bg.transpose();
        let rhs = &prior.sigma_prior * bh.transpose() * sinv * &bh * &prior.sigma_prior;
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn rbkf_with_identity_projection_equals_bkf() {
        let model = LinearModel::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]),
            DMatrix::identity(2, 2) * 0.05,
            DMatrix::identity(2, 2) * 0.1,
        )
        .unwrap();
        let state = FilterState::new(DVector::from_vec(vec![0.5, -0.5]), DMatrix::identity(2, 2)).unwrap();
        let prior = bkf_predict(&state, &model).unwrap();
        let r = DVector::from_vec(vec![-1.0, 1.0]);
        let a = ProjectionOperator::identity(2);
        let full = bkf_update(&prior, &r).unwrap();
        let reduced = rbkf_update(&prior, &a.apply(&r).unwrap(), &a).unwrap();
        assert!((&full.x - &reduced.x).amax() < 1e-12);
        assert!((&full.sigma - &reduced.sigma).amax() < 1e-12);
    }

    #[test]
    fn rbkf_scalar_reduced_dimension() {
        // four duplicate ADCs of one feature collapse to a scalar S*
        let p = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.6 });
        let mut prior = prior_with_p(p);
        prior.sigma_prior = DMatrix::from_element(1, 1, 0.5);
        prior.x_prior = DVector::zeros(1);
        prior.h = DMatrix::from_element(4, 1, 1.0);
        let a = crate::quantizer::build_projection(0.25, 4).unwrap();
        let s_star = a.project_square(&prior.s).unwrap();
        assert_eq!(s_star.shape(), (1, 1));
        let post = rbkf_update(&prior, &DVector::from_element(1, 0.5), &a).unwrap();
        let bstar_h = a.apply_rows(&prior.bh()).unwrap()[(0, 0)];
        let expect = 0.5 * bstar_h / s_star[(0, 0)] * 0.5;
        assert_abs_diff_eq!(post.x[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("kalman".parse::<Variant>().is_err());
    }
}
