//! State-space models: the discretized Lorenz attractor, the Wiener-velocity
//! tracking model, and decorators used for ADC replication and mismatch.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag_repeat, min_eigenvalue};

/// A discrete-time nonlinear model `x_t = f(x_{t-1}) + w_t`, `y_t = h(x_t) + v_t`.
///
/// Implementations are immutable and shareable across threads.
pub trait StateSpaceModel: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    fn f(&self, x: &DVector<f64>) -> DVector<f64>;
    fn h(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Transition matrix used to propagate covariances.
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Exact derivative of `f`. Defaults to [`jac_f`](Self::jac_f), which is
    /// exact for every model except the Taylor-discretized Lorenz system.
    fn jac_f_exact(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.jac_f(x)
    }
    fn jac_h(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn process_noise(&self) -> &DMatrix<f64>;
    fn measurement_noise(&self) -> &DMatrix<f64>;
}

pub type SharedModel = Arc<dyn StateSpaceModel>;

fn check_covariance(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(format!("{name} must be square")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("{name} has non-finite entries")));
    }
    if crate::linalg::asymmetry(m) > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::invalid(format!("{name} is not symmetric")));
    }
    if m.nrows() > 0 && min_eigenvalue(m) < -1e-12 * m.trace().abs().max(1e-300) {
        return Err(Error::invalid(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lorenz attractor

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Sampling interval.
    pub dt: f64,
    /// Truncation order of the matrix-exponential Taylor series.
    pub taylor_order: usize,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.02,
            taylor_order: 5,
        }
    }
}

impl LorenzParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("lorenz dt must be > 0, got {}", self.dt)));
        }
        if self.taylor_order == 0 {
            return Err(Error::invalid("lorenz taylor_order must be >= 1"));
        }
        Ok(())
    }
}

fn check_state3(x: &DVector<f64>) -> Result<()> {
    if x.len() != 3 {
        return Err(Error::invalid(format!("lorenz state must have 3 entries, got {}", x.len())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("lorenz state is not finite"));
    }
    Ok(())
}

/// Continuous-time Jacobian of the Lorenz vector field at `x`.
pub fn lorenz_jacobian(x: &DVector<f64>, params: &LorenzParams) -> Result<DMatrix<f64>> {
    check_state3(x)?;
    let LorenzParams { sigma, rho, beta, .. } = *params;
    Ok(DMatrix::from_row_slice(
        3,
        3,
        &[
            -sigma, sigma, 0.0, //
            rho - x[2], -1.0, -x[0], //
            x[1], x[0], -beta,
        ],
    ))
}

/// `I + Σ_{j=1..order} (J(x)·dt)^j / j!` for a Jacobian provider `jac`.
pub fn taylor_transition<J>(x: &DVector<f64>, dt: f64, order: usize, jac: J) -> Result<DMatrix<f64>>
where
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    if order == 0 {
        return Err(Error::invalid("taylor order must be >= 1"));
    }
    if !(dt >= 0.0) {
        return Err(Error::invalid(format!("dt must be >= 0, got {dt}")));
    }
    let scaled = jac(x)? * dt;
    let m = scaled.nrows();
    let mut out = DMatrix::<f64>::identity(m, m);
    let mut term = DMatrix::<f64>::identity(m, m);
    for j in 1..=order {
        term = &term * &scaled / j as f64;
        out += &term;
    }
    Ok(out)
}

/// One discretized Lorenz step `F(x)·x`.
pub fn lorenz_step(x: &DVector<f64>, params: &LorenzParams) -> Result<DVector<f64>> {
    let f = taylor_transition(x, params.dt, params.taylor_order, |s| lorenz_jacobian(s, params))?;
    Ok(f * x)
}

/// Exact Jacobian of `x ↦ F(x)·x`, including the state dependence of `F`.
pub fn lorenz_step_jacobian(x: &DVector<f64>, params: &LorenzParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    let dt = params.dt;
    let order = params.taylor_order;
    let m_mat = lorenz_jacobian(x, params)? * dt;

    // powers[p] = M^p, v[p] = M^p x
    let mut powers = vec![DMatrix::<f64>::identity(3, 3)];
    for p in 1..order {
        let next = &powers[p - 1] * &m_mat;
        powers.push(next);
    }
    let mut v = vec![x.clone()];
    for p in 1..order {
        let next = &m_mat * &v[p - 1];
        v.push(next);
    }

    let mut transition = DMatrix::<f64>::identity(3, 3);
    let mut fact = 1.0;
    for (j, pow) in powers.iter().enumerate().skip(1) {
        fact *= j as f64;
        transition += pow / fact;
    }
    // last power M^order
    fact *= order as f64;
    transition += &powers[order - 1] * &m_mat / fact;

    let mut jac = transition;
    // dM/dx_k = dt·E_k, with E_k the (constant) derivative of J w.r.t. x_k.
    let mut e = [DMatrix::<f64>::zeros(3, 3), DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)];
    e[0][(1, 2)] = -1.0;
    e[0][(2, 1)] = 1.0;
    e[1][(2, 0)] = 1.0;
    e[2][(1, 0)] = -1.0;
    for (k, ek) in e.iter().enumerate() {
        let dm = ek * dt;
        let mut col = DVector::<f64>::zeros(3);
        let mut fact = 1.0;
        for j in 1..=order {
            fact *= j as f64;
            // d(M^j)/dx_k · x = Σ_i M^i dM M^{j-1-i} x
            let mut acc = DVector::<f64>::zeros(3);
            for i in 0..j {
                acc += &powers[i] * (&dm * &v[j - 1 - i]);
            }
            col += acc / fact;
        }
        let mut c = jac.column_mut(k);
        c += col;
    }
    Ok(jac)
}

/// How the filter-side transition Jacobian of the Lorenz model is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionJacobian {
    /// `F(x̂)` itself, ignoring the state dependence of `F`.
    #[default]
    Taylor,
    /// Full product-rule derivative of `F(x)·x`.
    ProductRule,
}

/// Discretized Lorenz attractor observed through the identity.
#[derive(Debug, Clone)]
pub struct LorenzModel {
    pub params: LorenzParams,
    pub jacobian: TransitionJacobian,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LorenzModel {
    /// `q2`/`r2` are the per-coordinate process and measurement variances.
    pub fn new(params: LorenzParams, q2: f64, r2: f64) -> Result<Self> {
        params.validate()?;
        if !(q2 >= 0.0) || !(r2 >= 0.0) {
            return Err(Error::invalid("noise variances must be >= 0"));
        }
        Ok(Self {
            params,
            jacobian: TransitionJacobian::Taylor,
            q: DMatrix::identity(3, 3) * q2,
            r: DMatrix::identity(3, 3) * r2,
        })
    }

    pub fn with_jacobian(mut self, jacobian: TransitionJacobian) -> Self {
        self.jacobian = jacobian;
        self
    }

    fn transition(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let dt = p.dt;
        // validated at construction; only non-finite states can fail here
        match taylor_transition(x, dt, p.taylor_order, |s| {
            Ok(DMatrix::from_row_slice(
                3,
                3,
                &[
                    -p.sigma, p.sigma, 0.0, //
                    p.rho - s[2], -1.0, -s[0], //
                    s[1], s[0], -p.beta,
                ],
            ))
        }) {
            Ok(m) => m,
            Err(_) => DMatrix::from_element(3, 3, f64::NAN),
        }
    }
}

impl StateSpaceModel for LorenzModel {
    fn state_dim(&self) -> usize {
        3
    }
    fn meas_dim(&self) -> usize {
        3
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.transition(x) * x
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.jacobian {
            TransitionJacobian::Taylor => self.transition(x),
            TransitionJacobian::ProductRule => self.jac_f_exact(x),
        }
    }
    fn jac_f_exact(&self, x: &DVector<f64>) -> DMatrix<f64> {
        lorenz_step_jacobian(x, &self.params)
            .unwrap_or_else(|_| DMatrix::from_element(3, 3, f64::NAN))
    }
    fn jac_h(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

// ---------------------------------------------------------------------------
// Linear models

/// Linear-Gaussian model `x' = F x + w`, `y = H x + v`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = f.nrows();
        if !f.is_square() || h.ncols() != m || q.shape() != (m, m) || r.shape() != (h.nrows(), h.nrows()) {
            return Err(Error::invalid("inconsistent linear model dimensions"));
        }
        check_covariance("Q", &q)?;
        check_covariance("R", &r)?;
        Ok(Self { f, h, q, r })
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn meas_dim(&self) -> usize {
        self.h.nrows()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn jac_f(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.f.clone()
    }
    fn jac_h(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.q
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WienerVelocityParams {
    pub dt: f64,
    /// Per-axis process-noise variance q².
    pub q2: f64,
    pub axes: usize,
    /// Velocity measurement variance r².
    pub r2: f64,
}

impl Default for WienerVelocityParams {
    fn default() -> Self {
        Self {
            dt: 1.0,
            q2: 1e-2,
            axes: 2,
            r2: 1e-1,
        }
    }
}

/// Per-axis transition and process-noise blocks of the Wiener-velocity model.
pub fn wiener_axis_blocks(dt: f64, q2: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = DMatrix::from_row_slice(3, 3, &[1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0]);
    let (d2, d3, d4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    let q = DMatrix::from_row_slice(
        3,
        3,
        &[
            d4 / 4.0, d3 / 2.0, d2 / 2.0, //
            d3 / 2.0, d2, dt, //
            d2 / 2.0, dt, 1.0,
        ],
    ) * q2;
    (f, q)
}

/// Block-diagonal multi-axis Wiener-velocity model measuring velocity only.
/// State layout per axis is (position, velocity, acceleration).
pub fn wiener_velocity_model(params: &WienerVelocityParams) -> Result<LinearModel> {
    if !(params.dt > 0.0) {
        return Err(Error::invalid("wiener dt must be > 0"));
    }
    if !(params.q2 >= 0.0) || !(params.r2 >= 0.0) {
        return Err(Error::invalid("wiener noise variances must be >= 0"));
    }
    if params.axes == 0 {
        return Err(Error::invalid("wiener model needs at least one axis"));
    }
    let (f, q) = wiener_axis_blocks(params.dt, params.q2);
    let h_axis = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
    LinearModel::new(
        block_diag_repeat(&f, params.axes),
        block_diag_repeat(&h_axis, params.axes),
        block_diag_repeat(&q, params.axes),
        DMatrix::identity(params.axes, params.axes) * params.r2,
    )
}

// ---------------------------------------------------------------------------
// Decorators

/// Rotation by `theta_deg` degrees in the plane orthogonal to coordinate `axis`.
pub fn rotation_about_axis(dim: usize, axis: usize, theta_deg: f64) -> Result<DMatrix<f64>> {
    if dim != 3 || axis >= 3 {
        return Err(Error::invalid("rotations are defined for 3-D states about axis 0, 1 or 2"));
    }
    let (s, c) = theta_deg.to_radians().sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut rot = DMatrix::identity(3, 3);
    rot[(i, i)] = c;
    rot[(i, j)] = -s;
    rot[(j, i)] = s;
    rot[(j, j)] = c;
    Ok(rot)
}

/// `f'(x) = R·f(x)`.
#[derive(Debug, Clone)]
pub struct RotatedTransition {
    inner: SharedModel,
    rot: DMatrix<f64>,
}

impl RotatedTransition {
    pub fn new(inner: SharedModel, rot: DMatrix<f64>) -> Result<Self> {
        if rot.shape() != (inner.state_dim(), inner.state_dim()) {
            return Err(Error::invalid("rotation does not match the state dimension"));
        }
        Ok(Self { inner, rot })
    }
}

impl StateSpaceModel for RotatedTransition {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn meas_dim(&self) -> usize {
        self.inner.meas_dim()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rot * self.inner.f(x)
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.h(x)
    }
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.rot * self.inner.jac_f(x)
    }
    fn jac_f_exact(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.rot * self.inner.jac_f_exact(x)
    }
    fn jac_h(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_h(x)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        self.inner.process_noise()
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        self.inner.measurement_noise()
    }
}

/// `h'(x) = R·h(x)`.
#[derive(Debug, Clone)]
pub struct RotatedMeasurement {
    inner: SharedModel,
    rot: DMatrix<f64>,
}

impl RotatedMeasurement {
    pub fn new(inner: SharedModel, rot: DMatrix<f64>) -> Result<Self> {
        if rot.shape() != (inner.meas_dim(), inner.meas_dim()) {
            return Err(Error::invalid("rotation does not match the measurement dimension"));
        }
        Ok(Self { inner, rot })
    }
}

impl StateSpaceModel for RotatedMeasurement {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn meas_dim(&self) -> usize {
        self.inner.meas_dim()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.f(x)
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rot * self.inner.h(x)
    }
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_f(x)
    }
    fn jac_f_exact(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_f_exact(x)
    }
    fn jac_h(&self, x: &DVector<f64>) -> DMatrix<f64> {
        &self.rot * self.inner.jac_h(x)
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        self.inner.process_noise()
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        self.inner.measurement_noise()
    }
}

/// Observation through a bank of duplicate ADCs: `h(·) = 1_L ⊗ h̃(·)` with a
/// per-ADC diagonal noise covariance.
#[derive(Debug, Clone)]
pub struct AdcReplicated {
    inner: SharedModel,
    copies: usize,
    r: DMatrix<f64>,
}

impl AdcReplicated {
    pub fn new(inner: SharedModel, copies: usize, noise_variances: &DVector<f64>) -> Result<Self> {
        if copies == 0 {
            return Err(Error::invalid("need at least one ADC per feature"));
        }
        if noise_variances.len() != copies * inner.meas_dim() {
            return Err(Error::invalid(format!(
                "expected {} ADC noise variances, got {}",
                copies * inner.meas_dim(),
                noise_variances.len()
            )));
        }
        if noise_variances.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("ADC noise variances must be >= 0"));
        }
        Ok(Self {
            inner,
            copies,
            r: DMatrix::from_diagonal(noise_variances),
        })
    }

    pub fn copies(&self) -> usize {
        self.copies
    }
}

impl StateSpaceModel for AdcReplicated {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn meas_dim(&self) -> usize {
        self.copies * self.inner.meas_dim()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.f(x)
    }
    fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        let base = self.inner.h(x);
        let k = base.len();
        DVector::from_fn(self.copies * k, |i, _| base[i % k])
    }
    fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_f(x)
    }
    fn jac_f_exact(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jac_f_exact(x)
    }
    fn jac_h(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let base = self.inner.jac_h(x);
        let k = base.nrows();
        DMatrix::from_fn(self.copies * k, base.ncols(), |i, j| base[(i % k, j)])
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        self.inner.process_noise()
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Central-difference Jacobian of `map` at `x`, step `eps·(1+|x_i|)` per coordinate.
pub fn jacobian_fd<F>(map: F, x: &DVector<f64>, eps: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let base = map(x);
    let mut jac = DMatrix::zeros(base.len(), x.len());
    for i in 0..x.len() {
        let step = eps * (1.0 + x[i].abs());
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[i] += step;
        minus[i] -= step;
        let fp = map(&plus);
        let fm = map(&minus);
        if !fp.iter().chain(fm.iter()).all(|v| v.is_finite()) {
            return Err(Error::numeric("map produced a non-finite value"));
        }
        jac.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    Ok(jac)
}
