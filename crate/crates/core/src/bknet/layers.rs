//! Parameter storage and the two layer types of the gain network: a fully
//! connected layer and a GRU cell, each with a hand-written backward pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// A named trainable tensor. Vectors are stored as `n × 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DMatrix<f64>,
    pub is_vector: bool,
}

impl Param {
    pub fn dims(&self) -> Vec<usize> {
        if self.is_vector {
            vec![self.value.nrows()]
        } else {
            vec![self.value.nrows(), self.value.ncols()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    pub items: Vec<Param>,
}

impl Parameters {
    pub fn push(&mut self, name: impl Into<String>, value: DMatrix<f64>, is_vector: bool) -> usize {
        self.items.push(Param {
            name: name.into(),
            value,
            is_vector,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: usize) -> &DMatrix<f64> {
        &self.items[id].value
    }

    pub fn norm_squared(&self) -> f64 {
        self.items.iter().map(|p| p.value.norm_squared()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(self.items.iter().map(|p| DMatrix::zeros(p.value.nrows(), p.value.ncols())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.items.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Flat view in storage order (column-major within each tensor).
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for p in &self.items {
            if index < p.value.len() {
                return p.value.as_slice()[index];
            }
            index -= p.value.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, v: f64) {
        for p in &mut self.items {
            if index < p.value.len() {
                p.value.as_mut_slice()[index] = v;
                return;
            }
            index -= p.value.len();
        }
        panic!("flat parameter index out of range")
    }
}

/// Gradients aligned with [`Parameters::items`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<DMatrix<f64>>);

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for g in &self.0 {
            if index < g.len() {
                return g.as_slice()[index];
            }
            index -= g.len();
        }
        panic!("flat gradient index out of range")
    }
}

pub(crate) fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(*p);
        at += p.len();
    }
    out
}

fn check_finite(v: &DVector<f64>, layer: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite activation in {layer}")))
    }
}

fn uniform_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: DVector<f64>,
    pre: DVector<f64>,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut Parameters,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        rng: Option<&mut R>,
    ) -> Self {
        let w = match rng {
            Some(rng) => uniform_init(out_dim, in_dim, rng),
            None => DMatrix::zeros(out_dim, in_dim),
        };
        let w = params.push(format!("{name}.weight"), w, false);
        let b = params.push(format!("{name}.bias"), DMatrix::zeros(out_dim, 1), true);
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            act,
            w,
            b,
        }
    }

    pub fn bias_id(&self) -> usize {
        self.b
    }

    pub fn weight_id(&self) -> usize {
        self.w
    }

    pub fn forward(&self, params: &Parameters, x: &DVector<f64>) -> Result<(DVector<f64>, DenseCache)> {
        if x.len() != self.in_dim {
            return Err(Error::invalid(format!(
                "{}: input has {} entries, expected {}",
                self.name,
                x.len(),
                self.in_dim
            )));
        }
        let pre = params.value(self.w) * x + params.value(self.b).column(0);
        let out = match self.act {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Linear => pre.clone(),
        };
        check_finite(&out, &self.name)?;
        Ok((out, DenseCache { x: x.clone(), pre }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &Parameters,
        cache: &DenseCache,
        g_out: &DVector<f64>,
        grads: &mut Gradients,
    ) -> DVector<f64> {
        let g_pre = match self.act {
            Activation::Relu => g_out.zip_map(&cache.pre, |g, p| if p > 0.0 { g } else { 0.0 }),
            Activation::Linear => g_out.clone(),
        };
        grads.0[self.w].ger(1.0, &g_pre, &cache.x, 1.0);
        grads.0[self.b].column_mut(0).axpy(1.0, &g_pre, 1.0);
        params.value(self.w).tr_mul(&g_pre)
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    wz: usize,
    bz: usize,
    wr: usize,
    br: usize,
    wc: usize,
    bc: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    xh: DVector<f64>,
    h: DVector<f64>,
    z: DVector<f64>,
    r: DVector<f64>,
    c: DVector<f64>,
    xrh: DVector<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl GruCell {
    pub fn new<R: Rng>(
        params: &mut Parameters,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        mut rng: Option<&mut R>,
    ) -> Self {
        let cols = input_dim + hidden_dim;
        let mut weight = |gate: &str, params: &mut Parameters| {
            let w = match rng.as_deref_mut() {
                Some(rng) => uniform_init(hidden_dim, cols, rng),
                None => DMatrix::zeros(hidden_dim, cols),
            };
            let w = params.push(format!("{name}.w_{gate}"), w, false);
            let b = params.push(format!("{name}.b_{gate}"), DMatrix::zeros(hidden_dim, 1), true);
            (w, b)
        };
        let (wz, bz) = weight("z", params);
        let (wr, br) = weight("r", params);
        let (wc, bc) = weight("c", params);
        Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
            wz,
            bz,
            wr,
            br,
            wc,
            bc,
        }
    }

    pub fn forward(
        &self,
        params: &Parameters,
        x: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<(DVector<f64>, GruCache)> {
        if x.len() != self.input_dim || h.len() != self.hidden_dim {
            return Err(Error::invalid(format!(
                "{}: got input {} / hidden {}, expected {} / {}",
                self.name,
                x.len(),
                h.len(),
                self.input_dim,
                self.hidden_dim
            )));
        }
        let xh = concat(&[x, h]);
        let z = (params.value(self.wz) * &xh + params.value(self.bz).column(0)).map(sigmoid);
        let r = (params.value(self.wr) * &xh + params.value(self.br).column(0)).map(sigmoid);
        let xrh = concat(&[x, &r.component_mul(h)]);
        let c = (params.value(self.wc) * &xrh + params.value(self.bc).column(0)).map(f64::tanh);
        let out = h + z.component_mul(&(&c - h));
        check_finite(&out, &self.name)?;
        Ok((
            out,
            GruCache {
                xh,
                h: h.clone(),
                z,
                r,
                c,
                xrh,
            },
        ))
    }

    /// Returns `(g_x, g_h)`.
    pub fn backward(
        &self,
        params: &Parameters,
        cache: &GruCache,
        g_out: &DVector<f64>,
        grads: &mut Gradients,
    ) -> (DVector<f64>, DVector<f64>) {
        let n_in = self.input_dim;
        let n_h = self.hidden_dim;
        let GruCache { xh, h, z, r, c, xrh } = cache;

        let g_z = g_out.component_mul(&(c - h));
        let g_c = g_out.component_mul(z);
        let mut g_h = g_out.zip_map(z, |g, z| g * (1.0 - z));

        let g_ac = g_c.zip_map(c, |g, c| g * (1.0 - c * c));
        grads.0[self.wc].ger(1.0, &g_ac, xrh, 1.0);
        grads.0[self.bc].column_mut(0).axpy(1.0, &g_ac, 1.0);
        let g_xrh = params.value(self.wc).tr_mul(&g_ac);
        let mut g_x = g_xrh.rows(0, n_in).into_owned();
        let g_rh = g_xrh.rows(n_in, n_h);
        let g_r = g_rh.component_mul(h);
        g_h += g_rh.component_mul(r);

        let g_az = g_z.zip_map(z, |g, z| g * z * (1.0 - z));
        let g_ar = g_r.zip_map(r, |g, r| g * r * (1.0 - r));
        grads.0[self.wz].ger(1.0, &g_az, xh, 1.0);
        grads.0[self.bz].column_mut(0).axpy(1.0, &g_az, 1.0);
        grads.0[self.wr].ger(1.0, &g_ar, xh, 1.0);
        grads.0[self.br].column_mut(0).axpy(1.0, &g_ar, 1.0);
        let g_xh = params.value(self.wz).tr_mul(&g_az) + params.value(self.wr).tr_mul(&g_ar);
        g_x += g_xh.rows(0, n_in);
        g_h += g_xh.rows(n_in, n_h);
        (g_x, g_h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn randomize(params: &mut Parameters, rng: &mut ChaCha8Rng) {
        for p in &mut params.items {
            p.value.apply(|v| *v = rng.random_range(-0.8..0.8));
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d < 1e-12 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    #[test]
    fn zero_gru_halves_hidden() {
        let mut params = Parameters::default();
        let cell = GruCell::new::<ChaCha8Rng>(&mut params, "g", 2, 3, None);
        let h = DVector::from_vec(vec![0.4, -2.0, 1.0]);
        let (out, _) = cell.forward(&params, &DVector::from_vec(vec![5.0, -1.0]), &h).unwrap();
        assert_eq!(out, &h * 0.5);
        let (out, _) = cell.forward(&params, &DVector::zeros(2), &DVector::zeros(3)).unwrap();
        assert_eq!(out, DVector::zeros(3));
        assert!(cell.forward(&params, &DVector::zeros(3), &h).is_err());
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Parameters::default();
        let cell = GruCell::new(&mut params, "g", 3, 4, Some(&mut rng));
        randomize(&mut params, &mut rng);
        let x = rand_vec(3, &mut rng);
        let h = rand_vec(4, &mut rng);
        let w = rand_vec(4, &mut rng);
        let loss = |p: &Parameters, x: &DVector<f64>, h: &DVector<f64>| cell.forward(p, x, h).unwrap().0.dot(&w);

        let (_, cache) = cell.forward(&params, &x, &h).unwrap();
        let mut grads = params.zeros_like();
        let (gx, gh) = cell.backward(&params, &cache, &w, &mut grads);
        let eps = 1e-6;
        for i in 0..params.scalar_count() {
            let v = params.flat_get(i);
            let mut p = params.clone();
            p.flat_set(i, v + eps);
            let up = loss(&p, &x, &h);
            p.flat_set(i, v - eps);
            let down = loss(&p, &x, &h);
            let fd = (up - down) / (2.0 * eps);
            assert!(rel_err(grads.flat_get(i), fd) < 1e-5, "param {i}: {} vs {fd}", grads.flat_get(i));
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&params, &xp, &h) - loss(&params, &xm, &h)) / (2.0 * eps);
            assert!(rel_err(gx[i], fd) < 1e-5);
        }
        for i in 0..4 {
            let mut hp = h.clone();
            hp[i] += eps;
            let mut hm = h.clone();
            hm[i] -= eps;
            let fd = (loss(&params, &x, &hp) - loss(&params, &x, &hm)) / (2.0 * eps);
            assert!(rel_err(gh[i], fd) < 1e-5);
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for act in [Activation::Relu, Activation::Linear] {
            let mut params = Parameters::default();
            let layer = Dense::new(&mut params, "d", 4, 5, act, Some(&mut rng));
            randomize(&mut params, &mut rng);
            let x = rand_vec(4, &mut rng);
            let w = rand_vec(5, &mut rng);
            let (_, cache) = layer.forward(&params, &x).unwrap();
            let mut grads = params.zeros_like();
            let gx = layer.backward(&params, &cache, &w, &mut grads);
            let loss = |p: &Parameters, x: &DVector<f64>| layer.forward(p, x).unwrap().0.dot(&w);
            let eps = 1e-6;
            for i in 0..params.scalar_count() {
                let v = params.flat_get(i);
                let mut p = params.clone();
                p.flat_set(i, v + eps);
                let up = loss(&p, &x);
                p.flat_set(i, v - eps);
                let fd = (up - loss(&p, &x)) / (2.0 * eps);
                assert!(rel_err(grads.flat_get(i), fd) < 1e-5);
            }
            for i in 0..4 {
                let mut xp = x.clone();
                xp[i] += eps;
                let mut xm = x.clone();
                xm[i] -= eps;
                let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps);
                assert!(rel_err(gx[i], fd) < 1e-5);
            }
        }
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Parameters::default();
        let layer = Dense::new(&mut params, "d", 16, 8, Activation::Relu, Some(&mut rng));
        assert!(params.value(layer.weight_id()).amax() <= 0.25);
        assert_eq!(params.value(layer.bias_id()).amax(), 0.0);
        assert_eq!(params.items[0].dims(), vec![8, 16]);
        assert_eq!(params.items[1].dims(), vec![8]);
    }
}
