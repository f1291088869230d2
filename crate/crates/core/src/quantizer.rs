//! 1-bit ADC banks with dithering thresholds, and the averaging projection
//! used by the reduced filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Element-wise comparator: `+1` where `y > tau`, `-1` otherwise (ties included).
pub fn quantize_1bit(y: &DVector<f64>, tau: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != tau.len() {
        return Err(Error::invalid(format!(
            "measurement has {} entries but threshold has {}",
            y.len(),
            tau.len()
        )));
    }
    Ok(y.zip_map(tau, |yi, ti| if yi > ti { 1.0 } else { -1.0 }))
}

/// Threshold that centers the quantizer input: the predicted measurement.
pub fn dither_threshold(prediction: &DVector<f64>) -> DVector<f64> {
    prediction.clone()
}

/// Convert a variance in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(v: f64) -> f64 {
    10.0 * v.log10()
}

/// A bank of comparators, `adc_per_feature` duplicates of each base feature,
/// stacked block-wise (all features, then all features again, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct AdcBank {
    features: usize,
    adc_per_feature: usize,
    noise_variances: DVector<f64>,
    threshold: DVector<f64>,
}

impl AdcBank {
    pub fn new(features: usize, adc_per_feature: usize, noise_variances: DVector<f64>) -> Result<Self> {
        if features == 0 || adc_per_feature == 0 {
            return Err(Error::invalid("ADC bank needs at least one feature and one ADC per feature"));
        }
        let n = features * adc_per_feature;
        if noise_variances.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} noise variances, got {}",
                noise_variances.len()
            )));
        }
        if noise_variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("ADC noise variances must be finite and > 0"));
        }
        Ok(Self {
            features,
            adc_per_feature,
            noise_variances,
            threshold: DVector::zeros(n),
        })
    }

    /// All ADCs share the variance `r2`.
    pub fn identical(features: usize, adc_per_feature: usize, r2: f64) -> Result<Self> {
        Self::new(
            features,
            adc_per_feature,
            DVector::from_element(features * adc_per_feature, r2),
        )
    }

    /// Each ADC draws its variance independently, uniform in dB over `[low_db, high_db]`.
    pub fn heterogeneous<R: Rng>(
        features: usize,
        adc_per_feature: usize,
        low_db: f64,
        high_db: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(low_db <= high_db) {
            return Err(Error::invalid("heterogeneous noise range must satisfy low <= high"));
        }
        let n = features * adc_per_feature;
        let vars = DVector::from_fn(n, |_, _| {
            let db = if low_db == high_db { low_db } else { rng.random_range(low_db..high_db) };
            db_to_linear(db)
        });
        Self::new(features, adc_per_feature, vars)
    }

    pub fn len(&self) -> usize {
        self.noise_variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise_variances.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn adc_per_feature(&self) -> usize {
        self.adc_per_feature
    }

    /// Reduction ratio `a = 1 / adc_per_feature`.
    pub fn ratio(&self) -> f64 {
        1.0 / self.adc_per_feature as f64
    }

    pub fn noise_variances(&self) -> &DVector<f64> {
        &self.noise_variances
    }

    pub fn threshold(&self) -> &DVector<f64> {
        &self.threshold
    }

    pub fn set_threshold(&mut self, tau: DVector<f64>) -> Result<()> {
        if tau.len() != self.len() {
            return Err(Error::invalid("threshold length does not match the ADC count"));
        }
        self.threshold = tau;
        Ok(())
    }

    /// Set the dither threshold to `prediction` and quantize `y` against it.
    pub fn observe(&mut self, y: &DVector<f64>, prediction: &DVector<f64>) -> Result<DVector<f64>> {
        self.set_threshold(dither_threshold(prediction))?;
        quantize_1bit(y, &self.threshold)
    }

    pub fn projection(&self) -> ProjectionOperator {
        ProjectionOperator {
            copies: self.adc_per_feature,
            reduced_dim: self.features,
        }
    }
}

/// `A = a · 1ᵀ_{1/a} ⊗ I_{an}`: averages the duplicate ADCs of each feature.
///
/// The dense matrix is never needed by the filters; products are formed from
/// the Kronecker structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionOperator {
    copies: usize,
    reduced_dim: usize,
}

/// Build the averaging projection for ratio `a` acting on `n` observations.
pub fn build_projection(a: f64, n: usize) -> Result<ProjectionOperator> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::invalid(format!("reduction ratio must lie in (0, 1], got {a}")));
    }
    let inv = 1.0 / a;
    let copies = inv.round();
    if (inv - copies).abs() > 1e-9 * inv {
        return Err(Error::invalid(format!("1/a = {inv} is not an integer")));
    }
    let reduced = a * n as f64;
    let reduced_dim = reduced.round();
    if (reduced - reduced_dim).abs() > 1e-9 * (1.0 + reduced) || reduced_dim < 1.0 {
        return Err(Error::invalid(format!("a·n = {reduced} is not a positive integer")));
    }
    let copies = copies as usize;
    let reduced_dim = reduced_dim as usize;
    if copies * reduced_dim != n {
        return Err(Error::invalid("n is not a multiple of 1/a"));
    }
    Ok(ProjectionOperator { copies, reduced_dim })
}

impl ProjectionOperator {
    pub fn identity(n: usize) -> Self {
        Self { copies: 1, reduced_dim: n }
    }

    pub fn ratio(&self) -> f64 {
        1.0 / self.copies as f64
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    /// Output dimension `a·n`.
    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    /// Input dimension `n`.
    pub fn full_dim(&self) -> usize {
        self.copies * self.reduced_dim
    }

    pub fn is_identity(&self) -> bool {
        self.copies == 1
    }

    /// Dense `(a·n) × n` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let a = self.ratio();
        let k = self.reduced_dim;
        DMatrix::from_fn(k, self.full_dim(), |i, j| if j % k == i { a } else { 0.0 })
    }

    /// `A·r`.
    pub fn apply(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(r.len())?;
        if self.copies == 1 {
            return Ok(r.clone());
        }
        let k = self.reduced_dim;
        let a = self.ratio();
        let mut out = DVector::zeros(k);
        for (i, v) in r.iter().enumerate() {
            out[i % k] += v;
        }
        Ok(out * a)
    }

    /// `A·M` for an `n × c` matrix.
    pub fn apply_rows(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(m.nrows())?;
        let k = self.reduced_dim;
        let mut out = DMatrix::zeros(k, m.ncols());
        for block in 0..self.copies {
            out += m.rows(block * k, k);
        }
        Ok(out * self.ratio())
    }

    /// `A·S·Aᵀ` for an `n × n` matrix.
    pub fn project_square(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if !s.is_square() {
            return Err(Error::invalid("projected matrix must be square"));
        }
        self.check_rows(s.nrows())?;
        let k = self.reduced_dim;
        let mut out = DMatrix::zeros(k, k);
        for bi in 0..self.copies {
            for bj in 0..self.copies {
                out += s.view((bi * k, bj * k), (k, k));
            }
        }
        let a = self.ratio();
        Ok(out * (a * a))
    }

    fn check_rows(&self, n: usize) -> Result<()> {
        if n != self.full_dim() {
            return Err(Error::invalid(format!(
                "projection expects {} rows, got {n}",
                self.full_dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_1bit(&dv(&[0.5, -0.2]), &dv(&[0.0, 0.0])).unwrap(), dv(&[1.0, -1.0]));
        let y = dv(&[1.5, -2.0, 0.0]);
        assert_eq!(quantize_1bit(&y, &y).unwrap(), dv(&[-1.0, -1.0, -1.0]));
        assert_eq!(
            quantize_1bit(&dv(&[3.0, -3.0, 0.1]), &dv(&[2.0, -4.0, 0.1])).unwrap(),
            dv(&[1.0, 1.0, -1.0])
        );
        assert!(matches!(
            quantize_1bit(&dv(&[1.0]), &dv(&[1.0, 2.0])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dither_examples() {
        assert_eq!(dither_threshold(&dv(&[0.0, 0.0])), dv(&[0.0, 0.0]));
        assert_eq!(dither_threshold(&dv(&[5.0, -5.0])), dv(&[5.0, -5.0]));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(build_projection(1.0, 3).unwrap().matrix(), DMatrix::<f64>::identity(3, 3));
        assert_eq!(
            build_projection(0.5, 4).unwrap().matrix(),
            DMatrix::from_row_slice(2, 4, &[0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5])
        );
        assert_eq!(
            build_projection(0.25, 4).unwrap().matrix(),
            DMatrix::from_row_slice(1, 4, &[0.25; 4])
        );
        assert!(build_projection(0.3, 3).is_err());
        assert!(build_projection(0.5, 3).is_err());
        assert!(build_projection(0.0, 3).is_err());
    }

    #[test]
    fn structured_products_match_dense() {
        let p = build_projection(0.25, 12).unwrap();
        let a = p.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = DMatrix::from_fn(12, 12, |_, _| StandardNormal.sample(&mut rng));
        let m = DMatrix::from_fn(12, 5, |_, _| StandardNormal.sample(&mut rng));
        let r = DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng));
        assert!((p.project_square(&s).unwrap() - &a * &s * a.transpose()).amax() < 1e-12);
        assert!((p.apply_rows(&m).unwrap() - &a * &m).amax() < 1e-12);
        assert!((p.apply(&r).unwrap() - &a * &r).amax() < 1e-12);
        // A·Aᵀ = a·I, A·1 = 1
        assert!((&a * a.transpose() - DMatrix::<f64>::identity(3, 3) * 0.25).amax() < 1e-15);
        assert!((p.apply(&DVector::from_element(12, 1.0)).unwrap() - DVector::from_element(3, 1.0)).amax() < 1e-15);
    }

    #[test]
    fn heterogeneous_bank_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank = AdcBank::heterogeneous(3, 64, -20.0, -10.0, &mut rng).unwrap();
        assert_eq!(bank.len(), 192);
        assert!(bank.noise_variances().iter().all(|&v| (0.01..=0.1).contains(&v)));
        assert_eq!(bank.projection().reduced_dim(), 3);
    }

    /// With the exact predictive mean as threshold, the quantizer input has zero mean.
    #[test]
    fn dithered_input_is_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        let mut x: f64 = 0.0;
        for _ in 0..n {
            // AR(1) state, measurement y = x' + v; prediction uses the true model
            let pred = 0.9 * x;
            let w: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            x = pred + 0.3 * w;
            let y = x + 0.5 * v;
            let z = y - dither_threshold(&dv(&[pred]))[0];
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    proptest::proptest! {
        #[test]
        fn quantizer_emits_only_signs(y in proptest::collection::vec(-1e3f64..1e3, 1..20), shift in -10f64..10.0) {
            let y = DVector::from_vec(y);
            let tau = DVector::from_element(y.len(), shift);
            let r = quantize_1bit(&y, &tau).unwrap();
            proptest::prop_assert!(r.iter().all(|&v| v == 1.0 || v == -1.0));
        }

        #[test]
        fn projection_rows_sum_to_one(copies in 1usize..16, k in 1usize..8) {
            let p = build_projection(1.0 / copies as f64, copies * k).unwrap();
            let a = p.matrix();
            for i in 0..k {
                let row = a.row(i);
                proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                proptest::prop_assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), copies);
            }
        }
    }
}
