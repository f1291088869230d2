//! Fixtures shared by the criterion benches.

use bkf_core::datagen::SequencePair;
use bkf_core::experiment::{bit_model, experiment_data, initial_covariance};
use bkf_core::filters::{bkf_predict, bkf_update, FilterState, PriorBundle};
use bkf_core::ssmodel::AdcReplicated;
use bkf_core::{AdcBank, ExperimentConfig, NoiseSpec, ProjectionOperator, Result};
use nalgebra::{DMatrix, DVector};

/// A Lorenz problem at one ADC count, advanced a few steps so the
/// covariance is no longer the initial diagonal.
pub struct Fixture {
    pub model: AdcReplicated,
    pub bank: AdcBank,
    pub projection: ProjectionOperator,
    pub sequence: SequencePair,
    pub sigma0: DMatrix<f64>,
    pub state: FilterState,
    pub y: DVector<f64>,
}

impl Fixture {
    pub fn lorenz(adc: usize, length: usize) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            noise: NoiseSpec::identical(10.0, -20.0),
            ..ExperimentConfig::default()
        };
        cfg.data.test_count = 1;
        cfg.data.test_length = length.max(11);
        let data = experiment_data(&cfg, adc, false)?;
        let model = bit_model(&cfg, &data.bank)?;
        let sigma0 = initial_covariance(&cfg);
        let sequence = data.test.sequences[0].clone();
        let mut bank = data.bank.clone();
        let mut state = FilterState::new(sequence.initial_estimate.clone(), sigma0.clone())?;
        for t in 0..10 {
            let prior = bkf_predict(&state, &model)?;
            let r = bank.observe(&sequence.measurement(t), &prior.y_prior)?;
            state = bkf_update(&prior, &r)?;
        }
        Ok(Self {
            projection: data.bank.projection(),
            y: sequence.measurement(10),
            model,
            bank,
            sequence,
            sigma0,
            state,
        })
    }

    /// Bits observed against `prior`'s predicted measurement.
    pub fn bits(&self, prior: &PriorBundle) -> Result<DVector<f64>> {
        self.bank.clone().observe(&self.y, &prior.y_prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_has_the_requested_adc_count() {
        let f = Fixture::lorenz(4, 20).unwrap();
        assert_eq!(f.bank.len(), 12);
        assert_eq!(f.projection.reduced_dim(), 3);
        assert!(f.state.covariance_ok());
    }
}
