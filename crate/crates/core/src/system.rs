//! Everything fixed once a configuration is chosen: dictionaries, the pilot
//! combiner, the measurement operator and the estimator views built on it.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::config::SystemConfig;
use crate::dictionaries::{build_dictionaries, AngularMode, DictionarySet};
use crate::error::Result;
use crate::measurement::{assemble_operator, draw_combiner, observe, MeasurementOperator, Observation, PilotCombiner};
use crate::rng::{substream, Stream};
use crate::sbl::Estimator;

#[derive(Debug, Clone)]
pub struct System {
    pub cfg: SystemConfig,
    pub dicts: DictionarySet,
    pub combiner: PilotCombiner,
    pub op: MeasurementOperator,
    pub estimator: Estimator,
}

impl System {
    /// Frequency-dependent dictionaries; one combiner drawn from the pilot
    /// stream of `cfg.rng_seed`, shared by every sample.
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Self::with_mode(cfg, AngularMode::FrequencyDependent)
    }

    pub fn with_mode(cfg: &SystemConfig, mode: AngularMode) -> Result<Self> {
        cfg.validate()?;
        let dicts = build_dictionaries(cfg, mode);
        let combiner = draw_combiner(cfg, &mut substream(cfg.rng_seed, Stream::Pilot, &[]))?;
        let op = assemble_operator(cfg, &combiner, &dicts)?;
        let estimator = Estimator::new(&op);
        Ok(Self {
            cfg: cfg.clone(),
            dicts,
            combiner,
            op,
            estimator,
        })
    }

    /// Same operator, different noise level.
    pub fn with_noise_var(&self, noise_var: f64) -> Self {
        let mut s = self.clone();
        s.cfg.noise_var = noise_var;
        s
    }

    pub fn observe<R: Rng + ?Sized>(&self, h: &DMatrix<Complex64>, rng: &mut R) -> Observation {
        observe(&self.cfg, &self.combiner, &self.op, h, rng)
    }
}
