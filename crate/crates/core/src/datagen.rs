//! Synthetic dataset generation, NCLT-style CSV ingestion, the on-disk
//! dataset container and the MSE metric.
//!
//! A dataset is a directory holding `meta.json` plus one binary blob per
//! sequence:
//!
//! ```text
//! "SEQD1\0"                      6 bytes
//! T, m, n, stream                4 × u64 LE
//! x0 (m), x̂0 (m), X (T·m), Y (T·n)   f64 LE, row-major
//! FNV-1a-64 of the value bytes   u64 LE
//! ```
//!
//! Quantized observations are never stored: they depend on the estimator's
//! own dither trajectory and are produced online.

use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fnv::FnvHasher;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::quantizer::{db_to_linear, AdcBank};
use crate::ssmodel::{
    wiener_velocity_model, AdcReplicated, LorenzModel, LorenzParams, SharedModel, StateSpaceModel, WienerVelocityParams,
};

pub const SEQUENCE_MAGIC: &[u8; 6] = b"SEQD1\0";
const SEQUENCE_MAGIC_STEM: &[u8; 4] = b"SEQD";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Ground truth and pre-quantization measurements for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    /// RNG stream this sequence was drawn from.
    pub stream: u64,
    pub initial_state: DVector<f64>,
    /// `x̂_{0|0}` shared by every estimator run on this sequence.
    pub initial_estimate: DVector<f64>,
    /// `T × m`, row `t` holds `x_{t+1}`.
    pub states: DMatrix<f64>,
    /// `T × n`, row `t` holds `y_{t+1}`.
    pub measurements: DMatrix<f64>,
}

impl SequencePair {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        self.states.row(t).transpose()
    }

    pub fn measurement(&self, t: usize) -> DVector<f64> {
        self.measurements.row(t).transpose()
    }

    /// The sequence as seen by one ADC per feature (first block of columns).
    pub fn first_replica(&self, features: usize) -> SequencePair {
        SequencePair {
            measurements: self.measurements.columns(0, features).into_owned(),
            ..self.clone()
        }
    }

    /// First `len` steps.
    pub fn truncated(&self, len: usize) -> SequencePair {
        let len = len.min(self.len());
        SequencePair {
            states: self.states.rows(0, len).into_owned(),
            measurements: self.measurements.rows(0, len).into_owned(),
            ..self.clone()
        }
    }
}

/// Process and measurement noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Process variance q² in dB. Takes precedence over `snr_db`.
    pub q2_db: Option<f64>,
    /// Identical per-ADC measurement variance r² in dB.
    pub r2_db: Option<f64>,
    /// Heterogeneous case: per-ADC variance uniform in dB over `[low, high]`.
    pub r2_range_db: Option<[f64; 2]>,
    /// ν = q²/r² in dB, used to derive q² when `q2_db` is absent.
    pub snr_db: Option<f64>,
}

impl NoiseSpec {
    /// `1/r² = inv_r2_db`, `ν = snr_db` with identical ADC noise.
    pub fn identical(inv_r2_db: f64, snr_db: f64) -> Self {
        Self {
            r2_db: Some(-inv_r2_db),
            snr_db: Some(snr_db),
            ..Self::default()
        }
    }

    pub fn heterogeneous(q2_db: f64, low_db: f64, high_db: f64) -> Self {
        Self {
            q2_db: Some(q2_db),
            r2_range_db: Some([low_db, high_db]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.r2_db, self.r2_range_db) {
            (Some(_), Some(_)) => return Err(Error::Config("set either r2_db or r2_range_db, not both".into())),
            (None, None) => return Err(Error::Config("measurement noise (r2_db or r2_range_db) is required".into())),
            (None, Some([lo, hi])) if !(lo <= hi) => {
                return Err(Error::Config("r2_range_db must satisfy low <= high".into()))
            }
            _ => {}
        }
        if self.q2_db.is_none() && (self.snr_db.is_none() || self.r2_db.is_none()) {
            return Err(Error::Config("q2_db, or snr_db together with r2_db, is required".into()));
        }
        Ok(())
    }

    /// Linear process variance q².
    pub fn q2(&self) -> Result<f64> {
        self.validate()?;
        match (self.q2_db, self.snr_db, self.r2_db) {
            (Some(q), _, _) => Ok(db_to_linear(q)),
            (None, Some(snr), Some(r)) => Ok(db_to_linear(r) * db_to_linear(snr)),
            _ => unreachable!("validated above"),
        }
    }

    /// Nominal linear r² (midpoint in dB for the heterogeneous case).
    pub fn nominal_r2(&self) -> Result<f64> {
        self.validate()?;
        Ok(match (self.r2_db, self.r2_range_db) {
            (Some(r), _) => db_to_linear(r),
            (None, Some([lo, hi])) => db_to_linear(0.5 * (lo + hi)),
            _ => unreachable!("validated above"),
        })
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.r2_range_db.is_some()
    }

    /// ADC bank for `features × adc_per_feature` comparators.
    pub fn build_bank<R: Rng>(&self, features: usize, adc_per_feature: usize, rng: &mut R) -> Result<AdcBank> {
        self.validate()?;
        match (self.r2_db, self.r2_range_db) {
            (Some(r), _) => AdcBank::identical(features, adc_per_feature, db_to_linear(r)),
            (None, Some([lo, hi])) => AdcBank::heterogeneous(features, adc_per_feature, lo, hi, rng),
            _ => unreachable!("validated above"),
        }
    }
}

/// Sampling settings shared by every sequence of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub count: usize,
    pub length: usize,
    /// Noise-free steps run before recording, to land on the attractor.
    pub burn_in: usize,
    /// `x0` is uniform on the box `[init_low, init_high]`.
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
    /// Std of the Gaussian perturbation giving `x̂_{0|0}` from `x0`.
    pub init_estimate_std: f64,
    pub master_seed: u64,
}

impl GenerationSpec {
    pub fn lorenz(count: usize, length: usize, master_seed: u64) -> Self {
        Self {
            count,
            length,
            burn_in: 1000,
            init_low: vec![-10.0, -10.0, 10.0],
            init_high: vec![10.0, 10.0, 40.0],
            init_estimate_std: 0.1,
            master_seed,
        }
    }

    /// Wiener-velocity sequences start uniformly in `[-1, 1]` per coordinate
    /// with no burn-in.
    pub fn wiener(axes: usize, count: usize, length: usize, master_seed: u64) -> Self {
        Self {
            count,
            length,
            burn_in: 0,
            init_low: vec![-1.0; 3 * axes],
            init_high: vec![1.0; 3 * axes],
            init_estimate_std: 0.1,
            master_seed,
        }
    }
}

/// Dataset-level metadata, persisted as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub model: String,
    pub count: usize,
    pub length: usize,
    pub state_dim: usize,
    pub meas_dim: usize,
    pub dt: f64,
    pub q2: f64,
    pub adc_per_feature: usize,
    pub features: usize,
    /// Per-ADC measurement variances used to draw `Y`.
    pub noise_variances: Vec<f64>,
    pub generation: Option<GenerationSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub meta: DatasetMeta,
    pub sequences: Vec<SequencePair>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// ADC bank matching the recorded per-ADC variances.
    pub fn adc_bank(&self) -> Result<AdcBank> {
        AdcBank::new(
            self.meta.features,
            self.meta.adc_per_feature,
            DVector::from_vec(self.meta.noise_variances.clone()),
        )
    }
}

fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(rng));
    factor * e
}

/// Simulate `spec.count` sequences from `model`. Sequence `i` uses RNG stream
/// `i + 1` of `spec.master_seed`; the result is a pure function of its inputs.
pub fn generate_dataset(
    model: &dyn StateSpaceModel,
    spec: &GenerationSpec,
    mut meta: DatasetMeta,
) -> Result<SequenceDataset> {
    let m = model.state_dim();
    let n = model.meas_dim();
    if spec.init_low.len() != m || spec.init_high.len() != m {
        return Err(Error::invalid("initial-state box does not match the state dimension"));
    }
    if spec.init_low.iter().zip(&spec.init_high).any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid("initial-state box must satisfy low <= high"));
    }
    let q_factor = psd_factor(model.process_noise());
    let r_factor = psd_factor(model.measurement_noise());
    let est_std = spec.init_estimate_std;
    let mut sequences = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let stream = i as u64 + 1;
        let mut rng = stream_rng(spec.master_seed, stream);
        let mut x = DVector::from_fn(m, |k, _| {
            let (lo, hi) = (spec.init_low[k], spec.init_high[k]);
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        });
        for _ in 0..spec.burn_in {
            x = model.f(&x);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("burn-in diverged for sequence {i}")));
        }
        let initial_state = x.clone();
        let initial_estimate = &x + DVector::from_fn(m, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); est_std * z });
        let mut states = DMatrix::zeros(spec.length, m);
        let mut measurements = DMatrix::zeros(spec.length, n);
        for t in 0..spec.length {
            x = model.f(&x) + gaussian(&mut rng, &q_factor);
            let y = model.h(&x) + gaussian(&mut rng, &r_factor);
            states.set_row(t, &x.transpose());
            measurements.set_row(t, &y.transpose());
        }
        sequences.push(SequencePair {
            stream,
            initial_state,
            initial_estimate,
            states,
            measurements,
        });
    }
    meta.format_version = DATASET_FORMAT_VERSION;
    meta.count = spec.count;
    meta.length = spec.length;
    meta.state_dim = m;
    meta.meas_dim = n;
    meta.generation = Some(spec.clone());
    Ok(SequenceDataset { meta, sequences })
}

/// Lorenz dataset observed through `adc_per_feature` duplicate ADCs per
/// coordinate. Heterogeneous ADC variances are drawn from stream 0 of
/// `master_seed`.
pub fn generate_lorenz_dataset(
    count: usize,
    length: usize,
    noise: &NoiseSpec,
    lorenz: &LorenzParams,
    adc_per_feature: usize,
    master_seed: u64,
) -> Result<SequenceDataset> {
    let spec = GenerationSpec::lorenz(count, length, master_seed);
    generate_lorenz_with(&spec, noise, lorenz, adc_per_feature)
}

pub fn generate_lorenz_with(
    spec: &GenerationSpec,
    noise: &NoiseSpec,
    lorenz: &LorenzParams,
    adc_per_feature: usize,
) -> Result<SequenceDataset> {
    let bank = noise.build_bank(3, adc_per_feature, &mut stream_rng(spec.master_seed, 0))?;
    generate_lorenz_with_bank(spec, noise.q2()?, lorenz, &bank)
}

/// Lorenz dataset observed through a given ADC bank.
pub fn generate_lorenz_with_bank(
    spec: &GenerationSpec,
    q2: f64,
    lorenz: &LorenzParams,
    bank: &AdcBank,
) -> Result<SequenceDataset> {
    if bank.features() != 3 {
        return Err(Error::invalid("lorenz observations need an ADC bank with 3 features"));
    }
    let nominal = bank.noise_variances()[0];
    let base: SharedModel = Arc::new(LorenzModel::new(*lorenz, q2, nominal)?);
    let truth = AdcReplicated::new(base, bank.adc_per_feature(), bank.noise_variances())?;
    generate_dataset(&truth, spec, bank_meta("lorenz", lorenz.dt, q2, bank))
}

/// Multi-axis Wiener-velocity dataset observed through `bank`, one feature
/// per axis.
pub fn generate_wiener_with_bank(
    spec: &GenerationSpec,
    params: &WienerVelocityParams,
    bank: &AdcBank,
) -> Result<SequenceDataset> {
    if bank.features() != params.axes {
        return Err(Error::invalid("wiener observations need one ADC feature per axis"));
    }
    let base: SharedModel = Arc::new(wiener_velocity_model(params)?);
    let truth = AdcReplicated::new(base, bank.adc_per_feature(), bank.noise_variances())?;
    generate_dataset(&truth, spec, bank_meta("wiener", params.dt, params.q2, bank))
}

fn bank_meta(model: &str, dt: f64, q2: f64, bank: &AdcBank) -> DatasetMeta {
    DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        model: model.into(),
        count: 0,
        length: 0,
        state_dim: 0,
        meas_dim: 0,
        dt,
        q2,
        adc_per_feature: bank.adc_per_feature(),
        features: bank.features(),
        noise_variances: bank.noise_variances().iter().copied().collect(),
        generation: None,
    }
}

/// `10·log10` of the mean squared error over every sequence, step and state
/// element. Exact zero error gives `-∞`.
pub fn mse_db(estimates: &[DMatrix<f64>], truths: &[DMatrix<f64>]) -> Result<f64> {
    let (total, steps, dim) = squared_error(estimates, truths)?;
    Ok(crate::quantizer::linear_to_db(total / (steps * dim.max(1)) as f64))
}

/// As [`mse_db`] but averaging the squared norm `‖x − x̂‖²` per step, which
/// is larger by `10·log10(m)` dB.
pub fn mse_db_per_step(estimates: &[DMatrix<f64>], truths: &[DMatrix<f64>]) -> Result<f64> {
    let (total, steps, _) = squared_error(estimates, truths)?;
    Ok(crate::quantizer::linear_to_db(total / steps as f64))
}

fn squared_error(estimates: &[DMatrix<f64>], truths: &[DMatrix<f64>]) -> Result<(f64, usize, usize)> {
    if estimates.len() != truths.len() {
        return Err(Error::invalid("estimate and truth sequence counts differ"));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    let mut dim = None;
    for (e, x) in estimates.iter().zip(truths) {
        if e.shape() != x.shape() || dim.is_some_and(|d| d != e.ncols()) {
            return Err(Error::invalid(format!(
                "estimate shape {:?} does not match truth shape {:?}",
                e.shape(),
                x.shape()
            )));
        }
        dim = Some(e.ncols());
        total += (e - x).norm_squared();
        steps += e.nrows();
    }
    if steps == 0 {
        return Err(Error::invalid("no steps to average"));
    }
    Ok((total, steps, dim.unwrap_or(1)))
}

/// Render an MSE in dB, using "< -300 dB" for the exact-zero sentinel.
pub fn format_db(v: f64) -> String {
    if v == f64::NEG_INFINITY || v < -300.0 {
        "< -300 dB".to_string()
    } else {
        format!("{v:.2} dB")
    }
}

// ---------------------------------------------------------------------------
// Binary container

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn encode_sequence(seq: &SequencePair) -> Vec<u8> {
    let (t, m) = seq.states.shape();
    let n = seq.measurements.ncols();
    let mut out = Vec::with_capacity(6 + 32 + 8 * (2 * m + t * (m + n)) + 8);
    out.extend_from_slice(SEQUENCE_MAGIC);
    for d in [t as u64, m as u64, n as u64, seq.stream] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    let values_start = out.len();
    let push_row_major = |out: &mut Vec<u8>, mat: &DMatrix<f64>| {
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                out.extend_from_slice(&mat[(r, c)].to_le_bytes());
            }
        }
    };
    for v in seq.initial_state.iter().chain(seq.initial_estimate.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_row_major(&mut out, &seq.states);
    push_row_major(&mut out, &seq.measurements);
    let checksum = fnv1a(&out[values_start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

fn decode_sequence(bytes: &[u8], origin: &str) -> Result<SequencePair> {
    if bytes.len() < 4 || &bytes[..4] != SEQUENCE_MAGIC_STEM {
        return Err(Error::Format(format!("{origin}: not a sequence blob")));
    }
    if bytes.len() < 6 || &bytes[..6] != SEQUENCE_MAGIC {
        return Err(Error::Version(format!(
            "{origin}: sequence magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..bytes.len().min(6)]),
            String::from_utf8_lossy(SEQUENCE_MAGIC)
        )));
    }
    if bytes.len() < 6 + 32 {
        return Err(Error::Checksum(format!("{origin}: truncated header")));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap());
    let (t, m, n, stream) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    let values = 2usize
        .checked_mul(m)
        .and_then(|a| t.checked_mul(m + n).map(|b| a + b))
        .ok_or_else(|| Error::Format(format!("{origin}: dimensions overflow")))?;
    let start = 6 + 32;
    let end = start + 8 * values;
    if bytes.len() != end + 8 {
        return Err(Error::Checksum(format!(
            "{origin}: expected {} bytes, found {}",
            end + 8,
            bytes.len()
        )));
    }
    let stored = u64::from_le_bytes(bytes[end..end + 8].try_into().unwrap());
    if fnv1a(&bytes[start..end]) != stored {
        return Err(Error::Checksum(origin.to_string()));
    }
    let mut vals = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |k: usize| -> Vec<f64> { (&mut vals).take(k).collect() };
    let initial_state = DVector::from_vec(take(m));
    let initial_estimate = DVector::from_vec(take(m));
    let states = DMatrix::from_row_slice(t, m, &take(t * m));
    let measurements = DMatrix::from_row_slice(t, n, &take(t * n));
    Ok(SequencePair {
        stream,
        initial_state,
        initial_estimate,
        states,
        measurements,
    })
}

fn blob_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq_{i:05}.bin"))
}

/// Write `ds` into directory `dir` (created if missing).
pub fn write_dataset(dir: &Path, ds: &SequenceDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = ds.meta.clone();
    meta.count = ds.sequences.len();
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), json)?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        fs::write(blob_path(dir, i), encode_sequence(seq))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SequenceDataset> {
    let text = fs::read_to_string(dir.join("meta.json"))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version(format!(
            "dataset format version {}, expected {DATASET_FORMAT_VERSION}",
            meta.format_version
        )));
    }
    let mut sequences = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let path = blob_path(dir, i);
        let bytes = fs::read(&path)?;
        sequences.push(decode_sequence(&bytes, &path.display().to_string())?);
    }
    Ok(SequenceDataset { meta, sequences })
}

// ---------------------------------------------------------------------------
// NCLT-style CSV ingestion

const NCLT_COLUMNS: [&str; 7] = ["timestamp_s", "x", "y", "vx", "vy", "ax", "ay"];

/// Load a pre-extracted trajectory CSV (`timestamp_s, x, y, vx, vy, ax, ay`),
/// resample it on a grid of spacing `dt` by nearest timestamp and split it
/// into sequences of `seq_len` steps, dropping the remainder.
///
/// States use the layout `(x, vx, ax, y, vy, ay)`; measurements are the
/// odometry velocities `(vx, vy)`. Row numbers in errors are 1-based file
/// lines (the header is line 1).
pub fn load_nclt(path: &Path, dt: f64, seq_len: usize) -> Result<SequenceDataset> {
    if !(dt > 0.0) || seq_len == 0 {
        return Err(Error::invalid("dt must be > 0 and the sequence length >= 1"));
    }
    let text = fs::read_to_string(path)?;
    let empty = |meta| SequenceDataset { meta, sequences: Vec::new() };
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        model: "nclt".into(),
        count: 0,
        length: seq_len,
        state_dim: 6,
        meas_dim: 2,
        dt,
        q2: 0.0,
        adc_per_feature: 1,
        features: 2,
        noise_variances: Vec::new(),
        generation: None,
    };
    if text.trim().is_empty() {
        log::warn!("{}: empty trajectory file, no sequences produced", path.display());
        return Ok(empty(meta));
    }

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest { row: 1, msg: e.to_string() })?
        .clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(NCLT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingest { row: 1, msg: format!("missing column {name:?}") })?;
    }

    let mut times = Vec::new();
    let mut rows: Vec<[f64; 6]> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Ingest { row: line, msg: e.to_string() })?;
        let mut vals = [0.0; 7];
        for (v, &col) in vals.iter_mut().zip(&index) {
            let field = record
                .get(col)
                .ok_or_else(|| Error::Ingest { row: line, msg: "short row".into() })?;
            *v = field
                .parse::<f64>()
                .map_err(|_| Error::Ingest { row: line, msg: format!("cannot parse {field:?}") })?;
            if !v.is_finite() {
                return Err(Error::Ingest { row: line, msg: "non-finite value".into() });
            }
        }
        if let Some(&prev) = times.last() {
            if vals[0] <= prev {
                return Err(Error::Ingest {
                    row: line,
                    msg: format!("timestamp {} does not increase (previous {prev})", vals[0]),
                });
            }
        }
        times.push(vals[0]);
        // (x, vx, ax, y, vy, ay)
        rows.push([vals[1], vals[3], vals[5], vals[2], vals[4], vals[6]]);
    }
    if times.is_empty() {
        log::warn!("{}: no data rows, no sequences produced", path.display());
        return Ok(empty(meta));
    }

    let half = 0.5 * dt * (1.0 + 1e-9);
    let t0 = times[0];
    let t_last = *times.last().unwrap();
    let mut picked = Vec::new();
    let mut idx = 0usize;
    let mut k = 0usize;
    loop {
        let g = t0 + k as f64 * dt;
        if g > t_last + half {
            break;
        }
        while idx + 1 < times.len() && (times[idx + 1] - g).abs() <= (times[idx] - g).abs() {
            idx += 1;
        }
        if (times[idx] - g).abs() > half {
            let offending = if times[idx] < g { idx + 1 } else { idx };
            return Err(Error::Ingest {
                row: offending.min(times.len() - 1) + 2,
                msg: format!("no sample within {:.3} s of grid time {g:.3} s", 0.5 * dt),
            });
        }
        picked.push(idx);
        k += 1;
    }

    let sequences: Vec<SequencePair> = picked
        .chunks_exact(seq_len)
        .enumerate()
        .map(|(i, chunk)| {
            let states = DMatrix::from_fn(seq_len, 6, |r, c| rows[chunk[r]][c]);
            let measurements = DMatrix::from_fn(seq_len, 2, |r, c| rows[chunk[r]][if c == 0 { 1 } else { 4 }]);
            let first: DVector<f64> = states.row(0).transpose();
            SequencePair {
                stream: i as u64,
                initial_state: first.clone(),
                initial_estimate: first,
                states,
                measurements,
            }
        })
        .collect();
    let mut meta = meta;
    meta.count = sequences.len();
    Ok(SequenceDataset { meta, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tiny_dataset() -> SequenceDataset {
        generate_lorenz_dataset(3, 20, &NoiseSpec::identical(10.0, -20.0), &LorenzParams::default(), 2, 99).unwrap()
    }

    #[test]
    fn mse_examples() {
        let x = vec![DMatrix::from_element(4, 1, 0.0)];
        let e = vec![DMatrix::from_element(4, 1, 1.0)];
        assert_eq!(mse_db(&e, &x).unwrap(), 0.0);
        let e = vec![DMatrix::from_element(4, 1, 0.1f64.sqrt())];
        assert!((mse_db(&e, &x).unwrap() + 10.0).abs() < 1e-12);
        assert_eq!(mse_db(&x, &x).unwrap(), f64::NEG_INFINITY);
        assert_eq!(format_db(f64::NEG_INFINITY), "< -300 dB");
        let bad = vec![DMatrix::from_element(3, 1, 0.0)];
        assert!(mse_db(&bad, &x).is_err());

        let x3 = vec![DMatrix::zeros(5, 3)];
        let e3 = vec![DMatrix::from_element(5, 3, 1.0)];
        assert_eq!(mse_db(&e3, &x3).unwrap(), 0.0);
        assert!((mse_db_per_step(&e3, &x3).unwrap() - 10.0 * 3f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn noise_spec_conventions() {
        let spec = NoiseSpec::identical(10.0, -20.0);
        assert!((spec.nominal_r2().unwrap() - 0.1).abs() < 1e-15);
        assert!((spec.q2().unwrap() - 1e-3).abs() < 1e-15);
        let het = NoiseSpec::heterogeneous(-30.0, -20.0, -10.0);
        assert!((het.q2().unwrap() - 1e-3).abs() < 1e-15);
        assert!(NoiseSpec::default().validate().is_err());
    }

    #[test]
    fn empty_dataset_has_meta() {
        let ds = generate_lorenz_dataset(0, 100, &NoiseSpec::identical(10.0, -20.0), &LorenzParams::default(), 1, 1)
            .unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.meta.model, "lorenz");
        assert_eq!(ds.meta.length, 100);
    }

    #[test]
    fn noise_free_generation_is_exact() {
        let model = LorenzModel::new(LorenzParams::default(), 0.0, 0.0).unwrap();
        let spec = GenerationSpec::lorenz(2, 50, 5);
        let meta = DatasetMeta {
            format_version: 1,
            model: "lorenz".into(),
            count: 0,
            length: 0,
            state_dim: 3,
            meas_dim: 3,
            dt: 0.02,
            q2: 0.0,
            adc_per_feature: 1,
            features: 3,
            noise_variances: vec![0.0; 3],
            generation: None,
        };
        let ds = generate_dataset(&model, &spec, meta).unwrap();
        for seq in &ds.sequences {
            assert_eq!(seq.states, seq.measurements);
            let mut x = seq.initial_state.clone();
            for t in 0..seq.len() {
                x = model.f(&x);
                assert_eq!(x, seq.state(t));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(tiny_dataset(), tiny_dataset());
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &tiny_dataset()).unwrap();
        write_dataset(b.path(), &tiny_dataset()).unwrap();
        for name in ["meta.json", "seq_00000.bin", "seq_00002.bin"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);

        let blob = blob_path(dir.path(), 1);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum(_))));

        let mut flipped = bytes.clone();
        flipped[60] ^= 0x01;
        fs::write(&blob, &flipped).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum(_))));

        let mut next = bytes.clone();
        next[4] = b'2';
        fs::write(&blob, &next).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Version(_))));
    }

    #[test]
    fn heterogeneous_bank_is_recorded() {
        let ds = generate_lorenz_dataset(1, 5, &NoiseSpec::heterogeneous(-30.0, -20.0, -10.0), &LorenzParams::default(), 8, 3)
            .unwrap();
        assert_eq!(ds.meta.noise_variances.len(), 24);
        assert_eq!(ds.sequences[0].measurements.ncols(), 24);
        let bank = ds.adc_bank().unwrap();
        assert_eq!(bank.adc_per_feature(), 8);
    }

    fn write_csv(rows: impl IntoIterator<Item = String>) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp_s, x, y, vx, vy, ax, ay").unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        f
    }

    #[test]
    fn nclt_sequence_count() {
        let f = write_csv((0..5150).map(|i| {
            let t = i as f64 + 0.01 * ((i % 7) as f64 - 3.0);
            format!("{t}, {i}, {}, 1.0, -1.0, 0.0, 0.0", 2 * i)
        }));
        let ds = load_nclt(f.path(), 1.0, 50).unwrap();
        assert_eq!(ds.len(), 103);
        let s = &ds.sequences[1];
        assert_eq!(s.states.ncols(), 6);
        assert_eq!(s.state(0).as_slice(), &[50.0, 1.0, 0.0, 100.0, -1.0, 0.0]);
        assert_eq!(s.measurement(0).as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn nclt_empty_and_errors() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_nclt(f.path(), 1.0, 50).unwrap().is_empty());

        let times = [0.0, 1.0, 2.0, 4.5, 5.5];
        let f = write_csv(times.iter().map(|t| format!("{t}, 0, 0, 0, 0, 0, 0")));
        match load_nclt(f.path(), 1.0, 2) {
            Err(Error::Ingest { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected gap error, got {other:?}"),
        }

        let f = write_csv(["0, 0, 0, 0, 0, 0, 0".into(), "2, 0, 0, 0, 0, 0, 0".into(), "1, 0, 0, 0, 0, 0, 0".into()]);
        assert!(matches!(load_nclt(f.path(), 1.0, 2), Err(Error::Ingest { row: 4, .. })));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "timestamp_s,x,y,vx,vy,ax").unwrap();
        writeln!(f, "0,0,0,0,0,0").unwrap();
        assert!(matches!(load_nclt(f.path(), 1.0, 2), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn empirical_process_noise_matches_q() {
        // 10^5 steps of process noise from a Wiener model, compared entrywise
        // against Q within three standard errors
        let params = crate::ssmodel::WienerVelocityParams { dt: 0.5, q2: 0.3, axes: 1, r2: 0.1 };
        let model = crate::ssmodel::wiener_velocity_model(&params).unwrap();
        let spec = GenerationSpec {
            count: 1,
            length: 100_000,
            burn_in: 0,
            init_low: vec![0.0; 3],
            init_high: vec![0.0; 3],
            init_estimate_std: 0.0,
            master_seed: 8,
        };
        let meta = DatasetMeta {
            format_version: 1,
            model: "wiener".into(),
            count: 0,
            length: 0,
            state_dim: 3,
            meas_dim: 1,
            dt: 0.5,
            q2: 0.3,
            adc_per_feature: 1,
            features: 1,
            noise_variances: vec![0.1],
            generation: None,
        };
        let ds = generate_dataset(&model, &spec, meta).unwrap();
        let seq = &ds.sequences[0];
        let n = seq.len();
        let mut prev = seq.initial_state.clone();
        let mut w = DMatrix::zeros(n, 3);
        for t in 0..n {
            let x = seq.state(t);
            w.set_row(t, &(&x - model.f(&prev)).transpose());
            prev = x;
        }
        let q = model.q.clone();
        for i in 0..3 {
            for j in 0..3 {
                let prod: Vec<f64> = (0..n).map(|t| w[(t, i)] * w[(t, j)]).collect();
                let mean = prod.iter().sum::<f64>() / n as f64;
                let var = prod.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n as f64;
                let se = (var / n as f64).sqrt();
                assert!((mean - q[(i, j)]).abs() < 3.0 * se + 1e-15, "Q[{i},{j}]: {mean} vs {}", q[(i, j)]);
            }
        }
    }
}
