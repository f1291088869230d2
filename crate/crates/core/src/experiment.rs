//! Experiment grid: configuration, the runner, reports and table rendering.
//!
//! A run covers every `(adc_count, variant, seed)` cell of one configuration.
//! Datasets are generated per ADC count from one bank, so training,
//! validation and test data share the same comparator noise.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bknet::{
    run_bknet, save_checkpoint, train, write_loss_curve, GainNetwork, NetworkConfig, TrainConfig, TrainingData,
};
use crate::datagen::{
    generate_lorenz_with_bank, generate_wiener_with_bank, load_nclt, mse_db, read_dataset, write_dataset,
    GenerationSpec, NoiseSpec, SequenceDataset, SequencePair,
};
use crate::error::{Error, Result};
use crate::filters::{run_filter, Diagnostics, Variant};
use crate::quantizer::AdcBank;
use crate::ssmodel::{
    rotation_about_axis, wiener_velocity_model, AdcReplicated, LorenzModel, LorenzParams, RotatedMeasurement,
    RotatedTransition, SharedModel, WienerVelocityParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    #[default]
    Lorenz,
    Wiener,
}

impl ModelId {
    pub fn name(&self) -> &'static str {
        match self {
            ModelId::Lorenz => "lorenz",
            ModelId::Wiener => "wiener",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentVariant {
    EkfIdeal,
    /// Published KalmanNet numbers; never executed.
    KalmannetPublished,
    EkfOnBits,
    Bkf,
    Rbkf,
    Bknet,
}

impl ExperimentVariant {
    pub const ALL: [ExperimentVariant; 6] = [
        ExperimentVariant::EkfIdeal,
        ExperimentVariant::KalmannetPublished,
        ExperimentVariant::EkfOnBits,
        ExperimentVariant::Bkf,
        ExperimentVariant::Rbkf,
        ExperimentVariant::Bknet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentVariant::EkfIdeal => "ekf_ideal",
            ExperimentVariant::KalmannetPublished => "kalmannet_published",
            ExperimentVariant::EkfOnBits => "ekf_on_bits",
            ExperimentVariant::Bkf => "bkf",
            ExperimentVariant::Rbkf => "rbkf",
            ExperimentVariant::Bknet => "bknet",
        }
    }

    fn filter(&self) -> Option<Variant> {
        match self {
            ExperimentVariant::EkfIdeal => Some(Variant::EkfIdeal),
            ExperimentVariant::EkfOnBits => Some(Variant::EkfOnBits),
            ExperimentVariant::Bkf => Some(Variant::Bkf),
            ExperimentVariant::Rbkf => Some(Variant::Rbkf),
            _ => None,
        }
    }
}

impl fmt::Display for ExperimentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Filter-side model error. Data is always generated from the true model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mismatch {
    #[default]
    None,
    /// First-order Taylor transition instead of the generating order.
    TaylorK1,
    /// `f' = R·f` with a 1° rotation.
    #[serde(rename = "f_rotation_1deg")]
    FRotation1deg,
    /// `h' = R·h` with a 3° rotation.
    #[serde(rename = "h_rotation_3deg")]
    HRotation3deg,
}

impl Mismatch {
    pub const ALL: [Mismatch; 4] = [
        Mismatch::None,
        Mismatch::TaylorK1,
        Mismatch::FRotation1deg,
        Mismatch::HRotation3deg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mismatch::None => "none",
            Mismatch::TaylorK1 => "taylor_k1",
            Mismatch::FRotation1deg => "f_rotation_1deg",
            Mismatch::HRotation3deg => "h_rotation_3deg",
        }
    }
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mismatch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mismatch {s:?}")))
    }
}

/// Sequence counts and lengths of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train_count: usize,
    pub train_length: usize,
    pub val_count: usize,
    pub val_length: usize,
    pub test_count: usize,
    pub test_length: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            train_count: 1000,
            train_length: 100,
            val_count: 100,
            val_length: 100,
            test_count: 20,
            test_length: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Report, manifest, checkpoints and loss curves go here.
    pub out_dir: Option<PathBuf>,
    /// Dataset cache; missing datasets are generated and written.
    pub data_dir: Option<PathBuf>,
    /// Trajectory CSV used as the test set of the Wiener model.
    pub nclt_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelId,
    pub variants: Vec<ExperimentVariant>,
    /// ADCs per measurement feature (`1/a`).
    pub adc_counts: Vec<usize>,
    pub noise: NoiseSpec,
    pub mismatch: Mismatch,
    /// Coordinate the mismatch rotations turn about.
    pub rotation_axis: usize,
    /// Network initialization and shuffling seeds, one BKNet cell each.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub data: DataSizes,
    pub lorenz: LorenzParams,
    /// Wiener geometry; `q2` and `r2` come from `noise`.
    pub wiener: WienerVelocityParams,
    pub train: TrainConfig,
    pub timing_repeats: usize,
    /// Grid cells run concurrently up to this many threads.
    pub threads: usize,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelId::Lorenz,
            variants: Vec::new(),
            adc_counts: vec![1],
            noise: NoiseSpec::identical(10.0, -20.0),
            mismatch: Mismatch::None,
            rotation_axis: 2,
            seeds: vec![0],
            data_seed: 0,
            data: DataSizes::default(),
            lorenz: LorenzParams::default(),
            wiener: WienerVelocityParams::default(),
            train: TrainConfig::default(),
            timing_repeats: 5,
            threads: 1,
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.lorenz.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.adc_counts.iter().any(|&a| a == 0) {
            return Err(Error::Config("adc_counts entries must be >= 1".into()));
        }
        if self.rotation_axis > 2 {
            return Err(Error::Config("rotation_axis must be 0, 1 or 2".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.variants.contains(&ExperimentVariant::Bknet) && self.seeds.is_empty() {
            return Err(Error::Config("bknet needs at least one seed".into()));
        }
        if self.model == ModelId::Wiener {
            if matches!(self.mismatch, Mismatch::TaylorK1 | Mismatch::FRotation1deg | Mismatch::HRotation3deg) {
                return Err(Error::Config("mismatch scenarios are defined for the lorenz model".into()));
            }
            if self.wiener.axes == 0 || !(self.wiener.dt > 0.0) {
                return Err(Error::Config("wiener needs axes >= 1 and dt > 0".into()));
            }
        }
        let d = &self.data;
        if d.test_count == 0 || d.test_length == 0 {
            return Err(Error::Config("test split must be non-empty".into()));
        }
        if self.variants.contains(&ExperimentVariant::Bknet) && (d.train_count == 0 || d.train_length == 0) {
            return Err(Error::Config("bknet needs a non-empty training split".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field that affects numbers.
    /// Output paths, the dataset cache, timing repeats and thread counts are
    /// left out.
    pub fn config_hash(&self) -> String {
        let mut view = self.clone();
        view.paths.out_dir = None;
        view.paths.data_dir = None;
        view.timing_repeats = 0;
        view.threads = 1;
        view.train.threads = 1;
        // serde_json maps are ordered by key, which makes this canonical
        let value = serde_json::to_value(&view).expect("config serializes");
        let text = serde_json::to_string(&value).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn features(&self) -> usize {
        match self.model {
            ModelId::Lorenz => 3,
            ModelId::Wiener => self.wiener.axes,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.model {
            ModelId::Lorenz => 3,
            ModelId::Wiener => 3 * self.wiener.axes,
        }
    }

    fn wiener_params(&self) -> Result<WienerVelocityParams> {
        Ok(WienerVelocityParams {
            q2: self.noise.q2()?,
            r2: self.noise.nominal_r2()?,
            ..self.wiener
        })
    }

    fn generation(&self, split: Split) -> GenerationSpec {
        let (count, length) = match split {
            Split::Train => (self.data.train_count, self.data.train_length),
            Split::Val => (self.data.val_count, self.data.val_length),
            Split::Test => (self.data.test_count, self.data.test_length),
        };
        let seed = self.data_seed.wrapping_mul(4).wrapping_add(split as u64);
        match self.model {
            ModelId::Lorenz => GenerationSpec::lorenz(count, length, seed),
            ModelId::Wiener => GenerationSpec::wiener(self.wiener.axes, count, length, seed),
        }
    }

    /// The filter's model of the dynamics, with the configured mismatch.
    pub fn filter_base_model(&self) -> Result<SharedModel> {
        let q2 = self.noise.q2()?;
        let r2 = self.noise.nominal_r2()?;
        let base: SharedModel = match self.model {
            ModelId::Lorenz => {
                let mut p = self.lorenz;
                if self.mismatch == Mismatch::TaylorK1 {
                    p.taylor_order = 1;
                }
                Arc::new(LorenzModel::new(p, q2, r2)?)
            }
            ModelId::Wiener => Arc::new(wiener_velocity_model(&self.wiener_params()?)?),
        };
        Ok(match self.mismatch {
            Mismatch::FRotation1deg => {
                Arc::new(RotatedTransition::new(base, rotation_about_axis(3, self.rotation_axis, 1.0)?)?)
            }
            Mismatch::HRotation3deg => {
                Arc::new(RotatedMeasurement::new(base, rotation_about_axis(3, self.rotation_axis, 3.0)?)?)
            }
            _ => base,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train = 1,
    Val = 2,
    Test = 3,
}

impl Split {
    fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How a cell's MSE was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// A published constant attached for comparison.
    Published,
    /// No published constant exists for this setting.
    Unavailable,
    Failed,
}

/// One grid cell of a [`Report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelId,
    pub variant: ExperimentVariant,
    /// `ideal` or `1-bit`.
    pub observation: String,
    pub adc_count: usize,
    pub noise: String,
    pub mismatch: Mismatch,
    pub seed: Option<u64>,
    pub mse_db: Option<f64>,
    /// BKNet only: validation MSE of the selected parameters.
    pub val_mse_db: Option<f64>,
    /// Median wall-clock seconds to filter the whole test set.
    pub inference_seconds: Option<f64>,
    pub steps: usize,
    pub clamps: usize,
    pub jitter_events: usize,
    pub symmetry_violations: usize,
    pub psd_violations: usize,
    /// Whether every timing repeat reproduced the first run bit for bit.
    pub deterministic: Option<bool>,
    pub status: CellStatus,
    pub error: Option<String>,
    pub config_hash: String,
}

impl Cell {
    fn new(cfg: &ExperimentConfig, hash: &str, variant: ExperimentVariant, adc: usize, seed: Option<u64>) -> Self {
        let observation = if variant == ExperimentVariant::EkfIdeal { "ideal" } else { "1-bit" };
        Self {
            model: cfg.model,
            variant,
            observation: observation.into(),
            adc_count: adc,
            noise: noise_label(&cfg.noise),
            mismatch: cfg.mismatch,
            seed,
            mse_db: None,
            val_mse_db: None,
            inference_seconds: None,
            steps: 0,
            clamps: 0,
            jitter_events: 0,
            symmetry_violations: 0,
            psd_violations: 0,
            deterministic: None,
            status: CellStatus::Ok,
            error: None,
            config_hash: hash.into(),
        }
    }

    fn fail(&mut self, e: &Error) {
        self.status = CellStatus::Failed;
        self.error = Some(e.to_string());
    }

    fn record(&mut self, d: &Diagnostics) {
        self.steps = d.steps;
        self.clamps = d.clamps;
        self.jitter_events = d.jitter_events;
        self.symmetry_violations = d.symmetry_violations;
        self.psd_violations = d.psd_violations;
    }
}

fn noise_label(n: &NoiseSpec) -> String {
    let mut parts = Vec::new();
    if let Some(q) = n.q2_db {
        parts.push(format!("q2={q}dB"));
    }
    if let Some(s) = n.snr_db {
        parts.push(format!("snr={s}dB"));
    }
    if let Some(r) = n.r2_db {
        parts.push(format!("r2={r}dB"));
    }
    if let Some([lo, hi]) = n.r2_range_db {
        parts.push(format!("r2~U[{lo},{hi}]dB"));
    }
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub threads: usize,
    pub timing_repeats: usize,
    pub cells: Vec<Cell>,
}

impl Report {
    /// Append the cells of `other`; each cell keeps its own config hash.
    pub fn merge(&mut self, other: Report) {
        self.cells.extend(other.cells);
    }

    /// True when there were cells to run and every one failed numerically.
    pub fn all_failed(&self) -> bool {
        let run: Vec<_> = self.cells.iter().filter(|c| c.variant != ExperimentVariant::KalmannetPublished).collect();
        !run.is_empty() && run.iter().all(|c| c.status == CellStatus::Failed)
    }

    pub fn cell(&self, variant: ExperimentVariant, adc: usize) -> Option<&Cell> {
        pick(self.cells.iter().filter(|c| c.variant == variant && c.adc_count == adc))
    }
}

/// Published KalmanNet MSEs `(ideal, 1-bit)` for the setting of `cfg`.
pub fn kalmannet_published(cfg: &ExperimentConfig, adc: usize) -> (Option<f64>, Option<f64>) {
    match (cfg.model, cfg.mismatch) {
        (ModelId::Lorenz, Mismatch::None) if cfg.noise.is_heterogeneous() => (Some(-22.67), None),
        (ModelId::Lorenz, Mismatch::None) if adc == 1 => (Some(-19.49), Some(12.95)),
        (ModelId::Wiener, Mismatch::None) if cfg.paths.nclt_csv.is_some() && adc == 1 => (Some(19.15), Some(34.67)),
        _ => (None, None),
    }
}

/// Datasets of one ADC count, all observed through `bank`. Training and
/// validation splits exist only when the grid contains BKNet.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub bank: AdcBank,
    pub train: Option<SequenceDataset>,
    pub val: Option<SequenceDataset>,
    pub test: SequenceDataset,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn generate_split(cfg: &ExperimentConfig, bank: &AdcBank, split: Split) -> Result<SequenceDataset> {
    let spec = cfg.generation(split);
    match cfg.model {
        ModelId::Lorenz => generate_lorenz_with_bank(&spec, cfg.noise.q2()?, &cfg.lorenz, bank),
        ModelId::Wiener => generate_wiener_with_bank(&spec, &cfg.wiener_params()?, bank),
    }
}

fn cached_split(cfg: &ExperimentConfig, bank: &AdcBank, split: Split) -> Result<SequenceDataset> {
    let Some(root) = &cfg.paths.data_dir else {
        return generate_split(cfg, bank, split);
    };
    let dir = root.join(format!("{}_a{}_{}", cfg.model.name(), bank.adc_per_feature(), split.name()));
    let expected = generate_split(cfg, bank, split)?;
    if dir.join("meta.json").exists() {
        let found = read_dataset(&dir)?;
        if found.meta != expected.meta {
            return Err(Error::Config(format!("dataset at {} was generated with other settings", dir.display())));
        }
        return Ok(found);
    }
    write_dataset(&dir, &expected)?;
    Ok(expected)
}

/// Replicate each measurement column of `ds` across `bank` and add the
/// bank's per-ADC noise.
fn observe_through_bank(ds: &SequenceDataset, bank: &AdcBank, seed: u64) -> Result<SequenceDataset> {
    let features = bank.features();
    let per = bank.adc_per_feature();
    let std: Vec<f64> = bank.noise_variances().iter().map(|v| v.sqrt()).collect();
    let mut out = ds.clone();
    for (i, seq) in out.sequences.iter_mut().enumerate() {
        if seq.measurements.ncols() != features {
            return Err(Error::invalid("trajectory measurements do not match the ADC bank"));
        }
        let mut rng = stream_rng(seed, i as u64 + 1);
        let y = &seq.measurements;
        seq.measurements = DMatrix::from_fn(y.nrows(), features * per, |t, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            y[(t, j % features)] + std[j] * z
        });
    }
    out.meta.adc_per_feature = per;
    out.meta.meas_dim = features * per;
    out.meta.noise_variances = bank.noise_variances().iter().copied().collect();
    Ok(out)
}

/// Build (or load from the dataset cache) the splits for `adc` ADCs per
/// feature. `with_training` forces the training and validation splits.
pub fn experiment_data(cfg: &ExperimentConfig, adc: usize, with_training: bool) -> Result<ExperimentData> {
    let bank = cfg
        .noise
        .build_bank(cfg.features(), adc, &mut stream_rng(cfg.data_seed.wrapping_mul(4), adc as u64))?;
    let learn = with_training || cfg.variants.contains(&ExperimentVariant::Bknet);
    let train = learn.then(|| cached_split(cfg, &bank, Split::Train)).transpose()?;
    let val = learn.then(|| cached_split(cfg, &bank, Split::Val)).transpose()?;
    let test = match (&cfg.paths.nclt_csv, cfg.model) {
        (Some(path), ModelId::Wiener) => {
            let raw = load_nclt(path, cfg.wiener.dt, cfg.data.test_length)?;
            observe_through_bank(&raw, &bank, cfg.data_seed.wrapping_mul(4).wrapping_add(Split::Test as u64))?
        }
        _ => cached_split(cfg, &bank, Split::Test)?,
    };
    Ok(ExperimentData { bank, train, val, test })
}

/// `Σ_{0|0}` matching the spread of the initial estimates.
pub fn initial_covariance(cfg: &ExperimentConfig) -> DMatrix<f64> {
    let std = cfg.generation(Split::Test).init_estimate_std;
    DMatrix::identity(cfg.state_dim(), cfg.state_dim()) * (std * std)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The filter's model seen through every ADC of `bank`.
pub fn bit_model(cfg: &ExperimentConfig, bank: &AdcBank) -> Result<AdcReplicated> {
    AdcReplicated::new(cfg.filter_base_model()?, bank.adc_per_feature(), bank.noise_variances())
}

/// The filter's model for ideal observations from the first ADC of each
/// feature, and the test sequences cut down to those columns.
pub fn ideal_view(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(AdcReplicated, Vec<SequencePair>)> {
    let features = cfg.features();
    let first = data.bank.noise_variances().rows(0, features).into_owned();
    let model = AdcReplicated::new(cfg.filter_base_model()?, 1, &first)?;
    let seqs = data.test.sequences.iter().map(|s| s.first_replica(features)).collect();
    Ok((model, seqs))
}

type Runner<'a> = Box<dyn Fn(&SequencePair) -> Result<(DMatrix<f64>, Diagnostics)> + Send + Sync + 'a>;

/// A computed cell that can be re-run for timing.
struct Timed<'a> {
    cell: Cell,
    seqs: Cow<'a, [SequencePair]>,
    run: Runner<'a>,
    first: Vec<DMatrix<f64>>,
    times: Vec<f64>,
}

impl<'a> Timed<'a> {
    /// Run once over the test set, filling MSE and diagnostics.
    fn new(mut cell: Cell, seqs: Cow<'a, [SequencePair]>, run: Runner<'a>) -> Result<Self> {
        let mut diag = Diagnostics::default();
        let first = pass(&seqs, &run, &mut diag)?;
        let truth: Vec<_> = seqs.iter().map(|s| s.states.clone()).collect();
        cell.mse_db = Some(mse_db(&first, &truth)?);
        cell.record(&diag);
        Ok(Self {
            cell,
            seqs,
            run,
            first,
            times: Vec::new(),
        })
    }

    /// Time one run over sequence `i`, adding to the current repeat.
    fn time_sequence(&mut self, i: usize) -> Result<()> {
        let Some(seq) = self.seqs.get(i) else {
            return Ok(());
        };
        let start = Instant::now();
        let (est, _) = (self.run)(seq)?;
        *self.times.last_mut().expect("repeat started") += start.elapsed().as_secs_f64();
        let same = self.cell.deterministic.unwrap_or(true) && est == self.first[i];
        self.cell.deterministic = Some(same);
        Ok(())
    }
}

fn pass(seqs: &[SequencePair], run: &Runner<'_>, diag: &mut Diagnostics) -> Result<Vec<DMatrix<f64>>> {
    let mut est = Vec::with_capacity(seqs.len());
    for s in seqs {
        let (e, d) = run(s)?;
        est.push(e);
        diag.merge(&d);
    }
    Ok(est)
}

fn filter_cell<'a>(cfg: &ExperimentConfig, data: &'a ExperimentData, variant: Variant, cell: Cell) -> Result<Timed<'a>> {
    let s0 = initial_covariance(cfg);
    let bank = &data.bank;
    if variant == Variant::EkfIdeal {
        let (model, seqs) = ideal_view(cfg, data)?;
        let run: Runner<'a> = Box::new(move |s| {
            let r = run_filter(&model, bank, variant, s, &s0)?;
            Ok((r.estimates, r.diagnostics))
        });
        Timed::new(cell, Cow::Owned(seqs), run)
    } else {
        let model = bit_model(cfg, bank)?;
        let run: Runner<'a> = Box::new(move |s| {
            let r = run_filter(&model, bank, variant, s, &s0)?;
            Ok((r.estimates, r.diagnostics))
        });
        Timed::new(cell, Cow::Borrowed(&data.test.sequences), run)
    }
}

fn bknet_cell<'a>(cfg: &ExperimentConfig, data: &'a ExperimentData, seed: u64, mut cell: Cell) -> Result<Timed<'a>> {
    let model = bit_model(cfg, &data.bank)?;
    let s0 = initial_covariance(cfg);
    let (Some(train_ds), Some(val_ds)) = (&data.train, &data.val) else {
        return Err(Error::invalid("bknet cell without training data"));
    };
    let net_cfg = NetworkConfig::new(cfg.state_dim(), cfg.features());
    let net = GainNetwork::new(net_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tcfg = TrainConfig { seed, ..cfg.train };
    let td = TrainingData {
        model: &model,
        bank: &data.bank,
        sigma0: &s0,
        train: &train_ds.sequences,
        validation: &val_ds.sequences,
    };
    let started = Instant::now();
    let outcome = train(net, &td, &tcfg)?;
    log::info!(
        "bknet a={} seed={seed}: trained in {:.1}s, selected epoch {}",
        data.bank.adc_per_feature(),
        started.elapsed().as_secs_f64(),
        outcome.selected_epoch
    );
    cell.val_mse_db = outcome
        .curve
        .iter()
        .find(|r| r.epoch == outcome.selected_epoch)
        .map(|r| r.val_mse_db);
    if let Some(dir) = &cfg.paths.out_dir {
        let stem = format!("bknet_a{}_s{seed}", data.bank.adc_per_feature());
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(format!("{stem}.bknet")), &outcome.net)?;
        write_loss_curve(&dir.join(format!("{stem}_loss.csv")), &outcome.curve)?;
    }
    let net = outcome.net;
    let bank = &data.bank;
    let run: Runner<'a> = Box::new(move |s| {
        let r = run_bknet(&net, &model, bank, s, &s0)?;
        Ok((r.estimates, r.diagnostics))
    });
    Timed::new(cell, Cow::Borrowed(&data.test.sequences), run)
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Filter(ExperimentVariant, Variant),
    Bknet(u64),
}

/// Run every cell of `cfg`. Failing cells are recorded and the run goes on;
/// only an invalid configuration is an error. Writes `report.csv` and
/// `manifest.json` when an output directory is configured.
///
/// Cells of one ADC count are computed (concurrently when `threads > 1`),
/// then timed single-threaded: each cell is re-run `timing_repeats` times and
/// the median reported. Runs alternate between cells sequence by sequence,
/// so that all cells see the same machine load.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut cells = Vec::new();
    for &adc in &cfg.adc_counts {
        let mut jobs = Vec::new();
        for &v in &cfg.variants {
            match v {
                ExperimentVariant::KalmannetPublished => {
                    let (ideal, bits) = kalmannet_published(cfg, adc);
                    for (obs, value) in [("ideal", ideal), ("1-bit", bits)] {
                        let mut c = Cell::new(cfg, &hash, v, adc, None);
                        c.observation = obs.into();
                        c.mse_db = value;
                        c.status = if value.is_some() { CellStatus::Published } else { CellStatus::Unavailable };
                        cells.push(c);
                    }
                }
                ExperimentVariant::Bknet => jobs.extend(cfg.seeds.iter().map(|&s| Job::Bknet(s))),
                other => jobs.push(Job::Filter(other, other.filter().expect("filter variant"))),
            }
        }
        if jobs.is_empty() {
            continue;
        }
        let blank = |job: &Job| match *job {
            Job::Filter(v, _) => Cell::new(cfg, &hash, v, adc, None),
            Job::Bknet(s) => Cell::new(cfg, &hash, ExperimentVariant::Bknet, adc, Some(s)),
        };
        let data = match experiment_data(cfg, adc, false) {
            Ok(d) => d,
            Err(e) => {
                log::error!("data for {adc} ADCs: {e}");
                for job in &jobs {
                    let mut c = blank(job);
                    c.fail(&e);
                    cells.push(c);
                }
                continue;
            }
        };
        let one = |job: &Job| -> std::result::Result<Timed<'_>, Cell> {
            let cell = blank(job);
            let res = match *job {
                Job::Filter(_, fv) => filter_cell(cfg, &data, fv, cell.clone()),
                Job::Bknet(s) => bknet_cell(cfg, &data, s, cell.clone()),
            };
            res.map_err(|e| {
                log::warn!("{} at {adc} ADCs failed: {e}", cell.variant);
                let mut c = cell;
                c.fail(&e);
                c
            })
        };
        let done: Vec<_> = if cfg.threads > 1 {
            pool.install(|| jobs.par_iter().map(one).collect())
        } else {
            jobs.iter().map(one).collect()
        };
        let mut timed = Vec::new();
        let mut slots = Vec::with_capacity(done.len());
        for d in done {
            match d {
                Ok(t) => {
                    slots.push(None);
                    timed.push(t);
                }
                Err(c) => slots.push(Some(c)),
            }
        }
        let longest = timed.iter().map(|t| t.seqs.len()).max().unwrap_or(0);
        for _ in 0..cfg.timing_repeats.max(1) {
            timed.iter_mut().for_each(|t| t.times.push(0.0));
            for i in 0..longest {
                // alternate the order so no cell always runs first
                let mut order: Vec<usize> = (0..timed.len()).collect();
                if i % 2 == 1 {
                    order.reverse();
                }
                for k in order {
                    let t = &mut timed[k];
                    if t.cell.status != CellStatus::Ok {
                        continue;
                    }
                    if let Err(e) = t.time_sequence(i) {
                        t.cell.fail(&e);
                    }
                }
            }
        }
        let mut timed = timed.into_iter();
        for slot in slots {
            cells.push(slot.unwrap_or_else(|| {
                let t = timed.next().expect("one timed cell per empty slot");
                let mut c = t.cell;
                if c.status == CellStatus::Ok {
                    c.inference_seconds = Some(median(t.times));
                }
                c
            }));
        }
    }
    let report = Report {
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        data_seed: cfg.data_seed,
        threads: cfg.threads,
        timing_repeats: cfg.timing_repeats.max(1),
        cells,
    };
    if let Some(dir) = &cfg.paths.out_dir {
        fs::create_dir_all(dir)?;
        write_report_csv(&dir.join("report.csv"), &report)?;
        write_manifest(&dir.join("manifest.json"), cfg, &report)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    variant: &'a str,
    observation: &'a str,
    adc_count: usize,
    noise: &'a str,
    mismatch: &'a str,
    seed: Option<u64>,
    mse_db: Option<f64>,
    val_mse_db: Option<f64>,
    inference_seconds: Option<f64>,
    steps: usize,
    clamps: usize,
    jitter_events: usize,
    symmetry_violations: usize,
    psd_violations: usize,
    deterministic: Option<bool>,
    status: &'a str,
    error: &'a str,
    config_hash: &'a str,
}

/// Render every cell as one CSV row. Empty fields mean "not applicable".
pub fn report_to_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &report.cells {
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Published => "published",
            CellStatus::Unavailable => "unavailable",
            CellStatus::Failed => "failed",
        };
        w.serialize(CsvRow {
            model: c.model.name(),
            variant: c.variant.name(),
            observation: &c.observation,
            adc_count: c.adc_count,
            noise: &c.noise,
            mismatch: c.mismatch.name(),
            seed: c.seed,
            mse_db: c.mse_db,
            val_mse_db: c.val_mse_db,
            inference_seconds: c.inference_seconds,
            steps: c.steps,
            clamps: c.clamps,
            jitter_events: c.jitter_events,
            symmetry_violations: c.symmetry_violations,
            psd_violations: c.psd_violations,
            deterministic: c.deterministic,
            status,
            error: c.error.as_deref().unwrap_or(""),
            config_hash: &c.config_hash,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_report_csv(path: &Path, report: &Report) -> Result<()> {
    fs::write(path, report_to_csv(report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    threads: usize,
    timing_repeats: usize,
    dataset_seeds: [(&'static str, u64); 3],
}

fn write_manifest(path: &Path, cfg: &ExperimentConfig, report: &Report) -> Result<()> {
    let m = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: &report.config_hash,
        config: cfg,
        seeds: &report.seeds,
        threads: report.threads,
        timing_repeats: report.timing_repeats,
        dataset_seeds: [Split::Train, Split::Val, Split::Test]
            .map(|s| (s.name(), cfg.generation(s).master_seed)),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Tables

/// Among several matching cells (one per seed), the one with the best
/// validation MSE; failed cells count as missing.
fn pick<'a>(cells: impl Iterator<Item = &'a Cell>) -> Option<&'a Cell> {
    let key = |c: &Cell| c.val_mse_db.or(c.mse_db).unwrap_or(f64::INFINITY);
    cells
        .filter(|c| c.mse_db.is_some())
        .fold(None, |best: Option<&Cell>, c| match best {
            Some(b) if key(b) <= key(c) => Some(b),
            _ => Some(c),
        })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.digits$}"),
        Some(x) => format!("{x}"),
        None => "n/a".into(),
    }
}

fn adc_columns(report: &Report) -> Vec<usize> {
    report.cells.iter().map(|c| c.adc_count).collect::<BTreeSet<_>>().into_iter().collect()
}

fn by_adc(report: &Report, rows: &[ExperimentVariant], seconds: bool) -> String {
    let cols = adc_columns(report);
    let mut out = String::from("variant");
    for a in &cols {
        out.push_str(&format!(",adc_{a}"));
    }
    out.push('\n');
    for &v in rows {
        out.push_str(v.name());
        for &a in &cols {
            let c = pick(report.cells.iter().filter(|c| {
                c.variant == v && c.adc_count == a && c.mismatch == Mismatch::None && (v != ExperimentVariant::KalmannetPublished || c.observation == "ideal")
            }));
            let cell = if seconds {
                fmt_opt(c.and_then(|c| c.inference_seconds), 4)
            } else {
                fmt_opt(c.and_then(|c| c.mse_db), 2)
            };
            out.push(',');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

fn by_observation(report: &Report, model: ModelId) -> String {
    use ExperimentVariant::*;
    let rows = [
        (EkfIdeal, "ideal"),
        (KalmannetPublished, "ideal"),
        (EkfOnBits, "1-bit"),
        (KalmannetPublished, "1-bit"),
        (Bkf, "1-bit"),
        (Bknet, "1-bit"),
    ];
    let mut out = String::from("variant,observation_type,mse_db\n");
    for (v, obs) in rows {
        let c = pick(report.cells.iter().filter(|c| {
            c.model == model && c.variant == v && c.observation == obs && c.adc_count == 1 && c.mismatch == Mismatch::None
        }));
        out.push_str(&format!("{},{obs},{}\n", v.name(), fmt_opt(c.and_then(|c| c.mse_db), 2)));
    }
    out
}

fn by_mismatch(report: &Report) -> String {
    let mut out = String::from("variant");
    for m in Mismatch::ALL {
        out.push_str(&format!(",{}", m.name()));
    }
    out.push('\n');
    for v in [ExperimentVariant::Bkf, ExperimentVariant::Bknet] {
        out.push_str(v.name());
        for m in Mismatch::ALL {
            let c = pick(report.cells.iter().filter(|c| c.variant == v && c.mismatch == m && c.adc_count == 1));
            out.push(',');
            out.push_str(&fmt_opt(c.and_then(|c| c.mse_db), 2));
        }
        out.push('\n');
    }
    out
}

/// Render `report` in the layout of result table `id` (`I` to `VI`).
/// Missing cells print as `n/a`; BKNet cells with several seeds show the
/// seed with the best validation MSE.
pub fn report_to_table(report: &Report, id: &str) -> Result<String> {
    use ExperimentVariant::*;
    Ok(match id {
        "I" => by_observation(report, ModelId::Lorenz),
        "II" => by_adc(report, &[EkfIdeal, Bkf, Rbkf, Bknet], true),
        "III" => by_adc(report, &[EkfIdeal, Bkf, Rbkf], false),
        "IV" => by_adc(report, &[KalmannetPublished, Bknet], false),
        "V" => by_mismatch(report),
        "VI" => by_observation(report, ModelId::Wiener),
        other => return Err(Error::invalid(format!("unknown table id {other:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variants: &[ExperimentVariant], adc: &[usize]) -> ExperimentConfig {
        ExperimentConfig {
            variants: variants.to_vec(),
            adc_counts: adc.to_vec(),
            data: DataSizes {
                train_count: 4,
                train_length: 10,
                val_count: 1,
                val_length: 20,
                test_count: 2,
                test_length: 60,
            },
            timing_repeats: 2,
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn empty_variant_list_gives_empty_report() {
        let r = run_experiment(&small(&[], &[1, 8])).unwrap();
        assert!(r.cells.is_empty());
        assert!(!r.all_failed());
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            model = "lorenz"
            variants = ["bkf", "rbkf", "kalmannet_published"]
            adc_counts = [1, 8]
            mismatch = "f_rotation_1deg"
            seeds = [1, 2]
            [noise]
            r2_db = -10.0
            snr_db = -20.0
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.variants.len(), 3);
        assert_eq!(cfg.mismatch, Mismatch::FRotation1deg);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);

        assert!(matches!(ExperimentConfig::from_toml_str("variants = [\"ukf\"]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("adc_counts = [0]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("colour = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_paths_and_threads() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = Some("/tmp/x".into());
        b.threads = 4;
        b.timing_repeats = 9;
        assert_eq!(a.config_hash(), b.config_hash());
        b.data_seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn published_cells_never_run() {
        let r = run_experiment(&small(&[ExperimentVariant::KalmannetPublished], &[1, 8])).unwrap();
        assert_eq!(r.cells.len(), 4);
        let one: Vec<_> = r.cells.iter().filter(|c| c.adc_count == 1).collect();
        assert_eq!(one[0].mse_db, Some(-19.49));
        assert_eq!(one[1].mse_db, Some(12.95));
        assert!(r.cells.iter().all(|c| c.inference_seconds.is_none() && c.steps == 0));
        assert!(r.cells.iter().filter(|c| c.adc_count == 8).all(|c| c.status == CellStatus::Unavailable));
    }

    #[test]
    fn filter_cells_fill_in() {
        use ExperimentVariant::*;
        let r = run_experiment(&small(&[EkfIdeal, Bkf, Rbkf], &[1, 4])).unwrap();
        assert_eq!(r.cells.len(), 6);
        for c in &r.cells {
            assert_eq!(c.status, CellStatus::Ok, "{c:?}");
            assert_eq!(c.deterministic, Some(true));
            assert_eq!(c.steps, 120);
            assert!(c.mse_db.unwrap().is_finite());
        }
        let bkf = r.cell(Bkf, 4).unwrap().mse_db.unwrap();
        let rbkf = r.cell(Rbkf, 4).unwrap().mse_db.unwrap();
        assert!((bkf - rbkf).abs() < 1e-6);
    }

    #[test]
    fn failing_cell_is_recorded() {
        let mut cfg = small(&[ExperimentVariant::Bkf], &[1]);
        cfg.lorenz.dt = 5.0;
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.cells[0].status, CellStatus::Failed);
        assert!(r.cells[0].error.is_some());
        assert!(r.all_failed());
    }

    #[test]
    fn tables_render_missing_cells() {
        let r = Report::default();
        let t = report_to_table(&r, "I").unwrap();
        assert_eq!(t.lines().next().unwrap(), "variant,observation_type,mse_db");
        assert!(t.lines().skip(1).all(|l| l.ends_with(",n/a")));
        assert_eq!(report_to_table(&r, "V").unwrap().lines().nth(1).unwrap(), "bkf,n/a,n/a,n/a,n/a");
        assert!(matches!(report_to_table(&r, "VII"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn table_two_has_a_column_per_adc_count() {
        let r = run_experiment(&small(&[ExperimentVariant::Bkf], &[1, 8])).unwrap();
        let t = report_to_table(&r, "II").unwrap();
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines[0], "variant,adc_1,adc_8");
        assert_eq!(lines[1], "ekf_ideal,n/a,n/a");
        assert!(!lines[2].contains("n/a"));
    }

    #[test]
    fn pick_prefers_best_validation() {
        let cfg = ExperimentConfig::default();
        let mut a = Cell::new(&cfg, "h", ExperimentVariant::Bknet, 1, Some(0));
        a.mse_db = Some(-10.0);
        a.val_mse_db = Some(-12.0);
        let mut b = a.clone();
        b.seed = Some(1);
        b.mse_db = Some(-20.0);
        b.val_mse_db = Some(-11.0);
        let cells = [a, b];
        assert_eq!(pick(cells.iter()).unwrap().seed, Some(0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
