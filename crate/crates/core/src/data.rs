// SPDX-License-Identifier: Apache-2.0

//! EEG trial storage, windowing, normalization, splitting and a synthetic
//! per-subject signal generator.
//!
//! A dataset directory holds `manifest.json`, `trials.csv` with columns
//! `trial_id,subject_id,file,n_samples`, and one little-endian `f32` file
//! per trial laid out channel-major. An empty `subject_id` marks an
//! unlabeled trial.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const TRIALS: &str = "trials.csv";
pub const FORMAT_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sample_rate_hz: f64,
    pub channels: usize,
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub subject_id: Option<usize>,
    /// `[channels, n_samples]`.
    pub samples: Tensor<f32>,
    pub sample_rate: f64,
}

impl TrialRecord {
    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trials: Vec<TrialRecord>,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.manifest.subjects.len()
    }

    /// Default window: ten seconds of samples.
    pub fn default_window(&self) -> usize {
        (self.manifest.sample_rate_hz * 10.0).round() as usize
    }

    pub fn labeled(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.subject_id.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| t.subject_id.is_none())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    trial_id: String,
    subject_id: Option<usize>,
    file: String,
    n_samples: usize,
}

/// Rayon pool for trial I/O, capped by `SPKT_THREADS` when set.
pub fn loader_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("SPKT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("cannot start loader threads: {e}")))
}

fn read_trial(dir: &Path, row: &TrialRow, m: &Manifest) -> Result<TrialRecord> {
    let fail = |reason: String| Error::Load {
        trial: row.trial_id.clone(),
        reason,
    };
    let path = dir.join(&row.file);
    let bytes = fs::read(&path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    let expect = m.channels * row.n_samples * 4;
    if bytes.len() != expect {
        let per_channel = row.n_samples * 4;
        let implied = if per_channel > 0 && bytes.len() % per_channel == 0 {
            format!(" (the file implies {} channels)", bytes.len() / per_channel)
        } else {
            String::new()
        };
        return Err(fail(format!(
            "expected {expect} bytes for {} channels x {} samples, found {}{implied}",
            m.channels,
            row.n_samples,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!(
            "non-finite value at channel {}, sample {}",
            i / row.n_samples,
            i % row.n_samples
        )));
    }
    if let Some(s) = row.subject_id {
        if !m.subjects.contains(&s) {
            return Err(fail(format!("subject {s} is not listed in the manifest")));
        }
    }
    let samples = Tensor::new(&[m.channels, row.n_samples], data).map_err(|e| fail(e.to_string()))?;
    Ok(TrialRecord {
        trial_id: row.trial_id.clone(),
        subject_id: row.subject_id,
        samples,
        sample_rate: m.sample_rate_hz,
    })
}

/// Loads a dataset from its directory or from its manifest path.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let dir: PathBuf = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format version {}", manifest.format_version)));
    }
    if manifest.channels == 0 || !(manifest.sample_rate_hz > 0.0) {
        return Err(Error::Format("manifest needs positive channels and sample rate".into()));
    }
    let contiguous = manifest.subjects.iter().enumerate().all(|(i, &s)| i == s);
    if !contiguous {
        return Err(Error::Format("manifest subject ids must be contiguous from 0".into()));
    }
    let tpath = dir.join(TRIALS);
    let mut reader = csv::Reader::from_path(&tpath).map_err(|e| Error::Format(format!("{}: {e}", tpath.display())))?;
    let rows = reader
        .deserialize::<TrialRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", tpath.display())))?;
    let pool = loader_pool()?;
    let trials = pool.install(|| rows.par_iter().map(|r| read_trial(&dir, r, &manifest)).collect::<Result<Vec<_>>>())?;
    Ok(Dataset { manifest, trials })
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let data_dir = dir.join("trials");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&ds.manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let tpath = dir.join(TRIALS);
    let mut w = csv::Writer::from_path(&tpath).map_err(|e| Error::Format(format!("{}: {e}", tpath.display())))?;
    for t in &ds.trials {
        let file = format!("trials/{}.f32", t.trial_id);
        let bytes: Vec<u8> = t.samples.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let fpath = dir.join(&file);
        fs::write(&fpath, bytes).map_err(|e| Error::io(&fpath, e))?;
        w.serialize(TrialRow {
            trial_id: t.trial_id.clone(),
            subject_id: t.subject_id,
            file,
            n_samples: t.n_samples(),
        })
        .map_err(|e| Error::Format(format!("{}: {e}", tpath.display())))?;
    }
    w.flush().map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

/// Per-channel z-score with population standard deviation.
pub fn normalize_trial(t: &TrialRecord) -> TrialRecord {
    let n = t.n_samples();
    let mut out = t.clone();
    for ch in out.samples.data_mut().chunks_mut(n) {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = 1.0 / (var.sqrt() + NORM_EPS);
        for v in ch.iter_mut() {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Windowing {
    /// Each window is `[channels, window]`, channel-major.
    pub windows: Vec<Vec<f32>>,
    /// Trailing samples that did not fill a window.
    pub dropped_tail: usize,
}

pub fn window_trial(t: &TrialRecord, window: usize, stride: usize) -> Result<Windowing> {
    if window == 0 || stride == 0 {
        return Err(Error::Contract("window and stride must be at least 1".into()));
    }
    let n = t.n_samples();
    if n < window {
        return Err(Error::Load {
            trial: t.trial_id.clone(),
            reason: format!("{n} samples cannot fill one {window}-sample window"),
        });
    }
    let count = (n - window) / stride + 1;
    let c = t.channels();
    let data = t.samples.data();
    let windows = (0..count)
        .map(|k| {
            let start = k * stride;
            let mut w = Vec::with_capacity(c * window);
            for ch in 0..c {
                w.extend_from_slice(&data[ch * n + start..ch * n + start + window]);
            }
            w
        })
        .collect();
    let dropped_tail = n - ((count - 1) * stride + window);
    if dropped_tail > 0 {
        log::debug!("trial {}: dropped {dropped_tail} tail samples", t.trial_id);
    }
    Ok(Windowing { windows, dropped_tail })
}

/// Labeled windows ready for batching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowSet {
    pub channels: usize,
    pub window: usize,
    data: Vec<f32>,
    pub labels: Vec<usize>,
    /// `(trial_id, window index within the trial)` per row.
    pub origin: Vec<(String, usize)>,
    /// Total tail samples dropped while windowing.
    pub dropped_tail_samples: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.channels * self.window;
        &self.data[i * w..(i + 1) * w]
    }

    /// `[B, channels, window]` tensor and labels for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let w = self.channels * self.window;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Contract(format!("window {r} out of range for {} windows", self.len())));
            }
            data.extend_from_slice(self.row(r));
        }
        let x = Tensor::new(&[rows.len(), self.channels, self.window], data)?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    pub fn all(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Windows labeled trials, optionally z-scoring each trial first. Trials
/// keep their input order.
pub fn build_windows(trials: &[&TrialRecord], window: usize, stride: usize, normalize: bool) -> Result<WindowSet> {
    let mut set = WindowSet {
        channels: trials.first().map_or(0, |t| t.channels()),
        window,
        ..Default::default()
    };
    for t in trials {
        let Some(label) = t.subject_id else {
            return Err(Error::Contract(format!("trial {} is unlabeled", t.trial_id)));
        };
        if t.channels() != set.channels {
            return Err(Error::Shape(format!("trial {} has {} channels, expected {}", t.trial_id, t.channels(), set.channels)));
        }
        let src = if normalize { normalize_trial(t) } else { (*t).clone() };
        let w = window_trial(&src, window, stride)?;
        set.dropped_tail_samples += w.dropped_tail;
        for (i, win) in w.windows.into_iter().enumerate() {
            set.data.extend(win);
            set.labels.push(label);
            set.origin.push((t.trial_id.clone(), i));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
    pub stratify_by_subject: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            seed: 0,
            stratify_by_subject: true,
        }
    }
}

/// `round(frac * n)` with halves rounded up, clamped to `[1, n - 1]`.
fn val_count(frac: f64, n: usize) -> usize {
    let raw = (frac * n as f64 + 0.5 + 1e-9).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Splits labeled trials into train and validation indices of `trials`.
/// Unlabeled trials go to neither side.
pub fn split(trials: &[TrialRecord], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", spec.val_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labeled: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].subject_id.is_some()).collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if spec.stratify_by_subject {
        for &i in &labeled {
            groups.entry(trials[i].subject_id.unwrap_or_default()).or_default().push(i);
        }
        let lonely: Vec<usize> = groups.iter().filter(|(_, v)| v.len() < 2).map(|(s, _)| *s).collect();
        if !lonely.is_empty() {
            return Err(Error::Contract(format!(
                "stratified split needs at least 2 trials per subject; subjects {lonely:?} have fewer"
            )));
        }
    } else {
        if labeled.len() < 2 {
            return Err(Error::Contract("split needs at least 2 labeled trials".into()));
        }
        groups.insert(0, labeled);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let k = val_count(spec.val_fraction, members.len());
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Signal-to-noise ratio in dB; infinite means noiseless.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 26,
            trials_per_subject: 12,
            channels: 32,
            sample_rate_hz: 128.0,
            duration_s: 90.0,
            snr_db: 10.0,
            seed: 0,
        }
    }
}

/// Spectral signature of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSignature {
    /// Component frequencies in Hz; the first is the dominant one.
    pub freqs: [f64; 3],
    pub amps: [f64; 3],
    /// `[channel][component]` gain and phase.
    pub gains: Vec<[f64; 3]>,
    pub phases: Vec<[f64; 3]>,
}

const FREQ_LO: f64 = 1.0;
const FREQ_HI: f64 = 40.0;
const FREQ_STEP: f64 = 0.25;
const PHASE_JITTER: f64 = 0.05;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dominant frequencies on the 0.25 Hz grid, spaced as widely as the range allows.
fn dominant_freqs(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let slots = ((FREQ_HI - FREQ_LO) / FREQ_STEP) as usize + 1;
    if n > slots {
        return Err(Error::Config(format!("at most {slots} synthetic subjects have distinct dominant frequencies")));
    }
    let mut grid: Vec<f64> = (0..slots).map(|i| FREQ_LO + i as f64 * FREQ_STEP).collect();
    let mut sep = ((FREQ_HI - FREQ_LO) / n as f64).min(1.0);
    loop {
        for _ in 0..64 {
            grid.shuffle(rng);
            let mut chosen: Vec<f64> = Vec::with_capacity(n);
            for &f in &grid {
                if chosen.iter().all(|&c| (c - f).abs() >= sep - 1e-9) {
                    chosen.push(f);
                    if chosen.len() == n {
                        return Ok(chosen);
                    }
                }
            }
        }
        sep -= FREQ_STEP;
    }
}

pub fn subject_signatures(spec: &SynthSpec) -> Result<Vec<SubjectSignature>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0, 0));
    let dom = dominant_freqs(spec.n_subjects, &mut rng)?;
    Ok(dom
        .into_iter()
        .enumerate()
        .map(|(s, f0)| {
            let mut r = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1, s as u64));
            let mut other = || loop {
                let f = FREQ_LO + r.random_range(0..=156) as f64 * FREQ_STEP;
                if (f - f0).abs() >= 2.0 {
                    break f;
                }
            };
            let freqs = [f0, other(), other()];
            let amps = [1.0, r.random_range(0.2..0.5), r.random_range(0.2..0.5)];
            let gains = (0..spec.channels)
                .map(|_| [r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)])
                .collect();
            let phases = (0..spec.channels)
                .map(|_| [r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI)])
                .collect();
            SubjectSignature { freqs, amps, gains, phases }
        })
        .collect())
}

/// Deterministic labeled trials with subject-specific spectra plus noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_subjects < 2 {
        return Err(Error::Config("synthetic data needs at least 2 subjects".into()));
    }
    if spec.trials_per_subject == 0 || spec.channels == 0 || !(spec.sample_rate_hz > 0.0) || !(spec.duration_s > 0.0) {
        return Err(Error::Config("synthetic trials, channels, rate and duration must be positive".into()));
    }
    let n = (spec.duration_s * spec.sample_rate_hz).round() as usize;
    let sigs = subject_signatures(spec)?;
    let jitter = Normal::new(0.0, PHASE_JITTER).expect("valid jitter");
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut trials = Vec::with_capacity(spec.n_subjects * spec.trials_per_subject);
    for (s, sig) in sigs.iter().enumerate() {
        for k in 0..spec.trials_per_subject {
            let mut r = ChaCha8Rng::seed_from_u64(mix(spec.seed, 2 + s as u64, k as u64));
            let dphi: [f64; 3] = std::array::from_fn(|_| jitter.sample(&mut r));
            let mut data = Vec::with_capacity(spec.channels * n);
            for ch in 0..spec.channels {
                let power: f64 = (0..3).map(|j| (sig.amps[j] * sig.gains[ch][j]).powi(2) / 2.0).sum();
                let sigma = if spec.snr_db.is_finite() {
                    (power / 10f64.powf(spec.snr_db / 10.0)).sqrt()
                } else {
                    0.0
                };
                for i in 0..n {
                    let t = i as f64 / spec.sample_rate_hz;
                    let clean: f64 = (0..3)
                        .map(|j| {
                            sig.amps[j] * sig.gains[ch][j] * (2.0 * PI * sig.freqs[j] * t + sig.phases[ch][j] + dphi[j]).sin()
                        })
                        .sum();
                    let noise = if sigma > 0.0 { sigma * std_normal.sample(&mut r) } else { 0.0 };
                    data.push((clean + noise) as f32);
                }
            }
            trials.push(TrialRecord {
                trial_id: format!("s{s:02}_t{k:02}"),
                subject_id: Some(s),
                samples: Tensor::new(&[spec.channels, n], data)?,
                sample_rate: spec.sample_rate_hz,
            });
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            sample_rate_hz: spec.sample_rate_hz,
            channels: spec.channels,
            subjects: (0..spec.n_subjects).collect(),
        },
        trials,
    })
}

/// Majority label of a trial's windows. Ties go to the larger summed
/// logit, then to the lowest class index.
pub fn trial_vote(predictions: &[usize], logits: &[Vec<f32>]) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Contract("a trial vote needs at least one window".into()));
    }
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in predictions {
        *votes.entry(p).or_default() += 1;
    }
    let top = *votes.values().max().expect("nonempty");
    let tied: Vec<usize> = votes.iter().filter(|(_, &v)| v == top).map(|(&c, _)| c).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    let score = |c: usize| logits.iter().map(|row| row.get(c).copied().unwrap_or(0.0) as f64).sum::<f64>();
    let mut best = tied[0];
    for &c in &tied[1..] {
        if score(c) > score(best) {
            best = c;
        }
    }
    Ok(best)
}

/// Trial-level accuracy from per-window logits aligned with `set`.
pub fn trial_accuracy(set: &WindowSet, logits: &[Vec<f32>]) -> Result<f64> {
    let mut by_trial: BTreeMap<&str, (usize, Vec<usize>, Vec<Vec<f32>>)> = BTreeMap::new();
    for (i, row) in logits.iter().enumerate() {
        let e = by_trial.entry(set.origin[i].0.as_str()).or_insert((set.labels[i], Vec::new(), Vec::new()));
        e.1.push(crate::train::argmax(row));
        e.2.push(row.clone());
    }
    if by_trial.is_empty() {
        return Err(Error::Contract("no trials to vote on".into()));
    }
    let mut correct = 0;
    for (label, preds, rows) in by_trial.values() {
        correct += (trial_vote(preds, rows)? == *label) as usize;
    }
    Ok(correct as f64 / by_trial.len() as f64)
}
