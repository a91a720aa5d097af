//! Small labelled corpus for tests and demos.
//!
//! Each class is noise confined to its own frequency band; every sample also
//! carries a sinusoid at a frequency drawn independently of the class, so
//! samples are individually recognisable while the label lives only in the
//! noise band.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, write_waveform, Dataset, DatasetEntry, LoadedDataset, Waveform};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

const BAND_LOW_HZ: f64 = 200.0;
const BAND_HIGH_HZ: f64 = 7000.0;
const TONE_LOW_HZ: f64 = 150.0;
const TONE_HIGH_HZ: f64 = 6000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Peak amplitude of the per-sample sinusoid.
    pub tone_level: f64,
    /// RMS of the class noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 40,
            n_classes: 2,
            duration_s: 2.0,
            sample_rate: 16_000,
            tone_level: 0.2,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Noise only: samples differ only through their class band and their
    /// noise realisation.
    pub fn band_only() -> Self {
        SynthConfig {
            tone_level: 0.0,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_samples < self.n_classes {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes and one sample per class, got {} classes and {} samples",
                self.n_classes, self.n_samples
            )));
        }
        if !(self.duration_s > 0.0) || self.sample_rate < 16_000 {
            return Err(Error::InvalidParameter(
                "duration must be positive and the rate at least 16 kHz".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.tone_level) || !(0.0..=0.2).contains(&self.noise_level) {
            return Err(Error::InvalidParameter(
                "tone_level must lie in [0, 0.5] and noise_level in [0, 0.2]".into(),
            ));
        }
        Ok(())
    }
}

/// Noise band of `class`: the log-frequency range split into equal parts
/// with a guard gap between neighbours.
pub fn class_band(class: usize, n_classes: usize) -> (f64, f64) {
    let (lo, hi) = (BAND_LOW_HZ.ln(), BAND_HIGH_HZ.ln());
    let width = (hi - lo) / n_classes as f64;
    let start = lo + width * class as f64;
    ((start + 0.1 * width).exp(), (start + 0.9 * width).exp())
}

fn band_noise<R: Rng + ?Sized>(len: usize, rate: u32, band: (f64, f64), rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let bin_hz = rate as f64 / len as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * bin_hz;
        if f < band.0 || f > band.1 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        x.iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

fn quantize(x: f64) -> f64 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

/// Generates the corpus in memory. Samples sit on the 16-bit grid, so a
/// write and reload reproduces them exactly. Labels alternate by index.
pub fn generate(cfg: &SynthConfig) -> Result<LoadedDataset> {
    cfg.validate()?;
    let len = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    let mut entries = Vec::with_capacity(cfg.n_samples);
    let mut waves = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let class = i % cfg.n_classes;
        let mut rng = seeded_rng(derive_seed(cfg.seed, i as u64));
        let noise = band_noise(len, cfg.sample_rate, class_band(class, cfg.n_classes), &mut rng);
        let freq = (rng.gen_range(TONE_LOW_HZ.ln()..TONE_HIGH_HZ.ln())).exp();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let step = std::f64::consts::TAU * freq / cfg.sample_rate as f64;
        let samples = noise
            .iter()
            .enumerate()
            .map(|(t, n)| {
                let tone = cfg.tone_level * (phase + step * t as f64).sin();
                quantize((cfg.noise_level * n + tone).clamp(-1.0, 1.0))
            })
            .collect();
        let id = format!("syn_{i:04}");
        entries.push(DatasetEntry {
            path: PathBuf::from(format!("{id}.wav")),
            id,
            label: format!("class_{class}"),
        });
        waves.push(Waveform::new(samples, cfg.sample_rate)?);
    }
    LoadedDataset::from_parts(Dataset::new(entries)?, waves)
}

/// Writes the corpus as WAV files plus `manifest.jsonl` under `dir` and
/// returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = generate(cfg)?;
    for (entry, w) in data.iter() {
        write_waveform(dir.join(&entry.path), w)?;
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, data.dataset().entries())?;
    Ok(manifest)
}
