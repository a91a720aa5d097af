//! Labeled audio datasets: manifest parsing, PCM loading and random segment
//! cutting.
//!
//! A manifest is line-delimited JSON, one `{"id", "path", "label"}` object per
//! line. Relative audio paths are resolved against the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Same rate, new samples. Effects use this after they have checked
    /// their output is finite.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    entries: Vec<DatasetEntry>,
    label_vocabulary: BTreeSet<String>,
}

impl Dataset {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.label.is_empty() {
                return Err(Error::Dataset(format!("entry {:?} has an empty label", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        let label_vocabulary = entries.iter().map(|e| e.label.clone()).collect();
        Ok(Dataset {
            entries,
            label_vocabulary,
        })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn label_vocabulary(&self) -> &BTreeSet<String> {
        &self.label_vocabulary
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: DatasetEntry =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if entry.id.is_empty() || entry.label.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: "id and label must be nonempty".into(),
            });
        }
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        entries.push(entry);
    }
    Dataset::new(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[DatasetEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads 16-bit signed mono PCM, scaling by 1/32768.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(format!(
            "expected a single channel, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "unsupported encoding: {:?} {} bits (need 16-bit integer PCM)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM. Samples outside the representable range saturate.
pub fn write_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Number of samples in a segment of `duration_s` seconds.
pub fn segment_len(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s * sample_rate as f64).round() as usize
}

/// Cuts a segment of `round(duration_s * rate)` samples at a uniformly random
/// offset. Shorter inputs are left-padded with zeros.
pub fn cut_random_segment<R: Rng + ?Sized>(
    w: &Waveform,
    duration_s: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "segment duration must be positive, got {duration_s}"
        )));
    }
    let target = segment_len(duration_s, w.sample_rate());
    let len = w.len();
    if len <= target {
        let mut out = vec![0.0; target - len];
        out.extend_from_slice(w.samples());
        return Ok(w.with_samples(out));
    }
    let offset = rng.gen_range(0..=len - target);
    Ok(w.with_samples(w.samples()[offset..offset + target].to_vec()))
}

/// A dataset with every waveform decoded, all at one sample rate.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    dataset: Dataset,
    waveforms: Vec<Waveform>,
    sample_rate: u32,
}

impl LoadedDataset {
    pub fn load(dataset: Dataset) -> Result<Self> {
        let waveforms = dataset
            .entries()
            .iter()
            .map(|e| load_waveform(&e.path))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(dataset, waveforms)
    }

    pub fn from_parts(dataset: Dataset, waveforms: Vec<Waveform>) -> Result<Self> {
        if dataset.len() != waveforms.len() {
            return Err(Error::Dataset(format!(
                "{} entries but {} waveforms",
                dataset.len(),
                waveforms.len()
            )));
        }
        let sample_rate = waveforms.first().map_or(16_000, Waveform::sample_rate);
        if let Some((e, w)) = dataset
            .entries()
            .iter()
            .zip(&waveforms)
            .find(|(_, w)| w.sample_rate() != sample_rate)
        {
            return Err(Error::Dataset(format!(
                "entry {:?} has sample rate {} but the dataset uses {}; resample offline",
                e.id,
                w.sample_rate(),
                sample_rate
            )));
        }
        Ok(LoadedDataset {
            dataset,
            waveforms,
            sample_rate,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn waveforms(&self) -> &[Waveform] {
        &self.waveforms
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.waveforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveforms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DatasetEntry, &Waveform)> {
        self.dataset.entries().iter().zip(&self.waveforms)
    }

    /// Keeps the entries at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let entries = indices
            .iter()
            .map(|&i| self.dataset.entries()[i].clone())
            .collect();
        let waveforms = indices.iter().map(|&i| self.waveforms[i].clone()).collect();
        Self::from_parts(Dataset::new(entries)?, waveforms)
    }
}
