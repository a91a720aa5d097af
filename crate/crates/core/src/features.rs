//! 64-band log-Mel spectrograms (25 ms Hann frames, 10 ms hop, 512-point
//! FFT, HTK Mel scale over 0-8 kHz) and time pooling.

use std::sync::{Arc, OnceLock};

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::corpus::Waveform;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 64;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const N_FFT: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
const F_MAX: f64 = 8000.0;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the 64 filters, in Hz.
pub fn mel_band_centers() -> [f64; N_MELS] {
    let top = hz_to_mel(F_MAX);
    std::array::from_fn(|b| mel_to_hz(top * (b + 1) as f64 / (N_MELS + 1) as f64))
}

/// frames × 64 matrix of natural-log band energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    frames: usize,
}

impl MelSpectrogram {
    pub fn from_rows(rows: &[[f64; N_MELS]]) -> Self {
        MelSpectrogram {
            values: rows.iter().flatten().copied().collect(),
            frames: rows.len(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * N_MELS..(frame + 1) * N_MELS]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(N_MELS)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WINDOW_SAMPLES {
        0
    } else {
        (num_samples - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

struct MelFrontend {
    window: Vec<f64>,
    /// Per band: first FFT bin and its triangular weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    fn new() -> Self {
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos()
            })
            .collect();
        let top = hz_to_mel(F_MAX);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let filters = (0..N_MELS)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let weights: Vec<(usize, f64)> = (0..=N_FFT / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let first = weights.first().map_or(0, |&(k, _)| k);
                (first, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        MelFrontend {
            window,
            filters,
            fft,
        }
    }

    fn compute(&self, samples: &[f64]) -> MelSpectrogram {
        let frames = frame_count(samples.len());
        let mut values = Vec::with_capacity(frames * N_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        for t in 0..frames {
            let frame = &samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES];
            for (slot, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(x * w, 0.0);
            }
            buf[WINDOW_SAMPLES..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let e: f64 = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(w, p)| w * p)
                    .sum();
                values.push((e + LOG_FLOOR).ln());
            }
        }
        MelSpectrogram { values, frames }
    }
}

fn frontend() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(MelFrontend::new)
}

pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::InvalidParameter(format!(
            "log-Mel frontend expects {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate()
        )));
    }
    if w.len() < WINDOW_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "waveform of {} samples is shorter than one 25 ms frame",
            w.len()
        )));
    }
    Ok(frontend().compute(w.samples()))
}

/// Per-band mean over frames.
pub fn pool_mean(m: &MelSpectrogram) -> Result<[f64; N_MELS]> {
    if m.frames == 0 {
        return Err(Error::InvalidParameter("empty spectrogram".into()));
    }
    let mut acc = [0.0; N_MELS];
    for row in m.rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let n = m.frames as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Pooled log-Mel of a waveform: the representation views are scored on.
pub fn pooled_features(w: &Waveform) -> Result<[f64; N_MELS]> {
    pool_mean(&mel_spectrogram(w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64) -> Waveform {
        Waveform::new(
            (0..16000)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn one_second_shape() {
        let m = mel_spectrogram(&sine(300.0, 0.5)).unwrap();
        assert_eq!(m.frames(), 98);
        assert_eq!(m.values().len(), 98 * 64);
        assert!(m.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn silence_hits_floor() {
        let m = mel_spectrogram(&Waveform::silence(16000, 16000)).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(m.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let centers = mel_band_centers();
        let nearest = (0..N_MELS)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centers[b] - 1000.0).abs())
            })
            .unwrap();
        let m = mel_spectrogram(&sine(1000.0, 0.5)).unwrap();
        for row in m.rows() {
            let argmax = (0..N_MELS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn filters_cover_every_band() {
        let fe = frontend();
        assert_eq!(fe.filters.len(), N_MELS);
        assert!(fe.filters.iter().all(|(_, w)| !w.is_empty()));
    }

    #[test]
    fn rejects_short_and_wrong_rate() {
        assert!(mel_spectrogram(&Waveform::silence(399, 16000)).is_err());
        assert!(mel_spectrogram(&Waveform::silence(400, 16000)).is_ok());
        assert!(mel_spectrogram(&Waveform::silence(16000, 8000)).is_err());
    }

    #[test]
    fn louder_never_lowers_energy() {
        let base = sine(700.0, 0.2);
        let loud = Waveform::new(base.samples().iter().map(|s| s * 3.0).collect(), 16000).unwrap();
        let a = mel_spectrogram(&base).unwrap();
        let b = mel_spectrogram(&loud).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| y >= x));
    }

    #[test]
    fn pooling() {
        let a = [1.0; N_MELS];
        let mut b = [0.0; N_MELS];
        b[3] = 4.0;
        assert_eq!(pool_mean(&MelSpectrogram::from_rows(&[a])).unwrap(), a);
        let mean = pool_mean(&MelSpectrogram::from_rows(&[a, b])).unwrap();
        for i in 0..N_MELS {
            assert_eq!(mean[i], (a[i] + b[i]) / 2.0);
        }
        let c = [2.5; N_MELS];
        assert_eq!(pool_mean(&MelSpectrogram::from_rows(&[c, c, c])).unwrap(), c);
        assert!(pool_mean(&MelSpectrogram::from_rows(&[])).is_err());
    }

    #[test]
    fn bit_identical_on_repeat() {
        let w = sine(1234.0, 0.4);
        assert_eq!(mel_spectrogram(&w).unwrap(), mel_spectrogram(&w).unwrap());
    }
}
