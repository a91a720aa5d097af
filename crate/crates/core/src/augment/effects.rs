use std::f64::consts::PI;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use super::stretch::{resample_linear, resample_sinc, wsola};
use crate::corpus::Waveform;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Largest accepted shift. Sampled chains stay within ±450 cents; direct
/// calls may go up to an octave.
pub const MAX_SHIFT_CENTS: f64 = 1200.0;
pub const BAND_REJECT_MIN_HZ: f64 = 100.0;
pub const BAND_REJECT_MAX_HZ: f64 = 7600.0;
/// Impulse-response seed used by [`apply_reverb`].
pub const DEFAULT_RIR_SEED: u64 = 0x5EED_0F_2EEB;

/// Frame length of the duration-restoring stretch, in seconds.
const STRETCH_FRAME_S: f64 = 0.032;

/// Zeroes one interval of `round(drop_length_ms / 1000 * rate)` samples at a
/// uniformly random offset.
pub fn apply_time_drop<R: Rng + ?Sized>(
    w: &Waveform,
    drop_length_ms: f64,
    rng: &mut R,
) -> Result<Waveform> {
    apply_time_drop_at(w, drop_length_ms, rng.gen_range(0.0..1.0))
}

/// Time drop with the offset given as a fraction of the valid offsets.
pub fn apply_time_drop_at(w: &Waveform, drop_length_ms: f64, position: f64) -> Result<Waveform> {
    if !(drop_length_ms >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "drop length must be nonnegative, got {drop_length_ms}"
        )));
    }
    if w.is_empty() {
        return Err(Error::InvalidParameter("time drop on empty waveform".into()));
    }
    let n = ((drop_length_ms / 1000.0 * w.sample_rate() as f64).round() as usize).min(w.len());
    if n == 0 {
        return Ok(w.clone());
    }
    let slots = w.len() - n + 1;
    let start = ((position.clamp(0.0, 1.0) * slots as f64) as usize).min(slots - 1);
    let mut out = w.samples().to_vec();
    out[start..start + n].fill(0.0);
    Ok(w.with_samples(out))
}

/// Shifts pitch by `2^(shift_cents / 1200)` keeping the duration: resample by
/// the pitch ratio, then stretch back to the original length.
///
/// `quick` selects linear interpolation instead of windowed sinc. The output
/// peak never exceeds the input peak.
pub fn apply_pitch_shift(w: &Waveform, shift_cents: f64, quick: bool) -> Result<Waveform> {
    if !(shift_cents.abs() <= MAX_SHIFT_CENTS) {
        return Err(Error::InvalidParameter(format!(
            "pitch shift {shift_cents} cents outside ±{MAX_SHIFT_CENTS}"
        )));
    }
    if shift_cents == 0.0 || w.is_empty() {
        return Ok(w.clone());
    }
    let ratio = 2f64.powf(shift_cents / 1200.0);
    let len = w.len();
    let resampled_len = ((len as f64 / ratio).round() as usize).max(1);
    let resampled = if quick {
        resample_linear(w.samples(), ratio, resampled_len)
    } else {
        resample_sinc(w.samples(), ratio, resampled_len)
    };
    let frame = (STRETCH_FRAME_S * w.sample_rate() as f64).round() as usize;
    let mut out = wsola(&resampled, len, frame);
    out.resize(len, 0.0);
    limit_peak(&mut out, w.peak());
    finite_or_err(&out, "pitch shift")?;
    Ok(w.with_samples(out))
}

/// Exponentially decaying white-noise impulse response with
/// `RT60 = room_scale / 100` seconds.
///
/// Tap 0 is the direct path (1.0); the noise tail is scaled to unit energy.
/// A zero room scale gives a unit delta.
pub fn reverb_impulse_response(room_scale: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let rt60 = room_scale / 100.0;
    let len = (rt60 * sample_rate as f64).ceil() as usize;
    let mut h = vec![1.0];
    if len <= 1 {
        return h;
    }
    let mut rng = seeded_rng(seed);
    // -60 dB amplitude decay over rt60: 10^(-3 n / (rt60 * rate)).
    let decay_per_sample = -3.0 * std::f64::consts::LN_10 / (rt60 * sample_rate as f64);
    let tail: Vec<f64> = (1..len)
        .map(|n| rng.gen_range(-1.0..=1.0) * (decay_per_sample * n as f64).exp())
        .collect();
    let energy: f64 = tail.iter().map(|t| t * t).sum();
    let scale = if energy > 0.0 { energy.sqrt().recip() } else { 0.0 };
    h.extend(tail.iter().map(|t| t * scale));
    h
}

pub fn apply_reverb(w: &Waveform, room_scale: f64) -> Result<Waveform> {
    apply_reverb_seeded(w, room_scale, DEFAULT_RIR_SEED)
}

/// Convolves with [`reverb_impulse_response`], truncates to the input length
/// and rescales to the input peak.
pub fn apply_reverb_seeded(w: &Waveform, room_scale: f64, seed: u64) -> Result<Waveform> {
    if !(0.0..=100.0).contains(&room_scale) {
        return Err(Error::InvalidParameter(format!(
            "room scale {room_scale} outside [0, 100]"
        )));
    }
    let h = reverb_impulse_response(room_scale, w.sample_rate(), seed);
    let in_peak = w.peak();
    if h.len() == 1 || in_peak == 0.0 {
        return Ok(w.clone());
    }
    let mut out = fft_convolve(w.samples(), &h);
    out.truncate(w.len());
    let out_peak = out.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if out_peak > 0.0 {
        let g = in_peak / out_peak;
        out.iter_mut().for_each(|s| *s *= g);
    }
    finite_or_err(&out, "reverb")?;
    Ok(w.with_samples(out))
}

/// Clamps every sample to `±clip_factor * max|w|`. Silence is returned as is.
pub fn apply_clip(w: &Waveform, clip_factor: f64) -> Result<Waveform> {
    if !(clip_factor > 0.0 && clip_factor <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "clip factor {clip_factor} outside (0, 1]"
        )));
    }
    let m = w.peak();
    if m == 0.0 {
        return Ok(w.clone());
    }
    let bound = clip_factor * m;
    Ok(w.with_samples(w.samples().iter().map(|s| s.clamp(-bound, bound)).collect()))
}

/// Notch filter at a uniformly drawn center frequency in
/// `[BAND_REJECT_MIN_HZ, BAND_REJECT_MAX_HZ]`.
pub fn apply_band_reject<R: Rng + ?Sized>(
    w: &Waveform,
    band_scaler: f64,
    rng: &mut R,
) -> Result<Waveform> {
    let center = rng.gen_range(BAND_REJECT_MIN_HZ..=BAND_REJECT_MAX_HZ);
    apply_band_reject_at(w, band_scaler, center)
}

/// Two cascaded biquad notches at `center_hz` with rejected bandwidth
/// `band_scaler * center_hz`. The output peak never exceeds the input peak.
pub fn apply_band_reject_at(w: &Waveform, band_scaler: f64, center_hz: f64) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&band_scaler) {
        return Err(Error::InvalidParameter(format!(
            "band scaler {band_scaler} outside [0, 1]"
        )));
    }
    let nyquist = w.sample_rate() as f64 / 2.0;
    if !(center_hz > 0.0 && center_hz < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "notch center {center_hz} Hz outside (0, {nyquist})"
        )));
    }
    if band_scaler == 0.0 {
        return Ok(w.clone());
    }
    let notch = Biquad::notch(center_hz, band_scaler * center_hz, w.sample_rate() as f64);
    let mut out = notch.filter(w.samples());
    out = notch.filter(&out);
    limit_peak(&mut out, w.peak());
    finite_or_err(&out, "band reject")?;
    Ok(w.with_samples(out))
}

/// Normalised direct-form biquad coefficients.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Notch with quality `center / bandwidth` (bilinear-transform design).
    fn notch(center_hz: f64, bandwidth_hz: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / rate;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b: [1.0 / a0, -2.0 * cos / a0, 1.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[0] * y1
                    - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

fn limit_peak(samples: &mut [f64], peak: f64) {
    let out_peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if out_peak > peak && out_peak > 0.0 {
        let g = peak / out_peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

fn finite_or_err(samples: &[f64], what: &str) -> Result<()> {
    if samples.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} produced non-finite samples")))
    }
}

/// Full linear convolution via zero-padded FFT.
fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= *q);
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}
