//! Resampling and duration-preserving time stretch used by the pitch shifter.

use std::f64::consts::PI;

/// Zero crossings on each side of the windowed-sinc kernel.
const SINC_LOBES: f64 = 8.0;
const KAISER_BETA: f64 = 8.0;

/// Reads `x` at positions `i * step` by linear interpolation.
pub(crate) fn resample_linear(x: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let k = t.floor() as usize;
            let frac = t - k as f64;
            let a = x.get(k).copied().unwrap_or(0.0);
            let b = x.get(k + 1).copied().unwrap_or(0.0);
            a + (b - a) * frac
        })
        .collect()
}

/// Reads `x` at positions `i * step` through a Kaiser-windowed sinc kernel,
/// low-passed at `min(1, 1/step)` of Nyquist.
pub(crate) fn resample_sinc(x: &[f64], step: f64, out_len: usize) -> Vec<f64> {
    let cutoff = (1.0 / step).min(1.0);
    let radius = SINC_LOBES / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let lo = (t - radius).ceil().max(0.0) as usize;
            let hi = ((t + radius).floor() as usize).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let r = d / radius;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                acc += cutoff * sinc(cutoff * d) * window * xk;
            }
            acc
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..50 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Waveform-similarity overlap-add: stretches `x` to `out_len` samples
/// without changing its local frequency content.
///
/// Each output frame is read from the analysis position within `±tolerance`
/// of its nominal position that best continues the previous frame. Frames
/// are Hann-weighted and normalised by the summed window, so every output
/// sample is a convex combination of input samples.
pub(crate) fn wsola(x: &[f64], out_len: usize, frame: usize) -> Vec<f64> {
    let frame = frame.max(4) & !1;
    if x.len() < frame || out_len < frame {
        return resample_linear(x, x.len() as f64 / out_len.max(1) as f64, out_len);
    }
    let syn_hop = frame / 2;
    let ana_hop = x.len() as f64 / out_len as f64 * syn_hop as f64;
    let tolerance = frame / 4;
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos())
        .collect();
    let max_pos = x.len() - frame;
    let get = |i: usize| x.get(i).copied().unwrap_or(0.0);

    let mut out = vec![0.0; out_len + frame];
    let mut wsum = vec![0.0; out_len + frame];
    let mut prev: Option<usize> = None;
    let mut k = 0usize;
    while k * syn_hop < out_len {
        let nominal = ((k as f64 * ana_hop).round() as usize).min(max_pos);
        let pos = match prev {
            None => nominal,
            Some(p) => {
                let natural = p + syn_hop;
                let lo = nominal.saturating_sub(tolerance);
                let hi = (nominal + tolerance).min(max_pos);
                let mut best = nominal;
                let mut best_score = f64::NEG_INFINITY;
                for cand in lo..=hi {
                    let score: f64 = (0..frame)
                        .step_by(2)
                        .map(|n| get(natural + n) * x[cand + n])
                        .sum();
                    if score > best_score {
                        best_score = score;
                        best = cand;
                    }
                }
                best
            }
        };
        let base = k * syn_hop;
        for n in 0..frame {
            out[base + n] += window[n] * x[pos + n];
            wsum[base + n] += window[n];
        }
        prev = Some(pos);
        k += 1;
    }
    out.truncate(out_len);
    out.iter()
        .zip(&wsum)
        .map(|(&o, &w)| if w > 1e-9 { o / w } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
        assert!((bessel_i0(8.0) - 427.564_115_721_804_7).abs() < 1e-9);
    }

    #[test]
    fn unit_step_resampling_is_identity() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin()).collect();
        assert_eq!(resample_linear(&x, 1.0, 300), x);
        let s = resample_sinc(&x, 1.0, 300);
        for (a, b) in s.iter().zip(&x).skip(20).take(260) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wsola_is_non_amplifying_and_sized() {
        let x: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
        for &len in &[2500usize, 5000, 9000] {
            let y = wsola(&x, len, 512);
            assert_eq!(y.len(), len);
            assert!(y.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }
}
