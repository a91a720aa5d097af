//! Augmentation distributions, sampled chains, and the waveform effects.
//!
//! An [`AugDistribution`] holds five apply-probabilities and eight effect
//! bounds. [`sample_chain`] draws one concrete [`AugChain`] from it; the chain
//! carries every random choice it needs, so [`apply_chain`] is deterministic.

mod effects;
mod stretch;

pub use effects::{
    apply_band_reject, apply_band_reject_at, apply_clip, apply_pitch_shift, apply_reverb,
    apply_reverb_seeded, apply_time_drop, apply_time_drop_at, reverb_impulse_response,
    BAND_REJECT_MAX_HZ, BAND_REJECT_MIN_HZ, DEFAULT_RIR_SEED, MAX_SHIFT_CENTS,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::error::{Error, Result};

/// Parameter names in canonical order. Report tables and MED analysis use
/// this order.
pub const PARAMETER_NAMES: [&str; 13] = [
    "p_timedrop",
    "p_pitch",
    "p_reverb",
    "p_clip",
    "p_bandreject",
    "room_scale_min",
    "room_scale_max",
    "band_scaler",
    "pitch_shift_max",
    "p_pitch_quick",
    "clip_min",
    "clip_max",
    "timedrop_max",
];

/// Sampling range of each parameter, indexed like [`PARAMETER_NAMES`].
pub const PARAMETER_RANGES: [(f64, f64); 13] = [
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 30.0),
    (30.0, 100.0),
    (0.0, 1.0),
    (150.0, 450.0),
    (0.0, 1.0),
    (0.3, 0.6),
    (0.6, 1.0),
    (30.0, 150.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawDistribution")]
pub struct AugDistribution {
    pub p_timedrop: f64,
    pub p_pitch: f64,
    pub p_reverb: f64,
    pub p_clip: f64,
    pub p_bandreject: f64,
    pub room_scale_min: f64,
    pub room_scale_max: f64,
    pub band_scaler: f64,
    /// Cents.
    pub pitch_shift_max: f64,
    pub p_pitch_quick: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Milliseconds.
    pub timedrop_max: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistribution {
    p_timedrop: f64,
    p_pitch: f64,
    p_reverb: f64,
    p_clip: f64,
    p_bandreject: f64,
    room_scale_min: f64,
    room_scale_max: f64,
    band_scaler: f64,
    pitch_shift_max: f64,
    p_pitch_quick: f64,
    clip_min: f64,
    clip_max: f64,
    timedrop_max: f64,
}

impl TryFrom<RawDistribution> for AugDistribution {
    type Error = Error;

    fn try_from(r: RawDistribution) -> Result<Self> {
        let d = AugDistribution {
            p_timedrop: r.p_timedrop,
            p_pitch: r.p_pitch,
            p_reverb: r.p_reverb,
            p_clip: r.p_clip,
            p_bandreject: r.p_bandreject,
            room_scale_min: r.room_scale_min,
            room_scale_max: r.room_scale_max,
            band_scaler: r.band_scaler,
            pitch_shift_max: r.pitch_shift_max,
            p_pitch_quick: r.p_pitch_quick,
            clip_min: r.clip_min,
            clip_max: r.clip_max,
            timedrop_max: r.timedrop_max,
        };
        d.validate()?;
        Ok(d)
    }
}

impl AugDistribution {
    /// Builds a distribution from values in [`PARAMETER_NAMES`] order.
    pub fn from_values(v: [f64; 13]) -> Result<Self> {
        let d = AugDistribution {
            p_timedrop: v[0],
            p_pitch: v[1],
            p_reverb: v[2],
            p_clip: v[3],
            p_bandreject: v[4],
            room_scale_min: v[5],
            room_scale_max: v[6],
            band_scaler: v[7],
            pitch_shift_max: v[8],
            p_pitch_quick: v[9],
            clip_min: v[10],
            clip_max: v[11],
            timedrop_max: v[12],
        };
        d.validate()?;
        Ok(d)
    }

    pub fn values(&self) -> [f64; 13] {
        [
            self.p_timedrop,
            self.p_pitch,
            self.p_reverb,
            self.p_clip,
            self.p_bandreject,
            self.room_scale_min,
            self.room_scale_max,
            self.band_scaler,
            self.pitch_shift_max,
            self.p_pitch_quick,
            self.clip_min,
            self.clip_max,
            self.timedrop_max,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        PARAMETER_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values()[i])
    }

    /// Every apply-probability zero; effect bounds at the low end of their
    /// ranges.
    pub fn no_augmentation() -> Self {
        let mut v = PARAMETER_RANGES.map(|(lo, _)| lo);
        v[6] = 30.0;
        v[11] = 0.6;
        Self::from_values(v).expect("lower bounds are in range")
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, value), (lo, hi)) in PARAMETER_NAMES
            .iter()
            .zip(self.values())
            .zip(PARAMETER_RANGES)
        {
            if !(lo..=hi).contains(&value) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {value} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Draws every parameter independently and uniformly from its range.
pub fn sample_distribution<R: Rng + ?Sized>(rng: &mut R) -> AugDistribution {
    let v = PARAMETER_RANGES.map(|(lo, hi)| rng.gen_range(lo..=hi));
    AugDistribution::from_values(v).expect("sampled within ranges")
}

/// One concrete effect application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    TimeDrop {
        drop_length_ms: f64,
        /// Fraction in `[0, 1)` locating the interval among valid offsets.
        position: f64,
    },
    PitchShift {
        shift_cents: f64,
        quick: bool,
    },
    Reverb {
        room_scale: f64,
        rir_seed: u64,
    },
    BandReject {
        center_hz: f64,
        width_hz: f64,
        band_scaler: f64,
    },
    Clip {
        clip_factor: f64,
    },
}

impl Effect {
    /// Position in the fixed application order.
    pub fn rank(&self) -> usize {
        match self {
            Effect::TimeDrop { .. } => 0,
            Effect::PitchShift { .. } => 1,
            Effect::Reverb { .. } => 2,
            Effect::BandReject { .. } => 3,
            Effect::Clip { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        ["time_drop", "pitch_shift", "reverb", "band_reject", "clip"][self.rank()]
    }

    pub fn apply(&self, w: &Waveform) -> Result<Waveform> {
        match *self {
            Effect::TimeDrop {
                drop_length_ms,
                position,
            } => apply_time_drop_at(w, drop_length_ms, position),
            Effect::PitchShift { shift_cents, quick } => apply_pitch_shift(w, shift_cents, quick),
            Effect::Reverb {
                room_scale,
                rir_seed,
            } => apply_reverb_seeded(w, room_scale, rir_seed),
            Effect::BandReject {
                center_hz,
                band_scaler,
                ..
            } => apply_band_reject_at(w, band_scaler, center_hz),
            Effect::Clip { clip_factor } => apply_clip(w, clip_factor),
        }
    }
}

/// An ordered list of effects, each appearing at most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Effect>", into = "Vec<Effect>")]
pub struct AugChain {
    effects: Vec<Effect>,
}

impl TryFrom<Vec<Effect>> for AugChain {
    type Error = Error;

    fn try_from(effects: Vec<Effect>) -> Result<Self> {
        AugChain::new(effects)
    }
}

impl From<AugChain> for Vec<Effect> {
    fn from(c: AugChain) -> Self {
        c.effects
    }
}

impl AugChain {
    pub fn new(effects: Vec<Effect>) -> Result<Self> {
        let mut seen = [false; 5];
        for e in &effects {
            if std::mem::replace(&mut seen[e.rank()], true) {
                return Err(Error::InvalidParameter(format!(
                    "effect {} appears twice in chain",
                    e.name()
                )));
            }
        }
        Ok(AugChain { effects })
    }

    pub fn effects(&self) -> &[Effect] {
        &self.effects
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }

    pub fn len(&self) -> usize {
        self.effects.len()
    }

    /// Whether every sampled scalar lies within the bounds `d` implies.
    pub fn is_consistent_with(&self, d: &AugDistribution) -> bool {
        self.effects.iter().all(|e| match *e {
            Effect::TimeDrop {
                drop_length_ms,
                position,
            } => (0.0..=d.timedrop_max).contains(&drop_length_ms) && (0.0..1.0).contains(&position),
            Effect::PitchShift { shift_cents, .. } => shift_cents.abs() <= d.pitch_shift_max,
            Effect::Reverb { room_scale, .. } => {
                (d.room_scale_min..=d.room_scale_max).contains(&room_scale)
            }
            Effect::BandReject {
                center_hz,
                width_hz,
                band_scaler,
            } => {
                band_scaler == d.band_scaler
                    && (BAND_REJECT_MIN_HZ..=BAND_REJECT_MAX_HZ).contains(&center_hz)
                    && width_hz == band_scaler * center_hz
            }
            Effect::Clip { clip_factor } => (d.clip_min..=d.clip_max).contains(&clip_factor),
        })
    }
}

/// Samples a chain: each effect is included with its apply-probability and
/// receives uniformly drawn parameters. Order is time drop, pitch shift,
/// reverb, band reject, clip.
///
/// The random stream is consumed identically whatever the inclusion
/// outcomes, so one probability change does not reshuffle the other effects.
pub fn sample_chain<R: Rng + ?Sized>(d: &AugDistribution, rng: &mut R) -> AugChain {
    let mut effects = Vec::with_capacity(5);

    let u: f64 = rng.gen();
    let drop_length_ms = rng.gen_range(0.0..=d.timedrop_max);
    let position = rng.gen_range(0.0..1.0);
    if u < d.p_timedrop {
        effects.push(Effect::TimeDrop {
            drop_length_ms,
            position,
        });
    }

    let u: f64 = rng.gen();
    let shift_cents = rng.gen_range(-d.pitch_shift_max..=d.pitch_shift_max);
    let quick = rng.gen::<f64>() < d.p_pitch_quick;
    if u < d.p_pitch {
        effects.push(Effect::PitchShift { shift_cents, quick });
    }

    let u: f64 = rng.gen();
    let room_scale = rng.gen_range(d.room_scale_min..=d.room_scale_max);
    let rir_seed: u64 = rng.gen();
    if u < d.p_reverb {
        effects.push(Effect::Reverb {
            room_scale,
            rir_seed,
        });
    }

    let u: f64 = rng.gen();
    let center_hz = rng.gen_range(BAND_REJECT_MIN_HZ..=BAND_REJECT_MAX_HZ);
    if u < d.p_bandreject {
        effects.push(Effect::BandReject {
            center_hz,
            width_hz: d.band_scaler * center_hz,
            band_scaler: d.band_scaler,
        });
    }

    let u: f64 = rng.gen();
    let clip_factor = rng.gen_range(d.clip_min..=d.clip_max);
    if u < d.p_clip {
        effects.push(Effect::Clip { clip_factor });
    }

    AugChain { effects }
}

/// Applies the chain's effects in order. Length and rate are preserved.
pub fn apply_chain(c: &AugChain, w: &Waveform) -> Result<Waveform> {
    c.effects
        .iter()
        .try_fold(w.clone(), |acc, e| e.apply(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn all_probabilities(p: f64) -> AugDistribution {
        let mut d = AugDistribution::no_augmentation();
        d.p_timedrop = p;
        d.p_pitch = p;
        d.p_reverb = p;
        d.p_clip = p;
        d.p_bandreject = p;
        d
    }

    #[test]
    fn sampled_distributions_are_valid_and_reproducible() {
        let mut rng = seeded_rng(11);
        for _ in 0..1000 {
            sample_distribution(&mut rng).validate().unwrap();
        }
        assert_eq!(
            sample_distribution(&mut seeded_rng(5)),
            sample_distribution(&mut seeded_rng(5))
        );
    }

    #[test]
    fn clip_min_mean_matches_uniform() {
        let mut rng = seeded_rng(12);
        let mean = (0..10_000)
            .map(|_| sample_distribution(&mut rng).clip_min)
            .sum::<f64>()
            / 10_000.0;
        assert!((0.44..=0.46).contains(&mean), "{mean}");
    }

    #[test]
    fn zero_and_one_probabilities() {
        let mut rng = seeded_rng(1);
        assert!(sample_chain(&all_probabilities(0.0), &mut rng).is_empty());
        let c = sample_chain(&all_probabilities(1.0), &mut rng);
        let ranks: Vec<_> = c.effects().iter().map(Effect::rank).collect();
        assert_eq!(ranks, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn pitch_bound_propagates() {
        let mut d = AugDistribution::no_augmentation();
        d.p_pitch = 1.0;
        d.pitch_shift_max = 150.0;
        let mut rng = seeded_rng(3);
        for _ in 0..500 {
            let c = sample_chain(&d, &mut rng);
            match c.effects() {
                [Effect::PitchShift { shift_cents, .. }] => assert!(shift_cents.abs() <= 150.0),
                other => panic!("unexpected chain {other:?}"),
            }
            assert!(c.is_consistent_with(&d));
        }
    }

    #[test]
    fn clip_inclusion_rate() {
        let mut d = AugDistribution::no_augmentation();
        d.p_clip = 0.25;
        let mut rng = seeded_rng(4);
        let hits = (0..10_000)
            .filter(|_| !sample_chain(&d, &mut rng).is_empty())
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((0.22..=0.28).contains(&rate), "{rate}");
    }

    #[test]
    fn sampled_chains_consistent_with_generator() {
        let mut rng = seeded_rng(9);
        for _ in 0..200 {
            let d = sample_distribution(&mut rng);
            let c = sample_chain(&d, &mut rng);
            assert!(c.is_consistent_with(&d));
        }
    }

    #[test]
    fn duplicate_effect_rejected() {
        let e = Effect::Clip { clip_factor: 0.5 };
        assert!(AugChain::new(vec![e, e]).is_err());
    }

    #[test]
    fn empty_and_identity_chains() {
        let w = Waveform::new((0..1600).map(|i| (i as f64 * 0.01).sin() * 0.7).collect(), 16000)
            .unwrap();
        assert_eq!(apply_chain(&AugChain::default(), &w).unwrap(), w);
        let c = AugChain::new(vec![Effect::Clip { clip_factor: 1.0 }]).unwrap();
        assert_eq!(apply_chain(&c, &w).unwrap(), w);
    }

    #[test]
    fn drop_then_clip_on_ones() {
        let w = Waveform::new(vec![1.0; 16000], 16000).unwrap();
        let c = AugChain::new(vec![
            Effect::TimeDrop {
                drop_length_ms: 50.0,
                position: 0.3,
            },
            Effect::Clip { clip_factor: 0.5 },
        ])
        .unwrap();
        let out = apply_chain(&c, &w).unwrap();
        assert_eq!(out.peak(), 0.5);
        assert!(out.samples().iter().filter(|&&s| s == 0.0).count() >= 800);
    }

    #[test]
    fn distribution_json_rejects_unknown_and_out_of_range() {
        let d = sample_distribution(&mut seeded_rng(2));
        let json = d.to_json();
        assert_eq!(AugDistribution::from_json(&json).unwrap(), d);
        let extra = json.replacen('{', r#"{"p_noise":0.1,"#, 1);
        assert!(AugDistribution::from_json(&extra).is_err());
        let mut bad = d;
        bad.clip_min = 0.9;
        assert!(AugDistribution::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
        let missing = json.replacen(r#""p_clip":"#, r#""p_clop":"#, 1);
        assert!(AugDistribution::from_json(&missing).is_err());
    }

    #[test]
    fn parameter_lookup() {
        let d = sample_distribution(&mut seeded_rng(8));
        assert_eq!(d.get("timedrop_max"), Some(d.timedrop_max));
        assert_eq!(d.get("clip_min"), Some(d.clip_min));
        assert_eq!(d.get("nope"), None);
    }
}
