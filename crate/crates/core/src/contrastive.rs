//! Contrastive pretraining at desk scale.
//!
//! A two-layer feed-forward encoder maps the time-pooled log-Mel of a 1 s
//! segment to an embedding `h`; a projection head (dense, layer norm, tanh)
//! maps `h` to `v`. Segments cut from the same file are pulled together with
//! a bilinear similarity `s = vᵀ W v'` and a multi-class cross entropy over
//! the batch. Gradients are derived by hand and verified against central
//! finite differences in [`grad_check`].

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_chain, sample_chain, AugDistribution};
use crate::corpus::{cut_random_segment, LoadedDataset, Waveform};
use crate::error::{Error, Result};
use crate::features::{pooled_features, N_MELS};
use crate::rng::{derive_seed, seeded_rng};

const STD_FLOOR: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub hidden: usize,
    /// Size of the embedding `h`.
    pub embed: usize,
    /// Size of the projected vector `v`.
    pub proj: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            hidden: 64,
            embed: 64,
            proj: 32,
        }
    }
}

/// Encoder, projection head and bilinear similarity parameters.
///
/// `input_shift` / `input_scale` standardise the pooled log-Mel input; they
/// are fitted from data, not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input_shift: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub proj_w: DMatrix<f64>,
    pub proj_b: DVector<f64>,
    pub ln_gain: DVector<f64>,
    pub ln_offset: DVector<f64>,
    pub bilinear: DMatrix<f64>,
}

/// Names of the trained parameter groups, in [`EncoderParams::groups`] order.
pub const TRAINABLE_GROUPS: [&str; 9] = [
    "w1", "b1", "w2", "b2", "proj_w", "proj_b", "ln_gain", "ln_offset", "bilinear",
];

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            input_shift: DVector::zeros(N_MELS),
            input_scale: DVector::from_element(N_MELS, 1.0),
            w1: DMatrix::zeros(dims.hidden, N_MELS),
            b1: DVector::zeros(dims.hidden),
            w2: DMatrix::zeros(dims.embed, dims.hidden),
            b2: DVector::zeros(dims.embed),
            proj_w: DMatrix::zeros(dims.proj, dims.embed),
            proj_b: DVector::zeros(dims.proj),
            ln_gain: DVector::from_element(dims.proj, 1.0),
            ln_offset: DVector::zeros(dims.proj),
            bilinear: DMatrix::zeros(dims.proj, dims.proj),
        }
    }

    /// Glorot-uniform dense layers, unit gain, and a bilinear matrix of
    /// `bilinear_scale · I` plus uniform noise of the same scale.
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, bilinear_scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        p.w1 = glorot(dims.hidden, N_MELS, rng);
        p.w2 = glorot(dims.embed, dims.hidden, rng);
        p.proj_w = glorot(dims.proj, dims.embed, rng);
        p.bilinear = DMatrix::from_fn(dims.proj, dims.proj, |i, j| {
            let noise = rng.gen_range(-1.0..1.0) * bilinear_scale;
            if i == j {
                bilinear_scale + noise
            } else {
                noise
            }
        });
        p
    }

    /// Every trainable entry random, biases and gains included.
    pub fn random<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let mut p = Self::init(dims, 0.5, rng);
        for v in [&mut p.b1, &mut p.b2, &mut p.proj_b, &mut p.ln_offset] {
            v.iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        }
        p.ln_gain.iter_mut().for_each(|x| *x = rng.gen_range(0.5..1.5));
        p
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            hidden: self.w1.nrows(),
            embed: self.w2.nrows(),
            proj: self.proj_w.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let shapes_ok = self.input_shift.len() == N_MELS
            && self.input_scale.len() == N_MELS
            && self.w1.ncols() == N_MELS
            && self.b1.len() == d.hidden
            && self.w2.ncols() == d.hidden
            && self.b2.len() == d.embed
            && self.proj_w.ncols() == d.embed
            && self.proj_b.len() == d.proj
            && self.ln_gain.len() == d.proj
            && self.ln_offset.len() == d.proj
            && self.bilinear.shape() == (d.proj, d.proj);
        if !shapes_ok {
            return Err(Error::DimensionMismatch("encoder parameter shapes disagree".into()));
        }
        let finite = self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Numerical("encoder parameters are not finite".into()));
        }
        Ok(())
    }

    /// Trainable groups as flat column-major slices.
    pub fn groups(&self) -> [(&'static str, &[f64]); 9] {
        [
            ("w1", self.w1.as_slice()),
            ("b1", self.b1.as_slice()),
            ("w2", self.w2.as_slice()),
            ("b2", self.b2.as_slice()),
            ("proj_w", self.proj_w.as_slice()),
            ("proj_b", self.proj_b.as_slice()),
            ("ln_gain", self.ln_gain.as_slice()),
            ("ln_offset", self.ln_offset.as_slice()),
            ("bilinear", self.bilinear.as_slice()),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", self.b1.as_mut_slice()),
            ("w2", self.w2.as_mut_slice()),
            ("b2", self.b2.as_mut_slice()),
            ("proj_w", self.proj_w.as_mut_slice()),
            ("proj_b", self.proj_b.as_mut_slice()),
            ("ln_gain", self.ln_gain.as_mut_slice()),
            ("ln_offset", self.ln_offset.as_mut_slice()),
            ("bilinear", self.bilinear.as_mut_slice()),
        ]
    }

    /// Every tensor with its shape, trainable or not.
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let m = |x: &DMatrix<f64>| vec![x.nrows(), x.ncols()];
        let v = |x: &DVector<f64>| vec![x.len()];
        vec![
            ("input_shift", v(&self.input_shift), self.input_shift.as_slice()),
            ("input_scale", v(&self.input_scale), self.input_scale.as_slice()),
            ("w1", m(&self.w1), self.w1.as_slice()),
            ("b1", v(&self.b1), self.b1.as_slice()),
            ("w2", m(&self.w2), self.w2.as_slice()),
            ("b2", v(&self.b2), self.b2.as_slice()),
            ("proj_w", m(&self.proj_w), self.proj_w.as_slice()),
            ("proj_b", v(&self.proj_b), self.proj_b.as_slice()),
            ("ln_gain", v(&self.ln_gain), self.ln_gain.as_slice()),
            ("ln_offset", v(&self.ln_offset), self.ln_offset.as_slice()),
            ("bilinear", m(&self.bilinear), self.bilinear.as_slice()),
        ]
    }

    /// Sets the input standardisation from a sample of pooled features.
    pub fn fit_input_normalization(&mut self, features: &[[f64; N_MELS]]) {
        if features.is_empty() {
            return;
        }
        let n = features.len() as f64;
        for b in 0..N_MELS {
            let mean = features.iter().map(|f| f[b]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[b] - mean).powi(2)).sum::<f64>() / n;
            self.input_shift[b] = mean;
            self.input_scale[b] = var.sqrt().max(1e-3);
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Forward {
    x: DVector<f64>,
    a1: DVector<f64>,
    r: DVector<f64>,
    h: DVector<f64>,
    nhat: DVector<f64>,
    sigma: f64,
    floored: bool,
    v: DVector<f64>,
}

fn standardize(p: &EncoderParams, pooled: &[f64; N_MELS]) -> DVector<f64> {
    DVector::from_fn(N_MELS, |b, _| (pooled[b] - p.input_shift[b]) / p.input_scale[b])
}

fn embed_pooled(p: &EncoderParams, pooled: &[f64; N_MELS]) -> Forward {
    let x = standardize(p, pooled);
    let a1 = &p.w1 * &x + &p.b1;
    let r = a1.map(|a| a.max(0.0));
    let h = &p.w2 * &r + &p.b2;
    let (nhat, sigma, floored, v) = project_parts(p, &h);
    Forward {
        x,
        a1,
        r,
        h,
        nhat,
        sigma,
        floored,
        v,
    }
}

fn project_parts(p: &EncoderParams, h: &DVector<f64>) -> (DVector<f64>, f64, bool, DVector<f64>) {
    let u = &p.proj_w * h + &p.proj_b;
    let m = u.len() as f64;
    let mean = u.sum() / m;
    let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
    let raw = var.sqrt();
    let (sigma, floored) = if raw < STD_FLOOR {
        (STD_FLOOR, true)
    } else {
        (raw, false)
    };
    let nhat = u.map(|x| (x - mean) / sigma);
    let v = DVector::from_fn(u.len(), |i, _| {
        (p.ln_gain[i] * nhat[i] + p.ln_offset[i]).tanh()
    });
    (nhat, sigma, floored, v)
}

/// Embedding `h` of a segment: log-Mel, time mean, two dense layers with a
/// rectifier between them.
pub fn encode(p: &EncoderParams, segment: &Waveform) -> Result<DVector<f64>> {
    Ok(encode_pooled(p, &pooled_features(segment)?))
}

pub fn encode_pooled(p: &EncoderParams, pooled: &[f64; N_MELS]) -> DVector<f64> {
    let x = standardize(p, pooled);
    let r = (&p.w1 * &x + &p.b1).map(|a| a.max(0.0));
    &p.w2 * &r + &p.b2
}

/// Projection head: dense, layer normalisation (std floored at 1e-5), tanh.
pub fn project(p: &EncoderParams, h: &DVector<f64>) -> Result<DVector<f64>> {
    if h.len() != p.proj_w.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "embedding has {} entries, projection expects {}",
            h.len(),
            p.proj_w.ncols()
        )));
    }
    Ok(project_parts(p, h).3)
}

pub fn bilinear_similarity(v1: &DVector<f64>, v2: &DVector<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != v1.len() || w.ncols() != v2.len() {
        return Err(Error::DimensionMismatch(format!(
            "bilinear form is {}x{} but vectors have {} and {} entries",
            w.nrows(),
            w.ncols(),
            v1.len(),
            v2.len()
        )));
    }
    Ok(v1.dot(&(w * v2)))
}

/// Mean over rows of `−log softmax(row)[i]` for the diagonal entry,
/// using max subtraction.
pub fn loss_from_similarities(s: &DMatrix<f64>) -> f64 {
    let b = s.nrows();
    let total: f64 = (0..b)
        .map(|i| {
            let row = s.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - s[(i, i)]
        })
        .sum();
    total / b as f64
}

/// Two augmented 1 s views of one origin sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub origin: String,
    pub view_a: Waveform,
    pub view_b: Waveform,
}

/// Two independent random cuts, each altered by its own sampled chain.
pub fn make_training_pair<R: Rng + ?Sized>(
    origin: &str,
    w: &Waveform,
    d: &AugDistribution,
    rng: &mut R,
) -> Result<SegmentPair> {
    let seg_a = cut_random_segment(w, 1.0, rng)?;
    let seg_b = cut_random_segment(w, 1.0, rng)?;
    let chain_a = sample_chain(d, rng);
    let chain_b = sample_chain(d, rng);
    Ok(SegmentPair {
        origin: origin.to_string(),
        view_a: apply_chain(&chain_a, &seg_a)?,
        view_b: apply_chain(&chain_b, &seg_b)?,
    })
}

/// Pooled features of a batch of pairs; parameter independent, so computed
/// once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub a: Vec<[f64; N_MELS]>,
    pub b: Vec<[f64; N_MELS]>,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[SegmentPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let mut origins: Vec<&str> = pairs.iter().map(|p| p.origin.as_str()).collect();
        origins.sort_unstable();
        if let Some(w) = origins.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(format!(
                "origin {:?} appears twice in one batch",
                w[0]
            )));
        }
        for p in pairs {
            if p.view_a.len() != p.view_b.len() {
                return Err(Error::InvalidParameter(format!(
                    "pair from {:?} has views of different lengths",
                    p.origin
                )));
            }
        }
        Ok(PairBatch {
            a: pairs
                .iter()
                .map(|p| pooled_features(&p.view_a))
                .collect::<Result<_>>()?,
            b: pairs
                .iter()
                .map(|p| pooled_features(&p.view_b))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn similarities(&self, p: &EncoderParams) -> DMatrix<f64> {
        let va: Vec<_> = self.a.iter().map(|x| embed_pooled(p, x).v).collect();
        let vb: Vec<_> = self.b.iter().map(|x| embed_pooled(p, x).v).collect();
        DMatrix::from_fn(self.len(), self.len(), |i, j| va[i].dot(&(&p.bilinear * &vb[j])))
    }

    pub fn loss(&self, p: &EncoderParams) -> f64 {
        loss_from_similarities(&self.similarities(p))
    }

    /// Loss and its gradient with respect to every trainable parameter.
    pub fn loss_and_grad(&self, p: &EncoderParams) -> (f64, EncoderParams) {
        let bsz = self.len();
        let fa: Vec<Forward> = self.a.iter().map(|x| embed_pooled(p, x)).collect();
        let fb: Vec<Forward> = self.b.iter().map(|x| embed_pooled(p, x)).collect();
        let w_vb: Vec<DVector<f64>> = fb.iter().map(|f| &p.bilinear * &f.v).collect();
        let wt_va: Vec<DVector<f64>> = fa.iter().map(|f| p.bilinear.tr_mul(&f.v)).collect();
        let s = DMatrix::from_fn(bsz, bsz, |i, j| fa[i].v.dot(&w_vb[j]));
        let loss = loss_from_similarities(&s);

        // dL/ds_ij = (softmax_ij − δ_ij) / B
        let mut g = DMatrix::zeros(bsz, bsz);
        for i in 0..bsz {
            let max = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.row(i).iter().map(|x| (x - max).exp()).sum();
            for j in 0..bsz {
                let soft = (s[(i, j)] - max).exp() / z;
                g[(i, j)] = (soft - if i == j { 1.0 } else { 0.0 }) / bsz as f64;
            }
        }

        let mut grad = EncoderParams::zeros(p.dims());
        grad.input_scale.fill(0.0);
        grad.ln_gain.fill(0.0);
        for i in 0..bsz {
            for j in 0..bsz {
                grad.bilinear += g[(i, j)] * &fa[i].v * fb[j].v.transpose();
            }
        }
        for (i, f) in fa.iter().enumerate() {
            let dv = (0..bsz).fold(DVector::zeros(f.v.len()), |acc, j| acc + g[(i, j)] * &w_vb[j]);
            backprop(p, f, &dv, &mut grad);
        }
        for (j, f) in fb.iter().enumerate() {
            let dv = (0..bsz).fold(DVector::zeros(f.v.len()), |acc, i| acc + g[(i, j)] * &wt_va[i]);
            backprop(p, f, &dv, &mut grad);
        }
        (loss, grad)
    }
}

/// Accumulates the gradient flowing from `dv` through one forward pass.
fn backprop(p: &EncoderParams, f: &Forward, dv: &DVector<f64>, grad: &mut EncoderParams) {
    let dz = dv.component_mul(&f.v.map(|v| 1.0 - v * v));
    grad.ln_gain += dz.component_mul(&f.nhat);
    grad.ln_offset += &dz;
    let dn = dz.component_mul(&p.ln_gain);
    let m = dn.len() as f64;
    let mean_dn = dn.sum() / m;
    let du = if f.floored {
        dn.map(|x| (x - mean_dn) / f.sigma)
    } else {
        let mean_dn_n = dn.dot(&f.nhat) / m;
        DVector::from_fn(dn.len(), |k, _| {
            (dn[k] - mean_dn - f.nhat[k] * mean_dn_n) / f.sigma
        })
    };
    grad.proj_w += &du * f.h.transpose();
    grad.proj_b += &du;
    let dh = p.proj_w.tr_mul(&du);
    grad.w2 += &dh * f.r.transpose();
    grad.b2 += &dh;
    let dr = p.w2.tr_mul(&dh);
    let da1 = DVector::from_fn(dr.len(), |k, _| if f.a1[k] > 0.0 { dr[k] } else { 0.0 });
    grad.w1 += &da1 * f.x.transpose();
    grad.b1 += &da1;
}

pub fn contrastive_batch_loss(p: &EncoderParams, pairs: &[SegmentPair]) -> Result<f64> {
    Ok(PairBatch::from_pairs(pairs)?.loss(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Largest error within each trainable group.
    pub per_group: Vec<(&'static str, f64)>,
    pub entries_checked: usize,
}

/// Relative disagreement of an analytic and a numeric derivative; pairs
/// that are both below 1e-8 in magnitude agree by absolute tolerance.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic gradient with central differences (step 1e-4) for
/// every trainable entry.
pub fn grad_check_batch(p: &EncoderParams, batch: &PairBatch) -> GradCheck {
    let (_, analytic) = batch.loss_and_grad(p);
    let mut work = p.clone();
    let mut per_group = Vec::with_capacity(TRAINABLE_GROUPS.len());
    let mut entries = 0;
    for (gi, (name, a_slice)) in analytic.groups().into_iter().enumerate() {
        let mut worst = 0.0_f64;
        for (k, &a) in a_slice.iter().enumerate() {
            let orig = work.groups()[gi].1[k];
            work.groups_mut()[gi].1[k] = orig + FD_STEP;
            let plus = batch.loss(&work);
            work.groups_mut()[gi].1[k] = orig - FD_STEP;
            let minus = batch.loss(&work);
            work.groups_mut()[gi].1[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
            entries += 1;
        }
        per_group.push((name, worst));
    }
    GradCheck {
        max_relative_error: per_group.iter().map(|g| g.1).fold(0.0, f64::max),
        per_group,
        entries_checked: entries,
    }
}

pub fn grad_check(p: &EncoderParams, pairs: &[SegmentPair]) -> Result<GradCheck> {
    Ok(grad_check_batch(p, &PairBatch::from_pairs(pairs)?))
}

/// One plain gradient-descent step. Returns the updated parameters and the
/// loss before the update.
pub fn train_step_batch(
    p: &EncoderParams,
    batch: &PairBatch,
    learning_rate: f64,
) -> Result<(EncoderParams, f64)> {
    let (loss, grad) = batch.loss_and_grad(p);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite contrastive loss ({loss}); lower the learning rate"
        )));
    }
    let mut next = p.clone();
    for ((_, dst), (_, g)) in next.groups_mut().into_iter().zip(grad.groups()) {
        dst.iter_mut().zip(g).for_each(|(x, gx)| *x -= learning_rate * gx);
    }
    Ok((next, loss))
}

pub fn train_step(
    p: &EncoderParams,
    pairs: &[SegmentPair],
    learning_rate: f64,
) -> Result<(EncoderParams, f64)> {
    train_step_batch(p, &PairBatch::from_pairs(pairs)?, learning_rate)
}

/// Start offsets of the 1 s windows: every 200 ms, plus a final window
/// anchored at the end when the hop grid leaves a tail uncovered.
pub fn segment_offsets(len: usize, sample_rate: u32) -> Vec<usize> {
    let win = sample_rate as usize;
    let hop = (sample_rate / 5) as usize;
    if len <= win {
        return vec![0];
    }
    let mut offsets: Vec<usize> = (0..).map(|k| k * hop).take_while(|o| o + win <= len).collect();
    let last = *offsets.last().expect("len > win gives at least one window");
    if last + win < len {
        offsets.push(len - win);
    }
    offsets
}

/// Mean of [`encode`] over 1 s windows every 200 ms. Utterances shorter than
/// 1 s are left-padded with zeros to a single window.
pub fn embed_utterance(p: &EncoderParams, w: &Waveform) -> Result<DVector<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidParameter("cannot embed an empty waveform".into()));
    }
    let win = w.sample_rate() as usize;
    let offsets = segment_offsets(w.len(), w.sample_rate());
    let mut acc = DVector::zeros(p.dims().embed);
    for &o in &offsets {
        let segment = if w.len() < win {
            let mut s = vec![0.0; win - w.len()];
            s.extend_from_slice(w.samples());
            w.with_samples(s)
        } else {
            w.with_samples(w.samples()[o..o + win].to_vec())
        };
        acc += encode(p, &segment)?;
    }
    Ok(acc / offsets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dims: EncoderDims,
    pub bilinear_init: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: 0.05,
            dims: EncoderDims::default(),
            bilinear_init: 0.01,
            seed: 0,
        }
    }
}

/// Parameters at initialisation: seeded weights and an input standardisation
/// fitted on one unaugmented segment per origin.
pub fn init_for_dataset(data: &LoadedDataset, cfg: &ToyTrainConfig) -> Result<EncoderParams> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, u64::MAX));
    let mut p = EncoderParams::init(cfg.dims, cfg.bilinear_init, &mut rng);
    let feats = data
        .waveforms()
        .iter()
        .map(|w| pooled_features(&cut_random_segment(w, 1.0, &mut rng)?))
        .collect::<Result<Vec<_>>>()?;
    p.fit_input_normalization(&feats);
    Ok(p)
}

/// The batch of step `step`: `batch_size` distinct origins, each contributing
/// one augmented pair, from the step's own seed.
pub fn training_batch(
    data: &LoadedDataset,
    d: &AugDistribution,
    cfg: &ToyTrainConfig,
    step: usize,
) -> Result<PairBatch> {
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(Error::InvalidParameter(format!(
            "batch size {} needs 1..={} distinct origins",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, step as u64));
    let picks = rand::seq::index::sample(&mut rng, data.len(), cfg.batch_size);
    let pairs = picks
        .iter()
        .map(|i| {
            let (entry, w) = (&data.dataset().entries()[i], &data.waveforms()[i]);
            make_training_pair(&entry.id, w, d, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    PairBatch::from_pairs(&pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Pre-update loss of each step, indexed from `start_step`.
    pub losses: Vec<f64>,
    pub next_step: usize,
}

/// Runs steps `start_step..cfg.steps` from `params`.
pub fn train_toy(
    data: &LoadedDataset,
    d: &AugDistribution,
    cfg: &ToyTrainConfig,
    params: EncoderParams,
    start_step: usize,
) -> Result<TrainOutcome> {
    params.validate()?;
    let mut params = params;
    let mut losses = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let batch = training_batch(data, d, cfg, step)?;
        let (next, loss) = train_step_batch(&params, &batch, cfg.learning_rate)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        params = next;
        losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        losses,
        next_step: cfg.steps.max(start_step),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

const CHECKPOINT_FORMAT: &str = "augsel-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    /// Next step to run when resuming.
    pub step: usize,
    pub run: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            run: self.run.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| TensorRecord {
                    name: name.into(),
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let find = |name: &str| -> Result<&TensorRecord> {
            file.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
        };
        let mat = |name: &str| -> Result<DMatrix<f64>> {
            let t = find(name)?;
            match t.shape[..] {
                [r, c] if r * c == t.data.len() => Ok(DMatrix::from_column_slice(r, c, &t.data)),
                _ => Err(Error::Format(format!("tensor {name:?} has a bad shape"))),
            }
        };
        let vec = |name: &str| -> Result<DVector<f64>> {
            let t = find(name)?;
            match t.shape[..] {
                [n] if n == t.data.len() => Ok(DVector::from_column_slice(&t.data)),
                _ => Err(Error::Format(format!("tensor {name:?} has a bad shape"))),
            }
        };
        let params = EncoderParams {
            input_shift: vec("input_shift")?,
            input_scale: vec("input_scale")?,
            w1: mat("w1")?,
            b1: vec("b1")?,
            w2: mat("w2")?,
            b2: vec("b2")?,
            proj_w: mat("proj_w")?,
            proj_b: vec("proj_b")?,
            ln_gain: vec("ln_gain")?,
            ln_offset: vec("ln_offset")?,
            bilinear: mat("bilinear")?,
        };
        params.validate()?;
        Ok(Checkpoint {
            params,
            step: file.step,
            run: file.run,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderDims {
        EncoderDims {
            hidden: 6,
            embed: 5,
            proj: 4,
        }
    }

    fn tone(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    fn random_batch(b: usize, seed: u64) -> PairBatch {
        let mut rng = seeded_rng(seed);
        let mut feat = || -> [f64; N_MELS] { std::array::from_fn(|_| rng.gen_range(-2.0..2.0)) };
        PairBatch {
            a: (0..b).map(|_| feat()).collect(),
            b: (0..b).map(|_| feat()).collect(),
        }
    }

    #[test]
    fn zero_params_zero_embedding() {
        let p = EncoderParams::zeros(EncoderDims::default());
        let h = encode(&p, &tone(300.0, 16000)).unwrap();
        assert_eq!(h.len(), 64);
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_deterministic_and_sized() {
        let p = EncoderParams::random(small(), &mut seeded_rng(1));
        let w = tone(500.0, 16000);
        let a = encode(&p, &w).unwrap();
        assert_eq!(a, encode(&p, &w).unwrap());
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn projection_range_and_fixed_point() {
        let p = EncoderParams::random(small(), &mut seeded_rng(2));
        let h = DVector::from_vec(vec![3.0, -1.0, 0.5, 9.0, -4.0]);
        let v = project(&p, &h).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.abs() < 1.0));

        let mut q = EncoderParams::zeros(EncoderDims { hidden: 4, embed: 4, proj: 4 });
        q.proj_w = DMatrix::identity(4, 4);
        // zero mean, unit population variance
        let h = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let v = project(&q, &h).unwrap();
        for k in 0..4 {
            assert!((v[k] - h[k].tanh()).abs() < 1e-15);
        }
        assert!(project(&q, &DVector::zeros(3)).is_err());
        // constant input: std floored, output finite
        let v = project(&q, &DVector::from_element(4, 2.0)).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn bilinear_cases() {
        let v1 = DVector::from_vec(vec![1.0, 0.0]);
        let v2 = DVector::from_vec(vec![0.0, 1.0]);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(bilinear_similarity(&v1, &v2, &w).unwrap(), 2.0);
        let a = DVector::from_vec(vec![0.3, -0.7]);
        let b = DVector::from_vec(vec![1.1, 0.2]);
        assert_eq!(bilinear_similarity(&a, &b, &DMatrix::identity(2, 2)).unwrap(), a.dot(&b));
        assert_eq!(bilinear_similarity(&DVector::zeros(2), &b, &w).unwrap(), 0.0);
        assert!(bilinear_similarity(&a, &DVector::zeros(3), &w).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(loss_from_similarities(&DMatrix::from_element(1, 1, 3.7)), 0.0);
        let eq = DMatrix::from_element(5, 5, 0.4);
        assert!((loss_from_similarities(&eq) - 5f64.ln()).abs() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_from_similarities(&s) - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_row_shift_invariant() {
        let mut rng = seeded_rng(3);
        let s = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-3.0..3.0));
        let base = loss_from_similarities(&s);
        let mut shifted = s.clone();
        for j in 0..4 {
            shifted[(2, j)] += 17.5;
        }
        assert!((loss_from_similarities(&shifted) - base).abs() < 1e-12);
    }

    #[test]
    fn duplicate_origin_rejected() {
        let w = tone(200.0, 16000);
        let d = AugDistribution::no_augmentation();
        let mut rng = seeded_rng(0);
        let a = make_training_pair("x", &w, &d, &mut rng).unwrap();
        let b = make_training_pair("x", &w, &d, &mut rng).unwrap();
        assert!(matches!(PairBatch::from_pairs(&[a, b]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn pair_contract() {
        let w = tone(200.0, 24000);
        let d = AugDistribution::no_augmentation();
        let p1 = make_training_pair("x", &w, &d, &mut seeded_rng(9)).unwrap();
        let p2 = make_training_pair("x", &w, &d, &mut seeded_rng(9)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.view_a.len(), 16000);
        assert_eq!(p1.view_b.len(), 16000);
        // Unaugmented views are plain cuts of the source.
        let s = w.samples();
        let found = (0..=8000).any(|o| s[o..o + 16000] == *p1.view_a.samples());
        assert!(found);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = EncoderParams::random(small(), &mut seeded_rng(seed));
            let check = grad_check_batch(&p, &random_batch(3, 100 + seed));
            assert!(check.max_relative_error < 1e-4, "seed {seed}: {:?}", check.per_group);
            assert_eq!(check.per_group.len(), 9);
            assert_eq!(check.per_group[8].0, "bilinear");
        }
    }

    #[test]
    fn unused_entries_have_zero_gradient() {
        let mut p = EncoderParams::random(small(), &mut seeded_rng(4));
        // A hidden unit that never fires contributes nothing downstream.
        p.w1.row_mut(0).fill(0.0);
        p.b1[0] = -1.0;
        let batch = random_batch(2, 5);
        let (_, g) = batch.loss_and_grad(&p);
        assert!(g.w1.row(0).iter().all(|&x| x == 0.0));
        assert!(g.w2.column(0).iter().all(|&x| x == 0.0));
        let check = grad_check_batch(&p, &batch);
        assert!(check.max_relative_error < 1e-4);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = EncoderParams::random(small(), &mut seeded_rng(6));
        let (q, loss) = train_step_batch(&p, &random_batch(3, 7), 0.0).unwrap();
        assert_eq!(p, q);
        assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn fixed_batch_training_drops_below_chance() {
        let batch = random_batch(8, 8);
        let mut p = EncoderParams::init(EncoderDims::default(), 0.01, &mut seeded_rng(8));
        let mut last = f64::NAN;
        for _ in 0..200 {
            let (next, loss) = train_step_batch(&p, &batch, 1e-2).unwrap();
            p = next;
            last = loss;
        }
        assert!(last < 8f64.ln(), "{last}");
    }

    #[test]
    fn offsets() {
        assert_eq!(segment_offsets(16000, 16000), vec![0]);
        assert_eq!(segment_offsets(19200, 16000), vec![0, 3200]);
        assert_eq!(segment_offsets(8000, 16000), vec![0]);
        assert_eq!(segment_offsets(20000, 16000), vec![0, 3200, 4000]);
        let o = segment_offsets(16000 + 5 * 3200, 16000);
        assert_eq!(o.len(), 6);
        assert!(o.windows(2).all(|w| w[1] - w[0] == 3200));
    }

    #[test]
    fn utterance_embedding() {
        let p = EncoderParams::random(small(), &mut seeded_rng(10));
        let w = tone(440.0, 16000);
        assert_eq!(embed_utterance(&p, &w).unwrap(), encode(&p, &w).unwrap());

        let long = tone(440.0, 19200);
        let a = encode(&p, &long.with_samples(long.samples()[..16000].to_vec())).unwrap();
        let b = encode(&p, &long.with_samples(long.samples()[3200..].to_vec())).unwrap();
        let e = embed_utterance(&p, &long).unwrap();
        for k in 0..e.len() {
            assert!((e[k] - (a[k] + b[k]) / 2.0).abs() < 1e-12);
        }

        let mut c = EncoderParams::zeros(small());
        c.b2 = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        for len in [4000, 16000, 37000] {
            assert_eq!(embed_utterance(&c, &tone(300.0, len)).unwrap(), c.b2);
        }
        assert!(embed_utterance(&p, &Waveform::silence(0, 16000)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = EncoderParams::random(EncoderDims::default(), &mut seeded_rng(11));
        let ck = Checkpoint {
            params: p,
            step: 17,
            run: Some(serde_json::json!({"lr": 0.05})),
        };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in back.params.groups().iter().zip(ck.params.groups().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let broken = ck.to_json().replace("\"bilinear\"", "\"bilinearx\"");
        assert!(Checkpoint::from_json(&broken).is_err());
    }
}
