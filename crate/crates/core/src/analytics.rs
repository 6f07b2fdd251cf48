//! Measurements on trained models: verification metrics, linear attribute
//! probes, identity probes, channel Gaussianity and correlation, residual
//! maps and a 2-D PCA embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{binarize_factors, make_pairs, Dataset, FactorSample, Split, FACTOR_NAMES};
use crate::error::{Error, Result};
use crate::model::{Branch, D2AEModel, FeaturePair};
use crate::par::{self, Execution};
use crate::rng;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// verification

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pairs with `score >= threshold` are predicted "same".
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub target_fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub best_threshold: f64,
    pub tpr_at_fpr: Vec<TprAtFpr>,
    /// Ordered by decreasing threshold, so both rates are nondecreasing.
    pub roc: Vec<RocPoint>,
}

/// Threshold sweep over every distinct score plus one above the maximum.
pub fn verification_roc(same: &[f64], diff: &[f64], fprs: &[f64]) -> Result<VerificationReport> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::invalid("verification needs both same and different pairs"));
    }
    if same.iter().chain(diff).any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite verification score"));
    }
    // (score, is_same) sorted by score descending
    let mut all: Vec<(f64, bool)> = same.iter().map(|&s| (s, true)).chain(diff.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (same.len() as f64, diff.len() as f64);
    let total = np + nn;

    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }

    let mut accuracy = -1.0;
    let mut best_threshold = f64::INFINITY;
    for p in &roc {
        let acc = (p.tpr * np + (1.0 - p.fpr) * nn) / total;
        if acc > accuracy {
            accuracy = acc;
            best_threshold = p.threshold;
        }
    }
    let tpr_at_fpr = fprs
        .iter()
        .map(|&target| {
            let mut best = TprAtFpr {
                target_fpr: target,
                tpr: 0.0,
                threshold: f64::INFINITY,
            };
            // points come in decreasing threshold order, so a strict
            // improvement keeps the higher threshold on ties
            for p in roc.iter().filter(|p| p.fpr <= target) {
                if p.tpr > best.tpr {
                    best.tpr = p.tpr;
                    best.threshold = p.threshold;
                }
            }
            best
        })
        .collect();
    Ok(VerificationReport {
        accuracy,
        best_threshold,
        tpr_at_fpr,
        roc,
    })
}

// ---------------------------------------------------------------------------
// feature extraction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSource {
    T,
    P,
    C,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 3] = [FeatureSource::T, FeatureSource::P, FeatureSource::C];

    pub fn pick(self, fp: &FeaturePair<f32>) -> Vec<f64> {
        let src: Vec<f32> = match self {
            FeatureSource::T => fp.f_t.clone(),
            FeatureSource::P => fp.f_p.clone(),
            FeatureSource::C => fp.concat(),
        };
        src.into_iter().map(f64::from).collect()
    }

    pub fn branch(self) -> Option<Branch> {
        match self {
            FeatureSource::T => Some(Branch::T),
            FeatureSource::P => Some(Branch::P),
            FeatureSource::C => None,
        }
    }
}

pub fn feature_rows(fps: &[FeaturePair<f32>], source: FeatureSource) -> Vec<Vec<f64>> {
    fps.iter().map(|fp| source.pick(fp)).collect()
}

/// Cosine-similarity verification on pairs drawn from `split`.
pub fn verify(
    model: &D2AEModel<f32>,
    ds: &Dataset,
    split: Split,
    n_pairs: usize,
    seed: u64,
    source: FeatureSource,
    fprs: &[f64],
    exec: Execution,
) -> Result<VerificationReport> {
    let pairs = make_pairs(ds, split, n_pairs, seed)?;
    let scores: Vec<Result<(f64, bool)>> = par::map_slice(exec, &pairs, |p| {
        let a = source.pick(&model.encode(&ds.samples[p.a].image)?);
        let b = source.pick(&model.encode(&ds.samples[p.b].image)?);
        Ok((cosine_similarity(&a, &b)?, p.same))
    });
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for s in scores {
        let (score, is_same) = s?;
        if is_same {
            same.push(score);
        } else {
            diff.push(score);
        }
    }
    verification_roc(&same, &diff, fprs)
}

// ---------------------------------------------------------------------------
// standardization shared by the probes

#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

fn check_rows(rows: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::invalid(format!("{what}: no samples")))?;
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(what, "rows must share a nonzero length".to_string()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite feature")));
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// linear SVM probes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// Step at epoch `t` is `step / sqrt(t)`.
    pub step: f64,
    pub penalty: f64,
    /// Folds for the held-out accuracy estimate.
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            step: 0.1,
            penalty: 1e-3,
            folds: 5,
            seed: 7,
        }
    }
}

/// One trained attribute direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub attribute: String,
    /// Branch the direction lives in; `None` for concatenated features.
    pub branch: Option<Branch>,
    /// Unit normal in raw feature space.
    pub w: Vec<f64>,
    pub bias: f64,
    /// Cross-validated accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
    pub penalty: f64,
}

impl ProbeEntry {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

/// Attribute directions keyed by attribute name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub entries: Vec<ProbeEntry>,
}

impl ProbeModel {
    pub fn get(&self, attribute: &str) -> Option<&ProbeEntry> {
        self.entries.iter().find(|e| e.attribute == attribute)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.attribute.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Soft-margin SVM in standardized space; returns raw-space `(w, b)`.
fn fit_svm(rows: &[&[f64]], labels: &[bool], cfg: &ProbeConfig, seed_tag: u64) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let std = Standardizer::fit(rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut r = rng::stream(cfg.seed, &[0x5A3, seed_tag]);
    for epoch in 1..=cfg.epochs {
        let eta = cfg.step / (epoch as f64).sqrt();
        order.shuffle(&mut r);
        for &i in &order {
            let margin = y[i] * (w.iter().zip(&z[i]).map(|(a, v)| a * v).sum::<f64>() + b);
            let shrink = 1.0 - eta * cfg.penalty;
            for wj in w.iter_mut() {
                *wj *= shrink;
            }
            if margin < 1.0 {
                for (wj, v) in w.iter_mut().zip(&z[i]) {
                    *wj += eta * y[i] * v;
                }
                b += eta * y[i];
            }
        }
    }
    let raw_w: Vec<f64> = w.iter().zip(&std.scale).map(|(a, s)| a / s).collect();
    let raw_b = b - raw_w.iter().zip(&std.mean).map(|(a, m)| a * m).sum::<f64>();
    (raw_w, raw_b)
}

fn accuracy_of(w: &[f64], b: f64, rows: &[&[f64]], labels: &[bool]) -> f64 {
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(r, &l)| (w.iter().zip(r.iter()).map(|(a, v)| a * v).sum::<f64>() + b > 0.0) == l)
        .count();
    hits as f64 / rows.len().max(1) as f64
}

/// Seeded fold assignment, stratified by class.
fn folds_for(labels: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut r = rng::stream(seed, &[0xF01D]);
    let mut offset = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut r);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = (j + offset) % k;
        }
        offset += 1;
    }
    fold
}

/// Hinge-loss linear probe with an L2 penalty, trained by subgradient
/// descent. Accuracy is estimated by stratified k-fold cross-validation;
/// the returned direction is fit on all samples and normalized to unit
/// length.
pub fn train_probe(features: &[Vec<f64>], labels: &[bool], cfg: &ProbeConfig) -> Result<ProbeEntry> {
    check_rows(features, "train_probe")?;
    if features.len() != labels.len() {
        return Err(Error::invalid(format!("{} rows but {} labels", features.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(Error::invalid(format!(
            "probe needs at least 2 samples per class, got {pos} positive and {neg} negative"
        )));
    }
    let rows: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let k = cfg.folds.clamp(2, pos.min(neg));
    let class: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let fold = folds_for(&class, k, cfg.seed);
    let mut hits = 0.0;
    for f in 0..k {
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (vec![], vec![], vec![], vec![]);
        for i in 0..rows.len() {
            if fold[i] == f {
                te_x.push(rows[i]);
                te_y.push(labels[i]);
            } else {
                tr_x.push(rows[i]);
                tr_y.push(labels[i]);
            }
        }
        let (w, b) = fit_svm(&tr_x, &tr_y, cfg, f as u64 + 1);
        hits += accuracy_of(&w, b, &te_x, &te_y) * te_x.len() as f64;
    }
    let (w, b) = fit_svm(&rows, labels, cfg, 0);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::invalid("probe direction collapsed to zero"));
    }
    let w: Vec<f64> = w.iter().map(|v| v / norm).collect();
    let bias = b / norm;
    Ok(ProbeEntry {
        attribute: String::new(),
        branch: None,
        train_accuracy: accuracy_of(&w, bias, &rows, labels),
        w,
        bias,
        accuracy: hits / rows.len() as f64,
        epochs: cfg.epochs,
        penalty: cfg.penalty,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub attribute: String,
    pub acc_t: f64,
    pub acc_p: f64,
    pub acc_c: f64,
    /// `acc_t - acc_p`.
    pub diff_t_minus_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
    pub probes_t: ProbeModel,
    pub probes_p: ProbeModel,
}

impl ProbeTable {
    pub fn row(&self, attribute: &str) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.attribute == attribute)
    }

    pub fn mean_acc(&self, source: FeatureSource) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows
            .iter()
            .map(|r| match source {
                FeatureSource::T => r.acc_t,
                FeatureSource::P => r.acc_p,
                FeatureSource::C => r.acc_c,
            })
            .sum::<f64>()
            / n
    }
}

/// Attribute probes for every factor on every feature source.
pub fn probe_suite(samples: &[&FactorSample], fps: &[FeaturePair<f32>], cfg: &ProbeConfig, exec: Execution) -> Result<ProbeTable> {
    if samples.len() != fps.len() {
        return Err(Error::invalid(format!("{} samples but {} feature pairs", samples.len(), fps.len())));
    }
    let labels = binarize_factors(samples)?;
    let sources: Vec<Vec<Vec<f64>>> = FeatureSource::ALL.iter().map(|&s| feature_rows(fps, s)).collect();
    let jobs: Vec<(usize, usize)> = (0..labels.names.len()).flat_map(|a| (0..3).map(move |s| (a, s))).collect();
    let fitted: Vec<Result<ProbeEntry>> = par::map_slice(exec, &jobs, |&(a, s)| {
        let mut e = train_probe(&sources[s], &labels.labels[a], cfg)?;
        e.attribute = labels.names[a].clone();
        e.branch = FeatureSource::ALL[s].branch();
        Ok(e)
    });
    let fitted = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut probes_t = ProbeModel::default();
    let mut probes_p = ProbeModel::default();
    for (a, chunk) in fitted.chunks(3).enumerate() {
        let (t, p, c) = (&chunk[0], &chunk[1], &chunk[2]);
        rows.push(ProbeRow {
            attribute: labels.names[a].clone(),
            acc_t: t.accuracy,
            acc_p: p.accuracy,
            acc_c: c.accuracy,
            diff_t_minus_p: t.accuracy - p.accuracy,
        });
        probes_t.entries.push(t.clone());
        probes_p.entries.push(p.clone());
    }
    Ok(ProbeTable { rows, probes_t, probes_p })
}

// ---------------------------------------------------------------------------
// identity probes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftmaxProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub penalty: f64,
}

impl Default for SoftmaxProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.5,
            penalty: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    std_mean: Vec<f64>,
    std_scale: Vec<f64>,
    /// `n_classes x d`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
    n_classes: usize,
}

impl SoftmaxProbe {
    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &SoftmaxProbeConfig) -> Result<Self> {
        let d = check_rows(features, "softmax_probe")?;
        if features.len() != labels.len() {
            return Err(Error::invalid(format!("{} rows but {} labels", features.len(), labels.len())));
        }
        if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::invalid(format!("labels must lie in 0..{n_classes} with at least 2 classes")));
        }
        let rows: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
        let std = Standardizer::fit(&rows);
        let z: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect();
        let n = z.len() as f64;
        let mut w = vec![0.0; n_classes * d];
        let mut b = vec![0.0; n_classes];
        let mut p = vec![0.0; n_classes];
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; n_classes * d];
            let mut gb = vec![0.0; n_classes];
            for (x, &t) in z.iter().zip(labels) {
                softmax_into(&w, &b, x, &mut p);
                p[t] -= 1.0;
                for c in 0..n_classes {
                    gb[c] += p[c] / n;
                    let row = &mut gw[c * d..(c + 1) * d];
                    for (g, v) in row.iter_mut().zip(x) {
                        *g += p[c] * v / n;
                    }
                }
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= cfg.lr * (g + cfg.penalty * *wv);
            }
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= cfg.lr * g;
            }
        }
        Ok(Self {
            std_mean: std.mean,
            std_scale: std.scale,
            w,
            b,
            n_classes,
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.std_mean)
            .zip(&self.std_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let mut p = vec![0.0; self.n_classes];
        softmax_into(&self.w, &self.b, &z, &mut p);
        p
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(x, &l)| self.predict(x) == l).count();
        hits as f64 / features.len().max(1) as f64
    }
}

fn softmax_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// channel statistics

fn columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Adjusted R² of a Gaussian density fit to one channel's histogram, or
/// `None` when the channel has no variance.
pub fn gaussian_adj_r2(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    let (mu, sd) = mean_sd(xs);
    if !(sd * sd > 1e-12) {
        return None;
    }
    let k = (n / 20).min(50);
    if k <= 3 {
        return None;
    }
    let lo = mu - 4.0 * sd;
    let width = 8.0 * sd / k as f64;
    let mut counts = vec![0usize; k];
    for &x in xs {
        let pos = (x - lo) / width;
        if pos >= 0.0 && pos < k as f64 {
            counts[pos as usize] += 1;
        } else if pos == k as f64 {
            counts[k - 1] += 1;
        }
    }
    let observed: Vec<f64> = counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect();
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let fitted: Vec<f64> = (0..k)
        .map(|i| {
            let c = lo + (i as f64 + 0.5) * width;
            norm * (-0.5 * ((c - mu) / sd).powi(2)).exp()
        })
        .collect();
    let mean_obs = observed.iter().sum::<f64>() / k as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean_obs).powi(2)).sum();
    let ss_res: f64 = observed.iter().zip(&fitted).map(|(o, f)| (o - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let r2 = 1.0 - ss_res / ss_tot;
    Some(1.0 - (1.0 - r2) * (k as f64 - 1.0) / (k as f64 - 3.0))
}

/// Per-channel adjusted R²; rows are samples.
pub fn channel_gaussianity(features: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    check_rows(features, "channel_gaussianity")?;
    if features.len() < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {}", features.len())));
    }
    Ok(columns(features).iter().map(|c| gaussian_adj_r2(c)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Pearson correlation over `[f_T; f_P]` channels; `None` where a
    /// channel has no variance.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub undefined: Vec<usize>,
    /// Counts of off-diagonal `|rho|` in ten equal bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    pub frac_below_0_3: f64,
    pub max_abs_off_diagonal: f64,
}

pub fn channel_correlation(features_t: &[Vec<f64>], features_p: &[Vec<f64>]) -> Result<CorrelationReport> {
    check_rows(features_t, "channel_correlation")?;
    check_rows(features_p, "channel_correlation")?;
    if features_t.len() != features_p.len() {
        return Err(Error::invalid("branch feature sets differ in sample count"));
    }
    if features_t.len() < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {}", features_t.len())));
    }
    let mut cols = columns(features_t);
    cols.extend(columns(features_p));
    let d = cols.len();
    let centered: Vec<Option<Vec<f64>>> = cols
        .iter()
        .map(|c| {
            let (m, sd) = mean_sd(c);
            if sd * sd > 1e-12 {
                let v: Vec<f64> = c.iter().map(|x| x - m).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Some(v.into_iter().map(|x| x / norm).collect())
            } else {
                None
            }
        })
        .collect();
    let undefined: Vec<usize> = (0..d).filter(|&i| centered[i].is_none()).collect();
    let mut matrix = vec![vec![None; d]; d];
    let mut histogram = vec![0usize; 10];
    let mut below = 0usize;
    let mut total = 0usize;
    let mut max_abs: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            matrix[i][j] = match (&centered[i], &centered[j]) {
                _ if i == j && centered[i].is_some() => Some(1.0),
                (Some(a), Some(b)) if j > i => Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)),
                (Some(_), Some(_)) => matrix[j][i],
                _ => None,
            };
            if j > i {
                if let Some(r) = matrix[i][j] {
                    let a = r.abs();
                    histogram[((a * 10.0) as usize).min(9)] += 2;
                    total += 2;
                    if a < 0.3 {
                        below += 2;
                    }
                    max_abs = max_abs.max(a);
                }
            }
        }
    }
    Ok(CorrelationReport {
        matrix,
        undefined,
        histogram,
        frac_below_0_3: if total > 0 { below as f64 / total as f64 } else { 1.0 },
        max_abs_off_diagonal: max_abs,
    })
}

// ---------------------------------------------------------------------------
// residual maps and embedding

pub fn mean_features(fps: &[FeaturePair<f32>]) -> Result<FeaturePair<f32>> {
    let first = fps.first().ok_or_else(|| Error::invalid("no features to average"))?;
    let n = fps.len() as f64;
    let avg = |pick: fn(&FeaturePair<f32>) -> &Vec<f32>, len: usize| -> Vec<f32> {
        (0..len)
            .map(|j| (fps.iter().map(|fp| f64::from(pick(fp)[j])).sum::<f64>() / n) as f32)
            .collect()
    };
    Ok(FeaturePair::new(avg(|f| &f.f_t, first.f_t.len()), avg(|f| &f.f_p, first.f_p.len())))
}

/// `decode(mean + alpha * w on branch) - decode(mean)`.
pub fn residual_map(model: &D2AEModel<f32>, mean: &FeaturePair<f32>, branch: Branch, w: &[f64], alpha: f64) -> Result<Tensor<f32>> {
    if w.len() != mean.branch(branch).len() {
        return Err(Error::shape(
            "residual_map",
            format!("direction {} vs branch {}", w.len(), mean.branch(branch).len()),
        ));
    }
    let base = model.decode(mean)?;
    let mut moved = mean.clone();
    for (f, d) in moved.branch_mut(branch).iter_mut().zip(w) {
        *f = (f64::from(*f) + alpha * d) as f32;
    }
    let edited = model.decode(&moved)?;
    let data = edited.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Projection onto the top two principal components. Each component's
/// largest-magnitude loading is made positive; missing components are zero.
pub fn embed_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_rows(features, "embed_2d")?;
    let n = features.len();
    if n < 3 {
        return Err(Error::invalid(format!("embedding needs at least 3 samples, got {n}")));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].abs().max(1e-300);
    let mut out = vec![[0.0; 2]; n];
    for (k, &c) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[c] <= top * 1e-12 || eig.eigenvalues[c] <= 0.0 {
            continue;
        }
        let mut v = eig.eigenvectors.column(c).into_owned();
        let lead = v.iter().cloned().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &centered * v;
        for i in 0..n {
            out[i][k] = proj[i];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// full evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub pair_seed: u64,
    pub fprs: Vec<f64>,
    pub probe: ProbeConfig,
    pub identity_probe: SoftmaxProbeConfig,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 600,
            pair_seed: 11,
            fprs: vec![0.001, 0.01, 0.1],
            probe: ProbeConfig::default(),
            identity_probe: SoftmaxProbeConfig::default(),
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    /// Test accuracy of fresh linear identity classifiers trained on the
    /// train split.
    pub probe_acc_t: f64,
    pub probe_acc_p: f64,
    pub probe_acc_c: f64,
    /// Test accuracy of the model's own classifiers.
    pub head_acc_t: f64,
    pub head_acc_p: f64,
    /// Mean entropy of the adversarial classifier's predictions.
    pub mean_entropy_p: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub adj_r2_t: Vec<Option<f64>>,
    pub adj_r2_p: Vec<Option<f64>>,
    pub frac_adj_r2_above_0_9: f64,
    pub correlation: CorrelationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification_t: VerificationReport,
    pub verification_c: VerificationReport,
    pub identity: IdentityReport,
    pub attributes: ProbeTable,
    pub channels: ChannelReport,
    pub psnr: f64,
}

pub fn channel_report(fps: &[FeaturePair<f32>]) -> Result<ChannelReport> {
    let ft = feature_rows(fps, FeatureSource::T);
    let fp = feature_rows(fps, FeatureSource::P);
    let adj_r2_t = channel_gaussianity(&ft)?;
    let adj_r2_p = channel_gaussianity(&fp)?;
    let all: Vec<f64> = adj_r2_t.iter().chain(&adj_r2_p).flatten().copied().collect();
    Ok(ChannelReport {
        frac_adj_r2_above_0_9: all.iter().filter(|&&v| v >= 0.9).count() as f64 / all.len().max(1) as f64,
        adj_r2_t,
        adj_r2_p,
        correlation: channel_correlation(&ft, &fp)?,
    })
}

pub fn identity_report(
    model: &D2AEModel<f32>,
    train: (&[FeaturePair<f32>], &[usize]),
    test: (&[FeaturePair<f32>], &[usize]),
    cfg: &SoftmaxProbeConfig,
) -> Result<IdentityReport> {
    let n_id = model.config().n_id;
    let probe = |s: FeatureSource| -> Result<f64> {
        let p = SoftmaxProbe::fit(&feature_rows(train.0, s), train.1, n_id, cfg)?;
        Ok(p.accuracy(&feature_rows(test.0, s), test.1))
    };
    let mut head_t = 0usize;
    let mut head_p = 0usize;
    let mut ent = 0.0;
    for (fp, &l) in test.0.iter().zip(test.1) {
        let yt: Vec<f64> = model.classify(&fp.f_t, Branch::T)?.into_iter().map(f64::from).collect();
        let yp: Vec<f64> = model.classify(&fp.f_p, Branch::P)?.into_iter().map(f64::from).collect();
        head_t += (argmax(&yt) == l) as usize;
        head_p += (argmax(&yp) == l) as usize;
        ent += entropy(&yp);
    }
    let n = test.0.len().max(1) as f64;
    Ok(IdentityReport {
        probe_acc_t: probe(FeatureSource::T)?,
        probe_acc_p: probe(FeatureSource::P)?,
        probe_acc_c: probe(FeatureSource::C)?,
        head_acc_t: head_t as f64 / n,
        head_acc_p: head_p as f64 / n,
        mean_entropy_p: ent / n,
        chance: 1.0 / n_id as f64,
    })
}

pub fn mean_psnr(model: &D2AEModel<f32>, images: &[&Tensor<f32>], fps: &[FeaturePair<f32>], exec: Execution) -> Result<f64> {
    let vals: Vec<Result<f64>> = par::map_indexed(exec, images.len(), |i| Ok(crate::objective::psnr(images[i], &model.decode(&fps[i])?)));
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Every metric family on the test split. Identity probes train on the
/// train split.
pub fn evaluate_model(model: &D2AEModel<f32>, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let test_idx = ds.split_indices(Split::Test);
    let train_idx = ds.split_indices(Split::Train);
    if test_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::invalid("dataset needs nonempty train and test splits"));
    }
    let encode = |idx: &[usize]| -> Result<Vec<FeaturePair<f32>>> {
        par::map_slice(cfg.exec, idx, |&i| model.encode(&ds.samples[i].image))
            .into_iter()
            .collect()
    };
    let test_fps = encode(&test_idx)?;
    let train_fps = encode(&train_idx)?;
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| ds.samples[i].identity).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| ds.samples[i].identity).collect();
    let test_samples: Vec<&FactorSample> = test_idx.iter().map(|&i| &ds.samples[i]).collect();
    let test_images: Vec<&Tensor<f32>> = test_samples.iter().map(|s| &s.image).collect();

    let has_factors = test_samples.iter().all(|s| FACTOR_NAMES.iter().all(|f| s.factors.contains_key(*f)));
    let attributes = if has_factors {
        probe_suite(&test_samples, &test_fps, &cfg.probe, cfg.exec)?
    } else {
        ProbeTable {
            rows: vec![],
            probes_t: ProbeModel::default(),
            probes_p: ProbeModel::default(),
        }
    };
    Ok(EvalReport {
        verification_t: verify(model, ds, Split::Test, cfg.n_pairs, cfg.pair_seed, FeatureSource::T, &cfg.fprs, cfg.exec)?,
        verification_c: verify(model, ds, Split::Test, cfg.n_pairs, cfg.pair_seed, FeatureSource::C, &cfg.fprs, cfg.exec)?,
        identity: identity_report(model, (&train_fps, &train_labels), (&test_fps, &test_labels), &cfg.identity_probe)?,
        attributes,
        channels: channel_report(&test_fps)?,
        psnr: mean_psnr(model, &test_images, &test_fps, cfg.exec)?,
    })
}
