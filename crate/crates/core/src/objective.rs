//! Loss terms, their weighted combination, and training with per-term
//! gradient routing.
//!
//! | term            | reaches                              |
//! |-----------------|--------------------------------------|
//! | identity        | ENC, BRANCH_T, CLS_T                 |
//! | adv. identity   | CLS_P                                |
//! | confusion       | ENC, BRANCH_P                        |
//! | reconstruction  | ENC, BRANCH_T, BRANCH_P, DEC         |
//!
//! The routes follow from the graph itself: the adversarial identity loss
//! sees the dispelled feature through `stop_gradient`, and the confusion
//! loss sees the adversarial classifier's weights through `stop_gradient`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradSet, Graph, Group, GroupSet, ParamId, Parameter, Scalar, Tensor, Var};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{sample_noise, Branch, D2AEModel, HeadRouting, SampleVars, SigmaSource};
use crate::par::{self, Execution};
use crate::rng;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    Identity,
    AdvIdentity,
    Confusion,
    RecClean,
    RecAug,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Identity,
        LossTerm::AdvIdentity,
        LossTerm::Confusion,
        LossTerm::RecClean,
        LossTerm::RecAug,
    ];

    /// Parameter groups this term is allowed to update in the full objective.
    pub fn route(self) -> GroupSet {
        use Group::*;
        match self {
            LossTerm::Identity => GroupSet::of(&[Enc, BranchT, ClsT]),
            LossTerm::AdvIdentity => GroupSet::of(&[ClsP]),
            LossTerm::Confusion => GroupSet::of(&[Enc, BranchP]),
            LossTerm::RecClean | LossTerm::RecAug => GroupSet::of(&[Enc, BranchT, BranchP, Dec]),
        }
    }
}

/// Batch means of each term plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_id: f64,
    pub l_adv: f64,
    pub l_conf: f64,
    pub l_rec_clean: f64,
    pub l_rec_aug: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Identity => self.l_id,
            LossTerm::AdvIdentity => self.l_adv,
            LossTerm::Confusion => self.l_conf,
            LossTerm::RecClean => self.l_rec_clean,
            LossTerm::RecAug => self.l_rec_aug,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_id, self.l_adv, self.l_conf, self.l_rec_clean, self.l_rec_aug, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_p: f64,
    pub lambda_x: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            lambda_p: 0.1,
            lambda_x: 3e-3,
        }
    }
}

/// Loss-ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the confusion term.
    pub without_confusion: bool,
    /// Drop the adversarial identity term; the confusion term then also
    /// updates the adversarial classifier.
    pub without_adv_identity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD; momentum 0 is the plain update.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub optimizer: Optimizer,
    /// Rescale the full gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier for the adversarial classifier.
    pub adv_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Classifiers consume augmented features.
    pub augmented_heads: bool,
    pub ablation: Ablation,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            base_lr: 1e-3,
            lr_decay: 0.1,
            decay_every: 40,
            optimizer: Optimizer::adam(),
            clip_norm: None,
            adv_lr_scale: 30.0,
            batch_size: 32,
            epochs: 120,
            seed: 7,
            augmented_heads: false,
            ablation: Ablation::default(),
            eval_every: 10,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.lambda_t, w.lambda_p, w.lambda_x].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        let ok = match self.optimizer {
            Optimizer::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam { beta1, beta2, eps } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings {:?}", self.optimizer)));
        }
        if !(self.adv_lr_scale >= 0.0 && self.adv_lr_scale.is_finite()) {
            return Err(Error::invalid("adversary learning-rate scale must be finite and >= 0"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }

    pub fn routing(&self) -> HeadRouting {
        HeadRouting {
            augmented_heads: self.augmented_heads,
            confusion_updates_classifier: self.ablation.without_adv_identity,
        }
    }

    pub fn terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL
            .into_iter()
            .filter(|t| match t {
                LossTerm::Confusion => !self.ablation.without_confusion,
                LossTerm::AdvIdentity => !self.ablation.without_adv_identity,
                _ => true,
            })
            .collect()
    }

    /// Step schedule: `base * decay^(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.base_lr;
        }
        self.base_lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

// ---------------------------------------------------------------------------
// closed-form losses on plain values

fn clamped_ln(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (PROB_FLOOR.ln(), true)
    } else {
        (p.ln(), false)
    }
}

/// `-log y[t]`; the flag reports a clamped probability.
pub fn loss_identity(y: &[f64], t: usize) -> Result<(f64, bool)> {
    let p = *y
        .get(t)
        .ok_or_else(|| Error::invalid(format!("label {t} outside {} classes", y.len())))?;
    let (l, clamped) = clamped_ln(p);
    Ok((-l, clamped))
}

/// Same formula as [`loss_identity`], evaluated on the gated prediction.
pub fn loss_adv_identity(y_gated: &[f64], t: usize) -> Result<(f64, bool)> {
    loss_identity(y_gated, t)
}

/// Cross-entropy to the uniform target, `-(1/N) sum_j log y[j]`.
/// Minimum `ln N` exactly at the uniform distribution.
pub fn loss_confusion(y: &[f64]) -> Result<(f64, bool)> {
    if y.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    let mut clamped = false;
    let total: f64 = y
        .iter()
        .map(|&p| {
            let (l, c) = clamped_ln(p);
            clamped |= c;
            l
        })
        .sum();
    Ok((-total / y.len() as f64, clamped))
}

/// `0.5 * ||x - x_hat||^2`.
pub fn loss_reconstruction<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "loss_reconstruction",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    Ok(0.5
        * x.data()
            .iter()
            .zip(x_hat.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64().unwrap();
                d * d
            })
            .sum::<f64>())
}

/// `lambda_T L_I + lambda_P (L_adv + L_H) + lambda_X (L~_X + L_X)`.
pub fn total_objective(b: &LossBundle, w: &LossWeights) -> f64 {
    w.lambda_t * b.l_id + w.lambda_p * (b.l_adv + b.l_conf) + w.lambda_x * (b.l_rec_aug + b.l_rec_clean)
}

// ---------------------------------------------------------------------------
// graph-level losses

fn ce_node<T: Scalar>(g: &mut Graph<'_, T>, y: Var, t: usize) -> Result<Var> {
    let n = g.value(y).len();
    if t >= n {
        return Err(Error::invalid(format!("label {t} outside {n} classes")));
    }
    let mut onehot = Tensor::zeros([n]);
    onehot.data_mut()[t] = T::one();
    let log_y = g.log_clamped(y, T::of(PROB_FLOOR))?;
    let mask = g.constant(onehot);
    let picked = g.mul(log_y, mask)?;
    let s = g.sum(picked)?;
    g.scale(s, -T::one())
}

fn confusion_node<T: Scalar>(g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
    let log_y = g.log_clamped(y, T::of(PROB_FLOOR))?;
    let m = g.mean(log_y)?;
    g.scale(m, -T::one())
}

fn recon_node<T: Scalar>(g: &mut Graph<'_, T>, x: Var, x_hat: Var) -> Result<Var> {
    let sq = g.sq_diff_sum(x, x_hat)?;
    g.scale(sq, T::of(0.5))
}

fn term_weight(term: LossTerm, w: &LossWeights) -> f64 {
    match term {
        LossTerm::Identity => w.lambda_t,
        LossTerm::AdvIdentity | LossTerm::Confusion => w.lambda_p,
        LossTerm::RecClean | LossTerm::RecAug => w.lambda_x,
    }
}

/// Per-sample term nodes, returned in [`LossTerm::ALL`] order.
pub fn term_nodes<T: Scalar>(g: &mut Graph<'_, T>, v: &SampleVars, label: usize) -> Result<[Var; 5]> {
    Ok([
        ce_node(g, v.y_t, label)?,
        ce_node(g, v.y_p_gated, label)?,
        confusion_node(g, v.y_p_conf)?,
        recon_node(g, v.x, v.x_clean)?,
        recon_node(g, v.x, v.x_aug)?,
    ])
}

/// Result of one routed forward/backward over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T: Scalar> {
    pub bundle: LossBundle,
    pub grads: GradSet<T>,
    pub sigma_t: Vec<T>,
    pub sigma_p: Vec<T>,
    pub clamp_events: usize,
}

/// Forward and backward over a batch for the chosen `terms`. The gradient is
/// that of the batch mean of the weighted terms, restricted to `groups`.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<T, N>(
    model: &D2AEModel<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
    weights: &LossWeights,
    terms: &[LossTerm],
    routing: HeadRouting,
    sigma: SigmaSource<T>,
    groups: GroupSet,
    exec: Execution,
    noise: N,
) -> Result<BatchGradients<T>>
where
    T: Scalar,
    N: Fn(usize) -> (Vec<T>, Vec<T>) + Sync + Send,
{
    if images.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut fw = model.forward_full(images, sigma, routing, exec, noise)?;
    let inv_b = 1.0 / images.len() as f64;

    struct Out<T: Scalar> {
        values: [f64; 5],
        grads: GradSet<T>,
    }
    let mut outs: Vec<Option<Result<Out<T>>>> = (0..fw.len()).map(|_| None).collect();
    {
        let vars = &fw.vars;
        let mut work: Vec<_> = fw.graphs.iter_mut().zip(outs.iter_mut()).collect();
        par::for_each_mut(exec, &mut work, |i, (g, slot)| {
            let mut run = || -> Result<Out<T>> {
                let nodes = term_nodes(g, &vars[i], labels[i])?;
                let values = nodes.map(|n| g.value(n).item().to_f64().unwrap());
                let mut total: Option<Var> = None;
                for (term, node) in LossTerm::ALL.iter().zip(nodes) {
                    if !terms.contains(term) {
                        continue;
                    }
                    let scaled = g.scale(node, T::of(term_weight(*term, weights) * inv_b))?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, scaled)?,
                        None => scaled,
                    });
                }
                let grads = match total {
                    Some(loss) => g.backward(loss, groups)?,
                    None => GradSet::new(g.store().len()),
                };
                Ok(Out { values, grads })
            };
            **slot = Some(run());
        });
    }

    let clamp_events = fw.graphs.iter().map(|g| g.clamp_events()).sum();
    let mut bundle = LossBundle::default();
    let mut grads = GradSet::new(model.params().len());
    // reduction in sample order keeps the result independent of scheduling
    for out in outs {
        let out = out.expect("every sample processed")?;
        bundle.l_id += out.values[0] * inv_b;
        bundle.l_adv += out.values[1] * inv_b;
        bundle.l_conf += out.values[2] * inv_b;
        bundle.l_rec_clean += out.values[3] * inv_b;
        bundle.l_rec_aug += out.values[4] * inv_b;
        grads.merge(out.grads);
    }
    bundle.total = terms
        .iter()
        .map(|&t| term_weight(t, weights) * bundle.get(t))
        .sum();
    Ok(BatchGradients {
        bundle,
        grads,
        sigma_t: std::mem::take(&mut fw.sigma_t),
        sigma_p: std::mem::take(&mut fw.sigma_p),
        clamp_events,
    })
}

/// Noise stream for sample `i` of step `step`.
pub fn step_noise<T: Scalar>(seed: u64, step: u64, i: usize, dt: usize, dp: usize) -> (Vec<T>, Vec<T>) {
    let mut r = rng::stream(seed, &[0xA06, step, i as u64]);
    sample_noise(&mut r, dt, dp)
}

/// Owns the optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    /// First and second moment buffers, created on first use.
    moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            moments: None,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One SGD step on a batch. The model is untouched if any loss is
    /// non-finite.
    pub fn train_step(&mut self, model: &mut D2AEModel<f32>, images: &[&Tensor<f32>], labels: &[usize], lr: f64) -> Result<LossBundle> {
        let cfg = &self.config;
        let (dt, dp) = (model.feat_dim(Branch::T), model.feat_dim(Branch::P));
        let (seed, step) = (cfg.seed, self.step);
        let terms = cfg.terms();
        let res = batch_gradients(
            model,
            images,
            labels,
            &cfg.weights,
            &terms,
            cfg.routing(),
            SigmaSource::Batch,
            GroupSet::all(),
            cfg.exec,
            |i| step_noise(seed, step, i, dt, dp),
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => {
                log::error!("non-finite value in {op} at step {step}");
                Error::NonFiniteLoss { term: op, step: step as usize }
            }
            e => e,
        })?;
        if !res.bundle.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "total",
                step: step as usize,
            });
        }
        self.step += 1;

        model.update_running_sigma(&res.sigma_t, &res.sigma_p);
        let params = model.params_mut();
        params.accumulate(&res.grads);
        if let Some(max) = cfg.clip_norm {
            let norm = params
                .iter()
                .flat_map(|(_, p)| p.grad.data().iter())
                .map(|&g| f64::from(g).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let k = (max / norm) as f32;
                for i in 0..params.len() {
                    params.get_mut(ParamId(i)).grad.scale_assign(k);
                }
            }
        }
        let (m, v) = self.moments.get_or_insert_with(|| {
            let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
            (zeros(), zeros())
        });
        let adv_scale = cfg.adv_lr_scale;
        let rate = |p: &Parameter<f32>| if p.group() == Group::ClsP { lr * adv_scale } else { lr };
        match cfg.optimizer {
            Optimizer::Sgd { momentum } => {
                let mu = momentum as f32;
                for (i, vel) in m.iter_mut().enumerate() {
                    let p = params.get_mut(ParamId(i));
                    let lr32 = rate(p) as f32;
                    let grads = p.grad.data();
                    let values = p.value.data_mut();
                    if momentum == 0.0 {
                        for (w, &g) in values.iter_mut().zip(grads) {
                            *w -= lr32 * g;
                        }
                        continue;
                    }
                    for ((vv, &g), w) in vel.data_mut().iter_mut().zip(grads).zip(values) {
                        *vv = mu * *vv + g;
                        *w -= lr32 * *vv;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let correction = (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                for (i, (m1, m2)) in m.iter_mut().zip(v.iter_mut()).enumerate() {
                    let p = params.get_mut(ParamId(i));
                    let step_size = (rate(p) * correction) as f32;
                    let grads = p.grad.data();
                    let values = p.value.data_mut();
                    for (((a, b), &g), w) in m1.data_mut().iter_mut().zip(m2.data_mut()).zip(grads).zip(values) {
                        *a = b1 * *a + (1.0 - b1) * g;
                        *b = b2 * *b + (1.0 - b2) * g * g;
                        *w -= step_size * *a / (b.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(res.bundle)
    }
}

/// Validation metrics logged during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Accuracy of the distilling-branch classifier on clean features.
    pub id_acc_t: f64,
    /// Accuracy of the adversarial classifier on clean features.
    pub id_acc_p: f64,
    /// Mean prediction entropy of the adversarial classifier.
    pub entropy_p: f64,
    pub psnr: f64,
}

pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn evaluate(model: &D2AEModel<f32>, set: &LabeledSet, exec: Execution) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Ok(EvalMetrics::default());
    }
    let per: Vec<Result<(bool, bool, f64, f64)>> = par::map_indexed(exec, set.len(), |i| {
        let fp = model.encode(&set.images[i])?;
        let yt = model.classify(&fp.f_t, Branch::T)?;
        let yp = model.classify(&fp.f_p, Branch::P)?;
        let ent: f64 = -yp.iter().map(|&p| p as f64).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let rec = model.decode(&fp)?;
        Ok((
            argmax(&yt) == set.labels[i],
            argmax(&yp) == set.labels[i],
            ent,
            psnr(&set.images[i], &rec),
        ))
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    Ok(EvalMetrics {
        id_acc_t: per.iter().filter(|p| p.0).count() as f64 / n,
        id_acc_p: per.iter().filter(|p| p.1).count() as f64 / n,
        entropy_p: per.iter().map(|p| p.2).sum::<f64>() / n,
        psnr: per.iter().map(|p| p.3).sum::<f64>() / n,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_id: f64,
    pub l_adv: f64,
    pub l_conf: f64,
    pub l_rec_clean: f64,
    pub l_rec_aug: f64,
    pub total: f64,
    pub lr: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
}

/// Epoch loop with seeded shuffling and step learning-rate decay.
/// `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut D2AEModel<f32>,
    train_set: &LabeledSet,
    val_set: Option<&LabeledSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(config.seed, &[0x5F, epoch as u64]));
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // a trailing single sample has no batch statistics; fold it back
        if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
            batches.pop();
        }
        let mut sum = LossBundle::default();
        let mut seen = 0.0;
        for batch in batches {
            let images: Vec<&Tensor<f32>> = batch.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let b = trainer.train_step(model, &images, &labels, lr)?;
            let w = batch.len() as f64;
            sum.l_id += b.l_id * w;
            sum.l_adv += b.l_adv * w;
            sum.l_conf += b.l_conf * w;
            sum.l_rec_clean += b.l_rec_clean * w;
            sum.l_rec_aug += b.l_rec_aug * w;
            sum.total += b.total * w;
            seen += w;
        }
        let eval = match val_set {
            Some(v) if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs) => {
                Some(evaluate(model, v, config.exec)?)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            l_id: sum.l_id / seen,
            l_adv: sum.l_adv / seen,
            l_conf: sum.l_conf / seen,
            l_rec_clean: sum.l_rec_clean / seen,
            l_rec_aug: sum.l_rec_aug / seen,
            total: sum.total / seen,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            eval,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}
