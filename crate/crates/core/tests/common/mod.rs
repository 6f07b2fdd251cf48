//! Oracles and fixtures shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;

use d2ae_core::autodiff::{Group, GroupSet, ParamId, Scalar, Tensor};
use d2ae_core::model::{Branch, D2AEModel, HeadRouting, ModelConfig, SigmaSource};
use d2ae_core::objective::{batch_gradients, step_noise, LossTerm, LossWeights};
use d2ae_core::par::Execution;
use d2ae_core::rng;

/// A model small enough for finite differences in 64-bit.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        n_id: 4,
        feat_dim_t: 6,
        feat_dim_p: 6,
        enc_channels: vec![4, 8],
        branch_channels: 8,
        dec_channels: vec![8, 4],
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn random_images<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut r = rng::stream(seed, &[0x1A6]);
    (0..n)
        .map(|_| {
            let data: Vec<f64> = (0..3 * size * size).map(|_| r.gen_range(0.0..1.0)).collect();
            Tensor::from_f64([3, size, size], &data).unwrap()
        })
        .collect()
}

/// Loss families as they appear in the routing table. The two
/// reconstruction terms share one route and are checked together.
pub const FAMILIES: [(&str, &[LossTerm]); 4] = [
    ("L_I", &[LossTerm::Identity]),
    ("L_adv", &[LossTerm::AdvIdentity]),
    ("L_H", &[LossTerm::Confusion]),
    ("L_X", &[LossTerm::RecClean, LossTerm::RecAug]),
];

/// Groups each family may update, written out independently of the
/// implementation's own route table.
pub fn expected_route(family: &str) -> &'static [Group] {
    match family {
        "L_I" => &[Group::Enc, Group::BranchT, Group::ClsT],
        "L_adv" => &[Group::ClsP],
        "L_H" => &[Group::Enc, Group::BranchP],
        "L_X" => &[Group::Enc, Group::BranchT, Group::BranchP, Group::Dec],
        _ => unreachable!(),
    }
}

#[derive(Debug, Clone)]
pub struct MaskCheck {
    pub family: &'static str,
    pub group: Group,
    pub allowed: bool,
    /// Every gradient tensor of the group is absent or exactly zero.
    pub exactly_zero: bool,
    pub max_abs: f64,
}

impl MaskCheck {
    /// Blocked routes must be exactly zero; open routes must carry signal.
    pub fn holds(&self) -> bool {
        if self.allowed {
            self.max_abs > 0.0
        } else {
            self.exactly_zero
        }
    }
}

/// Backpropagates each loss family alone into every group and records the
/// 24 mask outcomes.
pub fn routing_masks<T: Scalar>(model: &D2AEModel<T>, images: &[Tensor<T>], labels: &[usize], routing: HeadRouting) -> Vec<MaskCheck> {
    let refs: Vec<&Tensor<T>> = images.iter().collect();
    let (dt, dp) = (model.feat_dim(Branch::T), model.feat_dim(Branch::P));
    let weights = LossWeights {
        lambda_t: 1.0,
        lambda_p: 1.0,
        lambda_x: 1.0,
    };
    let mut out = Vec::new();
    for (family, terms) in FAMILIES {
        let res = batch_gradients(
            model,
            &refs,
            labels,
            &weights,
            terms,
            routing,
            SigmaSource::Batch,
            GroupSet::all(),
            Execution::Parallel,
            |i| step_noise(5, 0, i, dt, dp),
        )
        .unwrap();
        for group in Group::ALL {
            let mut zero = true;
            let mut max_abs = 0.0f64;
            for id in model.params().ids_in(group) {
                if let Some(g) = res.grads.get(id) {
                    for v in g.data() {
                        let v = v.to_f64().unwrap();
                        zero &= v == 0.0;
                        max_abs = max_abs.max(v.abs());
                    }
                }
            }
            out.push(MaskCheck {
                family,
                group,
                allowed: expected_route(family).contains(&group),
                exactly_zero: zero,
                max_abs,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FdSample {
    pub param: ParamId,
    pub index: usize,
    pub group: Group,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdSample {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-8)
    }
}

/// Routed-gradient oracle. A parameter in group `G` receives the gradient of
/// the weighted sum of exactly those terms routed to `G`, so its central
/// difference is taken on that partial objective. The augmentation scale
/// and noise are held fixed, as they are constants of the graph.
pub fn routed_fd(
    model: &D2AEModel<f64>,
    images: &[Tensor<f64>],
    labels: &[usize],
    weights: &LossWeights,
    routing: HeadRouting,
    per_group: usize,
    eps: f64,
    seed: u64,
) -> Vec<FdSample> {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let (dt, dp) = (model.feat_dim(Branch::T), model.feat_dim(Branch::P));
    let noise = |i: usize| step_noise::<f64>(seed, 0, i, dt, dp);
    let sigma = {
        let fw = model
            .forward_full(&refs, SigmaSource::Batch, routing, Execution::Sequential, noise)
            .unwrap();
        (fw.sigma_t.clone(), fw.sigma_p.clone())
    };
    let fixed = || SigmaSource::Fixed(sigma.0.clone(), sigma.1.clone());
    let analytic = batch_gradients(
        model,
        &refs,
        labels,
        weights,
        &LossTerm::ALL,
        routing,
        fixed(),
        GroupSet::all(),
        Execution::Parallel,
        noise,
    )
    .unwrap()
    .grads;

    let partial = |m: &D2AEModel<f64>, terms: &[LossTerm]| -> f64 {
        batch_gradients(m, &refs, labels, weights, terms, routing, fixed(), GroupSet::empty(), Execution::Parallel, noise)
            .unwrap()
            .bundle
            .total
    };

    let mut r = rng::stream(seed, &[0xFD]);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for group in Group::ALL {
        let terms: Vec<LossTerm> = LossTerm::ALL
            .into_iter()
            .filter(|t| routed_terms(*t, routing).contains(&group))
            .collect();
        let coords: Vec<(ParamId, usize)> = model
            .params()
            .ids_in(group)
            .flat_map(|id| (0..model.params().value(id).len()).map(move |k| (id, k)))
            .collect();
        for pick in rand::seq::index::sample(&mut r, coords.len(), per_group.min(coords.len())) {
            let (id, k) = coords[pick];
            let orig = probe.params().value(id).data()[k];
            probe.params_mut().get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = partial(&probe, &terms);
            probe.params_mut().get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = partial(&probe, &terms);
            probe.params_mut().get_mut(id).value.data_mut()[k] = orig;
            out.push(FdSample {
                param: id,
                index: k,
                group,
                analytic: analytic.get(id).map_or(0.0, |g| g.data()[k]),
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    out
}

/// Route of a term under the given head routing. The ablation that drops
/// the adversarial identity loss hands the classifier to the confusion term.
fn routed_terms(term: LossTerm, routing: HeadRouting) -> Vec<Group> {
    let family = match term {
        LossTerm::Identity => "L_I",
        LossTerm::AdvIdentity => "L_adv",
        LossTerm::Confusion => "L_H",
        LossTerm::RecClean | LossTerm::RecAug => "L_X",
    };
    let mut g = expected_route(family).to_vec();
    if term == LossTerm::Confusion && routing.confusion_updates_classifier {
        g.push(Group::ClsP);
    }
    g
}

pub struct BruteRoc {
    pub points: Vec<(f64, f64, f64)>,
    pub accuracy: f64,
    pub best_threshold: f64,
}

// Every candidate threshold evaluated independently by counting.
pub fn brute_roc(same: &[f64], diff: &[f64]) -> BruteRoc {
    let mut thresholds: Vec<f64> = same.iter().chain(diff).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let (np, nn) = (same.len() as f64, diff.len() as f64);
    let mut points = Vec::new();
    let mut accuracy = -1.0;
    let mut best_threshold = f64::NAN;
    for &t in &thresholds {
        let tp = same.iter().filter(|&&s| s >= t).count();
        let fp = diff.iter().filter(|&&s| s >= t).count();
        let (tpr, fpr) = (tp as f64 / np, fp as f64 / nn);
        points.push((t, fpr, tpr));
        let acc = (tpr * np + (1.0 - fpr) * nn) / (np + nn);
        if acc > accuracy {
            accuracy = acc;
            best_threshold = t;
        }
    }
    BruteRoc {
        points,
        accuracy,
        best_threshold,
    }
}
