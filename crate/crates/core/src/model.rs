//! The two-branch autoencoder: shared encoder, identity distilling and
//! dispelling branches, one identity classifier per branch, statistical
//! feature augmentation, and a decoder over the concatenated features.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Group, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InitScheme {
    /// Centered uniform with fan-in scaling.
    #[default]
    UniformFanIn,
    /// Zero-mean Gaussian with fan-in scaling.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub n_id: usize,
    pub feat_dim_t: usize,
    pub feat_dim_p: usize,
    /// Output channels of each stride-2 encoder stage.
    pub enc_channels: Vec<usize>,
    /// Width of the single convolution inside each branch.
    pub branch_channels: usize,
    /// Decoder widths, one per resolution from coarsest to full size.
    pub dec_channels: Vec<usize>,
    /// EMA coefficient for the running feature standard deviations.
    pub augment_momentum: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            n_id: 16,
            feat_dim_t: 32,
            feat_dim_p: 32,
            enc_channels: vec![16, 32, 64, 64],
            branch_channels: 64,
            dec_channels: vec![32, 32, 16, 8],
            augment_momentum: 0.9,
            init: InitScheme::UniformFanIn,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.feat_dim_t == 0 || self.feat_dim_p == 0 {
            return bad("feature dims must be >= 1".into());
        }
        if self.n_id < 2 {
            return bad(format!("n_id must be >= 2, got {}", self.n_id));
        }
        if self.enc_channels.is_empty() || self.dec_channels.is_empty() {
            return bad("encoder and decoder need at least one stage".into());
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) || self.branch_channels == 0 {
            return bad("channel widths must be >= 1".into());
        }
        let enc_div = 1usize << self.enc_channels.len();
        let dec_div = 1usize << (self.dec_channels.len() - 1);
        if self.input_size % enc_div != 0 || self.input_size % dec_div != 0 {
            return bad(format!(
                "input size {} must be divisible by {} and {}",
                self.input_size, enc_div, dec_div
            ));
        }
        if !(0.0..1.0).contains(&self.augment_momentum) {
            return bad("augment_momentum must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.input_size, self.input_size]
    }

    fn dec_base(&self) -> usize {
        self.input_size >> (self.dec_channels.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Identity-distilled.
    T,
    /// Identity-dispelled.
    P,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::T => "T",
            Branch::P => "P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Latent split of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair<T = f32> {
    pub f_t: Vec<T>,
    pub f_p: Vec<T>,
}

impl<T: Scalar> FeaturePair<T> {
    pub fn new(f_t: Vec<T>, f_p: Vec<T>) -> Self {
        Self { f_t, f_p }
    }

    /// `f_C = [f_T; f_P]`.
    pub fn concat(&self) -> Vec<T> {
        let mut v = self.f_t.clone();
        v.extend_from_slice(&self.f_p);
        v
    }

    pub fn branch(&self, b: Branch) -> &[T] {
        match b {
            Branch::T => &self.f_t,
            Branch::P => &self.f_p,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut Vec<T> {
        match b {
            Branch::T => &mut self.f_t,
            Branch::P => &mut self.f_p,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Conv>,
    branch_t: (Conv, Linear),
    branch_p: (Conv, Linear),
    cls_t: Linear,
    cls_p: Linear,
    dec_fc: Linear,
    dec_convs: Vec<Conv>,
    dec_out: Conv,
}

/// How the dispelling-branch classifier participates in the confusion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRouting {
    /// Feed augmented features to the classifiers.
    pub augmented_heads: bool,
    /// Let the confusion term update the adversarial classifier. Off in the
    /// full objective; on only when ablating the adversarial identity loss.
    pub confusion_updates_classifier: bool,
}

impl Default for HeadRouting {
    fn default() -> Self {
        Self {
            augmented_heads: false,
            confusion_updates_classifier: false,
        }
    }
}

/// Where the augmentation scale comes from during [`D2AEModel::forward_full`].
#[derive(Debug, Clone)]
pub enum SigmaSource<T> {
    /// Per-channel standard deviation of the current batch.
    Batch,
    /// The model's running estimate.
    Running,
    /// Explicit values `(sigma_T, sigma_P)`.
    Fixed(Vec<T>, Vec<T>),
}

/// Graph handles produced for one sample by [`D2AEModel::forward_full`].
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub x: Var,
    pub f_t: Var,
    pub f_p: Var,
    pub f_t_aug: Var,
    pub f_p_aug: Var,
    pub y_t: Var,
    /// Adversarial-classifier prediction on gated features (identity loss).
    pub y_p_gated: Var,
    /// Adversarial-classifier prediction with frozen classifier (confusion loss).
    pub y_p_conf: Var,
    pub x_clean: Var,
    pub x_aug: Var,
}

/// Per-sample graphs for a whole batch.
pub struct BatchForward<'m, T: Scalar> {
    pub graphs: Vec<Graph<'m, T>>,
    pub vars: Vec<SampleVars>,
    pub sigma_t: Vec<T>,
    pub sigma_p: Vec<T>,
}

impl<T: Scalar> BatchForward<'_, T> {
    pub fn value(&self, i: usize, pick: impl Fn(&SampleVars) -> Var) -> &Tensor<T> {
        self.graphs[i].value(pick(&self.vars[i]))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct D2AEModel<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    pub sigma_t: Vec<T>,
    pub sigma_p: Vec<T>,
}

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    init: InitScheme,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn weights(&mut self, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self.init {
            InitScheme::UniformFanIn => {
                let bound = (3.0 * gain / fan_in as f64).sqrt();
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| T::of(d.sample(self.rng))).collect()
            }
            InitScheme::Gaussian => {
                let sd = (gain / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(self.rng);
                        T::of(sd * z)
                    })
                    .collect()
            }
        };
        Tensor::new(shape, data).expect("shape matches")
    }

    fn conv(&mut self, name: &str, group: Group, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let w = self.weights(vec![cout, cin, k, k], cin * k * k, gain);
        let w = self.store.add(format!("{name}.w"), group, w);
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros([cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, group: Group, din: usize, dout: usize, gain: f64) -> Linear {
        let w = self.weights(vec![dout, din], din, gain);
        let w = self.store.add(format!("{name}.w"), group, w);
        let b = self.store.add(format!("{name}.b"), group, Tensor::zeros([dout]));
        Linear { w, b }
    }
}

// ReLU layers use gain 2, linear outputs gain 1.
const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

fn batch_std<T: Scalar>(rows: &[&[T]]) -> Result<Vec<T>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "batch standard deviation needs at least 2 samples, got {n}"
        )));
    }
    let d = rows[0].len();
    let inv_n = T::one() / T::of(n as f64);
    let inv_n1 = T::one() / T::of((n - 1) as f64);
    Ok((0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<T>() * inv_n;
            let var = rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<T>() * inv_n1;
            var.sqrt()
        })
        .collect())
}

/// Standard normal draws for one sample's `(eps_T, eps_P)`.
pub fn sample_noise<T: Scalar, R: Rng>(rng: &mut R, dt: usize, dp: usize) -> (Vec<T>, Vec<T>) {
    let mut draw = |n: usize| -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                T::of(z)
            })
            .collect()
    };
    let et = draw(dt);
    let ep = draw(dp);
    (et, ep)
}

impl<T: Scalar> D2AEModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, &[0x1417]);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            init: config.init,
        };

        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.enc_channels.iter().enumerate() {
            enc.push(b.conv(&format!("enc.{i}"), Group::Enc, cin, c, 3, 2, RELU_GAIN));
            cin = c;
        }
        let trunk_out = cin;
        let bc = config.branch_channels;
        let branch_t = (
            b.conv("branch_t.conv", Group::BranchT, trunk_out, bc, 3, 1, RELU_GAIN),
            b.linear("branch_t.fc", Group::BranchT, bc, config.feat_dim_t, LINEAR_GAIN),
        );
        let branch_p = (
            b.conv("branch_p.conv", Group::BranchP, trunk_out, bc, 3, 1, RELU_GAIN),
            b.linear("branch_p.fc", Group::BranchP, bc, config.feat_dim_p, LINEAR_GAIN),
        );
        let cls_t = b.linear("cls_t", Group::ClsT, config.feat_dim_t, config.n_id, LINEAR_GAIN);
        let cls_p = b.linear("cls_p", Group::ClsP, config.feat_dim_p, config.n_id, LINEAR_GAIN);

        let base = config.dec_base();
        let c0 = config.dec_channels[0];
        let dec_fc = b.linear(
            "dec.fc",
            Group::Dec,
            config.feat_dim_t + config.feat_dim_p,
            c0 * base * base,
            RELU_GAIN,
        );
        let mut dec_convs = Vec::new();
        let mut cin = c0;
        for (i, &c) in config.dec_channels.iter().enumerate() {
            dec_convs.push(b.conv(&format!("dec.conv{i}"), Group::Dec, cin, c, 3, 1, RELU_GAIN));
            cin = c;
        }
        let dec_out = b.conv("dec.out", Group::Dec, cin, 3, 1, 1, LINEAR_GAIN);

        let layout = Layout {
            enc,
            branch_t,
            branch_p,
            cls_t,
            cls_p,
            dec_fc,
            dec_convs,
            dec_out,
        };
        Ok(Self {
            sigma_t: vec![T::zero(); config.feat_dim_t],
            sigma_p: vec![T::zero(); config.feat_dim_p],
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn feat_dim(&self, b: Branch) -> usize {
        match b {
            Branch::T => self.config.feat_dim_t,
            Branch::P => self.config.feat_dim_p,
        }
    }

    pub fn running_sigma(&self, b: Branch) -> &[T] {
        match b {
            Branch::T => &self.sigma_t,
            Branch::P => &self.sigma_p,
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> D2AEModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect();
        D2AEModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            sigma_t: conv(&self.sigma_t),
            sigma_p: conv(&self.sigma_p),
        }
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::shape(
                "encode",
                format!("expected image {:?}, got {:?}", self.config.image_shape(), x.shape()),
            ));
        }
        Ok(())
    }

    fn check_feature(&self, f: &[T], b: Branch) -> Result<()> {
        if f.len() != self.feat_dim(b) {
            return Err(Error::shape(
                "feature",
                format!("branch {} expects {} values, got {}", b.name(), self.feat_dim(b), f.len()),
            ));
        }
        Ok(())
    }

    fn conv_layer(g: &mut Graph<'_, T>, x: Var, c: Conv, relu: bool) -> Result<Var> {
        let w = g.param(c.w);
        let b = g.param(c.b);
        let y = g.conv2d(x, w, c.stride, c.pad)?;
        let y = g.bias_add(y, b)?;
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    fn linear_layer(g: &mut Graph<'_, T>, x: Var, l: Linear, frozen: bool) -> Result<Var> {
        let mut w = g.param(l.w);
        let mut b = g.param(l.b);
        if frozen {
            w = g.stop_gradient(w);
            b = g.stop_gradient(b);
        }
        let y = g.matmul(w, x)?;
        g.bias_add(y, b)
    }

    /// Shared encoder activation.
    pub fn trunk(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &c in &self.layout.enc {
            h = Self::conv_layer(g, h, c, true)?;
        }
        Ok(h)
    }

    /// Branch feature from the shared activation.
    pub fn branch(&self, g: &mut Graph<'_, T>, h: Var, which: Branch) -> Result<Var> {
        let (conv, fc) = match which {
            Branch::T => self.layout.branch_t,
            Branch::P => self.layout.branch_p,
        };
        let h = Self::conv_layer(g, h, conv, true)?;
        let pooled = g.global_avg_pool(h)?;
        Self::linear_layer(g, pooled, fc, false)
    }

    /// Identity logits; `frozen` cuts gradient into the classifier weights.
    pub fn logits(&self, g: &mut Graph<'_, T>, f: Var, which: Branch, frozen: bool) -> Result<Var> {
        let l = match which {
            Branch::T => self.layout.cls_t,
            Branch::P => self.layout.cls_p,
        };
        Self::linear_layer(g, f, l, frozen)
    }

    pub fn decoder(&self, g: &mut Graph<'_, T>, f_t: Var, f_p: Var) -> Result<Var> {
        let z = g.concat(&[f_t, f_p])?;
        let h = Self::linear_layer(g, z, self.layout.dec_fc, false)?;
        let h = g.relu(h)?;
        let base = self.config.dec_base();
        let mut h = g.reshape(h, &[self.config.dec_channels[0], base, base])?;
        for (i, &c) in self.layout.dec_convs.iter().enumerate() {
            if i > 0 {
                h = g.upsample2x(h)?;
            }
            h = Self::conv_layer(g, h, c, true)?;
        }
        let out = Self::conv_layer(g, h, self.layout.dec_out, false)?;
        g.sigmoid(out)
    }

    /// `(f_T, f_P)` for one image; the trunk runs once for both branches.
    pub fn encode(&self, x: &Tensor<T>) -> Result<FeaturePair<T>> {
        self.check_image(x)?;
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let h = self.trunk(&mut g, xv)?;
        let ft = self.branch(&mut g, h, Branch::T)?;
        let fp = self.branch(&mut g, h, Branch::P)?;
        Ok(FeaturePair::new(
            g.value(ft).data().to_vec(),
            g.value(fp).data().to_vec(),
        ))
    }

    pub fn encode_batch(&self, images: &[Tensor<T>], exec: Execution) -> Result<Vec<FeaturePair<T>>> {
        par::map_slice(exec, images, |x| self.encode(x))
            .into_iter()
            .collect()
    }

    /// `softmax(W f + b)` for the chosen branch's classifier.
    pub fn classify(&self, f: &[T], which: Branch) -> Result<Vec<T>> {
        self.check_feature(f, which)?;
        let mut g = Graph::new(&self.params);
        let fv = g.constant(Tensor::from_vec(f.to_vec()));
        let z = self.logits(&mut g, fv, which, false)?;
        let y = g.softmax(z)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn decode(&self, fp: &FeaturePair<T>) -> Result<Tensor<T>> {
        self.check_feature(&fp.f_t, Branch::T)?;
        self.check_feature(&fp.f_p, Branch::P)?;
        let mut g = Graph::new(&self.params);
        let ft = g.constant(Tensor::from_vec(fp.f_t.clone()));
        let fpv = g.constant(Tensor::from_vec(fp.f_p.clone()));
        let x = self.decoder(&mut g, ft, fpv)?;
        Ok(g.value(x).clone())
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    /// Gaussian feature augmentation `f~ = f + eps * sigma`.
    ///
    /// In train mode `sigma` is the batch standard deviation per channel and
    /// the running estimate is EMA-updated; in eval mode the running
    /// estimate is used.
    pub fn augment<R: Rng>(&mut self, batch: &[FeaturePair<T>], mode: Mode, rng: &mut R) -> Result<Vec<FeaturePair<T>>> {
        for fp in batch {
            self.check_feature(&fp.f_t, Branch::T)?;
            self.check_feature(&fp.f_p, Branch::P)?;
        }
        let (st, sp) = match mode {
            Mode::Train => {
                let st = batch_std(&batch.iter().map(|f| f.f_t.as_slice()).collect::<Vec<_>>())?;
                let sp = batch_std(&batch.iter().map(|f| f.f_p.as_slice()).collect::<Vec<_>>())?;
                self.update_running_sigma(&st, &sp);
                (st, sp)
            }
            Mode::Eval => (self.sigma_t.clone(), self.sigma_p.clone()),
        };
        Ok(batch
            .iter()
            .map(|fp| {
                let (et, ep) = sample_noise::<T, _>(rng, st.len(), sp.len());
                apply_noise(fp, &et, &ep, &st, &sp)
            })
            .collect())
    }

    /// EMA update of the running standard deviations.
    pub fn update_running_sigma(&mut self, batch_t: &[T], batch_p: &[T]) {
        let m = T::of(self.config.augment_momentum);
        let one_m = T::one() - m;
        for (r, &b) in self.sigma_t.iter_mut().zip(batch_t) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.sigma_p.iter_mut().zip(batch_p) {
            *r = m * *r + one_m * b;
        }
    }

    /// Full training forward pass. Each sample gets its own graph; the
    /// augmentation scale couples them and is treated as a constant.
    ///
    /// `noise(i)` returns `(eps_T, eps_P)` for sample `i`.
    pub fn forward_full<'m, N>(
        &'m self,
        images: &[&Tensor<T>],
        sigma: SigmaSource<T>,
        routing: HeadRouting,
        exec: Execution,
        noise: N,
    ) -> Result<BatchForward<'m, T>>
    where
        N: Fn(usize) -> (Vec<T>, Vec<T>) + Sync + Send,
    {
        for x in images {
            self.check_image(x)?;
        }
        if matches!(sigma, SigmaSource::Batch) && images.len() < 2 {
            return Err(Error::invalid(format!(
                "training forward needs a batch of at least 2, got {}",
                images.len()
            )));
        }

        struct Partial<'m, T: Scalar> {
            g: Graph<'m, T>,
            x: Var,
            f_t: Var,
            f_p: Var,
        }

        let stage1: Vec<Result<Partial<'m, T>>> = par::map_indexed(exec, images.len(), |i| {
            let mut g = Graph::new(&self.params);
            let x = g.constant(images[i].clone());
            let h = self.trunk(&mut g, x)?;
            let f_t = self.branch(&mut g, h, Branch::T)?;
            let f_p = self.branch(&mut g, h, Branch::P)?;
            Ok(Partial { g, x, f_t, f_p })
        });
        let mut partials = stage1.into_iter().collect::<Result<Vec<_>>>()?;

        let (sigma_t, sigma_p) = match sigma {
            SigmaSource::Batch => {
                let ft: Vec<&[T]> = partials.iter().map(|p| p.g.value(p.f_t).data()).collect();
                let fp: Vec<&[T]> = partials.iter().map(|p| p.g.value(p.f_p).data()).collect();
                (batch_std(&ft)?, batch_std(&fp)?)
            }
            SigmaSource::Running => (self.sigma_t.clone(), self.sigma_p.clone()),
            SigmaSource::Fixed(t, p) => {
                self.check_feature(&t, Branch::T)?;
                self.check_feature(&p, Branch::P)?;
                (t, p)
            }
        };

        let mut results: Vec<Option<Result<SampleVars>>> = (0..partials.len()).map(|_| None).collect();
        {
            let mut work: Vec<(&mut Partial<'m, T>, &mut Option<Result<SampleVars>>)> =
                partials.iter_mut().zip(results.iter_mut()).collect();
            par::for_each_mut(exec, &mut work, |i, (p, slot)| {
                let (et, ep) = noise(i);
                **slot = Some(self.heads(&mut p.g, p.x, p.f_t, p.f_p, &et, &ep, &sigma_t, &sigma_p, routing));
            });
        }
        let vars = results
            .into_iter()
            .map(|r| r.expect("every sample processed"))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchForward {
            graphs: partials.into_iter().map(|p| p.g).collect(),
            vars,
            sigma_t,
            sigma_p,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn heads(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        f_t: Var,
        f_p: Var,
        eps_t: &[T],
        eps_p: &[T],
        sigma_t: &[T],
        sigma_p: &[T],
        routing: HeadRouting,
    ) -> Result<SampleVars> {
        if eps_t.len() != sigma_t.len() || eps_p.len() != sigma_p.len() {
            return Err(Error::shape(
                "augment",
                format!("noise ({}, {}) vs sigma ({}, {})", eps_t.len(), eps_p.len(), sigma_t.len(), sigma_p.len()),
            ));
        }
        let shift = |e: &[T], s: &[T]| Tensor::from_vec(e.iter().zip(s).map(|(&e, &s)| e * s).collect());
        let nt = g.constant(shift(eps_t, sigma_t));
        let np = g.constant(shift(eps_p, sigma_p));
        let f_t_aug = g.add(f_t, nt)?;
        let f_p_aug = g.add(f_p, np)?;

        let (head_t, head_p) = if routing.augmented_heads {
            (f_t_aug, f_p_aug)
        } else {
            (f_t, f_p)
        };
        let zt = self.logits(g, head_t, Branch::T, false)?;
        let y_t = g.softmax(zt)?;

        // adversarial identity loss: classifier learns, features do not
        let gated = g.stop_gradient(head_p);
        let zp = self.logits(g, gated, Branch::P, false)?;
        let y_p_gated = g.softmax(zp)?;

        // confusion loss: features learn, classifier frozen
        let zc = self.logits(g, head_p, Branch::P, !routing.confusion_updates_classifier)?;
        let y_p_conf = g.softmax(zc)?;

        let x_clean = self.decoder(g, f_t, f_p)?;
        let x_aug = self.decoder(g, f_t_aug, f_p_aug)?;
        Ok(SampleVars {
            x,
            f_t,
            f_p,
            f_t_aug,
            f_p_aug,
            y_t,
            y_p_gated,
            y_p_conf,
            x_clean,
            x_aug,
        })
    }
}

/// `f + eps * sigma` per branch.
pub fn apply_noise<T: Scalar>(fp: &FeaturePair<T>, eps_t: &[T], eps_p: &[T], sigma_t: &[T], sigma_p: &[T]) -> FeaturePair<T> {
    let add = |f: &[T], e: &[T], s: &[T]| f.iter().zip(e).zip(s).map(|((&f, &e), &s)| f + e * s).collect();
    FeaturePair::new(add(&fp.f_t, eps_t, sigma_t), add(&fp.f_p, eps_p, sigma_p))
}
