//! Pair-relationship embedding network.
//!
//! Maps a `C x S x S` ROI feature to a vector in a learned space where the L1
//! distance separates proposals covering two different objects from
//! proposals covering the same object (or none).
//!
//! Layer stack, with `S = roi_size`, `P = S / 2` and `W = width`:
//!
//! ```text
//! conv3x3(C -> W)  relu  bn          S x S
//! conv3x3(W -> W)  relu  bn          S x S
//! maxpool 2x2                        P x P
//! conv3x3(W -> W)  relu  bn          P x P
//! 3 x [conv1x1(W -> W) relu bn]      P x P
//! head: Gap = conv1x1(W -> E) then global average pool
//!       Fc  = dense over the flattened W x P x P map
//! ```
//!
//! Training batches are whole images: every ROI of every sampled pair of the
//! image goes through the network together, each normalization layer uses
//! per-channel statistics over those ROIs and all spatial positions, and the
//! step follows the summed pair loss. The statistics are folded into
//! exponential running averages, which inference uses instead.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, roi_align, RoiFeature, DEFAULT_ROI_SIZE};
use crate::pairs::PairSample;
use crate::scene::Scene;

const BN_EPS: f64 = 1e-5;
const N_CONV: usize = 3;
const N_POINT: usize = 3;
const N_NORM: usize = N_CONV + N_POINT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadType {
    /// 1x1 projection to the embedding followed by global average pooling.
    Gap,
    /// Fully connected layer over the flattened final feature map.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub embedding_dim: usize,
    pub roi_size: usize,
    pub head: HeadType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { in_channels: 8, width: 32, embedding_dim: 50, roi_size: DEFAULT_ROI_SIZE, head: HeadType::Gap }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.roi_size < 2 {
            return Err(Error::InvalidConfig(format!("roi_size must be at least 2, got {}", self.roi_size)));
        }
        Ok(())
    }

    fn pooled(&self) -> usize {
        self.roi_size / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl TensorKind {
    /// Whether weight decay applies; normalization parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Weight | TensorKind::Bias)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Images per SGD step; all sampled pairs of an image stay together.
    pub batch_size: usize,
    pub margin: f64,
    pub epochs: usize,
    /// Running-statistics momentum of batch normalization.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 1,
            margin: 1.0,
            epochs: 10,
            bn_momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.learning_rate, self.momentum, self.weight_decay];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("learning rate, momentum and weight decay must be >= 0".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-tensor gradients, laid out like the model's parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &EmbeddingModel) -> Self {
        Gradients { tensors: model.params.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&g| g == 0.0)
    }


}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    config: ModelConfig,
    params: Vec<Vec<f64>>,
    kinds: Vec<TensorKind>,
    names: Vec<String>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

/// Indices into the parameter list.
#[derive(Clone, Copy)]
struct Slots;

impl Slots {
    fn conv_w(l: usize) -> usize {
        4 * l
    }
    fn conv_b(l: usize) -> usize {
        4 * l + 1
    }
    fn gamma(n: usize) -> usize {
        4 * n + 2
    }
    fn beta(n: usize) -> usize {
        4 * n + 3
    }
    fn point_w(l: usize) -> usize {
        4 * (N_CONV + l)
    }
    fn point_b(l: usize) -> usize {
        4 * (N_CONV + l) + 1
    }
    const HEAD_W: usize = 4 * N_NORM;
    const HEAD_B: usize = 4 * N_NORM + 1;
}

impl EmbeddingModel {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::tensor_layout(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, kind, len, fan_in) in &shapes {
            let t = match kind {
                TensorKind::Weight => {
                    let bound = if name.starts_with("head") {
                        (1.0 / *fan_in as f64).sqrt()
                    } else {
                        (6.0 / *fan_in as f64).sqrt()
                    };
                    (0..*len).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                TensorKind::Bias | TensorKind::NormShift => vec![0.0; *len],
                TensorKind::NormScale => vec![1.0; *len],
            };
            params.push(t);
        }
        Ok(EmbeddingModel {
            config,
            params,
            kinds: shapes.iter().map(|s| s.1).collect(),
            names: shapes.into_iter().map(|s| s.0).collect(),
            running_mean: vec![vec![0.0; config.width]; N_NORM],
            running_var: vec![vec![1.0; config.width]; N_NORM],
        })
    }

    /// (name, kind, element count, fan-in) of every parameter tensor, in
    /// declaration order.
    fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, TensorKind, usize, usize)> {
        let w = cfg.width;
        let mut out = Vec::new();
        for l in 0..N_CONV {
            let cin = if l == 0 { cfg.in_channels } else { w };
            out.push((format!("conv{}.weight", l + 1), TensorKind::Weight, w * cin * 9, cin * 9));
            out.push((format!("conv{}.bias", l + 1), TensorKind::Bias, w, 0));
            out.push((format!("bn{}.scale", l + 1), TensorKind::NormScale, w, 0));
            out.push((format!("bn{}.shift", l + 1), TensorKind::NormShift, w, 0));
        }
        for l in 0..N_POINT {
            out.push((format!("fc{}.weight", l + 1), TensorKind::Weight, w * w, w));
            out.push((format!("fc{}.bias", l + 1), TensorKind::Bias, w, 0));
            out.push((format!("bn{}.scale", N_CONV + l + 1), TensorKind::NormScale, w, 0));
            out.push((format!("bn{}.shift", N_CONV + l + 1), TensorKind::NormShift, w, 0));
        }
        let head_in = match cfg.head {
            HeadType::Gap => w,
            HeadType::Fc => w * cfg.pooled() * cfg.pooled(),
        };
        out.push(("head.weight".into(), TensorKind::Weight, cfg.embedding_dim * head_in, head_in));
        out.push(("head.bias".into(), TensorKind::Bias, cfg.embedding_dim, 0));
        out
    }

    /// Rebuilds a model from raw tensors, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Vec<f64>>,
        running_mean: Vec<Vec<f64>>,
        running_var: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut model = EmbeddingModel::new(config, 0)?;
        let lens: Vec<usize> = model.params.iter().map(Vec::len).collect();
        let got: Vec<usize> = params.iter().map(Vec::len).collect();
        if lens != got {
            return Err(Error::ShapeMismatch { expected: format!("{lens:?}"), found: format!("{got:?}") });
        }
        let stat_ok = |s: &Vec<Vec<f64>>| s.len() == N_NORM && s.iter().all(|c| c.len() == config.width);
        if !stat_ok(&running_mean) || !stat_ok(&running_var) {
            return Err(Error::ShapeMismatch {
                expected: format!("{N_NORM} x {} running statistics", config.width),
                found: "other".into(),
            });
        }
        let all = params.iter().chain(&running_mean).chain(&running_var).flatten();
        if all.clone().any(|v| !v.is_finite()) || running_var.iter().flatten().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("model tensors must be finite with non-negative variances".into()));
        }
        model.params = params;
        model.running_mean = running_mean;
        model.running_var = running_var;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.params[k]
    }

    pub fn tensor_name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn tensor_kind(&self, k: usize) -> TensorKind {
        self.kinds[k]
    }

    pub fn running_mean(&self) -> &[Vec<f64>] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[Vec<f64>] {
        &self.running_var
    }

    /// Mutable access to the running statistics, `(mean, var)`.
    pub fn running_stats_mut(&mut self) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        (&mut self.running_mean, &mut self.running_var)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Zeroes the final projection, so every input maps to the origin.
    pub fn zero_head(&mut self) {
        self.params[Slots::HEAD_W].fill(0.0);
        self.params[Slots::HEAD_B].fill(0.0);
    }

    fn check_input(&self, roi: &RoiFeature) -> Result<()> {
        let c = &self.config;
        if roi.channels() != c.in_channels || roi.size() != c.roi_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", c.in_channels, c.roi_size, c.roi_size),
                found: format!("{}x{}x{}", roi.channels(), roi.size(), roi.size()),
            });
        }
        Ok(())
    }

    /// Embedding of one ROI (inference mode).
    pub fn forward(&self, roi: &RoiFeature) -> Result<Vec<f64>> {
        self.check_input(roi)?;
        Ok(self.run(&[roi.values()], Norm::Running).embeddings.swap_remove(0))
    }

    /// L1 distance between the embeddings of two ROIs.
    pub fn pair_distance(&self, a: &RoiFeature, b: &RoiFeature) -> Result<f64> {
        Ok(l1_distance(&self.forward(a)?, &self.forward(b)?))
    }

    fn layer_geometry(&self, l: usize) -> (usize, usize) {
        let c = &self.config;
        match l {
            0 => (c.in_channels, c.roi_size),
            1 => (c.width, c.roi_size),
            _ => (c.width, c.pooled()),
        }
    }

    /// Forward pass over a batch of ROIs. With `Norm::Batch` every
    /// normalization layer uses the statistics of this batch (all ROIs and
    /// spatial positions), otherwise the running statistics.
    fn run(&self, inputs: &[&[f64]], norm: Norm) -> Trace {
        let c = &self.config;
        let (p, w) = (c.pooled(), c.width);
        let mut trace = Trace { norm, ..Trace::default() };
        let mut xs: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_vec()).collect();
        for l in 0..N_NORM {
            if l == 2 {
                let s = c.roi_size;
                let (pooled, idx): (Vec<_>, Vec<_>) = xs.iter().map(|x| maxpool2(x, w, s, s)).unzip();
                trace.pool_idx = idx;
                xs = pooled;
            }
            let (zs, cols): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if l < N_CONV {
                let (cin, n) = self.layer_geometry(l);
                xs.iter()
                    .map(|x| {
                        let cols = im2col3x3(x, cin, n);
                        let z = conv_cols(&cols, &self.params[Slots::conv_w(l)], &self.params[Slots::conv_b(l)], n * n);
                        (z, cols)
                    })
                    .unzip()
            } else {
                let pl = l - N_CONV;
                let zs = xs
                    .iter()
                    .map(|x| conv_cols(x, &self.params[Slots::point_w(pl)], &self.params[Slots::point_b(pl)], p * p))
                    .collect();
                (zs, std::mem::take(&mut xs))
            };
            let zs: Vec<Vec<f64>> = zs
                .into_iter()
                .map(|mut z| {
                    relu_inplace(&mut z);
                    z
                })
                .collect();
            let area = self.layer_geometry(l).1.pow(2);
            let stats = match norm {
                Norm::Batch => batch_stats(&zs, w, area),
                Norm::Running => (self.running_mean[l].clone(), self.running_var[l].clone()),
            };
            let inv_std: Vec<f64> = stats.1.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let (gamma, beta) = (&self.params[Slots::gamma(l)], &self.params[Slots::beta(l)]);
            xs = zs.iter().map(|z| normalize(z, &stats.0, &inv_std, gamma, beta, area)).collect();
            trace.layers.push(LayerTrace { cols, activations: zs, mean: stats.0, var: stats.1, inv_std });
        }
        let (hw, hb) = (&self.params[Slots::HEAD_W], &self.params[Slots::HEAD_B]);
        trace.head_inputs = match c.head {
            HeadType::Gap => xs.iter().map(|x| channel_means(x, w, p * p)).collect(),
            HeadType::Fc => xs,
        };
        trace.embeddings = trace.head_inputs.iter().map(|h| dense(h, hw, hb)).collect();
        trace
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to each embedding of the batch.
    fn backprop(&self, trace: &Trace, d_embeddings: &[Vec<f64>], grads: &mut Gradients) {
        let c = &self.config;
        let (s, p, w) = (c.roi_size, c.pooled(), c.width);
        let mut dxs: Vec<Vec<f64>> = trace
            .head_inputs
            .iter()
            .zip(d_embeddings)
            .map(|(h, d)| {
                let (gw, gb) = pair_mut(&mut grads.tensors, Slots::HEAD_W, Slots::HEAD_B);
                let d_head_in = dense_backward(h, &self.params[Slots::HEAD_W], d, gw, gb);
                match c.head {
                    HeadType::Gap => {
                        let area = (p * p) as f64;
                        let mut dx = vec![0.0; w * p * p];
                        for (ch, g) in d_head_in.iter().enumerate() {
                            dx[ch * p * p..(ch + 1) * p * p].fill(g / area);
                        }
                        dx
                    }
                    HeadType::Fc => d_head_in,
                }
            })
            .collect();
        for l in (0..N_NORM).rev() {
            let lt = &trace.layers[l];
            let (cin, n) = self.layer_geometry(l);
            let mut dzs = self.norm_backward(l, lt, trace.norm, &dxs, n * n, grads);
            for (dz, z) in dzs.iter_mut().zip(&lt.activations) {
                relu_backward(dz, z);
            }
            dxs = if l < N_CONV {
                let (gw, gb) = pair_mut(&mut grads.tensors, Slots::conv_w(l), Slots::conv_b(l));
                lt.cols
                    .iter()
                    .zip(&dzs)
                    .map(|(cols, dz)| {
                        let dcols = conv_cols_backward(cols, &self.params[Slots::conv_w(l)], dz, n * n, gw, gb);
                        col2im3x3(&dcols, cin, n)
                    })
                    .collect()
            } else {
                let pl = l - N_CONV;
                let (gw, gb) = pair_mut(&mut grads.tensors, Slots::point_w(pl), Slots::point_b(pl));
                lt.cols
                    .iter()
                    .zip(&dzs)
                    .map(|(x, dz)| conv_cols_backward(x, &self.params[Slots::point_w(pl)], dz, p * p, gw, gb))
                    .collect()
            };
            if l == 2 {
                dxs = dxs.iter().zip(&trace.pool_idx).map(|(d, idx)| maxpool2_backward(d, idx, w * s * s)).collect();
            }
        }
    }

    /// Gradient through one normalization layer. Under batch statistics the
    /// mean and variance depend on every element of the batch.
    fn norm_backward(
        &self,
        l: usize,
        lt: &LayerTrace,
        norm: Norm,
        d_out: &[Vec<f64>],
        area: usize,
        grads: &mut Gradients,
    ) -> Vec<Vec<f64>> {
        let gamma = &self.params[Slots::gamma(l)];
        let (gg, gb) = pair_mut(&mut grads.tensors, Slots::gamma(l), Slots::beta(l));
        let mut d_in: Vec<Vec<f64>> = d_out.iter().map(|d| vec![0.0; d.len()]).collect();
        let count = (area * d_out.len()) as f64;
        for ch in 0..gamma.len() {
            let range = ch * area..(ch + 1) * area;
            let (mean, inv_std) = (lt.mean[ch], lt.inv_std[ch]);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for (z, d) in lt.activations.iter().zip(d_out) {
                for (&a, &g) in z[range.clone()].iter().zip(&d[range.clone()]) {
                    sum_g += g;
                    sum_gx += g * (a - mean) * inv_std;
                }
            }
            gg[ch] += sum_gx;
            gb[ch] += sum_g;
            let k = gamma[ch] * inv_std;
            for ((z, d), di) in lt.activations.iter().zip(d_out).zip(d_in.iter_mut()) {
                let it = z[range.clone()].iter().zip(&d[range.clone()]).zip(&mut di[range.clone()]);
                match norm {
                    Norm::Running => it.for_each(|((_, &g), t)| *t = k * g),
                    Norm::Batch => it.for_each(|((&a, &g), t)| {
                        let xhat = (a - mean) * inv_std;
                        *t = k * (g - sum_g / count - xhat * sum_gx / count);
                    }),
                }
            }
        }
        d_in
    }

    /// Training-mode forward of a batch of pairs: summed loss, its gradient
    /// and the trace. All ROIs of the batch share normalization statistics.
    fn loss_and_gradients(&self, batch: &[&PairSample], margin: f64) -> Result<(f64, Gradients, Trace)> {
        let mut inputs = Vec::with_capacity(2 * batch.len());
        for s in batch {
            self.check_input(&s.roi_i)?;
            self.check_input(&s.roi_j)?;
            inputs.push(s.roi_i.values());
            inputs.push(s.roi_j.values());
        }
        let trace = self.run(&inputs, Norm::Batch);
        let mut loss = 0.0;
        let mut d_emb = Vec::with_capacity(inputs.len());
        for (k, s) in batch.iter().enumerate() {
            let (ei, ej) = (&trace.embeddings[2 * k], &trace.embeddings[2 * k + 1]);
            let d = l1_distance(ei, ej);
            let y = s.label.y;
            loss += contrastive_loss(d, y, margin);
            let dl_dd = if y == 1 {
                1.0
            } else if d < margin {
                -1.0
            } else {
                0.0
            };
            let di: Vec<f64> = ei.iter().zip(ej).map(|(a, b)| dl_dd * sign(a - b)).collect();
            d_emb.push(di.iter().map(|g| -g).collect());
            d_emb.insert(2 * k, di);
        }
        let mut grads = Gradients::zeros_like(self);
        if d_emb.iter().flatten().any(|&g| g != 0.0) {
            self.backprop(&trace, &d_emb, &mut grads);
        }
        Ok((loss, grads, trace))
    }

    /// Exact gradient of [`EmbeddingModel::training_loss`] with respect to
    /// every parameter. Kinks of the hinge, the L1 norm and the ReLU take
    /// subgradient 0.
    pub fn backward(&self, batch: &[PairSample], cfg: &TrainConfig) -> Result<Gradients> {
        let refs: Vec<&PairSample> = batch.iter().collect();
        self.loss_and_gradients(&refs, cfg.margin).map(|(_, g, _)| g)
    }

    /// Summed loss of a batch as seen during training: all its ROIs form one
    /// normalization batch.
    pub fn training_loss(&self, batch: &[PairSample], margin: f64) -> Result<f64> {
        let refs: Vec<&PairSample> = batch.iter().collect();
        self.loss_and_gradients(&refs, margin).map(|(l, _, _)| l)
    }

    /// Loss of one sample in inference mode.
    pub fn sample_loss(&self, sample: &PairSample, margin: f64) -> Result<f64> {
        let d = self.pair_distance(&sample.roi_i, &sample.roi_j)?;
        Ok(contrastive_loss(d, sample.label.y, margin))
    }

    fn update_running_stats(&mut self, trace: &Trace, momentum: f64) {
        for (l, lt) in trace.layers.iter().enumerate() {
            for ch in 0..self.config.width {
                let (m, v) = (&mut self.running_mean[l][ch], &mut self.running_var[l][ch]);
                *m = momentum * *m + (1.0 - momentum) * lt.mean[ch];
                *v = momentum * *v + (1.0 - momentum) * lt.var[ch];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// SGD with momentum over `samples`, L2 weight decay on weights and biases.
/// Image order is reshuffled every epoch from `cfg.seed`; the pairs of an
/// image keep their input order.
pub fn train(model: &mut EmbeddingModel, samples: &[PairSample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, samples, cfg, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(
    model: &mut EmbeddingModel,
    samples: &[PairSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one sample".into()));
    }
    let mut velocity = Gradients::zeros_like(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = group_by_image(samples);
    let mut report = TrainReport { loss_trace: Vec::with_capacity(cfg.epochs), steps: 0 };
    for epoch in 0..cfg.epochs {
        images.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for group in images.chunks(cfg.batch_size) {
            let batch: Vec<&PairSample> = group.iter().flatten().copied().collect();
            let (loss, grads, trace) = model.loss_and_gradients(&batch, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: report.steps, loss });
            }
            epoch_loss += loss;
            model.update_running_stats(&trace, cfg.bn_momentum);
            sgd_step(model, &grads, &mut velocity, cfg);
            report.steps += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        report.loss_trace.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}

/// Samples grouped by image, in image id order.
fn group_by_image(samples: &[PairSample]) -> Vec<Vec<&PairSample>> {
    let mut images: BTreeMap<u64, Vec<&PairSample>> = BTreeMap::new();
    for s in samples {
        images.entry(s.image_id).or_default().push(s);
    }
    images.into_values().collect()
}

fn sgd_step(model: &mut EmbeddingModel, grads: &Gradients, velocity: &mut Gradients, cfg: &TrainConfig) {
    for k in 0..model.params.len() {
        let decay = if model.kinds[k].decays() { cfg.weight_decay } else { 0.0 };
        let params = &mut model.params[k];
        for ((w, &g), v) in params.iter_mut().zip(&grads.tensors[k]).zip(velocity.tensors[k].iter_mut()) {
            *v = cfg.momentum * *v + g + decay * *w;
            *w -= cfg.learning_rate * *v;
        }
    }
}

/// Fraction of samples classified correctly by thresholding the pair
/// distance: similar when `distance <= threshold`.
pub fn pair_accuracy(model: &EmbeddingModel, samples: &[PairSample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let d = model.pair_distance(&s.roi_i, &s.roi_j)?;
        if (d <= threshold) == s.label.is_similar() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `y * d + (1 - y) * max(0, margin - d)`.
pub fn contrastive_loss(d: f64, y: u8, margin: f64) -> f64 {
    if y == 1 {
        d
    } else {
        (margin - d).max(0.0)
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sparse symmetric pair distances of one image, stored for `i < j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceMatrix {
    pub image_id: u64,
    entries: BTreeMap<(usize, usize), f64>,
}

impl DistanceMatrix {
    pub fn new(image_id: u64) -> Self {
        DistanceMatrix { image_id, entries: BTreeMap::new() }
    }

    /// Inserts `d(i, j) = d(j, i)`; self pairs and negative or non-finite
    /// distances are rejected.
    pub fn insert(&mut self, i: usize, j: usize, dist: f64) -> Result<()> {
        if i == j {
            return Err(Error::InvalidConfig(format!("distance matrix cannot hold self pair ({i}, {i})")));
        }
        if !(dist.is_finite() && dist >= 0.0) {
            return Err(Error::InvalidConfig(format!("distance ({i}, {j}) = {dist} must be finite and >= 0")));
        }
        self.entries.insert((i.min(j), i.max(j)), dist);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries as `(i, j, dist)` with `i < j`, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &d)| (i, j, d))
    }

    /// Builds the matrix for all proposal pairs of `scene` with IoU at least
    /// `nms_thr`, using `dist` for each pair.
    pub fn from_fn(scene: &Scene, nms_thr: f64, mut dist: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut dm = DistanceMatrix::new(scene.image_id);
        let props = &scene.proposals;
        for i in 0..props.len() {
            for j in i + 1..props.len() {
                if iou(&props[i].bbox, &props[j].bbox) >= nms_thr {
                    dm.insert(i, j, dist(i, j)?)?;
                }
            }
        }
        Ok(dm)
    }
}

/// Distance matrix of a scene from a trained model. Each proposal taking
/// part in a nearby pair is embedded once.
pub fn infer_distance_matrix(model: &EmbeddingModel, scene: &Scene, nms_thr: f64) -> Result<DistanceMatrix> {
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; scene.proposals.len()];
    let roi_size = model.config().roi_size;
    let mut embed = |k: usize| -> Result<Vec<f64>> {
        if cache[k].is_none() {
            let roi = roi_align(&scene.features, &scene.proposals[k].bbox, roi_size)?;
            cache[k] = Some(model.forward(&roi)?);
        }
        Ok(cache[k].clone().expect("filled above"))
    };
    DistanceMatrix::from_fn(scene, nms_thr, |i, j| Ok(l1_distance(&embed(i)?, &embed(j)?)))
}

/// Source of the normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
enum Norm {
    /// Running averages (inference).
    #[default]
    Running,
    /// Statistics of the current batch (training).
    Batch,
}

#[derive(Default)]
struct LayerTrace {
    /// Per ROI: im2col matrix of the layer input (the input itself for
    /// pointwise layers).
    cols: Vec<Vec<f64>>,
    /// Per ROI: post-ReLU, pre-normalization activations.
    activations: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Default)]
struct Trace {
    norm: Norm,
    layers: Vec<LayerTrace>,
    pool_idx: Vec<Vec<usize>>,
    head_inputs: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

/// Per-channel mean and (biased) variance over every ROI and position.
fn batch_stats(zs: &[Vec<f64>], channels: usize, area: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (area * zs.len()) as f64;
    (0..channels)
        .map(|ch| {
            let vals = || zs.iter().flat_map(|z| z[ch * area..(ch + 1) * area].iter());
            let mean = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            (mean, var)
        })
        .unzip()
}

fn normalize(z: &[f64], mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64], area: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for ch in 0..gamma.len() {
        let scale = gamma[ch] * inv_std[ch];
        let shift = beta[ch] - mean[ch] * scale;
        let range = ch * area..(ch + 1) * area;
        out[range.clone()].iter_mut().zip(&z[range]).for_each(|(o, &v)| *o = v * scale + shift);
    }
    out
}

fn pair_mut(t: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = t.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradients where the ReLU output was not positive.
fn relu_backward(d: &mut [f64], act: &[f64]) {
    d.iter_mut().zip(act).for_each(|(g, &a)| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

/// Output-row range `[lo, hi)` for which `row + k - 1` stays inside `[0, n)`.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (n + 1 - k).min(n);
    (lo, hi)
}

/// Patch matrix of a 3x3, padding-1 convolution on `cin` square `n x n`
/// maps: row `(i, ky, kx)` holds input channel `i` shifted by `(ky-1, kx-1)`.
fn im2col3x3(x: &[f64], cin: usize, n: usize) -> Vec<f64> {
    let area = n * n;
    let mut cols = vec![0.0; cin * 9 * area];
    for i in 0..cin {
        let x_i = &x[i * area..(i + 1) * area];
        for ky in 0..3 {
            let (y0, y1) = valid_range(ky, n);
            for kx in 0..3 {
                let (x0, x1) = valid_range(kx, n);
                let row = &mut cols[(i * 9 + ky * 3 + kx) * area..][..area];
                for y in y0..y1 {
                    let src = (y + ky - 1) * n;
                    row[y * n + x0..y * n + x1].copy_from_slice(&x_i[src + x0 + kx - 1..src + x1 + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
fn col2im3x3(dcols: &[f64], cin: usize, n: usize) -> Vec<f64> {
    let area = n * n;
    let mut dx = vec![0.0; cin * area];
    for i in 0..cin {
        let dx_i = &mut dx[i * area..(i + 1) * area];
        for ky in 0..3 {
            let (y0, y1) = valid_range(ky, n);
            for kx in 0..3 {
                let (x0, x1) = valid_range(kx, n);
                let row = &dcols[(i * 9 + ky * 3 + kx) * area..][..area];
                for y in y0..y1 {
                    let dst = (y + ky - 1) * n;
                    dx_i[dst + x0 + kx - 1..dst + x1 + kx - 1]
                        .iter_mut()
                        .zip(&row[y * n + x0..y * n + x1])
                        .for_each(|(t, &g)| *t += g);
                }
            }
        }
    }
    dx
}

/// `out[o] = b[o] + sum_k w[o][k] * cols[k]`, each row `area` long.
fn conv_cols(cols: &[f64], w: &[f64], b: &[f64], area: usize) -> Vec<f64> {
    let (k_len, cout) = (cols.len() / area, b.len());
    assert_eq!(w.len(), cout * k_len);
    let mut out: Vec<f64> = b.iter().flat_map(|&v| std::iter::repeat_n(v, area)).collect();
    // SAFETY: every matrix is a dense row-major buffer whose length matches
    // the dimensions and strides passed.
    unsafe {
        matrixmultiply::dgemm(
            cout, k_len, area,
            1.0, w.as_ptr(), k_len as isize, 1,
            cols.as_ptr(), area as isize, 1,
            1.0, out.as_mut_ptr(), area as isize, 1,
        );
    }
    out
}

/// Gradients of [`conv_cols`]; returns the gradient of `cols`.
fn conv_cols_backward(cols: &[f64], w: &[f64], dout: &[f64], area: usize, gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let (k_len, cout) = (cols.len() / area, gb.len());
    assert_eq!(w.len(), cout * k_len);
    assert_eq!(gw.len(), cout * k_len);
    assert_eq!(dout.len(), cout * area);
    for (g, d_o) in gb.iter_mut().zip(dout.chunks_exact(area)) {
        *g += d_o.iter().sum::<f64>();
    }
    let mut dcols = vec![0.0; cols.len()];
    // SAFETY: as in `conv_cols`; the transposes only swap strides.
    unsafe {
        matrixmultiply::dgemm(
            cout, area, k_len,
            1.0, dout.as_ptr(), area as isize, 1,
            cols.as_ptr(), 1, area as isize,
            1.0, gw.as_mut_ptr(), k_len as isize, 1,
        );
        matrixmultiply::dgemm(
            k_len, cout, area,
            1.0, w.as_ptr(), 1, k_len as isize,
            dout.as_ptr(), area as isize, 1,
            0.0, dcols.as_mut_ptr(), area as isize, 1,
        );
    }
    dcols
}

/// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped). Returns
/// the pooled map and, per output cell, the flat input index of its maximum
/// (first one on ties).
fn maxpool2(x: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ph * pw);
    let mut idx = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = (f64::NEG_INFINITY, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let k = (c * h + 2 * py + dy) * w + 2 * px + dx;
                    if x[k] > best.0 {
                        best = (x[k], k);
                    }
                }
                out.push(best.0);
                idx.push(best.1);
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward(dout: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &k) in dout.iter().zip(idx) {
        dx[k] += g;
    }
    dx
}

fn channel_means(x: &[f64], channels: usize, area: usize) -> Vec<f64> {
    (0..channels).map(|c| x[c * area..(c + 1) * area].iter().sum::<f64>() / area as f64).collect()
}

/// `w · x + b` with `w` stored row-major `[out][in]`.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn dense_backward(x: &[f64], w: &[f64], dout: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[o] += g;
        let row = o * n_in..(o + 1) * n_in;
        gw[row.clone()].iter_mut().zip(x).for_each(|(t, &v)| *t += g * v);
        dx.iter_mut().zip(&w[row]).for_each(|(t, &wv)| *t += g * wv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::PairLabel;

    fn small_config() -> ModelConfig {
        ModelConfig { in_channels: 3, width: 4, embedding_dim: 8, roi_size: 6, head: HeadType::Gap }
    }

    fn random_roi(cfg: &ModelConfig, seed: u64) -> RoiFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.in_channels * cfg.roi_size * cfg.roi_size;
        RoiFeature::new(cfg.in_channels, cfg.roi_size, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sample(cfg: &ModelConfig, a: u64, b: u64, y: u8) -> PairSample {
        PairSample {
            image_id: 0,
            index_i: 0,
            index_j: 1,
            roi_i: random_roi(cfg, a),
            roi_j: random_roi(cfg, b),
            label: PairLabel::new(true, if y == 1 { 1 } else { 2 }),
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(contrastive_loss(0.0, 1, 1.0), 0.0);
        assert_eq!(contrastive_loss(1.5, 0, 1.0), 0.0);
        assert!((contrastive_loss(0.4, 0, 1.0) - 0.6).abs() < 1e-15);
        assert_eq!(contrastive_loss(0.7, 1, 1.0), 0.7);
    }

    #[test]
    fn l1_of_constant_offsets() {
        let a = vec![0.0; 50];
        let b = vec![0.02; 50];
        assert!((l1_distance(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_maps_to_origin() {
        let cfg = small_config();
        let mut m = EmbeddingModel::new(cfg, 1).unwrap();
        m.zero_head();
        assert!(m.forward(&random_roi(&cfg, 5)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = small_config();
        let m = EmbeddingModel::new(cfg, 1).unwrap();
        let bad = RoiFeature::new(3, 5, vec![0.0; 75]).unwrap();
        assert!(matches!(m.forward(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = small_config();
        let m = EmbeddingModel::new(cfg, 1).unwrap();
        let r = random_roi(&cfg, 9);
        assert_eq!(m.forward(&r).unwrap(), m.forward(&r).unwrap());
        assert_eq!(m.pair_distance(&r, &r).unwrap(), 0.0);
        let q = random_roi(&cfg, 10);
        assert_eq!(m.pair_distance(&r, &q).unwrap(), m.pair_distance(&q, &r).unwrap());
    }

    #[test]
    fn beyond_margin_has_zero_gradient() {
        let cfg = small_config();
        let mut m = EmbeddingModel::new(cfg, 1).unwrap();
        // inflate the head so the pair is far apart
        m.tensor_mut(Slots::HEAD_W).iter_mut().for_each(|w| *w *= 1e3);
        let s = sample(&cfg, 1, 2, 0);
        assert!(m.pair_distance(&s.roi_i, &s.roi_j).unwrap() > 1.0);
        assert!(m.backward(std::slice::from_ref(&s), &TrainConfig::default()).unwrap().is_zero());
    }

    #[test]
    fn duplicated_similar_pair_has_zero_gradient() {
        let cfg = small_config();
        let m = EmbeddingModel::new(cfg, 1).unwrap();
        let mut s = sample(&cfg, 1, 2, 1);
        s.roi_j = s.roi_i.clone();
        assert!(m.backward(std::slice::from_ref(&s), &TrainConfig::default()).unwrap().is_zero());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = small_config();
        let m0 = EmbeddingModel::new(cfg, 3).unwrap();
        let mut m = m0.clone();
        let samples = vec![sample(&cfg, 1, 2, 1), sample(&cfg, 3, 4, 0)];
        let tc = TrainConfig { learning_rate: 0.0, epochs: 3, ..TrainConfig::default() };
        train(&mut m, &samples, &tc).unwrap();
        assert_eq!(m.tensors(), m0.tensors());
    }

    #[test]
    fn empty_training_set_is_error() {
        let mut m = EmbeddingModel::new(small_config(), 3).unwrap();
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn distance_matrix_rules() {
        let mut dm = DistanceMatrix::new(4);
        dm.insert(3, 1, 0.5).unwrap();
        assert_eq!(dm.get(1, 3), Some(0.5));
        assert_eq!(dm.get(3, 1), Some(0.5));
        assert!(dm.insert(2, 2, 0.1).is_err());
        assert!(dm.insert(0, 2, -0.1).is_err());
        assert!(dm.insert(0, 2, f64::NAN).is_err());
        assert_eq!(dm.iter().collect::<Vec<_>>(), vec![(1, 3, 0.5)]);
    }

    #[test]
    fn conv_matches_naive() {
        let (cin, cout, n) = (2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..cin * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv_cols(&im2col3x3(&x, cin, n), &w, &b, n * n);
        for o in 0..cout {
            for y in 0..n as isize {
                for xx in 0..n as isize {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < n as isize && sx < n as isize {
                                    acc += w[((o * cin + i) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[(i * n + sy as usize) * n + sx as usize];
                                }
                            }
                        }
                    }
                    let got = out[(o * n + y as usize) * n + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
