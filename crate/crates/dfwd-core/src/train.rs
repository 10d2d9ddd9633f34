//! Training strategies and the fit loop.
//!
//! All distance-forward strategies share one skeleton: units run forward in
//! order, each unit's goodness loss produces a gradient at that unit's
//! pre-activation, and the gradient is carried into a bounded window of
//! preceding units. Gradients accumulate across windows; each parameter
//! takes exactly one Adam step per mini-batch.
//!
//! - `Greedy` — window of 1: each unit learns from its own loss only.
//! - `DfO { group_size: G }` — the top unit's loss is backpropagated exactly
//!   through the last G units; successive windows overlap, so interior
//!   units receive gradients from up to G different losses.
//! - `DfR` — the same windows, but interior units receive the top
//!   pre-activation gradient through a fixed random projection into their
//!   output space instead of the exact transposed-weight chain; only the
//!   window top runs an exact backward. The projections never train.
//! - `Backprop` — the end-to-end reference: no label embedding, a
//!   classification head on the last unit, softmax cross-entropy backward
//!   through the whole stack.
//!
//! Activation caches live only as long as the window that needs them, which
//! is what keeps training memory flat in depth.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::eval::{accuracy, rms, DecodeConfig};
use crate::layers::Delta;
use crate::loss::{unit_loss_delta, LossKind};
use crate::model::{LayerSpec, Model, Network, UnitForward};
use crate::optim::{adam_step, cosine_lr};
use crate::rng::{stream, substream, substream_indexed};
use crate::samples::{make_batch, EmbedMode, LabelEmbedding, SampleBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    DfO { group_size: usize },
    DfR { group_size: usize, feedback_scale: f64 },
    Backprop,
}

pub const DEFAULT_FEEDBACK_SCALE: f64 = 1.0;

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::DfO { .. } => "df_o",
            Strategy::DfR { .. } => "df_r",
            Strategy::Backprop => "backprop",
        }
    }

    pub fn parse(s: &str, group_size: usize, feedback_scale: f64) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "df_o" => Ok(Strategy::DfO { group_size }),
            "df_r" => Ok(Strategy::DfR { group_size, feedback_scale }),
            "backprop" => Ok(Strategy::Backprop),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (expected greedy | df_o | df_r | backprop)"
            ))),
        }
    }

    /// Window length actually used for a network of `depth` units.
    pub fn effective_group(&self, depth: usize) -> usize {
        let g = match self {
            Strategy::Greedy => 1,
            Strategy::DfO { group_size } | Strategy::DfR { group_size, .. } => *group_size,
            Strategy::Backprop => depth,
        };
        g.clamp(1, depth.max(1))
    }

    pub fn is_local(&self) -> bool {
        !matches!(self, Strategy::Backprop)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub n_negs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Std of injected gradient noise, relative to each tensor's gradient
    /// RMS. 0 disables injection.
    pub grad_noise_sigma: f64,
    /// Random shift/flip augmentation on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::DfO { group_size: 2 },
            loss: LossKind::default_df(),
            n_negs: 1,
            epochs: 10,
            batch_size: 100,
            lr: 1e-3,
            seed: 0,
            grad_noise_sigma: 0.0,
            augment: false,
        }
    }
}

/// Fixed random feedback projections for `DfR`: one matrix per
/// (window-top, interior-unit) pair, mapping the top unit's pre-activation
/// gradient into the interior unit's output space. Entries are drawn
/// uniform(−s, s) with s = feedback_scale / √(interior output width) — the
/// width the projected signal fans into — and are never written again.
pub struct Feedback<T: Scalar> {
    mats: BTreeMap<(usize, usize), Tensor<T>>,
}

impl<T: Scalar> Feedback<T> {
    pub fn build(
        model: &Model<T>,
        group: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut mats = BTreeMap::new();
        for j in 0..model.depth() {
            let d_top = model.unit_goodness_width(j)?;
            for i in j.saturating_sub(group - 1)..j {
                let d_out = model.unit_output_width(i)?;
                let s = scale / (d_out as f64).sqrt();
                let data: Vec<T> = (0..d_top * d_out)
                    .map(|_| T::from_f64(rng.random_range(-s..s)))
                    .collect();
                mats.insert((j, i), Tensor::from_vec(&[d_top, d_out], data)?);
            }
        }
        Ok(Feedback { mats })
    }

    pub fn get(&self, top: usize, interior: usize) -> Result<&Tensor<T>> {
        self.mats.get(&(top, interior)).ok_or_else(|| {
            Error::internal(format!("no feedback matrix for window {top}, unit {interior}"))
        })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn elems(&self) -> usize {
        self.mats.values().map(|t| t.len()).sum()
    }

    /// Content digest — lets tests prove the matrices never change.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for ((j, i), t) in &self.mats {
            h.update((*j as u64).to_le_bytes());
            h.update((*i as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Per-mini-batch statistics.
pub struct StepStats {
    /// Mean loss over windows (distance-forward) or the cross-entropy value
    /// (backprop).
    pub loss: f64,
    pub per_unit_loss: Vec<f64>,
    pub per_unit_separation: Vec<f64>,
}

pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub per_unit_separation: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_secs: f64,
}

pub struct FitResult {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub wall_secs: f64,
}

pub struct Trainer<T: Scalar> {
    pub net: Network<T>,
    pub cfg: TrainConfig,
    pub feedback: Option<Feedback<T>>,
    pub global_step: u64,
    pub total_steps: u64,
    /// Non-fatal configuration adjustments made at construction.
    pub warnings: Vec<String>,
}

impl<T: Scalar> Trainer<T> {
    /// `n_train` sizes the cosine learning-rate schedule.
    pub fn new(net: Network<T>, cfg: TrainConfig, n_train: usize) -> Result<Self> {
        let depth = net.model.depth();
        let mut warnings = Vec::new();
        let requested = match cfg.strategy {
            Strategy::DfO { group_size } | Strategy::DfR { group_size, .. } => group_size,
            _ => 1,
        };
        if requested > depth {
            warnings.push(format!(
                "group size {requested} exceeds network depth {depth}; clamped to {depth}"
            ));
        }
        if requested == 0 {
            return Err(Error::config("group size must be at least 1"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if cfg.strategy.is_local() && cfg.n_negs + 1 > net.num_classes {
            return Err(Error::config(format!(
                "{} negatives need at least {} classes",
                cfg.n_negs,
                cfg.n_negs + 1
            )));
        }
        let steps_per_epoch = n_train.div_ceil(cfg.batch_size) as u64;
        let total_steps = (cfg.epochs as u64 * steps_per_epoch).max(1);
        let feedback = match cfg.strategy {
            Strategy::DfR { feedback_scale, .. } => {
                let g = cfg.strategy.effective_group(depth);
                let mut rng = substream(cfg.seed, stream::FEEDBACK);
                Some(Feedback::build(&net.model, g, feedback_scale, &mut rng)?)
            }
            _ => None,
        };
        Ok(Trainer { net, cfg, feedback, global_step: 0, total_steps, warnings })
    }

    fn lr(&self) -> Result<T> {
        Ok(T::from_f64(cosine_lr(
            self.cfg.lr,
            self.global_step,
            self.total_steps,
        )?))
    }

    /// One distance-forward mini-batch: stream units forward, train every
    /// window, then apply one optimizer step.
    pub fn step_df(&mut self, batch: &SampleBatch<T>) -> Result<StepStats> {
        if self.cfg.strategy == Strategy::Backprop {
            return Err(Error::config("step_df called with the backprop strategy"));
        }
        let depth = self.net.model.depth();
        let g = self.cfg.strategy.effective_group(depth);
        let mut window: VecDeque<UnitForward<T>> = VecDeque::with_capacity(g);
        let mut cur = Arc::new(batch.x.clone());
        let mut per_unit_loss = Vec::with_capacity(depth);
        let mut per_unit_sep = Vec::with_capacity(depth);
        for j in 0..depth {
            // evict before the next forward so at most G units' caches are
            // ever alive — this bound is what the memory profiler accounts
            if window.len() == g {
                window.pop_front();
            }
            let fwd = self.net.model.unit_forward_train(j, cur)?;
            cur = fwd.out.clone();
            window.push_back(fwd);
            let top = window.back().expect("window is nonempty");
            let (lout, dv) = unit_loss_delta(&self.cfg.loss, &top.v, batch.n_negs)?;
            per_unit_loss.push(lout.loss);
            per_unit_sep.push(lout.separation());
            match self.cfg.strategy {
                Strategy::Greedy | Strategy::DfO { .. } => {
                    // exact chain through the whole window
                    let mut delta = self.net.model.unit_backward_from_core(top, dv)?;
                    for fwd_i in window.iter().rev().skip(1) {
                        delta = self.net.model.unit_backward_from_output(fwd_i, delta)?;
                    }
                    if j == 0 {
                        if let Some(emb) = &mut self.net.embedding {
                            emb.accumulate_grad(&delta.t, batch)?;
                        }
                    }
                }
                Strategy::DfR { .. } => {
                    // interior units: fixed random projection of the top
                    // pre-activation gradient into each unit's output space,
                    // then that unit's own exact single-unit backward
                    let feedback = self
                        .feedback
                        .as_ref()
                        .ok_or_else(|| Error::internal("feedback matrices missing"))?;
                    let rows = dv.t.dim0();
                    let d_top = dv.t.row_len();
                    let dflat = dv.t.clone().reshape(&[rows, d_top])?;
                    for fwd_i in window.iter().take(window.len() - 1) {
                        let f = feedback.get(j, fwd_i.unit)?;
                        let dh = match &dv.active {
                            Some(active) => {
                                let gathered = dflat.gather_rows(active);
                                let dh_a = gathered.matmul(f)?;
                                let mut dh = Tensor::zeros(&[rows, f.shape()[1]]);
                                dh.scatter_rows_add(active, &dh_a);
                                dh
                            }
                            None => dflat.matmul(f)?,
                        };
                        let mut shape = vec![rows];
                        shape.extend_from_slice(&fwd_i.out.shape()[1..]);
                        let di = Delta { t: dh.reshape(&shape)?, active: dv.active.clone() };
                        // input-side delta of an interior unit is unused: the
                        // projection replaces the cross-unit chain entirely
                        let _ = self.net.model.unit_backward_from_output(fwd_i, di)?;
                    }
                    let top = window.back().expect("window is nonempty");
                    let din = self.net.model.unit_backward_from_core(top, dv)?;
                    if j == 0 {
                        if let Some(emb) = &mut self.net.embedding {
                            emb.accumulate_grad(&din.t, batch)?;
                        }
                    }
                }
                Strategy::Backprop => unreachable!(),
            }
        }
        self.apply_updates()?;
        let loss = per_unit_loss.iter().sum::<f64>() / depth as f64;
        Ok(StepStats { loss, per_unit_loss, per_unit_separation: per_unit_sep })
    }

    /// One end-to-end mini-batch for the backprop baseline: plain images,
    /// no label expansion, softmax cross-entropy at the head.
    pub fn step_bp(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<StepStats> {
        if self.cfg.strategy != Strategy::Backprop {
            return Err(Error::config("step_bp called without the backprop strategy"));
        }
        let depth = self.net.model.depth();
        let mut fwds = Vec::with_capacity(depth);
        let mut cur = Arc::new(images.clone());
        for j in 0..depth {
            let fwd = self.net.model.unit_forward_train(j, cur)?;
            cur = fwd.out.clone();
            fwds.push(fwd);
        }
        let rows = cur.dim0();
        let cols = cur.len() / rows;
        let flat = cur.as_ref().clone().reshape(&[rows, cols])?;
        let head = self
            .net
            .head
            .as_mut()
            .ok_or_else(|| Error::config("backprop strategy needs a classification head"))?;
        let logits = head.forward(&flat)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let dflat = head.backward(&flat, Delta::dense(dlogits))?;
        let mut shape = vec![rows];
        shape.extend_from_slice(&self.net.model.output_shape);
        let mut delta = Delta::dense(dflat.t.reshape(&shape)?);
        for fwd in fwds.iter().rev() {
            delta = self.net.model.unit_backward_from_output(fwd, delta)?;
        }
        self.apply_updates()?;
        Ok(StepStats { loss, per_unit_loss: vec![], per_unit_separation: vec![] })
    }

    /// Optional gradient-noise injection, then one Adam step per parameter,
    /// then the step counter advances. A non-finite gradient aborts before
    /// any parameter is touched by its update.
    fn apply_updates(&mut self) -> Result<()> {
        let lr = self.lr()?;
        if self.cfg.grad_noise_sigma > 0.0 {
            let sigma = self.cfg.grad_noise_sigma;
            let mut rng =
                substream_indexed(self.cfg.seed, stream::GRAD_NOISE, self.global_step);
            for p in self.net.params_mut() {
                let scale = sigma * rms(p.grad.data());
                if scale > 0.0 {
                    for gv in p.grad.data_mut() {
                        let n: f64 = rng.sample(StandardNormal);
                        *gv = T::from_f64(gv.to_f64() + scale * n);
                    }
                }
            }
        }
        for p in self.net.params_mut() {
            adam_step(p, lr)?;
        }
        self.global_step += 1;
        Ok(())
    }

    /// Run the full training schedule over a prepared dataset, optionally
    /// measuring test accuracy each epoch.
    pub fn fit(
        &mut self,
        train: &PreparedData<T>,
        test: Option<&PreparedData<T>>,
    ) -> Result<FitResult> {
        self.fit_with(train, test, |_| {})
    }

    /// [`fit`] with a per-epoch observer, for callers that report progress
    /// while a long run is still going.
    pub fn fit_with(
        &mut self,
        train: &PreparedData<T>,
        test: Option<&PreparedData<T>>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<FitResult> {
        let n = train.labels.len();
        if n == 0 {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        let t0 = Instant::now();
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let te = Instant::now();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut substream_indexed(self.cfg.seed, stream::SHUFFLE, epoch as u64));
            let mut loss_sum = 0.0;
            let mut sep_sum = vec![0.0f64; self.net.model.depth()];
            let mut steps = 0usize;
            for chunk in idx.chunks(self.cfg.batch_size) {
                let mut images = train.images.gather_rows(chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                if self.cfg.augment {
                    let mut rng = substream_indexed(
                        self.cfg.seed,
                        stream::AUGMENT,
                        self.global_step,
                    );
                    augment_shift_flip(&mut images, 2, &mut rng);
                }
                let stats = if self.cfg.strategy == Strategy::Backprop {
                    self.step_bp(&images, &labels)?
                } else {
                    let emb = self
                        .net
                        .embedding
                        .as_ref()
                        .ok_or_else(|| Error::config("distance-forward training needs a label embedding"))?;
                    let all: Vec<usize> = (0..labels.len()).collect();
                    let mut rng = substream_indexed(
                        self.cfg.seed,
                        stream::NEGATIVES,
                        self.global_step,
                    );
                    let batch =
                        make_batch(&images, &labels, &all, self.cfg.n_negs, emb, &mut rng)?;
                    self.step_df(&batch)?
                };
                loss_sum += stats.loss;
                for (s, v) in sep_sum.iter_mut().zip(&stats.per_unit_separation) {
                    *s += v;
                }
                steps += 1;
            }
            let test_accuracy = match test {
                Some(td) => Some(accuracy(
                    &self.net,
                    &td.images,
                    &td.labels,
                    DecodeConfig::default(),
                )?),
                None => None,
            };
            let stats = EpochStats {
                epoch,
                mean_loss: loss_sum / steps.max(1) as f64,
                per_unit_separation: sep_sum
                    .iter()
                    .map(|s| s / steps.max(1) as f64)
                    .collect(),
                test_accuracy,
                wall_secs: te.elapsed().as_secs_f64(),
            };
            on_epoch(&stats);
            epochs.push(stats);
        }
        Ok(FitResult {
            epochs,
            steps: self.global_step as usize,
            wall_secs: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Numerically stable softmax cross-entropy, mean over rows. Returns the
/// loss and dL/dlogits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let &[rows, k] = logits.shape() else {
        return Err(Error::dim("cross entropy", logits.shape(), &[labels.len(), 0]));
    };
    if rows != labels.len() {
        return Err(Error::dim("cross entropy", logits.shape(), &[labels.len(), k]));
    }
    let mut dlogits = Tensor::zeros(&[rows, k]);
    let mut loss = 0.0f64;
    for r in 0..rows {
        let row = logits.row(r);
        let y = labels[r];
        if y >= k {
            return Err(Error::config(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[y].to_f64() - m);
        for (c, e) in exps.iter().enumerate() {
            let p = e / z;
            let grad = (p - if c == y { 1.0 } else { 0.0 }) / rows as f64;
            dlogits.data_mut()[r * k + c] = T::from_f64(grad);
        }
    }
    Ok((loss / rows as f64, dlogits))
}

/// Random ±`max_shift` pixel translation (zero-padded) and horizontal flip
/// (p = 0.5), independently per image.
pub fn augment_shift_flip<T: Scalar>(
    images: &mut Tensor<T>,
    max_shift: isize,
    rng: &mut impl Rng,
) {
    let &[n, c, h, w] = images.shape() else {
        return;
    };
    let plane = h * w;
    let shift = max_shift as i64;
    let mut scratch = vec![T::ZERO; c * plane];
    for r in 0..n {
        let dy = rng.random_range(-shift..=shift) as isize;
        let dx = rng.random_range(-shift..=shift) as isize;
        let flip = rng.random_bool(0.5);
        let row = &mut images.data_mut()[r * c * plane..(r + 1) * c * plane];
        scratch.copy_from_slice(row);
        for v in row.iter_mut() {
            *v = T::ZERO;
        }
        for ch in 0..c {
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let sx0 = x - dx;
                    if sx0 < 0 || sx0 >= w as isize {
                        continue;
                    }
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    row[ch * plane + (y as usize) * w + x as usize] =
                        scratch[ch * plane + (sy as usize) * w + sx as usize];
                }
            }
        }
    }
}

/// Build the trainable artifact for a strategy: distance-forward nets get a
/// label embedding sized to one input channel; the backprop baseline gets a
/// linear classification head instead. Initialization order is fixed
/// (embedding, then body layers, then head) so a seed pins every weight.
pub fn build_network<T: Scalar>(
    arch: &[LayerSpec],
    image_shape: &[usize],
    num_classes: usize,
    strategy: &Strategy,
    embed: EmbedMode,
    seed: u64,
) -> Result<Network<T>> {
    let &[c, h, w] = image_shape else {
        return Err(Error::dim("build_network", image_shape, &[0, 0, 0]));
    };
    let mut rng = substream(seed, stream::INIT);
    if *strategy == Strategy::Backprop {
        let model = Model::build(arch.to_vec(), image_shape, &mut rng)?;
        let flat: usize = model.output_shape.iter().product();
        let head = crate::layers::Dense::new(flat, num_classes, &mut rng);
        return Ok(Network { model, embedding: None, head: Some(head), num_classes });
    }
    let emb = LabelEmbedding::new(num_classes, h, w, embed, &mut rng);
    let in_shape = [emb.encoded_channels(c), h, w];
    if embed == EmbedMode::PixelReplace && num_classes >= c * h * w {
        return Err(Error::config(format!(
            "pixel replacement needs more than {num_classes} input values"
        )));
    }
    let model = Model::build(arch.to_vec(), &in_shape, &mut rng)?;
    Ok(Network { model, embedding: Some(emb), head: None, num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PreparedData;
    use crate::model::parse_arch;

    fn toy_data(n: usize, seed: u64) -> PreparedData<f64> {
        // 4-class toy: class k lights up quadrant k of a 4x4 image, plus
        // noise — linearly separable, learnable in a few epochs.
        let mut rng = substream(seed, stream::SHUFFLE);
        let mut images = Tensor::zeros(&[n, 1, 4, 4]);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.random_range(0..4usize);
            let (qy, qx) = (k / 2, k % 2);
            for y in 0..2 {
                for x in 0..2 {
                    let idx = i * 16 + (qy * 2 + y) * 4 + (qx * 2 + x);
                    images.data_mut()[idx] = 0.8 + rng.random_range(-0.1..0.1);
                }
            }
            for v in images.data_mut()[i * 16..(i + 1) * 16].iter_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(0.0..0.1);
                }
            }
            labels.push(k);
        }
        PreparedData { images, labels }
    }

    fn toy_net(strategy: &Strategy, seed: u64) -> Network<f64> {
        build_network(
            &parse_arch("mlp(16,16,16)").unwrap(),
            &[1, 4, 4],
            4,
            strategy,
            EmbedMode::LearnableChannel,
            seed,
        )
        .unwrap()
    }

    fn quick_cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            n_negs: 2,
            epochs: 6,
            batch_size: 32,
            lr: 0.01,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn softmax_ce_matches_finite_differences() {
        let logits =
            Tensor::from_vec(&[2, 3], vec![0.5, -0.2, 1.0, 2.0, 0.0, -1.0]).unwrap();
        let labels = [2usize, 0];
        let (_, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data_mut()[j] += h;
            lm.data_mut()[j] -= h;
            let fp = softmax_cross_entropy(&lp, &labels).unwrap().0;
            let fm = softmax_cross_entropy(&lm, &labels).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - d.data()[j]).abs() < 1e-8, "logit {j}: {fd} vs {}", d.data()[j]);
        }
        // gradient rows sum to zero
        for r in 0..2 {
            let s: f64 = d.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_is_stable_at_large_logits() {
        let logits = Tensor::from_vec(&[1, 2], vec![1e4, -1e4]).unwrap();
        let (loss, d) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(d.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_strategies_learn_the_toy_task() {
        let train = toy_data(256, 1);
        let test = toy_data(128, 2);
        for strategy in [
            Strategy::Greedy,
            Strategy::DfO { group_size: 2 },
            Strategy::DfR { group_size: 2, feedback_scale: DEFAULT_FEEDBACK_SCALE },
            Strategy::Backprop,
        ] {
            let net = toy_net(&strategy, 3);
            let mut trainer = Trainer::new(net, quick_cfg(strategy), 256).unwrap();
            let fit = trainer.fit(&train, Some(&test)).unwrap();
            let acc = fit.epochs.last().unwrap().test_accuracy.unwrap();
            assert!(
                acc >= 0.85,
                "{} reached only {acc} on the quadrant toy task",
                strategy.name()
            );
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let train = toy_data(128, 5);
        let run = || {
            let net = toy_net(&Strategy::DfO { group_size: 2 }, 11);
            let mut tr =
                Trainer::new(net, quick_cfg(Strategy::DfO { group_size: 2 }), 128).unwrap();
            tr.fit(&train, None).unwrap();
            let mut weights = Vec::new();
            for p in tr.net.params_mut() {
                weights.extend(p.value.data().iter().map(|v| v.to_bits()));
            }
            weights
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let train = toy_data(32, 9);
        let net = toy_net(&Strategy::Greedy, 13);
        let before: Vec<u64> = {
            let mut n2 = toy_net(&Strategy::Greedy, 13);
            n2.params_mut()
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        let mut cfg = quick_cfg(Strategy::Greedy);
        cfg.epochs = 0;
        let mut tr = Trainer::new(net, cfg, 32).unwrap();
        tr.fit(&train, None).unwrap();
        let after: Vec<u64> = tr
            .net
            .params_mut()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn embedding_receives_gradient_only_in_learnable_mode() {
        let train = toy_data(64, 3);
        for (mode, expect_grad) in
            [(EmbedMode::LearnableChannel, true), (EmbedMode::PixelReplace, false)]
        {
            let net = build_network::<f64>(
                &parse_arch("mlp(12,12)").unwrap(),
                &[1, 4, 4],
                4,
                &Strategy::Greedy,
                mode,
                5,
            )
            .unwrap();
            let mut cfg = quick_cfg(Strategy::Greedy);
            cfg.epochs = 1;
            let before = net.embedding.as_ref().unwrap().table.value.data().to_vec();
            let mut tr = Trainer::new(net, cfg, 64).unwrap();
            tr.fit(&train, None).unwrap();
            let after = tr.net.embedding.as_ref().unwrap().table.value.data();
            if expect_grad {
                assert_ne!(before, after.to_vec(), "embedding should train");
            } else {
                assert_eq!(before, after.to_vec(), "pixel-replace table must stay put");
            }
        }
    }

    #[test]
    fn feedback_matrices_never_change_during_training() {
        let train = toy_data(96, 8);
        let strategy = Strategy::DfR { group_size: 3, feedback_scale: 1.0 };
        let net = toy_net(&strategy, 21);
        let mut tr = Trainer::new(net, quick_cfg(strategy), 96).unwrap();
        let before = tr.feedback.as_ref().unwrap().digest();
        tr.fit(&train, None).unwrap();
        let after = tr.feedback.as_ref().unwrap().digest();
        assert_eq!(before, after);
        // one matrix per (top, interior) pair: windows of 3 over 3 units
        // give (1,0),(2,0),(2,1) — wait, (2,0) and (2,1) plus (1,0)
        assert_eq!(tr.feedback.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn group_size_clamps_with_warning() {
        let net = toy_net(&Strategy::DfO { group_size: 99 }, 2);
        let tr =
            Trainer::new(net, quick_cfg(Strategy::DfO { group_size: 99 }), 64).unwrap();
        assert_eq!(tr.warnings.len(), 1);
        assert!(tr.warnings[0].contains("clamped"));
        assert!(Trainer::new(
            toy_net(&Strategy::DfO { group_size: 0 }, 2),
            quick_cfg(Strategy::DfO { group_size: 0 }),
            64
        )
        .is_err());
    }

    #[test]
    fn too_many_negatives_for_class_count_is_rejected() {
        let net = toy_net(&Strategy::Greedy, 2);
        let mut cfg = quick_cfg(Strategy::Greedy);
        cfg.n_negs = 4; // only 4 classes
        assert!(Trainer::new(net, cfg, 64).is_err());
    }

    #[test]
    fn gradient_noise_changes_the_trajectory_but_stays_finite() {
        let train = toy_data(64, 4);
        let weights_with = |sigma: f64| {
            let net = toy_net(&Strategy::Greedy, 31);
            let mut cfg = quick_cfg(Strategy::Greedy);
            cfg.epochs = 2;
            cfg.grad_noise_sigma = sigma;
            let mut tr = Trainer::new(net, cfg, 64).unwrap();
            tr.fit(&train, None).unwrap();
            let mut out = Vec::new();
            for p in tr.net.params_mut() {
                assert!(p.value.data().iter().all(|v| v.is_finite()));
                out.extend(p.value.data().iter().map(|v| v.to_bits()));
            }
            out
        };
        let clean = weights_with(0.0);
        let noisy = weights_with(0.5);
        assert_ne!(clean, noisy);
        // and noisy runs are themselves reproducible
        assert_eq!(weights_with(0.5), weights_with(0.5));
    }

    #[test]
    fn augmentation_shifts_and_flips_deterministically() {
        let mut a = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect())
            .unwrap();
        let mut b = a.clone();
        augment_shift_flip(&mut a, 1, &mut substream(3, stream::AUGMENT));
        augment_shift_flip(&mut b, 1, &mut substream(3, stream::AUGMENT));
        assert_eq!(a.data(), b.data());
        // zero shift bound + no flip possible only when rng says so; with
        // max_shift 0 the only change can be a flip
        let mut c = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        augment_shift_flip(&mut c, 0, &mut substream(4, stream::AUGMENT));
        assert!(c.data() == &[1.0, 2.0, 3.0] || c.data() == &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn window_cache_is_bounded_by_group_size() {
        // indirect but load-bearing: deeper nets at G=2 must not hold more
        // than two units' caches — we verify via the window deque length by
        // construction (the deque pops when it exceeds G), so here we just
        // check training still works at depth 5 with G=2 and G=5 agreeing
        // on nothing structural — this is a smoke test that deep windows
        // stream correctly.
        let train = toy_data(64, 6);
        for g in [2usize, 5] {
            let strategy = Strategy::DfO { group_size: g };
            let net = build_network::<f64>(
                &parse_arch("mlp(10,10,10,10,10)").unwrap(),
                &[1, 4, 4],
                4,
                &strategy,
                EmbedMode::LearnableChannel,
                9,
            )
            .unwrap();
            let mut cfg = quick_cfg(strategy);
            cfg.epochs = 1;
            let mut tr = Trainer::new(net, cfg, 64).unwrap();
            tr.fit(&train, None).unwrap();
        }
    }
}
