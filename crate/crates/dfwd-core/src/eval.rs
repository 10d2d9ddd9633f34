//! Inference-time machinery: goodness decoding, input-noise models, and
//! post-training weight quantization.

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

/// Upper bound on candidate rows per forward chunk while decoding.
const DECODE_CHUNK_ROWS: usize = 4096;

/// Which units contribute goodness to the decode score. The first unit is
/// skipped by default: its goodness is dominated by raw input energy and
/// adds noise rather than signal.
#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    pub skip_units: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { skip_units: 1 }
    }
}

impl DecodeConfig {
    fn unit_range(&self, depth: usize) -> std::ops::Range<usize> {
        let skip = self.skip_units.min(depth.saturating_sub(1));
        skip..depth
    }
}

/// Per-image, per-class decode scores: each candidate label is encoded into
/// the image, the network runs in inference mode, and the configured units'
/// goodness values are summed. All K candidates of an image travel in one
/// forward batch.
pub fn decode_scores<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    cfg: DecodeConfig,
) -> Result<Vec<Vec<f64>>> {
    let emb = net
        .embedding
        .as_ref()
        .ok_or_else(|| Error::config("goodness decoding needs a label embedding"))?;
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::dim("decode", images.shape(), &[0, 0, 0, 0]));
    };
    let k = net.num_classes;
    let units = cfg.unit_range(net.model.depth());
    let chunk = (DECODE_CHUNK_ROWS / k).max(1);
    let mut scores = Vec::with_capacity(n);
    let row_sz = emb.encoded_channels(c) * h * w;
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let mut x = Tensor::zeros(&[m * k, emb.encoded_channels(c), h, w]);
        for i in 0..m {
            let img = Tensor::from_vec(&[c, h, w], images.row(start + i).to_vec())?;
            for label in 0..k {
                let cand = emb.make_positive(&img, label)?;
                let r = i * k + label;
                x.data_mut()[r * row_sz..(r + 1) * row_sz].copy_from_slice(cand.data());
            }
        }
        let (goods, _) = net.model.forward_eval_goodness(&x)?;
        for i in 0..m {
            let mut per_class = vec![0.0f64; k];
            for u in units.clone() {
                for (label, s) in per_class.iter_mut().enumerate() {
                    *s += goods[u][i * k + label];
                }
            }
            scores.push(per_class);
        }
    }
    Ok(scores)
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predict labels. Distance-forward networks decode by summed goodness over
/// candidate labels; the end-to-end baseline reads its classification head.
/// Ties resolve to the lowest label.
pub fn decode<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    cfg: DecodeConfig,
) -> Result<Vec<usize>> {
    if let Some(head) = &net.head {
        let out = net.model.forward_eval(images)?;
        let (rows, cols) = (out.dim0(), out.len() / out.dim0());
        let logits = head.forward(&out.reshape(&[rows, cols])?)?;
        return Ok((0..logits.dim0())
            .map(|r| {
                let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64()).collect();
                argmax_lowest(&row)
            })
            .collect());
    }
    Ok(decode_scores(net, images, cfg)?
        .iter()
        .map(|s| argmax_lowest(s))
        .collect())
}

/// Fraction of images whose decoded label matches.
pub fn accuracy<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: DecodeConfig,
) -> Result<f64> {
    let pred = decode(net, images, cfg)?;
    if pred.len() != labels.len() {
        return Err(Error::dim("accuracy", &[pred.len()], &[labels.len()]));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Decode accuracy using each unit's goodness alone — shows where in the
/// stack label information lives.
pub fn per_unit_accuracy<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let depth = net.model.depth();
    let scores_all: Vec<Vec<Vec<f64>>> = per_unit_scores(net, images)?;
    let mut accs = Vec::with_capacity(depth);
    for per_image in scores_all {
        let hits = per_image
            .iter()
            .zip(labels)
            .filter(|(s, &l)| argmax_lowest(s) == l)
            .count();
        accs.push(hits as f64 / labels.len() as f64);
    }
    Ok(accs)
}

/// Per-unit goodness separation (mean positive-sample goodness minus mean
/// negative-sample goodness) on held-out data, inference mode. Negatives are
/// drawn deterministically from `seed`, one expanded chunk at a time so the
/// working set stays bounded.
pub fn per_unit_separation<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    n_negs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let emb = net
        .embedding
        .as_ref()
        .ok_or_else(|| Error::config("goodness separation needs a label embedding"))?;
    if n_negs == 0 {
        return Err(Error::config("separation needs at least one negative per sample"));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InsufficientData("no samples to measure separation on".into()));
    }
    let depth = net.model.depth();
    let mut sum_pos = vec![0.0f64; depth];
    let mut sum_neg = vec![0.0f64; depth];
    let mut rng = crate::rng::substream(seed, crate::rng::stream::NEGATIVES);
    let chunk = (DECODE_CHUNK_ROWS / (1 + n_negs)).max(1);
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let idx: Vec<usize> = (start..start + m).collect();
        let batch = crate::samples::make_batch(images, labels, &idx, n_negs, emb, &mut rng)?;
        let (goods, _) = net.model.forward_eval_goodness(&batch.x)?;
        for (u, g) in goods.iter().enumerate() {
            for i in 0..m {
                sum_pos[u] += g[i * (1 + n_negs)];
                for k in 0..n_negs {
                    sum_neg[u] += g[i * (1 + n_negs) + 1 + k];
                }
            }
        }
    }
    Ok((0..depth)
        .map(|u| sum_pos[u] / n as f64 - sum_neg[u] / (n * n_negs) as f64)
        .collect())
}

fn per_unit_scores<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let emb = net
        .embedding
        .as_ref()
        .ok_or_else(|| Error::config("goodness decoding needs a label embedding"))?;
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::dim("decode", images.shape(), &[0, 0, 0, 0]));
    };
    let k = net.num_classes;
    let depth = net.model.depth();
    let chunk = (DECODE_CHUNK_ROWS / k).max(1);
    let row_sz = emb.encoded_channels(c) * h * w;
    let mut out = vec![Vec::with_capacity(n); depth];
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let mut x = Tensor::zeros(&[m * k, emb.encoded_channels(c), h, w]);
        for i in 0..m {
            let img = Tensor::from_vec(&[c, h, w], images.row(start + i).to_vec())?;
            for label in 0..k {
                let cand = emb.make_positive(&img, label)?;
                let r = i * k + label;
                x.data_mut()[r * row_sz..(r + 1) * row_sz].copy_from_slice(cand.data());
            }
        }
        let (goods, _) = net.model.forward_eval_goodness(&x)?;
        for (u, unit_scores) in out.iter_mut().enumerate() {
            for i in 0..m {
                let per_class: Vec<f64> =
                    (0..k).map(|label| goods[u][i * k + label]).collect();
                unit_scores.push(per_class);
            }
        }
    }
    Ok(out)
}

/// Photon-count noise: each pixel p (in [0,1]) is replaced by a Poisson draw
/// with rate p·λ, rescaled by 1/λ and clamped to [0,1]. Smaller λ = noisier.
pub fn poisson_noise<T: Scalar>(images: &mut Tensor<T>, lambda: f64, rng: &mut impl Rng) {
    for v in images.data_mut() {
        let rate = v.to_f64().max(0.0) * lambda;
        let draw = if rate > 0.0 {
            Poisson::new(rate).expect("rate > 0").sample(rng)
        } else {
            0.0
        };
        *v = T::from_f64((draw / lambda).clamp(0.0, 1.0));
    }
}

/// Salt-and-pepper: each spatial position is corrupted with probability p;
/// a corrupted position gets an independent 0-or-1 coin per channel.
pub fn impulse_noise<T: Scalar>(images: &mut Tensor<T>, p: f64, rng: &mut impl Rng) {
    let &[n, c, h, w] = images.shape() else {
        return;
    };
    let plane = h * w;
    for r in 0..n {
        for s in 0..plane {
            if rng.random_bool(p) {
                for ch in 0..c {
                    let val = if rng.random_bool(0.5) { T::ONE } else { T::ZERO };
                    images.data_mut()[(r * c + ch) * plane + s] = val;
                }
            }
        }
    }
}

/// Quantize all dense and conv weight matrices to `bits`-bit symmetric
/// grids: Δ = max|w| / (2^{bits−1} − 1), each weight snapped to the nearest
/// multiple of Δ. Biases, batch-norm parameters, and the label embedding
/// stay full precision. Idempotent: grid points map to themselves.
pub fn quantize_weights<T: Scalar>(net: &mut Network<T>, bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::config(format!(
            "quantization bits must be in [2, 16], got {bits}"
        )));
    }
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let quantize = |t: &mut Tensor<T>| {
        let maxabs = t
            .data()
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0f64, f64::max);
        let delta = if maxabs == 0.0 { 1.0 } else { maxabs / levels };
        for v in t.data_mut() {
            *v = T::from_f64((v.to_f64() / delta).round() * delta);
        }
    };
    for layer in &mut net.model.layers {
        match layer {
            Layer::Dense(d) => quantize(&mut d.w.value),
            Layer::Conv2d(c) => quantize(&mut c.w.value),
            _ => {}
        }
    }
    if let Some(h) = &mut net.head {
        quantize(&mut h.w.value);
    }
    Ok(())
}

/// RMS of a slice in f64 (0 for empty input).
pub fn rms<T: Scalar>(data: &[T]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let ss: f64 = data.iter().map(|v| v.to_f64() * v.to_f64()).sum();
    (ss / data.len() as f64).sqrt()
}

/// Scale noise-level grids used by the robustness sweeps, mildest first.
pub mod levels {
    /// Gradient-noise multipliers σ (std of injected noise relative to
    /// per-tensor gradient RMS).
    pub const GRAD_NOISE_SIGMA: [f64; 5] = [0.1, 0.25, 0.5, 1.0, 2.0];
    /// Poisson photon budgets λ — smaller is noisier.
    pub const POISSON_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
    /// Impulse corruption probabilities.
    pub const IMPULSE_P: [f64; 5] = [0.01, 0.03, 0.06, 0.1, 0.17];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_arch, Model};
    use crate::rng::{stream, substream};
    use crate::samples::{EmbedMode, LabelEmbedding};

    fn tiny_net(seed: u64) -> Network<f64> {
        let mut rng = substream(seed, stream::INIT);
        let emb = LabelEmbedding::new(4, 3, 3, EmbedMode::LearnableChannel, &mut rng);
        let model =
            Model::build(parse_arch("mlp(8,6)").unwrap(), &[2, 3, 3], &mut rng).unwrap();
        Network { model, embedding: Some(emb), head: None, num_classes: 4 }
    }

    #[test]
    fn decode_scores_match_manual_candidate_forward() {
        let net = tiny_net(3);
        let images = Tensor::from_vec(
            &[2, 1, 3, 3],
            (0..18).map(|v| v as f64 / 18.0).collect(),
        )
        .unwrap();
        let scores = decode_scores(&net, &images, DecodeConfig::default()).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].len(), 4);
        // manual: image 1, label 2 — skip unit 0, sum unit 1 goodness
        let emb = net.embedding.as_ref().unwrap();
        let img = Tensor::from_vec(&[1, 3, 3], images.row(1).to_vec()).unwrap();
        let cand = emb.make_positive(&img, 2).unwrap();
        let one = cand.reshape(&[1, 2, 3, 3]).unwrap();
        let (goods, _) = net.model.forward_eval_goodness(&one).unwrap();
        assert!((scores[1][2] - goods[1][0]).abs() < 1e-9);
    }

    #[test]
    fn decode_is_deterministic_and_ties_break_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[5.0]), 0);
        let net = tiny_net(7);
        let images = Tensor::full(&[3, 1, 3, 3], 0.2);
        let a = decode(&net, &images, DecodeConfig::default()).unwrap();
        let b = decode(&net, &images, DecodeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_counts_matches() {
        let net = tiny_net(11);
        let images = Tensor::full(&[4, 1, 3, 3], 0.5);
        let pred = decode(&net, &images, DecodeConfig::default()).unwrap();
        // test accuracy against the prediction itself — must be 1.0
        let acc = accuracy(&net, &images, &pred, DecodeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
        let wrong: Vec<usize> = pred.iter().map(|&p| (p + 1) % 4).collect();
        let acc = accuracy(&net, &images, &wrong, DecodeConfig::default()).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn per_unit_accuracy_has_one_entry_per_unit() {
        let net = tiny_net(13);
        let images = Tensor::full(&[5, 1, 3, 3], 0.3);
        let labels = vec![0usize, 1, 2, 3, 0];
        let accs = per_unit_accuracy(&net, &images, &labels).unwrap();
        assert_eq!(accs.len(), 2);
        for a in accs {
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn poisson_noise_behaves_physically() {
        let mut rng = substream(5, stream::EVAL_NOISE);
        // zero pixels stay zero
        let mut z = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        poisson_noise(&mut z, 12.0, &mut rng);
        assert!(z.data().iter().all(|&v| v == 0.0));
        // mean preserved-ish at high lambda, clamped to [0,1]
        let mut x = Tensor::full(&[1, 1, 50, 50], 0.5);
        poisson_noise(&mut x, 60.0, &mut rng);
        let mean: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // low lambda is visibly noisier than high lambda
        let mut hi = Tensor::full(&[1, 1, 50, 50], 0.5);
        let mut lo = Tensor::full(&[1, 1, 50, 50], 0.5);
        poisson_noise(&mut hi, 60.0, &mut substream(9, stream::EVAL_NOISE));
        poisson_noise(&mut lo, 3.0, &mut substream(9, stream::EVAL_NOISE));
        let var = |t: &Tensor<f64>| {
            let m: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
            t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.len() as f64
        };
        assert!(var(&lo) > 4.0 * var(&hi));
    }

    #[test]
    fn impulse_noise_hits_expected_fraction() {
        let mut rng = substream(21, stream::EVAL_NOISE);
        let mut x = Tensor::full(&[1, 1, 100, 100], 0.5);
        impulse_noise(&mut x, 0.1, &mut rng);
        let corrupted = x.data().iter().filter(|&&v| v != 0.5).count();
        // every corrupted pixel is 0 or 1
        assert!(x.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 0.5));
        let frac = corrupted as f64 / 10_000.0;
        assert!((frac - 0.1).abs() < 0.02, "corrupted fraction {frac}");
        // p=0 is a no-op
        let mut y = Tensor::full(&[1, 2, 8, 8], 0.25);
        impulse_noise(&mut y, 0.0, &mut rng);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn impulse_corrupts_channels_jointly() {
        let mut rng = substream(22, stream::EVAL_NOISE);
        let mut x = Tensor::full(&[1, 3, 30, 30], 0.5);
        impulse_noise(&mut x, 0.2, &mut rng);
        // for every spatial site, either all channels changed or none
        let plane = 900;
        for s in 0..plane {
            let vals: Vec<f64> = (0..3).map(|c| x.data()[c * plane + s]).collect();
            let changed = vals.iter().filter(|&&v| v != 0.5).count();
            assert!(changed == 0 || changed == 3, "site {s}: {vals:?}");
        }
    }

    #[test]
    fn quantization_is_idempotent_and_spares_bn() {
        let mut net = tiny_net(17);
        // remember BN gamma and a bias
        let bn_gamma: Vec<f64> = match &net.model.layers[1] {
            Layer::BatchNorm(bn) => bn.gamma.value.data().to_vec(),
            _ => unreachable!(),
        };
        quantize_weights(&mut net, 4).unwrap();
        let snap: Vec<f64> = match &net.model.layers[2] {
            Layer::Dense(d) => d.w.value.data().to_vec(),
            _ => unreachable!(),
        };
        // 4 bits: at most 15 distinct grid points
        let mut vals: Vec<i64> = {
            let maxabs = snap.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            let delta = maxabs / 7.0;
            snap.iter().map(|v| (v / delta).round() as i64).collect()
        };
        vals.sort_unstable();
        vals.dedup();
        assert!(vals.len() <= 15);
        quantize_weights(&mut net, 4).unwrap();
        let snap2: Vec<f64> = match &net.model.layers[2] {
            Layer::Dense(d) => d.w.value.data().to_vec(),
            _ => unreachable!(),
        };
        assert_eq!(snap, snap2, "requantization must be a no-op");
        match &net.model.layers[1] {
            Layer::BatchNorm(bn) => assert_eq!(bn.gamma.value.data(), &bn_gamma[..]),
            _ => unreachable!(),
        }
        assert!(quantize_weights(&mut net, 1).is_err());
        assert!(quantize_weights(&mut net, 17).is_err());
    }

    #[test]
    fn quantization_handles_all_zero_tensor() {
        let mut net = tiny_net(19);
        if let Layer::Dense(d) = &mut net.model.layers[2] {
            d.w.value.fill(0.0);
        }
        quantize_weights(&mut net, 4).unwrap();
        if let Layer::Dense(d) = &net.model.layers[2] {
            assert!(d.w.value.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn separation_matches_a_single_batch_oracle() {
        use crate::loss::{goodness_separation};
        use crate::samples::make_batch;
        let net = tiny_net(23);
        let n = 12usize;
        let images = crate::profile::synthetic_rows::<f64>(n, &[1, 3, 3], 25);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let got = per_unit_separation(&net, &images, &labels, 2, 27).unwrap();
        // oracle: one unchunked expanded batch through the same rng
        let emb = net.embedding.as_ref().unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let mut rng = substream(27, stream::NEGATIVES);
        let batch = make_batch(&images, &labels, &idx, 2, emb, &mut rng).unwrap();
        let (goods, _) = net.model.forward_eval_goodness(&batch.x).unwrap();
        assert_eq!(got.len(), net.model.depth());
        for (u, g) in goods.iter().enumerate() {
            let want = goodness_separation(g, 2).unwrap();
            assert!((got[u] - want).abs() < 1e-12, "unit {u}: {} vs {want}", got[u]);
        }
        // deterministic across calls
        let again = per_unit_separation(&net, &images, &labels, 2, 27).unwrap();
        assert_eq!(got, again);
        // a head-only network cannot measure goodness separation
        let bare = Network {
            model: Model::build(parse_arch("mlp(8)").unwrap(), &[1, 3, 3], &mut rng).unwrap(),
            embedding: None,
            head: None,
            num_classes: 4,
        };
        assert!(per_unit_separation(&bare, &images, &labels, 1, 1).is_err());
    }
}
