//! Positive/negative sample construction.
//!
//! A positive sample pairs an image with its true label's encoding; each of
//! its N negatives pairs the *same* image with a distinct incorrect label.
//! Label information enters either as an extra learnable channel (default)
//! or by overwriting the first K flattened pixels with a one-hot (the legacy
//! construction the weight-split equivalence is stated for).

use crate::error::{Error, Result};
use crate::optim::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    LearnableChannel,
    PixelReplace,
}

impl EmbedMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learnable_channel" => Ok(EmbedMode::LearnableChannel),
            "pixel_replace" => Ok(EmbedMode::PixelReplace),
            other => Err(Error::config(format!(
                "unknown embed mode '{other}' (expected learnable_channel | pixel_replace)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::LearnableChannel => "learnable_channel",
            EmbedMode::PixelReplace => "pixel_replace",
        }
    }
}

/// One H×W plane per class — the embedding is sized to a single channel of
/// the input image. In pixel-replace mode the table is untrainable ballast
/// and stays zero.
pub struct LabelEmbedding<T: Scalar> {
    pub table: Param<T>,
    pub mode: EmbedMode,
    pub num_classes: usize,
    pub plane_h: usize,
    pub plane_w: usize,
}

impl<T: Scalar> LabelEmbedding<T> {
    pub fn new(
        num_classes: usize,
        plane_h: usize,
        plane_w: usize,
        mode: EmbedMode,
        rng: &mut impl Rng,
    ) -> Self {
        let n = num_classes * plane_h * plane_w;
        let data: Vec<T> = match mode {
            EmbedMode::LearnableChannel => (0..n)
                .map(|_| T::from_f64(rng.random_range(-0.5..0.5)))
                .collect(),
            EmbedMode::PixelReplace => vec![T::ZERO; n],
        };
        LabelEmbedding {
            table: Param::new(
                Tensor::from_vec(&[num_classes, plane_h, plane_w], data)
                    .expect("table shape consistent"),
            ),
            mode,
            num_classes,
            plane_h,
            plane_w,
        }
    }

    /// Channels a sample carries after label encoding, given image channels.
    pub fn encoded_channels(&self, image_channels: usize) -> usize {
        match self.mode {
            EmbedMode::LearnableChannel => image_channels + 1,
            EmbedMode::PixelReplace => image_channels,
        }
    }

    fn plane(&self, label: usize) -> &[T] {
        let sz = self.plane_h * self.plane_w;
        &self.table.value.data()[label * sz..(label + 1) * sz]
    }

    /// Build one labeled sample from one image ([C, H, W]).
    pub fn make_positive(&self, image: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::dim("make_positive", image.shape(), &[0, self.plane_h, self.plane_w]));
        };
        if label >= self.num_classes {
            return Err(Error::config(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        match self.mode {
            EmbedMode::LearnableChannel => {
                if (h, w) != (self.plane_h, self.plane_w) {
                    return Err(Error::dim(
                        "make_positive",
                        image.shape(),
                        &[self.plane_h, self.plane_w],
                    ));
                }
                let mut data = Vec::with_capacity((c + 1) * h * w);
                data.extend_from_slice(image.data());
                data.extend_from_slice(self.plane(label));
                Tensor::from_vec(&[c + 1, h, w], data)
            }
            EmbedMode::PixelReplace => {
                let k = self.num_classes;
                if k >= c * h * w {
                    return Err(Error::dim("make_positive", &[c * h * w], &[k]));
                }
                let mut out = image.clone();
                for (i, v) in out.data_mut()[..k].iter_mut().enumerate() {
                    *v = if i == label { T::ONE } else { T::ZERO };
                }
                Ok(out)
            }
        }
    }
}

/// N distinct incorrect labels, uniform without replacement.
pub fn sample_negative_labels(
    true_label: usize,
    n: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n + 1 > num_classes {
        return Err(Error::config(format!(
            "cannot draw {n} distinct negatives from {} classes",
            num_classes
        )));
    }
    let mut pool: Vec<usize> = (0..num_classes).filter(|&l| l != true_label).collect();
    // Partial Fisher–Yates: after i swaps, pool[..i] is a uniform sample.
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

/// An expanded mini-batch: for each of B source images, one positive row
/// followed by its N negative rows, interleaved so row `i·(1+N)` is sample
/// i's positive and rows `i·(1+N)+1+k` its negatives. Positives and
/// negatives share one tensor because batch-norm statistics are computed
/// over the combined forward batch.
pub struct SampleBatch<T: Scalar> {
    pub x: Tensor<T>,
    pub true_labels: Vec<usize>,
    pub neg_labels: Vec<Vec<usize>>,
    pub n_negs: usize,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.true_labels.len()
    }

    pub fn rows(&self) -> usize {
        self.x.dim0()
    }

    pub fn pos_row(&self, i: usize) -> usize {
        i * (1 + self.n_negs)
    }

    pub fn neg_row(&self, i: usize, k: usize) -> usize {
        i * (1 + self.n_negs) + 1 + k
    }

    /// Label encoded into a given row.
    pub fn row_label(&self, row: usize) -> usize {
        let (i, j) = (row / (1 + self.n_negs), row % (1 + self.n_negs));
        if j == 0 {
            self.true_labels[i]
        } else {
            self.neg_labels[i][j - 1]
        }
    }
}

/// Build the expanded batch for `idx`-selected samples of a dataset tensor
/// ([N, C, H, W]) with N distinct negative labels per positive.
pub fn make_batch<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    idx: &[usize],
    n_negs: usize,
    emb: &LabelEmbedding<T>,
    rng: &mut impl Rng,
) -> Result<SampleBatch<T>> {
    let b = idx.len();
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let enc_c = emb.encoded_channels(c);
    let mut x = Tensor::zeros(&[b * (1 + n_negs), enc_c, h, w]);
    let mut true_labels = Vec::with_capacity(b);
    let mut neg_labels = Vec::with_capacity(b);
    let row_sz = enc_c * h * w;
    for (i, &src) in idx.iter().enumerate() {
        let image = Tensor::from_vec(&[c, h, w], images.row(src).to_vec())?;
        let y = labels[src];
        let negs = sample_negative_labels(y, n_negs, emb.num_classes, rng)?;
        let pos = emb.make_positive(&image, y)?;
        let base = i * (1 + n_negs);
        x.data_mut()[base * row_sz..(base + 1) * row_sz].copy_from_slice(pos.data());
        for (k, &nl) in negs.iter().enumerate() {
            let neg = emb.make_positive(&image, nl)?;
            let r = base + 1 + k;
            x.data_mut()[r * row_sz..(r + 1) * row_sz].copy_from_slice(neg.data());
        }
        true_labels.push(y);
        neg_labels.push(negs);
    }
    Ok(SampleBatch {
        x,
        true_labels,
        neg_labels,
        n_negs,
    })
}

impl<T: Scalar> LabelEmbedding<T> {
    /// Fold the label-channel slice of an input gradient back into the
    /// embedding table. Called only with the first block's input gradient —
    /// the embedding is input-side state, so later blocks' losses never
    /// reach it under local learning.
    pub fn accumulate_grad(&mut self, input_delta: &Tensor<T>, batch: &SampleBatch<T>) -> Result<()> {
        if self.mode != EmbedMode::LearnableChannel {
            return Ok(());
        }
        let &[rows, c_enc, h, w] = input_delta.shape() else {
            return Err(Error::dim("embedding grad", input_delta.shape(), &[0, 0, 0, 0]));
        };
        if rows != batch.rows() || (h, w) != (self.plane_h, self.plane_w) {
            return Err(Error::dim(
                "embedding grad",
                input_delta.shape(),
                batch.x.shape(),
            ));
        }
        let plane = h * w;
        let label_ch = c_enc - 1;
        for r in 0..rows {
            let label = batch.row_label(r);
            let src = &input_delta.row(r)[label_ch * plane..(label_ch + 1) * plane];
            let dst = &mut self.table.grad.data_mut()[label * plane..(label + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(d.to_f64() + s.to_f64());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, stream};

    fn emb(mode: EmbedMode) -> LabelEmbedding<f64> {
        let mut rng = substream(3, stream::INIT);
        LabelEmbedding::new(10, 4, 4, mode, &mut rng)
    }

    #[test]
    fn zero_image_zero_embedding_gives_zero_sample() {
        let mut e = emb(EmbedMode::LearnableChannel);
        e.table.value.fill(0.0);
        let img = Tensor::zeros(&[1, 4, 4]);
        let s = e.make_positive(&img, 2).unwrap();
        assert_eq!(s.shape(), &[2, 4, 4]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_replace_writes_one_hot_prefix() {
        let e = emb(EmbedMode::PixelReplace);
        let img = Tensor::full(&[1, 4, 4], 0.5);
        let s = e.make_positive(&img, 3).unwrap();
        assert_eq!(s.shape(), &[1, 4, 4]);
        for i in 0..10 {
            assert_eq!(s.data()[i], if i == 3 { 1.0 } else { 0.0 });
        }
        for i in 10..16 {
            assert_eq!(s.data()[i], 0.5);
        }
    }

    #[test]
    fn learnable_mode_adds_exactly_one_channel() {
        let e = emb(EmbedMode::LearnableChannel);
        let img = Tensor::full(&[3, 4, 4], 0.25);
        let s = e.make_positive(&img, 0).unwrap();
        assert_eq!(s.shape(), &[4, 4, 4]);
        // image part untouched
        assert!(s.data()[..48].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let e = emb(EmbedMode::LearnableChannel);
        let img = Tensor::zeros(&[1, 4, 4]);
        assert!(e.make_positive(&img, 10).is_err());
    }

    #[test]
    fn negatives_exclude_truth_and_are_distinct() {
        let mut rng = substream(5, stream::NEGATIVES);
        for _ in 0..200 {
            let negs = sample_negative_labels(4, 9, 10, &mut rng).unwrap();
            assert_eq!(negs.len(), 9);
            assert!(!negs.contains(&4));
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 9, "duplicate negative drawn");
        }
        // K=2 forces the single other label.
        let negs = sample_negative_labels(1, 1, 2, &mut rng).unwrap();
        assert_eq!(negs, vec![0]);
        assert!(sample_negative_labels(0, 10, 10, &mut rng).is_err());
    }

    #[test]
    fn negative_draws_are_uniform_chi_square() {
        // 1e5 single-negative draws, K=10: each of the 9 incorrect labels
        // should appear ~1/9 of the time, within 3σ binomial bounds.
        let mut rng = substream(11, stream::NEGATIVES);
        let mut counts = [0u32; 10];
        let trials = 100_000;
        for _ in 0..trials {
            let l = sample_negative_labels(7, 1, 10, &mut rng).unwrap()[0];
            counts[l] += 1;
        }
        assert_eq!(counts[7], 0);
        let p = 1.0 / 9.0;
        let expect = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (l, &c) in counts.iter().enumerate() {
            if l == 7 {
                continue;
            }
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "label {l}: count {c} vs expected {expect:.0} ± {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn batch_rows_differ_only_in_label_encoding() {
        let e = emb(EmbedMode::LearnableChannel);
        let images =
            Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|v| v as f64 / 32.0).collect()).unwrap();
        let labels = vec![1usize, 8];
        let mut rng = substream(9, stream::NEGATIVES);
        let batch = make_batch(&images, &labels, &[0, 1], 3, &e, &mut rng).unwrap();
        assert_eq!(batch.rows(), 8);
        for i in 0..2 {
            let pos = batch.x.row(batch.pos_row(i));
            for k in 0..3 {
                let neg = batch.x.row(batch.neg_row(i, k));
                // image channel identical
                assert_eq!(&pos[..16], &neg[..16]);
                // label channel differs (distinct labels, random init table)
                assert_ne!(&pos[16..], &neg[16..]);
                assert_ne!(batch.neg_labels[i][k], batch.true_labels[i]);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_batch() {
        let e = emb(EmbedMode::LearnableChannel);
        let images = Tensor::full(&[3, 1, 4, 4], 0.1);
        let labels = vec![0usize, 5, 9];
        let b1 = make_batch(
            &images,
            &labels,
            &[2, 0],
            4,
            &e,
            &mut substream(42, stream::NEGATIVES),
        )
        .unwrap();
        let b2 = make_batch(
            &images,
            &labels,
            &[2, 0],
            4,
            &e,
            &mut substream(42, stream::NEGATIVES),
        )
        .unwrap();
        assert_eq!(b1.x.data(), b2.x.data());
        assert_eq!(b1.neg_labels, b2.neg_labels);
    }

    #[test]
    fn exhaustive_negatives_cover_all_incorrect_classes() {
        let e = emb(EmbedMode::LearnableChannel);
        let images = Tensor::zeros(&[1, 1, 4, 4]);
        let batch = make_batch(
            &images,
            &[6usize],
            &[0],
            9,
            &e,
            &mut substream(1, stream::NEGATIVES),
        )
        .unwrap();
        let mut seen = batch.neg_labels[0].clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5, 7, 8, 9]);
    }
}
