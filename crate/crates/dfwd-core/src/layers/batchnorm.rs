use super::Delta;
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

pub const BN_EPS: f64 = 1e-5;
/// Keep-fraction of the previous running estimate per batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization over features (rank-2 input) or channels (rank-4
/// input, statistics across batch and spatial positions). Placed before
/// each weighted sum in this architecture family.
pub struct BatchNorm<T: Scalar> {
    pub features: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Forward state the exact backward needs: the normalized activations and
/// the per-feature inverse standard deviation of the batch.
pub struct BnCache<T: Scalar> {
    pub xhat: Arc<Tensor<T>>,
    pub inv_std: Vec<f64>,
}

impl<T: Scalar> BnCache<T> {
    pub fn elems(&self) -> usize {
        self.xhat.len() + self.inv_std.len()
    }
}

/// (rows, features, inner) view of a BN input: [R, d] → inner 1,
/// [R, C, H, W] → (R, C, H·W).
fn bn_view(shape: &[usize], features: usize) -> Result<(usize, usize, usize)> {
    match shape {
        [r, d] if *d == features => Ok((*r, *d, 1)),
        [r, c, h, w] if *c == features => Ok((*r, *c, h * w)),
        _ => Err(Error::dim("batchnorm", shape, &[features])),
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            features,
            gamma: Param::new(Tensor::full(&[features], T::ONE)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], T::ONE),
        }
    }

    /// Train-mode forward: normalize by batch statistics, update running
    /// stats, and return the cache for the exact batch-coupled backward.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        let (r, d, m) = bn_view(x.shape(), self.features)?;
        if r < 2 {
            return Err(Error::config(
                "batch normalization requires batch size >= 2 in train mode",
            ));
        }
        let n = (r * m) as f64;
        let xd = x.data();

        // Two-pass batch statistics in f64 for accuracy in 32-bit training.
        let mut mean = vec![0.0f64; d];
        for i in 0..r {
            for j in 0..d {
                let base = (i * d + j) * m;
                for t in 0..m {
                    mean[j] += xd[base + t].to_f64();
                }
            }
        }
        for mj in &mut mean {
            *mj /= n;
        }
        let mut var = vec![0.0f64; d];
        for i in 0..r {
            for j in 0..d {
                let base = (i * d + j) * m;
                for t in 0..m {
                    let c = xd[base + t].to_f64() - mean[j];
                    var[j] += c * c;
                }
            }
        }
        for vj in &mut var {
            *vj /= n;
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            let g = self.gamma.value.data();
            let b = self.beta.value.data();
            for i in 0..r {
                for j in 0..d {
                    let base = (i * d + j) * m;
                    for t in 0..m {
                        let h = (xd[base + t].to_f64() - mean[j]) * inv_std[j];
                        xh[base + t] = T::from_f64(h);
                        od[base + t] = T::from_f64(g[j].to_f64() * h + b[j].to_f64());
                    }
                }
            }
        }

        for j in 0..d {
            let rm = self.running_mean.data()[j].to_f64();
            let rv = self.running_var.data()[j].to_f64();
            self.running_mean.data_mut()[j] =
                T::from_f64(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mean[j]);
            self.running_var.data_mut()[j] =
                T::from_f64(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * var[j]);
        }

        Ok((
            out,
            BnCache {
                xhat: Arc::new(xhat),
                inv_std,
            },
        ))
    }

    /// Eval-mode forward using running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, d, m) = bn_view(x.shape(), self.features)?;
        let mut out = Tensor::zeros(x.shape());
        let xd = x.data();
        let od = out.data_mut();
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        for j in 0..d {
            let rm = self.running_mean.data()[j].to_f64();
            let rs = 1.0 / (self.running_var.data()[j].to_f64() + BN_EPS).sqrt();
            let gj = g[j].to_f64();
            let bj = b[j].to_f64();
            for i in 0..r {
                let base = (i * d + j) * m;
                for t in 0..m {
                    od[base + t] = T::from_f64((xd[base + t].to_f64() - rm) * rs * gj + bj);
                }
            }
        }
        Ok(out)
    }

    /// Exact backward through the batch statistics. The batch coupling means
    /// a sparse upstream gradient still produces a dense input gradient
    /// (every row contributed to μ and σ²), so the returned delta is dense.
    pub fn backward(&mut self, cache: &BnCache<T>, dy: Delta<T>) -> Result<Delta<T>> {
        let (r, d, m) = bn_view(dy.t.shape(), self.features)?;
        if cache.xhat.shape() != dy.t.shape() {
            return Err(Error::dim("batchnorm backward", cache.xhat.shape(), dy.t.shape()));
        }
        let n = (r * m) as f64;
        let xh = cache.xhat.data();
        let dyd = dy.t.data();

        // Per-feature reductions; only rows with nonzero upstream grad
        // contribute, so sparse rows make this pass cheap.
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        let mut s1 = vec![0.0f64; d]; // Σ δx̂
        let mut s2 = vec![0.0f64; d]; // Σ δx̂·x̂
        let g = self.gamma.value.data();
        for i in dy.rows() {
            for j in 0..d {
                let base = (i * d + j) * m;
                let gj = g[j].to_f64();
                for t in 0..m {
                    let dyv = dyd[base + t].to_f64();
                    let xhv = xh[base + t].to_f64();
                    dgamma[j] += dyv * xhv;
                    dbeta[j] += dyv;
                    let dxh = dyv * gj;
                    s1[j] += dxh;
                    s2[j] += dxh * xhv;
                }
            }
        }
        for j in 0..d {
            let gg = self.gamma.grad.data_mut();
            gg[j] = T::from_f64(gg[j].to_f64() + dgamma[j]);
            let bg = self.beta.grad.data_mut();
            bg[j] = T::from_f64(bg[j].to_f64() + dbeta[j]);
        }

        // δx_i = inv_std · (δx̂_i − S1/n − x̂_i·S2/n), over every row.
        let mut dx = Tensor::zeros(dy.t.shape());
        let dxd = dx.data_mut();
        for i in 0..r {
            for j in 0..d {
                let base = (i * d + j) * m;
                let gj = g[j].to_f64();
                let is = cache.inv_std[j];
                for t in 0..m {
                    let dxh = dyd[base + t].to_f64() * gj;
                    let xhv = xh[base + t].to_f64();
                    dxd[base + t] =
                        T::from_f64(is * (dxh - s1[j] / n - xhv * s2[j] / n));
                }
            }
        }
        Ok(Delta::dense(dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_input_passes_through() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(1);
        // zero-mean unit-variance column
        let x = Tensor::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_batch_outputs_beta() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(2);
        bn.beta.value = Tensor::from_vec(&[2], vec![0.7, -0.3]).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![5.0, 1.0, 5.0, 1.0, 5.0, 1.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        for r in 0..3 {
            assert!((y.row(r)[0] - 0.7).abs() < 1e-9);
            assert!((y.row(r)[1] + 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn two_sample_batch_direct_evaluation() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(1);
        bn.gamma.value = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        bn.beta.value = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let x = Tensor::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        let expect = 2.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - (1.0 - expect)).abs() < 1e-12);
        assert!((y.data()[1] - (1.0 + expect)).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_a_config_error() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(3);
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            bn.forward_train(&x),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(1);
        // Drive running stats toward mean 0, var 1 with repeated batches.
        let x = Tensor::from_vec(&[2, 1], vec![-1.0, 1.0]).unwrap();
        for _ in 0..200 {
            bn.forward_train(&x).unwrap();
        }
        let probe = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        let y = bn.forward_eval(&probe).unwrap();
        // running mean → 0, var → 1: y ≈ x/√(1+ε)
        assert!((y.data()[0] - 0.0).abs() < 1e-2);
        assert!((y.data()[1] - 2.0).abs() < 2e-2);
    }

    #[test]
    fn channel_stats_cover_spatial_positions() {
        let mut bn: BatchNorm<f64> = BatchNorm::new(1);
        // 2 samples × 1 channel × 1×2: values {0, 2, 4, 6} → mean 3
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let (y, cache) = bn.forward_train(&x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // var of {0,2,4,6} = 5
        assert!((cache.inv_std[0] - 1.0 / (5.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
    }
}
