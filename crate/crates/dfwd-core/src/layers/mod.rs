//! The six layer kinds and their hand-derived backward passes.
//!
//! There is no autodiff: each layer exposes an explicit forward and an
//! explicit backward that accumulates into its own `Param::grad`. Block-local
//! training composes these by hand, which keeps the memory accounting honest
//! — what a strategy caches is exactly what its backward touches.

mod batchnorm;
mod conv;
mod dense;

pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{conv_out_hw, Conv2d};
pub use dense::Dense;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

/// A gradient tensor flowing backward through a block, together with the
/// set of batch rows that may be nonzero.
///
/// The margin loss with max-aggregation produces loss gradients on only the
/// positive and argmax-negative rows of the expanded batch; carrying that
/// row set lets dense/conv backward gather just those rows into their gemms.
/// `active: None` means all rows. Rows outside `active` must be zero.
pub struct Delta<T: Scalar> {
    pub t: Tensor<T>,
    pub active: Option<Vec<usize>>,
}

impl<T: Scalar> Delta<T> {
    pub fn dense(t: Tensor<T>) -> Self {
        Delta { t, active: None }
    }

    pub fn sparse(t: Tensor<T>, active: Vec<usize>) -> Self {
        Delta {
            t,
            active: Some(active),
        }
    }

    /// Rows worth visiting; falls back to every row.
    pub fn rows(&self) -> Vec<usize> {
        match &self.active {
            Some(a) => a.clone(),
            None => (0..self.t.dim0()).collect(),
        }
    }

    /// Whether the sparse path is worth it (strictly fewer than half the rows).
    pub fn is_sparse(&self) -> bool {
        match &self.active {
            Some(a) => a.len() * 2 < self.t.dim0(),
            None => false,
        }
    }
}

/// Uniform(−√(1/fan_in), +√(1/fan_in)) init for dense/conv weights.
pub fn fan_in_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl rand::Rng,
) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

/// ReLU forward; the mask for backward comes from the cached pre-activation,
/// so this layer stores nothing of its own.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    out
}

/// δx = δy ⊙ 1[x > 0], given the cached pre-activation `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: Delta<T>) -> Delta<T> {
    let mut dx = dy.t;
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if *v <= T::ZERO {
            *d = T::ZERO;
        }
    }
    Delta {
        t: dx,
        active: dy.active,
    }
}

/// Average pooling over square windows; output spatial size
/// floor((H − k)/s) + 1 per side, no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AvgPool {
    pub k: usize,
    pub stride: usize,
}

impl AvgPool {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.k == 0 || self.stride == 0 || h < self.k || w < self.k {
            return Err(Error::dim("avgpool", &[h, w], &[self.k, self.k]));
        }
        Ok(((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1))
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::dim("avgpool", x.shape(), &[0, 0, 0, 0]));
        };
        let (oh, ow) = self.out_hw(h, w)?;
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let inv = 1.0 / (self.k * self.k) as f64;
        let xd = x.data();
        let od = out.data_mut();
        for r in 0..b {
            for ci in 0..c {
                let xbase = (r * c + ci) * h * w;
                let obase = (r * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..self.k {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.k {
                                s += xd[xbase + iy * w + (ox * self.stride + kx)].to_f64();
                            }
                        }
                        od[obase + oy * ow + ox] = T::from_f64(s * inv);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Spread each output gradient uniformly over its window.
    pub fn backward<T: Scalar>(&self, in_shape: &[usize], dy: Delta<T>) -> Delta<T> {
        let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
        let (oh, ow) = ((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1);
        let mut dx = Tensor::zeros(in_shape);
        let inv = 1.0 / (self.k * self.k) as f64;
        let dyd = dy.t.data();
        let dxd: &mut [T] = dx.data_mut();
        for r in dy.rows() {
            for ci in 0..c {
                let obase = (r * c + ci) * oh * ow;
                let xbase = (r * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dyd[obase + oy * ow + ox].to_f64() * inv;
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..self.k {
                            let iy = oy * self.stride + ky;
                            for kx in 0..self.k {
                                let i = xbase + iy * w + (ox * self.stride + kx);
                                dxd[i] = T::from_f64(dxd[i].to_f64() + g);
                            }
                        }
                    }
                }
            }
        }
        Delta {
            t: dx,
            active: dy.active,
        }
    }
}

/// [B, C, H, W] → [B, C·H·W]; backward is the inverse reshape.
pub fn flatten_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let b = x.dim0();
    let rest = x.row_len();
    x.clone().reshape(&[b, rest])
}

pub fn flatten_backward<T: Scalar>(in_shape: &[usize], dy: Delta<T>) -> Result<Delta<T>> {
    Ok(Delta {
        t: dy.t.reshape(in_shape)?,
        active: dy.active,
    })
}

/// One concrete layer instance with its parameters.
pub enum Layer<T: Scalar> {
    Dense(Dense<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    AvgPool(AvgPool),
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::AvgPool(_) => "avgpool",
            Layer::Flatten => "flatten",
        }
    }

    /// Whether this layer is a goodness-bearing core (owns a weighted sum).
    pub fn is_core(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn params(&self) -> Vec<&crate::optim::Param<T>> {
        match self {
            Layer::Dense(d) => vec![&d.w, &d.b],
            Layer::Conv2d(c) => vec![&c.w, &c.b],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::optim::Param<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            Layer::Conv2d(c) => vec![&mut c.w, &mut c.b],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => vec![],
        }
    }
}

/// Cached forward state one layer needs for its backward. Tensors are
/// `Arc`-shared: the ReLU cache aliases the core's pre-activation rather
/// than copying it, and dropping a unit's cache frees its memory as soon as
/// the sliding window moves past — the property the profiler measures.
pub enum LayerCache<T: Scalar> {
    /// Dense/conv input.
    CoreInput(Arc<Tensor<T>>),
    Bn(BnCache<T>),
    /// Pre-activation feeding a ReLU.
    Relu(Arc<Tensor<T>>),
    /// Input extents for shape-only backwards (pool, flatten).
    Shape(Vec<usize>),
    None,
}

impl<T: Scalar> LayerCache<T> {
    /// Elements held by this cache entry, counting shared tensors once per
    /// holder (the analytic memory model counts the same way).
    pub fn elems(&self) -> usize {
        match self {
            LayerCache::CoreInput(t) | LayerCache::Relu(t) => t.len(),
            LayerCache::Bn(b) => b.elems(),
            LayerCache::Shape(_) | LayerCache::None => 0,
        }
    }
}
