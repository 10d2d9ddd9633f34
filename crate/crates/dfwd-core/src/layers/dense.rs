use super::Delta;
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully-connected layer: y = x·Wᵀ + b, with W stored [out × in].
pub struct Dense<T: Scalar> {
    pub in_features: usize,
    pub out_features: usize,
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl rand::Rng) -> Self {
        Dense {
            in_features,
            out_features,
            w: Param::new(super::fan_in_uniform(
                &[out_features, in_features],
                in_features,
                rng,
            )),
            b: Param::new(Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::dim(
                "dense forward",
                x.shape(),
                self.w.value.shape(),
            ));
        }
        let mut y = x.matmul_nt(&self.w.value)?;
        let bias = self.b.value.data();
        for r in 0..y.dim0() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(bias) {
                *v = T::from_f64(v.to_f64() + bv.to_f64());
            }
        }
        Ok(y)
    }

    /// Accumulates dW = δyᵀ·x and db = Σ_rows δy into the param grads and
    /// returns δx = δy·W. When δy is row-sparse, the gemms run on just the
    /// gathered rows — the saving that makes max-aggregation training cheap.
    pub fn backward(&mut self, x: &Tensor<T>, dy: Delta<T>) -> Result<Delta<T>> {
        if dy.t.shape() != [x.dim0(), self.out_features] {
            return Err(Error::dim("dense backward", dy.t.shape(), x.shape()));
        }
        if dy.is_sparse() {
            let rows = dy.rows();
            if rows.is_empty() {
                // nothing contributed (e.g. every hinge inactive): no grads,
                // and skip the zero-row matmuls
                return Ok(Delta::sparse(
                    Tensor::zeros(&[x.dim0(), self.in_features]),
                    rows,
                ));
            }
            let dy_g = dy.t.gather_rows(&rows);
            let x_g = x.gather_rows(&rows);
            self.w.grad.add_assign(&dy_g.matmul_tn(&x_g)?)?;
            accumulate_col_sums(&mut self.b.grad, &dy_g);
            let dx_g = dy_g.matmul(&self.w.value)?;
            let mut dx = Tensor::zeros(&[x.dim0(), self.in_features]);
            dx.scatter_rows_add(&rows, &dx_g);
            Ok(Delta::sparse(dx, rows))
        } else {
            self.w.grad.add_assign(&dy.t.matmul_tn(x)?)?;
            accumulate_col_sums(&mut self.b.grad, &dy.t);
            Ok(Delta {
                active: dy.active,
                t: dy.t.matmul(&self.w.value)?,
            })
        }
    }
}

fn accumulate_col_sums<T: Scalar>(acc: &mut Tensor<T>, m: &Tensor<T>) {
    let cols = m.row_len();
    let out = acc.data_mut();
    for r in 0..m.dim0() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        for (o, v) in out.iter_mut().zip(row) {
            *o = T::from_f64(o.to_f64() + v.to_f64());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d: Dense<f64> = Dense::new(3, 3, &mut rng);
        d.w.value = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d: Dense<f64> = Dense::new(2, 2, &mut rng);
        d.w.value = Tensor::zeros(&[2, 2]);
        d.b.value = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![9.0, 9.0, -3.0, 4.0]).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn direct_two_by_two_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d: Dense<f64> = Dense::new(2, 2, &mut rng);
        d.w.value = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        d.b.value = Tensor::zeros(&[2]);
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn sum_loss_gradient_is_input_sum() {
        // loss = Σ y ⇒ dL/dW[j,k] = Σ_batch x[i,k]
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d: Dense<f64> = Dense::new(2, 3, &mut rng);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let dy = Delta::dense(Tensor::full(&[2, 3], 1.0));
        d.backward(&x, dy).unwrap();
        for j in 0..3 {
            assert_eq!(d.w.grad.row(j), &[11.0, 22.0]);
        }
        assert_eq!(d.b.grad.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sparse_and_dense_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d1: Dense<f64> = Dense::new(4, 3, &mut rng);
        let mut d2 = Dense::<f64> {
            in_features: 4,
            out_features: 3,
            w: d1.w.clone(),
            b: d1.b.clone(),
        };
        let x = Tensor::from_vec(&[8, 4], (0..32).map(|v| v as f64 * 0.1).collect()).unwrap();
        // zero rows except 1 and 6
        let mut dy = Tensor::zeros(&[8, 3]);
        dy.row_mut(1).copy_from_slice(&[1.0, -2.0, 0.5]);
        dy.row_mut(6).copy_from_slice(&[0.3, 0.0, 1.0]);
        let dx_dense = d1.backward(&x, Delta::dense(dy.clone())).unwrap();
        let dx_sparse = d2
            .backward(&x, Delta::sparse(dy, vec![1, 6]))
            .unwrap();
        assert_eq!(d1.w.grad.data(), d2.w.grad.data());
        assert_eq!(d1.b.grad.data(), d2.b.grad.data());
        for (a, b) in dx_dense.t.data().iter().zip(dx_sparse.t.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
