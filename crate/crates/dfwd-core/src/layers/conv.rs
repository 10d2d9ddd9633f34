use super::Delta;
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D cross-correlation with square kernels, stored as a matrix
/// [out_ch × in_ch·k·k] so forward/backward run as per-sample gemms over
/// im2col patch matrices. Patch buffers are rebuilt in backward instead of
/// cached — activations stay the only per-layer storage.
/// Output spatial size of a convolution: floor((H + 2p − k)/s) + 1.
pub fn conv_out_hw(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if k > hp || k > wp {
        return Err(Error::dim(
            "conv2d: kernel exceeds padded input",
            &[hp, wp],
            &[k, k],
        ));
    }
    Ok(((hp - k) / stride + 1, (wp - k) / stride + 1))
}

pub struct Conv2d<T: Scalar> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            in_ch,
            out_ch,
            k,
            stride,
            padding,
            w: Param::new(super::fan_in_uniform(&[out_ch, fan_in], fan_in, rng)),
            b: Param::new(Tensor::zeros(&[out_ch])),
        }
    }

    /// Output spatial size: floor((H + 2p − k)/s) + 1.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_out_hw(h, w, self.k, self.stride, self.padding)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
        let &[r, c, h, w] = x.shape() else {
            return Err(Error::dim("conv2d forward", x.shape(), &[0, self.in_ch, 0, 0]));
        };
        if c != self.in_ch {
            return Err(Error::dim("conv2d forward", x.shape(), self.w.value.shape()));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        Ok((r, h, w, oh, ow))
    }

    /// Fill `cols` ([in_ch·k·k, oh·ow], row-major) with the patches of one
    /// sample, zero-padding out-of-bounds taps.
    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let sp = oh * ow;
        for ci in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * sp;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let inside_y = iy >= 0 && (iy as usize) < h;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            cols[row + oy * ow + ox] = if inside_y && ix >= 0 && (ix as usize) < w
                            {
                                x[ci * h * w + iy as usize * w + ix as usize]
                            } else {
                                T::ZERO
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, h, w, oh, ow) = self.check_input(x)?;
        let (ickk, sp) = (self.in_ch * self.k * self.k, oh * ow);
        let mut out = Tensor::zeros(&[r, self.out_ch, oh, ow]);
        let mut cols = vec![T::ZERO; ickk * sp];
        let wd = self.w.value.data();
        let bd = self.b.value.data();
        for i in 0..r {
            self.im2col(x.row(i), h, w, oh, ow, &mut cols);
            let out_i = &mut out.data_mut()[i * self.out_ch * sp..(i + 1) * self.out_ch * sp];
            unsafe {
                T::gemm(
                    self.out_ch,
                    ickk,
                    sp,
                    T::ONE,
                    wd.as_ptr(),
                    ickk as isize,
                    1,
                    cols.as_ptr(),
                    sp as isize,
                    1,
                    T::ZERO,
                    out_i.as_mut_ptr(),
                    sp as isize,
                    1,
                );
            }
            for co in 0..self.out_ch {
                let bias = bd[co];
                for v in &mut out_i[co * sp..(co + 1) * sp] {
                    *v = T::from_f64(v.to_f64() + bias.to_f64());
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias grads and returns δx. Only rows listed in the
    /// delta's active set are visited; zero rows cost nothing.
    pub fn backward(&mut self, x: &Tensor<T>, dy: Delta<T>) -> Result<Delta<T>> {
        let (r, h, w, oh, ow) = self.check_input(x)?;
        if dy.t.shape() != [r, self.out_ch, oh, ow] {
            return Err(Error::dim("conv2d backward", dy.t.shape(), &[r, self.out_ch, oh, ow]));
        }
        let (ickk, sp) = (self.in_ch * self.k * self.k, oh * ow);
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::ZERO; ickk * sp];
        let mut dcols = vec![T::ZERO; ickk * sp];
        let rows = dy.rows();
        for &i in &rows {
            self.im2col(x.row(i), h, w, oh, ow, &mut cols);
            let dy_i = &dy.t.data()[i * self.out_ch * sp..(i + 1) * self.out_ch * sp];
            unsafe {
                // dW += δout·colsᵀ
                T::gemm(
                    self.out_ch,
                    sp,
                    ickk,
                    T::ONE,
                    dy_i.as_ptr(),
                    sp as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    sp as isize,
                    T::ONE,
                    self.w.grad.data_mut().as_mut_ptr(),
                    ickk as isize,
                    1,
                );
                // δcols = Wᵀ·δout
                T::gemm(
                    ickk,
                    self.out_ch,
                    sp,
                    T::ONE,
                    self.w.value.data().as_ptr(),
                    1,
                    ickk as isize,
                    dy_i.as_ptr(),
                    sp as isize,
                    1,
                    T::ZERO,
                    dcols.as_mut_ptr(),
                    sp as isize,
                    1,
                );
            }
            let bg = self.b.grad.data_mut();
            for co in 0..self.out_ch {
                let mut s = 0.0;
                for v in &dy_i[co * sp..(co + 1) * sp] {
                    s += v.to_f64();
                }
                bg[co] = T::from_f64(bg[co].to_f64() + s);
            }
            // col2im scatter-add into δx for this sample.
            let dx_i: &mut [T] = dx.row_mut(i);
            for ci in 0..self.in_ch {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = ((ci * self.k + ky) * self.k + kx) * sp;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let t = ci * h * w + iy as usize * w + ix as usize;
                                dx_i[t] = T::from_f64(
                                    dx_i[t].to_f64() + dcols[row + oy * ow + ox].to_f64(),
                                );
                            }
                        }
                    }
                }
            }
        }
        Ok(Delta {
            t: dx,
            active: dy.active,
        })
    }
}
