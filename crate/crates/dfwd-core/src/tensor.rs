//! Dense row-major tensors over f32/f64 with a gemm-backed matmul.
//!
//! Matrix products are computed in fixed 256-row output chunks. The chunk
//! boundaries never depend on the configured thread count, so multi-threaded
//! and single-threaded runs produce bitwise-identical results — determinism
//! is structural, not incidental.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker threads used by matmul row-chunking. 1 = fully serial (default).
static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Output rows per gemm chunk. Fixed so results are thread-count-invariant.
const GEMM_ROW_CHUNK: usize = 256;

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 12 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// First extent; panics on rank-0 (never constructed here).
    pub fn dim0(&self) -> usize {
        self.shape[0]
    }

    /// Elements per dim-0 slice (the "row" size when viewed as a matrix).
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.data.len() / self.shape[0].max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Reinterpret the extents without touching data. Element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, c: T) {
        for x in &mut self.data {
            *x = T::from_f64(x.to_f64() * c.to_f64());
        }
    }

    /// self += other (shapes must match exactly).
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn assert_finite(&self, origin: &'static str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    origin,
                    detail: Some(format!("element {i} of shape {:?} is {v}", self.shape)),
                });
            }
        }
        Ok(())
    }

    /// Copy the dim-0 slices named by `idx` into a new tensor (same trailing
    /// extents, dim-0 = idx.len()).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<T> {
        let w = self.row_len();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data: out }
    }

    /// self.row(idx[j]) += src.row(j) for every j.
    pub fn scatter_rows_add(&mut self, idx: &[usize], src: &Tensor<T>) {
        debug_assert_eq!(idx.len(), src.dim0());
        debug_assert_eq!(self.row_len(), src.row_len());
        let w = self.row_len();
        for (j, &i) in idx.iter().enumerate() {
            let dst = &mut self.data[i * w..(i + 1) * w];
            for (d, s) in dst.iter_mut().zip(src.row(j)) {
                *d = T::from_f64(d.to_f64() + s.to_f64());
            }
        }
    }
}

/// Which operands get transposed in a matmul call.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Trans {
    NN,
    NT,
    TN,
}

impl<T: Scalar> Tensor<T> {
    /// self[m×k] · other[k×n] → [m×n]
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, Trans::NN)
    }

    /// self[m×k] · other[n×k]ᵀ → [m×n]
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, Trans::NT)
    }

    /// self[k×m]ᵀ · other[k×n] → [m×n]
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, Trans::TN)
    }

    fn matmul_impl(&self, other: &Tensor<T>, trans: Trans) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n, rsa, csa, rsb, csb) = match trans {
            Trans::NN => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (k2, n) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim("matmul", &self.shape, &other.shape));
                }
                (m, k, n, k as isize, 1, n as isize, 1)
            }
            Trans::NT => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (n, k2) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim("matmul_nt", &self.shape, &other.shape));
                }
                (m, k, n, k as isize, 1, 1, k as isize)
            }
            Trans::TN => {
                let (k, m) = (self.shape[0], self.shape[1]);
                let (k2, n) = (other.shape[0], other.shape[1]);
                if k != k2 {
                    return Err(Error::dim("matmul_tn", &self.shape, &other.shape));
                }
                (m, k, n, 1, m as isize, n as isize, 1)
            }
        };
        let mut out = Tensor::zeros(&[m, n]);
        gemm_chunked(
            m,
            k,
            n,
            self.data.as_ptr(),
            rsa,
            csa,
            other.data.as_ptr(),
            rsb,
            csb,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
        Ok(out)
    }
}

/// C = A·B computed in fixed row chunks, optionally across worker threads.
/// Chunk boundaries are independent of the thread count, so each output row
/// is produced by an identical gemm subproblem either way.
#[allow(clippy::too_many_arguments)]
fn gemm_chunked<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    let nthreads = threads();
    let chunks: Vec<(usize, usize)> = (0..m)
        .step_by(GEMM_ROW_CHUNK)
        .map(|lo| (lo, (lo + GEMM_ROW_CHUNK).min(m)))
        .collect();

    let run_chunk = |lo: usize, hi: usize| unsafe {
        T::gemm(
            hi - lo,
            k,
            n,
            T::ONE,
            a.offset(lo as isize * rsa),
            rsa,
            csa,
            b,
            rsb,
            csb,
            T::ZERO,
            c.offset(lo as isize * rsc),
            rsc,
            csc,
        )
    };

    if nthreads <= 1 || chunks.len() <= 1 {
        for &(lo, hi) in &chunks {
            run_chunk(lo, hi);
        }
        return;
    }

    // Round-robin chunk assignment over a fixed chunk grid: thread t takes
    // chunks t, t+T, t+2T, ... Output ranges are disjoint per chunk.
    struct SendPtr<T>(*const T);
    struct SendPtrMut<T>(*mut T);
    unsafe impl<T> Send for SendPtr<T> {}
    unsafe impl<T> Sync for SendPtr<T> {}
    unsafe impl<T> Send for SendPtrMut<T> {}
    unsafe impl<T> Sync for SendPtrMut<T> {}
    let pa = SendPtr(a);
    let pb = SendPtr(b);
    let pc = SendPtrMut(c);
    let chunks_ref = &chunks;

    std::thread::scope(|scope| {
        for t in 0..nthreads.min(chunks.len()) {
            let (pa, pb, pc) = (&pa, &pb, &pc);
            scope.spawn(move || {
                for (lo, hi) in chunks_ref.iter().skip(t).step_by(nthreads).copied() {
                    unsafe {
                        T::gemm(
                            hi - lo,
                            k,
                            n,
                            T::ONE,
                            pa.0.offset(lo as isize * rsa),
                            rsa,
                            csa,
                            pb.0,
                            rsb,
                            csb,
                            T::ZERO,
                            pc.0.offset(lo as isize * rsc),
                            rsc,
                            csc,
                        )
                    }
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn naive_mm(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, k, n) in [(3, 4, 5), (17, 9, 13), (300, 7, 11)] {
            let a = randt(&[m, k], &mut rng);
            let b = randt(&[k, n], &mut rng);
            assert_close(&a.matmul(&b).unwrap(), &naive_mm(&a, &b), 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randt(&[6, 8], &mut rng);
        let b = randt(&[9, 8], &mut rng); // for NT: a[6x8] · b[9x8]^T
        let nt = a.matmul_nt(&b).unwrap();
        for i in 0..6 {
            for j in 0..9 {
                let s: f64 = (0..8).map(|l| a.data()[i * 8 + l] * b.data()[j * 8 + l]).sum();
                assert!((nt.data()[i * 9 + j] - s).abs() < 1e-12);
            }
        }
        let c = randt(&[8, 6], &mut rng); // for TN: c[8x6]^T · a[8, ...]
        let d = randt(&[8, 5], &mut rng);
        let tn = c.matmul_tn(&d).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let s: f64 = (0..8).map(|l| c.data()[l * 6 + i] * d.data()[l * 5 + j]).sum();
                assert!((tn.data()[i * 5 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Two chunks' worth of rows so the threaded path actually splits.
        let a = randt(&[517, 40], &mut rng);
        let b = randt(&[40, 33], &mut rng);
        set_threads(1);
        let c1 = a.matmul(&b).unwrap();
        set_threads(4);
        let c4 = a.matmul(&b).unwrap();
        set_threads(1);
        assert_eq!(c1.data(), c4.data(), "thread count changed matmul bits");
    }

    #[test]
    fn shape_mismatch_is_reported_with_both_shapes() {
        let a: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let t = Tensor::from_vec(&[4, 2], (0..8).map(|x| x as f64).collect()).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let mut acc = Tensor::zeros(&[4, 2]);
        acc.scatter_rows_add(&[2, 0], &g);
        assert_eq!(acc.row(2), &[4.0, 5.0]);
        assert_eq!(acc.row(0), &[0.0, 1.0]);
        assert_eq!(acc.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t: Tensor<f32> = Tensor::zeros(&[2, 2]);
        t.data_mut()[3] = f32::NAN;
        assert!(t.assert_finite("test").is_err());
    }

    #[test]
    fn reshape_preserves_len() {
        let t: Tensor<f32> = Tensor::zeros(&[2, 6]);
        assert!(t.clone().reshape(&[3, 4]).is_ok());
        assert!(t.reshape(&[5, 2]).is_err());
    }
}
