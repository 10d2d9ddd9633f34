//! Goodness-based training objectives.
//!
//! All three objectives operate on per-row goodness values (squared L2 norm
//! of a unit's pre-activation output) over an expanded batch in which row
//! `i·(1+N)` is sample i's positive and rows `i·(1+N)+1+k` its N negatives:
//!
//! - `Ff`: threshold objective — push positive goodness above θ and
//!   negative goodness below θ, each through a logistic.
//! - `SymBa`: pairwise objective on the positive/negative goodness gap.
//! - `DfMargin`: N-pair margin objective — hinge on the gap between the
//!   positive and the *strongest* negative (or the mean negative in `Avg`
//!   mode), plus a λ-weighted pull-down on that anchor so negatives cannot
//!   win by inflating all goodness together.
//!
//! Loss math runs in f64 on the goodness scalars; gradients are mapped back
//! to pre-activations through dg/dv = 2v.

use crate::error::{Error, Result};
use crate::layers::{Delta, Dense};
use crate::scalar::{neg_log_sigmoid, neg_log_sigmoid_grad, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_FF_THETA: f64 = 2.0;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegMode {
    /// Anchor on the strongest negative (ties resolve to the lowest index).
    Max,
    /// Anchor on the mean of the negatives.
    Avg,
}

impl NegMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(NegMode::Max),
            "avg" => Ok(NegMode::Avg),
            other => Err(Error::config(format!(
                "unknown negative mode '{other}' (expected max | avg)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Ff { theta: f64 },
    SymBa,
    DfMargin { margin: f64, lambda: f64, neg_mode: NegMode },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ff { .. } => "ff",
            LossKind::SymBa => "symba",
            LossKind::DfMargin { .. } => "df_margin",
        }
    }

    pub fn default_df() -> Self {
        LossKind::DfMargin {
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            neg_mode: NegMode::Max,
        }
    }
}

/// Per-row squared L2 norm over all non-batch dimensions, in f64.
pub fn goodness<T: Scalar>(v: &Tensor<T>) -> Vec<f64> {
    let rows = v.dim0();
    let rl = v.row_len();
    (0..rows)
        .map(|r| {
            v.data()[r * rl..(r + 1) * rl]
                .iter()
                .map(|a| {
                    let x = a.to_f64();
                    x * x
                })
                .sum()
        })
        .collect()
}

/// Value and per-row goodness gradient of a loss over an expanded batch.
pub struct LossOut {
    pub loss: f64,
    /// dL/dg per row, expanded-batch layout.
    pub dg: Vec<f64>,
    /// Mean positive-row goodness.
    pub mean_pos: f64,
    /// Mean negative-row goodness.
    pub mean_neg: f64,
}

impl LossOut {
    /// Mean positive minus mean negative goodness — the margin the decoder
    /// ultimately relies on.
    pub fn separation(&self) -> f64 {
        self.mean_pos - self.mean_neg
    }
}

fn check_layout(rows: usize, n_negs: usize) -> Result<usize> {
    if n_negs == 0 {
        return Err(Error::config("losses need at least one negative per sample"));
    }
    if rows == 0 || rows % (1 + n_negs) != 0 {
        return Err(Error::dim("goodness loss", &[rows], &[1 + n_negs]));
    }
    Ok(rows / (1 + n_negs))
}

/// Evaluate a goodness loss and its gradient on an expanded batch of
/// goodness values.
pub fn goodness_loss(kind: &LossKind, g: &[f64], n_negs: usize) -> Result<LossOut> {
    let n = n_negs;
    let b = check_layout(g.len(), n)?;
    let mut dg = vec![0.0f64; g.len()];
    let mut loss = 0.0f64;
    let mut sum_pos = 0.0f64;
    let mut sum_neg = 0.0f64;
    let bf = b as f64;
    let nf = n as f64;
    for i in 0..b {
        let pr = i * (1 + n);
        let gp = g[pr];
        sum_pos += gp;
        let negs = &g[pr + 1..pr + 1 + n];
        sum_neg += negs.iter().sum::<f64>();
        match *kind {
            LossKind::Ff { theta } => {
                loss += neg_log_sigmoid(gp - theta) / bf;
                dg[pr] += neg_log_sigmoid_grad(gp - theta) / bf;
                for (k, &gn) in negs.iter().enumerate() {
                    loss += neg_log_sigmoid(theta - gn) / (bf * nf);
                    dg[pr + 1 + k] -= neg_log_sigmoid_grad(theta - gn) / (bf * nf);
                }
            }
            LossKind::SymBa => {
                for (k, &gn) in negs.iter().enumerate() {
                    let d = gp - gn;
                    loss += neg_log_sigmoid(d) / (bf * nf);
                    let gr = neg_log_sigmoid_grad(d) / (bf * nf);
                    dg[pr] += gr;
                    dg[pr + 1 + k] -= gr;
                }
            }
            LossKind::DfMargin { margin, lambda, neg_mode } => {
                // Anchor over this sample's negatives.
                let (anchor, argmax) = {
                    let mut best = negs[0];
                    let mut bi = 0usize;
                    for (k, &gn) in negs.iter().enumerate().skip(1) {
                        if gn > best {
                            best = gn;
                            bi = k;
                        }
                    }
                    match neg_mode {
                        NegMode::Max => (best, bi),
                        NegMode::Avg => (negs.iter().sum::<f64>() / nf, 0),
                    }
                };
                let h = margin + anchor - gp;
                let hinge_on = h > 0.0;
                loss += (h.max(0.0) + lambda * anchor) / bf;
                if hinge_on {
                    dg[pr] -= 1.0 / bf;
                }
                let da = (if hinge_on { 1.0 } else { 0.0 } + lambda) / bf;
                match neg_mode {
                    NegMode::Max => dg[pr + 1 + argmax] += da,
                    NegMode::Avg => {
                        for k in 0..n {
                            dg[pr + 1 + k] += da / nf;
                        }
                    }
                }
            }
        }
    }
    Ok(LossOut {
        loss,
        dg,
        mean_pos: sum_pos / bf,
        mean_neg: sum_neg / (bf * nf),
    })
}

/// Mean positive-row goodness minus mean negative-row goodness.
pub fn goodness_separation(g: &[f64], n_negs: usize) -> Result<f64> {
    let b = check_layout(g.len(), n_negs)?;
    let mut sp = 0.0;
    let mut sn = 0.0;
    for i in 0..b {
        let pr = i * (1 + n_negs);
        sp += g[pr];
        sn += g[pr + 1..pr + 1 + n_negs].iter().sum::<f64>();
    }
    Ok(sp / b as f64 - sn / (b as f64 * n_negs as f64))
}

/// Evaluate a loss at a unit's goodness tap and chain the gradient back to
/// the pre-activation tensor: dL/dv_r = 2·dL/dg_r·v_r.
///
/// Rows whose goodness gradient is exactly zero (hinge-inactive positives,
/// non-anchor negatives under `Max`) are dropped from the returned delta's
/// active set, so downstream layers can skip them.
pub fn unit_loss_delta<T: Scalar>(
    kind: &LossKind,
    v: &Tensor<T>,
    n_negs: usize,
) -> Result<(LossOut, Delta<T>)> {
    let g = goodness(v);
    let out = goodness_loss(kind, &g, n_negs)?;
    let rows = v.dim0();
    let rl = v.row_len();
    let mut dv = Tensor::zeros(v.shape());
    let mut active = Vec::new();
    for r in 0..rows {
        let c = 2.0 * out.dg[r];
        if c == 0.0 {
            continue;
        }
        active.push(r);
        let src = &v.data()[r * rl..(r + 1) * rl];
        let dst = &mut dv.data_mut()[r * rl..(r + 1) * rl];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = T::from_f64(c * s.to_f64());
        }
    }
    let delta = if active.len() == rows {
        Delta::dense(dv)
    } else {
        Delta { t: dv, active: Some(active) }
    };
    Ok((out, delta))
}

/// Goodness of a first dense layer computed in split form for one-hot
/// label-replaced inputs: the label columns of W are separated out, the
/// image contribution is forwarded with the label slots zeroed, and the
/// label's own column is added back directly. Algebraically identical to
/// forwarding the replaced sample — the equivalence is what makes pixel
/// replacement readable as "image term minus label-prototype term".
pub fn split_goodness<T: Scalar>(
    layer: &Dense<T>,
    x: &Tensor<T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    let &[rows, d] = x.shape() else {
        return Err(Error::dim("split_goodness", x.shape(), &[0, layer.in_features]));
    };
    if d != layer.in_features || rows != labels.len() {
        return Err(Error::dim("split_goodness", x.shape(), &[labels.len(), layer.in_features]));
    }
    if num_classes > d {
        return Err(Error::config(format!(
            "split_goodness: {num_classes} label slots exceed input width {d}"
        )));
    }
    let out_f = layer.out_features;
    let w = layer.w.value.data();
    let b = layer.b.value.data();
    let mut g = Vec::with_capacity(rows);
    for (r, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::config(format!("label {label} out of range")));
        }
        let xr = x.row(r);
        let mut acc = 0.0f64;
        for o in 0..out_f {
            let wrow = &w[o * d..(o + 1) * d];
            // image term: label slots excluded
            let mut v: f64 = b[o].to_f64();
            for j in num_classes..d {
                v += wrow[j].to_f64() * xr[j].to_f64();
            }
            // label term: the one-hot picks out a single column
            v += wrow[label].to_f64();
            acc += v * v;
        }
        g.push(acc);
    }
    Ok(g)
}
