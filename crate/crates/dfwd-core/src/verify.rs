//! Runtime property suite: every core invariant re-checked on demand, in
//! f64, failing on the first violation with the offending module and
//! operation named. This is what `verify` runs in CI and what a user runs
//! after touching numerics.

use std::sync::Arc;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::DecodeConfig;
use crate::layers::Dense;
use crate::loss::{
    goodness, goodness_loss, split_goodness, unit_loss_delta, LossKind, NegMode,
};
use crate::model::{parse_arch, uniform_mlp, Model, Network};
use crate::optim::{adam_step, Param, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::profile::analytic_memory;
use crate::rng::{stream, substream};
use crate::samples::{make_batch, EmbedMode};
use crate::tensor::Tensor;
use crate::train::{build_network, Strategy, TrainConfig, Trainer};
use rand::Rng;

/// One named property check.
pub struct Check {
    pub module: &'static str,
    pub op: &'static str,
    pub run: fn() -> Result<()>,
}

fn fail(module: &'static str, op: &'static str, what: impl Into<String>) -> Error {
    Error::Verify { module, op, what: what.into() }
}

/// The full suite in execution order. Cheap checks first so broken builds
/// fail fast.
pub fn checks() -> Vec<Check> {
    vec![
        Check { module: "rng", op: "substream", run: rng_substreams },
        Check { module: "optim", op: "adam_step", run: adam_first_steps },
        Check { module: "loss", op: "unit_loss_delta", run: loss_gradients },
        Check { module: "loss", op: "margin_forms", run: margin_forms_agree },
        Check { module: "loss", op: "split_goodness", run: split_equivalence },
        Check { module: "layers", op: "batchnorm_forward", run: batchnorm_statistics },
        Check { module: "model", op: "window_gradients", run: window_gradients },
        Check { module: "trainer", op: "embedding_gradient", run: embedding_gradient },
        Check { module: "trainer", op: "locality", run: greedy_locality },
        Check { module: "trainer", op: "feedback", run: feedback_immutability },
        Check { module: "eval", op: "decode", run: decode_consistency },
        Check { module: "profiler", op: "analytic_memory", run: memory_ledger },
        Check { module: "checkpoint", op: "round_trip", run: checkpoint_round_trip },
    ]
}

/// Run every check, reporting each `(module/op, passed)` through the
/// callback. Stops at — and returns — the first violation.
pub fn run_all(mut progress: impl FnMut(&str, &str)) -> Result<usize> {
    let all = checks();
    let total = all.len();
    for c in all {
        (c.run)()?;
        progress(c.module, c.op);
    }
    Ok(total)
}

fn rng_substreams() -> Result<()> {
    let mut a1 = substream(7, stream::SHUFFLE);
    let mut a2 = substream(7, stream::SHUFFLE);
    let mut b = substream(7, stream::NEGATIVES);
    let mut c = substream(8, stream::SHUFFLE);
    let xs1: Vec<u64> = (0..32).map(|_| a1.random()).collect();
    let xs2: Vec<u64> = (0..32).map(|_| a2.random()).collect();
    let ys: Vec<u64> = (0..32).map(|_| b.random()).collect();
    let zs: Vec<u64> = (0..32).map(|_| c.random()).collect();
    if xs1 != xs2 {
        return Err(fail("rng", "substream", "same seed and name must replay identically"));
    }
    if xs1 == ys || xs1 == zs {
        return Err(fail("rng", "substream", "different name or seed must decorrelate"));
    }
    Ok(())
}

fn adam_first_steps() -> Result<()> {
    // hand-computed two steps at g = [1, -2], lr = 0.1
    let mut p: Param<f64> = Param::new(Tensor::zeros(&[2]));
    let mut expect = [0.0f64; 2];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for step in 1..=2 {
        p.grad = Tensor::from_vec(&[2], vec![1.0, -2.0])?;
        adam_step(&mut p, 0.1)?;
        for i in 0..2 {
            let g = [1.0, -2.0][i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m[i] / (1.0 - ADAM_BETA1.powi(step));
            let vh = v[i] / (1.0 - ADAM_BETA2.powi(step));
            expect[i] -= 0.1 * mh / (vh.sqrt() + ADAM_EPS);
            let got = p.value.data()[i];
            if (got - expect[i]).abs() > 1e-12 {
                return Err(fail(
                    "optim",
                    "adam_step",
                    format!("step {step} coord {i}: got {got}, expected {}", expect[i]),
                ));
            }
        }
        if p.grad.data().iter().any(|g| *g != 0.0) {
            return Err(fail("optim", "adam_step", "gradient must be zeroed after the step"));
        }
    }
    Ok(())
}

fn all_loss_kinds() -> Vec<LossKind> {
    vec![
        LossKind::Ff { theta: 2.0 },
        LossKind::SymBa,
        LossKind::DfMargin { margin: 1.0, lambda: 0.1, neg_mode: NegMode::Max },
        LossKind::DfMargin { margin: 1.0, lambda: 0.1, neg_mode: NegMode::Avg },
    ]
}

fn loss_gradients() -> Result<()> {
    // central finite differences on the goodness-loss gradient at v
    let mut rng = substream(11, stream::INIT);
    for kind in all_loss_kinds() {
        for &(b, n, d) in &[(2usize, 1usize, 3usize), (3, 2, 4)] {
            let rows = b * (1 + n);
            let data: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = Tensor::from_vec(&[rows, d], data)?;
            let (_, dv) = unit_loss_delta(&kind, &v, n)?;
            let h = 1e-6;
            for idx in (0..rows * d).step_by(3) {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp.data_mut()[idx] += h;
                vm.data_mut()[idx] -= h;
                let lp = goodness_loss(&kind, &goodness(&vp), n)?.loss;
                let lm = goodness_loss(&kind, &goodness(&vm), n)?.loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = dv.t.data()[idx];
                // skip kink neighborhoods (hinge boundary, argmax ties)
                if fd.abs() > 1e3 || (fd - an).abs() > 1e-5 * (1.0 + fd.abs()) {
                    let gs = goodness(&v);
                    if near_kink(&kind, &gs, n) {
                        continue;
                    }
                    return Err(fail(
                        "loss",
                        "unit_loss_delta",
                        format!("{} at coord {idx}: analytic {an} vs fd {fd}", kind.name()),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn near_kink(kind: &LossKind, g: &[f64], n: usize) -> bool {
    let LossKind::DfMargin { margin, neg_mode, .. } = kind else {
        return false;
    };
    let b = g.len() / (1 + n);
    for i in 0..b {
        let pos = g[i * (1 + n)];
        let negs = &g[i * (1 + n) + 1..(i + 1) * (1 + n)];
        let anchor = match neg_mode {
            NegMode::Max => negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            NegMode::Avg => negs.iter().sum::<f64>() / n as f64,
        };
        if (margin + anchor - pos).abs() < 1e-4 {
            return true;
        }
        if *neg_mode == NegMode::Max && n > 1 {
            let mut sorted = negs.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            if sorted[0] - sorted[1] < 1e-4 {
                return true;
            }
        }
    }
    false
}

fn margin_forms_agree() -> Result<()> {
    // hinge-of-sum and sum-of-parts forms of the margin loss must agree
    // bitwise: L = max(m + A - g_pos, 0) + λA computed directly, vs the
    // decomposed evaluation used by the library
    let mut rng = substream(13, stream::INIT);
    for trial in 0..200 {
        let (b, n) = (3usize, 2usize);
        let g: Vec<f64> = (0..b * (1 + n)).map(|_| rng.random_range(0.0..4.0)).collect();
        for neg_mode in [NegMode::Max, NegMode::Avg] {
            let kind = LossKind::DfMargin { margin: 1.0, lambda: 0.1, neg_mode };
            let lib = goodness_loss(&kind, &g, n)?.loss;
            let mut hand = 0.0f64;
            for i in 0..b {
                let pos = g[i * (1 + n)];
                let negs = &g[i * (1 + n) + 1..(i + 1) * (1 + n)];
                let a = match neg_mode {
                    NegMode::Max => negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    NegMode::Avg => negs.iter().sum::<f64>() / n as f64,
                };
                // same accumulation order as the library (divide per term)
                // so agreement is exact, not approximate
                hand += ((1.0 + a - pos).max(0.0) + 0.1 * a) / b as f64;
            }
            if lib.to_bits() != hand.to_bits() {
                return Err(fail(
                    "loss",
                    "margin_forms",
                    format!("trial {trial} {neg_mode:?}: library {lib} != direct {hand}"),
                ));
            }
        }
    }
    Ok(())
}

fn split_equivalence() -> Result<()> {
    // running the first dense layer on a label-blanked input and adding the
    // label column must reproduce the direct forward goodness
    let mut rng = substream(17, stream::INIT);
    for _ in 0..100 {
        let (k, d_in, d_out, rows) = (5usize, 12usize, 7usize, 6usize);
        let layer: Dense<f64> = Dense::new(d_in, d_out, &mut rng);
        let data: Vec<f64> = (0..rows * d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = Tensor::from_vec(&[rows, d_in], data)?;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        for (r, &l) in labels.iter().enumerate() {
            for c in 0..k {
                x.row_mut(r)[c] = if c == l { 1.0 } else { 0.0 };
            }
        }
        let direct: Vec<f64> = goodness(&layer.forward(&x)?);
        let split = split_goodness(&layer, &x, &labels, k)?;
        for (r, (d, s)) in direct.iter().zip(&split).enumerate() {
            if (d - s).abs() > 1e-9 * (1.0 + d.abs()) {
                return Err(fail(
                    "loss",
                    "split_goodness",
                    format!("row {r}: direct {d} vs split {s}"),
                ));
            }
        }
    }
    Ok(())
}

fn batchnorm_statistics() -> Result<()> {
    use crate::layers::BatchNorm;
    let mut rng = substream(19, stream::INIT);
    let mut bn: BatchNorm<f64> = BatchNorm::new(4);
    let data: Vec<f64> = (0..64 * 4).map(|_| rng.random_range(-3.0..5.0)).collect();
    let x = Tensor::from_vec(&[64, 4], data)?;
    let (y, _) = bn.forward_train(&x)?;
    for f in 0..4 {
        let col: Vec<f64> = (0..64).map(|r| y.data()[r * 4 + f]).collect();
        let mean = col.iter().sum::<f64>() / 64.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        if mean.abs() > 1e-10 || (var - 1.0).abs() > 1e-3 {
            return Err(fail(
                "layers",
                "batchnorm_forward",
                format!("feature {f}: normalized mean {mean}, var {var}"),
            ));
        }
    }
    Ok(())
}

/// Windowed gradients against finite differences of the summed window
/// losses — the end-to-end correctness check for DF-O.
fn window_gradients() -> Result<()> {
    let specs = parse_arch("flatten,bn,dense:6,relu,bn,dense:5,relu")?;
    let strategy = Strategy::DfO { group_size: 2 };
    let kind = LossKind::SymBa; // smooth everywhere: safe for FD
    let net: Network<f64> = build_network(
        &specs,
        &[1, 2, 4],
        3,
        &strategy,
        EmbedMode::LearnableChannel,
        23,
    )?;
    let mut rng = substream(29, stream::INIT);
    let images_data: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::from_vec(&[4, 1, 2, 4], images_data)?;
    let labels = vec![0usize, 1, 2, 0];
    let emb = net.embedding.as_ref().expect("df network has an embedding");
    let batch = make_batch(
        &images,
        &labels,
        &[0, 1, 2, 3],
        1,
        emb,
        &mut substream(31, stream::NEGATIVES),
    )?;

    // total windowed loss as a function of the current parameters
    let total_loss = |net: &mut Network<f64>| -> Result<f64> {
        let depth = net.model.depth();
        let mut cur = Arc::new(batch.x.clone());
        let mut total = 0.0;
        for j in 0..depth {
            let fwd = net.model.unit_forward_train(j, cur)?;
            cur = fwd.out.clone();
            total += unit_loss_delta(&kind, &fwd.v, batch.n_negs)?.0.loss;
        }
        Ok(total)
    };

    // analytic grads via one manual windowed backward (no optimizer step)
    let mut trainer = Trainer::new(
        net,
        TrainConfig {
            strategy,
            loss: kind.clone(),
            n_negs: 1,
            epochs: 1,
            lr: 0.0,
            seed: 23,
            ..TrainConfig::default()
        },
        4,
    )?;
    trainer.step_df(&batch)?;
    // batch-norm running stats moved during the gradient pass; freeze a
    // copy of the net for FD so both sides see identical forward stats
    let grads: Vec<Tensor<f64>> =
        trainer.net.params_mut().iter().map(|p| p.adam_m.clone()).collect();
    // adam with lr 0: m holds (1-β1)·g after one step, so recover g
    let scale = 1.0 / (1.0 - ADAM_BETA1);
    let h = 1e-5;
    let mut checked = 0usize;
    let n_params = grads.len();
    // the batch is frozen, so finite differences cannot see the embedding
    // table; its gradient has a dedicated check below
    let first = usize::from(trainer.net.embedding.is_some());
    for pi in first..n_params {
        let n_elems = grads[pi].len();
        for idx in (0..n_elems).step_by(7.max(n_elems / 5)) {
            let base = trainer.net.params_mut()[pi].value.data()[idx];
            trainer.net.params_mut()[pi].value.data_mut()[idx] = base + h;
            let lp = total_loss(&mut trainer.net)?;
            trainer.net.params_mut()[pi].value.data_mut()[idx] = base - h;
            let lm = total_loss(&mut trainer.net)?;
            trainer.net.params_mut()[pi].value.data_mut()[idx] = base;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[pi].data()[idx] * scale;
            if (fd - an).abs() > 5e-5 * (1.0 + fd.abs()) {
                return Err(fail(
                    "model",
                    "window_gradients",
                    format!("param {pi} coord {idx}: analytic {an} vs fd {fd}"),
                ));
            }
            checked += 1;
        }
    }
    if checked < 10 {
        return Err(fail("model", "window_gradients", "too few coordinates checked"));
    }
    Ok(())
}

/// The label-embedding table only reaches the loss through the encoded
/// channel of the first window's input, so its finite-difference check has
/// to rebuild the batch for every probe (same negatives each time).
fn embedding_gradient() -> Result<()> {
    let specs = parse_arch("flatten,bn,dense:8,relu")?;
    let strategy = Strategy::Greedy;
    let kind = LossKind::SymBa; // smooth everywhere: safe for FD
    let net: Network<f64> = build_network(
        &specs,
        &[1, 3, 3],
        3,
        &strategy,
        EmbedMode::LearnableChannel,
        59,
    )?;
    let mut rng = substream(61, stream::INIT);
    let images_data: Vec<f64> = (0..4 * 9).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::from_vec(&[4, 1, 3, 3], images_data)?;
    let labels = vec![0usize, 1, 2, 1];

    // depth 1: the whole loss is the first window's loss, the only place
    // the embedding participates
    let total_loss = |net: &mut Network<f64>| -> Result<f64> {
        let batch = {
            let emb = net.embedding.as_ref().expect("learnable embedding");
            make_batch(&images, &labels, &[0, 1, 2, 3], 1, emb, &mut substream(67, stream::NEGATIVES))?
        };
        let fwd = net.model.unit_forward_train(0, Arc::new(batch.x.clone()))?;
        Ok(unit_loss_delta(&kind, &fwd.v, batch.n_negs)?.0.loss)
    };

    let mut trainer = Trainer::new(
        net,
        TrainConfig {
            strategy,
            loss: kind.clone(),
            n_negs: 1,
            epochs: 1,
            lr: 0.0,
            seed: 59,
            ..TrainConfig::default()
        },
        4,
    )?;
    let batch = {
        let emb = trainer.net.embedding.as_ref().expect("learnable embedding");
        make_batch(&images, &labels, &[0, 1, 2, 3], 1, emb, &mut substream(67, stream::NEGATIVES))?
    };
    trainer.step_df(&batch)?;
    // adam with lr 0: m holds (1-β1)·g after one step (table is param 0)
    let table_grad = trainer.net.params_mut()[0].adam_m.clone();
    let scale = 1.0 / (1.0 - ADAM_BETA1);
    let h = 1e-5;
    for idx in 0..table_grad.len() {
        let base = trainer.net.params_mut()[0].value.data()[idx];
        trainer.net.params_mut()[0].value.data_mut()[idx] = base + h;
        let lp = total_loss(&mut trainer.net)?;
        trainer.net.params_mut()[0].value.data_mut()[idx] = base - h;
        let lm = total_loss(&mut trainer.net)?;
        trainer.net.params_mut()[0].value.data_mut()[idx] = base;
        let fd = (lp - lm) / (2.0 * h);
        let an = table_grad.data()[idx] * scale;
        if (fd - an).abs() > 5e-5 * (1.0 + fd.abs()) {
            return Err(fail(
                "trainer",
                "embedding_gradient",
                format!("table coord {idx}: analytic {an} vs fd {fd}"),
            ));
        }
    }
    Ok(())
}

fn greedy_locality() -> Result<()> {
    // with a window of 1, training unit j must leave every other unit's
    // parameters untouched
    let specs = uniform_mlp(3, 8);
    let mut rng = substream(37, stream::INIT);
    let mut model: Model<f64> = Model::build(specs, &[8], &mut rng)?;
    let x = crate::profile::synthetic_rows::<f64>(4, &[8], 41);
    let fwd0 = model.unit_forward_train(0, Arc::new(x))?;
    let fwd1 = model.unit_forward_train(1, fwd0.out.clone())?;
    let (_, dv) = unit_loss_delta(&LossKind::Ff { theta: 2.0 }, &fwd1.v, 1)?;
    model.unit_backward_from_core(&fwd1, dv)?;
    for (u, unit) in model.units.clone().iter().enumerate() {
        for li in unit.start..unit.end {
            for p in model.layers[li].params_mut() {
                let nz = p.grad.data().iter().any(|g| *g != 0.0);
                if u == 1 && !nz {
                    return Err(fail(
                        "trainer",
                        "locality",
                        format!("unit 1 layer {li} expected a gradient"),
                    ));
                }
                if u != 1 && nz {
                    return Err(fail(
                        "trainer",
                        "locality",
                        format!("unit {u} layer {li} must not receive gradient"),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn feedback_immutability() -> Result<()> {
    let ds = crate::data::synthetic::<f64>(64, 16, 4, 3);
    let strategy = Strategy::DfR { group_size: 2, feedback_scale: 1.0 };
    let net = build_network(
        &parse_arch("flatten,bn,dense:10,relu,bn,dense:10,relu")?,
        &[1, 8, 8],
        4,
        &strategy,
        EmbedMode::LearnableChannel,
        43,
    )?;
    let mut trainer = Trainer::new(
        net,
        TrainConfig { strategy, epochs: 2, batch_size: 16, seed: 43, ..TrainConfig::default() },
        64,
    )?;
    let before = trainer.feedback.as_ref().expect("df_r builds feedback").digest();
    trainer.fit(&ds.train, None)?;
    let after = trainer.feedback.as_ref().expect("still present").digest();
    if before != after {
        return Err(fail("trainer", "feedback", "projections changed during training"));
    }
    Ok(())
}

fn decode_consistency() -> Result<()> {
    // decoding must pick the label whose positive sample maximizes summed
    // goodness over the scored units
    let net: Network<f64> = build_network(
        &parse_arch("flatten,bn,dense:12,relu,bn,dense:12,relu")?,
        &[1, 3, 3],
        4,
        &Strategy::Greedy,
        EmbedMode::LearnableChannel,
        47,
    )?;
    let images = crate::profile::synthetic_rows::<f64>(5, &[1, 3, 3], 51);
    let cfg = DecodeConfig::default();
    let scores = crate::eval::decode_scores(&net, &images, cfg)?;
    let emb = net.embedding.as_ref().expect("df embedding");
    for (i, row) in scores.iter().enumerate() {
        for (label, expect) in row.iter().enumerate() {
            let one = images.gather_rows(&[i]);
            let pos = emb.make_positive(&one.clone().reshape(&[1, 3, 3])?, label)?;
            let mut shape = vec![1usize];
            shape.extend_from_slice(&net.model.input_shape);
            let (per_unit, _) = net
                .model
                .forward_eval_goodness(&pos.reshape(&shape)?)?;
            let manual: f64 = (cfg.skip_units.min(net.model.depth() - 1)..net.model.depth())
                .map(|u| per_unit[u][0])
                .sum();
            if (manual - expect).abs() > 1e-9 * (1.0 + manual.abs()) {
                return Err(fail(
                    "eval",
                    "decode",
                    format!("image {i} label {label}: batched {expect} vs manual {manual}"),
                ));
            }
        }
    }
    Ok(())
}

fn memory_ledger() -> Result<()> {
    let specs = uniform_mlp(11, 32);
    let bp = analytic_memory(&specs, &[32], &Strategy::Backprop, 4, 10)?;
    let dfo = analytic_memory(&specs, &[32], &Strategy::DfO { group_size: 2 }, 4, 10)?;
    let greedy = analytic_memory(&specs, &[32], &Strategy::Greedy, 4, 10)?;
    if dfo.act_elems_peak * 11 != bp.act_elems_peak * 2 {
        return Err(fail(
            "profiler",
            "analytic_memory",
            format!(
                "11-layer uniform ratio: dfo {} vs bp {} is not exactly 2/11",
                dfo.act_elems_peak, bp.act_elems_peak
            ),
        ));
    }
    if !(bp.act_elems_peak >= dfo.act_elems_peak && dfo.act_elems_peak >= greedy.act_elems_peak)
    {
        return Err(fail("profiler", "analytic_memory", "strategy ordering violated"));
    }
    Ok(())
}

fn checkpoint_round_trip() -> Result<()> {
    let net: Network<f32> = build_network(
        &parse_arch("flatten,bn,dense:9,relu,bn,dense:7,relu")?,
        &[1, 4, 4],
        5,
        &Strategy::DfO { group_size: 2 },
        EmbedMode::LearnableChannel,
        53,
    )?;
    let path = std::env::temp_dir().join(format!("verify-ckpt-{}", std::process::id()));
    checkpoint::save(&net, &path)?;
    let back: Network<f32> = checkpoint::load(&path)?;
    let _ = std::fs::remove_file(&path);
    let a: Vec<u32> = net
        .model
        .layers
        .iter()
        .flat_map(|l| l.params())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect();
    let b: Vec<u32> = back
        .model
        .layers
        .iter()
        .flat_map(|l| l.params())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect();
    if a != b {
        return Err(fail("checkpoint", "round_trip", "reloaded weights differ bitwise"));
    }
    let (ea, eb) = (
        net.embedding.as_ref().expect("embedding").table.value.data(),
        back.embedding.as_ref().expect("embedding").table.value.data(),
    );
    if ea != eb {
        return Err(fail("checkpoint", "round_trip", "reloaded embedding differs"));
    }
    Ok(())
}
