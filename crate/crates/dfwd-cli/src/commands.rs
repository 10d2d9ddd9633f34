//! The five subcommands. Each resolves a [`RunContext`], does its work
//! through the library, and leaves a manifest plus CSV artifacts in the
//! output directory.

use dfwd_core::checkpoint;
use dfwd_core::eval::{self, levels, DecodeConfig};
use dfwd_core::metrics::{num, Csv};
use dfwd_core::model::Model;
use dfwd_core::profile::{
    self, analytic_memory, linear_fit, measured_bp_step_peak, measured_df_step_peak,
    synthetic_rows,
};
use dfwd_core::rng::{stream, substream, substream_indexed};
use dfwd_core::train::{build_network, EpochStats};
use dfwd_core::{
    parse_arch, uniform_mlp, Dense, Error, Network, Result, SampleBatch, Strategy, Trainer,
};

use crate::context;
use crate::{EvalArgs, ProfileArgs, RobustnessArgs, TrainArgs, VerifyArgs};

pub fn train(args: &TrainArgs) -> Result<()> {
    let ctx = context::resolve(&args.common)?;
    let (ds, norm_note) = ctx.load_dataset()?;
    println!(
        "dataset {}: {} train / {} test images, {}",
        ds.name,
        ds.train.len(),
        ds.test.len(),
        norm_note
    );
    let specs = parse_arch(&ctx.cfg.arch)?;
    let net = build_network::<f32>(
        &specs,
        &ds.image_shape,
        ds.num_classes,
        &ctx.cfg.strategy_kind()?,
        ctx.cfg.embed_mode()?,
        ctx.cfg.seed,
    )?;
    let mut trainer = Trainer::new(net, ctx.cfg.train_config()?, ds.train.len())?;
    for w in &trainer.warnings {
        eprintln!("warning: {w}");
    }
    let depth = trainer.net.model.depth();
    let mut header: Vec<String> = ["epoch", "mean_loss", "test_accuracy", "wall_secs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..depth).map(|u| format!("sep_unit{u}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);

    let test = (!ds.test.is_empty()).then_some(&ds.test);
    let fit = trainer.fit_with(&ds.train, test, |ep| println!("{}", epoch_line(ep)))?;
    for ep in &fit.epochs {
        let mut row = vec![
            ep.epoch.to_string(),
            num(ep.mean_loss),
            ep.test_accuracy.map(num).unwrap_or_default(),
            num(ep.wall_secs),
        ];
        row.extend(ep.per_unit_separation.iter().map(|s| num(*s)));
        csv.push(row)?;
    }
    let csv_path = ctx.out.join("train_metrics.csv");
    csv.write(&csv_path)?;
    let ckpt_path = ctx.out.join("checkpoint.dfwd");
    let digest = checkpoint::save(&trainer.net, &ckpt_path)?;

    let final_acc = fit.epochs.last().and_then(|e| e.test_accuracy);
    let mut extra = vec![
        ("checkpoint".to_string(), context::rel_name(&ckpt_path)),
        ("checkpoint_sha256".to_string(), digest.clone()),
        ("metrics".to_string(), context::rel_name(&csv_path)),
        ("train_wall_secs".to_string(), format!("{:.1}", fit.wall_secs)),
    ];
    if let Some(acc) = final_acc {
        extra.push(("final_test_accuracy".to_string(), num(acc)));
    }
    ctx.write_manifest("train", &extra)?;
    match final_acc {
        Some(acc) => println!(
            "done in {:.1}s: test accuracy {:.4}, checkpoint {} (sha256 {})",
            fit.wall_secs,
            acc,
            ckpt_path.display(),
            &digest[..12]
        ),
        None => println!(
            "done in {:.1}s, checkpoint {} (sha256 {})",
            fit.wall_secs,
            ckpt_path.display(),
            &digest[..12]
        ),
    }
    Ok(())
}

fn epoch_line(ep: &EpochStats) -> String {
    let acc = match ep.test_accuracy {
        Some(a) => format!("{a:.4}"),
        None => "-".to_string(),
    };
    format!(
        "epoch {:>3}  loss {:<9.5}  test_acc {acc}  {:.1}s",
        ep.epoch, ep.mean_loss, ep.wall_secs
    )
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ctx = context::resolve(&args.common)?;
    let (ds, _) = ctx.load_dataset()?;
    let net: Network<f32> = checkpoint::load(&args.checkpoint)?;
    let digest = checkpoint::file_digest(&args.checkpoint)?;
    let decode_cfg = DecodeConfig { skip_units: ctx.cfg.skip_units };
    let overall = eval::accuracy(&net, &ds.test.images, &ds.test.labels, decode_cfg)?;
    println!("overall accuracy: {:.4} ({} test images)", overall, ds.test.len());

    let mut csv = Csv::new(&["unit", "decode_accuracy", "separation"]);
    // per-unit decode only applies to goodness-decoded (label-embedding)
    // networks; the end-to-end baseline classifies through its head alone
    if net.embedding.is_some() {
        let per_unit = eval::per_unit_accuracy(&net, &ds.test.images, &ds.test.labels)?;
        let sep = eval::per_unit_separation(
            &net,
            &ds.test.images,
            &ds.test.labels,
            ctx.cfg.n_negs.max(1),
            ctx.cfg.seed,
        )?;
        for (u, (a, s)) in per_unit.iter().zip(&sep).enumerate() {
            println!("  unit {u}: decode accuracy {a:.4}  goodness separation {s:.4}");
            csv.push(vec![u.to_string(), num(*a), num(*s)])?;
        }
    }
    csv.push(vec!["overall".to_string(), num(overall), String::new()])?;
    let csv_path = ctx.out.join("eval_metrics.csv");
    csv.write(&csv_path)?;
    ctx.write_manifest(
        "eval",
        &[
            ("checkpoint".to_string(), args.checkpoint.display().to_string()),
            ("checkpoint_sha256".to_string(), digest),
            ("metrics".to_string(), context::rel_name(&csv_path)),
            ("overall_accuracy".to_string(), num(overall)),
        ],
    )?;
    Ok(())
}

pub fn robustness(args: &RobustnessArgs) -> Result<()> {
    let ctx = context::resolve(&args.common)?;
    // input noise acts on raw [0,1] pixels, so standardization happens
    // *after* corruption: keep the test split raw and fit the normalizer
    // on the raw training pixels, exactly as the training run did
    let (mut ds, norm) = ctx.load_dataset_raw()?;
    if let Some(n) = &norm {
        n.apply(&mut ds.train.images)?;
    }
    let prep = |raw: &dfwd_core::Tensor<f32>| -> Result<dfwd_core::Tensor<f32>> {
        let mut x = raw.clone();
        if let Some(n) = &norm {
            n.apply(&mut x)?;
        }
        Ok(x)
    };
    let net: Network<f32> = checkpoint::load(&args.checkpoint)?;
    let digest = checkpoint::file_digest(&args.checkpoint)?;
    let decode_cfg = DecodeConfig { skip_units: ctx.cfg.skip_units };
    let kinds: Vec<&str> = args.kinds.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for k in &kinds {
        if !matches!(*k, "poisson" | "impulse" | "quant" | "grad_noise") {
            return Err(Error::config(format!(
                "unknown sweep kind '{k}' (expected poisson | impulse | quant | grad_noise)"
            )));
        }
    }

    let mut csv = Csv::new(&["kind", "level", "param", "accuracy"]);
    let clean_test = prep(&ds.test.images)?;
    let clean = eval::accuracy(&net, &clean_test, &ds.test.labels, decode_cfg)?;
    println!("clean accuracy: {clean:.4}");
    csv.push(vec!["none".into(), "0".into(), String::new(), num(clean)])?;

    // each (kind, level) draws from its own substream so sweeps are
    // reproducible independently of ordering or kind selection
    for kind in &kinds {
        match *kind {
            "poisson" => {
                for (li, &lambda) in levels::POISSON_LAMBDA.iter().enumerate() {
                    let mut images = ds.test.images.clone();
                    let mut rng =
                        substream_indexed(ctx.cfg.seed, stream::EVAL_NOISE, 100 + li as u64);
                    eval::poisson_noise(&mut images, lambda, &mut rng);
                    let images = prep(&images)?;
                    let acc = eval::accuracy(&net, &images, &ds.test.labels, decode_cfg)?;
                    println!("poisson L{} (lambda {lambda}): {acc:.4}", li + 1);
                    csv.push(vec![
                        "poisson".into(),
                        (li + 1).to_string(),
                        num(lambda),
                        num(acc),
                    ])?;
                }
            }
            "impulse" => {
                for (li, &p) in levels::IMPULSE_P.iter().enumerate() {
                    let mut images = ds.test.images.clone();
                    let mut rng =
                        substream_indexed(ctx.cfg.seed, stream::EVAL_NOISE, 200 + li as u64);
                    eval::impulse_noise(&mut images, p, &mut rng);
                    let images = prep(&images)?;
                    let acc = eval::accuracy(&net, &images, &ds.test.labels, decode_cfg)?;
                    println!("impulse L{} (p {p}): {acc:.4}", li + 1);
                    csv.push(vec![
                        "impulse".into(),
                        (li + 1).to_string(),
                        num(p),
                        num(acc),
                    ])?;
                }
            }
            "quant" => {
                for (li, &bits) in [8u32, 6, 5, 4].iter().enumerate() {
                    let mut q: Network<f32> = checkpoint::load(&args.checkpoint)?;
                    eval::quantize_weights(&mut q, bits)?;
                    let acc = eval::accuracy(&q, &clean_test, &ds.test.labels, decode_cfg)?;
                    println!("quant L{} ({bits}-bit weights): {acc:.4}", li + 1);
                    csv.push(vec![
                        "quant".into(),
                        (li + 1).to_string(),
                        bits.to_string(),
                        num(acc),
                    ])?;
                }
            }
            "grad_noise" => {
                // training-time noise: retrain the configured model once per
                // level (slow; opt-in through --kinds)
                for (li, &sigma) in levels::GRAD_NOISE_SIGMA.iter().enumerate() {
                    let mut cfg = ctx.cfg.clone();
                    cfg.grad_noise_sigma = sigma;
                    println!("grad_noise L{} (sigma {sigma}): training {} epochs...", li + 1, cfg.epochs);
                    let specs = parse_arch(&cfg.arch)?;
                    let net = build_network::<f32>(
                        &specs,
                        &ds.image_shape,
                        ds.num_classes,
                        &cfg.strategy_kind()?,
                        cfg.embed_mode()?,
                        cfg.seed,
                    )?;
                    let mut trainer = Trainer::new(net, cfg.train_config()?, ds.train.len())?;
                    trainer.fit(&ds.train, None)?;
                    let acc =
                        eval::accuracy(&trainer.net, &clean_test, &ds.test.labels, decode_cfg)?;
                    println!("grad_noise L{} (sigma {sigma}): {acc:.4}", li + 1);
                    csv.push(vec![
                        "grad_noise".into(),
                        (li + 1).to_string(),
                        num(sigma),
                        num(acc),
                    ])?;
                }
            }
            _ => unreachable!("validated above"),
        }
    }
    let csv_path = ctx.out.join("robustness.csv");
    csv.write(&csv_path)?;
    ctx.write_manifest(
        "robustness",
        &[
            ("checkpoint".to_string(), args.checkpoint.display().to_string()),
            ("checkpoint_sha256".to_string(), digest),
            ("kinds".to_string(), kinds.join(",")),
            ("metrics".to_string(), context::rel_name(&csv_path)),
        ],
    )?;
    Ok(())
}

pub fn profile(args: &ProfileArgs) -> Result<()> {
    let ctx = context::resolve(&args.common)?;
    let strategies: Vec<Strategy> = args
        .strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Strategy::parse(s, ctx.cfg.group_size, ctx.cfg.feedback_scale))
        .collect::<Result<_>>()?;
    let depths: Vec<usize> = args
        .depths
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::config(format!("bad depth '{s}': {e}")))
        })
        .collect::<Result<_>>()?;
    if depths.iter().any(|&d| d == 0) {
        return Err(Error::config("depth 0 has nothing to profile"));
    }
    let rows = args.batch;
    // local strategies run on expanded rows with one negative per positive
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::config("--batch must be an even number of rows (one negative per positive)"));
    }
    let loss = ctx.cfg.loss_kind()?;
    let num_classes = 10usize;
    let width = args.width;

    let mut csv = Csv::new(&[
        "strategy",
        "depth",
        "batch",
        "param_elems",
        "opt_elems",
        "act_elems_peak",
        "measured_peak_bytes",
        "backward_ms_median",
        "backward_ms_iqr",
        "critical_ms_median",
        "critical_ms_iqr",
    ]);
    // (depth, serialized median) for backprop; (depth, critical-path median)
    // per local strategy — fitted after the sweep
    let mut bp_series: Vec<(f64, f64)> = Vec::new();
    let mut local_series: Vec<(String, f64, f64)> = Vec::new();

    for &depth in &depths {
        let specs = uniform_mlp(depth, width);
        for strategy in &strategies {
            let ledger = analytic_memory(&specs, &[width], strategy, rows, num_classes)?;
            let cell_seed = ctx.cfg.seed.wrapping_add(depth as u64);

            let mut rng = substream(cell_seed, stream::INIT);
            let model: Model<f32> = Model::build(specs.clone(), &[width], &mut rng)?;
            let head = (*strategy == Strategy::Backprop)
                .then(|| Dense::new(width, num_classes, &mut rng));
            let mut net = Network { model, embedding: None, head, num_classes };
            let x = synthetic_rows::<f32>(rows, &[width], cell_seed ^ 0x5eed);
            let labels: Vec<usize> = (0..rows).map(|i| i % num_classes).collect();
            let bp_labels: &[usize] =
                if *strategy == Strategy::Backprop { &labels } else { &[] };
            let stats = profile::backward_time(
                &mut net,
                strategy,
                &loss,
                &x,
                1,
                bp_labels,
                args.reps,
                args.warmups,
            )?;

            // measured step peak on a fresh trainer: one warmup step settles
            // one-time allocations, the second step is measured
            let mut rng = substream(cell_seed, stream::INIT);
            let model: Model<f32> = Model::build(specs.clone(), &[width], &mut rng)?;
            let head = (*strategy == Strategy::Backprop)
                .then(|| Dense::new(width, num_classes, &mut rng));
            let net = Network { model, embedding: None, head, num_classes };
            let tc = dfwd_core::TrainConfig {
                strategy: *strategy,
                loss: loss.clone(),
                n_negs: 1,
                batch_size: rows,
                seed: cell_seed,
                ..dfwd_core::TrainConfig::default()
            };
            let mut trainer = Trainer::new(net, tc, rows)?;
            let measured = if *strategy == Strategy::Backprop {
                let _ = trainer.step_bp(&x, &labels)?;
                measured_bp_step_peak(&mut trainer, &x, &labels)?
            } else {
                let b = rows / 2;
                let batch = SampleBatch {
                    x: x.clone(),
                    true_labels: (0..b).map(|i| i % num_classes).collect(),
                    neg_labels: (0..b).map(|i| vec![(i + 1) % num_classes]).collect(),
                    n_negs: 1,
                };
                let _ = trainer.step_df(&batch)?;
                measured_df_step_peak(&mut trainer, &batch)?
            };

            println!(
                "{:<8} depth {:>2}: params {:>9}, stored acts {:>9} elems, step peak {}, backward {:.3} ms (critical {:.3} ms)",
                strategy.name(),
                depth,
                ledger.param_elems,
                ledger.act_elems_peak,
                measured
                    .map(|b| format!("{:.1} MiB", b as f64 / (1024.0 * 1024.0)))
                    .unwrap_or_else(|| "n/a".to_string()),
                stats.median_ms,
                stats.critical_median_ms,
            );
            if *strategy == Strategy::Backprop {
                bp_series.push((depth as f64, stats.median_ms));
            } else {
                local_series.push((
                    strategy.name().to_string(),
                    depth as f64,
                    stats.critical_median_ms,
                ));
            }
            csv.push(vec![
                strategy.name().to_string(),
                depth.to_string(),
                rows.to_string(),
                ledger.param_elems.to_string(),
                ledger.opt_elems.to_string(),
                ledger.act_elems_peak.to_string(),
                measured.map(|b| b.to_string()).unwrap_or_default(),
                num(stats.median_ms),
                num(stats.iqr_ms),
                num(stats.critical_median_ms),
                num(stats.critical_iqr_ms),
            ])?;
        }
    }

    if bp_series.len() >= 3 {
        let xs: Vec<f64> = bp_series.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = bp_series.iter().map(|p| p.1).collect();
        let (slope, _, r2) = linear_fit(&xs, &ys);
        println!("backprop serialized backward vs depth: slope {slope:.4} ms/layer (R² {r2:.3})");
    }
    for name in ["greedy", "df_o", "df_r"] {
        let pts: Vec<(f64, f64)> =
            local_series.iter().filter(|s| s.0 == name).map(|s| (s.1, s.2)).collect();
        if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (slope, _, r2) = linear_fit(&xs, &ys);
            println!("{name} critical-path backward vs depth: slope {slope:.4} ms/layer (R² {r2:.3})");
        }
    }

    let csv_path = ctx.out.join("profile.csv");
    csv.write(&csv_path)?;
    ctx.write_manifest(
        "profile",
        &[
            ("strategies".to_string(), args.strategies.clone()),
            ("depths".to_string(), args.depths.clone()),
            ("width".to_string(), width.to_string()),
            ("batch".to_string(), rows.to_string()),
            ("reps".to_string(), args.reps.to_string()),
            ("warmups".to_string(), args.warmups.to_string()),
            ("metrics".to_string(), context::rel_name(&csv_path)),
        ],
    )?;
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let ctx = context::resolve(&args.common)?;
    let n = dfwd_core::verify::run_all(|module, op| println!("ok {module}/{op}"))?;
    println!("all {n} checks passed");
    ctx.write_manifest("verify", &[("checks_passed".to_string(), n.to_string())])?;
    Ok(())
}
