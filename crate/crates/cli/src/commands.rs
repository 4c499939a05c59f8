//! One function per subcommand. Each returns whether every requested
//! assertion held.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ibinn_core::data::{self, make_ood, LabeledSet, OodKind};
use ibinn_core::grad::grad_check;
use ibinn_core::metrics::{self, evaluate, roc_points, typicality_scores, CalibrationBins, EvalInputs};
use ibinn_core::model::IbInn;
use ibinn_core::objective::{add_noise, quantization_bound_check};
use ibinn_core::rng::{standard_normal, substream};
use ibinn_core::train::{gamma_sweep, init_model, sigma_sweep, sweep_csv, SweepRow, Trainer, STEP_LOG_HEADER};
use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::context::{parse_list, Run};
use crate::{BoundArgs, GradArgs, InterpolateArgs, OodArgs, SampleArgs, SweepArgs};

fn reliability(model: &IbInn, x: ArrayView2<f64>, labels: &[usize]) -> Result<String> {
    let mut bins = CalibrationBins::default();
    bins.add_posteriors(metrics::predict(model, x)?.view(), labels)?;
    Ok(bins.reliability_csv())
}

fn eval_inputs<'a>(split: &'a data::Split, ood: &'a [(String, Array2<f64>)]) -> EvalInputs<'a> {
    EvalInputs {
        train_x: split.train.x.view(),
        test_x: split.test.x.view(),
        test_labels: &split.test.labels,
        levels: split.test.levels,
        ood: ood.iter().map(|(n, x)| (n.clone(), x.view())).collect(),
    }
}

pub fn train(run: &mut Run, resume: Option<&Path>) -> Result<bool> {
    let split = run.load_data()?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = run.load_checkpoint(Some(path))?;
            Trainer::resume(run.config.clone(), ckpt)?
        }
        None => Trainer::new(run.config.clone(), &split.train)?,
    };
    let mut saved = Vec::new();
    trainer.run(&split.train, |t, event| {
        info!("checkpoint {event} at step {}", t.step());
        saved.push((event, t.checkpoint()));
        Ok(())
    })?;
    for (event, bytes) in &saved {
        let name = match event {
            ibinn_core::train::CheckpointEvent::Final => "checkpoint.ibinn".to_string(),
            other => format!("checkpoint-{other}.ibinn"),
        };
        run.write(&name, bytes)?;
    }
    let mut log = String::from(STEP_LOG_HEADER);
    log.push('\n');
    for r in trainer.log() {
        log.push_str(&r.csv_row());
        log.push('\n');
    }
    run.write("steps.csv", log)?;

    let model = trainer.model();
    let objective = run.config.loss_config()?.objective;
    let report = evaluate(model, &eval_inputs(&split, &[]), objective, run.config.sigma, run.config.seed)?;
    run.write_json("metrics.json", &report)?;
    run.write("reliability.csv", reliability(model, split.test.x.view(), &split.test.labels)?)?;
    Ok(true)
}

pub fn eval(run: &mut Run, ckpt: Option<&Path>) -> Result<bool> {
    let model = run.load_checkpoint(ckpt)?.model;
    let split = run.load_data()?;
    ensure!(split.test.dim() == model.dim(), "checkpoint has d={} but data has d={}", model.dim(), split.test.dim());
    let objective = run.config.loss_config()?.objective;
    let report = evaluate(&model, &eval_inputs(&split, &[]), objective, run.config.sigma, run.config.seed)?;
    println!(
        "error {:.2}%  bits/dim {}  ECE {:.4}",
        report.error_pct,
        report.bits_per_dim.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into()),
        report.ece
    );
    run.write_json("metrics.json", &report)?;
    run.write("reliability.csv", reliability(&model, split.test.x.view(), &split.test.labels)?)?;
    Ok(true)
}

#[derive(Serialize)]
struct OodRow {
    kind: String,
    strength: f64,
    entropy_increase: f64,
    typicality_auc: f64,
}

pub fn ood(run: &mut Run, ckpt: Option<&Path>, args: &OodArgs) -> Result<bool> {
    let model = run.load_checkpoint(ckpt)?.model;
    let split = run.load_data()?;
    let kinds: Vec<OodKind> = match &args.kinds {
        Some(list) => list.split(',').map(|k| k.trim().parse()).collect::<ibinn_core::Result<_>>()?,
        None => OodKind::ALL.to_vec(),
    };
    run.option("kinds", kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
    if let Some(s) = args.strength {
        run.option("strength", s);
    }

    let probs_in = metrics::predict(&model, split.test.x.view())?;
    let h = metrics::nll(&model, split.train.x.view())?.mean().context("empty training set")?;
    let in_scores = typicality_scores(&model, split.test.x.view(), h)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for kind in kinds {
        let strength = args.strength.unwrap_or(kind.default_strength());
        let x = make_ood(&run.config.data, &split.test, kind, strength)?;
        let probs = metrics::predict(&model, x.view())?;
        let scores = typicality_scores(&model, x.view(), h)?;
        let row = OodRow {
            kind: kind.to_string(),
            strength,
            entropy_increase: metrics::entropy_increase(probs_in.view(), probs.view())?,
            typicality_auc: metrics::roc_auc(&in_scores, &scores)?.auc,
        };
        println!("{:8} entropy increase {:+.4} nats  AUC {:.1}", row.kind, row.entropy_increase, row.typicality_auc);
        if args.min_auc.is_some_and(|m| row.typicality_auc < m) || (args.require_entropy_increase && row.entropy_increase <= 0.0) {
            ok = false;
        }
        let mut roc = String::from("fpr,tpr\n");
        for (f, t) in roc_points(&in_scores, &scores) {
            roc.push_str(&format!("{f},{t}\n"));
        }
        run.write(&format!("roc-{kind}.csv"), roc)?;
        if args.save_sets {
            let set = data::unlabeled(x, split.test.classes, split.test.levels);
            run.write(&format!("ood-{kind}.csv"), data::to_csv(&set))?;
        }
        rows.push(row);
    }
    if let Some(m) = args.min_auc {
        run.option("min_auc", m);
    }
    run.option("require_entropy_increase", args.require_entropy_increase);
    run.write_json("ood.json", &rows)?;
    Ok(ok)
}

pub fn sample(run: &mut Run, ckpt: Option<&Path>, args: &SampleArgs) -> Result<bool> {
    let model = run.load_checkpoint(ckpt)?.model;
    let k = model.classes();
    ensure!((1..=k).contains(&args.class), "class {} not in 1..={k}", args.class);
    ensure!(args.temperature >= 0.0 && args.temperature.is_finite(), "temperature must be >= 0");
    run.option("class", args.class);
    run.option("count", args.count);
    run.option("temperature", args.temperature);
    let y = args.class - 1;
    let x = if args.count == 0 {
        Array2::zeros((0, model.dim()))
    } else {
        let mut rng = substream(run.config.seed, "sample", y as u64);
        let z = model.gmm.sample_latent(y, args.count, args.temperature, &mut rng)?;
        model.flow.inverse(z.view())?
    };
    let set = LabeledSet::new(x, vec![y; args.count], k, None)?;
    run.write("samples.csv", data::to_csv(&set))?;
    Ok(true)
}

pub fn interpolate(run: &mut Run, ckpt: Option<&Path>, args: &InterpolateArgs) -> Result<bool> {
    if args.steps < 2 {
        bail!("interpolation needs at least 2 steps, got {}", args.steps);
    }
    let model = run.load_checkpoint(ckpt)?.model;
    let a = Array1::from(parse_list(&args.from)?);
    let b = Array1::from(parse_list(&args.to)?);
    ensure!(a.len() == model.dim() && b.len() == model.dim(), "endpoints must have {} coordinates", model.dim());
    run.option("from", &args.from);
    run.option("to", &args.to);
    run.option("steps", args.steps);
    let ends = ndarray::stack(Axis(0), &[a.view(), b.view()])?;
    let (z, _) = model.flow.forward(ends.view())?;
    let zs = Array2::from_shape_fn((args.steps, model.dim()), |(i, j)| {
        let t = i as f64 / (args.steps - 1) as f64;
        (1.0 - t) * z[[0, j]] + t * z[[1, j]]
    });
    let xs = model.flow.inverse(zs.view())?;
    let mut out = String::from("step,t");
    for j in 1..=model.dim() {
        out.push_str(&format!(",x_{j}"));
    }
    out.push('\n');
    for (i, row) in xs.rows().into_iter().enumerate() {
        out.push_str(&format!("{i},{}", i as f64 / (args.steps - 1) as f64));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    run.write("trajectory.csv", out)?;
    Ok(true)
}

pub fn gradcheck(run: &mut Run, ckpt: Option<&Path>, args: &GradArgs) -> Result<bool> {
    let split = run.load_data()?;
    let n = args.batch.min(split.train.len());
    ensure!(n > 0, "empty training set");
    let batch = split.train.x.slice(ndarray::s![..n, ..]).to_owned();
    let labels = &split.train.labels[..n];
    let noisy = add_noise(batch.view(), run.config.sigma, &mut substream(run.config.seed, "gradcheck-noise", 0))?;
    let model = match ckpt {
        Some(p) => run.load_checkpoint(Some(p))?.model,
        None => {
            let mut m = init_model(&run.config, split.train.dim(), split.train.classes)?;
            m.flow.init_scaling(noisy.view())?;
            m
        }
    };
    run.option("batch", n);
    run.option("coords", args.coords);
    run.option("step", args.step);
    run.option("tol", args.tol);
    let loss = run.config.loss_config()?;
    let mut rng = substream(run.config.seed, "gradcheck", 0);
    let report = grad_check(&model, noisy.view(), labels, &loss, args.coords, args.step, args.tol, &mut rng)?;
    println!(
        "{}: max rel. error {:.3e} over {} coordinates ({} skipped at kinks)",
        if report.passed { "passed" } else { "FAILED" },
        report.max_rel_error,
        report.coordinates.len(),
        report.skipped_kinks
    );
    run.write_json("gradcheck.json", &report)?;
    Ok(report.passed)
}

fn write_sweep(run: &mut Run, rows: &[SweepRow]) -> Result<()> {
    for r in rows {
        if let Some(e) = &r.error {
            log::warn!("run gamma={:?} sigma={} failed: {e}", r.gamma, r.sigma);
        }
    }
    run.write("sweep.csv", sweep_csv(rows))?;
    run.write_json("sweep.json", &rows)
}

fn sweep_ood(run: &Run, split: &data::Split, with_ood: bool) -> Result<Vec<(String, Array2<f64>)>> {
    if !with_ood {
        return Ok(Vec::new());
    }
    OodKind::ALL
        .iter()
        .map(|&k| Ok((k.to_string(), make_ood(&run.config.data, &split.test, k, k.default_strength())?)))
        .collect()
}

fn views(sets: &[(String, Array2<f64>)]) -> Vec<(String, ArrayView2<'_, f64>)> {
    sets.iter().map(|(n, x)| (n.clone(), x.view())).collect()
}

pub fn sigma_sweep_cmd(run: &mut Run, args: &SweepArgs) -> Result<bool> {
    let sigmas = parse_list(&args.values)?;
    run.option("sigmas", &args.values);
    run.option("with_ood", args.with_ood);
    let split = run.load_data()?;
    let ood = sweep_ood(run, &split, args.with_ood)?;
    let rows = sigma_sweep(&run.config, &sigmas, &split, &views(&ood))?;
    write_sweep(run, &rows)?;
    if !args.check {
        return Ok(true);
    }
    run.option("check", true);
    // flat (+-1%) below a quarter of the quantization step
    let dx = split.train.delta_x().context("flatness check needs quantized data")?;
    let small: Vec<f64> = rows.iter().filter(|r| r.sigma < 0.25 * dx).filter_map(|r| r.test_lx).collect();
    ensure!(small.len() >= 2, "flatness check needs two successful runs with sigma < {}", 0.25 * dx);
    let mean = small.iter().sum::<f64>() / small.len() as f64;
    let spread = small.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - small.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let rel = spread / mean.abs();
    println!("relative spread of test L_X for sigma < dX/4: {:.3}%", 100.0 * rel);
    Ok(rel < 0.01 && rows.iter().all(|r| r.error.is_none()))
}

pub fn gamma_sweep_cmd(run: &mut Run, args: &SweepArgs) -> Result<bool> {
    let gammas = parse_list(&args.values)?;
    run.option("gammas", &args.values);
    run.option("with_ood", args.with_ood);
    let split = run.load_data()?;
    let ood = sweep_ood(run, &split, args.with_ood)?;
    let rows = gamma_sweep(&run.config, &gammas, &split, &views(&ood))?;
    write_sweep(run, &rows)?;
    if !args.check {
        return Ok(true);
    }
    run.option("check", true);
    // accuracy should not drop from the smallest to the largest gamma
    let by_gamma = |pick: fn(f64, f64) -> bool| {
        rows.iter()
            .filter(|r| r.gamma.is_some_and(|g| g > 0.0))
            .reduce(|a, b| if pick(b.gamma.unwrap(), a.gamma.unwrap()) { b } else { a })
    };
    let (lo, hi) = (by_gamma(|a, b| a < b), by_gamma(|a, b| a > b));
    let (Some(lo), Some(hi)) = (lo, hi) else { bail!("trend check needs two positive gammas") };
    let (Some(ml), Some(mh)) = (&lo.metrics, &hi.metrics) else { return Ok(false) };
    println!("accuracy: gamma {} -> {:.2}%, gamma {} -> {:.2}%", lo.gamma.unwrap(), 100.0 * ml.accuracy, hi.gamma.unwrap(), 100.0 * mh.accuracy);
    Ok(mh.accuracy >= ml.accuracy)
}

#[derive(Serialize)]
struct BoundRow {
    sigma: f64,
    max_error: f64,
    bound: f64,
    holds: bool,
    recovered: Vec<f64>,
}

#[derive(Serialize)]
struct BoundReport {
    levels: u32,
    distribution: Vec<f64>,
    rows: Vec<BoundRow>,
}

pub fn bound_check(run: &mut Run, args: &BoundArgs) -> Result<bool> {
    let levels = args.levels.or(run.config.data.levels).context("bound check needs --levels")?;
    ensure!(levels >= 2, "need at least 2 levels");
    let p = match &args.probs {
        Some(list) => {
            let p = parse_list(list)?;
            ensure!(p.len() == levels as usize, "{} probabilities for {levels} levels", p.len());
            p
        }
        None => {
            let mut rng = substream(run.config.seed, "bound-check", 0);
            let raw: Vec<f64> = (0..levels).map(|_| standard_normal(&mut rng).exp()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        }
    };
    let sigmas = match &args.sigmas {
        Some(list) => parse_list(list)?,
        None => vec![run.config.sigma],
    };
    run.option("levels", levels);
    if let Some(s) = &args.sigmas {
        run.option("sigmas", s);
    }
    if let Some(pr) = &args.probs {
        run.option("probs", pr);
    }
    let dx = 1.0 / levels as f64;
    let mut rows = Vec::new();
    for sigma in sigmas {
        let check = quantization_bound_check(&p, dx, sigma)?;
        println!("sigma {sigma:e}: max |dP| {:.3e} <= bound {:.3e}: {}", check.max_error, check.bound, check.holds());
        rows.push(BoundRow { sigma, max_error: check.max_error, bound: check.bound, holds: check.holds(), recovered: check.recovered });
    }
    let ok = rows.iter().all(|r| r.holds);
    run.write_json("bound.json", &BoundReport { levels, distribution: p, rows })?;
    Ok(ok)
}
