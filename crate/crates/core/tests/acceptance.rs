//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails, except those listed as known
//! unattainable (their line still reads FAIL).

use std::time::{Duration, Instant};

use ptmvqa::checkpoint::Checkpoint;
use ptmvqa::dbi::{assign_clusters, compute_dbi, dbi_of_points, dbi_report, ClusterSpec, Selection};
use ptmvqa::evaluator::{evaluate, plcc, srcc, EvalOptions};
use ptmvqa::feature_store::{
    gen_synthetic, load_dataset, split_dataset, write_synthetic, FeatureTable, MosLabels, SplitFilter, SyntheticSpec,
};
use ptmvqa::losses::{
    batch_centroids, inter_loss, intra_loss, sample_triplets, smooth_l1_mean, total_loss, BatchOutputs, InterMode,
    LossConfig,
};
use ptmvqa::model::init_heads;
use ptmvqa::samples::Sample;
use ptmvqa::trainer::{batch_gradient, batch_loss, format_log, resolve_weights, train, TrainConfig, WeightMode};
use ptmvqa::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    run: fn() -> Check,
    /// Reason the criterion cannot be met as written.
    known_unattainable: Option<&'static str>,
}

fn main() {
    let criteria = [
        Criterion { name: "gradient oracle", run: gradient_oracle, known_unattainable: None },
        Criterion { name: "loss identities", run: loss_identities, known_unattainable: None },
        Criterion { name: "dbi oracle", run: dbi_oracle, known_unattainable: None },
        Criterion { name: "end-to-end synthetic", run: end_to_end, known_unattainable: None },
        Criterion { name: "ablation directionality", run: ablation, known_unattainable: None },
        Criterion {
            name: "correlation oracles",
            run: correlation_oracles,
            known_unattainable: Some(
                "the hand fixture's Pearson and Spearman value is 3/5, not 0.8 (cov 3/4 over var 5/4)",
            ),
        },
        Criterion { name: "determinism", run: determinism, known_unattainable: None },
    ];
    let mut blocking = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:<24} {detail} ({secs:.1}s)", c.name),
            Err(detail) => {
                match c.known_unattainable {
                    Some(why) => println!("FAIL  {:<24} {detail} [known: {why}] ({secs:.1}s)", c.name),
                    None => {
                        println!("FAIL  {:<24} {detail} ({secs:.1}s)", c.name);
                        blocking += 1;
                    }
                }
            }
        }
    }
    if blocking > 0 {
        eprintln!("{blocking} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: ptmvqa::Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Below this magnitude, differences are judged absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut instances = 0;
    let mut coords = 0;
    let mut worst = 0.0f64;
    for &n_models in &[1usize, 2, 4] {
        for &d in &[4usize, 128] {
            for rep in 0..9u64 {
                let seed = 1000 * n_models as u64 + 10 * d as u64 + rep;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dims: Vec<usize> = (0..n_models).map(|i| [8, 32][(i + rep as usize) % 2]).collect();
                let mut params = init_heads(&dims, d, 12, seed).map_err(err)?;
                for (_, _, t) in params.tensors_mut() {
                    for x in t.iter_mut() {
                        *x += rng.random_range(-0.3..0.3);
                    }
                }
                let weights: Vec<f64> = (0..n_models).map(|_| rng.random_range(0.2..3.0)).collect();
                let batch = 6;
                let mut samples: Vec<Sample> = (0..batch)
                    .map(|i| Sample {
                        video_id: format!("v{i}"),
                        mos: 0.0,
                        cluster: rng.random_range(0..3),
                        features: dims.iter().map(|&k| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                    })
                    .collect();
                // Targets straddle the predictions so both smooth-L1 regimes occur.
                for s in &mut samples {
                    let p = params.predict(&s.feature_refs(), &weights).map_err(err)?.score;
                    s.mos = p + rng.random_range(-2.0..2.0);
                }
                let inter = [InterMode::Centroid, InterMode::SampleTriplet, InterMode::Off][rep as usize % 3];
                let cfg = LossConfig { alpha: 0.05, beta: 0.2, intra: rep % 4 != 3, inter };
                let clusters: Vec<usize> = samples.iter().map(|s| s.cluster).collect();
                let plan = (inter == InterMode::SampleTriplet).then(|| sample_triplets(&clusters, &mut rng));
                let refs: Vec<&Sample> = samples.iter().collect();
                let (_, grad) =
                    batch_gradient(&params, &weights, &refs, &cfg, plan.as_deref(), Exec::Sequential).map_err(err)?;

                let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
                let names: Vec<String> = grad.tensors().into_iter().map(|(n, _, _)| n).collect();
                let mut picks: Vec<(usize, usize)> = (0..14)
                    .map(|_| {
                        let t = rng.random_range(0..analytic.len());
                        (t, rng.random_range(0..analytic[t].len()))
                    })
                    .collect();
                picks.push((analytic.len() - 1, 0));
                for (t, e) in picks {
                    let eval = |delta: f64| -> Result<f64, String> {
                        let mut p = params.clone();
                        p.tensors_mut()[t].2[e] += delta;
                        Ok(batch_loss(&p, &weights, &refs, &cfg, plan.as_deref()).map_err(err)?.total)
                    };
                    let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                    let a = analytic[t][e];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
                    if rel > GRAD_REL_TOL {
                        return Err(format!(
                            "N={n_models} D={d} seed={seed} {}[{e}]: analytic {a:e} vs numeric {fd:e} (rel {rel:.2e})",
                            names[t]
                        ));
                    }
                    worst = worst.max(rel);
                    coords += 1;
                }
                instances += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(instances >= 50, || format!("only {instances} instances"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{instances} instances, {coords} coordinates, worst rel err {worst:.1e}"))
}

fn loss_identities() -> Check {
    const TOL: f64 = 1e-12;
    let same = intra_loss(&[&[3.0, 4.0], &[3.0, 4.0], &[0.6, 0.8]]).map_err(err)?;
    let orth = intra_loss(&[&[1.0, 0.0], &[0.0, 2.0]]).map_err(err)?;
    let anti = intra_loss(&[&[1.0, -2.0], &[-3.0, 6.0]]).map_err(err)?;
    ensure(same.abs() < TOL, || format!("identical features give {same}"))?;
    ensure((orth - 1.0).abs() < TOL, || format!("orthogonal pair gives {orth}"))?;
    ensure((anti - 2.0).abs() < TOL, || format!("antipodal pair gives {anti}"))?;

    let pts: [&[f64]; 4] = [&[0.0, 0.0], &[0.0, 2.0], &[2.0, 0.0], &[2.0, 2.0]];
    let cents = batch_centroids(&pts, &[0, 0, 1, 1]).map_err(err)?;
    let eq = inter_loss(&[1.0, 1.0], 0, &cents, 0.05).map_err(err)?.value;
    ensure((eq - 0.05).abs() < TOL, || format!("equidistant anchor gives {eq}"))?;

    let preds = [0.3, 2.0, 4.9, 1.1];
    let targets = [0.5, 4.0, 1.2, 1.0];
    let f: Vec<Vec<&[f64]>> = vec![vec![&[1.0, 0.2], &[0.4, 1.0]]; 4];
    let h: [&[f64]; 4] = [&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.5]];
    let clusters = [0, 1, 1, 2];
    let batch = BatchOutputs { preds: &preds, targets: &targets, features: &f, h: &h, clusters: &clusters, triplets: None };
    let cfg = LossConfig { beta: 0.0, ..Default::default() };
    let total = total_loss(&batch, &cfg).map_err(err)?.total;
    let l1 = smooth_l1_mean(&preds, &targets);
    ensure(total.to_bits() == l1.to_bits(), || format!("beta = 0 total {total} != smooth-L1 {l1}"))?;
    Ok("intra 0/1/2, inter = alpha, beta = 0 total bitwise smooth-L1".into())
}

fn dbi_oracle() -> Check {
    let start = Instant::now();
    // Fixture: clusters {0, 2} and {10, 12}.
    let labels = MosLabels::new(
        [("a", 1.5), ("b", 1.5), ("c", 4.5), ("d", 4.5)].iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    )
    .map_err(err)?;
    let mut table = FeatureTable::new("fixture", 1).map_err(err)?;
    for (id, x) in [("a", 0.0f32), ("b", 2.0), ("c", 10.0), ("d", 12.0)] {
        table.insert(id, 0, vec![x]).map_err(err)?;
    }
    let assignment = assign_clusters(&labels, &ClusterSpec::preset(2).map_err(err)?).map_err(err)?;
    let psi = compute_dbi(&table, &assignment).map_err(err)?.psi;
    ensure((psi - 0.2).abs() < 1e-12, || format!("fixture psi {psi}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_scale = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..8);
        let points: Vec<(usize, Vec<f64>)> =
            (0..30).map(|i| (i % 3, (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
        let base = dbi_of_points(&points, 3, dim).map_err(err)?.psi;
        for c in [1e-3, 0.37, 7.5, 1e3] {
            let scaled: Vec<(usize, Vec<f64>)> =
                points.iter().map(|(k, p)| (*k, p.iter().map(|x| x * c).collect())).collect();
            let s = dbi_of_points(&scaled, 3, dim).map_err(err)?.psi;
            worst_scale = worst_scale.max((s - base).abs() / base);
        }
    }
    ensure(worst_scale <= 1e-9, || format!("scale invariance off by {worst_scale:e}"))?;

    let spec = ClusterSpec::preset(6).map_err(err)?;
    let mut wins = 0;
    for seed in 0..100 {
        let bundle = gen_synthetic(&SyntheticSpec::new(200, 2, 16, seed)).map_err(err)?;
        let report = dbi_report(&bundle, &spec, Selection::All, Exec::default()).map_err(err)?;
        let psi_of = |id: &str| report.models.iter().find(|m| m.model_id == id).map(|m| m.psi);
        if psi_of("model1") > psi_of("model0") {
            wins += 1;
        }
    }
    ensure(wins >= 99, || format!("noise psi > signal psi on only {wins}/100 seeds"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("fixture psi {psi}, scale rel err {worst_scale:.1e}, noise > signal on {wins}/100 seeds"))
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let seed = 0;
    let bundle = split_dataset(gen_synthetic(&SyntheticSpec::new(200, 2, 16, seed)).map_err(err)?, 0.8, seed)
        .map_err(err)?;
    let config = TrainConfig { seed, exec: Exec::Sequential, ..Default::default() };
    let weights =
        resolve_weights(&bundle, WeightMode::Dbi, &config.cluster_spec().map_err(err)?, Exec::Sequential).map_err(err)?;
    let outcome = train(&bundle, &config, &weights).map_err(err)?;
    let ckpt = outcome.checkpoint(&bundle, &config).map_err(err)?;
    let opts = EvalOptions { exec: Exec::Sequential, ..Default::default() };
    let report = evaluate(&ckpt, &bundle, SplitFilter::Test, opts).map_err(err)?;
    let elapsed = start.elapsed();
    let detail = format!("test PLCC {:.4}, SRCC {:.4}, single-threaded {:.1}s", report.plcc, report.srcc, elapsed.as_secs_f64());
    ensure(report.plcc >= 0.95 && report.srcc >= 0.93, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(300), || detail.clone())?;
    let first = outcome.history.first().map(|r| r.loss.total);
    let last = outcome.history.last().map(|r| r.loss.total);
    ensure(last < first, || format!("loss did not decrease: {first:?} -> {last:?}"))?;
    Ok(detail)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation() -> Check {
    let variants: [(&str, bool, InterMode, WeightMode); 5] = [
        ("full", true, InterMode::Centroid, WeightMode::Dbi),
        ("no-intra", false, InterMode::Centroid, WeightMode::Dbi),
        ("no-inter", true, InterMode::Off, WeightMode::Dbi),
        ("sample-triplet", true, InterMode::SampleTriplet, WeightMode::Dbi),
        ("uniform", true, InterMode::Centroid, WeightMode::Uniform),
    ];
    let per_seed: Vec<Result<Vec<f64>, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                let variants = &variants;
                scope.spawn(move || -> Result<Vec<f64>, String> {
                    let mut spec = SyntheticSpec::new(200, 3, 16, seed);
                    spec.signal_strength = vec![1.0, 0.5, 0.0];
                    spec.outlier_fraction = 0.1;
                    let bundle = split_dataset(gen_synthetic(&spec).map_err(err)?, 0.8, seed).map_err(err)?;
                    let mut out = Vec::with_capacity(variants.len());
                    for (_, intra, inter, mode) in variants {
                        let config = TrainConfig {
                            seed,
                            intra: *intra,
                            inter: *inter,
                            weights: *mode,
                            exec: Exec::Sequential,
                            ..Default::default()
                        };
                        let weights = resolve_weights(&bundle, *mode, &config.cluster_spec().map_err(err)?, config.exec)
                            .map_err(err)?;
                        let outcome = train(&bundle, &config, &weights).map_err(err)?;
                        let ckpt = outcome.checkpoint(&bundle, &config).map_err(err)?;
                        out.push(evaluate(&ckpt, &bundle, SplitFilter::Test, EvalOptions::default()).map_err(err)?.srcc);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let mut srccs = vec![Vec::new(); variants.len()];
    for seed_result in per_seed {
        for (i, v) in seed_result?.into_iter().enumerate() {
            srccs[i].push(v);
        }
    }
    let medians: Vec<f64> = srccs.into_iter().map(median).collect();
    let detail = variants
        .iter()
        .zip(&medians)
        .map(|(v, m)| format!("{} {m:.4}", v.0))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(medians[1..].iter().all(|m| medians[0] >= *m), || format!("median SRCC: {detail}"))?;
    Ok(format!("median SRCC over 5 seeds: {detail}"))
}

fn correlation_oracles() -> Check {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [2.0, 1.0, 4.0, 3.0];
    let p = plcc(&x, &y).map_err(err)?;
    let s = srcc(&x, &y).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(1.0..5.0)).collect();
        let base = srcc(&a, &b).map_err(err)?;
        let mono: Vec<f64> = a.iter().map(|v| v.exp() * 3.0 + v.powi(3)).collect();
        worst = worst.max((srcc(&mono, &b).map_err(err)? - base).abs());
    }
    ensure(worst <= 1e-12, || format!("monotone invariance off by {worst:e}"))?;
    let oracle_ok = (p - 0.6).abs() < 1e-15 && (s - 0.6).abs() < 1e-15;
    let detail = format!(
        "hand fixture PLCC {p}, SRCC {s} (independent oracle 0.6: {}), monotone invariance {worst:.1e}",
        if oracle_ok { "match" } else { "MISMATCH" }
    );
    ensure(oracle_ok && p == 0.8 && s == 0.8, || format!("{detail}; criterion expects 0.8"))?;
    Ok(detail)
}

/// Synthetic data on disk, DBI report, training, checkpoint and evaluation.
fn pipeline(dir: &std::path::Path, exec: Exec) -> Result<(Vec<u8>, String, String, String), String> {
    let mut spec = SyntheticSpec::new(120, 3, 12, 21);
    spec.views = 3;
    spec.signal_strength = vec![1.0, 0.4, 0.0];
    let manifest = write_synthetic(&gen_synthetic(&spec).map_err(err)?, dir).map_err(err)?;
    let config = TrainConfig { epochs: 6, batch_size: 16, dim: 32, hidden_dim: 64, seed: 9, exec, ..Default::default() };
    let bundle = split_dataset(load_dataset(&manifest).map_err(err)?, config.train_fraction, config.seed).map_err(err)?;
    let cluster_spec = config.cluster_spec().map_err(err)?;
    let report = dbi_report(&bundle, &cluster_spec, Selection::All, exec).map_err(err)?;
    let weights = resolve_weights(&bundle, WeightMode::Dbi, &cluster_spec, exec).map_err(err)?;
    let outcome = train(&bundle, &config, &weights).map_err(err)?;
    let ckpt = outcome.checkpoint(&bundle, &config).map_err(err)?;
    let path = dir.join("checkpoint.ptmc");
    ckpt.write(&path).map_err(err)?;
    let reloaded = Checkpoint::read(&path).map_err(err)?;
    let eval = evaluate(&reloaded, &bundle, SplitFilter::Test, EvalOptions { exec, ..Default::default() }).map_err(err)?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    Ok((bytes, serde_json::to_string(&report).map_err(|e| e.to_string())?, eval.to_json(), format_log(&outcome.history)))
}

fn determinism() -> Check {
    let mut runs = Vec::new();
    for exec in [Exec::Parallel, Exec::Parallel, Exec::Sequential] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        runs.push(pipeline(dir.path(), exec)?);
    }
    let labels = ["checkpoint", "dbi report", "eval report", "train log"];
    for other in &runs[1..] {
        let same = [runs[0].0 == other.0, runs[0].1 == other.1, runs[0].2 == other.2, runs[0].3 == other.3];
        if let Some(i) = same.iter().position(|s| !s) {
            return Err(format!("{} differs between runs", labels[i]));
        }
    }
    Ok(format!("checkpoint ({} bytes), reports and log identical across 3 runs incl. sequential", runs[0].0.len()))
}
