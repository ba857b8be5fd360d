use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use relfeat::canonical::{canonical_directions, relevance, CovarianceTriple, InverseMode};
use relfeat::datasets::{
    gen_discrete_joint, gen_gaussian_pair, gen_labeled_blobs, gen_ring_disk, sample_discrete_pairs, PairDataset,
};
use relfeat::discrete::{
    apply_channel, channel_svd, fisher_inner, frobenius_distance, truncated_joint, Direction, JointDistribution,
    ProbVector,
};
use relfeat::gaussian::{exact_kla, exact_moment_triple, exact_posterior_moments, exact_spectrum, GaussianPair};
use relfeat::gradcheck::check_instance;
use relfeat::inference::{argmax, fit_statistics, target_table, InferenceModel, Target};
use relfeat::trainer::{extract_canonical, train, Optimizer, TrainConfig, TrainedModel, YFeatures};

use crate::output::{cells, csv_text, Run};
use crate::{
    ClassifyArgs, CliError, CliResult, Command, GenArgs, GenKind, GradcheckArgs, InferArgs, Metrics, OptimizerArg,
    OracleArgs, OracleKind, SpectrumArgs, Suite, TrainArgs, VerifyArgs,
};

/// Gradient checks pass below these relative errors.
const GRAD_TOL_PARAMS: f64 = 1e-4;
const GRAD_TOL_FEATURES: f64 = 1e-5;

pub fn dispatch(cmd: &Command, argv: &[String]) -> CliResult<Metrics> {
    match cmd {
        Command::Gen(a) => gen(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Spectrum(a) => spectrum(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::Classify(a) => classify(a, argv),
        Command::Gradcheck(a) => gradcheck(a, argv),
        Command::Oracle(a) => oracle(a, argv),
        Command::Verify(a) => verify(a, argv),
    }
}

fn load_pairs(run: &mut Run, path: &Path) -> CliResult<PairDataset> {
    run.input(path);
    Ok(PairDataset::load(path)?)
}

fn load_model(run: &mut Run, path: &Path) -> CliResult<TrainedModel> {
    run.input(path);
    Ok(TrainedModel::load(path)?)
}

fn save_pairs(run: &mut Run, ds: &PairDataset, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.save(path)?;
    run.output(path);
    run.output(&PairDataset::meta_path(path));
    Ok(())
}

fn gen(a: &GenArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("gen", argv, &a.out.out)?;
    run.seeds.push(a.seed);
    let joint = match a.kind {
        GenKind::Discrete => {
            let j = gen_discrete_joint(a.nx, a.ny, a.seed, a.concentration)?;
            let path = run.path("joint.csv");
            j.save(&path)?;
            run.output(&path);
            Some(j)
        }
        _ => None,
    };
    let make = |n: usize, seed: u64| -> relfeat::Result<PairDataset> {
        match a.kind {
            GenKind::Gaussian => gen_gaussian_pair(n, a.tau, a.sigma, seed),
            GenKind::RingDisk => gen_ring_disk(n, seed, a.gap, a.shift),
            GenKind::Blobs => gen_labeled_blobs(n, a.classes, a.separation, a.noise, a.label_noise, seed),
            GenKind::Discrete => sample_discrete_pairs(joint.as_ref().expect("joint"), n, seed),
        }
    };
    let ds = make(a.n, a.seed)?;
    let data_path = a.data.clone().unwrap_or_else(|| run.path("data.csv"));
    save_pairs(&mut run, &ds, &data_path)?;
    let mut metrics = json!({
        "n": ds.len(),
        "x_dim": ds.x_dim(),
        "y_dim": ds.y_dim(),
        "generator": ds.meta.generator,
        "params": ds.meta.params,
    });
    if a.test_n > 0 {
        let test_seed = a.seed.wrapping_add(1);
        run.seeds.push(test_seed);
        let test = make(a.test_n, test_seed)?;
        let test_path = a.test_data.clone().unwrap_or_else(|| run.path("test.csv"));
        save_pairs(&mut run, &test, &test_path)?;
        metrics["test_n"] = json!(test.len());
    }
    let config = json!({
        "kind": format!("{:?}", a.kind),
        "n": a.n, "test_n": a.test_n, "seed": a.seed,
        "tau": a.tau, "sigma": a.sigma, "gap": a.gap, "shift": a.shift,
        "classes": a.classes, "separation": a.separation, "noise": a.noise, "label_noise": a.label_noise,
        "nx": a.nx, "ny": a.ny, "concentration": a.concentration,
    });
    run.finish(config, metrics)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        k0: a.k0,
        batch_size: a.batch,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        inverse_mode: a.inverse.mode()?,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::default(),
            OptimizerArg::Gd => Optimizer::GradientDescent,
        },
        hidden: a.hidden.clone(),
        init_gain: 1.0,
        y_features: if a.y_identity { YFeatures::Identity } else { YFeatures::Network },
    })
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("train", argv, &a.out.out)?;
    let cfg = train_config(a)?;
    run.seeds.push(cfg.seed);
    let warnings = cfg.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let targets = a.targets.as_deref().map(Target::parse_list).transpose()?;
    let pairs = load_pairs(&mut run, &a.data)?;
    let test = load_pairs(&mut run, &a.test_data)?;
    let mut model = train(&pairs, &test, &cfg)?;
    if let Some(targets) = &targets {
        model.inference = Some(fit_statistics(&model, &pairs, targets, a.direction.into())?);
    }
    let model_path = a.model.clone().unwrap_or_else(|| run.path("model.json"));
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&model_path)?;
    run.output(&model_path);
    let loss_csv = csv_text(
        &["epoch", "train_loss", "test_loss"],
        model.history.iter().map(|h| cells([h.epoch as f64, h.train_loss, h.test_loss])),
    );
    run.write(&run.path("loss.csv"), &loss_csv)?;
    let last = model.history.last();
    let metrics = json!({
        "epochs_run": model.history.len(),
        "final_train_loss": last.map(|h| h.train_loss),
        "final_test_loss": last.map(|h| h.test_loss),
        "final_train_relevance": last.map(|h| cfg.k0 as f64 - h.train_loss),
        "n_train": pairs.len(),
        "n_test": test.len(),
        "audit": model.audit,
        "warnings": warnings,
        "inference_targets": targets.map(|t| t.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
    });
    let mut config = serde_json::to_value(&cfg)?;
    config["data"] = json!(a.data.display().to_string());
    config["test_data"] = json!(a.test_data.display().to_string());
    run.finish(config, metrics)
}

fn spectrum(a: &SpectrumArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("spectrum", argv, &a.out.out)?;
    let model = load_model(&mut run, &a.model)?;
    let pairs = load_pairs(&mut run, &a.data)?;
    let k = a.k_report.unwrap_or(model.config.k0);
    let spec = extract_canonical(&model, &pairs, k)?;
    let rel = spec.relevances();
    let text = csv_text(
        &["index", "eta", "relevance"],
        spec.etas.iter().zip(&rel).enumerate().map(|(i, (e, r))| vec![i.to_string(), e.to_string(), r.to_string()]),
    );
    run.write(&run.path("spectrum.csv"), &text)?;
    let metrics = json!({
        "etas": spec.etas,
        "relevances": rel,
        "sum_relevance": rel.iter().sum::<f64>(),
        "n_samples": pairs.len(),
    });
    let config = json!({ "model": a.model.display().to_string(), "data": a.data.display().to_string(), "k_report": k });
    run.finish(config, metrics)
}

fn parse_obs(s: &str) -> CliResult<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad observation value {v:?}"))))
                .collect()
        })
        .collect::<CliResult<_>>()?;
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage("--obs needs rows of equal, non-zero length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

fn observed_side(ds: &PairDataset, direction: Direction) -> (&DMatrix<f64>, &DMatrix<f64>) {
    match direction {
        Direction::YToX => (&ds.y, &ds.x),
        Direction::XToY => (&ds.x, &ds.y),
    }
}

fn inference_model(run: &mut Run, model: &TrainedModel, a: &InferArgs) -> CliResult<InferenceModel> {
    match (&a.targets, &a.fit_data) {
        (Some(t), Some(fit)) => {
            let targets = Target::parse_list(t)?;
            let pairs = load_pairs(run, fit)?;
            Ok(fit_statistics(model, &pairs, &targets, a.direction.into())?)
        }
        _ => model.inference.clone().ok_or_else(|| {
            CliError::Usage(
                "model has no inference statistics; train with --targets or pass --targets and --fit-data".into(),
            )
        }),
    }
}

fn infer(a: &InferArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("infer", argv, &a.out.out)?;
    let model = load_model(&mut run, &a.model)?;
    let inf = inference_model(&mut run, &model, a)?;
    let (obs, truth) = match (&a.data, &a.obs) {
        (Some(path), _) => {
            let ds = load_pairs(&mut run, path)?;
            let (o, t) = observed_side(&ds, inf.direction);
            (o.clone(), Some(t.clone()))
        }
        (None, Some(s)) => (parse_obs(s)?, None),
        (None, None) => return Err(CliError::Usage("infer needs --data or --obs".into())),
    };
    let posteriors = (0..obs.nrows())
        .map(|r| inf.infer(&obs.row(r).iter().copied().collect::<Vec<_>>()))
        .collect::<relfeat::Result<Vec<_>>>()?;

    let names: Vec<String> = inf.targets.iter().map(|t| t.to_string()).collect();
    let std_cols: Vec<usize> =
        posteriors.first().map(|p| (0..p.std.len()).filter(|&i| p.std[i].is_some()).collect()).unwrap_or_default();
    let mut header: Vec<String> = (0..obs.ncols()).map(|c| format!("obs_{c}")).collect();
    header.extend(names.iter().cloned());
    header.extend(std_cols.iter().map(|&i| format!("std_{}", names[i])));
    header.push("clamped".into());
    let rows = posteriors.iter().enumerate().map(|(r, p)| {
        let mut row = cells(obs.row(r).iter());
        row.extend(cells(&p.expectations));
        row.extend(std_cols.iter().map(|&i| p.std[i].unwrap_or(f64::NAN).to_string()));
        row.push(p.clamped.to_string());
        row
    });
    run.write(&run.path("posterior.csv"), &csv_text(&header, rows))?;

    let m = inf.targets.len();
    let n = posteriors.len() as f64;
    let means: Vec<f64> = (0..m).map(|t| posteriors.iter().map(|p| p.expectations[t]).sum::<f64>() / n).collect();
    let mut metrics = json!({
        "n_obs": posteriors.len(),
        "targets": names,
        "mean_expectations": means,
        "clamped_rows": posteriors.iter().filter(|p| p.clamped).count(),
    });
    if posteriors.len() == 1 {
        metrics["posterior"] = serde_json::to_value(&posteriors[0])?;
    }
    if let Some(truth) = truth {
        let evaluable: Vec<usize> = (0..m).filter(|&t| !matches!(inf.targets[t], Target::Custom(_))).collect();
        let sel: Vec<Target> = evaluable.iter().map(|&t| inf.targets[t].clone()).collect();
        if let Ok(values) = target_table(&sel, &truth) {
            let rmse: Vec<f64> = evaluable
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let se: f64 =
                        posteriors.iter().enumerate().map(|(r, p)| (p.expectations[t] - values[(r, k)]).powi(2)).sum();
                    (se / n).sqrt()
                })
                .collect();
            metrics["rmse_vs_realized"] = json!(rmse);
        }
    }
    let config = json!({
        "model": a.model.display().to_string(),
        "direction": format!("{:?}", inf.direction),
        "targets": inf.targets.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
        "inverse_mode": inf.inverse_mode,
    });
    run.finish(config, metrics)
}

fn classify(a: &ClassifyArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("classify", argv, &a.out.out)?;
    let model = load_model(&mut run, &a.model)?;
    let inf = model
        .inference
        .clone()
        .ok_or_else(|| CliError::Usage("model has no inference statistics; train with label targets".into()))?;
    let ds = load_pairs(&mut run, &a.data)?;
    let (obs, labels_side) = observed_side(&ds, inf.direction);
    let predicted = inf.classify_batch(obs)?;
    let truth: Option<Vec<usize>> = (labels_side.ncols() == inf.targets.len()).then(|| {
        (0..labels_side.nrows()).map(|r| argmax(&labels_side.row(r).iter().copied().collect::<Vec<_>>())).collect()
    });
    let rows = predicted.iter().enumerate().map(|(r, &p)| {
        let mut row = vec![r.to_string(), p.to_string()];
        if let Some(t) = &truth {
            row.push(t[r].to_string());
        }
        row
    });
    let header: &[&str] = if truth.is_some() { &["row", "label", "true_label"] } else { &["row", "label"] };
    run.write(&run.path("predictions.csv"), &csv_text(header, rows))?;
    let accuracy = truth
        .as_ref()
        .map(|t| t.iter().zip(&predicted).filter(|(a, b)| a == b).count() as f64 / predicted.len() as f64);
    let mut counts = vec![0usize; inf.targets.len()];
    for &p in &predicted {
        counts[p] += 1;
    }
    let metrics = json!({ "n": predicted.len(), "accuracy": accuracy, "predicted_counts": counts });
    let config = json!({ "model": a.model.display().to_string(), "data": a.data.display().to_string() });
    run.finish(config, metrics)
}

fn gradcheck(a: &GradcheckArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("gradcheck", argv, &a.out.out)?;
    run.seeds.push(a.seed);
    let mode = a.inverse.mode()?;
    let results = (0..a.trials as u64)
        .map(|i| check_instance(a.seed.wrapping_add(i), mode))
        .collect::<relfeat::Result<Vec<_>>>()?;
    let pass = |r: &relfeat::gradcheck::GradCheck| {
        r.max_rel_params < GRAD_TOL_PARAMS && r.max_rel_features < GRAD_TOL_FEATURES
    };
    let text = csv_text(
        &["seed", "n_params", "rejected", "loss", "max_rel_params", "max_rel_features", "pass"],
        results.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.n_params.to_string(),
                r.rejected.to_string(),
                r.loss.to_string(),
                r.max_rel_params.to_string(),
                r.max_rel_features.to_string(),
                pass(r).to_string(),
            ]
        }),
    );
    run.write(&run.path("gradcheck.csv"), &text)?;
    let failed = results.iter().filter(|r| !pass(r)).count();
    let metrics = json!({
        "trials": results.len(),
        "failed": failed,
        "max_rel_params": results.iter().map(|r| r.max_rel_params).fold(0.0, f64::max),
        "max_rel_features": results.iter().map(|r| r.max_rel_features).fold(0.0, f64::max),
        "tolerance_params": GRAD_TOL_PARAMS,
        "tolerance_features": GRAD_TOL_FEATURES,
    });
    let config = json!({ "trials": a.trials, "seed": a.seed, "inverse_mode": mode });
    let report = run.finish(config, metrics)?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} gradient checks failed", results.len())));
    }
    Ok(report)
}

fn oracle(a: &OracleArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("oracle", argv, &a.out.out)?;
    match a.kind {
        OracleKind::Discrete => {
            let j = match &a.joint {
                Some(path) => {
                    run.input(path);
                    JointDistribution::load(path)?
                }
                None => {
                    run.seeds.push(a.seed);
                    let j = gen_discrete_joint(a.nx, a.ny, a.seed, a.concentration)?;
                    let path = run.path("joint.csv");
                    j.save(&path)?;
                    run.output(&path);
                    j
                }
            };
            let d = channel_svd(&j);
            let rel = d.relevances();
            run.write(
                &run.path("spectrum.csv"),
                &csv_text(
                    &["index", "eta", "relevance"],
                    d.etas
                        .iter()
                        .zip(rel.iter())
                        .enumerate()
                        .map(|(i, (e, r))| vec![i.to_string(), e.to_string(), r.to_string()]),
                ),
            )?;
            let mut truncation = Vec::new();
            for k0 in 1..=d.rank() {
                let dist = frobenius_distance(&j, &truncated_joint(&d, k0)?)?;
                let tail: f64 = rel.iter().skip(k0).sum();
                truncation.push((k0, dist, tail));
            }
            run.write(
                &run.path("truncation.csv"),
                &csv_text(
                    &["k0", "distance", "tail_relevance"],
                    truncation.iter().map(|(k, d, t)| vec![k.to_string(), d.to_string(), t.to_string()]),
                ),
            )?;
            let indicator = CovarianceTriple::from_joint(
                &j,
                &DMatrix::identity(j.n_x(), j.n_x()),
                &DMatrix::identity(j.n_y(), j.n_y()),
            )?;
            let indicator_relevance = relevance(&indicator, InverseMode::default())?;
            let metrics = json!({
                "etas": d.etas.as_slice(),
                "sum_relevance": rel.sum(),
                "indicator_basis_relevance": indicator_relevance,
                "max_truncation_gap": truncation.iter().map(|(_, d, t)| (d - t).abs()).fold(0.0, f64::max),
            });
            let config = json!({ "kind": "discrete", "n_x": j.n_x(), "n_y": j.n_y(), "seed": a.seed });
            run.finish(config, metrics)
        }
        OracleKind::Gaussian => {
            let gp = GaussianPair::new(a.tau, a.sigma)?;
            let spectrum = exact_spectrum(&gp, a.k0);
            run.write(
                &run.path("spectrum.csv"),
                &csv_text(
                    &["index", "eta", "relevance"],
                    spectrum.iter().enumerate().map(|(i, r)| vec![i.to_string(), r.sqrt().to_string(), r.to_string()]),
                ),
            )?;
            let moments: Vec<(f64, f64, f64)> =
                a.y.iter()
                    .map(|&y| {
                        let (m, s) = exact_posterior_moments(&gp, y);
                        (y, m, s)
                    })
                    .collect();
            run.write(
                &run.path("posterior.csv"),
                &csv_text(
                    &["y", "mean", "second_moment", "std"],
                    moments.iter().map(|(y, m, s)| cells([*y, *m, *s, (s - m * m).max(0.0).sqrt()])),
                ),
            )?;
            let triple = exact_moment_triple(&gp, a.k0)?;
            let metrics = json!({
                "gamma": gp.gamma(),
                "relevances": spectrum,
                "posterior": moments.iter().map(|(y, m, s)| json!({"y": y, "mean": m, "second_moment": s})).collect::<Vec<_>>(),
                "triple": triple,
            });
            let config = json!({ "kind": "gaussian", "tau": a.tau, "sigma": a.sigma, "k0": a.k0 });
            run.finish(config, metrics)
        }
    }
}

#[derive(Debug, Serialize)]
struct Check {
    suite: &'static str,
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

struct Checks(Vec<Check>);

impl Checks {
    fn add(&mut self, suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) {
        let pass = value.is_finite() && value <= tolerance;
        self.0.push(Check { suite, name: name.into(), value, tolerance, pass });
    }
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    relfeat::linalg::max_abs_diff(a, b)
}

fn verify_gaussian(checks: &mut Checks) -> CliResult<()> {
    for &(tau, sigma) in &[(1.0, 1.0), (2.0, 0.5), (0.5, 2.0)] {
        let gp = GaussianPair::new(tau, sigma)?;
        let label = format!("tau={tau} sigma={sigma}");
        let general = exact_moment_triple(&gp, 3)?;
        let explicit = exact_kla(&gp);
        let gap = max_abs(&general.k, &explicit.k)
            .max(max_abs(&general.l, &explicit.l))
            .max(max_abs(&general.a, &explicit.a));
        checks.add("gaussian", format!("{label}: K, L, A closed forms agree"), gap, 1e-12);

        let rel = relevance(&explicit, InverseMode::default())?;
        let g = gp.gamma();
        checks.add("gaussian", format!("{label}: relevance = 1 + γ + γ²"), (rel - (1.0 + g + g * g)).abs(), 1e-10);

        let triple5 = exact_moment_triple(&gp, 5)?;
        let dirs = canonical_directions(&triple5, InverseMode::default())?;
        let spec_gap =
            dirs.relevances().iter().zip(exact_spectrum(&gp, 5)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        checks.add("gaussian", format!("{label}: spectrum = γ^n (k0 = 5)"), spec_gap, 1e-8);

        let t2 = tau * tau;
        let theta = DMatrix::from_row_slice(2, 3, &[0.0, t2, 0.0, t2, 0.0, 3.0 * t2 * t2]);
        let inf = InferenceModel::from_parts(
            explicit,
            theta,
            vec![Target::Coord(0), Target::Power(0, 2)],
            Direction::YToX,
            InverseMode::default(),
        )?;
        let mut worst: f64 = 0.0;
        for &y in &[-1.5, 0.3, 2.0] {
            let p = inf.infer_features(&[1.0, y, y * y])?;
            let (m, s) = exact_posterior_moments(&gp, y);
            worst = worst.max((p.expectations[0] - m).abs()).max((p.expectations[1] - s).abs());
        }
        checks.add("gaussian", format!("{label}: inferred posterior moments are exact"), worst, 1e-10);
    }
    Ok(())
}

fn verify_discrete(checks: &mut Checks, seed: u64) -> CliResult<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut rel_gap, mut adj_gap, mut tail_gap, mut inf_gap): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..10 {
        let nx = rng.random_range(2..=8);
        let ny = rng.random_range(2..=8);
        let j = gen_discrete_joint(nx, ny, seed.wrapping_add(i), 1.0)?;
        let d = channel_svd(&j);
        let fx = DMatrix::identity(nx, nx);
        let gy = DMatrix::identity(ny, ny);
        let triple = CovarianceTriple::from_joint(&j, &fx, &gy)?;
        rel_gap = rel_gap.max((relevance(&triple, InverseMode::default())? - d.relevances().sum()).abs());

        let mu = ProbVector::new((0..nx).map(|_| rng.random::<f64>() - 0.5).collect())?;
        let nu = ProbVector::new((0..ny).map(|_| rng.random::<f64>() - 0.5).collect())?;
        let lhs = fisher_inner(&apply_channel(&j, &mu, Direction::XToY)?, &nu, j.p_y())?;
        let rhs = fisher_inner(&mu, &apply_channel(&j, &nu, Direction::YToX)?, j.p_x())?;
        adj_gap = adj_gap.max((lhs - rhs).abs());

        for k0 in 1..=d.rank() {
            let dist = frobenius_distance(&j, &truncated_joint(&d, k0)?)?;
            let tail: f64 = d.relevances().iter().skip(k0).sum();
            tail_gap = tail_gap.max((dist - tail).abs());
        }

        let theta: Vec<f64> = (0..nx).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let exact = j.conditional_expectation_given_y(&theta)?;
        let inf = InferenceModel::from_joint(
            &j,
            &fx,
            &gy,
            &DMatrix::from_column_slice(nx, 1, &theta),
            vec![Target::Custom("theta".into())],
            InverseMode::default(),
        )?;
        for (y, e) in exact.iter().enumerate() {
            let mut g = vec![0.0; ny];
            g[y] = 1.0;
            inf_gap = inf_gap.max((inf.infer_features(&g)?.expectations[0] - e).abs());
        }
    }
    checks.add("discrete", "indicator-basis relevance = Σ η²", rel_gap, 1e-9);
    checks.add("discrete", "channel adjointness", adj_gap, 1e-10);
    checks.add("discrete", "truncation distance = tail Σ η²", tail_gap, 1e-9);
    checks.add("discrete", "span-exact inference", inf_gap, 1e-8);
    Ok(())
}

fn verify(a: &VerifyArgs, argv: &[String]) -> CliResult<Metrics> {
    let mut run = Run::new("verify", argv, &a.out.out)?;
    run.seeds.push(a.seed);
    let mut checks = Checks(Vec::new());
    if matches!(a.suite, Suite::Gaussian | Suite::All) {
        verify_gaussian(&mut checks)?;
    }
    if matches!(a.suite, Suite::Discrete | Suite::All) {
        verify_discrete(&mut checks, a.seed)?;
    }
    if matches!(a.suite, Suite::Gradients | Suite::All) {
        for i in 0..10 {
            let r = check_instance(a.seed.wrapping_add(i), InverseMode::default())?;
            checks.add("gradients", format!("seed {}: end-to-end", r.seed), r.max_rel_params, GRAD_TOL_PARAMS);
            checks.add(
                "gradients",
                format!("seed {}: loss vs features", r.seed),
                r.max_rel_features,
                GRAD_TOL_FEATURES,
            );
        }
    }
    for c in &checks.0 {
        eprintln!(
            "[{}] {} / {}: {:.3e} (tol {:.0e})",
            if c.pass { "ok" } else { "FAIL" },
            c.suite,
            c.name,
            c.value,
            c.tolerance
        );
    }
    run.write(
        &run.path("verify.csv"),
        &csv_text(
            &["suite", "check", "value", "tolerance", "pass"],
            checks.0.iter().map(|c| {
                vec![
                    c.suite.to_string(),
                    format!("\"{}\"", c.name),
                    c.value.to_string(),
                    c.tolerance.to_string(),
                    c.pass.to_string(),
                ]
            }),
        ),
    )?;
    let failed = checks.0.iter().filter(|c| !c.pass).count();
    let metrics = json!({ "checks": checks.0, "failed": failed, "passed": checks.0.len() - failed });
    let config: Value = json!({ "suite": format!("{:?}", a.suite), "seed": a.seed });
    let report = run.finish(config, metrics)?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", checks.0.len())));
    }
    Ok(report)
}
