//! Exit criteria, one line each. Runs with its own `main` so the verdicts
//! are printed whether they pass or not.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ggograde::evaluator::{auroc_macro, evaluate, f1_macro, ConfusionMatrix};
use ggograde::gridrunner::{expand_grid, run_grid, GridSpec};
use ggograde::ingest::Dataset;
use ggograde::model_zoo::{apply_freeze_policy, build_model, Arch, Ctx, FineTuneExtent, InitMode, ModelSpec, Part};
use ggograde::preprocess::{build_lung_mask, refine_mask, select_center_index, DEFAULT_MASK_THRESHOLD};
use ggograde::severity::Severity;
use ggograde::synthkit::{generate_dataset, synth_slice, SynthSpec};
use ggograde::trainer::{
    accuracy, plateau_detector, prepare_examples, reload_checkpoint, split_internal, train, OptimizerKind, TrainConfig,
};
use ggograde_nn::{Adam, Optimizer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn tiny_dataset(spec: &SynthSpec) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(spec, dir.path()).unwrap();
    let ds = Dataset::load(dir.path(), None).unwrap();
    (dir, ds)
}

/// 2·TP / (2·TP + FP + FN) per class, counted from the label pairs.
fn oracle_f1_macro(truth: &[usize], pred: &[usize]) -> f64 {
    let mut sum = 0.0;
    for c in 0..4 {
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    100.0 * sum / 4.0
}

/// Mean over classes of P(pos > neg) + ½ P(pos = neg), by enumerating pairs.
fn oracle_auroc_macro(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let mut per_class = Vec::new();
    for c in 0..4 {
        let (mut wins, mut pairs) = (0.0, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == c && lj != c {
                    pairs += 1;
                    let (a, b) = (scores[4 * i + c], scores[4 * j + c]);
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        if pairs > 0 {
            per_class.push(wins / pairs as f64);
        }
    }
    (!per_class.is_empty()).then(|| 100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_f1 = 0.0f64;
    for i in 0..1000 {
        let n = rng.random_range(1..=40);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let got = f1_macro(&ConfusionMatrix::from_predictions(&truth, &pred).unwrap()).unwrap();
        let err = (got - oracle_f1_macro(&truth, &pred)).abs();
        check(err <= 1e-9, format!("f1 instance {i}: error {err:e}"))?;
        worst_f1 = worst_f1.max(err);
    }
    let mut worst_auc = 0.0f64;
    let mut scored = 0;
    while scored < 1000 {
        let n = rng.random_range(2..=40);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        // coarse weights so ties are common
        let scores: Vec<f64> = (0..n)
            .flat_map(|_| {
                let w: Vec<f64> = (0..4).map(|_| rng.random_range(1..6) as f64).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(move |v| v / s)
            })
            .collect();
        let Some(want) = oracle_auroc_macro(&scores, &labels) else { continue };
        let got = auroc_macro(&scores, &labels).map_err(|e| e.to_string())?;
        let err = (got - want).abs();
        check(err <= 1e-9, format!("auroc instance {scored}: error {err:e}"))?;
        worst_auc = worst_auc.max(err);
        scored += 1;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("max |err| F1 {worst_f1:e}, AUROC {worst_auc:e}, {:.2?}", start.elapsed()))
}

fn fixed_points() -> Verdict {
    let truth: Vec<usize> = (0..100).map(|i| i % 4).collect();
    let perfect = f1_macro(&ConfusionMatrix::from_predictions(&truth, &truth).unwrap()).unwrap();
    check(perfect == 100.0, format!("perfect predictions give {perfect}"))?;
    for c in 0..4 {
        let one = f1_macro(&ConfusionMatrix::from_predictions(&truth, &vec![c; 100]).unwrap()).unwrap();
        check((one - 10.0).abs() < 1e-12, format!("constant class {c} gives {one}"))?;
    }
    let labels: Vec<usize> = (0..231).map(|i| (i * 7) % 4).collect();
    let probs: Vec<f64> = (0..231).flat_map(|_| [0.1, 0.2, 0.6, 0.1]).collect();
    let report = evaluate("collapsed", &probs, &labels).map_err(|e| e.to_string())?;
    check(report.auroc_macro == 50.0, format!("constant scores give AUROC {}", report.auroc_macro))?;
    check(report.pred_class_distribution == [0, 0, 231, 0], format!("distribution {:?}", report.pred_class_distribution))?;
    Ok("F1 100.0 / 10.0, collapsed predictor AUROC 50.0 with 0, 0, 231, 0".into())
}

/// Nearest integer to `n · f`, ties to even, with `f` given as a decimal
/// string and all arithmetic on exact integers.
fn decimal_nint(n: u64, f: &str) -> u64 {
    let (int, frac) = f.split_once('.').unwrap_or((f, ""));
    let scale = 10u128.pow(frac.len() as u32);
    let num = format!("{int}{frac}").parse::<u128>().unwrap() * n as u128;
    let (q, r) = (num / scale, num % scale);
    let up = match (2 * r).cmp(&scale) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => q % 2 == 1,
    };
    (q + up as u128) as u64
}

fn slice_selection() -> Verdict {
    let start = Instant::now();
    let mut ties = 0;
    for n in 1..=1000u64 {
        let want = decimal_nint(n, "0.25").min(n - 1) as usize;
        let got = select_center_index(n as usize, 0.25).map_err(|e| e.to_string())?;
        check(got == want, format!("n={n}: got {got}, oracle {want}"))?;
        ties += (n % 4 == 2) as usize;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("n = 1..=1000 agree, {ties} ties, {:.2?}", start.elapsed()))
}

fn mask_properties() -> Verdict {
    let start = Instant::now();
    let mut worst = 1.0f64;
    for seed in 0..50u64 {
        let q = (seed as f64 + 0.5) / 50.0;
        let (img, planted) = synth_slice(128, q, 0.0, seed);
        let mask = build_lung_mask(&img, DEFAULT_MASK_THRESHOLD);
        check(!mask.touches_border(), format!("slice {seed}: mask touches the border"))?;
        let fg: Vec<bool> = mask.mask.iter().map(|&v| v != 0).collect();
        check(refine_mask(&fg, mask.width, mask.height) == mask, format!("slice {seed}: refinement is not idempotent"))?;
        let lung = planted.iter().filter(|&&p| p).count();
        let hit = planted.iter().zip(&fg).filter(|(&p, &m)| p && m).count();
        let recovery = hit as f64 / lung as f64;
        check(recovery >= 0.9, format!("slice {seed}: recovery {recovery:.3}"))?;
        worst = worst.min(recovery);
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("50 slices, worst recovery {worst:.4}, {:.2?}", start.elapsed()))
}

fn freeze_policy() -> Verdict {
    for arch in Arch::ALL {
        let spec = ModelSpec::new(arch, InitMode::Scratch);
        let v = spec.v;
        let model = apply_freeze_policy(build_model(&spec, 11).map_err(|e| e.to_string())?, FineTuneExtent::LastLayerOnly);
        let backbone = model.checksum(Part::Backbone);
        let head = model.checksum(Part::Head);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..2 * 3 * v * v).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut opt = Adam::new(model.trainable_params(), 1e-3);
        let out = model.forward(&Tensor::new(x, &[2, 3, v, v]), &mut Ctx { train: true, rng: &mut rng }).map_err(|e| e.to_string())?;
        out.logits.cross_entropy(&[1, 2]).backward();
        opt.step();
        check(model.checksum(Part::Backbone) == backbone, format!("{arch}: backbone changed"))?;
        check(model.checksum(Part::Head) != head, format!("{arch}: head did not move"))?;
    }
    Ok(format!("{} architectures, backbone checksums bit-exact", Arch::ALL.len()))
}

fn training_sanity() -> Verdict {
    let start = Instant::now();
    let (_dir, ds) = tiny_dataset(&SynthSpec::tiny_plus());
    let spec = ModelSpec::new(Arch::SqueezeNet, InitMode::Scratch);
    // patience equal to the epoch budget: the run gets all 50 epochs
    let cfg = TrainConfig {
        batch_size: 16,
        optimizer: OptimizerKind::Adam,
        lr: 0.001,
        max_epochs: 50,
        plateau_patience: 50,
        seed: 0,
        ..Default::default()
    };
    let (tr, va) = split_internal(&ds.train, cfg.internal_val_fraction, cfg.seed).map_err(|e| e.to_string())?;
    let (train_set, bad) = prepare_examples(&tr, &Default::default(), &spec);
    check(bad.is_empty(), "unreadable training scans")?;
    let (val_set, _) = prepare_examples(&va, &Default::default(), &spec);
    let run = |dir: &Path| {
        let mut model = apply_freeze_policy(build_model(&spec, cfg.seed).unwrap(), cfg.extent);
        let res = train(&mut model, &cfg, &train_set, &val_set, dir).map_err(|e| e.to_string())?;
        let final_acc = accuracy(&model, &train_set).map_err(|e| e.to_string())?;
        Ok::<_, String>((res, final_acc))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, final_acc) = run(a.path())?;
    let (second, _) = run(b.path())?;
    let elapsed = start.elapsed();
    let running = first.epoch_log.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let deterministic = first.epoch_log == second.epoch_log
        && std::fs::read(a.path().join("log.csv")).unwrap() == std::fs::read(b.path().join("log.csv")).unwrap();
    let summary = format!(
        "{} train scans, {} epochs, best running train acc {running:.3}, final train acc {final_acc:.3}, logs identical: {deterministic}, {elapsed:.0?} for two runs",
        train_set.len(),
        first.epoch_log.len()
    );
    check(deterministic, format!("epoch logs differ; {summary}"))?;
    check(running >= 0.95 || final_acc >= 0.95, format!("training accuracy below 0.95; {summary}"))?;
    within(elapsed / 2, Duration::from_secs(600))?;
    Ok(summary)
}

fn checkpoint_and_plateau() -> Verdict {
    let synth = SynthSpec { n_scans_per_class: 4, val_scans_per_class: 1, test_scans_per_class: 1, slices_per_scan: (4, 6), ..SynthSpec::tiny() };
    let (_dir, ds) = tiny_dataset(&synth);
    let spec = ModelSpec::new(Arch::SqueezeNet, InitMode::Scratch).with_v(64);
    let cfg = TrainConfig { batch_size: 4, max_epochs: 4, optimizer: OptimizerKind::Sgd, lr: 0.01, seed: 2, ..Default::default() };
    let (tr, va) = split_internal(&ds.train, 0.25, cfg.seed).map_err(|e| e.to_string())?;
    let (train_set, _) = prepare_examples(&tr, &Default::default(), &spec);
    let (val_set, _) = prepare_examples(&va, &Default::default(), &spec);
    let mut model = apply_freeze_policy(build_model(&spec, 2).unwrap(), cfg.extent);
    let run = tempfile::tempdir().unwrap();
    let res = train(&mut model, &cfg, &train_set, &val_set, run.path()).map_err(|e| e.to_string())?;
    let (reloaded, meta) = reload_checkpoint(&res.checkpoint_path, Some(&spec)).map_err(|e| e.to_string())?;
    let again = accuracy(&reloaded, &val_set).map_err(|e| e.to_string())?;
    check(again.to_bits() == res.best_val_accuracy.to_bits(), format!("reloaded accuracy {again} vs recorded {}", res.best_val_accuracy))?;
    check(meta.epoch == res.best_epoch, format!("checkpoint epoch {} vs best {}", meta.epoch, res.best_epoch))?;

    // three improving epochs, then seven within min_delta of the best
    let losses = [1.30, 1.10, 0.90, 0.90, 0.95, 0.90005, 1.20, 0.91, 0.90, 0.9000001];
    let (patience, min_delta) = (7, 1e-4);
    let fired = (1..=losses.len()).find(|&k| plateau_detector(&losses[..k], patience, min_delta));
    check(fired == Some(10), format!("plateau fired at {fired:?}, expected epoch 10"))?;
    Ok(format!("best val acc {again} reproduced bit-exactly (epoch {}); plateau stop at epoch 10", meta.epoch))
}

fn grid_mechanics() -> Verdict {
    let synth = SynthSpec { n_scans_per_class: 4, val_scans_per_class: 1, test_scans_per_class: 2, slices_per_scan: (4, 6), ..SynthSpec::tiny() };
    let (_dir, ds) = tiny_dataset(&synth);
    let grid = GridSpec {
        archs: vec![Arch::SqueezeNet],
        extents: vec![FineTuneExtent::AllLayers],
        batch_sizes: vec![16, 32],
        optim_lr_pairs: vec![(OptimizerKind::Sgd, 0.001), (OptimizerKind::Adam, 0.001)],
        seeds: vec![0],
        init: InitMode::Scratch,
        input_size: Some(64),
        base: TrainConfig { max_epochs: 2, ..Default::default() },
        ..Default::default()
    };
    let mut cells = expand_grid(&grid).map_err(|e| e.to_string())?;
    check(cells.len() == 4, format!("{} cells", cells.len()))?;
    let divergent = cells
        .iter_mut()
        .find(|c| c.train_config.batch_size == 32 && c.train_config.optimizer == OptimizerKind::Sgd)
        .unwrap();
    divergent.train_config.lr = 1e6;
    let root = tempfile::tempdir().unwrap();
    let first = run_grid(&cells, &ds, root.path(), true, 1).map_err(|e| e.to_string())?;
    let failures: Vec<_> = first.failures().collect();
    check(failures.len() == 1 && failures[0].cell.train_config.lr == 1e6, format!("{} failures", failures.len()))?;
    check(first.cells().count() == 3, "completed cells missing")?;
    let again = run_grid(&cells, &ds, root.path(), true, 1).map_err(|e| e.to_string())?;
    check(again.executed == 0 && again.outcomes == first.outcomes, format!("resume re-executed {} cells", again.executed))?;

    let text = std::fs::read_to_string(root.path().join("results/table2.txt")).unwrap();
    check(text.contains("BS16 SGD LR0.001"), "settings string BS16 SGD LR0.001 missing")?;
    let mut reader = csv::Reader::from_path(root.path().join("results/table2.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    let want = ["Model", "Settings", "AUROC Val", "AUROC Unseen", "F1-macro Val", "F1-macro Unseen", "Pred. class distr."];
    check(header == want, format!("table columns {header:?}"))?;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let settings: Vec<&str> = rec[1].split(' ').collect();
        let well_formed = settings.len() == 3
            && settings[0].strip_prefix("BS").is_some_and(|b| b.parse::<usize>().is_ok())
            && matches!(settings[1], "SGD" | "ADAM")
            && settings[2].strip_prefix("LR").is_some_and(|l| l.parse::<f64>().is_ok());
        check(well_formed, format!("settings {:?}", &rec[1]))?;
        let total: usize = rec[6].split(", ").map(|v| v.parse::<usize>().unwrap()).sum();
        check(total == ds.test.len(), format!("distribution {} sums to {total}, test set has {}", &rec[6], ds.test.len()))?;
        rows += 1;
    }
    check(rows == 3, format!("{rows} table rows"))?;
    Ok(format!("3 completed + 1 failure row ({}), resume executed 0, distributions sum to {}", failures[0].run_id, ds.test.len()))
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cli = |args: &[&str]| {
        let argv = std::iter::once("ggograde".to_string()).chain(args.iter().map(|a| a.to_string()));
        let code = ggograde::cli::dispatch(argv);
        check(code == 0, format!("ggograde {} exited with {code}", args.join(" ")))
    };
    let path = |name: &str| p.join(name).to_str().unwrap().to_string();
    let (data, manifest, grid_file, res) = (path("data"), path("manifest.csv"), path("grid.json"), path("res"));
    let (data, manifest, grid_file, res) = (data.as_str(), manifest.as_str(), grid_file.as_str(), res.as_str());
    cli(&["synth", "--tiny", "--out", data])?;
    cli(&["manifest", "--root", data, "--out", manifest])?;
    cli(&["manifest", "--root", data, "--verify", manifest])?;
    let grid = GridSpec {
        archs: vec![Arch::SqueezeNet],
        extents: vec![FineTuneExtent::AllLayers],
        batch_sizes: vec![16],
        optim_lr_pairs: vec![(OptimizerKind::Adam, 0.001)],
        seeds: vec![0],
        init: InitMode::Scratch,
        base: TrainConfig { max_epochs: 3, ..Default::default() },
        ..Default::default()
    };
    grid.save(Path::new(grid_file)).unwrap();
    cli(&["grid", "--data", data, "--grid", grid_file, "--results-root", res])?;
    cli(&["retrain-final", "--data", data, "--grid", grid_file, "--results-root", res])?;

    let test_scans = std::fs::read_dir(p.join("data/test")).unwrap().count();
    let final_dir = std::fs::read_dir(p.join("res/runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|d| d.to_string_lossy().ends_with("-final"))
        .ok_or("no final run directory")?;
    let preds = std::fs::read_to_string(final_dir.join("eval/test_predictions.csv")).map_err(|e| e.to_string())?;
    let mut lines = preds.lines();
    check(lines.next() == Some("scan_id,severity"), "prediction header")?;
    let rows: Vec<&str> = lines.collect();
    check(rows.len() == test_scans, format!("{} predictions for {test_scans} test scans", rows.len()))?;
    for row in &rows {
        let (_, label) = row.split_once(',').ok_or(format!("malformed row {row}"))?;
        check(Severity::ALL.iter().any(|s| s.to_string() == label), format!("invalid label {label}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1200))?;
    Ok(format!("{} predictions for {test_scans} test scans, {:.0?}", rows.len(), start.elapsed()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracles", metric_oracles),
        ("metric fixed points", fixed_points),
        ("slice selection", slice_selection),
        ("mask properties", mask_properties),
        ("freeze policy", freeze_policy),
        ("training sanity", training_sanity),
        ("checkpoint round trip and plateau stop", checkpoint_and_plateau),
        ("grid mechanics", grid_mechanics),
        ("end to end", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str()) || *x == (i + 1).to_string()) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match verdict {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
