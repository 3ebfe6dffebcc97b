//! Training loops, the representation probe, and metric emission.

use super::model::wire_method;
use super::{ConfigError, ExperimentConfig, MethodCode};
use crate::datasets::{
    gen_background_correlated, gen_fourier_patterned, gen_glyph_corpus, gen_rotation_domains,
    gen_texture_shape_corpus, DatasetTriple, LabeledImageSet, ShiftKind,
};
use crate::linalg::{solve_spd, Tensor};
use crate::netcore::AdamState;
use crate::seeding;
use rand::seq::SliceRandom;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: MethodCode,
    pub seed: u64,
    pub shift_desc: String,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch of the highest validation accuracy; earliest wins ties.
    pub best_epoch: usize,
    /// Test accuracy of the best-validation checkpoint.
    pub test_accuracy: f64,
    pub wall_clock_secs: f64,
}

/// Materialize the recipe's train/val/test triple.
pub fn generate_dataset(config: &ExperimentConfig) -> Result<DatasetTriple, ConfigError> {
    let data_seed = seeding::derive_seed(config.seed, "data");
    let recipe = &config.recipe;
    match &recipe.kind {
        ShiftKind::BackgroundCorrelated {
            classes,
            backgrounds,
            rho,
        } => Ok(gen_background_correlated(
            *classes,
            *backgrounds,
            *rho,
            recipe.total,
            recipe.side,
            recipe.split,
            data_seed,
        )?),
        ShiftKind::FourierPattern {
            strategy,
            train_kernels,
            test_kernel,
        } => {
            let base = gen_glyph_corpus(7, recipe.total, recipe.side, data_seed);
            Ok(gen_fourier_patterned(
                &base,
                *strategy,
                *train_kernels,
                *test_kernel,
                recipe.split,
                data_seed,
            )?)
        }
        ShiftKind::Rotation { angles, per_class } => {
            assert!(angles.len() >= 2, "rotation recipe needs at least two angles");
            let base = gen_glyph_corpus(7, recipe.total, recipe.side, data_seed);
            let mut domains = gen_rotation_domains(&base, angles, *per_class, data_seed)?;
            // Last angle held out as the test domain; 10% of the pooled
            // training domains become validation.
            let test = domains.pop().expect("at least two domains");
            let mut pool_indices = Vec::new();
            let mut pooled: Option<LabeledImageSet> = None;
            for d in domains {
                pooled = Some(match pooled {
                    None => d,
                    Some(acc) => concat_sets(&acc, &d),
                });
            }
            let pooled = pooled.expect("non-empty domain pool");
            let mut order: Vec<usize> = (0..pooled.len()).collect();
            order.shuffle(&mut seeding::stream(data_seed, "rotation-valsplit"));
            let n_val = pooled.len() / 10;
            pool_indices.extend_from_slice(&order[n_val..]);
            Ok(DatasetTriple {
                train: pooled.subset(&pool_indices),
                val: pooled.subset(&order[..n_val]),
                test,
            })
        }
    }
}

fn concat_sets(a: &LabeledImageSet, b: &LabeledImageSet) -> LabeledImageSet {
    assert_eq!(a.side, b.side);
    assert_eq!(a.classes, b.classes);
    let mut data = a.images.data().to_vec();
    data.extend_from_slice(b.images.data());
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    let mut nuisance = a.nuisance_ids.clone();
    nuisance.extend_from_slice(&b.nuisance_ids);
    LabeledImageSet {
        images: Tensor::from_vec(a.len() + b.len(), a.side * a.side, data).expect("lengths add"),
        side: a.side,
        labels,
        nuisance_ids: nuisance,
        classes: a.classes,
    }
}

fn gather(set: &LabeledImageSet, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let n_pix = set.side * set.side;
    let mut data = Vec::with_capacity(indices.len() * n_pix);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(set.image_row(i));
        labels.push(set.labels[i]);
    }
    (
        Tensor::from_vec(indices.len(), n_pix, data).expect("length computed"),
        labels,
    )
}

/// Per-epoch diagnostic-loss evaluation cap.
const VAL_LOSS_ROWS: usize = 256;

/// Train one configuration to completion. Deterministic given the config:
/// the reported test accuracy comes from the checkpoint with the highest
/// validation accuracy (earliest epoch on ties).
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult, ConfigError> {
    config.validate()?;
    let started = Instant::now();
    let data = generate_dataset(config)?;
    let classes = data.train.classes;
    let mut model = wire_method(config, data.train.side, classes)?;
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle_rng = seeding::stream(config.seed, "shuffle");

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_snapshot = model.param_snapshot();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < config.batch_size {
                break; // partial batches would break the projection precondition
            }
            let (x, y) = gather(&data.train, chunk);
            let stats = model.train_step(&x, &y, &mut adam)?;
            loss_sum += stats.loss;
            steps += 1;
        }
        let train_loss = if steps > 0 { loss_sum / steps as f64 } else { f64::NAN };
        let (train_x, train_y) = gather(&data.train, &(0..data.train.len()).collect::<Vec<_>>());
        let train_acc = model.accuracy(&train_x, &train_y)?;
        let (val_x, val_y) = gather(&data.val, &(0..data.val.len()).collect::<Vec<_>>());
        // The diagnostic loss runs the full head (texture branch included);
        // a fixed-size subsample keeps its cost flat. Checkpoint selection
        // uses the full-split accuracy below.
        let loss_rows = data.val.len().min(VAL_LOSS_ROWS);
        let (vl_x, vl_y) = gather(&data.val, &(0..loss_rows).collect::<Vec<_>>());
        let val_loss = model.evaluate_loss(&vl_x, &vl_y)?;
        let val_acc = model.accuracy(&val_x, &val_y)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_snapshot = model.param_snapshot();
        }
    }

    model.restore_snapshot(&best_snapshot);
    let (test_x, test_y) = gather(&data.test, &(0..data.test.len()).collect::<Vec<_>>());
    let test_accuracy = model.accuracy(&test_x, &test_y)?;
    Ok(RunResult {
        method: config.method,
        seed: config.seed,
        shift_desc: config.shift_desc(),
        epochs,
        best_epoch,
        test_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Run a list of configurations, fanning out over worker threads. Each run
/// owns its model and RNG streams, and results come back in input order,
/// so emission does not depend on scheduling.
pub fn run_grid(configs: &[ExperimentConfig]) -> Result<Vec<RunResult>, ConfigError> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(configs.len().max(1));
    if workers <= 1 {
        return configs.iter().map(run_experiment).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<RunResult, ConfigError>>>> =
        configs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let out = run_experiment(&configs[i]);
                *results[i].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("worker filled every slot"))
        .collect()
}

/// Probe accuracies for one branch, mean and standard deviation over
/// epochs.
#[derive(Debug, Clone, Copy)]
pub struct ProbeScore {
    pub texture_mean: f64,
    pub texture_std: f64,
    pub semantic_mean: f64,
    pub semantic_std: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub nglcm: ProbeScore,
    pub mlp: ProbeScore,
    pub texture_chance: f64,
    pub semantic_chance: f64,
    pub textures: usize,
    pub classes: usize,
}

/// Five-fold cross-validated linear probe: ridge regression onto one-hot
/// targets, prediction by row argmax.
pub fn linear_probe_cv(features: &Tensor, targets: &[usize], n_classes: usize) -> f64 {
    let n = features.rows();
    let d = features.cols() + 1; // bias column
    let x = Tensor::from_fn(n, d, |r, c| {
        if c < features.cols() {
            features.get(r, c)
        } else {
            1.0
        }
    });
    let folds = 5;
    let mut correct = 0usize;
    for fold in 0..folds {
        let train_idx: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let mut xtx = Tensor::zeros(d, d);
        let mut xty = Tensor::zeros(d, n_classes);
        for &i in &train_idx {
            for a in 0..d {
                let xa = x.get(i, a);
                if xa == 0.0 {
                    continue;
                }
                for b in 0..d {
                    xtx.set(a, b, xtx.get(a, b) + xa * x.get(i, b));
                }
                xty.set(a, targets[i], xty.get(a, targets[i]) + xa);
            }
        }
        let ridge = 1e-3 * train_idx.len() as f64 / d as f64 + 1e-8;
        for a in 0..d {
            xtx.set(a, a, xtx.get(a, a) + ridge);
        }
        let w = solve_spd(&xtx, &xty).expect("ridge-loaded Gram is positive definite");
        for &i in &test_idx {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..n_classes {
                let mut v = 0.0;
                for a in 0..d {
                    v += x.get(i, a) * w.get(a, c);
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == targets[i] {
                correct += 1;
            }
        }
    }
    correct as f64 / n as f64
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train the texture-branch wirings on a factor-independent corpus and
/// probe their branch representations every epoch for texture id and
/// semantic label.
pub fn probe_experiment(config: &ExperimentConfig, textures: usize) -> Result<ProbeResult, ConfigError> {
    let classes = config.classes();
    let side = config.recipe.side;
    let data_seed = seeding::derive_seed(config.seed, "probe-data");
    let train = gen_texture_shape_corpus(classes, textures, config.recipe.total, side, data_seed);
    let probe_set = gen_texture_shape_corpus(
        classes,
        textures,
        600,
        side,
        seeding::derive_seed(config.seed, "probe-eval"),
    );
    let (probe_x, _) = gather(&probe_set, &(0..probe_set.len()).collect::<Vec<_>>());

    let mut scores = Vec::new();
    for method in [MethodCode::N, MethodCode::M] {
        let mut cfg = config.clone();
        cfg.method = method;
        let mut model = wire_method(&cfg, side, classes)?;
        let mut adam = AdamState::new(cfg.learning_rate);
        let mut shuffle_rng = seeding::stream(cfg.seed, "shuffle");
        let mut tex_accs = Vec::new();
        let mut sem_accs = Vec::new();
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < cfg.batch_size {
                    break;
                }
                let (x, y) = gather(&train, chunk);
                model.train_step(&x, &y, &mut adam)?;
            }
            let repr = model.texture_representation(&probe_x)?;
            tex_accs.push(linear_probe_cv(&repr, &probe_set.nuisance_ids, textures));
            sem_accs.push(linear_probe_cv(&repr, &probe_set.labels, classes));
        }
        let (tm, ts) = mean_std(&tex_accs);
        let (sm, ss) = mean_std(&sem_accs);
        scores.push(ProbeScore {
            texture_mean: tm,
            texture_std: ts,
            semantic_mean: sm,
            semantic_std: ss,
        });
    }
    Ok(ProbeResult {
        nglcm: scores[0],
        mlp: scores[1],
        texture_chance: 1.0 / textures as f64,
        semantic_chance: 1.0 / classes as f64,
        textures,
        classes,
    })
}

/// Full-precision float formatting (17 significant digits round-trips f64).
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-epoch and final-test rows:
/// `method,seed,rho_or_strategy,epoch,split,metric,value`.
pub fn emit_metrics(results: &[RunResult], path: &Path) -> Result<(), ConfigError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,seed,rho_or_strategy,epoch,split,metric,value")?;
    for r in results {
        for e in &r.epochs {
            for (split, metric, value) in [
                ("train", "loss", e.train_loss),
                ("train", "accuracy", e.train_acc),
                ("val", "loss", e.val_loss),
                ("val", "accuracy", e.val_acc),
            ] {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.method.letter(),
                    r.seed,
                    r.shift_desc,
                    e.epoch,
                    split,
                    metric,
                    fmt(value)
                )?;
            }
        }
        writeln!(
            w,
            "{},{},{},{},test,accuracy,{}",
            r.method.letter(),
            r.seed,
            r.shift_desc,
            r.best_epoch,
            fmt(r.test_accuracy)
        )?;
    }
    Ok(())
}

/// Mean and standard deviation of test accuracy per (method, shift) cell.
pub fn emit_summary(results: &[RunResult], path: &Path) -> Result<(), ConfigError> {
    let mut cells: Vec<(String, String, Vec<f64>)> = Vec::new();
    for r in results {
        let key = (r.method.letter().to_string(), r.shift_desc.clone());
        match cells.iter_mut().find(|(m, s, _)| *m == key.0 && *s == key.1) {
            Some((_, _, accs)) => accs.push(r.test_accuracy),
            None => cells.push((key.0, key.1, vec![r.test_accuracy])),
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,rho_or_strategy,metric,mean,std,n")?;
    for (method, shift, accs) in cells {
        let (mean, std) = mean_std(&accs);
        writeln!(
            w,
            "{method},{shift},test_accuracy,{},{},{}",
            fmt(mean),
            fmt(std),
            accs.len()
        )?;
    }
    Ok(())
}

/// Per-epoch curves only, for external plotting.
pub fn emit_curves(results: &[RunResult], path: &Path) -> Result<(), ConfigError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,seed,rho_or_strategy,epoch,split,metric,value")?;
    for r in results {
        for e in &r.epochs {
            for (split, metric, value) in [
                ("train", "accuracy", e.train_acc),
                ("val", "accuracy", e.val_acc),
            ] {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.method.letter(),
                    r.seed,
                    r.shift_desc,
                    e.epoch,
                    split,
                    metric,
                    fmt(value)
                )?;
            }
        }
    }
    Ok(())
}
