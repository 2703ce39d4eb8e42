//! The five experiment drivers. Each command materializes one run directory
//! named by the configuration content hash, writes `config.txt` with the
//! canonical configuration, and rewrites every output from scratch, so a
//! re-run with an identical configuration produces byte-identical files.
//! Divergence during training is a recorded outcome, not an error; only
//! invariant violations abort.

use std::fs;
use std::path::{Path, PathBuf};

use euler_resnet::csvfmt::{format_f64, CsvWriter};
use euler_resnet::data::{
    add_gaussian_noise_keyed, generate_two_moons, split_indices, write_csv, Dataset,
};
use euler_resnet::diagnostics::{
    gradient_profile, lipschitz_certificate, noise_bound, noise_bound_check, noise_profile,
    trajectory_export, training_bound_check,
};
use euler_resnet::euler::{euler_solve, max_abs_error, IvpProblem};
use euler_resnet::layers::Network;
use euler_resnet::params::{load_network, save_network};
use euler_resnet::tensor::{derive_seed, gauss_draw, Rng};
use euler_resnet::training::{train, write_record_csv, RunRecord};

use crate::config::{self, DataSection, ExperimentConfig};
use crate::runner::{self, median, parallel_map, population_std};
use crate::CliError;

fn create_run_dir(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let dir = out_root.join(config::run_dir_name(cfg));
    fs::create_dir_all(&dir).map_err(|e| euler_resnet::Error::io(&dir, e))?;
    let config_path = dir.join("config.txt");
    fs::write(&config_path, config::serialize(cfg))
        .map_err(|e| euler_resnet::Error::io(&config_path, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| euler_resnet::Error::io(path, e).into())
}

fn yes_no(flag: bool) -> &'static str {
    if flag {
        "yes"
    } else {
        "no"
    }
}

/// Integrates the scalar decay benchmark once per configured step size and
/// writes each trajectory plus a summary of maximum absolute errors against
/// the analytic solution, in the configured step order.
pub fn euler(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(cfg, out_root)?;
    let problem = IvpProblem::decay_benchmark(cfg.euler.t_end)?;
    let mut summary = CsvWriter::new(&["h", "max_abs_error"]);
    for &h in &cfg.euler.h_values {
        let trajectory = euler_solve(&problem, h)?;
        let dim = trajectory.states[0].len();
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..dim).map(|i| format!("x{i}")))
            .collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut writer = CsvWriter::new(&header_refs);
        for (t, state) in trajectory.times.iter().zip(&trajectory.states) {
            let mut fields = vec![format_f64(*t)];
            fields.extend(state.iter().map(|v| format_f64(*v)));
            writer.row(&fields);
        }
        writer.finish(&dir.join(format!("trajectory_h{h:?}.csv")))?;
        let err = max_abs_error(&trajectory, &problem)?;
        summary.row(&[format_f64(h), format_f64(err)]);
    }
    summary.finish(&dir.join("error_summary.csv"))?;
    Ok(dir)
}

/// Generates the two-moon dataset and splits it, returning the train half,
/// the test half, and the train rows' indices into the base dataset.
fn build_split(data: &DataSection) -> euler_resnet::Result<(Dataset, Dataset, Vec<usize>)> {
    let base = generate_two_moons(&data.moons)?;
    let (train_idx, test_idx) = split_indices(base.len(), data.train_fraction, data.split_seed)?;
    Ok((base.subset(&train_idx)?, base.subset(&test_idx)?, train_idx))
}

/// Runs one training trial. The trial seed replaces both the network and
/// shuffle seeds; `noise` optionally injects keyed Gaussian feature noise
/// into the train half only, keyed by base-dataset row indices so the result
/// does not depend on the split order.
fn run_trial(
    cfg: &ExperimentConfig,
    h: f64,
    trial_seed: u64,
    noise: Option<(f64, u64)>,
) -> euler_resnet::Result<RunRecord> {
    let (train_set, test_set, train_idx) = build_split(&cfg.data)?;
    let train_set = match noise {
        None => train_set,
        Some((level, noise_seed)) => {
            let keys: Vec<u64> = train_idx.iter().map(|&i| i as u64).collect();
            add_gaussian_noise_keyed(&train_set, level, noise_seed, &keys)?
        }
    };
    let mut net_cfg = cfg.network.clone();
    net_cfg.h = h;
    net_cfg.seed = trial_seed;
    let plan = euler_resnet::training::TrainPlan {
        seed: trial_seed,
        ..cfg.train.clone()
    };
    let mut net = Network::new(net_cfg)?;
    train(&mut net, &train_set, &test_set, &plan)
}

fn best_test_acc(record: &RunRecord) -> f64 {
    record.rows.iter().map(|r| r.test_acc).fold(0.0, f64::max)
}

/// Trains one classifier and writes the per-epoch record, the datasets, the
/// final parameters, and a key=value metadata sidecar with the full
/// configuration and the run outcome.
pub fn train_once(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(cfg, out_root)?;
    let (train_set, test_set, _) = build_split(&cfg.data)?;
    let mut net = Network::new(cfg.network.clone())?;
    let record = train(&mut net, &train_set, &test_set, &cfg.train)?;
    write_record_csv(&record, &dir.join("record.csv"))?;
    save_network(&net, &dir.join("params.bin"))?;
    write_csv(&train_set, &dir.join("train.csv"))?;
    write_csv(&test_set, &dir.join("test.csv"))?;
    let final_row = record.final_row();
    let mut meta = config::serialize(cfg);
    meta.push_str("\n[result]\n");
    meta.push_str(&format!(
        "diverged_at = {}\n",
        record.diverged_at.map(|e| e.to_string()).unwrap_or_default()
    ));
    meta.push_str(&format!("final_train_acc = {:?}\n", final_row.train_acc));
    meta.push_str(&format!("final_test_acc = {:?}\n", final_row.test_acc));
    meta.push_str(&format!("best_test_acc = {:?}\n", best_test_acc(&record)));
    write_text(&dir.join("metadata.txt"), &meta)?;
    Ok(dir)
}

fn collect_trials(
    results: Vec<euler_resnet::Result<RunRecord>>,
) -> Result<Vec<RunRecord>, CliError> {
    results
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

/// Sweeps the step factor over trial seeds, writing one record per run and
/// an aggregate of final test accuracies per step factor.
pub fn gridsearch(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let threads = runner::thread_count().map_err(CliError::Usage)?;
    let dir = create_run_dir(cfg, out_root)?;
    let mut items: Vec<(f64, u64)> = Vec::new();
    for &h in &cfg.gridsearch.h_values {
        for &seed in &cfg.gridsearch.seeds {
            items.push((h, seed));
        }
    }
    let results = parallel_map(&items, threads, |_, &(h, seed)| run_trial(cfg, h, seed, None));
    let records = collect_trials(results)?;
    for (&(h, seed), record) in items.iter().zip(&records) {
        write_record_csv(record, &dir.join(format!("record_h{h:?}_seed{seed}.csv")))?;
    }
    let mut aggregate = CsvWriter::new(&["h", "median_final_test_acc", "std_final_test_acc", "diverged"]);
    let per_h = cfg.gridsearch.seeds.len();
    for (group, &h) in records.chunks(per_h).zip(&cfg.gridsearch.h_values) {
        let finals: Vec<f64> = group.iter().map(|r| r.final_row().test_acc).collect();
        let diverged = group.iter().filter(|r| r.diverged_at.is_some()).count();
        aggregate.row(&[
            format_f64(h),
            format_f64(median(&finals)),
            format_f64(population_std(&finals)),
            diverged.to_string(),
        ]);
    }
    aggregate.finish(&dir.join("aggregate.csv"))?;
    Ok(dir)
}

/// Crosses injected training-noise levels with step factors and seeds. The
/// train half receives extra Gaussian feature noise (stream derived from the
/// data seed and the level index); the test half stays clean, and the
/// aggregate reports each run's best clean-test accuracy.
pub fn noise_sweep(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let threads = runner::thread_count().map_err(CliError::Usage)?;
    let dir = create_run_dir(cfg, out_root)?;
    let mut items: Vec<(usize, f64, f64, u64)> = Vec::new();
    for (level_idx, &level) in cfg.noise_sweep.noise_levels.iter().enumerate() {
        for &h in &cfg.noise_sweep.h_values {
            for &seed in &cfg.noise_sweep.seeds {
                items.push((level_idx, level, h, seed));
            }
        }
    }
    let results = parallel_map(&items, threads, |_, &(level_idx, level, h, seed)| {
        let noise_seed = derive_seed(cfg.data.moons.seed, level_idx as u64);
        run_trial(cfg, h, seed, Some((level, noise_seed)))
    });
    let records = collect_trials(results)?;
    for (&(_, level, h, seed), record) in items.iter().zip(&records) {
        write_record_csv(
            record,
            &dir.join(format!("record_noise{level:?}_h{h:?}_seed{seed}.csv")),
        )?;
    }
    let mut aggregate = CsvWriter::new(&[
        "noise_level",
        "h",
        "median_best_clean_acc",
        "std_best_clean_acc",
        "diverged",
    ]);
    let per_cell = cfg.noise_sweep.seeds.len();
    for (cell, chunk) in records.chunks(per_cell).enumerate() {
        let level = cfg.noise_sweep.noise_levels[cell / cfg.noise_sweep.h_values.len()];
        let h = cfg.noise_sweep.h_values[cell % cfg.noise_sweep.h_values.len()];
        let bests: Vec<f64> = chunk.iter().map(best_test_acc).collect();
        let diverged = chunk.iter().filter(|r| r.diverged_at.is_some()).count();
        aggregate.row(&[
            format_f64(level),
            format_f64(h),
            format_f64(median(&bests)),
            format_f64(population_std(&bests)),
            diverged.to_string(),
        ]);
    }
    aggregate.finish(&dir.join("aggregate.csv"))?;
    Ok(dir)
}

/// Emits the diagnostic bundle for one network on the configured dataset:
/// gradient norms per trunk boundary, a perturbation propagation profile,
/// a plain-text report for both bound checks, and feature snapshots at the
/// selected boundaries. Parameters come from `params_file` when set (its
/// embedded shape must match the `[network]` section) or from a fresh
/// seeded initialization.
pub fn diagnose(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    let dir = create_run_dir(cfg, out_root)?;
    let dataset = generate_two_moons(&cfg.data.moons)?;
    let mut net = match &cfg.diagnose.params_file {
        Some(path) => {
            let net = load_network(path)
                .map_err(|e| CliError::Usage(format!("cannot load parameters: {e}")))?;
            if net.config != cfg.network {
                return Err(CliError::Usage(format!(
                    "parameter file {} was written for a different [network] section",
                    path.display()
                )));
            }
            net
        }
        None => Network::new(cfg.network.clone())?,
    };
    let depth = net.depth();

    let profile = gradient_profile(&mut net, &dataset.features, &dataset.labels)?;
    let mut gradient_csv = CsvWriter::new(&["block", "grad_norm"]);
    for (block, norm) in profile.norms.iter().enumerate() {
        gradient_csv.row(&[block.to_string(), format_f64(*norm)]);
    }
    gradient_csv.finish(&dir.join("gradient_profile.csv"))?;

    let cert = lipschitz_certificate(&net, &dataset.features)?;
    let gradient_report =
        training_bound_check(&mut net, &dataset.features, &dataset.labels, &cert)?;

    let mut rng = Rng::new(cfg.diagnose.perturbation_seed);
    let mut perturbation = gauss_draw(&mut rng, dataset.len(), net.config.width, 0.0, 1.0);
    let norms = perturbation.row_norms();
    for (i, norm) in norms.iter().enumerate() {
        if *norm > 0.0 {
            let scale = cfg.diagnose.perturbation_norm / norm;
            for v in perturbation.row_mut(i) {
                *v *= scale;
            }
        }
    }
    let noise = noise_profile(&net, &dataset.features, &perturbation)?;
    let noise_report = noise_bound_check(&noise, cfg.network.h)?;

    let worst = |rows: &[Vec<f64>], n: usize| -> f64 {
        rows[n].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let mut noise_csv = CsvWriter::new(&["block", "epsilon", "branch_delta"]);
    for block in 0..=depth {
        let delta = if block < depth {
            format_f64(worst(&noise.branch_deltas, block))
        } else {
            String::new()
        };
        noise_csv.row(&[block.to_string(), format_f64(worst(&noise.epsilons, block)), delta]);
    }
    noise_csv.finish(&dir.join("noise_profile.csv"))?;

    let report = format!(
        "[gradient_bound]\n\
         measured_ratio = {:?}\n\
         bound = {:?}\n\
         w = {:?}\n\
         slack = {:?}\n\
         exact_certificate = {}\n\
         degenerate = {}\n\
         holds = {}\n\
         \n\
         [noise_bound]\n\
         eps_injected = {:?}\n\
         eps_final = {:?}\n\
         w = {:?}\n\
         bound = {:?}\n\
         per_layer_holds = {}\n\
         final_holds = {}\n\
         slack = {:?}\n\
         holds = {}\n",
        gradient_report.ratio,
        gradient_report.bound,
        gradient_report.w,
        gradient_report.slack,
        yes_no(cert.exact),
        yes_no(gradient_report.degenerate),
        yes_no(gradient_report.holds),
        cfg.diagnose.perturbation_norm,
        noise_report.eps_final,
        noise_report.w,
        noise_bound(cfg.diagnose.perturbation_norm, cfg.network.h, depth, noise_report.w),
        yes_no(noise_report.per_layer_holds),
        yes_no(noise_report.final_holds),
        noise_report.slack,
        yes_no(noise_report.holds),
    );
    write_text(&dir.join("bound_report.txt"), &report)?;

    let snapshots = trajectory_export(&net, &dataset, &cfg.diagnose.blocks)?;
    let width = net.config.width;
    let header: Vec<String> = (0..width)
        .map(|i| format!("x{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    for (state, &block) in snapshots.states.iter().zip(&snapshots.block_indices) {
        let mut writer = CsvWriter::new(&header_refs);
        for s in 0..state.rows() {
            let mut fields: Vec<String> = state.row(s).iter().map(|v| format_f64(*v)).collect();
            fields.push(snapshots.labels[s].to_string());
            writer.row(&fields);
        }
        writer.finish(&dir.join(format!("snapshot_block_{block}.csv")))?;
    }
    Ok(dir)
}
