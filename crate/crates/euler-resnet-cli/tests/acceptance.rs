//! Acceptance gate: one test per acceptance criterion, each ending in a
//! single PASS line with its measured quantities. Criteria with stated
//! runtime budgets assert them. The depth-100 training population is shared
//! between the two criteria that use it, so the expensive runs happen once.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use euler_resnet::data::{generate_two_moons, split, MoonSpec};
use euler_resnet::diagnostics::{
    lipschitz_certificate, noise_bound_check, noise_profile, training_bound_check,
};
use euler_resnet::euler::{euler_solve, max_abs_error, IvpProblem};
use euler_resnet::layers::{Mode, Network, NetworkConfig};
use euler_resnet::tensor::{gauss_draw, Matrix, Rng};
use euler_resnet::training::{train, RunRecord, TrainPlan};

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn net_config(depth: usize, h: f64, width: usize, use_bn: bool, seed: u64) -> NetworkConfig {
    NetworkConfig {
        depth,
        h,
        width,
        use_bn,
        num_classes: 2,
        input_dim: 2,
        seed,
        init_scale: 1.0,
    }
}

fn random_batch(rows: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = gauss_draw(&mut rng, rows, 2, 0.0, 1.0);
    let labels = (0..rows).map(|_| rng.below(2) as usize).collect();
    (x, labels)
}

fn normalized_perturbation(rows: usize, cols: usize, norm: f64, seed: u64) -> Matrix {
    let mut p = gauss_draw(&mut Rng::new(seed), rows, cols, 0.0, 1.0);
    for i in 0..rows {
        let n = p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            let scale = norm / n;
            for v in p.row_mut(i) {
                *v *= scale;
            }
        }
    }
    p
}

fn with_step(net: &Network, h: f64) -> Network {
    let mut out = net.clone();
    out.config.h = h;
    for block in &mut out.blocks {
        block.h = h;
    }
    out
}

#[test]
fn criterion_01_euler_stability() {
    let start = Instant::now();
    let problem = IvpProblem::decay_benchmark(3.0).unwrap();
    let steps = [1.0, 0.5, 0.1, 0.01];
    let errors: Vec<f64> = steps
        .iter()
        .map(|&h| max_abs_error(&euler_solve(&problem, h).unwrap(), &problem).unwrap())
        .collect();
    for pair in errors.windows(2) {
        assert!(pair[1] < pair[0], "errors not strictly decreasing: {errors:?}");
    }
    let coarse = euler_solve(&problem, 1.0).unwrap();
    assert!(coarse.states[0][0] > 0.0);
    let x1 = coarse.states[1][0];
    assert_eq!(
        x1.to_bits(),
        (1.0f64 - 2.3).to_bits(),
        "step 1 must equal the hand computation 1 - 2.3 evaluated in binary64"
    );
    assert!(x1 < 0.0, "sign change at step 1");
    assert!((-2.3f64 * 1.0).exp() > 0.0);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1.0, "criterion 1 took {secs:.3} s, budget 1 s");
    println!(
        "criterion 01 PASS: errors {errors:?} strictly decreasing, x1 = {x1} < 0, {secs:.3} s"
    );
}

#[test]
fn criterion_02_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for depth in [1, 3, 10] {
        for use_bn in [false, true] {
            for h in [0.1, 1.0] {
                let net =
                    Network::new(net_config(depth, h, 8, use_bn, 1000 + depth as u64)).unwrap();
                let (x, labels) = random_batch(16, 40 + depth as u64);
                for mode in [Mode::Eval, Mode::Train] {
                    let seed = 7 * depth as u64 + u64::from(use_bn) + h.to_bits() % 97;
                    let rel = euler_resnet::diagnostics::finite_difference_oracle(
                        &net, &x, &labels, mode, 20, 1e-5, seed,
                    )
                    .unwrap();
                    assert!(
                        rel < 1e-5,
                        "relative error {rel} at depth {depth}, bn {use_bn}, h {h}, mode {mode:?}"
                    );
                    worst = worst.max(rel);
                    checks += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "criterion 2 took {secs:.1} s, budget 30 s");
    println!(
        "criterion 02 PASS: {checks} oracle checks, worst relative error {worst:.3e}, {secs:.2} s"
    );
}

/// The 120-network eval-mode population shared by the two bound criteria:
/// 20 nets per (depth, step) configuration, widths at most 16 so every
/// certificate takes the exact spectral-norm path, batch-norm toggled by
/// seed parity.
fn bound_population() -> Vec<(Network, Matrix, Vec<usize>)> {
    let mut nets = Vec::new();
    for depth in [5, 20, 50] {
        for h in [0.1f64, 1.0] {
            for i in 0..20u64 {
                let seed = depth as u64 * 10_000 + h.to_bits() % 1000 + i;
                let net = Network::new(net_config(depth, h, 8, i % 2 == 1, seed)).unwrap();
                let (x, labels) = random_batch(16, seed ^ 0x5eed);
                nets.push((net, x, labels));
            }
        }
    }
    nets
}

#[test]
fn criterion_03_training_bound_holds() {
    let start = Instant::now();
    let mut held = 0usize;
    let mut total = 0usize;
    let mut min_slack = f64::INFINITY;
    for (mut net, x, labels) in bound_population() {
        let cert = lipschitz_certificate(&net, &x).unwrap();
        assert!(cert.exact, "width 8 must take the exact certificate path");
        let report = training_bound_check(&mut net, &x, &labels, &cert).unwrap();
        assert!(!report.degenerate, "population batches must produce nonzero gradients");
        assert!(
            report.holds,
            "bound violated: ratio {} > bound {} (depth {}, h {})",
            report.ratio, report.bound, net.config.depth, net.config.h
        );
        min_slack = min_slack.min(report.slack);
        held += 1;
        total += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(held, total);
    assert_eq!(total, 120);
    assert!(secs < 120.0, "criterion 3 took {secs:.1} s, budget 2 min");
    println!(
        "criterion 03 PASS: gradient bound held in {held}/{total} nets, min slack {min_slack:.3e}, {secs:.2} s"
    );
}

#[test]
fn criterion_04_noise_bounds_hold() {
    let start = Instant::now();
    let mut held = 0usize;
    let mut total = 0usize;
    for (net, x, _) in bound_population() {
        for eps0 in [0.01, 0.1] {
            let p = normalized_perturbation(x.rows(), net.config.width, eps0, 0xeb5 ^ net.config.seed);
            let profile = noise_profile(&net, &x, &p).unwrap();
            let report = noise_bound_check(&profile, net.config.h).unwrap();
            assert!(
                report.per_layer_holds && report.final_holds,
                "noise bound violated at depth {}, h {}, eps0 {eps0}",
                net.config.depth,
                net.config.h
            );
            held += 1;
            total += 1;
        }
    }
    assert_eq!(total, 240);

    let steps = [1.0, 0.5, 0.1, 0.01];
    let mut monotone_nets = 0usize;
    for seed in 0..5u64 {
        let base = Network::new(net_config(20, 1.0, 8, seed % 2 == 1, 9_000 + seed)).unwrap();
        let (x, _) = random_batch(16, 777 + seed);
        let p = normalized_perturbation(x.rows(), 8, 0.1, 31 + seed);
        let amplifications: Vec<f64> = steps
            .iter()
            .map(|&h| {
                let stepped = with_step(&base, h);
                let profile = noise_profile(&stepped, &x, &p).unwrap();
                let eps0 = profile.epsilons[0].iter().copied().fold(0.0, f64::max);
                profile.final_epsilon() - eps0
            })
            .collect();
        for pair in amplifications.windows(2) {
            assert!(
                pair[1] <= pair[0],
                "amplification not monotone in h for seed {seed}: {amplifications:?}"
            );
        }
        monotone_nets += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "criterion 4 took {secs:.1} s, budget 2 min");
    println!(
        "criterion 04 PASS: both inequalities held in {held}/{total} cases, amplification monotone in h on {monotone_nets} fixed nets, {secs:.2} s"
    );
}

/// Five-seed depth-100 training runs at h = 0.1 and h = 1.0 with the
/// default experiment settings, computed once and shared.
struct DepthRuns {
    h01: Vec<RunRecord>,
    h10: Vec<RunRecord>,
    secs: f64,
}

fn depth_runs() -> &'static DepthRuns {
    static RUNS: OnceLock<DepthRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let run_seed = |h: f64, seed: u64| -> RunRecord {
            let base = generate_two_moons(&MoonSpec {
                n_per_class: 500,
                radius: 1.0,
                noise_std: 0.15,
                seed: 2,
            })
            .unwrap();
            let (train_set, test_set) = split(&base, 0.5, 3).unwrap();
            let mut net = Network::new(net_config(100, h, 16, false, seed)).unwrap();
            let plan = TrainPlan {
                epochs: 200,
                batch_size: 32,
                lr: 0.01,
                momentum: 0.9,
                seed,
            };
            train(&mut net, &train_set, &test_set, &plan).unwrap()
        };
        let h01 = (1..=5).map(|s| run_seed(0.1, s)).collect();
        let h10 = (1..=5).map(|s| run_seed(1.0, s)).collect();
        DepthRuns {
            h01,
            h10,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_05_depth_training_robustness() {
    let runs = depth_runs();
    let finals_01: Vec<f64> = runs.h01.iter().map(|r| r.final_row().test_acc).collect();
    let finals_10: Vec<f64> = runs.h10.iter().map(|r| r.final_row().test_acc).collect();
    let median_01 = median(&finals_01);
    assert!(median_01 >= 0.9, "h=0.1 median {median_01} below 0.9: {finals_01:?}");
    let std_01 = population_std(&finals_01);
    let std_10 = population_std(&finals_10);
    assert!(
        std_01 < std_10,
        "h=0.1 std {std_01} not strictly below h=1.0 std {std_10}"
    );
    let bad_runs = runs
        .h10
        .iter()
        .filter(|r| r.diverged_at.is_some() || r.final_row().test_acc <= 0.6)
        .count();
    assert!(bad_runs >= 4, "h=1.0 diverged or stalled in only {bad_runs}/5 seeds");
    assert!(
        runs.secs < 600.0,
        "criterion 5 training took {:.1} s, budget 10 min",
        runs.secs
    );
    println!(
        "criterion 05 PASS: h=0.1 median {median_01} (std {std_01:.2e}) vs h=1.0 std {std_10:.2e}, {bad_runs}/5 bad at h=1.0, {:.1} s",
        runs.secs
    );
}

#[test]
fn criterion_06_bn_free_trainability() {
    let runs = depth_runs();
    for (i, record) in runs.h01.iter().enumerate() {
        assert_eq!(
            record.diverged_at, None,
            "seed {} diverged at depth 100 without batch norm",
            i + 1
        );
        let non_finite = record.rows.iter().filter(|r| !r.train_loss.is_finite()).count();
        assert_eq!(non_finite, 0, "seed {} had non-finite losses", i + 1);
        assert_eq!(record.rows.len(), 200, "seed {} did not run every epoch", i + 1);
    }
    println!("criterion 06 PASS: zero non-finite losses across all 5 no-BN depth-100 seeds");
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_euler-resnet"))
}

fn run_cli(dir: &Path, args: &[&str]) -> Output {
    let out = cli()
        .current_dir(dir)
        .env_remove("EULER_RESNET_THREADS")
        .args(args)
        .output()
        .expect("binary spawns");
    assert!(
        out.status.success(),
        "cli failed: {:?}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn only_run_dir(root: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .expect("out root exists")
        .map(|e| e.expect("dir entry").path())
        .collect();
    assert_eq!(entries.len(), 1, "expected exactly one run dir in {root:?}");
    entries.pop().expect("one entry")
}

/// Parses a CSV written by the binary into f64 rows (non-numeric fields
/// become NaN, which the criteria never read).
fn read_csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {path:?}: {e}"))
        .lines()
        .skip(1)
        .map(|line| line.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

#[test]
fn criterion_07_gridsearch_interior_maximum() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    run_cli(tmp.path(), &["gridsearch", "--out", "g"]);
    let aggregate = read_csv_rows(&only_run_dir(&tmp.path().join("g")).join("aggregate.csv"));
    assert_eq!(aggregate.len(), 5, "one aggregate row per step factor");
    let median_at = |h: f64| -> f64 {
        aggregate
            .iter()
            .find(|row| row[0] == h)
            .unwrap_or_else(|| panic!("no aggregate row for h = {h}"))[1]
    };
    let low = median_at(0.001);
    let mid = median_at(0.1);
    let high = median_at(1.0);
    assert!(
        mid > low && mid > high,
        "no interior maximum: median({low}) at 0.001, median({mid}) at 0.1, median({high}) at 1.0"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "criterion 7 took {secs:.0} s, budget 30 min");
    println!(
        "criterion 07 PASS: median accuracy {mid} at h=0.1 exceeds {low} at h=0.001 and {high} at h=1.0, {secs:.0} s"
    );
}

#[test]
fn criterion_08_noise_generalization() {
    let tmp = tempfile::tempdir().expect("tempdir");
    fs::write(
        tmp.path().join("noise.cfg"),
        "[experiment]\nkind = noise-sweep\n\n[noise_sweep]\nnoise_levels = 0.1, 0.3\nh_values = 0.1, 1.0\nseeds = 1, 2, 3, 4, 5\n",
    )
    .expect("config written");
    run_cli(tmp.path(), &["noise-sweep", "--config", "noise.cfg", "--out", "n"]);
    let aggregate = read_csv_rows(&only_run_dir(&tmp.path().join("n")).join("aggregate.csv"));
    assert_eq!(aggregate.len(), 4, "levels x steps rows");
    let best = |level: f64, h: f64| -> f64 {
        aggregate
            .iter()
            .find(|row| row[0] == level && row[1] == h)
            .unwrap_or_else(|| panic!("no aggregate row for level {level}, h {h}"))[2]
    };
    for level in [0.1, 0.3] {
        let small = best(level, 0.1);
        let large = best(level, 1.0);
        assert!(
            small >= large,
            "at noise level {level}, h=0.1 best clean accuracy {small} < h=1.0's {large}"
        );
    }
    println!(
        "criterion 08 PASS: median best clean accuracy at h=0.1 >= h=1.0 at both noise levels ({} vs {} at 0.1, {} vs {} at 0.3)",
        best(0.1, 0.1),
        best(0.1, 1.0),
        best(0.3, 0.1),
        best(0.3, 1.0)
    );
}

/// Sorted (name, bytes) listing of one run directory.
fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("run dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().into_string().expect("utf8 name"),
                fs::read(e.path()).expect("file bytes"),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn criterion_09_determinism() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let shared = "\
[network]
depth = 4
width = 6

[data]
n_per_class = 30
seed = 5

[train]
epochs = 5
batch_size = 8
lr = 0.1

[gridsearch]
h_values = 0.1, 1.0
seeds = 1, 2

[noise_sweep]
noise_levels = 0.0, 0.2
h_values = 0.1
seeds = 1, 2

[diagnose]
blocks = 0, 2, 4
";
    fs::write(tmp.path().join("shared.cfg"), shared).expect("config written");
    let mut compared_files = 0usize;
    for kind in ["euler", "train", "gridsearch", "noise-sweep", "diagnose"] {
        let (first, second) = (format!("{kind}-a"), format!("{kind}-b"));
        for out in [first.as_str(), second.as_str()] {
            let mut args = vec![kind];
            if kind != "euler" {
                args.extend(["--config", "shared.cfg"]);
            }
            args.extend(["--out", out]);
            run_cli(tmp.path(), &args);
        }
        let a = dir_contents(&only_run_dir(&tmp.path().join(&first)));
        let b = dir_contents(&only_run_dir(&tmp.path().join(&second)));
        assert_eq!(
            a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "{kind}: file sets differ"
        );
        for ((name, left), (_, right)) in a.iter().zip(&b) {
            assert_eq!(left, right, "{kind}/{name} differs between identical re-runs");
            compared_files += 1;
        }
    }
    println!("criterion 09 PASS: {compared_files} files byte-identical across re-runs of all five experiment kinds");
}

#[test]
fn criterion_10_telescoping_identity() {
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for depth in [20, 50] {
        for h in [0.1, 0.5] {
            for seed in 0..4u64 {
                let net = Network::new(net_config(
                    depth,
                    h,
                    8,
                    seed % 2 == 1,
                    4_000 + depth as u64 + seed,
                ))
                .unwrap();
                let (x, _) = random_batch(8, 600 + seed);
                let states = net.trunk_states(&x).unwrap();
                for upto in [1, depth / 2, depth] {
                    let mut acc = states[0].clone();
                    for n in 0..upto {
                        let f = net.blocks[n].branch_eval(&states[n]).unwrap();
                        acc.add_assign_scaled(&f, h).unwrap();
                    }
                    let gap = acc.sub(&states[upto]).unwrap().frobenius_norm();
                    assert!(
                        gap < 1e-10,
                        "telescoping gap {gap} at depth {depth}, h {h}, N = {upto}"
                    );
                    worst = worst.max(gap);
                    checks += 1;
                }
            }
        }
    }
    println!("criterion 10 PASS: {checks} telescoping checks, worst gap {worst:.3e}");
}
