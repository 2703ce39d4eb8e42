//! Measured verification of the step-factor bounds: gradient profiles across
//! trunk boundaries, Lipschitz certificates for residual branches, forward
//! noise-amplification profiles, the two bound checks built on them, trunk
//! snapshots for plotting, and a finite-difference gradient oracle.
//!
//! Both bound checks follow per-sample propagation paths: norms are Euclidean
//! per sample and reports state the worst case over the batch, since the
//! bounds describe a single input's journey through the trunk, not a batch
//! average. All diagnostics run the network in eval mode so that batch
//! normalization is a frozen per-feature affine map and per-sample Jacobians
//! are well defined.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::tensor::{Matrix, Rng};
use crate::training::softmax_cross_entropy;

/// Tolerance added to the right-hand side of every bound comparison to
/// absorb floating-point rounding in the measured quantities.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Widths up to this get exact per-sample branch Jacobian spectral norms in
/// [`lipschitz_certificate`]; wider networks fall back to power iteration.
pub const EXACT_CERT_WIDTH_LIMIT: usize = 16;

/// Power-iteration sweep count for the estimated certificate path.
pub const POWER_ITERS: usize = 100;

/// Multiplier applied to power-iteration estimates so the certificate stays
/// an upper bound despite the estimator converging from below.
pub const POWER_ITER_SAFETY: f64 = 1.05;

/// Norms of the loss gradient at every trunk boundary from one backward
/// sweep: `norms[n]` is the batch Frobenius norm of the gradient at the
/// input of block `n` (index `depth` is the trunk output) and
/// `sample_norms[n]` holds the per-sample Euclidean norms behind it.
#[derive(Debug, Clone)]
pub struct GradientProfile {
    pub norms: Vec<f64>,
    pub sample_norms: Vec<Vec<f64>>,
    /// Highest boundary index with a non-finite gradient: the point where
    /// the backward sweep first left the finite range. A forward pass that
    /// is already non-finite is reported as an explosion at the trunk
    /// output, with `NaN` norms throughout.
    pub exploded_at: Option<usize>,
}

/// Runs one eval-mode forward and one backward sweep of the mean softmax
/// cross-entropy on `(x, labels)` and records the gradient norm at every
/// trunk boundary. An exploded pass is flagged, never an error.
pub fn gradient_profile(net: &mut Network, x: &Matrix, labels: &[usize]) -> Result<GradientProfile> {
    let depth = net.depth();
    net.zero_grads();
    let logits = net.forward_mut(x, Mode::Eval)?;
    let (loss, logit_grad) = softmax_cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Ok(GradientProfile {
            norms: vec![f64::NAN; depth + 1],
            sample_norms: vec![vec![f64::NAN; x.rows()]; depth + 1],
            exploded_at: Some(depth),
        });
    }
    let trace = net.backward_full(&logit_grad)?;
    let norms: Vec<f64> = trace.boundary_grads.iter().map(Matrix::frobenius_norm).collect();
    let sample_norms: Vec<Vec<f64>> = trace.boundary_grads.iter().map(Matrix::row_norms).collect();
    let exploded_at = (0..=depth).rev().find(|&n| !norms[n].is_finite());
    Ok(GradientProfile {
        norms,
        sample_norms,
        exploded_at,
    })
}

/// Per-block upper bounds `w_n` on the operator norm of the branch Jacobian
/// `dF/dx` over every sample the certificate was evaluated on, plus the
/// aggregate `W = max_n w_n`. `exact` records which computation path
/// produced the bounds.
#[derive(Debug, Clone)]
pub struct LipschitzCertificate {
    pub per_block: Vec<f64>,
    pub aggregate: f64,
    pub exact: bool,
}

/// Builds a Lipschitz certificate for the trunk at the eval-mode states the
/// batch `x` visits. For each block and each sample the branch Jacobian is
/// `W2 * diag(active * bn_scale) * W1`, where `active` is the relu mask at
/// the visited pre-activation and `bn_scale` is the frozen per-feature
/// batch-norm factor (1 without batch norm). At width at most
/// [`EXACT_CERT_WIDTH_LIMIT`] the spectral norm is computed exactly (inflated
/// by a relative 1e-12 to absorb eigensolver rounding); above that, power
/// iteration times [`POWER_ITER_SAFETY`].
pub fn lipschitz_certificate(net: &Network, x: &Matrix) -> Result<LipschitzCertificate> {
    let states = net.trunk_states(x)?;
    let width = net.config.width;
    let exact = width <= EXACT_CERT_WIDTH_LIMIT;
    let mut per_block = Vec::with_capacity(net.depth());
    for (n, block) in net.blocks.iter().enumerate() {
        let u = block.affine1.apply(&states[n])?;
        let v = match &block.batch_norm {
            Some(bn) => bn.apply_eval(&u)?,
            None => u,
        };
        let bn_scale: Option<Vec<f64>> = block.batch_norm.as_ref().map(|bn| {
            (0..width)
                .map(|j| bn.gamma[j] / (bn.running_var[j] + bn.eps).sqrt())
                .collect()
        });
        let mut w_n = 0.0f64;
        for s in 0..v.rows() {
            let mut w2_scaled = block.affine2.weight.clone();
            for c in 0..width {
                let d = if v.get(s, c) > 0.0 {
                    bn_scale.as_ref().map_or(1.0, |sc| sc[c])
                } else {
                    0.0
                };
                for r in 0..width {
                    let val = w2_scaled.get(r, c) * d;
                    w2_scaled.set(r, c, val);
                }
            }
            let jac = w2_scaled.matmul(&block.affine1.weight)?;
            let norm = if exact {
                jac.spectral_norm_exact() * (1.0 + 1e-12)
            } else {
                jac.operator_norm_estimate(POWER_ITERS) * POWER_ITER_SAFETY
            };
            w_n = w_n.max(norm);
        }
        per_block.push(w_n);
    }
    let aggregate = per_block.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzCertificate {
        per_block,
        aggregate,
        exact,
    })
}

/// The gradient growth bound `1 - h + h * (1 + w)^depth`.
pub fn gradient_bound(h: f64, depth: usize, w: f64) -> f64 {
    1.0 - h + h * (1.0 + w).powi(depth as i32)
}

/// Outcome of [`training_bound_check`]: the worst per-sample gradient ratio
/// `||dL/dx_0|| / ||dL/dx_D||`, the certificate bound, and whether the bound
/// held. A degenerate report (no sample had a nonzero trunk-output gradient)
/// makes no ratio claim: `holds` is vacuously true and `ratio`/`slack` are
/// `NaN`. Samples with a zero output gradient are skipped individually when
/// others are informative.
#[derive(Debug, Clone)]
pub struct GradientBoundReport {
    pub ratio: f64,
    pub bound: f64,
    pub w: f64,
    pub slack: f64,
    pub holds: bool,
    pub degenerate: bool,
}

/// Checks the gradient growth bound on one eval-mode batch: the per-sample
/// ratio of the trunk-entry gradient norm to the trunk-output gradient norm
/// must not exceed `1 - h + h * (1 + W)^D` for the certificate's `W`. Given
/// a certificate evaluated at the same states, the inequality is a theorem,
/// so a violation indicates an implementation bug.
pub fn training_bound_check(
    net: &mut Network,
    x: &Matrix,
    labels: &[usize],
    cert: &LipschitzCertificate,
) -> Result<GradientBoundReport> {
    let depth = net.depth();
    if cert.per_block.len() != depth {
        return Err(Error::DimensionMismatch {
            op: "training_bound_check",
            expected: depth,
            actual: cert.per_block.len(),
        });
    }
    net.zero_grads();
    let logits = net.forward_mut(x, Mode::Eval)?;
    let (_, logit_grad) = softmax_cross_entropy(&logits, labels)?;
    let trace = net.backward_full(&logit_grad)?;
    let entry = trace.boundary_grads[0].row_norms();
    let output = trace.boundary_grads[depth].row_norms();
    let bound = gradient_bound(net.config.h, depth, cert.aggregate);
    let mut ratio: Option<f64> = None;
    for (g0, gd) in entry.iter().zip(&output) {
        if *gd == 0.0 {
            continue;
        }
        let r = g0 / gd;
        ratio = Some(ratio.map_or(r, |best| best.max(r)));
    }
    Ok(match ratio {
        Some(ratio) => GradientBoundReport {
            ratio,
            bound,
            w: cert.aggregate,
            slack: bound - ratio,
            holds: ratio <= bound + BOUND_TOLERANCE,
            degenerate: false,
        },
        None => GradientBoundReport {
            ratio: f64::NAN,
            bound,
            w: cert.aggregate,
            slack: f64::NAN,
            holds: true,
            degenerate: true,
        },
    })
}

/// Per-sample distances between the clean and perturbed eval-mode feature
/// trajectories: `epsilons[n][s]` is the Euclidean distance at trunk
/// boundary `n` and `branch_deltas[n][s]` is `||F(x_n + delta) - F(x_n)||`
/// for block `n`.
#[derive(Debug, Clone)]
pub struct NoiseProfile {
    pub epsilons: Vec<Vec<f64>>,
    pub branch_deltas: Vec<Vec<f64>>,
}

impl NoiseProfile {
    pub fn depth(&self) -> usize {
        self.branch_deltas.len()
    }

    /// Worst-sample distance at the trunk output.
    pub fn final_epsilon(&self) -> f64 {
        self.epsilons
            .last()
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

/// Tracks a perturbation through the trunk. The perturbation is added to the
/// trunk entry `x_0 = embed(x)` (not the raw features), so `epsilons[0]`
/// equals the injected row norms exactly; both trajectories then evolve
/// under the same frozen blocks in eval mode.
pub fn noise_profile(net: &Network, x: &Matrix, perturbation: &Matrix) -> Result<NoiseProfile> {
    let clean = net.trunk_states(x)?;
    if perturbation.shape() != clean[0].shape() {
        return Err(Error::ShapeMismatch {
            op: "noise_profile",
            left: perturbation.shape(),
            right: clean[0].shape(),
        });
    }
    let mut perturbed = clean[0].add(perturbation)?;
    let mut epsilons = vec![perturbation.row_norms()];
    let mut branch_deltas = Vec::with_capacity(net.depth());
    for (n, block) in net.blocks.iter().enumerate() {
        let f_clean = block.branch_eval(&clean[n])?;
        let f_perturbed = block.branch_eval(&perturbed)?;
        branch_deltas.push(f_perturbed.sub(&f_clean)?.row_norms());
        perturbed.add_assign_scaled(&f_perturbed, block.h)?;
        epsilons.push(perturbed.sub(&clean[n + 1])?.row_norms());
    }
    Ok(NoiseProfile {
        epsilons,
        branch_deltas,
    })
}

/// The noise amplification bound `eps0 + h * depth * w`.
pub fn noise_bound(eps0: f64, h: f64, depth: usize, w: f64) -> f64 {
    eps0 + h * depth as f64 * w
}

/// Outcome of [`noise_bound_check`]: `w` is the largest observed per-sample
/// branch deviation, `per_layer_holds` covers the telescoping inequality
/// `eps_N <= eps_0 + h * sum_{i<N} ||dF_i||` at every boundary, and
/// `final_holds` covers `eps_D <= eps_0 + h * D * w`. `slack` is the
/// smallest final-bound margin over the batch.
#[derive(Debug, Clone)]
pub struct NoiseBoundReport {
    pub w: f64,
    pub eps_final: f64,
    pub per_layer_holds: bool,
    pub final_holds: bool,
    pub holds: bool,
    pub slack: f64,
}

/// Checks both noise amplification inequalities on a measured profile. With
/// `w` taken as the maximum observed branch deviation, both are triangle
/// inequalities over the trunk telescoping, so violations indicate an
/// implementation bug.
pub fn noise_bound_check(profile: &NoiseProfile, h: f64) -> Result<NoiseBoundReport> {
    let depth = profile.depth();
    if profile.epsilons.len() != depth + 1 {
        return Err(Error::DimensionMismatch {
            op: "noise_bound_check",
            expected: depth + 1,
            actual: profile.epsilons.len(),
        });
    }
    let samples = profile.epsilons[0].len();
    if profile
        .epsilons
        .iter()
        .chain(profile.branch_deltas.iter())
        .any(|row| row.len() != samples)
    {
        return Err(Error::InvalidArgument {
            arg: "profile",
            reason: "ragged per-sample rows".to_string(),
        });
    }

    let w = profile
        .branch_deltas
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max);
    let mut per_layer_holds = true;
    let mut final_holds = true;
    let mut slack = f64::INFINITY;
    for s in 0..samples {
        let eps0 = profile.epsilons[0][s];
        let mut delta_sum = 0.0;
        for n in 0..depth {
            delta_sum += profile.branch_deltas[n][s];
            if profile.epsilons[n + 1][s] > eps0 + h * delta_sum + BOUND_TOLERANCE {
                per_layer_holds = false;
            }
        }
        let final_bound = noise_bound(eps0, h, depth, w);
        let margin = final_bound - profile.epsilons[depth][s];
        slack = slack.min(margin);
        if margin < -BOUND_TOLERANCE {
            final_holds = false;
        }
    }
    Ok(NoiseBoundReport {
        w,
        eps_final: profile.final_epsilon(),
        per_layer_holds,
        final_holds,
        holds: per_layer_holds && final_holds,
        slack,
    })
}

/// Eval-mode trunk states at selected block boundaries, with labels, ready
/// for per-block scatter export.
#[derive(Debug, Clone)]
pub struct TrunkSnapshots {
    pub block_indices: Vec<usize>,
    pub states: Vec<Matrix>,
    pub labels: Vec<usize>,
}

/// Captures the trunk state of every sample at each requested boundary
/// (0 is the embedded input, `depth` the trunk output).
pub fn trajectory_export(
    net: &Network,
    d: &Dataset,
    block_indices: &[usize],
) -> Result<TrunkSnapshots> {
    for &b in block_indices {
        if b > net.depth() {
            return Err(Error::InvalidArgument {
                arg: "block_indices",
                reason: format!("block {b} out of range for depth {}", net.depth()),
            });
        }
    }
    let all = net.trunk_states(&d.features)?;
    Ok(TrunkSnapshots {
        block_indices: block_indices.to_vec(),
        states: block_indices.iter().map(|&b| all[b].clone()).collect(),
        labels: d.labels.clone(),
    })
}

/// Central-difference check of the analytic gradients: perturbs `samples`
/// randomly chosen parameters (drawn with a generator seeded by `seed`) by
/// `+/- delta`, recomputes the mean cross-entropy loss, and returns the
/// maximum relative error `|analytic - fd| / (|analytic| + |fd| + 1e-8)`
/// against the accumulated analytic gradients. The network is cloned; the
/// caller's instance is untouched. In train mode the loss uses batch
/// statistics, exercising the batch-coupled normalization backward.
///
/// A central difference cannot resolve derivatives below the rounding noise
/// of the loss divided by `2 * delta`, so parameters whose analytic and
/// measured derivatives both fall under that resolution are counted as
/// agreeing rather than compared as noise. Batch normalization produces
/// exactly such parameters in train mode: mean subtraction cancels a shift
/// of the preceding bias, making its true derivative zero while the
/// difference quotient returns rounding residue.
pub fn finite_difference_oracle(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    mode: Mode,
    samples: usize,
    delta: f64,
    seed: u64,
) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidArgument {
            arg: "delta",
            reason: format!("must be positive and finite, got {delta}"),
        });
    }
    if samples == 0 {
        return Err(Error::InvalidArgument {
            arg: "samples",
            reason: "must be at least 1".to_string(),
        });
    }
    let mut work = net.clone();
    work.zero_grads();
    let logits = work.forward_mut(x, mode)?;
    let (base_loss, logit_grad) = softmax_cross_entropy(&logits, labels)?;
    work.backward(&logit_grad)?;
    let resolution = 512.0 * f64::EPSILON * base_loss.abs().max(1.0) / (2.0 * delta);

    let count = work.param_count();
    let mut rng = Rng::new(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let idx = rng.below(count);
        let analytic = work.grad_at(idx)?;
        let mut original = 0.0;
        work.with_param_mut(idx, |p| original = *p)?;

        work.with_param_mut(idx, |p| *p = original + delta)?;
        let loss_plus = loss_of(&mut work, x, labels, mode)?;
        work.with_param_mut(idx, |p| *p = original - delta)?;
        let loss_minus = loss_of(&mut work, x, labels, mode)?;
        work.with_param_mut(idx, |p| *p = original)?;

        let fd = (loss_plus - loss_minus) / (2.0 * delta);
        if analytic.abs() <= resolution && fd.abs() <= resolution {
            continue;
        }
        let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn loss_of(work: &mut Network, x: &Matrix, labels: &[usize], mode: Mode) -> Result<f64> {
    let logits = match mode {
        Mode::Eval => work.forward_eval(x)?,
        Mode::Train => work.forward_mut(x, Mode::Train)?,
    };
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}
