//! Network building blocks: affine maps, batch normalization, residual
//! blocks with an explicit step factor, and the full trunk-plus-head network.
//!
//! A residual block computes `y = x + h * F(x)` where the branch is
//! `F = affine2 . relu . [batchnorm] . affine1` and `h` is the step factor;
//! the trunk of a depth-`D` network applies `D` such blocks at a fixed width,
//! between an input embedding and a classification head. All forward passes
//! work on batches (rows are samples), and every layer owns its gradient
//! accumulators so a backward pass is a single sweep.
//!
//! Two calling styles exist on purpose. The `&mut` paths (`forward_mut`,
//! `backward`) cache activations and, in train mode, update batch-norm
//! running statistics; they are the training path. The `&self` paths
//! (`forward_eval`, `trunk_states`, `branch_eval`) are pure eval-mode
//! evaluations of a frozen network and safe to call from several threads on
//! a shared snapshot.

use crate::error::{Error, Result};
use crate::tensor::{gauss_draw, Matrix, Rng};

/// Whether batch normalization uses batch statistics (and updates its
/// running estimates) or the frozen running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully-connected affine map `y = x W^T + b` with `W` stored out-by-in.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
    cached_input: Option<Matrix>,
}

impl AffineLayer {
    /// Weights are drawn from `N(0, (init_scale / sqrt(in_dim))^2)`, biases
    /// start at zero.
    pub fn new(in_dim: usize, out_dim: usize, init_scale: f64, rng: &mut Rng) -> AffineLayer {
        let std = init_scale / (in_dim as f64).sqrt();
        AffineLayer {
            weight: gauss_draw(rng, out_dim, in_dim, 0.0, std),
            bias: vec![0.0; out_dim],
            grad_weight: Matrix::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
            cached_input: None,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> AffineLayer {
        let grad_weight = Matrix::zeros(weight.rows(), weight.cols());
        let grad_bias = vec![0.0; bias.len()];
        AffineLayer {
            weight,
            bias,
            grad_weight,
            grad_bias,
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pure application, no caching: usable on a shared reference.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_nt(&self.weight)?;
        y.add_row_bias(&self.bias)?;
        Ok(y)
    }

    /// Forward pass that caches the input for a later [`backward`].
    ///
    /// [`backward`]: AffineLayer::backward
    pub fn forward_mut(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = self.apply(x)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input. Requires a preceding `forward_mut`.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let x = self.cached_input.as_ref().ok_or(Error::InvalidArgument {
            arg: "AffineLayer::backward",
            reason: "no cached forward pass".to_string(),
        })?;
        self.grad_weight
            .add_assign_scaled(&grad_out.matmul_tn(x)?, 1.0)?;
        for i in 0..grad_out.rows() {
            for (gb, &g) in self.grad_bias.iter_mut().zip(grad_out.row(i)) {
                *gb += g;
            }
        }
        grad_out.matmul(&self.weight)
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.grad_bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-feature batch normalization with learned scale and shift.
///
/// Train mode normalizes each column by the batch mean and biased batch
/// variance and updates the running estimates as
/// `running <- (1 - momentum) * running + momentum * batch_stat` with
/// momentum 0.1. Eval mode applies the frozen per-feature affine map built
/// from the running estimates; running mean starts at 0 and running variance
/// at 1, so an untrained layer is close to the identity in eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
    train: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(dim: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            grad_gamma: vec![0.0; dim],
            grad_beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Pure eval-mode application using the running estimates.
    pub fn apply_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_dim(x)?;
        let dim = self.dim();
        let scale: Vec<f64> = (0..dim)
            .map(|j| self.gamma[j] / (self.running_var[j] + self.eps).sqrt())
            .collect();
        let mut y = x.clone();
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            for j in 0..dim {
                row[j] = (row[j] - self.running_mean[j]) * scale[j] + self.beta[j];
            }
        }
        Ok(y)
    }

    pub fn forward_mut(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_dim(x)?;
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Eval => {
                let y = self.apply_eval(x)?;
                let inv_std: Vec<f64> = (0..self.dim())
                    .map(|j| 1.0 / (self.running_var[j] + self.eps).sqrt())
                    .collect();
                let mut x_hat = x.clone();
                for i in 0..x_hat.rows() {
                    let row = x_hat.row_mut(i);
                    for j in 0..self.dim() {
                        row[j] = (row[j] - self.running_mean[j]) * inv_std[j];
                    }
                }
                self.cache = Some(BnCache {
                    x_hat,
                    inv_std,
                    train: false,
                });
                Ok(y)
            }
        }
    }

    fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let m = x.rows();
        if m < 2 {
            return Err(Error::InvalidArgument {
                arg: "BatchNorm batch",
                reason: format!("train-mode normalization needs at least 2 samples, got {m}"),
            });
        }
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for i in 0..m {
            for (mj, &v) in mean.iter_mut().zip(x.row(i)) {
                *mj += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);

        let mut var = vec![0.0; dim];
        for i in 0..m {
            for j in 0..dim {
                let d = x.get(i, j) - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut x_hat = x.clone();
        for i in 0..m {
            let row = x_hat.row_mut(i);
            for j in 0..dim {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut y = x_hat.clone();
        for i in 0..m {
            let row = y.row_mut(i);
            for j in 0..dim {
                row[j] = row[j] * self.gamma[j] + self.beta[j];
            }
        }
        for j in 0..dim {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            train: true,
        });
        Ok(y)
    }

    /// Backward through the mode that was cached by the last `forward_mut`.
    /// Train mode accounts for the batch coupling through the statistics;
    /// eval mode is an elementwise affine map.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.as_ref().ok_or(Error::InvalidArgument {
            arg: "BatchNorm::backward",
            reason: "no cached forward pass".to_string(),
        })?;
        if grad_out.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "BatchNorm::backward",
                left: grad_out.shape(),
                right: cache.x_hat.shape(),
            });
        }
        let m = grad_out.rows();
        let dim = self.dim();
        for i in 0..m {
            for j in 0..dim {
                let g = grad_out.get(i, j);
                self.grad_gamma[j] += g * cache.x_hat.get(i, j);
                self.grad_beta[j] += g;
            }
        }
        let mut grad_x = Matrix::zeros(m, dim);
        if cache.train {
            // d x_hat for each entry, then the batch-coupled transform:
            // grad_x = inv_std/m * (m*dxh - sum(dxh) - x_hat * sum(dxh*x_hat)).
            let mut sum_dxh = vec![0.0; dim];
            let mut sum_dxh_xh = vec![0.0; dim];
            for i in 0..m {
                for j in 0..dim {
                    let dxh = grad_out.get(i, j) * self.gamma[j];
                    sum_dxh[j] += dxh;
                    sum_dxh_xh[j] += dxh * cache.x_hat.get(i, j);
                }
            }
            for i in 0..m {
                for j in 0..dim {
                    let dxh = grad_out.get(i, j) * self.gamma[j];
                    let v = (m as f64) * dxh - sum_dxh[j] - cache.x_hat.get(i, j) * sum_dxh_xh[j];
                    grad_x.set(i, j, cache.inv_std[j] * v / m as f64);
                }
            }
        } else {
            for i in 0..m {
                for j in 0..dim {
                    grad_x.set(i, j, grad_out.get(i, j) * self.gamma[j] * cache.inv_std[j]);
                }
            }
        }
        Ok(grad_x)
    }

    pub fn zero_grads(&mut self) {
        self.grad_gamma.iter_mut().for_each(|v| *v = 0.0);
        self.grad_beta.iter_mut().for_each(|v| *v = 0.0);
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "BatchNorm",
                expected: self.dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }
}

/// One residual block: `y = x + h * F(x)` with
/// `F = affine2 . relu . [batchnorm] . affine1`, all at a fixed width.
///
/// `h` is not validated here (unit tests exercise `h = 0` deliberately);
/// [`NetworkConfig::validate`] enforces `h > 0` on every constructed network.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub h: f64,
    pub affine1: AffineLayer,
    pub batch_norm: Option<BatchNorm>,
    pub affine2: AffineLayer,
    cached_preact: Option<Matrix>,
}

impl ResidualBlock {
    pub fn new(width: usize, h: f64, use_bn: bool, init_scale: f64, rng: &mut Rng) -> ResidualBlock {
        ResidualBlock {
            h,
            affine1: AffineLayer::new(width, width, init_scale, rng),
            batch_norm: use_bn.then(|| BatchNorm::new(width)),
            affine2: AffineLayer::new(width, width, init_scale, rng),
            cached_preact: None,
        }
    }

    pub fn width(&self) -> usize {
        self.affine1.in_dim()
    }

    /// Pure eval-mode branch value `F(x)`.
    pub fn branch_eval(&self, x: &Matrix) -> Result<Matrix> {
        let u = self.affine1.apply(x)?;
        let v = match &self.batch_norm {
            Some(bn) => bn.apply_eval(&u)?,
            None => u,
        };
        let r = relu(&v);
        self.affine2.apply(&r)
    }

    /// Pure eval-mode block update `x + h * F(x)`.
    pub fn apply_eval(&self, x: &Matrix) -> Result<Matrix> {
        let f = self.branch_eval(x)?;
        let mut y = x.clone();
        y.add_assign_scaled(&f, self.h)?;
        Ok(y)
    }

    /// Caching forward pass; in train mode batch-norm running statistics are
    /// updated as a side effect.
    pub fn forward_mut(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        let u = self.affine1.forward_mut(x)?;
        let v = match &mut self.batch_norm {
            Some(bn) => bn.forward_mut(&u, mode)?,
            None => u,
        };
        let r = relu(&v);
        self.cached_preact = Some(v);
        let f = self.affine2.forward_mut(&r)?;
        let mut y = x.clone();
        y.add_assign_scaled(&f, self.h)?;
        Ok(y)
    }

    /// Backward through `y = x + h * F(x)`: the skip path passes `grad_y`
    /// through unchanged and the branch path contributes `h` times its own
    /// backward. Parameter gradients (including the `h` factor) accumulate
    /// into the layers.
    pub fn backward(&mut self, grad_y: &Matrix) -> Result<Matrix> {
        let preact = self.cached_preact.as_ref().ok_or(Error::InvalidArgument {
            arg: "ResidualBlock::backward",
            reason: "no cached forward pass".to_string(),
        })?;
        let grad_f = grad_y.scale(self.h);
        let grad_r = self.affine2.backward(&grad_f)?;
        let mut grad_v = grad_r;
        for i in 0..grad_v.rows() {
            let mask_row = preact.row(i);
            for (g, &p) in grad_v.row_mut(i).iter_mut().zip(mask_row) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let grad_u = match &mut self.batch_norm {
            Some(bn) => bn.backward(&grad_v)?,
            None => grad_v,
        };
        let grad_branch_x = self.affine1.backward(&grad_u)?;
        grad_y.add(&grad_branch_x)
    }

    pub fn zero_grads(&mut self) {
        self.affine1.zero_grads();
        self.affine2.zero_grads();
        if let Some(bn) = &mut self.batch_norm {
            bn.zero_grads();
        }
    }
}

/// Rectified linear unit, elementwise `max(0, x)`. Its derivative is taken
/// as 0 at exactly 0.
pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    y
}

/// Architecture and initialization description of a network; everything a
/// seed needs to rebuild the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub depth: usize,
    pub h: f64,
    pub width: usize,
    pub use_bn: bool,
    pub num_classes: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidArgument {
                arg: "depth",
                reason: format!("must be at least 1, got {}", self.depth),
            });
        }
        if !self.h.is_finite() || self.h <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "h",
                reason: format!("must be positive and finite, got {}", self.h),
            });
        }
        if self.width < 1 {
            return Err(Error::InvalidArgument {
                arg: "width",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument {
                arg: "num_classes",
                reason: format!("must be at least 2, got {}", self.num_classes),
            });
        }
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument {
                arg: "input_dim",
                reason: "must be at least 1".to_string(),
            });
        }
        if !self.init_scale.is_finite() || self.init_scale <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "init_scale",
                reason: format!("must be positive and finite, got {}", self.init_scale),
            });
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep: the gradient with respect to
/// the raw input features plus the gradient at every trunk block boundary
/// (`boundary_grads[n]` is the gradient at the input of block `n`; index
/// `depth` is the gradient at the trunk output).
#[derive(Debug, Clone)]
pub struct BackwardTrace {
    pub input_grad: Matrix,
    pub boundary_grads: Vec<Matrix>,
}

/// Embedding, residual trunk, classification head.
#[derive(Debug, Clone)]
pub struct Network {
    pub embed: AffineLayer,
    pub blocks: Vec<ResidualBlock>,
    pub head: AffineLayer,
    pub config: NetworkConfig,
}

impl Network {
    /// Builds a network with freshly drawn parameters. The generator is
    /// seeded from `config.seed` and consumed in a fixed order (embedding
    /// weights, then each block's two affine weights in depth order, then
    /// head weights; biases and batch-norm parameters start at constants and
    /// consume no draws).
    pub fn new(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let embed = AffineLayer::new(config.input_dim, config.width, config.init_scale, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| {
                ResidualBlock::new(
                    config.width,
                    config.h,
                    config.use_bn,
                    config.init_scale,
                    &mut rng,
                )
            })
            .collect();
        let head = AffineLayer::new(config.width, config.num_classes, config.init_scale, &mut rng);
        Ok(Network {
            embed,
            blocks,
            head,
            config,
        })
    }

    /// Allocates a network of the right shapes with all parameters zero;
    /// used by deserialization, which overwrites every buffer.
    pub(crate) fn allocate(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let zero_affine = |in_dim: usize, out_dim: usize| {
            AffineLayer::from_parts(Matrix::zeros(out_dim, in_dim), vec![0.0; out_dim])
        };
        let blocks = (0..config.depth)
            .map(|_| ResidualBlock {
                h: config.h,
                affine1: zero_affine(config.width, config.width),
                batch_norm: config.use_bn.then(|| BatchNorm::new(config.width)),
                affine2: zero_affine(config.width, config.width),
                cached_preact: None,
            })
            .collect();
        Ok(Network {
            embed: zero_affine(config.input_dim, config.width),
            blocks,
            head: zero_affine(config.width, config.num_classes),
            config,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.embed.in_dim() {
            return Err(Error::DimensionMismatch {
                op: "Network forward",
                expected: self.embed.in_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    /// Caching forward pass producing logits; train mode updates batch-norm
    /// running statistics.
    pub fn forward_mut(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        let mut state = self.embed.forward_mut(x)?;
        for block in &mut self.blocks {
            state = block.forward_mut(&state, mode)?;
        }
        self.head.forward_mut(&state)
    }

    /// Pure eval-mode forward pass on a frozen network.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut state = self.embed.apply(x)?;
        for block in &self.blocks {
            state = block.apply_eval(&state)?;
        }
        self.head.apply(&state)
    }

    /// Pure eval-mode trunk trajectory: the states `x_0 .. x_D` at every
    /// block boundary, where `x_0` is the embedded input.
    pub fn trunk_states(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let mut states = Vec::with_capacity(self.depth() + 1);
        states.push(self.embed.apply(x)?);
        for block in &self.blocks {
            let next = block.apply_eval(states.last().expect("nonempty"))?;
            states.push(next);
        }
        Ok(states)
    }

    /// Backward sweep from a logit gradient; returns the input gradient and
    /// discards the per-boundary trace.
    pub fn backward(&mut self, logit_grad: &Matrix) -> Result<Matrix> {
        Ok(self.backward_full(logit_grad)?.input_grad)
    }

    /// Backward sweep that also records the gradient at every trunk block
    /// boundary, which the diagnostics bound checks consume.
    pub fn backward_full(&mut self, logit_grad: &Matrix) -> Result<BackwardTrace> {
        let depth = self.depth();
        let mut boundary_grads = vec![Matrix::zeros(0, 0); depth + 1];
        let mut g = self.head.backward(logit_grad)?;
        boundary_grads[depth] = g.clone();
        for n in (0..depth).rev() {
            g = self.blocks[n].backward(&g)?;
            boundary_grads[n] = g.clone();
        }
        let input_grad = self.embed.backward(&g)?;
        Ok(BackwardTrace {
            input_grad,
            boundary_grads,
        })
    }

    pub fn zero_grads(&mut self) {
        self.embed.zero_grads();
        for block in &mut self.blocks {
            block.zero_grads();
        }
        self.head.zero_grads();
    }

    /// Visits every `(parameter, gradient)` buffer pair in a fixed
    /// documented order: embedding (weights, bias), each block in depth
    /// order (affine1 weights, affine1 bias, then gamma and beta when batch
    /// norm is on, affine2 weights, affine2 bias), head (weights, bias).
    /// Batch-norm running statistics are state, not parameters, and are not
    /// visited.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.embed.weight.data_mut(), self.embed.grad_weight.data_mut());
        f(&mut self.embed.bias, &mut self.embed.grad_bias);
        for block in &mut self.blocks {
            f(
                block.affine1.weight.data_mut(),
                block.affine1.grad_weight.data_mut(),
            );
            f(&mut block.affine1.bias, &mut block.affine1.grad_bias);
            if let Some(bn) = &mut block.batch_norm {
                f(&mut bn.gamma, &mut bn.grad_gamma);
                f(&mut bn.beta, &mut bn.grad_beta);
            }
            f(
                block.affine2.weight.data_mut(),
                block.affine2.grad_weight.data_mut(),
            );
            f(&mut block.affine2.bias, &mut block.affine2.grad_bias);
        }
        f(self.head.weight.data_mut(), self.head.grad_weight.data_mut());
        f(&mut self.head.bias, &mut self.head.grad_bias);
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params_mut(&mut |p, _| count += p.len());
        count
    }

    /// Applies `f` to the parameter at the given flat index of the
    /// [`visit_params_mut`] order.
    ///
    /// [`visit_params_mut`]: Network::visit_params_mut
    pub fn with_param_mut(&mut self, index: usize, f: impl FnOnce(&mut f64)) -> Result<()> {
        let mut offset = 0;
        let mut f = Some(f);
        self.visit_params_mut(&mut |p, _| {
            if index >= offset && index < offset + p.len() {
                if let Some(f) = f.take() {
                    f(&mut p[index - offset]);
                }
            }
            offset += p.len();
        });
        if f.is_some() {
            return Err(Error::InvalidArgument {
                arg: "parameter index",
                reason: format!("index {index} out of range"),
            });
        }
        Ok(())
    }

    /// Reads the gradient accumulator at the given flat parameter index.
    pub fn grad_at(&mut self, index: usize) -> Result<f64> {
        let mut offset = 0;
        let mut found = None;
        self.visit_params_mut(&mut |_, g| {
            if index >= offset && index < offset + g.len() {
                found = Some(g[index - offset]);
            }
            offset += g.len();
        });
        found.ok_or(Error::InvalidArgument {
            arg: "parameter index",
            reason: format!("index {index} out of range"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gauss_draw;

    fn small_config(depth: usize, h: f64, use_bn: bool) -> NetworkConfig {
        NetworkConfig {
            depth,
            h,
            width: 4,
            use_bn,
            num_classes: 2,
            input_dim: 3,
            seed: 42,
            init_scale: 1.0,
        }
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        gauss_draw(&mut Rng::new(seed), rows, cols, 0.0, 1.0)
    }

    #[test]
    fn affine_layer_matches_hand_computed_map() {
        // y = x W^T + b with W = [[1, 2], [3, 4]], b = [10, 20], x = [1, 1]:
        // y = [1*1 + 2*1 + 10, 3*1 + 4*1 + 20] = [13, 27].
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let layer = AffineLayer::from_parts(w, vec![10.0, 20.0]);
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = layer.apply(&x).unwrap();
        assert_eq!(y.row(0), &[13.0, 27.0]);
    }

    #[test]
    fn affine_backward_before_forward_is_an_error() {
        let mut layer = AffineLayer::new(2, 2, 1.0, &mut Rng::new(1));
        let g = Matrix::zeros(1, 2);
        assert!(matches!(
            layer.backward(&g),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn block_with_zero_step_is_the_identity() {
        let mut block = ResidualBlock::new(4, 0.0, false, 1.0, &mut Rng::new(3));
        let x = random_batch(5, 4, 7);
        let y = block.forward_mut(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_with_zero_branch_weights_is_the_identity_for_any_step() {
        for &h in &[0.1, 0.5, 1.0, 2.0] {
            let mut block = ResidualBlock::new(4, h, false, 1.0, &mut Rng::new(3));
            block.affine2.weight = Matrix::zeros(4, 4);
            block.affine2.bias = vec![0.0; 4];
            let x = random_batch(5, 4, 7);
            assert_eq!(block.apply_eval(&x).unwrap(), x, "h = {h}");
        }
    }

    #[test]
    fn block_update_is_linear_in_the_step_factor() {
        let mut block = ResidualBlock::new(4, 0.1, false, 1.0, &mut Rng::new(5));
        let x = random_batch(3, 4, 9);
        let y_small = block.apply_eval(&x).unwrap();
        block.h = 0.2;
        let y_large = block.apply_eval(&x).unwrap();
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let d_small = y_small.get(i, j) - x.get(i, j);
                let d_large = y_large.get(i, j) - x.get(i, j);
                assert!(
                    (d_large - 2.0 * d_small).abs() <= 1e-12 * d_small.abs().max(1.0),
                    "doubling h did not double the update"
                );
            }
        }
    }

    #[test]
    fn batchnorm_train_mode_normalizes_each_feature() {
        let mut bn = BatchNorm::new(3);
        let x = random_batch(64, 3, 11);
        let y = bn.forward_mut(&x, Mode::Train).unwrap();
        for j in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for i in 0..64 {
                mean += y.get(i, j);
            }
            mean /= 64.0;
            for i in 0..64 {
                let d = y.get(i, j) - mean;
                var += d * d;
            }
            var /= 64.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "column {j} var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_feature_maps_to_beta() {
        let mut bn = BatchNorm::new(2);
        bn.beta = vec![0.5, -1.5];
        let x = Matrix::from_rows(&[vec![7.0, 3.0], vec![7.0, 3.0], vec![7.0, 3.0]]).unwrap();
        let y = bn.forward_mut(&x, Mode::Train).unwrap();
        for i in 0..3 {
            assert!((y.get(i, 0) - 0.5).abs() < 1e-12);
            assert!((y.get(i, 1) + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_mode_is_a_fixed_affine_map() {
        let mut bn = BatchNorm::new(1);
        bn.gamma = vec![2.0];
        bn.beta = vec![3.0];
        // Running stats at their initial values (mean 0, var 1): the map is
        // x -> 2 x / sqrt(1 + eps) + 3.
        let x = Matrix::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let y = bn.apply_eval(&x).unwrap();
        let scale = 2.0 / (1.0 + BN_EPS).sqrt();
        assert_eq!(y.get(0, 0), scale * 1.0 + 3.0);
        assert_eq!(y.get(1, 0), scale * -2.0 + 3.0);
    }

    #[test]
    fn batchnorm_running_stats_follow_the_documented_ema() {
        let mut bn = BatchNorm::new(1);
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        bn.forward_mut(&x, Mode::Train).unwrap();
        // Batch mean 2, biased batch var 1; starting from (0, 1):
        // running_mean = 0.9 * 0 + 0.1 * 2 = 0.2
        // running_var  = 0.9 * 1 + 0.1 * 1 = 1.0
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_mode_rejects_single_sample_batches() {
        let mut bn = BatchNorm::new(2);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            bn.forward_mut(&x, Mode::Train),
            Err(Error::InvalidArgument { .. })
        ));
        // Eval mode has no such restriction.
        assert!(bn.forward_mut(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn network_forward_composes_embed_blocks_head() {
        let config = small_config(2, 0.3, false);
        let mut net = Network::new(config).unwrap();
        let x = random_batch(4, 3, 13);

        let mut state = net.embed.apply(&x).unwrap();
        state = net.blocks[0].apply_eval(&state).unwrap();
        state = net.blocks[1].apply_eval(&state).unwrap();
        let by_hand = net.head.apply(&state).unwrap();

        let logits = net.forward_mut(&x, Mode::Eval).unwrap();
        assert_eq!(logits, by_hand);
        assert_eq!(logits, net.forward_eval(&x).unwrap());
    }

    #[test]
    fn empty_trunk_reduces_to_head_of_embedding() {
        let mut net = Network::new(small_config(1, 0.1, false)).unwrap();
        net.blocks.clear();
        let x = random_batch(4, 3, 17);
        let expect = net.head.apply(&net.embed.apply(&x).unwrap()).unwrap();
        assert_eq!(net.forward_eval(&x).unwrap(), expect);
    }

    #[test]
    fn zero_branches_make_the_trunk_an_identity_map() {
        let mut net = Network::new(small_config(5, 1.0, false)).unwrap();
        for block in &mut net.blocks {
            block.affine2.weight = Matrix::zeros(4, 4);
        }
        let x = random_batch(6, 3, 19);
        let states = net.trunk_states(&x).unwrap();
        for s in &states[1..] {
            assert_eq!(s, &states[0]);
        }
    }

    #[test]
    fn eval_forward_is_bit_reproducible() {
        let net = Network::new(small_config(3, 0.5, true)).unwrap();
        let x = random_batch(8, 3, 23);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Network::new(small_config(3, 0.1, false)).unwrap();
        let b = Network::new(small_config(3, 0.1, false)).unwrap();
        assert_eq!(a.embed.weight, b.embed.weight);
        assert_eq!(a.blocks[2].affine2.weight, b.blocks[2].affine2.weight);
        let mut other = small_config(3, 0.1, false);
        other.seed = 43;
        let c = Network::new(other).unwrap();
        assert_ne!(a.embed.weight, c.embed.weight);
    }

    #[test]
    fn per_step_update_norm_equals_h_times_branch_norm() {
        for &h in &[1.0, 0.5, 0.1] {
            let mut config = small_config(6, h, false);
            config.width = 8;
            let net = Network::new(config).unwrap();
            let x = random_batch(5, 3, 29);
            let states = net.trunk_states(&x).unwrap();
            for n in 0..net.depth() {
                let step = states[n + 1].sub(&states[n]).unwrap().frobenius_norm();
                let branch = net.blocks[n].branch_eval(&states[n]).unwrap().frobenius_norm();
                if branch == 0.0 {
                    assert_eq!(step, 0.0);
                    continue;
                }
                let rel = (step - h * branch).abs() / (h * branch);
                assert!(rel < 1e-9, "h {h} block {n}: rel {rel}");
            }
        }
    }

    #[test]
    fn constant_branch_updates_scale_exactly_with_h() {
        // With zero affine2 weights and a nonzero bias the branch is the
        // constant b2, so the trajectory update is h * b2 at every block and
        // strict cross-h proportionality holds.
        let make = |h: f64| {
            let mut net = Network::new(small_config(4, h, false)).unwrap();
            for block in &mut net.blocks {
                block.h = h;
                block.affine2.weight = Matrix::zeros(4, 4);
                block.affine2.bias = vec![0.25, -1.0, 0.5, 2.0];
            }
            net
        };
        let x = random_batch(3, 3, 31);
        let states_1 = make(1.0).trunk_states(&x).unwrap();
        let states_half = make(0.5).trunk_states(&x).unwrap();
        for n in 0..4 {
            let d1 = states_1[n + 1].sub(&states_1[n]).unwrap();
            let dh = states_half[n + 1].sub(&states_half[n]).unwrap();
            let rel = d1.sub(&dh.scale(2.0)).unwrap().frobenius_norm()
                / d1.frobenius_norm();
            assert!(rel < 1e-9, "block {n}: rel {rel}");
        }
    }

    #[test]
    fn trunk_telescopes_into_skip_plus_branch_sum() {
        // x_D = x_0 + h * sum F(x_i), with the sum accumulated separately
        // from the forward recursion (different operation order, so agreement
        // within 1e-10 is a real statement about the decomposition).
        for &(depth, h, use_bn) in &[(10usize, 0.1, false), (20, 0.5, true), (50, 0.1, false)] {
            let mut config = small_config(depth, h, use_bn);
            config.width = 8;
            config.seed = 57 + depth as u64;
            let net = Network::new(config).unwrap();
            let x = random_batch(4, 3, 37);
            let states = net.trunk_states(&x).unwrap();
            let mut branch_sum = Matrix::zeros(4, 8);
            for n in 0..depth {
                let f = net.blocks[n].branch_eval(&states[n]).unwrap();
                branch_sum.add_assign_scaled(&f, 1.0).unwrap();
            }
            let mut reconstructed = states[0].clone();
            reconstructed.add_assign_scaled(&branch_sum, h).unwrap();
            let gap = reconstructed.sub(&states[depth]).unwrap().frobenius_norm();
            assert!(gap < 1e-10, "depth {depth} h {h} bn {use_bn}: gap {gap}");
        }
    }

    #[test]
    fn active_linear_block_jacobian_is_identity_plus_h_w2_w1() {
        // Large positive affine1 bias keeps every relu unit active on a small
        // input, so the block is exactly x + h (W2 (W1 x + b1) + b2) and its
        // Jacobian is I + h W2 W1. Extract the Jacobian row by row through
        // backward with one-hot output gradients.
        let width = 4;
        let h = 0.3;
        let mut rng = Rng::new(41);
        let mut block = ResidualBlock::new(width, h, false, 1.0, &mut rng);
        block.affine1.bias = vec![10.0; width];
        let x = gauss_draw(&mut rng, 1, width, 0.0, 0.1);
        block.forward_mut(&x, Mode::Eval).unwrap();

        let expected = {
            let w2w1 = block.affine2.weight.matmul(&block.affine1.weight).unwrap();
            let mut j = Matrix::identity(width);
            j.add_assign_scaled(&w2w1, h).unwrap();
            j
        };
        for out in 0..width {
            let mut one_hot = Matrix::zeros(1, width);
            one_hot.set(0, out, 1.0);
            let grad_x = block.backward(&one_hot).unwrap();
            for k in 0..width {
                let want = expected.get(out, k);
                let got = grad_x.get(0, k);
                assert!(
                    (want - got).abs() < 1e-12,
                    "J[{out}][{k}]: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mut net = Network::new(small_config(1, 0.1, false)).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(
            net.forward_mut(&x, Mode::Eval),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = small_config(1, 0.1, false);
        assert!(good.validate().is_ok());
        for bad in [
            NetworkConfig { depth: 0, ..good.clone() },
            NetworkConfig { h: 0.0, ..good.clone() },
            NetworkConfig { h: -1.0, ..good.clone() },
            NetworkConfig { h: f64::NAN, ..good.clone() },
            NetworkConfig { width: 0, ..good.clone() },
            NetworkConfig { num_classes: 1, ..good.clone() },
            NetworkConfig { input_dim: 0, ..good.clone() },
            NetworkConfig { init_scale: 0.0, ..good.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn param_walk_covers_every_buffer_once() {
        let mut net = Network::new(small_config(2, 0.1, true)).unwrap();
        // embed 4x3 + 4, blocks: 2 * (16 + 4 + 4 + 4 + 16 + 4), head 2x4 + 2.
        let expected = (12 + 4) + 2 * (16 + 4 + 4 + 4 + 16 + 4) + (8 + 2);
        assert_eq!(net.param_count(), expected);

        let last = expected - 1;
        net.with_param_mut(last, |p| *p = 123.5).unwrap();
        assert_eq!(net.head.bias[1], 123.5);
        assert!(net.with_param_mut(expected, |_| {}).is_err());
        assert!(net.grad_at(expected).is_err());
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut net = Network::new(small_config(1, 0.5, false)).unwrap();
        let x = random_batch(3, 3, 43);
        net.forward_mut(&x, Mode::Eval).unwrap();
        let g = random_batch(3, 2, 47);
        net.backward(&g).unwrap();
        let after_one = net.head.grad_bias.clone();
        net.backward(&g).unwrap();
        for (two, one) in net.head.grad_bias.iter().zip(&after_one) {
            assert!((two - 2.0 * one).abs() < 1e-12);
        }
        net.zero_grads();
        assert!(net.head.grad_bias.iter().all(|&v| v == 0.0));
    }
}
