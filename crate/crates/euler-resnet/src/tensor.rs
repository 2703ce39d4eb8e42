//! Dense row-major matrices, a deterministic random number generator, and the
//! norm routines the rest of the crate builds on.
//!
//! Everything is `f64`. Batches are rows, features are columns, and the hot
//! loops are written against contiguous row slices. The generator is fully
//! specified here by its update equations so that every experiment is
//! bit-reproducible from its seed, on any platform.

use crate::error::{Error, Result};

/// Finalizer of the splitmix64 generator, also used standalone to derive
/// independent child seeds. `z` is mixed as:
///
/// ```text
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// z = z ^ (z >> 31)
/// ```
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of an independent generator for stream `stream` from a
/// parent seed. This is the rule every parallel or per-item consumer in the
/// crate uses (per-sample noise, per-epoch shuffles, per-run workers):
///
/// ```text
/// derive_seed(seed, stream) = mix64(seed + mix64(stream + 0x9E3779B97F4A7C15))
/// ```
///
/// with wrapping arithmetic. Distinct streams give generators with
/// uncorrelated outputs for all practical purposes.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed.wrapping_add(mix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

/// Deterministic pseudo-random generator: splitmix64 with a Marsaglia polar
/// transform for gaussian draws.
///
/// State update per draw:
///
/// ```text
/// state = state + 0x9E3779B97F4A7C15
/// output = mix64(state)
/// ```
///
/// Uniform doubles take the top 53 bits of the output, giving values in
/// `[0, 1)`. Gaussian draws use the polar method, which needs only `sqrt`
/// and `ln`; `ln` is evaluated by a fixed polynomial reduction (see
/// `ln_portable`) rather than the platform libm, so gaussian streams are
/// bit-identical across platforms too.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_gauss: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            state: seed,
            spare_gauss: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Standard normal draw (mean 0, variance 1).
    ///
    /// The polar method produces draws in pairs; the second of each pair is
    /// cached and returned by the next call, so a single generator's gaussian
    /// stream consumes a variable but fully deterministic number of uniforms.
    pub fn next_gauss(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * ln_portable(s) / s).sqrt();
                self.spare_gauss = Some(v * f);
                return u * f;
            }
        }
    }

    /// Uniform draw in `[0, n)`. Used for shuffles; the modulo bias is below
    /// 2^-50 for every `n` in this crate and determinism is what matters.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

/// Natural log for `x` in `(0, 1)`, built from IEEE-exact operations only
/// (`+`, `-`, `*`, `/`); no libm call, so results are identical on every
/// platform.
///
/// The argument is split as `x = m * 2^e` with `m` in `[sqrt(1/2), sqrt(2))`,
/// then `ln m = 2 * atanh((m-1)/(m+1))` is evaluated by its odd series. With
/// `|((m-1)/(m+1))| <= sqrt(2)-1 / (sqrt(2)+1) ~ 0.1716` the truncation error
/// of 11 terms is below 1e-16 relative, more than the polar transform needs.
fn ln_portable(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x < 1.0);
    const LN2: f64 = core::f64::consts::LN_2;
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | (1023u64 << 52));
    // Subnormal inputs cannot occur: the polar rejection step only passes
    // values of at least 2^-104, far above the subnormal range.
    if m >= core::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let f = (m - 1.0) / (m + 1.0);
    let f2 = f * f;
    let mut term = f;
    let mut sum = f;
    for k in 1..=10u32 {
        term *= f2;
        sum += term / (2 * k + 1) as f64;
    }
    2.0 * sum + e as f64 * LN2
}

/// Dense row-major matrix of `f64`. Rows are samples, columns are features
/// throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from an explicit flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row vectors; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let cols = rows.first().map_or(0, Vec::len);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`; both operands are walked row-wise, which is the
    /// cache-friendly orientation for affine forward passes.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.rows..(i + 1) * other.rows];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * other`; accumulated as a sum of rank-one row products, which
    /// is the cache-friendly orientation for weight gradients.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (j, &a_ij) in a_row.iter().enumerate() {
                let out_row = &mut out.data[j * other.cols..(j + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ij * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += c * other`.
    pub fn add_assign_scaled(&mut self, other: &Matrix, c: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| c * a).collect(),
        }
    }

    /// Adds `bias[j]` to column `j` of every row.
    pub fn add_row_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "add_row_bias",
                expected: self.cols,
                actual: bias.len(),
            });
        }
        for i in 0..self.rows {
            for (v, &b) in self.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&a| a * a).sum::<f64>().sqrt()
    }

    /// Euclidean norm of each row (per-sample norms of a batch).
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&a| a * a).sum::<f64>().sqrt())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Largest-singular-value estimate by power iteration on `M^T M`, run for
    /// a fixed number of iterations from a fixed seeded start vector.
    ///
    /// The estimate is a Rayleigh quotient, so it is monotonically
    /// nondecreasing in `iters` and never exceeds the true spectral norm:
    /// callers that need an upper bound must add their own safety margin.
    pub fn operator_norm_estimate(&self, iters: usize) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut rng = Rng::new(0x5EED_0F80_D1E5);
        let mut v: Vec<f64> = (0..self.cols).map(|_| rng.next_gauss()).collect();
        normalize(&mut v);
        let mut w = vec![0.0; self.rows];
        for _ in 0..iters {
            self.apply_to(&v, &mut w);
            let mut next = vec![0.0; self.cols];
            self.apply_transpose_to(&w, &mut next);
            if normalize(&mut next) == 0.0 {
                return 0.0;
            }
            v = next;
        }
        self.apply_to(&v, &mut w);
        w.iter().map(|&a| a * a).sum::<f64>().sqrt()
    }

    /// Spectral norm to machine precision, via a cyclic Jacobi eigensolve of
    /// the smaller Gram matrix. Intended for the small matrices that appear
    /// in exact bound certificates; cost grows cubically with the short side.
    pub fn spectral_norm_exact(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let gram = if self.rows <= self.cols {
            self.matmul_nt(self).expect("same operand twice")
        } else {
            self.matmul_tn(self).expect("same operand twice")
        };
        let lambda_max = jacobi_max_eigenvalue(&gram);
        lambda_max.max(0.0).sqrt()
    }

    fn apply_to(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&a, &b) in self.row(i).iter().zip(v) {
                acc += a * b;
            }
            *o = acc;
        }
    }

    fn apply_transpose_to(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|&a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        for a in v.iter_mut() {
            *a /= norm;
        }
    }
    norm
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_max_eigenvalue(sym: &Matrix) -> f64 {
    let n = sym.rows();
    let mut a = sym.clone();
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return 0.0;
    }
    let tol = scale * 1e-15;
    for _sweep in 0..50 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).fold(f64::NEG_INFINITY, f64::max)
}

/// Matrix of independent gaussian draws with the given mean and standard
/// deviation, filled in row-major order. A standard deviation of exactly 0
/// returns the constant matrix without consuming any draws.
pub fn gauss_draw(rng: &mut Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if std == 0.0 {
        m.data_mut().iter_mut().for_each(|v| *v = mean);
        return m;
    }
    for v in m.data_mut() {
        *v = mean + std * rng.next_gauss();
    }
    m
}
