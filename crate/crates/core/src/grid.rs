//! Uniform cell-centered rectangular grids with homogeneous Neumann
//! operators.
//!
//! Cells are stored row-major: axis 0 varies slowest. The Neumann condition
//! is realised by a mirrored ghost cell, so the boundary flux vanishes and
//! the discrete Laplacian sums to zero over the domain for every field.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Relative residual target of the Riesz (`-Δ + I`) conjugate gradient solve.
pub const RIESZ_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n: Vec<usize>,
    lengths: Vec<f64>,
    spacing: Vec<f64>,
    cell_volume: f64,
}

impl Grid {
    pub fn new(dim: usize, n_per_axis: &[usize], lengths: &[f64]) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::config("grid.dim", format!("dimension must be 1, 2 or 3, got {dim}")));
        }
        if n_per_axis.len() != dim || lengths.len() != dim {
            return Err(Error::config(
                "grid.n",
                format!(
                    "expected {dim} entries per axis, got {} cell counts and {} lengths",
                    n_per_axis.len(),
                    lengths.len()
                ),
            ));
        }
        if let Some(&bad) = n_per_axis.iter().find(|&&n| n < 2) {
            return Err(Error::config("grid.n", format!("need at least 2 cells per axis, got {bad}")));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::config("grid.lengths", format!("lengths must be positive, got {bad}")));
        }
        let spacing: Vec<f64> = lengths.iter().zip(n_per_axis).map(|(l, &n)| l / n as f64).collect();
        let cell_volume = spacing.iter().product();
        Ok(Grid {
            n: n_per_axis.to_vec(),
            lengths: lengths.to_vec(),
            spacing,
            cell_volume,
        })
    }

    /// Unit-length 1D grid, the common case in tests.
    pub fn line(n: usize, length: f64) -> Result<Self> {
        Grid::new(1, &[n], &[length])
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn n_per_axis(&self) -> &[usize] {
        &self.n
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// |Ω|
    pub fn measure(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strides(&self) -> [usize; 3] {
        let mut s = [0usize; 3];
        let d = self.dim();
        let mut acc = 1;
        for axis in (0..d).rev() {
            s[axis] = acc;
            acc *= self.n[axis];
        }
        s
    }

    /// Multi-index of a flat cell index.
    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for axis in (0..self.dim()).rev() {
            out[axis] = idx % self.n[axis];
            idx /= self.n[axis];
        }
        out
    }

    /// Cell-center coordinates of a flat index (unused axes are zero).
    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let m = self.multi_index(idx);
        let mut x = [0.0; 3];
        for axis in 0..self.dim() {
            x[axis] = (m[axis] as f64 + 0.5) * self.spacing[axis];
        }
        x
    }

    /// Off-diagonal stencil entries of row `idx` of the Neumann Laplacian,
    /// followed by the diagonal coefficient.
    pub fn laplacian_row(&self, idx: usize, off: &mut Vec<(usize, f64)>) -> f64 {
        off.clear();
        let strides = self.strides();
        let m = self.multi_index(idx);
        let mut diag = 0.0;
        for axis in 0..self.dim() {
            let w = 1.0 / (self.spacing[axis] * self.spacing[axis]);
            if m[axis] > 0 {
                off.push((idx - strides[axis], w));
                diag -= w;
            }
            if m[axis] + 1 < self.n[axis] {
                off.push((idx + strides[axis], w));
                diag -= w;
            }
        }
        diag
    }

    /// `dst = Δ src` with mirrored ghost cells.
    pub fn laplacian_into(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.len());
        debug_assert_eq!(dst.len(), self.len());
        dst.iter_mut().for_each(|v| *v = 0.0);
        let strides = self.strides();
        let total = self.len();
        for axis in 0..self.dim() {
            let w = 1.0 / (self.spacing[axis] * self.spacing[axis]);
            let stride = strides[axis];
            let n = self.n[axis];
            for (idx, out) in dst.iter_mut().enumerate().take(total) {
                let pos = (idx / stride) % n;
                let here = src[idx];
                let mut acc = 0.0;
                if pos > 0 {
                    acc += src[idx - stride] - here;
                }
                if pos + 1 < n {
                    acc += src[idx + stride] - here;
                }
                *out += w * acc;
            }
        }
    }

    /// Discrete `‖∇f‖²`, summed over interior faces (boundary faces carry no flux).
    pub fn grad_norm_sq(&self, f: &[f64]) -> f64 {
        let strides = self.strides();
        let mut total = 0.0;
        for axis in 0..self.dim() {
            let h = self.spacing[axis];
            let stride = strides[axis];
            let n = self.n[axis];
            let mut acc = 0.0;
            for idx in 0..self.len() {
                if (idx / stride) % n + 1 < n {
                    let d = f[idx + stride] - f[idx];
                    acc += d * d;
                }
            }
            total += acc / (h * h);
        }
        total * self.cell_volume
    }

    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.cell_volume * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    /// `dst = (-Δ + I) src`
    pub fn riesz_into(&self, src: &[f64], dst: &mut [f64]) {
        self.laplacian_into(src, dst);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - *d;
        }
    }

    /// Jacobi-preconditioned conjugate gradients for `(-Δ + I) x = b`,
    /// starting from zero, with at most `10·N` iterations.
    pub fn solve_riesz_slice(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let n = self.len();
        let mut x = vec![0.0; n];
        let b_norm = norm2(b);
        if b_norm == 0.0 {
            return Ok(x);
        }
        let mut scratch = Vec::new();
        let inv_diag: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 - self.laplacian_row(i, &mut scratch))).collect();
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let max_iter = 10 * n;
        for _ in 0..max_iter {
            self.riesz_into(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let step = rz / pap;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            if norm2(&r) <= tol * b_norm {
                return Ok(x);
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::LinearSolver {
            iterations: max_iter,
            residual: norm2(&r) / b_norm,
            step: None,
        })
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A scalar grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Field::constant(grid, 0.0)
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Field {
            grid: Arc::clone(grid),
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.cell_center(i))).collect();
        Field {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("field contains non-finite values".into()));
        }
        Ok(Field {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Unchecked construction for solver internals that already guarantee length.
    pub(crate) fn from_vec(grid: &Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    fn check_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape("fields live on different grids".into()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_vec(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_grid(other)?;
        Ok(Field::from_vec(
            &self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    /// `self + a·other`
    pub fn axpy(&self, a: f64, other: &Field) -> Result<Field> {
        self.zip_map(other, |x, y| x + a * y)
    }

    pub fn scale(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    pub fn laplacian(&self) -> Field {
        let mut out = vec![0.0; self.len()];
        self.grid.laplacian_into(&self.values, &mut out);
        Field::from_vec(&self.grid, out)
    }

    /// Discrete L² inner product `|cell| Σ f_i g_i`.
    pub fn inner(&self, other: &Field) -> Result<f64> {
        self.check_grid(other)?;
        Ok(self.grid.dot(&self.values, &other.values))
    }

    pub fn norm_sq(&self) -> f64 {
        self.grid.dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grid.grad_norm_sq(&self.values)
    }

    /// H¹ norm: `sqrt(‖∇f‖² + ‖f‖²)`.
    pub fn h1_norm(&self) -> f64 {
        (self.grad_norm_sq() + self.norm_sq()).sqrt()
    }

    pub fn integral(&self) -> f64 {
        self.grid.cell_volume * self.values.iter().sum::<f64>()
    }

    pub fn mean_value(&self) -> f64 {
        self.integral() / self.grid.measure()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(-Δ + I) f`
    pub fn apply_riesz(&self) -> Field {
        let mut out = vec![0.0; self.len()];
        self.grid.riesz_into(&self.values, &mut out);
        Field::from_vec(&self.grid, out)
    }

    /// `(-Δ + I)⁻¹ f` by conjugate gradients.
    pub fn solve_riesz(&self, tol: f64) -> Result<Field> {
        Ok(Field::from_vec(&self.grid, self.grid.solve_riesz_slice(&self.values, tol)?))
    }

    /// Dual (V*) norm `sqrt(⟨f, (-Δ + I)⁻¹ f⟩)`.
    pub fn dual_norm(&self, tol: f64) -> Result<f64> {
        let w = self.solve_riesz(tol)?;
        Ok(self.grid.dot(&self.values, w.values()).max(0.0).sqrt())
    }
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a + b).expect("grid mismatch in field addition")
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        self.zip_map(rhs, |a, b| a - b).expect("grid mismatch in field subtraction")
    }
}

impl Mul<&Field> for f64 {
    type Output = Field;
    fn mul(self, rhs: &Field) -> Field {
        rhs.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(n: usize) -> Arc<Grid> {
        Arc::new(Grid::line(n, 1.0).unwrap())
    }

    #[test]
    fn build_grid_examples() {
        let g = Grid::new(1, &[4], &[1.0]).unwrap();
        assert_eq!(g.cell_volume(), 0.25);
        let g = Grid::new(2, &[8, 8], &[1.0, 2.0]).unwrap();
        assert_eq!(g.measure(), 2.0);
        assert!((g.cell_volume() * g.len() as f64 - 2.0).abs() < 1e-15);
        assert!(matches!(Grid::new(1, &[0], &[1.0]), Err(Error::Config { .. })));
        assert!(Grid::new(4, &[4; 4], &[1.0; 4]).is_err());
        assert!(Grid::new(1, &[4], &[-1.0]).is_err());
    }

    #[test]
    fn laplacian_of_constant_is_zero_and_conserves_mass() {
        let g = Arc::new(Grid::new(2, &[5, 7], &[1.0, 0.5]).unwrap());
        let c = Field::constant(&g, 3.25);
        assert!(c.laplacian().values().iter().all(|&v| v == 0.0));
        let f = Field::from_fn(&g, |x| (3.0 * x[0]).sin() + x[1] * x[1] * x[0]);
        assert!(f.laplacian().integral().abs() < 1e-10);
    }

    #[test]
    fn laplacian_hits_neumann_eigenvalue_at_second_order() {
        let mut errs = Vec::new();
        for n in [16usize, 32, 64, 128] {
            let g = line(n);
            let f = Field::from_fn(&g, |x| (PI * x[0]).cos());
            let lap = f.laplacian();
            let exact = f.scale(-PI * PI);
            errs.push((&lap - &exact).norm() / exact.norm());
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((1.8..=2.2).contains(&slope), "slope {slope}");
        }
    }

    #[test]
    fn inner_examples() {
        let g = line(10);
        let one = Field::constant(&g, 1.0);
        assert!((one.inner(&one).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(one.inner(&Field::zeros(&g)).unwrap(), 0.0);
        let other = line(11);
        assert!(matches!(one.inner(&Field::zeros(&other)), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_value_examples() {
        let g = line(8);
        assert!((Field::constant(&g, 3.5).mean_value() - 3.5).abs() < 1e-15);
        assert_eq!(Field::zeros(&g).mean_value(), 0.0);
        let half = Field::from_fn(&g, |x| if x[0] < 0.5 { 0.0 } else { 1.0 });
        assert!((half.mean_value() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn riesz_constants_fixed() {
        let g = line(16);
        let c = Field::constant(&g, 2.0);
        assert_eq!(c.apply_riesz(), c);
        let back = c.solve_riesz(RIESZ_TOL).unwrap();
        assert!((&back - &c).max_abs() < 1e-12);
        assert!((c.dual_norm(RIESZ_TOL).unwrap() - 2.0).abs() < 1e-10);
        assert_eq!(Field::zeros(&g).dual_norm(RIESZ_TOL).unwrap(), 0.0);
    }

    #[test]
    fn dual_norm_of_cosine_mode_matches_eigenvalue() {
        let n = 64;
        let g = line(n);
        let h = 1.0 / n as f64;
        for k in [1usize, 8, 20] {
            let f = Field::from_fn(&g, |x| (k as f64 * PI * x[0]).cos());
            // cell-centered cosines are exact eigenvectors of the discrete operator
            let lam = (2.0 - 2.0 * (k as f64 * PI * h).cos()) / (h * h);
            let expected = f.norm() / (1.0 + lam).sqrt();
            let got = f.dual_norm(RIESZ_TOL).unwrap();
            assert!((got - expected).abs() < 1e-9 * expected, "k={k}");
            assert!(got < f.norm());
        }
    }

    #[test]
    fn riesz_roundtrip_2d() {
        let g = Arc::new(Grid::new(2, &[12, 9], &[1.0, 0.75]).unwrap());
        let f = Field::from_fn(&g, |x| 0.3 + (PI * x[0]).cos() * (2.0 * PI * x[1] / 0.75).cos());
        let back = f.apply_riesz().solve_riesz(RIESZ_TOL).unwrap();
        assert!((&back - &f).norm() <= 10.0 * RIESZ_TOL * f.norm());
    }
}
