//! Sparse block systems: CSR storage, a banded direct solver behind a
//! reverse Cuthill-McKee ordering, and ILU(0)-preconditioned restarted GMRES
//! for systems whose band is too wide to factorise.

use crate::error::{Error, Result};

/// Relative residual target for the inner Krylov solves.
pub const LINEAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles a square matrix; duplicate entries are summed and columns sorted.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            debug_assert!(r < n && c < n);
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.vals[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                entries.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(self.n, entries)
    }
}

/// Incomplete LU factorisation with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let mut lu = a.clone();
        let n = lu.n;
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.cols[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::Unsupported(format!("ILU(0): missing diagonal in row {i}")));
            }
        }
        // column -> position lookup for the current row
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                pos[lu.cols[k]] = k;
            }
            for k in start..end {
                let j = lu.cols[k];
                if j >= i {
                    break;
                }
                let pivot = lu.vals[diag[j]];
                let factor = lu.vals[k] / pivot;
                lu.vals[k] = factor;
                for kk in diag[j] + 1..lu.row_ptr[j + 1] {
                    let c = lu.cols[kk];
                    let p = pos[c];
                    if p != usize::MAX {
                        lu.vals[p] -= factor * lu.vals[kk];
                    }
                }
            }
            if lu.vals[diag[i]] == 0.0 || !lu.vals[diag[i]].is_finite() {
                return Err(Error::Unsupported(format!("ILU(0): zero pivot in row {i}")));
            }
            for k in start..end {
                pos[lu.cols[k]] = usize::MAX;
            }
        }
        Ok(Ilu0 { lu, diag })
    }

    /// In-place `x ← (LU)⁻¹ x`.
    pub fn apply(&self, x: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut acc = x[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                acc -= lu.vals[k] * x[lu.cols[k]];
            }
            x[i] = acc;
        }
        for i in (0..lu.n).rev() {
            let mut acc = x[i];
            for k in self.diag[i] + 1..lu.row_ptr[i + 1] {
                acc -= lu.vals[k] * x[lu.cols[k]];
            }
            x[i] = acc / lu.vals[self.diag[i]];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Largest `n·kl·(kl+ku)` for which the banded LU is used instead of GMRES.
    /// Zero forces the Krylov path.
    pub direct_work_limit: f64,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions {
            tol: LINEAR_TOL,
            restart: 60,
            max_iter: 3000,
            direct_work_limit: 4e8,
        }
    }
}

/// Outcome of a converged Krylov solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reverse Cuthill-McKee ordering of the symmetrised pattern; `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, _) in a.row(i) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !seen[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                seen[w] = true;
                order.push(w);
            }
        }
    }
    order.reverse();
    order
}

/// LU with partial pivoting of a permuted band matrix. Row interchanges are
/// applied as they happen and the multipliers stay in place, so the upper
/// factor needs `kl` extra superdiagonals.
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
    perm: Vec<usize>,
}

impl BandedLu {
    /// Band half-widths of `a` under `perm`.
    pub fn bandwidths(a: &CsrMatrix, perm: &[usize]) -> (usize, usize) {
        let mut inv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for i in 0..a.dim() {
            for (j, _) in a.row(i) {
                let (r, c) = (inv[i], inv[j]);
                if r > c {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    pub fn new(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let (kl, ku0) = Self::bandwidths(a, &perm);
        let ku = ku0 + kl;
        let width = kl + ku + 1;
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut ab = vec![0.0; n * width];
        for i in 0..n {
            let r = inv[i];
            for (j, v) in a.row(i) {
                let c = inv[j];
                ab[r * width + c + kl - r] += v;
            }
        }
        let at = |i: usize, j: usize| i * width + j + kl - i;
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            for i in k + 1..=last {
                if ab[at(i, k)].abs() > ab[at(p, k)].abs() {
                    p = i;
                }
            }
            pivots[k] = p;
            let piv = ab[at(p, k)];
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::LinearSolver {
                    iterations: 0,
                    residual: f64::NAN,
                    step: None,
                });
            }
            let right = (k + ku).min(n - 1);
            if p != k {
                for j in k..=right {
                    ab.swap(at(k, j), at(p, j));
                }
            }
            for i in k + 1..=last {
                let m = ab[at(i, k)] / piv;
                ab[at(i, k)] = m;
                if m != 0.0 {
                    for j in k + 1..=right {
                        ab[at(i, j)] -= m * ab[at(k, j)];
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            width,
            ab,
            pivots,
            perm,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, ku, width) = (self.n, self.kl, self.ku, self.width);
        let at = |i: usize, j: usize| i * width + j + kl - i;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for k in 0..n {
            y.swap(k, self.pivots[k]);
            let yk = y[k];
            if yk != 0.0 {
                for i in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                    y[i] -= self.ab[at(i, k)] * yk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = y[k];
            for j in k + 1..=(k + ku).min(n - 1) {
                acc -= self.ab[at(k, j)] * y[j];
            }
            y[k] = acc / self.ab[at(k, k)];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

enum Backend {
    Direct(BandedLu),
    Krylov(Ilu0),
}

/// Factorised system ready for repeated solves.
pub struct LinearSystem {
    matrix: CsrMatrix,
    backend: Backend,
    opts: GmresOptions,
}

impl LinearSystem {
    pub fn new(matrix: CsrMatrix, opts: GmresOptions) -> Result<Self> {
        let backend = if opts.direct_work_limit > 0.0 {
            let perm = reverse_cuthill_mckee(&matrix);
            let (kl, ku) = BandedLu::bandwidths(&matrix, &perm);
            let work = matrix.dim() as f64 * kl as f64 * (2 * kl + ku + 1) as f64;
            if work <= opts.direct_work_limit {
                Backend::Direct(BandedLu::new(&matrix, perm)?)
            } else {
                Backend::Krylov(Ilu0::new(&matrix)?)
            }
        } else {
            Backend::Krylov(Ilu0::new(&matrix)?)
        };
        Ok(LinearSystem { matrix, backend, opts })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.backend, Backend::Direct(_))
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        match &self.backend {
            Backend::Krylov(m) => gmres(&self.matrix, m, b, &self.opts),
            Backend::Direct(lu) => {
                let x = lu.solve(b);
                let mut r = vec![0.0; b.len()];
                self.matrix.matvec(&x, &mut r);
                let b_norm = norm(b);
                let res = r.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let relative_residual = if b_norm > 0.0 { res / b_norm } else { res };
                if !relative_residual.is_finite() || relative_residual > self.opts.tol {
                    return Err(Error::LinearSolver {
                        iterations: 0,
                        residual: relative_residual,
                        step: None,
                    });
                }
                Ok((
                    x,
                    SolveStats {
                        iterations: 0,
                        relative_residual,
                    },
                ))
            }
        }
    }
}

/// Right-preconditioned restarted GMRES from a zero initial guess. The
/// stopping test uses the true residual `‖b − A x‖ ≤ tol ‖b‖`.
pub fn gmres(a: &CsrMatrix, m: &Ilu0, b: &[f64], opts: &GmresOptions) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.dim();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let target = opts.tol * b_norm;
    let restart = opts.restart.min(n).max(1);
    let mut total = 0usize;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        a.matvec(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        if beta <= target {
            return Ok((
                x,
                SolveStats {
                    iterations: total,
                    relative_residual: beta / b_norm,
                },
            ));
        }
        if total >= opts.max_iter {
            return Err(Error::LinearSolver {
                iterations: total,
                residual: beta / b_norm,
                step: None,
            });
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            z.copy_from_slice(&basis[k]);
            m.apply(&mut z);
            a.matvec(&z, &mut w);
            // modified Gram-Schmidt with one reorthogonalisation pass
            for _ in 0..2 {
                for (j, v) in basis.iter().enumerate() {
                    let h = dot(&w, v);
                    hess[j][k] += h;
                    for i in 0..n {
                        w[i] -= h * v[i];
                    }
                }
            }
            let h_next = norm(&w);
            hess[k + 1][k] = h_next;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            cs[k] = hess[k][k] / denom;
            sn[k] = hess[k + 1][k] / denom;
            hess[k][k] = denom;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            // the estimate undershoots in late cycles; stop a bit early and verify
            if g[k + 1].abs() <= 0.5 * target || h_next == 0.0 || total >= opts.max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / h_next).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= hess[i][j] * y[j];
            }
            y[i] = acc / hess[i][i];
        }
        z.iter_mut().for_each(|v| *v = 0.0);
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                z[i] += yj * basis[j][i];
            }
        }
        m.apply(&mut z);
        for i in 0..n {
            x[i] += z[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn convection_diffusion(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0 + (i % 3) as f64));
            if i > 0 {
                t.push((i, i - 1, -1.5));
            }
            if i + 1 < n {
                t.push((i, i + 1, -0.7));
            }
            if i + 5 < n {
                t.push((i, i + 5, 0.3));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 1, 1.0), (0, 0, 2.0), (0, 1, 3.0), (1, 1, 1.0)]);
        assert_eq!(a.get(0, 1), 4.0);
        assert_eq!(a.nnz(), 3);
        let at = a.transpose();
        assert_eq!(at.get(1, 0), 4.0);
        assert_eq!(at.get(0, 1), 0.0);
    }

    #[test]
    fn ilu_exact_for_tridiagonal() {
        let mut t = Vec::new();
        for i in 0..10 {
            t.push((i, i, 3.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i < 9 {
                t.push((i, i + 1, -1.2));
            }
        }
        let a = CsrMatrix::from_triplets(10, t);
        let ilu = Ilu0::new(&a).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; 10];
        a.matvec(&x, &mut b);
        ilu.apply(&mut b);
        for i in 0..10 {
            assert!((b[i] - x[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn gmres_solves_nonsymmetric_system_and_transpose() {
        let n = 200;
        let a = convection_diffusion(n);
        let x_true: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        for mat in [a.clone(), a.transpose()] {
            let mut b = vec![0.0; n];
            mat.matvec(&x_true, &mut b);
            let sys = LinearSystem::new(mat, GmresOptions {
                    restart: 10,
                    direct_work_limit: 0.0,
                    ..Default::default()
                }).unwrap();
            let (x, stats) = sys.solve(&b).unwrap();
            assert!(stats.relative_residual <= LINEAR_TOL);
            let err: f64 = x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let a = convection_diffusion(5);
        let opts = GmresOptions {
            direct_work_limit: 0.0,
            ..Default::default()
        };
        let sys = LinearSystem::new(a, opts).unwrap();
        let (x, stats) = sys.solve(&[0.0; 5]).unwrap();
        assert_eq!(x, vec![0.0; 5]);
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn gmres_reports_non_convergence() {
        let a = convection_diffusion(50);
        let b = vec![1.0; 50];
        let sys = LinearSystem::new(
            a,
            GmresOptions {
                tol: 1e-30,
                restart: 2,
                max_iter: 3,
                direct_work_limit: 0.0,
            },
        )
        .unwrap();
        assert!(matches!(sys.solve(&b), Err(Error::LinearSolver { .. })));
    }

    fn shuffled_block_system(n: usize) -> CsrMatrix {
        // three coupled 1D chains stored block by block, like the state Jacobian
        let mut t = Vec::new();
        for c in 0..3 {
            for i in 0..n {
                let r = c * n + i;
                t.push((r, r, 3.0 + c as f64));
                if i > 0 {
                    t.push((r, r - 1, -1.0));
                }
                if i + 1 < n {
                    t.push((r, r + 1, -0.4));
                }
                t.push((r, ((c + 1) % 3) * n + i, 0.9));
            }
        }
        CsrMatrix::from_triplets(3 * n, t)
    }

    #[test]
    fn rcm_narrows_block_band() {
        let a = shuffled_block_system(40);
        let identity: Vec<usize> = (0..120).collect();
        let (kl0, _) = BandedLu::bandwidths(&a, &identity);
        let perm = reverse_cuthill_mckee(&a);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, identity);
        let (kl, ku) = BandedLu::bandwidths(&a, &perm);
        assert!(kl < kl0 / 4 && ku < kl0 / 4, "{kl} {ku} vs {kl0}");
    }

    #[test]
    fn banded_lu_matches_gmres_and_needs_pivoting() {
        let n = 40;
        let mut a = shuffled_block_system(n);
        let x_true: Vec<f64> = (0..3 * n).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut b = vec![0.0; 3 * n];
        a.matvec(&x_true, &mut b);
        let sys = LinearSystem::new(a.clone(), GmresOptions::default()).unwrap();
        assert!(sys.is_direct());
        let (x, _) = sys.solve(&b).unwrap();
        let err: f64 = x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-14, "err {err}");
        // zero diagonal forces row interchanges
        let t = vec![(0, 1, 2.0), (1, 0, 1.0), (1, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 2, 4.0)];
        a = CsrMatrix::from_triplets(3, t);
        let lu = BandedLu::new(&a, vec![0, 1, 2]).unwrap();
        let x = lu.solve(&[2.0, 3.0, 5.0]);
        let mut r = vec![0.0; 3];
        a.matvec(&x, &mut r);
        for (ri, bi) in r.iter().zip([2.0, 3.0, 5.0]) {
            assert!((ri - bi).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_band_is_reported() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(BandedLu::new(&a, vec![0, 1]).is_err());
    }
}
