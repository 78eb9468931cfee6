use super::Laplacian;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Meshes up to this size are solved densely.
pub const DENSE_LIMIT: usize = 2000;

const RESIDUAL_TOL: f64 = 1e-6;

/// Mass-orthonormal eigenpairs of `L psi = lambda M psi`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenmodeBasis {
    /// V x N, one mode per column.
    pub modes: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub mass: DVector<f64>,
}

impl EigenmodeBasis {
    pub fn num_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn num_vertices(&self) -> usize {
        self.modes.nrows()
    }

    /// `Psi^T M`, the N x V projector onto modal coordinates.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut p = self.modes.transpose();
        for (j, m) in self.mass.iter().enumerate() {
            p.column_mut(j).scale_mut(*m);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EigenSolver {
    /// Dense up to [`DENSE_LIMIT`] vertices, shift-invert iteration beyond.
    Auto,
    Dense,
    ShiftInvert,
}

pub fn compute_eigenmodes(lap: &Laplacian, n_modes: usize, seed: u64) -> Result<EigenmodeBasis> {
    compute_eigenmodes_with(lap, n_modes, seed, EigenSolver::Auto)
}

pub fn compute_eigenmodes_with(
    lap: &Laplacian,
    n_modes: usize,
    seed: u64,
    solver: EigenSolver,
) -> Result<EigenmodeBasis> {
    let v = lap.num_vertices();
    if n_modes == 0 || n_modes > v {
        return Err(Error::InfeasibleConfig(format!("requested {n_modes} modes on a mesh with {v} vertices")));
    }
    let inv_sqrt_m = lap.mass.map(|m| 1.0 / m.sqrt());
    let use_dense = match solver {
        EigenSolver::Auto => v <= DENSE_LIMIT,
        EigenSolver::Dense => true,
        EigenSolver::ShiftInvert => false,
    };
    let (values, vectors) = if use_dense {
        dense_pairs(lap, &inv_sqrt_m, n_modes)
    } else {
        shift_invert_pairs(lap, &inv_sqrt_m, n_modes, seed)?
    };

    let mut modes = DMatrix::zeros(v, n_modes);
    for k in 0..n_modes {
        let mut col = vectors.column(k).component_mul(&inv_sqrt_m);
        let mut best = 0;
        for i in 1..v {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        modes.set_column(k, &col);
    }
    let eigenvalues = DVector::from_iterator(n_modes, values.iter().map(|&l| l.max(0.0)));
    let basis = EigenmodeBasis { modes, eigenvalues, mass: lap.mass.clone() };

    let residuals = residuals(lap, &basis);
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    if !(worst <= RESIDUAL_TOL) {
        return Err(Error::ConvergenceFailure { worst_residual: worst, residuals });
    }
    Ok(basis)
}

/// `||L psi_k - lambda_k M psi_k|| / ||M psi_k||` for every mode.
pub fn residuals(lap: &Laplacian, basis: &EigenmodeBasis) -> Vec<f64> {
    (0..basis.num_modes())
        .map(|k| {
            let psi = basis.modes.column(k).into_owned();
            let m_psi = psi.component_mul(&lap.mass);
            let r = lap.stiffness.mul_vec(&psi) - &m_psi * basis.eigenvalues[k];
            r.norm() / m_psi.norm()
        })
        .collect()
}

/// Symmetrically scaled operator `M^{-1/2} L M^{-1/2}` applied to a vector.
fn apply_scaled(lap: &Laplacian, inv_sqrt_m: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    lap.stiffness.mul_vec(&x.component_mul(inv_sqrt_m)).component_mul(inv_sqrt_m)
}

fn dense_pairs(lap: &Laplacian, inv_sqrt_m: &DVector<f64>, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let v = lap.num_vertices();
    let mut a = lap.stiffness.to_dense();
    for i in 0..v {
        for j in 0..v {
            a[(i, j)] *= inv_sqrt_m[i] * inv_sqrt_m[j];
        }
    }
    let a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let mut vecs = DMatrix::zeros(v, n);
    let mut vals = Vec::with_capacity(n);
    for (k, &idx) in order.iter().take(n).enumerate() {
        vals.push(eig.eigenvalues[idx]);
        vecs.set_column(k, &eig.eigenvectors.column(idx));
    }
    (vals, vecs)
}

/// Block shift-invert subspace iteration with Rayleigh-Ritz extraction.
/// Inner solves use Jacobi-preconditioned conjugate gradients.
fn shift_invert_pairs(
    lap: &Laplacian,
    inv_sqrt_m: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let v = lap.num_vertices();
    let p = (n + (n / 2).max(8)).min(v);
    let diag = lap.stiffness.diagonal().component_mul(inv_sqrt_m).component_mul(inv_sqrt_m);
    let sigma = 1e-3 * diag.mean().max(1e-12);
    let precond = diag.map(|d| 1.0 / (d + sigma));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::from_fn(v, p, |_, _| StandardNormal.sample(&mut rng));
    let mut last = (Vec::new(), DMatrix::zeros(v, n), f64::INFINITY);
    for _ in 0..500 {
        let mut y = DMatrix::zeros(v, p);
        for j in 0..p {
            let b = x.column(j).into_owned();
            let sol = conjugate_gradient(|z| apply_scaled(lap, inv_sqrt_m, z) + z * sigma, &b, &precond);
            y.set_column(j, &sol);
        }
        let q = y.qr().q();
        let mut aq = DMatrix::zeros(v, p);
        for j in 0..p {
            aq.set_column(j, &apply_scaled(lap, inv_sqrt_m, &q.column(j).into_owned()));
        }
        let t = q.transpose() * &aq;
        let t = (&t + t.transpose()) * 0.5;
        let eig = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
        let mut ritz = DMatrix::zeros(v, p);
        let mut vals = Vec::with_capacity(p);
        for (k, &idx) in order.iter().enumerate() {
            ritz.set_column(k, &(&q * eig.eigenvectors.column(idx)));
            vals.push(eig.eigenvalues[idx]);
        }
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let col = ritz.column(k).into_owned();
            let r = apply_scaled(lap, inv_sqrt_m, &col) - &col * vals[k];
            // residual in the unscaled problem, up to the mass weighting
            let psi = col.component_mul(inv_sqrt_m);
            let m_psi = psi.component_mul(&lap.mass);
            let scaled = r.component_mul(&lap.mass.map(f64::sqrt));
            worst = worst.max(scaled.norm() / m_psi.norm());
        }
        last = (vals[..n].to_vec(), ritz.columns(0, n).into_owned(), worst);
        if worst <= RESIDUAL_TOL * 1e-2 {
            break;
        }
        x = ritz;
    }
    if last.2 > RESIDUAL_TOL {
        return Err(Error::ConvergenceFailure { worst_residual: last.2, residuals: vec![last.2] });
    }
    Ok((last.0, last.1))
}

fn conjugate_gradient<F>(apply: F, b: &DVector<f64>, precond: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut z = r.component_mul(precond);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let b_norm = b.norm().max(1e-300);
    for _ in 0..(10 * b.len()).max(100) {
        let ap = apply(&p);
        let alpha = rz / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= 1e-13 * b_norm {
            break;
        }
        z = r.component_mul(precond);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    x
}
