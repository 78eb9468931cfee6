use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;
use nalgebra::DVector;

/// Cotangent stiffness matrix `L` (positive semidefinite, zero row sums) and
/// lumped barycentric vertex mass.
#[derive(Debug, Clone)]
pub struct Laplacian {
    pub stiffness: CsrMatrix,
    pub mass: DVector<f64>,
}

impl Laplacian {
    pub fn num_vertices(&self) -> usize {
        self.mass.len()
    }

    /// `u^T L u`.
    pub fn energy(&self, u: &DVector<f64>) -> f64 {
        u.dot(&self.stiffness.mul_vec(u))
    }
}

pub fn build_laplacian(mesh: &TriangleMesh) -> Result<Laplacian> {
    let n = mesh.num_vertices();
    let verts = mesh.vertices();
    let mut triplets = Vec::with_capacity(mesh.num_faces() * 12);
    let mut mass = DVector::zeros(n);
    for (f, face) in mesh.faces().iter().enumerate() {
        let area = mesh.face_area(f);
        if !(area > 1e-12) || !area.is_finite() {
            return Err(Error::DegenerateMesh(format!("face {f} has area {area:e}")));
        }
        for k in 0..3 {
            let (o, i, j) = (face[k], face[(k + 1) % 3], face[(k + 2) % 3]);
            let a = verts[i] - verts[o];
            let b = verts[j] - verts[o];
            let cot = a.dot(&b) / a.cross(&b).norm();
            let w = 0.5 * cot;
            triplets.push((i, j, -w));
            triplets.push((j, i, -w));
            triplets.push((i, i, w));
            triplets.push((j, j, w));
            mass[face[k]] += area / 3.0;
        }
    }
    Ok(Laplacian { stiffness: CsrMatrix::from_triplets(n, n, &triplets), mass })
}

/// Mass-weighted inner product `sum_i u_i m_i v_i`.
pub fn mass_inner_product(u: &DVector<f64>, v: &DVector<f64>, mass: &DVector<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch { left: u.len(), right: v.len() });
    }
    if u.len() != mass.len() {
        return Err(Error::LengthMismatch { left: u.len(), right: mass.len() });
    }
    Ok(u.iter().zip(mass.iter()).zip(v.iter()).map(|((a, m), b)| a * m * b).sum())
}
