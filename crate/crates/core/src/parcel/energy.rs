use super::maxflow::FlowGraph;
use super::vmf::{log_vmf_density, VmfComponent};
use super::{LabelConfig, ParcellationParams};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use nalgebra::{DMatrix, Vector3};

/// `exp(-|f_u - f_v|^2 / (2 sigma^2))`.
pub fn pairwise_weight(f_u: &[f64], f_v: &[f64], sigma: f64) -> f64 {
    let d2: f64 = f_u.iter().zip(f_v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Rows scaled to unit length.
pub fn normalize_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = row.norm();
        if !(n > 1e-12) {
            return Err(Error::DegenerateFeatures { row: i });
        }
        row /= n;
    }
    Ok(out)
}

/// Mean feature distance across mesh edges, or 1 when it vanishes.
pub fn default_sigma(unit_features: &DMatrix<f64>, edges: &[(usize, usize)]) -> f64 {
    if edges.is_empty() {
        return 1.0;
    }
    let total: f64 = edges.iter().map(|&(u, v)| (unit_features.row(u) - unit_features.row(v)).norm()).sum();
    let s = total / edges.len() as f64;
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

/// Discrete Potts problem: per-vertex label costs plus weighted edge disagreements.
#[derive(Debug, Clone)]
pub struct EnergyProblem {
    /// V x K unary costs.
    pub unary: DMatrix<f64>,
    pub edges: Vec<(usize, usize, f64)>,
    pub lambda: f64,
}

impl EnergyProblem {
    pub fn num_labels(&self) -> usize {
        self.unary.ncols()
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let u: f64 = labels.iter().enumerate().map(|(v, &l)| self.unary[(v, l)]).sum();
        let p: f64 = self.edges.iter().filter(|(a, b, _)| labels[*a] != labels[*b]).map(|e| e.2).sum();
        u + self.lambda * p
    }
}

/// Best labelling among those where every vertex keeps its label or takes
/// `alpha`, found by a single minimum cut. Vertices on the source side keep
/// their label, so ties favour the current configuration.
pub fn alpha_expansion(labels: &LabelConfig, alpha: usize, problem: &EnergyProblem) -> LabelConfig {
    let n = labels.labels.len();
    let cur = &labels.labels;
    let (s, t) = (n, n + 1);
    // cost of switching (cut s->v) and of keeping (cut v->t)
    let mut switch = vec![0.0; n];
    let mut keep = vec![0.0; n];
    for v in 0..n {
        switch[v] = problem.unary[(v, alpha)];
        keep[v] = problem.unary[(v, cur[v])];
    }
    let mut g = FlowGraph::new(n + 2);
    for &(u, v, w) in &problem.edges {
        let w = problem.lambda * w;
        if w == 0.0 {
            continue;
        }
        let d = |a: usize, b: usize| if a != b { w } else { 0.0 };
        let e00 = d(cur[u], cur[v]);
        let e01 = d(cur[u], alpha);
        let e10 = d(alpha, cur[v]);
        let e11 = 0.0;
        // E = e00 + (e10 - e00) x_u + (e11 - e10) x_v + (e01 + e10 - e00 - e11)(1 - x_u) x_v
        add_linear(&mut switch, &mut keep, u, e10 - e00);
        add_linear(&mut switch, &mut keep, v, e11 - e10);
        let c = e01 + e10 - e00 - e11;
        if c > 0.0 {
            g.add_edge(u, v, c);
        }
    }
    for v in 0..n {
        let m = switch[v].min(keep[v]);
        g.add_edge(s, v, switch[v] - m);
        g.add_edge(v, t, keep[v] - m);
    }
    g.max_flow(s, t);
    let side = g.source_side(s);
    let out: Vec<usize> = (0..n).map(|v| if side[v] { cur[v] } else { alpha }).collect();
    let proposal = LabelConfig { labels: out, k: labels.k };
    if problem.energy(&proposal.labels) <= problem.energy(cur) {
        proposal
    } else {
        labels.clone()
    }
}

fn add_linear(switch: &mut [f64], keep: &mut [f64], v: usize, coef: f64) {
    if coef > 0.0 {
        switch[v] += coef;
    } else {
        keep[v] -= coef;
    }
}

/// Unary cost matrix of unit features and positions under each component.
pub fn unary_matrix(unit_features: &DMatrix<f64>, positions: &[Vector3<f64>], comps: &[VmfComponent], eta: f64) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = unit_features.row_iter().map(|r| r.iter().cloned().collect()).collect();
    DMatrix::from_fn(rows.len(), comps.len(), |v, k| {
        let c = &comps[k];
        -log_vmf_density(&rows[v], c.mu_f.as_slice(), c.kappa_f) - eta * log_vmf_density(positions[v].as_slice(), c.mu_s.as_slice(), c.kappa_s)
    })
}

/// Potts edge weights on unit features.
pub fn edge_weights(unit_features: &DMatrix<f64>, edges: &[(usize, usize)], sigma: f64) -> Vec<(usize, usize, f64)> {
    let rows: Vec<Vec<f64>> = unit_features.row_iter().map(|r| r.iter().cloned().collect()).collect();
    edges.iter().map(|&(u, v)| (u, v, pairwise_weight(&rows[u], &rows[v], sigma))).collect()
}

pub(crate) fn check_shapes(labels: &LabelConfig, features: &DMatrix<f64>, mesh: &TriangleMesh, comps: &[VmfComponent]) -> Result<()> {
    let v = mesh.num_vertices();
    if labels.labels.len() != v || features.nrows() != v {
        return Err(Error::shape(format!("mesh has {v} vertices, {} labels, {} feature rows", labels.labels.len(), features.nrows())));
    }
    if comps.len() != labels.k {
        return Err(Error::shape(format!("{} components for {} labels", comps.len(), labels.k)));
    }
    if comps.iter().any(|c| c.mu_f.len() != features.ncols()) {
        return Err(Error::shape("component feature dimension differs from features"));
    }
    Ok(())
}

/// Builds the discrete problem for raw features (rows are normalised here).
pub fn energy_problem(features: &DMatrix<f64>, mesh: &TriangleMesh, comps: &[VmfComponent], params: &ParcellationParams) -> Result<EnergyProblem> {
    let unit = normalize_rows(features)?;
    let edges = mesh.edges();
    let sigma = params.sigma.unwrap_or_else(|| default_sigma(&unit, &edges));
    Ok(EnergyProblem {
        unary: unary_matrix(&unit, &mesh.unit_directions(), comps, params.eta),
        edges: edge_weights(&unit, &edges, sigma),
        lambda: params.lambda,
    })
}

/// Gibbs energy: summed unaries plus `lambda` times the weighted label disagreements.
pub fn total_energy(
    labels: &LabelConfig,
    features: &DMatrix<f64>,
    mesh: &TriangleMesh,
    comps: &[VmfComponent],
    params: &ParcellationParams,
) -> Result<f64> {
    check_shapes(labels, features, mesh, comps)?;
    Ok(energy_problem(features, mesh, comps, params)?.energy(&labels.labels))
}

/// The Gibbs energy seen as a function of the decoded pattern rows.
/// `params.sigma` should be fixed so that the loss is a smooth function of `x_hat`.
pub fn seg_loss(
    labels: &LabelConfig,
    x_hat: &DMatrix<f64>,
    mesh: &TriangleMesh,
    comps: &[VmfComponent],
    params: &ParcellationParams,
) -> Result<f64> {
    total_energy(labels, x_hat, mesh, comps, params)
}

/// [`seg_loss`] and its gradient with respect to `x_hat`, holding the
/// components and the bandwidth fixed.
pub fn seg_loss_grad(
    labels: &LabelConfig,
    x_hat: &DMatrix<f64>,
    mesh: &TriangleMesh,
    comps: &[VmfComponent],
    params: &ParcellationParams,
) -> Result<(f64, DMatrix<f64>)> {
    check_shapes(labels, x_hat, mesh, comps)?;
    let unit = normalize_rows(x_hat)?;
    let edges = mesh.edges();
    let sigma = params.sigma.unwrap_or_else(|| default_sigma(&unit, &edges));
    let problem = EnergyProblem {
        unary: unary_matrix(&unit, &mesh.unit_directions(), comps, params.eta),
        edges: edge_weights(&unit, &edges, sigma),
        lambda: params.lambda,
    };
    let loss = problem.energy(&labels.labels);

    // gradient with respect to the unit rows
    let mut gf = DMatrix::zeros(unit.nrows(), unit.ncols());
    for (v, &l) in labels.labels.iter().enumerate() {
        let c = &comps[l];
        let mut row = gf.row_mut(v);
        row -= c.mu_f.transpose() * c.kappa_f;
    }
    for &(u, v, w) in &problem.edges {
        if labels.labels[u] == labels.labels[v] {
            continue;
        }
        let d = unit.row(u) - unit.row(v);
        let g = d * (-params.lambda * w / (sigma * sigma));
        let mut ru = gf.row_mut(u);
        ru += &g;
        let mut rv = gf.row_mut(v);
        rv -= &g;
    }
    // chain through f = x / |x|
    let mut grad = DMatrix::zeros(x_hat.nrows(), x_hat.ncols());
    for v in 0..x_hat.nrows() {
        let n = x_hat.row(v).norm();
        let f = unit.row(v);
        let g = gf.row(v);
        let proj = g.dot(&f);
        grad.set_row(v, &((g - f * proj) / n));
    }
    Ok((loss, grad))
}
