//! Triangle meshes, the cotangent Laplacian and geometric eigenmodes.

mod eigen;
mod laplacian;

pub use eigen::{compute_eigenmodes, compute_eigenmodes_with, residuals, EigenSolver, EigenmodeBasis};
pub use laplacian::{build_laplacian, mass_inner_product, Laplacian};

use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::collections::{BTreeSet, HashMap, VecDeque};

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// A validated triangle mesh. Coordinates are in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let vertices: Vec<Vector3<f64>> = vertices.into_iter().map(Vector3::from).collect();
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::DegenerateMesh(format!("vertex {i} has non-finite coordinates")));
            }
        }
        let n = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&i| i >= n) {
                return Err(Error::DegenerateMesh(format!("face {f} indexes past {n} vertices")));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::DegenerateMesh(format!("face {f} repeats a vertex")));
            }
        }
        let mesh = TriangleMesh { vertices, faces };
        for f in 0..mesh.faces.len() {
            let area = mesh.face_area(f);
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(Error::DegenerateMesh(format!("face {f} has area {area:e}")));
            }
        }
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (q - p).cross(&(r - p)).norm()
    }

    /// Undirected edges as sorted `(u, v)` pairs with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for face in &self.faces {
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// Sorted neighbour lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_vertices()];
        for (u, v) in self.edges() {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    /// Positions relative to the centroid, scaled to unit length.
    /// A vertex sitting exactly on the centroid maps to the first axis.
    pub fn unit_directions(&self) -> Vec<Vector3<f64>> {
        let c = self.centroid();
        self.vertices
            .iter()
            .map(|v| {
                let d = v - c;
                let n = d.norm();
                if n > 0.0 {
                    d / n
                } else {
                    Vector3::x()
                }
            })
            .collect()
    }

    /// Multi-source Dijkstra over edge lengths. Returns, for each vertex, the index
    /// into `seeds` of its nearest seed; ties go to the lowest seed index.
    pub fn geodesic_voronoi(&self, seeds: &[usize]) -> Vec<usize> {
        use std::cmp::Ordering;
        use std::collections::BinaryHeap;

        #[derive(PartialEq)]
        struct Item(f64, usize, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1)).then(o.2.cmp(&self.2))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }

        let adj = self.neighbors();
        let n = self.num_vertices();
        let mut dist = vec![f64::INFINITY; n];
        let mut owner = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        for (s, &v) in seeds.iter().enumerate() {
            if 0.0 < dist[v] || s < owner[v] {
                dist[v] = 0.0;
                owner[v] = owner[v].min(s);
            }
        }
        for (v, &o) in owner.iter().enumerate() {
            if o != usize::MAX {
                heap.push(Item(0.0, o, v));
            }
        }
        while let Some(Item(d, o, v)) = heap.pop() {
            if d > dist[v] || (d == dist[v] && o != owner[v]) {
                continue;
            }
            for &w in &adj[v] {
                let nd = d + (self.vertices[v] - self.vertices[w]).norm();
                if nd < dist[w] || (nd == dist[w] && o < owner[w]) {
                    dist[w] = nd;
                    owner[w] = o;
                    heap.push(Item(nd, o, w));
                }
            }
        }
        // Vertices in components without a seed fall back to seed 0.
        owner.iter().map(|&o| if o == usize::MAX { 0 } else { o }).collect()
    }

    /// Number of connected components of the vertex graph.
    pub fn num_components(&self) -> usize {
        let adj = self.neighbors();
        let mut seen = vec![false; self.num_vertices()];
        let mut count = 0;
        for s in 0..self.num_vertices() {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            let mut q = VecDeque::from([s]);
            while let Some(v) = q.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        q.push_back(w);
                    }
                }
            }
        }
        count
    }

    /// Regular tetrahedron inscribed in the unit sphere.
    pub fn tetrahedron() -> Self {
        let s = 1.0 / 3f64.sqrt();
        let v = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        let f = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        TriangleMesh::new(v, f).expect("tetrahedron is valid")
    }

    /// Unit-radius icosphere after `subdivisions` rounds of 4-to-1 splitting.
    pub fn icosphere(subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vector3::from(*p).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.push([a, ab, ca]);
                next.push([b, bc, ab]);
                next.push([c, ca, bc]);
                next.push([ab, bc, ca]);
            }
            faces = next;
        }
        let v = verts.iter().map(|p| [p.x, p.y, p.z]).collect();
        TriangleMesh::new(v, faces).expect("icosphere is valid")
    }

    /// Flat `nx` × `ny` vertex grid with spacing `h`, split into right triangles.
    pub fn grid(nx: usize, ny: usize, h: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InfeasibleConfig("grid needs at least 2x2 vertices".into()));
        }
        let mut v = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                v.push([i as f64 * h, j as f64 * h, 0.0]);
            }
        }
        let mut f = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let b = a + 1;
                let c = a + nx;
                let d = c + 1;
                f.push([a, b, d]);
                f.push([a, d, c]);
            }
        }
        TriangleMesh::new(v, f)
    }
}
