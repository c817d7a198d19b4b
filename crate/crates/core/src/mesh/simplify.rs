//! Quadric error metric edge-collapse simplification.
//!
//! Vertices carry the summed plane quadrics of their incident faces (area
//! weighted); open boundary edges add a stiff perpendicular quadric so that
//! silhouettes of open meshes survive. The cheapest edge is collapsed until
//! the face budget is met. Collapse targets are the quadric minimiser,
//! clamped into the original bounding box; vertices on the box faces carry
//! an extra axis-plane quadric so the extent is kept. Collapses that would flip a face
//! are rejected. If the queue empties first, the mesh is finished with
//! uniform vertex clustering and the result is flagged.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};

use super::TriangleMesh;
use crate::error::{Error, Result};

const BOUNDARY_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct Simplified {
    pub mesh: TriangleMesh,
    /// Set when edge collapse stalled and vertex clustering finished the job.
    pub used_clustering: bool,
}

pub fn simplify_mesh(mesh: &TriangleMesh, target_fraction: f64) -> Result<Simplified> {
    if mesh.is_empty() {
        return Err(Error::InvalidMesh("cannot simplify an empty mesh".into()));
    }
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target_fraction must lie in (0, 1], got {target_fraction}"
        )));
    }
    let target = ((target_fraction * mesh.face_count() as f64).ceil() as usize).max(1);
    if target >= mesh.face_count() {
        return Ok(Simplified {
            mesh: mesh.clone(),
            used_clustering: false,
        });
    }
    let bbox = mesh.bounding_box().expect("non-empty mesh has vertices");
    let mut state = Collapser::new(mesh, bbox);
    state.run(target);
    let collapsed = state.into_mesh();
    if collapsed.face_count() <= target && !collapsed.is_empty() {
        return Ok(Simplified {
            mesh: collapsed,
            used_clustering: false,
        });
    }
    let clustered = cluster(if collapsed.is_empty() { mesh } else { &collapsed }, target);
    Ok(Simplified {
        mesh: clustered,
        used_clustering: true,
    })
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    a: u32,
    b: u32,
    stamp: (u32, u32),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, ties broken by indices for determinism
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Collapser {
    pos: Vec<Point3<f64>>,
    quadric: Vec<Matrix4<f64>>,
    version: Vec<u32>,
    alive_vertex: Vec<bool>,
    faces: Vec<[u32; 3]>,
    alive_face: Vec<bool>,
    incident: Vec<Vec<usize>>,
    live_faces: usize,
    lo: Point3<f64>,
    hi: Point3<f64>,
    heap: BinaryHeap<Candidate>,
}

fn plane_quadric(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>, weight: f64) -> Option<Matrix4<f64>> {
    let n = (b - a).cross(&(c - a));
    let n = n.try_normalize(1e-300)?;
    let p = Vector4::new(n.x, n.y, n.z, -n.dot(&a.coords));
    Some(p * p.transpose() * weight)
}

impl Collapser {
    fn new(mesh: &TriangleMesh, (lo, hi): (Point3<f64>, Point3<f64>)) -> Self {
        let nv = mesh.vertices.len();
        let mut quadric = vec![Matrix4::zeros(); nv];
        let mut incident = vec![Vec::new(); nv];
        let mut edge_faces: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (fi, f) in mesh.faces.iter().enumerate() {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if let Some(q) = plane_quadric(&a, &b, &c, area) {
                for &i in f {
                    quadric[i as usize] += q;
                }
            }
            for &i in f {
                incident[i as usize].push(fi);
            }
            for k in 0..3 {
                let (u, v) = (f[k], f[(k + 1) % 3]);
                edge_faces.entry((u.min(v), u.max(v))).or_default().push(fi);
            }
        }
        let mut edges: Vec<(u32, u32)> = edge_faces.keys().copied().collect();
        edges.sort_unstable();
        for &(u, v) in &edges {
            let adj = &edge_faces[&(u, v)];
            if adj.len() == 1 {
                let f = mesh.faces[adj[0]];
                let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
                let n = (b - a).cross(&(c - a));
                let pu = mesh.vertices[u as usize];
                let pv = mesh.vertices[v as usize];
                let e = pv - pu;
                let side = pu + n;
                let w = BOUNDARY_WEIGHT * e.norm_squared();
                if let Some(q) = plane_quadric(&pu, &pv, &side, w) {
                    quadric[u as usize] += q;
                    quadric[v as usize] += q;
                }
            }
        }
        // Pin vertices that touch the bounding box so its extent survives.
        let diag = (hi - lo).norm();
        let eps = 1e-9 * diag;
        let pin = BOUNDARY_WEIGHT * diag * diag;
        for (i, p) in mesh.vertices.iter().enumerate() {
            for axis in 0..3 {
                for bound in [lo[axis], hi[axis]] {
                    if (p[axis] - bound).abs() <= eps {
                        let mut plane = Vector4::zeros();
                        plane[axis] = 1.0;
                        plane[3] = -bound;
                        quadric[i] += plane * plane.transpose() * pin;
                    }
                }
            }
        }
        let mut s = Collapser {
            pos: mesh.vertices.clone(),
            quadric,
            version: vec![0; nv],
            alive_vertex: vec![true; nv],
            faces: mesh.faces.clone(),
            alive_face: vec![true; mesh.faces.len()],
            incident,
            live_faces: mesh.faces.len(),
            lo,
            hi,
            heap: BinaryHeap::new(),
        };
        for (u, v) in edges {
            s.push_edge(u, v);
        }
        s
    }

    fn placement(&self, a: u32, b: u32) -> (Point3<f64>, f64) {
        let q = self.quadric[a as usize] + self.quadric[b as usize];
        let cost = |p: &Point3<f64>| {
            let h = p.to_homogeneous();
            (h.transpose() * q * h)[0].max(0.0)
        };
        let pa = self.pos[a as usize];
        let pb = self.pos[b as usize];
        let mut best = (pa, cost(&pa));
        let mid = Point3::from((pa.coords + pb.coords) * 0.5);
        for p in [pb, mid] {
            let c = cost(&p);
            if c < best.1 {
                best = (p, c);
            }
        }
        let m: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into_owned();
        let rhs: Vector3<f64> = -q.fixed_view::<3, 1>(0, 3).into_owned();
        if m.determinant().abs() > 1e-12 * m.norm().powi(3).max(1e-300) {
            if let Some(inv) = m.try_inverse() {
                let opt = Point3::from(inv * rhs).sup(&self.lo).inf(&self.hi);
                let c = cost(&opt);
                if c.is_finite() && c <= best.1 {
                    best = (opt, c);
                }
            }
        }
        best
    }

    fn push_edge(&mut self, a: u32, b: u32) {
        let (_, cost) = self.placement(a, b);
        self.heap.push(Candidate {
            cost,
            a,
            b,
            stamp: (self.version[a as usize], self.version[b as usize]),
        });
    }

    fn flips(&self, moved: u32, other: u32, target: &Point3<f64>) -> bool {
        for &fi in &self.incident[moved as usize] {
            if !self.alive_face[fi] {
                continue;
            }
            let f = self.faces[fi];
            if f.contains(&other) {
                continue;
            }
            let p = f.map(|i| self.pos[i as usize]);
            let before = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let q = f.map(|i| if i == moved { *target } else { self.pos[i as usize] });
            let after = (q[1] - q[0]).cross(&(q[2] - q[0]));
            if before.dot(&after) <= 0.0 || after.norm() <= 1e-300 {
                return true;
            }
        }
        false
    }

    fn run(&mut self, target: usize) {
        while self.live_faces > target {
            let Some(c) = self.heap.pop() else { break };
            let (a, b) = (c.a, c.b);
            if !self.alive_vertex[a as usize]
                || !self.alive_vertex[b as usize]
                || c.stamp != (self.version[a as usize], self.version[b as usize])
            {
                continue;
            }
            let (target_pos, _) = self.placement(a, b);
            if self.flips(a, b, &target_pos) || self.flips(b, a, &target_pos) {
                continue;
            }
            self.collapse(a, b, target_pos);
        }
    }

    fn collapse(&mut self, keep: u32, gone: u32, p: Point3<f64>) {
        self.pos[keep as usize] = p;
        let qg = self.quadric[gone as usize];
        self.quadric[keep as usize] += qg;
        self.alive_vertex[gone as usize] = false;
        let moved = std::mem::take(&mut self.incident[gone as usize]);
        for fi in moved {
            if !self.alive_face[fi] {
                continue;
            }
            let f = &mut self.faces[fi];
            if f.contains(&keep) {
                self.alive_face[fi] = false;
                self.live_faces -= 1;
                continue;
            }
            for i in f.iter_mut() {
                if *i == gone {
                    *i = keep;
                }
            }
            self.incident[keep as usize].push(fi);
        }
        self.incident[keep as usize].retain(|&fi| self.alive_face[fi]);
        self.incident[keep as usize].sort_unstable();
        self.incident[keep as usize].dedup();
        self.version[keep as usize] += 1;

        let mut neighbours: Vec<u32> = self.incident[keep as usize]
            .iter()
            .flat_map(|&fi| self.faces[fi])
            .filter(|&v| v != keep)
            .collect();
        neighbours.sort_unstable();
        neighbours.dedup();
        for n in neighbours {
            self.push_edge(keep.min(n), keep.max(n));
        }
    }

    fn into_mesh(self) -> TriangleMesh {
        let faces = self
            .faces
            .iter()
            .zip(&self.alive_face)
            .filter(|(_, &alive)| alive)
            .map(|(f, _)| *f)
            .collect();
        TriangleMesh {
            vertices: self.pos,
            faces,
        }
        .cleaned()
    }
}

/// Uniform-grid vertex clustering; the cell size grows until the face budget holds.
fn cluster(mesh: &TriangleMesh, target: usize) -> TriangleMesh {
    let (lo, hi) = mesh.bounding_box().expect("non-empty mesh");
    let diag = (hi - lo).norm().max(1e-9);
    let mut cells = 64.0;
    loop {
        let cell = diag / cells;
        let mut groups: HashMap<(i64, i64, i64), (Vector3<f64>, usize, u32)> = HashMap::new();
        let mut remap = Vec::with_capacity(mesh.vertices.len());
        let mut order = 0u32;
        for v in &mesh.vertices {
            let key = (
                ((v.x - lo.x) / cell).floor() as i64,
                ((v.y - lo.y) / cell).floor() as i64,
                ((v.z - lo.z) / cell).floor() as i64,
            );
            let entry = groups.entry(key).or_insert_with(|| {
                order += 1;
                (Vector3::zeros(), 0, order - 1)
            });
            entry.0 += v.coords;
            entry.1 += 1;
            remap.push(entry.2);
        }
        let mut vertices = vec![Point3::origin(); order as usize];
        for (sum, count, idx) in groups.values() {
            vertices[*idx as usize] = Point3::from(sum / *count as f64);
        }
        let faces = mesh
            .faces
            .iter()
            .map(|f| f.map(|i| remap[i as usize]))
            .collect();
        let out = TriangleMesh { vertices, faces }.cleaned();
        if (out.face_count() <= target && !out.is_empty()) || cells <= 1.0 {
            if out.is_empty() {
                // keep the single largest original face
                let best = (0..mesh.face_count())
                    .max_by(|&a, &b| mesh.face_area(a).total_cmp(&mesh.face_area(b)))
                    .unwrap();
                return TriangleMesh {
                    vertices: mesh.vertices.clone(),
                    faces: vec![mesh.faces[best]],
                }
                .compact();
            }
            return out;
        }
        cells *= 0.8;
    }
}
