//! Triangle meshes: validation, primitives, file I/O and simplification.

mod io;
mod simplify;

pub use io::{load_mesh, write_obj, write_stl_binary};
pub use simplify::{simplify_mesh, Simplified};

use nalgebra::{Isometry3, Point3, Vector3};

use crate::error::{Error, Result};

/// Faces with area at or below this (m²) are dropped on load.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = TriangleMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.vertices.iter().position(|v| !v.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let n = self.vertices.len() as u32;
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("face {fi} index out of range")));
            }
            if self.face_area(fi) <= DEGENERATE_AREA {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let [a, b, c] = self.faces[fi].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Drop degenerate faces and unreferenced vertices.
    pub fn cleaned(mut self) -> Self {
        let verts = &self.vertices;
        self.faces.retain(|f| {
            let [a, b, c] = f.map(|i| verts[i as usize]);
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && 0.5 * (b - a).cross(&(c - a)).norm() > DEGENERATE_AREA
        });
        self.compact()
    }

    /// Drop unreferenced vertices, keeping the survivors in their original order.
    pub fn compact(self) -> Self {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if used[i] {
                remap[i] = vertices.len() as u32;
                vertices.push(*v);
            }
        }
        let faces = self.faces.iter().map(|f| f.map(|i| remap[i as usize])).collect();
        TriangleMesh { vertices, faces }
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> Self {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| iso * v).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn scaled(&self, s: Vector3<f64>) -> Self {
        TriangleMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| Point3::new(v.x * s.x, v.y * s.y, v.z * s.z))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn merge(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|i| i + off)));
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for a vertex-free mesh.
    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bounding_box().map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }

    /// Axis-aligned box centred on the origin.
    pub fn cuboid(half: Vector3<f64>) -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            vertices.push(Point3::new(sx * half.x, sy * half.y, sz * half.z));
        }
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // -z
            [4, 5, 6], [5, 7, 6], // +z
            [0, 1, 4], [1, 5, 4], // -y
            [2, 6, 3], [3, 6, 7], // +y
            [0, 4, 2], [2, 4, 6], // -x
            [1, 3, 5], [3, 7, 5], // +x
        ];
        TriangleMesh { vertices, faces }
    }

    /// Closed cylinder along z, centred on the origin.
    pub fn cylinder(radius: f64, length: f64, segments: usize) -> Self {
        let segments = segments.max(3);
        let h = 0.5 * length;
        let mut vertices = Vec::with_capacity(2 * segments + 2);
        for k in 0..segments {
            let a = std::f64::consts::TAU * k as f64 / segments as f64;
            let (s, c) = a.sin_cos();
            vertices.push(Point3::new(radius * c, radius * s, -h));
            vertices.push(Point3::new(radius * c, radius * s, h));
        }
        let bottom = vertices.len() as u32;
        vertices.push(Point3::new(0.0, 0.0, -h));
        let top = bottom + 1;
        vertices.push(Point3::new(0.0, 0.0, h));
        let mut faces = Vec::with_capacity(4 * segments);
        for k in 0..segments as u32 {
            let n = (k + 1) % segments as u32;
            let (b0, t0, b1, t1) = (2 * k, 2 * k + 1, 2 * n, 2 * n + 1);
            faces.push([b0, b1, t1]);
            faces.push([b0, t1, t0]);
            faces.push([bottom, b1, b0]);
            faces.push([top, t0, t1]);
        }
        TriangleMesh { vertices, faces }
    }

    /// Geodesic sphere from a subdivided icosahedron; `20 * 4^level` faces.
    pub fn icosphere(radius: f64, level: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3<f64>> = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Point3::from(Vector3::from(*p).normalize()))
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..level {
            let mut midpoints = std::collections::HashMap::new();
            let mut mid = |a: u32, b: u32, vertices: &mut Vec<Point3<f64>>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize].coords + vertices[b as usize].coords).normalize();
                    vertices.push(Point3::from(m));
                    vertices.len() as u32 - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut vertices {
            v.coords *= radius;
        }
        TriangleMesh { vertices, faces }
    }

    /// Single square in the z = 0 plane, facing +z.
    pub fn square(half: f64) -> Self {
        TriangleMesh {
            vertices: vec![
                Point3::new(-half, -half, 0.0),
                Point3::new(half, -half, 0.0),
                Point3::new(half, half, 0.0),
                Point3::new(-half, half, 0.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_valid() {
        TriangleMesh::cuboid(Vector3::new(0.1, 0.2, 0.3)).validate().unwrap();
        TriangleMesh::cylinder(0.05, 0.3, 16).validate().unwrap();
        let ico = TriangleMesh::icosphere(1.0, 3);
        ico.validate().unwrap();
        assert_eq!(ico.face_count(), 1280);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let err = TriangleMesh::new(vec![Point3::origin(); 3], vec![[0, 1, 3]]).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn cleaned_drops_degenerate_faces() {
        let mut m = TriangleMesh::square(0.5);
        m.vertices.push(Point3::new(5.0, 5.0, 5.0));
        m.faces.push([0, 0, 1]);
        let c = m.cleaned();
        assert_eq!(c.face_count(), 2);
        assert_eq!(c.vertices.len(), 4);
    }
}
