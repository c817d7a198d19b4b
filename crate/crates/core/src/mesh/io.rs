use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

use super::TriangleMesh;
use crate::error::{Error, Result};

/// Load an STL (binary or ASCII) or OBJ mesh. Degenerate faces are dropped.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let mesh = match ext.as_str() {
        "stl" => load_stl(path)?,
        "obj" => load_obj(path)?,
        other => {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported mesh format '{other}'"),
            ))
        }
    };
    let mesh = mesh.cleaned();
    mesh.validate()?;
    Ok(mesh)
}

fn load_stl(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let indexed = stl_io::read_stl(&mut reader)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let vertices = indexed
        .vertices
        .iter()
        .map(|v| Point3::new(v[0] as f64, v[1] as f64, v[2] as f64))
        .collect();
    let faces = indexed
        .faces
        .iter()
        .map(|f| f.vertices.map(|i| i as u32))
        .collect();
    Ok(TriangleMesh { vertices, faces })
}

fn load_obj(path: &Path) -> Result<TriangleMesh> {
    let opts = tobj::LoadOptions {
        triangulate: true,
        single_index: true,
        ..Default::default()
    };
    let (models, _) =
        tobj::load_obj(path, &opts).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut mesh = TriangleMesh::default();
    for model in models {
        let m = &model.mesh;
        let part = TriangleMesh {
            vertices: m
                .positions
                .chunks_exact(3)
                .map(|p| Point3::new(p[0] as f64, p[1] as f64, p[2] as f64))
                .collect(),
            faces: m.indices.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect(),
        };
        mesh.merge(&part);
    }
    Ok(mesh)
}

pub fn write_stl_binary(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let tris: Vec<stl_io::Triangle> = mesh
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
            let n = (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_default();
            let v = |p: Point3<f64>| stl_io::Vertex::new([p.x as f32, p.y as f32, p.z as f32]);
            stl_io::Triangle {
                normal: stl_io::Normal::new([n.x as f32, n.y as f32, n.z as f32]),
                vertices: [v(a), v(b), v(c)],
            }
        })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    stl_io::write_stl(&mut w, tris.iter()).map_err(|e| Error::io(path, e))
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &mesh.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn stl_and_obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = TriangleMesh::cuboid(Vector3::new(0.1, 0.2, 0.3));

        let stl = dir.path().join("box.stl");
        write_stl_binary(&stl, &mesh).unwrap();
        let back = load_mesh(&stl).unwrap();
        assert_eq!(back.face_count(), 12);
        assert_eq!(back.vertices.len(), 8);

        let obj = dir.path().join("box.obj");
        write_obj(&obj, &mesh).unwrap();
        let back = load_mesh(&obj).unwrap();
        assert_eq!(back.face_count(), 12);
        // the loader may reorder vertices; compare as sets
        let key = |v: &Vec<Point3<f64>>| {
            let mut k: Vec<[u64; 3]> = v.iter().map(|p| [p.x, p.y, p.z].map(f64::to_bits)).collect();
            k.sort_unstable();
            k
        };
        assert_eq!(key(&back.vertices), key(&mesh.vertices));
    }

    #[test]
    fn ascii_stl_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.stl");
        std::fs::write(
            &path,
            "solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid t\n",
        )
        .unwrap();
        let m = load_mesh(&path).unwrap();
        assert_eq!(m.face_count(), 1);
    }

    #[test]
    fn unknown_extension_is_a_parse_error() {
        let err = load_mesh(Path::new("thing.ply")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
