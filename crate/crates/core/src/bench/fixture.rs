//! Procedural 7-DoF arm used by tests, benchmarks and the CLI when no robot file is given.
//!
//! Proportions follow a typical medical lightweight arm (alternating roll and
//! pitch axes, ~1.2 m stretched). Off-axis housings break the rotational
//! symmetry of the cylindrical links so every pose parameter is observable.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{Joint, JointKind, Link, RobotModel};
use crate::mesh::{write_obj, write_stl_binary, TriangleMesh};

const SEGMENTS: usize = 20;

fn rod(radius: f64, from: f64, to: f64) -> TriangleMesh {
    TriangleMesh::cylinder(radius, to - from, SEGMENTS).transformed(&Isometry3::translation(0.0, 0.0, 0.5 * (from + to)))
}

fn block(half: [f64; 3], centre: [f64; 3]) -> TriangleMesh {
    TriangleMesh::cuboid(Vector3::from(half)).transformed(&Isometry3::translation(centre[0], centre[1], centre[2]))
}

/// Cylinder whose axis is the y axis, centred at `centre` (joint housings).
fn hub(radius: f64, width: f64, centre: [f64; 3]) -> TriangleMesh {
    let r = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
    TriangleMesh::cylinder(radius, width, SEGMENTS)
        .transformed(&Isometry3::from_parts(Translation3::new(centre[0], centre[1], centre[2]), r))
}

fn union(parts: &[TriangleMesh]) -> TriangleMesh {
    let mut m = TriangleMesh::default();
    for p in parts {
        m.merge(p);
    }
    m
}

struct Spec {
    name: &'static str,
    mesh: TriangleMesh,
    /// Joint into this link: offset along the parent's z and axis.
    offset: f64,
    axis: [f64; 3],
    limit_deg: f64,
}

fn specs() -> Vec<Spec> {
    vec![
        Spec {
            name: "base",
            mesh: union(&[rod(0.11, 0.0, 0.12), block([0.06, 0.05, 0.04], [-0.11, 0.0, 0.05])]),
            offset: 0.0,
            axis: [0.0, 0.0, 1.0],
            limit_deg: 0.0,
        },
        Spec {
            name: "link_1",
            mesh: union(&[rod(0.075, 0.0, 0.2), hub(0.075, 0.17, [0.0, 0.0, 0.2])]),
            offset: 0.12,
            axis: [0.0, 0.0, 1.0],
            limit_deg: 170.0,
        },
        Spec {
            name: "link_2",
            mesh: union(&[rod(0.07, 0.0, 0.2), block([0.03, 0.045, 0.06], [0.085, 0.0, 0.1])]),
            offset: 0.2,
            axis: [0.0, 1.0, 0.0],
            limit_deg: 120.0,
        },
        Spec {
            name: "link_3",
            mesh: union(&[rod(0.065, 0.0, 0.2), hub(0.065, 0.15, [0.0, 0.0, 0.2])]),
            offset: 0.2,
            axis: [0.0, 0.0, 1.0],
            limit_deg: 170.0,
        },
        Spec {
            name: "link_4",
            mesh: union(&[rod(0.062, 0.0, 0.2), block([0.028, 0.04, 0.05], [-0.08, 0.0, 0.12])]),
            offset: 0.2,
            axis: [0.0, -1.0, 0.0],
            limit_deg: 120.0,
        },
        Spec {
            name: "link_5",
            mesh: union(&[rod(0.058, 0.0, 0.19), hub(0.058, 0.13, [0.0, 0.0, 0.19])]),
            offset: 0.2,
            axis: [0.0, 0.0, 1.0],
            limit_deg: 170.0,
        },
        Spec {
            name: "link_6",
            mesh: union(&[rod(0.05, 0.0, 0.08), block([0.035, 0.03, 0.03], [0.0, 0.055, 0.04])]),
            offset: 0.19,
            axis: [0.0, 1.0, 0.0],
            limit_deg: 120.0,
        },
        Spec {
            name: "link_7",
            // flange plus an offset drill body and bit; the tool centre is the flange origin
            mesh: union(&[
                rod(0.04, 0.0, 0.03),
                block([0.03, 0.025, 0.06], [0.05, 0.0, 0.09]),
                rod(0.008, 0.03, 0.2).transformed(&Isometry3::translation(0.05, 0.0, 0.0)),
            ]),
            offset: 0.08,
            axis: [0.0, 0.0, 1.0],
            limit_deg: 175.0,
        },
    ]
}

/// The synthetic arm built directly in memory.
pub fn synthetic_arm() -> RobotModel {
    let specs = specs();
    let mut links = Vec::new();
    let mut joints = Vec::new();
    for (i, s) in specs.into_iter().enumerate() {
        if i > 0 {
            let lim = s.limit_deg.to_radians();
            joints.push(Joint {
                name: format!("joint_{i}"),
                kind: JointKind::Revolute,
                axis: Unit::new_normalize(Vector3::from(s.axis)),
                origin: Isometry3::translation(0.0, 0.0, s.offset),
                lower: -lim,
                upper: lim,
            });
        }
        links.push(Link {
            name: s.name.to_string(),
            mesh: s.mesh,
            geometry_free: false,
        });
    }
    RobotModel::new("synthetic_arm", links, joints).expect("fixture is valid")
}

/// Write the arm as a URDF file with one mesh per link (STL, except link_7 as OBJ).
pub fn write_synthetic_arm(dir: &Path) -> Result<std::path::PathBuf> {
    let mesh_dir = dir.join("meshes");
    std::fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let specs = specs();
    let mut urdf = String::from("<?xml version=\"1.0\"?>\n<robot name=\"synthetic_arm\">\n");
    for s in &specs {
        let ext = if s.name == "link_7" { "obj" } else { "stl" };
        let file = mesh_dir.join(format!("{}.{ext}", s.name));
        if ext == "obj" {
            write_obj(&file, &s.mesh)?;
        } else {
            write_stl_binary(&file, &s.mesh)?;
        }
        let _ = write!(
            urdf,
            "  <link name=\"{0}\">\n    <visual>\n      <geometry>\n        <mesh filename=\"meshes/{0}.{ext}\"/>\n      </geometry>\n    </visual>\n  </link>\n",
            s.name
        );
    }
    for (i, pair) in specs.windows(2).enumerate() {
        let s = &pair[1];
        let lim = s.limit_deg.to_radians();
        let _ = write!(
            urdf,
            "  <joint name=\"joint_{}\" type=\"revolute\">\n    <parent link=\"{}\"/>\n    <child link=\"{}\"/>\n    <origin xyz=\"0 0 {}\" rpy=\"0 0 0\"/>\n    <axis xyz=\"{} {} {}\"/>\n    <limit lower=\"{:.9}\" upper=\"{:.9}\" effort=\"100\" velocity=\"1\"/>\n  </joint>\n",
            i + 1,
            pair[0].name,
            s.name,
            s.offset,
            s.axis[0],
            s.axis[1],
            s.axis[2],
            -lim,
            lim
        );
    }
    urdf.push_str("</robot>\n");
    let path = dir.join("arm.urdf");
    std::fs::write(&path, urdf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{load_robot, JointConfig};

    #[test]
    fn written_fixture_loads_with_same_kinematics() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_arm(dir.path()).unwrap();
        let loaded = load_robot(&path).unwrap();
        let arm = synthetic_arm();
        assert_eq!(loaded.dof(), 7);
        assert_eq!(loaded.link_count(), 8);
        let q = JointConfig(vec![0.3, -0.5, 1.0, 0.7, -1.2, 0.4, 2.0]);
        let a = arm.tool_centre(&q).unwrap();
        let b = loaded.tool_centre(&q).unwrap();
        assert!((a - b).norm() < 1e-9);
        for (la, lb) in arm.links.iter().zip(&loaded.links) {
            assert_eq!(la.mesh.face_count(), lb.mesh.face_count(), "{}", la.name);
        }
    }
}
