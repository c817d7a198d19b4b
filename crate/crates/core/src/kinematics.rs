//! Serial-chain robot description, forward kinematics and link meshes.
//!
//! Robots are read from a URDF subset: links with visual geometry (mesh
//! references or box/cylinder/sphere primitives) and revolute, continuous or
//! fixed joints arranged as a single chain. Link meshes are resolved at load
//! time and stored in their link-local frame.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Isometry3, Matrix6xX, Point3, Translation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, TriangleMesh};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub axis: Unit<Vector3<f64>>,
    /// Child joint frame expressed in the parent link frame at zero angle.
    pub origin: Isometry3<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub mesh: TriangleMesh,
    /// Set for links that intentionally carry no geometry.
    pub geometry_free: bool,
}

/// Joint positions in radians, one per actuated joint.
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn zeros(dof: usize) -> Self {
        JointConfig(vec![0.0; dof])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distance(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    pub name: String,
    /// Links in chain order, base first.
    pub links: Vec<Link>,
    /// `joints[i]` connects `links[i]` to `links[i + 1]`.
    pub joints: Vec<Joint>,
}

/// A joint position outside its limits.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitViolation {
    pub joint: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RobotModel {
    pub fn new(name: impl Into<String>, links: Vec<Link>, joints: Vec<Joint>) -> Result<Self> {
        let model = RobotModel {
            name: name.into(),
            links,
            joints,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.links.is_empty() {
            return Err(Error::InvalidRobot("robot has no links".into()));
        }
        if self.joints.len() + 1 != self.links.len() {
            return Err(Error::InvalidRobot(format!(
                "{} links need {} joints, found {}",
                self.links.len(),
                self.links.len() - 1,
                self.joints.len()
            )));
        }
        for j in &self.joints {
            if j.kind == JointKind::Revolute && !(j.lower < j.upper) {
                return Err(Error::InvalidRobot(format!(
                    "joint {} has lower limit {} >= upper limit {}",
                    j.name, j.lower, j.upper
                )));
            }
        }
        for l in &self.links {
            if l.mesh.is_empty() && !l.geometry_free {
                return Err(Error::InvalidRobot(format!("link {} has no triangles", l.name)));
            }
            l.mesh.validate()?;
        }
        Ok(())
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn dof(&self) -> usize {
        self.joints
            .iter()
            .filter(|j| j.kind == JointKind::Revolute)
            .count()
    }

    pub fn revolute_joints(&self) -> impl Iterator<Item = &Joint> {
        self.joints.iter().filter(|j| j.kind == JointKind::Revolute)
    }

    /// Report (not reject) joint positions outside their limits.
    pub fn limit_violations(&self, q: &JointConfig) -> Result<Vec<LimitViolation>> {
        self.check_dim(q)?;
        Ok(self
            .revolute_joints()
            .zip(&q.0)
            .filter(|(j, &v)| v < j.lower || v > j.upper)
            .map(|(j, &v)| LimitViolation {
                joint: j.name.clone(),
                value: v,
                lower: j.lower,
                upper: j.upper,
            })
            .collect())
    }

    fn check_dim(&self, q: &JointConfig) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Link frames in the base frame, one per link.
    pub fn forward_kinematics(&self, q: &JointConfig) -> Result<Vec<Isometry3<f64>>> {
        self.check_dim(q)?;
        let mut out = Vec::with_capacity(self.links.len());
        let mut current = Isometry3::identity();
        out.push(current);
        let mut qi = q.0.iter();
        for j in &self.joints {
            current *= j.origin;
            if j.kind == JointKind::Revolute {
                let angle = *qi.next().expect("dimension checked");
                current *= UnitQuaternion::from_axis_angle(&j.axis, angle);
            }
            out.push(current);
        }
        Ok(out)
    }

    /// Link meshes posed by forward kinematics, in the base frame.
    pub fn configured_vertices(&self, q: &JointConfig) -> Result<Vec<Vec<Point3<f64>>>> {
        let frames = self.forward_kinematics(q)?;
        Ok(self
            .links
            .iter()
            .zip(&frames)
            .map(|(l, t)| l.mesh.vertices.iter().map(|v| t * v).collect())
            .collect())
    }

    /// Sub-chain starting at `first_link`, used to check composition of FK.
    pub fn suffix(&self, first_link: usize) -> RobotModel {
        RobotModel {
            name: format!("{}[{first_link}..]", self.name),
            links: self.links[first_link..].to_vec(),
            joints: self.joints[first_link..].to_vec(),
        }
    }

    /// Index of the first actuated joint at or after `joint_index`.
    pub fn dof_offset(&self, joint_index: usize) -> usize {
        self.joints[..joint_index]
            .iter()
            .filter(|j| j.kind == JointKind::Revolute)
            .count()
    }

    /// Tool centre: origin of the terminal link frame.
    pub fn tool_centre(&self, q: &JointConfig) -> Result<Point3<f64>> {
        let frames = self.forward_kinematics(q)?;
        Ok(Point3::from(frames.last().unwrap().translation.vector))
    }

    /// Geometric Jacobian (linear rows first) of the point `tip` given in the
    /// terminal link frame, expressed in the base frame.
    pub fn jacobian(&self, q: &JointConfig, tip: &Point3<f64>) -> Result<Matrix6xX<f64>> {
        self.check_dim(q)?;
        let frames = self.forward_kinematics(q)?;
        let p_tip = frames.last().unwrap() * tip;
        let mut jac = Matrix6xX::zeros(self.dof());
        let mut col = 0;
        for (i, j) in self.joints.iter().enumerate() {
            if j.kind != JointKind::Revolute {
                continue;
            }
            // joint frame = parent link frame * origin; rotation axis is in that frame
            let jf = frames[i] * j.origin;
            let axis = jf.rotation * j.axis.into_inner();
            let p = Point3::from(jf.translation.vector);
            let lin = axis.cross(&(p_tip - p));
            jac.fixed_view_mut::<3, 1>(0, col).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, col).copy_from(&axis);
            col += 1;
        }
        Ok(jac)
    }

    /// Attach extra geometry (e.g. a tool adaptor) to the terminal link.
    pub fn attach_tool(&mut self, mesh: &TriangleMesh, origin: &Isometry3<f64>) {
        let last = self.links.last_mut().unwrap();
        last.mesh.merge(&mesh.transformed(origin));
        last.geometry_free = false;
    }

    /// Same kinematics with every link mesh replaced by `f(mesh)`.
    pub fn map_meshes<F>(&self, mut f: F) -> Result<RobotModel>
    where
        F: FnMut(&TriangleMesh) -> Result<TriangleMesh>,
    {
        let links = self
            .links
            .iter()
            .map(|l| {
                Ok(Link {
                    name: l.name.clone(),
                    mesh: if l.mesh.is_empty() { l.mesh.clone() } else { f(&l.mesh)? },
                    geometry_free: l.geometry_free,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RobotModel {
            name: self.name.clone(),
            links,
            joints: self.joints.clone(),
        })
    }

    pub fn triangle_count(&self) -> usize {
        self.links.iter().map(|l| l.mesh.face_count()).sum()
    }
}

fn parse_vec3(s: Option<&str>, default: [f64; 3], ctx: &str) -> Result<Vector3<f64>> {
    let Some(s) = s else {
        return Ok(Vector3::from(default));
    };
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::parse(ctx, e)))
        .collect::<Result<_>>()?;
    if vals.len() != 3 {
        return Err(Error::parse(ctx, format!("expected 3 numbers, got '{s}'")));
    }
    Ok(Vector3::new(vals[0], vals[1], vals[2]))
}

fn parse_origin(node: Option<roxmltree::Node>, ctx: &str) -> Result<Isometry3<f64>> {
    let Some(node) = node else {
        return Ok(Isometry3::identity());
    };
    let xyz = parse_vec3(node.attribute("xyz"), [0.0; 3], ctx)?;
    let rpy = parse_vec3(node.attribute("rpy"), [0.0; 3], ctx)?;
    Ok(Isometry3::from_parts(
        Translation3::from(xyz),
        UnitQuaternion::from_euler_angles(rpy.x, rpy.y, rpy.z),
    ))
}

fn parse_f64(node: roxmltree::Node, attr: &str, ctx: &str) -> Result<f64> {
    node.attribute(attr)
        .ok_or_else(|| Error::parse(ctx, format!("missing attribute '{attr}'")))?
        .parse::<f64>()
        .map_err(|e| Error::parse(ctx, e))
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn link_geometry(node: roxmltree::Node, base_dir: &Path, link: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    for visual in node.children().filter(|c| c.has_tag_name("visual")) {
        let ctx = format!("link {link}");
        let origin = parse_origin(child(visual, "origin"), &ctx)?;
        let Some(geom) = child(visual, "geometry") else {
            continue;
        };
        let Some(shape) = geom.children().find(|c| c.is_element()) else {
            continue;
        };
        let part = match shape.tag_name().name() {
            "mesh" => {
                let file = shape
                    .attribute("filename")
                    .ok_or_else(|| Error::parse(&ctx, "mesh without filename"))?;
                let file = file.strip_prefix("file://").unwrap_or(file);
                let path = base_dir.join(file);
                if !path.exists() {
                    return Err(Error::MissingMesh {
                        link: link.to_string(),
                        path,
                    });
                }
                let scale = parse_vec3(shape.attribute("scale"), [1.0; 3], &ctx)?;
                load_mesh(&path)?.scaled(scale)
            }
            "box" => {
                let size = parse_vec3(shape.attribute("size"), [0.0; 3], &ctx)?;
                TriangleMesh::cuboid(size * 0.5)
            }
            "cylinder" => TriangleMesh::cylinder(
                parse_f64(shape, "radius", &ctx)?,
                parse_f64(shape, "length", &ctx)?,
                24,
            ),
            "sphere" => TriangleMesh::icosphere(parse_f64(shape, "radius", &ctx)?, 2),
            other => return Err(Error::parse(&ctx, format!("unsupported geometry '{other}'"))),
        };
        mesh.merge(&part.transformed(&origin));
    }
    Ok(mesh)
}

/// Parse a URDF-subset robot file. Mesh paths resolve relative to the file.
pub fn load_robot(path: &Path) -> Result<RobotModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    parse_robot(&text, base_dir)
}

pub fn parse_robot(text: &str, base_dir: &Path) -> Result<RobotModel> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::parse("robot description", e))?;
    let root = doc.root_element();
    if !root.has_tag_name("robot") {
        return Err(Error::parse("robot description", "root element is not <robot>"));
    }
    let name = root.attribute("name").unwrap_or("robot").to_string();

    let mut link_nodes = Vec::new();
    let mut by_name = HashMap::new();
    for node in root.children().filter(|c| c.has_tag_name("link")) {
        let lname = node
            .attribute("name")
            .ok_or_else(|| Error::parse("robot description", "link without name"))?;
        by_name.insert(lname.to_string(), link_nodes.len());
        link_nodes.push(node);
    }

    struct RawJoint {
        joint: Joint,
        parent: usize,
        child: usize,
    }
    let mut raw = Vec::new();
    for node in root.children().filter(|c| c.has_tag_name("joint")) {
        let jname = node.attribute("name").unwrap_or("?").to_string();
        let ctx = format!("joint {jname}");
        let kind = match node.attribute("type") {
            Some("revolute") | Some("continuous") => JointKind::Revolute,
            Some("fixed") => JointKind::Fixed,
            other => {
                return Err(Error::parse(&ctx, format!("unsupported joint type {other:?}")));
            }
        };
        let link_ref = |tag: &str| -> Result<usize> {
            let n = child(node, tag)
                .and_then(|c| c.attribute("link"))
                .ok_or_else(|| Error::parse(&ctx, format!("missing <{tag} link=...>")))?;
            by_name
                .get(n)
                .copied()
                .ok_or_else(|| Error::parse(&ctx, format!("unknown link '{n}'")))
        };
        let parent = link_ref("parent")?;
        let childl = link_ref("child")?;
        let origin = parse_origin(child(node, "origin"), &ctx)?;
        let axis = parse_vec3(child(node, "axis").and_then(|a| a.attribute("xyz")), [1.0, 0.0, 0.0], &ctx)?;
        let axis = Unit::try_new(axis, 1e-12).ok_or_else(|| Error::parse(&ctx, "zero axis"))?;
        let (lower, upper) = match (kind, node.attribute("type"), child(node, "limit")) {
            (JointKind::Revolute, Some("continuous"), _) => (-std::f64::consts::PI * 4.0, std::f64::consts::PI * 4.0),
            (JointKind::Revolute, _, Some(lim)) => (parse_f64(lim, "lower", &ctx)?, parse_f64(lim, "upper", &ctx)?),
            (JointKind::Revolute, _, None) => return Err(Error::parse(&ctx, "revolute joint without <limit>")),
            _ => (0.0, 0.0),
        };
        raw.push(RawJoint {
            joint: Joint {
                name: jname,
                kind,
                axis,
                origin,
                lower,
                upper,
            },
            parent,
            child: childl,
        });
    }

    // serial chain check
    let n = link_nodes.len();
    let mut child_of: Vec<Option<usize>> = vec![None; n];
    let mut parent_count = vec![0usize; n];
    for (k, r) in raw.iter().enumerate() {
        if child_of[r.parent].is_some() {
            return Err(Error::NonSerialChain(
                link_nodes[r.parent].attribute("name").unwrap_or("?").to_string(),
            ));
        }
        child_of[r.parent] = Some(k);
        parent_count[r.child] += 1;
        if parent_count[r.child] > 1 {
            return Err(Error::NonSerialChain(
                link_nodes[r.child].attribute("name").unwrap_or("?").to_string(),
            ));
        }
    }
    let roots: Vec<usize> = (0..n).filter(|&i| parent_count[i] == 0).collect();
    if roots.len() != 1 {
        let lname = roots
            .get(1)
            .map(|&i| link_nodes[i].attribute("name").unwrap_or("?").to_string())
            .unwrap_or_else(|| "<cycle>".into());
        return Err(Error::NonSerialChain(lname));
    }

    let mut order = vec![roots[0]];
    let mut joints = Vec::new();
    while let Some(k) = child_of[*order.last().unwrap()] {
        joints.push(raw[k].joint.clone());
        order.push(raw[k].child);
        if order.len() > n {
            return Err(Error::NonSerialChain("<cycle>".into()));
        }
    }
    if order.len() != n {
        let missing = (0..n).find(|i| !order.contains(i)).unwrap();
        return Err(Error::NonSerialChain(
            link_nodes[missing].attribute("name").unwrap_or("?").to_string(),
        ));
    }

    let links = order
        .iter()
        .map(|&i| {
            let node = link_nodes[i];
            let lname = node.attribute("name").unwrap().to_string();
            let mesh = link_geometry(node, base_dir, &lname)?;
            let geometry_free = mesh.is_empty();
            Ok(Link {
                name: lname,
                mesh,
                geometry_free,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RobotModel::new(name, links, joints)
}
