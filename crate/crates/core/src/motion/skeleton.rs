//! Joint hierarchy, forward kinematics and body surface samples.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::{v3, ExpMap, UnitQuaternion, Vec3};

/// Capsule in body-local coordinates: segment `a`–`b` swept by `radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    /// `n` points spread evenly over the capsule surface.
    ///
    /// Surface area is linear in the axial coordinate for both the caps and
    /// the cylinder, so evenly spaced axial values combined with golden-angle
    /// azimuths give a Fibonacci lattice over the whole capsule.
    pub fn fibonacci_samples(&self, n: usize) -> Vec<[f64; 3]> {
        let a = v3(self.a);
        let b = v3(self.b);
        let r = self.radius;
        let seg = b - a;
        let h = seg.norm();
        let axis = if h > 1e-12 { seg / h } else { Vec3::z() };
        let helper = if axis.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let total = 2.0 * r + h;
        (0..n)
            .map(|i| {
                let s = (i as f64 + 0.5) / n as f64 * total;
                let (along, radial) = if s < r {
                    let d = s - r;
                    (d, (r * r - d * d).max(0.0).sqrt())
                } else if s <= r + h {
                    (s - r, r)
                } else {
                    let d = s - r - h;
                    (h + d, (r * r - d * d).max(0.0).sqrt())
                };
                let phi = golden * i as f64;
                let p = a + axis * along + (u * phi.cos() + w * phi.sin()) * radial;
                [p.x, p.y, p.z]
            })
            .collect()
    }
}

/// Per-joint data of the on-disk skeleton tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointNode {
    pub name: String,
    pub offset: [f64; 3],
    #[serde(default)]
    pub shape: Option<Capsule>,
    #[serde(default)]
    pub samples: usize,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub children: Vec<JointNode>,
}

fn one() -> f64 {
    1.0
}

/// Skeleton file: a joint tree plus named key bodies and feet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub id: String,
    pub roots: Vec<JointNode>,
    pub key_bodies: Vec<String>,
    pub foot_joints: Vec<String>,
}

/// Flattened joint hierarchy.
///
/// Joints with parent `-1` hang off the root transform (`root_pos`, `root_rot`).
/// Every joint carries the body attached to it; body `j` moves with joint `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub id: String,
    pub names: Vec<String>,
    pub parent: Vec<i32>,
    pub offset: Vec<[f64; 3]>,
    pub shapes: Vec<Option<Capsule>>,
    pub surface_samples: Vec<Vec<[f64; 3]>>,
    pub key_bodies: Vec<usize>,
    pub foot_joints: Vec<usize>,
    pub joint_weights: Vec<f64>,
    order: Vec<usize>,
}

/// World-space joint transforms for one frame.
#[derive(Debug, Clone)]
pub struct Pose {
    pub pos: Vec<Vec3>,
    pub rot: Vec<Matrix3<f64>>,
}

impl Skeleton {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        names: Vec<String>,
        parent: Vec<i32>,
        offset: Vec<[f64; 3]>,
        shapes: Vec<Option<Capsule>>,
        sample_counts: Vec<usize>,
        key_bodies: Vec<usize>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let j = parent.len();
        if names.len() != j || offset.len() != j || shapes.len() != j || sample_counts.len() != j {
            return Err(Error::InvalidSkeleton(
                "per-joint arrays differ in length".into(),
            ));
        }
        if j == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        for (i, &p) in parent.iter().enumerate() {
            if p < -1 || p >= j as i32 || p == i as i32 {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {i} has bad parent {p}"
                )));
            }
        }
        let order = topo_order(&parent)?;
        if let Some(&bad) = key_bodies.iter().chain(&foot_joints).find(|&&k| k >= j) {
            return Err(Error::InvalidSkeleton(format!(
                "joint index {bad} out of range"
            )));
        }
        let surface_samples = shapes
            .iter()
            .zip(&sample_counts)
            .map(|(s, &n)| s.map(|c| c.fibonacci_samples(n)).unwrap_or_default())
            .collect();
        Ok(Self {
            id: id.into(),
            names,
            parent,
            offset,
            shapes,
            surface_samples,
            key_bodies,
            foot_joints,
            joint_weights: vec![1.0; j],
            order,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    pub fn num_surface_points(&self) -> usize {
        self.surface_samples.iter().map(Vec::len).sum()
    }

    /// Joints in an order where every parent precedes its children.
    pub fn eval_order(&self) -> &[usize] {
        &self.order
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == j as i32)
            .map(|(c, _)| c)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// World joint positions and rotations.
    pub fn pose(&self, root_pos: [f64; 3], root_rot: &ExpMap, joint_rot: &[ExpMap]) -> Pose {
        let j = self.num_joints();
        let root_r = root_rot.to_quat().to_matrix();
        let root_p = v3(root_pos);
        let mut pos = vec![Vec3::zeros(); j];
        let mut rot = vec![Matrix3::identity(); j];
        for &i in &self.order {
            let (pp, pr) = match self.parent[i] {
                -1 => (root_p, root_r),
                p => (pos[p as usize], rot[p as usize]),
            };
            pos[i] = pp + pr * v3(self.offset[i]);
            rot[i] = pr * UnitQuaternion::from_exp_map(joint_rot[i].vec()).to_matrix();
        }
        Pose { pos, rot }
    }

    pub fn forward_kinematics(
        &self,
        root_pos: [f64; 3],
        root_rot: &ExpMap,
        joint_rot: &[ExpMap],
    ) -> Vec<[f64; 3]> {
        self.pose(root_pos, root_rot, joint_rot)
            .pos
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    /// Loads the nested skeleton file format.
    pub fn from_file_repr(file: &SkeletonFile) -> Result<Self> {
        let mut names = Vec::new();
        let mut parent = Vec::new();
        let mut offset = Vec::new();
        let mut shapes = Vec::new();
        let mut counts = Vec::new();
        let mut weights = Vec::new();
        fn walk(
            node: &JointNode,
            par: i32,
            out: &mut (
                &mut Vec<String>,
                &mut Vec<i32>,
                &mut Vec<[f64; 3]>,
                &mut Vec<Option<Capsule>>,
                &mut Vec<usize>,
                &mut Vec<f64>,
            ),
        ) {
            let idx = out.0.len() as i32;
            out.0.push(node.name.clone());
            out.1.push(par);
            out.2.push(node.offset);
            out.3.push(node.shape);
            out.4.push(node.samples);
            out.5.push(node.weight);
            for c in &node.children {
                walk(c, idx, out);
            }
        }
        let mut acc = (
            &mut names,
            &mut parent,
            &mut offset,
            &mut shapes,
            &mut counts,
            &mut weights,
        );
        for r in &file.roots {
            walk(r, -1, &mut acc);
        }
        let lookup = |list: &[String]| -> Result<Vec<usize>> {
            list.iter()
                .map(|n| {
                    names
                        .iter()
                        .position(|m| m == n)
                        .ok_or_else(|| Error::InvalidSkeleton(format!("unknown joint {n}")))
                })
                .collect()
        };
        let key = lookup(&file.key_bodies)?;
        let feet = lookup(&file.foot_joints)?;
        let mut sk = Self::new(
            file.id.clone(),
            names.clone(),
            parent,
            offset,
            shapes,
            counts,
            key,
            feet,
        )?;
        sk.joint_weights = weights;
        Ok(sk)
    }

    pub fn to_file_repr(&self) -> SkeletonFile {
        fn node(sk: &Skeleton, j: usize) -> JointNode {
            JointNode {
                name: sk.names[j].clone(),
                offset: sk.offset[j],
                shape: sk.shapes[j],
                samples: sk.surface_samples[j].len(),
                weight: sk.joint_weights[j],
                children: sk.children(j).map(|c| node(sk, c)).collect(),
            }
        }
        let roots = (0..self.num_joints())
            .filter(|&j| self.parent[j] == -1)
            .map(|j| node(self, j))
            .collect();
        SkeletonFile {
            id: self.id.clone(),
            roots,
            key_bodies: self
                .key_bodies
                .iter()
                .map(|&k| self.names[k].clone())
                .collect(),
            foot_joints: self
                .foot_joints
                .iter()
                .map(|&k| self.names[k].clone())
                .collect(),
        }
    }

    /// 15-joint reference humanoid, z-up and facing +x, standing with the
    /// soles at `z = 0` when `root_pos.z == REFERENCE_STAND_HEIGHT`.
    pub fn reference_humanoid() -> Self {
        Self::reference_humanoid_with_samples(32)
    }

    pub fn reference_humanoid_with_samples(samples: usize) -> Self {
        let cap = |a: [f64; 3], b: [f64; 3], radius: f64| Some(Capsule { a, b, radius });
        let mut names = vec!["pelvis", "spine", "head"];
        let mut parent = vec![-1, 0, 1];
        let mut offset = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.1], [0.0, 0.0, 0.4]];
        let mut shapes = vec![
            cap([0.0, -0.09, 0.0], [0.0, 0.09, 0.0], 0.1),
            cap([0.0, 0.0, 0.05], [0.0, 0.0, 0.3], 0.12),
            cap([0.0, 0.0, 0.07], [0.0, 0.0, 0.17], 0.1),
        ];
        for (side, y) in [("left", 1.0), ("right", -1.0)] {
            let s = names.len() as i32;
            names.extend(
                match side {
                    "left" => ["left_shoulder", "left_elbow", "left_wrist"],
                    _ => ["right_shoulder", "right_elbow", "right_wrist"],
                }
                .iter(),
            );
            parent.extend([1, s, s + 1]);
            offset.extend([[0.0, 0.2 * y, 0.32], [0.0, 0.0, -0.28], [0.0, 0.0, -0.26]]);
            shapes.extend([
                cap([0.0, 0.0, -0.03], [0.0, 0.0, -0.24], 0.05),
                cap([0.0, 0.0, -0.03], [0.0, 0.0, -0.22], 0.04),
                cap([0.0, 0.0, -0.03], [0.0, 0.0, -0.1], 0.04),
            ]);
        }
        for (side, y) in [("left", 1.0), ("right", -1.0)] {
            let s = names.len() as i32;
            names.extend(
                match side {
                    "left" => ["left_hip", "left_knee", "left_ankle"],
                    _ => ["right_hip", "right_knee", "right_ankle"],
                }
                .iter(),
            );
            parent.extend([0, s, s + 1]);
            offset.extend([[0.0, 0.1 * y, -0.05], [0.0, 0.0, -0.42], [0.0, 0.0, -0.42]]);
            shapes.extend([
                cap([0.0, 0.0, -0.05], [0.0, 0.0, -0.36], 0.07),
                cap([0.0, 0.0, -0.04], [0.0, 0.0, -0.36], 0.05),
                cap([-0.04, 0.0, -0.05], [0.14, 0.0, -0.05], 0.03),
            ]);
        }
        let names: Vec<String> = names.into_iter().map(String::from).collect();
        let n = names.len();
        let idx = |s: &str| names.iter().position(|m| m == s).unwrap();
        let key = ["left_wrist", "right_wrist", "left_ankle", "right_ankle"]
            .map(idx)
            .to_vec();
        let feet = ["left_ankle", "right_ankle"].map(idx).to_vec();
        Self::new(
            "reference_humanoid",
            names,
            parent,
            offset,
            shapes,
            vec![samples; n],
            key,
            feet,
        )
        .expect("reference skeleton is well formed")
    }
}

/// Root height that puts the reference humanoid's soles on `z = 0` in its rest pose.
pub const REFERENCE_STAND_HEIGHT: f64 = 0.97;

fn topo_order(parent: &[i32]) -> Result<Vec<usize>> {
    let n = parent.len();
    let mut depth = vec![usize::MAX; n];
    for start in 0..n {
        let mut chain = Vec::new();
        let mut cur = start as i32;
        while cur != -1 && depth[cur as usize] == usize::MAX {
            if chain.len() > n {
                return Err(Error::InvalidSkeleton("cyclic parent array".into()));
            }
            chain.push(cur as usize);
            cur = parent[cur as usize];
        }
        let mut d = if cur == -1 {
            0
        } else {
            depth[cur as usize] + 1
        };
        for &c in chain.iter().rev() {
            depth[c] = d;
            d += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (depth[i], i));
    Ok(order)
}
