//! Canonical 16-joint skeleton layout.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of joints in the canonical layout.
pub const NUM_JOINTS: usize = 16;

/// A named group of joints (torso or one limb).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub joints: Vec<usize>,
}

/// Joint names, bone tree, five-part partition, the upper-body jitter set and
/// the left/right pairing used by spatial flipping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointTopology {
    pub joint_names: Vec<String>,
    /// (parent, child) pairs forming a tree rooted at joint 0.
    pub edges: Vec<(usize, usize)>,
    pub parts: Vec<BodyPart>,
    /// Shoulders, elbows and hands.
    pub upper_jitter_set: Vec<usize>,
    /// (left, right) joint pairs; torso joints are self-paired and omitted.
    pub left_right_pairs: Vec<(usize, usize)>,
}

pub mod joints {
    pub const ROOT: usize = 0;
    pub const SPINE: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const L_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const L_HAND: usize = 6;
    pub const R_SHOULDER: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const R_HAND: usize = 9;
    pub const L_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const L_FOOT: usize = 12;
    pub const R_HIP: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const R_FOOT: usize = 15;
}

impl JointTopology {
    /// The canonical layout: root, spine, neck, head, then left/right arm and
    /// leg chains. The torso is {root, spine, neck, head}; each limb has three
    /// joints.
    pub fn canonical16() -> Self {
        use joints::*;
        let names = [
            "root",
            "spine",
            "neck",
            "head",
            "l_shoulder",
            "l_elbow",
            "l_hand",
            "r_shoulder",
            "r_elbow",
            "r_hand",
            "l_hip",
            "l_knee",
            "l_foot",
            "r_hip",
            "r_knee",
            "r_foot",
        ];
        JointTopology {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            edges: vec![
                (ROOT, SPINE),
                (SPINE, NECK),
                (NECK, HEAD),
                (NECK, L_SHOULDER),
                (L_SHOULDER, L_ELBOW),
                (L_ELBOW, L_HAND),
                (NECK, R_SHOULDER),
                (R_SHOULDER, R_ELBOW),
                (R_ELBOW, R_HAND),
                (ROOT, L_HIP),
                (L_HIP, L_KNEE),
                (L_KNEE, L_FOOT),
                (ROOT, R_HIP),
                (R_HIP, R_KNEE),
                (R_KNEE, R_FOOT),
            ],
            parts: vec![
                BodyPart {
                    name: "torso".into(),
                    joints: vec![ROOT, SPINE, NECK, HEAD],
                },
                BodyPart {
                    name: "left_arm".into(),
                    joints: vec![L_SHOULDER, L_ELBOW, L_HAND],
                },
                BodyPart {
                    name: "right_arm".into(),
                    joints: vec![R_SHOULDER, R_ELBOW, R_HAND],
                },
                BodyPart {
                    name: "left_leg".into(),
                    joints: vec![L_HIP, L_KNEE, L_FOOT],
                },
                BodyPart {
                    name: "right_leg".into(),
                    joints: vec![R_HIP, R_KNEE, R_FOOT],
                },
            ],
            upper_jitter_set: vec![L_SHOULDER, L_ELBOW, L_HAND, R_SHOULDER, R_ELBOW, R_HAND],
            left_right_pairs: vec![
                (L_SHOULDER, R_SHOULDER),
                (L_ELBOW, R_ELBOW),
                (L_HAND, R_HAND),
                (L_HIP, R_HIP),
                (L_KNEE, R_KNEE),
                (L_FOOT, R_FOOT),
            ],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Parent of each joint; the root maps to itself.
    pub fn parents(&self) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.num_joints()).collect();
        for &(parent, child) in &self.edges {
            p[child] = parent;
        }
        p
    }

    /// Hop distance from the root along the tree.
    pub fn depths(&self) -> Vec<usize> {
        let parents = self.parents();
        let n = self.num_joints();
        let mut depth = vec![0usize; n];
        for j in 0..n {
            let mut d = 0;
            let mut cur = j;
            while parents[cur] != cur {
                cur = parents[cur];
                d += 1;
                assert!(d <= n, "parent chain does not terminate");
            }
            depth[j] = d;
        }
        depth
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        if n != NUM_JOINTS {
            return Err(Error::InvalidTopology(format!(
                "expected {NUM_JOINTS} joints, found {n}"
            )));
        }
        if self.edges.len() != NUM_JOINTS - 1 {
            return Err(Error::InvalidTopology(format!(
                "expected {} edges, found {}",
                NUM_JOINTS - 1,
                self.edges.len()
            )));
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a},{b}) out of range"
                )));
            }
        }
        // Connectivity: n-1 edges form a tree iff every non-root joint has
        // exactly one parent and all chains reach the root.
        let mut child_seen = vec![false; n];
        for &(_, c) in &self.edges {
            if child_seen[c] {
                return Err(Error::InvalidTopology(format!("joint {c} has two parents")));
            }
            child_seen[c] = true;
        }
        self.depths(); // panics only on cycles; unreachable joints caught below
        let roots = (0..n).filter(|&j| !child_seen[j]).count();
        if roots != 1 {
            return Err(Error::InvalidTopology(format!(
                "expected a single root, found {roots}"
            )));
        }

        if self.parts.len() != 5 {
            return Err(Error::InvalidTopology(format!(
                "expected 5 parts, found {}",
                self.parts.len()
            )));
        }
        let mut covered = vec![false; n];
        for part in &self.parts {
            for &j in &part.joints {
                if j >= n {
                    return Err(Error::InvalidTopology(format!(
                        "part {} references joint {j} out of range",
                        part.name
                    )));
                }
                if covered[j] {
                    return Err(Error::InvalidTopology(format!(
                        "joint {j} appears in two parts"
                    )));
                }
                covered[j] = true;
            }
        }
        if covered.iter().any(|&c| !c) {
            return Err(Error::InvalidTopology(
                "parts do not cover all joints".into(),
            ));
        }

        if self.upper_jitter_set.len() != 6 {
            return Err(Error::InvalidTopology(format!(
                "upper jitter set must have 6 joints, found {}",
                self.upper_jitter_set.len()
            )));
        }
        let arm_joints: Vec<usize> = self
            .parts
            .iter()
            .filter(|p| p.name.contains("arm"))
            .flat_map(|p| p.joints.iter().copied())
            .collect();
        for &j in &self.upper_jitter_set {
            if !arm_joints.contains(&j) {
                return Err(Error::InvalidTopology(format!(
                    "jitter joint {j} is not an arm joint"
                )));
            }
        }

        for &(l, r) in &self.left_right_pairs {
            if l >= n || r >= n || l == r {
                return Err(Error::InvalidTopology(format!(
                    "bad left/right pair ({l},{r})"
                )));
            }
        }
        Ok(())
    }
}
