//! Toy dyadic motion: skeleton, canonical frame, synthetic corpus, prompts and files.
//!
//! Coordinates are meters with `y` up. Joint 0 is the root.

mod canonical;
mod generate;
mod io;
mod stats;
mod text;

pub use canonical::{canonicalize, estimate_facing, FACING_EPS};
pub use generate::{generate_dataset, InteractionTemplate, Template, TEMPLATES};
pub use io::{
    corpus_hash, decode_dym, encode_dym, read_corpus, read_manifest, read_motion, sidecar_path, write_corpus,
    write_motion, Corpus, ManifestRecord, DYM_MAGIC, DYM_VERSION, HEADER_BYTES, MANIFEST_FILE,
};
pub use stats::PoseStats;
pub use text::{TextEmbedding, TextEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const JOINTS: usize = 5;
pub const ROOT: usize = 0;
pub const LEFT_HAND: usize = 1;
pub const RIGHT_HAND: usize = 2;
pub const LEFT_FOOT: usize = 3;
pub const RIGHT_FOOT: usize = 4;
pub const JOINT_NAMES: [&str; JOINTS] = ["root", "left_hand", "right_hand", "left_foot", "right_foot"];
/// Bones as (parent, child); every limb hangs off the root.
pub const BONES: [(usize, usize); 4] = [
    (ROOT, LEFT_HAND),
    (ROOT, RIGHT_HAND),
    (ROOT, LEFT_FOOT),
    (ROOT, RIGHT_FOOT),
];
pub const ARM_LENGTH: f64 = 0.6;
pub const LEG_LENGTH: f64 = 0.9;
/// Per-frame width of a flattened pose.
pub const D_POSE: usize = 3 * JOINTS;

/// One person's motion, `L × J × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    positions: Tensor,
    pub fps: u32,
}

impl MotionSequence {
    pub fn new(positions: Tensor, fps: u32) -> Result<Self> {
        match positions.shape() {
            [_, _, 3] => {}
            other => {
                return Err(Error::shape(
                    "MotionSequence",
                    format!("expected L × J × 3, got {:?}", other),
                ))
            }
        }
        if fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(MotionSequence { positions, fps })
    }

    /// Builds a sequence from per-frame joint lists.
    pub fn from_frames(frames: &[Vec<[f64; 3]>], fps: u32) -> Result<Self> {
        let joints = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != joints) {
            return Err(Error::shape("MotionSequence", "frames have different joint counts"));
        }
        let data = frames.iter().flatten().flatten().copied().collect();
        Self::new(Tensor::new(&[frames.len(), joints, 3], data)?, fps)
    }

    /// Reads a flattened `L × 3J` pose matrix.
    pub fn from_pose(pose: &Tensor, fps: u32) -> Result<Self> {
        let (len, width) = pose.dims2()?;
        if width % 3 != 0 {
            return Err(Error::shape(
                "MotionSequence::from_pose",
                format!("width {width} is not a multiple of 3"),
            ));
        }
        Self::new(pose.reshape(&[len, width / 3, 3])?, fps)
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joints(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn joint(&self, frame: usize, j: usize) -> [f64; 3] {
        let k = (frame * self.joints() + j) * 3;
        let d = self.positions.data();
        [d[k], d[k + 1], d[k + 2]]
    }

    /// Flattened `L × 3J` pose matrix.
    pub fn to_pose(&self) -> Tensor {
        self.positions
            .reshape(&[self.len(), 3 * self.joints()])
            .expect("same element count")
    }

    /// Applies `f` to every joint position.
    pub fn map_points(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = self.positions.clone();
        for p in out.data_mut().chunks_exact_mut(3) {
            let q = f([p[0], p[1], p[2]]);
            p.copy_from_slice(&q);
        }
        MotionSequence {
            positions: out,
            fps: self.fps,
        }
    }

    /// Largest deviation of any bone length from its frame-0 value.
    pub fn bone_length_drift(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for &(p, c) in BONES.iter().filter(|(p, c)| *p < self.joints() && *c < self.joints()) {
            let len0 = dist(self.joint(0, p), self.joint(0, c));
            for f in 1..self.len() {
                worst = worst.max((dist(self.joint(f, p), self.joint(f, c)) - len0).abs());
            }
        }
        worst
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Two aligned sequences plus their descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicSample {
    pub id: String,
    pub a: MotionSequence,
    pub b: MotionSequence,
    pub texts: Vec<String>,
    pub template: String,
}

impl DyadicSample {
    pub fn new(id: impl Into<String>, a: MotionSequence, b: MotionSequence) -> Result<Self> {
        if a.positions.shape() != b.positions.shape() || a.fps != b.fps {
            return Err(Error::shape(
                "DyadicSample",
                format!(
                    "persons differ: {:?}@{} vs {:?}@{}",
                    a.positions.shape(),
                    a.fps,
                    b.positions.shape(),
                    b.fps
                ),
            ));
        }
        Ok(DyadicSample {
            id: id.into(),
            a,
            b,
            texts: Vec::new(),
            template: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fps(&self) -> u32 {
        self.a.fps
    }

    /// Rebuilds a sample from flattened pose matrices, as produced by a sampler.
    pub fn from_poses(id: impl Into<String>, xa: &Tensor, xb: &Tensor, fps: u32) -> Result<Self> {
        Self::new(
            id,
            MotionSequence::from_pose(xa, fps)?,
            MotionSequence::from_pose(xb, fps)?,
        )
    }

    pub fn swapped(&self) -> Self {
        DyadicSample {
            a: self.b.clone(),
            b: self.a.clone(),
            ..self.clone()
        }
    }
}
