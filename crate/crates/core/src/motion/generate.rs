use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::canonical::canonicalize;
use super::{DyadicSample, MotionSequence, ARM_LENGTH, JOINTS, LEG_LENGTH};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const ROOT_HEIGHT: f64 = 0.95;
const STRIDE: f64 = 0.7;

/// The interaction programs of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    ApproachHandshake,
    MirrorDance,
    CircleAround,
    PushRetreat,
}

/// A template with its name and text paraphrases.
#[derive(Clone, Copy, Debug)]
pub struct InteractionTemplate {
    pub kind: Template,
    pub name: &'static str,
    pub paraphrases: &'static [&'static str],
}

pub const TEMPLATES: [InteractionTemplate; 4] = [
    InteractionTemplate {
        kind: Template::ApproachHandshake,
        name: "approach-handshake",
        paraphrases: &[
            "two people walk toward each other and shake hands",
            "a person approaches another and they shake hands",
            "the two meet in the middle and greet with a handshake",
            "both walk forward and exchange a handshake",
        ],
    },
    InteractionTemplate {
        kind: Template::MirrorDance,
        name: "mirror-dance",
        paraphrases: &[
            "two people dance facing each other mirroring every move",
            "the pair sway side to side like a mirror",
            "one person copies the dance moves of the other",
            "they dance together in mirrored motion",
        ],
    },
    InteractionTemplate {
        kind: Template::CircleAround,
        name: "circle-around",
        paraphrases: &[
            "two people circle around each other",
            "the pair walk in a circle while facing each other",
            "both step sideways around a shared center",
            "they slowly orbit one another",
        ],
    },
    InteractionTemplate {
        kind: Template::PushRetreat,
        name: "push-retreat",
        paraphrases: &[
            "one person pushes the other who stumbles backward",
            "a person shoves their partner away",
            "someone walks up and pushes the other person back",
            "the first person pushes and the second retreats",
        ],
    },
];

/// Texts attached to every sample.
const TEXTS_PER_SAMPLE: usize = 3;

#[derive(Clone, Copy)]
struct Arm {
    /// 0 points the arm sideways, 1 straight ahead.
    reach: f64,
    /// Elevation in radians; negative hangs down.
    elevation: f64,
}

const ARM_REST: Arm = Arm {
    reach: 0.15,
    elevation: -1.3,
};

/// Per-frame body state in the scene frame.
#[derive(Clone, Copy)]
struct Body {
    x: f64,
    z: f64,
    heading: f64,
    left: Arm,
    right: Arm,
    /// Gait phase in radians, scaled by `gait`.
    phase: f64,
    gait: f64,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Body {
    fn joints(&self) -> Vec<[f64; 3]> {
        let root = [
            self.x,
            ROOT_HEIGHT + 0.02 * (2.0 * self.phase).cos() * self.gait,
            self.z,
        ];
        let fwd = [self.heading.cos(), 0.0, self.heading.sin()];
        // Left of a person facing `fwd` with y up.
        let left = [self.heading.sin(), 0.0, -self.heading.cos()];
        let limb = |side: f64, arm: Arm| {
            let (ce, se) = (arm.elevation.cos(), arm.elevation.sin());
            let (sr, cr) = ((arm.reach * FRAC_PI_2).sin(), (arm.reach * FRAC_PI_2).cos());
            let d = [
                ce * (sr * fwd[0] + side * cr * left[0]),
                se,
                ce * (sr * fwd[2] + side * cr * left[2]),
            ];
            [
                root[0] + ARM_LENGTH * d[0],
                root[1] + ARM_LENGTH * d[1],
                root[2] + ARM_LENGTH * d[2],
            ]
        };
        let foot = |side: f64| {
            let swing = 0.4 * self.gait * (self.phase + if side > 0.0 { 0.0 } else { PI }).sin();
            let d = unit([
                swing.sin() * fwd[0] + side * 0.15 * left[0],
                -swing.cos(),
                swing.sin() * fwd[2] + side * 0.15 * left[2],
            ]);
            [
                root[0] + LEG_LENGTH * d[0],
                root[1] + LEG_LENGTH * d[1],
                root[2] + LEG_LENGTH * d[2],
            ]
        };
        vec![
            root,
            limb(1.0, self.left),
            limb(-1.0, self.right),
            foot(1.0),
            foot(-1.0),
        ]
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Scene-frame bodies of both persons at progress `p ∈ [0, 1]` and time `tau` seconds.
type Program = Box<dyn Fn(f64, f64) -> (Body, Body) + Send + Sync>;

fn program(kind: Template, r: &mut Rng) -> Program {
    let still = |x: f64, z: f64, heading: f64| Body {
        x,
        z,
        heading,
        left: ARM_REST,
        right: ARM_REST,
        phase: 0.0,
        gait: 0.0,
    };
    match kind {
        Template::ApproachHandshake => {
            let d = r.gen_range(2.5..4.0);
            let stop = r.gen_range(0.8..1.0);
            let shake_hz = r.gen_range(2.0..3.5);
            Box::new(move |p, tau| {
                let walk = (d - stop) / 2.0 * smoothstep(p / 0.6);
                let moving = if p < 0.6 { 1.0 } else { 0.0 };
                let phase = TAU * walk / STRIDE;
                let reach = smoothstep((p - 0.5) / 0.2);
                let shake = Arm {
                    reach: 0.15 + 0.85 * reach,
                    elevation: -1.3 + (1.1 + 0.15 * (TAU * shake_hz * tau).sin()) * reach,
                };
                let mut a = still(-d / 2.0 + walk, 0.0, 0.0);
                let mut b = still(d / 2.0 - walk, 0.0, PI);
                for body in [&mut a, &mut b] {
                    body.phase = phase;
                    body.gait = moving;
                    body.right = shake;
                }
                (a, b)
            })
        }
        Template::MirrorDance => {
            let d = r.gen_range(1.2..1.8);
            let amp = r.gen_range(0.2..0.4);
            let hz = r.gen_range(0.4..0.8);
            let offset = r.gen_range(0.0..TAU);
            Box::new(move |_, tau| {
                let w = TAU * hz * tau + offset;
                let z = amp * w.sin();
                let raised = Arm {
                    reach: 0.3,
                    elevation: 0.3 + 0.6 * w.sin(),
                };
                let lowered = Arm {
                    reach: 0.3,
                    elevation: -0.6 - 0.4 * w.cos(),
                };
                let mut a = still(-d / 2.0, z, 0.0);
                let mut b = still(d / 2.0, z, PI);
                a.left = raised;
                a.right = lowered;
                // Facing each other, b's right side is on a's left.
                b.right = raised;
                b.left = lowered;
                a.phase = w;
                b.phase = w + PI;
                a.gait = 0.5;
                b.gait = 0.5;
                (a, b)
            })
        }
        Template::CircleAround => {
            let radius = r.gen_range(0.8..1.5);
            let omega = r.gen_range(0.6..1.2) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start = r.gen_range(0.0..TAU);
            Box::new(move |_, tau| {
                let ang = start + omega * tau;
                let phase = TAU * radius * omega.abs() * tau / STRIDE;
                let at = |a: f64, ph: f64| {
                    let (x, z) = (radius * a.cos(), radius * a.sin());
                    let mut body = still(x, z, (-z).atan2(-x));
                    body.phase = ph;
                    body.gait = 1.0;
                    let swing = 0.25 * ph.sin();
                    body.left = Arm {
                        reach: 0.3 + swing,
                        elevation: -1.2,
                    };
                    body.right = Arm {
                        reach: 0.3 - swing,
                        elevation: -1.2,
                    };
                    body
                };
                (at(ang, phase), at(ang + PI, phase + PI))
            })
        }
        Template::PushRetreat => {
            let d = r.gen_range(2.0..3.0);
            let contact = 0.7;
            let retreat = r.gen_range(0.8..1.5);
            Box::new(move |p, _| {
                let walk = (d - contact) * smoothstep(p / 0.4);
                let push = smoothstep((p - 0.35) / 0.1) * (1.0 - smoothstep((p - 0.6) / 0.2));
                let back = retreat * smoothstep((p - 0.45) / 0.35);
                let mut a = still(-d / 2.0 + walk, 0.0, 0.0);
                a.phase = TAU * walk / STRIDE;
                a.gait = if p < 0.4 { 1.0 } else { 0.0 };
                let hands = Arm {
                    reach: 0.15 + 0.85 * push,
                    elevation: -1.3 + 1.2 * push,
                };
                a.left = hands;
                a.right = hands;
                let mut b = still(d / 2.0 + back, 0.0, PI);
                b.phase = -TAU * back / STRIDE;
                b.gait = if (0.45..0.8).contains(&p) { 1.0 } else { 0.0 };
                let flail = Arm {
                    reach: 0.2,
                    elevation: -1.3 + 1.0 * smoothstep((p - 0.45) / 0.1) * (1.0 - smoothstep((p - 0.7) / 0.2)),
                };
                b.left = flail;
                b.right = flail;
                (a, b)
            })
        }
    }
}

fn render(body: &Body, yaw: f64, ox: f64, oz: f64) -> Vec<[f64; 3]> {
    let (c, s) = (yaw.cos(), yaw.sin());
    body.joints()
        .into_iter()
        .map(|p| [c * p[0] - s * p[2] + ox, p[1], s * p[0] + c * p[2] + oz])
        .collect()
}

fn generate_one(t: &InteractionTemplate, index: usize, len: usize, fps: u32, seed: u64) -> Result<DyadicSample> {
    let mut r = rng::indexed_stream(seed, "data", index as u64);
    let prog = program(t.kind, &mut r);
    let yaw = r.gen_range(0.0..TAU);
    let (ox, oz) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
    let mut fa = Vec::with_capacity(len);
    let mut fb = Vec::with_capacity(len);
    for i in 0..len {
        let p = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
        let (a, b) = prog(p, i as f64 / fps as f64);
        fa.push(render(&a, yaw, ox, oz));
        fb.push(render(&b, yaw, ox, oz));
    }
    debug_assert!(fa.iter().all(|f| f.len() == JOINTS));
    let mut sample = DyadicSample::new(
        format!("{:05}-{}", index, t.name),
        MotionSequence::from_frames(&fa, fps)?,
        MotionSequence::from_frames(&fb, fps)?,
    )?;
    let mut texts: Vec<&str> = t.paraphrases.to_vec();
    texts.shuffle(&mut r);
    sample.texts = texts.into_iter().take(TEXTS_PER_SAMPLE).map(str::to_string).collect();
    sample.template = t.name.to_string();
    canonicalize(&sample)
}

/// Deterministic synthetic corpus. Templates are used round-robin; every sample
/// is canonicalized and draws from its own stream `(seed, "data", index)`.
pub fn generate_dataset(
    templates: &[InteractionTemplate],
    n_samples: usize,
    len: usize,
    fps: u32,
    seed: u64,
) -> Result<Vec<DyadicSample>> {
    if templates.is_empty() {
        return Err(Error::invalid("generate_dataset needs at least one template"));
    }
    if len < 2 {
        return Err(Error::invalid("generated sequences need at least 2 frames"));
    }
    (0..n_samples)
        .into_par_iter()
        .map(|i| generate_one(&templates[i % templates.len()], i, len, fps, seed))
        .collect()
}
