use rand::seq::index;

use crate::error::{Error, Result};
use crate::motion::{DyadicSample, MotionSequence};
use crate::rng;

/// Motion norms below this count as static.
pub const STATIC_EPS: f64 = 1e-8;
/// Default number of reference windows scored per generated window.
pub const DEFAULT_SUBSAMPLE: usize = 512;

/// Window length for a frame rate: a third of a second, at least 2 frames.
pub fn window_frames(fps: u32) -> usize {
    ((fps as f64 / 3.0).round() as usize).max(2)
}

/// Per-joint motion vectors of one window: for each joint, the concatenated
/// frame-to-frame displacements inside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWindow {
    pub joints: usize,
    /// `joints × 3(w − 1)`, joint-major.
    pub vectors: Vec<f64>,
}

impl MotionWindow {
    pub fn extract(seq: &MotionSequence, start: usize, window: usize) -> Result<Self> {
        if window < 2 || start + window > seq.len() {
            return Err(Error::invalid(format!(
                "window {window} at {start} does not fit {} frames",
                seq.len()
            )));
        }
        let j = seq.joints();
        let mut vectors = Vec::with_capacity(j * 3 * (window - 1));
        for joint in 0..j {
            for f in start..start + window - 1 {
                let (p, q) = (seq.joint(f, joint), seq.joint(f + 1, joint));
                vectors.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
            }
        }
        Ok(MotionWindow { joints: j, vectors })
    }

    fn joint(&self, j: usize) -> &[f64] {
        let w = self.vectors.len() / self.joints;
        &self.vectors[j * w..(j + 1) * w]
    }
}

/// Direction × magnitude-ratio similarity of two windows, averaged over joints.
pub fn ndms_frame(generated: &MotionWindow, reference: &MotionWindow) -> Result<f64> {
    if generated.joints != reference.joints || generated.vectors.len() != reference.vectors.len() {
        return Err(Error::shape(
            "ndms_frame",
            format!(
                "{} joints × {} vs {} joints × {}",
                generated.joints,
                generated.vectors.len(),
                reference.joints,
                reference.vectors.len()
            ),
        ));
    }
    let mut total = 0.0;
    for j in 0..generated.joints {
        let (g, r) = (generated.joint(j), reference.joint(j));
        let (sg, sr) = (
            g.iter().map(|v| v * v).sum::<f64>(),
            r.iter().map(|v| v * v).sum::<f64>(),
        );
        let (ng, nr) = (sg.sqrt(), sr.sqrt());
        let (gs, rs) = (ng < STATIC_EPS, nr < STATIC_EPS);
        let dir = match (gs, rs) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => (g.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (sg * sr).sqrt()).clamp(0.0, 1.0),
        };
        let mag = ng.min(nr) / ng.max(nr).max(STATIC_EPS);
        // Two static joints are a perfect match.
        let mag = if gs && rs { 1.0 } else { mag };
        total += dir * mag;
    }
    Ok(total / generated.joints as f64)
}

/// Reference windows drawn from a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBank {
    pub window: usize,
    pub windows: Vec<MotionWindow>,
    /// Windows in the corpus before subsampling.
    pub available: usize,
}

impl ReferenceBank {
    /// Every window of both persons of every sample, then a seeded subsample of
    /// at most `subsample` of them (all of them when the corpus is smaller).
    pub fn build(corpus: &[DyadicSample], window: usize, subsample: usize, seed: u64) -> Result<Self> {
        let mut all = Vec::new();
        for s in corpus {
            for seq in [&s.a, &s.b] {
                for start in 0..(seq.len() + 1).saturating_sub(window) {
                    all.push(MotionWindow::extract(seq, start, window)?);
                }
            }
        }
        if all.is_empty() {
            return Err(Error::invalid("reference corpus has no windows"));
        }
        let available = all.len();
        let windows = if available <= subsample {
            all
        } else {
            let mut r = rng::stream(seed, "eval.ndms");
            let mut picks = index::sample(&mut r, available, subsample).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| all[i].clone()).collect()
        };
        Ok(ReferenceBank {
            window,
            windows,
            available,
        })
    }

    fn best(&self, w: &MotionWindow) -> Result<f64> {
        let mut best: f64 = 0.0;
        for r in &self.windows {
            best = best.max(ndms_frame(w, r)?);
        }
        Ok(best)
    }
}

/// Best-match score for every window position, `L − w + 1` values.
pub fn ndms_curve(seq: &MotionSequence, bank: &ReferenceBank) -> Result<Vec<f64>> {
    if seq.len() < bank.window {
        return Err(Error::invalid(format!(
            "sequence of {} frames is shorter than the {}-frame window",
            seq.len(),
            bank.window
        )));
    }
    (0..=seq.len() - bank.window)
        .map(|start| bank.best(&MotionWindow::extract(seq, start, bank.window)?))
        .collect()
}

/// Per-frame curve averaged over both persons.
pub fn ndms_curve_dyadic(sample: &DyadicSample, bank: &ReferenceBank) -> Result<Vec<f64>> {
    let a = ndms_curve(&sample.a, bank)?;
    let b = ndms_curve(&sample.b, bank)?;
    Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
}
