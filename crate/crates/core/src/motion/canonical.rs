use super::{DyadicSample, MotionSequence, LEFT_HAND, RIGHT_HAND, ROOT};
use crate::error::{Error, Result};

/// Horizontal directions shorter than this count as no direction.
pub const FACING_EPS: f64 = 1e-6;

/// Facing of a person as a horizontal unit vector `(x, z)`.
///
/// Uses root displacement over the first half second, then the direction from
/// the root to the hands midpoint at frame 0. `None` when both are degenerate.
pub fn estimate_facing(seq: &MotionSequence) -> Option<(f64, f64)> {
    let unit = |dx: f64, dz: f64| {
        let n = dx.hypot(dz);
        (n >= FACING_EPS).then(|| (dx / n, dz / n))
    };
    if seq.len() >= 2 {
        let horizon = ((0.5 * seq.fps as f64).round() as usize).clamp(1, seq.len() - 1);
        let r0 = seq.joint(0, ROOT);
        let r1 = seq.joint(horizon, ROOT);
        if let Some(u) = unit(r1[0] - r0[0], r1[2] - r0[2]) {
            return Some(u);
        }
    }
    if seq.joints() > RIGHT_HAND {
        let (r, l, h) = (seq.joint(0, ROOT), seq.joint(0, LEFT_HAND), seq.joint(0, RIGHT_HAND));
        return unit(0.5 * (l[0] + h[0]) - r[0], 0.5 * (l[2] + h[2]) - r[2]);
    }
    None
}

/// Moves person a's first root to `x = z = 0` facing `+x`; person b follows
/// the same rigid transform.
pub fn canonicalize(sample: &DyadicSample) -> Result<DyadicSample> {
    if sample.len() < 2 {
        return Err(Error::invalid("canonicalize needs at least 2 frames"));
    }
    let origin = sample.a.joint(0, ROOT);
    let (c, s) = estimate_facing(&sample.a).unwrap_or((1.0, 0.0));
    let transform = |p: [f64; 3]| {
        let (x, z) = (p[0] - origin[0], p[2] - origin[2]);
        [c * x + s * z, p[1], c * z - s * x]
    };
    Ok(DyadicSample {
        a: sample.a.map_points(transform),
        b: sample.b.map_points(transform),
        ..sample.clone()
    })
}
