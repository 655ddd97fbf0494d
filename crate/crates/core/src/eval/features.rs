use crate::error::{Error, Result};
use crate::motion::DyadicSample;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_D_FEAT: usize = 32;

/// Fixed random feature map for motion and text. Never trained, so feature
/// distances are only comparable under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub d_feat: usize,
    pub seed: u64,
    motion_proj: Vec<f64>,
    motion_in: usize,
    text_proj: Vec<f64>,
    text_in: usize,
}

/// Means and standard deviations of pose, velocity and a−b offset, per dimension.
pub fn motion_statistics(sample: &DyadicSample) -> Vec<f64> {
    let (pa, pb) = (sample.a.to_pose(), sample.b.to_pose());
    let (len, w) = pa.dims2().expect("pose matrix");
    let mut out = Vec::with_capacity(10 * w);
    let mut push_stats = |rows: &[Vec<f64>]| {
        let n = rows.len().max(1) as f64;
        for k in 0..w {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            out.push(mean);
            out.push(var.sqrt());
        }
    };
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks_exact(w).map(<[f64]>::to_vec).collect() };
    let vel = |t: &Tensor| -> Vec<Vec<f64>> {
        let r = rows(t);
        r.windows(2)
            .map(|p| p[1].iter().zip(&p[0]).map(|(x, y)| x - y).collect())
            .collect()
    };
    let (ra, rb) = (rows(&pa), rows(&pb));
    push_stats(&ra);
    push_stats(&rb);
    let (va, vb) = if len > 1 {
        (vel(&pa), vel(&pb))
    } else {
        (vec![vec![0.0; w]], vec![vec![0.0; w]])
    };
    push_stats(&va);
    push_stats(&vb);
    let rel: Vec<Vec<f64>> = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    push_stats(&rel);
    out
}

fn project(proj: &[f64], d_in: usize, x: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (d_in as f64).sqrt();
    proj.chunks_exact(d_in)
        .map(|row| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() * scale).tanh())
        .collect()
}

impl FeatureExtractor {
    pub fn new(d_feat: usize, pose_width: usize, d_text: usize, seed: u64) -> Self {
        let motion_in = 10 * pose_width;
        let mut rm = rng::stream(seed, "eval.features.motion");
        let mut rt = rng::stream(seed, "eval.features.text");
        FeatureExtractor {
            d_feat,
            seed,
            motion_proj: rng::normal_vec(&mut rm, d_feat * motion_in),
            motion_in,
            text_proj: rng::normal_vec(&mut rt, d_feat * d_text),
            text_in: d_text,
        }
    }

    pub fn motion(&self, sample: &DyadicSample) -> Result<Vec<f64>> {
        let stats = motion_statistics(sample);
        if stats.len() != self.motion_in {
            return Err(Error::shape(
                "FeatureExtractor::motion",
                format!(
                    "pose width gives {} statistics, expected {}",
                    stats.len(),
                    self.motion_in
                ),
            ));
        }
        let f = project(&self.motion_proj, self.motion_in, &stats);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion features"));
        }
        Ok(f)
    }

    pub fn text(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.text_in {
            return Err(Error::shape(
                "FeatureExtractor::text",
                format!("embedding width {}, expected {}", embedding.len(), self.text_in),
            ));
        }
        Ok(project(&self.text_proj, self.text_in, embedding))
    }
}
