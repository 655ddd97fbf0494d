use serde::{Deserialize, Serialize};

use super::DyadicSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest standard deviation used for normalization.
pub const MIN_STD: f64 = 1e-2;

/// Per-dimension pose statistics over a corpus, shared by both persons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PoseStats {
    /// Mean and standard deviation (floored at [`MIN_STD`]) over every frame of both persons.
    pub fn fit(samples: &[DyadicSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("no samples to fit statistics on"))?;
        let width = first.a.to_pose().shape()[1];
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0usize;
        for s in samples {
            for pose in [s.a.to_pose(), s.b.to_pose()] {
                if pose.shape()[1] != width {
                    return Err(Error::shape("PoseStats::fit", "samples have different joint counts"));
                }
                for row in pose.data().chunks_exact(width) {
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                    n += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Ok(PoseStats { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        PoseStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, pose: &Tensor) -> Result<usize> {
        let (_, w) = pose.dims2()?;
        if w != self.width() {
            return Err(Error::shape(
                "PoseStats",
                format!("pose width {w}, statistics width {}", self.width()),
            ));
        }
        Ok(w)
    }

    pub fn normalize(&self, pose: &Tensor) -> Result<Tensor> {
        let w = self.check(pose)?;
        let data = pose
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % w]) / self.std[i % w])
            .collect();
        Tensor::new(pose.shape(), data)
    }

    pub fn denormalize(&self, pose: &Tensor) -> Result<Tensor> {
        let w = self.check(pose)?;
        let data = pose
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % w] + self.mean[i % w])
            .collect();
        Tensor::new(pose.shape(), data)
    }
}
