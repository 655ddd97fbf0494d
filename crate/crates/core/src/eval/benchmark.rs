use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, DEFAULT_D_FEAT};
use super::metrics::{diversity, fid, mmodality, r_precision};
use super::ndms::{ndms_curve_dyadic, window_frames, ReferenceBank, DEFAULT_SUBSAMPLE};
use super::report::{EvalReport, HorizonResult, MetricSummary};
use crate::diffusion::X0Model;
use crate::error::{Error, Result};
use crate::motion::DyadicSample;
use crate::pipeline::Generator;
use crate::rng;
use crate::tensor::Tensor;

/// Evaluation settings. Counts are desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Horizons as multiples of the training length.
    pub multipliers: Vec<usize>,
    /// Generated samples scored with NDMS per horizon.
    pub samples_per_horizon: usize,
    /// Reference windows scored per generated window.
    pub ndms_subsample: usize,
    /// Generated samples for FID, Diversity and R-Precision.
    pub metric_samples: usize,
    pub d_feat: usize,
    pub fid_regularizer: f64,
    /// Requested pairs for Diversity, capped at the available pairs.
    pub diversity_pairs: usize,
    pub mmodality_prompts: usize,
    pub mmodality_k: usize,
    pub rprecision_pool: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            multipliers: vec![1, 2, 4],
            samples_per_horizon: 8,
            ndms_subsample: DEFAULT_SUBSAMPLE,
            metric_samples: 32,
            d_feat: DEFAULT_D_FEAT,
            fid_regularizer: 1e-6,
            diversity_pairs: 300,
            mmodality_prompts: 4,
            mmodality_k: 20,
            rprecision_pool: 32,
        }
    }
}

/// NDMS statistics of already generated samples at one horizon.
pub fn horizon_result(frames: usize, samples: &[DyadicSample], bank: &ReferenceBank) -> Result<HorizonResult> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let curves: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| ndms_curve_dyadic(s, bank))
        .collect::<Result<_>>()?;
    let len = curves[0].len();
    if curves.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("samples at one horizon must share a length"));
    }
    let curve: Vec<f64> = (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect();
    let means: Vec<f64> = curves.iter().map(|c| c.iter().sum::<f64>() / len as f64).collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
    Ok(HorizonResult {
        frames,
        curve,
        mean,
        std,
    })
}

/// Texts cycling through the corpus, one per generated sample.
fn prompts_from(corpus: &[DyadicSample], n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let s = &corpus[i % corpus.len()];
            let texts = &s.texts;
            if texts.is_empty() {
                String::new()
            } else {
                texts[(i / corpus.len()) % texts.len()].clone()
            }
        })
        .collect()
}

/// One prompt per distinct template, in corpus order.
fn distinct_prompts(corpus: &[DyadicSample], n: usize) -> Vec<String> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in corpus {
        if out.len() == n {
            break;
        }
        if let Some(t) = s.texts.first() {
            if seen.insert(s.template.clone(), ()).is_none() {
                out.push(t.clone());
            }
        }
    }
    out
}

/// Generation at each horizon scored with NDMS against `bank`.
pub fn longterm_benchmark<M: X0Model + ?Sized>(
    generator: &Generator<M>,
    prompts: &[String],
    train_len: usize,
    bank: &ReferenceBank,
    multipliers: &[usize],
    seed: u64,
) -> Result<Vec<HorizonResult>> {
    let texts: Vec<Option<Tensor>> = prompts.iter().map(|p| generator.embed(p)).collect();
    multipliers
        .iter()
        .map(|&m| {
            let frames = m * train_len;
            let samples = generator.sample_many(&texts, frames, seed)?;
            horizon_result(frames, &samples, bank)
        })
        .collect()
}

/// Mean NDMS at the longest horizon over the mean at the first.
pub fn flatness(horizons: &[HorizonResult]) -> Result<f64> {
    match (horizons.first(), horizons.last()) {
        (Some(first), Some(last)) if first.mean > 0.0 => Ok(last.mean / first.mean),
        (Some(_), Some(_)) => Err(Error::NonFinite("flatness over a zero baseline")),
        _ => Err(Error::invalid("no horizons")),
    }
}

/// Full evaluation: long-horizon NDMS plus the distribution metrics at the training length.
pub fn evaluate<M: X0Model + ?Sized>(
    generator: &Generator<M>,
    corpus: &[DyadicSample],
    train_len: usize,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation needs a reference corpus"));
    }
    let eval_seed = rng::substream_seed(seed, "eval");
    let window = window_frames(generator.fps);
    let bank = ReferenceBank::build(corpus, window, config.ndms_subsample, eval_seed)?;

    let gen_seed = rng::substream_seed(eval_seed, "generate");
    let metric_prompts = prompts_from(corpus, config.metric_samples.max(config.samples_per_horizon));
    let horizons = longterm_benchmark(
        generator,
        &metric_prompts[..config.samples_per_horizon],
        train_len,
        &bank,
        &config.multipliers,
        gen_seed,
    )?;

    let extractor = FeatureExtractor::new(
        config.d_feat,
        generator.model.pose_width(),
        generator.encoder.d_text,
        eval_seed,
    );
    let metric_texts: Vec<Option<Tensor>> = metric_prompts[..config.metric_samples]
        .iter()
        .map(|p| generator.embed(p))
        .collect();
    let generated = generator.sample_many(&metric_texts, train_len, gen_seed)?;
    let gen_feats: Vec<Vec<f64>> = generated.iter().map(|s| extractor.motion(s)).collect::<Result<_>>()?;
    let real_feats: Vec<Vec<f64>> = corpus.iter().map(|s| extractor.motion(s)).collect::<Result<_>>()?;
    let fid_value = fid(&real_feats, &gen_feats, config.fid_regularizer)?;

    let n = gen_feats.len();
    let diversity_pairs = config.diversity_pairs.min(n * (n - 1) / 2);
    let diversity_value = diversity(&gen_feats, diversity_pairs, eval_seed)?;

    let mm_prompts = distinct_prompts(corpus, config.mmodality_prompts);
    let mm_seed = rng::substream_seed(eval_seed, "mmodality");
    let mut groups = Vec::with_capacity(mm_prompts.len());
    for (p, prompt) in mm_prompts.iter().enumerate() {
        let texts = vec![generator.embed(prompt); config.mmodality_k];
        let samples = generator.sample_many(&texts, train_len, rng::substream_seed(mm_seed, &p.to_string()))?;
        groups.push(
            samples
                .iter()
                .map(|s| extractor.motion(s))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mmodality_value = mmodality(&groups, eval_seed)?;

    let text_feats: Vec<Vec<f64>> = metric_prompts[..config.metric_samples]
        .iter()
        .map(|p| extractor.text(&generator.encoder.encode(p).vector))
        .collect::<Result<_>>()?;
    let retrieval = r_precision(&text_feats, &gen_feats, config.rprecision_pool, eval_seed)?;

    let mut echo = BTreeMap::new();
    echo.insert("seed".into(), seed.to_string());
    echo.insert("train_len".into(), train_len.to_string());
    echo.insert("fps".into(), generator.fps.to_string());
    echo.insert("window".into(), window.to_string());
    echo.insert("ddim_steps".into(), generator.ddim_steps.to_string());
    echo.insert("guidance_w".into(), generator.guidance_w.to_string());
    echo.insert(
        "reference_windows".into(),
        format!("{}/{}", bank.windows.len(), bank.available),
    );
    echo.insert("samples_per_horizon".into(), config.samples_per_horizon.to_string());
    echo.insert("metric_samples".into(), config.metric_samples.to_string());
    echo.insert("mmodality_prompts".into(), groups.len().to_string());
    echo.insert("mmodality_k".into(), config.mmodality_k.to_string());
    echo.insert("rprecision_pool".into(), config.rprecision_pool.to_string());

    let flat = flatness(&horizons)?;
    Ok(EvalReport {
        config: echo,
        horizons,
        flatness: flat,
        metrics: Some(MetricSummary {
            fid: fid_value,
            diversity: diversity_value,
            diversity_pairs,
            mmodality: mmodality_value,
            r_precision: retrieval,
        }),
    })
}
