use dymamba::denoiser::{DenoiserConfig, DenoiserParams};
use dymamba::diffusion::NoiseSchedule;
use dymamba::eval::*;
use dymamba::motion::*;
use dymamba::pipeline::Generator;
use dymamba::rng;

fn window(vectors: Vec<f64>, joints: usize) -> MotionWindow {
    MotionWindow { joints, vectors }
}

#[test]
fn ndms_frame_closed_forms() {
    let g = window(vec![1.0, 2.0, 0.5, 0.0, -1.0, 3.0], 2);
    assert_eq!(ndms_frame(&g, &g).unwrap(), 1.0);
    let opposite = window(g.vectors.iter().map(|v| -v).collect(), 2);
    assert_eq!(ndms_frame(&g, &opposite).unwrap(), 0.0);
    let half = window(g.vectors.iter().map(|v| 0.5 * v).collect(), 2);
    assert!((ndms_frame(&g, &half).unwrap() - 0.5).abs() < 1e-15);
    // Joint 0 static in both, joint 1 static in one only.
    let a = window(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2);
    let b = window(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2);
    assert_eq!(ndms_frame(&a, &b).unwrap(), 0.5);
    // Orthogonal directions.
    let x = window(vec![1.0, 0.0, 0.0], 1);
    let y = window(vec![0.0, 2.0, 0.0], 1);
    assert_eq!(ndms_frame(&x, &y).unwrap(), 0.0);
    // 60 degrees apart, magnitudes 1 and 2: cos = 0.5, ratio = 0.5.
    let z = window(vec![1.0, 3f64.sqrt(), 0.0], 1);
    assert!((ndms_frame(&x, &z).unwrap() - 0.25).abs() < 1e-15);
    assert!(ndms_frame(&x, &g).is_err());
}

#[test]
fn window_lengths_and_curve_lengths() {
    assert_eq!(window_frames(10), 3);
    assert_eq!(window_frames(30), 10);
    assert_eq!(window_frames(3), 2);
    let corpus = generate_dataset(&TEMPLATES, 4, 40, 10, 0).unwrap();
    let bank = ReferenceBank::build(&corpus, 3, DEFAULT_SUBSAMPLE, 0).unwrap();
    assert_eq!(ndms_curve(&corpus[0].a, &bank).unwrap().len(), 38);
    let short = generate_dataset(&TEMPLATES, 1, 2, 10, 0).unwrap();
    assert!(ndms_curve(&short[0].a, &bank).is_err());
    assert!(ReferenceBank::build(&[], 3, 10, 0).is_err());
}

#[test]
fn self_reference_scores_one_and_static_scores_zero() {
    let corpus = generate_dataset(&TEMPLATES, 3, 30, 10, 1).unwrap();
    let bank = ReferenceBank::build(&corpus, 3, 10_000, 0).unwrap();
    assert_eq!(bank.windows.len(), bank.available);
    for s in &corpus {
        let curve = ndms_curve_dyadic(s, &bank).unwrap();
        assert!(curve.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{curve:?}");
    }
    // Every reference window moves at least one joint, so a frozen pose scores 0 per window
    // on those joints; a person with all joints frozen against moving joints gets exactly 0.
    let moving: Vec<DyadicSample> = corpus
        .iter()
        .filter(|s| s.template == "circle-around")
        .cloned()
        .collect();
    let bank = ReferenceBank::build(&moving, 3, 10_000, 0).unwrap();
    let frame = vec![[0.0, 1.0, 0.0]; JOINTS];
    let frozen = MotionSequence::from_frames(&vec![frame; 10], 10).unwrap();
    let curve = ndms_curve(&frozen, &bank).unwrap();
    assert!(curve.iter().all(|&v| v < 0.05), "{curve:?}");
}

#[test]
fn reference_subsample_is_seeded() {
    let corpus = generate_dataset(&TEMPLATES, 20, 40, 10, 2).unwrap();
    let a = ReferenceBank::build(&corpus, 3, 100, 5).unwrap();
    let b = ReferenceBank::build(&corpus, 3, 100, 5).unwrap();
    let c = ReferenceBank::build(&corpus, 3, 100, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.windows.len(), 100);
    assert_eq!(a.available, 20 * 2 * 38);
}

fn gaussian(n: usize, d: usize, shift: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "eval-test");
    (0..n)
        .map(|_| (0..d).map(|k| rng::normal(&mut r) + shift[k]).collect())
        .collect()
}

#[test]
fn fid_oracles() {
    let d = 8;
    let x = gaussian(2000, d, &[0.0; 8], 1);
    assert!(fid(&x, &x, 0.0).unwrap() < 1e-6);
    let m = [1.0, -1.0, 0.5, 0.5, 1.0, 0.0, -0.5, 0.5];
    let norm2: f64 = m.iter().map(|v| v * v).sum();
    let y = gaussian(2000, d, &m, 2);
    let f = fid(&x, &y, 0.0).unwrap();
    assert!((f / norm2 - 1.0).abs() < 0.1, "{f} vs {norm2}");
    assert!((fid(&y, &x, 0.0).unwrap() - f).abs() < 1e-9);

    let few = gaussian(5, d, &[0.0; 8], 3);
    assert!(fid(&few, &x, 0.0).is_err());
    assert!(fid(&few, &x, 1e-6).unwrap().is_finite());
    assert!(fid(&x, &gaussian(10, 4, &[0.0; 4], 4), 1e-6).is_err());
}

#[test]
fn diversity_matches_brute_force() {
    // Two clusters of five points each at distance D.
    let dd = 3.0;
    let pts: Vec<Vec<f64>> = (0..10)
        .map(|i| vec![if i < 5 { 0.0 } else { dd }, 0.1 * i as f64])
        .collect();
    let mut sum = 0.0;
    for i in 0..10 {
        for j in i + 1..10 {
            sum += ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
        }
    }
    assert_eq!(diversity(&pts, 45, 0).unwrap(), sum / 45.0);
    assert!(diversity(&pts, 46, 0).is_err());
    let sampled = diversity(&pts, 20, 9).unwrap();
    assert_eq!(sampled, diversity(&pts, 20, 9).unwrap());
    assert!(sampled > 0.0 && sampled < 3.0 + 1.0);

    let same = vec![vec![1.0, 2.0]; 6];
    assert_eq!(diversity(&same, 15, 0).unwrap(), 0.0);
    assert_eq!(mmodality(std::slice::from_ref(&same), 0).unwrap(), 0.0);
}

#[test]
fn mmodality_single_pair() {
    let group = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
    assert_eq!(mmodality(&[group], 1).unwrap(), 5.0);
    assert!(mmodality(&[vec![vec![1.0]]], 0).is_err());
    assert!(mmodality(&[], 0).is_err());
}

#[test]
fn r_precision_oracles() {
    let feats = gaussian(64, 6, &[0.0; 6], 7);
    assert_eq!(r_precision(&feats, &feats, 32, 0).unwrap(), [1.0, 1.0, 1.0]);
    assert!(r_precision(&feats, &feats, 65, 0).is_err());

    let texts = gaussian(1000, 16, &[0.0; 16], 8);
    let motions = gaussian(1000, 16, &[0.0; 16], 9);
    let [t1, t2, t3] = r_precision(&texts, &motions, 32, 3).unwrap();
    let p: f64 = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / 1000.0).sqrt();
    assert!((t1 - p).abs() < 3.0 * sigma, "top1 {t1}");
    assert!(t1 <= t2 && t2 <= t3);
}

#[test]
fn real_data_self_benchmark() {
    let horizons = [40, 80, 160];
    let mut all = Vec::new();
    let mut by_h = Vec::new();
    for (k, &len) in horizons.iter().enumerate() {
        let s = generate_dataset(&TEMPLATES, 2, len, 10, 30 + k as u64).unwrap();
        all.extend(s.clone());
        by_h.push(s);
    }
    let bank = ReferenceBank::build(&all, 3, 100_000, 0).unwrap();
    let results: Vec<HorizonResult> = horizons
        .iter()
        .zip(&by_h)
        .map(|(&f, s)| horizon_result(f, s, &bank).unwrap())
        .collect();
    let lens: Vec<usize> = results.iter().map(|h| h.curve.len()).collect();
    assert_eq!(lens, vec![38, 78, 158]);
    for h in &results {
        assert!((h.mean - 1.0).abs() < 1e-12);
    }
    assert!((flatness(&results).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn features_are_deterministic_and_length_agnostic() {
    let corpus = generate_dataset(&TEMPLATES, 2, 40, 10, 4).unwrap();
    let e1 = FeatureExtractor::new(32, D_POSE, 16, 0);
    let e2 = FeatureExtractor::new(32, D_POSE, 16, 0);
    let f = e1.motion(&corpus[0]).unwrap();
    assert_eq!(f, e2.motion(&corpus[0]).unwrap());
    assert_eq!(f.len(), 32);
    assert!(f.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    let long = generate_dataset(&TEMPLATES, 1, 160, 10, 4).unwrap();
    assert_eq!(e1.motion(&long[0]).unwrap().len(), 32);
    assert_eq!(e1.text(&[0.1; 16]).unwrap().len(), 32);
    assert!(e1.text(&[0.1; 3]).is_err());
}

#[test]
fn evaluation_report_is_bit_stable() {
    let corpus = generate_dataset(&TEMPLATES, 8, 12, 10, 5).unwrap();
    let stats = PoseStats::fit(&corpus).unwrap();
    let cfg = DenoiserConfig {
        n_blocks: 1,
        latent_dim: 8,
        d_state: 4,
        d_text: 16,
        max_steps: 20,
        ..DenoiserConfig::default()
    };
    let model = DenoiserParams::init(cfg, 0).unwrap();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    let generator = Generator {
        model: &model,
        stats: &stats,
        schedule: &schedule,
        encoder: TextEncoder::new(16, 0),
        ddim_steps: 4,
        guidance_w: 2.0,
        fps: 10,
    };
    let config = EvalConfig {
        samples_per_horizon: 2,
        metric_samples: 8,
        mmodality_prompts: 2,
        mmodality_k: 4,
        rprecision_pool: 4,
        ..EvalConfig::default()
    };
    let r1 = evaluate(&generator, &corpus, 12, &config, 3).unwrap();
    let r2 = evaluate(&generator, &corpus, 12, &config, 3).unwrap();
    r1.validate().unwrap();
    assert_eq!(r1.to_text(), r2.to_text());
    assert_eq!(r1.to_csv(), r2.to_csv());
    let curve_lens: Vec<usize> = r1.horizons.iter().map(|h| h.curve.len()).collect();
    assert_eq!(curve_lens, vec![10, 22, 46]);
    let m = r1.metrics.as_ref().unwrap();
    assert_eq!(m.diversity_pairs, 28);
    assert!(m.r_precision[0] <= m.r_precision[1] && m.r_precision[1] <= m.r_precision[2]);
    let text = r1.to_text();
    let scalars = EvalReport::parse_scalars(&text);
    assert!(scalars.contains_key("ndms.flatness"));
    assert!(scalars.contains_key("ndms.48.mean"));
    assert_eq!(r1.to_csv().lines().count(), 1 + 10 + 22 + 46);
}
