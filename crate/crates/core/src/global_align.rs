//! Robust global affine alignment from best-buddies correspondences.
//!
//! Each run fits an affine with RANSAC; across runs the result whose inliers
//! best cover both images (convex-hull spread score) wins.

use image::GrayImage;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{best_buddies, filter_foreground, Correspondence, DEFAULT_FG_THRESHOLD};
use crate::features::{similarity_volume, FeatureError, FeatureMap, SimilarityVolume};
use crate::geometry::{
    convex_contains, convex_hull, fit_affine_least_squares, polygon_area, AffineTransform, Point,
};

/// Image side at which `inlier_threshold` is expressed.
pub const REFERENCE_SIDE: f64 = 512.0;

#[derive(Debug, Error)]
pub enum GlobalAlignError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("every RANSAC sample was degenerate")]
    NoValidModel,
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error("all {runs} runs failed; last error: {last}")]
    AllRunsFailed { runs: usize, last: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sample_size: usize,
    /// Pixels at 512×512; scaled with the target size by [`global_align`].
    pub inlier_threshold: f64,
    pub runs: usize,
    pub rng_seed: u64,
    /// Refit the winning model by least squares on its inliers.
    pub refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            sample_size: 5,
            inlier_threshold: 50.0,
            runs: 8,
            rng_seed: 0,
            refit: true,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), GlobalAlignError> {
        if self.sample_size < 3 {
            return Err(GlobalAlignError::InvalidConfig("sample_size must be >= 3".into()));
        }
        if self.iterations == 0 {
            return Err(GlobalAlignError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(GlobalAlignError::InvalidConfig("inlier_threshold must be > 0".into()));
        }
        if self.runs == 0 {
            return Err(GlobalAlignError::InvalidConfig("runs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub transform: AffineTransform,
    /// Indices into the input correspondences.
    pub inliers: Vec<usize>,
    /// Largest inlier count among the sampled (pre-refit) models.
    pub best_sample_inliers: usize,
    /// Samples that produced a model.
    pub valid_samples: usize,
}

fn inliers_of(t: &AffineTransform, corrs: &[Correspondence], threshold: f64) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| t.apply(c.proto).distance(&c.target) < threshold)
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC over least-squares affine fits, seeded by `cfg.rng_seed`, with
/// `cfg.inlier_threshold` taken as-is in pixels. Residuals are measured in
/// the target frame; rank-deficient samples are skipped.
pub fn ransac_affine(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<RansacFit, GlobalAlignError> {
    cfg.validate()?;
    let threshold = cfg.inlier_threshold;
    if corrs.len() < cfg.sample_size {
        return Err(GlobalAlignError::TooFewCorrespondences {
            needed: cfg.sample_size,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(AffineTransform, Vec<usize>)> = None;
    let mut valid = 0;
    let mut src = Vec::with_capacity(cfg.sample_size);
    let mut dst = Vec::with_capacity(cfg.sample_size);

    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, corrs.len(), cfg.sample_size);
        src.clear();
        dst.clear();
        for i in idx.iter() {
            src.push(corrs[i].proto);
            dst.push(corrs[i].target);
        }
        let Ok(model) = fit_affine_least_squares(&src, &dst) else {
            continue;
        };
        valid += 1;
        let inl = inliers_of(&model, corrs, threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((model, inl));
        }
    }

    let (model, inliers) = best.ok_or(GlobalAlignError::NoValidModel)?;
    let best_sample_inliers = inliers.len();
    let (transform, inliers) = if cfg.refit {
        let src: Vec<Point> = inliers.iter().map(|&i| corrs[i].proto).collect();
        let dst: Vec<Point> = inliers.iter().map(|&i| corrs[i].target).collect();
        match fit_affine_least_squares(&src, &dst) {
            Ok(refit) => {
                let refit_inliers = inliers_of(&refit, corrs, threshold);
                if refit_inliers.len() >= best_sample_inliers {
                    (refit, refit_inliers)
                } else {
                    (model, inliers)
                }
            }
            Err(_) => (model, inliers),
        }
    } else {
        (model, inliers)
    };

    Ok(RansacFit {
        transform,
        inliers,
        best_sample_inliers,
        valid_samples: valid,
    })
}

/// `(p_proto, p_scan)`: share of prototype foreground pixels inside the hull
/// of inlier prototype points, and share of the target image covered by the
/// hull of inlier target points. Degenerate hulls score 0.
pub fn spread_score(
    inliers: &[Correspondence],
    proto_image: &GrayImage,
    target_size: (usize, usize),
) -> (f64, f64) {
    let proto_pts: Vec<Point> = inliers.iter().map(|c| c.proto).collect();
    let target_pts: Vec<Point> = inliers.iter().map(|c| c.target).collect();

    let hull = convex_hull(&proto_pts);
    let p_proto = if hull.len() < 3 || polygon_area(&hull) <= 0.0 {
        0.0
    } else {
        let (mut fg, mut inside) = (0usize, 0usize);
        for (x, y, px) in proto_image.enumerate_pixels() {
            if u16::from(px[0]) < DEFAULT_FG_THRESHOLD {
                fg += 1;
                if convex_contains(&hull, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    inside += 1;
                }
            }
        }
        if fg == 0 {
            0.0
        } else {
            inside as f64 / fg as f64
        }
    };

    let hull = convex_hull(&target_pts);
    let area = (target_size.0 * target_size.1) as f64;
    let p_scan = if hull.len() < 3 || area <= 0.0 {
        0.0
    } else {
        (polygon_area(&hull) / area).min(1.0)
    };
    (p_proto, p_scan)
}

/// Source of feature maps for successive runs.
pub trait FeatureProvider: Sync {
    fn features(&self, run: usize) -> Result<FeatureMap, FeatureError>;

    /// True when every run yields the same map, letting callers compute the
    /// similarity volume once.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Always returns the same precomputed map.
pub struct FixedFeatures(pub FeatureMap);

impl FeatureProvider for FixedFeatures {
    fn features(&self, _run: usize) -> Result<FeatureMap, FeatureError> {
        Ok(self.0.clone())
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Cycles through a list of precomputed maps, one per run (e.g. feature
/// files exported with different noise draws).
pub struct FeatureSequence(pub Vec<FeatureMap>);

impl FeatureProvider for FeatureSequence {
    fn features(&self, run: usize) -> Result<FeatureMap, FeatureError> {
        Ok(self.0[run % self.0.len()].clone())
    }

    fn is_deterministic(&self) -> bool {
        self.0.len() <= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub run: usize,
    pub correspondences: usize,
    pub inliers: usize,
    pub p_proto: f64,
    pub p_scan: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalAlignment {
    pub transform: AffineTransform,
    pub inliers: Vec<Correspondence>,
    pub spread_score: f64,
    pub p_proto: f64,
    pub p_scan: f64,
    pub run: usize,
}

/// Winning alignment plus the similarity volume it was computed from.
#[derive(Debug, Clone)]
pub struct GlobalOutcome {
    pub alignment: GlobalAlignment,
    pub volume: SimilarityVolume,
    pub runs: Vec<RunDiagnostics>,
}

struct RunResult {
    alignment: GlobalAlignment,
    volume: Option<SimilarityVolume>,
}

/// Effective inlier threshold for a target of `(height, width)` pixels.
pub fn scaled_threshold(threshold: f64, target_size: (usize, usize)) -> f64 {
    threshold * ((target_size.0 * target_size.1) as f64).sqrt() / REFERENCE_SIDE
}

fn single_run(
    volume: &SimilarityVolume,
    proto_image: &GrayImage,
    cfg: &RansacConfig,
    run: usize,
) -> (Result<GlobalAlignment, GlobalAlignError>, usize) {
    let corrs = filter_foreground(&best_buddies(volume), proto_image, DEFAULT_FG_THRESHOLD);
    let n = corrs.len();
    let run_cfg = RansacConfig {
        inlier_threshold: scaled_threshold(cfg.inlier_threshold, volume.target_size()),
        rng_seed: cfg.rng_seed.wrapping_add(run as u64),
        ..cfg.clone()
    };
    let fit = match ransac_affine(&corrs, &run_cfg) {
        Ok(f) => f,
        Err(e) => return (Err(e), n),
    };
    let inliers: Vec<Correspondence> = fit.inliers.iter().map(|&i| corrs[i]).collect();
    let (p_proto, p_scan) = spread_score(&inliers, proto_image, volume.target_size());
    (
        Ok(GlobalAlignment {
            transform: fit.transform,
            inliers,
            spread_score: p_proto * p_scan,
            p_proto,
            p_scan,
            run,
        }),
        n,
    )
}

/// Runs `cfg.runs` independent rounds of features → volume → best buddies →
/// foreground filter → RANSAC → spread score and keeps the best-spread round
/// (ties: more inliers, then lower run index).
pub fn global_align(
    proto: &dyn FeatureProvider,
    target: &dyn FeatureProvider,
    proto_image: &GrayImage,
    cfg: &RansacConfig,
) -> Result<GlobalOutcome, GlobalAlignError> {
    cfg.validate()?;

    let shared = if proto.is_deterministic() && target.is_deterministic() {
        Some(similarity_volume(&proto.features(0)?, &target.features(0)?)?)
    } else {
        None
    };

    let results: Vec<(Result<RunResult, GlobalAlignError>, usize)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let owned;
            let volume = match &shared {
                Some(v) => v,
                None => {
                    let pf = match proto.features(run) {
                        Ok(f) => f,
                        Err(e) => return (Err(e.into()), 0),
                    };
                    let tf = match target.features(run) {
                        Ok(f) => f,
                        Err(e) => return (Err(e.into()), 0),
                    };
                    owned = match similarity_volume(&pf, &tf) {
                        Ok(v) => v,
                        Err(e) => return (Err(e.into()), 0),
                    };
                    &owned
                }
            };
            let (res, n) = single_run(volume, proto_image, cfg, run);
            let keep_volume = shared.is_none();
            (
                res.map(|alignment| RunResult {
                    alignment,
                    volume: keep_volume.then(|| volume.clone()),
                }),
                n,
            )
        })
        .collect();

    let runs: Vec<RunDiagnostics> = results
        .iter()
        .enumerate()
        .map(|(run, (r, n))| match r {
            Ok(r) => RunDiagnostics {
                run,
                correspondences: *n,
                inliers: r.alignment.inliers.len(),
                p_proto: r.alignment.p_proto,
                p_scan: r.alignment.p_scan,
                score: r.alignment.spread_score,
                error: None,
            },
            Err(e) => RunDiagnostics {
                run,
                correspondences: *n,
                inliers: 0,
                p_proto: 0.0,
                p_scan: 0.0,
                score: 0.0,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let mut best: Option<RunResult> = None;
    let mut last_err = None;
    for (r, _) in results {
        match r {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let (a, b) = (&r.alignment, &b.alignment);
                        a.spread_score > b.spread_score
                            || (a.spread_score == b.spread_score
                                && a.inliers.len() > b.inliers.len())
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }

    match best {
        Some(b) => Ok(GlobalOutcome {
            volume: b.volume.or(shared).expect("volume retained"),
            alignment: b.alignment,
            runs,
        }),
        None => {
            let last = last_err.map(|e| e.to_string()).unwrap_or_default();
            Err(GlobalAlignError::AllRunsFailed {
                runs: cfg.runs,
                last,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use rand::Rng;

    fn corr(p: Point, t: Point) -> Correspondence {
        Correspondence {
            proto: p,
            target: t,
            score: 1.0,
        }
    }

    #[test]
    fn identity_all_inliers() {
        let corrs: Vec<_> = (0..30)
            .map(|i| {
                let p = Point::new((i * 37 % 500) as f64, (i * 91 % 480) as f64);
                corr(p, p)
            })
            .collect();
        let fit = ransac_affine(&corrs, &RansacConfig::default()).unwrap();
        let id = AffineTransform::identity().params();
        for (a, b) in fit.transform.params().iter().zip(id) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fit.inliers.len(), 30);
    }

    #[test]
    fn too_few() {
        let corrs = vec![corr(Point::new(0.0, 0.0), Point::new(0.0, 0.0)); 4];
        assert!(matches!(
            ransac_affine(&corrs, &RansacConfig::default()),
            Err(GlobalAlignError::TooFewCorrespondences { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn all_degenerate_samples() {
        let corrs: Vec<_> = (0..10)
            .map(|i| corr(Point::new(i as f64, i as f64), Point::new(i as f64, 0.0)))
            .collect();
        let cfg = RansacConfig {
            iterations: 50,
            ..Default::default()
        };
        assert!(matches!(
            ransac_affine(&corrs, &cfg),
            Err(GlobalAlignError::NoValidModel)
        ));
    }

    #[test]
    fn planted_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = AffineTransform::new([0.95, -0.12, 14.0, 0.1, 1.02, -9.0]).unwrap();
        let mut corrs: Vec<_> = (0..40)
            .map(|_| {
                let p = Point::new(rng.random_range(50.0..460.0), rng.random_range(50.0..460.0));
                corr(p, g.apply(p))
            })
            .collect();
        for _ in 0..20 {
            corrs.push(corr(
                Point::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)),
                Point::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)),
            ));
        }
        // At the 50px default, models that also capture outliers can beat the
        // plant on inlier count; a threshold near the noise level isolates it.
        let cfg = RansacConfig {
            rng_seed: 9,
            inlier_threshold: 5.0,
            ..Default::default()
        };
        let fit = ransac_affine(&corrs, &cfg).unwrap();
        let mut sq = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let p = Point::new(56.0 + 100.0 * i as f64, 56.0 + 100.0 * j as f64);
                sq += fit.transform.apply(p).distance(&g.apply(p)).powi(2);
            }
        }
        assert!((sq / 25.0).sqrt() < 2.0);
        assert!(fit.inliers.len() >= fit.best_sample_inliers);
        assert!(fit.inliers.len() >= 40);
    }

    #[test]
    fn spread_examples() {
        let img = GrayImage::from_fn(100, 100, |x, y| {
            Luma([if (30..70).contains(&x) && (30..70).contains(&y) { 0 } else { 255 }])
        });
        let corners = [
            Point::new(0.0, 0.0),
            Point::new(100.0, 0.0),
            Point::new(100.0, 100.0),
            Point::new(0.0, 100.0),
        ];
        let inl: Vec<_> = corners.iter().map(|&p| corr(p, p)).collect();
        let (pp, ps) = spread_score(&inl, &img, (100, 100));
        assert_eq!(ps, 1.0);
        assert_eq!(pp, 1.0);

        let (pp, ps) = spread_score(&inl[..2], &img, (100, 100));
        assert_eq!((pp, ps), (0.0, 0.0));

        // Hull covering the left half of the square glyph: x in [20, 50].
        let half = [
            Point::new(20.0, 20.0),
            Point::new(50.0, 20.0),
            Point::new(50.0, 80.0),
            Point::new(20.0, 80.0),
        ];
        let inl: Vec<_> = half.iter().map(|&p| corr(p, p)).collect();
        let (pp, ps) = spread_score(&inl, &img, (100, 100));
        // Glyph pixels with centers x+0.5 in [30.5, 49.5] -> 20 of 40 columns.
        assert!((pp - 0.5).abs() < 1e-12);
        assert!((ps - 0.18).abs() < 1e-12);
    }

    #[test]
    fn spread_monotone_in_inliers() {
        let img = GrayImage::from_fn(64, 64, |x, y| Luma([if (x + y) % 3 == 0 { 0 } else { 255 }]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inl = Vec::new();
        let mut prev = (0.0, 0.0);
        for _ in 0..20 {
            let p = Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            inl.push(corr(p, p));
            let s = spread_score(&inl, &img, (64, 64));
            assert!(s.0 >= prev.0 && s.1 >= prev.1);
            assert!((0.0..=1.0).contains(&s.0) && (0.0..=1.0).contains(&s.1));
            prev = s;
        }
    }

    #[test]
    fn threshold_scaling() {
        assert_eq!(scaled_threshold(50.0, (512, 512)), 50.0);
        assert_eq!(scaled_threshold(50.0, (256, 256)), 25.0);
    }
}
