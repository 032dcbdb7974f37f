use glyph_align::features::{extract_builtin_features, similarity_volume, DEFAULT_GRID};
use glyph_align::geometry::{AffineTransform, Point, Skeleton, Stroke};
use glyph_align::refine::{refine, RefineConfig};
use glyph_align::saliency::compute_saliency;
use glyph_align::synth::{builtin_signs, render_skeleton, RenderStyle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sign(name: &str) -> Skeleton {
    builtin_signs()
        .into_iter()
        .find(|s| s.sign_name() == name)
        .unwrap()
}

/// Moves every keypoint of stroke `k` by a Gaussian offset (σ = 2.5px)
/// truncated at 5px.
fn jitter_stroke(s: &Skeleton, k: usize, seed: u64) -> Skeleton {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.5).unwrap();
    let mut strokes: Vec<Stroke> = s.strokes().to_vec();
    let kps = strokes[k].keypoints().map(|p| loop {
        let (dx, dy): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
        if dx.hypot(dy) <= 5.0 {
            break Point::new(p.x + dx, p.y + dy);
        }
    });
    strokes[k] = Stroke::from_keypoints(kps);
    s.with_strokes(strokes)
}

fn stroke_error(a: &Stroke, b: &Stroke) -> f64 {
    a.keypoints()
        .iter()
        .zip(b.keypoints())
        .map(|(p, q)| p.distance(&q))
        .sum::<f64>()
        / 4.0
}

#[test]
#[ignore = "known failure: refinement drifts off accurate global fits (see README, Known failures)"]
fn single_stroke_jitter_is_reduced_on_average() {
    let proto = sign("MIN");
    let proto_img = render_skeleton(&proto, &RenderStyle::clean()).unwrap();
    let fp = extract_builtin_features(&proto_img, DEFAULT_GRID);
    let g = AffineTransform::identity();
    let k = 1;
    let (mut before, mut after) = (0.0, 0.0);
    let seeds = 20;
    for seed in 0..seeds {
        let gt = jitter_stroke(&proto, k, seed);
        let target = render_skeleton(
            &gt,
            &RenderStyle {
                noise_seed: seed,
                ..RenderStyle::default()
            },
        )
        .unwrap();
        let ft = extract_builtin_features(&target, DEFAULT_GRID);
        let vol = similarity_volume(&fp, &ft).unwrap();
        let sal = compute_saliency(&vol, &proto_img, 128).unwrap();
        let cfg = RefineConfig {
            rng_seed: seed,
            ..Default::default()
        };
        let r = refine(&vol, &sal, &proto, &g, &cfg).unwrap();
        before += stroke_error(&proto.strokes()[k], &gt.strokes()[k]);
        after += stroke_error(&r.final_skeleton.strokes()[k], &gt.strokes()[k]);
    }
    let (before, after) = (before / seeds as f64, after / seeds as f64);
    assert!(
        after < before,
        "refined stroke error {after:.3}px is not below global-only {before:.3}px"
    );
}

#[test]
fn huge_regularizer_keeps_identity() {
    let proto = sign("AN");
    let img = render_skeleton(&proto, &RenderStyle::clean()).unwrap();
    let fm = extract_builtin_features(&img, DEFAULT_GRID);
    let vol = similarity_volume(&fm, &fm).unwrap();
    let sal = compute_saliency(&vol, &img, 128).unwrap();
    let shifted = AffineTransform::translation(6.0, -4.0);
    let cfg = RefineConfig {
        lambda_reg: 1e6,
        ..Default::default()
    };
    let r = refine(&vol, &sal, &proto, &shifted, &cfg).unwrap();
    let worst = r
        .normalized_locals
        .iter()
        .flat_map(|l| l.p)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-3, "max |p| = {worst}");
}

#[test]
fn zero_saliency_weight_runs() {
    let proto = sign("DIŠ");
    let img = render_skeleton(&proto, &RenderStyle::clean()).unwrap();
    let fm = extract_builtin_features(&img, DEFAULT_GRID);
    let vol = similarity_volume(&fm, &fm).unwrap();
    let sal = compute_saliency(&vol, &img, 128).unwrap();
    let cfg = RefineConfig {
        lambda_sal: 0.0,
        iterations: 10,
        ..Default::default()
    };
    let r = refine(&vol, &sal, &proto, &AffineTransform::identity(), &cfg).unwrap();
    assert_eq!(r.loss_trace.len(), 10);
    assert!(r
        .loss_trace
        .iter()
        .all(|l| (l.total - (l.sim + cfg.lambda_reg * l.reg())).abs() < 1e-12));
}
