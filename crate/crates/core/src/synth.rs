//! Synthetic sign rendering with planted global and per-stroke perturbations.
//!
//! Cases carry exact ground-truth keypoints, which makes them an oracle for
//! the alignment pipeline.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Annotation;
use crate::geometry::{
    ccw, convex_contains, stroke_transform_from_points, AffineTransform, GeometryError, Point,
    Skeleton, Stroke, StrokeTransform,
};

pub const INK: u8 = 30;
pub const GROUND: u8 = 230;
/// Tail width at the tail point relative to its width at the head.
const TAIL_TAPER: f64 = 0.25;
const MAX_DRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("keypoint {0} lies outside the {1}x{2} canvas")]
    OutOfCanvas(Point, usize, usize),
    #[error("no perturbation kept the skeleton inside the canvas after {0} draws")]
    CannotFitCanvas(usize),
    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Annotation(#[from] crate::eval::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    pub rotation_max_deg: f64,
    pub scale_range: (f64, f64),
    pub translation_max: f64,
    pub per_stroke_jitter_max: f64,
    pub rng_seed: u64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            rotation_max_deg: 10.0,
            scale_range: (0.9, 1.1),
            translation_max: 20.0,
            per_stroke_jitter_max: 5.0,
            rng_seed: 0,
        }
    }
}

impl PerturbSpec {
    pub fn none() -> Self {
        Self {
            rotation_max_deg: 0.0,
            scale_range: (1.0, 1.0),
            translation_max: 0.0,
            per_stroke_jitter_max: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SynthError::InvalidSpec(format!("scale range ({lo}, {hi})")));
        }
        if !(self.rotation_max_deg >= 0.0
            && self.translation_max >= 0.0
            && self.per_stroke_jitter_max >= 0.0)
        {
            return Err(SynthError::InvalidSpec("maxima must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    /// `(height, width)` in pixels.
    pub canvas: (usize, usize),
    pub stroke_width: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            canvas: (512, 512),
            stroke_width: 12.0,
            noise_sigma: 8.0,
            noise_seed: 0,
        }
    }
}

impl RenderStyle {
    /// Noise-free rendering, used for prototype images.
    pub fn clean() -> Self {
        Self {
            noise_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Midpoint of the head edge nearest the tail point (first edge on ties).
pub fn tail_root(stroke: &Stroke) -> Point {
    let [a, b, c] = stroke.head;
    let mids = [a.lerp(&b, 0.5), b.lerp(&c, 0.5), c.lerp(&a, 0.5)];
    let mut start = mids[0];
    for m in &mids[1..] {
        if m.distance(&stroke.tail) < start.distance(&stroke.tail) {
            start = *m;
        }
    }
    start
}

/// Filled head triangle and tail quadrilateral of one stroke.
pub fn stroke_polygons(stroke: &Stroke, stroke_width: f64) -> (Vec<Point>, Vec<Point>) {
    let head = ccw(stroke.head.to_vec());
    let start = tail_root(stroke);
    let (dx, dy) = (stroke.tail.x - start.x, stroke.tail.y - start.y);
    let len = dx.hypot(dy);
    let tail = if len < 1e-9 {
        Vec::new()
    } else {
        let (nx, ny) = (-dy / len, dx / len);
        let w0 = stroke_width / 2.0;
        let w1 = stroke_width * TAIL_TAPER / 2.0;
        ccw(vec![
            Point::new(start.x + nx * w0, start.y + ny * w0),
            Point::new(stroke.tail.x + nx * w1, stroke.tail.y + ny * w1),
            Point::new(stroke.tail.x - nx * w1, stroke.tail.y - ny * w1),
            Point::new(start.x - nx * w0, start.y - ny * w0),
        ])
    };
    (head, tail)
}

/// Dark wedges on a light ground with additive Gaussian pixel noise.
pub fn render_skeleton(s: &Skeleton, style: &RenderStyle) -> Result<GrayImage, SynthError> {
    let (h, w) = style.canvas;
    for p in s.keypoints() {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
            return Err(SynthError::OutOfCanvas(p, w, h));
        }
    }
    let mut ink = vec![false; w * h];
    for st in s.strokes() {
        let (head, tail) = stroke_polygons(st, style.stroke_width);
        for poly in [head, tail] {
            fill_convex(&poly, w, h, &mut ink);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
    let noise = (style.noise_sigma > 0.0).then(|| Normal::new(0.0, style.noise_sigma).unwrap());
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let base = if ink[i] { INK } else { GROUND } as f64;
        let v = match &noise {
            Some(n) => base + n.sample(&mut rng),
            None => base,
        };
        *px = Luma([v.round().clamp(0.0, 255.0) as u8]);
    }
    Ok(img)
}

fn fill_convex(poly: &[Point], w: usize, h: usize, mask: &mut [bool]) {
    if poly.len() < 3 {
        return;
    }
    let min_x = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = poly.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let x0 = (min_x - 0.5).floor().max(0.0) as usize;
    let y0 = (min_y - 0.5).floor().max(0.0) as usize;
    let x1 = ((max_x + 0.5).ceil().max(0.0) as usize).min(w);
    let y1 = ((max_y + 0.5).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if convex_contains(poly, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                mask[y * w + x] = true;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub image: GrayImage,
    pub gt_skeleton: Skeleton,
    pub planted_g: AffineTransform,
    /// Pixel-frame perturbations with `P⁽ⁱ⁾·G·proto = gt` on every keypoint.
    pub planted_locals: Vec<StrokeTransform>,
}

fn jitter(rng: &mut impl Rng, max: f64) -> (f64, f64) {
    if max <= 0.0 {
        return (0.0, 0.0);
    }
    let n = Normal::new(0.0, max / 2.0).unwrap();
    loop {
        let (dx, dy) = (n.sample(rng), n.sample(rng));
        if dx.hypot(dy) <= max {
            return (dx, dy);
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a global similarity about the canvas center plus independent
/// keypoint jitter, retrying until the result fits the canvas with a
/// `stroke_width` margin.
pub fn make_case(
    proto: &Skeleton,
    spec: &PerturbSpec,
    style: &RenderStyle,
) -> Result<SynthCase, SynthError> {
    spec.validate()?;
    let (h, w) = style.canvas;
    let center = Point::new(w as f64 / 2.0, h as f64 / 2.0);
    let margin = style.stroke_width;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    for _ in 0..MAX_DRAWS {
        let angle = uniform(&mut rng, -spec.rotation_max_deg, spec.rotation_max_deg).to_radians();
        let scale = uniform(&mut rng, spec.scale_range.0, spec.scale_range.1);
        let tx = uniform(&mut rng, -spec.translation_max, spec.translation_max);
        let ty = uniform(&mut rng, -spec.translation_max, spec.translation_max);
        let g = AffineTransform::similarity_about(center, angle, scale, (tx, ty))?;

        let mut strokes = Vec::with_capacity(proto.stroke_count());
        let mut locals = Vec::with_capacity(proto.stroke_count());
        let mut ok = true;
        for st in proto.strokes() {
            let moved: [Point; 4] = st.keypoints().map(|p| g.apply(p));
            let jittered: [Point; 4] = moved.map(|p| {
                let (dx, dy) = jitter(&mut rng, spec.per_stroke_jitter_max);
                Point::new(p.x + dx, p.y + dy)
            });
            if jittered.iter().any(|p| {
                p.x < margin || p.y < margin || p.x > w as f64 - margin || p.y > h as f64 - margin
            }) {
                ok = false;
            }
            let local = if spec.per_stroke_jitter_max > 0.0 {
                match stroke_transform_from_points(&moved, &jittered) {
                    Ok(l) => l,
                    Err(_) => {
                        ok = false;
                        StrokeTransform::zero()
                    }
                }
            } else {
                StrokeTransform::zero()
            };
            strokes.push(Stroke::from_keypoints(jittered));
            locals.push(local);
        }
        if !ok {
            continue;
        }
        let gt_skeleton = proto.with_strokes(strokes);
        let render = RenderStyle {
            noise_seed: spec.rng_seed ^ 0x5eed_0f_1a_6e,
            ..*style
        };
        let image = render_skeleton(&gt_skeleton, &render)?;
        return Ok(SynthCase {
            image,
            gt_skeleton,
            planted_g: g,
            planted_locals: locals,
        });
    }
    Err(SynthError::CannotFitCanvas(MAX_DRAWS))
}

/// Wedge with its head base facing the tail: apex at `origin`, base
/// `depth` pixels along `angle_deg`, tail `tail_len` beyond the base.
pub fn wedge(origin: Point, angle_deg: f64, depth: f64, width: f64, tail_len: f64) -> Stroke {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (nx, ny) = (-s, c);
    let base = Point::new(origin.x + c * depth, origin.y + s * depth);
    Stroke::new(
        origin,
        Point::new(base.x + nx * width / 2.0, base.y + ny * width / 2.0),
        Point::new(base.x - nx * width / 2.0, base.y - ny * width / 2.0),
        Point::new(base.x + c * tail_len, base.y + s * tail_len),
    )
}

/// A small set of prototype signs laid out on a 512×512 canvas.
pub fn builtin_signs() -> Vec<Skeleton> {
    let p = Point::new;
    let signs: Vec<(&str, Vec<Stroke>)> = vec![
        ("DIŠ", vec![wedge(p(80.0, 256.0), 0.0, 70.0, 90.0, 280.0)]),
        (
            "MIN",
            vec![
                wedge(p(180.0, 80.0), 90.0, 70.0, 80.0, 270.0),
                wedge(p(330.0, 110.0), 90.0, 70.0, 80.0, 250.0),
            ],
        ),
        (
            "EŠ",
            vec![
                wedge(p(100.0, 120.0), 0.0, 55.0, 70.0, 260.0),
                wedge(p(140.0, 256.0), 0.0, 55.0, 70.0, 240.0),
                wedge(p(100.0, 392.0), 0.0, 55.0, 70.0, 280.0),
            ],
        ),
        (
            "AN",
            vec![
                wedge(p(70.0, 250.0), 0.0, 60.0, 70.0, 300.0),
                wedge(p(262.0, 70.0), 90.0, 60.0, 70.0, 300.0),
                wedge(p(110.0, 110.0), 45.0, 55.0, 60.0, 190.0),
                wedge(p(110.0, 400.0), -45.0, 55.0, 60.0, 190.0),
            ],
        ),
        ("U", vec![wedge(p(140.0, 140.0), 45.0, 110.0, 150.0, 150.0)]),
        (
            "TAB",
            vec![
                wedge(p(90.0, 170.0), 0.0, 60.0, 70.0, 290.0),
                wedge(p(90.0, 340.0), 0.0, 60.0, 70.0, 290.0),
                wedge(p(300.0, 90.0), 90.0, 55.0, 60.0, 300.0),
            ],
        ),
    ];
    signs
        .into_iter()
        .map(|(name, strokes)| Skeleton::new(name, strokes, None).expect("catalog sign is valid"))
        .collect()
}

// ---------------------------------------------------------------------------
// Corpus on disk

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub sign: String,
    pub image_path: PathBuf,
    pub gt_annotation_path: PathBuf,
    pub proto_image_path: PathBuf,
    pub proto_skeleton_path: PathBuf,
    pub seed: u64,
    pub spec: PerturbSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub cases: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Seed of case `index` in a corpus generated with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Generates `cases` synthetic cases cycling through `protos`, writing
/// prototypes, case images, GT annotations and `manifest.json` under
/// `out_dir`. Paths in the manifest are relative to `out_dir`.
pub fn generate_corpus(
    out_dir: &Path,
    protos: &[Skeleton],
    cases: usize,
    seed: u64,
    spec: &PerturbSpec,
    style: &RenderStyle,
) -> Result<CorpusManifest, SynthError> {
    assert!(!protos.is_empty(), "no prototypes");
    let proto_dir = out_dir.join("protos");
    let case_dir = out_dir.join("cases");
    std::fs::create_dir_all(&proto_dir)?;
    std::fs::create_dir_all(&case_dir)?;

    let clean = RenderStyle {
        noise_sigma: 0.0,
        ..*style
    };
    let mut proto_paths = Vec::with_capacity(protos.len());
    for (i, proto) in protos.iter().enumerate() {
        let stem = format!("proto_{i:02}");
        let img = PathBuf::from("protos").join(format!("{stem}.png"));
        let skel = PathBuf::from("protos").join(format!("{stem}.json"));
        render_skeleton(proto, &clean)?.save(out_dir.join(&img))?;
        proto.save(out_dir.join(&skel))?;
        proto_paths.push((img, skel));
    }

    let mut entries = Vec::with_capacity(cases);
    for i in 0..cases {
        let which = i % protos.len();
        let proto = &protos[which];
        let case_spec = PerturbSpec {
            rng_seed: case_seed(seed, i),
            ..*spec
        };
        let case = make_case(proto, &case_spec, style)?;
        let id = format!("case_{i:04}");
        let image_path = PathBuf::from("cases").join(format!("{id}.png"));
        let gt_path = PathBuf::from("cases").join(format!("{id}.gt.json"));
        case.image.save(out_dir.join(&image_path))?;
        Annotation::from_skeleton(&id, &case.gt_skeleton, style.canvas)
            .save(out_dir.join(&gt_path))?;
        entries.push(ManifestEntry {
            id,
            sign: proto.sign_name().to_string(),
            image_path,
            gt_annotation_path: gt_path,
            proto_image_path: proto_paths[which].0.clone(),
            proto_skeleton_path: proto_paths[which].1.clone(),
            seed: case_spec.rng_seed,
            spec: case_spec,
        });
    }
    let manifest = CorpusManifest { cases: entries };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{polygon_area, transform_skeleton};

    fn count_ink(img: &GrayImage) -> usize {
        img.pixels().filter(|p| p[0] < 128).count()
    }

    #[test]
    fn render_area_matches_polygons() {
        // Axis-aligned wedge: head triangle area 0.5·70·90, tail trapezoid
        // 280 long tapering 12 → 3.
        let st = wedge(Point::new(80.0, 256.0), 0.0, 70.0, 90.0, 280.0);
        let s = Skeleton::new("DIŠ", vec![st], None).unwrap();
        let img = render_skeleton(&s, &RenderStyle::clean()).unwrap();
        let analytic = 0.5 * 70.0 * 90.0 + 280.0 * (12.0 + 3.0) / 2.0;
        let got = count_ink(&img) as f64;
        assert!((got - analytic).abs() / analytic < 0.10, "{got} vs {analytic}");

        let (head, tail) = stroke_polygons(&st, 12.0);
        assert!((polygon_area(&head) - 3150.0).abs() < 1e-9);
        assert!((polygon_area(&tail) - 2100.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_render_is_reproducible() {
        let s = &builtin_signs()[3];
        let a = render_skeleton(s, &RenderStyle::clean()).unwrap();
        let b = render_skeleton(s, &RenderStyle::clean()).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().all(|p| p[0] == INK || p[0] == GROUND));
    }

    #[test]
    fn out_of_canvas() {
        let s = builtin_signs()[0].map_points(|p| Point::new(p.x + 400.0, p.y + 400.0));
        assert!(matches!(
            render_skeleton(&s, &RenderStyle::default()),
            Err(SynthError::OutOfCanvas(..))
        ));
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let proto = &builtin_signs()[2];
        let case = make_case(proto, &PerturbSpec::none(), &RenderStyle::default()).unwrap();
        assert_eq!(case.planted_g, AffineTransform::identity());
        assert_eq!(&case.gt_skeleton, proto);
        assert!(case.planted_locals.iter().all(|l| *l == StrokeTransform::zero()));
    }

    #[test]
    fn cases_are_deterministic_and_exact() {
        let proto = &builtin_signs()[3];
        let spec = PerturbSpec {
            rng_seed: 42,
            ..Default::default()
        };
        let a = make_case(proto, &spec, &RenderStyle::default()).unwrap();
        let b = make_case(proto, &spec, &RenderStyle::default()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_skeleton, b.gt_skeleton);

        let rebuilt = transform_skeleton(proto, &a.planted_g, Some(&a.planted_locals)).unwrap();
        for (p, q) in rebuilt.keypoints().iter().zip(a.gt_skeleton.keypoints()) {
            assert!(p.distance(&q) < 1e-6);
        }
        // Jitter stays within its bound.
        let global = transform_skeleton(proto, &a.planted_g, None).unwrap();
        for (p, q) in global.keypoints().iter().zip(a.gt_skeleton.keypoints()) {
            assert!(p.distance(&q) <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn displacement_bounded() {
        let signs = builtin_signs();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut worst = 0.0f64;
        for i in 0..100 {
            let proto = &signs[i % signs.len()];
            let spec = PerturbSpec {
                rng_seed: i as u64,
                ..Default::default()
            };
            let case = make_case(proto, &spec, &RenderStyle::default()).unwrap();
            for (p, q) in proto.keypoints().iter().zip(case.gt_skeleton.keypoints()) {
                let d = p.distance(&q);
                total += d;
                worst = worst.max(d);
                count += 1;
            }
        }
        let mean = total / count as f64;
        // Bound: rotation and scale about the center move a point at most
        // |sR - I|·r with r ≤ 256√2, plus translation and jitter.
        let r = 256.0 * 2f64.sqrt();
        let rot = 10f64.to_radians();
        let linear = ((1.1 * rot.cos() - 1.0).powi(2) + (1.1 * rot.sin()).powi(2)).sqrt();
        let bound = linear * r + 20.0 * 2f64.sqrt() + 5.0;
        assert!(mean > 0.0);
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn catalog_fits_canvas() {
        for s in builtin_signs() {
            render_skeleton(&s, &RenderStyle::clean()).unwrap();
        }
    }
}
