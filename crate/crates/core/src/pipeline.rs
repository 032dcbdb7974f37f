//! End-to-end orchestration: single signs, synthetic corpora and tablets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::DEFAULT_FG_THRESHOLD;
use crate::eval::Annotation;
use crate::features::{
    extract_builtin_features, load_feature_map, FeatureError, FeatureMap, DEFAULT_GRID,
};
use crate::geometry::{
    transform_skeleton, AffineTransform, GeometryError, Point, Skeleton, StrokeTransform,
};
use crate::global_align::{
    global_align, FeatureProvider, FeatureSequence, FixedFeatures, GlobalAlignError,
    GlobalAlignment, RansacConfig, RunDiagnostics,
};
use crate::refine::{refine, LossBreakdown, RefineConfig, RefineError, RefinementResult};
use crate::saliency::{compute_saliency, SaliencyError, SaliencyMap};
use crate::synth::{tail_root, CorpusManifest};

/// Side of the square frame every tablet crop is resized to.
pub const CROP_SIDE: u32 = 512;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("load: {0}")]
    Load(String),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("global alignment: {0}")]
    Global(#[from] GlobalAlignError),
    #[error("saliency: {0}")]
    Saliency(#[from] SaliencyError),
    #[error("refinement: {0}")]
    Refine(#[from] RefineError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("box {index}: {msg}")]
    Box { index: usize, msg: String },
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Load(_) => "load",
            Self::Features(_) => "features",
            Self::Global(_) => "global",
            Self::Saliency(_) => "saliency",
            Self::Refine(_) => "refine",
            Self::Geometry(_) => "geometry",
            Self::Box { .. } => "tablet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureBackend {
    #[default]
    Builtin,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub features: FeatureBackend,
    /// Built-in extractor grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub fg_threshold: u16,
    pub no_refine: bool,
    pub ransac: RansacConfig,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            features: FeatureBackend::Builtin,
            grid: DEFAULT_GRID,
            fg_threshold: DEFAULT_FG_THRESHOLD,
            no_refine: false,
            ransac: RansacConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Copy whose component seeds derive from `seed + unit`.
    pub fn for_unit(&self, unit: usize) -> PipelineConfig {
        let seed = self.seed.wrapping_add(unit as u64);
        let mut c = self.clone();
        c.seed = seed;
        c.ransac.rng_seed = seed;
        c.refine.rng_seed = seed;
        c
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub global: GlobalAlignment,
    pub runs: Vec<RunDiagnostics>,
    pub global_skeleton: Skeleton,
    pub saliency: Option<SaliencyMap>,
    pub refinement: Option<RefinementResult>,
    /// Refined skeleton, or the global one when refinement is skipped.
    pub skeleton: Skeleton,
    pub target_size: (usize, usize),
}

/// Serializable summary of an [`AlignmentResult`].
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentRecord<'a> {
    pub sign_name: &'a str,
    pub target_size: (usize, usize),
    pub global_transform: AffineTransform,
    pub global_run: usize,
    pub spread_score: f64,
    pub p_proto: f64,
    pub p_scan: f64,
    pub inliers: usize,
    pub runs: &'a [RunDiagnostics],
    pub refined: bool,
    pub locals: Vec<StrokeTransform>,
    pub final_loss: Option<LossBreakdown>,
    pub global_keypoints: Vec<Point>,
    pub keypoints: Vec<Point>,
}

impl AlignmentResult {
    pub fn record(&self) -> AlignmentRecord<'_> {
        let n = self.skeleton.stroke_count();
        AlignmentRecord {
            sign_name: self.skeleton.sign_name(),
            target_size: self.target_size,
            global_transform: self.global.transform,
            global_run: self.global.run,
            spread_score: self.global.spread_score,
            p_proto: self.global.p_proto,
            p_scan: self.global.p_scan,
            inliers: self.global.inliers.len(),
            runs: &self.runs,
            refined: self.refinement.is_some(),
            locals: self
                .refinement
                .as_ref()
                .map(|r| r.locals.clone())
                .unwrap_or_else(|| vec![StrokeTransform::zero(); n]),
            final_loss: self
                .refinement
                .as_ref()
                .and_then(|r| r.loss_trace.last().copied()),
            global_keypoints: self.global_skeleton.keypoints(),
            keypoints: self.skeleton.keypoints(),
        }
    }

    pub fn annotation(&self, id: &str) -> Annotation {
        Annotation::from_skeleton(id, &self.skeleton, self.target_size)
    }
}

/// Global alignment, saliency and refinement from ready feature providers.
pub fn align_with_features(
    proto_image: &GrayImage,
    proto_skeleton: &Skeleton,
    proto: &dyn FeatureProvider,
    target: &dyn FeatureProvider,
    cfg: &PipelineConfig,
) -> Result<AlignmentResult, PipelineError> {
    let outcome = global_align(proto, target, proto_image, &cfg.ransac)?;
    let g = outcome.alignment.transform;
    let global_skeleton = transform_skeleton(proto_skeleton, &g, None)?;
    let target_size = outcome.volume.target_size();

    let (saliency, refinement, skeleton) = if cfg.no_refine {
        (None, None, global_skeleton.clone())
    } else {
        let sal = compute_saliency(&outcome.volume, proto_image, cfg.fg_threshold)?;
        let r = refine(&outcome.volume, &sal, proto_skeleton, &g, &cfg.refine)?;
        let sk = r.final_skeleton.clone();
        (Some(sal), Some(r), sk)
    };
    Ok(AlignmentResult {
        global: outcome.alignment,
        runs: outcome.runs,
        global_skeleton,
        saliency,
        refinement,
        skeleton,
        target_size,
    })
}

/// Aligns a prototype to a target image with built-in features.
pub fn align_sign(
    proto_image: &GrayImage,
    proto_skeleton: &Skeleton,
    target_image: &GrayImage,
    cfg: &PipelineConfig,
) -> Result<AlignmentResult, PipelineError> {
    let fp = extract_builtin_features(proto_image, cfg.grid);
    let ft = extract_builtin_features(target_image, cfg.grid);
    align_with_features(
        proto_image,
        proto_skeleton,
        &FixedFeatures(fp),
        &FixedFeatures(ft),
        cfg,
    )
}

/// Feature provider over one or more FMAP files (one per run, cycling).
pub fn file_features(paths: &[PathBuf]) -> Result<Box<dyn FeatureProvider>, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::Load("no feature files given".into()));
    }
    let maps: Vec<FeatureMap> = paths
        .iter()
        .map(load_feature_map)
        .collect::<Result<_, _>>()?;
    Ok(if maps.len() == 1 {
        Box::new(FixedFeatures(maps.into_iter().next().expect("one map")))
    } else {
        Box::new(FeatureSequence(maps))
    })
}

pub fn load_gray(path: &Path) -> Result<GrayImage, PipelineError> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|e| PipelineError::Load(format!("{}: {e}", path.display())))
}

pub fn load_skeleton(path: &Path) -> Result<Skeleton, PipelineError> {
    Skeleton::load(path).map_err(|e| PipelineError::Load(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Corpus

/// Outcome of one manifest entry.
#[derive(Debug)]
pub struct CorpusItem {
    pub id: String,
    pub result: Result<AlignmentResult, PipelineError>,
}

/// Aligns every case of a synthetic corpus with built-in features. Case `k`
/// uses seeds derived from `cfg.seed + k`. Paths resolve against `base`.
pub fn align_corpus(manifest: &CorpusManifest, base: &Path, cfg: &PipelineConfig) -> Vec<CorpusItem> {
    manifest
        .cases
        .par_iter()
        .enumerate()
        .map(|(k, case)| {
            let unit = cfg.for_unit(k);
            let result = (|| {
                let proto_img = load_gray(&base.join(&case.proto_image_path))?;
                let proto = load_skeleton(&base.join(&case.proto_skeleton_path))?;
                let target = load_gray(&base.join(&case.image_path))?;
                align_sign(&proto_img, &proto, &target, &unit)
            })();
            CorpusItem {
                id: case.id.clone(),
                result,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tablets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub sign_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabletSpec {
    pub image_path: PathBuf,
    pub boxes: Vec<SignBox>,
    /// Holds `<sign_name>.png` and `<sign_name>.json` per sign.
    pub prototype_dir: PathBuf,
}

impl TabletSpec {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Load(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Load(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug)]
pub struct BoxOutcome {
    pub index: usize,
    pub sign_name: String,
    /// Skeleton in tablet pixel coordinates.
    pub result: Result<(Skeleton, AlignmentResult), PipelineError>,
}

#[derive(Debug)]
pub struct TabletResult {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoxOutcome>,
}

impl TabletResult {
    pub fn failures(&self) -> usize {
        self.boxes.iter().filter(|b| b.result.is_err()).count()
    }
}

/// Crop-frame to tablet-frame transform for a box resized to `CROP_SIDE`.
pub fn crop_to_tablet(b: &SignBox) -> AffineTransform {
    let side = CROP_SIDE as f64;
    AffineTransform::new([
        b.w as f64 / side,
        0.0,
        b.x as f64,
        0.0,
        b.h as f64 / side,
        b.y as f64,
    ])
    .expect("box has positive size")
}

/// Crops a box and resizes it to `CROP_SIDE`². Errors name the violated bound.
pub fn crop_box(tablet: &GrayImage, b: &SignBox) -> Result<GrayImage, String> {
    let (tw, th) = tablet.dimensions();
    if b.w == 0 || b.h == 0 {
        return Err("empty box".into());
    }
    if b.x.checked_add(b.w).is_none_or(|r| r > tw) || b.y.checked_add(b.h).is_none_or(|r| r > th)
    {
        return Err(format!(
            "box ({}, {}, {}, {}) exceeds the {tw}x{th} image",
            b.x, b.y, b.w, b.h
        ));
    }
    let crop = imageops::crop_imm(tablet, b.x, b.y, b.w, b.h).to_image();
    Ok(if crop.dimensions() == (CROP_SIDE, CROP_SIDE) {
        crop
    } else {
        imageops::resize(&crop, CROP_SIDE, CROP_SIDE, imageops::FilterType::Triangle)
    })
}

/// Aligns every box independently; failures are recorded per box. Box `k`
/// uses seeds derived from `cfg.seed + k`.
pub fn align_tablet(
    tablet: &GrayImage,
    boxes: &[SignBox],
    prototypes: &(dyn Fn(&str) -> Result<(GrayImage, Skeleton), PipelineError> + Sync),
    cfg: &PipelineConfig,
) -> TabletResult {
    let results = boxes
        .par_iter()
        .enumerate()
        .map(|(index, b)| {
            let result = (|| {
                let crop = crop_box(tablet, b).map_err(|msg| PipelineError::Box { index, msg })?;
                let (proto_img, proto) = prototypes(&b.sign_name)?;
                let aligned = align_sign(&proto_img, &proto, &crop, &cfg.for_unit(index))?;
                let back = crop_to_tablet(b);
                let skel = aligned.skeleton.map_points(|p| back.apply(p));
                Ok((skel, aligned))
            })();
            BoxOutcome {
                index,
                sign_name: b.sign_name.clone(),
                result,
            }
        })
        .collect();
    TabletResult {
        width: tablet.width(),
        height: tablet.height(),
        boxes: results,
    }
}

/// Loads `<dir>/<sign>.png` and `<dir>/<sign>.json`.
pub fn directory_prototypes(
    dir: &Path,
) -> impl Fn(&str) -> Result<(GrayImage, Skeleton), PipelineError> + Sync + '_ {
    move |sign: &str| {
        let img = load_gray(&dir.join(format!("{sign}.png")))?;
        let skel = load_skeleton(&dir.join(format!("{sign}.json")))?;
        Ok((img, skel))
    }
}

// ---------------------------------------------------------------------------
// Rendering

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn palette_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Composite SVG: one `<g>` per skeleton, head triangles as closed paths and
/// tails as lines, colored by index.
pub fn render_svg(
    width: u32,
    height: u32,
    background: Option<&str>,
    skeletons: &[(usize, &Skeleton)],
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    if let Some(href) = background {
        let _ = writeln!(
            s,
            r#"  <image x="0" y="0" width="{width}" height="{height}" xlink:href="{}"/>"#,
            xml_escape(href)
        );
    }
    for &(index, sk) in skeletons {
        let _ = writeln!(
            s,
            r#"  <g id="box-{index}" data-sign="{}" stroke="{}" stroke-width="2" fill="none">"#,
            xml_escape(sk.sign_name()),
            hex(palette_color(index))
        );
        for st in sk.strokes() {
            let [a, b, c] = st.head;
            let _ = writeln!(
                s,
                r#"    <path d="M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z"/>"#,
                a.x, a.y, b.x, b.y, c.x, c.y
            );
            let m = tail_root(st);
            let _ = writeln!(
                s,
                r#"    <line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                m.x, m.y, st.tail.x, st.tail.y
            );
        }
        let _ = writeln!(s, "  </g>");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Draws skeleton outlines over a grayscale background.
pub fn render_overlay(background: &GrayImage, skeletons: &[(usize, &Skeleton)]) -> RgbImage {
    let mut img = RgbImage::from_fn(background.width(), background.height(), |x, y| {
        let v = background.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    for &(index, sk) in skeletons {
        let color = Rgb(palette_color(index));
        for st in sk.strokes() {
            let [a, b, c] = st.head;
            for (p, q) in [(a, b), (b, c), (c, a), (tail_root(st), st.tail)] {
                draw_line(&mut img, p, q, 1.0, color);
            }
        }
    }
    img
}

fn draw_line(img: &mut RgbImage, p: Point, q: Point, half_width: f64, color: Rgb<u8>) {
    let len = p.distance(&q);
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = half_width.ceil() as i64;
    for k in 0..=steps {
        let c = p.lerp(&q, k as f64 / steps as f64);
        let (cx, cy) = (c.x.floor() as i64, c.y.floor() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                let (fx, fy) = (x as f64 + 0.5 - c.x, y as f64 + 0.5 - c.y);
                if x >= 0 && y >= 0 && x < w && y < h && fx.hypot(fy) <= half_width + 0.5 {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{builtin_signs, render_skeleton, RenderStyle};

    #[test]
    fn unit_seeds() {
        let c = PipelineConfig {
            seed: 10,
            ..Default::default()
        };
        let u = c.for_unit(3);
        assert_eq!((u.seed, u.ransac.rng_seed, u.refine.rng_seed), (13, 13, 13));
    }

    #[test]
    fn crop_mapping() {
        let b = SignBox {
            x: 100,
            y: 50,
            w: 256,
            h: 1024,
            sign_name: "X".into(),
        };
        let t = crop_to_tablet(&b);
        assert_eq!(t.apply(Point::new(0.0, 0.0)), Point::new(100.0, 50.0));
        assert_eq!(t.apply(Point::new(512.0, 512.0)), Point::new(356.0, 1074.0));
    }

    #[test]
    fn out_of_bounds_box_fails_alone() {
        let img = GrayImage::from_pixel(600, 600, image::Luma([230]));
        let boxes = vec![SignBox {
            x: 500,
            y: 0,
            w: 200,
            h: 100,
            sign_name: "X".into(),
        }];
        let protos = |_: &str| -> Result<(GrayImage, Skeleton), PipelineError> {
            Err(PipelineError::Load("unused".into()))
        };
        let r = align_tablet(&img, &boxes, &protos, &PipelineConfig::default());
        assert_eq!(r.failures(), 1);
        assert_eq!(r.boxes[0].result.as_ref().unwrap_err().stage(), "tablet");
    }

    #[test]
    fn svg_groups() {
        let signs = builtin_signs();
        let empty = render_svg(100, 80, None, &[]);
        assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
        assert!(!empty.contains("<g "));
        let svg = render_svg(512, 512, Some("t.png"), &[(0, &signs[0]), (1, &signs[3])]);
        assert_eq!(svg.matches("<g ").count(), 2);
        assert_eq!(svg.matches("<path").count(), 1 + 4);
        assert_eq!(svg.matches("<line").count(), 1 + 4);
    }

    #[test]
    fn overlay_draws_in_color() {
        let s = &builtin_signs()[0];
        let bg = render_skeleton(s, &RenderStyle::clean()).unwrap();
        let img = render_overlay(&bg, &[(0, s)]);
        let colored = img.pixels().filter(|p| p.0 == palette_color(0)).count();
        assert!(colored > 100);
    }
}
