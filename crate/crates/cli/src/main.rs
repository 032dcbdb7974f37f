mod record;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use glyph_align::eval::{evaluate_corpus, load_annotation_dir, DEFAULT_THRESHOLDS};
use glyph_align::features::{extract_builtin_features, similarity_volume, DEFAULT_GRID};
use glyph_align::geometry::Skeleton;
use glyph_align::pipeline::{
    align_corpus, align_sign, align_with_features, directory_prototypes, file_features, load_gray,
    load_skeleton, render_overlay, render_svg, FeatureBackend, PipelineConfig, PipelineError,
    TabletSpec,
};
use glyph_align::saliency::compute_saliency;
use glyph_align::synth::{builtin_signs, generate_corpus, CorpusManifest, PerturbSpec, RenderStyle};
use glyph_align::{features::load_feature_map, pipeline::align_tablet};
use serde::Serialize;

use settings::PipelineArgs;

#[derive(Debug, Parser)]
#[command(name = "glyph-align", version, about = "Align wedge-stroke prototypes to sign images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align one prototype to one image, or every case of a corpus manifest.
    Align(AlignArgs),
    /// Align every annotated box of a tablet image and render a hand copy.
    Tablet(TabletArgs),
    /// Write the saliency map of a prototype against a target.
    #[command(alias = "extract-saliency")]
    Saliency(SaliencyArgs),
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Score predictions against ground-truth annotations.
    Eval(EvalArgs),
    /// Extract built-in features to an FMAP file.
    Features(FeaturesArgs),
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with pipeline settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, clap::Args)]
struct AlignArgs {
    #[arg(long, required_unless_present = "manifest")]
    proto_img: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    proto_skel: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    target: Option<PathBuf>,
    /// Corpus manifest from `synth`; replaces the single-image inputs.
    #[arg(long, conflicts_with_all = ["proto_img", "proto_skel", "target"])]
    manifest: Option<PathBuf>,
    /// Also write an SVG overlay.
    #[arg(long)]
    svg: bool,
    /// Also write a PNG overlay.
    #[arg(long)]
    png: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct TabletArgs {
    /// Tablet description: image path, boxes and prototype directory.
    #[arg(long)]
    spec: PathBuf,
    /// Also write a PNG overlay.
    #[arg(long)]
    png: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct SaliencyArgs {
    #[arg(long)]
    proto_img: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of prototype skeleton JSON files (default: built-in catalog).
    #[arg(long)]
    prototypes: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.9)]
    scale_min: f64,
    #[arg(long, default_value_t = 1.1)]
    scale_max: f64,
    #[arg(long, default_value_t = 20.0)]
    translation: f64,
    /// Maximum per-stroke keypoint jitter in pixels.
    #[arg(long, default_value_t = 5.0)]
    jitter: f64,
    #[arg(long, default_value_t = 12.0)]
    stroke_width: f64,
    /// Gaussian noise sigma in gray levels.
    #[arg(long, default_value_t = 8.0)]
    noise: f64,
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

#[derive(Debug, clap::Args, Serialize)]
struct EvalArgs {
    /// Directory of predicted annotations (or skeletons).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// Where to write `metrics.json` and the run record.
    #[arg(long)]
    #[serde(skip)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
struct FeaturesArgs {
    #[arg(long)]
    image: PathBuf,
    /// Grid side in cells.
    #[arg(long, default_value_t = DEFAULT_GRID.0)]
    grid: usize,
    #[arg(long)]
    #[serde(skip)]
    out_dir: PathBuf,
}

/// Resolved settings as recorded in `run.json`.
#[derive(Debug, Serialize)]
struct Resolved<'a> {
    settings: &'a PipelineArgs,
    pipeline: &'a PipelineConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Ok(false) when some units failed but outputs were still written.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Align(a) => cmd_align(a),
        Command::Tablet(a) => cmd_tablet(a),
        Command::Saliency(a) => cmd_saliency(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Features(a) => cmd_features(a),
    }
}

fn staged(e: PipelineError) -> anyhow::Error {
    anyhow!("[{}] {e}", e.stage())
}

/// Merges config and flags, sets up the worker pool and output directory.
fn prepare(common: &Common) -> Result<(PipelineArgs, PipelineConfig)> {
    let merged = settings::resolve(common.pipeline.clone(), common.config.as_deref())?;
    let cfg = merged.pipeline_config()?;
    if let Some(n) = merged.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    Ok((merged, cfg))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn file_stem(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n).to_string())
        .unwrap_or_else(|| "target".into())
}

fn status(failures: usize) -> String {
    if failures == 0 {
        "ok".into()
    } else {
        format!("{failures} failed")
    }
}

fn cmd_align(a: AlignArgs) -> Result<bool> {
    let (merged, cfg) = prepare(&a.common)?;
    let out = &a.common.out_dir;
    let resolved = Resolved {
        settings: &merged,
        pipeline: &cfg,
    };
    if let Some(manifest_path) = &a.manifest {
        return align_manifest(manifest_path, out, &cfg, &resolved, a.svg, a.png);
    }

    let (proto_img_path, proto_skel_path, target_path) = match (&a.proto_img, &a.proto_skel, &a.target) {
        (Some(p), Some(s), Some(t)) => (p, s, t),
        _ => bail!("--proto-img, --proto-skel and --target are required without --manifest"),
    };
    let proto_img = load_gray(proto_img_path).map_err(staged)?;
    let proto = load_skeleton(proto_skel_path).map_err(staged)?;
    let target = load_gray(target_path).map_err(staged)?;
    let result = match cfg.features {
        FeatureBackend::Builtin => align_sign(&proto_img, &proto, &target, &cfg),
        FeatureBackend::File => {
            let pf = file_features(&merged.proto_fmap).map_err(staged)?;
            let tf = file_features(&merged.target_fmap).map_err(staged)?;
            align_with_features(&proto_img, &proto, pf.as_ref(), tf.as_ref(), &cfg)
        }
    }
    .map_err(staged)?;

    let id = file_stem(target_path);
    write_json(&out.join("alignment.json"), &result.record())?;
    result
        .annotation(&id)
        .save(out.join("prediction.json"))
        .context("writing prediction")?;
    result
        .skeleton
        .save(out.join("skeleton.json"))
        .context("writing skeleton")?;
    write_overlays(out, "aligned", &target, target_path, &result.skeleton, a.svg, a.png)?;

    let mut inputs: Vec<&Path> = vec![proto_img_path, proto_skel_path, target_path];
    if cfg.features == FeatureBackend::File {
        inputs.extend(merged.proto_fmap.iter().map(PathBuf::as_path));
        inputs.extend(merged.target_fmap.iter().map(PathBuf::as_path));
    }
    record::write(out, "align", &resolved, &inputs, "ok")?;
    Ok(true)
}

fn write_overlays(
    out: &Path,
    stem: &str,
    background: &image::GrayImage,
    background_path: &Path,
    skeleton: &Skeleton,
    svg: bool,
    png: bool,
) -> Result<()> {
    let layers = [(0usize, skeleton)];
    if svg {
        let href = background_path.to_string_lossy();
        let doc = render_svg(background.width(), background.height(), Some(&href), &layers);
        let p = out.join(format!("{stem}.svg"));
        fs::write(&p, doc).with_context(|| format!("writing {}", p.display()))?;
    }
    if png {
        let p = out.join(format!("{stem}.png"));
        render_overlay(background, &layers)
            .save(&p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn align_manifest(
    manifest_path: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    resolved: &Resolved,
    svg: bool,
    png: bool,
) -> Result<bool> {
    if cfg.features != FeatureBackend::Builtin {
        bail!("corpus alignment supports only built-in features");
    }
    let manifest = CorpusManifest::load(manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let items = align_corpus(&manifest, base, cfg);

    let pred_dir = out.join("predictions");
    let detail_dir = out.join("alignments");
    fs::create_dir_all(&pred_dir)?;
    fs::create_dir_all(&detail_dir)?;
    let mut failures = 0;
    for (item, case) in items.iter().zip(&manifest.cases) {
        match &item.result {
            Ok(r) => {
                r.annotation(&item.id)
                    .save(pred_dir.join(format!("{}.json", item.id)))
                    .context("writing prediction")?;
                write_json(&detail_dir.join(format!("{}.json", item.id)), &r.record())?;
                if svg || png {
                    let img_path = base.join(&case.image_path);
                    let img = load_gray(&img_path).map_err(staged)?;
                    write_overlays(&detail_dir, &item.id, &img, &img_path, &r.skeleton, svg, png)?;
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: [{}] {e}", item.id, e.stage());
            }
        }
    }
    println!("aligned {}/{} cases", items.len() - failures, items.len());

    let mut inputs: Vec<PathBuf> = vec![manifest_path.to_path_buf()];
    for c in &manifest.cases {
        inputs.push(base.join(&c.image_path));
    }
    let mut protos: Vec<PathBuf> = manifest
        .cases
        .iter()
        .flat_map(|c| [base.join(&c.proto_image_path), base.join(&c.proto_skeleton_path)])
        .collect();
    protos.sort();
    protos.dedup();
    inputs.extend(protos);
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record::write(out, "align", resolved, &refs, &status(failures))?;
    Ok(failures == 0)
}

#[derive(Debug, Serialize)]
struct BoxReport {
    index: usize,
    sign_name: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<glyph_align::Point>>,
}

fn cmd_tablet(a: TabletArgs) -> Result<bool> {
    let (merged, cfg) = prepare(&a.common)?;
    if cfg.features != FeatureBackend::Builtin {
        bail!("tablet alignment supports only built-in features");
    }
    let out = &a.common.out_dir;
    let spec = TabletSpec::load(&a.spec).map_err(staged)?;
    let base = a.spec.parent().unwrap_or(Path::new("."));
    let image_path = base.join(&spec.image_path);
    let proto_dir = base.join(&spec.prototype_dir);
    let tablet = load_gray(&image_path).map_err(staged)?;
    let protos = directory_prototypes(&proto_dir);
    let result = align_tablet(&tablet, &spec.boxes, &protos, &cfg);

    let mut reports = Vec::with_capacity(result.boxes.len());
    let mut layers = Vec::new();
    for b in &result.boxes {
        match &b.result {
            Ok((skel, _)) => {
                reports.push(BoxReport {
                    index: b.index,
                    sign_name: b.sign_name.clone(),
                    ok: true,
                    stage: None,
                    error: None,
                    keypoints: Some(skel.keypoints()),
                });
                layers.push((b.index, skel));
            }
            Err(e) => {
                eprintln!("box {} ({}): [{}] {e}", b.index, b.sign_name, e.stage());
                reports.push(BoxReport {
                    index: b.index,
                    sign_name: b.sign_name.clone(),
                    ok: false,
                    stage: Some(e.stage()),
                    error: Some(e.to_string()),
                    keypoints: None,
                });
            }
        }
    }
    let href = spec.image_path.to_string_lossy();
    let svg = render_svg(result.width, result.height, Some(&href), &layers);
    fs::write(out.join("hand_copy.svg"), svg).context("writing hand_copy.svg")?;
    if a.png {
        render_overlay(&tablet, &layers)
            .save(out.join("hand_copy.png"))
            .context("writing hand_copy.png")?;
    }
    write_json(&out.join("boxes.json"), &reports)?;

    let failures = result.failures();
    println!("aligned {}/{} boxes", reports.len() - failures, reports.len());
    let resolved = Resolved {
        settings: &merged,
        pipeline: &cfg,
    };
    let mut inputs: Vec<PathBuf> = vec![a.spec.clone(), image_path];
    let mut signs: Vec<&str> = spec.boxes.iter().map(|b| b.sign_name.as_str()).collect();
    signs.sort_unstable();
    signs.dedup();
    for s in signs {
        for ext in ["png", "json"] {
            let p = proto_dir.join(format!("{s}.{ext}"));
            if p.exists() {
                inputs.push(p);
            }
        }
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record::write(out, "tablet", &resolved, &refs, &status(failures))?;
    Ok(failures == 0)
}

#[derive(Debug, Serialize)]
struct SaliencyReport {
    height: usize,
    width: usize,
    source_size: (usize, usize),
    values: Vec<f64>,
}

fn cmd_saliency(a: SaliencyArgs) -> Result<bool> {
    let (merged, cfg) = prepare(&a.common)?;
    let out = &a.common.out_dir;
    let proto_img = load_gray(&a.proto_img).map_err(staged)?;
    let mut inputs: Vec<&Path> = vec![&a.proto_img, &a.target];
    let (pf, tf) = match cfg.features {
        FeatureBackend::Builtin => {
            let target = load_gray(&a.target).map_err(staged)?;
            (
                extract_builtin_features(&proto_img, cfg.grid),
                extract_builtin_features(&target, cfg.grid),
            )
        }
        FeatureBackend::File => {
            let p = &merged.proto_fmap[0];
            let t = &merged.target_fmap[0];
            inputs.push(p);
            inputs.push(t);
            (
                load_feature_map(p).map_err(|e| staged(e.into()))?,
                load_feature_map(t).map_err(|e| staged(e.into()))?,
            )
        }
    };
    let volume = similarity_volume(&pf, &tf).map_err(|e| staged(e.into()))?;
    let sal = compute_saliency(&volume, &proto_img, cfg.fg_threshold).map_err(|e| staged(e.into()))?;
    sal.to_image()
        .save(out.join("saliency.png"))
        .context("writing saliency.png")?;
    write_json(
        &out.join("saliency.json"),
        &SaliencyReport {
            height: sal.height(),
            width: sal.width(),
            source_size: sal.source_size(),
            values: sal.values().to_vec(),
        },
    )?;
    let resolved = Resolved {
        settings: &merged,
        pipeline: &cfg,
    };
    record::write(out, "saliency", &resolved, &inputs, "ok")?;
    Ok(true)
}

fn cmd_synth(a: SynthArgs) -> Result<bool> {
    let spec = PerturbSpec {
        rotation_max_deg: a.rotation,
        scale_range: (a.scale_min, a.scale_max),
        translation_max: a.translation,
        per_stroke_jitter_max: a.jitter,
        rng_seed: a.seed,
    };
    spec.validate().context("invalid perturbation settings")?;
    let style = RenderStyle {
        stroke_width: a.stroke_width,
        noise_sigma: a.noise,
        ..RenderStyle::default()
    };
    let mut inputs = Vec::new();
    let protos = match &a.prototypes {
        None => builtin_signs(),
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no prototype skeletons in {}", dir.display());
            }
            let protos = paths
                .iter()
                .map(|p| load_skeleton(p).map_err(staged))
                .collect::<Result<Vec<_>>>()?;
            inputs = paths;
            protos
        }
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let manifest = generate_corpus(&a.out_dir, &protos, a.cases, a.seed, &spec, &style)
        .context("[synth] generating corpus")?;
    println!(
        "wrote {} cases to {}",
        manifest.cases.len(),
        a.out_dir.join("manifest.json").display()
    );
    #[derive(Serialize)]
    struct SynthRecord<'a> {
        args: &'a SynthArgs,
        perturbation: &'a PerturbSpec,
        style: &'a RenderStyle,
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    record::write(
        &a.out_dir,
        "synth",
        &SynthRecord {
            args: &a,
            perturbation: &spec,
            style: &style,
        },
        &refs,
        "ok",
    )?;
    Ok(true)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        bail!("thresholds must be finite and non-negative");
    }
    let preds = load_annotation_dir(&a.pred)
        .with_context(|| format!("[eval] loading predictions from {}", a.pred.display()))?;
    let gts = load_annotation_dir(&a.gt)
        .with_context(|| format!("[eval] loading ground truth from {}", a.gt.display()))?;
    let report = evaluate_corpus(&preds, &gts, &a.thresholds).context("[eval]")?;
    print!("{}", report.to_table());
    for (t, f) in a.thresholds.iter().zip(&report.mean_image_f1) {
        println!("mean image F1@{t}: {f:.4}");
    }
    if let Some(out) = &a.out_dir {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("metrics.json"), report.to_json() + "\n").context("writing metrics.json")?;
        record::write(out, "eval", &a, &[], "ok")?;
    }
    Ok(true)
}

fn cmd_features(a: FeaturesArgs) -> Result<bool> {
    if a.grid == 0 {
        bail!("--grid must be positive");
    }
    let img = load_gray(&a.image).map_err(staged)?;
    let fm = extract_builtin_features(&img, (a.grid, a.grid));
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let out = a.out_dir.join(format!("{}.fmap", file_stem(&a.image)));
    fm.save(&out)
        .with_context(|| format!("[features] writing {}", out.display()))?;
    println!(
        "wrote {} ({}×{}×{})",
        out.display(),
        fm.channels(),
        fm.height(),
        fm.width()
    );
    record::write(&a.out_dir, "features", &a, &[&a.image], "ok")?;
    Ok(true)
}
