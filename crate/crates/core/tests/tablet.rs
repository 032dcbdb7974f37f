use std::path::Path;

use glyph_align::geometry::{Point, Skeleton};
use glyph_align::pipeline::{
    align_sign, align_tablet, crop_box, directory_prototypes, load_skeleton, render_svg,
    PipelineConfig, SignBox,
};
use glyph_align::synth::{builtin_signs, make_case, render_skeleton, PerturbSpec, RenderStyle};
use image::{imageops, GrayImage, Luma};

struct Fixture {
    _dir: tempfile::TempDir,
    tablet: GrayImage,
    boxes: Vec<SignBox>,
    gts: Vec<Skeleton>,
    protos: std::path::PathBuf,
}

/// Four synthetic signs pasted into the quadrants of a 1024×1024 tablet,
/// with prototypes written as `<sign>.png` / `<sign>.json`.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let protos = dir.path().join("protos");
    std::fs::create_dir_all(&protos).unwrap();
    let signs = builtin_signs();
    let mut tablet = GrayImage::from_pixel(1024, 1024, Luma([230]));
    let mut boxes = Vec::new();
    let mut gts = Vec::new();
    for (k, proto) in signs.iter().take(4).enumerate() {
        let name = proto.sign_name();
        render_skeleton(proto, &RenderStyle::clean())
            .unwrap()
            .save(protos.join(format!("{name}.png")))
            .unwrap();
        proto.save(protos.join(format!("{name}.json"))).unwrap();
        let case = make_case(
            proto,
            &PerturbSpec {
                rng_seed: 40 + k as u64,
                ..Default::default()
            },
            &RenderStyle::default(),
        )
        .unwrap();
        let (x, y) = (512 * (k as u32 % 2), 512 * (k as u32 / 2));
        imageops::replace(&mut tablet, &case.image, x.into(), y.into());
        boxes.push(SignBox {
            x,
            y,
            w: 512,
            h: 512,
            sign_name: name.to_string(),
        });
        gts.push(case.gt_skeleton.map_points(|p| Point::new(p.x + x as f64, p.y + y as f64)));
    }
    Fixture {
        _dir: dir,
        tablet,
        boxes,
        gts,
        protos,
    }
}

fn mean_error(a: &Skeleton, b: &Skeleton) -> f64 {
    let kp = a.keypoints();
    kp.iter().zip(b.keypoints()).map(|(p, q)| p.distance(&q)).sum::<f64>() / kp.len() as f64
}

#[test]
fn grid_tablet_matches_single_sign_results() {
    let f = fixture();
    let cfg = PipelineConfig::default();
    let lookup = directory_prototypes(&f.protos);
    let res = align_tablet(&f.tablet, &f.boxes, &lookup, &cfg);
    assert_eq!(res.failures(), 0);
    assert_eq!((res.width, res.height), (1024, 1024));

    let mut layers = Vec::new();
    for (k, b) in res.boxes.iter().enumerate() {
        assert_eq!(b.index, k);
        let (skel, _) = b.result.as_ref().unwrap();
        // The same crop aligned on its own, then shifted by the box origin.
        let crop = crop_box(&f.tablet, &f.boxes[k]).unwrap();
        let (pimg, proto) = lookup(&f.boxes[k].sign_name).unwrap();
        let single = align_sign(&pimg, &proto, &crop, &cfg.for_unit(k)).unwrap();
        let shifted = single
            .skeleton
            .map_points(|p| Point::new(p.x + f.boxes[k].x as f64, p.y + f.boxes[k].y as f64));
        let (e_tablet, e_single) = (mean_error(skel, &f.gts[k]), mean_error(&shifted, &f.gts[k]));
        assert!((e_tablet - e_single).abs() < 1e-9, "box {k}: {e_tablet} vs {e_single}");
        layers.push((k, skel));
    }
    let svg = render_svg(1024, 1024, None, &layers);
    assert_eq!(svg.matches("<g id=\"box-").count(), 4);
}

/// Clean prototypes on a tablet upscaled by 1.5: each 768² box resizes back
/// to the prototype, so the global fit is near exact and any error comes from
/// the crop/resize bookkeeping.
#[test]
fn resized_boxes_map_back_to_tablet_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let mut small = GrayImage::from_pixel(1024, 1024, Luma([230]));
    let mut boxes = Vec::new();
    let mut gts = Vec::new();
    for (k, proto) in builtin_signs().iter().take(4).enumerate() {
        let name = proto.sign_name();
        let img = render_skeleton(proto, &RenderStyle::clean()).unwrap();
        img.save(dir.path().join(format!("{name}.png"))).unwrap();
        proto.save(dir.path().join(format!("{name}.json"))).unwrap();
        let (x, y) = (512 * (k as u32 % 2), 512 * (k as u32 / 2));
        imageops::replace(&mut small, &img, x.into(), y.into());
        let (bx, by) = (x * 3 / 2, y * 3 / 2);
        boxes.push(SignBox {
            x: bx,
            y: by,
            w: 768,
            h: 768,
            sign_name: name.to_string(),
        });
        gts.push(proto.map_points(|p| Point::new(bx as f64 + p.x * 1.5, by as f64 + p.y * 1.5)));
    }
    let tablet = imageops::resize(&small, 1536, 1536, imageops::FilterType::Triangle);
    let cfg = PipelineConfig {
        no_refine: true,
        ..Default::default()
    };
    let res = align_tablet(&tablet, &boxes, &directory_prototypes(dir.path()), &cfg);
    assert_eq!(res.failures(), 0);
    for (b, gt) in res.boxes.iter().zip(&gts) {
        let (skel, _) = b.result.as_ref().unwrap();
        let e = mean_error(skel, gt);
        assert!(e < 3.0, "box {} error {e}", b.index);
    }
}

#[test]
fn out_of_bounds_box_fails_alone() {
    let f = fixture();
    let mut boxes = f.boxes.clone();
    boxes.push(SignBox {
        x: 900,
        y: 900,
        w: 512,
        h: 512,
        sign_name: f.boxes[0].sign_name.clone(),
    });
    let cfg = PipelineConfig {
        no_refine: true,
        ..Default::default()
    };
    let res = align_tablet(&f.tablet, &boxes, &directory_prototypes(&f.protos), &cfg);
    assert_eq!(res.failures(), 1);
    let bad = res.boxes[4].result.as_ref().unwrap_err();
    assert_eq!(bad.stage(), "tablet");
    assert!(res.boxes[..4].iter().all(|b| b.result.is_ok()));
}

#[test]
fn empty_box_list_gives_empty_svg() {
    let f = fixture();
    let res = align_tablet(&f.tablet, &[], &directory_prototypes(&f.protos), &PipelineConfig::default());
    assert!(res.boxes.is_empty());
    let svg = render_svg(res.width, res.height, None, &[]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("<g "));
}

#[test]
fn missing_prototype_is_a_load_error() {
    let f = fixture();
    let boxes = vec![SignBox {
        x: 0,
        y: 0,
        w: 512,
        h: 512,
        sign_name: "NOPE".into(),
    }];
    let res = align_tablet(&f.tablet, &boxes, &directory_prototypes(&f.protos), &PipelineConfig::default());
    assert_eq!(res.boxes[0].result.as_ref().unwrap_err().stage(), "load");

    let err = load_skeleton(Path::new("/nonexistent/skeleton.json")).unwrap_err();
    assert_eq!(err.stage(), "load");
}
