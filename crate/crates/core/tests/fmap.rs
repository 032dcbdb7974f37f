use glyph_align::features::{load_feature_map, similarity_volume, FeatureError, FeatureMap};
use glyph_align::global_align::{FeatureProvider, FixedFeatures};
use glyph_align::pipeline::file_features;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A map shaped like an exported diffusion feature file.
fn exporter_like(seed: u64) -> FeatureMap {
    let (c, h, w) = (1920, 64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..h * w {
        let v: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    FeatureMap::from_vectors(c, h, w, (512, 512), data).unwrap()
}

#[test]
fn exporter_sized_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proto.fmap");
    let fm = exporter_like(1);
    fm.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 28 + 1920 * 64 * 64 * 4);
    assert_eq!(&bytes[..8], b"FMAP0001");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1920);

    let back = load_feature_map(&path).unwrap();
    assert_eq!(back, fm);
    assert_eq!((back.channels(), back.height(), back.width()), (1920, 64, 64));
    assert_eq!(back.source_size(), (512, 512));
}

#[test]
fn validator_rejects_corrupt_files() {
    let fm = FeatureMap::from_vectors(2, 1, 2, (16, 32), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut good = Vec::new();
    fm.write_to(&mut good).unwrap();
    assert_eq!(FeatureMap::from_bytes(&good).unwrap(), fm);

    let mut bad_magic = good.clone();
    bad_magic[7] = b'2';
    assert!(matches!(FeatureMap::from_bytes(&bad_magic), Err(FeatureError::BadMagic)));

    let truncated = &good[..good.len() - 4];
    assert!(matches!(FeatureMap::from_bytes(truncated), Err(FeatureError::DimMismatch(_))));

    // Scale the first channel of the first cell: norm 2 instead of 1.
    let mut unnormalized = good.clone();
    unnormalized[28..32].copy_from_slice(&2.0f32.to_le_bytes());
    assert!(matches!(
        FeatureMap::from_bytes(&unnormalized),
        Err(FeatureError::NotNormalized { .. })
    ));
}

#[test]
fn file_provider_feeds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let a = exporter_like(2);
    let pa = dir.path().join("a.fmap");
    a.save(&pa).unwrap();

    let provider = file_features(&[pa.clone()]).unwrap();
    assert_eq!(provider.features(0).unwrap(), FixedFeatures(a.clone()).features(0).unwrap());
    assert!(file_features(&[]).is_err());
    assert!(file_features(&[dir.path().join("missing.fmap")]).is_err());

    // Same map twice: every cell is its own best match.
    let s = similarity_volume(&a, &a).unwrap();
    let n = s.proto_cells();
    let diag: f64 = (0..n).map(|i| f64::from(s.data()[i * n + i])).sum::<f64>() / n as f64;
    assert!((diag - 1.0).abs() < 1e-3);
}
