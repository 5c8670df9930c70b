mod common;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{host, max_abs};
use soma::data::{
    load_dataset, read_manifest, write_manifest, write_synthetic_dataset, ImagePair, ManifestEntry, Perturbation,
    PerturbationSource, PerturbationSpec, SceneConfig, Split, SyntheticDatasetSpec, MANIFEST_FILE,
};
use soma::geometry::{affine_to_flow, AffineMatrix, AffineParams, Level};

fn mini() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mini")
}

fn small_dataset(root: &std::path::Path) {
    write_synthetic_dataset(
        root,
        &SyntheticDatasetSpec {
            scene: SceneConfig {
                height: 32,
                width: 32,
                ..SceneConfig::default()
            },
            counts: vec![(Split::Train, 2), (Split::Test, 2)],
            perturbation: PerturbationSpec::default(),
            seed: 1,
        },
    )
    .unwrap();
}

#[test]
fn empty_directory_gives_empty_splits() {
    let dir = tempfile::tempdir().unwrap();
    for split in Split::ALL {
        let ds = load_dataset(dir.path(), split, &PerturbationSpec::default()).unwrap();
        assert!(ds.is_empty());
        assert!(ds.pairs(0, 3).unwrap().is_empty());
    }
}

#[test]
fn bundled_mini_dataset_loads_with_all_invariants() {
    let root = mini();
    let train = load_dataset(&root, Split::Train, &PerturbationSpec::default()).unwrap();
    assert_eq!(train.len(), 16);
    assert!(matches!(train.source(), PerturbationSource::OnTheFly(_)));
    for pair in train.pairs(0, 3).unwrap() {
        pair.validate().unwrap();
        assert_eq!(pair.size(), (128, 128));
    }
    for split in [Split::Val, Split::Test] {
        let ds = load_dataset(&root, split, &PerturbationSpec::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(matches!(ds.source(), PerturbationSource::Fixed(_)));
    }
}

#[test]
fn ground_truth_is_the_flow_of_the_recorded_theta_and_is_stable() {
    let root = mini();
    let first = load_dataset(&root, Split::Test, &PerturbationSpec::default()).unwrap().pairs(0, 3).unwrap();
    let again = load_dataset(&root, Split::Test, &PerturbationSpec::none()).unwrap().pairs(5, 3).unwrap();
    for (a, b) in first.iter().zip(&again) {
        assert_eq!(host(a.gt.tensor()), host(b.gt.tensor()), "{}", a.meta.tile_id);
        let theta = AffineParams::from_matrices(&[a.meta.theta], DType::F64, &Device::Cpu).unwrap();
        let (h, w) = a.size();
        let flow = affine_to_flow(&theta, h, w, Level::L1).unwrap();
        let gt = a.gt.tensor().to_dtype(DType::F64).unwrap();
        let d = max_abs(&(gt - flow.tensor()).unwrap());
        assert!(d < 1e-4 * (h as f64), "{}: {d:.2e}", a.meta.tile_id);
    }
}

#[test]
fn manifests_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let entries: Vec<ManifestEntry> = (0..12)
        .map(|i| ManifestEntry {
            tile_id: format!("tile_{i}"),
            theta: AffineMatrix([
                [rng.random_range(0.8..1.2), rng.random(), rng.random_range(-0.5..0.5)],
                [rng.random(), rng.random_range(0.8..1.2), rng.random_range(-0.5..0.5)],
            ]),
            seed: rng.random(),
        })
        .collect();
    let path = dir.path().join(MANIFEST_FILE);
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}

#[test]
fn evaluation_splits_need_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let manifest = dir.path().join("test").join(MANIFEST_FILE);
    let entries = read_manifest(&manifest).unwrap();
    write_manifest(&manifest, &entries[..1]).unwrap();
    assert!(load_dataset(dir.path(), Split::Test, &PerturbationSpec::none()).is_err());
    std::fs::remove_file(&manifest).unwrap();
    let err = load_dataset(dir.path(), Split::Test, &PerturbationSpec::none()).unwrap_err();
    assert!(err.to_string().contains("manifest"), "{err}");
    // the train split draws on the fly instead
    assert!(load_dataset(dir.path(), Split::Train, &PerturbationSpec::default()).is_ok());
}

#[test]
fn unpaired_tiles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    std::fs::remove_file(dir.path().join("train/optical/train_001.png")).unwrap();
    let err = load_dataset(dir.path(), Split::Train, &PerturbationSpec::default()).unwrap_err();
    assert!(err.to_string().contains("train_001"), "{err}");
}

fn aligned(h: usize, w: usize) -> (Tensor, Tensor) {
    let dev = Device::Cpu;
    let optical = Tensor::rand(0f32, 1.0, (3, h, w), &dev).unwrap();
    let sar = Tensor::rand(0.05f32, 1.0, (1, h, w), &dev).unwrap();
    (optical, sar)
}

#[test]
fn identity_perturbation_leaves_sar_untouched() {
    let (optical, sar) = aligned(32, 32);
    let pair = ImagePair::from_aligned(optical, sar.clone(), AffineMatrix::IDENTITY, "mem", "t", 0).unwrap();
    assert_eq!(max_abs(pair.gt.tensor()), 0.0);
    assert_eq!(host(&pair.sar), host(&sar));
    assert!(host(&pair.mask).iter().all(|m| *m == 1.0));
}

#[test]
fn pixels_leaving_the_frame_are_zero_and_masked_out() {
    let (h, w) = (32, 32);
    let (optical, sar) = aligned(h, w);
    let p = Perturbation {
        rotation_deg: 0.0,
        scale: 1.0,
        translation_px: (6.0, -4.0),
    };
    let pair = ImagePair::from_aligned(optical, sar, p.matrix(h, w), "mem", "t", 0).unwrap();
    let gt = pair.gt.to_pixels(0).unwrap();
    let (mask, values) = (host(&pair.mask), host(&pair.sar));
    let mut outside = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (sx, sy) = (x as f64 + gt[i][0], y as f64 + gt[i][1]);
            let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
            assert_eq!(mask[i] > 0.5, inside, "mask at ({x},{y})");
            // a pure translation: SAR pixel (x, y) comes from (x, y) - gt
            let (ox, oy) = (x as f64 - gt[i][0], y as f64 - gt[i][1]);
            let margin = 1e-6;
            if ox < -margin || oy < -margin || ox > (w - 1) as f64 + margin || oy > (h - 1) as f64 + margin {
                outside += 1;
                assert!(values[i].abs() < 1e-6, "SAR at ({x},{y}): {}", values[i]);
            }
        }
    }
    assert!(outside > 0);
}
