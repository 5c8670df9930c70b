mod common;

use std::path::Path;

use candle_core::{Device, Tensor};

use common::{host, max_abs};
use soma::checkpoint::RngState;
use soma::config::{preset, RunConfig};
use soma::data::{
    read_raster, write_raster, write_synthetic_dataset, PerturbationSpec, SceneConfig, Split, SyntheticDatasetSpec,
    MANIFEST_FILE,
};
use soma::eval::{cmr, r_avg};
use soma::geometry::{read_field, warp, Padding};
use soma::pipeline::{evaluate, invert_field, read_warped, register};
use soma::train::Trainer;

fn config(data: &Path, size: usize) -> RunConfig {
    let mut cfg = preset("desk").unwrap();
    cfg.data.root = data.to_path_buf();
    cfg.data.height = size;
    cfg.data.width = size;
    cfg
}

/// Saves an untrained model; `flow_gain` makes its finest flow head non-zero.
fn checkpoint(cfg: &RunConfig, path: &Path, flow_gain: Option<f64>) {
    let trainer = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
    if let Some(g) = flow_gain {
        assert!(trainer.model().store().fill_prefix("glam.flow1.head", g).unwrap() > 0);
    }
    let rng = RngState {
        seed: cfg.seed,
        word_pos: 0,
        batches_done: 0,
    };
    trainer.checkpoint(0, rng).save(path).unwrap();
}

fn identity_dataset(root: &Path, size: usize) {
    write_synthetic_dataset(
        root,
        &SyntheticDatasetSpec {
            scene: SceneConfig {
                height: size,
                width: size,
                ..SceneConfig::default()
            },
            counts: vec![(Split::Val, 3)],
            perturbation: PerturbationSpec::none(),
            seed: 9,
        },
    )
    .unwrap();
}

#[test]
fn untrained_model_registers_identity_pairs_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    identity_dataset(&data, 32);
    let cfg = config(&data, 32);
    let ckpt = dir.path().join("zero.safetensors");
    checkpoint(&cfg, &ckpt, None);
    let out = dir.path().join("eval");
    let (runs, files) = evaluate(&[ckpt.clone()], Split::Val, None, &out).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].records.len(), 3);
    assert_eq!(r_avg(&runs[0].records).unwrap(), 0.0);
    assert_eq!(cmr(&runs[0].records, 1.0).unwrap(), 100.0);

    let first = std::fs::read(&files.metrics).unwrap();
    evaluate(&[ckpt], Split::Val, None, &out).unwrap();
    assert_eq!(std::fs::read(&files.metrics).unwrap(), first);
}

#[test]
fn same_configuration_twice_gets_distinct_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    identity_dataset(&data, 32);
    let mut cfg = config(&data, 32);
    let a = dir.path().join("a.safetensors");
    checkpoint(&cfg, &a, None);
    cfg.name = "second".into();
    let b = dir.path().join("b.safetensors");
    checkpoint(&cfg, &b, None);
    let (runs, files) = evaluate(&[a, b], Split::Val, None, &dir.path().join("eval")).unwrap();
    let labels: Vec<&str> = runs.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(labels, ["full", "full_second"]);
    assert_eq!(files.errors.len(), 2);
}

#[test]
fn evaluation_without_a_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    identity_dataset(&data, 32);
    std::fs::remove_file(data.join("val").join(MANIFEST_FILE)).unwrap();
    let cfg = config(&data, 32);
    let ckpt = dir.path().join("zero.safetensors");
    checkpoint(&cfg, &ckpt, None);
    assert!(evaluate(&[ckpt.clone()], Split::Val, None, &dir.path().join("eval")).is_err());
    // and so does an empty split
    assert!(evaluate(&[ckpt], Split::Test, None, &dir.path().join("eval")).is_err());
}

#[test]
fn registration_round_trips_through_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 32);
    let ckpt = dir.path().join("model.safetensors");
    checkpoint(&cfg, &ckpt, Some(2e-3));

    // sides that are not multiples of 16 are padded internally and cropped back
    let (h, w) = (40, 56);
    let tile = soma::data::generate_tile(
        &SceneConfig {
            height: 48,
            width: 64,
            ..SceneConfig::default()
        },
        4,
    );
    let optical = Tensor::from_vec(tile.optical, (48, 64, 3), &Device::Cpu)
        .unwrap()
        .permute((2, 0, 1))
        .unwrap()
        .narrow(1, 0, h)
        .unwrap()
        .narrow(2, 0, w)
        .unwrap();
    let sar = Tensor::from_vec(tile.sar, (1, 48, 64), &Device::Cpu)
        .unwrap()
        .narrow(1, 0, h)
        .unwrap()
        .narrow(2, 0, w)
        .unwrap();
    let (op, sp) = (dir.path().join("optical.png"), dir.path().join("sar.png"));
    write_raster(&op, &optical.contiguous().unwrap(), false).unwrap();
    write_raster(&sp, &sar.contiguous().unwrap(), true).unwrap();

    let out = dir.path().join("out");
    let reg = register(&ckpt, &op, &sp, &out).unwrap();
    assert_eq!((reg.height, reg.width), (h, w));
    let image = read_raster(&op, 3).unwrap();
    let png = read_raster(&reg.warped_png, 3).unwrap();
    assert_eq!(png.dims(), image.dims());

    let field = read_field(&reg.field, &Device::Cpu).unwrap();
    let matched = read_field(&reg.match_field, &Device::Cpu).unwrap();
    assert_eq!(field.dims(), (1, h, w));
    assert!(max_abs(matched.tensor()) > 0.05, "the perturbed model should move pixels");
    let again = warp(&image.unsqueeze(0).unwrap(), &field, Padding::Zeros).unwrap().squeeze(0).unwrap();
    let saved = read_warped(&reg.warped_raw).unwrap();
    assert!(max_abs(&(again - saved).unwrap()) < 1e-6);

    // the applied field undoes the matched one: m(y + f(y)) + f(y) = 0
    let back = warp(matched.tensor(), &field, Padding::Border).unwrap();
    let residual = (back + field.tensor()).unwrap();
    let worst = host(&residual.abs().unwrap().max_keepdim(1).unwrap())
        .into_iter()
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-3, "inverse residual {worst:.2e} px");
    // inverting twice returns the original away from the clamped border,
    // within two inversion residuals
    let twice = invert_field(&field, 30).unwrap();
    let reach = max_abs(matched.tensor()).ceil() as usize + 2;
    let inner = |t: &Tensor| t.narrow(2, reach, h - 2 * reach).unwrap().narrow(3, reach, w - 2 * reach).unwrap();
    let d = max_abs(&(inner(twice.tensor()) - inner(matched.tensor())).unwrap());
    assert!(d < 2e-3, "double inversion differs by {d:.2e} px (margin {reach})");
}

#[test]
fn self_registration_of_the_mini_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 128);
    let ckpt = dir.path().join("model.safetensors");
    checkpoint(&cfg, &ckpt, Some(1e-3));
    let mini = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini/val");
    let image = mini.join("optical/val_000.png");
    let reg = register(&ckpt, &image, &mini.join("sar/val_000.png"), &dir.path().join("out")).unwrap();
    let field = read_field(&reg.field, &Device::Cpu).unwrap();
    let norm = host(&field.tensor().sqr().unwrap().sum(1).unwrap().sqrt().unwrap().mean_all().unwrap())[0];
    println!("self-registration mean field norm {norm:.4} px (untrained weights)");
    assert_eq!((reg.height, reg.width), (128, 128));
}
