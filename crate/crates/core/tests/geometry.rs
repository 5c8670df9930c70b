mod common;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{affine_displacement_oracle, host, max_abs};
use soma::geometry::{
    affine_to_flow, compose, endpoint_error, upsample_field, warp, AffineMatrix, AffineParams, DisplacementField,
    Level, Padding,
};

fn flow_of(m: AffineMatrix, h: usize, w: usize) -> DisplacementField {
    let theta = AffineParams::from_matrices(&[m], DType::F64, &Device::Cpu).unwrap();
    affine_to_flow(&theta, h, w, Level::L1).unwrap()
}

fn field_from(values: Vec<f64>, h: usize, w: usize, level: Level) -> DisplacementField {
    DisplacementField::new(Tensor::from_vec(values, (1, 2, h, w), &Device::Cpu).unwrap(), level).unwrap()
}

#[test]
fn identity_theta_gives_a_zero_field_for_every_size() {
    for (h, w) in [(2, 2), (8, 8), (5, 13), (64, 32)] {
        let f = flow_of(AffineMatrix::IDENTITY, h, w);
        assert_eq!(max_abs(f.tensor()), 0.0, "{h}x{w}");
    }
}

#[test]
fn normalized_translation_is_constant_and_matches_pointwise_mapping() {
    let m = AffineMatrix([[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]]);
    let px = flow_of(m, 4, 4).to_pixels(0).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let want = affine_displacement_oracle(&m, x as f64, y as f64, 4, 4);
            let got = px[y * 4 + x];
            assert!((got[0] - want.0).abs() < 1e-12 && (got[1] - want.1).abs() < 1e-12);
            assert!((got[0] - 0.75).abs() < 1e-12 && got[1].abs() < 1e-12);
        }
    }
}

#[test]
fn rotation_about_the_centre_moves_corners_by_the_chord_length() {
    let (s, c) = 5f64.to_radians().sin_cos();
    let m = AffineMatrix([[c, -s, 0.0], [s, c, 0.0]]);
    let px = flow_of(m, 16, 16).to_pixels(0).unwrap();
    let norm = |p: [f64; 2]| p[0].hypot(p[1]);
    // the centre (7.5, 7.5) is not a pixel; its four neighbours sit 0.71 px away
    let chord = |r: f64| 2.0 * r * 2.5f64.to_radians().sin();
    for (x, y) in [(7, 7), (8, 8), (7, 8), (8, 7)] {
        assert!(norm(px[y * 16 + x]) <= chord(0.5f64.hypot(0.5)) + 1e-12);
    }
    for (x, y) in [(0usize, 0usize), (15, 0), (0, 15), (15, 15)] {
        let r = (x as f64 - 7.5).hypot(y as f64 - 7.5);
        let got = norm(px[y * 16 + x]);
        assert!((got - chord(r)).abs() < 1e-9, "corner ({x},{y}): {got} vs {}", chord(r));
    }
}

#[test]
fn unit_column_shift_moves_contents_and_pads_with_zeros() {
    let dev = Device::Cpu;
    let img: Vec<f64> = (0..25).map(|i| 1.0 + i as f64).collect();
    let t = Tensor::from_vec(img.clone(), (1, 1, 5, 5), &dev).unwrap();
    let shift = DisplacementField::constant(1, 5, 5, Level::L1, (1.0, 0.0), DType::F64, &dev).unwrap();
    let out = host(&warp(&t, &shift, Padding::Zeros).unwrap());
    for y in 0..5 {
        for x in 0..5 {
            let want = if x + 1 < 5 { img[y * 5 + x + 1] } else { 0.0 };
            assert_eq!(out[y * 5 + x], want, "({x},{y})");
        }
    }
}

#[test]
fn fields_pointing_outside_give_pure_padding() {
    let dev = Device::Cpu;
    let t = Tensor::randn(0f64, 1.0, (2, 3, 6, 7), &dev).unwrap();
    let far = DisplacementField::constant(2, 6, 7, Level::L1, (40.0, -25.0), DType::F64, &dev).unwrap();
    assert_eq!(max_abs(&warp(&t, &far, Padding::Zeros).unwrap()), 0.0);
}

#[test]
fn composed_affine_fields_match_the_matrix_product() {
    let (h, w) = (40usize, 48usize);
    let a = AffineMatrix([[1.01, 0.02, 0.03], [-0.015, 0.99, -0.02]]);
    let b = AffineMatrix([[0.995, -0.01, -0.025], [0.02, 1.005, 0.01]]);
    // homogeneous product a·b written out by hand
    let mut ab = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ab[r][c] = a.0[r][0] * b.0[0][c] + a.0[r][1] * b.0[1][c] + if c == 2 { a.0[r][2] } else { 0.0 };
        }
    }
    let composed = compose(&flow_of(a, h, w), &flow_of(b, h, w)).unwrap().to_pixels(0).unwrap();
    let direct = flow_of(AffineMatrix(ab), h, w).to_pixels(0).unwrap();
    let mut worst = 0.0f64;
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let (p, q) = (composed[y * w + x], direct[y * w + x]);
            worst = worst.max((p[0] - q[0]).abs().max((p[1] - q[1]).abs()));
        }
    }
    assert!(worst < 1e-4, "interior deviation {worst:.2e} px");
}

#[test]
fn upsampling_preserves_zero_fields_and_linear_ramps() {
    let dev = Device::Cpu;
    let zero = DisplacementField::zeros(1, 4, 6, Level::L8, DType::F64, &dev).unwrap();
    assert_eq!(max_abs(upsample_field(&zero, Level::L4).unwrap().tensor()), 0.0);

    let (h, w) = (4usize, 6usize);
    let ramp = |x: f64, y: f64| [0.3 * x - 0.2 * y + 0.5, -0.1 * x + 0.4 * y - 1.0];
    let mut v = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let r = ramp(x as f64, y as f64);
            v[y * w + x] = r[0];
            v[h * w + y * w + x] = r[1];
        }
    }
    let up = upsample_field(&field_from(v, h, w, Level::L8), Level::L4).unwrap();
    assert_eq!(up.dims(), (1, 2 * h, 2 * w));
    let px = up.to_pixels(0).unwrap();
    let (fh, fw) = (2 * h, 2 * w);
    for y in 0..fh {
        for x in 0..fw {
            let cx = x as f64 * (w - 1) as f64 / (fw - 1) as f64;
            let cy = y as f64 * (h - 1) as f64 / (fh - 1) as f64;
            let r = ramp(cx, cy);
            let got = px[y * fw + x];
            assert!((got[0] - 2.0 * r[0]).abs() < 1e-5 && (got[1] - 2.0 * r[1]).abs() < 1e-5);
        }
    }
}

#[test]
fn endpoint_error_matches_definitions_and_loop_oracle() {
    let dev = Device::Cpu;
    let a = DisplacementField::new(Tensor::randn(0f64, 1.0, (1, 2, 4, 4), &dev).unwrap(), Level::L1).unwrap();
    assert_eq!(max_abs(&endpoint_error(&a, &a).unwrap()), 0.0);
    let unit = DisplacementField::constant(1, 4, 4, Level::L1, (1.0, 0.0), DType::F64, &dev).unwrap();
    let shifted = a.add(&unit).unwrap();
    assert!(host(&endpoint_error(&a, &shifted).unwrap()).iter().all(|e| (e - 1.0).abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let va: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
    let vb: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
    let got = host(&endpoint_error(&field_from(va.clone(), 4, 4, Level::L1), &field_from(vb.clone(), 4, 4, Level::L1)).unwrap());
    for i in 0..16 {
        let want = ((va[i] - vb[i]).powi(2) + (va[16 + i] - vb[16 + i]).powi(2)).sqrt();
        assert!((got[i] - want).abs() < 1e-7);
    }
}
