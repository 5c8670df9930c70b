//! Independent loop-based oracles and numeric helpers shared by the
//! integration tests. Nothing here calls the library's loss or geometry
//! kernels; fields are plain `Vec<f64>` in `(N, 2, H, W)` order.

#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use soma::geometry::{AffineMatrix, DisplacementField, Level};
use soma::glam::{LevelOutput, MatchResult};

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs(t: &Tensor) -> f64 {
    scalar(&t.to_dtype(DType::F64).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap())
}

pub fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Which tensor of a [`RandomMatch`] to substitute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Final,
    Prev(Level),
    Flow(Level),
    Affine(Level),
}

#[derive(Clone, Debug)]
pub struct LevelData {
    pub prev: Vec<f64>,
    pub flow: Option<Vec<f64>>,
    pub affine: Option<Vec<f64>>,
    pub accumulated: Vec<f64>,
}

/// Random matcher output with ground truth, mask and certainty logits.
#[derive(Clone, Debug)]
pub struct RandomMatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub final_field: Vec<f64>,
    pub gt: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub levels: BTreeMap<Level, LevelData>,
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

impl RandomMatch {
    pub fn draw(rng: &mut ChaCha8Rng, with_mask: bool) -> Self {
        let n = rng.random_range(1..=3);
        let (h, w) = [(16, 16), (16, 32), (32, 16), (32, 32)][rng.random_range(0..4)];
        Self::draw_sized(rng, n, h, w, with_mask)
    }

    pub fn draw_sized(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, with_mask: bool) -> Self {
        let scale = rng.random_range(0.5..6.0);
        let mut levels = BTreeMap::new();
        for level in Level::ALL {
            let (lh, lw) = level.size_of(h, w);
            if lh == 0 || lw == 0 {
                continue;
            }
            let len = n * 2 * lh * lw;
            let f = level.factor();
            levels.insert(
                level,
                LevelData {
                    prev: normal_vec(rng, len, scale / f as f64),
                    flow: (f <= 8).then(|| normal_vec(rng, len, scale / f as f64)),
                    affine: (f >= 4).then(|| normal_vec(rng, len, scale / f as f64)),
                    accumulated: normal_vec(rng, len, scale / f as f64),
                },
            );
        }
        let mask = with_mask.then(|| {
            (0..n * h * w)
                .map(|_| if rng.random_bool(0.85) { 1.0 } else { 0.0 })
                .collect()
        });
        Self {
            n,
            h,
            w,
            final_field: normal_vec(rng, n * 2 * h * w, scale),
            gt: normal_vec(rng, n * 2 * h * w, scale),
            mask,
            logits: normal_vec(rng, n * h * w, 3.0),
            levels,
        }
    }

    pub fn tensor(&self, v: &[f64], n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (n, 2, h, w), &Device::Cpu).unwrap()
    }

    pub fn gt_field(&self) -> DisplacementField {
        DisplacementField::new(self.tensor(&self.gt, self.n, self.h, self.w), Level::L1).unwrap()
    }

    pub fn mask_tensor(&self) -> Option<Tensor> {
        self.mask
            .as_ref()
            .map(|m| Tensor::from_vec(m.clone(), (self.n, self.h, self.w), &Device::Cpu).unwrap())
    }

    pub fn logits_tensor(&self) -> Tensor {
        Tensor::from_vec(self.logits.clone(), (self.n, self.h, self.w), &Device::Cpu).unwrap()
    }

    pub fn result(&self) -> MatchResult {
        self.result_with(|_| None)
    }

    /// Assembles the matcher output, taking `swap(slot)` instead of the
    /// stored values where it returns a tensor.
    pub fn result_with(&self, swap: impl Fn(Slot) -> Option<Tensor>) -> MatchResult {
        let field = |slot: Slot, v: &[f64], level: Level| {
            let (lh, lw) = level.size_of(self.h, self.w);
            let t = swap(slot).unwrap_or_else(|| self.tensor(v, self.n, lh, lw));
            DisplacementField::new(t, level).unwrap()
        };
        let levels = self
            .levels
            .iter()
            .map(|(l, d)| {
                (
                    *l,
                    LevelOutput {
                        level: *l,
                        prev: field(Slot::Prev(*l), &d.prev, *l),
                        theta: None,
                        affine: d.affine.as_ref().map(|a| field(Slot::Affine(*l), a, *l)),
                        flow: d.flow.as_ref().map(|f| field(Slot::Flow(*l), f, *l)),
                        accumulated: {
                            let (lh, lw) = l.size_of(self.h, self.w);
                            DisplacementField::new(self.tensor(&d.accumulated, self.n, lh, lw), *l).unwrap()
                        },
                    },
                )
            })
            .collect();
        MatchResult {
            final_field: field(Slot::Final, &self.final_field, Level::L1),
            certainty_logits: Some(self.logits_tensor()),
            levels,
        }
    }

    fn valid(&self, s: usize, y: usize, x: usize) -> f64 {
        self.mask.as_ref().map_or(1.0, |m| m[(s * self.h + y) * self.w + x])
    }
}

fn at(v: &[f64], s: usize, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    v[((s * 2 + c) * h + y) * w + x]
}

/// Per-sample RMSE of the end-point error between two host fields, with an
/// optional validity weight per pixel; an empty selection gives 0.
fn rmse_host(
    a: &[f64],
    b: &[f64],
    n: usize,
    h: usize,
    w: usize,
    keep: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    (0..n)
        .map(|s| {
            let (mut sum, mut count) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let k = keep(s, y, x);
                    let dx = at(a, s, 0, y, x, h, w) - at(b, s, 0, y, x, h, w);
                    let dy = at(a, s, 1, y, x, h, w) - at(b, s, 1, y, x, h, w);
                    sum += k * (dx * dx + dy * dy);
                    count += k;
                }
            }
            if count > 0.0 {
                (sum / count).sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn oracle_warp(m: &RandomMatch) -> f64 {
    mean(&rmse_host(&m.final_field, &m.gt, m.n, m.h, m.w, |s, y, x| m.valid(s, y, x)))
}

pub fn oracle_consistency(m: &RandomMatch) -> f64 {
    let mut total = 0.0;
    for (level, d) in &m.levels {
        if let (Some(f), Some(a)) = (&d.flow, &d.affine) {
            let (lh, lw) = level.size_of(m.h, m.w);
            total += mean(&rmse_host(f, a, m.n, lh, lw, |_, _, _| 1.0));
        }
    }
    total
}

pub fn oracle_certainty(m: &RandomMatch) -> f64 {
    let (n, h, w) = (m.n, m.h, m.w);
    let per: Vec<f64> = (0..n)
        .map(|s| {
            let (mut sum, mut count) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let k = m.valid(s, y, x);
                    let dx = at(&m.final_field, s, 0, y, x, h, w) - at(&m.gt, s, 0, y, x, h, w);
                    let dy = at(&m.final_field, s, 1, y, x, h, w) - at(&m.gt, s, 1, y, x, h, w);
                    let target = (-(dx * dx + dy * dy).sqrt()).exp();
                    let p = 1.0 / (1.0 + (-m.logits[(s * h + y) * w + x]).exp());
                    sum += k * (p - target).powi(2);
                    count += k;
                }
            }
            if count > 0.0 {
                sum / count
            } else {
                0.0
            }
        })
        .collect();
    mean(&per)
}

/// Align-corners bilinear upsampling of a host field from `(h, w)` to
/// `(h·f, w·f)`, with displacements multiplied by `f`.
pub fn upsample_host(v: &[f64], n: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let src = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let p = if out > 1 { i as f64 * (inp - 1) as f64 / (out - 1) as f64 } else { 0.0 };
        let i0 = (p.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; n * 2 * oh * ow];
    for s in 0..n {
        for c in 0..2 {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, oh, h);
                for x in 0..ow {
                    let (x0, x1, fx) = src(x, ow, w);
                    let g = |yy, xx| at(v, s, c, yy, xx, h, w);
                    let val = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
                        + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1));
                    out[((s * 2 + c) * oh + y) * ow + x] = val * f as f64;
                }
            }
        }
    }
    out
}

pub fn oracle_delta(m: &RandomMatch, weights: &BTreeMap<Level, f64>) -> f64 {
    let (n, h, w) = (m.n, m.h, m.w);
    let mut total = 0.0;
    for (level, weight) in weights {
        let d = &m.levels[level];
        let f = level.factor();
        let (lh, lw) = level.size_of(h, w);
        let flow = upsample_host(d.flow.as_ref().unwrap(), n, lh, lw, f);
        let prev = upsample_host(&d.prev, n, lh, lw, f);
        let per: Vec<f64> = (0..n)
            .map(|s| {
                let (mut sum, mut count) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let k = m.valid(s, y, x);
                        let mut e = 0.0;
                        for c in 0..2 {
                            let gap = at(&m.gt, s, c, y, x, h, w) - at(&prev, s, c, y, x, h, w);
                            e += (at(&flow, s, c, y, x, h, w) - gap).abs();
                        }
                        sum += k * e / 2.0;
                        count += k;
                    }
                }
                if count > 0.0 {
                    sum / count
                } else {
                    0.0
                }
            })
            .collect();
        total += weight * mean(&per);
    }
    total
}

pub fn oracle_uniformity(m: &RandomMatch) -> f64 {
    let (hh, hw) = (m.h / 2, m.w / 2);
    let mut per = Vec::new();
    for s in 0..m.n {
        let q: Vec<f64> = (0..4)
            .map(|k| {
                let (top, left) = (k / 2 == 0, k % 2 == 0);
                rmse_host(&m.final_field, &m.gt, m.n, m.h, m.w, |ss, y, x| {
                    if ss == s && (y < hh) == top && (x < hw) == left {
                        m.valid(ss, y, x)
                    } else {
                        0.0
                    }
                })[s]
            })
            .collect();
        let mu = mean(&q);
        per.push((q.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0).sqrt());
    }
    mean(&per)
}

/// Displacement of pixel `(x, y)` under a normalized-coordinate affine map.
pub fn affine_displacement_oracle(m: &AffineMatrix, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    let u = 2.0 * x / (w as f64 - 1.0) - 1.0;
    let v = 2.0 * y / (h as f64 - 1.0) - 1.0;
    let [[a, b, c], [d, e, f]] = m.0;
    let (u2, v2) = (a * u + b * v + c, d * u + e * v + f);
    ((u2 + 1.0) * (w as f64 - 1.0) / 2.0 - x, (v2 + 1.0) * (h as f64 - 1.0) / 2.0 - y)
}

/// Angular distance between two undirected line directions, in degrees.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Shrinks a `(1, 1, H, W)` 0/1 mask by two pixels.
pub fn erode(mask: &Tensor) -> Tensor {
    let (_, _, h, w) = mask.dims4().unwrap();
    let v = host(mask);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ok = true;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    ok &= yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && v[yy as usize * w + xx as usize] > 0.5;
                }
            }
            out[y * w + x] = if ok { 1.0 } else { 0.0 };
        }
    }
    Tensor::from_vec(out, (1, 1, h, w), &Device::Cpu).unwrap()
}

/// Central-difference check of `f` with respect to `var` on up to `samples`
/// coordinates: `‖g_fd − g‖ / max(‖g‖, ‖g_fd‖)`. `f` must read the variable
/// through its argument or through `var` itself.
pub fn gradient_check(var: &Var, f: &dyn Fn(&Tensor) -> Tensor, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let eps = 1e-6;
    let x0 = var.as_tensor().copy().unwrap();
    let shape = x0.dims().to_vec();
    let base = host(&x0);
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(host)
        .unwrap_or_else(|| vec![0.0; base.len()]);
    let picks: Vec<usize> = if base.len() <= samples {
        (0..base.len()).collect()
    } else {
        sample(rng, base.len(), samples).into_vec()
    };
    let eval_at = |k: usize, delta: f64| {
        let mut v = base.clone();
        v[k] += delta;
        var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap().to_dtype(x0.dtype()).unwrap())
            .unwrap();
        scalar(&f(var.as_tensor()))
    };
    let (mut num, mut na, mut nf) = (0.0, 0.0, 0.0);
    for k in picks {
        let fd = (eval_at(k, eps) - eval_at(k, -eps)) / (2.0 * eps);
        num += (fd - analytic[k]).powi(2);
        na += analytic[k].powi(2);
        nf += fd * fd;
    }
    var.set(&x0).unwrap();
    num.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12)
}

/// Eight training tiles under fixed perturbations with the recipe the
/// overfit checks train on: every step sees the same eight pairs.
pub fn overfit_config(data: &std::path::Path) -> soma::config::RunConfig {
    use rand::SeedableRng;
    use soma::data::{
        sample_perturbation, write_manifest, write_synthetic_dataset, ManifestEntry, PerturbationSpec, SceneConfig,
        Split, SyntheticDatasetSpec,
    };
    let size = 128;
    write_synthetic_dataset(
        data,
        &SyntheticDatasetSpec {
            scene: SceneConfig::default(),
            counts: vec![(Split::Train, 8)],
            perturbation: PerturbationSpec::default(),
            seed: 31,
        },
    )
    .unwrap();
    let bounds = PerturbationSpec {
        max_translation_px: 8.0,
        scale_delta: 0.05,
        max_rotation_deg: 3.0,
        seed: 17,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(bounds.seed);
    let entries: Vec<ManifestEntry> = (0..8)
        .map(|i| ManifestEntry {
            tile_id: format!("train_{i:03}"),
            theta: sample_perturbation(&bounds, &mut rng).matrix(size, size),
            seed: i,
        })
        .collect();
    write_manifest(data.join("train").join("manifest.csv"), &entries).unwrap();

    let mut cfg = soma::config::preset("desk").unwrap();
    cfg.data.root = data.to_path_buf();
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup_epochs = 1.0;
    cfg.optim.max_steps = 150;
    cfg.optim.epochs = 1000;
    cfg
}
