//! Procedural pseudo-optical / pseudo-SAR scenes.
//!
//! A scene is a label map painted from random land-cover shapes (fields,
//! buildings, lakes, roads) over a smooth terrain term. The optical tile
//! renders each class with its own colour; the SAR tile maps the same classes
//! to a different backscatter ordering (water dark, buildings bright with
//! strong edges) and multiplies by gamma-distributed speckle. The two
//! modalities thus share geometry but not intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cover {
    Ground,
    Field,
    Forest,
    Water,
    Building,
    Road,
}

impl Cover {
    fn colour(self) -> [f32; 3] {
        match self {
            Cover::Ground => [0.55, 0.50, 0.40],
            Cover::Field => [0.70, 0.75, 0.35],
            Cover::Forest => [0.15, 0.40, 0.15],
            Cover::Water => [0.10, 0.20, 0.45],
            Cover::Building => [0.85, 0.82, 0.80],
            Cover::Road => [0.35, 0.35, 0.38],
        }
    }

    fn backscatter(self) -> f32 {
        match self {
            Cover::Ground => 0.35,
            Cover::Field => 0.25,
            Cover::Forest => 0.55,
            Cover::Water => 0.04,
            Cover::Building => 0.75,
            Cover::Road => 0.10,
        }
    }
}

/// One co-registered tile pair, row-major, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SyntheticTile {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB.
    pub optical: Vec<f32>,
    pub sar: Vec<f32>,
}

/// Generation settings.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Equivalent number of looks of the speckle.
    pub looks: f64,
    pub shapes: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            looks: 4.0,
            shapes: (14, 22),
        }
    }
}

fn terrain(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) / w as f64,
                rng.random_range(0.5..2.5) / h as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let v: f64 = waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                .sum();
            (0.5 + 0.5 * v / norm) as f32
        })
        .collect()
}

fn paint_shapes(rng: &mut ChaCha8Rng, cfg: &SceneConfig, labels: &mut [Cover]) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let count = rng.random_range(cfg.shapes.0..=cfg.shapes.1);
    for _ in 0..count {
        let kind = rng.random_range(0..10);
        let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        let (cover, test): (Cover, Box<dyn Fn(f64, f64) -> bool>) = match kind {
            0..=2 => {
                let (a, b) = (rng.random_range(8.0..28.0), rng.random_range(6.0..20.0));
                let cover = if rng.random_bool(0.5) { Cover::Field } else { Cover::Forest };
                (cover, Box::new(move |dx, dy| {
                    let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    u.abs() < a && v.abs() < b
                }))
            }
            3..=5 => {
                let (a, b) = (rng.random_range(3.0..9.0), rng.random_range(3.0..9.0));
                (Cover::Building, Box::new(move |dx, dy| {
                    let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    u.abs() < a && v.abs() < b
                }))
            }
            6 | 7 => {
                let (a, b) = (rng.random_range(6.0..18.0), rng.random_range(5.0..14.0));
                (Cover::Water, Box::new(move |dx, dy| {
                    let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    (u / a).powi(2) + (v / b).powi(2) < 1.0
                }))
            }
            _ => {
                let half = rng.random_range(1.0..2.5);
                (Cover::Road, Box::new(move |dx, dy| (-sin * dx + cos * dy).abs() < half))
            }
        };
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if test(x as f64 - cx, y as f64 - cy) {
                    labels[y * cfg.width + x] = cover;
                }
            }
        }
    }
}

/// Renders one tile pair from `seed`.
pub fn generate_tile(cfg: &SceneConfig, seed: u64) -> SyntheticTile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![Cover::Ground; h * w];
    paint_shapes(&mut rng, cfg, &mut labels);
    let light = terrain(&mut rng, h, w);
    let moisture = terrain(&mut rng, h, w);
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let speckle = Gamma::new(cfg.looks, 1.0 / cfg.looks).expect("valid gamma");

    let mut optical = Vec::with_capacity(3 * h * w);
    let mut sar = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let (x, y) = (i % w, i / w);
        let cover = labels[i];
        let shade = 0.75 + 0.25 * light[i];
        for c in cover.colour() {
            let v = c * shade + noise.sample(&mut rng) as f32;
            optical.push(v.clamp(0.0, 1.0));
        }
        let edge = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            nx >= 0
                && ny >= 0
                && (nx as usize) < w
                && (ny as usize) < h
                && labels[ny as usize * w + nx as usize] != cover
        });
        let mut s = cover.backscatter() * (0.7 + 0.3 * moisture[i]);
        if edge && cover == Cover::Building {
            s = 0.95;
        }
        let v = s * speckle.sample(&mut rng) as f32;
        sar.push(v.clamp(0.0, 1.0));
    }
    SyntheticTile {
        height: h,
        width: w,
        optical,
        sar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_deterministic_and_in_range() {
        let cfg = SceneConfig {
            height: 32,
            width: 48,
            ..Default::default()
        };
        let a = generate_tile(&cfg, 11);
        let b = generate_tile(&cfg, 11);
        assert_eq!(a.optical, b.optical);
        assert_eq!(a.sar, b.sar);
        assert_eq!(a.optical.len(), 3 * 32 * 48);
        assert!(a.sar.iter().chain(&a.optical).all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(generate_tile(&cfg, 12).sar, a.sar);
    }
}
