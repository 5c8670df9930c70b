//! Image pairs, the dataset layout and the perturbation protocol.
//!
//! On disk a dataset is a set of co-registered tiles:
//!
//! ```text
//! root/
//!   train/optical/<tile_id>.png   train/sar/<tile_id>.png
//!   val/...                       val/manifest.csv
//!   test/...                      test/manifest.csv
//! ```
//!
//! `manifest.csv` fixes the perturbation of every evaluation tile with the
//! columns `tile_id,t00,t01,t02,t10,t11,t12,seed` (θ row-major, normalized
//! coordinates). Training tiles are perturbed on the fly unless the train
//! split carries a manifest of its own.

mod perturbation;
mod synthetic;

pub use perturbation::{
    apply_perturbation, inside_mask, pixel_to_normalized_matrix, sample_perturbation,
    Perturbation, PerturbationSpec, Perturbed,
};
pub use synthetic::{generate_tile, SceneConfig, SyntheticTile};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SomaError};
use crate::geometry::{AffineMatrix, DisplacementField, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = SomaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SomaError::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Where a pair came from and how it was perturbed.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub source: String,
    pub tile_id: String,
    pub theta: AffineMatrix,
    pub seed: u64,
}

/// One training or evaluation unit.
#[derive(Clone, Debug)]
pub struct ImagePair {
    /// `(C_o, H, W)` in `[0, 1]`.
    pub optical: Tensor,
    /// `(1, H, W)` in `[0, 1]`, already perturbed.
    pub sar: Tensor,
    /// Level-1 ground truth `(1, 2, H, W)`.
    pub gt: DisplacementField,
    /// `(1, H, W)` validity mask of the ground truth.
    pub mask: Tensor,
    pub meta: PairMeta,
}

impl ImagePair {
    /// Perturbs an aligned tile pair with θ.
    pub fn from_aligned(
        optical: Tensor,
        sar: Tensor,
        theta: AffineMatrix,
        meta_source: &str,
        tile_id: &str,
        seed: u64,
    ) -> Result<Self> {
        let (_, h, w) = optical.dims3()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(SomaError::Shape(format!(
                "tile {tile_id}: {h}x{w} is not divisible by 16"
            )));
        }
        let p = apply_perturbation(&optical, &sar, &theta)?;
        let (_, c, _, _) = p.sar.dims4()?;
        let pair = Self {
            optical,
            sar: p.sar.reshape((c, h, w))?,
            gt: DisplacementField::new(p.gt.tensor().to_dtype(DType::F32)?, Level::L1)?,
            mask: p.mask,
            meta: PairMeta {
                source: meta_source.to_string(),
                tile_id: tile_id.to_string(),
                theta,
                seed,
            },
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Checks the pair invariants.
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.optical.dims3()?;
        let (cs, hs, ws) = self.sar.dims3()?;
        let id = &self.meta.tile_id;
        if cs != 1 || (hs, ws) != (h, w) {
            return Err(SomaError::Shape(format!("tile {id}: SAR is {cs}x{hs}x{ws}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(SomaError::Shape(format!("tile {id}: {h}x{w} not divisible by 16")));
        }
        self.gt.check_input_size(h, w)?;
        if !self.gt.is_finite()? {
            return Err(SomaError::Invalid(format!("tile {id}: non-finite ground truth")));
        }
        for t in [&self.optical, &self.sar] {
            let min = t.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let max = t.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if min < 0.0 || max > 1.0 {
                return Err(SomaError::Invalid(format!(
                    "tile {id}: intensities outside [0, 1] ({min}..{max})"
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        let d = self.optical.dims();
        (d[1], d[2])
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub optical: Tensor,
    pub sar: Tensor,
    pub gt: DisplacementField,
    pub mask: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn collate(pairs: &[ImagePair], dtype: DType, device: &Device) -> Result<Self> {
        if pairs.is_empty() {
            return Err(SomaError::Degenerate("cannot collate an empty batch".into()));
        }
        let stack = |f: &dyn Fn(&ImagePair) -> Tensor| -> Result<Tensor> {
            let ts: Vec<Tensor> = pairs.iter().map(f).collect();
            Ok(Tensor::stack(&ts, 0)?.to_dtype(dtype)?.to_device(device)?)
        };
        let gts: Vec<Tensor> = pairs.iter().map(|p| p.gt.tensor().clone()).collect();
        Ok(Self {
            optical: stack(&|p| p.optical.clone())?,
            sar: stack(&|p| p.sar.clone())?,
            gt: DisplacementField::new(
                Tensor::cat(&gts, 0)?.to_dtype(dtype)?.to_device(device)?,
                Level::L1,
            )?,
            mask: Tensor::cat(&pairs.iter().map(|p| p.mask.clone()).collect::<Vec<_>>(), 0)?
                .to_dtype(dtype)?
                .to_device(device)?,
            ids: pairs.iter().map(|p| p.meta.tile_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub tile_id: String,
    pub theta: AffineMatrix,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 8] = ["tile_id", "t00", "t01", "t02", "t10", "t11", "t12", "seed"];

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| SomaError::load(path, e))?;
    let io = |e: csv::Error| SomaError::load(path, e);
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for e in entries {
        let mut row = vec![e.tile_id.clone()];
        row.extend(e.theta.0.iter().flatten().map(|v| format!("{v:e}")));
        row.push(e.seed.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| SomaError::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| SomaError::load(path, e))?;
    let header = r.headers().map_err(|e| SomaError::load(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(SomaError::load(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| SomaError::load(path, e))?;
        let bad = |what: &str| SomaError::load(path, format!("row {}: {what}", i + 1));
        let mut t = [0.0; 6];
        for (k, v) in t.iter_mut().enumerate() {
            *v = rec[k + 1].trim().parse().map_err(|_| bad("bad theta entry"))?;
        }
        out.push(ManifestEntry {
            tile_id: rec[0].to_string(),
            theta: AffineMatrix([[t[0], t[1], t[2]], [t[3], t[4], t[5]]]),
            seed: rec[7].trim().parse().map_err(|_| bad("bad seed"))?,
        });
    }
    Ok(out)
}

/// How a split gets its perturbations.
#[derive(Clone, Debug)]
pub enum PerturbationSource {
    /// Fixed θ per tile from a manifest.
    Fixed(BTreeMap<String, ManifestEntry>),
    /// Fresh draw per (epoch, tile), seeded from the spec seed.
    OnTheFly(PerturbationSpec),
}

/// Tiles of one split, in tile-id order.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    split: Split,
    tiles: Vec<(String, PathBuf, PathBuf)>,
    source: PerturbationSource,
}

const EXTENSIONS: [&str; 1] = ["png"];

fn list_tiles(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| SomaError::io(dir, e))? {
        let path = entry.map_err(|e| SomaError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Opens one split. Evaluation splits need a manifest covering every tile;
/// the train split uses `spec` unless it has a manifest.
pub fn load_dataset(root: impl AsRef<Path>, split: Split, spec: &PerturbationSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = root.as_ref().to_path_buf();
    let dir = root.join(split.name());
    let optical = list_tiles(&dir.join("optical"))?;
    let sar = list_tiles(&dir.join("sar"))?;
    let mut tiles = Vec::new();
    for (id, o) in &optical {
        let s = sar.get(id).ok_or_else(|| {
            SomaError::load(o, format!("tile `{id}` has no SAR counterpart"))
        })?;
        tiles.push((id.clone(), o.clone(), s.clone()));
    }
    if let Some(id) = sar.keys().find(|id| !optical.contains_key(*id)) {
        return Err(SomaError::load(&sar[id], format!("tile `{id}` has no optical counterpart")));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let source = if manifest_path.is_file() {
        let entries = read_manifest(&manifest_path)?;
        let map: BTreeMap<String, ManifestEntry> =
            entries.into_iter().map(|e| (e.tile_id.clone(), e)).collect();
        if let Some((id, _, _)) = tiles.iter().find(|(id, _, _)| !map.contains_key(id)) {
            return Err(SomaError::load(&manifest_path, format!("no entry for tile `{id}`")));
        }
        PerturbationSource::Fixed(map)
    } else if split == Split::Train || tiles.is_empty() {
        PerturbationSource::OnTheFly(spec.clone())
    } else {
        return Err(SomaError::load(
            &manifest_path,
            format!("the {split} split needs a perturbation manifest"),
        ));
    };
    Ok(Dataset {
        root,
        split,
        tiles,
        source,
    })
}

/// Reads a raster as `(C, H, W)` f32 in `[0, 1]`; 8- and 16-bit inputs are
/// normalised by their full range.
pub fn read_raster(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| SomaError::load(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => {
            let rgb = img.to_rgb32f().into_raw();
            (0..3).flat_map(|c| rgb.iter().skip(c).step_by(3).copied().collect::<Vec<_>>()).collect()
        }
        c => return Err(SomaError::Invalid(format!("unsupported channel count {c}"))),
    };
    Ok(Tensor::from_vec(data, (channels, h, w), &Device::Cpu)?)
}

/// Writes a `(C, H, W)` tensor in `[0, 1]` as an 8-bit (RGB or gray) or
/// 16-bit (gray) PNG.
pub fn write_raster(path: &Path, image: &Tensor, sixteen_bit: bool) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    let v = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let q8 = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |x: f32| (x.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let hw = h * w;
    let img = match (c, sixteen_bit) {
        (1, false) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, v.iter().map(|x| q8(*x)).collect())
                .expect("buffer size"),
        ),
        (1, true) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, v.iter().map(|x| q16(*x)).collect())
                .expect("buffer size"),
        ),
        (3, _) => {
            let inter: Vec<u8> = (0..hw).flat_map(|i| (0..3).map(move |k| (k, i))).map(|(k, i)| q8(v[k * hw + i])).collect();
            DynamicImage::ImageRgb8(
                ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, inter).expect("buffer size"),
            )
        }
        _ => return Err(SomaError::Invalid(format!("cannot write a {c}-channel raster"))),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SomaError::io(parent, e))?;
    }
    img.save(path).map_err(|e| SomaError::load(path, e))
}

/// Seed of the on-the-fly draw for `(epoch, index)`.
pub fn draw_seed(base: u64, epoch: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tile_ids(&self) -> Vec<&str> {
        self.tiles.iter().map(|t| t.0.as_str()).collect()
    }

    pub fn source(&self) -> &PerturbationSource {
        &self.source
    }

    /// Pair `index`; `epoch` only matters for on-the-fly perturbations.
    pub fn pair(&self, index: usize, epoch: usize, optical_channels: usize) -> Result<ImagePair> {
        let (id, opath, spath) = self.tiles.get(index).ok_or_else(|| {
            SomaError::Invalid(format!("index {index} out of range ({} tiles)", self.len()))
        })?;
        let optical = read_raster(opath, optical_channels)?;
        let sar = read_raster(spath, 1)?;
        if optical.dims()[1..] != sar.dims()[1..] {
            return Err(SomaError::load(spath, format!("tile `{id}`: optical and SAR sizes differ")));
        }
        let (_, h, w) = optical.dims3()?;
        let (theta, seed) = match &self.source {
            PerturbationSource::Fixed(m) => (m[id].theta, m[id].seed),
            PerturbationSource::OnTheFly(spec) => {
                let seed = draw_seed(spec.seed, epoch, index);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (sample_perturbation(spec, &mut rng).matrix(h, w), seed)
            }
        };
        let source = format!("{}/{}", self.root.display(), self.split);
        ImagePair::from_aligned(optical, sar, theta, &source, id, seed)
            .map_err(|e| SomaError::load(opath, format!("tile `{id}`: {e}")))
    }

    /// All pairs of the split for `epoch`, in tile-id order.
    pub fn pairs(&self, epoch: usize, optical_channels: usize) -> Result<Vec<ImagePair>> {
        (0..self.len()).map(|i| self.pair(i, epoch, optical_channels)).collect()
    }
}

/// Split sizes and perturbations of a generated dataset.
#[derive(Clone, Debug)]
pub struct SyntheticDatasetSpec {
    pub scene: SceneConfig,
    pub counts: Vec<(Split, usize)>,
    /// Bounds of the perturbations written to the evaluation manifests.
    pub perturbation: PerturbationSpec,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            counts: vec![(Split::Train, 16), (Split::Val, 4), (Split::Test, 4)],
            perturbation: PerturbationSpec::default(),
            seed: 2024,
        }
    }
}

/// Renders a procedural dataset into `root` in the standard layout. SAR tiles
/// are stored as 16-bit PNGs, optical tiles as 8-bit RGB.
pub fn write_synthetic_dataset(root: impl AsRef<Path>, spec: &SyntheticDatasetSpec) -> Result<()> {
    let root = root.as_ref();
    let (h, w) = (spec.scene.height, spec.scene.width);
    for (split_no, (split, count)) in spec.counts.iter().enumerate() {
        let dir = root.join(split.name());
        let mut manifest = Vec::new();
        for i in 0..*count {
            let id = format!("{}_{i:03}", split.name());
            let tile_seed = draw_seed(spec.seed, split_no, i);
            let tile = generate_tile(&spec.scene, tile_seed);
            let optical = Tensor::from_vec(tile.optical, (h, w, 3), &Device::Cpu)?.permute((2, 0, 1))?;
            let sar = Tensor::from_vec(tile.sar, (1, h, w), &Device::Cpu)?;
            write_raster(&dir.join("optical").join(format!("{id}.png")), &optical, false)?;
            write_raster(&dir.join("sar").join(format!("{id}.png")), &sar, true)?;
            if *split != Split::Train {
                let seed = draw_seed(spec.perturbation.seed, split_no + 100, i);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = sample_perturbation(&spec.perturbation, &mut rng);
                manifest.push(ManifestEntry {
                    tile_id: id,
                    theta: p.matrix(h, w),
                    seed,
                });
            }
        }
        if *split != Split::Train {
            fs::create_dir_all(&dir).map_err(|e| SomaError::io(&dir, e))?;
            write_manifest(dir.join(MANIFEST_FILE), &manifest)?;
        }
    }
    Ok(())
}
