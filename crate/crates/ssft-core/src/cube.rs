//! Hyperspectral cube storage, band statistics, and dataset manifests.
//!
//! A cube lives on disk as a `.hsic` JSON header plus a sibling `.bin` of
//! H*W*C little-endian f32 values in band-sequential order (all pixels of
//! band 0, then band 1, ...). In memory the layout is pixel-interleaved
//! `[H, W, C]` row-major, matching the tensor ops.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Reflectance values, `[H, W, C]` row-major (pixel-interleaved).
    pub data: Vec<f64>,
    /// Band center wavelengths in nanometers, strictly increasing when present.
    pub wavelengths: Option<Vec<f64>>,
    pub id: String,
}

impl HsiCube {
    pub fn new(
        h: usize,
        w: usize,
        c: usize,
        data: Vec<f64>,
        wavelengths: Option<Vec<f64>>,
        id: String,
    ) -> Result<Self> {
        if h < 1 || w < 1 || c < 1 {
            return Err(Error::InvalidData(format!(
                "cube extents must be positive, got {}x{}x{}",
                h, w, c
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::InvalidData(format!(
                "cube {}x{}x{} needs {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let band = i % c;
            let pixel = i / c;
            return Err(Error::NonFinite(format!(
                "cube value {} at pixel {} band {}",
                v, pixel, band
            )));
        }
        if let Some(wl) = &wavelengths {
            if wl.len() != c {
                return Err(Error::InvalidData(format!(
                    "{} wavelengths for {} bands",
                    wl.len(),
                    c
                )));
            }
            if wl.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::InvalidData(
                    "wavelengths must be strictly increasing".into(),
                ));
            }
        }
        Ok(HsiCube {
            h,
            w,
            c,
            data,
            wavelengths,
            id,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, band: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + band]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, band: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + band]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w, self.c], self.data.clone()).unwrap()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CubeHeader {
    h: usize,
    w: usize,
    c: usize,
    dtype: String,
    order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    wavelengths: Option<Vec<f64>>,
}

fn bin_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CubeHeader {
        h: cube.h,
        w: cube.w,
        c: cube.c,
        dtype: "f32".into(),
        order: "band-sequential".into(),
        wavelengths: cube.wavelengths.clone(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    // pixel-interleaved memory -> band-sequential file
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for band in 0..cube.c {
        for pixel in 0..cube.h * cube.w {
            let v = cube.data[pixel * cube.c + band] as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bp = bin_path(path);
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: CubeHeader = serde_json::from_str(&json).map_err(|e| Error::json(path, e))?;
    if header.dtype != "f32" {
        return Err(Error::InvalidData(format!(
            "unsupported cube dtype {:?}",
            header.dtype
        )));
    }
    if header.order != "band-sequential" {
        return Err(Error::InvalidData(format!(
            "unsupported cube order {:?}",
            header.order
        )));
    }
    let bp = bin_path(path);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let n = header.h * header.w * header.c;
    if bytes.len() != n * 4 {
        return Err(Error::InvalidData(format!(
            "{}: payload holds {} values, header says {}x{}x{} = {}",
            bp.display(),
            bytes.len() / 4,
            header.h,
            header.w,
            header.c,
            n
        )));
    }
    let mut data = vec![0.0f64; n];
    let pixels = header.h * header.w;
    for band in 0..header.c {
        for pixel in 0..pixels {
            let off = (band * pixels + pixel) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            data[pixel * header.c + band] = v as f64;
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HsiCube::new(header.h, header.w, header.c, data, header.wavelengths, id)
}

// ---- band statistics ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-band mean and standard deviation over all pixels of all cubes, with
/// the std floored at 1e-8 so constant bands stay usable.
pub fn fit_band_stats(cubes: &[&HsiCube]) -> Result<BandStats> {
    let Some(first) = cubes.first() else {
        return Err(Error::InvalidData("fit_band_stats needs at least one cube".into()));
    };
    let c = first.c;
    for cube in cubes {
        if cube.c != c {
            return Err(Error::InvalidData(format!(
                "cube {} has {} bands, expected {}",
                cube.id, cube.c, c
            )));
        }
    }
    // two-pass for numerical stability
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for cube in cubes {
        count += cube.h * cube.w;
        for (i, &v) in cube.data.iter().enumerate() {
            mean[i % c] += v;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for cube in cubes {
        for (i, &v) in cube.data.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|&v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(BandStats { mean, std })
}

/// `(x - mean[c]) / std[c]` per band; shape unchanged.
pub fn normalize(cube: &HsiCube, stats: &BandStats) -> Result<HsiCube> {
    if stats.mean.len() != cube.c || stats.std.len() != cube.c {
        return Err(Error::ShapeMismatch(format!(
            "stats for {} bands applied to cube with {}",
            stats.mean.len(),
            cube.c
        )));
    }
    let mut out = cube.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let b = i % cube.c;
        *v = (*v - stats.mean[b]) / stats.std[b];
    }
    Ok(out)
}

// ---- dataset manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub task: Task,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if self.task == Task::Multiclass && s.labels.len() != 1 {
                return Err(Error::InvalidData(format!(
                    "multiclass sample {} carries {} labels",
                    s.path,
                    s.labels.len()
                )));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::InvalidData(format!(
                    "label {} out of range [0,{}) in {}",
                    l, self.num_classes, s.path
                )));
            }
        }
        Ok(())
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&json).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }
}

/// Batches of sample indices for one split. Train order is shuffled from the
/// seed; val/test keep manifest order. The final partial batch is retained.
pub fn split_iter(
    manifest: &DatasetManifest,
    split: Split,
    batch: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    assert!(batch >= 1);
    let mut indices = manifest.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InvalidData(format!("split {} is empty", split)));
    }
    if split == Split::Train {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
    }
    Ok(indices.chunks(batch).map(|c| c.to_vec()).collect())
}
