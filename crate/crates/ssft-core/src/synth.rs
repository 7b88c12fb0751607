//! Synthetic hyperspectral dataset generator.
//!
//! Each class is a smooth spectral signature (sum of Gaussians over the band
//! axis) multiplied by a spatial texture (linear gradient or checkerboard),
//! plus additive Gaussian noise. Classes come in pairs that
//! share most of their spectral shape and carry the same gradient texture in
//! orthogonal orientations, so that telling pair members apart requires the
//! spatial arrangement while per-band mean spectra remain cleanly separable.
//! Everything is a pure function of the spec and the seed.

use crate::cube::{DatasetManifest, HsiCube, SampleEntry, Split, Task};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            per_class: 20,
            height: 32,
            width: 32,
            bands: 64,
            seed: 0,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Cubes indexed in lockstep with `manifest.samples`.
    pub cubes: Vec<HsiCube>,
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    /// Linear ramp along x (`along_y = false`) or y (`along_y = true`).
    Gradient { along_y: bool },
    Checkerboard,
}

struct ClassParams {
    centers: Vec<f64>,
    widths: Vec<f64>,
    amps: Vec<f64>,
    /// Small class-discriminating bump (center, width, amplitude) present on
    /// odd pair members.
    bump: Option<(f64, f64, f64)>,
    texture: Texture,
}

const BASELINE: f64 = 0.2;
const GRADIENT_AMP: f64 = 0.35;
const CHECKER_AMP: f64 = 0.3;
const PAIR_BUMP_AMP: f64 = 0.01;

/// Mix a seed with a salt (splitmix64 finalizer); used everywhere a derived
/// deterministic seed is needed.
pub fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn make_class_params(k: usize, classes: usize, c: usize, seed: u64) -> ClassParams {
    let group = k / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 0x100 + group as u64));
    let cf = c as f64;
    let n_bumps = 2 + (group % 2); // 2 or 3 Gaussians per group
    let mut centers = Vec::new();
    let mut widths = Vec::new();
    let mut amps = Vec::new();
    for j in 0..n_bumps {
        let base = (j as f64 + 0.5) / n_bumps as f64;
        centers.push(cf * (base + rng.gen_range(-0.08..0.08)));
        widths.push(cf * rng.gen_range(0.04..0.09));
        amps.push(rng.gen_range(0.5..1.0));
    }
    let bump = if k % 2 == 1 {
        // small extra bump at a group-specific band, shared slope regions
        let center = cf * rng.gen_range(0.3..0.7);
        Some((center, cf * 0.03, PAIR_BUMP_AMP))
    } else {
        let _ = rng.gen_range(0.3..0.7); // keep pair streams aligned
        None
    };
    ClassParams {
        centers,
        widths,
        amps,
        bump,
        // pair members share their spectral base, so they get the same
        // texture family in orthogonal orientations: telling them apart needs
        // the spatial arrangement, not just per-location statistics (a ramp
        // and its transpose have identical value multisets). A trailing
        // unpaired class is spectrally unique already and takes the
        // checkerboard.
        texture: if classes % 2 == 1 && k == classes - 1 {
            Texture::Checkerboard
        } else {
            Texture::Gradient { along_y: k % 2 == 1 }
        },
    }
}

fn signature(params: &ClassParams, band: usize) -> f64 {
    let b = band as f64;
    let mut v = BASELINE;
    for ((&mu, &w), &a) in params
        .centers
        .iter()
        .zip(&params.widths)
        .zip(&params.amps)
    {
        let d = (b - mu) / w;
        v += a * (-0.5 * d * d).exp();
    }
    if let Some((mu, w, a)) = params.bump {
        let d = (b - mu) / w;
        v += a * (-0.5 * d * d).exp();
    }
    v
}

fn texture_field(texture: Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![1.0; h * w];
    match texture {
        Texture::Gradient { along_y } => {
            let (dx, dy) = if along_y { (0.0, 1.0) } else { (1.0, 0.0) };
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            // unit-normalize the ramp to [-1, 1] over the cube
            let mut mx = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let r = (x as f64 - cx) * dx + (y as f64 - cy) * dy;
                    mx = mx.max(r.abs());
                }
            }
            let mx = mx.max(1e-12);
            for y in 0..h {
                for x in 0..w {
                    let r = ((x as f64 - cx) * dx + (y as f64 - cy) * dy) / mx;
                    field[y * w + x] = 1.0 + GRADIENT_AMP * r;
                }
            }
        }
        Texture::Checkerboard => {
            let tile = (h.min(w) / 4).max(2);
            let px = rng.gen_range(0..tile);
            let py = rng.gen_range(0..tile);
            for y in 0..h {
                for x in 0..w {
                    let parity = ((x + px) / tile + (y + py) / tile) % 2;
                    field[y * w + x] = if parity == 0 {
                        1.0 + CHECKER_AMP
                    } else {
                        1.0 - CHECKER_AMP
                    };
                }
            }
        }
    }
    field
}

/// Generate a stratified synthetic dataset (70/15/15 per class).
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("synth needs at least 2 classes".into()));
    }
    if spec.bands < 8 {
        return Err(Error::InvalidConfig("synth needs at least 8 bands".into()));
    }
    if spec.per_class < 3 {
        return Err(Error::InvalidConfig(
            "need at least 3 samples per class to populate all splits".into(),
        ));
    }
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let params: Vec<ClassParams> = (0..spec.classes)
        .map(|k| make_class_params(k, spec.classes, c, spec.seed))
        .collect();

    // split sizes per class: 70/15/15 with every split non-empty
    let n = spec.per_class;
    let n_val = ((n * 15 + 50) / 100).max(1);
    let n_test = n_val;
    let n_train = n - n_val - n_test;

    let wavelengths: Vec<f64> = (0..c)
        .map(|b| 400.0 + b as f64 * 2000.0 / (c as f64 - 1.0))
        .collect();

    let mut samples = Vec::new();
    let mut cubes = Vec::new();
    for k in 0..spec.classes {
        let sig: Vec<f64> = (0..c).map(|b| signature(&params[k], b)).collect();
        for i in 0..n {
            let sample_index = (k * n + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed, 0x8000 + sample_index));
            let field = texture_field(params[k].texture, h, w, &mut rng);
            let mut data = vec![0.0; h * w * c];
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (p, &t) in field.iter().enumerate() {
                for (b, &s) in sig.iter().enumerate() {
                    let v = s * t;
                    data[p * c + b] = v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if spec.noise_sigma > 0.0 {
                let sigma = spec.noise_sigma * (hi - lo).max(1e-12);
                let normal = Normal::new(0.0, sigma).unwrap();
                for v in &mut data {
                    *v += normal.sample(&mut rng);
                }
            }
            let id = format!("synth_c{}_s{:03}", k, i);
            let cube = HsiCube::new(h, w, c, data, Some(wavelengths.clone()), id.clone())?;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            samples.push(SampleEntry {
                path: format!("{}.hsic", id),
                labels: vec![k],
                split,
            });
            cubes.push(cube);
        }
    }
    let manifest = DatasetManifest {
        num_classes: spec.classes,
        task: Task::Multiclass,
        samples,
    };
    manifest.validate()?;
    Ok(SynthDataset { manifest, cubes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            per_class: 4,
            height: 8,
            width: 8,
            bands: 16,
            seed: 7,
            ..Default::default()
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.cubes.len(), b.cubes.len());
        for (x, y) in a.cubes.iter().zip(&b.cubes) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn zero_noise_same_class_differs_only_by_texture() {
        let spec = SynthSpec {
            per_class: 4,
            height: 8,
            width: 8,
            bands: 16,
            seed: 3,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = synth_dataset(&spec).unwrap();
        let of_class = |k: usize| -> Vec<&HsiCube> {
            ds.manifest
                .samples
                .iter()
                .zip(&ds.cubes)
                .filter(|(s, _)| s.labels[0] == k)
                .map(|(_, c)| c)
                .collect()
        };
        // classes 0 and 1 use fixed-orientation gradients: with zero noise
        // all cubes of one class are identical
        for k in [0, 1] {
            let cubes = of_class(k);
            for cube in &cubes[1..] {
                assert_eq!(cube.data, cubes[0].data);
            }
        }
        // class 0 ramps along x (columns constant in y), class 1 along y
        let c0 = of_class(0)[0];
        let c1 = of_class(1)[0];
        for y in 0..c0.h {
            for x in 0..c0.w {
                for b in 0..c0.c {
                    assert_eq!(c0.at(y, x, b), c0.at(0, x, b));
                    assert_eq!(c1.at(y, x, b), c1.at(y, 0, b));
                }
            }
        }
        // every pixel spectrum is a scalar multiple of the class signature
        for cube in [c0, c1] {
            let ref_spec: Vec<f64> = (0..cube.c).map(|b| cube.at(0, 0, b)).collect();
            for y in 0..cube.h {
                for x in 0..cube.w {
                    let scale = cube.at(y, x, 0) / ref_spec[0];
                    for b in 0..cube.c {
                        assert!((cube.at(y, x, b) - scale * ref_spec[b]).abs() < 1e-9);
                    }
                }
            }
        }
        // pair members have identical per-location value multisets: a ramp
        // and its transpose only differ in arrangement (up to the pair bump,
        // factored out by normalizing each cube by its own band-0 spectrum)
        let multiset = |cube: &HsiCube| {
            let mut scales: Vec<f64> = (0..cube.h * cube.w)
                .map(|p| cube.data[p * cube.c] / cube.at(0, 0, 0))
                .collect();
            scales.sort_by(|a, b| a.partial_cmp(b).unwrap());
            scales
        };
        let (m0, m1) = (multiset(c0), multiset(c1));
        for (a, b) in m0.iter().zip(&m1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stratified_split_counts() {
        let spec = SynthSpec {
            per_class: 20,
            height: 8,
            width: 8,
            bands: 16,
            ..Default::default()
        };
        let ds = synth_dataset(&spec).unwrap();
        for k in 0..3 {
            let count = |split| {
                ds.manifest
                    .samples
                    .iter()
                    .filter(|s| s.labels[0] == k && s.split == split)
                    .count()
            };
            assert_eq!(count(Split::Train), 14);
            assert_eq!(count(Split::Val), 3);
            assert_eq!(count(Split::Test), 3);
        }
    }

    #[test]
    fn rejects_tiny_per_class() {
        let spec = SynthSpec {
            per_class: 2,
            ..Default::default()
        };
        assert!(synth_dataset(&spec).is_err());
    }

    #[test]
    fn nearest_centroid_on_mean_spectra_solves_the_task() {
        // class identity must be carried by the mean spectrum alone
        let spec = SynthSpec {
            classes: 3,
            per_class: 20,
            height: 16,
            width: 16,
            bands: 32,
            seed: 0,
            noise_sigma: 0.02,
        };
        let ds = synth_dataset(&spec).unwrap();
        let mean_spectrum = |cube: &HsiCube| -> Vec<f64> {
            let mut m = vec![0.0; cube.c];
            for (i, &v) in cube.data.iter().enumerate() {
                m[i % cube.c] += v;
            }
            let n = (cube.h * cube.w) as f64;
            m.iter().map(|v| v / n).collect()
        };
        let mut centroids = vec![vec![0.0; spec.bands]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for (s, cube) in ds.manifest.samples.iter().zip(&ds.cubes) {
            if s.split == Split::Train {
                let m = mean_spectrum(cube);
                for (c, v) in centroids[s.labels[0]].iter_mut().zip(&m) {
                    *c += v;
                }
                counts[s.labels[0]] += 1;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for (s, cube) in ds.manifest.samples.iter().zip(&ds.cubes) {
            if s.split != Split::Test {
                continue;
            }
            let m = mean_spectrum(cube);
            let pred = (0..spec.classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&m).map(|(c, v)| (c - v) * (c - v)).sum();
                    let db: f64 = centroids[b].iter().zip(&m).map(|(c, v)| (c - v) * (c - v)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            total += 1;
            if pred == s.labels[0] {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "centroid accuracy {acc} ({correct}/{total})");
    }
}
