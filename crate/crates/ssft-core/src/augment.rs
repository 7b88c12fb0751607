//! Seeded data augmentations for training cubes.
//!
//! Nine kinds, four spatial (flip, cut, rotate, crop) and five spectral
//! (multiplicative shading, bandwise gain/offset, band-block dropping,
//! wavelength shift, bandwise noise). Every kind preserves the H x W x C
//! shape and is a pure function of (cube, spec, rng state). Magnitudes are
//! kept small relative to the cube's own statistics.

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Flip,
    Cut,
    Rotate,
    Crop,
    MultiplicativeShading,
    BandwiseGainOffset,
    DropBandblock,
    WavelengthShift,
    BandwiseNoise,
}

pub const ALL_KINDS: [AugmentKind; 9] = [
    AugmentKind::Flip,
    AugmentKind::Cut,
    AugmentKind::Rotate,
    AugmentKind::Crop,
    AugmentKind::MultiplicativeShading,
    AugmentKind::BandwiseGainOffset,
    AugmentKind::DropBandblock,
    AugmentKind::WavelengthShift,
    AugmentKind::BandwiseNoise,
];

impl std::str::FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            let valid: Vec<String> = ALL_KINDS
                .iter()
                .map(|k| serde_json::to_value(k).unwrap().as_str().unwrap().to_string())
                .collect();
            Error::InvalidConfig(format!(
                "unknown augmentation kind {:?}; valid kinds: {}",
                s,
                valid.join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// cut: square side as a fraction of min(H, W), sampled from this range
    pub cut_frac: [f64; 2],
    /// crop: retained fraction per side, sampled from this range
    pub crop_frac: [f64; 2],
    /// multiplicative shading: maximum ramp amplitude a in 1 + a*g(x,y)
    pub shading_max: f64,
    /// bandwise gain/offset: gain sampled from U[1-g, 1+g]
    pub gain_range: f64,
    /// bandwise gain/offset: offset std as a multiple of the per-band std
    pub offset_scale: f64,
    /// drop_bandblock: maximum block length as a fraction of C
    pub band_block_frac: f64,
    /// wavelength shift: maximum shift in bands (sampled from U{-k..k})
    pub shift_max: usize,
    /// bandwise noise: noise std as a multiple of the per-band std
    pub noise_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            cut_frac: [0.1, 0.3],
            crop_frac: [0.7, 0.9],
            shading_max: 0.3,
            gain_range: 0.1,
            offset_scale: 0.05,
            band_block_frac: 0.2,
            shift_max: 2,
            noise_scale: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub params: AugmentParams,
}

fn default_p() -> f64 {
    0.5
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, p: f64) -> Self {
        AugmentSpec {
            kind,
            p,
            params: AugmentParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!(
                "augmentation probability {} outside [0,1]",
                self.p
            )));
        }
        let p = &self.params;
        let mags = [
            p.cut_frac[0],
            p.cut_frac[1],
            p.crop_frac[0],
            p.crop_frac[1],
            p.shading_max,
            p.gain_range,
            p.offset_scale,
            p.band_block_frac,
            p.noise_scale,
        ];
        if mags.iter().any(|&m| m < 0.0) {
            return Err(Error::InvalidConfig(
                "augmentation magnitudes must be >= 0".into(),
            ));
        }
        if p.crop_frac[0] * 1.0 <= 0.0 {
            return Err(Error::InvalidConfig("crop fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// With probability `p` apply the configured transform, else return the cube
/// unchanged.
pub fn augment(cube: &HsiCube, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<HsiCube> {
    spec.validate()?;
    if rng.gen::<f64>() >= spec.p {
        return Ok(cube.clone());
    }
    apply_kind(cube, spec.kind, &spec.params, rng)
}

fn apply_kind(
    cube: &HsiCube,
    kind: AugmentKind,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<HsiCube> {
    let out = match kind {
        AugmentKind::Flip => {
            let axis = rng.gen_range(0..2usize);
            flip(cube, axis)
        }
        AugmentKind::Cut => {
            let f = rng.gen_range(params.cut_frac[0]..=params.cut_frac[1]);
            let side = ((f * cube.h.min(cube.w) as f64).round() as usize)
                .clamp(1, cube.h.min(cube.w));
            let y0 = rng.gen_range(0..=cube.h - side);
            let x0 = rng.gen_range(0..=cube.w - side);
            cut(cube, y0, x0, side)
        }
        AugmentKind::Rotate => {
            // non-square cubes only admit shape-preserving 0/180 turns
            let turns = if cube.h == cube.w {
                rng.gen_range(0..4usize)
            } else {
                2 * rng.gen_range(0..2usize)
            };
            rotate90(cube, turns)
        }
        AugmentKind::Crop => {
            let r = rng.gen_range(params.crop_frac[0]..=params.crop_frac[1]);
            let nh = ((r * cube.h as f64).round() as usize).clamp(1, cube.h);
            let nw = ((r * cube.w as f64).round() as usize).clamp(1, cube.w);
            if nh == 0 || nw == 0 {
                return Err(Error::InvalidConfig("crop window is empty".into()));
            }
            let y0 = rng.gen_range(0..=cube.h - nh);
            let x0 = rng.gen_range(0..=cube.w - nw);
            crop_resize(cube, y0, x0, nh, nw)
        }
        AugmentKind::MultiplicativeShading => {
            let a = rng.gen_range(0.0..=params.shading_max);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            shading(cube, a, theta)
        }
        AugmentKind::BandwiseGainOffset => {
            let sigma = band_stds(cube);
            let mut gains = Vec::with_capacity(cube.c);
            let mut offsets = Vec::with_capacity(cube.c);
            for b in 0..cube.c {
                gains.push(rng.gen_range(1.0 - params.gain_range..=1.0 + params.gain_range));
                let std = params.offset_scale * sigma[b];
                offsets.push(if std > 0.0 {
                    Normal::new(0.0, std).unwrap().sample(rng)
                } else {
                    0.0
                });
            }
            gain_offset(cube, &gains, &offsets)
        }
        AugmentKind::DropBandblock => {
            let max_len = ((params.band_block_frac * cube.c as f64).ceil() as usize)
                .clamp(1, cube.c);
            let len = rng.gen_range(1..=max_len);
            let start = rng.gen_range(0..=cube.c - len);
            drop_bandblock(cube, start, len)
        }
        AugmentKind::WavelengthShift => {
            let k = rng.gen_range(-(params.shift_max as i64)..=params.shift_max as i64);
            wavelength_shift(cube, k)
        }
        AugmentKind::BandwiseNoise => {
            let sigma = band_stds(cube);
            let mut out = cube.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                let std = params.noise_scale * sigma[i % cube.c];
                if std > 0.0 {
                    *v += Normal::new(0.0, std).unwrap().sample(rng);
                }
            }
            out
        }
    };
    debug_assert_eq!((out.h, out.w, out.c), (cube.h, cube.w, cube.c));
    Ok(out)
}

/// Left-to-right application of a list of specs.
pub fn pipeline(cube: &HsiCube, specs: &[AugmentSpec], rng: &mut ChaCha8Rng) -> Result<HsiCube> {
    let mut out = cube.clone();
    for spec in specs {
        out = augment(&out, spec, rng)?;
    }
    Ok(out)
}

// ---- deterministic transform primitives (parameters already drawn) ----

/// Mirror along spatial axis 0 (rows) or 1 (columns).
pub fn flip(cube: &HsiCube, axis: usize) -> HsiCube {
    let mut out = cube.clone();
    for y in 0..cube.h {
        for x in 0..cube.w {
            let (sy, sx) = if axis == 0 {
                (cube.h - 1 - y, x)
            } else {
                (y, cube.w - 1 - x)
            };
            for b in 0..cube.c {
                *out.at_mut(y, x, b) = cube.at(sy, sx, b);
            }
        }
    }
    out
}

/// Zero an axis-aligned square of side `side` at (y0, x0) across all bands.
pub fn cut(cube: &HsiCube, y0: usize, x0: usize, side: usize) -> HsiCube {
    let mut out = cube.clone();
    for y in y0..(y0 + side).min(cube.h) {
        for x in x0..(x0 + side).min(cube.w) {
            for b in 0..cube.c {
                *out.at_mut(y, x, b) = 0.0;
            }
        }
    }
    out
}

/// Rotate spatially by `turns` quarter turns counterclockwise. Quarter turns
/// on non-square cubes are rejected by the sampler; this primitive requires
/// square input for odd turn counts.
pub fn rotate90(cube: &HsiCube, turns: usize) -> HsiCube {
    let turns = turns % 4;
    if turns == 0 {
        return cube.clone();
    }
    assert!(turns % 2 == 0 || cube.h == cube.w, "odd quarter turns need square cubes");
    let mut out = cube.clone();
    for y in 0..cube.h {
        for x in 0..cube.w {
            let (sy, sx) = match turns {
                1 => (x, cube.w - 1 - y),
                2 => (cube.h - 1 - y, cube.w - 1 - x),
                3 => (cube.h - 1 - x, y),
                _ => unreachable!(),
            };
            for b in 0..cube.c {
                *out.at_mut(y, x, b) = cube.at(sy, sx, b);
            }
        }
    }
    out
}

/// Crop the window (y0, x0, nh, nw) and nearest-neighbor resize back to the
/// original extent, identically for every band.
pub fn crop_resize(cube: &HsiCube, y0: usize, x0: usize, nh: usize, nw: usize) -> HsiCube {
    let mut out = cube.clone();
    for y in 0..cube.h {
        let sy = y0 + (y * nh) / cube.h;
        for x in 0..cube.w {
            let sx = x0 + (x * nw) / cube.w;
            for b in 0..cube.c {
                *out.at_mut(y, x, b) = cube.at(sy, sx, b);
            }
        }
    }
    out
}

/// Multiply every band by `1 + a * g(x, y)` with `g` a linear ramp of
/// direction `theta`, normalized to [-1, 1] over the cube.
pub fn shading(cube: &HsiCube, a: f64, theta: f64) -> HsiCube {
    let (dx, dy) = (theta.cos(), theta.sin());
    let cx = (cube.w as f64 - 1.0) / 2.0;
    let cy = (cube.h as f64 - 1.0) / 2.0;
    let mut mx = 0.0f64;
    for y in 0..cube.h {
        for x in 0..cube.w {
            mx = mx.max(((x as f64 - cx) * dx + (y as f64 - cy) * dy).abs());
        }
    }
    let mx = mx.max(1e-12);
    let mut out = cube.clone();
    for y in 0..cube.h {
        for x in 0..cube.w {
            let g = ((x as f64 - cx) * dx + (y as f64 - cy) * dy) / mx;
            let factor = 1.0 + a * g;
            for b in 0..cube.c {
                *out.at_mut(y, x, b) *= factor;
            }
        }
    }
    out
}

/// Per band c: `x -> gain[c] * x + offset[c]`.
pub fn gain_offset(cube: &HsiCube, gains: &[f64], offsets: &[f64]) -> HsiCube {
    let mut out = cube.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let b = i % cube.c;
        *v = gains[b] * *v + offsets[b];
    }
    out
}

/// Zero the contiguous band block `[start, start + len)`.
pub fn drop_bandblock(cube: &HsiCube, start: usize, len: usize) -> HsiCube {
    let mut out = cube.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let b = i % cube.c;
        if b >= start && b < start + len {
            *v = 0.0;
        }
    }
    out
}

/// Shift each pixel spectrum by `k` bands with edge replication:
/// `out[b] = in[clamp(b - k)]`.
pub fn wavelength_shift(cube: &HsiCube, k: i64) -> HsiCube {
    let mut out = cube.clone();
    let c = cube.c as i64;
    for p in 0..cube.h * cube.w {
        for b in 0..cube.c {
            let src = (b as i64 - k).clamp(0, c - 1) as usize;
            out.data[p * cube.c + b] = cube.data[p * cube.c + src];
        }
    }
    out
}

fn band_stds(cube: &HsiCube) -> Vec<f64> {
    let n = (cube.h * cube.w) as f64;
    let mut mean = vec![0.0; cube.c];
    for (i, &v) in cube.data.iter().enumerate() {
        mean[i % cube.c] += v;
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; cube.c];
    for (i, &v) in cube.data.iter().enumerate() {
        let d = v - mean[i % cube.c];
        var[i % cube.c] += d * d;
    }
    var.iter().map(|&v| (v / n).sqrt()).collect()
}
