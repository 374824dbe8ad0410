//! Frequency frontend: RGB keyframe to grouped 8×8 block-DCT coefficients.
//!
//! The keyframe is converted to full-range YCbCr, each plane is zero padded
//! to a multiple of 8, split into non-overlapping 8×8 blocks and transformed
//! with the orthonormal DCT-II. Coefficients of equal frequency are gathered
//! into one channel, channels ordered by the JPEG zig-zag scan (DC first),
//! giving 64 channels per colour component.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;
pub const COEFFS_PER_BLOCK: usize = BLOCK * BLOCK;
pub const COMPONENTS: usize = 3;

/// One colour plane of 64-bit samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} plane with {} samples",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YcbcrPlanes {
    pub y: Plane,
    pub cb: Plane,
    pub cr: Plane,
}

impl YcbcrPlanes {
    pub fn components(&self) -> [&Plane; 3] {
        [&self.y, &self.cb, &self.cr]
    }

    fn map(&self, f: impl Fn(&Plane) -> Plane) -> YcbcrPlanes {
        YcbcrPlanes {
            y: f(&self.y),
            cb: f(&self.cb),
            cr: f(&self.cr),
        }
    }
}

/// 8×8 coefficient matrix `F(u, v)`, row-major in `u`.
pub type DctBlock = [f64; COEFFS_PER_BLOCK];

/// Full-range JFIF conversion, clamped to `[0, 255]`.
pub fn rgb_to_ycbcr(img: &RgbImage) -> YcbcrPlanes {
    let n = img.width() * img.height();
    let (mut y, mut cb, mut cr) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for &[r, g, b] in img.pixels() {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        y.push((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 255.0));
        cb.push((-0.168736 * r - 0.331264 * g + 0.5 * b + 128.0).clamp(0.0, 255.0));
        cr.push((0.5 * r - 0.418688 * g - 0.081312 * b + 128.0).clamp(0.0, 255.0));
    }
    let (w, h) = (img.width(), img.height());
    YcbcrPlanes {
        y: Plane::new(w, h, y).unwrap(),
        cb: Plane::new(w, h, cb).unwrap(),
        cr: Plane::new(w, h, cr).unwrap(),
    }
}

fn round_up(n: usize) -> usize {
    n.div_ceil(BLOCK) * BLOCK
}

/// Zero pads on the bottom and right up to the next multiple of 8.
pub fn pad_to_block_multiple(plane: &Plane) -> Plane {
    let (w, h) = (round_up(plane.width), round_up(plane.height));
    if w == plane.width && h == plane.height {
        return plane.clone();
    }
    let mut data = vec![0.0; w * h];
    for y in 0..plane.height {
        data[y * w..y * w + plane.width]
            .copy_from_slice(&plane.data[y * plane.width..(y + 1) * plane.width]);
    }
    Plane {
        width: w,
        height: h,
        data,
    }
}

/// `basis[u][x] = α(u)·cos((2x+1)uπ/16)`; orthogonal, so its transpose is
/// the inverse.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = BLOCK as f64;
        let mut t = [[0.0; BLOCK]; BLOCK];
        for (u, row) in t.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * n)).cos();
            }
        }
        t
    })
}

/// Orthonormal 2-D DCT-II of one 8×8 block (`block[x*8 + y]`, `x` the row).
pub fn block_dct(block: &[f64; COEFFS_PER_BLOCK]) -> DctBlock {
    let t = basis();
    // rows first: tmp[x][v] = Σ_y f(x,y)·t[v][y]
    let mut tmp = [0.0; COEFFS_PER_BLOCK];
    for x in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for y in 0..BLOCK {
                s += block[x * BLOCK + y] * t[v][y];
            }
            tmp[x * BLOCK + v] = s;
        }
    }
    let mut out = [0.0; COEFFS_PER_BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for x in 0..BLOCK {
                s += t[u][x] * tmp[x * BLOCK + v];
            }
            out[u * BLOCK + v] = s;
        }
    }
    out
}

pub fn inverse_block_dct(coeffs: &DctBlock) -> [f64; COEFFS_PER_BLOCK] {
    let t = basis();
    let mut tmp = [0.0; COEFFS_PER_BLOCK];
    for u in 0..BLOCK {
        for y in 0..BLOCK {
            let mut s = 0.0;
            for v in 0..BLOCK {
                s += coeffs[u * BLOCK + v] * t[v][y];
            }
            tmp[u * BLOCK + y] = s;
        }
    }
    let mut out = [0.0; COEFFS_PER_BLOCK];
    for x in 0..BLOCK {
        for y in 0..BLOCK {
            let mut s = 0.0;
            for u in 0..BLOCK {
                s += t[u][x] * tmp[u * BLOCK + y];
            }
            out[x * BLOCK + y] = s;
        }
    }
    out
}

/// `ZIGZAG[k]` is the row-major index inside an 8×8 block of the k-th
/// coefficient in JPEG scan order.
pub fn zigzag() -> &'static [usize; COEFFS_PER_BLOCK] {
    static ORDER: OnceLock<[usize; COEFFS_PER_BLOCK]> = OnceLock::new();
    ORDER.get_or_init(|| {
        let mut order = [0; COEFFS_PER_BLOCK];
        let mut k = 0;
        for s in 0..(2 * BLOCK - 1) {
            let lo = s.saturating_sub(BLOCK - 1);
            let hi = s.min(BLOCK - 1);
            let rows: Vec<usize> = if s % 2 == 0 {
                (lo..=hi).rev().collect()
            } else {
                (lo..=hi).collect()
            };
            for r in rows {
                order[k] = r * BLOCK + (s - r);
                k += 1;
            }
        }
        order
    })
}

fn plane_to_channels(plane: &Plane) -> Vec<f64> {
    let padded = pad_to_block_multiple(plane);
    let (bw, bh) = (padded.width / BLOCK, padded.height / BLOCK);
    let grid = bw * bh;
    let zz = zigzag();
    let blocks: Vec<DctBlock> = (0..grid)
        .into_par_iter()
        .map(|b| {
            let (by, bx) = (b / bw, b % bw);
            let mut px = [0.0; COEFFS_PER_BLOCK];
            for x in 0..BLOCK {
                for y in 0..BLOCK {
                    px[x * BLOCK + y] = padded.at(bx * BLOCK + y, by * BLOCK + x);
                }
            }
            block_dct(&px)
        })
        .collect();
    let mut out = vec![0.0; COEFFS_PER_BLOCK * grid];
    for (b, coeffs) in blocks.iter().enumerate() {
        for (k, &nat) in zz.iter().enumerate() {
            out[k * grid + b] = coeffs[nat];
        }
    }
    out
}

/// All 192 coefficient channels (`Y 0..64, Cb 64..128, Cr 128..192`) as a
/// `192 × H/8 × W/8` tensor. Planes are padded here if needed.
pub fn coefficients_to_channels(planes: &YcbcrPlanes) -> Tensor {
    let padded = planes.map(pad_to_block_multiple);
    let (bh, bw) = (padded.y.height / BLOCK, padded.y.width / BLOCK);
    let mut data = Vec::with_capacity(COMPONENTS * COEFFS_PER_BLOCK * bh * bw);
    for p in padded.components() {
        data.extend(plane_to_channels(p));
    }
    Tensor::new(vec![COMPONENTS * COEFFS_PER_BLOCK, bh, bw], data).unwrap()
}

/// Inverse of [`coefficients_to_channels`] for a full 192-channel tensor.
pub fn channels_to_planes(vol: &Tensor) -> Result<YcbcrPlanes> {
    vol.expect_rank(3, "channels_to_planes")?;
    if vol.dim(0) != COMPONENTS * COEFFS_PER_BLOCK {
        return Err(Error::shape(format!(
            "need {} channels, got {:?}",
            COMPONENTS * COEFFS_PER_BLOCK,
            vol.shape()
        )));
    }
    let (bh, bw) = (vol.dim(1), vol.dim(2));
    let grid = bh * bw;
    let zz = zigzag();
    let plane = |comp: usize| {
        let (w, h) = (bw * BLOCK, bh * BLOCK);
        let mut data = vec![0.0; w * h];
        let base = comp * COEFFS_PER_BLOCK * grid;
        for b in 0..grid {
            let mut coeffs = [0.0; COEFFS_PER_BLOCK];
            for (k, &nat) in zz.iter().enumerate() {
                coeffs[nat] = vol.data()[base + k * grid + b];
            }
            let px = inverse_block_dct(&coeffs);
            let (by, bx) = (b / bw, b % bw);
            for x in 0..BLOCK {
                for y in 0..BLOCK {
                    data[(by * BLOCK + x) * w + bx * BLOCK + y] = px[x * BLOCK + y];
                }
            }
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    };
    Ok(YcbcrPlanes {
        y: plane(0),
        cb: plane(1),
        cr: plane(2),
    })
}

/// Channels kept per component for a given `λ`: `max(round(64λ), 1)`.
pub fn channels_for_lambda(lambda: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(((lambda * COEFFS_PER_BLOCK as f64).round() as usize).max(1))
}

/// DCT coefficients regrouped into `C_f × blockRows × blockCols`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVolume {
    data: Tensor,
    per_component: usize,
}

impl FrequencyVolume {
    pub fn new(data: Tensor, per_component: usize) -> Result<Self> {
        data.expect_rank(3, "FrequencyVolume")?;
        if !(1..=COEFFS_PER_BLOCK).contains(&per_component)
            || data.dim(0) != COMPONENTS * per_component
        {
            return Err(Error::shape(format!(
                "{:?} is not {} components of {per_component} channels",
                data.shape(),
                COMPONENTS
            )));
        }
        Ok(FrequencyVolume {
            data,
            per_component,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn per_component(&self) -> usize {
        self.per_component
    }

    pub fn block_rows(&self) -> usize {
        self.data.dim(1)
    }

    pub fn block_cols(&self) -> usize {
        self.data.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Keeps the `C_input` lowest zig-zag channels of each component.
pub fn select_channels(vol: &Tensor, lambda: f64) -> Result<FrequencyVolume> {
    let keep = channels_for_lambda(lambda)?;
    select_channel_count(vol, keep)
}

pub fn select_channel_count(vol: &Tensor, keep: usize) -> Result<FrequencyVolume> {
    vol.expect_rank(3, "select_channels")?;
    if vol.dim(0) != COMPONENTS * COEFFS_PER_BLOCK {
        return Err(Error::shape(format!(
            "select_channels expects 192 channels, got {:?}",
            vol.shape()
        )));
    }
    if !(1..=COEFFS_PER_BLOCK).contains(&keep) {
        return Err(Error::Domain(format!("channel count {keep} outside 1..=64")));
    }
    let parts = (0..COMPONENTS)
        .map(|c| vol.slice_axis(0, c * COEFFS_PER_BLOCK..c * COEFFS_PER_BLOCK + keep))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    FrequencyVolume::new(Tensor::concat(&refs, 0)?, keep)
}

/// Keyframe to frequency volume in one call.
pub fn frequency_volume(img: &RgbImage, per_component: usize) -> Result<FrequencyVolume> {
    let all = coefficients_to_channels(&rgb_to_ycbcr(img));
    select_channel_count(&all, per_component)
}

const DCTT_MAGIC: &[u8; 4] = b"DCTT";
const DCTT_VERSION: u32 = 1;

/// Coefficient export: `"DCTT"`, u32 LE `{1, C_f, rows, cols}`, then f32 LE.
pub fn write_dctt(w: &mut impl Write, vol: &FrequencyVolume) -> std::io::Result<()> {
    w.write_all(DCTT_MAGIC)?;
    for v in [
        DCTT_VERSION,
        vol.channels() as u32,
        vol.block_rows() as u32,
        vol.block_cols() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &x in vol.tensor().data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_dctt(path: &Path, vol: &FrequencyVolume) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dctt(&mut w, vol)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a DCTT stream back as a `C_f × rows × cols` tensor.
pub fn read_dctt(r: &mut impl Read) -> Result<Tensor> {
    let io = |e| Error::Data(format!("truncated DCTT stream: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DCTT_MAGIC {
        return Err(Error::Data("bad DCTT magic".into()));
    }
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *h = u32::from_le_bytes(b);
    }
    let [version, c, rows, cols] = header;
    if version != DCTT_VERSION {
        return Err(Error::Data(format!("unsupported DCTT version {version}")));
    }
    let n = (c as usize) * (rows as usize) * (cols as usize);
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(io)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(vec![c as usize, rows as usize, cols as usize], data)
}
