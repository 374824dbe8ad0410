//! 8-bit RGB frames, resampling and file IO.

use std::path::Path;

use crate::error::{Error, Result};

/// Packed 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0);
        RgbImage {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Bilinear resample of the source window `(x0, y0, w, h)` (pixel units,
    /// may be fractional) onto a `width`×`height` grid. Pixel centres are
    /// mapped, so a whole-image window at the same size is the identity.
    pub fn resample_window(
        &self,
        window: (f64, f64, f64, f64),
        width: usize,
        height: usize,
    ) -> RgbImage {
        let (x0, y0, ww, wh) = window;
        let sx = ww / width as f64;
        let sy = wh / height as f64;
        let mut out = Vec::with_capacity(width * height);
        for oy in 0..height {
            let fy = y0 + (oy as f64 + 0.5) * sy - 0.5;
            let (ya, yb, ty) = self.interp_axis(fy, self.height);
            for ox in 0..width {
                let fx = x0 + (ox as f64 + 0.5) * sx - 0.5;
                let (xa, xb, tx) = self.interp_axis(fx, self.width);
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let p00 = self.pixel(xa, ya)[c] as f64;
                    let p01 = self.pixel(xb, ya)[c] as f64;
                    let p10 = self.pixel(xa, yb)[c] as f64;
                    let p11 = self.pixel(xb, yb)[c] as f64;
                    let top = p00 + (p01 - p00) * tx;
                    let bot = p10 + (p11 - p10) * tx;
                    *v = (top + (bot - top) * ty).round().clamp(0.0, 255.0) as u8;
                }
                out.push(px);
            }
        }
        RgbImage {
            width,
            height,
            pixels: out,
        }
    }

    fn interp_axis(&self, f: f64, len: usize) -> (usize, usize, f64) {
        let max = (len - 1) as f64;
        let f = f.clamp(0.0, max);
        let a = f.floor();
        let b = (a + 1.0).min(max);
        (a as usize, b as usize, f - a)
    }

    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        self.resample_window(
            (0.0, 0.0, self.width as f64, self.height as f64),
            width,
            height,
        )
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            out.pixels[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0).collect();
        RgbImage::new(w as usize, h as usize, pixels)
    }

    /// Writes PNG or binary PPM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes a single-channel 8-bit image (PNG, or PGM by extension).
pub fn save_gray(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::shape("gray buffer does not match dimensions"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
