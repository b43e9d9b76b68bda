//! Grayscale raster primitives shared by the generator and the environment.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::geometry::BBox;
use crate::{Error, Result};

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Geometry(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Geometry(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = clamp_unit(v);
    }

    pub fn full_box(&self) -> BBox {
        BBox::full(self.width, self.height)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Mean intensity inside the outward-rounded pixel bounds of `b`.
    pub fn region_mean(&self, b: &BBox) -> Option<f64> {
        let (x0, y0, x1, y1) = b.pixel_bounds(self.width, self.height)?;
        let mut s = 0.0;
        for y in y0..y1 {
            s += self.data[y * self.width + x0..y * self.width + x1]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        Some(s / ((x1 - x0) * (y1 - y0)) as f64)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[inline]
fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Sub-raster covered by `b`, rounded outward to whole pixels and clamped to the image.
pub fn crop(img: &GrayImage, b: &BBox) -> Result<GrayImage> {
    let (x0, y0, x1, y1) = b
        .pixel_bounds(img.width, img.height)
        .ok_or_else(|| Error::Geometry(format!("box {b:?} does not intersect the image")))?;
    let w = x1 - x0;
    let mut data = Vec::with_capacity(w * (y1 - y0));
    for y in y0..y1 {
        data.extend_from_slice(&img.data[y * img.width + x0..y * img.width + x1]);
    }
    Ok(GrayImage {
        width: w,
        height: y1 - y0,
        data,
    })
}

/// Bilinear resize with corner-aligned sampling (output corners hit input corners).
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Geometry(format!(
            "resize target must be non-empty, got {out_w}x{out_h}"
        )));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let xs = sample_axis(img.width, out_w);
    let ys = sample_axis(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        let r0 = &img.data[y0 * img.width..(y0 + 1) * img.width];
        let r1 = &img.data[y1 * img.width..(y1 + 1) * img.width];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            data.push(clamp_unit(top + (bot - top) * fy));
        }
    }
    Ok(GrayImage {
        width: out_w,
        height: out_h,
        data,
    })
}

/// For each output index: the two source indices and the interpolation weight.
fn sample_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    (0..out_len)
        .map(|i| {
            let src = if out_len == 1 {
                (in_len - 1) as f64 * 0.5
            } else {
                i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            };
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Crops `b` and resizes the crop to `out_w`×`out_h`.
pub fn crop_resize(img: &GrayImage, b: &BBox, out_w: usize, out_h: usize) -> Result<GrayImage> {
    resize_bilinear(&crop(img, b)?, out_w, out_h)
}

/// Pixel rectangles `(x0, y0, x1, y1)` (half-open) of the horizontal and
/// vertical bars of the cross over `b`, or `None` if `b` covers no pixel.
///
/// The horizontal bar spans the box width and is `bar_fraction` of its height
/// tall; the vertical bar mirrors it.
pub fn cross_bars(
    width: usize,
    height: usize,
    b: &BBox,
    bar_fraction: f64,
) -> Option<[(usize, usize, usize, usize); 2]> {
    let (x0, y0, x1, y1) = b.pixel_bounds(width, height)?;
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let (cx, cy) = (0.5 * (x0 + x1) as f64, 0.5 * (y0 + y1) as f64);
    let band = |c: f64, half: f64, lo: usize, hi: usize| {
        let a = ((c - half).floor().max(lo as f64)) as usize;
        let z = ((c + half).ceil().min(hi as f64)) as usize;
        (a, z.max(a))
    };
    let (hy0, hy1) = band(cy, 0.5 * bar_fraction * bh, y0, y1);
    let (vx0, vx1) = band(cx, 0.5 * bar_fraction * bw, x0, x1);
    Some([(x0, hy0, x1, hy1), (vx0, y0, vx1, y1)])
}

/// Paints a black cross centered on `b`; pixels outside the box are untouched.
pub fn mask_cross(img: &GrayImage, b: &BBox, bar_fraction: f64) -> Result<GrayImage> {
    if !(bar_fraction > 0.0 && bar_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "bar_fraction must lie in (0, 1], got {bar_fraction}"
        )));
    }
    let mut out = img.clone();
    let Some(bars) = cross_bars(img.width, img.height, b, bar_fraction) else {
        return Ok(out);
    };
    for (x0, y0, x1, y1) in bars {
        for y in y0..y1 {
            out.data[y * img.width + x0..y * img.width + x1].fill(0.0);
        }
    }
    Ok(out)
}

/// Reads an 8- or 16-bit grayscale PNG.
pub fn read_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Png {
            path: path.to_path_buf(),
            reason: format!("color type {:?} (expected grayscale)", info.color_type),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + w];
                row.iter().map(|&v| v as f32 / 255.0)
            })
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + 2 * w];
                row.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            })
            .collect(),
        other => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                reason: format!("bit depth {other:?} (expected 8 or 16)"),
            })
        }
    };
    GrayImage::new(w, h, data)
}

/// Encodes the image as an 8-bit grayscale PNG in memory.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
        writer
            .write_image_data(&bytes)
            .expect("in-memory PNG body");
    }
    out
}

pub fn write_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}
