//! RGB images as `[0,1]` intensities, with lossless 8-bit PNG at the I/O
//! boundary and bilinear resizing.

use super::{DataError};
use std::path::Path;

/// H x W x 3 image, row-major, intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * Self::CHANNELS);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)), "intensity out of [0,1]");
        Self { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * Self::CHANNELS])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * Self::CHANNELS + c] = v;
    }

    /// One full channel as an f64 vector (used by the metrics).
    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.data
            .chunks_exact(Self::CHANNELS)
            .map(|px| px[c] as f64)
            .collect()
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

pub fn save_image(img: &Image, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| super::io_err(dir, e))?;
    }
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [
                (img.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| DataError::UnreadableImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let dynimg = image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(b) => b,
        image::DynamicImage::ImageLuma8(_) | image::DynamicImage::ImageLumaA8(_) => {
            return Err(DataError::NonRgbImage {
                path: path.display().to_string(),
                channels: 1,
            })
        }
        other => other.to_rgb8(),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in rgb.pixels() {
        data.push(px.0[0] as f32 / 255.0);
        data.push(px.0[1] as f32 / 255.0);
        data.push(px.0[2] as f32 / 255.0);
    }
    Ok(Image::new(h, w, data))
}

/// Bilinear resize with corner-aligned sampling, so resizing to the same
/// size is an exact identity.
pub fn resize_image(img: &Image, h: usize, w: usize) -> Image {
    assert!(h >= 1 && w >= 1);
    if h == img.height && w == img.width {
        return img.clone();
    }
    let map = |out: usize, out_len: usize, in_len: usize| -> f32 {
        if out_len == 1 {
            (in_len - 1) as f32 / 2.0
        } else {
            out as f32 * (in_len - 1) as f32 / (out_len - 1) as f32
        }
    };
    let mut data = vec![0.0f32; h * w * Image::CHANNELS];
    for y in 0..h {
        let sy = map(y, h, img.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f32;
        for x in 0..w {
            let sx = map(x, w, img.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f32;
            for c in 0..Image::CHANNELS {
                let v00 = img.get(y0, x0, c);
                let v01 = img.get(y0, x1, c);
                let v10 = img.get(y1, x0, c);
                let v11 = img.get(y1, x1, c);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                data[(y * w + x) * Image::CHANNELS + c] = (top + (bot - top) * fy).clamp(0.0, 1.0);
            }
        }
    }
    Image { height: h, width: w, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("black", 0.0f32), ("white", 1.0f32)] {
            let img = Image::constant(4, 4, v);
            let p = dir.path().join(format!("{name}.png"));
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.height, 4);
            assert!(back.data.iter().all(|&x| (x - v).abs() < 1e-6));
        }
    }

    #[test]
    fn midgray_maps_to_128_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::constant(2, 2, 128.0 / 255.0);
        let p = dir.path().join("g.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!((back.data[0] - 128.0 / 255.0).abs() < 1e-7);
        assert!((back.data[0] - 0.50196).abs() < 1e-4);
    }

    #[test]
    fn round_trip_error_within_half_quantization_step() {
        let vals: Vec<f32> = (0..4 * 4 * 3).map(|i| (i as f32 * 0.987).fract()).collect();
        let img = Image::new(4, 4, vals);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn resize_constant_is_constant_and_identity_is_exact() {
        let img = Image::constant(4, 4, 0.5);
        let big = resize_image(&img, 9, 7);
        assert!(big.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let same = resize_image(&img, 4, 4);
        assert_eq!(same, img);
    }

    #[test]
    fn resize_ramp_is_monotone() {
        // 1x2 image with intensities 0 and 1; widen to 1x4.
        let mut img = Image::constant(1, 2, 0.0);
        for c in 0..3 {
            img.set(0, 1, c, 1.0);
        }
        let wide = resize_image(&img, 1, 4);
        let row: Vec<f32> = (0..4).map(|x| wide.get(0, x, 0)).collect();
        for pair in row.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        assert_eq!(row[0], 0.0);
        assert_eq!(row[3], 1.0);
    }

    #[test]
    fn resize_checkerboard_center_is_corner_mean() {
        let mut img = Image::constant(2, 2, 0.0);
        for c in 0..3 {
            img.set(0, 0, c, 1.0);
            img.set(1, 1, c, 1.0);
        }
        let out = resize_image(&img, 3, 3);
        // Center maps to (0.5, 0.5): mean of the four corners = 0.5.
        assert!((out.get(1, 1, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn grayscale_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let buf = image::GrayImage::from_pixel(2, 2, image::Luma([7u8]));
        buf.save(&p).unwrap();
        assert!(matches!(
            load_image(&p).unwrap_err(),
            DataError::NonRgbImage { .. }
        ));
    }
}
