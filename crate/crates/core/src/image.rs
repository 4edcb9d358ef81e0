//! In-memory raster images (row-major, interleaved channels, values in `[0, 1]`)
//! and their conversion to network tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{width}x{height}x{channels}"),
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.offset(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let o = self.offset(x, y, c);
        self.data[o] = v;
    }

    /// Bilinear sample at a continuous position; coordinates outside the
    /// raster are clamped to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f32]) {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (xc - x0 as f64) as f32;
        let ay = (yc - y0 as f64) as f32;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(x0, y0, c) * (1.0 - ax) + self.get(x1, y0, c) * ax;
            let bot = self.get(x0, y1, c) * (1.0 - ax) + self.get(x1, y1, c) * ax;
            *o = top * (1.0 - ay) + bot * ay;
        }
    }

    pub fn mirror_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    /// Binary foreground mask: 1 where any channel exceeds `level`.
    pub fn foreground_mask(&self, level: f32) -> Image {
        let mut out = Image::zeros(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let on = (0..self.channels).any(|c| self.get(x, y, c) > level);
                out.set(x, y, 0, if on { 1.0 } else { 0.0 });
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 3, data)
    }

    fn color_type(&self) -> Result<image::ExtendedColorType> {
        Ok(match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::shape("1, 3 or 4 channels", c)),
        })
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let color = self.color_type()?;
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// PNG bytes of the 8-bit quantized image.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let color = self.color_type()?;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out)
    }

    /// `(1, C, H, W)` tensor with values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut chw = vec![0f32; self.data.len()];
        let plane = self.width * self.height;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    chw[c * plane + y * self.width + x] = self.get(x, y, c) * 2.0 - 1.0;
                }
            }
        }
        Ok(
            Tensor::from_vec(chw, (1, self.channels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::shape("(C, H, W)", t.dims())),
        };
        let (c, h, w) = t.dims3()?;
        let chw: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut out = Image::zeros(w, h, c);
        let plane = w * h;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = (chw[ch * plane + y * w + x] + 1.0) * 0.5;
                    out.set(x, y, ch, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(out)
    }
}

/// Stack images into one `(N, C, H, W)` tensor in `[-1, 1]`.
pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}
