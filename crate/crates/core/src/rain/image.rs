use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// RGB image with values in `[0, 1]`, stored planar (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// The background `B` of a rainy/clean pair.
pub type CleanImage = Image;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(param_err!("image must be at least 1x1, got {height}x{width}"));
        }
        if data.len() != 3 * height * width {
            return Err(shape_err!("{} values for a 3x{height}x{width} image", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, data)
    }

    /// Builds an image from a per-pixel closure `f(channel, y, x)`, clamping
    /// the result into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Planar `3 × H × W` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(param_err!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Ok(Image { height: h, width: w, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Image { height: self.height, width: self.width, data }
    }

    /// `1 × 3 × H × W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new([1, 3, self.height, self.width], self.data.iter().map(|&v| T::lit(v)).collect())
            .expect("image shape is consistent")
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(shape_err!("expected a 1x3xHxW tensor, got {:?}", t.shape()));
        }
        Self::new(h, w, t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect())
    }

    /// 8-bit quantization `q = round(255·v)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    /// Dequantization `v = q/255` from interleaved RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(shape_err!("{} bytes for a {height}x{width} RGB image", bytes.len()));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Self::new(height, width, data)
    }

    /// Rounds every value to the nearest 8-bit level, matching what a
    /// PNG round trip returns.
    pub fn quantized(&self) -> Self {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_err = |e: png::EncodingError| Error::format(path, e.to_string());
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(to_err)?;
        writer.finish().map_err(to_err)
    }

    /// Reads an 8- or 16-bit PNG; grayscale is replicated across channels
    /// and alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let to_err = |e: png::DecodingError| Error::format(path, e.to_string());
        let mut reader = dec.read_info().map_err(to_err)?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(to_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
        };
        let mut rgb = Vec::with_capacity(3 * w * h);
        for px in bytes.chunks_exact(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
        Self::from_rgb8(h, w, &rgb).map_err(|e| Error::format(path, e.to_string()))
    }
}
