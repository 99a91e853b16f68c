//! Channel-first images in [0, 1] with a domain tag, PNG I/O and the
//! conversions to and from network tensors in [−1, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Luminance weights for RGB → gray.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Which side of the translation an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Appearance images (texture, tint, highlights): domain "A".
    #[serde(rename = "A")]
    Appearance,
    /// Structure-only images (shaded geometry or depth): domain "B".
    #[serde(rename = "B")]
    Structure,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Appearance => "A",
            Domain::Structure => "B",
        }
    }
}

/// `channels × height × width` values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub domain: Domain,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(domain: Domain, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {channels}×{height}×{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}×{height}×{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Shape(format!("image value {bad} outside [0, 1]")));
        }
        Ok(Image {
            domain,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(domain: Domain, channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            domain,
            channels,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    /// Builds an image from arbitrary values, clamping into [0, 1] and
    /// mapping non-finite values to 0.
    pub fn from_clamped(domain: Domain, channels: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(domain, channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Single-channel luminance; a one-channel image is returned as is.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|i| {
                if self.channels == 3 {
                    (0..3).map(|c| LUMA[c] * self.data[c * hw + i]).sum::<f64>()
                } else {
                    (0..self.channels).map(|c| self.data[c * hw + i]).sum::<f64>() / self.channels as f64
                }
            })
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Image {
            domain: self.domain,
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// A one-channel image copied into `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "only single-channel images can be replicated, got {}",
                self.channels
            )));
        }
        Ok(Image {
            data: self.data.repeat(channels),
            channels,
            ..self.clone()
        })
    }

    /// Network tensor `1 × C × H × W` in [−1, 1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(2.0 * v - 1.0)).collect();
        Tensor::from_vec(&[1, self.channels, self.height, self.width], data).expect("consistent shape")
    }

    /// Inverse of [`Image::to_tensor`] for sample `index` of a batch; values
    /// outside [−1, 1] are clamped.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize, domain: Domain) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(Error::Shape(format!("batch index {index} out of range {n}")));
        }
        let len = c * h * w;
        let data = t.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| (v.as_f64() + 1.0) / 2.0)
            .collect();
        Image::from_clamped(domain, c, h, w, data)
    }

    /// Stacks same-shaped images into an `N × C × H × W` tensor in [−1, 1].
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or(Error::EmptyBatch("no images to batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::Shape("images in a batch must share their shape".into()));
            }
            data.extend(im.data.iter().map(|&v| T::lit(2.0 * v - 1.0)));
        }
        Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
    }

    /// Writes an 8-bit PNG (gray or RGB), or a 16-bit gray PNG when
    /// `sixteen_bit` is set.
    pub fn save_png(&self, path: &Path, sixteen_bit: bool) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 if !sixteen_bit => png::ColorType::Rgb,
            c => {
                return Err(Error::Shape(format!(
                    "cannot write a {c}-channel image as {} PNG",
                    if sixteen_bit { "16-bit gray" } else { "8-bit" }
                )))
            }
        };
        let hw = self.height * self.width;
        let bytes: Vec<u8> = if sixteen_bit {
            self.data.iter().flat_map(|&v| quantize(v, 65535).to_be_bytes()).collect()
        } else {
            (0..hw)
                .flat_map(|i| (0..self.channels).map(move |c| (c, i)))
                .map(|(c, i)| quantize(self.data[c * hw + i], 255) as u8)
                .collect()
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(if sixteen_bit { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
        writer.finish()?;
        Ok(())
    }

    /// Reads an 8- or 16-bit gray, gray-alpha, RGB or RGBA PNG. Alpha is dropped.
    pub fn load_png(path: &Path, domain: Domain) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let (channels, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            other => {
                return Err(Error::Shape(format!("unsupported PNG color type {other:?} in {}", path.display())))
            }
        };
        let (bytes_per, max) = match info.bit_depth {
            png::BitDepth::Sixteen => (2, 65535.0),
            _ => (1, 255.0),
        };
        let sample = |idx: usize| -> f64 {
            if bytes_per == 2 {
                u16::from_be_bytes([buf[2 * idx], buf[2 * idx + 1]]) as f64 / max
            } else {
                buf[idx] as f64 / max
            }
        };
        let mut data = vec![0.0; keep * h * w];
        for i in 0..h * w {
            for c in 0..keep {
                data[c * h * w + i] = sample(i * channels + c);
            }
        }
        Image::new(domain, keep, h, w, data)
    }
}

/// Round-half-away-from-zero quantization of a [0, 1] value to `0..=max`.
pub fn quantize(v: f64, max: u16) -> u16 {
    (v.clamp(0.0, 1.0) * max as f64).round() as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.5 / 255.0, 255), 1);
        assert_eq!(quantize(1.49 / 255.0, 255), 1);
        assert_eq!(quantize(1.0, 255), 255);
        assert_eq!(quantize(-0.2, 255), 0);
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64) / 59.0).collect();
        let im = Image::new(Domain::Appearance, 3, 4, 5, data).unwrap();
        let p = dir.path().join("a.png");
        im.save_png(&p, false).unwrap();
        let back = Image::load_png(&p, Domain::Appearance).unwrap();
        assert!(back.same_shape(&im));
        for (a, b) in back.data().iter().zip(im.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let depth = im.luminance();
        let p16 = dir.path().join("d.png");
        depth.save_png(&p16, true).unwrap();
        let back = Image::load_png(&p16, Domain::Structure).unwrap();
        for (a, b) in back.data().iter().zip(depth.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(Image::new(Domain::Structure, 1, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(Domain::Structure, 1, 1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn tensor_conversion_roundtrips() {
        let im = Image::new(Domain::Structure, 1, 2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let t = im.to_tensor::<f64>();
        assert_eq!(t.data(), &[-1.0, -0.5, 0.0, 1.0]);
        assert_eq!(Image::from_tensor(&t, 0, Domain::Structure).unwrap(), im);
    }
}
