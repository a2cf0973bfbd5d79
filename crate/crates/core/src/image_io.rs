//! 8-bit PNG and binary PPM/PGM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Decode an 8-bit PNG, PPM or PGM into a (1, C, H, W) tensor with values in
/// [0, 1]. Alpha channels are dropped.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    let (channels, w, h, bytes) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.width(), buf.height(), buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            (1, buf.width(), buf.height(), buf.into_raw())
        }
        DynamicImage::ImageRgb8(buf) => (3, buf.width(), buf.height(), buf.into_raw()),
        DynamicImage::ImageRgba8(_) => {
            let buf = img.to_rgb8();
            (3, buf.width(), buf.height(), buf.into_raw())
        }
        other => {
            return Err(image_err(
                path,
                format!("unsupported pixel format {:?}, need 8-bit", other.color()),
            ))
        }
    };
    Ok(from_interleaved(&bytes, channels, h as usize, w as usize))
}

/// Interleaved 8-bit samples to a planar [0, 1] tensor.
pub fn from_interleaved<T: Scalar>(bytes: &[u8], channels: usize, h: usize, w: usize) -> Tensor<T> {
    let dims = Dims::new(1, channels, h, w);
    let mut t = Tensor::zeros(dims);
    let scale = T::of(255.0);
    for c in 0..channels {
        let plane = t.plane_mut(0, c);
        for (i, px) in plane.iter_mut().enumerate() {
            *px = T::of(f64::from(bytes[i * channels + c])) / scale;
        }
    }
    t
}

/// Planar [0, 1] tensor to interleaved 8-bit samples (clamped, rounded).
pub fn to_interleaved<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let d = t.dims();
    if d.batch != 1 || !(d.channels == 1 || d.channels == 3) {
        return Err(Error::shape(format!("cannot encode {d} as an image")));
    }
    let mut out = vec![0u8; d.len()];
    for c in 0..d.channels {
        for (i, &v) in t.plane(0, c).iter().enumerate() {
            let v = v.as_f64();
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            out[i * d.channels + c] = (v * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Write a tensor as PNG, or binary PPM/PGM when the extension is
/// `.ppm`/`.pgm`/`.pnm`. PNM output uses the canonical `P6\nW H\n255\n`
/// header so 8-bit files round-trip byte for byte.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = t.dims();
    let bytes = to_interleaved(t)?;
    let color = if d.channels == 1 {
        ColorType::L8
    } else {
        ColorType::Rgb8
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match ext.as_str() {
        "ppm" | "pgm" | "pnm" => {
            let magic = if d.channels == 1 { "P5" } else { "P6" };
            write!(writer, "{magic}\n{} {}\n255\n", d.width, d.height)
                .and_then(|_| writer.write_all(&bytes))
                .and_then(|_| writer.flush())
                .map_err(|e| Error::io(path, e))
        }
        _ => PngEncoder::new(writer)
            .write_image(
                &bytes,
                d.width as u32,
                d.height as u32,
                ExtendedColorType::from(color),
            )
            .map_err(|e| image_err(path, e)),
    }
}
