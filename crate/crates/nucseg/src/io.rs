//! PNG images, 16-bit label maps and JSON sidecars.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use nucseg_core::{Grid, RasterImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::trace;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: label {label} does not fit in 16 bits")]
    LabelOverflow { path: String, label: u32 },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.display().to_string(), source }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> IoError + '_ {
    move |source| IoError::Image { path: path.display().to_string(), source }
}

fn decode(path: &Path) -> Result<image::DynamicImage, IoError> {
    let file = trace::open(path).map_err(file_err(path))?;
    ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(file_err(path))?
        .decode()
        .map_err(image_err(path))
}

/// Reads any supported image as 8-bit RGB, dropping alpha.
pub fn read_rgb(path: &Path) -> Result<RasterImage, IoError> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(RasterImage::new(h as usize, w as usize, 3, rgb.into_raw()))
}

pub fn write_rgb(path: &Path, image: &RasterImage) -> Result<(), IoError> {
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, image.as_bytes().to_vec())
            .expect("raster buffer matches its shape");
    let file = trace::create(path).map_err(file_err(path))?;
    buf.write_to(&mut BufWriter::new(file), ImageFormat::Png).map_err(image_err(path))
}

/// Writes a label map as a 16-bit grayscale PNG (0 = background).
pub fn write_labels(path: &Path, labels: &Grid<u32>) -> Result<(), IoError> {
    let mut data = Vec::with_capacity(labels.len());
    for &l in labels.as_slice() {
        let v = u16::try_from(l).map_err(|_| IoError::LabelOverflow { path: path.display().to_string(), label: l })?;
        data.push(v);
    }
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, data).expect("label buffer matches");
    let file = trace::create(path).map_err(file_err(path))?;
    buf.write_to(&mut BufWriter::new(file), ImageFormat::Png).map_err(image_err(path))
}

/// Reads an 8- or 16-bit grayscale label map.
pub fn read_labels(path: &Path) -> Result<Grid<u32>, IoError> {
    // Converting between bit depths rescales values, which would corrupt ids.
    let (h, w, data): (u32, u32, Vec<u32>) = match decode(path)? {
        image::DynamicImage::ImageLuma8(img) => {
            (img.height(), img.width(), img.into_raw().into_iter().map(u32::from).collect())
        }
        image::DynamicImage::ImageLuma16(img) => {
            (img.height(), img.width(), img.into_raw().into_iter().map(u32::from).collect())
        }
        other => {
            let img = other.to_luma16();
            (img.height(), img.width(), img.into_raw().into_iter().map(u32::from).collect())
        }
    };
    Ok(Grid::from_vec(h as usize, w as usize, data))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| IoError::Json { path: path.display().to_string(), source })?;
    trace::write(path, text + "\n").map_err(file_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = trace::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.display().to_string(), source })
}
