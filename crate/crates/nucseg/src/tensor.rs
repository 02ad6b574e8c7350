//! The `SPRT` binary tensor format.
//!
//! Layout (little-endian): magic `b"SPRT"`, `u32` version (1), `u32 h`,
//! `u32 w`, `u32 d`, then `h·w·d` `f32` values in row-major `(h, w, d)`
//! order. Nothing follows the payload.

use std::io::{Read, Write};
use std::path::Path;

use nucseg_core::features::FeatureGrid;

pub const MAGIC: [u8; 4] = *b"SPRT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"SPRT\"")]
    Magic([u8; 4]),
    #[error("unsupported tensor version {0}")]
    Version(u32),
    #[error("payload holds {got} bytes but the header declares {expected}")]
    Length { expected: usize, got: usize },
    #[error("tensor shape {h}x{w}x{d} does not match {what}")]
    Shape { h: usize, w: usize, d: usize, what: &'static str },
    #[error("tensor value {value} at flat index {index} is {what}")]
    Value { index: usize, value: f32, what: &'static str },
}

/// A dense `h × w × d` float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != h * w * d {
            return Err(TensorError::Length { expected: h * w * d * 4, got: data.len() * 4 });
        }
        Ok(Self { h, w, d, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.h as u32, self.w as u32, self.d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN {
            return Err(TensorError::Length { expected: HEADER_LEN, got: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorError::Magic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(TensorError::Version(version));
        }
        let (h, w, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(TensorError::Shape { h, w, d, what: "addressable memory" })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(TensorError::Length { expected, got: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { h, w, d, data })
    }

    pub fn read(path: &Path) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        crate::trace::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        let mut f = crate::trace::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Converts to a feature grid whose cells span `cell` pixels.
    pub fn into_feature_grid(self, cell: usize) -> Result<FeatureGrid, TensorError> {
        if let Some((index, &value)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::Value { index, value, what: "not finite" });
        }
        let (h, w, d) = (self.h, self.w, self.d);
        let data = self.data.into_iter().map(f64::from).collect();
        FeatureGrid::new(h, w, d, cell, data).map_err(|_| TensorError::Shape { h, w, d, what: "a feature grid" })
    }

    /// Converts to a feature grid tiling a `height × width` image, inferring
    /// the cell size from the height.
    pub fn into_feature_grid_for(self, height: usize, width: usize) -> Result<FeatureGrid, TensorError> {
        let cell = height.checked_div(self.h).unwrap_or(0);
        if cell == 0 || width / cell != self.w {
            return Err(TensorError::Shape { h: self.h, w: self.w, d: self.d, what: "the image geometry" });
        }
        self.into_feature_grid(cell)
    }

    pub fn from_feature_grid(grid: &FeatureGrid) -> Self {
        Self {
            h: grid.height(),
            w: grid.width(),
            d: grid.dim(),
            data: grid.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }
}
