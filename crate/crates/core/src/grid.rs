//! Dense row-major rasters shared by every stage.

use alloc::vec;
use alloc::vec::Vec;

/// A row-major `height × width` grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel booleans (`M_fg`, `M_bg`, activation binarizations, ...).
pub type BinaryMask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }
}

impl<T> Grid<T> {
    /// Wraps `data` as a grid. Panics when the length does not match the shape.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length does not match {height}x{width}");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> Self {
        self.map(|&v| !v)
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// An 8-bit interleaved raster, `height × width × channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    /// Panics when `data` does not hold exactly `height * width * channels` bytes.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Self {
        assert!(channels >= 1, "raster needs at least one channel");
        assert_eq!(data.len(), height * width * channels, "raster data length mismatch");
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, pixel: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&pixel);
        }
        Self { height, width, channels: 3, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// First three channels of a pixel. Single-channel rasters are replicated.
    #[inline]
    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let base = (row * self.width + col) * self.channels;
        if self.channels >= 3 {
            [self.data[base], self.data[base + 1], self.data[base + 2]]
        } else {
            let v = self.data[base];
            [v, v, v]
        }
    }

    #[inline]
    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let base = (row * self.width + col) * self.channels;
        let n = self.channels.min(3);
        self.data[base..base + n].copy_from_slice(&rgb[..n]);
    }

    /// Copies the `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> RasterImage {
        assert!(top + height <= self.height && left + width <= self.width, "crop outside raster");
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in top..top + height {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        RasterImage { height, width, channels: self.channels, data }
    }
}

/// Crops a grid window (same contract as [`RasterImage::crop`]).
pub fn crop_grid<T: Clone>(grid: &Grid<T>, top: usize, left: usize, height: usize, width: usize) -> Grid<T> {
    assert!(top + height <= grid.height() && left + width <= grid.width(), "crop outside grid");
    Grid::from_fn(height, width, |r, c| grid.get(top + r, left + c).clone())
}
