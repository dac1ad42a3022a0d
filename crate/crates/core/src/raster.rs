//! Raster data model shared by every pipeline stage.
//!
//! All rasters are row-major with pixel `(row, col)` stored at
//! `row * width + col`. Pixel centers sit on integer coordinates.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// A dense row-major H×W raster of `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(
                format!("{} values for {height}x{width}", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
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
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn ensure_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.shape() != (height, width) {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!("{}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// Boolean raster.
pub type Mask = Grid<bool>;

/// Truncated distance (pixels) to the nearest annotation.
pub type DistanceMap = Grid<f32>;

/// Index of the nearest annotation point per pixel (Voronoi partition).
pub type RegionMap = Grid<u32>;

/// Per-pixel foreground probability.
pub type ProbabilityMap = Grid<f32>;

/// Partial semantic label map.
pub type SemanticLabelMap = Grid<SemanticLabel>;

/// Partial semantic label code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SemanticLabel {
    Background = 0,
    Foreground = 1,
    Unlabeled = 2,
}

impl SemanticLabel {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Background),
            1 => Ok(Self::Foreground),
            2 => Ok(Self::Unlabeled),
            other => Err(Error::InvalidLabelCode(other)),
        }
    }

    /// Binary target for labeled pixels, `None` when unlabeled.
    pub fn target(self) -> Option<f64> {
        match self {
            Self::Background => Some(0.0),
            Self::Foreground => Some(1.0),
            Self::Unlabeled => None,
        }
    }
}

/// An H×W 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dims("non-empty image", format!("{height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::PayloadSizeMismatch {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * 3)
            .collect();
        Self::new(height, width, data)
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
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// RGB scaled to `[0, 1]`.
    #[inline]
    pub fn pixel_unit(&self, row: usize, col: usize) -> [f64; 3] {
        let [r, g, b] = self.pixel(row, col);
        [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

/// A nucleus point annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub row: usize,
    pub col: usize,
}

impl Point {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    #[inline]
    pub(crate) fn dist2(&self, row: usize, col: usize) -> i64 {
        let dr = self.row as i64 - row as i64;
        let dc = self.col as i64 - col as i64;
        dr * dr + dc * dc
    }
}

/// Point annotations for one image: distinct in-bounds pixel coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    /// Builds a point set, rejecting duplicates. Bounds are checked by
    /// [`PointSet::check_bounds`] once the raster size is known.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(Error::DuplicatePoint {
                    row: p.row,
                    col: p.col,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn from_coords(coords: &[(usize, usize)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(r, c)| Point::new(r, c)).collect())
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        match self
            .points
            .iter()
            .find(|p| p.row >= height || p.col >= width)
        {
            Some(p) => Err(Error::PointOutOfBounds {
                row: p.row,
                col: p.col,
                height,
                width,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::NoAnnotations)
        } else {
            Ok(())
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn as_slice(&self) -> &[Point] {
        &self.points
    }
}

impl<'a> IntoIterator for &'a PointSet {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Instance ids per pixel; 0 is background and used ids are `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    ids: Grid<u32>,
    count: u32,
}

impl InstanceLabelMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            ids: Grid::filled(height, width, 0),
            count: 0,
        }
    }

    /// Wraps a raster of arbitrary ids, compacting them to `1..=N` while
    /// preserving their relative order. Already-contiguous maps are unchanged.
    pub fn from_raw(ids: Grid<u32>) -> Self {
        let mut distinct: Vec<u32> = ids.as_slice().iter().copied().filter(|&i| i > 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let count = distinct.len() as u32;
        if distinct.last().is_none_or(|&m| m == count) {
            return Self { ids, count };
        }
        let ids = ids.map(|&id| {
            if id == 0 {
                0
            } else {
                distinct.binary_search(&id).expect("collected above") as u32 + 1
            }
        });
        Self { ids, count }
    }

    /// Renumbers ids `1..=N` in raster order of each instance's first pixel.
    pub fn canonical(&self) -> Self {
        let mut remap = vec![0u32; self.count() + 1];
        let mut next = 0u32;
        let ids = self.ids.map(|&id| {
            if id == 0 {
                return 0;
            }
            if remap[id as usize] == 0 {
                next += 1;
                remap[id as usize] = next;
            }
            remap[id as usize]
        });
        Self { ids, count: next }
    }

    /// Wraps ids already known to be contiguous.
    pub(crate) fn from_contiguous(ids: Grid<u32>, count: u32) -> Self {
        debug_assert!(ids.as_slice().iter().all(|&i| i <= count));
        Self { ids, count }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.ids.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.ids.width()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.ids.shape()
    }

    /// Number of instances N.
    #[inline]
    pub fn count(&self) -> usize {
        self.count as usize
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        *self.ids.get(row, col)
    }

    pub fn ids(&self) -> &Grid<u32> {
        &self.ids
    }

    pub fn as_slice(&self) -> &[u32] {
        self.ids.as_slice()
    }

    pub fn foreground(&self) -> Mask {
        self.ids.map(|&id| id > 0)
    }

    /// Pixel count per instance, indexed by `id - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count()];
        for &id in self.as_slice() {
            if id > 0 {
                areas[id as usize - 1] += 1;
            }
        }
        areas
    }
}

/// Per-pixel D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingField {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(Error::PayloadSizeMismatch {
                expected: height * width * dim,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite embedding value {v}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            values: vec![0.0; height * width * dim],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Embedding of pixel `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.dim;
        &self.values[i..i + self.dim]
    }

    /// Embedding of the pixel at flat index `idx`.
    pub fn at_index(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_raw_compacts_ids() {
        let ids = Grid::from_vec(2, 3, vec![0, 7, 7, 3, 0, 9]).unwrap();
        let map = InstanceLabelMap::from_raw(ids);
        assert_eq!(map.as_slice(), &[0, 2, 2, 1, 0, 3]);
        assert_eq!(map.count(), 3);
        assert_eq!(map.areas(), vec![1, 2, 1]);
        assert_eq!(map.canonical().as_slice(), &[0, 1, 1, 2, 0, 3]);
    }

    #[test]
    fn from_raw_keeps_contiguous_ids() {
        let ids = Grid::from_vec(1, 3, vec![2, 0, 1]).unwrap();
        assert_eq!(InstanceLabelMap::from_raw(ids).as_slice(), &[2, 0, 1]);
    }

    #[test]
    fn duplicate_points_rejected() {
        let err = PointSet::from_coords(&[(1, 2), (3, 4), (1, 2)]).unwrap_err();
        assert!(matches!(err, Error::DuplicatePoint { row: 1, col: 2 }));
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        let points = PointSet::from_coords(&[(4, 0)]).unwrap();
        assert!(points.check_bounds(5, 5).is_ok());
        assert!(points.check_bounds(4, 5).is_err());
    }

    #[test]
    fn image_payload_checked() {
        assert!(RasterImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RasterImage::new(0, 2, vec![]).is_err());
        let img = RasterImage::filled(2, 3, [1, 2, 3]).unwrap();
        assert_eq!(img.pixel(1, 2), [1, 2, 3]);
    }

    #[test]
    fn label_codes() {
        for code in 0..=2 {
            assert_eq!(SemanticLabel::from_code(code).unwrap().code(), code);
        }
        assert!(matches!(
            SemanticLabel::from_code(7),
            Err(Error::InvalidLabelCode(7))
        ));
    }
}
