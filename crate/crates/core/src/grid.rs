use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Intensity image.
pub type Image = Grid<f32>;
/// Integer label map (0 = background/normal).
pub type LabelMap = Grid<u8>;
/// Binary mask.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} grid needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Signed lookup returning `None` outside the grid.
    pub fn get_signed(&self, r: isize, c: isize) -> Option<&T> {
        (r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols)
            .then(|| self.get(r as usize, c as usize))
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// `out_rows x out_cols` window whose top-left corner sits at `(r0, c0)`
    /// (possibly negative); cells outside the source take `fill`.
    pub fn window(&self, r0: isize, c0: isize, out_rows: usize, out_cols: usize, fill: T) -> Self {
        Self::from_fn(out_rows, out_cols, |r, c| {
            self.get_signed(r0 + r as isize, c0 + c as isize)
                .cloned()
                .unwrap_or_else(|| fill.clone())
        })
    }
}

impl LabelMap {
    /// `labels >= min_label`.
    pub fn at_least(&self, min_label: u8) -> Mask {
        self.map(|&l| l >= min_label)
    }

    /// Pixels whose label is in `set`.
    pub fn in_set(&self, set: &[u8]) -> Mask {
        self.map(|l| set.contains(l))
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> Image {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }
}

impl Image {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}
