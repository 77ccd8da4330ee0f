//! Boxes on the feature grid.

use crate::error::{Error, Result};

/// Axis-aligned box in continuous grid coordinates: top-left corner plus
/// extents, all in cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub row: f64,
    pub col: f64,
    pub height: f64,
    pub width: f64,
}

impl BBox {
    pub fn new(row: f64, col: f64, height: f64, width: f64) -> Result<Self> {
        if !(height > 0.0 && width > 0.0) || !height.is_finite() || !width.is_finite() {
            return Err(Error::param(format!(
                "box extents must be positive, got {height}x{width}"
            )));
        }
        Ok(BBox {
            row,
            col,
            height,
            width,
        })
    }

    /// Box of the given extents whose center cell is `(row, col)`.
    pub fn centered(center: (f64, f64), height: f64, width: f64) -> Result<Self> {
        BBox::new(
            center.0 - (height - 1.0) / 2.0,
            center.1 - (width - 1.0) / 2.0,
            height,
            width,
        )
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.row + (self.height - 1.0) / 2.0,
            self.col + (self.width - 1.0) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.height * self.width
    }
}

/// Integer box of cells, used to cut kernels out of feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl CellBox {
    /// `(2·half_h+1)×(2·half_w+1)` box around the center cell; fails when
    /// it would stick out of an `grid_h×grid_w` grid.
    pub fn around(
        center: (usize, usize),
        half_h: usize,
        half_w: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let (r, c) = center;
        if r < half_h || c < half_w || r + half_h >= grid_h || c + half_w >= grid_w {
            return Err(Error::OutOfBounds(format!(
                "box of half-size {half_h}x{half_w} around ({r}, {c}) leaves {grid_h}x{grid_w} grid"
            )));
        }
        Ok(CellBox {
            row: r - half_h,
            col: c - half_w,
            height: 2 * half_h + 1,
            width: 2 * half_w + 1,
        })
    }

    /// Shifts a box so it fits inside the grid while keeping its size.
    pub fn clamped_around(
        center: (usize, usize),
        half_h: usize,
        half_w: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Self> {
        let (h, w) = (2 * half_h + 1, 2 * half_w + 1);
        if h > grid_h || w > grid_w {
            return Err(Error::OutOfBounds(format!(
                "{h}x{w} box larger than {grid_h}x{grid_w} grid"
            )));
        }
        let row = center.0.saturating_sub(half_h).min(grid_h - h);
        let col = center.1.saturating_sub(half_w).min(grid_w - w);
        Ok(CellBox {
            row,
            col,
            height: h,
            width: w,
        })
    }

    pub fn center(&self) -> (usize, usize) {
        (self.row + self.height / 2, self.col + self.width / 2)
    }

    pub fn fits(&self, grid_h: usize, grid_w: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.row + self.height <= grid_h
            && self.col + self.width <= grid_w
    }
}
