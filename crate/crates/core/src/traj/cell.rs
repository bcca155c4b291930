//! Hierarchical quadtree cells on an equirectangular projection.
//!
//! At zoom `z` the globe is cut into `2^z × 2^z` cells, each `360°/2^z` wide in
//! longitude and `180°/2^z` tall in latitude. The index is the Morton
//! interleave of the column and row, so the parent cell at zoom `z - 1` is
//! simply `index >> 2`. Cells are half-open: a point on an edge belongs to the
//! cell to its north/east, except on the 90°N / 180°E edges which fold into the
//! last row/column.

use serde::{Deserialize, Serialize};

use super::TrajError;

pub const MAX_ZOOM: u8 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub zoom: u8,
    pub index: u64,
}

fn interleave(x: u32, y: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut v = v as u64;
        v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
        v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
        v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
        v = (v | (v << 2)) & 0x3333_3333_3333_3333;
        v = (v | (v << 1)) & 0x5555_5555_5555_5555;
        v
    }
    spread(x) | (spread(y) << 1)
}

fn deinterleave(index: u64) -> (u32, u32) {
    fn squash(mut v: u64) -> u32 {
        v &= 0x5555_5555_5555_5555;
        v = (v | (v >> 1)) & 0x3333_3333_3333_3333;
        v = (v | (v >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
        v = (v | (v >> 4)) & 0x00FF_00FF_00FF_00FF;
        v = (v | (v >> 8)) & 0x0000_FFFF_0000_FFFF;
        v = (v | (v >> 16)) & 0x0000_0000_FFFF_FFFF;
        v as u32
    }
    (squash(index), squash(index >> 1))
}

/// Cell containing `(lat, lon)` at `zoom`.
pub fn map_cell(lat: f64, lon: f64, zoom: u8) -> Result<CellId, TrajError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(TrajError::CoordinateOutOfRange { lat, lon });
    }
    if zoom > MAX_ZOOM {
        return Err(TrajError::InvalidZoom(zoom));
    }
    let side = (1u64 << zoom) as f64;
    let last = (1u64 << zoom) - 1;
    // Scaling by a power of two is exact, so floor() at every zoom sees the
    // same real number and the hierarchy holds bit-for-bit.
    let u = (lon + 180.0) / 360.0;
    let v = (lat + 90.0) / 180.0;
    let x = ((u * side).floor() as u64).min(last) as u32;
    let y = ((v * side).floor() as u64).min(last) as u32;
    Ok(CellId { zoom, index: interleave(x, y) })
}

impl CellId {
    /// Column (longitude) and row (latitude) of the cell at its zoom.
    pub fn grid_xy(&self) -> (u32, u32) {
        deinterleave(self.index)
    }

    /// Ancestor at a coarser zoom.
    pub fn parent(&self, zoom: u8) -> Option<CellId> {
        if zoom > self.zoom {
            return None;
        }
        Some(CellId { zoom, index: self.index >> (2 * (self.zoom - zoom) as u32) })
    }

    pub fn contains(&self, other: &CellId) -> bool {
        other.parent(self.zoom) == Some(*self)
    }

    /// `(lat_min, lat_max, lon_min, lon_max)` in degrees.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (x, y) = self.grid_xy();
        let side = (1u64 << self.zoom) as f64;
        let lon_w = 360.0 / side;
        let lat_h = 180.0 / side;
        let lon_min = -180.0 + x as f64 * lon_w;
        let lat_min = -90.0 + y as f64 * lat_h;
        (lat_min, lat_min + lat_h, lon_min, lon_min + lon_w)
    }

    pub fn center(&self) -> (f64, f64) {
        let (a, b, c, d) = self.bounds();
        ((a + b) / 2.0, (c + d) / 2.0)
    }
}
