use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::geometry::Plane;
use crate::phantom::{slice_volume, Volume};

/// Montage layout, parsed from `ROWSxCOLS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("grid must look like 4x4, got {s:?}"));
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Grid { rows, cols })
    }
}

/// Tiles `rows * cols` evenly spaced slices (first to last, row-major) into
/// one 8-bit image; values map linearly from `[0, 1]` to `[0, 255]`.
pub fn montage(volume: &Volume, plane: Plane, grid: Grid) -> Result<Array2<u8>> {
    let n = volume.slices_along(plane);
    let tiles = grid.rows * grid.cols;
    let (h, w) = volume.slice_dims(plane);
    let mut out = Array2::<u8>::zeros((grid.rows * h, grid.cols * w));
    for k in 0..tiles {
        let index = if tiles == 1 {
            n.div_ceil(2)
        } else {
            1 + ((k * (n - 1)) as f64 / (tiles - 1) as f64).round() as usize
        };
        let slice = slice_volume(volume, plane, index)?;
        let (r, c) = (k / grid.cols, k % grid.cols);
        out.slice_mut(s![r * h..(r + 1) * h, c * w..(c + 1) * w])
            .assign(&slice.mapv(|v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Binary PGM (P5) encoding.
pub fn pgm_bytes(img: &Array2<u8>) -> Vec<u8> {
    let (h, w) = img.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.iter());
    out
}

pub fn write_pgm(img: &Array2<u8>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&pgm_bytes(img)).map_err(|e| Error::io(path, e))
}
