//! Normalized coordinate grids for CT slices and X-ray detector planes.
//!
//! World coordinates live in `[-1, 1]^3`. A volume indexed `[d][h][w]` maps
//! to `z = lerp(d)`, `y = lerp(h)`, `x = lerp(w)`, where
//! `lerp(i) = -1 + 2 i / (len - 1)` for a zero-based index `i`.
//!
//! | plane    | fixed | rows | cols |
//! |----------|-------|------|------|
//! | axial    | z     | y    | x    |
//! | coronal  | y     | z    | x    |
//! | sagittal | x     | z    | y    |
//!
//! The PA detector is the `y = 0` plane (rows z, cols x) and the lateral
//! detector is the `x = 0` plane (rows z, cols y).

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical slicing plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis (0 = d/z, 1 = h/y, 2 = w/x) normal to this plane.
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    /// Volume axes that become the (row, column) axes of a slice.
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self {
            Plane::Axial => (1, 2),
            Plane::Coronal => (0, 2),
            Plane::Sagittal => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    pub fn index(self) -> usize {
        self.normal_axis()
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::Config(format!("unknown plane {other:?}"))),
        }
    }
}

/// X-ray projection direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "pa")]
    Pa,
    #[serde(rename = "lat")]
    Lat,
}

impl View {
    /// Volume axis integrated by this view (y for PA, x for Lat).
    pub fn normal_axis(self) -> usize {
        match self {
            View::Pa => 1,
            View::Lat => 2,
        }
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pa" => Ok(View::Pa),
            "lat" | "lateral" => Ok(View::Lat),
            other => Err(Error::Config(format!("unknown view tag {other:?}"))),
        }
    }
}

/// Endpoint-inclusive map from a zero-based index to `[-1, 1]`.
#[inline]
pub fn lerp_coord(i: usize, len: usize) -> f64 {
    debug_assert!(len >= 2);
    -1.0 + 2.0 * i as f64 / (len - 1) as f64
}

/// A single CT slice request. `index` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSpec {
    pub plane: Plane,
    pub index: usize,
    pub total: usize,
    pub height: usize,
    pub width: usize,
}

impl SliceSpec {
    pub fn new(
        plane: Plane,
        index: usize,
        total: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let spec = SliceSpec {
            plane,
            index,
            total,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total < 2 || self.height < 2 || self.width < 2 {
            return Err(Error::DegenerateGrid(format!(
                "need N, H, W >= 2, got N={} H={} W={}",
                self.total, self.height, self.width
            )));
        }
        if self.index < 1 || self.index > self.total {
            return Err(Error::Index {
                what: "slice index",
                index: self.index,
                len: self.total,
            });
        }
        Ok(())
    }
}

/// `H x W x 3` map of normalized `(x, y, z)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub coords: Array3<f64>,
}

impl PositionGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// Coordinate triple at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.coords[[row, col, 0]],
            self.coords[[row, col, 1]],
            self.coords[[row, col, 2]],
        ]
    }
}

// Coordinate component (0 = x, 1 = y, 2 = z) carried by a volume axis.
fn component_of_axis(axis: usize) -> usize {
    2 - axis
}

fn build_grid(
    height: usize,
    width: usize,
    row_component: usize,
    col_component: usize,
    fixed: (usize, f64),
) -> PositionGrid {
    let mut coords = Array3::<f64>::zeros((height, width, 3));
    for r in 0..height {
        let rv = lerp_coord(r, height);
        for c in 0..width {
            coords[[r, c, row_component]] = rv;
            coords[[r, c, col_component]] = lerp_coord(c, width);
            coords[[r, c, fixed.0]] = fixed.1;
        }
    }
    PositionGrid { coords }
}

/// Coordinate grid of slice `spec.index` along `spec.plane`.
pub fn slice_coord_grid(spec: &SliceSpec) -> Result<PositionGrid> {
    spec.validate()?;
    let (row_axis, col_axis) = spec.plane.in_plane_axes();
    let normal = component_of_axis(spec.plane.normal_axis());
    Ok(build_grid(
        spec.height,
        spec.width,
        component_of_axis(row_axis),
        component_of_axis(col_axis),
        (normal, lerp_coord(spec.index - 1, spec.total)),
    ))
}

/// Coordinate grid of an X-ray detector plane (the normal component is 0).
pub fn xray_coord_grid(view: View, height: usize, width: usize) -> Result<PositionGrid> {
    if height < 2 || width < 2 {
        return Err(Error::DegenerateGrid(format!(
            "X-ray grid needs H, W >= 2, got {height}x{width}"
        )));
    }
    let grid = match view {
        View::Pa => build_grid(height, width, 2, 0, (1, 0.0)),
        View::Lat => build_grid(height, width, 2, 1, (0, 0.0)),
    };
    Ok(grid)
}

/// Parses a view tag and builds its grid.
pub fn xray_coord_grid_tagged(tag: &str, height: usize, width: usize) -> Result<PositionGrid> {
    xray_coord_grid(tag.parse()?, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    fn constant_components(grid: &PositionGrid) -> Vec<usize> {
        (0..3)
            .filter(|&k| {
                let first = grid.coords[[0, 0, k]];
                grid.coords
                    .index_axis(ndarray::Axis(2), k)
                    .iter()
                    .all(|&v| v == first)
            })
            .collect()
    }

    #[test]
    fn axial_midpoint() {
        let g = slice_coord_grid(&SliceSpec::new(Plane::Axial, 2, 3, 3, 3).unwrap()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let [x, y, z] = g.at(r, c);
                assert_eq!(z, 0.0);
                assert!((x - [-1.0, 0.0, 1.0][c]).abs() < EPS);
                assert!((y - [-1.0, 0.0, 1.0][r]).abs() < EPS);
            }
        }
    }

    #[test]
    fn sagittal_first_slice_is_left_face() {
        let g = slice_coord_grid(&SliceSpec::new(Plane::Sagittal, 1, 5, 2, 2).unwrap()).unwrap();
        assert!(g
            .coords
            .index_axis(ndarray::Axis(2), 0)
            .iter()
            .all(|&x| x == -1.0));
    }

    #[test]
    fn coronal_fourth_of_five() {
        let g = slice_coord_grid(&SliceSpec::new(Plane::Coronal, 4, 5, 4, 4).unwrap()).unwrap();
        assert!(g
            .coords
            .index_axis(ndarray::Axis(2), 1)
            .iter()
            .all(|&y| (y - 0.5).abs() < EPS));
        assert!(g.coords.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn slice_errors() {
        assert!(matches!(
            SliceSpec::new(Plane::Axial, 0, 4, 4, 4),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            SliceSpec::new(Plane::Axial, 5, 4, 4, 4),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            SliceSpec::new(Plane::Axial, 1, 1, 4, 4),
            Err(Error::DegenerateGrid(_))
        ));
    }

    #[test]
    fn pa_corners() {
        let g = xray_coord_grid(View::Pa, 2, 2).unwrap();
        assert!(g
            .coords
            .index_axis(ndarray::Axis(2), 1)
            .iter()
            .all(|&y| y == 0.0));
        assert_eq!(g.at(0, 0), [-1.0, 0.0, -1.0]);
        assert_eq!(g.at(0, 1), [1.0, 0.0, -1.0]);
        assert_eq!(g.at(1, 0), [-1.0, 0.0, 1.0]);
        assert_eq!(g.at(1, 1), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn lat_center() {
        let g = xray_coord_grid(View::Lat, 3, 3).unwrap();
        assert!(g
            .coords
            .index_axis(ndarray::Axis(2), 0)
            .iter()
            .all(|&x| x == 0.0));
        assert_eq!(g.at(1, 1), [0.0, 0.0, 0.0]);
        // y runs along columns for the lateral view
        assert_eq!(g.at(1, 2), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn pa_row_two_of_four() {
        let g = xray_coord_grid(View::Pa, 4, 4).unwrap();
        for c in 0..4 {
            assert!((g.at(1, c)[2] - (-1.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_view_tag() {
        assert!(matches!(
            xray_coord_grid_tagged("oblique", 4, 4),
            Err(Error::Config(_))
        ));
        assert!(xray_coord_grid_tagged("PA", 4, 4).is_ok());
    }

    #[test]
    fn exhaustive_small_grids() {
        for plane in Plane::ALL {
            for total in 2..6 {
                for h in 2..5 {
                    for w in 2..5 {
                        for n in 1..=total {
                            let spec = SliceSpec::new(plane, n, total, h, w).unwrap();
                            let g = slice_coord_grid(&spec).unwrap();
                            assert!(g.coords.iter().all(|v| (-1.0..=1.0).contains(v)));
                            let normal = component_of_axis(plane.normal_axis());
                            assert_eq!(constant_components(&g), vec![normal]);

                            // mirror symmetry in the normal component
                            let mirror = SliceSpec {
                                index: total + 1 - n,
                                ..spec
                            };
                            let m = slice_coord_grid(&mirror).unwrap();
                            for r in 0..h {
                                for c in 0..w {
                                    let (a, b) = (g.at(r, c), m.at(r, c));
                                    for k in 0..3 {
                                        if k == normal {
                                            assert!((a[k] + b[k]).abs() < EPS);
                                        } else {
                                            assert_eq!(a[k], b[k]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for view in [View::Pa, View::Lat] {
            let g = xray_coord_grid(view, 3, 4).unwrap();
            let zero: Vec<usize> = (0..3)
                .filter(|&k| {
                    g.coords
                        .index_axis(ndarray::Axis(2), k)
                        .iter()
                        .all(|&v| v == 0.0)
                })
                .collect();
            assert_eq!(zero.len(), 1);
        }
    }

    #[test]
    fn cross_plane_consistency_on_lattice() {
        // Voxel (d, h, w) of a 5^3 lattice seen from all three planes.
        let n = 5;
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    let axial =
                        slice_coord_grid(&SliceSpec::new(Plane::Axial, d + 1, n, n, n).unwrap())
                            .unwrap();
                    let coronal =
                        slice_coord_grid(&SliceSpec::new(Plane::Coronal, h + 1, n, n, n).unwrap())
                            .unwrap();
                    let sagittal =
                        slice_coord_grid(&SliceSpec::new(Plane::Sagittal, w + 1, n, n, n).unwrap())
                            .unwrap();
                    let a = axial.at(h, w);
                    assert_eq!(a, coronal.at(d, w));
                    assert_eq!(a, sagittal.at(d, h));
                    assert_eq!(a, [lerp_coord(w, n), lerp_coord(h, n), lerp_coord(d, n)]);
                }
            }
        }
    }
}
