//! Synthetic paired data: ellipsoid phantoms, parallel-beam radiographs,
//! slicing, and the on-disk formats for volumes, images and datasets.

mod container;
mod dataset;

pub use container::{
    decode, encode, read_array, read_image, read_volume, write_array, write_image, write_volume,
};
pub use dataset::{
    build_dataset, build_dataset_with, load_manifest, DatasetEntry, DatasetManifest, DatasetSpec,
    Sample, MANIFEST_FILE,
};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lerp_coord, Plane, View};
use crate::par::Exec;

/// Line-integral scale applied before the exponential detector response.
pub const PATHLEN_SCALE: f64 = 4.0;

/// A `D x H x W` attenuation field with every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume(Array3<f32>);

impl Volume {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (d, h, w) = data.dim();
        if d < 2 || h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "volume dims must be >= 2, got {d}x{h}x{w}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("volume value {v} outside [0, 1]")));
        }
        Ok(Volume(data))
    }

    /// Clamps into `[0, 1]`; non-finite values are rejected.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in volume".into()));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Result<Self> {
        Self::new(Array3::zeros(shape))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.0.dim();
        [d, h, w]
    }

    /// Number of slices along `plane`'s normal.
    pub fn slices_along(&self, plane: Plane) -> usize {
        self.shape()[plane.normal_axis()]
    }

    /// `(rows, cols)` of a slice along `plane`.
    pub fn slice_dims(&self, plane: Plane) -> (usize, usize) {
        let s = self.shape();
        let (r, c) = plane.in_plane_axes();
        (s[r], s[c])
    }
}

/// Bi- or mono-planar acquisition mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Biplanar,
    Monoplanar,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biplanar" => Ok(Mode::Biplanar),
            "monoplanar" => Ok(Mode::Monoplanar),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Biplanar => "biplanar",
            Mode::Monoplanar => "monoplanar",
        })
    }
}

/// PA image plus an optional lateral image of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct XRaySet {
    pa: Array2<f32>,
    lat: Option<Array2<f32>>,
}

impl XRaySet {
    pub fn new(pa: Array2<f32>, lat: Option<Array2<f32>>) -> Result<Self> {
        let check = |img: &Array2<f32>, name: &str| -> Result<()> {
            let (h, w) = img.dim();
            if h < 2 || w < 2 {
                return Err(Error::Shape(format!("{name} image must be at least 2x2")));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Numeric(format!(
                    "{name} image has values outside [0, 1]"
                )));
            }
            Ok(())
        };
        check(&pa, "PA")?;
        if let Some(lat) = &lat {
            check(lat, "Lat")?;
            if lat.dim() != pa.dim() {
                return Err(Error::Shape(format!(
                    "PA is {:?} but Lat is {:?}",
                    pa.dim(),
                    lat.dim()
                )));
            }
        }
        Ok(XRaySet { pa, lat })
    }

    /// Projects `volume` in the views required by `mode`.
    pub fn from_volume(volume: &Volume, mode: Mode) -> Result<Self> {
        let pa = project(volume, View::Pa);
        let lat = match mode {
            Mode::Biplanar => Some(project(volume, View::Lat)),
            Mode::Monoplanar => None,
        };
        Self::new(pa, lat)
    }

    pub fn pa(&self) -> &Array2<f32> {
        &self.pa
    }

    pub fn lat(&self) -> Option<&Array2<f32>> {
        self.lat.as_ref()
    }

    pub fn mode(&self) -> Mode {
        if self.lat.is_some() {
            Mode::Biplanar
        } else {
            Mode::Monoplanar
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pa.dim()
    }

    /// Drops the lateral view.
    pub fn to_monoplanar(&self) -> XRaySet {
        XRaySet {
            pa: self.pa.clone(),
            lat: None,
        }
    }
}

/// Axis-aligned ellipsoid in normalized coordinates `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let s: f64 = (0..3)
            .map(|k| {
                let u = (p[k] - self.center[k]) / self.semi_axes[k];
                u * u
            })
            .sum();
        s <= 1.0
    }

    fn random(rng: &mut impl Rng) -> Self {
        let mut e = Ellipsoid {
            center: [0.0; 3],
            semi_axes: [0.0; 3],
            intensity: rng.random_range(0.2..=0.8),
        };
        for k in 0..3 {
            e.center[k] = rng.random_range(-0.6..=0.6);
            e.semi_axes[k] = rng.random_range(0.1..=0.5);
        }
        e
    }
}

/// Ellipsoids drawn for `seed`: centers in `[-0.6, 0.6]^3`, semi-axes in
/// `[0.1, 0.5]`, intensities in `[0.2, 0.8]`.
pub fn random_ellipsoids(seed: u64, count: usize) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Ellipsoid::random(&mut rng)).collect()
}

/// Samples the clamped sum of `shapes` on an `R^3` lattice.
pub fn rasterize_with(shapes: &[Ellipsoid], resolution: usize, exec: Exec) -> Result<Volume> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "resolution must be >= 2, got {resolution}"
        )));
    }
    let r = resolution;
    let mut data = vec![0f32; r * r * r];
    exec.for_each_chunk(&mut data, r * r, |d, slab| {
        let z = lerp_coord(d, r);
        for h in 0..r {
            let y = lerp_coord(h, r);
            for w in 0..r {
                let p = [lerp_coord(w, r), y, z];
                let v: f64 = shapes
                    .iter()
                    .filter(|e| e.contains(p))
                    .map(|e| e.intensity)
                    .sum();
                slab[h * r + w] = v.clamp(0.0, 1.0) as f32;
            }
        }
    });
    Volume::new(Array3::from_shape_vec((r, r, r), data).expect("lattice size"))
}

pub fn rasterize(shapes: &[Ellipsoid], resolution: usize) -> Result<Volume> {
    rasterize_with(shapes, resolution, Exec::default())
}

/// Random ellipsoid phantom, deterministic in `seed`.
pub fn generate_phantom(seed: u64, resolution: usize, num_shapes: usize) -> Result<Volume> {
    generate_phantom_with(seed, resolution, num_shapes, Exec::default())
}

pub fn generate_phantom_with(
    seed: u64,
    resolution: usize,
    num_shapes: usize,
    exec: Exec,
) -> Result<Volume> {
    if resolution < 8 {
        return Err(Error::Config(format!(
            "phantom resolution must be >= 8, got {resolution}"
        )));
    }
    if num_shapes < 1 {
        return Err(Error::Config("phantom needs at least one ellipsoid".into()));
    }
    rasterize_with(&random_ellipsoids(seed, num_shapes), resolution, exec)
}

/// Parallel-beam radiograph: `1 - exp(-PATHLEN_SCALE * mean attenuation)`
/// along the view's normal axis.
pub fn project(volume: &Volume, view: View) -> Array2<f32> {
    project_with(volume, view, Exec::default())
}

pub fn project_with(volume: &Volume, view: View, exec: Exec) -> Array2<f32> {
    let data = volume.data();
    let axis = view.normal_axis();
    let [d, h, w] = volume.shape();
    let cols = if axis == 1 { w } else { h };
    let len = volume.shape()[axis];
    let rows = exec.map(d, |z| {
        let plane = data.index_axis(Axis(0), z);
        (0..cols)
            .map(|c| {
                let sum: f64 = match axis {
                    1 => plane.column(c).iter().map(|&v| v as f64).sum(),
                    _ => plane.row(c).iter().map(|&v| v as f64).sum(),
                };
                let mean = sum / len as f64;
                (1.0 - (-mean * PATHLEN_SCALE).exp()) as f32
            })
            .collect::<Vec<f32>>()
    });
    Array2::from_shape_vec((d, cols), rows.concat()).expect("projection size")
}

/// 1-based slice `index` along `plane`, oriented per [`crate::geometry`].
pub fn slice_volume(volume: &Volume, plane: Plane, index: usize) -> Result<Array2<f32>> {
    let len = volume.slices_along(plane);
    if index < 1 || index > len {
        return Err(Error::Index {
            what: "slice index",
            index,
            len,
        });
    }
    Ok(volume
        .data()
        .index_axis(Axis(plane.normal_axis()), index - 1)
        .to_owned())
}

/// Inverse of [`slice_volume`]: stacks slices `1..=N` along `plane`.
pub fn stack_slices(plane: Plane, slices: &[ArrayView2<f32>]) -> Result<Array3<f32>> {
    let views: Vec<_> = slices.to_vec();
    ndarray::stack(Axis(plane.normal_axis()), &views)
        .map_err(|e| Error::Shape(format!("cannot stack slices: {e}")))
}
