//! Reconstruction quality metrics, reports and slice montages.

mod montage;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::Plane;
use crate::par::Exec;
use crate::phantom::Volume;

pub use montage::{montage, pgm_bytes, write_pgm, Grid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "volumes differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable Gaussian filter; taps falling outside the image are dropped
/// and the remaining weights renormalized.
fn blur(img: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &Array2<f64>, along_rows: bool| -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (pos, len) = if along_rows {
                (i as isize, h as isize)
            } else {
                (j as isize, w as isize)
            };
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &t) in taps.iter().enumerate() {
                let p = pos + k as isize - r;
                if p < 0 || p >= len {
                    continue;
                }
                let v = if along_rows {
                    src[[p as usize, j]]
                } else {
                    src[[i, p as usize]]
                };
                acc += t * v;
                norm += t;
            }
            acc / norm
        })
    };
    pass(&pass(img, false), true)
}

/// Mean windowed SSIM of two 2-D images with data range 1.
pub fn ssim_2d(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let taps = gaussian_taps();
    let x = a.mapv(f64::from);
    let y = b.mapv(f64::from);
    let mx = blur(&x, &taps);
    let my = blur(&y, &taps);
    let mxx = blur(&(&x * &x), &taps);
    let myy = blur(&(&y * &y), &taps);
    let mxy = blur(&(&x * &y), &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ((((&ux, &uy), &sxx), &syy), &sxy) in mx.iter().zip(&my).zip(&mxx).zip(&myy).zip(&mxy) {
        let vx = sxx - ux * ux;
        let vy = syy - uy * uy;
        let cov = sxy - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / x.len() as f64
}

/// Mean SSIM over the 2-D slices along the first axis.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    ssim_with(a, b, Exec::default())
}

pub fn ssim_with(a: &Volume, b: &Volume, exec: Exec) -> Result<f64> {
    check_shapes(a, b)?;
    let d = a.shape()[0];
    let per_slice = exec.map(d, |i| {
        ssim_2d(
            a.data().index_axis(Axis(0), i),
            b.data().index_axis(Axis(0), i),
        )
    });
    Ok(per_slice.iter().sum::<f64>() / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub planes: BTreeMap<Plane, PlaneMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Free-form configuration echo.
    pub config: Value,
    /// Left out of the JSON when `None` so that reports stay reproducible.
    pub runtime_seconds: Option<f64>,
}

/// Scores each per-plane reconstruction against `gt` and averages.
pub fn evaluate(predictions: &[(Plane, Volume)], gt: &Volume, exec: Exec) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::Config("no reconstructions to evaluate".into()));
    }
    let mut planes = BTreeMap::new();
    for (plane, vol) in predictions {
        let m = PlaneMetrics {
            psnr_db: psnr(vol, gt, 1.0)?,
            ssim: ssim_with(vol, gt, exec)?,
        };
        if planes.insert(*plane, m).is_some() {
            return Err(Error::Config(format!("plane {plane} given twice")));
        }
    }
    let n = planes.len() as f64;
    Ok(MetricReport {
        mean_psnr_db: planes.values().map(|m| m.psnr_db).sum::<f64>() / n,
        mean_ssim: planes.values().map(|m| m.ssim).sum::<f64>() / n,
        planes,
        config: Value::Null,
        runtime_seconds: None,
    })
}

/// Rounds to 6 significant digits; non-finite values become strings.
pub fn report_number(x: f64) -> Value {
    if x.is_nan() {
        return Value::String("nan".into());
    }
    if x.is_infinite() {
        return Value::String(if x > 0.0 { "inf" } else { "-inf" }.into());
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float");
    serde_json::Number::from_f64(rounded).map_or(Value::Null, Value::Number)
}

impl MetricReport {
    pub fn to_value(&self) -> Value {
        let metrics = |psnr: f64, ssim: f64| {
            let mut m = Map::new();
            m.insert("psnr_db".into(), report_number(psnr));
            m.insert("ssim".into(), report_number(ssim));
            Value::Object(m)
        };
        let mut planes = Map::new();
        for (p, m) in &self.planes {
            planes.insert(p.name().into(), metrics(m.psnr_db, m.ssim));
        }
        let mut root = Map::new();
        root.insert(
            "averages".into(),
            metrics(self.mean_psnr_db, self.mean_ssim),
        );
        root.insert("config".into(), self.config.clone());
        root.insert("planes".into(), Value::Object(planes));
        if let Some(s) = self.runtime_seconds {
            root.insert("runtime_seconds".into(), report_number(s));
        }
        Value::Object(root)
    }

    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("report serializes");
        s.push('\n');
        s
    }
}
