//! Paired phantom datasets on disk, indexed by a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    generate_phantom, project, read_image, read_volume, write_image, write_volume, Mode, Volume,
    XRaySet,
};
use crate::error::{Error, Result};
use crate::geometry::View;
use crate::par::Exec;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters for [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub num_shapes: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub volume_path: PathBuf,
    pub pa_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat_path: Option<PathBuf>,
    pub seed: u64,
}

/// Index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    pub resolution: usize,
    pub split: String,
    pub mode: Mode,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded (volume, radiographs) pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub xrays: XRaySet,
}

impl DatasetManifest {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        let volume = read_volume(&self.resolve(&e.volume_path))?;
        let pa = read_image(&self.resolve(&e.pa_path))?;
        let lat = e
            .lat_path
            .as_ref()
            .map(|p| read_image(&self.resolve(p)))
            .transpose()?;
        let xrays = XRaySet::new(pa, lat)?;
        if xrays.dim() != (volume.shape()[0], volume.shape()[2]) {
            return Err(Error::Shape(format!(
                "entry {i}: radiograph size does not match its volume"
            )));
        }
        Ok(Sample { volume, xrays })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        (0..self.entries.len())
            .map(|i| self.load_sample(i))
            .collect()
    }
}

/// Writes `spec.count` phantoms with their projections and a manifest into
/// `out_dir`. Deterministic in `spec.seed`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    build_dataset_with(spec, out_dir, Exec::default())
}

pub fn build_dataset_with(
    spec: &DatasetSpec,
    out_dir: &Path,
    exec: Exec,
) -> Result<DatasetManifest> {
    if spec.count < 1 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..spec.count).map(|_| rng.random()).collect();

    let entries = exec.try_map(spec.count, |i| -> Result<DatasetEntry> {
        let volume = generate_phantom(seeds[i], spec.resolution, spec.num_shapes)?;
        let entry = DatasetEntry {
            volume_path: format!("volume_{i:04}.vol").into(),
            pa_path: format!("pa_{i:04}.img").into(),
            lat_path: (spec.mode == Mode::Biplanar).then(|| format!("lat_{i:04}.img").into()),
            seed: seeds[i],
        };
        write_volume(&volume, &out_dir.join(&entry.volume_path))?;
        write_image(&project(&volume, View::Pa), &out_dir.join(&entry.pa_path))?;
        if let Some(lat) = &entry.lat_path {
            write_image(&project(&volume, View::Lat), &out_dir.join(lat))?;
        }
        Ok(entry)
    })?;

    let manifest = DatasetManifest {
        entries,
        resolution: spec.resolution,
        split: "train".into(),
        mode: spec.mode,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads and validates a manifest; `path` may be the file or its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(0, format!("manifest {}: {e}", file.display())))?;
    manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.entries.is_empty() {
        return Err(Error::Config("manifest has no entries".into()));
    }
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.lat_path.is_some() != (manifest.mode == Mode::Biplanar) {
            return Err(Error::Config(format!(
                "entry {i}: lateral view presence disagrees with mode"
            )));
        }
        for p in std::iter::once(&e.volume_path)
            .chain(std::iter::once(&e.pa_path))
            .chain(e.lat_path.iter())
        {
            let full = manifest.resolve(p);
            if !full.is_file() {
                return Err(Error::io(
                    &full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: Mode) -> DatasetSpec {
        DatasetSpec {
            seed: 42,
            count: 3,
            resolution: 8,
            num_shapes: 3,
            mode,
        }
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&spec(Mode::Biplanar), dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(m, loaded);
        let samples = loaded.load_samples().unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].xrays.mode(), Mode::Biplanar);
        assert_eq!(
            samples[1].volume,
            generate_phantom(m.entries[1].seed, 8, 3).unwrap()
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset_with(&spec(Mode::Monoplanar), a.path(), Exec::Sequential).unwrap();
        build_dataset_with(&spec(Mode::Monoplanar), b.path(), Exec::Parallel).unwrap();
        for name in ["manifest.json", "volume_0002.vol", "pa_0001.img"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        assert!(!a.path().join("lat_0000.img").exists());
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&spec(Mode::Biplanar), dir.path()).unwrap();
        fs::remove_file(dir.path().join("lat_0001.img")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Io { .. })));
    }
}
