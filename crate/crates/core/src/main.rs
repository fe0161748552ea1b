use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dx2ct::diffusion::{
    initial_noise, load_checkpoint, reconstruct_volume_from, train, NoiseSchedule, PipelineConfig,
    SamplerOptions, Trainer,
};
use dx2ct::eval::{evaluate, montage, write_pgm, Grid};
use dx2ct::geometry::Plane;
use dx2ct::par::Exec;
use dx2ct::phantom::{
    build_dataset, load_manifest, read_image, read_volume, write_volume, DatasetSpec, Mode, XRaySet,
};
use dx2ct::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dx2ct",
    version,
    about = "Slice-wise diffusion CT reconstruction from planar radiographs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlaneArg {
    Axial,
    Coronal,
    Sagittal,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Biplanar,
    Monoplanar,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Biplanar)]
        mode: ModeArg,
        /// Ellipsoids per phantom.
        #[arg(long, default_value_t = 6)]
        shapes: usize,
    },
    /// Train a model on a phantom dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON lines); defaults to standard output.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Reconstruct volumes from radiographs.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pa: PathBuf,
        #[arg(long)]
        lat: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PlaneArg::All)]
        plane: PlaneArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Disable data-parallel slice sampling.
        #[arg(long)]
        sequential: bool,
    },
    /// Score reconstructions against a ground-truth volume.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Include wall-clock runtime (makes the report non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Export a grid of slices as a binary PGM image.
    Montage {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        plane: Plane,
        #[arg(long, default_value = "4x4")]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
}

const SAMPLE_META: &str = "sample.json";

fn volume_file(dir: &Path, plane: Plane) -> PathBuf {
    dir.join(format!("{}.vol", plane.name()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PhantomGen {
            out,
            count,
            res,
            seed,
            mode,
            shapes,
        } => {
            let mode = match mode {
                ModeArg::Biplanar => Mode::Biplanar,
                ModeArg::Monoplanar => Mode::Monoplanar,
            };
            let spec = DatasetSpec {
                seed,
                count,
                resolution: res,
                num_shapes: shapes,
                mode,
            };
            let manifest = build_dataset(&spec, &out)?;
            eprintln!(
                "wrote {} phantoms to {}",
                manifest.entries.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            log,
            resume,
        } => {
            let manifest_path = if data.is_dir() {
                data.join(dx2ct::phantom::MANIFEST_FILE)
            } else {
                data
            };
            let manifest = load_manifest(&manifest_path)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(path) => Box::new(BufWriter::new(
                    File::create(path).map_err(|e| Error::io(path, e))?,
                )),
                None => Box::new(std::io::stdout().lock()),
            };
            let checkpoint = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    let steps = ckpt.config.trainer.steps;
                    let mut trainer = Trainer::resume(&ckpt, manifest.load_samples()?)?;
                    trainer.run(steps, Some(sink.as_mut()), Some(&out))?;
                    let ckpt = trainer.checkpoint()?;
                    dx2ct::diffusion::save_checkpoint(&ckpt, &out)?;
                    ckpt
                }
                None => {
                    let config = match config {
                        Some(path) => PipelineConfig::load(&path)?,
                        None => PipelineConfig::default(),
                    };
                    train(&manifest, &config, &out, Some(sink.as_mut()))?
                }
            };
            sink.flush().map_err(|e| Error::io("<training log>", e))?;
            eprintln!(
                "trained {} steps, checkpoint at {}",
                checkpoint.step,
                out.display()
            );
        }
        Command::Sample {
            ckpt,
            pa,
            lat,
            plane,
            seed,
            out,
            sequential,
        } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let model = checkpoint.model()?;
            let pa = read_image(&pa)?;
            let lat = lat.map(|p| read_image(&p)).transpose()?;
            let xrays = match (model.config().mode, lat) {
                (Mode::Biplanar, None) => {
                    return Err(Error::Config(
                        "this checkpoint is biplanar and needs --lat".into(),
                    ))
                }
                (Mode::Monoplanar, Some(_)) => {
                    eprintln!("monoplanar checkpoint: ignoring --lat");
                    XRaySet::new(pa, None)?
                }
                (_, lat) => XRaySet::new(pa, lat)?,
            };
            let planes: Vec<Plane> = match plane {
                PlaneArg::Axial => vec![Plane::Axial],
                PlaneArg::Coronal => vec![Plane::Coronal],
                PlaneArg::Sagittal => vec![Plane::Sagittal],
                PlaneArg::All => Plane::ALL.to_vec(),
            };
            let schedule = NoiseSchedule::new(&checkpoint.config.schedule)?;
            let exec = if sequential {
                Exec::Sequential
            } else {
                Exec::Parallel
            };
            let options = SamplerOptions::from_config(&checkpoint.config.sampler, exec);
            let (h, w) = xrays.dim();
            let x_big_t = initial_noise(seed, h, w, model.dtype(), model.device())?;
            create_dir(&out)?;
            for &p in &planes {
                let vol =
                    reconstruct_volume_from(&model, &schedule, &xrays, p, &x_big_t, &options)?;
                write_volume(&vol, &volume_file(&out, p))?;
            }
            let meta = json!({
                "checkpoint_step": checkpoint.step,
                "config": checkpoint.config,
                "planes": planes.iter().map(|p| p.name()).collect::<Vec<_>>(),
                "seed": seed,
            });
            let path = out.join(SAMPLE_META);
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&meta).expect("json") + "\n",
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        Command::Eval {
            pred,
            gt,
            report,
            timing,
        } => {
            let start = std::time::Instant::now();
            let gt_vol = read_volume(&gt)?;
            let mut preds = Vec::new();
            for p in Plane::ALL {
                let path = volume_file(&pred, p);
                if path.exists() {
                    preds.push((p, read_volume(&path)?));
                }
            }
            if preds.is_empty() {
                return Err(Error::io(
                    volume_file(&pred, Plane::Axial),
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "no reconstructed volumes in the prediction directory",
                    ),
                ));
            }
            let mut result = evaluate(&preds, &gt_vol, Exec::default())?;
            let meta_path = pred.join(SAMPLE_META);
            let sample = if meta_path.exists() {
                let text =
                    std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?
            } else {
                serde_json::Value::Null
            };
            result.config = json!({
                "data_range": 1.0,
                "sample": sample,
                "ssim": {
                    "k1": dx2ct::eval::SSIM_K1,
                    "k2": dx2ct::eval::SSIM_K2,
                    "sigma": dx2ct::eval::SSIM_SIGMA,
                    "window": dx2ct::eval::SSIM_WINDOW,
                },
            });
            if timing {
                result.runtime_seconds = Some(start.elapsed().as_secs_f64());
            }
            std::fs::write(&report, result.to_json()).map_err(|e| Error::io(&report, e))?;
            eprintln!(
                "mean PSNR {:.4} dB, mean SSIM {:.4} over {} plane(s)",
                result.mean_psnr_db,
                result.mean_ssim,
                result.planes.len()
            );
        }
        Command::Montage {
            vol,
            plane,
            grid,
            out,
        } => {
            let volume = read_volume(&vol)?;
            write_pgm(&montage(&volume, plane, grid)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
