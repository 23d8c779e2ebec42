use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fusionkit::fusion::{
    self, attention_to_csv, laser_noise_with, pixel_noise_with, run_pipeline, FusionSpec,
    NoiseMode, Scene, Strategy,
};
use fusionkit::harness::{
    flip_experiment, generate_scene, grad_check_study, rotation_experiment, rows_to_csv,
    GradCheckDims, SceneSpec,
};
use fusionkit::io;

#[derive(Parser)]
#[command(name = "fusionkit", version, about = "Lidar-camera fusion toolkit")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Single,
    Input,
    Late,
    Deep,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Single => Strategy::Single,
            StrategyArg::Input => Strategy::Input,
            StrategyArg::Late => Strategy::Late,
            StrategyArg::Deep => Strategy::Deep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Multiplicative,
    Additive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle with ground-truth correspondences.
    GenScene {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a fusion pipeline on a scene bundle.
    Run {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reprojection error versus augmentation strength.
    AlignStudy {
        #[arg(long)]
        scene: PathBuf,
        /// Max rotations in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,15,30,45")]
        rotations: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        flips: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Project augmented points without undoing the augmentation.
        #[arg(long)]
        no_inverse_aug: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-pillar attention weights of the deep fusion pipeline.
    AttnDump {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare hand-derived attention gradients with central differences.
    GradCheck {
        /// Lidar channels, camera channels, number of camera features.
        #[arg(long, value_delimiter = ',', default_value = "4,3,8")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        /// Attention embedding width.
        #[arg(long, default_value_t = 16)]
        embed: usize,
        /// Width of the layer after attention.
        #[arg(long, default_value_t = 12)]
        mlp: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Fail when any instance exceeds this relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a copy of a scene with noisy intensities and camera features.
    Corrupt {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        laser: f64,
        #[arg(long, default_value_t = 0.0)]
        pixel: f64,
        #[arg(long, value_enum, default_value = "multiplicative")]
        mode: NoiseArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(path: Option<&Path>) -> Result<FusionSpec> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(FusionSpec::default()),
    }
}

fn load_scene(dir: &Path) -> Result<Scene> {
    Scene::read_dir(dir).with_context(|| format!("reading scene {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenScene { spec, out } => {
            let mut spec: SceneSpec = match spec {
                Some(p) => io::read_json(&p).with_context(|| format!("reading {}", p.display()))?,
                None => SceneSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let scene = generate_scene(&spec)?;
            scene.write_dir(&out)?;
            info!(
                "wrote {} points, {} correspondences to {}",
                scene.cloud.len(),
                scene.correspondences.as_ref().map_or(0, Vec::len),
                out.display()
            );
        }
        Command::Run {
            strategy,
            scene,
            config,
            out,
        } => {
            let scene = load_scene(&scene)?;
            let mut spec = load_spec(config.as_deref())?;
            spec.strategy = strategy.into();
            let cfg = spec.resolve(scene.features.channels, seed)?;
            let output = run_pipeline(&scene, &cfg)?;
            fs::create_dir_all(&out)?;
            io::write_feature_map(
                &out.join("pseudo_image.fmap"),
                &output.image.to_feature_map()?,
            )?;
            io::write_json(&out.join("record.json"), &output.record)?;
            io::write_json(&out.join("metrics.json"), &output.metrics)?;
            info!("{:?}", output.metrics);
        }
        Command::AlignStudy {
            scene,
            rotations,
            flips,
            trials,
            no_inverse_aug,
            out,
        } => {
            let scene = load_scene(&scene)?;
            let use_ia = !no_inverse_aug;
            let mut rows = rotation_experiment(&scene, &rotations, use_ia, trials, seed)?;
            rows.extend(flip_experiment(&scene, &flips, use_ia, trials, seed)?);
            for r in &rows {
                info!(
                    "{} {} ia={} mean={:.6} px lost={:.4}",
                    r.family, r.setting, r.use_inverse_aug, r.mean_px, r.lost_fraction
                );
            }
            write_file(&out, &rows_to_csv(&rows)?)?;
        }
        Command::AttnDump { scene, config, out } => {
            let scene = load_scene(&scene)?;
            let mut spec = load_spec(config.as_deref())?;
            spec.strategy = Strategy::Deep;
            let cfg = spec.resolve(scene.features.channels, seed)?;
            let output = fusion::deep_fusion(&scene, &cfg)?;
            write_file(&out, &attention_to_csv(&output.attention)?)?;
        }
        Command::GradCheck {
            dims,
            seeds,
            embed,
            mlp,
            eps,
            tolerance,
            out,
        } => {
            let [lidar_dim, camera_dim, num_cameras] = dims[..] else {
                bail!("--dims needs three values: lidar,camera,count");
            };
            let dims = GradCheckDims {
                lidar_dim,
                camera_dim,
                num_cameras,
                embed_dim: embed,
                mlp_dim: mlp,
            };
            let rows = grad_check_study(dims, seeds, seed, eps)?;
            write_file(&out, &rows_to_csv(&rows)?)?;
            let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("max_rel_error={worst:e} over {} instances", rows.len());
            if worst >= tolerance {
                bail!("gradient check failed: max relative error {worst:e} >= {tolerance:e}");
            }
        }
        Command::Corrupt {
            scene: scene_dir,
            laser,
            pixel,
            mode,
            out,
        } => {
            let mut scene = load_scene(&scene_dir)?;
            let mode = match mode {
                NoiseArg::Multiplicative => NoiseMode::Multiplicative,
                NoiseArg::Additive => NoiseMode::Additive,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            scene.cloud = laser_noise_with(&scene.cloud, laser, mode, &mut rng)?;
            scene.features = pixel_noise_with(&scene.features, pixel, mode, &mut rng)?;
            scene.write_dir(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSIONKIT_LOG", "error"))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
