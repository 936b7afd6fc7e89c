use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use forest2fcn::convnet::PATCH_SIZE;
use forest2fcn::evalkit::DEFAULT_IOU_MIN;
use forest2fcn::forest::TrainConfig;
use forest2fcn::toolkit::commands::{self, parse_constants, parse_scales, write_report};
use forest2fcn::toolkit::ToolError;

/// Compile random forests into fully convolutional sign detectors and run
/// the mapping pipeline around them.
#[derive(Parser)]
#[command(name = "forest2fcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a feature network with seeded random weights.
    InitFeatures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Widths of the three convolution groups.
        #[arg(long, default_value = "32,64,128")]
        channels: String,
    },
    /// Run the feature network on patch images (PPM, 32x32).
    ExtractFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train a random forest on extracted features.
    TrainForest(TrainFlags),
    /// Map a forest onto a three-layer network head.
    Compile {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steepness of the split and leaf layers, `c01,c12`.
        #[arg(long)]
        constants: Option<String>,
        /// Use exact sign and step activations.
        #[arg(long)]
        hard_mode: bool,
        #[arg(long, default_value_t = PATCH_SIZE)]
        patch_size: usize,
    },
    /// Fuse a feature network and a compiled head into one model bundle.
    Fuse {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect signs in images, one document per image.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pyramid level count or comma-separated scale list.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        tmin: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Check a model bundle against the forest it was compiled from.
    Verify {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        margin: f64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the patch loop against the fused network.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Image to run on; random noise when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value = "3")]
        scales: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Place detected signs on a map.
    Localize {
        /// Detection documents or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        detections: Vec<PathBuf>,
        /// CSV with columns image,lat,lon,heading,accuracy.
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Map of known signs to report errors against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only images taken near braking or jolting events.
    FilterRide {
        /// CSV with columns timestamp,speed_kmh.
        #[arg(long)]
        speed: Option<PathBuf>,
        /// CSV with columns timestamp,ax,ay,az.
        #[arg(long)]
        accel: Option<PathBuf>,
        /// CSV with columns image,timestamp.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision and thresholds from detections and ground truth.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        detections: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        /// Labels file fixing the class order.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Model whose class order to use.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_IOU_MIN)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write a detector config with the selected thresholds.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainFlags {
    /// Tensor file of feature vectors, one per row.
    #[arg(long)]
    features: PathBuf,
    /// One class name per feature vector.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    trees: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_samples_split: usize,
    #[arg(long)]
    features_per_split: Option<usize>,
    #[arg(long)]
    no_bootstrap: bool,
}

fn parse_channels(text: &str) -> Result<[usize; 3], ToolError> {
    let bad = || ToolError::InvalidInput(format!("--channels {text:?}: expected three positive integers"));
    let v: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| bad())
}

fn run(command: Command) -> Result<String, ToolError> {
    Ok(match command {
        Command::InitFeatures { out, seed, channels } => commands::init_features(&commands::InitFeaturesArgs {
            out,
            seed,
            channels: parse_channels(&channels)?,
        })?,
        Command::ExtractFeatures { model, out, images } => {
            commands::extract_features(&commands::ExtractArgs { model, images, out })?
        }
        Command::TrainForest(f) => commands::train(&commands::TrainArgs {
            features: f.features,
            labels: f.labels,
            classes: f.classes,
            out: f.out,
            config: TrainConfig {
                n_trees: f.trees,
                max_depth: f.max_depth,
                min_samples_split: f.min_samples_split,
                features_per_split: f.features_per_split,
                bootstrap: !f.no_bootstrap,
                rng_seed: f.seed,
            },
        })?,
        Command::Compile {
            forest,
            out,
            constants,
            hard_mode,
            patch_size,
        } => commands::compile(&commands::CompileArgs {
            forest,
            out,
            constants: constants.as_deref().map(parse_constants).transpose()?,
            hard_mode,
            patch_size,
        })?,
        Command::Fuse { features, head, out } => commands::fuse_models(&commands::FuseArgs { features, head, out })?,
        Command::Detect {
            model,
            config,
            scales,
            tmin,
            out,
            images,
        } => commands::detect(&commands::DetectArgs {
            model,
            images,
            config,
            scales: scales.as_deref().map(parse_scales).transpose()?,
            t_min: tmin,
            out,
        })?
        .summary(),
        Command::Verify {
            forest,
            model,
            samples,
            seed,
            margin,
            image_size,
            out,
        } => {
            let report = commands::verify(&commands::VerifyArgs {
                forest,
                model,
                samples,
                seed,
                margin_eps: margin,
                image_size,
            })?;
            if let Some(p) = out {
                write_report(&p, &report)?;
            }
            println!("{}", report.summary());
            report.check()?;
            String::new()
        }
        Command::Bench {
            model,
            image,
            size,
            scales,
            repeats,
            seed,
            out,
        } => {
            let report = commands::bench(&commands::BenchArgs {
                model,
                image,
                size,
                scales: parse_scales(&scales)?,
                repeats,
                seed,
            })?;
            if let Some(p) = out {
                write_report(&p, &report)?;
            }
            report.summary()
        }
        Command::Localize {
            detections,
            track,
            config,
            truth,
            out,
        } => commands::localize(&commands::LocalizeArgs {
            detections,
            track,
            camera: config,
            truth,
            out,
        })?
        .summary(),
        Command::FilterRide {
            speed,
            accel,
            images,
            config,
            out,
        } => commands::filter_ride(&commands::FilterArgs {
            speed,
            accel,
            images,
            config,
            out,
        })?
        .summary(),
        Command::Eval {
            detections,
            truth,
            classes,
            model,
            iou,
            out,
            write_config,
        } => commands::eval(&commands::EvalArgs {
            detections,
            truth,
            classes,
            model,
            iou_min: iou,
            out,
            write_config,
        })?
        .summary(),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let kind = match e.kind() {
                ErrorKind::UnknownArgument => "unknown_flag",
                ErrorKind::InvalidSubcommand => "unknown_command",
                ErrorKind::MissingRequiredArgument => "missing_argument",
                _ => "usage_error",
            };
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            eprintln!("error[{kind}]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(s) => {
            if !s.is_empty() {
                println!("{s}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
