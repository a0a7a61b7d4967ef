//! `terrabev`: synthetic data, pseudo-labels, training, prediction,
//! evaluation and rendering from the command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use terrabev::eval::{confusion, ece, metrics, EvalReport, DEFAULT_ECE_BINS};
use terrabev::features::FeatureGrid;
use terrabev::fusion_model::{predict_grid, TrainBatch};
use terrabev::geometry::{CameraModel, PointCloud, RigidTransform};
use terrabev::io::{self, DatasetLayout, GridKind, Palette, StoredGrid};
use terrabev::pipeline::{coverage, fit, frame_features, masked, pseudo_batch};
use terrabev::pseudo_label::{generate, SemanticImage};
use terrabev::synth::{generate_dataset, SynthConfig};
use terrabev::VOID;

use config::Settings;

#[derive(Parser, Debug)]
#[command(name = "terrabev", version, about = "Bird's-eye-view terrain mapping from LiDAR and camera semantics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        label_noise: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Build the pseudo-label grid of one keyframe.
    PseudoLabel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long)]
        densify_radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LabelSource::Pseudo)]
        labels_from: LabelSource,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a dense label grid for one frame.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Compare a predicted grid with a truth grid.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render a grid as a PPM image.
    Render {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Channel::Label)]
        channel: Channel,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LabelSource {
    Pseudo,
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Channel {
    Label,
    Uncertainty,
    Confidence,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(terrabev::Error),
}

impl From<terrabev::Error> for Failure {
    fn from(e: terrabev::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

fn check(ok: bool, message: impl FnOnce() -> String) -> CliResult {
    if ok {
        Ok(())
    } else {
        Err(usage(message()))
    }
}

fn unit_rate(name: &str, v: f64) -> CliResult {
    check((0.0..=1.0).contains(&v), || format!("--{name} must be in [0, 1], got {v}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth {
            out,
            seed,
            frames,
            noise_sigma,
            label_noise,
            dropout,
        } => {
            let layout = DatasetLayout::new(out);
            let mut s = Settings::load(&layout.config_path())?;
            s.seed = seed.unwrap_or(s.seed);
            s.frames = frames.unwrap_or(s.frames);
            s.noise_sigma = noise_sigma.unwrap_or(s.noise_sigma);
            s.label_noise = label_noise.unwrap_or(s.label_noise);
            s.dropout = dropout.unwrap_or(s.dropout);
            check(s.frames > 0, || "--frames must be positive".into())?;
            check(s.noise_sigma >= 0.0, || format!("--noise-sigma must be >= 0, got {}", s.noise_sigma))?;
            unit_rate("label-noise", s.label_noise)?;
            unit_rate("dropout", s.dropout)?;
            synth(&layout, &s)
        }
        Command::PseudoLabel {
            data,
            frame,
            window,
            alpha0,
            densify_radius,
            out,
        } => {
            let layout = DatasetLayout::new(data);
            let mut s = Settings::load(&layout.config_path())?;
            s.pseudo.window = window.unwrap_or(s.pseudo.window);
            s.pseudo.alpha0 = alpha0.unwrap_or(s.pseudo.alpha0);
            s.pseudo.densify_radius = densify_radius.unwrap_or(s.pseudo.densify_radius);
            check(s.pseudo.alpha0 > 0.0 && s.pseudo.alpha0.is_finite(), || {
                format!("--alpha0 must be positive, got {}", s.pseudo.alpha0)
            })?;
            check(s.pseudo.densify_radius >= 0.0, || {
                format!("--densify-radius must be >= 0, got {}", s.pseudo.densify_radius)
            })?;
            let ds = Dataset::load(&layout, &s)?;
            let pos = ds.position(frame)?;
            let grid = generate(&ds.clouds, &ds.images, &ds.cams, &ds.poses, pos, &s.grid, &s.pseudo)?;
            let labeled = grid.label.iter().filter(|l| **l != VOID).count();
            io::write_grid(&out, &io::pseudo_to_grid(&grid))?;
            info!("frame {frame:06}: {labeled} of {} cells labeled, wrote {}", grid.num_cells(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            labels_from,
            epochs,
            lr,
            hidden,
            levels,
            seed,
            out,
        } => {
            let layout = DatasetLayout::new(data);
            let mut s = Settings::load(&layout.config_path())?;
            s.hyper.epochs = epochs.unwrap_or(s.hyper.epochs);
            s.hyper.lr = lr.unwrap_or(s.hyper.lr);
            s.hyper.hidden = hidden.unwrap_or(s.hyper.hidden);
            s.hyper.seed = seed.unwrap_or(s.hyper.seed);
            if let Some(l) = levels {
                s.levels = l;
            }
            check(s.hyper.lr >= 0.0 && s.hyper.lr.is_finite(), || format!("--lr must be >= 0, got {}", s.hyper.lr))?;
            check(s.hyper.hidden > 0, || "--hidden must be positive".into())?;
            check(!s.levels.is_empty() && s.levels.iter().all(|l| *l > 0), || {
                "--levels must be a non-empty list of positive factors".into()
            })?;
            train(&layout, &s, labels_from, &out)
        }
        Command::Predict {
            data,
            frame,
            model,
            out,
            render,
        } => {
            let layout = DatasetLayout::new(data);
            let s = Settings::load(&layout.config_path())?;
            predict(&layout, &s, frame, &model, &out, render.as_deref())
        }
        Command::Eval { pred, truth, report } => evaluate(&pred, &truth, &report),
        Command::Render { grid, out, channel } => render(&grid, &out, channel),
    }
}

fn synth(layout: &DatasetLayout, s: &Settings) -> CliResult {
    let mut cfg = SynthConfig {
        grid: s.grid,
        num_classes: s.num_classes,
        seed: s.seed,
        label_noise: s.label_noise,
        dropout: s.dropout,
        ..SynthConfig::default()
    };
    cfg.scene.frames = s.frames;
    cfg.lidar.noise_sigma = s.noise_sigma;
    if let Some(b) = s.beams {
        cfg.lidar.beams = b;
    }
    if let Some(r) = s.rings {
        cfg.lidar.rings = r;
    }
    let ds = generate_dataset(&cfg)?;
    layout.create_dirs()?;
    for (i, f) in ds.frames.iter().enumerate() {
        io::write_pointcloud(&layout.lidar_path(i), &f.cloud)?;
        io::write_semf(&layout.semf_path(i), &f.image)?;
        io::write_grid(&layout.label_path(i), &io::labels_to_grid(ds.grid, &f.truth)?)?;
    }
    io::write_poses(&layout.poses_path(), ds.poses())?;
    io::write_calib(&layout.calib_path(), &ds.camera)?;
    io::write_atomic(&layout.config_path(), s.to_text().as_bytes())?;
    info!("wrote {} frames to {}", ds.frames.len(), layout.root.display());
    Ok(())
}

/// Every usable frame of a dataset, in frame order.
struct Dataset {
    frames: Vec<usize>,
    clouds: Vec<PointCloud>,
    images: Vec<SemanticImage>,
    cams: Vec<CameraModel>,
    poses: Vec<RigidTransform>,
}

impl Dataset {
    fn load(layout: &DatasetLayout, s: &Settings) -> CliResult<Dataset> {
        let index = layout.scan()?;
        if index.frames.is_empty() {
            return Err(terrabev::Error::EmptyDataset.into());
        }
        let all_poses = io::read_poses(&layout.poses_path())?;
        if all_poses.len() < index.frame_count {
            return Err(terrabev::Error::Format {
                path: layout.poses_path(),
                message: format!("{} poses for {} frames", all_poses.len(), index.frame_count),
            }
            .into());
        }
        let cam = io::read_calib(&layout.calib_path())?;
        let mut ds = Dataset {
            frames: index.frames.clone(),
            clouds: Vec::new(),
            images: Vec::new(),
            cams: Vec::new(),
            poses: Vec::new(),
        };
        for &f in &index.frames {
            ds.clouds.push(io::read_pointcloud(&layout.lidar_path(f))?.0);
            let path = layout.image_path(f).expect("scan only keeps frames with images");
            let img = io::read_semantic_image(&path, Some(s.num_classes))?;
            if img.num_classes() != s.num_classes {
                warn!("{}: {} classes, config says {}", path.display(), img.num_classes(), s.num_classes);
            }
            ds.images.push(img);
            ds.cams.push(cam.clone());
            ds.poses.push(all_poses[f].clone());
        }
        Ok(ds)
    }

    fn position(&self, frame: usize) -> CliResult<usize> {
        self.frames.binary_search(&frame).map_err(|_| {
            terrabev::Error::InvalidParameter(format!("frame {frame:06} is missing or has no image")).into()
        })
    }

    fn features(&self, pos: usize, s: &Settings, levels: &[usize]) -> CliResult<FeatureGrid> {
        Ok(frame_features(&self.clouds[pos], &self.cams[pos], &self.images[pos], &s.grid, levels)?)
    }
}

fn train(layout: &DatasetLayout, s: &Settings, source: LabelSource, out: &Path) -> CliResult {
    let ds = Dataset::load(layout, s)?;
    let frames = match &s.train_frames {
        Some(f) => f.clone(),
        None => ds.frames.clone(),
    };
    let mut batches = Vec::with_capacity(frames.len());
    for &frame in &frames {
        let pos = ds.position(frame)?;
        let features = ds.features(pos, s, &s.levels)?;
        let batch = match source {
            LabelSource::Pseudo => {
                let pseudo = generate(&ds.clouds, &ds.images, &ds.cams, &ds.poses, pos, &s.grid, &s.pseudo)?;
                pseudo_batch(&features, &features, &pseudo)?
            }
            LabelSource::Truth => {
                let path = layout.label_path(frame);
                let stored = io::read_grid(&path)?;
                same_spec(&path, stored.grid.spec(), &s.grid)?;
                let labels = io::stored_labels(&stored)?;
                let ones: Vec<f64> = labels.iter().map(|&l| if l == VOID { 0.0 } else { 1.0 }).collect();
                TrainBatch::from_grid(&features, &labels, &masked(&ones, &coverage(&features)), s.num_classes)?
            }
        };
        batches.push(batch);
    }
    let batch = TrainBatch::concat(&batches)?;
    let outcome = fit(&batch, s.num_classes, &s.hyper)?;
    if let Some(last) = outcome.loss_trace.last() {
        info!("trained on {} cells from {} frames, final loss {last:.4}", batch.len(), frames.len());
    }
    io::write_checkpoint(out, &outcome.params, &s.levels)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn predict(layout: &DatasetLayout, s: &Settings, frame: usize, model: &Path, out: &Path, render: Option<&Path>) -> CliResult {
    let (params, levels) = io::read_checkpoint(model)?;
    let ds = Dataset::load(layout, s)?;
    let pos = ds.position(frame)?;
    let features = ds.features(pos, s, &levels)?;
    if features.channels() != params.dim {
        return Err(terrabev::Error::Format {
            path: model.to_path_buf(),
            message: format!("model expects {} features, frame {frame:06} has {}", params.dim, features.channels()),
        }
        .into());
    }
    let pred = predict_grid(&params, &features)?;
    io::write_grid(out, &io::prediction_to_grid(&pred))?;
    info!("wrote {}", out.display());
    if let Some(ppm) = render {
        io::write_ppm(ppm, &io::encode_labels_ppm(&s.grid, &pred.labels, &Palette::default())?)?;
        info!("wrote {}", ppm.display());
    }
    Ok(())
}

fn same_spec(path: &Path, found: &terrabev::bev_grid::GridSpec, expected: &terrabev::bev_grid::GridSpec) -> CliResult {
    if found == expected {
        return Ok(());
    }
    Err(terrabev::Error::Format {
        path: path.to_path_buf(),
        message: format!("grid {found:?} does not match {expected:?}"),
    }
    .into())
}

fn evaluate(pred_path: &Path, truth_path: &Path, report: &Path) -> CliResult {
    let pred = io::read_grid(pred_path)?;
    let truth = io::read_grid(truth_path)?;
    same_spec(truth_path, truth.grid.spec(), pred.grid.spec())?;
    let p = io::stored_labels(&pred)?;
    let t = io::stored_labels(&truth)?;
    let k = pred
        .num_classes()
        .or(truth.num_classes())
        .unwrap_or_else(|| p.iter().chain(&t).filter(|l| **l != VOID).map(|l| *l as usize + 1).max().unwrap_or(1));
    let cm = confusion(&p, &t, k, VOID)?;
    let calibration = match pred.kind {
        GridKind::Prediction => {
            let conf = pred.grid.plane(1);
            let (mut c, mut ok) = (Vec::new(), Vec::new());
            for i in (0..t.len()).filter(|&i| t[i] != VOID) {
                c.push(conf[i]);
                ok.push(p[i] == t[i]);
            }
            Some(ece(&c, &ok, DEFAULT_ECE_BINS)?)
        }
        _ => None,
    };
    let r = EvalReport {
        metrics: metrics(&cm),
        confusion: cm,
        ece: calibration,
    };
    io::write_atomic(report, r.to_key_value().as_bytes())?;
    match &r.metrics {
        Some(m) => info!("mIoU {:.4}, accuracy {:.4} over {} cells", m.miou, m.accuracy, r.confusion.total()),
        None => warn!("no labeled truth cells to evaluate"),
    }
    Ok(())
}

fn render(path: &Path, out: &Path, channel: Channel) -> CliResult {
    let stored = io::read_grid(path)?;
    let spec = *stored.grid.spec();
    let bytes = match channel {
        Channel::Label => io::encode_labels_ppm(&spec, &io::stored_labels(&stored)?, &Palette::default())?,
        Channel::Uncertainty | Channel::Confidence => {
            let values = scalar_channel(&stored, channel).ok_or_else(|| {
                terrabev::Error::Format {
                    path: path.to_path_buf(),
                    message: format!("{:?} grid has no {channel:?} channel", stored.kind),
                }
            })?;
            io::encode_scalar_ppm(&spec, &values)?
        }
    };
    io::write_ppm(out, &bytes)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn scalar_channel(stored: &StoredGrid, channel: Channel) -> Option<Vec<f64>> {
    let g = &stored.grid;
    match (stored.kind, channel) {
        (GridKind::Prediction, Channel::Confidence) => Some(g.plane(1).to_vec()),
        (GridKind::Prediction, Channel::Uncertainty) => Some(g.plane(2).to_vec()),
        (GridKind::PseudoLabel, Channel::Uncertainty) => Some(g.plane(2 * stored.num_classes()? + 1).to_vec()),
        (GridKind::PseudoLabel, Channel::Confidence) => io::grid_to_pseudo(stored).ok().map(|p| p.confidence()),
        _ => None,
    }
}
