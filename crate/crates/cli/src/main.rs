use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nucseg::grouping::{bench_mean_shift, blob_scene, MeanShiftParams};
use nucseg::par::Execution;
use nucseg::pipeline::{self, SemanticLabels};
use nucseg::synth::{generate_corpus, write_corpus, SceneSpec};
use nucseg::{io, metrics, Error, InstanceLabelMap, PipelineConfig, RasterImage};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

/// Point-supervised nuclei instance segmentation.
#[derive(Parser)]
#[command(name = "nucseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write cluster and Voronoi labels for every image.
    GenLabels {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the semantic model on cluster and Voronoi labels.
    TrainSpn {
        /// Corpus directory with images/ and points/ (labels/ optional).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the embedding model on instance pseudo-labels.
    TrainIen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained semantic model used to build the pseudo-labels.
        #[arg(long, required_unless_present = "prob", conflicts_with = "prob")]
        spn: Option<PathBuf>,
        /// Directory of precomputed probability maps (<stem>.nws).
        #[arg(long)]
        prob: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Segment images into instance label maps.
    Infer {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        spn: PathBuf,
        #[arg(long)]
        ien: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predicted instance maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus (images/, gt/, points/).
    Synth {
        /// JSON scene description; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Overlay instances on an image, one color per instance.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time reference against accelerated mean-shift on blob data.
    BenchMeanshift {
        #[arg(long, default_value_t = 50_000)]
        points: usize,
        #[arg(long, default_value_t = 30)]
        blobs: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1.5)]
        bandwidth: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set t_0=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(
                    Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")).into(),
                );
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sorted file stems with the given extension.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!(Error::EmptyInput("no input files found"));
    }
    Ok(out)
}

struct Corpus {
    names: Vec<String>,
    images: Vec<RasterImage>,
    points: Vec<nucseg::PointSet>,
}

fn load_corpus(images: &Path, points: &Path) -> Result<Corpus> {
    let names = stems(images, "png")?;
    let mut imgs = Vec::new();
    let mut pts = Vec::new();
    for name in &names {
        let image = io::load_image(&images.join(format!("{name}.png")))?;
        let p = io::load_points(&points.join(format!("{name}.csv")))?;
        p.check_bounds(image.height(), image.width())?;
        imgs.push(image);
        pts.push(p);
    }
    Ok(Corpus {
        names,
        images: imgs,
        points: pts,
    })
}

fn report_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn semantic_for(corpus: &Corpus, data: &Path, cfg: &PipelineConfig) -> Result<Vec<SemanticLabels>> {
    let cluster_dir = data.join("labels").join("cluster");
    let voronoi_dir = data.join("labels").join("voronoi");
    corpus
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let c = cluster_dir.join(format!("{name}.png"));
            let v = voronoi_dir.join(format!("{name}.png"));
            if c.exists() && v.exists() {
                Ok(SemanticLabels {
                    cluster: io::load_semantic(&c)?,
                    voronoi: io::load_semantic(&v)?,
                })
            } else {
                Ok(pipeline::semantic_labels(
                    &corpus.images[i],
                    &corpus.points[i],
                    cfg,
                )?)
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenLabels {
            images,
            points,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&images, &points)?;
            for (i, name) in corpus.names.iter().enumerate() {
                let labels = pipeline::semantic_labels(&corpus.images[i], &corpus.points[i], &cfg)?;
                io::save_semantic(
                    &out.join("cluster").join(format!("{name}.png")),
                    &labels.cluster,
                )?;
                io::save_semantic(
                    &out.join("voronoi").join(format!("{name}.png")),
                    &labels.voronoi,
                )?;
            }
        }
        Command::TrainSpn { data, out, config } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&data.join("images"), &data.join("points"))?;
            let labels = semantic_for(&corpus, &data, &cfg)?;
            let images: Vec<&RasterImage> = corpus.images.iter().collect();
            let (model, report) = pipeline::fit_spn(&images, &labels, &cfg)?;
            model.save(&out)?;
            write_json(&report_path(&out), &report)?;
        }
        Command::TrainIen {
            data,
            out,
            spn,
            prob,
            config,
        } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&data.join("images"), &data.join("points"))?;
            let spn = spn
                .map(|p| nucseg::embednet::MlpModel::load(&p))
                .transpose()?;
            let mut pseudo = Vec::new();
            for (i, name) in corpus.names.iter().enumerate() {
                let p = match (&spn, &prob) {
                    (Some(model), _) => pipeline::probability_map(model, &corpus.images[i], &cfg)?,
                    (None, Some(dir)) => io::load_probability(&dir.join(format!("{name}.nws")))?,
                    (None, None) => unreachable!("clap requires --spn or --prob"),
                };
                pseudo.push(pipeline::instance_labels(&p, &corpus.points[i], &cfg)?);
            }
            let images: Vec<&RasterImage> = corpus.images.iter().collect();
            let (model, report) = pipeline::fit_ien(&images, &pseudo, &cfg)?;
            model.save(&out)?;
            write_json(&report_path(&out), &report)?;
        }
        Command::Infer {
            images,
            spn,
            ien,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let spn = nucseg::embednet::MlpModel::load(&spn)?;
            let ien = nucseg::embednet::MlpModel::load(&ien)?;
            for name in stems(&images, "png")? {
                let image = io::load_image(&images.join(format!("{name}.png")))?;
                let instances = pipeline::segment(&image, &spn, &ien, &cfg)?;
                io::save_instances(&out.join(format!("{name}.png")), &instances)?;
            }
        }
        Command::Eval { pred, gt, out } => {
            let mut rows = Vec::new();
            for name in stems(&gt, "png")? {
                let g = io::load_instances(&gt.join(format!("{name}.png")))?;
                let p = io::load_instances(&pred.join(format!("{name}.png")))?;
                rows.push(metrics::evaluate(&name, &p, &g)?);
            }
            let report = metrics::EvalReport::new(rows);
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string(&report.mean)?);
        }
        Command::Synth { spec, n, out, seed } => {
            let template = match spec {
                Some(path) => SceneSpec::from_json(
                    &fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => SceneSpec::default(),
            };
            let scenes = generate_corpus(&template, n, seed)?;
            write_corpus(&out, &scenes)?;
        }
        Command::Render {
            image,
            instances,
            out,
        } => {
            let image = io::load_image(&image)?;
            let instances = io::load_instances(&instances)?;
            io::save_image(&out, &render(&image, &instances)?)?;
        }
        Command::BenchMeanshift {
            points,
            blobs,
            dim,
            bandwidth,
            seed,
            out,
        } => {
            if points == 0 || dim == 0 {
                bail!(Error::InvalidConfig(
                    "--points and --dim must be positive".into()
                ));
            }
            let data = blob_scene(points, blobs, dim, seed);
            let report = bench_mean_shift(
                data.view(),
                &MeanShiftParams::new(bandwidth),
                Execution::Parallel,
            )?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
    }
    Ok(())
}

fn hue_color(k: u32) -> [u8; 3] {
    let h = (f64::from(k) * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v: f64| (v * 255.0).round() as u8)
}

/// Half-transparent fill plus opaque outline per instance.
fn render(image: &RasterImage, instances: &InstanceLabelMap) -> Result<RasterImage> {
    let (h, w) = image.shape();
    if instances.shape() != (h, w) {
        bail!(Error::DimensionMismatch {
            expected: format!("{h}x{w}"),
            actual: format!("{}x{}", instances.height(), instances.width()),
        });
    }
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let id = instances.get(r, c);
            if id == 0 {
                continue;
            }
            let color = hue_color(id);
            let edge = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .any(|&(dr, dc)| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr < 0
                        || cc < 0
                        || rr >= h as isize
                        || cc >= w as isize
                        || instances.get(rr as usize, cc as usize) != id
                });
            let px = image.pixel(r, c);
            let mixed = if edge {
                color
            } else {
                [0, 1, 2].map(|k| ((u16::from(px[k]) + u16::from(color[k])) / 2) as u8)
            };
            out.set_pixel(r, c, mixed);
        }
    }
    Ok(out)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NUCLEI_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "NUCLEI_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence(_)) => EXIT_DIVERGENCE,
        Some(Error::InvalidConfig(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
