//! Command-line front end: build an instance bank, generate contexts, train
//! the builtin scorer, augment a dataset, preview placements and run the
//! synthetic benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ctxpaste::augment::{augment_dataset, select_placements, AugmentMode, AugmentationConfig, Resources};
use ctxpaste::bank::InstanceBank;
use ctxpaste::blend::BlendMethod;
use ctxpaste::bridge::{RemoteScorer, DEFAULT_TIMEOUT};
use ctxpaste::context::{dataset_histogram, write_context_dataset, ContextDatasetDir, ContextGenParams};
use ctxpaste::dataset_io::VocDataset;
use ctxpaste::geometry::{BoundingBox, ShapeHistogram};
use ctxpaste::scorer::{train_builtin, BuiltinScorer, ContextScorer, TrainParams};
use ctxpaste::synth::{run_benchmark, BenchConfig, SynthSpec};
use ctxpaste::{par, seeding, Error, Result};
use image::{Rgb, RgbImage};

#[derive(Parser)]
#[command(name = "ctxpaste", version, about = "Context-driven copy-paste augmentation")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract masked instances into a bank directory.
    BuildBank {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write masked context images, labels and the shape histogram.
    GenContexts {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of the resampled contexts.
        #[arg(long, default_value_t = 300)]
        size: u32,
    },
    /// Train the builtin linear scorer on a context directory.
    TrainScorer {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Augment a dataset and write it in VOC layout with provenance.
    Augment {
        #[command(flatten)]
        opts: AugmentOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the placements chosen for one image.
    Preview {
        #[command(flatten)]
        opts: AugmentOpts,
        /// Image id inside the dataset.
        #[arg(long)]
        image: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic placement-rule benchmark and write its report.
    EvalSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file overriding the default synthetic spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AugmentOpts {
    #[arg(long)]
    dataset: PathBuf,
    /// Bank directory; built in memory from the dataset when absent.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Context directory whose histogram drives candidate shapes.
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// Builtin scorer file.
    #[arg(long, conflicts_with = "scorer_cmd")]
    scorer: Option<PathBuf>,
    /// External scorer command line, spoken to over JSON lines.
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// Context side for an external scorer.
    #[arg(long, default_value_t = 300)]
    context_size: u32,
    #[arg(long, default_value = "context")]
    mode: AugmentMode,
    #[arg(long)]
    category: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    paste_prob: Option<f64>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// none, linear[:w], gaussian[:sigma], motion[:len[:angle]], poisson[:tol[:iters]] or random.
    #[arg(long)]
    blend: Option<String>,
    #[arg(long)]
    scorer_timeout_secs: Option<u64>,
}

enum LoadedScorer {
    Builtin(BuiltinScorer),
    Remote(RemoteScorer),
}

impl LoadedScorer {
    fn as_dyn(&self) -> &dyn ContextScorer {
        match self {
            LoadedScorer::Builtin(s) => s,
            LoadedScorer::Remote(s) => s,
        }
    }
}

struct Setup {
    dataset: VocDataset,
    bank: InstanceBank,
    histogram: Option<ShapeHistogram>,
    scorer: Option<LoadedScorer>,
    cfg: AugmentationConfig,
}

impl Setup {
    fn resources(&self) -> Resources<'_> {
        Resources {
            bank: &self.bank,
            scorer: self.scorer.as_ref().map(LoadedScorer::as_dyn),
            histogram: self.histogram.as_ref(),
        }
    }
}

fn setup(o: &AugmentOpts) -> Result<Setup> {
    let dataset = VocDataset::open(&o.dataset)?;
    let mut cfg = AugmentationConfig {
        seed: o.seed,
        target_category: o.category.clone(),
        ..Default::default()
    };
    if let Some(p) = o.paste_prob {
        cfg.paste_probability = p;
    }
    if let Some(n) = o.max_instances {
        cfg.max_instances = n;
    }
    if let Some(n) = o.candidates {
        cfg.candidates_per_image = n;
    }
    if let Some(t) = o.threshold {
        cfg.score_threshold = t;
    }
    if let Some(b) = &o.blend {
        cfg.blend = BlendMethod::parse(b)?;
    }
    let bank = match &o.bank {
        Some(dir) => InstanceBank::load(dir)?,
        None if o.mode == AugmentMode::Enlarge => InstanceBank::default(),
        None => InstanceBank::build(&dataset.load_all()?)?,
    };
    let mut histogram = None;
    let mut scorer = None;
    if o.mode == AugmentMode::Context {
        histogram = Some(match &o.contexts {
            Some(dir) => match ContextDatasetDir::open(dir)?.histogram()? {
                Some(h) => h,
                None => dataset_histogram(&dataset.annotations)?,
            },
            None => dataset_histogram(&dataset.annotations)?,
        });
        let timeout = o.scorer_timeout_secs.map_or(DEFAULT_TIMEOUT, Duration::from_secs);
        scorer = Some(match (&o.scorer, &o.scorer_cmd) {
            (Some(path), _) => {
                let s = BuiltinScorer::load(path)?;
                cfg.context.out_size = s.input_size;
                LoadedScorer::Builtin(s)
            }
            (None, Some(cmd)) => {
                let mut words = cmd.split_whitespace();
                let program = words
                    .next()
                    .ok_or_else(|| Error::validation("--scorer-cmd is empty"))?;
                let args: Vec<&str> = words.collect();
                cfg.context.out_size = o.context_size;
                LoadedScorer::Remote(RemoteScorer::spawn(Path::new(program), &args, timeout)?)
            }
            (None, None) => return Err(Error::validation("context mode needs --scorer or --scorer-cmd")),
        });
    }
    cfg.validate()?;
    Ok(Setup {
        dataset,
        bank,
        histogram,
        scorer,
        cfg,
    })
}

fn draw_rect(img: &mut RgbImage, b: &BoundingBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let (x0, y0, x1, y1) = b.pixel_span(w, h);
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    for x in x0..x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1 - 1, color);
    }
    for y in y0..y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1 - 1, y, color);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildBank { dataset, out } => {
            let ds = VocDataset::open(&dataset)?;
            let bank = InstanceBank::build(&ds.load_all()?)?;
            bank.save(&out)?;
            log::info!("{} instances written to {}", bank.len(), out.display());
        }
        Command::GenContexts { dataset, out, seed, size } => {
            let ds = VocDataset::open(&dataset)?;
            let hist = dataset_histogram(&ds.annotations)?;
            let params = ContextGenParams {
                out_size: size,
                ..Default::default()
            };
            let n = write_context_dataset(&|i| ds.load(i), ds.len(), &ds.categories(), &hist, &params, seed, &out)?;
            log::info!("{n} contexts written to {}", out.display());
        }
        Command::TrainScorer {
            contexts,
            out,
            seed,
            epochs,
            lr,
        } => {
            let dir = ContextDatasetDir::open(&contexts)?;
            let samples = par::map(&dir.rows, |r| dir.load_sample(r))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut p = TrainParams {
                seed,
                ..Default::default()
            };
            if let Some(e) = epochs {
                p.max_epochs = e;
            }
            if let Some(lr) = lr {
                p.learning_rate = lr;
            }
            let outcome = train_builtin(&samples, dir.classes.clone(), &p)?;
            if let Some(last) = outcome.history.get(outcome.best_epoch.saturating_sub(1)) {
                log::info!(
                    "best epoch {}: val loss {:.4}, val accuracy {:.3}",
                    last.epoch,
                    last.val_loss,
                    last.val_accuracy
                );
            }
            outcome.scorer.save(&out)?;
        }
        Command::Augment { opts, out } => {
            let s = setup(&opts)?;
            let summary = augment_dataset(&s.dataset, &s.resources(), &s.cfg, opts.mode, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Preview { opts, image, out } => {
            let s = setup(&opts)?;
            let idx = s
                .dataset
                .annotations
                .iter()
                .position(|a| a.image_id == image)
                .ok_or_else(|| Error::validation(format!("no image `{image}` in the dataset")))?;
            let rec = s.dataset.load(idx)?;
            let (Some(scorer), Some(hist)) = (&s.scorer, &s.histogram) else {
                return Err(Error::validation("preview needs context mode with a scorer"));
            };
            let gt: Vec<BoundingBox> = rec.annotation.boxes().copied().collect();
            let mut rng = seeding::stream(s.cfg.seed, &image);
            let chosen = select_placements(&rec.image, &gt, hist, scorer.as_dyn(), &s.cfg, &mut rng)?;
            let mut canvas = rec.image.clone();
            for g in &gt {
                draw_rect(&mut canvas, g, Rgb([0, 255, 0]));
            }
            for p in &chosen {
                draw_rect(&mut canvas, &p.bbox, Rgb([255, 0, 0]));
                println!("{} {:.4} {:?}", p.category, p.score, p.bbox.to_array());
            }
            canvas.save(&out)?;
        }
        Command::EvalSynth { seed, spec, out } => {
            let mut s: SynthSpec = match spec {
                Some(path) => {
                    let text = std::fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
                    serde_json::from_slice(&text)?
                }
                None => SynthSpec::default(),
            };
            s.seed = seed;
            let report = run_benchmark(&s, &BenchConfig::default())?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, json).map_err(|e| Error::Io { path, source: e })?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let jobs = cli.jobs;
    match par::with_threads(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
