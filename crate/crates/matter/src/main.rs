use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use matter::accept;
use matter::checkpoint::{check_config, describe, load_checkpoint, save_checkpoint};
use matter::config::RunConfig;
use matter::data::{read_manifest, read_msr1, write_msr1, LoadedCatalog, MultiSpectralImage};
use matter::data::synth::{synth_generate, ChangePair};
use matter::export::{write_mask_png, write_score_png, write_word_png};
use matter::model::Model;
use matter::tasks::{detect_change, prf1, rf_sweep, word_map};
use matter::train::{loss_curve_text, pretrain, TrainState};
use matter::{Error, Result};

#[derive(Parser)]
#[command(
    name = "matter",
    version,
    about = "Self-supervised material and texture descriptors for aligned image stacks"
)]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker thread count (falls back to MATTER_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-temporal corpus with change ground truth
    Synth {
        /// Directory for the corpus (default: the config's output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Pre-train on a catalog, writing checkpoints and a loss curve
    Pretrain {
        /// Catalog manifest (default: the config's catalog path)
        #[arg(long, value_name = "FILE")]
        catalog: Option<PathBuf>,
        /// Directory for model.mtck and loss_curve.tsv (default: output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Resume from this checkpoint (default: the config's checkpoint path)
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Resume even when the checkpoint was trained under other settings
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Score and threshold change between two aligned captures
    Change {
        before: PathBuf,
        after: PathBuf,
        /// Trained checkpoint (default: the config's checkpoint path)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Ground-truth raster; nonzero first band means changed
        #[arg(long, value_name = "FILE")]
        gt: Option<PathBuf>,
        /// Directory for score/mask rasters and PNGs (default: output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Map every pixel of a capture to its visual word
    Wordmap {
        image: PathBuf,
        /// Trained checkpoint (default: the config's checkpoint path)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Directory for the word raster and PNG (default: output_dir)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite and print one line per criterion
    Eval,
    /// Train across patch sizes and score each on held-out change pairs
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "7,17")]
        train_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "9")]
        infer_sizes: Vec<usize>,
        /// Directory for grid.tsv (default: output_dir; omit both to skip)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint's header and tensors
    Inspect { checkpoint: PathBuf },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    // The file was validated on parse, so any failure here belongs to the
    // command line.
    for assignment in &cli.set {
        cfg.apply_override(assignment)
            .map_err(|e| Error::usage(format!("--set {assignment}: {e}")))?;
    }
    cfg.validate().map_err(|e| Error::usage(e.to_string()))?;

    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Pretrain { catalog, out, resume, allow_config_mismatch } => {
            cmd_pretrain(&cfg, catalog, out, resume, allow_config_mismatch)
        }
        Command::Change { before, after, checkpoint, gt, out } => {
            cmd_change(&cfg, &before, &after, checkpoint, gt, out)
        }
        Command::Wordmap { image, checkpoint, out } => cmd_wordmap(&cfg, &image, checkpoint, out),
        Command::Eval => cmd_eval(),
        Command::Sweep { train_sizes, infer_sizes, out } => {
            cmd_sweep(&cfg, &train_sizes, &infer_sizes, out)
        }
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MATTER_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                Error::usage(format!("MATTER_THREADS must be a thread count, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn require(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::usage(format!("no {what}; pass --{what} or set it in the config")))
}

fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = require(out, &cfg.output_dir, "out")?;
    std::fs::create_dir_all(&dir)?;
    let output = synth_generate(&cfg.synth, cfg.train.seed, &dir)?;
    println!(
        "wrote {} captures across {} regions, {} label maps, {} change pairs",
        output.entries.len(),
        cfg.synth.regions,
        output.label_maps.len(),
        output.pairs.len()
    );
    println!("manifest: {}", output.manifest.display());
    Ok(())
}

fn cmd_pretrain(
    cfg: &RunConfig,
    catalog: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    allow_config_mismatch: bool,
) -> Result<()> {
    let manifest = require(catalog, &cfg.catalog, "catalog")?;
    let dir = require(out, &cfg.output_dir, "out")?;
    std::fs::create_dir_all(&dir)?;
    let entries = read_manifest(&manifest)?;
    let loaded = LoadedCatalog::load(entries)?;

    let mut state = match resume.or_else(|| cfg.checkpoint.clone()) {
        Some(path) => {
            let data = load_checkpoint(&path)?;
            check_config(&data, cfg, allow_config_mismatch)?;
            println!("resuming {} from iteration {}", path.display(), data.state.iteration);
            data.state
        }
        None => TrainState::new(Model::init(cfg.model.clone(), cfg.train.seed)?, &cfg.train)?,
    };

    let model_path = dir.join("model.mtck");
    let curve_path = dir.join("loss_curve.tsv");
    if state.iteration == 0 && curve_path.exists() {
        std::fs::remove_file(&curve_path)?;
    }
    let mut written = 0usize;
    pretrain(&loaded, &mut state, &cfg.train, |s| {
        save_checkpoint(s, cfg, &model_path)?;
        let mut curve = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&curve_path)?;
        curve.write_all(loss_curve_text(&s.loss_history[written..]).as_bytes())?;
        written = s.loss_history.len();
        Ok(())
    })?;

    let last_loss = state.loss_history.last().map(|&(_, l)| l);
    match last_loss {
        Some(loss) => println!("trained to iteration {} (last loss {loss:.6})", state.iteration),
        None => println!("nothing to train; checkpoint already at iteration {}", state.iteration),
    }
    println!("checkpoint: {}", model_path.display());
    println!("loss curve: {}", curve_path.display());
    Ok(())
}

fn load_model(checkpoint: Option<PathBuf>, cfg: &RunConfig) -> Result<Model> {
    let path = require(checkpoint, &cfg.checkpoint, "checkpoint")?;
    Ok(load_checkpoint(&path)?.state.model)
}

fn read_truth_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>> {
    let img = read_msr1(path)?;
    if img.height() != height || img.width() != width {
        return Err(Error::data(format!(
            "ground truth is {}x{} but the captures are {height}x{width}",
            img.height(),
            img.width()
        )));
    }
    Ok(img.band(0).iter().map(|&v| v > 0.5).collect())
}

fn cmd_change(
    cfg: &RunConfig,
    before: &Path,
    after: &Path,
    checkpoint: Option<PathBuf>,
    gt: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = require(out, &cfg.output_dir, "out")?;
    std::fs::create_dir_all(&dir)?;
    let model = load_model(checkpoint, cfg)?;
    let img_a = read_msr1(before)?;
    let img_b = read_msr1(after)?;
    let map = detect_change(&img_a, &img_b, &model, cfg.infer_window)?;

    write_msr1(&dir.join("score.msr1"), &map.score_image()?)?;
    write_msr1(&dir.join("mask.msr1"), &map.mask_image()?)?;
    write_score_png(&map.score, &dir.join("score.png"))?;
    write_mask_png(&map.mask, img_a.height(), img_a.width(), &dir.join("mask.png"))?;

    let changed = map.mask.iter().filter(|&&m| m).count();
    if map.degenerate {
        println!("no score spread; everything marked unchanged");
    }
    println!(
        "{} of {} pixels changed at threshold {:.6}",
        changed,
        map.mask.len(),
        map.threshold
    );
    println!("outputs: {}", dir.display());

    if let Some(gt_path) = gt {
        let truth = read_truth_mask(&gt_path, img_a.height(), img_a.width())?;
        let report = prf1(&map.mask, &truth)?;
        print!("{}", report.text());
        std::fs::write(dir.join("report.txt"), report.text())?;
    }
    Ok(())
}

fn cmd_wordmap(
    cfg: &RunConfig,
    image: &Path,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = require(out, &cfg.output_dir, "out")?;
    std::fs::create_dir_all(&dir)?;
    let model = load_model(checkpoint, cfg)?;
    let img = read_msr1(image)?;
    let map = word_map(&img, &model, cfg.infer_window)?;

    let words: Vec<f32> = map.words.iter().map(|&w| w as f32).collect();
    write_msr1(
        &dir.join("words.msr1"),
        &MultiSpectralImage::new(1, map.height, map.width, words)?,
    )?;
    write_word_png(&map, cfg.train.seed, &dir.join("words.png"))?;

    let mut used = vec![false; map.clusters];
    for &w in &map.words {
        used[w] = true;
    }
    println!(
        "{} of {} words used over {}x{} pixels",
        used.iter().filter(|&&u| u).count(),
        map.clusters,
        map.height,
        map.width
    );
    println!("outputs: {}", dir.display());
    Ok(())
}

fn cmd_eval() -> Result<()> {
    let results = accept::run_all();
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Error::data(format!("{failed} of {} criteria failed", results.len())));
    }
    println!("all {} criteria passed", results.len());
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    train_sizes: &[usize],
    infer_sizes: &[usize],
    out: Option<PathBuf>,
) -> Result<()> {
    let dir = std::env::temp_dir().join(format!("matter-sweep-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let output = synth_generate(&cfg.synth, cfg.train.seed, &dir)?;
    let catalog = LoadedCatalog::load(output.entries)?;
    let mut pairs = Vec::new();
    for pair in &output.pairs {
        let before = read_msr1(&pair.before)?;
        let after = read_msr1(&pair.after)?;
        let truth = read_msr1(&pair.ground_truth)?;
        let ground_truth = truth.band(0).iter().map(|&v| v > 0.5).collect();
        pairs.push(ChangePair { before, after, ground_truth });
    }
    let _ = std::fs::remove_dir_all(&dir);

    let grid = rf_sweep(&catalog, &pairs, train_sizes, infer_sizes, &cfg.model, &cfg.train)?;
    print!("{}", grid.text());
    if let Some(grid_dir) = out.or_else(|| cfg.output_dir.clone()) {
        std::fs::create_dir_all(&grid_dir)?;
        let path = grid_dir.join("grid.tsv");
        std::fs::write(&path, grid.text())?;
        println!("grid: {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let data = load_checkpoint(checkpoint)?;
    print!("{}", describe(&data));
    Ok(())
}
