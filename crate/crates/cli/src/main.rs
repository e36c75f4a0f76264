//! `pmsr`: train, super-resolve, evaluate, audit and probe.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numeric.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmsr_core::audit::{count_flops, count_params, flop_report, param_breakdown};
use pmsr_core::checkpoint::{load_model, save_model};
use pmsr_core::data::{load_png, save_gray_png, save_png, Dataset, ImageRgb};
use pmsr_core::model::{ModelConfig, ProbeStage, TpmSr};
use pmsr_core::probe::{frequency_probe, receptive_field};
use pmsr_core::ssm::{geometric_series_deviation, ScanInstance};
use pmsr_core::train::{evaluate, super_resolve, Trainer};
use pmsr_tensor::SplitMix64;
use thiserror::Error;

use crate::config::FileConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<pmsr_core::Error> for CliError {
    fn from(e: pmsr_core::Error) -> Self {
        use pmsr_core::Error as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

const SCAN_TOL: f64 = 1e-8;
const GEOMETRIC_TOL: f64 = 1e-10;
const FINGERPRINTS: [(usize, f64); 3] = [(2, 687e3), (3, 694e3), (4, 703e3)];
const AUDIT_EXTENT: (usize, usize) = (720, 1280);

#[derive(Parser, Debug)]
#[command(name = "pmsr", version, about = "Lightweight progressive Mamba super-resolution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// RNG seed for initialisation, sampling and probe inputs
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with optional `preset`, `[model]` and `[train]`
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// named model configuration
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a directory of HR PNGs
    Train {
        #[arg(long)]
        data: PathBuf,
        /// held-out HR images; defaults to the last training image
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        /// continue from a trainer checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one PNG
    Sr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Y-channel PSNR/SSIM against bicubic-degraded HR images
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        /// border pixels excluded; defaults to the scale
        #[arg(long)]
        shave: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate audit
    Inspect {
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Compare the fused scan with the reference recurrence
    ScanCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Centre-pixel input-gradient support
    RfProbe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// tl, wsml, gsml, group, output or all
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// directory for heatmap PNGs
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// High-frequency energy around each refinement module
    FreqProbe {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// directory for feature PNGs
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let c = &cli.common;
    let seed = c.seed.unwrap_or(0);
    match cli.cmd {
        Command::Train {
            data,
            val,
            out,
            scale,
            iters,
            resume,
        } => train(c, &file, &data, val.as_deref(), &out, scale, iters, resume.as_deref()),
        Command::Sr { ckpt, input, out } => sr(c, &file, &ckpt, &input, &out),
        Command::Eval {
            ckpt,
            hr_dir,
            scale,
            shave,
            csv,
        } => eval(c, &file, &ckpt, &hr_dir, scale, shave, csv.as_deref()),
        Command::Inspect { scale } => inspect(&file.model(c.preset.as_deref(), "default", scale)?),
        Command::ScanCheck { trials } => scan_check(trials, seed),
        Command::RfProbe { ckpt, stage, size, out } => {
            let model = model_for_probe(c, &file, ckpt.as_deref())?;
            rf_probe(&model, &stage, size, out.as_deref(), seed)
        }
        Command::FreqProbe { ckpt, input, out } => {
            let model = model_for_probe(c, &file, ckpt.as_deref())?;
            freq_probe(&model, &input, out.as_deref())
        }
    }
}

fn load_checked(c: &Common, file: &FileConfig, ckpt: &Path) -> CliResult<TpmSr> {
    let expected = file.explicit_model(c.preset.as_deref())?;
    Ok(load_model(ckpt, expected.as_ref())?)
}

fn model_for_probe(c: &Common, file: &FileConfig, ckpt: Option<&Path>) -> CliResult<TpmSr> {
    match ckpt {
        Some(p) => load_checked(c, file, p),
        None => Ok(TpmSr::new(&file.model(c.preset.as_deref(), "toy", None)?, c.seed.unwrap_or(0))?),
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    c: &Common,
    file: &FileConfig,
    data: &Path,
    val: Option<&Path>,
    out: &Path,
    scale: Option<usize>,
    iters: Option<usize>,
    resume: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = file.train(c.seed)?;
    let init_seed = cfg.seed;
    if let Some(n) = iters {
        cfg.total_iters = n;
    }
    let mut images = Dataset::load_dir(data)?.images;
    let val_images = match val {
        Some(dir) => Dataset::load_dir(dir)?.images,
        None if images.len() > 1 => vec![images.pop().expect("non-empty")],
        None => images.clone(),
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = pmsr_core::checkpoint::Checkpoint::load(p)?;
            Trainer::from_checkpoint(&ck, cfg)?
        }
        None => {
            let model_cfg = file.model(c.preset.as_deref(), "desk", scale)?;
            Trainer::new(TpmSr::new(&model_cfg, init_seed)?, cfg)?
        }
    };
    let r = trainer.model().config().scale;
    for (name, img) in images.iter().chain(&val_images) {
        if img.width < r || img.height < r {
            return Err(CliError::Data(format!("{name}: {}x{} is smaller than the scale", img.width, img.height)));
        }
    }
    eprintln!(
        "training {} params, x{r}, {} images, {} iterations",
        trainer.model().params().total(),
        images.len(),
        trainer.config().total_iters
    );
    let rows = trainer.run(&images, &val_images, Some(out))?;
    if let Some(row) = rows.last() {
        if row.loss.is_some_and(|l| !l.is_finite()) {
            return Err(CliError::Numeric(format!("loss diverged at iteration {}", row.iter)));
        }
    }
    save_model(trainer.model(), &out.join("model.tpmb"))?;
    let report = evaluate(trainer.model(), &val_images, r)?;
    print!("{}", report.to_table());
    Ok(())
}

fn sr(c: &Common, file: &FileConfig, ckpt: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let model = load_checked(c, file, ckpt)?;
    let lr = load_png(input)?;
    let sr = super_resolve(&model, &lr)?.clamped();
    save_png(&sr, out)?;
    println!("{}x{} -> {}x{}", lr.width, lr.height, sr.width, sr.height);
    Ok(())
}

fn eval(
    c: &Common,
    file: &FileConfig,
    ckpt: &Path,
    hr_dir: &Path,
    scale: Option<usize>,
    shave: Option<usize>,
    csv: Option<&Path>,
) -> CliResult<()> {
    let model = load_checked(c, file, ckpt)?;
    let r = model.config().scale;
    if let Some(s) = scale {
        if s != r {
            return Err(CliError::Data(format!("checkpoint is x{r}, --scale asks for x{s}")));
        }
    }
    let images = Dataset::load_dir(hr_dir)?.images;
    let report = evaluate(&model, &images, shave.unwrap_or(r))?;
    print!("{}", report.to_table());
    if let Some(p) = csv {
        let f = std::fs::File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        report.write_csv(f)?;
    }
    Ok(())
}

fn inspect(cfg: &ModelConfig) -> CliResult<()> {
    println!("{:<24} {:>10}", "module", "params");
    for (name, n) in param_breakdown(cfg)? {
        println!("{name:<24} {n:>10}");
    }
    let total = count_params(cfg)?;
    println!("{:<24} {:>10}", "total", total);
    println!();
    println!("{:<6} {:>10} {:>10} {:>8}", "scale", "params", "reference", "dev%");
    for (r, reference) in FINGERPRINTS {
        let n = count_params(&ModelConfig { scale: r, ..cfg.clone() })?;
        println!("x{r:<5} {n:>10} {reference:>10.0} {:>+8.2}", 100.0 * (n as f64 - reference) / reference);
    }
    let (h, w) = AUDIT_EXTENT;
    let rep = flop_report(cfg, h, w);
    println!();
    println!(
        "MACs at {w}x{h} output (x{}, LR {}x{}, body padded to {}x{}): {:.3}G",
        cfg.scale,
        rep.lr.1,
        rep.lr.0,
        rep.padded.1,
        rep.padded.0,
        count_flops(cfg, h, w) as f64 / 1e9
    );
    println!("  shallow {}  groups {}  hfca {}  head {}", rep.shallow, rep.groups, rep.hfca, rep.head);
    Ok(())
}

fn scan_check(trials: usize, seed: u64) -> CliResult<()> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for _ in 0..trials {
        let dev = ScanInstance::random(&mut rng).deviation()?;
        worst = worst.max(dev);
        if dev <= SCAN_TOL {
            ok += 1;
        }
    }
    let geo = geometric_series_deviation(-0.7, 0.3, 64)?;
    println!("{ok}/{trials} within tolerance (max deviation {worst:.3e})");
    println!("geometric series deviation {geo:.3e}");
    if ok < trials || geo > GEOMETRIC_TOL || geo.is_nan() {
        return Err(CliError::Numeric(format!("scan oracle mismatch: worst {worst:.3e}, geometric {geo:.3e}")));
    }
    Ok(())
}

fn rf_probe(model: &TpmSr, stage: &str, size: usize, out: Option<&Path>, seed: u64) -> CliResult<()> {
    let stages = if stage == "all" {
        vec![ProbeStage::Tl, ProbeStage::Wsml, ProbeStage::Gsml, ProbeStage::Group]
    } else {
        vec![stage.parse()?]
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    println!("{:<8} {:>9} bbox", "stage", "coverage");
    for st in stages {
        let rep = receptive_field(model, st, size, size, seed)?;
        let name = format!("{st:?}").to_lowercase();
        let bbox = rep.bbox.map_or("-".into(), |(t, l, b, r)| format!("rows {t}..={b} cols {l}..={r}"));
        println!("{name:<8} {:>8.2}% {bbox}", 100.0 * rep.coverage);
        if let Some(dir) = out {
            let hm = rep.heatmap();
            save_gray_png(&hm.data, hm.width, hm.height, &dir.join(format!("rf_{name}.png")))?;
        }
    }
    Ok(())
}

fn freq_probe(model: &TpmSr, input: &Path, out: Option<&Path>) -> CliResult<()> {
    let img: ImageRgb = load_png(input)?;
    let rep = frequency_probe(model, &img.to_tensor())?;
    print!("{}", rep.to_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for (g, (before, after)) in rep.maps.iter().enumerate() {
            // both maps share the scale of the larger one
            let max = before.data.iter().chain(&after.data).cloned().fold(0.0, f64::max);
            let k = if max > 0.0 { 1.0 / max } else { 0.0 };
            for (tag, m) in [("before", before), ("after", after)] {
                let data: Vec<f64> = m.data.iter().map(|v| v * k).collect();
                save_gray_png(&data, m.width, m.height, &dir.join(format!("group{g}_{tag}.png")))?;
            }
        }
    }
    Ok(())
}
