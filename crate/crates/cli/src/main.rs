//! `daft`: train, infer, eval, grad-check and mask-demo.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use daft_core::config::{Config, MaskKind};
use daft_core::gradcheck::suites::{run_target, targets, Scope};
use daft_core::harness::eval::{evaluate, inpaint, masked_input, EvalReport};
use daft_core::harness::masks::{center_side, generate};
use daft_core::harness::run::train_to_dir;
use daft_core::harness::train::{sample_noise, Trainer};
use daft_core::io::{checkpoint, pnm, write_dataset_cache};
use daft_core::Error;

#[derive(Parser)]
#[command(name = "daft", version, about = "Text-guided image inpainting on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Irregular,
    Center,
}

impl From<Kind> for MaskKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Irregular => MaskKind::Irregular,
            Kind::Center => MaskKind::Center,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, or continue from a checkpoint.
    Train {
        /// Config file; defaults apply to absent keys.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Checkpoint to continue from; its stored config is used.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Output directory (overrides DAFT_OUT_DIR and the config value).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inpaint one image and write a corrupted | generated | original triptych.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 image with the checkpoint's size.
        #[arg(long)]
        image: PathBuf,
        /// P5 mask, 255 marking holes.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean PSNR/SSIM over held-out scenes, with the masked-input baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask family; defaults to the checkpoint's.
        #[arg(long, value_enum)]
        mask: Option<Kind>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; defaults to eval.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// tensor, encoder, decoder, adversary, magp or all.
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one mask as PGM and print its statistics.
    MaskDemo {
        #[arg(long, value_enum, default_value = "irregular")]
        kind: Kind,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hole fraction for center masks.
        #[arg(long)]
        ratio: Option<f64>,
        /// Mask settings (ratio bounds, brush) from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report min/max fraction over this many seeds.
        #[arg(long)]
        sweep: Option<u64>,
    },
}

/// Failure classes mapped onto exit codes 2 and 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn out_dir(flag: Option<PathBuf>, cfg: &Config) -> PathBuf {
    flag.or_else(|| std::env::var_os("DAFT_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn read_config(path: &Path) -> std::result::Result<Config, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(anyhow!("cannot read config {}: {e}", path.display())))?;
    Config::parse(&text).map_err(|e| Failure::Usage(anyhow!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> std::result::Result<Trainer, Failure> {
    Ok(checkpoint::load(path)?)
}

fn train(config: Option<PathBuf>, resume: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let mut trainer = match (&config, &resume) {
        (_, Some(ckpt)) => load_checkpoint(ckpt)?,
        (Some(path), None) => Trainer::new(read_config(path)?)?,
        (None, None) => unreachable!("clap requires one of --config/--resume"),
    };
    let dir = out_dir(out, &trainer.cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), trainer.cfg.to_text()).context("writing config echo")?;
    write_dataset_cache(&dir.join("scenes"), trainer.cfg.eval.scenes, trainer.cfg.model.image_size)?;
    let files = train_to_dir(&mut trainer, &dir, |line| println!("{line}"))?;
    println!("metrics: {}", files.metrics.display());
    println!("checkpoint: {}", files.last.display());
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, mask: &Path, caption: &str, seed: u64, out: &Path) -> Outcome {
    let trainer = load_checkpoint(ckpt)?;
    let model = &trainer.model;
    let size = model.cfg.image_size;
    let img = pnm::read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let m = pnm::read_pgm(mask).with_context(|| format!("reading {}", mask.display()))?;
    if img.shape() != [3, size, size] {
        return Err(Failure::Runtime(anyhow!(
            "image {} is {}x{}, checkpoint expects {size}x{size}",
            image.display(),
            img.shape()[2],
            img.shape()[1]
        )));
    }
    if (m.height(), m.width()) != (size, size) {
        return Err(Failure::Runtime(anyhow!(
            "mask {} is {}x{}, checkpoint expects {size}x{size}",
            mask.display(),
            m.width(),
            m.height()
        )));
    }
    let noise = sample_noise(&mut ChaCha8Rng::seed_from_u64(seed), model.cfg.noise_dim);
    let generated = inpaint(model, &img, &m, &noise, caption)?;
    let corrupted = masked_input(&img, &m);
    let panel = pnm::side_by_side(&[&corrupted, &generated, &img])?;
    pnm::write_ppm(out, &panel)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, mask: Option<Kind>, scenes: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Outcome {
    let trainer = load_checkpoint(ckpt)?;
    let cfg = &trainer.cfg;
    let mut spec = cfg.mask.clone();
    if let Some(k) = mask {
        spec.kind = k.into();
    }
    let scenes = scenes.unwrap_or(cfg.eval.scenes);
    if scenes == 0 {
        return Err(Failure::Usage(anyhow!("--scenes must be positive")));
    }
    let report: EvalReport = evaluate(&trainer.model, &spec, scenes, seed.unwrap_or(cfg.eval.seed))?;
    println!("{:<10} {:>8} {:>10} {:>8}", "row", "scenes", "psnr", "ssim");
    println!("{:<10} {:>8} {:>10.4} {:>8.4}", "model", scenes, report.psnr, report.ssim);
    println!(
        "{:<10} {:>8} {:>10.4} {:>8.4}",
        "baseline", scenes, report.baseline_psnr, report.baseline_ssim
    );
    let path = out.unwrap_or_else(|| out_dir(None, cfg).join("eval.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, report.csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn grad_check(scope: Scope, seeds: usize, seed: u64) -> Outcome {
    println!(
        "{:<36} {:<10} {:>6} {:>8} {:>12} {:>8}  result",
        "target", "scope", "seeds", "coords", "max_rel_err", "tol"
    );
    let mut failed = 0;
    for target in targets(scope) {
        match run_target(&target, seeds, seed) {
            Ok(r) => {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!(
                    "{:<36} {:<10} {:>6} {:>8} {:>12.3e} {:>8.0e}  {verdict}",
                    r.name, r.scope, r.seeds, r.outcome.checked, r.outcome.max_rel_err, r.rel_tol
                );
            }
            Err(Error::UnsupportedDoubleBackward(op)) => {
                failed += 1;
                println!("{:<36} {:<10} unsupported double-backward through `{op}`", target.name, target.scope);
            }
            Err(e) => {
                failed += 1;
                println!("{:<36} {:<10} error: {e}", target.name, target.scope);
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} target(s) failed")));
    }
    println!("all targets passed");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn mask_demo(
    kind: Kind,
    size: usize,
    seed: u64,
    ratio: Option<f64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    sweep: Option<u64>,
) -> Outcome {
    let base = match &config {
        Some(p) => read_config(p)?,
        None => Config::default(),
    };
    let mut spec = base.mask.clone();
    spec.kind = kind.into();
    if let Some(r) = ratio {
        spec.center_ratio = r;
    }
    if size == 0 {
        return Err(Failure::Usage(anyhow!("--size must be positive")));
    }
    let mask = generate(&spec, size, seed)?;
    if let Some(path) = &out {
        pnm::write_pgm(path, &mask)?;
    }
    println!("invalid_fraction {:.6}", mask.invalid_fraction());
    if matches!(kind, Kind::Center) {
        let side = center_side(spec.center_ratio, size);
        let origin = (size - side) / 2;
        println!("square side {side} origin ({origin}, {origin}) size {size}");
    }
    if let Some(n) = sweep {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..n {
            let f = generate(&spec, size, seed.wrapping_add(s))?.invalid_fraction();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        println!(
            "sweep {n} seeds: min {lo:.6} max {hi:.6} bounds [{}, {}]",
            spec.ratio_lo, spec.ratio_hi
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume, out } => train(config, resume, out),
        Command::Infer {
            checkpoint,
            image,
            mask,
            caption,
            seed,
            out,
        } => infer(&checkpoint, &image, &mask, &caption, seed, &out),
        Command::Eval {
            checkpoint,
            mask,
            scenes,
            seed,
            out,
        } => eval(&checkpoint, mask, scenes, seed, out),
        Command::GradCheck { scope, seeds, seed } => grad_check(scope, seeds, seed),
        Command::MaskDemo {
            kind,
            size,
            seed,
            ratio,
            config,
            out,
            sweep,
        } => mask_demo(kind, size, seed, ratio, config, out, sweep),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
