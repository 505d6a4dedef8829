//! Command-line surface. Usage errors exit with 2, runtime failures with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::augment::strong_augment;
use crate::config::{TrainConfig, NUM_SPLITS};
use crate::data::Dataset;
use crate::error::Error;
use crate::model::{load_checkpoint, ModelState};
use crate::oracles::{run_suite, TOLERANCE};
use crate::probe::{
    append_probe_result, equivariance_probe, export_features, feature_distance_stats, ProbeConfig, ProbeTransform,
};
use crate::rng::{derive_seed, tag, Rng};
use crate::trainer::{evaluate, load_datasets, make_splits, run};

#[derive(Parser, Debug)]
#[command(name = "crmatch", version, about = "Semi-supervised training with consistency regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write config.resolved, metrics.csv and checkpoint.crmt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test error of a trained run.
    Eval(RunArgs),
    /// Linear probe: can a transform be detected from frozen features?
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "strong-vs-weak")]
        transform: String,
        /// Number of test images to pair up.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append `model_tag,transform,probe_error` to this CSV.
        #[arg(long)]
        append: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        tag: String,
    },
    /// Cosine distances between features of original, weak and strong views.
    FeatureStats {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every op and metric.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Write N strongly augmented images as binary PPM.
    AugmentPreview {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the labeled index lists of every split as CSV.
    MakeSplits {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pooled test-set features of a trained run to a FEAT file.
    ExportFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use the desk-scale profile.
    #[arg(long)]
    desk: bool,
}

impl ConfigArgs {
    fn resolve(&self, out: Option<&Path>) -> Result<TrainConfig> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                TrainConfig::parse_text(&text)?
            }
            None => Vec::new(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if self.desk {
            pairs.push(("desk_profile".into(), "true".into()));
        }
        if let Some(o) = out {
            pairs.push(("out_dir".into(), o.display().to_string()));
        }
        let mut cfg = TrainConfig::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Use the raw weights instead of the EMA shadow.
    #[arg(long)]
    raw: bool,
}

struct LoadedRun {
    cfg: TrainConfig,
    model: ModelState,
    test: Dataset,
}

impl RunArgs {
    fn load(&self) -> Result<LoadedRun> {
        let cfg_path = self.run.join("config.resolved");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = TrainConfig::from_text(&text).with_context(|| format!("reading {}", cfg_path.display()))?;
        let (_, test) = load_datasets(&cfg)?;
        let size = test.image_size().context("test set is empty")?;
        let (state, ema) = load_checkpoint(&self.run.join("checkpoint.crmt"), &cfg.model_config(size), cfg.ema_decay)?;
        let model = if self.raw { state } else { ema.to_state(&state)? };
        Ok(LoadedRun { cfg, model, test })
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            // library errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => 2,
                _ => 1,
            }
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = config.resolve(out.as_deref())?;
            let (train, test) = load_datasets(&cfg)?;
            let r = run(&cfg, &train, &test)?;
            println!("err_raw {:.4} err_ema {:.4}", r.err_raw, r.err_ema);
        }
        Command::Eval(args) => {
            let r = args.load()?;
            println!("{:.4}", evaluate(&r.model, &r.test)?);
        }
        Command::Probe { run, transform, n, seed, append, tag } => {
            let transform: ProbeTransform = transform.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let r = run.load()?;
            let images = first_images(&r.test, n)?;
            let pcfg = ProbeConfig { transform, seed, augment: r.cfg.augment_config(), ..ProbeConfig::default() };
            let err = equivariance_probe(&r.model, &images, &pcfg)?;
            println!("{tag},{transform},{err:.4}");
            if let Some(p) = append {
                append_probe_result(&p, &tag, transform, err)?;
            }
        }
        Command::FeatureStats { run, n, seed } => {
            let r = run.load()?;
            let images = first_images(&r.test, n)?;
            let s = feature_distance_stats(&r.model, &images, n, seed, &r.cfg.augment_config())?;
            println!("weak-orig {}", s.weak_orig);
            println!("strong-orig {}", s.strong_orig);
            println!("weak-strong {}", s.weak_strong);
        }
        Command::GradCheck { seeds } => {
            let results = run_suite(seeds)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<28} {:.3e} {}",
                    r.name,
                    r.max_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                eprintln!("gradient check failed (tolerance {TOLERANCE:e})");
                return Ok(1);
            }
        }
        Command::AugmentPreview { config, seed, n, out } => {
            let cfg = config.resolve(None)?;
            let (_, test) = load_datasets(&cfg)?;
            if test.is_empty() {
                anyhow::bail!("no source images");
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let aug = cfg.augment_config();
            for i in 0..n {
                let src = &test.images[i % test.len()];
                let mut rng = Rng::substream(seed, i as u64, tag::PREVIEW);
                let p = out.join(format!("strong_{i:04}.ppm"));
                strong_augment(src, &mut rng, &aug).write_ppm(&p)?;
            }
            println!("wrote {n} images to {}", out.display());
        }
        Command::MakeSplits { config, out } => {
            let cfg = config.resolve(None)?;
            let (train, _) = load_datasets(&cfg)?;
            let splits =
                make_splits(&train.labels, cfg.labels_per_class, NUM_SPLITS, derive_seed(cfg.seed, &[tag::SPLIT]))?;
            let mut s = String::from("split,labeled\n");
            for (i, sp) in splits.iter().enumerate() {
                let idx: Vec<String> = sp.labeled.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{i},{}", idx.join(" "));
            }
            std::fs::write(&out, s).map_err(|e| Error::io(&out, e))?;
        }
        Command::ExportFeatures { run, out } => {
            let r = run.load()?;
            export_features(&r.model, &r.test.image_refs(), &r.test.labels, &out)?;
        }
    }
    Ok(0)
}

fn first_images(ds: &Dataset, n: usize) -> Result<Vec<&crate::augment::Image>> {
    if n > ds.len() {
        return Err(Error::Config(format!("n = {n} exceeds the {} test images", ds.len())).into());
    }
    Ok(ds.images[..n].iter().collect())
}
