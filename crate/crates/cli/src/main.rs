use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xdcycle::config::RunConfig;
use xdcycle::image::{Domain, Image};
use xdcycle::metrics::{contact_sheet, evaluate, histogram_equalize, noise_sensitivity, texture_leak_score, PROBE_EPS};
use xdcycle::nets::ModelBundle;
use xdcycle::synthbench::{build_dataset, Dataset, DatasetManifest, SplitCounts, Split, StructureMode};
use xdcycle::trainer::{load_checkpoint, translate, Direction, Trainer, TRACE_FILE};
use xdcycle::{Error, Result};

#[derive(Parser)]
#[command(name = "xdcycle", version, about = "Unpaired appearance/structure translation with extended cycle consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, value_parser = ["render", "depth"])]
        mode: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fraction of the reference split sizes (1500/1500/900/600).
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config.echo, trace.log, ckpt/, images/ and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["cyclegan", "xcyclegan", "xdcyclegan"])]
        variant: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint; its stored configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; defaults to the resumed run's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate a PNG file or every PNG in a directory.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = ["a2b", "b2a"])]
        direction: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a paired split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["test", "val"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contact sheet (input | structure | equalized structure) and hiding scores.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["test", "val"])]
        split: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_of(name: &str) -> Split {
    if name == "val" {
        Split::Val
    } else {
        Split::Test
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn gen_data(mode: &str, size: usize, scale: f64, seed: u64, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::new(StructureMode::parse(mode)?, size, SplitCounts::scaled(scale)?, seed);
    build_dataset(&manifest, out)?;
    let c = manifest.counts;
    println!(
        "wrote {} ({} mode, {size} px): train_A {} train_B {} test {} val {}",
        out.display(),
        mode,
        c.train_a,
        c.train_b,
        c.test,
        c.val
    );
    Ok(())
}

/// Test-split samples and metrics written at the end of a run.
fn finish_run(model: &ModelBundle<f32>, cfg: &RunConfig, run: &Path, ckpt: &Path) -> Result<()> {
    let ds = Dataset::open(&cfg.train.dataset)?;
    let report = evaluate(model, &ds, Split::Test, cfg.train.variant.name(), &ckpt.display().to_string())?;
    report.save(&run.join("report"))?;
    let images = run.join("images");
    mkdir(&images)?;
    for item in ds.paired(Split::Test)?.iter().take(4) {
        let v = translate(model, &item.appearance, Direction::A2B)?;
        let rec = translate(model, &v, Direction::B2A)?;
        let sheet = contact_sheet(&[vec![item.appearance.clone(), v.clone(), histogram_equalize(&v), rec]])?;
        sheet.save_png(&images.join(format!("{:05}.png", item.sidecar.pairing_id)), false)?;
    }
    println!(
        "ssim {:.4} ± {:.4}, texture leak {:.4}, report in {}",
        report.ssim.mean,
        report.ssim.std,
        report.texture_leak.mean,
        run.join("report").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    variant: Option<&str>,
    dataset: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    overrides: &[String],
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (mut trainer, cfg, run) = if let Some(ckpt) = resume {
        if config.is_some() || variant.is_some() || dataset.is_some() || epochs.is_some() || seed.is_some() || !overrides.is_empty() {
            return Err(Error::Config("--resume uses the checkpoint's configuration; drop the other settings".into()));
        }
        let run = match out {
            Some(o) => o.to_path_buf(),
            None => ckpt
                .parent()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .ok_or_else(|| Error::Config("cannot infer the run directory; pass --out".into()))?,
        };
        let t = Trainer::<f32>::resume(ckpt, &run)?;
        let cfg = RunConfig::parse(&RunConfig::new(t.config.clone()).serialize())?;
        (t, cfg, run)
    } else {
        let run = out.ok_or_else(|| Error::Config("--out is required".into()))?.to_path_buf();
        let mut cfg = match config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => RunConfig::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(v) = variant {
            cfg.set("variant", v)?;
        }
        if let Some(d) = dataset {
            cfg.set("dataset", &d.display().to_string())?;
        }
        if let Some(e) = epochs {
            cfg.set("epochs", &e.to_string())?;
        }
        if let Some(s) = seed {
            cfg.set("seed", &s.to_string())?;
        }
        mkdir(&run)?;
        let t = Trainer::<f32>::new(cfg.train.clone(), &run)?;
        (t, cfg, run)
    };
    write(&run.join("config.echo"), &cfg.echo())?;
    println!(
        "training {} for {} epochs ({} steps per epoch) into {}",
        cfg.train.variant,
        cfg.train.epochs,
        trainer.steps_per_epoch(),
        run.display()
    );
    let last = trainer
        .run(None)?
        .ok_or_else(|| Error::Checkpoint("no checkpoint was written".into()))?;
    println!("final checkpoint {}, trace {}", last.display(), run.join(TRACE_FILE).display());
    finish_run(&trainer.state.model, &cfg, &run, &last)
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

fn cmd_translate(checkpoint: &Path, input: &Path, direction: &str, out: &Path) -> Result<()> {
    let direction = Direction::parse(direction)?;
    let model = load_checkpoint::<f32>(checkpoint)?.state.model;
    let domain = match direction {
        Direction::A2B => Domain::Appearance,
        Direction::B2A => Domain::Structure,
    };
    mkdir(out)?;
    let files = png_inputs(input)?;
    for f in &files {
        let img = Image::load_png(f, domain)?;
        let y = translate(&model, &img, direction)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dst = out.join(format!("{stem}_{}.png", direction.suffix()));
        y.save_png(&dst, y.channels() == 1)?;
    }
    println!("translated {} image(s) into {}", files.len(), out.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, split: &str, out: &Path) -> Result<()> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let ds = Dataset::open(dataset)?;
    if ds.manifest.mode != ck.config.mode {
        return Err(Error::Dataset(format!(
            "checkpoint was trained in {} mode, dataset is {} mode",
            ck.config.mode.name(),
            ds.manifest.mode.name()
        )));
    }
    let report = evaluate(&ck.state.model, &ds, split_of(split), ck.config.variant.name(), &checkpoint.display().to_string())?;
    report.save(out)?;
    println!("{}", fs::read_to_string(out).map_err(|e| Error::io(out, e))?.trim_end());
    Ok(())
}

fn cmd_diagnose(checkpoint: &Path, dataset: &Path, split: &str, count: usize, out: &Path) -> Result<()> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let model = &ck.state.model;
    let ds = Dataset::open(dataset)?;
    let items = ds.paired(split_of(split))?;
    if items.is_empty() || count == 0 {
        return Err(Error::Dataset("nothing to diagnose".into()));
    }
    mkdir(out)?;
    let mut rows = Vec::new();
    for item in items.iter().take(count) {
        let v = translate(model, &item.appearance, Direction::A2B)?;
        rows.push(vec![item.appearance.clone(), v.clone(), histogram_equalize(&v)]);
    }
    let sheet = out.join("contact_sheet.png");
    contact_sheet(&rows)?.save_png(&sheet, false)?;
    let mut leak_items = Vec::new();
    for item in &items {
        leak_items.push((item.appearance.clone(), ds.latent(item)?.texture_layer));
    }
    let leak = texture_leak_score(model, &leak_items)?;
    let appearances: Vec<Image> = items.iter().map(|i| i.appearance.clone()).collect();
    let mut probes = Vec::new();
    for eps in PROBE_EPS {
        let s = noise_sensitivity(model, &appearances, eps)?;
        probes.push(serde_json::json!({ "eps": eps, "mean": s.mean, "std": s.std }));
    }
    let doc = serde_json::json!({
        "variant": ck.config.variant.name(),
        "checkpoint": checkpoint.display().to_string(),
        "count": items.len(),
        "texture_leak": { "mean": leak.mean, "std": leak.std },
        "noise_sensitivity": probes,
    });
    let report = out.join("diagnose.json");
    write(&report, &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    println!(
        "texture leak {:.4} ± {:.4}; sheet {}, scores {}",
        leak.mean,
        leak.std,
        sheet.display(),
        report.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { mode, size, scale, seed, out } => gen_data(&mode, size, scale, seed, &out),
        Command::Train {
            config,
            variant,
            dataset,
            epochs,
            seed,
            overrides,
            resume,
            out,
        } => train(
            config.as_deref(),
            variant.as_deref(),
            dataset.as_deref(),
            epochs,
            seed,
            &overrides,
            resume.as_deref(),
            out.as_deref(),
        ),
        Command::Translate {
            checkpoint,
            input,
            direction,
            out,
        } => cmd_translate(&checkpoint, &input, &direction, &out),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => cmd_eval(&checkpoint, &dataset, &split, &out),
        Command::Diagnose {
            checkpoint,
            dataset,
            split,
            count,
            out,
        } => cmd_diagnose(&checkpoint, &dataset, &split, count, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
