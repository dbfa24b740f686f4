use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtda::data::{Domain, DomainSplit, ShiftConfig};
use rtda::gradcheck;
use rtda::metrics::parse_class_subset;
use rtda::models::{build_discriminator, count_flops, human_count, DiscriminatorVariant};
use rtda::train::{compare_variants, format_comparison, run_training_on, Checkpoint, TrainConfig, TrainData, Trainer};
use rtda::{Error, Result};

#[derive(Parser)]
#[command(name = "rtda", version, about = "Adversarial domain adaptation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count of a discriminator.
    Count {
        variant: DiscriminatorVariant,
        /// Channels of the segmentation map fed to the discriminator.
        #[arg(long, default_value_t = 19)]
        classes: usize,
    },
    /// Per-layer parameter, MAC and FLOP report of a discriminator.
    Flops {
        variant: DiscriminatorVariant,
        #[arg(long, default_value_t = 512)]
        h: usize,
        #[arg(long, default_value_t = 1024)]
        w: usize,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Write synthetic scenes of both domains as SDR1 rasters.
    GenData {
        #[arg(long)]
        root: PathBuf,
        /// Seed range `a..b` (end exclusive) or a comma-separated list.
        #[arg(long)]
        seeds: String,
        /// `HxW`, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 5)]
        num_classes: usize,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a `<root>/<split>/<domain>` directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Comma-separated class subset for the mean.
        #[arg(long)]
        classes: Option<String>,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a source-only baseline and every discriminator variant.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Invalid(format!("bad seed list '{text}'"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("bad size '{text}', expected HxW"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::parse(&std::fs::read_to_string(path)?)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count { variant, classes } => {
            let g = build_discriminator::<f32>(variant, classes)?;
            let n = g.num_params() as u64;
            println!("{variant}: {n} parameters ({})", human_count(n));
        }
        Command::Flops { variant, h, w, classes, csv } => {
            let report = count_flops(&build_discriminator::<f32>(variant, classes)?, h, w)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                println!("{variant}\n{report}");
            }
        }
        Command::GenData { root, seeds, size, split, num_classes } => {
            let seeds = parse_seeds(&seeds)?;
            let (h, w) = parse_size(&size)?;
            let shift = ShiftConfig::new(num_classes);
            for domain in [Domain::Source, Domain::Target] {
                DomainSplit::generate(domain, seeds.iter().copied(), &shift, h, w, num_classes)?.save(&root, &split)?;
            }
            println!("wrote {} scenes per domain to {}", seeds.len(), root.join(&split).display());
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let data = TrainData::for_config(&cfg)?;
            let mut tr = run_training_on(&cfg, &data)?;
            if let Some(r) = tr.history.last() {
                println!(
                    "iteration {}: l_seg {} l_adv {} l_d {}",
                    tr.iteration, r.l_seg, r.l_adv, r.l_d
                );
            }
            let src = tr.evaluate(&data.eval_source, None)?;
            let tgt = tr.evaluate(&data.eval_target, None)?;
            println!("source mIoU {:.4}  target mIoU {:.4}", src.mean, tgt.mean);
            if let Some(dir) = &cfg.out_dir {
                println!("checkpoint and loss log in {}", dir.display());
            }
        }
        Command::Eval { ckpt, split, classes } => {
            let mut tr = Trainer::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let domain: Domain = split
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Invalid(format!("bad split path {}", split.display())))?
                .parse()?;
            let name = split
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Invalid(format!("bad split path {}", split.display())))?
                .to_string();
            let root = split.parent().and_then(Path::parent).unwrap_or(Path::new(""));
            let data = DomainSplit::load(root, &name, domain)?;
            let subset = classes.as_deref().map(parse_class_subset).transpose()?;
            print!("{}", tr.evaluate(&data, subset.as_deref())?.to_csv());
        }
        Command::Gradcheck { instances, seed } => {
            let results = gradcheck::run_suite(instances, seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:>3} instances  max rel err {:.2e}  {status}", r.primitive, r.instances, r.max_rel_error);
                failed += !r.passed() as usize;
            }
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} primitive(s) failed the gradient check")));
            }
        }
        Command::Compare { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let data = TrainData::for_config(&cfg)?;
            let rows = compare_variants(&cfg, &DiscriminatorVariant::ALL, &data)?;
            print!("{}", format_comparison(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
