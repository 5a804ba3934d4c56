use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use evasim::attack::{AttackConfig, Family, Mode};
use evasim::corpus::GenConfig;
use evasim::detect::{DetectorId, Model};
use evasim::pipeline::{self, EnsembleChoice, EvalOptions, Layout, TrainOptions};

#[derive(Parser)]
#[command(
    name = "evasim",
    version,
    about = "Adversarial transformation workbench for toy binaries"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Root seed; EVASIM_SEED takes precedence when set.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "evasim-out/corpus")]
    corpus_dir: PathBuf,
    #[arg(long, global = true, default_value = "evasim-out/out")]
    out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled corpus of toy binaries.
    GenCorpus {
        #[arg(long, default_value_t = 500)]
        n_benign: usize,
        #[arg(long, default_value_t = 500)]
        n_malware: usize,
        #[arg(long, default_value_t = 4)]
        min_fns: usize,
        #[arg(long, default_value_t = 12)]
        max_fns: usize,
        /// Distance between the classes' code profiles, in [0, 1].
        #[arg(long)]
        separation: Option<f64>,
        /// Preference for each class's own string pool, in [0, 1].
        #[arg(long)]
        string_separation: Option<f64>,
    },
    /// Train the three detectors on the corpus.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// L2 penalty for the raw-byte logistic.
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Print fuzzy digests of files, or digest the whole corpus.
    Hash { files: Vec<PathBuf> },
    /// Classify files with every detector, or the whole evaluation half.
    Detect { files: Vec<PathBuf> },
    /// Attack every evaluation binary against one target.
    AttackAll {
        #[arg(long)]
        target: DetectorId,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, default_value_t = 20)]
        max_iterations: usize,
        /// Per-binary wall-clock limit in seconds.
        #[arg(long, default_value_t = 60.0)]
        time_limit: f64,
        #[arg(long, default_value_t = 0.05)]
        disp_budget: f64,
    },
    /// Score originals and attack sets; write the report files.
    Eval {
        /// Attack set directories; defaults to every set under the output directory.
        #[arg(long = "transformed-dir")]
        transformed_dirs: Vec<PathBuf>,
        /// all, none, or one rule: 1, 2, 3 (minority, majority, consensus).
        #[arg(long, default_value = "all")]
        ensemble: EnsembleChoice,
        #[arg(long, default_value_t = 20)]
        extremes_n: usize,
    },
    /// Render report.json as markdown.
    Report {
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut g = cli.global;
    if let Ok(v) = std::env::var("EVASIM_SEED") {
        g.seed = v
            .trim()
            .parse()
            .with_context(|| format!("EVASIM_SEED={v} is not a u64"))?;
    }
    let layout = Layout::new(&g.corpus_dir, &g.out_dir);
    match cli.command {
        Command::GenCorpus {
            n_benign,
            n_malware,
            min_fns,
            max_fns,
            separation,
            string_separation,
        } => {
            let defaults = GenConfig::default();
            let cfg = GenConfig {
                seed: g.seed,
                n_benign,
                n_malware,
                min_fns,
                max_fns,
                separation: separation.unwrap_or(defaults.separation),
                string_separation: string_separation.unwrap_or(defaults.string_separation),
                ..defaults
            };
            let manifest = pipeline::gen_corpus(&layout, &cfg, g.threads)?;
            println!(
                "wrote {} binaries to {}",
                manifest.entries.len(),
                layout.corpus.display()
            );
        }
        Command::Train { epochs, l2, k, theta } => {
            let mut opts = TrainOptions::new(g.seed);
            opts.epochs = epochs.unwrap_or(opts.epochs);
            opts.l2 = l2.unwrap_or(opts.l2);
            opts.k = k.unwrap_or(opts.k);
            opts.theta = theta.unwrap_or(opts.theta);
            let (_, summary) = pipeline::train(&layout, &opts, g.threads)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Hash { files } if files.is_empty() => {
            let lines = pipeline::hash_corpus(&layout, g.threads)?;
            println!("digested {} binaries", lines.len());
        }
        Command::Hash { files } => {
            for f in files {
                println!("{},\"{}\"", pipeline::digest_file(&f)?, f.display());
            }
        }
        Command::Detect { files } if files.is_empty() => {
            let lines = pipeline::detect_corpus(&layout, g.threads)?;
            println!("classified {} binaries", lines.len());
        }
        Command::Detect { files } => {
            let models: Vec<Model> = DetectorId::ALL
                .iter()
                .map(|&d| Model::load(&layout.model(d)))
                .collect::<evasim::Result<_>>()?;
            for f in files {
                let bytes = std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
                let verdicts = models
                    .iter()
                    .map(|m| m.as_detector().classify(&bytes))
                    .collect::<evasim::Result<Vec<_>>>()?;
                println!("{}", serde_json::json!({ "path": f, "verdicts": verdicts }));
            }
        }
        Command::AttackAll {
            target,
            mode,
            family,
            max_iterations,
            time_limit,
            disp_budget,
        } => {
            let mut cfg = AttackConfig::default_for(target, g.seed);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.family = family.unwrap_or(cfg.family);
            cfg.max_iterations = max_iterations;
            cfg.time_limit = time_limit;
            cfg.disp_budget = disp_budget;
            let summary = pipeline::attack_all(&layout, &cfg, g.threads)?;
            println!(
                "{}: processed {}/{} ({:.2}%), evaded {} ({:.2}%), mean NLD {:.4}",
                summary.name,
                summary.processed,
                summary.attempted,
                100.0 * summary.processed_fraction,
                summary.evaded,
                100.0 * summary.evasion_rate,
                summary.mean_nld
            );
        }
        Command::Eval {
            transformed_dirs,
            ensemble,
            extremes_n,
        } => {
            let mut opts = EvalOptions::new(g.seed);
            opts.sets = transformed_dirs;
            opts.ensemble = ensemble;
            opts.extremes_n = extremes_n;
            let report = pipeline::evaluate(&layout, &opts, g.threads)?;
            pipeline::write_report(&layout, &report, &opts, g.threads)?;
            println!("wrote {}", layout.report().display());
        }
        Command::Report { output } => {
            let path = layout.report().join("report.json");
            let raw = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: pipeline::Report = serde_json::from_slice(&raw)?;
            let text = pipeline::render_markdown(&report);
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
