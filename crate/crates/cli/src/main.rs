use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;
use meshdraft::bench::{self, BenchReport, RunConfig, Sweep, Workspace, CONFIG_ENV};
use meshdraft::model::HeadKind;
use meshdraft::Error;

/// Multi-head speculative decoding pipeline for synthetic meshes.
///
/// Any config key can also be given as a flag of the same dotted name,
/// e.g. `--decode.draft_heads 3` or `--stage1.epochs=5`.
#[derive(Debug, Parser)]
#[command(name = "meshdraft")]
struct Cli {
    /// Config file (`section.key = value` lines); defaults to $MESHDRAFT_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding data, checkpoints and reports.
    #[arg(long, global = true, default_value = "meshdraft-run")]
    workspace: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Heads {
    Ca,
    Mlp,
}

impl From<Heads> for HeadKind {
    fn from(h: Heads) -> Self {
        match h {
            Heads::Ca => HeadKind::CrossAttention,
            Heads::Mlp => HeadKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus, manifest, OBJ files and token splits.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output workspace; defaults to --workspace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backbone on the corpus.
    Pretrain,
    /// Train draft heads: stage 1 on the frozen backbone, stage 2 with LoRA.
    Distill {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, value_enum, default_value = "ca")]
        heads: Heads,
    },
    /// Decode held-out conditions to OBJ and trace files.
    Generate {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare vanilla and speculative decoding on the held-out set.
    Bench,
    /// Run ablation sweeps; all of them when none is named.
    Ablate {
        #[arg(long = "sweep")]
        sweeps: Vec<String>,
    },
    /// Re-emit stored reports in a machine-readable format.
    Report {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Pulls `--section.key value` and `--section.key=value` out of `args`.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((k, v));
    }
    Ok((rest, overrides))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Usage(_) | Error::Parse { .. }) => 2,
        Some(Error::Dependency(_)) => 3,
        _ => 4,
    }
}

fn report_stems(dir: &Path) -> anyhow::Result<Vec<String>> {
    if !dir.exists() {
        return Err(Error::Dependency(format!("no reports at {}; run `bench` or `ablate` first", dir.display())).into());
    }
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(str::to_string))?
        })
        .collect();
    if stems.is_empty() {
        return Err(Error::Dependency(format!("no reports in {}; run `bench` or `ablate` first", dir.display())).into());
    }
    stems.sort();
    Ok(stems)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    let config_path = cli.config.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut overrides = overrides.to_vec();
    if let Command::GenData { count, seed, .. } = &cli.command {
        if let Some(c) = count {
            overrides.push(("corpus.count".into(), c.to_string()));
        }
        if let Some(s) = seed {
            overrides.push(("corpus.seed".into(), s.to_string()));
        }
    }
    let cfg = RunConfig::load(config_path.as_deref(), &overrides)?;
    let ws = Workspace::new(&cli.workspace);
    match cli.command {
        Command::GenData { out, .. } => {
            let ws = out.map(Workspace::new).unwrap_or(ws);
            let s = bench::gen_data(&cfg, &ws)?;
            println!("{} shapes: {} train, {} held out, {} too long", s.shapes, s.train, s.held_out, s.skipped);
        }
        Command::Pretrain => {
            bench::pretrain(&cfg, &ws)?;
            println!("backbone saved to {}", ws.backbone().display());
        }
        Command::Distill { stage, heads } => {
            let kind = heads.into();
            bench::distill(&cfg, &ws, stage, kind)?;
            println!("stage {stage} saved to {}", ws.stage(stage, kind).display());
        }
        Command::Generate { count, out } => {
            let out = out.unwrap_or_else(|| ws.root.join("generated"));
            let samples = bench::generate(&cfg, &ws, count, &out)?;
            for (i, s) in samples.iter().enumerate() {
                println!(
                    "{i}: {} tokens in {} steps, cd {:.4} hd {:.4}",
                    s.trace.tokens(),
                    s.trace.steps(),
                    s.cd,
                    s.hd
                );
            }
        }
        Command::Bench => {
            let run = bench::bench(&cfg, &ws)?;
            print!("{}", run.report.summary());
        }
        Command::Ablate { sweeps } => {
            let sweeps: Vec<Sweep> = if sweeps.is_empty() {
                Sweep::ALL.to_vec()
            } else {
                sweeps.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
            };
            for s in sweeps {
                info!("sweep {}", s.name());
                let run = bench::ablate(&cfg, &ws, s)?;
                print!("{}", run.report.summary());
            }
        }
        Command::Report { format, out } => {
            let dir = ws.reports();
            let stems = report_stems(&dir)?;
            let out = out.unwrap_or_else(|| dir.clone());
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            cfg.echo_into(&out)?;
            for stem in stems {
                let r = BenchReport::read(&dir, &stem)?;
                let (ext, body) = match format {
                    Format::Csv => ("csv", r.to_csv()?),
                    Format::Json => ("json", r.to_json()?),
                };
                let p = out.join(format!("{stem}.{ext}"));
                std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
                print!("{}", r.summary());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let version: &'static str = Box::leak(meshdraft::bench::config::version().into_boxed_str());
    let parsed = Cli::command()
        .version(version)
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
