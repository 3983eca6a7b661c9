use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use auditfl_core::simulation::{self, DataConfig, RunSummary};
use auditfl_core::{
    full_audit, verify_chain, AdversaryKind, ChainVerdict, MaliciousSpec, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "auditfl",
    version,
    about = "Auditable robust federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, publish the record to a ledger and write per-round metrics.
    Run(RunArgs),
    /// Audit a ledger; exits 0 iff the audit accepts.
    Audit {
        ledger: PathBuf,
        /// Report path (default: `<ledger>.audit.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare the scheme with plain averaging over malicious counts.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        from: u32,
        #[arg(long, default_value_t = 9)]
        to: u32,
        /// Behaviour of the malicious participants.
        #[arg(long, default_value = "label_flip")]
        kind: AdversaryKind,
        /// Run entries concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Check the hash chain of a ledger file.
    VerifyChain { ledger: PathBuf },
    /// Print the default configuration as TOML.
    DefaultConfig {
        /// Print the 100-round desk preset instead.
        #[arg(long)]
        desk: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the 100-round desk preset instead of the defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<u8>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    participants: Option<u32>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    security_param: Option<u32>,
    /// `id:kind`, repeatable (kinds: label_flip, sign_flip, scale_amplify:N).
    #[arg(long = "malicious", value_name = "ID:KIND")]
    malicious: Vec<MaliciousSpec>,
    /// Enable clipping with this factor of the median inner product.
    #[arg(long, value_name = "FACTOR")]
    clip: Option<f64>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also run the plain-averaging baseline.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    eval_every: Option<u32>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        if self.desk && self.config.is_some() {
            bail!("--desk and --config are exclusive");
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(
            seed,
            scale,
            rounds,
            participants,
            learning_rate,
            batch_size,
            security_param,
            eval_every
        );
        if !self.malicious.is_empty() {
            c.malicious = self.malicious.clone();
        }
        if let Some(f) = self.clip {
            c.clipping = true;
            c.clip_factor = f;
        }
        if let Some(dir) = &self.data_dir {
            c.data = DataConfig::Mnist {
                dir: dir.clone(),
                train_limit: None,
                test_limit: None,
            };
        }
        if let Some(out) = &self.output {
            c.output_dir = out.clone();
        }
        c.baseline |= self.baseline;
        c.validate()?;
        Ok(c)
    }
}

fn print_summary(label: &str, s: &RunSummary) {
    println!(
        "{label}: final test accuracy {:.4}, loss {:.4}",
        s.final_accuracy, s.final_loss
    );
}

fn print_timings(s: &RunSummary) {
    let t = &s.timings;
    println!("measured (informational):");
    println!(
        "  preprocessing          {:>10.3} s",
        t.preprocess.as_secs_f64()
    );
    println!(
        "  all rounds             {:>10.3} s",
        t.rounds.as_secs_f64()
    );
    println!(
        "  mask+sign per upload   {:>10.6} s",
        t.participant_masking.as_secs_f64()
    );
    println!("  one PRVG call          {:>10.6} s", t.prvg.as_secs_f64());
    println!(
        "  upload per round       {:>10.4} MB",
        t.upload_bytes as f64 / 1e6
    );
    println!(
        "  record per round       {:>10.4} MB",
        t.record_bytes_per_round as f64 / 1e6
    );
}

fn default_report_path(ledger: &Path) -> PathBuf {
    let mut name = ledger.file_name().unwrap_or_default().to_os_string();
    name.push(".audit.json");
    ledger.with_file_name(name)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config()?;
            let report = simulation::run(&config)?;
            print_summary("scheme", &report.scheme);
            if let Some(b) = &report.baseline {
                print_summary("baseline", b);
            }
            print_timings(&report.scheme);
            println!("ledger:  {}", report.ledger.display());
            println!("metrics: {}", report.metrics.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { ledger, report } => {
            if !ledger.exists() {
                bail!("{} does not exist", ledger.display());
            }
            let result = full_audit(&ledger);
            let path = report.unwrap_or_else(|| default_report_path(&ledger));
            std::fs::write(&path, result.to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            match &result.first_failure {
                None => println!("accept ({} rounds)", result.rounds.len()),
                Some(f) => println!("reject: {f}"),
            }
            println!("report: {}", path.display());
            Ok(if result.accepted() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Sweep {
            run,
            from,
            to,
            kind,
            parallel,
        } => {
            let mut config = run.config()?;
            config.parallel_sweep |= parallel;
            if from > to {
                bail!("empty sweep range {from}..={to}");
            }
            let rows = simulation::sweep(&config, from..=to, kind)?;
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("sweep.csv");
            simulation::write_sweep_csv(&path, &rows)?;
            println!("{:>9}  {:>8}  {:>8}", "malicious", "scheme", "fedavg");
            for r in &rows {
                match (&r.error, r.scheme_accuracy, r.fedavg_accuracy) {
                    (None, Some(s), Some(f)) => {
                        println!("{:>9}  {:>8.4}  {:>8.4}", r.malicious, s, f)
                    }
                    (e, ..) => println!(
                        "{:>9}  failed: {}",
                        r.malicious,
                        e.as_deref().unwrap_or("?")
                    ),
                }
            }
            println!("table: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyChain { ledger } => match verify_chain(&ledger)? {
            ChainVerdict::Accept { blocks } => {
                println!("accept ({blocks} blocks)");
                Ok(ExitCode::SUCCESS)
            }
            ChainVerdict::Reject { height, reason } => {
                println!("reject at height {height}: {reason}");
                Ok(ExitCode::from(1))
            }
        },
        Command::DefaultConfig { desk } => {
            let c = if desk {
                RunConfig::desk()
            } else {
                RunConfig::default()
            };
            print!("{}", toml::to_string(&c)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
