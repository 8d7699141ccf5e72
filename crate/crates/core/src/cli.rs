//! The `iprompt` command line: `gen`, `pretrain`, `run`, `compare`, `verify`.
//!
//! Exit codes: 0 success, 1 verification or experiment failure, 2 usage or
//! configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{self, generate_split, Dataset, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::{
    build_schedule, pretrain_backbone, run_continual, summary_table, Method, RunReport, RunSpec,
    CSV_HEADER,
};
use crate::snapshot;
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "iprompt",
    version,
    about = "Image-token prompting for class-incremental learning"
)]
pub struct Cli {
    /// Experiment config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for every input and output path.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Replace existing reports instead of writing timestamped siblings.
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pretraining and continual datasets.
    Gen {
        /// Also write the effective config as `config.txt`.
        #[arg(long)]
        write_config: bool,
    },
    /// Pretrain the backbone and save it as a frozen snapshot.
    Pretrain,
    /// Run one continual experiment and write its reports.
    Run {
        /// Method, overriding the config.
        #[arg(long)]
        method: Option<String>,
        /// Schedule, overriding the config.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Run several methods and seeds and merge their CSV rows.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "iprompt,finetune")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Run the gradient, oracle and invariant checks.
    Verify,
}

/// Parses `args` (program name first) and runs the command, printing to
/// stdout/stderr. Returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config { .. } | Error::MissingFile(_) => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.paths = cfg.paths.under(&cli.out);
    Ok(cfg)
}

/// Runs a parsed command. `Ok(1)` reports a failed verification.
pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen { write_config } => {
            let files = cmd_gen(&cfg)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            if *write_config {
                let p = cli.out.join("config.txt");
                write_new(&p, cfg_text_for_out(&cfg, cli).as_bytes(), cli.overwrite)?;
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Pretrain => {
            let (path, acc) = cmd_pretrain(&cfg)?;
            println!("pretrain test accuracy {:.2}%", 100.0 * acc);
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Run { method, schedule } => {
            let mut cfg = cfg;
            if let Some(m) = method {
                cfg.learner.method = m.parse()?;
            }
            if let Some(s) = schedule {
                cfg.schedule = s.clone();
            }
            let (report, files) = cmd_run(&cfg, cli.overwrite)?;
            println!("{CSV_HEADER}\n{}", report.csv_row());
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Command::Compare {
            methods,
            seeds,
            schedule,
        } => {
            let methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Method>>>()?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds.clone()
            };
            let mut cfg = cfg;
            if let Some(s) = schedule {
                cfg.schedule = s.clone();
            }
            let (reports, path) = cmd_compare(&cfg, &methods, &seeds, cli.overwrite)?;
            print!("{}", summary_table(&reports));
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Verify => {
            let checks = verify::run_suite();
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<20} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += !c.passed as usize;
            }
            println!(
                "{} of {} checks passed",
                checks.len() - failed,
                checks.len()
            );
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn cfg_text_for_out(cfg: &ExperimentConfig, cli: &Cli) -> String {
    // paths were rebased on --out; write them back relative
    let mut c = cfg.clone();
    for p in [
        &mut c.paths.data_dir,
        &mut c.paths.backbone,
        &mut c.paths.reports,
    ] {
        if let Ok(rel) = p.strip_prefix(&cli.out) {
            *p = rel.to_path_buf();
        }
    }
    c.to_text()
}

pub const PRETRAIN_FILE: &str = "pretrain.ipds";
pub const PRETRAIN_TEST_FILE: &str = "pretrain_test.ipds";
pub const TRAIN_FILE: &str = "train.ipds";
pub const TEST_FILE: &str = "test.ipds";

/// Writes the four dataset files under the config's data directory.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let (size, ch) = (cfg.encoder.image_size, cfg.encoder.channels);
    let pre = cfg.data.pretrain_spec(size, ch);
    let cont = cfg.data.continual_spec(size, ch);
    let test_spec = crate::data::SyntheticSpec {
        per_class_count: cfg.data.test_per_class,
        ..cont.clone()
    };
    let pre_test = crate::data::SyntheticSpec {
        per_class_count: cfg.data.test_per_class,
        ..pre.clone()
    };
    let dir = &cfg.paths.data_dir;
    fs::create_dir_all(dir)?;
    let sets = [
        (PRETRAIN_FILE, generate_split(&pre, Split::Pretrain)?),
        (PRETRAIN_TEST_FILE, generate_split(&pre_test, Split::Test)?),
        (TRAIN_FILE, generate_split(&cont, Split::Train)?),
        (TEST_FILE, generate_split(&test_spec, Split::Test)?),
    ];
    let mut out = Vec::new();
    for (name, d) in sets {
        let p = dir.join(name);
        data::save(&p, &d)?;
        out.push(p);
    }
    Ok(out)
}

fn load_set(cfg: &ExperimentConfig, name: &str) -> Result<Dataset> {
    data::load(&cfg.paths.data_dir.join(name))
}

/// Pretrains on the pretraining split and saves the frozen backbone.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(PathBuf, f64)> {
    let train = load_set(cfg, PRETRAIN_FILE)?;
    let test = load_set(cfg, PRETRAIN_TEST_FILE)?;
    let (encoder, acc) = pretrain_backbone(&train, &test, cfg.encoder.clone(), &cfg.pretrain)?;
    if let Some(parent) = cfg.paths.backbone.parent() {
        fs::create_dir_all(parent)?;
    }
    snapshot::save(&cfg.paths.backbone, &encoder, None)?;
    Ok((cfg.paths.backbone.clone(), acc))
}

fn load_backbone(cfg: &ExperimentConfig) -> Result<Encoder> {
    let (encoder, _) = snapshot::load(&cfg.paths.backbone)?;
    if encoder.config() != &cfg.encoder {
        return Err(Error::Usage(format!(
            "backbone {} was trained with a different encoder config",
            cfg.paths.backbone.display()
        )));
    }
    Ok(encoder)
}

/// Runs one experiment in memory from already loaded inputs.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    backbone: &Encoder,
) -> Result<RunReport> {
    let schedule = build_schedule(&cfg.schedule, cfg.data.classes, cfg.schedule_seed())?;
    let spec = RunSpec {
        train,
        test,
        schedule: &schedule,
        backbone,
        learner: cfg.learner.clone(),
        train_cfg: cfg.training.clone(),
        seed: cfg.seed,
    };
    Ok(run_continual(&spec, None)?.0)
}

/// Runs the configured experiment and writes `<stem>.jsonl` and `<stem>.csv`
/// under the reports directory.
pub fn cmd_run(cfg: &ExperimentConfig, overwrite: bool) -> Result<(RunReport, Vec<PathBuf>)> {
    let train = load_set(cfg, TRAIN_FILE)?;
    let test = load_set(cfg, TEST_FILE)?;
    let backbone = load_backbone(cfg)?;
    let report = run_experiment(cfg, &train, &test, &backbone)?;
    let stem = format!(
        "run-{}-{}-seed{}",
        report.method,
        sanitize(&report.scenario),
        report.seed
    );
    let dir = &cfg.paths.reports;
    fs::create_dir_all(dir)?;
    let jsonl = write_new(
        &dir.join(format!("{stem}.jsonl")),
        report.to_jsonl()?.as_bytes(),
        overwrite,
    )?;
    let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    let csv = write_new(&dir.join(format!("{stem}.csv")), csv.as_bytes(), overwrite)?;
    Ok((report, vec![jsonl, csv]))
}

/// Runs every (method, seed) pair sequentially and writes one merged CSV.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    overwrite: bool,
) -> Result<(Vec<RunReport>, PathBuf)> {
    if methods.is_empty() {
        return Err(Error::Usage("compare needs at least one method".into()));
    }
    let train = load_set(cfg, TRAIN_FILE)?;
    let test = load_set(cfg, TEST_FILE)?;
    let backbone = load_backbone(cfg)?;
    let mut reports = Vec::new();
    let mut csv = format!("{CSV_HEADER}\n");
    for &seed in seeds {
        for &m in methods {
            let mut c = cfg.clone();
            c.seed = seed;
            c.learner.method = m;
            let r = run_experiment(&c, &train, &test, &backbone)?;
            csv.push_str(&r.csv_row());
            csv.push('\n');
            reports.push(r);
        }
    }
    let dir = &cfg.paths.reports;
    fs::create_dir_all(dir)?;
    let path = write_new(
        &dir.join(format!("compare-{}.csv", sanitize(&cfg.schedule))),
        csv.as_bytes(),
        overwrite,
    )?;
    Ok((reports, path))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `bytes` to `path`, or to a timestamped sibling when `path` exists
/// and `overwrite` is off. Returns the path written.
pub fn write_new(path: &Path, bytes: &[u8], overwrite: bool) -> Result<PathBuf> {
    let target = if overwrite || !path.exists() {
        path.to_path_buf()
    } else {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report");
        let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("");
        let mut n = 0;
        loop {
            let name = if n == 0 {
                format!("{stem}-{ms}.{ext}")
            } else {
                format!("{stem}-{ms}-{n}.{ext}")
            };
            let p = path.with_file_name(name);
            if !p.exists() {
                break p;
            }
            n += 1;
        }
    };
    let mut f = fs::File::create(&target)?;
    f.write_all(bytes)?;
    Ok(target)
}
