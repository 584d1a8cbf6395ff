//! `clbench`: generate synthetic centers, run experiments, export tables.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clbench_core::config::ConfigFile;
use clbench_core::harness::{
    grid_search, leave_one_out, privacy_sweep, run_plan, write_errors, PlanOutput, PrivacyPlan,
};
use clbench_core::metrics::{cost_report, read_case_records, write_case_records, ResultsTable, MEBIBYTE};
use clbench_core::privacy::write_sweep_csv;
use clbench_core::scenario::{file_checksum, load_dataset, save_dataset, ClientDataset};
use clbench_core::Error;
use log::info;
use sha2::{Digest, Sha256};

const MANIFEST: &str = "manifest.txt";
const RUN_META: &str = "run.meta";
const CASES: &str = "cases.csv";

#[derive(Parser)]
#[command(name = "clbench", version, about = "Collaborative segmentation benchmark on synthetic centers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset file per center plus a checksum manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `output.data_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export every ground-truth mask as PGM.
        #[arg(long)]
        pgm: bool,
    },
    /// Run one experiment and write its tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// Worker threads; 0 uses every available core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        nsd_tau: Option<f64>,
        /// Results directory; defaults to `output.results_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; defaults to `output.data_dir` of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generate the datasets first.
        #[arg(long)]
        generate: bool,
    },
    /// Re-aggregate the per-case records of a results directory.
    Export {
        results: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Accuracy,
    Cost,
    Robustness,
    Utility,
    Privacy,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Accuracy => "accuracy",
            Experiment::Cost => "cost",
            Experiment::Robustness => "robustness",
            Experiment::Utility => "utility",
            Experiment::Privacy => "privacy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn total(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_at<T>(path: &Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn scenario_hash(cfg: &ConfigFile) -> String {
    let doc = ConfigFile { scenario: cfg.scenario.clone(), ..ConfigFile::default() };
    sha256_hex(doc.to_toml().as_bytes())
}

fn dataset_file(dir: &Path, center: &str) -> PathBuf {
    dir.join(format!("{center}.clbench"))
}

fn generate(cfg: &ConfigFile, dir: &Path, pgm: bool) -> CliResult<Vec<ClientDataset>> {
    let datasets = cfg.scenario_spec()?.generate()?;
    io_at(dir, fs::create_dir_all(dir))?;
    let mut manifest = format!("scenario_sha256={}\n", scenario_hash(cfg));
    for ds in &datasets {
        let path = dataset_file(dir, &ds.center_id);
        let crc = save_dataset(&path, ds)?;
        manifest.push_str(&format!("{}.clbench crc32={crc:08x}\n", ds.center_id));
        if pgm {
            let masks = dir.join("masks").join(&ds.center_id);
            io_at(&masks, fs::create_dir_all(&masks))?;
            for (i, (_, mask)) in ds.train.iter().chain(&ds.test).enumerate() {
                let file = masks.join(format!("{i:04}.pgm"));
                let mut buf = Vec::new();
                mask.write_pgm(&mut buf)?;
                io_at(&file, fs::write(&file, buf))?;
            }
        }
    }
    let path = dir.join(MANIFEST);
    io_at(&path, fs::write(&path, manifest))?;
    Ok(datasets)
}

fn parse_manifest(text: &str) -> (Option<String>, Vec<(String, u32)>) {
    let mut hash = None;
    let mut files = Vec::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("scenario_sha256=") {
            hash = Some(h.to_string());
        } else if let Some((file, crc)) = line.split_once(" crc32=") {
            if let Ok(c) = u32::from_str_radix(crc, 16) {
                files.push((file.to_string(), c));
            }
        }
    }
    (hash, files)
}

fn load_datasets(cfg: &ConfigFile, dir: &Path) -> CliResult<Vec<ClientDataset>> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|_| {
        Failure::usage(format!("no datasets in {} (run `clbench generate` or pass --generate)", dir.display()))
    })?;
    let (hash, files) = parse_manifest(&text);
    if hash.as_deref() != Some(scenario_hash(cfg).as_str()) {
        return Err(Failure::usage(format!(
            "datasets in {} were generated from a different scenario; regenerate them",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for p in &cfg.scenario.centers {
        let name = format!("{}.clbench", p.id);
        let expected = files
            .iter()
            .find(|(f, _)| *f == name)
            .map(|(_, c)| *c)
            .ok_or_else(|| Failure::usage(format!("manifest has no entry for center {}", p.id)))?;
        let path = dataset_file(dir, &p.id);
        if !path.exists() {
            return Err(Failure::usage(format!("missing dataset {}", path.display())));
        }
        if file_checksum(&path)? != expected {
            return Err(Failure::usage(format!("{}: checksum does not match the manifest", path.display())));
        }
        out.push(load_dataset(&path)?);
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    io_at(path, fs::write(path, bytes))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> clbench_core::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes cases, errors and the aggregate tables of one plan run. Returns the
/// bytes of the case file.
fn write_plan_output(dir: &Path, out: &PlanOutput, suffix: &str) -> CliResult<Vec<u8>> {
    let cases = csv_bytes(|b| write_case_records(&out.records, b))?;
    write_file(&dir.join(format!("cases{suffix}.csv")), &cases)?;
    write_file(&dir.join(format!("errors{suffix}.csv")), &csv_bytes(|b| write_errors(&out.errors, b))?)?;
    write_file(&dir.join(format!("table{suffix}.csv")), &csv_bytes(|b| out.table.write_csv(b))?)?;
    write_file(&dir.join(format!("table{suffix}.md")), out.table.to_markdown().as_bytes())?;
    Ok(cases)
}

fn check_not_failed(out: &PlanOutput, errors_file: &str) -> CliResult<()> {
    if out.all_failed() {
        let first = out.errors.first().map(|e| e.message.as_str()).unwrap_or("no cells");
        return Err(Failure::total(format!("every experiment cell failed; first error: {first}")));
    }
    if !out.errors.is_empty() {
        eprintln!("warning: {} strategy/cell failures recorded in {errors_file}", out.errors.len());
    }
    Ok(())
}

struct RunArgs {
    experiment: Experiment,
    workers: usize,
    seed_override: Option<u64>,
    nsd_tau: Option<f64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    generate: bool,
}

fn run(config: &Path, args: RunArgs) -> CliResult<()> {
    let mut cfg = ConfigFile::load(config)?;
    if let Some(seed) = args.seed_override {
        cfg.plan.seeds = vec![seed];
        cfg.dp.seeds = vec![seed];
    }
    if let Some(tau) = args.nsd_tau {
        cfg.plan.nsd_tau = tau;
    }
    cfg.validate()?;
    let canonical = cfg.to_toml();
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.output.data_dir.clone());
    let results = args.out.clone().unwrap_or_else(|| cfg.output.results_dir.clone());
    let datasets = if args.generate { generate(&cfg, &data_dir, false)? } else { load_datasets(&cfg, &data_dir)? };
    io_at(&results, fs::create_dir_all(&results))?;

    let mut plan = cfg.plan()?;
    plan.workers = args.workers;
    let mut meta = vec![
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("experiment".to_string(), args.experiment.name().to_string()),
        ("config_sha256".to_string(), sha256_hex(canonical.as_bytes())),
        ("seeds".to_string(), join(&plan.seeds)),
        ("nsd_tau".to_string(), plan.nsd_tau.to_string()),
    ];
    if let Some(grid) = &cfg.plan.grid {
        if args.experiment != Experiment::Privacy {
            let g = grid_search(&plan, &datasets, grid)?;
            let mut s = String::from("learning_rate,batch_size,dropout,local_steps,k_steps,score\n");
            for (h, score) in &g.scores {
                let score = score.map(|v| format!("{v:.6}")).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{},{score}\n",
                    h.learning_rate, h.batch_size, h.dropout, h.local_steps, h.k_steps
                ));
            }
            write_file(&results.join("grid.csv"), s.as_bytes())?;
            info!("grid search chose {:?}", g.chosen);
            plan.hyper = g.chosen;
            meta.push(("chosen_hyper".into(), format!("{:?}", g.chosen)));
        }
    }

    let summary = match args.experiment {
        Experiment::Accuracy | Experiment::Cost | Experiment::Utility => {
            let out = run_plan(&plan, &datasets)?;
            let cases = write_plan_output(&results, &out, "")?;
            add_case_meta(&mut meta, &out, &cases);
            check_not_failed(&out, "errors.csv")?;
            match args.experiment {
                Experiment::Cost => {
                    let report = cost_report(&out.cost);
                    write_file(&results.join("cost.csv"), &csv_bytes(|b| report.write_csv(b))?)?;
                    let mut s = format!(
                        "{:<14} {:>10} {:>14} {:>14}\n",
                        "strategy", "train [s]", "infer [s/case]", "bandwidth [MB]"
                    );
                    for r in &report.rows {
                        s.push_str(&format!(
                            "{:<14} {:>10.2} {:>14.4} {:>14.2}\n",
                            r.strategy,
                            r.train_seconds,
                            r.infer_seconds_per_case,
                            r.bandwidth_bytes as f64 / MEBIBYTE as f64
                        ));
                    }
                    s.push_str(&format!(
                        "FL-CBM bandwidth difference: {:.3} GB over {} rounds\n",
                        report.difference_gib(),
                        report.rounds
                    ));
                    s
                }
                Experiment::Utility => {
                    write_file(&results.join("utility.csv"), &csv_bytes(|b| out.utility.write_csv(b))?)?;
                    let mut s = format!("{:<8} {:<12} {:>12} {:>14}\n", "client", "method", "delta local", "delta external");
                    for r in &out.utility.rows {
                        s.push_str(&format!(
                            "{:<8} {:<12} {:>+12.3} {:>+14.3}\n",
                            r.client, r.method, r.delta_local, r.delta_external
                        ));
                    }
                    s
                }
                _ => out.table.to_markdown(),
            }
        }
        Experiment::Robustness => {
            let excluded = cfg.plan.robustness_exclude.clone();
            let loo = leave_one_out(&plan, &datasets, &excluded)?;
            let cases = write_plan_output(&results, &loo.with, "")?;
            write_plan_output(&results, &loo.without, "_without")?;
            add_case_meta(&mut meta, &loo.with, &cases);
            meta.push(("excluded".into(), excluded.clone()));
            check_not_failed(&loo.with, "errors.csv")?;
            check_not_failed(&loo.without, "errors_without.csv")?;
            write_file(&results.join("robustness.csv"), &csv_bytes(|b| loo.deltas.write_csv(b))?)?;
            let mut s = format!("average |DSC delta| after removing {excluded}:\n");
            for k in &loo.deltas.strategies {
                s.push_str(&format!("{k:<12} {:.4}\n", loo.deltas.average(k).unwrap_or(f64::NAN)));
            }
            s
        }
        Experiment::Privacy => {
            let privacy = PrivacyPlan {
                dp: cfg.dp.dp_config(),
                learning_rate: cfg.dp.learning_rate,
                batch_size: cfg.dp.batch_size,
                epsilons: cfg.dp.epsilons.clone(),
                seeds: if cfg.dp.seeds.is_empty() { plan.seeds.clone() } else { cfg.dp.seeds.clone() },
            };
            if let Some(m) = meta.iter_mut().find(|(k, _)| k == "seeds") {
                m.1 = join(&privacy.seeds);
            }
            let points = privacy_sweep(&plan, &datasets, &privacy)?;
            let bytes = csv_bytes(|b| write_sweep_csv(&points, b))?;
            write_file(&results.join("privacy.csv"), &bytes)?;
            let mut s = format!("{:<10} {:>5} {:>8} {:>8} {:>8}\n", "method", "seed", "epsilon", "steps", "dsc");
            for p in &points {
                s.push_str(&format!(
                    "{:<10} {:>5} {:>8.2} {:>8} {:>8.4}\n",
                    p.method.name(),
                    p.seed,
                    p.epsilon,
                    p.steps,
                    p.mean_dsc
                ));
            }
            s
        }
    };
    let mut text = String::new();
    for (k, v) in &meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_file(&results.join(RUN_META), text.as_bytes())?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(summary.as_bytes())?;
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn add_case_meta(meta: &mut Vec<(String, String)>, out: &PlanOutput, cases: &[u8]) {
    meta.push(("strategies".into(), out.strategies.join(",")));
    meta.push(("test_sets".into(), out.test_sets.join(",")));
    meta.push(("cases_file".into(), CASES.into()));
    meta.push(("cases_sha256".into(), sha256_hex(cases)));
    meta.push(("cases_bytes".into(), cases.len().to_string()));
}

fn read_meta(dir: &Path) -> CliResult<Vec<(String, String)>> {
    let path = dir.join(RUN_META);
    let text = fs::read_to_string(&path)
        .map_err(|_| Failure::usage(format!("{} has no {RUN_META}; not a results directory", dir.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn export(dir: &Path, format: Format, out: Option<&Path>) -> CliResult<()> {
    let meta = read_meta(dir)?;
    let get = |k: &str| meta.iter().find(|(m, _)| m == k).map(|(_, v)| v.clone());
    let (Some(file), Some(sha), Some(len)) = (get("cases_file"), get("cases_sha256"), get("cases_bytes")) else {
        return Err(Failure::usage(format!("{} holds no per-case records", dir.display())));
    };
    let path = dir.join(&file);
    let bytes = fs::read(&path).map_err(|_| Failure::usage(format!("missing per-case records {}", path.display())))?;
    if bytes.len().to_string() != len || sha256_hex(&bytes) != sha {
        return Err(Failure::usage(format!(
            "{}: checksum error, the record file does not match {RUN_META} (truncated or modified)",
            path.display()
        )));
    }
    let records = read_case_records(&bytes)?;
    if records.is_empty() {
        return Err(Failure::usage(format!("{} contains no per-case records", path.display())));
    }
    let split = |v: Option<String>| -> Vec<String> {
        v.map(|s| s.split(',').filter(|x| !x.is_empty()).map(String::from).collect()).unwrap_or_default()
    };
    let table = ResultsTable::from_records(&records, &split(get("test_sets")), &split(get("strategies")));
    let rendered = match format {
        Format::Csv => csv_bytes(|b| table.write_csv(b))?,
        Format::Markdown => table.to_markdown().into_bytes(),
    };
    match out {
        Some(p) => write_file(p, &rendered),
        None => Ok(std::io::stdout().lock().write_all(&rendered)?),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out, pgm } => {
            let cfg = ConfigFile::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.data_dir.clone());
            let datasets = generate(&cfg, &dir, pgm)?;
            for ds in &datasets {
                println!("{:<6} train {:>3}  test {:>3}", ds.center_id, ds.train.len(), ds.test.len());
            }
            println!("wrote {} centers to {}", datasets.len(), dir.display());
            Ok(())
        }
        Command::Run { config, experiment, workers, seed_override, nsd_tau, out, data, generate } => run(
            &config,
            RunArgs { experiment, workers, seed_override, nsd_tau, out, data, generate },
        ),
        Command::Export { results, format, out } => export(&results, format, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
