//! Command-line entry points. Each `cmd_*` returns a process exit code.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::datagen::{generate, load_covariates_csv, semisynthetic_outcomes, write_dataset_csv, GenSpec, Generator, TreatmentMode};
use crate::error::{Error, Result};
use crate::harness::{run_trials, write_aggregate_csv, write_timings_csv, write_trial_csv, TrialSet, AGGREGATE_COLUMNS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

pub const OUT_ENV: &str = "ACTIVECQ_OUT";
pub const DEFAULT_OUT: &str = "activecq_out";

#[derive(Debug, Parser)]
#[command(name = "activecq", version, about = "Active estimation of causal quantities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV plus a metadata sidecar.
    Datagen(DatagenArgs),
    /// Run an experiment described by a JSON config.
    Run(RunArgs),
    /// Merge aggregate CSVs into one wide table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// visualization, simulation, shift_target or semi_synthetic.
    #[arg(long = "gen")]
    pub generator: String,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// binary, discrete or continuous (generator-dependent default).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Covariate CSV for semi_synthetic.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Output CSV path; the sidecar goes next to it as `<stem>.meta.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Trials run concurrently per strategy (default: available cores).
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Datagen(args) => cmd_datagen(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn fail(context: &str, err: &Error) -> i32 {
    eprintln!("error: {context}: {err}");
    exit_code(err)
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn cmd_datagen(args: &DatagenArgs) -> i32 {
    let generator: Generator = match args.generator.parse() {
        Ok(g) => g,
        Err(e) => return fail("--gen", &e),
    };
    let mode = match &args.mode {
        Some(m) => match m.parse::<TreatmentMode>() {
            Ok(m) => m,
            Err(e) => return fail("--mode", &e),
        },
        None if generator == Generator::Visualization => TreatmentMode::Continuous,
        None => TreatmentMode::Binary,
    };
    let mut spec = GenSpec::new(generator, args.n, mode, args.seed);
    if let Some(sd) = args.noise_sd {
        spec.noise_sd = sd;
    }
    let data = if generator == Generator::SemiSynthetic {
        let Some(path) = &args.covariates else {
            eprintln!("error: semi_synthetic needs --covariates");
            return EXIT_USAGE;
        };
        load_covariates_csv(path).and_then(|cov| semisynthetic_outcomes(&cov, mode, args.seed, spec.noise_sd))
    } else {
        generate(&spec)
    };
    let data = match data {
        Ok(d) => d,
        Err(e) => return fail("generation failed", &e),
    };
    let out = args.out.clone().unwrap_or_else(|| {
        default_out_dir().join(format!("{}_n{}_seed{}.csv", generator, data.len(), args.seed))
    });
    let written = write_atomic(&out, |w| write_dataset_csv(&data, w)).and_then(|_| {
        write_atomic(&sidecar_path(&out), |w| {
            serde_json::to_writer_pretty(&mut *w, &data.meta)?;
            writeln!(w)?;
            Ok(())
        })
    });
    match written {
        Ok(()) => {
            eprintln!("wrote {} rows to {}", data.len(), out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: writing {}: {e}", out.display());
            EXIT_IO
        }
    }
}

fn resolve_out_dir(args: &RunArgs, config: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(default_out_dir)
}

fn dir_has_entries(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write_run_outputs(dir: &Path, config: &RunConfig, sets: &[TrialSet]) -> Result<()> {
    write_atomic(&dir.join("effective_config.json"), |w| {
        w.write_all(config.to_json_pretty()?.as_bytes())?;
        writeln!(w)?;
        Ok(())
    })?;
    for set in sets {
        for trial in &set.trials {
            let name = format!("{}_seed{}.csv", set.config.strategy, trial.seed);
            write_atomic(&dir.join("trials").join(name), |w| write_trial_csv(&set.config, trial, w))?;
        }
    }
    let tables: Vec<_> = sets.iter().map(|s| &s.table).collect();
    write_atomic(&dir.join("aggregate.csv"), |w| write_aggregate_csv(&tables, w))?;
    let refs: Vec<_> = sets.iter().collect();
    write_atomic(&dir.join("timings.csv"), |w| write_timings_csv(&refs, w))
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    let mut config = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(&format!("config {}", args.config.display()), &e),
    };
    let parallel = args
        .parallel
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if parallel == 0 {
        eprintln!("error: --parallel must be at least 1");
        return EXIT_USAGE;
    }
    let dir = resolve_out_dir(args, &config);
    if dir_has_entries(&dir) && !args.force {
        eprintln!("error: output directory {} is not empty (use --force to overwrite)", dir.display());
        return EXIT_USAGE;
    }
    config.out = Some(dir.clone());
    let mut sets = Vec::new();
    for trial_config in config.trial_configs() {
        log::info!("running {} over {} seeds", trial_config.strategy, trial_config.seeds.len());
        match run_trials(&trial_config, parallel) {
            Ok(set) => sets.push(set),
            Err(e) => return fail(&format!("strategy {}", trial_config.strategy), &e),
        }
    }
    if let Err(e) = write_run_outputs(&dir, &config, &sets) {
        eprintln!("error: writing results to {}: {e}", dir.display());
        return EXIT_IO;
    }
    let aborted: usize = sets.iter().map(TrialSet::aborted).sum();
    let total: usize = sets.iter().map(|s| s.trials.len()).sum();
    for set in &sets {
        if let Some(last) = set.table.rows.last() {
            eprintln!(
                "{:<16} final sqrt_amse {:.4} ± {:.4} ({} trials)",
                last.strategy, last.mean_sqrt_amse, last.se_sqrt_amse, last.n_trials
            );
        }
    }
    if aborted > 0 {
        eprintln!("warning: {aborted} of {total} trials aborted; results in {}", dir.display());
        EXIT_PARTIAL
    } else {
        eprintln!("results in {}", dir.display());
        EXIT_OK
    }
}

struct StrategyColumn {
    name: String,
    /// (round, labeled, mean_sqrt_amse)
    rows: Vec<(usize, usize, String)>,
}

fn read_aggregate(path: &Path, columns: &mut Vec<StrategyColumn>) -> Result<()> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))),
        _ => Error::Csv(e),
    })?;
    let headers = reader.headers()?.clone();
    let mut index = Vec::new();
    for name in &AGGREGATE_COLUMNS[..6] {
        let i = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::schema(*name, format!("column missing from {}", path.display())))?;
        index.push(i);
    }
    let first_new = columns.len();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |k: usize| record.get(index[k]).unwrap_or("").to_string();
        let parse = |k: usize| -> Result<usize> {
            field(k).parse().map_err(|_| Error::Parse {
                row: line + 2,
                column: AGGREGATE_COLUMNS[k].to_string(),
                message: format!("`{}` is not a count", field(k)),
            })
        };
        let strategy = field(0);
        let (round, labeled) = (parse(1)?, parse(2)?);
        let col = match columns.iter().position(|c| c.name == strategy) {
            Some(i) if i < first_new => {
                return Err(Error::InvalidArgument(format!(
                    "strategy `{strategy}` appears in more than one input"
                )))
            }
            Some(i) => &mut columns[i],
            None => {
                columns.push(StrategyColumn {
                    name: strategy.clone(),
                    rows: Vec::new(),
                });
                columns.last_mut().unwrap()
            }
        };
        if col.rows.iter().any(|r| r.0 == round) {
            return Err(Error::InvalidArgument(format!("strategy `{strategy}` repeats round {round}")));
        }
        col.rows.push((round, labeled, field(3)));
    }
    Ok(())
}

/// Merges aggregate CSVs into `round,labeled,<strategy>...` text.
pub fn merge_aggregates(inputs: &[PathBuf]) -> Result<String> {
    let mut columns = Vec::new();
    for path in inputs {
        read_aggregate(path, &mut columns)?;
    }
    let Some(reference) = columns.first() else {
        return Err(Error::InvalidArgument("inputs contain no rows".into()));
    };
    let mut grid = reference.rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>();
    grid.sort_unstable();
    for col in &columns[1..] {
        let mut other = col.rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>();
        other.sort_unstable();
        if other != grid {
            let rounds: BTreeSet<usize> = grid.iter().chain(&other).map(|r| r.0).collect();
            let divergent = rounds
                .into_iter()
                .find(|r| grid.iter().find(|g| g.0 == *r) != other.iter().find(|g| g.0 == *r))
                .unwrap_or(0);
            return Err(Error::InvalidArgument(format!(
                "round grids differ between `{}` and `{}` at round {divergent}",
                reference.name, col.name
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string(), "labeled".to_string()];
    header.extend(columns.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for (round, labeled) in grid {
        let mut rec = vec![round.to_string(), labeled.to_string()];
        for c in &columns {
            rec.push(c.rows.iter().find(|r| r.0 == round).map(|r| r.2.clone()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn cmd_report(args: &ReportArgs) -> i32 {
    let table = match merge_aggregates(&args.inputs) {
        Ok(t) => t,
        Err(e) => return fail("report", &e),
    };
    print!("{table}");
    if let Some(out) = &args.out {
        if let Err(e) = write_atomic(out, |w| Ok(w.write_all(table.as_bytes())?)) {
            eprintln!("error: writing {}: {e}", out.display());
            return EXIT_IO;
        }
    }
    EXIT_OK
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aggregate_file(dir: &Path, name: &str, strategy: &str, rounds: &[usize]) -> PathBuf {
        let path = dir.join(name);
        let mut text = AGGREGATE_COLUMNS.join(",") + "\n";
        for r in rounds {
            text += &format!("{strategy},{r},{},0.{r},0,1,0\n", 10 + 5 * r);
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn report_identity_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let a = aggregate_file(dir.path(), "a.csv", "random", &[0, 1, 2]);
        let b = aggregate_file(dir.path(), "b.csv", "tvr_cme", &[0, 1, 2]);
        let one = merge_aggregates(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one, "round,labeled,random\n0,10,0.0\n1,15,0.1\n2,20,0.2\n");
        let two = merge_aggregates(&[a, b]).unwrap();
        assert_eq!(two.lines().next().unwrap(), "round,labeled,random,tvr_cme");
        assert_eq!(two.lines().nth(2).unwrap(), "1,15,0.1,0.1");
    }

    #[test]
    fn report_rejects_divergent_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let a = aggregate_file(dir.path(), "a.csv", "random", &[0, 1, 2]);
        let b = aggregate_file(dir.path(), "b.csv", "tvr_cme", &[0, 1, 3]);
        let err = merge_aggregates(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("round 2"), "{err}");
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn report_rejects_missing_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "strategy,round,labeled\nrandom,0,10\n").unwrap();
        let err = merge_aggregates(&[p]).unwrap_err();
        assert!(matches!(&err, Error::Schema { key, .. } if key == "mean_sqrt_amse"));
        let missing = merge_aggregates(&[dir.path().join("none.csv")]).unwrap_err();
        assert_eq!(exit_code(&missing), EXIT_IO);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        write_atomic(&p, |w| Ok(w.write_all(b"hello")?)).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
        assert!(write_atomic(&p, |_| Err(Error::ZeroCount)).is_err());
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/data.csv")), PathBuf::from("out/data.meta.json"));
    }
}
