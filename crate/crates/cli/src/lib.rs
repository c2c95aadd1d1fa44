//! Command-line front end: argument parsing and validation, the six
//! workflows, and report emission.
//!
//! `embeval <subcommand> [flags]`. Every TSV report starts with a
//! `# embeval ...` line recording the effective invocation and seed, and all
//! outputs of a run are written to temporary files first and renamed into
//! place only after the whole workflow succeeded.

mod args;
mod report;
mod workflows;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{
    AggregateArg, DiagnoseArgs, EvalRankingArgs, EvalRetrievalArgs, FilterNliArgs, SearchArgs, TrainHeadArgs,
    Workflow,
};
pub use workflows::execute;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_INVALID_PARAMETER: i32 = 4;

/// Worker-count default when `--workers` is absent.
pub const WORKERS_ENV: &str = "EMBEVAL_WORKERS";

/// A message and the process exit code it maps to. Code 0 carries help or
/// version text meant for stdout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// A fully validated invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Arguments after the program name, with config-file entries expanded.
    pub invocation: Vec<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: Option<usize>,
    pub workflow: Workflow,
}

impl RunConfig {
    /// First line of every TSV report.
    pub fn header(&self) -> String {
        format!("# embeval {} seed={}", self.invocation.join(" "), self.seed)
    }
}

const SUBCOMMANDS: &[&str] = &[
    "search",
    "eval-retrieval",
    "eval-ranking",
    "diagnose",
    "train-head",
    "filter-nli",
];

/// Parses `argv` (program name first) and checks that every input file
/// exists and every parameter is usable.
pub fn parse_and_validate<I, S>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = expand_config(argv)?;
    let cli = args::Cli::try_parse_from(&argv).map_err(clap_error)?;

    let workers = match cli.workers {
        Some(n) => Some(n as usize),
        None => workers_from_env()?,
    };
    validate(&cli.workflow)?;
    Ok(RunConfig {
        invocation: argv.into_iter().skip(1).collect(),
        out_dir: cli.out,
        seed: cli.seed,
        workers,
        workflow: cli.workflow,
    })
}

/// Parses, executes and reports errors; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    match parse_and_validate(argv).and_then(|config| execute(&config).map(|_| ())) {
        Ok(()) => EXIT_OK,
        Err(e) if e.code == EXIT_OK => {
            print!("{}", e.message);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.message.trim_end());
            e.code
        }
    }
}

fn clap_error(e: clap::Error) -> CliError {
    let code = match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
        ErrorKind::ValueValidation | ErrorKind::InvalidValue | ErrorKind::InvalidUtf8 => {
            EXIT_INVALID_PARAMETER
        }
        _ => EXIT_USAGE,
    };
    CliError::new(code, e.render().to_string())
}

fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::new(
                EXIT_INVALID_PARAMETER,
                format!("error: invalid value '{v}' for {WORKERS_ENV}: expected a positive integer"),
            )),
        },
    }
}

/// Splices `--config FILE` entries in right after the subcommand, so that any
/// flag given on the command line (which comes later) overrides them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_owned());
        } else if a == "--config" {
            path = argv.get(i + 1).cloned();
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let Some(sub) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let path = PathBuf::from(path);
    let extra = read_config(&path)?;
    let mut out = argv[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

fn read_config(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        let code = if path.exists() {
            EXIT_FAILURE
        } else {
            EXIT_MISSING_FILE
        };
        CliError::new(
            code,
            format!("error: cannot read --config {}: {e}", path.display()),
        )
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| {
            CliError::new(
                EXIT_INVALID_PARAMETER,
                format!(
                    "error: invalid value for --config: {}:{}: {why}",
                    path.display(),
                    i + 1
                ),
            )
        };
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let key = key.trim().trim_start_matches("--");
        let value = value.trim();
        if key.is_empty() {
            return Err(bad("empty key"));
        }
        if key == "config" {
            return Err(bad("config files cannot include other config files"));
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            _ => {
                out.push(format!("--{key}"));
                out.extend(value.split_whitespace().map(str::to_owned));
            }
        }
    }
    Ok(out)
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_MISSING_FILE,
            format!("error: input file for --{flag} not found: {}", path.display()),
        ))
    }
}

fn invalid(flag: &str, why: impl fmt::Display) -> CliError {
    CliError::new(
        EXIT_INVALID_PARAMETER,
        format!("error: invalid value for --{flag}: {why}"),
    )
}

fn validate(workflow: &Workflow) -> Result<(), CliError> {
    match workflow {
        Workflow::Search(a) => {
            require_file("queries", &a.queries)?;
            require_file("corpus", &a.corpus)?;
        }
        Workflow::EvalRetrieval(a) => {
            require_file("queries", &a.queries)?;
            require_file("corpus", &a.corpus)?;
            require_file("qrels", &a.qrels)?;
        }
        Workflow::EvalRanking(a) => {
            if a.listings.is_none() && a.compare.is_none() {
                return Err(CliError::new(
                    EXIT_USAGE,
                    "error: eval-ranking needs --queries/--docs/--listings, --compare, or both",
                ));
            }
            for (flag, p) in [
                ("queries", &a.queries),
                ("docs", &a.docs),
                ("listings", &a.listings),
            ] {
                if let Some(p) = p {
                    require_file(flag, p)?;
                }
            }
            for p in a.compare.iter().flatten() {
                require_file("compare", p)?;
            }
        }
        Workflow::Diagnose(a) => {
            require_file("queries", &a.queries)?;
            require_file("docs", &a.docs)?;
            require_file("qrels", &a.qrels)?;
            if a.label.is_empty() || a.label.contains(['\t', '\n', '\r']) {
                return Err(invalid(
                    "label",
                    "must be non-empty and free of tabs and newlines",
                ));
            }
        }
        Workflow::TrainHead(a) => {
            require_file("triplets", &a.triplets)?;
            require_file("embeddings", &a.embeddings)?;
            for p in &a.project {
                require_file("project", p)?;
            }
        }
        Workflow::FilterNli(a) => {
            require_file("scores", &a.scores)?;
            if let Some(p) = &a.triplets {
                require_file("triplets", p)?;
            }
            if matches!(a.aggregate, Some(AggregateArg::Min | AggregateArg::Mean)) && a.triplets.is_none() {
                return Err(invalid("aggregate", "min and mean need --triplets"));
            }
        }
    }
    Ok(())
}
