use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cowrite::config::Config;
use cowrite::ids::DocId;
use serde::Serialize;
use serde_json::{json, Value};

use simcli::acceptance;
use simcli::admin::{self, AdminError, Target};
use simcli::exec::Exec;
use simcli::runner::{self, RunOptions};
use simcli::suites;

/// Scenario runner, test suites and admin tool for cowrite documents.
#[derive(Parser, Debug)]
#[command(name = "simcli", version)]
struct Cli {
    /// Talk to a running server at this base URL.
    #[arg(long, global = true, conflicts_with = "in_process")]
    server: Option<String>,
    /// Work on a data directory directly (the default).
    #[arg(long, global = true)]
    in_process: bool,
    #[arg(long, global = true, default_value = "./data")]
    data_dir: PathBuf,
    /// Mock model script (TOML) used in-process.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Config file (TOML) used in-process.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write the JSON result here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Admin token for document creation on a server.
    #[arg(long, global = true, env = "ADMIN_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run scenario files; exits 1 if any assertion fails.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Skip the reload and replay comparison.
        #[arg(long)]
        no_roundtrip: bool,
    },
    /// Run a generated test suite.
    Suite {
        #[arg(value_enum)]
        name: SuiteName,
        /// Single-threaded execution.
        #[arg(long)]
        sequential: bool,
    },
    /// Run every acceptance criterion.
    Acceptance {
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    CreateDoc {
        #[arg(long)]
        goal: Option<String>,
    },
    ListDocs,
    DumpDoc {
        doc: String,
    },
    /// Rebuild a document from a log file or document directory.
    ReplayLog {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteName {
    Convergence,
    Anchors,
    Contracts,
    All,
}

enum Failure {
    Usage(String),
    Admin(AdminError),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Admin(e) => e.exit_code() as u8,
            Failure::Other(_) => 1,
        }
    }
}

impl From<AdminError> for Failure {
    fn from(e: AdminError) -> Self {
        Failure::Admin(e)
    }
}

fn emit(value: &impl Serialize, report: Option<&PathBuf>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    if let Some(path) = report {
        std::fs::write(path, &text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
    }
    println!("{text}");
    Ok(())
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    match &cli.config {
        Some(p) => Config::load(p).map_err(Failure::Usage),
        None => Ok(Config::default()),
    }
}

fn target(cli: &Cli) -> Result<Target, Failure> {
    Ok(match &cli.server {
        Some(url) => Target::Server { url: url.trim_end_matches('/').to_owned(), token: cli.token.clone() },
        None => Target::InProcess {
            data_dir: cli.data_dir.clone(),
            mock_script: cli.mock_script.clone(),
            seed: cli.seed.unwrap_or(0),
            config: load_config(cli)?,
        },
    })
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let report = cli.report.as_ref();
    match &cli.command {
        Cmd::Run { scenarios, no_roundtrip } => {
            if cli.server.is_some() {
                return Err(Failure::Usage("scenarios run in-process only".into()));
            }
            let extra_mock = match &cli.mock_script {
                Some(p) => Some(cowrite::gateway::MockScript::load(p).map_err(|e| Failure::Usage(e.to_string()))?),
                None => None,
            };
            let options = RunOptions { seed: cli.seed, extra_mock, skip_roundtrip: *no_roundtrip };
            let mut reports = Vec::new();
            for path in scenarios {
                let r = runner::run_file(path, &options).map_err(|e| Failure::Usage(e.to_string()))?;
                for f in r.failures() {
                    eprintln!("{}:{} {}: {}", path.display(), f.line, f.check, f.detail.as_deref().unwrap_or(""));
                }
                if let Some(rt) = r.roundtrip.as_ref().filter(|rt| !rt.ok()) {
                    eprintln!("{}: reload/replay mismatch {rt:?}", path.display());
                }
                reports.push(r);
            }
            let passed = reports.iter().all(|r| r.passed);
            if reports.len() == 1 {
                emit(&reports[0], report)?;
            } else {
                emit(&reports, report)?;
            }
            Ok(passed)
        }
        Cmd::Suite { name, sequential } => {
            let exec = exec(*sequential);
            let mut out = serde_json::Map::new();
            let mut passed = true;
            if matches!(name, SuiteName::Convergence | SuiteName::All) {
                let r = suites::convergence(Default::default(), exec);
                passed &= r.identical;
                out.insert("convergence".into(), json!(r));
            }
            if matches!(name, SuiteName::Anchors | SuiteName::All) {
                let r = suites::anchors(Default::default(), exec);
                passed &= r.mismatches.is_empty();
                out.insert("anchors".into(), json!(r));
            }
            if matches!(name, SuiteName::Contracts | SuiteName::All) {
                let r = suites::contracts(Default::default(), exec);
                passed &= r.titles.all_pass() && r.suggestions.all_pass() && r.summaries.all_pass();
                out.insert("contracts".into(), json!(r));
            }
            emit(&Value::Object(out), report)?;
            Ok(passed)
        }
        Cmd::Acceptance { fixtures, sequential } => {
            let dir = fixtures.clone().unwrap_or_else(acceptance::default_fixtures);
            let results = acceptance::run_all(&dir, exec(*sequential));
            for c in &results {
                eprintln!("{}", c.line());
            }
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&results).map_err(|e| Failure::Other(e.to_string()))?;
                std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
            }
            Ok(results.iter().all(|c| c.pass))
        }
        Cmd::CreateDoc { goal } => {
            emit(&admin::create_doc(&target(cli)?, goal.clone())?, report)?;
            Ok(true)
        }
        Cmd::ListDocs => {
            emit(&admin::list_docs(&target(cli)?)?, report)?;
            Ok(true)
        }
        Cmd::DumpDoc { doc } => {
            emit(&admin::dump_doc(&target(cli)?, &DocId::new(doc.clone()))?, report)?;
            Ok(true)
        }
        Cmd::ReplayLog { path } => {
            emit(&admin::replay_log(path, load_config(cli)?)?, report)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            match &f {
                Failure::Usage(m) | Failure::Other(m) => eprintln!("error: {m}"),
                Failure::Admin(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
