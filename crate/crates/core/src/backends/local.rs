//! Local-process backend.
//!
//! Runs the setup command and then the run command through `sh -c` inside a
//! working directory. Both commands share one log file capturing stdout and
//! stderr. Files left under `<workdir>/outputs` become the outcome's
//! `output_refs`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use walkdir::WalkDir;

use super::{ExecutionOutcome, ExitStatus};
use crate::workflow::ExecutablePlan;

pub const OUTPUT_DIR: &str = "outputs";
pub const LOG_FILE: &str = "job.log";

/// Callback fired between the setup and run commands.
pub type PhaseHook = Arc<dyn Fn() + Send + Sync>;

#[derive(Clone)]
pub struct LocalOptions {
    pub timeout: Duration,
    pub env: BTreeMap<String, String>,
    /// Written to `<workdir>/hostfile` and exported as `STRATUS_HOSTFILE`.
    pub hostfile: Option<String>,
    pub cancel: Option<Arc<AtomicBool>>,
    /// Invoked once setup has succeeded (or immediately when there is none),
    /// just before the run command starts.
    pub on_setup_done: Option<PhaseHook>,
}

impl fmt::Debug for LocalOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalOptions")
            .field("timeout", &self.timeout)
            .field("env", &self.env)
            .field("hostfile", &self.hostfile)
            .field("cancel", &self.cancel)
            .field("on_setup_done", &self.on_setup_done.is_some())
            .finish()
    }
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            timeout: Duration::from_secs(3600),
            env: BTreeMap::new(),
            hostfile: None,
            cancel: None,
            on_setup_done: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("setup command failed with status {code:?}")]
    SetupFailed {
        code: Option<i32>,
        log: String,
        wall_time_hours: f64,
    },
    #[error("run command failed with status {code:?}")]
    RunFailed {
        code: Option<i32>,
        log: String,
        wall_time_hours: f64,
    },
    #[error("command exceeded the {0:?} timeout")]
    Timeout(Duration, String),
    #[error("execution cancelled")]
    Cancelled(String),
    #[error("empty command")]
    EmptyCommand,
    #[error("local backend i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl LocalError {
    pub fn log(&self) -> &str {
        match self {
            LocalError::SetupFailed { log, .. }
            | LocalError::RunFailed { log, .. }
            | LocalError::Timeout(_, log)
            | LocalError::Cancelled(log) => log,
            LocalError::EmptyCommand | LocalError::Io(_) => "",
        }
    }
}

enum Finished {
    Exited(Option<i32>),
    TimedOut,
    Cancelled,
}

fn run_shell(
    command: &str,
    workdir: &Path,
    log: &File,
    opts: &LocalOptions,
    env: &BTreeMap<String, String>,
    deadline: Instant,
) -> Result<Finished, LocalError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(workdir)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log.try_clone()?)
        .spawn()?;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Finished::Exited(status.code()));
        }
        if opts
            .cancel
            .as_ref()
            .is_some_and(|c| c.load(Ordering::SeqCst))
        {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(Finished::Cancelled);
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(Finished::TimedOut);
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Runs `plan` in `workdir`, which is created if missing.
pub fn local_execute(
    plan: &ExecutablePlan,
    workdir: &Path,
    opts: &LocalOptions,
) -> Result<ExecutionOutcome, LocalError> {
    if plan.run.trim().is_empty() || plan.setup.as_deref().is_some_and(|s| s.trim().is_empty()) {
        return Err(LocalError::EmptyCommand);
    }
    fs::create_dir_all(workdir.join(OUTPUT_DIR))?;
    let log_path = workdir.join(LOG_FILE);
    let log = OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(&log_path)?;

    let mut env = opts.env.clone();
    let output_dir: PathBuf = fs::canonicalize(workdir.join(OUTPUT_DIR))?;
    env.insert(
        "STRATUS_OUTPUT_DIR".into(),
        output_dir.display().to_string(),
    );
    if let Some(hosts) = &opts.hostfile {
        let path = workdir.join("hostfile");
        fs::write(&path, hosts)?;
        env.insert(
            "STRATUS_HOSTFILE".into(),
            fs::canonicalize(path)?.display().to_string(),
        );
    }

    let start = Instant::now();
    let deadline = start + opts.timeout;
    let elapsed_hours = || start.elapsed().as_secs_f64() / 3600.0;
    let read_log = || fs::read_to_string(&log_path).unwrap_or_default();

    let steps = plan
        .setup
        .iter()
        .map(|s| (true, s.as_str()))
        .chain(std::iter::once((false, plan.run.as_str())));
    for (is_setup, command) in steps {
        if !is_setup {
            if let Some(hook) = &opts.on_setup_done {
                hook();
            }
        }
        match run_shell(command, workdir, &log, opts, &env, deadline)? {
            Finished::Exited(Some(0)) => {}
            Finished::Exited(code) => {
                let (log, wall_time_hours) = (read_log(), elapsed_hours());
                return Err(if is_setup {
                    LocalError::SetupFailed {
                        code,
                        log,
                        wall_time_hours,
                    }
                } else {
                    LocalError::RunFailed {
                        code,
                        log,
                        wall_time_hours,
                    }
                });
            }
            Finished::TimedOut => return Err(LocalError::Timeout(opts.timeout, read_log())),
            Finished::Cancelled => return Err(LocalError::Cancelled(read_log())),
        }
    }

    // Clamp so that a successful run always reports positive wall time.
    let wall_time_hours = elapsed_hours().max(1e-9);
    Ok(ExecutionOutcome {
        wall_time_hours,
        exit_status: ExitStatus::Success,
        log_text: read_log(),
        output_refs: collect_outputs(&output_dir),
    })
}

fn collect_outputs(dir: &Path) -> Vec<String> {
    let mut refs: Vec<String> = WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            e.path()
                .strip_prefix(dir)
                .ok()
                .map(|p| format!("{OUTPUT_DIR}/{}", p.display()))
        })
        .collect();
    refs.sort();
    refs
}
