use std::fmt::Display;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use edgeai::config::RunConfig;
use edgeai::Error;
use serde::{Deserialize, Serialize};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Precondition(String),
    Numerical(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Precondition(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Precondition(m) => write!(f, "missing precondition: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) | Error::InfeasibleBudget(_) | Error::BudgetViolation { .. } => {
                Failure::Config(e.to_string())
            }
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Sidecar written next to every artifact.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub command: String,
    pub kind: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    command: String,
    force: bool,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl RunDir {
    pub fn create(out: &Path, cfg: &RunConfig, command: &str, force: bool, inputs: Vec<PathBuf>) -> Outcome<Self> {
        let hash = cfg.hash();
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut dir = out.join("runs").join(format!("{stamp}-{hash}"));
        let mut n = 1;
        while dir.exists() {
            dir = out.join("runs").join(format!("{stamp}-{hash}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), cfg.to_json()?)?;
        let run = Self { dir, hash, command: command.into(), force, inputs, started: Instant::now() };
        run.log(format!("{command} config_hash={}", run.hash));
        Ok(run)
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        let line = format!("[{:8.2}s] {}\n", self.started.elapsed().as_secs_f64(), msg.as_ref());
        eprint!("{line}");
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.dir.join("log.txt")) {
            let _ = f.write_all(line.as_bytes());
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record that `path` (already written) was produced by this run.
    pub fn stamp(&self, path: &Path, kind: &str) -> Outcome {
        let meta = ArtifactMeta { config_hash: self.hash.clone(), command: self.command.clone(), kind: kind.into() };
        fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
        self.log(format!("wrote {}", path.display()));
        Ok(())
    }

    pub fn write_text(&self, name: &str, kind: &str, text: &str) -> Outcome<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        self.stamp(&p, kind)?;
        Ok(p)
    }

    /// Locate `name` in the `--from` directories (first match wins) and
    /// check it came from a run with the same config hash.
    pub fn input(&self, name: &str) -> Outcome<PathBuf> {
        let found = self.inputs.iter().map(|d| d.join(name)).find(|p| p.exists()).ok_or_else(|| {
            Failure::Precondition(format!("{name} not found in any --from directory ({})", self.inputs.len()))
        })?;
        self.check(&found)?;
        Ok(found)
    }

    pub fn check(&self, path: &Path) -> Outcome {
        let mp = meta_path(path);
        let meta: ArtifactMeta = match fs::read_to_string(&mp) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| Failure::Precondition(format!("{}: {e}", mp.display())))?,
            Err(_) if self.force => {
                self.log(format!("warning: {} has no provenance; continuing (--force)", path.display()));
                return Ok(());
            }
            Err(_) => return Err(Failure::Precondition(format!("{} has no provenance file {}", path.display(), mp.display()))),
        };
        if meta.config_hash != self.hash {
            if !self.force {
                return Err(Failure::Precondition(format!(
                    "{} was produced with config {} but this run uses {}; pass --force to mix them",
                    path.display(),
                    meta.config_hash,
                    self.hash
                )));
            }
            self.log(format!("warning: mixing {} from config {} (--force)", path.display(), meta.config_hash));
        }
        Ok(())
    }
}
