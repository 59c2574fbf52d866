//! Run directory layout, configuration loading and stage manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use cslab_core::pipeline::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, Context};

/// Artifact directories, relative to the run directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: "corpus".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses a TOML run config. `[paths]` holds the directories and every
    /// other key belongs to the experiment; unknown keys are errors.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::invalid(format!("config: {e}")))?;
        let paths = match table.remove("paths") {
            Some(v) => v.try_into().map_err(|e| CliError::invalid(format!("config [paths]: {e}")))?,
            None => Paths::default(),
        };
        let experiment = toml::Value::Table(table).try_into().map_err(|e| CliError::invalid(format!("config: {e}")))?;
        Ok(Self { paths, experiment })
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::Missing(p.to_path_buf()));
                }
                Self::from_toml(&fs::read_to_string(p).at(p)?)?
            }
            None => Self { paths: Paths::default(), experiment: ExperimentConfig::default() },
        };
        if let Some(s) = seed {
            cfg.experiment.seed = s;
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub struct Run {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub quiet: bool,
}

impl Run {
    pub fn new(root: PathBuf, cfg: RunConfig, quiet: bool) -> Self {
        Self { root, cfg, quiet }
    }

    pub fn exp(&self) -> &ExperimentConfig {
        &self.cfg.experiment
    }

    fn under(&self, dir: &Path, name: &str) -> PathBuf {
        self.root.join(dir).join(name)
    }

    pub fn corpus(&self, name: &str) -> PathBuf {
        self.under(&self.cfg.paths.corpus, name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints, name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.under(&self.cfg.paths.reports, name)
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    /// Path as recorded in manifests: relative to the run directory where
    /// possible, with `/` separators.
    fn key(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    /// Output digests recorded by earlier stages.
    fn produced(&self) -> CliResult<BTreeMap<String, (String, String)>> {
        let mut out = BTreeMap::new();
        let dir = self.manifest_dir();
        if !dir.is_dir() {
            return Ok(out);
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir).at(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(&p).at(&p)?).at(&p)?;
            for (k, d) in m.outputs {
                out.insert(k, (d, m.command.clone()));
            }
        }
        Ok(out)
    }

    pub fn stage(&self, command: &str) -> CliResult<Stage<'_>> {
        Ok(Stage {
            run: self,
            command: command.to_string(),
            produced: self.produced()?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }
}

/// Records the inputs and outputs of one subcommand and writes its manifest.
pub struct Stage<'a> {
    run: &'a Run,
    command: String,
    produced: BTreeMap<String, (String, String)>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Stage<'_> {
    /// Checks that `path` exists and matches the digest its producing stage
    /// recorded, then returns it.
    pub fn input(&mut self, path: PathBuf) -> CliResult<PathBuf> {
        if !path.is_file() {
            return Err(CliError::Missing(path));
        }
        let digest = digest_file(&path)?;
        let key = self.run.key(&path);
        if let Some((expected, by)) = self.produced.get(&key) {
            if *expected != digest {
                return Err(CliError::invalid(format!(
                    "digest mismatch for {}: {by} recorded {expected}, found {digest}",
                    path.display()
                )));
            }
        }
        self.inputs.insert(key, digest);
        Ok(path)
    }

    /// Creates `path` (and its directory) for writing.
    pub fn create(&mut self, path: PathBuf) -> CliResult<BufWriter<File>> {
        let path = self.output(path)?;
        Ok(BufWriter::new(File::create(&path).at(&path)?))
    }

    /// Registers `path` as an output to be written by the caller.
    pub fn output(&mut self, path: PathBuf) -> CliResult<PathBuf> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn finish(self, name: &str) -> CliResult<Manifest> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(self.run.key(p), digest_file(p)?);
        }
        let manifest = Manifest {
            command: self.command,
            config_hash: self.run.cfg.hash(),
            seed: self.run.exp().seed,
            inputs: self.inputs,
            outputs,
        };
        let dir = self.run.manifest_dir();
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
        Ok(manifest)
    }
}
