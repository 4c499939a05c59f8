//! Shared plumbing: config resolution, data loading, output files and the
//! run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ibinn_core::checkpoint::{self, Checkpoint};
use ibinn_core::data::{self, FileFormat, Split};
use ibinn_core::train::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::GlobalArgs;

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: BTreeMap<String, String>,
    options: &'a BTreeMap<String, String>,
    inputs: &'a [InputHash],
    outputs: &'a [String],
}

/// One command invocation: resolved config, recorded inputs and the files
/// written so far.
pub struct Run {
    pub command: &'static str,
    pub config: TrainConfig,
    pub out: PathBuf,
    options: BTreeMap<String, String>,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
}

impl Run {
    /// Defaults, then the config file, then `--set` pairs, then the named
    /// flags.
    pub fn new(command: &'static str, global: &GlobalArgs) -> Result<Self> {
        let mut run = Run {
            command,
            config: TrainConfig::default(),
            out: global.out.clone(),
            options: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        if let Some(path) = &global.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            run.hash_input(path)?;
            run.config.apply_kv(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for pair in &global.set {
            let (k, v) = pair.split_once('=').with_context(|| format!("--set expects key=value, got `{pair}`"))?;
            run.config.set(k.trim(), v)?;
        }
        if let Some(seed) = global.seed {
            run.config.set("seed", &seed.to_string())?;
        }
        if let Some(g) = global.gamma {
            run.config.gamma = g;
        }
        if let Some(s) = global.sigma {
            run.config.sigma = s;
        }
        run.config.validate()?;
        fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
        Ok(run)
    }

    pub fn option(&mut self, key: &str, value: impl ToString) {
        self.options.insert(key.to_string(), value.to_string());
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputHash { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) });
        Ok(())
    }

    /// Generated split, or the configured train/test files.
    pub fn load_data(&mut self) -> Result<Split> {
        match (self.config.train_file.clone(), self.config.test_file.clone()) {
            (None, None) => Ok(data::make_inlier(&self.config.data)?),
            (Some(train), Some(test)) => {
                let load = |run: &mut Run, p: &str| -> Result<data::LabeledSet> {
                    let path = Path::new(p);
                    run.hash_input(path)?;
                    data::load_external(path, FileFormat::from_path(path)).with_context(|| format!("loading {p}"))
                };
                let train = load(self, &train)?;
                let test = load(self, &test)?;
                if train.dim() != test.dim() || train.classes != test.classes {
                    bail!("train and test files disagree on dimension or class count");
                }
                Ok(Split { train, test })
            }
            _ => bail!("train_file and test_file must be given together"),
        }
    }

    pub fn load_checkpoint(&mut self, path: Option<&Path>) -> Result<Checkpoint> {
        let path = path.context("this command needs --checkpoint")?;
        self.hash_input(path)?;
        Ok(checkpoint::load(path)?)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(self) -> Result<()> {
        let config = self
            .config
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            config,
            options: &self.options,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.out.join("manifest.json"), text).context("writing manifest")?;
        Ok(())
    }
}

/// Comma-separated floats.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().with_context(|| format!("bad number `{p}`")))
        .collect()
}
