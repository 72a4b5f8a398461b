//! Run configuration: a `key=value` file, then the environment, then flags.

use crate::attacks::{GradScope, InversionConfig, TvScale};
use crate::data::{load_cifar_bin, load_mnist_dir, synth_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::SweepConfig;
use crate::model::Arch;
use crate::optim::OptimizerKind;
use crate::protocol::{SessionConfig, Topology};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Overrides `data_dir` when set.
pub const DATA_DIR_ENV: &str = "SPLITLAB_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportSpec {
    InProc,
    Tcp(String),
}

impl fmt::Display for TransportSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportSpec::InProc => f.write_str("inproc"),
            TransportSpec::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl FromStr for TransportSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "inproc" {
            return Ok(TransportSpec::InProc);
        }
        match s.strip_prefix("tcp:") {
            Some(addr) if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) => {
                Ok(TransportSpec::Tcp(addr.to_string()))
            }
            _ => Err(Error::Config(format!("transport '{s}' is neither inproc nor tcp:host:port"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
    Both,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Client => "client",
            Role::Server => "server",
            Role::Both => "both",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client" => Ok(Role::Client),
            "server" => Ok(Role::Server),
            "both" => Ok(Role::Both),
            other => Err(Error::Config(format!("unknown role '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `mnist`, `cifar10` or `synth`.
    pub dataset: String,
    pub data_dir: PathBuf,
    pub arch: Arch,
    pub split_depth: usize,
    pub tail_fc: usize,
    pub topology: Topology,
    pub transport: TransportSpec,
    pub role: Role,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub optimizer: OptimizerKind,
    pub max_steps: u64,
    /// Training examples used (a prefix of the training split).
    pub examples: usize,
    pub test_examples: usize,
    /// `None` picks the per-depth default.
    pub lambda: Option<f32>,
    pub tv_scale: TvScale,
    pub input_steps: usize,
    pub model_steps: usize,
    pub rounds: usize,
    pub attack_lr: f32,
    pub plateau_tol: f32,
    pub attack_images: usize,
    pub label_steps: usize,
    pub label_scope: GradScope,
    pub head_epochs: usize,
    pub depths: Vec<usize>,
    pub epoch_replay: bool,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let inv = InversionConfig::default();
        RunConfig {
            dataset: "synth".into(),
            data_dir: PathBuf::from("data"),
            arch: Arch::Tiny,
            split_depth: 1,
            tail_fc: 1,
            topology: Topology::LabelSharing,
            transport: TransportSpec::InProc,
            role: Role::Both,
            seed: 0,
            epochs: 5,
            batch_size: 64,
            lr: 0.001,
            optimizer: OptimizerKind::Adam,
            max_steps: 0,
            examples: 10_000,
            test_examples: 5_000,
            lambda: None,
            tv_scale: inv.tv_scale,
            input_steps: inv.input_steps,
            model_steps: inv.model_steps,
            rounds: inv.rounds,
            attack_lr: inv.input_lr,
            plateau_tol: inv.plateau_tol,
            attack_images: 10,
            label_steps: 200,
            label_scope: GradScope::FirstLayer,
            head_epochs: 2,
            depths: vec![1, 2, 3, 4, 5, 6],
            epoch_replay: false,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

impl RunConfig {
    /// Sets one key. `dataset` also resets `arch` to the dataset's network.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "dataset" => {
                self.arch = match v {
                    "mnist" => Arch::Mnist,
                    "cifar10" => Arch::Cifar10,
                    "synth" => Arch::Tiny,
                    other => return Err(Error::Config(format!("unknown dataset '{other}'"))),
                };
                self.dataset = v.to_string();
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "arch" => self.arch = parse(key, v)?,
            "split_depth" => self.split_depth = parse(key, v)?,
            "tail_fc" => self.tail_fc = parse(key, v)?,
            "topology" => self.topology = parse(key, v)?,
            "transport" => self.transport = v.parse()?,
            "role" => self.role = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "examples" => self.examples = parse(key, v)?,
            "test_examples" => self.test_examples = parse(key, v)?,
            "lambda" | "λ" => self.lambda = if v == "auto" { None } else { Some(parse(key, v)?) },
            "tv_scale" => self.tv_scale = v.parse()?,
            "input_steps" => self.input_steps = parse(key, v)?,
            "model_steps" => self.model_steps = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "attack_lr" => self.attack_lr = parse(key, v)?,
            "plateau_tol" => self.plateau_tol = parse(key, v)?,
            "attack_images" => self.attack_images = parse(key, v)?,
            "label_steps" => self.label_steps = parse(key, v)?,
            "label_scope" => self.label_scope = v.parse()?,
            "head_epochs" => self.head_epochs = parse(key, v)?,
            "depths" => {
                self.depths = v
                    .split(',')
                    .map(|d| parse(key, d))
                    .collect::<Result<Vec<usize>>>()?
            }
            "epoch_replay" => self.epoch_replay = parse(key, v)?,
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then the data-dir environment variable, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                cfg.data_dir = PathBuf::from(dir);
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.depths.is_empty() {
            return Err(Error::Config("depths must list at least one split depth".into()));
        }
        self.inversion(self.split_depth).validate()
    }

    /// Canonical `key=value` text of every setting, in a fixed order.
    pub fn to_text(&self) -> String {
        let depths: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        let lambda = self.lambda.map(|l| format!("{l:?}")).unwrap_or_else(|| "auto".into());
        let scope = match self.label_scope {
            GradScope::FirstLayer => "first-layer",
            GradScope::AllParams => "all-params",
        };
        let tv = match self.tv_scale {
            TvScale::PerPixel => "per-pixel",
            TvScale::Sum => "sum",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("dataset", self.dataset.clone());
        kv("data_dir", self.data_dir.display().to_string());
        kv("arch", self.arch.to_string());
        kv("split_depth", self.split_depth.to_string());
        kv("tail_fc", self.tail_fc.to_string());
        kv("topology", self.topology.to_string());
        kv("transport", self.transport.to_string());
        kv("role", self.role.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("optimizer", self.optimizer.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("examples", self.examples.to_string());
        kv("test_examples", self.test_examples.to_string());
        kv("lambda", lambda);
        kv("tv_scale", tv.into());
        kv("input_steps", self.input_steps.to_string());
        kv("model_steps", self.model_steps.to_string());
        kv("rounds", self.rounds.to_string());
        kv("attack_lr", format!("{:?}", self.attack_lr));
        kv("plateau_tol", format!("{:?}", self.plateau_tol));
        kv("attack_images", self.attack_images.to_string());
        kv("label_steps", self.label_steps.to_string());
        kv("label_scope", scope.into());
        kv("head_epochs", self.head_epochs.to_string());
        kv("depths", depths.join(","));
        kv("epoch_replay", self.epoch_replay.to_string());
        kv(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("out_dir", self.out_dir.display().to_string());
        out
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text).
    /// Paths and the transport are excluded so moving a run does not change it.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !["data_dir=", "out_dir=", "transport=", "role=", "checkpoint="].iter().any(|p| l.starts_with(p)))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn inversion(&self, depth: usize) -> InversionConfig {
        let base = InversionConfig::for_depth(depth);
        InversionConfig {
            lambda: self.lambda.unwrap_or(base.lambda),
            tv_scale: self.tv_scale,
            input_steps: self.input_steps,
            model_steps: self.model_steps,
            rounds: self.rounds,
            input_lr: self.attack_lr,
            model_lr: self.attack_lr,
            plateau_tol: self.plateau_tol,
            seed: self.seed,
            ..base
        }
    }

    /// Depth sweep settings; the TV weight follows the per-depth default unless set.
    pub fn sweep(&self, write_images: bool) -> SweepConfig {
        SweepConfig {
            dataset: self.dataset.clone(),
            arch: self.arch,
            depths: self.depths.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            attack_images: self.attack_images,
            inversion: self.inversion(1),
            lambda: self.lambda,
            label_steps: self.label_steps,
            label_scope: self.label_scope,
            head_epochs: self.head_epochs,
            epoch_replay: self.epoch_replay,
            out_dir: self.out_dir.clone(),
            write_images,
            config_hash: self.hash(),
        }
    }

    pub fn session(&self, examples: usize) -> SessionConfig {
        SessionConfig {
            arch: self.arch,
            topology: self.topology,
            split_depth: self.split_depth,
            tail_fc: self.tail_fc,
            seed: self.seed,
            optimizer: self.optimizer,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            examples,
        }
    }

    /// Training and test sets: the first `examples` / `test_examples` of each split.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset.as_str() {
            "mnist" => {
                let dir = if self.data_dir.join("mnist").is_dir() {
                    self.data_dir.join("mnist")
                } else {
                    self.data_dir.clone()
                };
                (load_mnist_dir(&dir, Split::Train)?, load_mnist_dir(&dir, Split::Test)?)
            }
            "cifar10" => {
                let dir = if self.data_dir.join("cifar-10-batches-bin").is_dir() {
                    self.data_dir.join("cifar-10-batches-bin")
                } else {
                    self.data_dir.clone()
                };
                let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let refs: Vec<&Path> = train_files.iter().map(|p| p.as_path()).collect();
                (
                    load_cifar_bin(&refs, Split::Train)?,
                    load_cifar_bin(&[&dir.join("test_batch.bin")], Split::Test)?,
                )
            }
            "synth" => {
                let all = synth_dataset(self.examples + self.test_examples, self.arch.input_shape(), self.seed);
                let train: Vec<usize> = (0..self.examples).collect();
                let test: Vec<usize> = (self.examples..all.len()).collect();
                let mut test = all.subset(&test);
                test.split = Split::Test;
                (all.subset(&train), test)
            }
            other => return Err(Error::Config(format!("unknown dataset '{other}'"))),
        };
        if train.example_shape() != self.arch.input_shape() {
            return Err(Error::Config(format!(
                "{} examples are {:?} but {} expects {:?}",
                self.dataset,
                train.example_shape(),
                self.arch,
                self.arch.input_shape()
            )));
        }
        Ok((train.take(self.examples), test.take(self.test_examples)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "# comment\ndataset=mnist\nepochs = 3\nlambda=0.5\n").unwrap();
        let cfg = RunConfig::resolve(Some(&f), &[("epochs".into(), "7".into())]).unwrap();
        assert_eq!(cfg.arch, Arch::Mnist);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lambda, Some(0.5));
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.set("depths", "1,2,3").unwrap();
        cfg.set("transport", "tcp:127.0.0.1:7000").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let h = cfg.hash();
        assert_eq!(h.len(), 16);
        back.out_dir = PathBuf::from("elsewhere");
        assert_eq!(back.hash(), h);
        back.seed = 1;
        assert_ne!(back.hash(), h);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("transport", "udp:1").is_err());
        assert!(cfg.set("transport", "tcp:host").is_err());
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("epochs", "-1").is_err());
        assert!(cfg.apply_text("novalue").is_err());
    }

    #[test]
    fn synth_splits_share_classes() {
        let cfg = RunConfig {
            examples: 50,
            test_examples: 20,
            ..RunConfig::default()
        };
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (50, 20));
        assert_eq!(test.split, Split::Test);
    }
}
