//! Split learning between a client and a server.
//!
//! Three topologies are supported:
//!
//! * [`Topology::LabelSharing`]: the client holds examples and labels, runs the
//!   first layers and ships activations plus labels; the server finishes the
//!   forward pass, computes the loss and returns the gradient at the cut.
//! * [`Topology::ServerData`]: the server holds the examples and runs the first
//!   layers; the client holds the labels and the final layers.
//! * [`Topology::ClientLabels`]: three parts; the client runs the first and the
//!   last layers, so labels never leave it.
//!
//! Per training step the messages are, in order:
//!
//! | topology       | messages                                                   |
//! |----------------|------------------------------------------------------------|
//! | LabelSharing   | C→S SMASHED, C→S LABELS, S→C GRAD, S→C LOSS, C→S ACK       |
//! | ServerData     | S→C SMASHED, C→S GRAD, C→S LOSS, S→C ACK                   |
//! | ClientLabels   | C→S SMASHED, S→C SMASHED, C→S GRAD, S→C GRAD, C→S ACK      |
//!
//! A session opens with C→S HELLO, S→C HELLO, C→S CONFIG, S→C ACK (or END with
//! the reason when the configurations disagree) and is closed by the data
//! holder with END.

mod party;
mod tap;
mod transport;
pub mod wire;

pub use party::{run_client, run_inproc, run_pair, run_server, train_step, Batch, ClientNode, PartState, ServerNode, SessionReport};
pub use tap::{ServerTap, TapEntry};
pub use transport::{inproc_pair, InProcTransport, Recorder, StreamTransport, Transport};
pub use wire::{Message, MsgType};

use crate::error::{Error, Result};
use crate::model::{Arch, LayerStack, SplitModel};
use crate::optim::{OptimizerConfig, OptimizerKind};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    LabelSharing,
    ServerData,
    ClientLabels,
}

impl Topology {
    /// Whether the server sees the training labels in clear.
    pub fn shares_labels(self) -> bool {
        self == Topology::LabelSharing
    }

    /// Whether the server feeds the training examples (and so drives the session).
    pub fn server_holds_data(self) -> bool {
        self == Topology::ServerData
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::LabelSharing => "label-sharing",
            Topology::ServerData => "server-data",
            Topology::ClientLabels => "client-labels",
        })
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "label-sharing" | "labelsharing" | "a" => Ok(Topology::LabelSharing),
            "server-data" | "serverdata" | "b" => Ok(Topology::ServerData),
            "client-labels" | "clientlabels" | "c" => Ok(Topology::ClientLabels),
            other => Err(Error::Config(format!("unknown topology '{other}'"))),
        }
    }
}

/// Everything both parties must agree on; carried by the CONFIG message.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub arch: Arch,
    pub topology: Topology,
    /// First cut: layers `[0, split_depth)` run where the data lives.
    pub split_depth: usize,
    /// ClientLabels only: fully-connected layers kept in the client tail.
    pub tail_fc: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps; 0 means run all epochs.
    pub max_steps: u64,
    pub examples: usize,
}

impl SessionConfig {
    pub fn new(arch: Arch, topology: Topology, split_depth: usize) -> Self {
        SessionConfig {
            arch,
            topology,
            split_depth,
            tail_fc: 1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            batch_size: 64,
            epochs: 1,
            max_steps: 0,
            examples: 0,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.optimizer, self.lr)
    }

    pub fn to_wire(&self) -> String {
        format!(
            "arch={}\ntopology={}\nsplit_depth={}\ntail_fc={}\nseed={}\noptimizer={}\nlr={:?}\nbatch_size={}\nepochs={}\nmax_steps={}\nexamples={}\n",
            self.arch,
            self.topology,
            self.split_depth,
            self.tail_fc,
            self.seed,
            self.optimizer,
            self.lr,
            self.batch_size,
            self.epochs,
            self.max_steps,
            self.examples
        )
    }

    pub fn from_wire(text: &str) -> Result<Self> {
        let mut cfg = SessionConfig::new(Arch::Tiny, Topology::LabelSharing, 1);
        let bad = |k: &str, v: &str| Error::Protocol(format!("CONFIG {k}={v} invalid"));
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Protocol(format!("CONFIG line '{line}'")))?;
            match k {
                "arch" => cfg.arch = v.parse().map_err(|_| bad(k, v))?,
                "topology" => cfg.topology = v.parse().map_err(|_| bad(k, v))?,
                "split_depth" => cfg.split_depth = v.parse().map_err(|_| bad(k, v))?,
                "tail_fc" => cfg.tail_fc = v.parse().map_err(|_| bad(k, v))?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad(k, v))?,
                "optimizer" => cfg.optimizer = v.parse().map_err(|_| bad(k, v))?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad(k, v))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad(k, v))?,
                "epochs" => cfg.epochs = v.parse().map_err(|_| bad(k, v))?,
                "max_steps" => cfg.max_steps = v.parse().map_err(|_| bad(k, v))?,
                "examples" => cfg.examples = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(Error::Protocol(format!("unknown CONFIG key '{k}'"))),
            }
        }
        Ok(cfg)
    }

    /// Freshly initialised network cut into the parts of this topology:
    /// `(client parts, server part)`. The client gets one part, or two
    /// (head and tail) for ClientLabels.
    pub fn partition(&self) -> Result<(Vec<LayerStack>, LayerStack)> {
        let model = SplitModel::build(self.arch, self.seed);
        match self.topology {
            Topology::LabelSharing => {
                let mut p = model.into_parts(&[self.split_depth])?;
                let server = p.pop().unwrap();
                Ok((p, server))
            }
            Topology::ServerData => {
                let mut p = model.into_parts(&[self.split_depth])?;
                let client = p.pop().unwrap();
                Ok((vec![client], p.pop().unwrap()))
            }
            Topology::ClientLabels => {
                let tail = model.tail_start(self.tail_fc)?;
                if tail <= self.split_depth {
                    return Err(Error::Config(format!(
                        "client tail starts at layer {tail}, not after split depth {}",
                        self.split_depth
                    )));
                }
                let mut p = model.into_parts(&[self.split_depth, tail])?;
                let tail = p.pop().unwrap();
                let server = p.pop().unwrap();
                Ok((vec![p.pop().unwrap(), tail], server))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.partition().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_wire_round_trip() {
        let mut c = SessionConfig::new(Arch::Mnist, Topology::ClientLabels, 3);
        c.lr = 0.1 + 0.2;
        c.seed = u64::MAX;
        assert_eq!(SessionConfig::from_wire(&c.to_wire()).unwrap(), c);
        assert!(SessionConfig::from_wire("arch=vgg\n").is_err());
    }

    #[test]
    fn partitions() {
        let c = SessionConfig::new(Arch::Mnist, Topology::ClientLabels, 3);
        let (client, server) = c.partition().unwrap();
        assert_eq!(client[0].len(), 3);
        assert_eq!(server.len(), 8);
        assert_eq!(client[1].layers[0].name, "fc3");
        let c = SessionConfig::new(Arch::Mnist, Topology::ServerData, 11);
        let (client, server) = c.partition().unwrap();
        assert_eq!(client[0].len(), 2);
        assert_eq!(server.len(), 11);
        let c = SessionConfig::new(Arch::Mnist, Topology::ClientLabels, 12);
        assert!(c.partition().is_err());
    }
}
