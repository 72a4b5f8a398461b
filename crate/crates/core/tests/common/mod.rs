//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use splitlab::data::{synth_dataset, Dataset};
use splitlab::model::{Arch, SplitModel};
use splitlab::optim::Optimizer;
use splitlab::protocol::{
    inproc_pair, run_pair, ClientNode, Recorder, ServerNode, SessionConfig, StreamTransport, Topology, Transport,
};
use splitlab::training::{epoch_batches, train_step};
use splitlab::{Result, Tensor};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;

pub const TOPOLOGIES: [Topology; 3] = [Topology::LabelSharing, Topology::ServerData, Topology::ClientLabels];

pub fn session(arch: Arch, topology: Topology, examples: usize, steps: u64) -> SessionConfig {
    let mut cfg = SessionConfig::new(arch, topology, 2);
    cfg.batch_size = 8;
    cfg.epochs = (steps as usize * cfg.batch_size).div_ceil(examples).max(1);
    cfg.max_steps = steps;
    cfg.examples = examples;
    cfg.seed = 11;
    cfg
}

pub fn synth_for(arch: Arch, n: usize, seed: u64) -> Dataset {
    synth_dataset(n, arch.input_shape(), seed)
}

/// Final parameters and per-step losses of a run.
pub struct Trajectory {
    pub losses: Vec<f32>,
    pub params: Vec<Tensor>,
}

impl Trajectory {
    pub fn max_param_diff(&self, other: &Trajectory) -> f32 {
        assert_eq!(self.params.len(), other.params.len());
        self.params.iter().zip(&other.params).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f32::max)
    }

    pub fn max_loss_diff(&self, other: &Trajectory) -> f32 {
        assert_eq!(self.losses.len(), other.losses.len());
        self.losses.iter().zip(&other.losses).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn bits_eq(&self, other: &Trajectory) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bits_eq(b))
            && self.losses.iter().map(|l| l.to_bits()).eq(other.losses.iter().map(|l| l.to_bits()))
    }
}

/// The whole network trained in one place on the same schedule.
pub fn monolithic(cfg: &SessionConfig, data: &Dataset) -> Result<Trajectory> {
    let mut model = SplitModel::build(cfg.arch, cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut losses = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        for idx in epoch_batches(cfg.examples, cfg.batch_size, cfg.seed, epoch as u64) {
            if cfg.max_steps > 0 && losses.len() as u64 == cfg.max_steps {
                break 'outer;
            }
            let (x, y) = data.batch(&idx);
            losses.push(train_step(&mut model.net, &mut opt, &x, &y)?);
        }
    }
    Ok(Trajectory {
        losses,
        params: model.net.params().map(|p| p.value.clone()).collect(),
    })
}

/// Parameters of a split run in network order.
pub fn split_params(client: &ClientNode, server: &ServerNode) -> Vec<Tensor> {
    let mut stacks = vec![&client.parts[0].stack, &server.part.stack];
    if server.topology == Topology::ServerData {
        // the server holds the data and runs the front of the network
        stacks.swap(0, 1);
    }
    stacks.extend(client.parts[1..].iter().map(|p| &p.stack));
    stacks.iter().flat_map(|s| s.params().map(|p| p.value.clone())).collect()
}

pub fn tcp_pair() -> (StreamTransport<TcpStream>, StreamTransport<TcpStream>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let addr = listener.local_addr().expect("bound");
    let client = TcpStream::connect(addr).expect("connect loopback");
    let (server, _) = listener.accept().expect("accept");
    client.set_nodelay(true).expect("nodelay");
    server.set_nodelay(true).expect("nodelay");
    (StreamTransport::new(client), StreamTransport::new(server))
}

pub struct SplitRun {
    pub trajectory: Trajectory,
    pub client_frames: Vec<(bool, Vec<u8>)>,
    pub server_frames: Vec<(bool, Vec<u8>)>,
    pub tap_entries: usize,
}

/// Runs a split session over the given transport ends, recording both transcripts.
pub fn split_over<C, S>(cfg: &SessionConfig, data: &Dataset, ends: (C, S), tap: bool) -> Result<SplitRun>
where
    C: Transport + Send,
    S: Transport + Send,
{
    let mut client = ClientNode::new(cfg)?;
    let mut server = ServerNode::new(cfg)?;
    if tap {
        server = server.with_tap();
    }
    let (mut ct, mut st) = (Recorder::new(ends.0), Recorder::new(ends.1));
    let (c, s) = run_pair(cfg, &mut client, &mut server, data, &mut ct, &mut st)?;
    Ok(SplitRun {
        trajectory: Trajectory {
            losses: if c.losses.is_empty() { s.losses } else { c.losses },
            params: split_params(&client, &server),
        },
        client_frames: ct.transcript,
        server_frames: st.transcript,
        tap_entries: server.tap.map_or(0, |t| t.len()),
    })
}

pub fn split_inproc(cfg: &SessionConfig, data: &Dataset, tap: bool) -> Result<SplitRun> {
    split_over(cfg, data, inproc_pair(), tap)
}

pub fn split_tcp(cfg: &SessionConfig, data: &Dataset, tap: bool) -> Result<SplitRun> {
    split_over(cfg, data, tcp_pair(), tap)
}

/// `SPLITLAB_DATA_DIR`, else the workspace `data/` directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os(splitlab::config::DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}
