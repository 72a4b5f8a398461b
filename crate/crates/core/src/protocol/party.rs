use super::tap::{ServerTap, TapEntry};
use super::transport::{inproc_pair, Transport};
use super::wire::{Message, MsgType, PROTOCOL_VERSION};
use super::{SessionConfig, Topology};
use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerStack, StackForward};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;
use crate::training::epoch_batches;

struct Pending {
    graph: Graph,
    input: Var,
    fwd: StackForward,
}

/// One party's share of the network, its optimizer, and the graph of the
/// forward pass awaiting its backward half.
pub struct PartState {
    pub stack: LayerStack,
    pub opt: Optimizer,
    /// When set, a copy of every parameter gradient is kept before the update.
    pub grad_log: Option<Vec<Vec<Tensor>>>,
    pending: Option<Pending>,
}

impl PartState {
    pub fn new(stack: LayerStack, opt: OptimizerConfig) -> Self {
        PartState {
            stack,
            opt: Optimizer::new(opt),
            grad_log: None,
            pending: None,
        }
    }

    /// Runs the part on `x`. With `track_input` the gradient with respect to
    /// `x` (the gradient at the cut) is returned by the backward half.
    pub fn forward(&mut self, x: &Tensor, track_input: bool) -> Result<Tensor> {
        let mut graph = Graph::new();
        let input = graph.leaf(x.clone(), track_input);
        let fwd = self.stack.forward(&mut graph, input, true)?;
        let out = graph.value(fwd.output).clone();
        self.pending = Some(Pending { graph, input, fwd });
        Ok(out)
    }

    fn take_pending(&mut self) -> Result<Pending> {
        self.pending
            .take()
            .ok_or_else(|| Error::Protocol("backward requested without a pending forward pass".into()))
    }

    fn finish(&mut self, mut p: Pending, mut grads: crate::autograd::Gradients) -> Result<Option<Tensor>> {
        self.stack.store_grads(&mut grads, &p.fwd)?;
        if let Some(log) = self.grad_log.as_mut() {
            log.push(self.stack.params().map(|q| q.grad.clone().expect("just stored")).collect());
        }
        self.opt.step(&mut self.stack.params_mut())?;
        let cut = grads.take(p.input);
        p.graph = Graph::new();
        Ok(cut)
    }

    /// Cross-entropy on the pending output, backward, update.
    /// Returns the loss and the gradient at the input (if tracked).
    pub fn finish_with_loss(&mut self, labels: &[u8]) -> Result<(f32, Option<Tensor>)> {
        let mut p = self.take_pending()?;
        let loss = p.graph.nll(p.fwd.output, labels)?;
        let value = p.graph.value(loss).item();
        let grads = p.graph.backward(loss)?;
        Ok((value, self.finish(p, grads)?))
    }

    /// Backward from an upstream gradient on the pending output, then update.
    pub fn finish_with_grad(&mut self, upstream: Tensor) -> Result<Option<Tensor>> {
        let mut p = self.take_pending()?;
        let grads = p.graph.backward_with(p.fwd.output, upstream)?;
        self.finish(p, grads)
    }
}

/// What one party holds for a step: the examples and/or the labels.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub x: Option<Tensor>,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    fn x(&self) -> Result<&Tensor> {
        self.x
            .as_ref()
            .ok_or_else(|| Error::Protocol("this party holds no examples".into()))
    }

    fn labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Protocol("this party holds no labels".into()))
    }
}

enum StepOutcome {
    Done(Option<f32>),
    Ended,
}

fn expect(t: &mut dyn Transport, ty: MsgType) -> Result<Message> {
    let m = t.recv()?;
    if m.msg_type() == ty {
        return Ok(m);
    }
    match m {
        Message::End(reason) => Err(Error::Protocol(format!("peer ended session while {ty:?} was due: {reason}"))),
        other => Err(Error::Protocol(format!("expected {ty:?}, got {:?}", other.msg_type()))),
    }
}

fn expect_tensor(t: &mut dyn Transport, ty: MsgType) -> Result<Tensor> {
    match expect(t, ty)? {
        Message::Smashed(x) | Message::Grad(x) => Ok(x),
        _ => unreachable!("expect checked the type"),
    }
}

fn expect_loss(t: &mut dyn Transport) -> Result<f32> {
    match expect(t, MsgType::Loss)? {
        Message::Loss(v) => Ok(v),
        _ => unreachable!(),
    }
}

fn cut_grad(g: Option<Tensor>) -> Result<Tensor> {
    g.ok_or_else(|| Error::Protocol("no gradient at the cut".into()))
}

/// First message of a step for the party that does not drive the session.
fn recv_step_start(t: &mut dyn Transport) -> Result<Option<Tensor>> {
    match t.recv()? {
        Message::Smashed(s) => Ok(Some(s)),
        Message::End(reason) if reason.is_empty() => Ok(None),
        Message::End(reason) => Err(Error::Protocol(format!("peer aborted: {reason}"))),
        other => Err(Error::Protocol(format!("expected SMASHED, got {:?}", other.msg_type()))),
    }
}

/// The client: the data holder in LabelSharing/ClientLabels, the label holder in ServerData.
pub struct ClientNode {
    pub topology: Topology,
    /// One part, or head and tail for ClientLabels.
    pub parts: Vec<PartState>,
}

impl ClientNode {
    pub fn new(cfg: &SessionConfig) -> Result<Self> {
        let (parts, _) = cfg.partition()?;
        Ok(ClientNode {
            topology: cfg.topology,
            parts: parts.into_iter().map(|p| PartState::new(p, cfg.optimizer_config())).collect(),
        })
    }

    /// Smashed data for `x`: the client head's forward output.
    pub fn client_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.parts[0].forward(x, false)
    }

    /// Completes the head's backward pass from the gradient at the cut and updates it.
    pub fn client_backward(&mut self, grad_at_cut: Tensor) -> Result<()> {
        self.parts[0].finish_with_grad(grad_at_cut).map(|_| ())
    }

    fn step(&mut self, t: &mut dyn Transport, batch: &Batch) -> Result<StepOutcome> {
        match self.topology {
            Topology::LabelSharing => {
                let smashed = self.client_forward(batch.x()?)?;
                t.send(&Message::Smashed(smashed))?;
                t.send(&Message::Labels(batch.labels()?.to_vec()))?;
                let g = expect_tensor(t, MsgType::Grad)?;
                let loss = expect_loss(t)?;
                self.client_backward(g)?;
                t.send(&Message::Ack)?;
                Ok(StepOutcome::Done(Some(loss)))
            }
            Topology::ServerData => {
                let Some(smashed) = recv_step_start(t)? else {
                    return Ok(StepOutcome::Ended);
                };
                self.parts[0].forward(&smashed, true)?;
                let (loss, g) = self.parts[0].finish_with_loss(batch.labels()?)?;
                t.send(&Message::Grad(cut_grad(g)?))?;
                t.send(&Message::Loss(loss))?;
                expect(t, MsgType::Ack)?;
                Ok(StepOutcome::Done(Some(loss)))
            }
            Topology::ClientLabels => {
                let smashed = self.client_forward(batch.x()?)?;
                t.send(&Message::Smashed(smashed))?;
                let mid = expect_tensor(t, MsgType::Smashed)?;
                self.parts[1].forward(&mid, true)?;
                let (loss, g) = self.parts[1].finish_with_loss(batch.labels()?)?;
                t.send(&Message::Grad(cut_grad(g)?))?;
                let g = expect_tensor(t, MsgType::Grad)?;
                self.client_backward(g)?;
                t.send(&Message::Ack)?;
                Ok(StepOutcome::Done(Some(loss)))
            }
        }
    }
}

pub struct ServerNode {
    pub topology: Topology,
    pub part: PartState,
    pub tap: Option<ServerTap>,
    steps: u64,
}

impl ServerNode {
    pub fn new(cfg: &SessionConfig) -> Result<Self> {
        let (_, part) = cfg.partition()?;
        Ok(ServerNode {
            topology: cfg.topology,
            part: PartState::new(part, cfg.optimizer_config()),
            tap: None,
            steps: 0,
        })
    }

    pub fn with_tap(mut self) -> Self {
        self.tap = Some(ServerTap::new());
        self
    }

    /// LabelSharing server half: loss and gradient at the cut; updates the server part.
    pub fn server_forward_backward(&mut self, smashed: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
        self.part.forward(smashed, true)?;
        let (loss, g) = self.part.finish_with_loss(labels)?;
        Ok((loss, cut_grad(g)?))
    }

    fn observe(&mut self, smashed: Tensor, labels: Option<Vec<u8>>, gradient: &Tensor, tail_input: Option<Tensor>) {
        if let Some(tap) = self.tap.as_mut() {
            tap.record(TapEntry {
                step: self.steps,
                smashed,
                labels,
                gradient: gradient.clone(),
                tail_input,
            });
        }
    }

    fn step(&mut self, t: &mut dyn Transport, batch: &Batch) -> Result<StepOutcome> {
        let outcome = match self.topology {
            Topology::LabelSharing => {
                let Some(smashed) = recv_step_start(t)? else {
                    return Ok(StepOutcome::Ended);
                };
                let labels = match expect(t, MsgType::Labels)? {
                    Message::Labels(l) => l,
                    _ => unreachable!(),
                };
                let (loss, g) = self.server_forward_backward(&smashed, &labels)?;
                if self.tap.is_some() {
                    self.observe(smashed, Some(labels), &g, None);
                }
                t.send(&Message::Grad(g))?;
                t.send(&Message::Loss(loss))?;
                expect(t, MsgType::Ack)?;
                StepOutcome::Done(Some(loss))
            }
            Topology::ServerData => {
                let smashed = self.part.forward(batch.x()?, false)?;
                t.send(&Message::Smashed(smashed.clone()))?;
                let g = expect_tensor(t, MsgType::Grad)?;
                let loss = expect_loss(t)?;
                self.part.finish_with_grad(g.clone())?;
                let tail = self.tap.is_some().then(|| smashed.clone());
                self.observe(smashed, None, &g, tail);
                t.send(&Message::Ack)?;
                StepOutcome::Done(Some(loss))
            }
            Topology::ClientLabels => {
                let Some(smashed) = recv_step_start(t)? else {
                    return Ok(StepOutcome::Ended);
                };
                let mid = self.part.forward(&smashed, true)?;
                let tail = self.tap.is_some().then(|| mid.clone());
                t.send(&Message::Smashed(mid))?;
                let g = expect_tensor(t, MsgType::Grad)?;
                let g = cut_grad(self.part.finish_with_grad(g)?)?;
                if self.tap.is_some() {
                    self.observe(smashed, None, &g, tail);
                }
                t.send(&Message::Grad(g))?;
                expect(t, MsgType::Ack)?;
                StepOutcome::Done(None)
            }
        };
        self.steps += 1;
        Ok(outcome)
    }
}

fn abort<T>(t: &mut dyn Transport, err: Error) -> Result<T> {
    // best effort; the peer may already be gone
    let _ = t.send(&Message::End(err.to_string()));
    Err(err)
}

/// One full forward-backward-update over an in-process transport.
///
/// `client_batch` and `server_batch` carry what each party holds. Returns the
/// loss (known to whichever party computes it).
pub fn train_step(
    client: &mut ClientNode,
    server: &mut ServerNode,
    client_batch: &Batch,
    server_batch: &Batch,
) -> Result<f32> {
    if client.topology != server.topology {
        return Err(Error::Config("client and server use different topologies".into()));
    }
    let (mut ct, mut st) = inproc_pair();
    let (c, s) = std::thread::scope(|scope| {
        let h = scope.spawn(|| server.step(&mut st, server_batch));
        let c = client.step(&mut ct, client_batch);
        if c.is_err() {
            let _ = ct.send(&Message::End("client step failed".into()));
        }
        (c, h.join().expect("server thread panicked"))
    });
    let (c, s) = (c?, s?);
    match (c, s) {
        (StepOutcome::Done(Some(l)), _) | (_, StepOutcome::Done(Some(l))) => Ok(l),
        _ => Err(Error::Protocol("step finished without a loss".into())),
    }
}

/// Per-session result: steps run and the loss of every step (where known).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionReport {
    pub steps: u64,
    pub losses: Vec<f32>,
}

fn schedule(cfg: &SessionConfig) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    for epoch in 0..cfg.epochs {
        all.extend(epoch_batches(cfg.examples, cfg.batch_size, cfg.seed, epoch as u64));
    }
    if cfg.max_steps > 0 {
        all.truncate(cfg.max_steps as usize);
    }
    all
}

fn check_data(cfg: &SessionConfig, data: Option<&Dataset>) -> Result<()> {
    match data {
        Some(d) if d.len() != cfg.examples => Err(Error::Config(format!(
            "dataset has {} examples, session expects {}",
            d.len(),
            cfg.examples
        ))),
        _ => Ok(()),
    }
}

fn drive(
    step: &mut dyn FnMut(&mut dyn Transport, &Batch) -> Result<StepOutcome>,
    t: &mut dyn Transport,
    cfg: &SessionConfig,
    batch_for: &dyn Fn(&[usize]) -> Batch,
    driver: bool,
) -> Result<SessionReport> {
    let mut report = SessionReport::default();
    for idx in schedule(cfg) {
        match step(t, &batch_for(&idx)) {
            Ok(StepOutcome::Done(loss)) => {
                report.steps += 1;
                report.losses.extend(loss);
            }
            Ok(StepOutcome::Ended) => {
                return Err(Error::Protocol(format!("peer ended the session after {} steps", report.steps)))
            }
            Err(e) => return abort(t, e),
        }
    }
    if driver {
        t.send(&Message::End(String::new()))?;
    } else {
        match step(t, &Batch::default()) {
            Ok(StepOutcome::Ended) => {}
            Ok(StepOutcome::Done(_)) => return abort(t, Error::Protocol("peer ran past the schedule".into())),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Client side of a whole session: handshake, every scheduled step, teardown.
pub fn run_client(cfg: &SessionConfig, node: &mut ClientNode, t: &mut dyn Transport, data: &Dataset) -> Result<SessionReport> {
    check_data(cfg, Some(data))?;
    t.send(&Message::Hello {
        version: PROTOCOL_VERSION,
    })?;
    match expect(t, MsgType::Hello)? {
        Message::Hello { version } if version == PROTOCOL_VERSION => {}
        Message::Hello { version } => {
            return abort(t, Error::Handshake(format!("server speaks protocol version {version}")))
        }
        _ => unreachable!(),
    }
    t.send(&Message::Config(cfg.clone()))?;
    match t.recv()? {
        Message::Ack => {}
        Message::End(reason) => {
            let reason = reason.strip_prefix("handshake rejected: ").unwrap_or(&reason);
            return Err(Error::Handshake(reason.to_string()));
        }
        other => return Err(Error::Protocol(format!("expected ACK, got {:?}", other.msg_type()))),
    }
    let topology = cfg.topology;
    let batch_for = |idx: &[usize]| {
        let (x, y) = data.batch(idx);
        Batch {
            x: (topology != Topology::ServerData).then_some(x),
            labels: Some(y),
        }
    };
    drive(&mut |t, b| node.step(t, b), t, cfg, &batch_for, !topology.server_holds_data())
}

/// Server side of a whole session. `data` is required only when the server
/// holds the examples (ServerData).
pub fn run_server(cfg: &SessionConfig, node: &mut ServerNode, t: &mut dyn Transport, data: Option<&Dataset>) -> Result<SessionReport> {
    check_data(cfg, data)?;
    match expect(t, MsgType::Hello)? {
        Message::Hello { version } if version == PROTOCOL_VERSION => {}
        Message::Hello { version } => {
            return abort(t, Error::Handshake(format!("client speaks protocol version {version}")))
        }
        _ => unreachable!(),
    }
    t.send(&Message::Hello {
        version: PROTOCOL_VERSION,
    })?;
    let theirs = match expect(t, MsgType::Config)? {
        Message::Config(c) => c,
        _ => unreachable!(),
    };
    if theirs != *cfg {
        let reason = format!(
            "configuration mismatch: client sent [{}] server has [{}]",
            theirs.to_wire().trim().replace('\n', " "),
            cfg.to_wire().trim().replace('\n', " ")
        );
        return abort(t, Error::Handshake(reason));
    }
    t.send(&Message::Ack)?;
    if cfg.topology.server_holds_data() && data.is_none() {
        return abort(t, Error::Config("server-data topology needs the dataset at the server".into()));
    }
    let batch_for = |idx: &[usize]| Batch {
        x: data.map(|d| d.images.select_batch(idx)),
        labels: None,
    };
    let driver = cfg.topology.server_holds_data();
    drive(&mut |t, b| node.step(t, b), t, cfg, &batch_for, driver)
}

/// Runs a whole session with both parties in this process, the server on a
/// second thread. Each side gets its own view of `data` as its topology dictates.
pub fn run_inproc(
    cfg: &SessionConfig,
    client: &mut ClientNode,
    server: &mut ServerNode,
    data: &Dataset,
) -> Result<(SessionReport, SessionReport)> {
    let (mut ct, mut st) = inproc_pair();
    run_pair(cfg, client, server, data, &mut ct, &mut st)
}

/// [`run_inproc`] over caller-supplied transport ends (e.g. recorders).
pub fn run_pair(
    cfg: &SessionConfig,
    client: &mut ClientNode,
    server: &mut ServerNode,
    data: &Dataset,
    client_end: &mut (dyn Transport + Send),
    server_end: &mut (dyn Transport + Send),
) -> Result<(SessionReport, SessionReport)> {
    let server_data = cfg.topology.server_holds_data().then_some(data);
    let (c, s) = std::thread::scope(|scope| {
        let h = scope.spawn(|| run_server(cfg, server, server_end, server_data));
        let c = run_client(cfg, client, client_end, data);
        (c, h.join().expect("server thread panicked"))
    });
    // the side that failed first carries the more precise error
    match (c, s) {
        (Ok(c), Ok(s)) => Ok((c, s)),
        (Err(e @ Error::Handshake(_)), _) | (_, Err(e @ Error::Handshake(_))) => Err(e),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => Err(e),
        (Err(c), Err(s)) => Err(if matches!(c, Error::Protocol(_)) { s } else { c }),
    }
}
