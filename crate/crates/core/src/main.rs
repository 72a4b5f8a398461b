use clap::{Args, Parser, Subcommand};
use splitlab::attacks::invert_targets;
use splitlab::checkpoint::{load_checkpoint, save_part, CheckpointHeader};
use splitlab::config::{Role, RunConfig, TransportSpec};
use splitlab::data::{sample_class_balanced, NUM_CLASSES};
use splitlab::eval;
use splitlab::model::LayerStack;
use splitlab::protocol::{run_client, run_inproc, run_server, ClientNode, ServerNode, StreamTransport, Topology};
use splitlab::{Error, Result};
use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "splitlab", version, about = "Split learning training and server-side attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split training in the chosen topology and transport; writes part checkpoints and the loss curve.
    Train(Common),
    /// Model inversion and stealing against a client checkpoint.
    AttackInvert(Common),
    /// Label inference during one-example training steps.
    AttackLabels(Common),
    /// Depth sweep: inversion before/after training, clone and label-inference accuracy.
    Report(Common),
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value override (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    split_depth: Option<String>,
    #[arg(long)]
    tail_fc: Option<String>,
    #[arg(long)]
    topology: Option<String>,
    /// inproc or tcp:host:port
    #[arg(long)]
    transport: Option<String>,
    /// client, server or both
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    examples: Option<String>,
    /// TV coefficient, or `auto` for the per-depth default
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    input_steps: Option<String>,
    #[arg(long)]
    model_steps: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    attack_images: Option<String>,
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            out.push((k.to_string(), v.to_string()));
        }
        // dataset first: it resets the architecture an explicit --arch may override
        let flags = [
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("arch", &self.arch),
            ("split_depth", &self.split_depth),
            ("tail_fc", &self.tail_fc),
            ("topology", &self.topology),
            ("transport", &self.transport),
            ("role", &self.role),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("max_steps", &self.max_steps),
            ("examples", &self.examples),
            ("lambda", &self.lambda),
            ("input_steps", &self.input_steps),
            ("model_steps", &self.model_steps),
            ("rounds", &self.rounds),
            ("attack_images", &self.attack_images),
            ("depths", &self.depths),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
        ];
        out.extend(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
        );
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides()?)?;
        fs::create_dir_all(&cfg.out_dir)?;
        eprint!("effective configuration (hash {}):\n{}", cfg.hash(), cfg.to_text());
        fs::write(cfg.out_dir.join("effective.cfg"), cfg.to_text())?;
        Ok(cfg)
    }
}

fn connect(addr: &str) -> Result<TcpStream> {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() > deadline => return Err(Error::Protocol(format!("cannot reach {addr}: {e}"))),
            Err(_) => std::thread::sleep(Duration::from_millis(100)),
        }
    }
}

fn accept(addr: &str) -> Result<TcpStream> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Protocol(format!("cannot listen on {addr}: {e}")))?;
    let (s, _) = listener.accept()?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn write_curve(path: &Path, losses: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    Ok(())
}

fn header(cfg: &RunConfig, steps: u64) -> CheckpointHeader {
    CheckpointHeader {
        arch: cfg.arch,
        split_depth: cfg.split_depth as u32,
        seed: cfg.seed,
        step: steps,
    }
}

fn save_client(cfg: &RunConfig, node: &ClientNode, steps: u64) -> Result<()> {
    let names = ["client.uspl", "client_tail.uspl"];
    for (part, name) in node.parts.iter().zip(names) {
        save_part(&header(cfg, steps), &part.stack, &cfg.out_dir.join(name))?;
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let needs_data = cfg.role != Role::Server || cfg.topology == Topology::ServerData;
    let train = if needs_data { Some(cfg.load_data()?.0) } else { None };
    let session = cfg.session(train.as_ref().map_or(cfg.examples, |d| d.len()));
    session.validate()?;
    let losses;
    let steps;
    match (cfg.role, &cfg.transport) {
        (Role::Both, TransportSpec::InProc) => {
            let data = train.as_ref().expect("loaded for the client role");
            let mut client = ClientNode::new(&session)?;
            let mut server = ServerNode::new(&session)?;
            let (c, s) = run_inproc(&session, &mut client, &mut server, data)?;
            losses = if c.losses.is_empty() { s.losses } else { c.losses };
            steps = c.steps;
            save_client(cfg, &client, steps)?;
            save_part(&header(cfg, steps), &server.part.stack, &cfg.out_dir.join("server.uspl"))?;
        }
        (Role::Both, TransportSpec::Tcp(addr)) => {
            let data = train.as_ref().expect("loaded for the client role");
            let mut client = ClientNode::new(&session)?;
            let mut server = ServerNode::new(&session)?;
            let server_data = session.topology.server_holds_data().then_some(data);
            let (c, s) = std::thread::scope(|scope| {
                let h = scope.spawn(|| -> Result<_> {
                    let mut t = StreamTransport::new(accept(addr)?);
                    run_server(&session, &mut server, &mut t, server_data)
                });
                let c = connect(addr).and_then(|s| run_client(&session, &mut client, &mut StreamTransport::new(s), data));
                (c, h.join().expect("server thread panicked"))
            });
            let (c, s) = (c?, s?);
            losses = if c.losses.is_empty() { s.losses } else { c.losses };
            steps = c.steps;
            save_client(cfg, &client, steps)?;
            save_part(&header(cfg, steps), &server.part.stack, &cfg.out_dir.join("server.uspl"))?;
        }
        (_, TransportSpec::InProc) => {
            return Err(Error::Config(format!(
                "role {} runs in its own process and needs transport tcp:host:port",
                cfg.role
            )))
        }
        (Role::Client, TransportSpec::Tcp(addr)) => {
            let data = train.as_ref().expect("loaded for the client role");
            let mut client = ClientNode::new(&session)?;
            let r = run_client(&session, &mut client, &mut StreamTransport::new(connect(addr)?), data)?;
            losses = r.losses;
            steps = r.steps;
            save_client(cfg, &client, steps)?;
        }
        (Role::Server, TransportSpec::Tcp(addr)) => {
            let mut server = ServerNode::new(&session)?;
            let mut t = StreamTransport::new(accept(addr)?);
            let r = run_server(&session, &mut server, &mut t, train.as_ref())?;
            losses = r.losses;
            steps = r.steps;
            save_part(&header(cfg, steps), &server.part.stack, &cfg.out_dir.join("server.uspl"))?;
        }
    }
    write_curve(&cfg.out_dir.join("train_curve.csv"), &losses)?;
    println!(
        "trained {steps} steps; final loss {}",
        losses.last().map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn cmd_attack_invert(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("attack-invert needs --checkpoint (a client or whole-model checkpoint)".into()))?;
    let (_, model) = load_checkpoint(path)?;
    if model.arch != cfg.arch {
        return Err(Error::Config(format!("checkpoint holds a {} network, config says {}", model.arch, cfg.arch)));
    }
    let (_, test) = cfg.load_data()?;
    let per_class = cfg.attack_images.div_ceil(NUM_CLASSES).max(1);
    let targets = sample_class_balanced(&test, per_class, cfg.seed)?.take(cfg.attack_images);
    let (head, _) = model.split_at(cfg.split_depth)?;
    let head = LayerStack::new(head.to_vec());
    let smashed = head.predict(&targets.images)?;
    let inv = cfg.inversion(cfg.split_depth);
    let started = Instant::now();
    let r = invert_targets(&smashed, &head, targets.example_shape(), &inv, Some(&targets.images))?;
    let dir = cfg.out_dir.join("invert");
    let ext = eval::pnm_extension(targets.example_shape()[0]);
    eval::dump_image(&targets.images, &dir.join(format!("targets.{ext}")))?;
    eval::dump_image(&r.x, &dir.join(format!("estimates.{ext}")))?;
    eval::dump_rows(&[&targets.images, &r.x], &dir.join(format!("grid.{ext}")))?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["round", "objective", "mse", "tv"])?;
    for m in &r.history {
        w.write_record([
            m.round.to_string(),
            format!("{:?}", m.objective),
            m.mse_to_truth.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:?}", m.tv),
        ])?;
    }
    w.flush()?;
    save_part(&header(cfg, 0), &r.clone, &dir.join("clone.uspl"))?;
    println!(
        "depth {} lambda {} rounds {}: mean reconstruction MSE {:.5} ({:.1}s)",
        cfg.split_depth,
        inv.lambda,
        r.history.len(),
        eval::mse_images(&r.x, &targets.images)?,
        started.elapsed().as_secs_f32()
    );
    Ok(())
}

fn cmd_attack_labels(cfg: &RunConfig) -> Result<()> {
    if cfg.topology == Topology::LabelSharing {
        return Err(Error::Config(
            "label inference needs the labels at the client: use topology server-data or client-labels".into(),
        ));
    }
    if cfg.batch_size != 1 {
        return Err(Error::Config(format!(
            "label inference assumes stochastic gradient descent with one example per step, so the returned \
             gradient belongs to a single label; batch_size is {}, set it to 1",
            cfg.batch_size
        )));
    }
    let (train, _) = cfg.load_data()?;
    let run = eval::run_label_inference(
        cfg.arch,
        cfg.topology,
        cfg.tail_fc,
        &train,
        cfg.label_steps,
        cfg.seed,
        cfg.label_scope,
    )?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("labels.csv"))?;
    w.write_record(["step", "label", "predicted"])?;
    for (i, (t, p)) in run.truth.iter().zip(&run.predicted).enumerate() {
        w.write_record([i.to_string(), t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    println!(
        "label inference, client tail of {} fc layer(s): {:.1}% over {} steps",
        cfg.tail_fc,
        100.0 * run.accuracy,
        run.predicted.len()
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let (train, test) = cfg.load_data()?;
    let sweep = cfg.sweep(true);
    let report = eval::run_depth_sweep(&sweep, &train, &test)?;
    let mut out = std::io::stdout().lock();
    for r in &report.rows {
        writeln!(out, "{}", r.record().join(","))?;
    }
    writeln!(out, "{} new rows in {}", report.rows.len(), cfg.out_dir.join("report.csv").display())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&c.resolve()?),
        Command::AttackInvert(c) => cmd_attack_invert(&c.resolve()?),
        Command::AttackLabels(c) => cmd_attack_labels(&c.resolve()?),
        Command::Report(c) => cmd_report(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
