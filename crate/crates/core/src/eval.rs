//! Metrics, image dumps, and the depth sweep that produces the CSV reports.

use crate::attacks::{self, GradScope, InversionConfig};
use crate::autograd::Graph;
use crate::data::{sample_class_balanced, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{Arch, Layer, LayerStack, SplitModel};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::protocol::{run_inproc, ClientNode, ServerNode, SessionConfig, Topology};
use crate::tensor::Tensor;
use crate::training::{epoch_batches, train_epochs};
use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Mean squared error over every pixel and channel; the same definition as the
/// graph's `mse` loss.
pub fn mse_images(a: &Tensor, b: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(a.clone(), false), g.leaf(b.clone(), false));
    let m = g.mse(a, b)?;
    Ok(g.value(m).item())
}

/// Row-wise argmax of an `(N, K)` score tensor. Ties go to the lower index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.shape().last().copied().unwrap_or(1).max(1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `ds` whose argmax prediction matches the label.
pub fn eval_accuracy(net: &LayerStack, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..ds.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(ds.len())).collect();
        let (x, y) = ds.batch(&idx);
        let pred = argmax_rows(&net.predict(&x)?);
        correct += pred.iter().zip(&y).filter(|(p, &l)| **p == l as usize).count();
    }
    Ok(correct as f32 / ds.len() as f32)
}

/// Pixels between neighbouring images in a grid.
pub const GUTTER: usize = 2;

/// `[0, 1]` to a byte, rounding half up.
pub fn to_pixel(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// File extension matching what [`dump_image`] writes for `channels`.
pub fn pnm_extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

pub fn grid_width(n: usize, w: usize) -> usize {
    n * w + n.saturating_sub(1) * GUTTER
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)
        }
        4 => Ok(x.clone()),
        _ => Err(Error::InvalidArgument(format!(
            "images must be (C,H,W) or (N,C,H,W), got {:?}",
            x.shape()
        ))),
    }
}

/// Writes `x` as binary PGM (one channel) or PPM (three channels). A batch is
/// laid out left to right with a white gutter.
pub fn dump_image(x: &Tensor, path: &Path) -> Result<()> {
    dump_rows(&[x], path)
}

/// One grid row per tensor (e.g. originals above estimates). Rows must share
/// the per-image shape; shorter rows are padded white.
pub fn dump_rows(rows: &[&Tensor], path: &Path) -> Result<()> {
    let rows = rows.iter().map(|r| as_batch(r)).collect::<Result<Vec<_>>>()?;
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to write".into()))?;
    let (c, h, w) = (first.shape()[1], first.shape()[2], first.shape()[3]);
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("{c} channels cannot be written as PNM")));
    }
    if rows.iter().any(|r| r.shape()[1..] != first.shape()[1..]) {
        return Err(Error::InvalidArgument("grid rows differ in image shape".into()));
    }
    let cols = rows.iter().map(|r| r.batch()).max().unwrap_or(0);
    let (gw, gh) = (grid_width(cols, w), grid_width(rows.len(), h));
    let mut pix = vec![255u8; gw * gh * c];
    for (r, batch) in rows.iter().enumerate() {
        for (n, img) in batch.data().chunks(c * h * w).enumerate() {
            let (ox, oy) = (n * (w + GUTTER), r * (h + GUTTER));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        pix[((oy + y) * gw + ox + x) * c + ch] = to_pixel(img[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "{}\n{gw} {gh}\n255\n", if c == 1 { "P5" } else { "P6" })?;
    f.write_all(&pix)?;
    f.flush()?;
    Ok(())
}

/// Reads a binary PGM/PPM with maxval 255 into a `(1, C, H, W)` tensor in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PNM header truncated".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field '{s}'")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("PNM maxval {max}, expected 255")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * c {
        return Err(Error::Format(format!("PNM body has {} bytes, expected {}", body.len(), w * h * c)));
    }
    let mut data = vec![0.0; c * h * w];
    for (i, &b) in body.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = b as f32 / 255.0;
    }
    Tensor::new(vec![1, c, h, w], data)
}

/// Spearman rank correlation; tied values share their mean rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let mean = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = mean;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Test accuracy of a stolen client part `clone` in front of freshly
/// initialised remaining layers, which are trained on `train` while the clone
/// stays frozen.
#[allow(clippy::too_many_arguments)]
pub fn clone_accuracy(
    clone: &LayerStack,
    rest: &[Layer],
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<f32> {
    let features = |ds: &Dataset| -> Result<Tensor> {
        let mut parts = Vec::new();
        for start in (0..ds.len()).step_by(500) {
            let idx: Vec<usize> = (start..(start + 500).min(ds.len())).collect();
            parts.push(clone.predict(&ds.images.select_batch(&idx))?);
        }
        Tensor::concat_batch(&parts)
    };
    let ftrain = features(train)?;
    let mut head = LayerStack::init_like(rest, seed);
    let mut opt = Optimizer::new(OptimizerConfig::adam(lr));
    for epoch in 0..epochs {
        for idx in epoch_batches(train.len(), batch_size, seed, epoch as u64) {
            let y: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            crate::training::train_step(&mut head, &mut opt, &ftrain.select_batch(&idx), &y)?;
        }
    }
    let fds = Dataset {
        name: test.name.clone(),
        split: test.split,
        images: features(test)?,
        labels: test.labels.clone(),
    };
    eval_accuracy(&head, &fds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRun {
    pub accuracy: f32,
    pub predicted: Vec<u8>,
    pub truth: Vec<u8>,
}

/// Trains a freshly initialised network for `steps` one-example steps in
/// `topology` (ServerData or ClientLabels) with the last `tail_fc`
/// fully-connected layers at the client, and infers the label of every step
/// from the server's side.
pub fn run_label_inference(
    arch: Arch,
    topology: Topology,
    tail_fc: usize,
    data: &Dataset,
    steps: usize,
    seed: u64,
    scope: GradScope,
) -> Result<LabelRun> {
    if topology == Topology::LabelSharing {
        return Err(Error::Config("labels are sent in clear in the label-sharing topology".into()));
    }
    let model = SplitModel::build(arch, seed);
    let tail_start = model.tail_start(tail_fc)?;
    let split_depth = match topology {
        Topology::ServerData => tail_start,
        _ => 1,
    };
    let mut cfg = SessionConfig::new(arch, topology, split_depth);
    cfg.tail_fc = tail_fc;
    cfg.seed = seed;
    cfg.batch_size = 1;
    cfg.max_steps = steps as u64;
    let data = data.take(steps.min(data.len()));
    cfg.examples = data.len();
    cfg.validate()?;
    let mut client = ClientNode::new(&cfg)?;
    let tail = client.parts.len() - 1;
    client.parts[tail].grad_log = Some(Vec::new());
    let mut server = ServerNode::new(&cfg)?.with_tap();
    run_inproc(&cfg, &mut client, &mut server, &data)?;

    let received = client.parts[tail].grad_log.take().unwrap_or_default();
    let tap = server.tap.take().unwrap_or_default();
    let layout = &client.parts[tail].stack.layers;
    let order = epoch_batches(cfg.examples, 1, cfg.seed, 0);
    let mut predicted = Vec::with_capacity(tap.len());
    let mut truth = Vec::with_capacity(tap.len());
    for (i, (entry, grads)) in tap.entries().iter().zip(&received).enumerate() {
        let input = entry
            .tail_input
            .as_ref()
            .ok_or_else(|| Error::Protocol("tap entry lacks the tail input".into()))?;
        // a fresh clone per inference, shared by all candidates
        let clone = LayerStack::init_like(layout, seed ^ 0x5EED_0000 ^ i as u64);
        predicted.push(attacks::infer_label(grads, input, &clone, scope)?.predicted);
        truth.push(data.labels[order[i][0]]);
    }
    let correct = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(LabelRun {
        accuracy: correct as f32 / predicted.len().max(1) as f32,
        predicted,
        truth,
    })
}

pub const CSV_HEADER: [&str; 11] = [
    "dataset",
    "depth",
    "trained",
    "mse_before",
    "mse_after",
    "clone_acc",
    "orig_acc",
    "label_inf_acc",
    "seconds",
    "seed",
    "config_hash",
];

/// One attacked client state. `mse_before` is filled on the untrained row and
/// `mse_after` on the trained row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub depth: usize,
    pub trained: bool,
    pub mse_before: Option<f32>,
    pub mse_after: Option<f32>,
    pub clone_acc: Option<f32>,
    pub orig_acc: Option<f32>,
    pub label_inf_acc: Option<f32>,
    pub seconds: f32,
    pub seed: u64,
    pub config_hash: String,
}

fn opt(v: Option<f32>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl ReportRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.depth.to_string(),
            self.trained.to_string(),
            opt(self.mse_before),
            opt(self.mse_after),
            opt(self.clone_acc),
            opt(self.orig_acc),
            opt(self.label_inf_acc),
            format!("{:.3}", self.seconds),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != CSV_HEADER.len() {
            return Err(Error::Format(format!("report row has {} fields", r.len())));
        }
        let bad = |i: usize| Error::Format(format!("report field {} = '{}'", CSV_HEADER[i], &r[i]));
        let o = |i: usize| -> Result<Option<f32>> {
            if r[i].is_empty() {
                Ok(None)
            } else {
                r[i].parse().map(Some).map_err(|_| bad(i))
            }
        };
        Ok(ReportRow {
            dataset: r[0].to_string(),
            depth: r[1].parse().map_err(|_| bad(1))?,
            trained: r[2].parse().map_err(|_| bad(2))?,
            mse_before: o(3)?,
            mse_after: o(4)?,
            clone_acc: o(5)?,
            orig_acc: o(6)?,
            label_inf_acc: o(7)?,
            seconds: r[8].parse().map_err(|_| bad(8))?,
            seed: r[9].parse().map_err(|_| bad(9))?,
            config_hash: r[10].to_string(),
        })
    }
}

/// Reads a report written by [`ReportWriter`], checking the header.
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    rdr.records().map(|r| ReportRow::from_record(&r?)).collect()
}

/// Append-only CSV writer, flushed after every row.
pub struct ReportWriter {
    writer: csv::Writer<fs::File>,
    done: HashSet<(String, usize, bool, String)>,
}

impl ReportWriter {
    /// Opens `path` for appending, writing the header if the file is new.
    /// Rows already present are remembered so a resumed sweep can skip them.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = if path.exists() { read_report(path)? } else { Vec::new() };
        let fresh = !path.exists();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(CSV_HEADER)?;
            writer.flush()?;
        }
        Ok(ReportWriter {
            writer,
            done: existing.iter().map(Self::key).collect(),
        })
    }

    fn key(r: &ReportRow) -> (String, usize, bool, String) {
        (r.dataset.clone(), r.depth, r.trained, r.config_hash.clone())
    }

    pub fn has(&self, dataset: &str, depth: usize, trained: bool, config_hash: &str) -> bool {
        self.done
            .contains(&(dataset.to_string(), depth, trained, config_hash.to_string()))
    }

    pub fn append(&mut self, row: &ReportRow) -> Result<()> {
        self.writer.write_record(row.record())?;
        self.writer.flush()?;
        self.done.insert(Self::key(row));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    /// Name used in the report and the image directory.
    pub dataset: String,
    pub arch: Arch,
    pub depths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Size of the class-balanced set drawn from the test split for inversion.
    pub attack_images: usize,
    /// Schedule, step counts and learning rates; λ comes from `lambda` or the
    /// per-depth default.
    pub inversion: InversionConfig,
    pub lambda: Option<f32>,
    /// One-example steps used for label inference (0 skips it).
    pub label_steps: usize,
    pub label_scope: GradScope,
    /// Epochs used to train a new head on top of a stolen clone (0 skips it).
    pub head_epochs: usize,
    /// Attack every epoch's snapshot, not only the first and last.
    pub epoch_replay: bool,
    pub out_dir: PathBuf,
    pub write_images: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochPoint {
    pub depth: usize,
    pub epoch: usize,
    pub mse: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub epoch_curve: Vec<EpochPoint>,
}

/// Trains the model on `train`, keeping the initial weights and one snapshot per epoch.
pub fn train_with_snapshots(cfg: &SweepConfig, train: &Dataset) -> Result<Vec<SplitModel>> {
    let mut model = SplitModel::build(cfg.arch, cfg.seed);
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let mut snaps = vec![model.clone()];
    for epoch in 0..cfg.epochs {
        let seed = cfg.seed.wrapping_add(epoch as u64);
        train_epochs(&mut model.net, &mut opt, train, 1, cfg.batch_size, seed)?;
        snaps.push(model.clone());
    }
    Ok(snaps)
}

/// Inverts `targets` (a class-balanced set) through the first `depth` layers of `model`.
pub fn attack_snapshot(
    model: &SplitModel,
    depth: usize,
    targets: &Dataset,
    inv: &InversionConfig,
) -> Result<attacks::Inversion> {
    let (head, _) = model.split_at(depth)?;
    let head = LayerStack::new(head.to_vec());
    // exactly what the server receives for these examples
    let smashed = head.predict(&targets.images)?;
    attacks::invert_targets(&smashed, &head, targets.example_shape(), inv, Some(&targets.images))
}

/// Runs every `(depth, trained)` cell, appending a CSV row per cell to
/// `<out_dir>/report.csv`; cells already present with the same config hash
/// are skipped.
pub fn run_depth_sweep(cfg: &SweepConfig, train: &Dataset, test: &Dataset) -> Result<ExperimentReport> {
    let mut depths = cfg.depths.clone();
    depths.sort_unstable();
    depths.dedup();
    let mut writer = ReportWriter::open(&cfg.out_dir.join("report.csv"))?;
    let pending: Vec<usize> = depths
        .iter()
        .copied()
        .filter(|&d| [false, true].iter().any(|&t| !writer.has(&cfg.dataset, d, t, &cfg.config_hash)))
        .collect();
    let mut report = ExperimentReport::default();
    if pending.is_empty() {
        return Ok(report);
    }
    let snaps = train_with_snapshots(cfg, train)?;
    let targets = sample_class_balanced(test, 1.max(cfg.attack_images.div_ceil(NUM_CLASSES)), cfg.seed)?
        .take(cfg.attack_images);
    let mut curve_file = if cfg.epoch_replay {
        let path = cfg.out_dir.join("epochs.csv");
        let fresh = !path.exists();
        let mut w = csv::Writer::from_writer(fs::OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            w.write_record(["dataset", "depth", "epoch", "mse", "seed", "config_hash"])?;
        }
        Some(w)
    } else {
        None
    };

    for depth in pending {
        let inv = InversionConfig {
            lambda: cfg.lambda.unwrap_or_else(|| attacks::default_lambda(depth)),
            seed: cfg.seed,
            ..cfg.inversion.clone()
        };
        let epochs: Vec<usize> = if cfg.epoch_replay {
            (0..=cfg.epochs).collect()
        } else {
            vec![0, cfg.epochs]
        };
        let mut attacked = Vec::new();
        for &e in &epochs {
            let started = Instant::now();
            let r = attack_snapshot(&snaps[e], depth, &targets, &inv)?;
            let mse = mse_images(&r.x, &targets.images)?;
            if let Some(w) = curve_file.as_mut() {
                w.write_record([
                    cfg.dataset.clone(),
                    depth.to_string(),
                    e.to_string(),
                    format!("{mse:.6}"),
                    cfg.seed.to_string(),
                    cfg.config_hash.clone(),
                ])?;
                w.flush()?;
                report.epoch_curve.push(EpochPoint { depth, epoch: e, mse });
            }
            attacked.push((e, r, mse, started.elapsed().as_secs_f32()));
        }
        for trained in [false, true] {
            if writer.has(&cfg.dataset, depth, trained, &cfg.config_hash) {
                continue;
            }
            let started = Instant::now();
            let epoch = if trained { cfg.epochs } else { 0 };
            let snap = &snaps[epoch];
            let (_, r, mse, attack_secs) = attacked
                .iter()
                .find(|a| a.0 == epoch)
                .expect("first and last epochs are always attacked");
            let mse = *mse;
            if cfg.write_images {
                let dir = cfg
                    .out_dir
                    .join(&cfg.dataset)
                    .join(depth.to_string())
                    .join(if trained { "after" } else { "before" });
                let ext = pnm_extension(targets.example_shape()[0]);
                dump_image(&targets.images, &dir.join(format!("targets.{ext}")))?;
                dump_image(&r.x, &dir.join(format!("estimates.{ext}")))?;
                dump_rows(&[&targets.images, &r.x], &dir.join(format!("grid.{ext}")))?;
            }
            let clone_acc = if trained && cfg.head_epochs > 0 {
                let (_, rest) = snap.split_at(depth)?;
                Some(clone_accuracy(
                    &r.clone,
                    rest,
                    train,
                    test,
                    cfg.head_epochs,
                    cfg.batch_size,
                    cfg.lr,
                    cfg.seed.wrapping_add(17),
                )?)
            } else {
                None
            };
            let label_inf_acc = if trained && cfg.label_steps > 0 && depth <= 2 {
                Some(
                    run_label_inference(
                        cfg.arch,
                        Topology::ServerData,
                        depth,
                        train,
                        cfg.label_steps,
                        cfg.seed,
                        cfg.label_scope,
                    )?
                    .accuracy,
                )
            } else {
                None
            };
            let row = ReportRow {
                dataset: cfg.dataset.clone(),
                depth,
                trained,
                mse_before: (!trained).then_some(mse),
                mse_after: trained.then_some(mse),
                clone_acc,
                orig_acc: Some(eval_accuracy(&snap.net, test)?),
                label_inf_acc,
                seconds: attack_secs + started.elapsed().as_secs_f32(),
                seed: cfg.seed,
                config_hash: cfg.config_hash.clone(),
            };
            writer.append(&row)?;
            log::info!(
                "{} depth {depth} {}: mse {mse:.4} ({:.1}s)",
                cfg.dataset,
                if trained { "trained" } else { "untrained" },
                row.seconds
            );
            report.rows.push(row);
        }
    }
    Ok(report)
}
