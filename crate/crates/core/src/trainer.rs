//! The training loop.
//!
//! Each partition (all labeled rows plus a sample of unlabeled rows) is
//! embedded with the current encoder, linked into a kNN graph and, for the
//! main method, turned into triplets through affinity propagation and
//! neighborhood mining. Every mini-batch first refits the metric with the
//! encoder frozen, then takes one SGD step on the encoder with the metric
//! frozen. The model with the best validation R@1 is returned.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    labeled_pairs, lrml_grad_embeddings, lrml_gradient, lrml_objective, projected_gradient_descent,
    seraph_grad_embeddings, seraph_gradient, seraph_objective, LabeledPair, LrmlConfig, PsdMetric, SeraphConfig,
};
use crate::data::{sample_partition, split_validation, Dataset};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate_embeddings, EvalReport, DEFAULT_RECALL_KS};
use crate::exec::Exec;
use crate::graph::{build_knn_with, laplacian, neighbor_matrix, seed_affinity, symmetric_adjacency};
use crate::linalg::fmt_f64;
use crate::manifold::{optimize_l, Constraint, OptimizerConfig};
use crate::metric::{angular_loss_grad_embeddings, AngularConfig, MetricL, TripletDiffs};
use crate::mining::{batch_triplets, epoch_seed, mine_triplets_with, Triplet};
use crate::propagation::AffinityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Seraph,
    Lrml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::Seraph => "seraph",
            Method::Lrml => "lrml",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "seraph" => Ok(Method::Seraph),
            "lrml" => Ok(Method::Lrml),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub gamma: f64,
    pub k: usize,
    pub alpha_deg: f64,
    /// Columns of `L` for the main method; the baselines learn a full `d × d` metric.
    pub embed_dim: usize,
    pub encoder: bool,
    pub orth: bool,
    /// Encoder SGD learning rate.
    pub lr: f64,
    pub batch_triplets: usize,
    /// Unlabeled rows per partition; 0 takes all of them.
    pub partition_size: usize,
    pub epochs_per_partition: usize,
    pub max_epochs: usize,
    pub inner_l_iters: usize,
    /// First trial step (Frobenius length) of every inner metric solve.
    pub step0: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Drop training labels beyond this many per class (after the validation split).
    pub labeled_per_class: Option<usize>,
    pub seraph: SeraphConfig,
    pub lrml: LrmlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            gamma: 0.99,
            k: 10,
            alpha_deg: 40.0,
            embed_dim: 8,
            encoder: true,
            orth: true,
            lr: 1e-4,
            batch_triplets: 100,
            partition_size: 9000,
            epochs_per_partition: 10,
            max_epochs: 50,
            inner_l_iters: 10,
            step0: 0.1,
            seed: 0,
            val_fraction: 0.15,
            labeled_per_class: None,
            seraph: SeraphConfig::default(),
            lrml: LrmlConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return bad(format!("k must be even and at least 2, got {}", self.k));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        AngularConfig::new(self.alpha_deg)?;
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be a non-negative number, got {}", self.lr));
        }
        if self.batch_triplets == 0 || self.epochs_per_partition == 0 {
            return bad("batch size and epochs per partition must be at least 1".into());
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return bad(format!("step0 must be positive, got {}", self.step0));
        }
        if self.labeled_per_class == Some(0) {
            return bad("labeled_per_class must be at least 1".into());
        }
        self.seraph.validate()?;
        self.lrml.validate()
    }

    fn uses_stiefel(&self) -> bool {
        self.method == Method::Ours && self.orth
    }
}

/// One line of training history; epoch 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub partition: Option<usize>,
    /// Mean loss per training term over the epoch's batches.
    pub loss: Option<f64>,
    pub val_nmi: f64,
    pub val_r1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub metric: MetricL,
    pub encoder: Option<Encoder>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters this model holds.
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    best_epoch: usize,
    config: TrainConfig,
}

const MAGIC: &str = "ssdml-model";
const VERSION: &str = "v1";

impl Model {
    /// Encoder output (or the raw rows without an encoder) projected by `L`.
    pub fn embed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = features(self.encoder.as_ref(), x)?;
        crate::metric::embed(&self.metric.l, &z)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (d, l) = self.metric.l.shape();
        let (enc, norm) = match &self.encoder {
            Some(e) => (1, e.normalize as u8),
            None => (0, 0),
        };
        writeln!(w, "{MAGIC} {VERSION} {d} {l} {enc} {norm}")?;
        write_matrix(w, &self.metric.l)?;
        if let Some(e) = &self.encoder {
            write_matrix(w, &e.a)?;
            write_matrix(w, &DMatrix::from_row_slice(1, e.b.len(), e.b.as_slice()))?;
        }
        let meta = ModelMeta {
            best_epoch: self.best_epoch,
            config: self.config.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&meta)?)?;
        for rec in &self.history {
            writeln!(w, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            lines.push(line.map_err(|e| Error::io(path, e))?);
        }
        Self::parse_lines(&lines)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::parse_lines(&lines)
    }

    fn parse_lines(lines: &[String]) -> Result<Self> {
        let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = it.next().ok_or_else(|| Error::Format("model file is empty".into()))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 6 || tokens[0] != MAGIC || tokens[1] != VERSION {
            return Err(Error::Format(format!("bad model header {header:?}")));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad model header field {s:?}")))
        };
        let (d, l, enc, norm) = (num(tokens[2])?, num(tokens[3])?, num(tokens[4])?, num(tokens[5])?);
        if enc > 1 || norm > 1 {
            return Err(Error::Format("encoder and normalize flags must be 0 or 1".into()));
        }
        let lmat = read_matrix(&mut it, d, Some(l))?;
        let encoder = if enc == 1 {
            let a = read_matrix(&mut it, d, None)?;
            let b = read_matrix(&mut it, 1, Some(d))?;
            Some(Encoder::new(a, DVector::from_column_slice(b.as_slice()), norm == 1)?)
        } else {
            None
        };
        let (line_no, meta_line) = it.next().ok_or_else(|| Error::Format("model file lacks its config line".into()))?;
        let meta: ModelMeta = serde_json::from_str(meta_line)
            .map_err(|e| Error::Format(format!("line {}: {e}", line_no + 1)))?;
        let history = it
            .map(|(n, line)| {
                serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<EpochRecord>>>()?;
        let metric = MetricL::new(lmat, meta.config.uses_stiefel())?;
        Ok(Model {
            metric,
            encoder,
            config: meta.config,
            history,
            best_epoch: meta.best_epoch,
        })
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", cells.join(" "))?;
    }
    Ok(())
}

fn read_matrix<'a, I>(it: &mut I, rows: usize, cols: Option<usize>) -> Result<DMatrix<f64>>
where
    I: Iterator<Item = (usize, &'a String)>,
{
    let mut data = Vec::new();
    let mut width = cols;
    for _ in 0..rows {
        let (n, line) = it.next().ok_or_else(|| Error::Format("model file ends inside a matrix".into()))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("line {}: bad number {t:?}", n + 1))))
            .collect::<Result<_>>()?;
        let expected = *width.get_or_insert(row.len());
        if row.len() != expected || expected == 0 {
            return Err(Error::Format(format!(
                "line {}: expected {expected} values, found {}",
                n + 1,
                row.len()
            )));
        }
        data.extend(row);
    }
    Ok(DMatrix::from_row_slice(rows, width.unwrap_or(0), &data))
}

fn features(encoder: Option<&Encoder>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match encoder {
        Some(e) => e.forward(x),
        None => Ok(x.clone()),
    }
}

/// Independent seed streams derived from the configured seed.
fn stream(seed: u64, tag: u64, index: u64) -> u64 {
    epoch_seed(epoch_seed(seed, tag), index)
}

const SEED_SPLIT: u64 = 1;
const SEED_MASK: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_PARTITION: u64 = 4;
const SEED_BATCH: u64 = 5;
const SEED_EVAL: u64 = 6;

/// Mutable parameters during training.
#[derive(Clone)]
struct Params {
    metric: MetricL,
    encoder: Option<Encoder>,
    /// Full metric of the pairwise baselines; `metric` holds its factor.
    psd: Option<PsdMetric>,
}

impl Params {
    fn init(cfg: &TrainConfig, d: usize) -> Result<Self> {
        let encoder = cfg.encoder.then(|| Encoder::identity_init(d, d, true));
        Ok(match cfg.method {
            Method::Ours => {
                if cfg.embed_dim > d {
                    return Err(Error::Config(format!(
                        "embed_dim {} exceeds the feature dimension {d}",
                        cfg.embed_dim
                    )));
                }
                let mut metric = MetricL::random(d, cfg.embed_dim, stream(cfg.seed, SEED_INIT, 0))?;
                metric.orth_enforced = cfg.orth;
                Params {
                    metric,
                    encoder,
                    psd: None,
                }
            }
            Method::Seraph | Method::Lrml => {
                let psd = PsdMetric::identity(d);
                Params {
                    metric: MetricL::new(psd.factor(), false)?,
                    encoder,
                    psd: Some(psd),
                }
            }
        })
    }

    fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        features(self.encoder.as_ref(), x)
    }

    fn encoder_step(&mut self, x: &DMatrix<f64>, upstream: &DMatrix<f64>, lr: f64) -> Result<()> {
        if let Some(enc) = self.encoder.as_mut() {
            let grads = enc.backward(x, upstream)?;
            enc.sgd_update(&grads, lr)?;
        }
        Ok(())
    }
}

struct Validation {
    x: DMatrix<f64>,
    labels: Vec<usize>,
}

fn validate(p: &Params, val: &Validation, cfg: &TrainConfig, exec: Exec) -> Result<(f64, f64)> {
    let z = crate::metric::embed(&p.metric.l, &p.features(&val.x)?)?;
    let rep = evaluate_embeddings(&z, &val.labels, &[1], stream(cfg.seed, SEED_EVAL, 0), exec)?;
    Ok((rep.nmi, rep.recall(1).unwrap_or(0.0)))
}

/// Rows touched by a batch, and the batch's node ids remapped into them.
fn compact(nodes: impl Iterator<Item = usize>) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let mut uniq: Vec<usize> = nodes.collect();
    uniq.sort_unstable();
    uniq.dedup();
    let pos = uniq.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    (uniq, pos)
}

/// Everything derived from one partition's graph.
struct PartitionData {
    x: DMatrix<f64>,
    n_labeled: usize,
    triplets: Vec<Triplet>,
    pairs: Vec<LabeledPair>,
    /// Weighted undirected kNN edges `(i, j, w)` with `i < j`.
    edges: Vec<(usize, usize, f64)>,
}

fn prepare_partition(train_set: &Dataset, p: &Params, cfg: &TrainConfig, index: usize, exec: Exec) -> Result<PartitionData> {
    let unlabeled = train_set.unlabeled_indices().len();
    let n_p = if cfg.partition_size == 0 {
        unlabeled
    } else {
        cfg.partition_size.min(unlabeled)
    };
    let part = sample_partition(train_set, n_p, stream(cfg.seed, SEED_PARTITION, index as u64))?;
    let nodes = part.nodes();
    let x = train_set.features.select_rows(&nodes);
    let labels: Vec<Option<usize>> = nodes.iter().map(|&i| train_set.labels[i]).collect();
    let n = nodes.len();
    if cfg.k >= n {
        return Err(Error::Config(format!("k = {} needs a partition of more than {n} nodes", cfg.k)));
    }
    let z = p.features(&x)?;
    let graph = build_knn_with(&z, cfg.k, exec)?;

    let mut data = PartitionData {
        x,
        n_labeled: part.labeled_idx.len(),
        triplets: Vec::new(),
        pairs: Vec::new(),
        edges: Vec::new(),
    };
    match cfg.method {
        Method::Ours => {
            let w = AffinityMatrix::propagate(&neighbor_matrix(&graph), &seed_affinity(&labels), cfg.gamma)?;
            let anchors: Vec<usize> = (0..n).collect();
            data.triplets = mine_triplets_with(&w, &graph, &anchors, exec)?;
            if data.triplets.is_empty() {
                return Err(Error::NoTriplets);
            }
        }
        Method::Seraph | Method::Lrml => {
            data.pairs = labeled_pairs(&labels);
            if data.pairs.is_empty() {
                return Err(Error::Config("pairwise baselines need at least two labeled rows".into()));
            }
            if cfg.method == Method::Lrml {
                let adj = symmetric_adjacency(&graph);
                for i in 0..n {
                    for j in i + 1..n {
                        if adj[(i, j)] > 0.0 {
                            data.edges.push((i, j, adj[(i, j)]));
                        }
                    }
                }
            }
        }
    }
    Ok(data)
}

/// Runs one epoch over a partition; returns the mean loss per training term.
fn run_epoch(data: &PartitionData, p: &mut Params, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    match cfg.method {
        Method::Ours => epoch_ours(data, p, cfg, seed),
        Method::Seraph | Method::Lrml => epoch_pairwise(data, p, cfg, seed),
    }
}

fn epoch_ours(data: &PartitionData, p: &mut Params, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let alpha = AngularConfig::new(cfg.alpha_deg)?;
    let ocfg = OptimizerConfig {
        max_iter: cfg.inner_l_iters,
        step0: cfg.step0,
        constraint: if cfg.orth {
            Constraint::Stiefel
        } else {
            Constraint::Euclidean
        },
        ..OptimizerConfig::default()
    };
    let mut total = 0.0;
    for batch in batch_triplets(&data.triplets, cfg.batch_triplets, seed)? {
        let (uniq, pos) = compact(batch.iter().flat_map(|t| [t.anchor, t.positive, t.negative]));
        let local: Vec<Triplet> = batch
            .iter()
            .map(|t| Triplet::new(pos[&t.anchor], pos[&t.positive], pos[&t.negative]))
            .collect();
        let xb = data.x.select_rows(&uniq);
        let zb = p.features(&xb)?;
        let diffs = TripletDiffs::new(&zb, &local)?;
        let out = optimize_l(&p.metric, |l| diffs.loss_and_grad(l, alpha), &ocfg)?;
        total += out.final_value();
        p.metric = out.metric;
        if p.encoder.is_some() {
            let up = angular_loss_grad_embeddings(&p.metric.l, &zb, &local, alpha)?;
            p.encoder_step(&xb, &up, cfg.lr)?;
        }
    }
    Ok(total / data.triplets.len() as f64)
}

fn epoch_pairwise(data: &PartitionData, p: &mut Params, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let n = data.x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = data.pairs.clone();
    pairs.shuffle(&mut rng);
    // as many training terms per epoch as the main method would mine
    pairs.truncate(n * cfg.k / 2);
    let unlabeled: Vec<usize> = (data.n_labeled..n).collect();

    let mut total = 0.0;
    let mut terms = 0usize;
    for chunk in pairs.chunks(cfg.batch_triplets) {
        let extra: Vec<(usize, usize, f64)> = match cfg.method {
            Method::Seraph if unlabeled.len() >= 2 => (0..chunk.len())
                .map(|_| {
                    let i = unlabeled[rng.random_range(0..unlabeled.len())];
                    let mut j = i;
                    while j == i {
                        j = unlabeled[rng.random_range(0..unlabeled.len())];
                    }
                    (i, j, 1.0)
                })
                .collect(),
            Method::Lrml if !data.edges.is_empty() => (0..chunk.len())
                .map(|_| data.edges[rng.random_range(0..data.edges.len())])
                .collect(),
            _ => Vec::new(),
        };
        let (uniq, pos) = compact(chunk.iter().flat_map(|q| [q.i, q.j]).chain(extra.iter().flat_map(|e| [e.0, e.1])));
        let lp: Vec<LabeledPair> = chunk
            .iter()
            .map(|q| LabeledPair {
                i: pos[&q.i],
                j: pos[&q.j],
                label: q.label,
            })
            .collect();
        let xb = data.x.select_rows(&uniq);
        let zb = p.features(&xb)?;
        let start = p.psd.clone().expect("pairwise methods keep a PSD metric");

        let (psd, value, up) = if cfg.method == Method::Seraph {
            let up_pairs: Vec<(usize, usize)> = extra.iter().map(|e| (pos[&e.0], pos[&e.1])).collect();
            let sc = cfg.seraph;
            let out = projected_gradient_descent(
                &start,
                |m| Ok((seraph_objective(m, &zb, &lp, &up_pairs, &sc)?, seraph_gradient(m, &zb, &lp, &up_pairs, &sc)?)),
                cfg.inner_l_iters,
                cfg.step0,
            )?;
            let value = *out.values.last().expect("initial value recorded");
            let up = seraph_grad_embeddings(&out.metric.m, &zb, &lp, &up_pairs, &sc)?;
            (out.metric, value, up)
        } else {
            let mut w = DMatrix::zeros(uniq.len(), uniq.len());
            for &(i, j, wij) in &extra {
                let (a, b) = (pos[&i], pos[&j]);
                w[(a, b)] += wij;
                w[(b, a)] += wij;
            }
            let lap = laplacian(&w)?;
            let lc = cfg.lrml;
            let grad = lrml_gradient(&zb, &lp, &lap, &lc)?;
            let out = projected_gradient_descent(
                &start,
                |m| Ok((lrml_objective(m, &zb, &lp, &lap, &lc)?, grad.clone())),
                cfg.inner_l_iters,
                cfg.step0,
            )?;
            let value = *out.values.last().expect("initial value recorded");
            let up = lrml_grad_embeddings(&out.metric.m, &zb, &lp, &lap, &lc)?;
            (out.metric, value, up)
        };
        total += value;
        terms += chunk.len() + extra.len();
        p.metric = MetricL::new(psd.factor(), false)?;
        p.psd = Some(psd);
        p.encoder_step(&xb, &up, cfg.lr)?;
    }
    Ok(total / terms.max(1) as f64)
}

/// The `(train, validation)` pair `train` works on: a stratified split of the
/// labeled rows, then the label budget applied to the training side.
pub fn training_split(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train_set, val_set) = split_validation(dataset, cfg.val_fraction, stream(cfg.seed, SEED_SPLIT, 0))?;
    let train_set = match cfg.labeled_per_class {
        Some(n) => train_set.retain_labels_per_class(n, stream(cfg.seed, SEED_MASK, 0)),
        None => train_set,
    };
    Ok((train_set, val_set))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    train_with(dataset, cfg, Exec::default())
}

/// Train on `dataset`. Labeled rows are first split into train and validation;
/// validation rows never enter a partition.
pub fn train_with(dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<Model> {
    cfg.validate()?;
    if dataset.labeled_indices().is_empty() {
        return Err(Error::Config("training needs labeled rows".into()));
    }
    let (train_set, val_set) = training_split(dataset, cfg)?;
    if val_set.len() < 2 {
        return Err(Error::Config("validation split needs at least two labeled rows".into()));
    }
    let val = Validation {
        x: val_set.features.clone(),
        labels: val_set.labels.iter().map(|y| y.expect("validation rows are labeled")).collect(),
    };

    let mut params = Params::init(cfg, dataset.dim())?;
    let (nmi0, r10) = validate(&params, &val, cfg, exec)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        partition: None,
        loss: None,
        val_nmi: nmi0,
        val_r1: r10,
    }];
    let mut best: Option<(f64, usize, Params)> = None;

    let mut epoch = 0;
    let mut partition = 0;
    while epoch < cfg.max_epochs {
        let data = prepare_partition(&train_set, &params, cfg, partition, exec)?;
        log::info!(
            "partition {partition}: {} nodes, {} triplets, {} labeled pairs",
            data.x.nrows(),
            data.triplets.len(),
            data.pairs.len()
        );
        for _ in 0..cfg.epochs_per_partition {
            if epoch >= cfg.max_epochs {
                break;
            }
            epoch += 1;
            let loss = run_epoch(&data, &mut params, cfg, stream(cfg.seed, SEED_BATCH, epoch as u64));
            let loss = match loss {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Numerical(_)) | Err(Error::DegenerateEmbedding { .. }) => {
                    return Err(Error::Diverged { epoch, history });
                }
                Err(e) => return Err(e),
            };
            let (val_nmi, val_r1) = validate(&params, &val, cfg, exec)?;
            log::info!("epoch {epoch}: loss {loss:.6} val R@1 {val_r1:.1} NMI {val_nmi:.4}");
            history.push(EpochRecord {
                epoch,
                partition: Some(partition),
                loss: Some(loss),
                val_nmi,
                val_r1,
            });
            if best.as_ref().is_none_or(|b| val_r1 > b.0) {
                best = Some((val_r1, epoch, params.clone()));
            }
        }
        partition += 1;
    }

    let (best_epoch, chosen) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    Ok(Model {
        metric: chosen.metric,
        encoder: chosen.encoder,
        config: cfg.clone(),
        history,
        best_epoch,
    })
}

pub fn evaluate_checkpoint(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_checkpoint_with(model, dataset, &DEFAULT_RECALL_KS, model.config.seed, Exec::default())
}

/// Embed the labeled rows of `dataset` with `model` and score them.
pub fn evaluate_checkpoint_with(model: &Model, dataset: &Dataset, ks: &[usize], seed: u64, exec: Exec) -> Result<EvalReport> {
    let rows = dataset.labeled_indices();
    if rows.is_empty() {
        return Err(Error::Config("evaluation needs labeled rows".into()));
    }
    let x = dataset.features.select_rows(&rows);
    let labels: Vec<usize> = rows.iter().map(|&i| dataset.labels[i].expect("labeled row")).collect();
    let z = model.embed(&x)?;
    evaluate_embeddings(&z, &labels, ks, stream(seed, SEED_EVAL, 1), exec)
}

/// A model that applies `L = I` to the raw features, used as the untrained
/// reference point.
pub fn identity_model(d: usize, cfg: &TrainConfig) -> Model {
    Model {
        metric: MetricL::identity(d),
        encoder: None,
        config: cfg.clone(),
        history: Vec::new(),
        best_epoch: 0,
    }
}
