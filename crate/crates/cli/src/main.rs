mod args;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;
use ssdml::data::{load_csv, make_blobs, parse_idx, Dataset};
use ssdml::eval::EvalReport;
use ssdml::gradcheck::{run_suite, Suite};
use ssdml::graph::{build_knn_with, neighbor_matrix, seed_affinity, NeighborGraph};
use ssdml::linalg::fmt_f64;
use ssdml::mining::mine_triplets_with;
use ssdml::propagation::{
    propagate_direct_with, propagate_iterative_with, symmetrize, AffinityMatrix, DEFAULT_MAX_ITER, DEFAULT_TOL,
    DIRECT_SOLVE_MAX_NODES,
};
use ssdml::trainer::{evaluate_checkpoint_with, train_with, EpochRecord, Model};
use ssdml::{Error, Exec};

use args::{BlobArgs, Cli, Command, DataArgs, EvalArgs, GradcheckArgs, GraphArgs, TrainArgs};

enum Failure {
    Usage(String),
    Run(Error),
    /// The reader of stdout went away; not an error for a CLI.
    ClosedPipe,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::ClosedPipe;
        }
        Failure::Run(Error::Format(format!("write failed: {e}")))
    }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match run(cli) {
        Ok(code) => code,
        Err(Failure::ClosedPipe) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let exec = thread_setup(cli.threads)?;
    match cli.command {
        Command::Train(a) => train(&a, exec),
        Command::Eval(a) => eval(&a, exec),
        Command::Propagate(a) => propagate(&a, exec),
        Command::Mine(a) => mine(&a, exec),
        Command::Blobs(a) => blobs(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

#[cfg(feature = "parallel")]
fn thread_setup(threads: usize) -> Result<Exec, Failure> {
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    if threads == 1 {
        return Ok(Exec::Sequential);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {threads} threads: {e}")))?;
    Ok(Exec::Parallel)
}

#[cfg(not(feature = "parallel"))]
fn thread_setup(threads: usize) -> Result<Exec, Failure> {
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    if threads > 1 {
        log::warn!("built without the parallel feature; running on one thread");
    }
    Ok(Exec::Sequential)
}

fn load(data: &DataArgs) -> Result<Dataset, Failure> {
    match (&data.data, &data.images_idx, &data.labels_idx) {
        (Some(path), _, _) => Ok(load_csv(path, Some(&data.label_column))?),
        (None, Some(images), Some(labels)) => Ok(parse_idx(images, labels)?),
        _ => Err(Failure::Usage(
            "an input is required: --data, or --images-idx with --labels-idx".into(),
        )),
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            Box::new(BufWriter::new(file))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_history(w: &mut dyn Write, history: &[EpochRecord]) -> io::Result<()> {
    for rec in history {
        writeln!(w, "{}", serde_json::to_string(rec).map_err(io::Error::other)?)?;
    }
    w.flush()
}

fn train(a: &TrainArgs, exec: Exec) -> Outcome {
    let cfg = a.config();
    let dataset = load(&a.data)?;
    let mut out = sink(a.out.as_deref())?;
    match train_with(&dataset, &cfg, exec) {
        Ok(model) => {
            model.save(&a.model)?;
            write_history(&mut out, &model.history)?;
            log::info!("best epoch {}; model written to {}", model.best_epoch, a.model.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Diverged { epoch, history }) => {
            write_history(&mut out, &history)?;
            Err(Error::Diverged { epoch, history }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn report_line(report: &EvalReport) -> String {
    report.to_json().to_string()
}

fn eval(a: &EvalArgs, exec: Exec) -> Outcome {
    if a.recall_ks.is_empty() {
        return Err(Failure::Usage("--recall-ks needs at least one value".into()));
    }
    let model = Model::load(&a.model)?;
    let dataset = load(&a.data)?;
    let report = evaluate_checkpoint_with(&model, &dataset, &a.recall_ks, a.seed, exec)?;
    let mut out = sink(a.out.as_deref())?;
    writeln!(out, "{}", report_line(&report))?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

/// kNN graph on raw features and the symmetric propagated affinities.
fn graph_and_affinity(a: &GraphArgs, exec: Exec) -> Result<(NeighborGraph, AffinityMatrix), Failure> {
    let mut dataset = load(&a.data)?;
    if let Some(n) = a.labeled_per_class {
        dataset = dataset.retain_labels_per_class(n, a.seed);
    }
    let graph = build_knn_with(&dataset.features, a.k, exec)?;
    let q = neighbor_matrix(&graph);
    let w0 = seed_affinity(&dataset.labels);
    let w = if dataset.len() <= DIRECT_SOLVE_MAX_NODES {
        propagate_direct_with(&q, &w0, a.gamma, exec)?
    } else {
        propagate_iterative_with(&q, &w0, a.gamma, DEFAULT_TOL, DEFAULT_MAX_ITER, exec)?.w
    };
    let aff = AffinityMatrix {
        w: symmetrize(&w),
        gamma: a.gamma,
    };
    Ok((graph, aff))
}

fn propagate(a: &GraphArgs, exec: Exec) -> Outcome {
    let (_, aff) = graph_and_affinity(a, exec)?;
    let n = aff.len();
    let mut out = sink(a.out.as_deref())?;
    let header: Vec<String> = (0..n).map(|j| format!("n{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| fmt_f64(aff.get(i, j))).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn mine(a: &GraphArgs, exec: Exec) -> Outcome {
    if !a.k.is_multiple_of(2) {
        return Err(Failure::Usage(format!("--k must be even for mining, got {}", a.k)));
    }
    let (graph, aff) = graph_and_affinity(a, exec)?;
    let anchors: Vec<usize> = (0..graph.len()).collect();
    let triplets = mine_triplets_with(&aff, &graph, &anchors, exec)?;
    let mut out = sink(a.out.as_deref())?;
    writeln!(out, "anchor,positive,negative")?;
    for t in triplets {
        writeln!(out, "{},{},{}", t.anchor, t.positive, t.negative)?;
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn blobs(a: &BlobArgs) -> Outcome {
    let dataset = make_blobs(&a.config())?;
    let mut out = sink(a.out.as_deref())?;
    dataset.write_csv_to(&mut out)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let mut all_pass = true;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for suite in Suite::ALL {
        let r = run_suite(suite, a.instances, a.seed)?;
        let pass = r.max_rel_error <= a.tol;
        all_pass &= pass;
        let line = json!({
            "suite": suite.name(),
            "instances": r.instances,
            "max_rel_error": r.max_rel_error,
            "pass": pass,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
