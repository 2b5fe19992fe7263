//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr so the summary survives output capture.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssdml::baselines::laplacian_term;
use ssdml::data::{make_blobs, BlobConfig, Dataset};
use ssdml::eval::{nmi, recall_at_k_with};
use ssdml::gradcheck::{run_suite, Suite};
use ssdml::graph::{build_knn, laplacian, neighbor_matrix, seed_affinity, NeighborGraph};
use ssdml::linalg::{orthonormality_error, random_matrix};
use ssdml::manifold::{optimize_l, OptimizerConfig};
use ssdml::metric::{angular_loss, angular_loss_grad_l, AngularConfig, MetricL};
use ssdml::mining::{mine_triplets_with, Triplet};
use ssdml::propagation::{propagate_direct, propagate_iterative, AffinityMatrix};
use ssdml::trainer::{
    evaluate_checkpoint_with, identity_model, train_with, training_split, EpochRecord, Model, TrainConfig,
};
use ssdml::Exec;

fn report(n: usize, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} ({detail})");
}

// ---------- 1 ----------

#[test]
fn criterion_01_propagation_iterative_matches_direct() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let gamma = [0.5, 0.9, 0.99][inst % 3];
        let n = rng.random_range(12..=200usize);
        let k = rng.random_range(1..=10usize.min(n - 1));
        let z = random_matrix(n, 3, &mut rng);
        let q = neighbor_matrix(&build_knn(&z, k).unwrap());
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| rng.random_bool(0.3).then(|| rng.random_range(0..4)))
            .collect();
        let w0 = seed_affinity(&labels);
        let direct = propagate_direct(&q, &w0, gamma).unwrap();
        // error <= residual * γ/(1−γ) for this contraction
        let tol = 1e-10 * (1.0 - gamma);
        let iter = propagate_iterative(&q, &w0, gamma, tol, 100_000).unwrap();
        worst = worst.max((direct - iter.w).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-8 && secs < 10.0;
    report(1, pass, format!("max abs diff {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

// ---------- 2 ----------

#[test]
fn criterion_02_gradient_suites() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for suite in Suite::ALL {
        let r = run_suite(suite, 100, 2024).unwrap();
        pass &= r.max_rel_error <= 1e-4;
        lines.push(format!("{} {:.1e}", suite.name(), r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    report(2, pass, format!("{}, {secs:.1}s", lines.join(", ")));
    assert!(pass);
}

// ---------- 3 ----------

fn random_triplets(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let s = index::sample(rng, n, 3);
            Triplet::new(s.index(0), s.index(1), s.index(2))
        })
        .collect()
}

#[test]
fn criterion_03_stiefel_steps_stay_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let alpha = AngularConfig::new(40.0).unwrap();
    let (mut steps, mut worst_orth, mut worst_rise) = (0usize, 0.0_f64, f64::NEG_INFINITY);
    while steps < 1000 {
        let z = random_matrix(30, 8, &mut rng);
        let batch = random_triplets(&mut rng, 30, 40);
        let start = MetricL::random(8, 3, rng.random()).unwrap();
        let mut seen = Vec::new();
        let cfg = OptimizerConfig {
            max_iter: 25,
            grad_tol: 0.0,
            ..Default::default()
        };
        let out = optimize_l(
            &start,
            |l| {
                seen.push(orthonormality_error(l));
                Ok((angular_loss(l, &z, &batch, alpha)?, angular_loss_grad_l(l, &z, &batch, alpha)?))
            },
            &cfg,
        )
        .unwrap();
        steps += out.iterations;
        worst_orth = seen.into_iter().fold(worst_orth, f64::max);
        for w in out.values.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        if out.iterations == 0 {
            panic!("optimizer made no progress from a random start");
        }
    }
    let pass = worst_orth <= 1e-8 && worst_rise <= 1e-12;
    report(
        3,
        pass,
        format!("{steps} steps, max ||LᵀL − I|| {worst_orth:.1e}, max rise {worst_rise:.1e}"),
    );
    assert!(pass);
}

// ---------- 4 ----------

#[test]
fn criterion_04_laplacian_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=25usize);
        let d = rng.random_range(1..=8usize);
        let x = random_matrix(n, d, &mut rng);
        let a = random_matrix(d, d, &mut rng);
        let m = &a * a.transpose();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = if rng.random_bool(0.5) { rng.random_range(0.0..2.0) } else { 0.0 };
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        let lhs = laplacian_term(&m, &x, &laplacian(&w).unwrap()).unwrap();
        let mut rhs = 0.0;
        for i in 0..n {
            for j in 0..n {
                let u: DVector<f64> = (x.row(i) - x.row(j)).transpose();
                rhs += 0.5 * w[(i, j)] * u.dot(&(&m * &u));
            }
        }
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-300));
    }
    let pass = worst <= 1e-9;
    report(4, pass, format!("max relative gap {worst:.1e}"));
    assert!(pass);
}

// ---------- 5 ----------

fn brute_force_mining(w: &DMatrix<f64>, lists: &[Vec<usize>], anchors: &[usize]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &a in anchors {
        let mut remaining = lists[a].clone();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut pick = 0;
            for c in 1..remaining.len() {
                let (best, cand) = (remaining[pick], remaining[c]);
                if w[(a, cand)] > w[(a, best)] || (w[(a, cand)] == w[(a, best)] && cand < best) {
                    pick = c;
                }
            }
            order.push(remaining.remove(pick));
        }
        let half = order.len() / 2;
        for i in 0..half {
            out.push(Triplet::new(a, order[i], order[half + i]));
        }
    }
    out
}

#[test]
fn criterion_05_mining_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(3..=100usize);
        let k = 2 * rng.random_range(1..=((n - 1) / 2).min(10));
        let lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                index::sample(&mut rng, n - 1, k)
                    .into_iter()
                    .map(|j| if j >= i { j + 1 } else { j })
                    .collect()
            })
            .collect();
        // coarse values so ties actually occur
        let raw = DMatrix::from_fn(n, n, |_, _| f64::from(rng.random_range(-3i32..=3)) / 2.0);
        let w = (&raw + raw.transpose()) * 0.5;
        let anchors: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
        let graph = NeighborGraph::from_lists(lists.clone()).unwrap();
        let aff = AffinityMatrix { w: w.clone(), gamma: 0.99 };
        let got = mine_triplets_with(&aff, &graph, &anchors, Exec::Sequential).unwrap();
        let par = mine_triplets_with(&aff, &graph, &anchors, Exec::Parallel).unwrap();
        if got != brute_force_mining(&w, &lists, &anchors) || got != par {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(5, pass, format!("{mismatches} of 100 graphs differ"));
    assert!(pass);
}

// ---------- 6 ----------

fn brute_nmi(a: &[usize], y: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let ky = y.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; ky]; ka];
    for (&i, &j) in a.iter().zip(y) {
        table[i][j] += 1.0;
    }
    let h = |counts: Vec<f64>| -> f64 {
        counts
            .into_iter()
            .filter(|&c| c > 0.0)
            .map(|c| -(c / n) * (c / n).ln())
            .sum()
    };
    let ha = h(table.iter().map(|r| r.iter().sum()).collect());
    let hy = h((0..ky).map(|j| table.iter().map(|r| r[j]).sum()).collect());
    let hay = h(table.iter().flatten().copied().collect());
    if ha + hy == 0.0 {
        return 0.0;
    }
    (ha + hy - hay) / ((ha + hy) / 2.0)
}

fn brute_recall(z: &DMatrix<f64>, y: &[usize], k: usize) -> f64 {
    let n = z.nrows();
    let mut hits = 0;
    for q in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| ((z.row(q) - z.row(j)).norm_squared(), j))
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if others[..k].iter().any(|&(_, j)| y[j] == y[q]) {
            hits += 1;
        }
    }
    100.0 * f64::from(hits) / n as f64
}

#[test]
fn criterion_06_eval_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut worst_nmi, mut worst_recall, mut perm_gap) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(10..=60usize);
        let classes = rng.random_range(1..=5usize);
        let clusters = rng.random_range(1..=6usize);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..clusters)).collect();
        let got = nmi(&a, &y).unwrap();
        worst_nmi = worst_nmi.max((got - brute_nmi(&a, &y)).abs());
        let mut perm: Vec<usize> = (0..clusters).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let relabeled: Vec<usize> = a.iter().map(|&c| perm[c] + 7).collect();
        perm_gap = perm_gap.max((nmi(&relabeled, &y).unwrap() - got).abs());

        // small integer coordinates produce distance ties
        let z = DMatrix::from_fn(n, 2, |_, _| f64::from(rng.random_range(0i32..4)));
        let ks = [1, 2, 4, 8];
        let rec = recall_at_k_with(&z, &y, &ks, Exec::Sequential).unwrap();
        for &k in &ks {
            worst_recall = worst_recall.max((rec[&k] - brute_recall(&z, &y, k)).abs());
        }
        monotone &= rec.values().collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]);
    }
    let pass = worst_nmi <= 1e-12 && worst_recall <= 1e-12 && perm_gap <= 1e-12 && monotone;
    report(
        6,
        pass,
        format!("nmi gap {worst_nmi:.1e}, recall gap {worst_recall:.1e}, permutation gap {perm_gap:.1e}, monotone {monotone}"),
    );
    assert!(pass);
}

// ---------- 7 ----------

#[test]
fn criterion_07_stiefel_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(2..=10usize);
        let l = rng.random_range(1..d);
        let a = random_matrix(d, d, &mut rng);
        let s = &a * a.transpose();
        let mut eig: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let target: f64 = eig[..l].iter().sum();
        let cfg = OptimizerConfig {
            max_iter: 5000,
            grad_tol: 1e-10,
            ..Default::default()
        };
        let start = MetricL::random(d, l, rng.random()).unwrap();
        let out = optimize_l(&start, |x| Ok((-(x.transpose() * &s * x).trace(), -2.0 * &s * x)), &cfg).unwrap();
        worst = worst.max((-out.final_value() - target).abs());
    }
    let pass = worst <= 1e-6;
    report(7, pass, format!("max gap to top-l eigenvalue sum {worst:.1e}"));
    assert!(pass);
}

// ---------- 8, 9, 10 ----------

struct Run {
    identity_r1: f64,
    identity_nmi: f64,
    model: Model,
    elapsed: Duration,
}

fn synthetic(seed: u64) -> Dataset {
    make_blobs(&BlobConfig {
        n_classes: 10,
        per_class: 200,
        d_signal: 5,
        d_noise: 45,
        signal_sep: 6.0,
        noise_sigma: 4.0,
        seed,
    })
    .unwrap()
}

fn synthetic_config(seed: u64, orth: bool) -> TrainConfig {
    TrainConfig {
        seed,
        orth,
        labeled_per_class: Some(10),
        gamma: 0.99,
        k: 10,
        alpha_deg: 40.0,
        batch_triplets: 100,
        ..Default::default()
    }
}

fn synthetic_run(seed: u64, orth: bool) -> Run {
    let ds = synthetic(seed);
    let cfg = synthetic_config(seed, orth);
    let (_, val) = training_split(&ds, &cfg).unwrap();
    let rows = val.labeled_indices();
    let x = val.features.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&i| val.labels[i].unwrap()).collect();
    let identity_r1 = brute_recall(&x, &y, 1);
    let identity_nmi = evaluate_checkpoint_with(&identity_model(ds.dim(), &cfg), &val, &[1], seed, Exec::Sequential)
        .unwrap()
        .nmi;
    let start = Instant::now();
    let model = train_with(&ds, &cfg, Exec::Sequential).unwrap();
    Run {
        identity_r1,
        identity_nmi,
        model,
        elapsed: start.elapsed(),
    }
}

fn orth_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| (0..3).map(|s| synthetic_run(s, true)).collect())
}

fn best(m: &Model) -> &EpochRecord {
    &m.history[m.best_epoch]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_08_synthetic_end_to_end() {
    let runs = orth_runs();
    let mut lines = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let b = best(&r.model);
        lines.push(format!(
            "seed {seed}: identity R@1 {:.1} NMI {:.3}, trained R@1 {:.1} NMI {:.3}",
            r.identity_r1, r.identity_nmi, b.val_r1, b.val_nmi
        ));
    }
    let gain = median(runs.iter().map(|r| best(&r.model).val_r1 - r.identity_r1).collect());
    let trained = median(runs.iter().map(|r| best(&r.model).val_r1).collect());
    let identity = median(runs.iter().map(|r| r.identity_r1).collect());
    let nmi_up = runs.iter().all(|r| best(&r.model).val_nmi > r.identity_nmi);
    let secs: f64 = runs.iter().map(|r| r.elapsed.as_secs_f64()).sum();
    let pass = trained >= identity + 10.0 && nmi_up && secs < 300.0;
    report(
        8,
        pass,
        format!(
            "median R@1 {trained:.1} vs identity {identity:.1} (median gain {gain:+.1}), NMI improves on all seeds: {nmi_up}, {secs:.0}s; {}",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_orthogonality_ablation() {
    let with = &orth_runs()[0];
    let without = synthetic_run(0, false);
    let (a, b) = (best(&with.model), best(&without.model));
    let table = format!(
        "w/ orth R@1 {:.1} NMI {:.3} | w/o orth R@1 {:.1} NMI {:.3}",
        a.val_r1, a.val_nmi, b.val_r1, b.val_nmi
    );
    let _ = writeln!(std::io::stderr(), "orthogonality ablation, seed 0: {table}");
    let pass = without.model.history.len() == with.model.history.len() && !without.model.metric.orth_enforced;
    report(9, pass, "both configurations completed".into());
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let first = &orth_runs()[0].model;
    let again = train_with(&synthetic(0), &synthetic_config(0, true), Exec::Sequential).unwrap();
    let same_history = first.history == again.history
        && first
            .history
            .iter()
            .zip(&again.history)
            .all(|(a, b)| a.val_nmi.to_bits() == b.val_nmi.to_bits() && a.val_r1.to_bits() == b.val_r1.to_bits()
                && a.loss.map(f64::to_bits) == b.loss.map(f64::to_bits));
    let same_model = first.metric.l == again.metric.l;
    let pass = same_history && same_model;
    report(10, pass, format!("{} history records compared bit for bit", first.history.len()));
    assert!(pass);
}
