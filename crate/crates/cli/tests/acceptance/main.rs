//! Acceptance checks, one per criterion, each printing a PASS/FAIL line.
//! Runs without the libtest harness so the lines always reach stdout.


use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use embeval_core::contrastive::{
    self, contrastive_grad, contrastive_loss, Matrix, ProjectionHead, TrainConfig,
};
use embeval_core::geometry::{self, alignment, uniformity, DiagConfig};
use embeval_core::metrics::{ndcg, paired_t_test, recall_at_k};
use embeval_core::nli_filter::{filter_by_threshold, select_best_translation, ScoredTranslation};
use embeval_core::simsearch::{top_k, Hit, NeighborList};
use embeval_core::store::{self, normalize, Format, RelevanceSet, ZeroPolicy};
use rand::Rng;
use support::*;

// Tolerances and budgets, pinned.
const ORACLE_INSTANCES: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const FD_STEP: f64 = 1e-6;
const FD_MAX_RELATIVE_ERROR: f64 = 1e-5;
const FD_SEEDS: u64 = 20;
const LOSS_TOL: f64 = 1e-9;
const GEOMETRY_TOL: f64 = 1e-9;
const BATCHED_UNIFORMITY_TOL: f64 = 0.05;
const NDCG_01: f64 = 0.63092975;
const NDCG_TOL: f64 = 1e-8;
const MAX_EPOCHS: usize = 50;
const TRAIN_BUDGET: Duration = Duration::from_secs(60);
const T_TEST_P_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 gradient correctness", gradient_correctness),
        ("3 loss fixed points", loss_fixed_points),
        ("4 geometry oracles", geometry_oracles),
        ("5 metric hand-values", metric_hand_values),
        ("6 synthetic head training", synthetic_reproduction),
        ("7 filtering statistics", filtering_statistics),
        ("8 determinism", determinism),
        ("9 significance test", significance_test),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut compared = 0usize;
    for instance in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..=1000);
        let d = rng.random_range(1..=64);
        let k = [1, 5, 100][instance % 3];
        let nq = rng.random_range(1..=5);
        // Both sides see the same stored unit rows.
        let queries = normalize(&sphere(&mut rng, "q", nq, d), ZeroPolicy::Error)
            .unwrap()
            .matrix;
        let mut corpus_rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        if n > 4 {
            corpus_rows[n - 1] = corpus_rows[0].clone();
        }
        let corpus = normalize(&matrix("c", &corpus_rows), ZeroPolicy::Error)
            .unwrap()
            .matrix;
        let got = top_k(&queries, &corpus, k).map_err(|e| e.to_string())?;
        let want = naive_top_k(&queries, &corpus, k);
        for (qi, (g, w)) in got.iter().zip(&want).enumerate() {
            let got_ids: Vec<&str> = g.hits.iter().map(|h| h.doc_id.as_str()).collect();
            let want_ids: Vec<&str> = w.iter().map(|(i, _)| corpus.id(*i)).collect();
            ensure(got_ids == want_ids, || {
                format!("instance {instance} query {qi} (n={n}, d={d}, k={k}): {got_ids:?} vs {want_ids:?}")
            })?;
            for h in &g.hits {
                let direct = naive_cosine(queries.row(qi), corpus.row(h.row));
                ensure((h.score - direct).abs() < 1e-6, || {
                    format!("instance {instance}: score {} vs cosine {direct}", h.score)
                })?;
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < ORACLE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{ORACLE_INSTANCES} instances, {compared} queries identical, {elapsed:.2?}"
    ))
}

fn loss_through(head: &ProjectionHead, a: &Matrix, p: &Matrix, n: Option<&Matrix>, tau: f64) -> f64 {
    let neg = n.map(|n| naive_apply(head, n));
    contrastive_loss(&naive_apply(head, a), &naive_apply(head, p), neg.as_ref(), tau)
        .unwrap()
        .total
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for seed in 0..FD_SEEDS {
        let mut rng = rng(1000 + seed);
        let rows = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let tau = [0.05, 0.1, 0.5, 1.0][seed as usize % 4];
        let a = gaussian_matrix(&mut rng, rows, d);
        let p = gaussian_matrix(&mut rng, rows, d);
        let n = gaussian_matrix(&mut rng, rows, d);
        let mut w = ProjectionHead::identity(d, false).unwrap().weight().to_vec();
        w.iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        let bias = (seed % 2 == 1).then(|| (0..d).map(|_| rng.random_range(-0.1..0.1)).collect::<Vec<f64>>());
        let head = ProjectionHead::new(d, d, w, bias).unwrap();

        for neg in [None, Some(&n)] {
            let grad = contrastive_grad(&a, &p, neg, tau, &head).map_err(|e| e.to_string())?;
            let mut params: Vec<f64> = head.weight().to_vec();
            params.extend(head.bias().unwrap_or_default());
            let analytic: Vec<f64> = grad
                .weight
                .iter()
                .chain(grad.bias.iter().flatten())
                .copied()
                .collect();
            let rebuild = |params: &[f64]| {
                let (w, b) = params.split_at(d * d);
                ProjectionHead::new(d, d, w.to_vec(), head.bias().map(|_| b.to_vec())).unwrap()
            };
            for (idx, &g) in analytic.iter().enumerate() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[idx] += FD_STEP;
                minus[idx] -= FD_STEP;
                let fd = (loss_through(&rebuild(&plus), &a, &p, neg, tau)
                    - loss_through(&rebuild(&minus), &a, &p, neg, tau))
                    / (2.0 * FD_STEP);
                let err = relative_error(g, fd);
                worst = worst.max(err);
                coords += 1;
                ensure(err < FD_MAX_RELATIVE_ERROR, || {
                    format!(
                        "seed {seed}, hard negatives {}, coordinate {idx}: analytic {g} vs numeric {fd} (rel {err:e})",
                        neg.is_some()
                    )
                })?;
            }
        }
    }
    Ok(format!(
        "{FD_SEEDS} seeds x with/without hard negatives, {coords} coordinates, worst relative error {worst:.2e}"
    ))
}

fn loss_fixed_points() -> Outcome {
    let mut rng = rng(3);
    let one_a = gaussian_matrix(&mut rng, 1, 7);
    let one_p = gaussian_matrix(&mut rng, 1, 7);
    let single = contrastive_loss(&one_a, &one_p, None, 0.05).unwrap().total;
    ensure(single == 0.0, || format!("N=1 loss {single}"))?;

    let v = gaussian(&mut rng, 5);
    let same = Matrix::new(4, 5, v.iter().cycle().take(20).copied().collect()).unwrap();
    let uniform = contrastive_loss(&same, &same, None, 0.05).unwrap().total;
    let ln4 = 4f64.ln();
    ensure((uniform - ln4).abs() < LOSS_TOL, || {
        format!("uniform loss {uniform} vs ln 4")
    })?;

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let rows = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let a = gaussian_matrix(&mut rng, rows, d);
        let p = gaussian_matrix(&mut rng, rows, d);
        let n = gaussian_matrix(&mut rng, rows, d);
        let mut rescale = |m: &Matrix| {
            let mut out = m.clone();
            for r in 0..m.rows {
                let s: f64 = rng.random_range(0.01..100.0);
                out.data[r * m.cols..(r + 1) * m.cols]
                    .iter_mut()
                    .for_each(|x| *x *= s);
            }
            out
        };
        let (a2, p2, n2) = (rescale(&a), rescale(&p), rescale(&n));
        for (neg, neg2) in [(None, None), (Some(&n), Some(&n2))] {
            let base = contrastive_loss(&a, &p, neg, 0.05).unwrap().total;
            let scaled = contrastive_loss(&a2, &p2, neg2, 0.05).unwrap().total;
            worst = worst.max((base - scaled).abs());
            // Cross-check the stable form against the literal formula.
            let literal = brute_force_loss(&a, &p, neg, 0.05);
            ensure((base - literal).abs() < LOSS_TOL * literal.max(1.0), || {
                format!("loss {base} vs literal {literal}")
            })?;
        }
    }
    ensure(worst < LOSS_TOL, || {
        format!("rescaling changed the loss by {worst:e}")
    })?;
    Ok(format!(
        "N=1 -> {single}, uniform N=4 -> {uniform} (ln 4 = {ln4}), rescaling drift {worst:.1e}"
    ))
}

fn geometry_oracles() -> Outcome {
    let mut rng = rng(4);
    let mut align_err = 0.0f64;
    for _ in 0..30 {
        let d = rng.random_range(2..=64);
        let n = rng.random_range(1..=200);
        let left = sphere(&mut rng, "l", n, d);
        let right = sphere(&mut rng, "r", n, d);
        let pairs: Vec<(&[f32], &[f32])> = left.rows().zip(right.rows()).collect();
        let mean_cos = pairs.iter().map(|(u, v)| naive_cosine(u, v)).sum::<f64>() / n as f64;
        let got = alignment(&pairs, 2.0).map_err(|e| e.to_string())?;
        align_err = align_err.max((got - (2.0 - 2.0 * mean_cos)).abs());
    }
    ensure(align_err < GEOMETRY_TOL, || {
        format!("alignment off by {align_err:e}")
    })?;

    let mut unif_err = 0.0f64;
    for (n, d) in [(2, 3), (50, 8), (200, 16), (500, 32), (500, 4)] {
        let m = sphere(&mut rng, "p", n, d);
        let got = uniformity(&m, 2.0, n, 0).map_err(|e| e.to_string())?;
        unif_err = unif_err.max((got - naive_uniformity(&m, 2.0)).abs());
    }
    ensure(unif_err < GEOMETRY_TOL, || {
        format!("full-batch uniformity off by {unif_err:e}")
    })?;

    let m = sphere(&mut rng, "s", 2048, 16);
    let full = uniformity(&m, 2.0, 2048, 0).unwrap();
    let batched = (0..5).map(|s| uniformity(&m, 2.0, 128, s).unwrap()).sum::<f64>() / 5.0;
    let gap = (batched - full).abs();
    ensure(gap < BATCHED_UNIFORMITY_TOL, || {
        format!("batched {batched} vs full {full}")
    })?;

    for i in 0..200 {
        let d = rng.random_range(1..=32);
        let n = rng.random_range(2..=100);
        let t = rng.random_range(0.1..10.0);
        let alpha = rng.random_range(0.5..4.0);
        let batch = rng.random_range(2..=n.max(2));
        let raw = matrix("x", &(0..n).map(|_| gaussian(&mut rng, d)).collect::<Vec<_>>());
        let m = normalize(&raw, ZeroPolicy::Error).unwrap().matrix;
        let u = uniformity(&m, t, batch, i).map_err(|e| e.to_string())?;
        ensure(u <= 0.0, || format!("uniformity {u} > 0"))?;
        let pairs: Vec<(&[f32], &[f32])> = (0..n).map(|j| (m.row(j), m.row(n - 1 - j))).collect();
        let a = alignment(&pairs, alpha).map_err(|e| e.to_string())?;
        ensure(a >= 0.0, || format!("alignment {a} < 0"))?;
    }
    Ok(format!(
        "alignment err {align_err:.1e}, full-batch err {unif_err:.1e}, batched-vs-full gap {gap:.4}, signs hold on 200 inputs"
    ))
}

fn run(q: &str, docs: &[&str]) -> NeighborList {
    NeighborList {
        query_id: q.into(),
        hits: docs
            .iter()
            .enumerate()
            .map(|(i, d)| Hit {
                doc_id: (*d).into(),
                row: i,
                score: 1.0 - i as f64 * 0.1,
            })
            .collect(),
    }
}

fn metric_hand_values() -> Outcome {
    let v = ndcg(&[0.0, 1.0], None).unwrap();
    ensure((v - NDCG_01).abs() < NDCG_TOL, || format!("ndcg([0,1]) = {v}"))?;
    for ideal in [
        vec![1.0],
        vec![3.0, 2.0, 1.0, 0.0],
        vec![2.0, 2.0, 1.0, 1.0, 0.0, 0.0],
    ] {
        let got = ndcg(&ideal, None).unwrap();
        ensure(got == 1.0, || format!("ideal {ideal:?} -> {got}"))?;
    }

    let rels = RelevanceSet::from_triples([
        ("q1", "a", 1.0),
        ("q1", "b", 1.0),
        ("q2", "c", 1.0),
        ("q3", "z", 1.0),
    ])
    .unwrap();
    let runs = [
        run("q1", &["a", "x", "y"]),
        run("q2", &["c", "x"]),
        run("q3", &["x", "y"]),
    ];
    let r = recall_at_k(&runs, &rels, 2).unwrap();
    let values: Vec<f64> = r.per_query.iter().map(|(_, v)| *v).collect();
    ensure(values == [0.5, 1.0, 0.0], || {
        format!("recall fixtures {values:?}")
    })?;

    let mut rng = rng(5);
    for _ in 0..50 {
        let n = rng.random_range(1..=60);
        let q = sphere(&mut rng, "q", 10, 6);
        let c = sphere(&mut rng, "d", n, 6);
        let mut triples = BTreeMap::new();
        for i in 0..10 {
            for _ in 0..rng.random_range(1..=4) {
                triples.insert((format!("q{i}"), format!("d{}", rng.random_range(0..n))), 1.0);
            }
        }
        let rels = RelevanceSet::from_triples(triples.into_iter().map(|((q, d), g)| (q, d, g))).unwrap();
        let runs = top_k(&q, &c, n).unwrap();
        let mut last = [0.0; 10];
        for k in 1..=n {
            let r = recall_at_k(&runs, &rels, k).unwrap();
            for (i, (_, v)) in r.per_query.iter().enumerate() {
                ensure(*v >= last[i], || {
                    format!("recall fell from {} to {v} at k={k}", last[i])
                })?;
                last[i] = *v;
            }
        }
        ensure(last.iter().all(|&v| v == 1.0), || {
            "recall at corpus size below 1".into()
        })?;
    }
    Ok(format!(
        "ndcg([0,1]) = {v:.10}, recall fixtures {values:?}, monotone on 50 random runs"
    ))
}

fn synthetic_reproduction() -> Outcome {
    let task = synthetic_task(7);
    let diag = DiagConfig::default();
    let recall10 = |q, d| {
        recall_at_k(&top_k(q, d, 10).unwrap(), &task.qrels, 10)
            .unwrap()
            .mean
    };
    let base_recall = recall10(&task.queries, &task.docs);
    let base = geometry::diagnose(&task.queries, &task.docs, &task.qrels, &diag).unwrap();

    let config = TrainConfig {
        tau: 0.05,
        learning_rate: 0.05,
        epochs: 30,
        batch_size: 64,
        seed: 11,
        ..Default::default()
    };
    assert!(config.epochs <= MAX_EPOCHS);
    let start = Instant::now();
    let outcome = contrastive::train_head(&task.triplets, &config, None).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    let q = contrastive::apply_head(&task.queries, &outcome.head).unwrap();
    let d = contrastive::apply_head(&task.docs, &outcome.head).unwrap();
    let tuned_recall = recall10(&q, &d);
    let tuned = geometry::diagnose(&q, &d, &task.qrels, &diag).unwrap();

    let summary = format!(
        "Recall@10 {base_recall:.4} -> {tuned_recall:.4}, uniformity {:.4} -> {:.4}, alignment {:.4} -> {:.4}, {} epochs in {train_time:.2?}",
        base.uniform, tuned.uniform, base.align, tuned.align, config.epochs
    );
    ensure(train_time < TRAIN_BUDGET, || {
        format!("training too slow: {summary}")
    })?;
    ensure(tuned_recall > base_recall, || {
        format!("recall did not improve: {summary}")
    })?;
    ensure(tuned.uniform < base.uniform, || {
        format!("uniformity did not decrease: {summary}")
    })?;
    Ok(summary)
}

fn filtering_statistics() -> Outcome {
    let fixture: BTreeMap<String, f64> = [("a", 0.2), ("b", 0.04), ("c", 0.5)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
    let (kept, stats) = filter_by_threshold(&fixture, 0.05).unwrap();
    ensure(stats.removed_fraction == 1.0 / 3.0, || {
        format!("removed_fraction {}", stats.removed_fraction)
    })?;
    ensure(kept == ["a", "c"], || format!("kept {kept:?}"))?;

    let rows = vec![
        ScoredTranslation {
            sentence_id: "s".into(),
            system: "m2m100".into(),
            score: 0.40,
        },
        ScoredTranslation {
            sentence_id: "s".into(),
            system: "mbart".into(),
            score: 0.49,
        },
    ];
    let best = select_best_translation(&rows).unwrap();
    ensure(best["s"].score == 0.49 && best["s"].system == "mbart", || {
        format!("picked {:?}", best["s"])
    })?;

    let mut rng = rng(7);
    for set in 0..100 {
        let n = rng.random_range(1..=50);
        let scores: BTreeMap<String, f64> = (0..n)
            .map(|i| (format!("x{i}"), rng.random_range(0.0..1.0)))
            .collect();
        let mut thresholds: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..1.1)).collect();
        thresholds.sort_by(f64::total_cmp);
        let mut previous: Option<Vec<String>> = None;
        for t in thresholds {
            let (kept, _) = filter_by_threshold(&scores, t).unwrap();
            if let Some(prev) = &previous {
                ensure(kept.iter().all(|k| prev.contains(k)), || {
                    format!("set {set}: raising the threshold to {t} kept a new id")
                })?;
            }
            previous = Some(kept);
        }
    }
    Ok(format!(
        "removed_fraction = {}, best system 0.49 over 0.40, monotone on 100 random sets",
        stats.removed_fraction
    ))
}

const WORKERS_ENV: &str = "EMBEVAL_WORKERS";

fn embeval(args: &[String], workers: Option<usize>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_embeval"));
    cmd.args(args).env_remove(WORKERS_ENV).env("RUST_LOG", "warn");
    if let Some(w) = workers {
        cmd.env(WORKERS_ENV, w.to_string());
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "embeval {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        if name.ends_with(".tsv") {
            ensure(bytes.starts_with(b"# embeval "), || {
                format!("{name} lacks the invocation header")
            })?;
        }
        files.insert(name, bytes);
    }
    ensure(!files.is_empty(), || format!("no outputs in {}", dir.display()))?;
    Ok(files)
}

/// Runs the same command repeatedly into the same directory, once per worker
/// setting, and requires byte-identical outputs every time.
fn repeatable(out: &Path, args: &[String], workers: &[Option<usize>]) -> Result<usize, String> {
    let mut first: Option<BTreeMap<String, Vec<u8>>> = None;
    for &w in workers {
        let _ = std::fs::remove_dir_all(out);
        embeval(args, w)?;
        let snap = snapshot(out)?;
        if let Some(f) = &first {
            ensure(*f == snap, || {
                format!("outputs differ between runs of {}", args.join(" "))
            })?;
        } else {
            first = Some(snap);
        }
    }
    Ok(first.map_or(0, |f| f.len()))
}

fn path_arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let file = |name: &str| dir.join(name);
    let mut rng = rng(8);

    let queries = matrix("q", &(0..20).map(|_| gaussian(&mut rng, 8)).collect::<Vec<_>>());
    let corpus = matrix("d", &(0..300).map(|_| gaussian(&mut rng, 8)).collect::<Vec<_>>());
    store::save_embeddings(&queries, &file("queries.tsv"), Format::Tsv).unwrap();
    store::save_embeddings(&corpus, &file("corpus.emb"), Format::Binary).unwrap();

    let mut qrels = String::new();
    let mut listings = String::new();
    for q in 0..20 {
        for j in 0..3 {
            qrels += &format!("q{q}\td{}\n", q * 13 + j * 7);
        }
        for pos in 0..6 {
            listings += &format!(
                "q{q}\td{}\t{}\t{}\n",
                q * 11 + pos,
                pos + 1,
                rng.random_range(0..3)
            );
        }
    }
    std::fs::write(file("qrels.tsv"), qrels).unwrap();
    std::fs::write(file("listings.tsv"), listings).unwrap();

    let sentences = matrix("s", &(0..60).map(|_| gaussian(&mut rng, 8)).collect::<Vec<_>>());
    store::save_embeddings(&sentences, &file("sentences.emb"), Format::Binary).unwrap();
    let mut triplets = String::new();
    for t in 0..30 {
        triplets += &format!("t{t}\ts{}\ts{}\ts{}\n", t, (t + 1) % 60, (t + 30) % 60);
    }
    std::fs::write(file("triplets.tsv"), triplets).unwrap();
    let mut scores = String::new();
    for s in 0..60 {
        for system in ["mbart", "m2m100"] {
            scores += &format!("s{s}\t{system}\t{:.3}\n", rng.random_range(0.0..0.3));
        }
    }
    std::fs::write(file("scores.tsv"), scores).unwrap();

    let p = |name: &str| path_arg(&file(name));
    let out = |name: &str| path_arg(&dir.join("out").join(name));
    let args = |list: &[&str]| list.iter().map(|s| (*s).to_owned()).collect::<Vec<_>>();
    let max_workers = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let twice = [None, None];

    let mut checked = Vec::new();
    let search = args(&[
        "search",
        "--queries",
        &p("queries.tsv"),
        "--corpus",
        &p("corpus.emb"),
        "--k",
        "25",
        "--out",
        &out("search"),
    ]);
    let n = repeatable(
        &dir.join("out/search"),
        &search,
        &[Some(1), Some(max_workers), Some(1)],
    )?;
    checked.push(format!("search x{n} (1 vs {max_workers} workers)"));

    let workflows: Vec<(&str, Vec<String>)> = vec![
        (
            "eval-retrieval",
            args(&[
                "eval-retrieval",
                "--queries",
                &p("queries.tsv"),
                "--corpus",
                &p("corpus.emb"),
                "--qrels",
                &p("qrels.tsv"),
                "--k",
                "10",
                "--out",
                &out("retrieval"),
            ]),
        ),
        (
            "diagnose",
            args(&[
                "diagnose",
                "--queries",
                &p("queries.tsv"),
                "--docs",
                &p("corpus.emb"),
                "--qrels",
                &p("qrels.tsv"),
                "--batch-size",
                "16",
                "--recall-k",
                "10",
                "--seed",
                "5",
                "--out",
                &out("diagnose"),
            ]),
        ),
        (
            "train-head",
            args(&[
                "train-head",
                "--triplets",
                &p("triplets.tsv"),
                "--embeddings",
                &p("sentences.emb"),
                "--epochs",
                "3",
                "--batch-size",
                "8",
                "--bias",
                "--project",
                &p("corpus.emb"),
                "--seed",
                "9",
                "--out",
                &out("train"),
            ]),
        ),
        (
            "filter-nli",
            args(&[
                "filter-nli",
                "--scores",
                &p("scores.tsv"),
                "--triplets",
                &p("triplets.tsv"),
                "--threshold",
                "0.1",
                "--out",
                &out("filter"),
            ]),
        ),
        (
            "filter-nli sentences",
            args(&[
                "filter-nli",
                "--scores",
                &p("scores.tsv"),
                "--threshold",
                "0.1",
                "--out",
                &out("filter-sentences"),
            ]),
        ),
    ];
    for (name, a) in &workflows {
        let target = PathBuf::from(&a[a.len() - 1]);
        let n = repeatable(&target, a, &twice)?;
        let n_workers = repeatable(&target, a, &[Some(1), Some(max_workers)])?;
        ensure(n == n_workers, || {
            format!("{name}: file count changed with workers")
        })?;
        checked.push(format!("{name} x{n}"));
    }

    // A second retrieval report to compare against.
    embeval(
        &args(&[
            "eval-retrieval",
            "--queries",
            &p("queries.tsv"),
            "--corpus",
            &p("corpus.emb"),
            "--qrels",
            &p("qrels.tsv"),
            "--k",
            "50",
            "--out",
            &out("retrieval50"),
        ]),
        None,
    )?;
    let ranking = args(&[
        "eval-ranking",
        "--queries",
        &p("queries.tsv"),
        "--docs",
        &p("corpus.emb"),
        "--listings",
        &p("listings.tsv"),
        "--truncate",
        "5",
        "--compare",
        &out("retrieval/recall.tsv"),
        &out("retrieval50/recall.tsv"),
        "--out",
        &out("ranking"),
    ]);
    let n = repeatable(
        &dir.join("out/ranking"),
        &ranking,
        &[None, None, Some(1), Some(max_workers)],
    )?;
    checked.push(format!("eval-ranking x{n}"));
    Ok(format!("byte-identical reruns: {}", checked.join(", ")))
}

/// (a, b, t, p) computed once with `scipy.stats.ttest_rel(a, b)`.
const T_TEST_REFERENCE: [(&[f64], &[f64], f64, f64); 5] = [
    (
        &[1.0, 2.0, 3.0, 4.0, 5.0],
        &[1.1, 2.1, 2.9, 4.2, 5.0],
        -1.1766968108291043,
        0.30455878468053477,
    ),
    (
        &[0.31, 0.28, 0.35, 0.40, 0.22, 0.30],
        &[0.30, 0.27, 0.33, 0.41, 0.20, 0.29],
        2.236067977499796,
        0.0755868184216118,
    ),
    (&[1.0, 2.0], &[0.5, 2.5], 0.0, 1.0),
    (
        &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2],
        &[0.45, 0.62, 0.66, 0.71, 0.93, 0.94, 1.02, 1.15],
        2.6053557891157175,
        0.035150079502816435,
    ),
    (
        &[10.0, 12.0, 9.0, 11.0, 13.0, 8.0, 10.0],
        &[9.0, 11.0, 9.0, 10.0, 12.0, 9.0, 8.0],
        1.9867985355975657,
        0.09413276656581646,
    ),
];

fn significance_test() -> Outcome {
    let mut worst = 0.0f64;
    for (i, (a, b, t, p)) in T_TEST_REFERENCE.iter().enumerate() {
        let r = paired_t_test(a, b).map_err(|e| e.to_string())?;
        let err = (r.p - p).abs();
        worst = worst.max(err);
        ensure(err < T_TEST_P_TOL && (r.t - t).abs() < 1e-9, || {
            format!("fixture {i}: t={} p={} vs t={t} p={p}", r.t, r.p)
        })?;
        let flipped = paired_t_test(b, a).unwrap();
        ensure(flipped.t == -r.t && flipped.p == r.p, || {
            format!("fixture {i} is not antisymmetric")
        })?;
    }
    let mut rng = rng(9);
    for _ in 0..20 {
        let a: Vec<f64> = (0..rng.random_range(2..30))
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let same = paired_t_test(&a, &a).unwrap();
        ensure(same.p == 1.0, || format!("(a, a) gave p = {}", same.p))?;
    }
    Ok(format!(
        "5 reference fixtures, worst |p - ref| {worst:.1e}; (a, a) -> p = 1; antisymmetric"
    ))
}
