use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use embeval_core::contrastive::{self, EpochReport, TrainConfig};
use embeval_core::geometry::{self, DiagConfig};
use embeval_core::metrics::{self, MetricReport};
use embeval_core::nli_filter::{self, Aggregate};
use embeval_core::simsearch::{self, NeighborList};
use embeval_core::store::{self, EmbeddingMatrix, Format, RelevanceSet};
use embeval_core::tsv::fmt_exact;
use log::info;

use crate::args::{
    AggregateArg, DiagnoseArgs, EvalRankingArgs, EvalRetrievalArgs, FilterNliArgs, SearchArgs, TrainHeadArgs,
};
use crate::report::{self, Output};
use crate::{CliError, RunConfig, Workflow, EXIT_FAILURE};

/// Runs the workflow and writes its outputs into the output directory.
/// Returns the paths written.
pub fn execute(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let work = || match &config.workflow {
        Workflow::Search(a) => search(config, a),
        Workflow::EvalRetrieval(a) => eval_retrieval(config, a),
        Workflow::EvalRanking(a) => eval_ranking(config, a),
        Workflow::Diagnose(a) => diagnose(config, a),
        Workflow::TrainHead(a) => train_head(config, a),
        Workflow::FilterNli(a) => filter_nli(config, a),
    };
    let outputs = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(work)),
        None => work(),
    }
    .map_err(|e| CliError::new(EXIT_FAILURE, format!("error: {e:#}")))?;
    report::commit(&config.out_dir, &outputs).map_err(|e| {
        CliError::new(
            EXIT_FAILURE,
            format!("error: writing reports to {}: {e}", config.out_dir.display()),
        )
    })
}

fn load(path: &Path) -> Result<EmbeddingMatrix> {
    store::load_embeddings(path, Format::from_path(path))
        .with_context(|| format!("loading {}", path.display()))
}

fn load_qrels(path: &Path) -> Result<RelevanceSet> {
    store::load_qrels(path).with_context(|| format!("loading {}", path.display()))
}

/// The rows of `queries` that have judgments, in judgment order. Every judged
/// query must have an embedding.
fn judged_queries(queries: &EmbeddingMatrix, rels: &RelevanceSet, path: &Path) -> Result<EmbeddingMatrix> {
    let mut rows = Vec::with_capacity(rels.len());
    let mut ids = Vec::with_capacity(rels.len());
    for q in rels.queries() {
        let row = queries
            .index_of(q)
            .ok_or_else(|| anyhow!("query {q:?} is judged but has no embedding in {}", path.display()))?;
        rows.push(row);
        ids.push(q.to_owned());
    }
    if rows.len() < queries.len() {
        info!(
            "{} queries without judgments are skipped",
            queries.len() - rows.len()
        );
    }
    Ok(queries.select(&rows, ids)?)
}

fn run_report(config: &RunConfig, runs: &[NeighborList]) -> Result<Output> {
    Ok(Output::tsv(config, "run.tsv", |w| {
        writeln!(w, "# query_id\trank\tdoc_id\tscore")?;
        simsearch::write_run(runs, w)
    })?)
}

fn metric_report(config: &RunConfig, name: &str, report: &MetricReport) -> Result<Output> {
    Ok(Output::tsv(config, name, |w| {
        writeln!(w, "# query_id\t{}", report.metric_name)?;
        report.write_tsv(w)
    })?)
}

fn search(config: &RunConfig, a: &SearchArgs) -> Result<Vec<Output>> {
    let queries = load(&a.queries)?;
    let corpus = load(&a.corpus)?;
    let runs = simsearch::top_k(&queries, &corpus, a.k as usize)?;
    Ok(vec![run_report(config, &runs)?])
}

fn eval_retrieval(config: &RunConfig, a: &EvalRetrievalArgs) -> Result<Vec<Output>> {
    let rels = load_qrels(&a.qrels)?;
    let queries = judged_queries(&load(&a.queries)?, &rels, &a.queries)?;
    let corpus = load(&a.corpus)?;
    let k = a.k as usize;
    let runs = simsearch::top_k(&queries, &corpus, k)?;
    let recall = metrics::recall_at_k(&runs, &rels, k)?;
    info!(
        "{} = {} over {} queries",
        recall.metric_name,
        recall.mean,
        recall.per_query.len()
    );
    Ok(vec![
        run_report(config, &runs)?,
        metric_report(config, "recall.tsv", &recall)?,
    ])
}

fn eval_ranking(config: &RunConfig, a: &EvalRankingArgs) -> Result<Vec<Output>> {
    let mut outputs = Vec::new();
    if let (Some(q), Some(d), Some(l)) = (&a.queries, &a.docs, &a.listings) {
        let queries = load(q)?;
        let docs = load(d)?;
        let rows = store::load_listings(l).with_context(|| format!("loading {}", l.display()))?;
        let listings = store::resolve_listings(&rows, &queries, &docs)?;
        let report = metrics::evaluate_ranking(&listings, a.truncate.map(|t| t as usize))?;
        info!(
            "{} = {} over {} listings",
            report.metric_name,
            report.mean,
            report.per_query.len()
        );
        outputs.push(metric_report(config, "ndcg.tsv", &report)?);
    }
    if let Some(pair) = &a.compare {
        let read =
            |p: &PathBuf| metrics::read_per_query(p).with_context(|| format!("loading {}", p.display()));
        let (ra, rb) = (read(&pair[0])?, read(&pair[1])?);
        let test = metrics::compare_reports(&ra, &rb)?;
        outputs.push(Output::tsv(config, "compare.tsv", |w| {
            writeln!(w, "# model_a\tmodel_b\tt\tp\tdf")?;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                pair[0].display(),
                pair[1].display(),
                fmt_exact(test.t),
                fmt_exact(test.p),
                test.df
            )
        })?);
    }
    Ok(outputs)
}

fn diagnose(config: &RunConfig, a: &DiagnoseArgs) -> Result<Vec<Output>> {
    let rels = load_qrels(&a.qrels)?;
    let queries = load(&a.queries)?;
    let docs = load(&a.docs)?;
    let diag_config = DiagConfig {
        alpha: a.alpha,
        t: a.t,
        batch_size: a.batch_size as usize,
        seed: config.seed,
    };
    let report = geometry::diagnose(&queries, &docs, &rels, &diag_config)?;
    let recall = match a.recall_k {
        Some(k) => {
            let judged = judged_queries(&queries, &rels, &a.queries)?;
            let runs = simsearch::top_k(&judged, &docs, k as usize)?;
            Some(metrics::recall_at_k(&runs, &rels, k as usize)?.mean)
        }
        None => None,
    };
    info!("align = {}, uniform = {}", report.align, report.uniform);
    Ok(vec![Output::tsv(config, "diagnose.tsv", |w| {
        let recall_col = a
            .recall_k
            .map(|k| format!("recall@{k}"))
            .unwrap_or_else(|| "recall".into());
        writeln!(w, "# label\talign\tuniform\t{recall_col}")?;
        report.write_row(&a.label, recall, w)?;
        writeln!(
            w,
            "# alpha={}\tt={}\tn_pos_pairs={}\tn_data_points={}\tbatch_size={}\tseed={}",
            fmt_exact(report.alpha),
            fmt_exact(report.t),
            report.n_pos_pairs,
            report.n_data_points,
            report.batch_size,
            report.seed
        )
    })?])
}

fn train_head(config: &RunConfig, a: &TrainHeadArgs) -> Result<Vec<Output>> {
    let embeddings = load(&a.embeddings)?;
    let triplets = store::load_triplets(&a.triplets, &embeddings)
        .with_context(|| format!("loading {}", a.triplets.display()))?;
    let train_config = TrainConfig {
        tau: a.tau,
        learning_rate: a.lr,
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        seed: config.seed,
        use_hard_negatives: !a.no_hard_negatives,
        d_out: a.d_out.map(|d| d as usize),
        bias: a.bias,
    };
    let epochs = a.epochs;
    let mut progress = |r: &EpochReport<'_>| info!("epoch {}/{epochs} loss {:.6}", r.epoch, r.mean_loss);
    let outcome = contrastive::train_head(&triplets, &train_config, Some(&mut progress))?;

    let mut outputs = vec![
        Output::binary(
            "head.emb",
            store::encode_binary(&contrastive::head_to_matrix(&outcome.head)?),
        ),
        Output::tsv(config, "train.tsv", |w| {
            writeln!(w, "# key\tvalue")?;
            contrastive::write_train_metadata(&train_config, &outcome.head, &outcome.loss_history, w)
        })?,
    ];
    let mut names = HashSet::new();
    for path in &a.project {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
        let name = format!("{stem}.projected.emb");
        if !names.insert(name.clone()) {
            bail!("two --project files would both be written as {name}");
        }
        let projected = contrastive::apply_head(&load(path)?, &outcome.head)?;
        outputs.push(Output::binary(name, store::encode_binary(&projected)));
    }
    Ok(outputs)
}

fn filter_nli(config: &RunConfig, a: &FilterNliArgs) -> Result<Vec<Output>> {
    let rows =
        nli_filter::load_scores(&a.scores).with_context(|| format!("loading {}", a.scores.display()))?;
    let best = nli_filter::select_best_translation(&rows)?;
    let sentence_scores: BTreeMap<String, f64> = best.iter().map(|(id, b)| (id.clone(), b.score)).collect();
    let records = match &a.triplets {
        Some(p) => Some(store::load_triplet_records(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let aggregate = a.aggregate.unwrap_or(if records.is_some() {
        AggregateArg::Min
    } else {
        AggregateArg::None
    });
    let item_scores = match (aggregate, &records) {
        (AggregateArg::None, _) => sentence_scores,
        (AggregateArg::Min | AggregateArg::Mean, Some(records)) => {
            let plain: Vec<_> = records.iter().map(|(_, r)| r.clone()).collect();
            let agg = if aggregate == AggregateArg::Min {
                Aggregate::Min
            } else {
                Aggregate::Mean
            };
            nli_filter::triplet_scores(&plain, &sentence_scores, agg)?
        }
        (_, None) => bail!("--aggregate min and mean need --triplets"),
    };
    if let Some(records) = &records {
        if let Some((line, r)) = records
            .iter()
            .find(|(_, r)| !item_scores.contains_key(&r.triplet_id))
        {
            bail!("triplet {:?} (line {line}) has no score", r.triplet_id);
        }
    }
    let (kept, stats) = nli_filter::filter_by_threshold(&item_scores, a.threshold)?;
    info!(
        "kept {} of {} at threshold {}",
        stats.output_count, stats.input_count, a.threshold
    );

    let summary = Output::tsv(config, "filter.tsv", |w| {
        writeln!(w, "# key\tvalue")?;
        writeln!(w, "threshold\t{}", fmt_exact(a.threshold))?;
        writeln!(w, "aggregate\t{}", format!("{aggregate:?}").to_lowercase())?;
        writeln!(w, "input_count\t{}", stats.input_count)?;
        writeln!(w, "output_count\t{}", stats.output_count)?;
        writeln!(w, "removed_fraction\t{}", fmt_exact(stats.removed_fraction))?;
        writeln!(w, "mean_score_before\t{}", fmt_exact(stats.mean_score_before))?;
        let after = stats.mean_score_after.map(fmt_exact).unwrap_or_default();
        writeln!(w, "mean_score_after\t{after}")
    })?;
    let kept_set: HashSet<&str> = kept.iter().map(String::as_str).collect();
    let kept_report = Output::tsv(config, "kept.tsv", |w| match &records {
        Some(records) => {
            writeln!(w, "# triplet_id\tanchor_id\tpositive_id\tnegative_id")?;
            let retained: Vec<_> = records
                .iter()
                .filter(|(_, r)| kept_set.contains(r.triplet_id.as_str()))
                .map(|(_, r)| r.clone())
                .collect();
            store::write_triplet_records(&retained, w)
        }
        None => {
            writeln!(w, "# sentence_id\tsystem\tscore")?;
            for id in &kept {
                let b = &best[id];
                writeln!(w, "{id}\t{}\t{}", b.system, fmt_exact(b.score))?;
            }
            Ok(())
        }
    })?;
    Ok(vec![summary, kept_report])
}
