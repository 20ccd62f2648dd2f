use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use mcref_core::active::{
    compare_strategies, labels_to_target, ALRun, HumanOracle, LabelRequest, Oracle, OracleError,
    RunManifest, SimulatedOracle, StopReason,
};
use mcref_core::nn::{grid_search_dropout, train, Checkpoint, Network};
use mcref_core::queue::{LoopPhase, ReferralQueue};
use mcref_core::rejection::{
    referral_curve, threshold_sweep, write_points_csv, write_threshold_csv, MetricsReport,
    ReferralMode, RejectionPolicy,
};
use mcref_core::rng::derive_seed;
use mcref_core::uncertainty::{
    classify_outcome, mc_predict_rows, write_posterior_jsonl, Outcome, PosteriorSummary,
};
use mcref_core::{Dataset, Error as CoreError};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::report::{emit, envelope, read_report, to_csv, to_pretty, write_text};
use crate::server::router;
use crate::setup::{self, Prepared, SUPERVISED_SPLIT};

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(c) => train_cmd(c, seed),
        Command::McPredict(c) => mc_predict_cmd(c, seed),
        Command::SweepThreshold(c) => sweep_cmd(c, seed),
        Command::ReferralCurve(c) => curve_cmd(c, seed),
        Command::GridDropout(c) => grid_cmd(c, seed),
        Command::ActiveLearn(c) => match c.oracle {
            OracleArg::Simulated => active_cmd(c.al, c.out, seed),
            OracleArg::Human => serve_cmd(c.al, c.serve, c.out, seed),
        },
        Command::Serve(c) => serve_cmd(c.al, c.serve, c.out, seed),
        Command::ExportReport(c) => export_cmd(c),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn accuracy_of(net: &Network, data: &Dataset) -> Option<f64> {
    (!data.is_empty()).then(|| net.accuracy(data))
}

#[derive(Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
    pool: usize,
}

fn describe_data(p: &Prepared) -> Value {
    let s = &p.splits;
    json!({
        "num_classes": p.num_classes,
        "input_dim": s.val.input_dim(),
        "sizes": SplitSizes { train: s.train.len(), val: s.val.len(), test: s.test.len(), pool: s.pool.len() },
        "split_checksums": p.checksums(),
        "standardised": p.normalisation.is_some(),
    })
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> CliResult<String> {
    let text = ckpt.to_json()?;
    std::fs::write(path, &text)
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(sha256_hex(text.as_bytes()))
}

fn train_cmd(c: TrainCmd, seed: u64) -> CliResult<()> {
    let prepared = setup::prepare(&c.data, SUPERVISED_SPLIT, seed)?;
    let train_set = &prepared.splits.train;
    if train_set.is_empty() {
        return Err(CliError::usage("the train split is empty"));
    }
    let net_cfg = setup::network_config(&c.net, train_set.input_dim(), prepared.num_classes, seed)?;
    let train_cfg = setup::train_config(&c.train, seed)?;
    let trained = train(Network::new(net_cfg.clone())?, train_set, &train_cfg)?;
    let net = &trained.network;
    let digest = save_checkpoint(
        &Checkpoint::capture(net, Some(&trained.trainer)),
        &c.checkpoint,
    )?;
    let report = envelope(
        "train",
        json!({
            "seed": seed,
            "data": describe_data(&prepared),
            "network": net_cfg,
            "training": train_cfg,
            "epochs": trained.trace,
            "accuracy": {
                "train": accuracy_of(net, &prepared.splits.train),
                "val": accuracy_of(net, &prepared.splits.val),
                "test": accuracy_of(net, &prepared.splits.test),
            },
            "checkpoint_sha256": digest,
        }),
    )?;
    emit(c.out.out.as_deref(), &report)
}

/// A trained network with MC posteriors on one split.
struct Scored {
    prepared: Prepared,
    network: Network,
    summaries: Vec<PosteriorSummary>,
    labels: Vec<usize>,
    header: Value,
}

fn split_name(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
        SplitName::Pool => "pool",
    }
}

fn load_network(path: &Path) -> CliResult<Network> {
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        CoreError::Io(io) => CliError::io(format!("reading {}", path.display()), io),
        other => other.into(),
    })?;
    Ok(ckpt.network()?)
}

fn score(input: &ModelInput, seed: u64) -> CliResult<Scored> {
    let prepared = setup::prepare(&input.data, SUPERVISED_SPLIT, seed)?;
    let network = load_network(&input.checkpoint)?;
    let set = prepared.get(input.on);
    if set.is_empty() {
        return Err(CliError::usage(format!(
            "the {} split is empty",
            split_name(input.on)
        )));
    }
    if set.input_dim() != network.input_dim() || set.num_classes() > network.num_classes() {
        return Err(CliError::usage(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            network.input_dim(),
            network.num_classes(),
            set.input_dim(),
            set.num_classes()
        )));
    }
    let mc = setup::mc_config(&input.mc, seed)?;
    let rows: Vec<usize> = (0..set.len()).collect();
    let summaries = mc_predict_rows(&network, set, &rows, &mc)?;
    let labels = set.labels().to_vec();
    let header = json!({
        "seed": seed,
        "split": split_name(input.on),
        "samples": set.len(),
        "mc": mc,
        "data": describe_data(&prepared),
    });
    Ok(Scored {
        prepared,
        network,
        summaries,
        labels,
        header,
    })
}

fn merge(header: &Value, body: Value) -> Value {
    let mut out = header.clone();
    if let (Value::Object(dst), Value::Object(src)) = (&mut out, body) {
        dst.extend(src);
    }
    out
}

fn mc_predict_cmd(c: PredictCmd, seed: u64) -> CliResult<()> {
    let s = score(&c.input, seed)?;
    let set = s.prepared.get(c.input.on);
    let mut outcomes: BTreeMap<&str, usize> = [
        "correct_certain",
        "correct_uncertain",
        "incorrect_certain",
        "incorrect_uncertain",
    ]
    .into_iter()
    .map(|k| (k, 0))
    .collect();
    for (sum, &label) in s.summaries.iter().zip(&s.labels) {
        let key = match classify_outcome(sum, label, c.tau) {
            Outcome::CorrectCertain => "correct_certain",
            Outcome::CorrectUncertain => "correct_uncertain",
            Outcome::IncorrectCertain => "incorrect_certain",
            Outcome::IncorrectUncertain => "incorrect_uncertain",
        };
        *outcomes.get_mut(key).expect("all keys present") += 1;
    }
    let n = s.summaries.len() as f64;
    let mc_correct = s
        .summaries
        .iter()
        .zip(&s.labels)
        .filter(|(sum, &l)| sum.predicted_class == l)
        .count();
    let mut dump = Vec::new();
    write_posterior_jsonl(&s.summaries, c.full_samples, &mut dump)?;
    if let Some(path) = &c.posteriors {
        std::fs::write(path, &dump)
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    let body = json!({
        "tau": c.tau,
        "mc_accuracy": mc_correct as f64 / n,
        "deterministic_accuracy": s.network.accuracy(set),
        "mean_scalar_uncertainty": s.summaries.iter().map(|x| x.scalar_uncertainty).sum::<f64>() / n,
        "outcomes": outcomes,
        "posteriors_sha256": sha256_hex(&dump),
    });
    emit(
        c.out.out.as_deref(),
        &envelope("mc-predict", merge(&s.header, body))?,
    )
}

fn write_csv_file(
    path: &Path,
    write: impl FnOnce(&mut Vec<u8>) -> mcref_core::Result<()>,
) -> CliResult<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn sweep_cmd(c: SweepCmd, seed: u64) -> CliResult<()> {
    let s = score(&c.input, seed)?;
    let rows = threshold_sweep(&s.summaries, &s.labels, &c.taus, c.positive_class)?;
    if let Some(path) = &c.csv_out {
        write_csv_file(path, |buf| write_threshold_csv(&rows, buf))?;
    }
    let body = json!({ "positive_class": c.positive_class, "rows": rows });
    emit(
        c.out.out.as_deref(),
        &envelope("sweep-threshold", merge(&s.header, body))?,
    )
}

fn curve_cmd(c: CurveCmd, seed: u64) -> CliResult<()> {
    if c.repeats == 0 {
        return Err(CliError::usage("--repeats must be at least 1"));
    }
    let s = score(&c.input, seed)?;
    let pc = c.positive_class;
    let informed = referral_curve(
        &s.summaries,
        &s.labels,
        &c.fractions,
        ReferralMode::Informed,
        &[],
        pc,
    )?;
    let seeds: Vec<u64> = (0..c.repeats)
        .map(|i| derive_seed(seed, &[0x4ef, i]))
        .collect();
    let random = referral_curve(
        &s.summaries,
        &s.labels,
        &c.fractions,
        ReferralMode::Random,
        &seeds,
        pc,
    )?;
    let policy = RejectionPolicy::InformedFraction {
        fraction: c.policy_fraction,
    };
    let report = MetricsReport::build(&s.summaries, &s.labels, policy, &[informed, random], pc)?;
    if let Some(path) = &c.csv_out {
        write_csv_file(path, |buf| write_points_csv(&report.points, buf))?;
    }
    let body = merge(&s.header, serde_json::to_value(&report)?);
    emit(c.out.out.as_deref(), &envelope("referral-curve", body)?)
}

fn grid_cmd(c: GridCmd, seed: u64) -> CliResult<()> {
    let prepared = setup::prepare(&c.data, SUPERVISED_SPLIT, seed)?;
    let train_set = &prepared.splits.train;
    if train_set.is_empty() {
        return Err(CliError::usage("the train split is empty"));
    }
    let base = setup::network_config(&c.net, train_set.input_dim(), prepared.num_classes, seed)?;
    let train_cfg = setup::train_config(&c.train, seed)?;
    let result = grid_search_dropout(train_set, &base, &train_cfg, &c.alphas, &c.betas, c.folds)?;
    let cells: Vec<Value> = c
        .alphas
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| {
            let result = &result;
            c.betas.iter().enumerate().map(
                move |(j, &b)| json!({ "alpha": a, "beta": b, "accuracy": result.accuracy[i][j] }),
            )
        })
        .collect();
    let body = json!({
        "seed": seed,
        "data": describe_data(&prepared),
        "network": base,
        "training": train_cfg,
        "grid": result,
        "cells": cells,
    });
    emit(c.out.out.as_deref(), &envelope("grid-dropout", body)?)
}

fn active_report(run: &ALRun, prepared: &Prepared) -> Value {
    let state = run.state();
    let target = run.config().target_accuracy;
    json!({
        "seed": run.config().seed,
        "data": describe_data(prepared),
        "network": run.manifest().network_config,
        "config": run.config(),
        "strategy": run.config().strategy,
        "kappa": run.kappa(),
        "stop_reason": run.stop_reason(),
        "history": state.history,
        "labelled_fraction": state.labelled_fraction(),
        "labels_to_target": labels_to_target(&state.history, target),
        "final_state_digest": state.digest(),
    })
}

fn save_progress(run: &ALRun, al: &AlArgs) -> CliResult<()> {
    if let Some(path) = &al.checkpoint {
        save_checkpoint(&Checkpoint::capture(run.network(), None), path)?;
    }
    if let Some(path) = &al.manifest {
        write_text(Some(path), &run.manifest().to_json()?)?;
    }
    Ok(())
}

fn start_or_resume(al: &AlArgs, su: &setup::ActiveSetup) -> CliResult<ALRun> {
    match (&al.resume, &al.resume_checkpoint) {
        (Some(m), Some(ck)) => {
            let text = std::fs::read_to_string(m)
                .map_err(|e| CliError::io(format!("reading {}", m.display()), e))?;
            let manifest = RunManifest::from_json(&text)?;
            let network = load_network(ck)?;
            Ok(ALRun::resume(manifest, su.data.clone(), network)?)
        }
        (None, None) => Ok(ALRun::start(
            su.data.clone(),
            su.network.clone(),
            su.config.clone(),
        )?),
        _ => Err(CliError::usage(
            "--resume and --resume-checkpoint go together",
        )),
    }
}

fn active_cmd(al: AlArgs, out: OutArgs, seed: u64) -> CliResult<()> {
    let su = setup::active(&al, seed)?;
    if su.strategies.len() > 1 || al.repeats > 1 {
        if al.manifest.is_some() || al.resume.is_some() || al.checkpoint.is_some() {
            return Err(CliError::usage(
                "--manifest, --checkpoint and --resume apply to a single run",
            ));
        }
        if al.repeats == 0 {
            return Err(CliError::usage("--repeats must be at least 1"));
        }
        let seeds: Vec<u64> = (0..al.repeats).map(|i| seed.wrapping_add(i)).collect();
        let cmp = compare_strategies(
            &su.data,
            &su.network,
            &su.config,
            &su.strategies,
            &seeds,
            su.config.target_accuracy,
        )?;
        let body = json!({
            "seed": seed,
            "data": describe_data(&su.prepared),
            "network": su.network,
            "config": su.config,
            "comparison": cmp,
            "strategies": cmp.strategies.iter().map(|s| json!({
                "strategy": s.strategy,
                "reached": s.reached,
                "labels_to_target": s.labels_to_target,
                "mean": s.labels_to_target_stats.mean,
                "std": s.labels_to_target_stats.std,
            })).collect::<Vec<_>>(),
        });
        return emit(out.out.as_deref(), &envelope("active-learn", body)?);
    }
    let mut run = start_or_resume(&al, &su)?;
    let mut oracle = SimulatedOracle::from_dataset(&su.data.candidates);
    save_progress(&run, &al)?;
    while !run.is_finished() {
        run.step(&mut oracle)?;
        save_progress(&run, &al)?;
    }
    emit(
        out.out.as_deref(),
        &envelope("active-learn", active_report(&run, &su.prepared))?,
    )
}

/// Marks the loop as training once an annotator completes a batch.
struct StatusOracle(HumanOracle);

impl Oracle for StatusOracle {
    fn label(&mut self, requests: &[LabelRequest]) -> Result<Vec<usize>, OracleError> {
        let labels = self.0.label(requests)?;
        self.0
            .queue()
            .update_status(|s| s.phase = LoopPhase::Training);
        Ok(labels)
    }
}

fn publish(queue: &ReferralQueue, run: &ALRun) {
    let state = run.state();
    let last = state.history.last();
    queue.update_status(|s| {
        s.iteration = state.iteration;
        s.labelled_fraction = state.labelled_fraction();
        s.validation_accuracy = last.map(|r| r.validation_accuracy);
        s.test_accuracy = last.and_then(|r| r.test_accuracy);
        s.stop_reason = run.stop_reason().map(|r| stop_name(r).to_owned());
        if run.is_finished() {
            s.phase = LoopPhase::Finished;
        }
    });
}

fn stop_name(r: StopReason) -> &'static str {
    match r {
        StopReason::TargetReached => "target_reached",
        StopReason::PoolExhausted => "pool_exhausted",
        StopReason::Stalled => "stalled",
        StopReason::MaxIterations => "max_iterations",
    }
}

/// Steps the loop with labels from `queue`, retrying a round whose batch
/// expired. Blocks until the run stops.
pub fn drive_human_loop(
    mut run: ALRun,
    queue: Arc<ReferralQueue>,
    timeout: Duration,
    mut after_step: impl FnMut(&ALRun) -> CliResult<()>,
) -> CliResult<ALRun> {
    let mut oracle = StatusOracle(HumanOracle::new(queue.clone(), timeout));
    publish(&queue, &run);
    while !run.is_finished() {
        match run.step(&mut oracle) {
            Ok(_) => {}
            Err(CoreError::Oracle(OracleError::Timeout(t))) => {
                tracing::warn!(
                    ?t,
                    iteration = run.state().iteration,
                    "label batch expired, reissuing"
                );
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        publish(&queue, &run);
        after_step(&run)?;
    }
    publish(&queue, &run);
    Ok(run)
}

fn serve_cmd(al: AlArgs, serve: ServeArgs, out: OutArgs, seed: u64) -> CliResult<()> {
    if al.strategy.len() > 1 || al.repeats > 1 {
        return Err(CliError::usage("the labelling service drives a single run"));
    }
    if serve.timeout_secs == 0 {
        return Err(CliError::usage("--timeout-secs must be positive"));
    }
    let su = setup::active(&al, seed)?;
    let queue = Arc::new(ReferralQueue::new(su.network.num_classes));
    let runtime =
        tokio::runtime::Runtime::new().map_err(|e| CliError::io("starting the runtime", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(serve.bind)
            .await
            .map_err(|e| CliError::io(format!("binding {}", serve.bind), e))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::io("reading the bound address", e))?;
        eprintln!("listening on http://{addr}");
        let (done_tx, done_rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(queue.clone());
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = done_rx.await;
                })
                .await
        });

        queue.update_status(|s| s.phase = LoopPhase::Training);
        let timeout = Duration::from_secs(serve.timeout_secs);
        let loop_queue = queue.clone();
        let run = tokio::task::spawn_blocking(move || -> CliResult<(ALRun, setup::ActiveSetup)> {
            let run = start_or_resume(&al, &su)?;
            save_progress(&run, &al)?;
            let run = drive_human_loop(run, loop_queue, timeout, |r| save_progress(r, &al))?;
            Ok((run, su))
        })
        .await
        .map_err(|e| CliError::Runtime(format!("learning loop panicked: {e}")))?;
        let (run, su) = match run {
            Ok(v) => v,
            Err(e) => {
                let _ = done_tx.send(());
                return Err(e);
            }
        };
        emit(
            out.out.as_deref(),
            &envelope("serve", active_report(&run, &su.prepared))?,
        )?;
        if serve.exit_when_done {
            let _ = done_tx.send(());
        } else {
            // Keep the finished queue and status readable until interrupted.
            std::mem::forget(done_tx);
        }
        server
            .await
            .map_err(|e| CliError::Runtime(format!("server task failed: {e}")))?
            .map_err(|e| CliError::io("serving", e))
    })
}

fn export_cmd(c: ExportCmd) -> CliResult<()> {
    let value = read_report(&c.input)?;
    let text = match c.format {
        ExportFormat::Json => to_pretty(&value)?,
        ExportFormat::Csv => to_csv(&value, c.table.as_deref())?,
    };
    write_text(c.out.out.as_deref(), &text)
}
