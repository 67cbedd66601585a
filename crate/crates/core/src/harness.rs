//! Experiment orchestration: the synchronous training loop, exploration
//! schedule, per-iteration metrics, final-window summaries and CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::env::{global_reward, utilization, JointAction};
use crate::error::{Error, Result};
use crate::meanfield::empirical_mean_action;
use crate::rl::{Agent, AgentParams};
use crate::sim::{build_neighbor_graph, sample_action_spaces, DeviceId, SimConfig};

/// Iterations at the end of a run that summaries are computed over.
pub const SUMMARY_WINDOW: usize = 500;

pub const METRICS_HEADER: [&str; 6] = [
    "iteration",
    "mean_loss",
    "utilization",
    "feasible",
    "population_mean_action",
    "epsilon",
];

/// What happened in one synchronous round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean batch loss over the agents that trained this round, if any did.
    pub mean_loss: Option<f64>,
    pub utilization: f64,
    pub feasible: bool,
    /// Mean request across all devices, in subchannels.
    pub population_mean_action: f64,
    pub epsilon: f64,
}

/// Statistics over the last `window` iterations of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowSummary {
    pub window: usize,
    pub mean_utilization: f64,
    pub infeasible_fraction: f64,
    /// Population variance of `population_mean_action` over the window.
    pub action_variance: f64,
    pub mean_population_action: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: SimConfig,
    pub metrics: Vec<IterationMetrics>,
    /// `None` when the run is shorter than the window.
    pub summary: Option<WindowSummary>,
    /// Joint action of every iteration, when requested.
    pub actions: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_actions: bool,
    /// Print a progress line to stderr every this many iterations.
    pub progress_every: Option<usize>,
}

/// Number of iterations over which exploration is annealed: the first 90% of
/// the budget. The remaining iterations run at `epsilon_end`, so the final
/// summary window of a 5000-iteration run measures the learned policy rather
/// than residual exploration.
pub fn exploration_horizon(iterations: usize) -> usize {
    iterations - iterations / 10
}

/// Linear interpolation from `start` at `t = 0` to `end` at `t = total`;
/// later iterations stay at `end`.
pub fn epsilon_schedule(t: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 || t >= total {
        return end;
    }
    let frac = t as f64 / total as f64;
    start + (end - start) * frac
}

/// Divides by the largest magnitude; an all-zero series stays zero.
pub fn normalized_series(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / max).collect()
}

/// Window statistics over the last `window` entries, if there are that many.
pub fn summarize(metrics: &[IterationMetrics], window: usize) -> Option<WindowSummary> {
    if window == 0 || metrics.len() < window {
        return None;
    }
    let tail = &metrics[metrics.len() - window..];
    let n = window as f64;
    let mean_utilization = tail.iter().map(|m| m.utilization).sum::<f64>() / n;
    let infeasible_fraction = tail.iter().filter(|m| !m.feasible).count() as f64 / n;
    let mean_action = tail.iter().map(|m| m.population_mean_action).sum::<f64>() / n;
    let action_variance = tail
        .iter()
        .map(|m| (m.population_mean_action - mean_action).powi(2))
        .sum::<f64>()
        / n;
    Some(WindowSummary {
        window,
        mean_utilization,
        infeasible_fraction,
        action_variance,
        mean_population_action: mean_action,
    })
}

pub fn run_experiment(config: &SimConfig) -> Result<RunResult> {
    run_experiment_with(config, RunOptions::default())
}

/// Runs the full synchronous loop: every agent acts, neighbor means are
/// smoothed, the access point scores the joint request, transitions are
/// stored and every agent trains once.
pub fn run_experiment_with(config: &SimConfig, options: RunOptions) -> Result<RunResult> {
    config.validate()?;
    let n = config.n_devices;
    let graph = build_neighbor_graph(n, config.n_neighbors, config.seed)?;
    let spaces = sample_action_spaces(n, config.action_mode, config.seed);
    let params = AgentParams {
        variant: config.algorithm,
        learning_rate: config.learning_rate,
        buffer_capacity: config.buffer_capacity,
        seed: config.seed,
    };
    let mut agents = spaces
        .iter()
        .enumerate()
        .map(|(j, &space)| Agent::new(DeviceId(j), space, params))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = Vec::with_capacity(config.iterations);
    let mut trace = options.record_actions.then(|| Vec::with_capacity(config.iterations));
    let mut actions = vec![0usize; n];
    let mut neighbor_actions = Vec::with_capacity(config.n_neighbors);
    let fault = |iteration: usize, device: usize, err: Error| Error::TrainingFault {
        iteration,
        device,
        reason: err.to_string(),
    };

    let horizon = exploration_horizon(config.iterations);
    for t in 0..config.iterations {
        let epsilon = epsilon_schedule(t, horizon, config.epsilon_start, config.epsilon_end);
        for (a, agent) in actions.iter_mut().zip(&mut agents) {
            *a = agent.act(epsilon).map_err(|e| fault(t, agent.id.0, e))?;
        }

        let joint = JointAction::unchecked(actions.clone());
        let reward = global_reward(&joint, config.n_channels);
        let (rate, feasible) = utilization(&joint, config.n_channels);

        for (j, neighbors) in graph.iter() {
            neighbor_actions.clear();
            neighbor_actions.extend(neighbors.iter().map(|i| actions[i.0]));
            let observed = empirical_mean_action(&neighbor_actions)?;
            agents[j.0]
                .record_round(actions[j.0], reward, &observed, config.smoothing)
                .map_err(|e| fault(t, j.0, e))?;
        }

        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        for agent in &mut agents {
            match agent.train_step(config.discount, config.target_rate, config.batch_size) {
                Ok(Some(loss)) => {
                    loss_sum += loss;
                    trained += 1;
                }
                Ok(None) => {}
                Err(e) => return Err(fault(t, agent.id.0, e)),
            }
        }

        let m = IterationMetrics {
            iteration: t,
            mean_loss: (trained > 0).then(|| loss_sum / trained as f64),
            utilization: rate,
            feasible,
            population_mean_action: joint.total() as f64 / n as f64,
            epsilon,
        };
        if let Some(every) = options.progress_every {
            if every > 0 && (t + 1) % every == 0 {
                eprintln!(
                    "iter {:>6}  eps {:.3}  util {:.3}  mean req {:.3}  loss {}",
                    t + 1,
                    epsilon,
                    rate,
                    m.population_mean_action,
                    m.mean_loss.map_or("-".into(), |l| format!("{l:.5}")),
                );
            }
        }
        metrics.push(m);
        if let Some(trace) = trace.as_mut() {
            trace.push(actions.iter().map(|&a| a as u8).collect());
        }
    }

    Ok(RunResult {
        config: config.clone(),
        summary: summarize(&metrics, SUMMARY_WINDOW),
        metrics,
        actions: trace,
    })
}

/// Writes per-iteration metrics as CSV. Floats use the shortest decimal that
/// parses back to the same value; a round where no agent trained leaves
/// `mean_loss` empty.
pub fn write_metrics_csv<W: Write>(metrics: &[IterationMetrics], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.iteration.to_string(),
            m.mean_loss.map(|l| l.to_string()).unwrap_or_default(),
            m.utilization.to_string(),
            m.feasible.to_string(),
            m.population_mean_action.to_string(),
            m.epsilon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a file produced by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<IterationMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::InvalidCall(format!("unexpected metrics header {header:?}")));
    }
    let bad = |what: &str| Error::InvalidCall(format!("malformed metrics field {what}"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let float = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
            Ok(IterationMetrics {
                iteration: rec[0].parse().map_err(|_| bad(&rec[0]))?,
                mean_loss: if rec[1].is_empty() { None } else { Some(float(1)?) },
                utilization: float(2)?,
                feasible: rec[3].parse().map_err(|_| bad(&rec[3]))?,
                population_mean_action: float(4)?,
                epsilon: float(5)?,
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 15] = [
    "run",
    "algorithm",
    "n_devices",
    "n_channels",
    "n_neighbors",
    "smoothing",
    "seed",
    "iterations",
    "status",
    "mean_utilization",
    "infeasible_fraction",
    "action_variance",
    "normalized_variance",
    "mean_population_action",
    "final_mean_loss",
];

/// A named run inside a sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub name: String,
    pub config: SimConfig,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub name: String,
    pub config: SimConfig,
    pub result: Result<RunResult>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub outcomes: Vec<SweepOutcome>,
    pub summary_path: Option<PathBuf>,
}

impl SweepReport {
    pub fn faults(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

/// Runs every entry (on up to `jobs` threads, results kept in input order),
/// writes `<out>/<name>/metrics.csv` per successful run and a
/// `<out>/summary.csv` with one row per entry. A failing run is recorded in
/// the summary and does not stop the others. An empty sweep writes nothing.
pub fn sweep(entries: &[SweepEntry], out_dir: &Path, jobs: usize) -> Result<SweepReport> {
    if entries.is_empty() {
        return Ok(SweepReport {
            outcomes: Vec::new(),
            summary_path: None,
        });
    }
    fs::create_dir_all(out_dir)?;

    let results: Vec<Mutex<Option<Result<RunResult>>>> = entries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(entry) = entries.get(i) else { break };
        let result = run_experiment(&entry.config).and_then(|run| {
            write_run_dir(&out_dir.join(&entry.name), &run)?;
            Ok(run)
        });
        *results[i].lock().unwrap() = Some(result);
    };
    let jobs = jobs.clamp(1, entries.len());
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let outcomes: Vec<SweepOutcome> = entries
        .iter()
        .zip(results)
        .map(|(entry, slot)| SweepOutcome {
            name: entry.name.clone(),
            config: entry.config.clone(),
            result: slot.into_inner().unwrap().expect("every entry is run"),
        })
        .collect();

    let summary_path = out_dir.join("summary.csv");
    write_summary_csv(&outcomes, fs::File::create(&summary_path)?)?;
    Ok(SweepReport {
        outcomes,
        summary_path: Some(summary_path),
    })
}

/// `metrics.csv` plus the echoed `config.json` for one run.
pub fn write_run_dir(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&run.metrics, fs::File::create(dir.join("metrics.csv"))?)?;
    let mut config = serde_json::to_string_pretty(&run.config)?;
    config.push('\n');
    fs::write(dir.join("config.json"), config)?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(outcomes: &[SweepOutcome], out: W) -> Result<()> {
    let variances: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok()?.summary.map(|s| s.action_variance))
        .collect();
    let mut normalized = normalized_series(&variances).into_iter();

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for o in outcomes {
        let c = &o.config;
        let mut row = vec![
            o.name.clone(),
            c.algorithm.to_string(),
            c.n_devices.to_string(),
            c.n_channels.to_string(),
            c.n_neighbors.to_string(),
            c.smoothing.to_string(),
            c.seed.to_string(),
            c.iterations.to_string(),
        ];
        match &o.result {
            Ok(run) => {
                row.push("ok".into());
                match run.summary {
                    Some(s) => row.extend([
                        s.mean_utilization.to_string(),
                        s.infeasible_fraction.to_string(),
                        s.action_variance.to_string(),
                        normalized.next().unwrap_or_default().to_string(),
                        s.mean_population_action.to_string(),
                    ]),
                    None => row.extend(std::iter::repeat_n(String::new(), 5)),
                }
                let last_loss = run.metrics.iter().rev().find_map(|m| m.mean_loss);
                row.push(last_loss.map(|l| l.to_string()).unwrap_or_default());
            }
            Err(e) => {
                row.push(format!("error: {e}"));
                row.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads every `*.json` config in `dir`, sorted by file name; the file stem
/// becomes the run name.
pub fn load_config_dir(dir: &Path) -> Result<Vec<SweepEntry>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let config =
                SimConfig::from_json_file(&p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            Ok(SweepEntry { name, config })
        })
        .collect()
}
