//! Batch evaluation of trained conditions: closed-loop coordination trials
//! and message/position representational similarity on held-out episodes.

use std::fs::OpenOptions;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{generate_dataset, Dataset, EnvConfig, EnvState, EpisodeRecord};
use crate::error::{Error, Result};
use crate::metrics::{max_cross_correlation, mean_std, rsa_score};
use crate::model::{MessageDist, StepNoise};
use crate::runtime::{controller_for, random_start, rollout, CommConfig, Controller, ExpertController, Trajectory};
use crate::tape::{Real, Tape};
use crate::training::{
    derive_seed, draw_noise, joint_unroll, unroll_agent, Checkpoint, Condition, MessageFeed, Models, SeqBatch, View,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub comm: CommConfig,
    pub seed: u64,
    /// Held-out expert episodes used for the similarity analysis.
    pub n_test_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            comm: CommConfig::default(),
            seed: 0,
            n_test_episodes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    /// `None` when the trajectory collapsed and the score is undefined.
    pub max_cross_correlation: Option<f64>,
    pub trajectory: Trajectory,
    pub selection_rate_a: f64,
    pub selection_rate_b: f64,
}

/// Seed of trial `index` within an evaluation seeded with `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 1 << 20 | index as u64)
}

/// Runs one trial from a uniformly random start and scores the visited
/// positions against the ideal closed curve.
pub fn run_trial(ctrl: &mut dyn Controller, env: &EnvConfig, seed: u64) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_start(env, &mut rng);
    score_trial(ctrl, env, start, seed, &mut rng)
}

pub fn score_trial(
    ctrl: &mut dyn Controller,
    env: &EnvConfig,
    start: EnvState,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult> {
    let trajectory = rollout(ctrl, env, start, env.episode_length, seed, rng)?;
    let score = match max_cross_correlation(trajectory.visited(), &env.ideal_curve()) {
        Ok(s) => Some(s),
        Err(Error::MetricUndefined(msg)) => {
            log::warn!("trial {seed}: excluded ({msg})");
            None
        }
        Err(e) => return Err(e),
    };
    let (ra, rb) = trajectory.selection_rates();
    Ok(TrialResult {
        max_cross_correlation: score,
        trajectory,
        selection_rate_a: ra,
        selection_rate_b: rb,
    })
}

/// Expert rollout from an on-trajectory start, the harness sanity check.
pub fn expert_trial(env: &EnvConfig, start_phase: f64, seed: u64) -> Result<TrialResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctrl = ExpertController { env: env.clone() };
    let start = EnvState::on_trajectory(start_phase, env);
    score_trial(&mut ctrl, env, start, seed, &mut rng)
}

/// Message posterior means along one held-out episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageTrace {
    /// `A`, `B`, `joint` or `single`.
    pub source: String,
    pub episode: usize,
    /// One mean per observation, `T + 1` rows.
    pub means: Vec<Vec<f64>>,
}

fn rows_of<F: Real>(a: &Array2<F>, i: usize) -> Vec<f64> {
    a.row(i).iter().map(|x| x.to_f64().unwrap()).collect()
}

fn collect_traces<F: Real>(source: &str, dists: &[MessageDist<'_, F>], n: usize, out: &mut Vec<MessageTrace>) {
    let means: Vec<Array2<F>> = dists.iter().map(|d| d.mean.to_array()).collect();
    for i in 0..n {
        out.push(MessageTrace {
            source: source.to_string(),
            episode: i,
            means: means.iter().map(|m| rows_of(m, i)).collect(),
        });
    }
}

/// Teacher-forces the models over `test` and returns the message means per
/// step for every message source.
pub fn message_traces<F: Real>(models: &Models<F>, test: &[EpisodeRecord], seed: u64) -> Result<Vec<MessageTrace>> {
    let eps: Vec<&EpisodeRecord> = test.iter().collect();
    let n = eps.len();
    let cfg = models.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5));
    let tape = Tape::<F>::new();
    let mut out = Vec::new();
    match models {
        Models::Pair { a, b } => {
            for (label, model, view) in [("A", a, View::A), ("B", b, View::B)] {
                let batch = SeqBatch::from_episodes(&eps, view)?;
                let noise: Vec<StepNoise<F>> = draw_noise(&mut rng, batch.steps(), n, &cfg);
                let p = model.params.bind_frozen(&tape);
                let u = unroll_agent(model, &p, &batch, &noise, MessageFeed::Own)?;
                let mut dists = u.messages.clone();
                dists.push(model.message.infer(&p, u.states.last().unwrap().features()));
                collect_traces(label, &dists, n, &mut out);
            }
        }
        Models::Joint(j) => {
            let ba = SeqBatch::from_episodes(&eps, View::A)?;
            let bb = SeqBatch::from_episodes(&eps, View::B)?;
            let na = draw_noise(&mut rng, ba.steps(), n, &cfg);
            let nb = draw_noise(&mut rng, bb.steps(), n, &cfg);
            let p = j.params.bind_frozen(&tape);
            let u = joint_unroll(j, &p, &ba, &bb, &na, &nb)?;
            let mut dists = u.messages.clone();
            dists.push(j.infer_message(&p, u.a.states.last().unwrap(), u.b.states.last().unwrap()));
            collect_traces("joint", &dists, n, &mut out);
        }
        Models::Single(m) => {
            let batch = SeqBatch::from_episodes(&eps, View::Full)?;
            let noise = draw_noise(&mut rng, batch.steps(), n, &cfg);
            let p = m.params.bind_frozen(&tape);
            let u = unroll_agent(m, &p, &batch, &noise, MessageFeed::Own)?;
            let mut dists = u.messages.clone();
            dists.push(m.message.infer(&p, u.states.last().unwrap().features()));
            collect_traces("single", &dists, n, &mut out);
        }
    }
    Ok(out)
}

/// Similarity of one message source, averaged over episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRsa {
    pub source: String,
    pub rho: f64,
    /// Episodes whose messages were constant and had no defined score.
    pub undefined: usize,
}

/// Mean Spearman correlation per message source over the episodes where
/// it is defined; NaN when it is defined for none.
pub fn rsa_by_source(traces: &[MessageTrace], test: &[EpisodeRecord]) -> Result<Vec<SourceRsa>> {
    let mut sources: Vec<String> = Vec::new();
    for t in traces {
        if !sources.contains(&t.source) {
            sources.push(t.source.clone());
        }
    }
    sources
        .into_iter()
        .map(|source| {
            let mut rhos = Vec::new();
            let mut undefined = 0;
            for t in traces.iter().filter(|t| t.source == source) {
                match rsa_score(&t.means, &test[t.episode].truth) {
                    Ok(r) => rhos.push(r.spearman_rho),
                    Err(Error::MetricUndefined(_)) => undefined += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok(SourceRsa {
                source,
                rho: mean_std(&rhos).mean,
                undefined,
            })
        })
        .collect()
}

/// Held-out expert episodes, drawn from a seed disjoint from training data.
pub fn test_dataset(env: &EnvConfig, n: usize, seed: u64) -> Result<Dataset> {
    let cfg = EnvConfig {
        seed: derive_seed(seed, 7),
        ..env.clone()
    };
    generate_dataset(&cfg, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub condition: Condition,
    pub bins: String,
    pub seed: u64,
    pub communication: bool,
    pub n_trials: usize,
    pub mean: f64,
    pub std: f64,
    pub exclusions: usize,
    pub rsa_mean: f64,
    pub selection_rate_a: f64,
    pub selection_rate_b: f64,
    pub rsa: Vec<SourceRsa>,
}

/// Closed-loop trials plus similarity analysis for one checkpoint.
pub fn evaluate_condition<F: Real>(ckpt: &Checkpoint<F>, env: &EnvConfig, cfg: &EvalConfig) -> Result<EvalSummary> {
    if ckpt.condition != Condition::Baseline && ckpt.env.bins != env.bins {
        return Err(Error::Config(format!(
            "checkpoint was trained with bins {} but evaluation uses {}",
            ckpt.env.bins, env.bins
        )));
    }
    if cfg.n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let mut scores = Vec::with_capacity(cfg.n_trials);
    let (mut ra, mut rb) = (0.0, 0.0);
    let mut exclusions = 0;
    for i in 0..cfg.n_trials {
        let seed = trial_seed(cfg.seed, i);
        let mut ctrl = controller_for(&ckpt.models, &cfg.comm, env, seed)?;
        let r = run_trial(ctrl.as_mut(), env, seed)?;
        match r.max_cross_correlation {
            Some(s) => scores.push(s),
            None => exclusions += 1,
        }
        ra += r.selection_rate_a / cfg.n_trials as f64;
        rb += r.selection_rate_b / cfg.n_trials as f64;
    }
    let ms = mean_std(&scores);
    let rsa = if cfg.n_test_episodes > 0 {
        let test = test_dataset(env, cfg.n_test_episodes, cfg.seed)?;
        let traces = message_traces(&ckpt.models, &test.episodes, cfg.seed)?;
        rsa_by_source(&traces, &test.episodes)?
    } else {
        Vec::new()
    };
    let rsa_mean = if rsa.is_empty() {
        f64::NAN
    } else {
        rsa.iter().map(|r| r.rho).sum::<f64>() / rsa.len() as f64
    };
    Ok(EvalSummary {
        condition: ckpt.condition,
        bins: env.bins.to_string(),
        seed: ckpt.training.seed,
        communication: cfg.comm.communication,
        n_trials: cfg.n_trials,
        mean: ms.mean,
        std: ms.std,
        exclusions,
        rsa_mean,
        selection_rate_a: ra,
        selection_rate_b: rb,
        rsa,
    })
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: Condition,
    pub bins: String,
    pub seed: u64,
    pub communication: String,
    pub n_trials: usize,
    pub mean: f64,
    pub std: f64,
    pub exclusions: usize,
    pub rsa_a: Option<f64>,
    pub rsa_b: Option<f64>,
    pub rsa_mean: f64,
    pub selection_rate_a: f64,
    pub selection_rate_b: f64,
}

impl From<&EvalSummary> for ResultRow {
    fn from(s: &EvalSummary) -> Self {
        let find = |names: &[&str]| {
            s.rsa
                .iter()
                .find(|r| names.contains(&r.source.as_str()))
                .map(|r| r.rho)
        };
        Self {
            condition: s.condition,
            bins: s.bins.clone(),
            seed: s.seed,
            communication: if s.communication { "on" } else { "off" }.into(),
            n_trials: s.n_trials,
            mean: s.mean,
            std: s.std,
            exclusions: s.exclusions,
            rsa_a: find(&["A", "joint", "single"]),
            rsa_b: find(&["B"]),
            rsa_mean: s.rsa_mean,
            selection_rate_a: s.selection_rate_a,
            selection_rate_b: s.selection_rate_b,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends rows to a results table, writing the header for a new file.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            crate::io::ensure_dir(dir)?;
        }
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row of a message-trace table.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub source: String,
    pub episode: usize,
    pub step: usize,
    pub message: Vec<f64>,
    pub position: [f64; 2],
}

/// Writes message means next to the true positions, one row per step.
pub fn write_traces(path: &Path, traces: &[MessageTrace], test: &[EpisodeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = traces.first().and_then(|t| t.means.first()).map_or(0, |m| m.len());
    let mut header = vec!["source".to_string(), "episode".into(), "step".into()];
    header.extend((0..dim).map(|k| format!("m{k}")));
    header.extend(["x".to_string(), "y".into()]);
    w.write_record(&header)?;
    for t in traces {
        let truth = &test[t.episode].truth;
        for (step, (m, p)) in t.means.iter().zip(truth).enumerate() {
            let mut rec = vec![t.source.clone(), t.episode.to_string(), step.to_string()];
            rec.extend(m.iter().map(|v| v.to_string()));
            rec.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if width < 5 {
        return Err(bad("trace table needs source, episode, step, x and y columns"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|_| bad("non-numeric field")) };
        out.push(TracePoint {
            source: rec[0].to_string(),
            episode: rec[1].parse().map_err(|_| bad("bad episode index"))?,
            step: rec[2].parse().map_err(|_| bad("bad step index"))?,
            message: (3..width - 2).map(num).collect::<Result<_>>()?,
            position: [num(width - 2)?, num(width - 1)?],
        });
    }
    Ok(out)
}
