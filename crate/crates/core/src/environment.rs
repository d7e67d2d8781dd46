//! Two-agent trajectory-drawing task.
//!
//! A point `P` moves in the plane. Agent A pushes it along
//! `e_u = (1, -1)/sqrt 2` and agent B along `e_v = (1, 1)/sqrt 2`. A sees `x`
//! exactly and `y` through a binning quantizer; B the other way round. Both
//! readings carry Gaussian noise. The target is a five-lobed hypotrochoid
//! traced once per episode.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, ArrayEntry};

pub type Vec2 = [f64; 2];

pub const E_U: Vec2 = [FRAC_1_SQRT_2, -FRAC_1_SQRT_2];
pub const E_V: Vec2 = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];

const OUTER_RADIUS: f64 = 5.0;
const INNER_RADIUS: f64 = 3.0;
const PEN_OFFSET: f64 = 5.0;

/// Phase at which the curve closes (`6 pi` for `R = 5, r = 3`).
pub const THETA_MAX: f64 = 6.0 * PI;

/// Sensor resolution along the quantized axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Bins {
    Finite(u32),
    Infinite,
}

impl Bins {
    pub fn finite(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("bin count must be positive".into()));
        }
        Ok(Bins::Finite(n))
    }

    /// The full replication sweep, from full to minimal observability.
    pub fn full_sweep() -> Vec<Bins> {
        vec![
            Bins::Infinite,
            Bins::Finite(8),
            Bins::Finite(6),
            Bins::Finite(2),
            Bins::Finite(1),
        ]
    }
}

impl fmt::Display for Bins {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bins::Finite(n) => write!(f, "{n}"),
            Bins::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Bins {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" => Ok(Bins::Infinite),
            other => other
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad bin count `{s}`")))
                .and_then(Bins::finite),
        }
    }
}

impl TryFrom<String> for Bins {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Bins> for String {
    fn from(b: Bins) -> String {
        b.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Agent {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub bins: Bins,
    pub noise_std: f64,
    pub episode_length: usize,
    pub action_limit: f64,
    pub workspace_halfwidth: f64,
    pub trajectory_scale: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            bins: Bins::Infinite,
            noise_std: 0.01,
            episode_length: 200,
            action_limit: 0.1,
            workspace_halfwidth: 1.0,
            trajectory_scale: 0.8,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bins::Finite(0) = self.bins {
            return Err(Error::Config("bin count must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        if !(self.action_limit > 0.0) || !(self.workspace_halfwidth > 0.0) {
            return Err(Error::Config(
                "action_limit and workspace_halfwidth must be positive".into(),
            ));
        }
        if !(self.trajectory_scale > 0.0 && self.trajectory_scale < self.workspace_halfwidth) {
            return Err(Error::Config(
                "trajectory_scale must lie in (0, workspace_halfwidth)".into(),
            ));
        }
        Ok(())
    }

    pub fn phase_step(&self) -> f64 {
        THETA_MAX / self.episode_length as f64
    }

    pub fn target(&self, phase: f64) -> Vec2 {
        hypotrochoid_point(phase, self.trajectory_scale)
    }

    /// The ideal curve sampled at the `episode_length` phases of one circuit.
    pub fn ideal_curve(&self) -> Vec<Vec2> {
        (0..self.episode_length)
            .map(|k| self.target(k as f64 * self.phase_step()))
            .collect()
    }
}

/// Five-lobed hypotrochoid (`R = 5, r = 3, d = 5`) scaled so that its
/// maximal radius equals `scale`.
pub fn hypotrochoid_point(phase: f64, scale: f64) -> Vec2 {
    let rr = OUTER_RADIUS - INNER_RADIUS;
    let s = scale / (rr + PEN_OFFSET);
    let k = rr / INNER_RADIUS;
    [
        s * (rr * phase.cos() + PEN_OFFSET * (k * phase).cos()),
        s * (rr * phase.sin() - PEN_OFFSET * (k * phase).sin()),
    ]
}

/// Center of the bin containing `value` when `[-halfwidth, halfwidth]` is
/// split into `bins` equal intervals. Out-of-range values are clamped first.
pub fn quantize(value: f64, bins: Bins, halfwidth: f64) -> Result<f64> {
    match bins {
        Bins::Infinite => Ok(value),
        Bins::Finite(0) => Err(Error::Config("bin count must be positive".into())),
        Bins::Finite(n) => {
            let v = value.clamp(-halfwidth, halfwidth);
            let width = 2.0 * halfwidth / n as f64;
            let idx = (((v + halfwidth) / width).floor() as i64).clamp(0, n as i64 - 1);
            Ok(-halfwidth + (idx as f64 + 0.5) * width)
        }
    }
}

pub fn clip_action(a: f64, limit: f64) -> f64 {
    a.clamp(-limit, limit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub position: Vec2,
    pub phase: f64,
    pub step: usize,
}

impl EnvState {
    pub fn on_trajectory(phase: f64, cfg: &EnvConfig) -> Self {
        Self {
            position: cfg.target(phase),
            phase,
            step: 0,
        }
    }

    pub fn at(position: Vec2) -> Self {
        Self {
            position,
            phase: 0.0,
            step: 0,
        }
    }
}

/// Velocity integration with unit timestep.
pub fn step(state: &EnvState, a_a: f64, a_b: f64, cfg: &EnvConfig) -> EnvState {
    EnvState {
        position: [
            state.position[0] + a_a * E_U[0] + a_b * E_V[0],
            state.position[1] + a_a * E_U[1] + a_b * E_V[1],
        ],
        phase: state.phase + cfg.phase_step(),
        step: state.step + 1,
    }
}

/// Noise-free sensor reading; the quantized axis is `y` for A and `x` for B.
pub fn sense(position: Vec2, agent: Agent, cfg: &EnvConfig) -> Result<Vec2> {
    let w = cfg.workspace_halfwidth;
    let [x, y] = [position[0].clamp(-w, w), position[1].clamp(-w, w)];
    Ok(match agent {
        Agent::A => [x, quantize(y, cfg.bins, w)?],
        Agent::B => [quantize(x, cfg.bins, w)?, y],
    })
}

pub fn observe<R: Rng + ?Sized>(
    state: &EnvState,
    agent: Agent,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<Vec2> {
    let [a, b] = sense(state.position, agent, cfg)?;
    if cfg.noise_std == 0.0 {
        return Ok([a, b]);
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    Ok([a + noise.sample(rng), b + noise.sample(rng)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertActions {
    pub a: f64,
    pub b: f64,
    pub clipped: bool,
}

/// Exact inversion of the dynamics towards the next target point.
pub fn expert_actions(state: &EnvState, cfg: &EnvConfig) -> ExpertActions {
    let next = cfg.target(state.phase + cfg.phase_step());
    let d = [next[0] - state.position[0], next[1] - state.position[1]];
    let raw_a = d[0] * E_U[0] + d[1] * E_U[1];
    let raw_b = d[0] * E_V[0] + d[1] * E_V[1];
    let a = clip_action(raw_a, cfg.action_limit);
    let b = clip_action(raw_b, cfg.action_limit);
    ExpertActions {
        a,
        b,
        clipped: a != raw_a || b != raw_b,
    }
}

/// One expert circuit: `T + 1` observations and positions, `T` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub obs_a: Vec<Vec2>,
    pub obs_b: Vec<Vec2>,
    pub act_a: Vec<f64>,
    pub act_b: Vec<f64>,
    pub truth: Vec<Vec2>,
    pub start_phase: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.act_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.act_a.is_empty()
    }
}

/// Random stream for episode `index` of a dataset seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_episode(cfg: &EnvConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<EpisodeRecord> {
    let t_len = cfg.episode_length;
    let start_phase = rng.gen_range(0.0..THETA_MAX);
    let mut state = EnvState::on_trajectory(start_phase, cfg);
    let mut rec = EpisodeRecord {
        obs_a: Vec::with_capacity(t_len + 1),
        obs_b: Vec::with_capacity(t_len + 1),
        act_a: Vec::with_capacity(t_len),
        act_b: Vec::with_capacity(t_len),
        truth: Vec::with_capacity(t_len + 1),
        start_phase,
    };
    for t in 0..=t_len {
        rec.truth.push(state.position);
        rec.obs_a.push(observe(&state, Agent::A, cfg, rng)?);
        rec.obs_b.push(observe(&state, Agent::B, cfg, rng)?);
        if t == t_len {
            break;
        }
        let act = expert_actions(&state, cfg);
        if act.clipped {
            return Err(Error::ExpertClipped {
                episode: index,
                step: t,
            });
        }
        rec.act_a.push(act.a);
        rec.act_b.push(act.b);
        state = step(&state, act.a, act.b, cfg);
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: EnvConfig,
    pub episodes: Vec<EpisodeRecord>,
}

/// Expert demonstrations, one independent random stream per episode.
pub fn generate_dataset(cfg: &EnvConfig, n_episodes: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    let episodes = (0..n_episodes)
        .map(|i| generate_episode(cfg, i, &mut episode_rng(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        episodes,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    kind: String,
    episodes: usize,
    steps: usize,
    field_order: Vec<String>,
    config: EnvConfig,
    arrays: Vec<ArrayEntry>,
}

const DATASET_FIELDS: [&str; 6] = ["obs_A", "obs_B", "act_A", "act_B", "truth", "start_phase"];

impl Dataset {
    pub fn steps(&self) -> usize {
        self.config.episode_length
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let (n, t) = (self.episodes.len(), self.steps());
        let flat2 = |f: fn(&EpisodeRecord) -> &Vec<Vec2>| -> Vec<f64> {
            self.episodes.iter().flat_map(|e| f(e).iter().flatten().copied()).collect()
        };
        let flat1 = |f: fn(&EpisodeRecord) -> &Vec<f64>| -> Vec<f64> {
            self.episodes.iter().flat_map(|e| f(e).iter().copied()).collect()
        };
        let data: [(ArrayEntry, Vec<f64>); 6] = [
            (ArrayEntry::new("obs_A", vec![n, t + 1, 2]), flat2(|e| &e.obs_a)),
            (ArrayEntry::new("obs_B", vec![n, t + 1, 2]), flat2(|e| &e.obs_b)),
            (ArrayEntry::new("act_A", vec![n, t, 1]), flat1(|e| &e.act_a)),
            (ArrayEntry::new("act_B", vec![n, t, 1]), flat1(|e| &e.act_b)),
            (ArrayEntry::new("truth", vec![n, t + 1, 2]), flat2(|e| &e.truth)),
            (
                ArrayEntry::new("start_phase", vec![n]),
                self.episodes.iter().map(|e| e.start_phase).collect(),
            ),
        ];
        for (entry, values) in &data {
            io::write_entry(dir, entry, values)?;
        }
        let manifest = DatasetManifest {
            version: io::FORMAT_VERSION,
            kind: "dataset".into(),
            episodes: n,
            steps: t,
            field_order: DATASET_FIELDS.iter().map(|s| s.to_string()).collect(),
            config: self.config.clone(),
            arrays: data.into_iter().map(|(e, _)| e).collect(),
        };
        io::write_toml(&dir.join("manifest.toml"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.toml");
        let m: DatasetManifest = io::read_toml(&mpath)?;
        if m.version != io::FORMAT_VERSION || m.kind != "dataset" {
            return Err(Error::format(&mpath, "not a version-1 dataset manifest"));
        }
        let (n, t) = (m.episodes, m.steps);
        if t != m.config.episode_length {
            return Err(Error::format(&mpath, "steps disagree with config"));
        }
        let read = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let entry = io::find_entry(&m.arrays, name, &mpath)?;
            if entry.shape != shape {
                return Err(Error::format(&mpath, format!("{name}: unexpected shape {:?}", entry.shape)));
            }
            Ok(io::read_entry(dir, entry)?.into_iter().map(f64::from).collect())
        };
        let obs_a = read("obs_A", vec![n, t + 1, 2])?;
        let obs_b = read("obs_B", vec![n, t + 1, 2])?;
        let act_a = read("act_A", vec![n, t, 1])?;
        let act_b = read("act_B", vec![n, t, 1])?;
        let truth = read("truth", vec![n, t + 1, 2])?;
        let phases = read("start_phase", vec![n])?;
        let pairs = |v: &[f64], i: usize| -> Vec<Vec2> {
            v[i * (t + 1) * 2..(i + 1) * (t + 1) * 2]
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect()
        };
        let episodes = (0..n)
            .map(|i| EpisodeRecord {
                obs_a: pairs(&obs_a, i),
                obs_b: pairs(&obs_b, i),
                act_a: act_a[i * t..(i + 1) * t].to_vec(),
                act_b: act_b[i * t..(i + 1) * t].to_vec(),
                truth: pairs(&truth, i),
                start_phase: phases[i],
            })
            .collect();
        Ok(Dataset {
            config: m.config,
            episodes,
        })
    }
}
