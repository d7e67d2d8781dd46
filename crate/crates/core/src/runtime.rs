//! Online execution of trained agents: sliding-window posterior inference,
//! message exchange, free-energy based message selection and action output.
//!
//! At step `t` an agent holds observations `o_{t-k..=t}` and actions
//! `a_{t-k..t}` with `k = min(t, W)`, plus a cached boundary: the latent
//! state preceding `o_{t-k}` and the message/action that lead into it. Each
//! step both agents unroll the window with their own sampled messages, swap
//! the sampled sequences, re-score the window under the received sequence
//! and keep whichever has the lower free energy (ties keep their own).
//!
//! Stochastic draws for step `t` of an agent come from a stream keyed by
//! `(seed, agent, t)`, so competing message sequences are scored under the
//! same random numbers and a window re-unroll reproduces earlier steps.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{self, clip_action, expert_actions, observe, Agent, EnvConfig, EnvState, Vec2};
use crate::error::{Error, Result};
use crate::io::{self, ArrayEntry};
use crate::model::{AgentModel, Bound, JointModel, LatentState, MessageHead, ModelConfig, ParamStore, StepNoise, WorldModel};
use crate::tape::{lit, Real, Tape};
use crate::training::{derive_seed, Models};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    pub window: usize,
    pub communication: bool,
    /// KL weight of the selection criterion; reconstruction has weight 1.
    pub w_kld: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            window: 10,
            communication: true,
            w_kld: 0.01,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws used by `agent` at absolute step `t` of a run seeded with `seed`.
pub fn runtime_noise<F: Real>(seed: u64, agent: u64, t: usize, cfg: &ModelConfig) -> StepNoise<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 16 + agent));
    rng.set_stream(t as u64);
    StepNoise::draw(&mut rng, 1, cfg)
}

/// Tape-free copy of a latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentValues<F> {
    pub h: Array2<F>,
    pub z_probs: Array2<F>,
    pub z_sample: Array2<F>,
}

impl<F: Real> LatentValues<F> {
    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        let z = Array2::zeros((batch, cfg.latent_width()));
        Self {
            h: Array2::zeros((batch, cfg.gru_dim)),
            z_probs: z.clone(),
            z_sample: z,
        }
    }

    pub fn of(s: &LatentState<'_, F>) -> Self {
        Self {
            h: s.h.to_array(),
            z_probs: s.z_probs.to_array(),
            z_sample: s.z_sample.to_array(),
        }
    }

    pub fn on<'t>(&self, tape: &'t Tape<F>) -> LatentState<'t, F> {
        LatentState {
            h: tape.constant(self.h.clone()),
            z_probs: tape.constant(self.z_probs.clone()),
            z_sample: tape.constant(self.z_sample.clone()),
        }
    }
}

/// Posterior unroll over the current window.
#[derive(Clone, Debug)]
pub struct WindowPass<F> {
    /// `s_{t-k} ..= s_t`.
    pub states: Vec<LatentValues<F>>,
    /// Conditioning messages `m_{t-k} .. m_{t-1}`.
    pub messages: Vec<Array2<F>>,
    /// `sum(reconst + w_kld * kld)` over the window; zero when `k = 0`.
    pub vfe: f64,
}

#[derive(Clone, Debug)]
struct Boundary<F> {
    state: LatentValues<F>,
    message: Array2<F>,
    action: Array2<F>,
}

/// One decentralized agent executing its trained world model online.
pub struct AgentRuntime<'m, F: Real> {
    world: &'m WorldModel,
    head: &'m MessageHead,
    params: &'m ParamStore<F>,
    cfg: CommConfig,
    seed: u64,
    agent: u64,
    obs_queue: VecDeque<Array2<F>>,
    action_queue: VecDeque<Array2<F>>,
    noise_queue: VecDeque<StepNoise<F>>,
    boundary: Boundary<F>,
    /// First state and message of the last selected window pass.
    pending: Option<(LatentValues<F>, Array2<F>)>,
    t: Option<usize>,
    boundary_messages: Vec<Array2<F>>,
}

impl<'m, F: Real> AgentRuntime<'m, F> {
    pub fn new(model: &'m AgentModel<F>, cfg: CommConfig, seed: u64, agent: u64) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        Ok(Self {
            world: &model.world,
            head: &model.message,
            params: &model.params,
            seed,
            agent,
            obs_queue: VecDeque::with_capacity(cfg.window + 2),
            action_queue: VecDeque::with_capacity(cfg.window + 1),
            noise_queue: VecDeque::with_capacity(cfg.window + 2),
            boundary: Boundary {
                state: LatentValues::zeros(1, mc),
                message: Array2::zeros((1, mc.message_dim)),
                action: Array2::zeros((1, mc.action_dim)),
            },
            pending: None,
            t: None,
            boundary_messages: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.world.config()
    }

    /// Current step index, `None` before the first observation.
    pub fn step_index(&self) -> Option<usize> {
        self.t
    }

    pub fn obs_len(&self) -> usize {
        self.obs_queue.len()
    }

    pub fn action_len(&self) -> usize {
        self.action_queue.len()
    }

    /// Messages that have left the window through the boundary, in order.
    pub fn boundary_messages(&self) -> &[Array2<F>] {
        &self.boundary_messages
    }

    pub fn boundary_state(&self) -> &LatentValues<F> {
        &self.boundary.state
    }

    /// Enqueues `o_t`, evicting the oldest step once the window is full.
    pub fn push_observation(&mut self, obs: &[f64]) -> Result<()> {
        let mc = self.config();
        if obs.len() != mc.obs_dim {
            return Err(Error::Contract(format!("observation has {} values, model expects {}", obs.len(), mc.obs_dim)));
        }
        let t = self.t.map_or(0, |t| t + 1);
        if t > 0 && self.action_queue.len() != self.obs_queue.len() {
            return Err(Error::Contract("no action recorded for the previous observation".into()));
        }
        let row = Array2::from_shape_fn((1, obs.len()), |(_, j)| lit(obs[j]));
        let noise = runtime_noise(self.seed, self.agent, t, mc);
        self.obs_queue.push_back(row);
        self.noise_queue.push_back(noise);
        self.t = Some(t);
        if self.obs_queue.len() > self.cfg.window + 1 {
            let (state, message) = self
                .pending
                .take()
                .ok_or_else(|| Error::Contract("window advanced without a selected pass".into()))?;
            self.obs_queue.pop_front();
            self.noise_queue.pop_front();
            let action = self.action_queue.pop_front().expect("action queue tracks observations");
            self.boundary_messages.push(message.clone());
            self.boundary = Boundary { state, message, action };
        }
        Ok(())
    }

    /// Unrolls the window conditioned on the agent's own message samples.
    pub fn infer_window(&self) -> Result<WindowPass<F>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        self.unroll(&p, None)
    }

    /// Free energy of the window when conditioned on `messages`.
    pub fn windowed_vfe(&self, messages: &[Array2<F>]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.unroll(&p, Some(messages))?.vfe)
    }

    /// Window pass under a given message sequence.
    pub fn unroll_given(&self, messages: &[Array2<F>]) -> Result<WindowPass<F>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        self.unroll(&p, Some(messages))
    }

    fn unroll<'t>(&self, p: &Bound<'t, F>, given: Option<&[Array2<F>]>) -> Result<WindowPass<F>> {
        if self.obs_queue.is_empty() {
            return Err(Error::Contract("window unroll with an empty observation queue".into()));
        }
        let k = self.obs_queue.len() - 1;
        if let Some(g) = given {
            if g.len() != k {
                return Err(Error::Contract(format!("{} messages for a window of {} transitions", g.len(), k)));
            }
        }
        let tape = p.vars()[0].tape();
        let mut prev = self.boundary.state.on(tape);
        let mut msg_prev = tape.constant(self.boundary.message.clone());
        let mut act_prev = tape.constant(self.boundary.action.clone());
        let mut pass = WindowPass {
            states: Vec::with_capacity(k + 1),
            messages: Vec::with_capacity(k),
            vfe: 0.0,
        };
        let mut vfe = 0.0;
        for (i, (obs, noise)) in self.obs_queue.iter().zip(&self.noise_queue).enumerate() {
            let step = self
                .world
                .filter_step(p, &prev, msg_prev, act_prev, obs, &noise.latent)?;
            vfe += step.recon.scalar().to_f64().unwrap() + self.cfg.w_kld * step.kl.scalar().to_f64().unwrap();
            pass.states.push(LatentValues::of(&step.state));
            if i == k {
                break;
            }
            let m = match given {
                Some(g) => tape.constant(g[i].clone()),
                None => self.head.infer(p, step.state.features()).sample(&noise.message),
            };
            pass.messages.push(m.to_array());
            prev = step.state;
            msg_prev = m;
            act_prev = tape.constant(self.action_queue[i].clone());
        }
        if k > 0 {
            pass.vfe = vfe;
        }
        Ok(pass)
    }

    /// Policy output for the final window state and `m_{t-1}`, before clipping.
    fn policy(&self, pass: &WindowPass<F>) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let state = pass.states.last().expect("window pass has a state").on(&tape);
        let msg = pass.messages.last().unwrap_or(&self.boundary.message).clone();
        let out = self.world.policy(&p, &state, tape.constant(msg));
        let v = out.value();
        v.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    /// Emits the action for the selected pass and records it.
    fn commit(&mut self, pass: WindowPass<F>, action_limit: f64) -> Vec<f64> {
        let action: Vec<f64> = self.policy(&pass).into_iter().map(|a| clip_action(a, action_limit)).collect();
        let row = Array2::from_shape_fn((1, action.len()), |(_, j)| lit(action[j]));
        self.action_queue.push_back(row);
        let first_msg = pass.messages.first().cloned();
        self.pending = first_msg.map(|m| (pass.states[0].clone(), m));
        action
    }
}

/// Swaps the two sampled sequences when enabled; otherwise each side gets
/// its own sequence back.
pub fn exchange<T: Clone>(a: &[T], b: &[T], enabled: bool) -> (Vec<T>, Vec<T>) {
    if enabled {
        (b.to_vec(), a.to_vec())
    } else {
        (a.to_vec(), b.to_vec())
    }
}

/// Outcome of one agent's selection step.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentDecision {
    pub action: Vec<f64>,
    /// The received sequence was strictly better and was adopted.
    pub adopted: bool,
    pub vfe_own: f64,
    pub vfe_received: f64,
    /// `m_{t-1}` fed to the policy.
    pub message: Vec<f64>,
}

fn select<F: Real>(
    rt: &AgentRuntime<'_, F>,
    own: WindowPass<F>,
    received: Vec<Array2<F>>,
    enabled: bool,
) -> Result<(WindowPass<F>, bool, f64)> {
    if !enabled || own.messages.is_empty() {
        let v = own.vfe;
        return Ok((own, false, v));
    }
    let other = rt.unroll_given(&received)?;
    let vr = other.vfe;
    if own.vfe <= other.vfe {
        Ok((own, false, vr))
    } else {
        Ok((other, true, vr))
    }
}

/// One step of the two-agent protocol for observations `o_t^A`, `o_t^B`.
pub fn act<'m, F: Real>(
    rt_a: &mut AgentRuntime<'m, F>,
    rt_b: &mut AgentRuntime<'m, F>,
    obs_a: &[f64],
    obs_b: &[f64],
    action_limit: f64,
) -> Result<(AgentDecision, AgentDecision)> {
    let enabled = rt_a.cfg.communication && rt_b.cfg.communication;
    rt_a.push_observation(obs_a)?;
    rt_b.push_observation(obs_b)?;
    let pass_a = rt_a.infer_window()?;
    let pass_b = rt_b.infer_window()?;
    let (recv_a, recv_b) = exchange(&pass_a.messages, &pass_b.messages, enabled);
    let mut out = Vec::with_capacity(2);
    for (rt, pass, recv) in [(rt_a, pass_a, recv_a), (rt_b, pass_b, recv_b)] {
        let vfe_own = pass.vfe;
        let (chosen, adopted, vfe_received) = select(rt, pass, recv, enabled)?;
        let message = chosen
            .messages
            .last()
            .unwrap_or(&rt.boundary.message)
            .iter()
            .map(|x| x.to_f64().unwrap())
            .collect();
        let action = rt.commit(chosen, action_limit);
        out.push(AgentDecision {
            action,
            adopted,
            vfe_own,
            vfe_received,
            message,
        });
    }
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok((a, b))
}

/// Per-step output of a controller.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action_a: f64,
    pub action_b: f64,
    pub adopted_a: bool,
    pub adopted_b: bool,
    pub message_a: Vec<f64>,
    pub message_b: Vec<f64>,
}

/// Anything that maps the agents' observations to velocity commands.
pub trait Controller {
    /// `state` is available to privileged controllers only (the expert).
    fn act(&mut self, obs_a: Vec2, obs_b: Vec2, state: &EnvState) -> Result<Decision>;
}

/// Exact inversion of the dynamics toward the next target point.
pub struct ExpertController {
    pub env: EnvConfig,
}

impl Controller for ExpertController {
    fn act(&mut self, _: Vec2, _: Vec2, state: &EnvState) -> Result<Decision> {
        let e = expert_actions(state, &self.env);
        Ok(Decision {
            action_a: e.a,
            action_b: e.b,
            adopted_a: false,
            adopted_b: false,
            message_a: Vec::new(),
            message_b: Vec::new(),
        })
    }
}

/// Two decentralized agents running the windowed selection protocol.
pub struct PairController<'m, F: Real> {
    pub a: AgentRuntime<'m, F>,
    pub b: AgentRuntime<'m, F>,
    action_limit: f64,
}

impl<'m, F: Real> PairController<'m, F> {
    pub fn new(
        model_a: &'m AgentModel<F>,
        model_b: &'m AgentModel<F>,
        cfg: &CommConfig,
        action_limit: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            a: AgentRuntime::new(model_a, cfg.clone(), seed, 0)?,
            b: AgentRuntime::new(model_b, cfg.clone(), seed, 1)?,
            action_limit,
        })
    }
}

impl<F: Real> Controller for PairController<'_, F> {
    fn act(&mut self, obs_a: Vec2, obs_b: Vec2, _: &EnvState) -> Result<Decision> {
        let (da, db) = act(&mut self.a, &mut self.b, &obs_a, &obs_b, self.action_limit)?;
        Ok(Decision {
            action_a: da.action[0],
            action_b: db.action[0],
            adopted_a: da.adopted,
            adopted_b: db.adopted,
            message_a: da.message,
            message_b: db.message,
        })
    }
}

/// Incremental filtering state shared by the centralized controllers.
struct Filter<F> {
    state: LatentValues<F>,
    action: Array2<F>,
}

impl<F: Real> Filter<F> {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            state: LatentValues::zeros(1, cfg),
            action: Array2::zeros((1, cfg.action_dim)),
        }
    }
}

fn row<F: Real>(v: &[f64]) -> Array2<F> {
    Array2::from_shape_fn((1, v.len()), |(_, j)| lit(v[j]))
}

fn to_vec<F: Real>(a: &Array2<F>) -> Vec<f64> {
    a.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// The jointly trained pair: both world models filter in lock step and the
/// shared message is inferred from both states.
pub struct JointController<'m, F: Real> {
    model: &'m JointModel<F>,
    seed: u64,
    t: usize,
    fa: Filter<F>,
    fb: Filter<F>,
    message: Array2<F>,
    action_limit: f64,
}

impl<'m, F: Real> JointController<'m, F> {
    pub fn new(model: &'m JointModel<F>, action_limit: f64, seed: u64) -> Self {
        let cfg = model.config();
        Self {
            model,
            seed,
            t: 0,
            fa: Filter::new(cfg),
            fb: Filter::new(cfg),
            message: Array2::zeros((1, cfg.message_dim)),
            action_limit,
        }
    }
}

impl<F: Real> Controller for JointController<'_, F> {
    fn act(&mut self, obs_a: Vec2, obs_b: Vec2, _: &EnvState) -> Result<Decision> {
        let cfg = self.model.config();
        let tape = Tape::new();
        let p = self.model.params.bind_frozen(&tape);
        let na = runtime_noise::<F>(self.seed, 0, self.t, cfg);
        let nb = runtime_noise::<F>(self.seed, 1, self.t, cfg);
        let msg_prev = tape.constant(self.message.clone());
        let sa = self.model.a.filter_step(
            &p,
            &self.fa.state.on(&tape),
            msg_prev,
            tape.constant(self.fa.action.clone()),
            &row(&obs_a),
            &na.latent,
        )?;
        let sb = self.model.b.filter_step(
            &p,
            &self.fb.state.on(&tape),
            msg_prev,
            tape.constant(self.fb.action.clone()),
            &row(&obs_b),
            &nb.latent,
        )?;
        let act_a = clip_action(self.model.a.policy(&p, &sa.state, msg_prev).scalar().to_f64().unwrap(), self.action_limit);
        let act_b = clip_action(self.model.b.policy(&p, &sb.state, msg_prev).scalar().to_f64().unwrap(), self.action_limit);
        let m = self.model.infer_message(&p, &sa.state, &sb.state).sample(&na.message);
        let used = to_vec(&self.message);
        self.fa = Filter {
            state: LatentValues::of(&sa.state),
            action: row(&[act_a]),
        };
        self.fb = Filter {
            state: LatentValues::of(&sb.state),
            action: row(&[act_b]),
        };
        self.message = m.to_array();
        self.t += 1;
        Ok(Decision {
            action_a: act_a,
            action_b: act_b,
            adopted_a: false,
            adopted_b: false,
            message_a: used.clone(),
            message_b: used,
        })
    }
}

/// The fully observing single agent driving both axes.
pub struct SingleController<'m, F: Real> {
    model: &'m AgentModel<F>,
    seed: u64,
    t: usize,
    filter: Filter<F>,
    message: Array2<F>,
    action_limit: f64,
}

impl<'m, F: Real> SingleController<'m, F> {
    pub fn new(model: &'m AgentModel<F>, action_limit: f64, seed: u64) -> Self {
        let cfg = model.config();
        Self {
            model,
            seed,
            t: 0,
            filter: Filter::new(cfg),
            message: Array2::zeros((1, cfg.message_dim)),
            action_limit,
        }
    }
}

impl<F: Real> Controller for SingleController<'_, F> {
    fn act(&mut self, _: Vec2, _: Vec2, state: &EnvState) -> Result<Decision> {
        let cfg = self.model.config();
        let tape = Tape::new();
        let p = self.model.params.bind_frozen(&tape);
        let noise = runtime_noise::<F>(self.seed, 0, self.t, cfg);
        let msg_prev = tape.constant(self.message.clone());
        let s = self.model.world.filter_step(
            &p,
            &self.filter.state.on(&tape),
            msg_prev,
            tape.constant(self.filter.action.clone()),
            &row(&state.position),
            &noise.latent,
        )?;
        let out = to_vec(&self.model.world.policy(&p, &s.state, msg_prev).to_array());
        let (act_a, act_b) = (clip_action(out[0], self.action_limit), clip_action(out[1], self.action_limit));
        let m = self.model.message.infer(&p, s.state.features()).sample(&noise.message);
        let used = to_vec(&self.message);
        self.filter = Filter {
            state: LatentValues::of(&s.state),
            action: row(&[act_a, act_b]),
        };
        self.message = m.to_array();
        self.t += 1;
        Ok(Decision {
            action_a: act_a,
            action_b: act_b,
            adopted_a: false,
            adopted_b: false,
            message_a: used.clone(),
            message_b: used,
        })
    }
}

/// The controller matching a trained condition.
pub fn controller_for<'m, F: Real>(
    models: &'m Models<F>,
    comm: &CommConfig,
    env: &EnvConfig,
    seed: u64,
) -> Result<Box<dyn Controller + 'm>> {
    Ok(match models {
        Models::Pair { a, b } => Box::new(PairController::new(a, b, comm, env.action_limit, seed)?),
        Models::Joint(j) => Box::new(JointController::new(j, env.action_limit, seed)),
        Models::Single(m) => Box::new(SingleController::new(m, env.action_limit, seed)),
    })
}

/// Uniformly random position in the workspace.
pub fn random_start<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> EnvState {
    let w = env.workspace_halfwidth;
    EnvState::at([rng.gen_range(-w..=w), rng.gen_range(-w..=w)])
}

/// Record of one closed-loop trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` positions including the start.
    pub positions: Vec<Vec2>,
    pub actions: Vec<[f64; 2]>,
    pub adopted_a: Vec<bool>,
    pub adopted_b: Vec<bool>,
    pub messages_a: Vec<Vec<f64>>,
    pub messages_b: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Positions reached after each step.
    pub fn visited(&self) -> &[Vec2] {
        &self.positions[1..]
    }

    pub fn selection_rates(&self) -> (f64, f64) {
        let rate = |v: &[bool]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
            }
        };
        (rate(&self.adopted_a), rate(&self.adopted_b))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let steps = self.actions.len();
        let mdim = |m: &[Vec<f64>]| m.first().map_or(0, |r| r.len());
        let flags = |v: &[bool]| v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let fields: Vec<(ArrayEntry, Vec<f64>)> = vec![
            (
                ArrayEntry::new("positions", vec![steps + 1, 2]),
                self.positions.iter().flatten().copied().collect(),
            ),
            (
                ArrayEntry::new("actions", vec![steps, 2]),
                self.actions.iter().flatten().copied().collect(),
            ),
            (ArrayEntry::new("source_A", vec![steps]), flags(&self.adopted_a)),
            (ArrayEntry::new("source_B", vec![steps]), flags(&self.adopted_b)),
            (
                ArrayEntry::new("messages_A", vec![steps, mdim(&self.messages_a)]),
                self.messages_a.iter().flatten().copied().collect(),
            ),
            (
                ArrayEntry::new("messages_B", vec![steps, mdim(&self.messages_b)]),
                self.messages_b.iter().flatten().copied().collect(),
            ),
        ];
        for (entry, data) in &fields {
            io::write_entry(dir, entry, data)?;
        }
        let manifest = RolloutManifest {
            version: io::FORMAT_VERSION,
            kind: "rollout".into(),
            seed: self.seed,
            steps,
            arrays: fields.into_iter().map(|(e, _)| e).collect(),
        };
        io::write_toml(&dir.join("manifest.toml"), &manifest)
    }
}

#[derive(Serialize, Deserialize)]
struct RolloutManifest {
    version: u32,
    kind: String,
    seed: u64,
    steps: usize,
    arrays: Vec<ArrayEntry>,
}

/// Closed loop observe, act, step for `steps` steps from `start`.
pub fn rollout<R: Rng + ?Sized>(
    ctrl: &mut dyn Controller,
    env: &EnvConfig,
    start: EnvState,
    steps: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = start;
    let mut tr = Trajectory {
        positions: vec![state.position],
        actions: Vec::with_capacity(steps),
        adopted_a: Vec::with_capacity(steps),
        adopted_b: Vec::with_capacity(steps),
        messages_a: Vec::with_capacity(steps),
        messages_b: Vec::with_capacity(steps),
        seed,
    };
    for _ in 0..steps {
        let obs_a = observe(&state, Agent::A, env, rng)?;
        let obs_b = observe(&state, Agent::B, env, rng)?;
        let d = ctrl.act(obs_a, obs_b, &state)?;
        state = environment::step(&state, d.action_a, d.action_b, env);
        tr.positions.push(state.position);
        tr.actions.push([d.action_a, d.action_b]);
        tr.adopted_a.push(d.adopted_a);
        tr.adopted_b.push(d.adopted_b);
        tr.messages_a.push(d.message_a);
        tr.messages_b.push(d.message_b);
    }
    Ok(tr)
}
