//! Loss terms, the four experimental conditions and the optimization loop.
//!
//! Every agent minimizes its own weighted free energy
//!
//! `F = reconst + w_kld * kld + w_nce * nce + policy`
//!
//! where `reconst` and `kld` are summed over time and averaged over the
//! batch, `nce` is the per-timestep InfoNCE between the agent's own message
//! samples (anchors) and the samples received from the other agent
//! (positives, carrying no gradient), and `policy` is the behavioral-cloning
//! squared error. Conditions differ in how messages are produced and shared:
//!
//! * `Ec`: two independent models, message samples exchanged, InfoNCE on.
//! * `Nc`: two independent models, no exchange, no InfoNCE.
//! * `Bc`: one joint message network over both latent states feeding both
//!   world models; gradients flow everywhere; no InfoNCE.
//! * `Baseline`: one fully observing agent that drives both axes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvConfig, EpisodeRecord};
use crate::error::{Error, Result};
use crate::io::{self, ArrayEntry};
use crate::model::{AgentModel, Bound, JointModel, LatentState, MessageDist, ModelConfig, ParamStore, StepNoise};
use crate::tape::{lit, Real, Tape, Var};
use crate::Dataset;

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Ec,
    Bc,
    Nc,
    Baseline,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Ec, Condition::Bc, Condition::Nc, Condition::Baseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Ec => "ec",
            Condition::Bc => "bc",
            Condition::Nc => "nc",
            Condition::Baseline => "baseline",
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self {
            Condition::Baseline => ModelConfig::baseline(),
            _ => ModelConfig::default(),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ec" => Ok(Condition::Ec),
            "bc" => Ok(Condition::Bc),
            "nc" => Ok(Condition::Nc),
            "baseline" | "base" => Ok(Condition::Baseline),
            _ => Err(Error::Config(format!("unknown condition `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub w_kld: f64,
    pub w_nce: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub condition: Condition,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            w_kld: 0.01,
            w_nce: 0.005,
            tau: 2.0,
            batch_size: 500,
            epochs: 1000,
            learning_rate: 3e-4,
            grad_clip: 100.0,
            condition: Condition::Ec,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.w_kld, self.w_nce, self.tau, self.grad_clip];
        if positive.iter().any(|&v| !(v > 0.0)) || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("loss weights, tau, learning rate and clip must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-agent loss terms, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentLosses {
    pub reconst: f64,
    pub kld: f64,
    pub nce: f64,
    pub policy: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub a: AgentLosses,
    /// Absent for the single-agent baseline.
    pub b: Option<AgentLosses>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.a.total + self.b.map_or(0.0, |b| b.total)
    }

    fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> Option<AgentLosses>| -> Option<AgentLosses> {
            let mut acc = AgentLosses::default();
            for r in reports {
                let l = f(r)?;
                acc.reconst += l.reconst / n;
                acc.kld += l.kld / n;
                acc.nce += l.nce / n;
                acc.policy += l.policy / n;
                acc.total += l.total / n;
            }
            Some(acc)
        };
        LossReport {
            a: avg(&|r| Some(r.a)).unwrap_or_default(),
            b: avg(&|r| r.b),
        }
    }
}

/// Which observation/action streams of an episode an agent sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    A,
    B,
    /// Exact position, both action components.
    Full,
}

/// Time-major batch: `obs[t]` is `batch x obs_dim` for `t = 0..=T`,
/// `act[t]` is `batch x action_dim` for `t = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch<F> {
    pub obs: Vec<Array2<F>>,
    pub act: Vec<Array2<F>>,
}

impl<F: Real> SeqBatch<F> {
    pub fn from_episodes(episodes: &[&EpisodeRecord], view: View) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let t_len = first.len();
        if episodes.iter().any(|e| e.len() != t_len || e.truth.len() != t_len + 1) {
            return Err(Error::Contract("episodes in a batch differ in length".into()));
        }
        let n = episodes.len();
        let obs = (0..=t_len)
            .map(|t| {
                Array2::from_shape_fn((n, 2), |(i, k)| {
                    let e = episodes[i];
                    lit(match view {
                        View::A => e.obs_a[t][k],
                        View::B => e.obs_b[t][k],
                        View::Full => e.truth[t][k],
                    })
                })
            })
            .collect();
        let act_dim = if view == View::Full { 2 } else { 1 };
        let act = (0..t_len)
            .map(|t| {
                Array2::from_shape_fn((n, act_dim), |(i, k)| {
                    let e = episodes[i];
                    lit(match (view, k) {
                        (View::A, _) | (View::Full, 0) => e.act_a[t],
                        _ => e.act_b[t],
                    })
                })
            })
            .collect();
        Ok(Self { obs, act })
    }

    pub fn steps(&self) -> usize {
        self.act.len()
    }

    pub fn batch_size(&self) -> usize {
        self.obs[0].nrows()
    }
}

/// Draws noise for `steps + 1` latent steps.
pub fn draw_noise<F: Real>(rng: &mut ChaCha8Rng, steps: usize, batch: usize, cfg: &ModelConfig) -> Vec<StepNoise<F>> {
    (0..=steps).map(|_| StepNoise::draw(rng, batch, cfg)).collect()
}

/// Source of the conditioning message `m_{t-1}` during an unroll.
pub enum MessageFeed<'a, 't, F: Real> {
    /// The agent's own reparameterized posterior samples.
    Own,
    /// A fixed sequence, one entry per transition after the first.
    Given(&'a [Var<'t, F>]),
}

/// Teacher-forced unroll of one agent over a batch.
pub struct Unroll<'t, F: Real> {
    pub states: Vec<LatentState<'t, F>>,
    /// Message posteriors `q(m_t | s_t)` for `t = 0..T` (own feed only).
    pub messages: Vec<MessageDist<'t, F>>,
    /// Conditioning messages `m_0 .. m_{T-1}`.
    pub samples: Vec<Var<'t, F>>,
    /// Batch mean of the reconstruction error summed over time.
    pub reconst: Var<'t, F>,
    /// Batch mean of the latent KL summed over time and dimensions.
    pub kld: Var<'t, F>,
    /// Batch mean of the BC squared error summed over time.
    pub policy: Var<'t, F>,
}

/// Individual free energy terms of one agent plus its policy loss.
pub fn unroll_agent<'t, F: Real>(
    model: &AgentModel<F>,
    p: &Bound<'t, F>,
    batch: &SeqBatch<F>,
    noise: &[StepNoise<F>],
    feed: MessageFeed<'_, 't, F>,
) -> Result<Unroll<'t, F>> {
    let cfg = model.config();
    let tape = p.vars()[0].tape();
    let (n, t_len) = (batch.batch_size(), batch.steps());
    if noise.len() != t_len + 1 {
        return Err(Error::Contract("noise length must be steps + 1".into()));
    }
    if let MessageFeed::Given(g) = &feed {
        if g.len() != t_len {
            return Err(Error::Contract(format!("{} given messages for {} steps", g.len(), t_len)));
        }
    }
    let mut prev = LatentState::initial(tape, n, cfg);
    let mut msg_prev = tape.zeros(n, cfg.message_dim);
    let mut act_prev = tape.zeros(n, cfg.action_dim);
    let mut out = Unroll {
        states: Vec::with_capacity(t_len + 1),
        messages: Vec::with_capacity(t_len),
        samples: Vec::with_capacity(t_len),
        reconst: tape.zeros(n, 1),
        kld: tape.zeros(n, 1),
        policy: tape.zeros(n, 1),
    };
    for t in 0..=t_len {
        let step = model
            .world
            .filter_step(p, &prev, msg_prev, act_prev, &batch.obs[t], &noise[t].latent)?;
        out.reconst = out.reconst.add(step.recon);
        out.kld = out.kld.add(step.kl);
        out.states.push(step.state);
        if t == t_len {
            break;
        }
        let pi = model.world.policy(p, &step.state, msg_prev);
        out.policy = out.policy.add(pi.sq_err_rows(&batch.act[t]));
        let m = match &feed {
            MessageFeed::Own => {
                let dist = model.message.infer(p, step.state.features());
                out.messages.push(dist);
                dist.sample(&noise[t].message)
            }
            MessageFeed::Given(g) => g[t],
        };
        out.samples.push(m);
        prev = step.state;
        msg_prev = m;
        act_prev = tape.constant(batch.act[t].clone());
    }
    out.reconst = out.reconst.mean();
    out.kld = out.kld.mean();
    out.policy = out.policy.mean();
    Ok(out)
}

/// InfoNCE summed over timesteps with own samples as anchors and received
/// sample values as positives.
pub fn sequence_infonce<'t, F: Real>(own: &[Var<'t, F>], received: &[Array2<F>], tau: f64) -> Result<Var<'t, F>> {
    if own.len() != received.len() || own.is_empty() {
        return Err(Error::Contract("message sequences must be nonempty and aligned".into()));
    }
    if own[0].dim().0 < 2 {
        return Err(Error::Contract("InfoNCE needs at least two batch rows".into()));
    }
    let mut total = own[0].infonce(&received[0], lit(tau));
    for (m, r) in own.iter().zip(received).skip(1) {
        total = total.add(m.infonce(r, lit(tau)));
    }
    Ok(total)
}

/// Loss nodes of one agent for one batch.
#[derive(Clone, Copy)]
pub struct AgentLossVars<'t, F: Real> {
    pub reconst: Var<'t, F>,
    pub kld: Var<'t, F>,
    pub nce: Option<Var<'t, F>>,
    pub policy: Var<'t, F>,
    pub total: Var<'t, F>,
}

impl<'t, F: Real> AgentLossVars<'t, F> {
    fn assemble(
        reconst: Var<'t, F>,
        kld: Var<'t, F>,
        nce: Option<Var<'t, F>>,
        policy: Var<'t, F>,
        cfg: &TrainingConfig,
    ) -> Self {
        let mut total = reconst.add(kld.scale(lit(cfg.w_kld)));
        if let Some(nce) = nce {
            total = total.add(nce.scale(lit(cfg.w_nce)));
        }
        total = total.add(policy);
        Self {
            reconst,
            kld,
            nce,
            policy,
            total,
        }
    }

    pub fn report(&self) -> AgentLosses {
        let f = |v: Var<'t, F>| v.scalar().to_f64().unwrap();
        AgentLosses {
            reconst: f(self.reconst),
            kld: f(self.kld),
            nce: self.nce.map_or(0.0, f),
            policy: f(self.policy),
            total: f(self.total),
        }
    }
}

/// Losses of two decentralized agents. With `exchange`, each agent adds an
/// InfoNCE term against the other's (detached) message samples.
#[allow(clippy::too_many_arguments)]
pub fn pair_losses<'t, F: Real>(
    model_a: &AgentModel<F>,
    pa: &Bound<'t, F>,
    model_b: &AgentModel<F>,
    pb: &Bound<'t, F>,
    batch_a: &SeqBatch<F>,
    batch_b: &SeqBatch<F>,
    noise_a: &[StepNoise<F>],
    noise_b: &[StepNoise<F>],
    cfg: &TrainingConfig,
    exchange: bool,
) -> Result<(AgentLossVars<'t, F>, AgentLossVars<'t, F>)> {
    let ua = unroll_agent(model_a, pa, batch_a, noise_a, MessageFeed::Own)?;
    let ub = unroll_agent(model_b, pb, batch_b, noise_b, MessageFeed::Own)?;
    let (nce_a, nce_b) = if exchange {
        // Only sample values cross between agents.
        let sent_a: Vec<Array2<F>> = ua.samples.iter().map(|v| v.to_array()).collect();
        let sent_b: Vec<Array2<F>> = ub.samples.iter().map(|v| v.to_array()).collect();
        (
            Some(sequence_infonce(&ua.samples, &sent_b, cfg.tau)?),
            Some(sequence_infonce(&ub.samples, &sent_a, cfg.tau)?),
        )
    } else {
        (None, None)
    };
    Ok((
        AgentLossVars::assemble(ua.reconst, ua.kld, nce_a, ua.policy, cfg),
        AgentLossVars::assemble(ub.reconst, ub.kld, nce_b, ub.policy, cfg),
    ))
}

/// Lock-step unroll of both agents sharing the joint message.
pub fn joint_losses<'t, F: Real>(
    model: &JointModel<F>,
    p: &Bound<'t, F>,
    batch_a: &SeqBatch<F>,
    batch_b: &SeqBatch<F>,
    noise_a: &[StepNoise<F>],
    noise_b: &[StepNoise<F>],
    cfg: &TrainingConfig,
) -> Result<(AgentLossVars<'t, F>, AgentLossVars<'t, F>)> {
    let joint = joint_unroll(model, p, batch_a, batch_b, noise_a, noise_b)?;
    Ok((
        AgentLossVars::assemble(joint.a.reconst, joint.a.kld, None, joint.a.policy, cfg),
        AgentLossVars::assemble(joint.b.reconst, joint.b.kld, None, joint.b.policy, cfg),
    ))
}

/// Both agents' unrolls in the joint condition plus the shared messages.
pub struct JointUnroll<'t, F: Real> {
    pub a: Unroll<'t, F>,
    pub b: Unroll<'t, F>,
    pub messages: Vec<MessageDist<'t, F>>,
}

/// Unrolls both world models; the shared message `m_t` is inferred from
/// `(s_t^A, s_t^B)` and sampled with `noise_a`'s message draws.
pub fn joint_unroll<'t, F: Real>(
    model: &JointModel<F>,
    p: &Bound<'t, F>,
    batch_a: &SeqBatch<F>,
    batch_b: &SeqBatch<F>,
    noise_a: &[StepNoise<F>],
    noise_b: &[StepNoise<F>],
) -> Result<JointUnroll<'t, F>> {
    let cfg = model.config();
    let tape = p.vars()[0].tape();
    let (n, t_len) = (batch_a.batch_size(), batch_a.steps());
    if batch_b.steps() != t_len || batch_b.batch_size() != n {
        return Err(Error::Contract("agent batches are not aligned".into()));
    }
    if noise_a.len() != t_len + 1 || noise_b.len() != t_len + 1 {
        return Err(Error::Contract("noise length must be steps + 1".into()));
    }
    let new_unroll = || Unroll {
        states: Vec::with_capacity(t_len + 1),
        messages: Vec::new(),
        samples: Vec::with_capacity(t_len),
        reconst: tape.zeros(n, 1),
        kld: tape.zeros(n, 1),
        policy: tape.zeros(n, 1),
    };
    let (mut ua, mut ub) = (new_unroll(), new_unroll());
    let mut messages = Vec::with_capacity(t_len);
    let mut prev_a = LatentState::initial(tape, n, cfg);
    let mut prev_b = prev_a;
    let mut msg_prev = tape.zeros(n, cfg.message_dim);
    let mut act_a = tape.zeros(n, cfg.action_dim);
    let mut act_b = act_a;
    for t in 0..=t_len {
        let sa = model
            .a
            .filter_step(p, &prev_a, msg_prev, act_a, &batch_a.obs[t], &noise_a[t].latent)?;
        let sb = model
            .b
            .filter_step(p, &prev_b, msg_prev, act_b, &batch_b.obs[t], &noise_b[t].latent)?;
        for (u, s) in [(&mut ua, &sa), (&mut ub, &sb)] {
            u.reconst = u.reconst.add(s.recon);
            u.kld = u.kld.add(s.kl);
            u.states.push(s.state);
        }
        if t == t_len {
            break;
        }
        ua.policy = ua
            .policy
            .add(model.a.policy(p, &sa.state, msg_prev).sq_err_rows(&batch_a.act[t]));
        ub.policy = ub
            .policy
            .add(model.b.policy(p, &sb.state, msg_prev).sq_err_rows(&batch_b.act[t]));
        let dist = model.infer_message(p, &sa.state, &sb.state);
        let m = dist.sample(&noise_a[t].message);
        messages.push(dist);
        ua.samples.push(m);
        ub.samples.push(m);
        prev_a = sa.state;
        prev_b = sb.state;
        msg_prev = m;
        act_a = tape.constant(batch_a.act[t].clone());
        act_b = tape.constant(batch_b.act[t].clone());
    }
    for u in [&mut ua, &mut ub] {
        u.reconst = u.reconst.mean();
        u.kld = u.kld.mean();
        u.policy = u.policy.mean();
    }
    Ok(JointUnroll {
        a: ua,
        b: ub,
        messages,
    })
}

/// Adaptive-moment gradient descent with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    lr: f64,
    clip: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Array2<F>> = params.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Self {
            lr,
            clip,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Array2<F>]) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (lit::<F>(self.lr), lit::<F>(self.eps));
        let (b1f, b2f, scale) = (lit::<F>(b1), lit::<F>(b2), lit::<F>(scale));
        let (c1, c2) = (lit::<F>(c1), lit::<F>(c2));
        let one = F::one();
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = b1f * *m + (one - b1f) * g;
                *v = b2f * *v + (one - b2f) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(norm)
    }
}

/// Gradients of every entry of `params` after a backward sweep.
pub fn collect_grads<F: Real>(grads: &crate::tape::Gradients<F>, p: &Bound<'_, F>) -> Vec<Array2<F>> {
    p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()
}

/// The trained models of one condition.
#[derive(Clone, Debug)]
pub enum Models<F> {
    Pair { a: AgentModel<F>, b: AgentModel<F> },
    Joint(JointModel<F>),
    Single(AgentModel<F>),
}

/// Seed for a role (`0` training stream, `1` agent A, `2` agent B / joint).
pub fn derive_seed(seed: u64, role: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(role.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

impl<F: Real> Models<F> {
    pub fn init(condition: Condition, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match condition {
            Condition::Ec | Condition::Nc => Models::Pair {
                a: AgentModel::new(cfg, derive_seed(seed, 1))?,
                b: AgentModel::new(cfg, derive_seed(seed, 2))?,
            },
            Condition::Bc => Models::Joint(JointModel::new(cfg, derive_seed(seed, 2))?),
            Condition::Baseline => Models::Single(AgentModel::new(cfg, derive_seed(seed, 1))?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Models::Pair { a, .. } | Models::Single(a) => a.config(),
            Models::Joint(j) => j.config(),
        }
    }

    /// Parameter stores with their checkpoint prefixes.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore<F>)> {
        match self {
            Models::Pair { a, b } => vec![("A", &a.params), ("B", &b.params)],
            Models::Joint(j) => vec![("joint", &j.params)],
            Models::Single(m) => vec![("single", &m.params)],
        }
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore<F>)> {
        match self {
            Models::Pair { a, b } => vec![("A", &mut a.params), ("B", &mut b.params)],
            Models::Joint(j) => vec![("joint", &mut j.params)],
            Models::Single(m) => vec![("single", &mut m.params)],
        }
    }
}

/// Optimization state for one condition.
pub struct Trainer<F: Real> {
    pub cfg: TrainingConfig,
    pub models: Models<F>,
    optimizers: Vec<Adam<F>>,
    rng: ChaCha8Rng,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        let model_cfg = cfg.condition.model_config();
        Self::with_model_config(cfg, &model_cfg)
    }

    pub fn with_model_config(cfg: TrainingConfig, model_cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::init(cfg.condition, model_cfg, cfg.seed)?;
        Ok(Self::from_models(cfg, models))
    }

    pub fn from_models(cfg: TrainingConfig, models: Models<F>) -> Self {
        let optimizers = models
            .stores()
            .into_iter()
            .map(|(_, s)| Adam::new(s, cfg.learning_rate, cfg.grad_clip))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
        Self {
            cfg,
            models,
            optimizers,
            rng,
        }
    }

    /// One gradient step on a batch of episodes.
    pub fn train_step(&mut self, episodes: &[&EpisodeRecord]) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let model_cfg = self.models.config().clone();
        let n = episodes.len();
        let tape = Tape::<F>::new();
        match &mut self.models {
            Models::Pair { a, b } => {
                let batch_a = SeqBatch::from_episodes(episodes, View::A)?;
                let batch_b = SeqBatch::from_episodes(episodes, View::B)?;
                let t_len = batch_a.steps();
                let noise_a = draw_noise(&mut self.rng, t_len, n, &model_cfg);
                let noise_b = draw_noise(&mut self.rng, t_len, n, &model_cfg);
                let pa = a.params.bind(&tape);
                let pb = b.params.bind(&tape);
                let exchange = cfg.condition == Condition::Ec;
                let (la, lb) = pair_losses(a, &pa, b, &pb, &batch_a, &batch_b, &noise_a, &noise_b, &cfg, exchange)?;
                let report = LossReport {
                    a: la.report(),
                    b: Some(lb.report()),
                };
                check_report(&report)?;
                // The exchanged samples are constants on this tape, so the
                // summed objective yields each agent's own gradient.
                let grads = tape.backward(la.total.add(lb.total));
                let ga = collect_grads(&grads, &pa);
                let gb = collect_grads(&grads, &pb);
                drop(grads);
                self.optimizers[0].step(&mut a.params, &ga)?;
                self.optimizers[1].step(&mut b.params, &gb)?;
                Ok(report)
            }
            Models::Joint(j) => {
                let batch_a = SeqBatch::from_episodes(episodes, View::A)?;
                let batch_b = SeqBatch::from_episodes(episodes, View::B)?;
                let t_len = batch_a.steps();
                let noise_a = draw_noise(&mut self.rng, t_len, n, &model_cfg);
                let noise_b = draw_noise(&mut self.rng, t_len, n, &model_cfg);
                let p = j.params.bind(&tape);
                let (la, lb) = joint_losses(j, &p, &batch_a, &batch_b, &noise_a, &noise_b, &cfg)?;
                let report = LossReport {
                    a: la.report(),
                    b: Some(lb.report()),
                };
                check_report(&report)?;
                let grads = tape.backward(la.total.add(lb.total));
                let g = collect_grads(&grads, &p);
                drop(grads);
                self.optimizers[0].step(&mut j.params, &g)?;
                Ok(report)
            }
            Models::Single(m) => {
                let batch = SeqBatch::from_episodes(episodes, View::Full)?;
                let noise = draw_noise(&mut self.rng, batch.steps(), n, &model_cfg);
                let p = m.params.bind(&tape);
                let u = unroll_agent(m, &p, &batch, &noise, MessageFeed::Own)?;
                let l = AgentLossVars::assemble(u.reconst, u.kld, None, u.policy, &cfg);
                let report = LossReport {
                    a: l.report(),
                    b: None,
                };
                check_report(&report)?;
                let grads = tape.backward(l.total);
                let g = collect_grads(&grads, &p);
                drop(grads);
                self.optimizers[0].step(&mut m.params, &g)?;
                Ok(report)
            }
        }
    }

    /// Runs `cfg.epochs` epochs of shuffled full-episode minibatches and
    /// returns the per-epoch mean losses.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(usize, &LossReport),
    ) -> Result<Vec<LossReport>> {
        let n = dataset.episodes.len();
        if n < 2 {
            return Err(Error::Config("need at least two training episodes".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut log = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut reports = Vec::new();
            for chunk in batches(&order, self.cfg.batch_size) {
                let eps: Vec<&EpisodeRecord> = chunk.iter().map(|&i| &dataset.episodes[i]).collect();
                let r = self.train_step(&eps).map_err(|e| match e {
                    Error::Diverged { total, .. } => Error::Diverged { epoch, total },
                    other => other,
                })?;
                reports.push(r);
            }
            let mean = LossReport::mean(&reports);
            on_epoch(epoch, &mean);
            log.push(mean);
        }
        Ok(log)
    }
}

/// Consecutive chunks of `order`; a trailing chunk too small for InfoNCE
/// is folded into the previous one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        out.pop();
        let k = out.len() - 1;
        let start = k * size;
        out[k] = &order[start..];
    }
    out
}

fn check_report(r: &LossReport) -> Result<()> {
    let total = r.total();
    if !total.is_finite() || total > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { epoch: 0, total });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    kind: String,
    condition: Condition,
    seed: u64,
    model: ModelConfig,
    training: TrainingConfig,
    env: EnvConfig,
    arrays: Vec<ArrayEntry>,
}

/// A trained (or freshly initialized) condition on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub condition: Condition,
    pub training: TrainingConfig,
    /// Environment the training data came from.
    pub env: EnvConfig,
    pub models: Models<F>,
}

impl<F: Real> Checkpoint<F> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let mut arrays = Vec::new();
        for (prefix, store) in self.models.stores() {
            for (name, value) in store.names().iter().zip(store.values()) {
                let entry = ArrayEntry::new(format!("{prefix}.{name}"), vec![value.nrows(), value.ncols()]);
                let data: Vec<f64> = value.iter().map(|x| x.to_f64().unwrap()).collect();
                io::write_entry(dir, &entry, &data)?;
                arrays.push(entry);
            }
        }
        let manifest = CheckpointManifest {
            version: io::FORMAT_VERSION,
            kind: "checkpoint".into(),
            condition: self.condition,
            seed: self.training.seed,
            model: self.models.config().clone(),
            training: self.training.clone(),
            env: self.env.clone(),
            arrays,
        };
        io::write_toml(&dir.join("manifest.toml"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.toml");
        let m: CheckpointManifest = io::read_toml(&mpath)?;
        if m.version != io::FORMAT_VERSION || m.kind != "checkpoint" {
            return Err(Error::format(&mpath, "not a version-1 checkpoint manifest"));
        }
        let mut models = Models::<F>::init(m.condition, &m.model, m.seed)?;
        for (prefix, store) in models.stores_mut() {
            let names = store.names().to_vec();
            for (name, value) in names.iter().zip(store.values_mut()) {
                let entry = io::find_entry(&m.arrays, &format!("{prefix}.{name}"), &mpath)?;
                if entry.shape != [value.nrows(), value.ncols()] {
                    return Err(Error::format(&mpath, format!("{}: shape mismatch", entry.name)));
                }
                let data = io::read_entry(dir, entry)?;
                for (dst, src) in value.iter_mut().zip(data) {
                    *dst = lit(f64::from(src));
                }
            }
        }
        Ok(Self {
            condition: m.condition,
            training: m.training,
            env: m.env,
            models,
        })
    }
}
