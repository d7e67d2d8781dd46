//! Per-agent world model: a recurrent state-space model with a unimix
//! categorical latent, a Gaussian message head and a behavioral-cloning
//! policy head.
//!
//! The latent state is `s = (h, z)`. `h` is the GRU state driven by the
//! previous `(z, message, action)`; `z` is a `latent_dims x latent_classes`
//! one-hot sample drawn from the posterior (given the current observation)
//! with straight-through gradients. The prior predicts `z` from `h` alone.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{lit, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub gru_dim: usize,
    pub latent_dims: usize,
    pub latent_classes: usize,
    pub message_dim: usize,
    pub unimix_fraction: f64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub decoder_variance: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gru_dim: 32,
            latent_dims: 4,
            latent_classes: 4,
            message_dim: 2,
            unimix_fraction: 0.01,
            obs_dim: 2,
            action_dim: 1,
            hidden_width: 64,
            embed_dim: 32,
            decoder_variance: 1.0,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl ModelConfig {
    /// Configuration for the single fully observing agent that drives both axes.
    pub fn baseline() -> Self {
        Self {
            action_dim: 2,
            ..Self::default()
        }
    }

    pub fn latent_width(&self) -> usize {
        self.latent_dims * self.latent_classes
    }

    /// Width of `concat(h, flatten(z))`.
    pub fn feature_width(&self) -> usize {
        self.gru_dim + self.latent_width()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.gru_dim,
            self.latent_dims,
            self.latent_classes,
            self.message_dim,
            self.obs_dim,
            self.action_dim,
            self.hidden_width,
            self.embed_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unimix_fraction) {
            return Err(Error::Config("unimix_fraction must lie in [0, 1)".into()));
        }
        if self.log_std_min >= self.log_std_max {
            return Err(Error::Config("empty log_std clamp range".into()));
        }
        if self.decoder_variance != 1.0 {
            return Err(Error::Config("only unit decoder variance is supported".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named flat list of parameter matrices (biases are `1 x n`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    /// Records every parameter on `tape` as a gradient-collecting leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap()))
                .collect(),
        }
    }
}

/// A [`ParamStore`] as recorded on one tape.
pub struct Bound<'t, F: Real> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Real> Bound<'t, F> {
    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `+-1/sqrt(fan_in)`.
    fn weight<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Array2::from_shape_fn((fan_in, fan_out), |_| lit(dist.sample(self.rng)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, i: usize, o: usize) -> Self {
        let w = store.add(format!("{name}.w"), init.weight(i, o));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, o)));
        Self { w, b }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.tape().linear(x, p.var(self.w), p.var(self.b))
    }
}

/// One ELU hidden layer, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, init, &format!("{name}.0"), input, hidden),
            out: Linear::new(store, init, &format!("{name}.1"), hidden, output),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.out.forward(p, self.hidden.forward(p, x).elu())
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl GruCell {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: store.add(format!("{name}.wx"), init.weight(input, 3 * hidden)),
            wh: store.add(format!("{name}.wh"), init.weight(hidden, 3 * hidden)),
            bx: store.add(format!("{name}.bx"), Array2::zeros((1, 3 * hidden))),
            bh: store.add(format!("{name}.bh"), Array2::zeros((1, 3 * hidden))),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>, h: Var<'t, F>) -> Var<'t, F> {
        x.tape()
            .gru(x, h, p.var(self.wx), p.var(self.wh), p.var(self.bx), p.var(self.bh))
    }
}

/// Random draws consumed by one latent step for a batch: one uniform per
/// categorical dimension and one standard normal per message component.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise<F> {
    pub latent: Array2<F>,
    pub message: Array2<F>,
}

impl<F: Real> StepNoise<F> {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, cfg: &ModelConfig) -> Self {
        let latent = Array2::from_shape_fn((batch, cfg.latent_dims), |_| lit(rng.gen::<f64>()));
        let message = Array2::from_shape_fn((batch, cfg.message_dim), |_| {
            lit(StandardNormal.sample(&mut *rng))
        });
        Self { latent, message }
    }

    /// Fixed draws: every uniform at 0.5, no message perturbation.
    pub fn zero(batch: usize, cfg: &ModelConfig) -> Self {
        Self {
            latent: Array2::from_elem((batch, cfg.latent_dims), lit(0.5)),
            message: Array2::zeros((batch, cfg.message_dim)),
        }
    }
}

/// Inverse-CDF categorical draw per latent dimension, returned one-hot.
pub fn sample_one_hot<F: Real>(probs: &Array2<F>, uniforms: &Array2<F>, classes: usize) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        for (g, grp) in row.exact_chunks(classes).into_iter().enumerate() {
            let u = uniforms[[i, g]];
            let mut cum = F::zero();
            let mut pick = classes - 1;
            for (k, &p) in grp.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = k;
                    break;
                }
            }
            out[[i, g * classes + pick]] = F::one();
        }
    }
    out
}

/// Diagonal Gaussian over messages.
#[derive(Clone, Copy)]
pub struct MessageDist<'t, F: Real> {
    pub mean: Var<'t, F>,
    pub log_std: Var<'t, F>,
}

impl<'t, F: Real> MessageDist<'t, F> {
    /// Reparameterized sample `mean + exp(log_std) * eps`.
    pub fn sample(&self, eps: &Array2<F>) -> Var<'t, F> {
        let tape = self.mean.tape();
        let noise = tape.constant(eps.clone());
        self.mean.add(self.log_std.exp().mul(noise))
    }
}

#[derive(Clone, Debug)]
pub struct MessageHead {
    mlp: Mlp,
    dim: usize,
    log_std_min: f64,
    log_std_max: f64,
}

impl MessageHead {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, name: &str, input: usize, cfg: &ModelConfig) -> Self {
        Self {
            mlp: Mlp::new(store, init, name, input, cfg.hidden_width, 2 * cfg.message_dim),
            dim: cfg.message_dim,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
        }
    }

    /// Message posterior given a latent feature vector.
    pub fn infer<'t, F: Real>(&self, p: &Bound<'t, F>, features: Var<'t, F>) -> MessageDist<'t, F> {
        let out = self.mlp.forward(p, features);
        MessageDist {
            mean: out.slice_cols(0, self.dim),
            log_std: out
                .slice_cols(self.dim, 2 * self.dim)
                .clamp(lit(self.log_std_min), lit(self.log_std_max)),
        }
    }
}

/// Latent state of a batch at one step.
#[derive(Clone, Copy)]
pub struct LatentState<'t, F: Real> {
    pub h: Var<'t, F>,
    pub z_probs: Var<'t, F>,
    pub z_sample: Var<'t, F>,
}

impl<'t, F: Real> LatentState<'t, F> {
    /// All-zero state preceding the first observation.
    pub fn initial(tape: &'t Tape<F>, batch: usize, cfg: &ModelConfig) -> Self {
        let z = tape.zeros(batch, cfg.latent_width());
        Self {
            h: tape.zeros(batch, cfg.gru_dim),
            z_probs: z,
            z_sample: z,
        }
    }

    pub fn features(&self) -> Var<'t, F> {
        self.h.tape().concat(&[self.h, self.z_sample])
    }
}

/// Per-step outputs of a posterior (filtering) update.
#[derive(Clone, Copy)]
pub struct FilterStep<'t, F: Real> {
    pub state: LatentState<'t, F>,
    pub prior_probs: Var<'t, F>,
    /// Squared reconstruction error per row (`batch x 1`).
    pub recon: Var<'t, F>,
    /// Categorical KL(posterior || prior) per row (`batch x 1`).
    pub kl: Var<'t, F>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    cfg: ModelConfig,
    transition_input: Mlp,
    gru: GruCell,
    obs_embed: Mlp,
    posterior: Mlp,
    prior: Mlp,
    decoder: Mlp,
    policy: Mlp,
}

impl WorldModel {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Self {
        let hw = cfg.hidden_width;
        let feat = cfg.feature_width();
        let n = |s: &str| format!("{prefix}{s}");
        Self {
            cfg: cfg.clone(),
            transition_input: Mlp::new(
                store,
                init,
                &n("transition"),
                cfg.latent_width() + cfg.message_dim + cfg.action_dim,
                hw,
                hw,
            ),
            gru: GruCell::new(store, init, &n("gru"), hw, cfg.gru_dim),
            obs_embed: Mlp::new(store, init, &n("embed"), cfg.obs_dim, hw, cfg.embed_dim),
            posterior: Mlp::new(store, init, &n("posterior"), cfg.gru_dim + cfg.embed_dim, hw, cfg.latent_width()),
            prior: Mlp::new(store, init, &n("prior"), cfg.gru_dim, hw, cfg.latent_width()),
            decoder: Mlp::new(store, init, &n("decoder"), feat, hw, cfg.obs_dim),
            policy: Mlp::new(store, init, &n("policy"), feat + cfg.message_dim, hw, cfg.action_dim),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic path of the transition: `h_t` from `(h, z)_{t-1}`, `m_{t-1}`, `a_{t-1}`.
    pub fn recurrent_update<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        prev: &LatentState<'t, F>,
        msg_prev: Var<'t, F>,
        action_prev: Var<'t, F>,
    ) -> Var<'t, F> {
        let tape = prev.h.tape();
        let input = tape.concat(&[prev.z_sample, msg_prev, action_prev]);
        let x = self.transition_input.forward(p, input);
        self.gru.forward(p, x, prev.h)
    }

    fn latent<'t, F: Real>(&self, logits: Var<'t, F>, uniforms: &Array2<F>) -> (Var<'t, F>, Var<'t, F>) {
        let probs = logits.unimix_softmax(self.cfg.latent_classes, lit(self.cfg.unimix_fraction));
        let onehot = sample_one_hot(&probs.value(), uniforms, self.cfg.latent_classes);
        (probs, probs.straight_through(onehot))
    }

    pub fn posterior_logits<'t, F: Real>(&self, p: &Bound<'t, F>, h: Var<'t, F>, obs: Var<'t, F>) -> Var<'t, F> {
        let e = self.obs_embed.forward(p, obs);
        self.posterior.forward(p, h.tape().concat(&[h, e]))
    }

    /// Representation model: `(z_probs, z_sample)` given `h_t` and `o_t`.
    pub fn posterior_latent<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        h: Var<'t, F>,
        obs: Var<'t, F>,
        uniforms: &Array2<F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let logits = self.posterior_logits(p, h, obs);
        check_finite(&logits, "posterior logits")?;
        Ok(self.latent(logits, uniforms))
    }

    pub fn prior_logits<'t, F: Real>(&self, p: &Bound<'t, F>, h: Var<'t, F>) -> Var<'t, F> {
        self.prior.forward(p, h)
    }

    /// Transition model's stochastic head: `(z_probs, z_sample)` given `h_t`.
    pub fn prior_latent<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        h: Var<'t, F>,
        uniforms: &Array2<F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let logits = self.prior_logits(p, h);
        check_finite(&logits, "prior logits")?;
        Ok(self.latent(logits, uniforms))
    }

    fn prior_probs<'t, F: Real>(&self, p: &Bound<'t, F>, h: Var<'t, F>) -> Var<'t, F> {
        self.prior_logits(p, h)
            .unimix_softmax(self.cfg.latent_classes, lit(self.cfg.unimix_fraction))
    }

    /// Mean of the unit-variance Gaussian observation model.
    pub fn decode_obs<'t, F: Real>(&self, p: &Bound<'t, F>, s: &LatentState<'t, F>) -> Var<'t, F> {
        self.decoder.forward(p, s.features())
    }

    /// Behavioral-cloning head `pi(s_t, m_{t-1})`, unclipped.
    pub fn policy<'t, F: Real>(&self, p: &Bound<'t, F>, s: &LatentState<'t, F>, msg_prev: Var<'t, F>) -> Var<'t, F> {
        let tape = s.h.tape();
        self.policy
            .forward(p, tape.concat(&[s.h, s.z_sample, msg_prev]))
    }

    /// One posterior update and its individual free-energy terms.
    pub fn filter_step<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        prev: &LatentState<'t, F>,
        msg_prev: Var<'t, F>,
        action_prev: Var<'t, F>,
        obs: &Array2<F>,
        uniforms: &Array2<F>,
    ) -> Result<FilterStep<'t, F>> {
        let tape = prev.h.tape();
        let h = self.recurrent_update(p, prev, msg_prev, action_prev);
        let obs_var = tape.constant(obs.clone());
        let (z_probs, z_sample) = self.posterior_latent(p, h, obs_var, uniforms)?;
        let state = LatentState { h, z_probs, z_sample };
        let prior_probs = self.prior_probs(p, h);
        let recon = self.decode_obs(p, &state).sq_err_rows(obs);
        let kl = z_probs.categorical_kl(prior_probs);
        Ok(FilterStep {
            state,
            prior_probs,
            recon,
            kl,
        })
    }
}

fn check_finite<F: Real>(v: &Var<'_, F>, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what}")))
    }
}

/// A decentralized agent: world model, own message head and policy.
#[derive(Clone, Debug)]
pub struct AgentModel<F> {
    pub world: WorldModel,
    pub message: MessageHead,
    pub params: ParamStore<F>,
}

impl<F: Real> AgentModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let world = WorldModel::new(&mut params, &mut init, "", cfg);
        let message = MessageHead::new(&mut params, &mut init, "message", cfg.feature_width(), cfg);
        Ok(Self {
            world,
            message,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.world.config()
    }
}

/// Two world models whose shared message is inferred from both latent states.
#[derive(Clone, Debug)]
pub struct JointModel<F> {
    pub a: WorldModel,
    pub b: WorldModel,
    pub message: MessageHead,
    pub params: ParamStore<F>,
}

impl<F: Real> JointModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let a = WorldModel::new(&mut params, &mut init, "a.", cfg);
        let b = WorldModel::new(&mut params, &mut init, "b.", cfg);
        let message = MessageHead::new(&mut params, &mut init, "joint_message", 2 * cfg.feature_width(), cfg);
        Ok(Self { a, b, message, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.a.config()
    }

    /// `q(m_t | s_t^A, s_t^B)`.
    pub fn infer_message<'t>(
        &self,
        p: &Bound<'t, F>,
        sa: &LatentState<'t, F>,
        sb: &LatentState<'t, F>,
    ) -> MessageDist<'t, F> {
        let tape = sa.h.tape();
        self.message
            .infer(p, tape.concat(&[sa.h, sa.z_sample, sb.h, sb.z_sample]))
    }
}
