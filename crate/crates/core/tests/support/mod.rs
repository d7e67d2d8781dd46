#![allow(dead_code)]

use std::collections::HashMap;

use cwm_core::environment::{generate_dataset, Bins, Dataset, EnvConfig, Vec2};
use cwm_core::evaluation::expert_trial;
use cwm_core::metrics::{max_cross_correlation, rsa_score};
use cwm_core::model::{Bound, LatentState, MessageDist, ParamStore, StepNoise};
use cwm_core::training::{
    derive_seed, draw_noise, joint_losses, pair_losses, unroll_agent, Condition, LossReport, MessageFeed, Models,
    SeqBatch, Trainer, TrainingConfig, View,
};
use cwm_core::{AgentModel, JointModel, ModelConfig, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        gru_dim: 3,
        latent_dims: 2,
        latent_classes: 2,
        message_dim: 2,
        hidden_width: 5,
        embed_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn micro_env() -> EnvConfig {
    EnvConfig {
        bins: Bins::Finite(2),
        episode_length: 8,
        action_limit: 3.0,
        seed: 21,
        ..EnvConfig::default()
    }
}

pub fn micro_dataset() -> Dataset {
    generate_dataset(&micro_env(), 4).expect("micro dataset")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------------------
// Plain-loop reference implementation of the agent model.

struct Weights {
    by_name: HashMap<String, Vec<Vec<f64>>>,
}

impl Weights {
    fn of(store: &ParamStore<f64>) -> Self {
        let by_name = store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| (n.clone(), v.rows().into_iter().map(|r| r.to_vec()).collect()))
            .collect();
        Self { by_name }
    }

    fn get(&self, name: &str) -> &Vec<Vec<f64>> {
        self.by_name
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn dense(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.get(&format!("{name}.w"));
        let b = &self.get(&format!("{name}.b"))[0];
        assert_eq!(w.len(), x.len(), "{name}: input width");
        (0..b.len())
            .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i][j]).sum::<f64>())
            .collect()
    }

    fn mlp(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .dense(&format!("{name}.0"), x)
            .into_iter()
            .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        self.dense(&format!("{name}.1"), &hidden)
    }

    fn gru(&self, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let affine = |w: &str, b: &str, v: &[f64]| -> Vec<f64> {
            let w = self.get(&format!("{name}.{w}"));
            let b = &self.get(&format!("{name}.{b}"))[0];
            (0..3 * hd)
                .map(|j| b[j] + (0..v.len()).map(|i| v[i] * w[i][j]).sum::<f64>())
                .collect()
        };
        let gx = affine("wx", "bx", x);
        let gh = affine("wh", "bh", h);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..hd)
            .map(|k| {
                let r = sig(gx[k] + gh[k]);
                let z = sig(gx[hd + k] + gh[hd + k]);
                let n = (gx[2 * hd + k] + r * gh[2 * hd + k]).tanh();
                (1.0 - z) * n + z * h[k]
            })
            .collect()
    }
}

fn unimix(logits: &[f64], classes: usize, mix: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for grp in logits.chunks(classes) {
        let denom: f64 = grp.iter().map(|v| v.exp()).sum();
        out.extend(grp.iter().map(|v| (1.0 - mix) * v.exp() / denom + mix / classes as f64));
    }
    out
}

fn one_hot(probs: &[f64], uniforms: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for (g, grp) in probs.chunks(classes).enumerate() {
        let mut cum = 0.0;
        let mut pick = classes - 1;
        for (k, p) in grp.iter().enumerate() {
            cum += p;
            if uniforms[g] < cum {
                pick = k;
                break;
            }
        }
        out[g * classes + pick] = 1.0;
    }
    out
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(p, q)| p * (p / q).ln()).sum()
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

#[derive(Clone)]
struct RefState {
    h: Vec<f64>,
    z: Vec<f64>,
}

struct RefStep {
    state: RefState,
    recon: f64,
    kl: f64,
}

fn ref_filter(
    w: &Weights,
    prefix: &str,
    cfg: &ModelConfig,
    prev: &RefState,
    msg_prev: &[f64],
    act_prev: &[f64],
    obs: &[f64],
    uniforms: &[f64],
) -> RefStep {
    let n = |s: &str| format!("{prefix}{s}");
    let x = w.mlp(&n("transition"), &cat(&[&prev.z, msg_prev, act_prev]));
    let h = w.gru(&n("gru"), &x, &prev.h);
    let e = w.mlp(&n("embed"), obs);
    let post = unimix(&w.mlp(&n("posterior"), &cat(&[&h, &e])), cfg.latent_classes, cfg.unimix_fraction);
    let prior = unimix(&w.mlp(&n("prior"), &h), cfg.latent_classes, cfg.unimix_fraction);
    let z = one_hot(&post, uniforms, cfg.latent_classes);
    let recon = sq_err(&w.mlp(&n("decoder"), &cat(&[&h, &z])), obs);
    RefStep {
        recon,
        kl: kl(&post, &prior),
        state: RefState { h, z },
    }
}

fn ref_message(w: &Weights, head: &str, cfg: &ModelConfig, features: &[f64], eps: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let out = w.mlp(head, features);
    let d = cfg.message_dim;
    let mean = out[..d].to_vec();
    let sample = (0..d)
        .map(|k| mean[k] + out[d + k].clamp(cfg.log_std_min, cfg.log_std_max).exp() * eps[k])
        .collect();
    (mean, sample)
}

fn ref_policy(w: &Weights, prefix: &str, s: &RefState, msg_prev: &[f64]) -> Vec<f64> {
    w.mlp(&format!("{prefix}policy"), &cat(&[&s.h, &s.z, msg_prev]))
}

/// Per-agent terms summed over time for every batch row.
#[derive(Default, Clone, Debug)]
pub struct RefTerms {
    pub reconst: f64,
    pub kld: f64,
    pub nce: f64,
    pub policy: f64,
}

impl RefTerms {
    pub fn total(&self, cfg: &TrainingConfig, with_nce: bool) -> f64 {
        self.reconst + cfg.w_kld * self.kld + if with_nce { cfg.w_nce * self.nce } else { 0.0 } + self.policy
    }
}

struct Stream {
    obs: Vec<Vec<Vec<f64>>>,
    act: Vec<Vec<Vec<f64>>>,
}

fn stream(batch: &SeqBatch<f64>) -> Stream {
    let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    Stream {
        obs: batch.obs.iter().map(rows).collect(),
        act: batch.act.iter().map(rows).collect(),
    }
}

fn noise_rows(noise: &[StepNoise<f64>]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    (
        noise.iter().map(|n| rows(&n.latent)).collect(),
        noise.iter().map(|n| rows(&n.message)).collect(),
    )
}

/// Reference unroll of one decentralized agent, conditioned on its own
/// messages unless `given` supplies them.
/// Returns the batch-mean terms and the message samples `[t][row]`.
pub fn reference_agent(
    store: &ParamStore<f64>,
    cfg: &ModelConfig,
    batch: &SeqBatch<f64>,
    noise: &[StepNoise<f64>],
    given: Option<&[Vec<Vec<f64>>]>,
) -> (RefTerms, Vec<Vec<Vec<f64>>>) {
    let w = Weights::of(store);
    let s = stream(batch);
    let (lat, msg) = noise_rows(noise);
    let rows = s.obs[0].len();
    let t_len = s.act.len();
    let mut terms = RefTerms::default();
    let mut samples = vec![vec![Vec::new(); rows]; t_len];
    for i in 0..rows {
        let mut prev = RefState {
            h: vec![0.0; cfg.gru_dim],
            z: vec![0.0; cfg.latent_width()],
        };
        let mut m_prev = vec![0.0; cfg.message_dim];
        let mut a_prev = vec![0.0; cfg.action_dim];
        for t in 0..=t_len {
            let step = ref_filter(&w, "", cfg, &prev, &m_prev, &a_prev, &s.obs[t][i], &lat[t][i]);
            terms.reconst += step.recon;
            terms.kld += step.kl;
            if t == t_len {
                break;
            }
            terms.policy += sq_err(&ref_policy(&w, "", &step.state, &m_prev), &s.act[t][i]);
            let m = match given {
                Some(g) => g[t][i].clone(),
                None => ref_message(&w, "message", cfg, &cat(&[&step.state.h, &step.state.z]), &msg[t][i]).1,
            };
            samples[t][i] = m.clone();
            prev = step.state;
            m_prev = m;
            a_prev = s.act[t][i].clone();
        }
    }
    let n = rows as f64;
    terms.reconst /= n;
    terms.kld /= n;
    terms.policy /= n;
    (terms, samples)
}

/// Reference joint-message unroll; returns the terms of both world models.
pub fn reference_joint(
    store: &ParamStore<f64>,
    cfg: &ModelConfig,
    batch_a: &SeqBatch<f64>,
    batch_b: &SeqBatch<f64>,
    noise_a: &[StepNoise<f64>],
    noise_b: &[StepNoise<f64>],
) -> (RefTerms, RefTerms) {
    let w = Weights::of(store);
    let (sa, sb) = (stream(batch_a), stream(batch_b));
    let (lat_a, msg_a) = noise_rows(noise_a);
    let (lat_b, _) = noise_rows(noise_b);
    let rows = sa.obs[0].len();
    let t_len = sa.act.len();
    let (mut ta, mut tb) = (RefTerms::default(), RefTerms::default());
    for i in 0..rows {
        let zero = RefState {
            h: vec![0.0; cfg.gru_dim],
            z: vec![0.0; cfg.latent_width()],
        };
        let (mut pa, mut pb) = (zero.clone(), zero);
        let mut m_prev = vec![0.0; cfg.message_dim];
        let mut a_prev = vec![0.0; cfg.action_dim];
        let mut b_prev = vec![0.0; cfg.action_dim];
        for t in 0..=t_len {
            let xa = ref_filter(&w, "a.", cfg, &pa, &m_prev, &a_prev, &sa.obs[t][i], &lat_a[t][i]);
            let xb = ref_filter(&w, "b.", cfg, &pb, &m_prev, &b_prev, &sb.obs[t][i], &lat_b[t][i]);
            ta.reconst += xa.recon;
            ta.kld += xa.kl;
            tb.reconst += xb.recon;
            tb.kld += xb.kl;
            if t == t_len {
                break;
            }
            ta.policy += sq_err(&ref_policy(&w, "a.", &xa.state, &m_prev), &sa.act[t][i]);
            tb.policy += sq_err(&ref_policy(&w, "b.", &xb.state, &m_prev), &sb.act[t][i]);
            let feat = cat(&[&xa.state.h, &xa.state.z, &xb.state.h, &xb.state.z]);
            let (_, m) = ref_message(&w, "joint_message", cfg, &feat, &msg_a[t][i]);
            pa = xa.state;
            pb = xb.state;
            m_prev = m;
            a_prev = sa.act[t][i].clone();
            b_prev = sb.act[t][i].clone();
        }
    }
    let n = rows as f64;
    for t in [&mut ta, &mut tb] {
        t.reconst /= n;
        t.kld /= n;
        t.policy /= n;
    }
    (ta, tb)
}

/// Direct evaluation of the batch InfoNCE formula.
pub fn reference_infonce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let sim = |a: &[f64], b: &[f64]| -sq_err(a, b) / tau;
    let mut total = 0.0;
    for i in 0..n {
        let mean_exp = (0..n).map(|j| sim(&anchors[i], &positives[j]).exp()).sum::<f64>() / n as f64;
        total += -(sim(&anchors[i], &positives[i]).exp() / mean_exp).ln();
    }
    total / n as f64
}

fn reference_sequence_nce(own: &[Vec<Vec<f64>>], received: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    own.iter().zip(received).map(|(a, p)| reference_infonce(a, p, tau)).sum()
}


// ---------------------------------------------------------------------------
// Analytic gradients against central differences.

type Probe<'a> = dyn for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64> + 'a;

fn weighted_sum<'t>(v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = v.dim();
    let w = Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
    v.mul(v.tape().constant(w)).sum()
}

fn random_array(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

/// Largest relative deviation between the tape gradient and a central
/// difference, over every scalar of every parameter in `store`. Returns the
/// error and the number of scalars the probe depends on.
fn fd_max_error(store: &ParamStore<f64>, f: &Probe<'_>) -> (f64, usize) {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let grads = tape.backward(f(&tape, &bound));
    let analytic: Vec<Array2<f64>> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut touched = 0;
    for (k, value) in store.values().iter().enumerate() {
        for idx in 0..value.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.values_mut()[k].as_slice_mut().unwrap()[idx] += delta;
                let t = Tape::new();
                let b = s.bind(&t);
                f(&t, &b).scalar()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = analytic[k].as_slice().unwrap()[idx];
            if fd != 0.0 || an != 0.0 {
                touched += 1;
            }
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-5));
        }
    }
    (worst, touched)
}

/// Fixed inputs shared by the per-operation probes.
struct ProbeInputs {
    h: Array2<f64>,
    z: Array2<f64>,
    msg: Array2<f64>,
    act: Array2<f64>,
    obs: Array2<f64>,
    uniforms: Array2<f64>,
    eps: Array2<f64>,
    positives: Array2<f64>,
}

impl ProbeInputs {
    fn new(cfg: &ModelConfig, rows: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut z = Array2::zeros((rows, cfg.latent_width()));
        for i in 0..rows {
            for g in 0..cfg.latent_dims {
                z[[i, g * cfg.latent_classes + rng.gen_range(0..cfg.latent_classes)]] = 1.0;
            }
        }
        Self {
            h: random_array(&mut rng, rows, cfg.gru_dim, 0.9),
            z,
            msg: random_array(&mut rng, rows, cfg.message_dim, 1.0),
            act: random_array(&mut rng, rows, cfg.action_dim, 0.1),
            obs: random_array(&mut rng, rows, cfg.obs_dim, 1.0),
            uniforms: Array2::from_shape_fn((rows, cfg.latent_dims), |_| rng.gen_range(0.0..1.0)),
            eps: random_array(&mut rng, rows, cfg.message_dim, 1.5),
            positives: random_array(&mut rng, rows, cfg.message_dim, 1.0),
        }
    }

    fn state<'t>(&self, tape: &'t Tape<f64>) -> LatentState<'t, f64> {
        LatentState {
            h: tape.constant(self.h.clone()),
            z_probs: tape.constant(self.z.clone()),
            z_sample: tape.constant(self.z.clone()),
        }
    }
}

/// Checks every parameterized operation of the agent and joint models on
/// the tiny configuration in 64-bit precision.
pub fn gradient_check() -> Check {
    let cfg = tiny_config();
    let agent = AgentModel::<f64>::new(&cfg, 5).map_err(|e| e.to_string())?;
    let joint = JointModel::<f64>::new(&cfg, 6).map_err(|e| e.to_string())?;
    let x = ProbeInputs::new(&cfg, 3);
    let w = &agent.world;
    let x = &x;
    let head = &agent.message;
    let jm = &joint;
    let agent_probes: Vec<(&str, Box<Probe<'_>>)> = vec![
        (
            "recurrent update",
            Box::new(move |t, p| {
                let s = x.state(t);
                weighted_sum(w.recurrent_update(p, &s, t.constant(x.msg.clone()), t.constant(x.act.clone())), 1)
            }),
        ),
        (
            "posterior",
            Box::new(move |t, p| {
                let (probs, _) = w
                    .posterior_latent(p, t.constant(x.h.clone()), t.constant(x.obs.clone()), &x.uniforms)
                    .unwrap();
                weighted_sum(probs, 2)
            }),
        ),
        (
            "prior",
            Box::new(move |t, p| {
                let (probs, _) = w.prior_latent(p, t.constant(x.h.clone()), &x.uniforms).unwrap();
                weighted_sum(probs, 3)
            }),
        ),
        (
            "categorical kl",
            Box::new(move |t, p| {
                let h = t.constant(x.h.clone());
                let (post, _) = w
                    .posterior_latent(p, h, t.constant(x.obs.clone()), &x.uniforms)
                    .unwrap();
                let (prior, _) = w.prior_latent(p, h, &x.uniforms).unwrap();
                weighted_sum(post.categorical_kl(prior), 4)
            }),
        ),
        (
            "decoder",
            Box::new(move |t, p| w.decode_obs(p, &x.state(t)).sq_err_rows(&x.obs).sum()),
        ),
        (
            "policy",
            Box::new(move |t, p| w.policy(p, &x.state(t), t.constant(x.msg.clone())).sq_err_rows(&x.act).sum()),
        ),
        (
            "message head",
            Box::new(move |t, p| {
                let d = head.infer(p, x.state(t).features());
                weighted_sum(d.mean, 5)
                    .add(weighted_sum(d.log_std, 6))
                    .add(weighted_sum(d.sample(&x.eps), 7))
            }),
        ),
        (
            "infonce",
            Box::new(move |t, p| {
                let d = head.infer(p, x.state(t).features());
                d.sample(&x.eps).infonce(&x.positives, 2.0)
            }),
        ),
    ];
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    let mut run = |name: &str, store: &ParamStore<f64>, f: &Probe<'_>| -> Result<(), String> {
        let (err, touched) = fd_max_error(store, f);
        if touched == 0 {
            return Err(format!("{name}: probe depends on no parameter"));
        }
        worst = worst.max(err);
        lines.push(format!("{name}: {touched} scalars, max rel err {err:.2e}"));
        Ok(())
    };
    for (name, f) in &agent_probes {
        run(name, &agent.params, f.as_ref())?;
    }
    let joint_probe: Box<Probe<'_>> = Box::new(move |t, p| {
        let (sa, sb) = (x.state(t), x.state(t));
        let sb = LatentState {
            h: sb.h.scale(-0.5),
            ..sb
        };
        let d: MessageDist<'_, f64> = jm.infer_message(p, &sa, &sb);
        weighted_sum(d.sample(&x.eps), 8).add(weighted_sum(d.log_std, 9))
    });
    run("joint message", &joint.params, joint_probe.as_ref())?;

    // The straight-through sample passes its gradient to the probabilities.
    let tape = Tape::new();
    let p = agent.params.bind(&tape);
    let (probs, sample) = w
        .posterior_latent(&p, tape.constant(x.h.clone()), tape.constant(x.obs.clone()), &x.uniforms)
        .unwrap();
    let g_sample = tape.backward(weighted_sum(sample, 10));
    let g_probs = tape.backward(weighted_sum(probs, 10));
    for v in p.vars() {
        if g_sample.get_or_zeros(*v) != g_probs.get_or_zeros(*v) {
            return Err("straight-through gradient differs from the probability gradient".into());
        }
    }
    lines.push("straight-through: identical to probability gradient".into());

    if worst < 1e-4 {
        Ok(format!("max rel err {worst:.2e}; {}", lines.join("; ")))
    } else {
        Err(format!("max rel err {worst:.2e} >= 1e-4; {}", lines.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// Loss oracles on the micro-dataset.

fn compare(what: &str, got: f64, want: f64, worst: &mut f64) -> Result<(), String> {
    let e = rel_err(got, want);
    *worst = worst.max(e);
    if !(e < 1e-10) {
        return Err(format!("{what}: implementation {got} vs reference {want} (rel {e:.2e})"));
    }
    Ok(())
}

fn compare_report(
    label: &str,
    got: &cwm_core::training::AgentLosses,
    want: &RefTerms,
    cfg: &TrainingConfig,
    with_nce: bool,
    worst: &mut f64,
) -> Result<(), String> {
    compare(&format!("{label} reconst"), got.reconst, want.reconst, worst)?;
    compare(&format!("{label} kld"), got.kld, want.kld, worst)?;
    compare(&format!("{label} policy"), got.policy, want.policy, worst)?;
    if with_nce {
        compare(&format!("{label} nce"), got.nce, want.nce, worst)?;
    } else if got.nce != 0.0 {
        return Err(format!("{label}: unexpected nce {}", got.nce));
    }
    compare(&format!("{label} total"), got.total, want.total(cfg, with_nce), worst)
}

fn arrays_to_rows(xs: &[Array2<f64>]) -> Vec<Vec<Vec<f64>>> {
    xs.iter()
        .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// One training step per condition on the micro-dataset; every reported
/// term is recomputed by the plain-loop reference.
pub fn condition_totals_check(worst: &mut f64) -> Result<(), String> {
    let data = micro_dataset();
    let eps: Vec<_> = data.episodes.iter().collect();
    let n = eps.len();
    let steps = data.steps();
    for condition in Condition::ALL {
        let cfg = TrainingConfig {
            condition,
            batch_size: n,
            seed: 3,
            ..TrainingConfig::default()
        };
        let mcfg = condition.model_config();
        let mut trainer = Trainer::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let before = trainer.models.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
        let report: LossReport = trainer.train_step(&eps).map_err(|e| e.to_string())?;
        let tag = condition.as_str();
        match &before {
            Models::Pair { a, b } => {
                let ba = SeqBatch::<f64>::from_episodes(&eps, View::A).unwrap();
                let bb = SeqBatch::<f64>::from_episodes(&eps, View::B).unwrap();
                let na = draw_noise(&mut rng, steps, n, &mcfg);
                let nb = draw_noise(&mut rng, steps, n, &mcfg);
                let (mut ta, sa) = reference_agent(&a.params, &mcfg, &ba, &na, None);
                let (mut tb, sb) = reference_agent(&b.params, &mcfg, &bb, &nb, None);
                let ec = condition == Condition::Ec;
                if ec {
                    ta.nce = reference_sequence_nce(&sa, &sb, cfg.tau);
                    tb.nce = reference_sequence_nce(&sb, &sa, cfg.tau);
                }
                compare_report(&format!("{tag} A"), &report.a, &ta, &cfg, ec, worst)?;
                let rb = report.b.ok_or("missing agent B report")?;
                compare_report(&format!("{tag} B"), &rb, &tb, &cfg, ec, worst)?;
            }
            Models::Joint(j) => {
                let ba = SeqBatch::<f64>::from_episodes(&eps, View::A).unwrap();
                let bb = SeqBatch::<f64>::from_episodes(&eps, View::B).unwrap();
                let na = draw_noise(&mut rng, steps, n, &mcfg);
                let nb = draw_noise(&mut rng, steps, n, &mcfg);
                let (ta, tb) = reference_joint(&j.params, &mcfg, &ba, &bb, &na, &nb);
                compare_report(&format!("{tag} A"), &report.a, &ta, &cfg, false, worst)?;
                let rb = report.b.ok_or("missing agent B report")?;
                compare_report(&format!("{tag} B"), &rb, &tb, &cfg, false, worst)?;
            }
            Models::Single(m) => {
                let batch = SeqBatch::<f64>::from_episodes(&eps, View::Full).unwrap();
                let noise = draw_noise(&mut rng, steps, n, &mcfg);
                let (t, _) = reference_agent(&m.params, &mcfg, &batch, &noise, None);
                compare_report(tag, &report.a, &t, &cfg, false, worst)?;
                if report.b.is_some() {
                    return Err("single agent reported a second agent".into());
                }
            }
        }
    }
    Ok(())
}

/// Individual free energy of one agent conditioned on externally supplied
/// messages, against the reference.
pub fn individual_vfe_check(worst: &mut f64) -> Result<(), String> {
    let data = micro_dataset();
    let eps: Vec<_> = data.episodes.iter().collect();
    let cfg = ModelConfig::default();
    let model = AgentModel::<f64>::new(&cfg, 17).map_err(|e| e.to_string())?;
    let batch = SeqBatch::<f64>::from_episodes(&eps, View::B).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = draw_noise(&mut rng, batch.steps(), eps.len(), &cfg);
    let given: Vec<Array2<f64>> = (0..batch.steps())
        .map(|_| random_array(&mut rng, eps.len(), cfg.message_dim, 1.0))
        .collect();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let vars: Vec<Var<'_, f64>> = given.iter().map(|g| tape.constant(g.clone())).collect();
    let u = unroll_agent(&model, &p, &batch, &noise, MessageFeed::Given(&vars)).map_err(|e| e.to_string())?;
    let (t, _) = reference_agent(&model.params, &cfg, &batch, &noise, Some(&arrays_to_rows(&given)));
    compare("vfe reconst", u.reconst.scalar(), t.reconst, worst)?;
    compare("vfe kld", u.kld.scalar(), t.kld, worst)?;
    compare("vfe policy", u.policy.scalar(), t.policy, worst)
}

/// InfoNCE and categorical KL operations on random instances.
pub fn primitive_loss_check(worst: &mut f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tape = Tape::<f64>::new();
    for _ in 0..200 {
        let n = rng.gen_range(2..=6);
        let a = random_array(&mut rng, n, 2, 1.5);
        let p = random_array(&mut rng, n, 2, 1.5);
        let tau = rng.gen_range(0.5..4.0);
        let got = tape.constant(a.clone()).infonce(&p, tau).scalar();
        let want = reference_infonce(&arrays_to_rows(&[a])[0], &arrays_to_rows(&[p])[0], tau);
        compare("infonce", got, want, worst)?;

        let classes = rng.gen_range(2..=4);
        let dims = rng.gen_range(1..=4);
        let lp = random_array(&mut rng, n, classes * dims, 3.0);
        let lq = random_array(&mut rng, n, classes * dims, 3.0);
        let pv = tape.constant(lp.clone()).unimix_softmax(classes, 0.01);
        let qv = tape.constant(lq.clone()).unimix_softmax(classes, 0.01);
        let got = pv.categorical_kl(qv).to_array();
        for i in 0..n {
            let want = kl(
                &unimix(&lp.row(i).to_vec(), classes, 0.01),
                &unimix(&lq.row(i).to_vec(), classes, 0.01),
            );
            if want < 0.0 {
                return Err("reference KL negative".into());
            }
            compare("categorical kl", got[[i, 0]], want, worst)?;
        }
    }
    Ok(())
}

pub fn loss_oracle_check() -> Check {
    let mut worst = 0.0;
    primitive_loss_check(&mut worst)?;
    individual_vfe_check(&mut worst)?;
    condition_totals_check(&mut worst)?;
    Ok(format!(
        "infonce, categorical KL, individual VFE and the EC/BC/NC/baseline totals agree; max rel err {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// Decentralization.

fn all_zero(grads: &cwm_core::tape::Gradients<f64>, vars: &[Var<'_, f64>]) -> (bool, usize) {
    let mut scalars = 0;
    let mut zero = true;
    for v in vars {
        if let Some(g) = grads.get(*v) {
            scalars += g.len();
            zero &= g.iter().all(|&x| x == 0.0);
        } else {
            scalars += v.dim().0 * v.dim().1;
        }
    }
    (zero, scalars)
}

/// In EC training each agent's objective has exactly zero gradient with
/// respect to every parameter scalar of the other agent, while its own
/// parameters do receive gradient.
pub fn decentralization_check() -> Check {
    let data = micro_dataset();
    let eps: Vec<_> = data.episodes.iter().collect();
    let cfg = TrainingConfig {
        condition: Condition::Ec,
        batch_size: eps.len(),
        ..TrainingConfig::default()
    };
    let mcfg = ModelConfig::default();
    let a = AgentModel::<f64>::new(&mcfg, 1).map_err(|e| e.to_string())?;
    let b = AgentModel::<f64>::new(&mcfg, 2).map_err(|e| e.to_string())?;
    let ba = SeqBatch::<f64>::from_episodes(&eps, View::A).unwrap();
    let bb = SeqBatch::<f64>::from_episodes(&eps, View::B).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let na = draw_noise(&mut rng, ba.steps(), eps.len(), &mcfg);
    let nb = draw_noise(&mut rng, bb.steps(), eps.len(), &mcfg);
    let mut probed = 0;
    for own_is_a in [true, false] {
        let tape = Tape::new();
        let pa = a.params.bind(&tape);
        let pb = b.params.bind(&tape);
        let (la, lb) = pair_losses(&a, &pa, &b, &pb, &ba, &bb, &na, &nb, &cfg, true).map_err(|e| e.to_string())?;
        let (loss, own, other) = if own_is_a { (la, &pa, &pb) } else { (lb, &pb, &pa) };
        if loss.nce.is_none() {
            return Err("EC objective lacks the InfoNCE term".into());
        }
        let grads = tape.backward(loss.total);
        let (zero, scalars) = all_zero(&grads, other.vars());
        probed += scalars;
        if !zero {
            return Err(format!(
                "agent {}'s objective has nonzero gradient on the other agent's parameters",
                if own_is_a { "A" } else { "B" }
            ));
        }
        if all_zero(&grads, own.vars()).0 {
            return Err("own parameters received no gradient".into());
        }
    }
    Ok(format!("{probed} cross-agent parameter scalars probed, all exactly zero"))
}

/// The joint message network receives gradient from the joint objective.
pub fn joint_connectivity_check() -> Check {
    let data = micro_dataset();
    let eps: Vec<_> = data.episodes.iter().collect();
    let cfg = TrainingConfig {
        condition: Condition::Bc,
        batch_size: eps.len(),
        ..TrainingConfig::default()
    };
    let mcfg = ModelConfig::default();
    let j = JointModel::<f64>::new(&mcfg, 3).map_err(|e| e.to_string())?;
    let ba = SeqBatch::<f64>::from_episodes(&eps, View::A).unwrap();
    let bb = SeqBatch::<f64>::from_episodes(&eps, View::B).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let na = draw_noise(&mut rng, ba.steps(), eps.len(), &mcfg);
    let nb = draw_noise(&mut rng, bb.steps(), eps.len(), &mcfg);
    let tape = Tape::new();
    let p = j.params.bind(&tape);
    let (la, lb) = joint_losses(&j, &p, &ba, &bb, &na, &nb, &cfg).map_err(|e| e.to_string())?;
    let grads = tape.backward(la.total.add(lb.total));
    let message_vars: Vec<Var<'_, f64>> = j
        .params
        .names()
        .iter()
        .zip(p.vars())
        .filter(|(n, _)| n.starts_with("joint_message"))
        .map(|(_, v)| *v)
        .collect();
    if message_vars.is_empty() {
        return Err("no joint message parameters".into());
    }
    if all_zero(&grads, &message_vars).0 {
        return Err("joint message network receives no gradient".into());
    }
    Ok("joint message network receives gradient".into())
}

// ---------------------------------------------------------------------------
// Metric oracles.

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx > 0.0 && vy > 0.0 {
        Some(cov / (vx * vy).sqrt())
    } else {
        None
    }
}

/// Every circular lag and both axes evaluated from scratch.
pub fn brute_cross_correlation(generated: &[Vec2], ideal: &[Vec2]) -> Option<f64> {
    let n = generated.len();
    let mut best = f64::NEG_INFINITY;
    for lag in 0..n {
        let mut score = 0.0;
        for axis in 0..2 {
            let x: Vec<f64> = (0..n).map(|i| generated[i][axis]).collect();
            let y: Vec<f64> = (0..n).map(|i| ideal[(i + lag) % n][axis]).collect();
            score += brute_pearson(&x, &y)? / 2.0;
        }
        best = best.max(score);
    }
    Some(best)
}

/// Rank of each value counting strictly smaller values, ties averaged.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_rsa(messages: &[Vec<f64>], positions: &[Vec<f64>]) -> Option<f64> {
    let dist = |pts: &[Vec<f64>]| {
        let mut d = Vec::new();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if i < j {
                    d.push(sq_err(&pts[i], &pts[j]).sqrt());
                }
            }
        }
        d
    };
    brute_pearson(&brute_ranks(&dist(messages)), &brute_ranks(&dist(positions)))
}

pub fn rigid_scaled(points: &[Vec<f64>], angle: f64, shift: [f64; 2], scale: f64) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| {
            vec![
                scale * (c * p[0] - s * p[1]) + shift[0],
                scale * (s * p[0] + c * p[1]) + shift[1],
            ]
        })
        .collect()
}

pub fn metric_oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    let mut defined = (0, 0);
    for k in 0..200 {
        let n = rng.gen_range(2..=8);
        // Every fourth instance is coarsely quantized to exercise ties and
        // degenerate axes.
        let coarse = k % 4 == 0;
        let mut draw = || {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if coarse {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let g: Vec<Vec2> = (0..n).map(|_| [draw(), draw()]).collect();
        let r: Vec<Vec2> = (0..n).map(|_| [draw(), draw()]).collect();
        match (max_cross_correlation(&g, &r), brute_cross_correlation(&g, &r)) {
            (Ok(a), Some(b)) => {
                worst = worst.max((a - b).abs());
                defined.0 += 1;
            }
            (Err(cwm_core::Error::MetricUndefined(_)), None) => {}
            (a, b) => return Err(format!("cross-correlation disagreement: {a:?} vs {b:?}")),
        }

        let m = rng.gen_range(3..=8);
        let dim = rng.gen_range(1..=3);
        let mut draw = || {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if coarse {
                v.round()
            } else {
                v
            }
        };
        let msgs: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| draw()).collect()).collect();
        let pos: Vec<Vec<f64>> = (0..m).map(|_| vec![draw(), draw()]).collect();
        match (rsa_score(&msgs, &pos), brute_rsa(&msgs, &pos)) {
            (Ok(a), Some(b)) => {
                worst = worst.max((a.spearman_rho - b).abs());
                defined.1 += 1;
                if !coarse {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let shift = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                    let scale = rng.gen_range(0.1..10.0);
                    let moved = rigid_scaled(&pos, angle, shift, scale);
                    let rho = rsa_score(&msgs, &moved).map_err(|e| e.to_string())?.spearman_rho;
                    worst_inv = worst_inv.max((rho - a.spearman_rho).abs());
                }
            }
            (Err(cwm_core::Error::MetricUndefined(_)), None) => {}
            (a, b) => return Err(format!("RSA disagreement: {a:?} vs {b:?}")),
        }
    }
    let detail = format!(
        "{} cross-correlation and {} RSA instances defined; max abs err {worst:.2e}; invariance err {worst_inv:.2e}",
        defined.0, defined.1
    );
    if worst <= 1e-12 && worst_inv <= 1e-9 && defined.0 > 100 && defined.1 > 100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Expert sanity.

pub fn expert_check() -> Check {
    let env = EnvConfig::default();
    let mut worst: f64 = 0.0;
    // Starts on the ideal curve's own sample grid, so some circular lag
    // aligns the two paths point for point.
    for (i, k) in [0usize, 13, 77, 150, 199].into_iter().enumerate() {
        let phase = k as f64 * env.phase_step();
        let trial = expert_trial(&env, phase, i as u64).map_err(|e| e.to_string())?;
        let score = trial.max_cross_correlation.ok_or("expert trial excluded")?;
        worst = worst.max((score - 1.0).abs());
    }
    if worst <= 1e-6 {
        Ok(format!("expert scores within {worst:.2e} of 1"))
    } else {
        Err(format!("expert score deviates from 1 by {worst:.2e}"))
    }
}
