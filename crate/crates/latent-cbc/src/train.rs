//! The training loop: warm start of the latent model, then alternating
//! steps on the weighted total loss and the Lipschitz LMI loss, with target
//! networks tracking the online ones by Polyak averaging.
//!
//! Every run is deterministic under a fixed seed: dataset sampling, batch
//! order, rollout starts, and initialization all come from one seeded
//! stream, and the CSV log contains no wall-clock fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::certify::{
    consistency_error, covering_radius, default_probes, encode_buffer, CertifyError, Margins,
};
use crate::envs::{
    backstep, obs_input, rollout, sample_datasets, sample_state, DataBuffer, EnvError, EnvId,
    EnvSpec, Label,
};
use crate::losses::{
    latent_model_loss, lmi_loss, lmi_report, lmi_satisfied, build_lmi, performance_loss,
    synthesis_loss, total_loss, Batch, LossError, LossWeights,
};
use crate::nets::{
    Activation, Checkpoint, Mlp, MlpSpec, MlpTapeParams, NetError, Nets, OutputActivation,
    ParamStore,
};
use crate::tensor::{Tape, TensorRef};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite value) at iteration {0}")]
    Diverged(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, n_params: usize) -> Self {
        assert!(lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update in place; `lr_scale` temporarily rescales the step size.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr_scale: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged(self.t as usize));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter flattening (fixed order: per layer, weights then bias)
// ---------------------------------------------------------------------------

fn mlp_param_count(net: &Mlp) -> usize {
    net.weights.iter().map(|w| w.len()).sum::<usize>()
        + net.biases.iter().map(|b| b.len()).sum::<usize>()
}

fn flatten_mlp(net: &Mlp, out: &mut Vec<f64>) {
    for l in 0..net.weights.len() {
        out.extend_from_slice(&net.weights[l]);
        out.extend_from_slice(&net.biases[l]);
    }
}

fn unflatten_mlp(net: &mut Mlp, flat: &[f64], pos: &mut usize) {
    for l in 0..net.weights.len() {
        let wl = net.weights[l].len();
        net.weights[l].copy_from_slice(&flat[*pos..*pos + wl]);
        *pos += wl;
        let bl = net.biases[l].len();
        net.biases[l].copy_from_slice(&flat[*pos..*pos + bl]);
        *pos += bl;
    }
}

fn flatten_nets(nets: &Nets) -> Vec<f64> {
    let mut out = Vec::new();
    for net in [&nets.encoder, &nets.dynamics, &nets.barrier, &nets.policy] {
        flatten_mlp(net, &mut out);
    }
    out
}

fn unflatten_nets(nets: &mut Nets, flat: &[f64]) {
    let mut pos = 0;
    for net in [
        &mut nets.encoder,
        &mut nets.dynamics,
        &mut nets.barrier,
        &mut nets.policy,
    ] {
        unflatten_mlp(net, flat, &mut pos);
    }
    assert_eq!(pos, flat.len());
}

/// Gradients of one inserted network, in flatten order; zero for tensors the
/// loss never touched.
fn gather_mlp_grads(tape: &Tape, p: &MlpTapeParams, out: &mut Vec<f64>) {
    for l in 0..p.weights.len() {
        for t in [p.weights[l], p.biases[l]] {
            match tape.grad(t) {
                Some(g) => out.extend_from_slice(g),
                None => {
                    let (r, c) = tape.shape(t);
                    out.extend(std::iter::repeat(0.0).take(r * c));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Config and log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvId,
    pub frame_width: usize,
    pub frame_height: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub barrier_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_total: usize,
    pub warm_start_epochs: usize,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    /// separate (slower) rate for the encoder: the embedding has to move
    /// slower than the barrier or the per-epoch psi refresh chases its own
    /// tail (stretching grows the covering radius, which reopens the hinges)
    pub lr_encoder: f64,
    pub lr_lmi: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rho: f64,
    pub weights: LossWeights,
    pub lipschitz_bound: f64,
    pub rollouts_per_iter: usize,
    pub rollout_horizon: usize,
    /// gradient steps on the total loss per outer iteration
    pub main_steps_per_iter: usize,
    /// gradient steps on the LMI loss per outer iteration
    pub lmi_steps_per_iter: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// constant baseline action; None disables the performance term
    pub pi_user: Option<f64>,
}

impl TrainConfig {
    pub fn pendulum_default() -> Self {
        TrainConfig {
            env: EnvId::Pendulum,
            frame_width: 32,
            frame_height: 32,
            latent_dim: 2,
            encoder_hidden: vec![64, 32],
            dynamics_hidden: vec![32, 32],
            barrier_hidden: vec![32, 32],
            policy_hidden: vec![32, 32],
            n_safe: 200,
            n_unsafe: 200,
            n_total: 1000,
            warm_start_epochs: 20,
            max_iterations: 500,
            batch_size: 64,
            lr_main: 1e-3,
            lr_encoder: 1e-4,
            lr_lmi: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rho: 0.995,
            weights: LossWeights::default(),
            lipschitz_bound: 2.0,
            rollouts_per_iter: 10,
            rollout_horizon: 100,
            main_steps_per_iter: 10,
            lmi_steps_per_iter: 5,
            seed: 0,
            tolerance: 1e-5,
            pi_user: Some(0.0),
        }
    }

    pub fn vehicle_default() -> Self {
        TrainConfig {
            env: EnvId::Vehicle,
            frame_width: 48,
            frame_height: 48,
            latent_dim: 4,
            lipschitz_bound: 1.5,
            pi_user: None,
            ..TrainConfig::pendulum_default()
        }
    }

    pub fn env_spec(&self) -> EnvSpec {
        let base = match self.env {
            EnvId::Pendulum => EnvSpec::pendulum(),
            EnvId::Vehicle => EnvSpec::vehicle(),
        };
        base.with_frames(self.frame_width, self.frame_height)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive_counts = [
            ("n_safe", self.n_safe),
            ("n_unsafe", self.n_unsafe),
            ("n_total", self.n_total),
            ("max_iterations", self.max_iterations),
            ("batch_size", self.batch_size),
            ("frame_width", self.frame_width),
            ("frame_height", self.frame_height),
            ("latent_dim", self.latent_dim),
            ("main_steps_per_iter", self.main_steps_per_iter),
            ("lmi_steps_per_iter", self.lmi_steps_per_iter),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.n_total < self.n_safe + self.n_unsafe {
            return Err(TrainError::InvalidConfig(
                "n_total must be >= n_safe + n_unsafe".into(),
            ));
        }
        if !(self.lr_main > 0.0) || !(self.lr_lmi > 0.0) || !(self.lr_encoder > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning rates must be > 0".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(TrainError::InvalidConfig("rho must be in (0, 1)".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(TrainError::InvalidConfig("tolerance must be >= 0".into()));
        }
        if !(self.lipschitz_bound > 0.0) {
            return Err(TrainError::InvalidConfig(
                "lipschitz_bound must be > 0".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        for (name, h) in [
            ("encoder_hidden", &self.encoder_hidden),
            ("dynamics_hidden", &self.dynamics_hidden),
            ("barrier_hidden", &self.barrier_hidden),
            ("policy_hidden", &self.policy_hidden),
        ] {
            if h.is_empty() || h.iter().any(|&w| w == 0) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} needs at least one nonzero width"
                )));
            }
        }
        Ok(())
    }

    fn net_specs(&self) -> (MlpSpec, MlpSpec, MlpSpec, MlpSpec) {
        let spec = self.env_spec();
        let obs_dim = spec.obs_dim();
        let mk = |input: usize, hidden: &[usize], out_dim: usize, out| {
            let mut widths = vec![input];
            widths.extend_from_slice(hidden);
            widths.push(out_dim);
            MlpSpec::new(widths, Activation::Relu, out)
        };
        // linear outputs: the training loop renormalizes the latent
        // coordinates by folding an affine change of basis into this layer
        // (see whiten_latents), which requires it to stay linear
        let encoder = mk(
            obs_dim,
            &self.encoder_hidden,
            self.latent_dim,
            OutputActivation::Linear,
        );
        // residual skip: the one-step latent motion is small next to the
        // latent scale, so predicting the increment keeps the consistency
        // error at the scale of what the net actually has to learn
        let dynamics = mk(
            self.latent_dim + 1,
            &self.dynamics_hidden,
            self.latent_dim,
            OutputActivation::Linear,
        )
        .with_residual();
        let barrier = mk(
            self.latent_dim,
            &self.barrier_hidden,
            1,
            OutputActivation::Linear,
        );
        let policy = mk(
            self.latent_dim,
            &self.policy_hidden,
            1,
            OutputActivation::TanhScaled {
                lo: spec.action_lo,
                hi: spec.action_hi,
            },
        );
        (encoder, dynamics, barrier, policy)
    }
}

/// One completed outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub l_total: f64,
    pub l_synthesis: f64,
    pub l_latent_model: f64,
    pub l_performance: f64,
    pub l_lmi: f64,
    pub psi: f64,
    pub eta: f64,
    pub eps_bar: f64,
    pub delta: f64,
    pub q1_violations: usize,
    pub q2_violations: usize,
    pub q3_violations: usize,
    pub lmi_logdet: f64,
    pub lmi_feasible: bool,
    /// informational only; deliberately not written to the CSV so that two
    /// seeded runs produce byte-identical logs
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,l_total,l_synthesis,l_latent_model,\
l_performance,l_lmi,psi,eta,eps_bar,delta,q1_violations,q2_violations,q3_violations,\
lmi_logdet,lmi_feasible";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.l_total,
                r.l_synthesis,
                r.l_latent_model,
                r.l_performance,
                r.l_lmi,
                r.psi,
                r.eta,
                r.eps_bar,
                r.delta,
                r.q1_violations,
                r.q2_violations,
                r.q3_violations,
                r.lmi_logdet,
                r.lmi_feasible,
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn refresh_margins(store: &ParamStore, buf: &DataBuffer, l_bound: f64) -> Margins {
    let latents = encode_buffer(&store.online.encoder, buf);
    let probes = default_probes(&latents);
    let eps_bar = covering_radius(&latents, &probes).expect("nonempty sets");
    let delta = consistency_error(&store.online, buf);
    Margins::from_measurements(l_bound, eps_bar, delta)
}

fn build_batch(buf: &DataBuffer, indices: &[usize]) -> Batch {
    let mut batch = Batch::default();
    for &i in indices {
        let obs = buf.obs_input(i);
        match buf.record(i).label {
            Label::Safe => batch.safe_obs.push(obs.clone()),
            Label::Unsafe => batch.unsafe_obs.push(obs.clone()),
            Label::Unlabeled => {}
        }
        batch.d_obs.push(obs);
        batch.d_actions.push(buf.record(i).action);
        batch.d_obs_next.push(buf.obs_next_input(i));
    }
    batch
}

/// Minibatch indices with fixed quotas: a quarter safe, a quarter unsafe,
/// the rest uniform over the buffer. Keeps the two labeled hinge terms
/// populated even when rollout data dilutes the labeled fractions.
fn stratified_indices<R: Rng>(buf: &DataBuffer, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let quota = batch_size / 4;
    let mut idx = Vec::with_capacity(batch_size);
    let safe = buf.safe_indices();
    let uns = buf.unsafe_indices();
    for _ in 0..quota {
        if !safe.is_empty() {
            idx.push(safe[rng.gen_range(0..safe.len())]);
        }
        if !uns.is_empty() {
            idx.push(uns[rng.gen_range(0..uns.len())]);
        }
    }
    while idx.len() < batch_size {
        idx.push(rng.gen_range(0..buf.len()));
    }
    idx
}

struct StepLosses {
    total: f64,
    synthesis: f64,
    latent_model: f64,
    performance: f64,
}

/// One optimizer per online network so the learning rates can differ.
pub struct MainOptims {
    encoder: Adam,
    dynamics: Adam,
    barrier: Adam,
    policy: Adam,
}

impl MainOptims {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let mk = |lr: f64, net: &Mlp| {
            Adam::new(lr, cfg.beta1, cfg.beta2, cfg.adam_eps, mlp_param_count(net))
        };
        MainOptims {
            encoder: mk(cfg.lr_encoder, &store.online.encoder),
            dynamics: mk(cfg.lr_main, &store.online.dynamics),
            barrier: mk(cfg.lr_main, &store.online.barrier),
            policy: mk(cfg.lr_main, &store.online.policy),
        }
    }
}

/// One gradient step of the weighted total loss on a batch. Set
/// `include_synthesis = false` during warm start (latent-model loss only).
#[allow(clippy::too_many_arguments)]
fn total_loss_step(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    batch: &Batch,
    margins: &Margins,
    optims: &mut MainOptims,
    lr_scale: f64,
    include_synthesis: bool,
    iteration: usize,
) -> Result<StepLosses, TrainError> {
    let mut tape = Tape::new();
    let e = store.online.encoder.insert(&mut tape, true);
    let d = store.online.dynamics.insert(&mut tape, true);
    let b = store.online.barrier.insert(&mut tape, true);
    let pi = store.online.policy.insert(&mut tape, true);
    let tb = store.target.barrier.insert(&mut tape, false);

    let lm = latent_model_loss(
        &mut tape,
        &e,
        &d,
        &b,
        &store.target.encoder,
        batch,
        margins.psi,
        &cfg.weights,
    );
    let (loss, sy_v, pf_v) = if include_synthesis {
        let sy = synthesis_loss(
            &mut tape,
            &e,
            &d,
            &pi,
            &b,
            &store.target.encoder,
            &tb,
            &batch.d_obs,
            margins.psi,
            margins.eta,
        );
        let pf: Option<TensorRef> = cfg.pi_user.map(|u| {
            performance_loss(&mut tape, &e, &pi, &batch.d_obs, &|_| vec![u])
        });
        let t = total_loss(&mut tape, sy, lm, pf, &cfg.weights);
        (
            t,
            tape.scalar_value(sy),
            pf.map(|p| tape.scalar_value(p)).unwrap_or(0.0),
        )
    } else {
        (lm, 0.0, 0.0)
    };

    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(TrainError::Diverged(iteration));
    }
    tape.backward(loss)
        .map_err(|_| TrainError::Diverged(iteration))?;
    {
        let nets = &mut store.online;
        for (p, net, adam) in [
            (&e, &mut nets.encoder, &mut optims.encoder),
            (&d, &mut nets.dynamics, &mut optims.dynamics),
            (&b, &mut nets.barrier, &mut optims.barrier),
            (&pi, &mut nets.policy, &mut optims.policy),
        ] {
            let mut grads = Vec::new();
            gather_mlp_grads(&tape, p, &mut grads);
            let mut flat = Vec::new();
            flatten_mlp(net, &mut flat);
            adam.step(&mut flat, &grads, lr_scale)?;
            let mut pos = 0;
            unflatten_mlp(net, &flat, &mut pos);
        }
    }
    store.polyak_update(cfg.rho);
    Ok(StepLosses {
        total: value,
        synthesis: sy_v,
        latent_model: tape.scalar_value(lm),
        performance: pf_v,
    })
}

/// One gradient step on the LMI loss over the barrier weights and the
/// multipliers. Returns (loss value, feasible flag).
fn lmi_step(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    adam: &mut Adam,
    iteration: usize,
) -> Result<(f64, bool), TrainError> {
    let mut tape = Tape::new();
    let b = store.online.barrier.insert(&mut tape, true);
    let hidden = store.online.barrier.spec.hidden_widths().to_vec();
    let (alpha, beta) = store.online.barrier.spec.hidden.slopes();
    let mut lambda_vars = Vec::new();
    let mut lambdas = Vec::new();
    let mut start = 0;
    for &w in &hidden {
        let seg = store.lambda_log[start..start + w].to_vec();
        start += w;
        let v = tape.var(w, 1, seg);
        lambda_vars.push(v);
        lambdas.push(tape.exp(v));
    }
    let m = build_lmi(
        &mut tape,
        &b.weights,
        &lambdas,
        alpha,
        beta,
        cfg.lipschitz_bound,
    )
    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let ll = lmi_loss(&mut tape, m);
    let value = tape.scalar_value(ll.loss);
    if !value.is_finite() {
        return Err(TrainError::Diverged(iteration));
    }
    tape.backward(ll.loss)
        .map_err(|_| TrainError::Diverged(iteration))?;
    let mut grads = Vec::new();
    gather_mlp_grads(&tape, &b, &mut grads);
    for v in &lambda_vars {
        grads.extend_from_slice(tape.grad(*v).expect("lambda grad"));
    }
    let mut flat = Vec::new();
    flatten_mlp(&store.online.barrier, &mut flat);
    flat.extend_from_slice(&store.lambda_log);
    adam.step(&mut flat, &grads, 1.0)?;
    let mut pos = 0;
    unflatten_mlp(&mut store.online.barrier, &flat, &mut pos);
    store.lambda_log.copy_from_slice(&flat[pos..]);
    store.polyak_update(cfg.rho);
    Ok((value, ll.feasible))
}

/// Slack kept on logdet(M) before LMI steps pause. Minimizing -logdet past
/// feasibility only flattens the barrier, so the LMI loss acts as a
/// constraint: step while the certificate is violated or the slack is thin,
/// stand down once it clears this target.
const LMI_LOGDET_TARGET: f64 = 1.0;

/// Fraction of the Lipschitz budget the projection aims for, leaving slack
/// for the LMI multipliers to certify.
const PROJECT_SLACK: f64 = 0.98;

/// Exact projection of the barrier back inside the Lipschitz budget: the
/// product of layer spectral norms upper-bounds the Lipschitz constant, and
/// scaling the output layer scales both the function and that bound
/// linearly. Gradient pressure on the hinge terms alone drives the slope
/// arbitrarily high when the latent geometry is still tight; the penalty
/// gradient loses that race, so the bound is enforced by rescaling instead
/// and the hinges have to win by moving the encoder. Applied to the target
/// barrier with the same factor so the Polyak pair stays on one scale.
fn project_barrier(store: &mut ParamStore, l_bound: f64) {
    let ub = crate::certify::lipschitz_upper_bound(&store.online.barrier);
    if ub <= l_bound || !ub.is_finite() {
        return;
    }
    let s = PROJECT_SLACK * l_bound / ub;
    for barrier in [&mut store.online.barrier, &mut store.target.barrier] {
        let last = barrier.spec.n_layers() - 1;
        for w in &mut barrier.weights[last] {
            *w *= s;
        }
        for b in &mut barrier.biases[last] {
            *b *= s;
        }
    }
}

fn lmi_step_if_needed(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    adam: &mut Adam,
    iteration: usize,
) -> Result<(f64, bool), TrainError> {
    project_barrier(store, cfg.lipschitz_bound);
    let rep = lmi_report(&store.online.barrier, &store.lambda(), cfg.lipschitz_bound);
    if rep.feasible && rep.logdet >= LMI_LOGDET_TARGET {
        return Ok((-rep.logdet, true));
    }
    lmi_step(cfg, store, adam, iteration)
}

/// Margined-condition violation counts on the full buffer with the online
/// networks (the stopping-rule check; q3 uses the policy's action).
fn count_violations(nets: &Nets, buf: &DataBuffer, margins: &Margins) -> (usize, usize, usize) {
    let latents = encode_buffer(&nets.encoder, buf);
    let b_of = |z: &[f64]| nets.barrier.forward(z).expect("barrier")[0];
    let mut q1 = 0;
    for &i in buf.safe_indices() {
        if b_of(&latents[i]) + margins.psi > 0.0 {
            q1 += 1;
        }
    }
    let mut q2 = 0;
    for &i in buf.unsafe_indices() {
        if -b_of(&latents[i]) + margins.psi > 0.0 {
            q2 += 1;
        }
    }
    let mut q3 = 0;
    for z in &latents {
        let a = nets.policy.forward(z).expect("policy")[0];
        let mut za = z.clone();
        za.push(a);
        let next = nets.dynamics.forward(&za).expect("dynamics");
        if b_of(&next) + margins.eta - b_of(z) + margins.psi > 0.0 {
            q3 += 1;
        }
    }
    (q1, q2, q3)
}

/// The synthesis hinge of Eq-style bootstrapped form over the whole buffer,
/// evaluated with plain forward passes (no tape): the target barrier at the
/// predicted next latent against the online barrier at the current latent.
fn full_buffer_synthesis_hinge(store: &ParamStore, buf: &DataBuffer, margins: &Margins) -> f64 {
    let mut sum = 0.0;
    for i in 0..buf.len() {
        let obs = buf.obs_input(i);
        let z = store.online.encoder.forward(&obs).expect("encoder");
        let a = store.online.policy.forward(&z).expect("policy")[0];
        let mut za = store.target.encoder.forward(&obs).expect("target encoder");
        za.push(a);
        let next = store.online.dynamics.forward(&za).expect("dynamics");
        let b_next = store.target.barrier.forward(&next).expect("target barrier")[0];
        let b_now = store.online.barrier.forward(&z).expect("barrier")[0];
        sum += (b_next + margins.eta - b_now + margins.psi).max(0.0);
    }
    sum
}

/// Total loss over the whole buffer, evaluated in chunks without gradients.
#[allow(dead_code)]
fn full_buffer_loss(cfg: &TrainConfig, store: &ParamStore, buf: &DataBuffer, margins: &Margins) -> f64 {
    let chunk = cfg.batch_size.max(64);
    let all: Vec<usize> = (0..buf.len()).collect();
    let mut synthesis = 0.0;
    let mut latent_model = 0.0;
    let mut performance_sum = 0.0;
    for idx in all.chunks(chunk) {
        let batch = build_batch(buf, idx);
        let mut tape = Tape::new();
        let e = store.online.encoder.insert(&mut tape, false);
        let d = store.online.dynamics.insert(&mut tape, false);
        let b = store.online.barrier.insert(&mut tape, false);
        let pi = store.online.policy.insert(&mut tape, false);
        let tb = store.target.barrier.insert(&mut tape, false);
        let lm = latent_model_loss(
            &mut tape,
            &e,
            &d,
            &b,
            &store.target.encoder,
            &batch,
            margins.psi,
            &cfg.weights,
        );
        latent_model += tape.scalar_value(lm);
        let sy = synthesis_loss(
            &mut tape,
            &e,
            &d,
            &pi,
            &b,
            &store.target.encoder,
            &tb,
            &batch.d_obs,
            margins.psi,
            margins.eta,
        );
        synthesis += tape.scalar_value(sy);
        if let Some(u) = cfg.pi_user {
            let pf = performance_loss(&mut tape, &e, &pi, &batch.d_obs, &|_| vec![u]);
            performance_sum += tape.scalar_value(pf) * idx.len() as f64;
        }
    }
    let perf_mean = performance_sum / buf.len() as f64;
    cfg.weights.lam1 * synthesis
        + cfg.weights.lam2 * latent_model
        + if cfg.pi_user.is_some() {
            cfg.weights.lam3 * perf_mean
        } else {
            0.0
        }
}

// ---------------------------------------------------------------------------
// Warm start and the main loop
// ---------------------------------------------------------------------------

// ---------------------------------------------------------------------------
// Latent renormalization
// ---------------------------------------------------------------------------

fn mat_identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i][k];
            for j in 0..p {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvectors as columns, eigenvalues).
fn jacobi_eig(mut a: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = a.len();
    let mut v = mat_identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-28 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let lam = (0..n).map(|i| a[i][i]).collect();
    (v, lam)
}

/// Largest per-direction amplification applied in one whitening pass, so a
/// freshly collapsed direction is re-inflated gradually instead of violently.
const WHITEN_AMP_CAP: f64 = 8.0;

/// Mean and symmetric inverse-square-root covariance (and its inverse) of a
/// latent sample.
fn whitening_transform(latents: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = latents.len();
    let d = latents[0].len();
    let mut mu = vec![0.0; d];
    for z in latents {
        for k in 0..d {
            mu[k] += z[k];
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for z in latents {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (z[i] - mu[i]) * (z[j] - mu[j]);
            }
        }
    }
    for row in &mut cov {
        for c in row.iter_mut() {
            *c /= n as f64;
        }
    }
    let (v, lam) = jacobi_eig(cov);
    // the amplification cap is relative to the widest direction: flooring
    // lam_k at lam_max / cap^2 limits sqrt(lam_max / lam_k) to the cap
    let lam_max = lam.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
    let floor = lam_max / (WHITEN_AMP_CAP * WHITEN_AMP_CAP);
    let mut a = vec![vec![0.0; d]; d];
    let mut a_inv = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let lk = lam[k].max(floor);
                let s = 1.0 / (lk + 1e-12).sqrt();
                a[i][j] += v[i][k] * s * v[j][k];
                a_inv[i][j] += v[i][k] * (1.0 / s) * v[j][k];
            }
        }
    }
    (mu, a, a_inv)
}

fn mat_transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m) = (a.len(), a[0].len());
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

/// Rotate a centered cloud so its axis-aligned bounding box has minimal
/// volume: coordinate descent over Givens planes with a 1-degree angle grid.
/// Whitening leaves exactly this orthogonal freedom, and the covering radius
/// is probed on an axis-aligned grid, so packing the box tightly is what
/// keeps the completeness margin small. Returns the rotation; the cloud is
/// rotated in place.
fn align_to_axes(latents: &mut [Vec<f64>]) -> Vec<Vec<f64>> {
    let d = latents[0].len();
    let mut r = mat_identity(d);
    if d < 2 {
        return r;
    }
    for _sweep in 0..3 {
        for p in 0..d {
            for q in p + 1..d {
                // bbox volume is periodic in the plane angle with period pi/2
                let mut best = (0.0, f64::INFINITY);
                for k in 0..90 {
                    let phi = k as f64 * (std::f64::consts::FRAC_PI_2 / 90.0);
                    let (c, s) = (phi.cos(), phi.sin());
                    let (mut lo_p, mut hi_p) = (f64::INFINITY, f64::NEG_INFINITY);
                    let (mut lo_q, mut hi_q) = (f64::INFINITY, f64::NEG_INFINITY);
                    for z in latents.iter() {
                        let a = c * z[p] - s * z[q];
                        let b = s * z[p] + c * z[q];
                        lo_p = lo_p.min(a);
                        hi_p = hi_p.max(a);
                        lo_q = lo_q.min(b);
                        hi_q = hi_q.max(b);
                    }
                    let area = (hi_p - lo_p) * (hi_q - lo_q);
                    if area < best.1 {
                        best = (phi, area);
                    }
                }
                let phi = best.0;
                if phi == 0.0 {
                    continue;
                }
                let (c, s) = (phi.cos(), phi.sin());
                for z in latents.iter_mut() {
                    let a = c * z[p] - s * z[q];
                    let b = s * z[p] + c * z[q];
                    z[p] = a;
                    z[q] = b;
                }
                for col in 0..d {
                    let (rp, rq) = (r[p][col], r[q][col]);
                    r[p][col] = c * rp - s * rq;
                    r[q][col] = s * rp + c * rq;
                }
            }
        }
    }
    r
}

/// Rewrite a network's (linear) output layer to produce A (out - mu).
fn affine_output_fold(net: &mut Mlp, a: &[Vec<f64>], mu: &[f64]) {
    let l = net.weights.len() - 1;
    let d = mu.len();
    let n_in = net.spec.widths[net.spec.widths.len() - 2];
    let old_w = net.weights[l].clone();
    let old_b = net.biases[l].clone();
    for i in 0..d {
        for k in 0..n_in {
            let mut s = 0.0;
            for j in 0..d {
                s += a[i][j] * old_w[j * n_in + k];
            }
            net.weights[l][i * n_in + k] = s;
        }
        let mut s = 0.0;
        for j in 0..d {
            s += a[i][j] * (old_b[j] - mu[j]);
        }
        net.biases[l][i] = s;
    }
}

/// Rewrite a network's first layer so that feeding it A (z - mu) computes
/// what feeding it z used to; only the first `d` input columns transform
/// (the dynamics also takes an action column, which is left alone).
fn affine_input_fold(net: &mut Mlp, a_inv: &[Vec<f64>], mu: &[f64], d: usize) {
    let n_in = net.spec.widths[0];
    let n_out = net.spec.widths[1];
    let old_w = net.weights[0].clone();
    for i in 0..n_out {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += old_w[i * n_in + j] * a_inv[j][k];
            }
            net.weights[0][i * n_in + k] = s;
        }
        let mut s = 0.0;
        for j in 0..d {
            s += old_w[i * n_in + j] * mu[j];
        }
        net.biases[0][i] += s;
    }
}

/// Change the latent basis so the buffer latents have zero mean and unit
/// covariance: the affine map is folded into the encoder output layer and
/// its exact inverse into every latent consumer, so every composite function
/// of observations is unchanged while the coordinates the margins and the
/// Lipschitz bound live in stay well-conditioned. This pins the latent
/// statistics: the embedding can neither collapse, nor drift away, nor
/// stretch without limit.
fn whiten_latents(store: &mut ParamStore, buf: &DataBuffer) {
    let latents = encode_buffer(&store.online.encoder, buf);
    let d = latents[0].len();
    let (mu, a, a_inv) = whitening_transform(&latents);
    // spend the leftover orthogonal freedom on packing the bounding box
    let mut whitened: Vec<Vec<f64>> = latents
        .iter()
        .map(|z| {
            (0..d)
                .map(|i| (0..d).map(|j| a[i][j] * (z[j] - mu[j])).sum())
                .collect()
        })
        .collect();
    let r = align_to_axes(&mut whitened);
    let a = mat_mul(&r, &a);
    let a_inv = mat_mul(&a_inv, &mat_transpose(&r));
    for nets in [&mut store.online, &mut store.target] {
        affine_output_fold(&mut nets.encoder, &a, &mu);
        affine_input_fold(&mut nets.barrier, &a_inv, &mu, d);
        affine_input_fold(&mut nets.policy, &a_inv, &mu, d);
        affine_input_fold(&mut nets.dynamics, &a_inv, &mu, d);
        // with a residual skip the dynamics output is the increment g in
        // d(z,a) = z + g, which transforms by A with no mean shift
        if nets.dynamics.spec.residual {
            affine_output_fold(&mut nets.dynamics, &a, &vec![0.0; d]);
        } else {
            affine_output_fold(&mut nets.dynamics, &a, &mu);
        }
    }
}

/// Optional stderr diagnostics, enabled with LATENT_CBC_DEBUG=1: latent
/// bounding box, margins, and violation counts at the end of a phase step.
fn debug_snapshot(phase: &str, step: usize, store: &ParamStore, buf: &DataBuffer, margins: &Margins) {
    if std::env::var("LATENT_CBC_DEBUG").is_err() {
        return;
    }
    let latents = encode_buffer(&store.online.encoder, buf);
    let d = latents[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for z in &latents {
        for k in 0..d {
            lo[k] = lo[k].min(z[k]);
            hi[k] = hi[k].max(z[k]);
        }
    }
    let (q1, q2, q3) = count_violations(&store.online, buf, margins);
    // min safe-to-unsafe latent distance: must exceed 2 eps_bar for the
    // labeled hinges to be jointly satisfiable at the Lipschitz bound
    let mut gap = f64::INFINITY;
    for &i in buf.safe_indices() {
        for &j in buf.unsafe_indices() {
            let d2: f64 = latents[i]
                .iter()
                .zip(&latents[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            gap = gap.min(d2);
        }
    }
    let gap = gap.sqrt();
    let lip = crate::certify::lipschitz_upper_bound(&store.online.barrier);
    eprintln!(
        "[{phase} {step}] bbox {:?} eps={:.4} delta={:.4} gap={gap:.4} lipub={lip:.3} q=({q1},{q2},{q3})",
        lo.iter()
            .zip(&hi)
            .map(|(a, b)| format!("{a:.3}..{b:.3}"))
            .collect::<Vec<_>>(),
        margins.eps_bar,
        margins.delta,
    );
}

/// Run LMI steps until the factorization succeeds again (penalty-gradient
/// path), up to `cap` steps. Returns the last (value, feasible) pair.
fn restore_certificate(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    adam: &mut Adam,
    iteration: usize,
    cap: usize,
) -> Result<(f64, bool), TrainError> {
    project_barrier(store, cfg.lipschitz_bound);
    let mut last = lmi_step(cfg, store, adam, iteration)?;
    for _ in 1..cap {
        if last.1 {
            break;
        }
        last = lmi_step(cfg, store, adam, iteration)?;
    }
    Ok(last)
}

/// Warm start: minimize the latent-model loss for `warm_start_epochs`
/// epochs over the sampled buffer, refreshing the covering radius and
/// completeness margin at every epoch. One LMI step is interleaved with
/// every loss step so the certificate stays feasible from initialization
/// onward. Returns the per-epoch mean loss.
pub fn warm_start<R: Rng>(
    cfg: &TrainConfig,
    store: &mut ParamStore,
    buf: &DataBuffer,
    optims: &mut MainOptims,
    adam_lmi: &mut Adam,
    rng: &mut R,
) -> Result<Vec<f64>, TrainError> {
    let mut epoch_losses = Vec::with_capacity(cfg.warm_start_epochs);
    let batches_per_epoch = (buf.len() / cfg.batch_size).max(1);
    for epoch in 0..cfg.warm_start_epochs {
        whiten_latents(store, buf);
        restore_certificate(cfg, store, adam_lmi, epoch, RESTORE_CAP)?;
        let margins = refresh_margins(store, buf, cfg.lipschitz_bound);
        let mut sum = 0.0;
        for _ in 0..batches_per_epoch {
            let idx = stratified_indices(buf, cfg.batch_size, rng);
            let batch = build_batch(buf, &idx);
            let losses = total_loss_step(
                cfg,
                store,
                &batch,
                &margins,
                optims,
                anneal(epoch),
                false,
                epoch,
            )?;
            lmi_step_if_needed(cfg, store, adam_lmi, epoch)?;
            sum += losses.total;
        }
        restore_certificate(cfg, store, adam_lmi, epoch, RESTORE_CAP)?;
        epoch_losses.push(sum / batches_per_epoch as f64);
        debug_snapshot("warm", epoch, store, buf, &margins);
    }
    Ok(epoch_losses)
}

/// Hard ceiling on consecutive penalty-path LMI steps per restoration pass.
const RESTORE_CAP: usize = 400;

/// Epoch count over which the main-loss step size halves. Late in training
/// the latent geometry is the quantity being optimized, and full-size steps
/// keep knocking it out of the separated configurations it reaches.
const ANNEAL_TAU: f64 = 30.0;

fn anneal(step: usize) -> f64 {
    1.0 / (1.0 + step as f64 / ANNEAL_TAU)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub converged: bool,
    pub buffer: DataBuffer,
}

/// Full synthesis run: sample datasets, warm start, then alternate total-loss
/// and LMI steps with fresh policy rollouts and margin refreshes each outer
/// iteration, until the total loss passes tolerance with the certificate
/// satisfied and zero margined violations on the buffer.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let spec = cfg.env_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buf = sample_datasets(&spec, cfg.n_safe, cfg.n_unsafe, cfg.n_total, &mut rng)?;

    let (e_spec, d_spec, b_spec, p_spec) = cfg.net_specs();
    let mut store = ParamStore::new(e_spec, d_spec, b_spec, p_spec, cfg.rho, &mut rng);

    let mut optims = MainOptims::new(cfg, &store);
    let n_lmi = mlp_param_count(&store.online.barrier) + store.lambda_log.len();
    let mut adam_lmi = Adam::new(cfg.lr_lmi, cfg.beta1, cfg.beta2, cfg.adam_eps, n_lmi);

    warm_start(cfg, &mut store, &buf, &mut optims, &mut adam_lmi, &mut rng)?;

    let mut log = TrainLog::default();
    let mut converged = false;
    let mut lmi_ok = true;
    let started = std::time::Instant::now();

    for iteration in 0..cfg.max_iterations {
        // (i) fresh rollouts under the current policy grow the buffer
        for _ in 0..cfg.rollouts_per_iter {
            let s0 = sample_state(&spec, &mut rng);
            let encoder = store.online.encoder.clone();
            let policy = store.online.policy.clone();
            let traj = rollout(
                &spec,
                &mut |obs| {
                    let z = encoder.forward(&obs_input(&obs.frames)).expect("encoder");
                    policy.forward(&z).expect("policy")[0]
                },
                s0,
                cfg.rollout_horizon,
            )?;
            for t in 0..traj.actions.len() {
                // rendered previous state by backstep, like the sampled
                // records: the stored observation is then a function of the
                // time-t state alone, so the next latent is a function of
                // (z, a) and the consistency error is pure fitting error.
                // (The live policy above still sees real frame history; the
                // two differ by O(dt^2).)
                let prev = backstep(&spec, traj.states[t]);
                let next = crate::envs::step(&spec, traj.states[t], traj.actions[t])?;
                buf.push(prev, traj.states[t], next, traj.actions[t]);
            }
        }

        // (ii) renormalize the latent basis, then margins from the grown
        // buffer, before any loss step
        whiten_latents(&mut store, &buf);
        restore_certificate(cfg, &mut store, &mut adam_lmi, iteration, RESTORE_CAP)?;
        let margins = refresh_margins(&store, &buf, cfg.lipschitz_bound);

        // (iii) total-loss steps on stratified minibatches, each paired with
        // one LMI step so the certificate holds throughout; half the loss
        // step size whenever the factorization is currently failing
        let mut last = StepLosses {
            total: f64::INFINITY,
            synthesis: 0.0,
            latent_model: 0.0,
            performance: 0.0,
        };
        let mut lmi_value = f64::NAN;
        let mut lmi_feasible = false;
        for _ in 0..cfg.main_steps_per_iter {
            let idx = stratified_indices(&buf, cfg.batch_size, &mut rng);
            let batch = build_batch(&buf, &idx);
            let lr_scale =
                anneal(cfg.warm_start_epochs + iteration) * if lmi_ok { 1.0 } else { 0.5 };
            last = total_loss_step(
                cfg, &mut store, &batch, &margins, &mut optims, lr_scale, true, iteration,
            )?;
            let (v, feas) = lmi_step_if_needed(cfg, &mut store, &mut adam_lmi, iteration)?;
            lmi_value = v;
            lmi_feasible = feas;
            lmi_ok = lmi_satisfied(lmi_feasible, lmi_value);
        }

        // (iv) extra LMI steps over the barrier weights and multipliers;
        // on the penalty path, keep stepping until feasibility is restored
        for _ in 0..cfg.lmi_steps_per_iter {
            let (v, feas) = lmi_step_if_needed(cfg, &mut store, &mut adam_lmi, iteration)?;
            lmi_value = v;
            lmi_feasible = feas;
        }
        if !lmi_feasible {
            let (v, feas) =
                restore_certificate(cfg, &mut store, &mut adam_lmi, iteration, RESTORE_CAP)?;
            lmi_value = v;
            lmi_feasible = feas;
        }
        lmi_ok = lmi_satisfied(lmi_feasible, lmi_value);

        let (q1, q2, q3) = count_violations(&store.online, &buf, &margins);
        debug_snapshot("iter", iteration, &store, &buf, &margins);
        let report = lmi_report(
            &store.online.barrier,
            &store.lambda(),
            cfg.lipschitz_bound,
        );
        log.records.push(LogRecord {
            iteration,
            l_total: last.total,
            l_synthesis: last.synthesis,
            l_latent_model: last.latent_model,
            l_performance: last.performance,
            l_lmi: lmi_value,
            psi: margins.psi,
            eta: margins.eta,
            eps_bar: margins.eps_bar,
            delta: margins.delta,
            q1_violations: q1,
            q2_violations: q2,
            q3_violations: q3,
            lmi_logdet: report.logdet,
            lmi_feasible: report.feasible,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        // exit condition: the hinge terms of the total loss are exactly zero
        // iff the margined conditions hold, so the gate is the violation
        // counts plus the certificate; the squared-error and regularizer
        // terms never reach zero and are excluded (the verify pass is the
        // true gate, the tolerance covers the bootstrapped synthesis hinge)
        if report.satisfied && q1 + q2 + q3 == 0 {
            let synth = full_buffer_synthesis_hinge(&store, &buf, &margins);
            if synth <= cfg.tolerance {
                converged = true;
                break;
            }
        }
    }

    let final_margins = refresh_margins(&store, &buf, cfg.lipschitz_bound);
    let checkpoint = Checkpoint {
        version: 1,
        env_id: spec.id.to_string(),
        latent_dim: cfg.latent_dim,
        lipschitz_bound: cfg.lipschitz_bound,
        margins: final_margins,
        seed: cfg.seed,
        converged,
        store,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        converged,
        buffer: buf,
    })
}
