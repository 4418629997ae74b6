//! Training losses.
//!
//! Four pieces, each a scalar on the tape:
//!
//! - [`latent_model_loss`]: hinge losses pushing the barrier below `-psi` on
//!   safe latents and above `+psi` on unsafe ones, plus a squared one-step
//!   latent prediction error against the frozen target encoder.
//! - [`lmi_loss`]: `-logdet(M)` over the Lipschitz certificate matrix built
//!   by [`build_lmi`]; `M` positive semidefinite certifies the prescribed
//!   Lipschitz constant of the barrier network.
//! - [`synthesis_loss`]: hinge on the margined one-step decrease condition
//!   of the barrier under the learned dynamics and the current policy.
//! - [`performance_loss`]: mean distance between the policy and a baseline
//!   reference action.
//!
//! The weighted total combines everything except the LMI term, which is
//! optimized in its own alternating step over the barrier weights and the
//! multipliers.

use crate::nets::{Mlp, MlpTapeParams};
use crate::tensor::{pd_deficit, Tape, TensorError, TensorRef};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weight {name} must be positive, got {value}")]
    NonPositiveWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Relative weights: `xi*` inside the latent-model loss, `lam*` combining
/// the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    pub lam1: f64,
    pub lam2: f64,
    pub lam3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // safety terms dominate; the performance term is a light regularizer
        LossWeights {
            xi1: 1.0,
            xi2: 1.0,
            xi3: 1.0,
            lam1: 1.0,
            lam2: 0.5,
            lam3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let fields = [
            ("xi1", self.xi1),
            ("xi2", self.xi2),
            ("xi3", self.xi3),
            ("lam1", self.lam1),
            ("lam2", self.lam2),
            ("lam3", self.lam3),
        ];
        for (name, value) in fields {
            if !(value > 0.0) {
                return Err(LossError::NonPositiveWeight { name, value });
            }
        }
        Ok(())
    }
}

/// One minibatch of encoder inputs, already flattened from frames.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub safe_obs: Vec<Vec<f64>>,
    pub unsafe_obs: Vec<Vec<f64>>,
    /// all transitions: current observation, stored action, next observation
    pub d_obs: Vec<Vec<f64>>,
    pub d_actions: Vec<f64>,
    pub d_obs_next: Vec<Vec<f64>>,
}

/// Stack row vectors into one constant (no-gradient) matrix on the tape.
pub fn stack_rows(tape: &mut Tape, rows: &[Vec<f64>]) -> TensorRef {
    assert!(!rows.is_empty());
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        assert_eq!(r.len(), cols, "ragged batch rows");
        data.extend_from_slice(r);
    }
    tape.constant(rows.len(), cols, data)
}

/// Latent-model loss: barrier hinges on labeled latents plus the squared
/// consistency error of the learned latent dynamics, weighted by
/// (`xi1`, `xi2`, `xi3`). The next-step target `E_target(O')` is a frozen
/// constant and carries no gradient. Empty batch components contribute zero.
pub fn latent_model_loss(
    tape: &mut Tape,
    encoder: &MlpTapeParams,
    dynamics: &MlpTapeParams,
    barrier: &MlpTapeParams,
    target_encoder: &Mlp,
    batch: &Batch,
    psi: f64,
    w: &LossWeights,
) -> TensorRef {
    assert!(psi >= 0.0, "psi must be nonnegative");
    let mut total = tape.scalar(0.0);
    if !batch.safe_obs.is_empty() {
        let x = stack_rows(tape, &batch.safe_obs);
        let z = encoder.forward(tape, x);
        let b = barrier.forward(tape, z);
        let shifted = tape.add_scalar(b, psi);
        let hinged = tape.hinge(shifted);
        let s = tape.sum(hinged);
        let s = tape.scale(s, w.xi1);
        total = tape.add(total, s);
    }
    if !batch.unsafe_obs.is_empty() {
        let x = stack_rows(tape, &batch.unsafe_obs);
        let z = encoder.forward(tape, x);
        let b = barrier.forward(tape, z);
        let nb = tape.neg(b);
        let shifted = tape.add_scalar(nb, psi);
        let hinged = tape.hinge(shifted);
        let s = tape.sum(hinged);
        let s = tape.scale(s, w.xi2);
        total = tape.add(total, s);
    }
    if !batch.d_obs.is_empty() {
        let x = stack_rows(tape, &batch.d_obs);
        let z = encoder.forward(tape, x);
        let actions: Vec<Vec<f64>> = batch.d_actions.iter().map(|&a| vec![a]).collect();
        let a = stack_rows(tape, &actions);
        let za = tape.concat_cols(z, a);
        let pred = dynamics.forward(tape, za);
        let targets: Vec<Vec<f64>> = batch
            .d_obs_next
            .iter()
            .map(|o| target_encoder.forward(o).expect("encoder input size"))
            .collect();
        let t = stack_rows(tape, &targets);
        let diff = tape.sub(t, pred);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        let s = tape.scale(s, w.xi3);
        total = tape.add(total, s);
    }
    total
}

/// Assemble the symmetric Lipschitz certificate matrix for a feed-forward
/// barrier with slope-restricted activations.
///
/// With layer weights `W_0..W_l` (hidden pre-activations `W_{r-1} h_{r-1}`),
/// multipliers `lambda_r` (one per hidden neuron of layer `r`), and slopes
/// `(alpha, beta)`, the matrix over coordinates (input, h_1..h_l, output) is
///
/// ```text
/// M = 2*alpha*beta * A' Lam A  -  (alpha+beta) * (A' Lam B + B' Lam A)
///     + 2 * B' Lam B  +  Q
/// ```
///
/// where `A = blockdiag(W_0..W_{l-1})` padded by a trailing zero block,
/// `B = [0 I]`, and `Q` carries `L^2 I` on the input block, `-W_l'` between
/// the last hidden block and the output block, and `I` on the output block.
/// `M >= 0` certifies that the network is `L`-Lipschitz.
pub fn build_lmi(
    tape: &mut Tape,
    weights: &[TensorRef],
    lambdas: &[TensorRef],
    alpha: f64,
    beta: f64,
    l_bound: f64,
) -> Result<TensorRef, TensorError> {
    let l = weights.len() - 1; // number of hidden layers
    if l == 0 {
        return Err(TensorError::Invalid(
            "lmi assembly needs at least one hidden layer".into(),
        ));
    }
    if lambdas.len() != l {
        return Err(TensorError::Invalid(format!(
            "expected {l} multiplier vectors, got {}",
            lambdas.len()
        )));
    }
    // widths n_0 .. n_l, n_out from the weight shapes
    let mut widths = vec![tape.shape(weights[0]).1];
    for w in weights.iter() {
        widths.push(tape.shape(*w).0);
    }
    for r in 1..=l {
        let (lr, lc) = tape.shape(lambdas[r - 1]);
        if lr != widths[r] || lc != 1 {
            return Err(TensorError::Invalid(format!(
                "multiplier {r} is {lr}x{lc}, expected {}x1",
                widths[r]
            )));
        }
        if tape.shape(weights[r]).1 != widths[r] {
            return Err(TensorError::Invalid(format!(
                "layer {r} input width {} does not match previous output {}",
                tape.shape(weights[r]).1,
                widths[r]
            )));
        }
    }
    let m: usize = widths.iter().sum();
    let mut offsets = vec![0usize; widths.len() + 1];
    for i in 0..widths.len() {
        offsets[i + 1] = offsets[i] + widths[i];
    }

    let mut acc = tape.constant(m, m, vec![0.0; m * m]);
    for r in 1..=l {
        let w = weights[r - 1];
        let lam = lambdas[r - 1];
        let wt = tape.transpose(w);
        let wt_lam = tape.scale_cols(wt, lam); // W' diag(lambda)
        // off-diagonal coupling between blocks r-1 and r
        let cpl = tape.scale(wt_lam, -(alpha + beta));
        let placed = tape.place(cpl, m, m, offsets[r - 1], offsets[r]);
        acc = tape.add(acc, placed);
        let cpl_t = tape.transpose(cpl);
        let placed = tape.place(cpl_t, m, m, offsets[r], offsets[r - 1]);
        acc = tape.add(acc, placed);
        // 2 diag(lambda) on block r
        let d = tape.diag(lam);
        let d2 = tape.scale(d, 2.0);
        let placed = tape.place(d2, m, m, offsets[r], offsets[r]);
        acc = tape.add(acc, placed);
        // quadratic term vanishes for (0, 1)-slope activations
        if alpha * beta != 0.0 {
            let q = tape.matmul(wt_lam, w)?;
            let q = tape.scale(q, 2.0 * alpha * beta);
            let placed = tape.place(q, m, m, offsets[r - 1], offsets[r - 1]);
            acc = tape.add(acc, placed);
        }
    }
    // L^2 I on the input block
    let n0 = widths[0];
    let mut eye0 = vec![0.0; n0 * n0];
    for i in 0..n0 {
        eye0[i * n0 + i] = l_bound * l_bound;
    }
    let eye0 = tape.constant(n0, n0, eye0);
    let placed = tape.place(eye0, m, m, 0, 0);
    acc = tape.add(acc, placed);
    // -W_l' between the last hidden block and the output block
    let wlt = tape.transpose(weights[l]);
    let nwlt = tape.neg(wlt);
    let placed = tape.place(nwlt, m, m, offsets[l], offsets[l + 1]);
    acc = tape.add(acc, placed);
    let nwl = tape.neg(weights[l]);
    let placed = tape.place(nwl, m, m, offsets[l + 1], offsets[l]);
    acc = tape.add(acc, placed);
    // I on the output block
    let no = widths[l + 1];
    let mut eye_out = vec![0.0; no * no];
    for i in 0..no {
        eye_out[i * no + i] = 1.0;
    }
    let eye_out = tape.constant(no, no, eye_out);
    let placed = tape.place(eye_out, m, m, offsets[l + 1], offsets[l + 1]);
    acc = tape.add(acc, placed);
    // numerically exact symmetrization
    let acc_t = tape.transpose(acc);
    let s = tape.add(acc, acc_t);
    Ok(tape.scale(s, 0.5))
}

/// Fixed base penalty when the certificate matrix is not positive definite.
pub const LMI_PENALTY: f64 = 1e3;

#[derive(Debug, Clone, Copy)]
pub struct LmiLoss {
    pub loss: TensorRef,
    /// true iff the factorization of M succeeded
    pub feasible: bool,
}

/// `-logdet(M)` when `M` is positive definite. Otherwise a large finite
/// penalty (`LMI_PENALTY` plus the magnitude of the most negative pivot)
/// whose gradient comes from `-logdet(M + sigma I)` on a shifted copy, so
/// the optimizer still gets a direction back toward the feasible cone.
pub fn lmi_loss(tape: &mut Tape, m: TensorRef) -> LmiLoss {
    match tape.logdet(m) {
        Ok(ld) => LmiLoss {
            loss: tape.neg(ld),
            feasible: true,
        },
        Err(TensorError::NotPd { .. }) => {
            let (n, _) = tape.shape(m);
            let deficit = pd_deficit(tape.value(m), n)
                .map(|p| p.abs())
                .unwrap_or(1.0);
            let mut sigma = 2.0 * deficit + 1e-6;
            for _ in 0..64 {
                let mut eye = vec![0.0; n * n];
                for i in 0..n {
                    eye[i * n + i] = sigma;
                }
                let eye = tape.constant(n, n, eye);
                let shifted = tape.add(m, eye);
                if let Ok(ld) = tape.logdet(shifted) {
                    let nld = tape.neg(ld);
                    // report the penalty as the value; the additive constant
                    // leaves the gradient of -logdet(M + sigma I) intact
                    let offset = LMI_PENALTY + deficit - tape.scalar_value(nld);
                    return LmiLoss {
                        loss: tape.add_scalar(nld, offset),
                        feasible: false,
                    };
                }
                sigma *= 4.0;
            }
            unreachable!("shift failed to make the certificate matrix PD");
        }
        Err(e) => panic!("lmi_loss: {e}"),
    }
}

/// The exit condition treats the certificate as satisfied only when the
/// factorization succeeds and `-logdet(M) <= 0` (i.e. `det M >= 1`), which
/// is strictly stronger than bare positive-definiteness.
pub fn lmi_satisfied(feasible: bool, loss_value: f64) -> bool {
    feasible && loss_value <= 0.0
}

/// Split a flat multiplier vector into per-hidden-layer segments.
pub fn split_lambda(lambda: &[f64], hidden_widths: &[usize]) -> Vec<Vec<f64>> {
    assert_eq!(lambda.len(), hidden_widths.iter().sum::<usize>());
    let mut out = Vec::with_capacity(hidden_widths.len());
    let mut start = 0;
    for &w in hidden_widths {
        out.push(lambda[start..start + w].to_vec());
        start += w;
    }
    out
}

/// Tape-free evaluation of the certificate for verification and logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmiReport {
    pub feasible: bool,
    /// logdet(M) when feasible, NaN otherwise
    pub logdet: f64,
    pub satisfied: bool,
}

pub fn lmi_report(barrier: &Mlp, lambda: &[f64], l_bound: f64) -> LmiReport {
    let mut tape = Tape::new();
    let params = barrier.insert(&mut tape, false);
    let (alpha, beta) = barrier.spec.hidden.slopes();
    let lambdas: Vec<TensorRef> = split_lambda(lambda, barrier.spec.hidden_widths())
        .into_iter()
        .map(|seg| {
            let n = seg.len();
            tape.constant(n, 1, seg)
        })
        .collect();
    let m = build_lmi(&mut tape, &params.weights, &lambdas, alpha, beta, l_bound)
        .expect("barrier widths are self-consistent");
    match tape.logdet(m) {
        Ok(ld) => {
            let v = tape.scalar_value(ld);
            LmiReport {
                feasible: true,
                logdet: v,
                satisfied: lmi_satisfied(true, -v),
            }
        }
        Err(_) => LmiReport {
            feasible: false,
            logdet: f64::NAN,
            satisfied: false,
        },
    }
}

/// Margined one-step decrease loss. For each transition observation `O`
/// with `z = E(O)`:
///
/// ```text
/// max(0, B_target(d(E_target(O), pi(z))) + eta - B(z) + psi)
/// ```
///
/// Gradients flow through the online encoder, dynamics, policy, and
/// barrier; both target networks are frozen (`target_barrier` must be
/// inserted with `trainable = false` — its input still carries gradient).
pub fn synthesis_loss(
    tape: &mut Tape,
    encoder: &MlpTapeParams,
    dynamics: &MlpTapeParams,
    policy: &MlpTapeParams,
    barrier: &MlpTapeParams,
    target_encoder: &Mlp,
    target_barrier: &MlpTapeParams,
    d_obs: &[Vec<f64>],
    psi: f64,
    eta: f64,
) -> TensorRef {
    assert!(psi >= 0.0 && eta >= 0.0);
    if d_obs.is_empty() {
        return tape.scalar(0.0);
    }
    let x = stack_rows(tape, d_obs);
    let z = encoder.forward(tape, x);
    let a = policy.forward(tape, z);
    let frozen: Vec<Vec<f64>> = d_obs
        .iter()
        .map(|o| target_encoder.forward(o).expect("encoder input size"))
        .collect();
    let z_frozen = stack_rows(tape, &frozen);
    let za = tape.concat_cols(z_frozen, a);
    let next = dynamics.forward(tape, za);
    let b_next = target_barrier.forward(tape, next);
    let b_now = barrier.forward(tape, z);
    let diff = tape.sub(b_next, b_now);
    let shifted = tape.add_scalar(diff, eta + psi);
    let hinged = tape.hinge(shifted);
    tape.sum(hinged)
}

/// Mean distance between the policy's action and a baseline reference,
/// evaluated at the current latents.
pub fn performance_loss(
    tape: &mut Tape,
    encoder: &MlpTapeParams,
    policy: &MlpTapeParams,
    obs: &[Vec<f64>],
    pi_user: &dyn Fn(&[f64]) -> Vec<f64>,
) -> TensorRef {
    if obs.is_empty() {
        return tape.scalar(0.0);
    }
    let x = stack_rows(tape, obs);
    let z = encoder.forward(tape, x);
    let a = policy.forward(tape, z);
    let latent_dim = tape.shape(z).1;
    let z_vals = tape.value(z).to_vec();
    let refs: Vec<Vec<f64>> = z_vals
        .chunks(latent_dim)
        .map(|row| pi_user(row))
        .collect();
    let r = stack_rows(tape, &refs);
    let diff = tape.sub(a, r);
    let norms = tape.row_l2(diff);
    let s = tape.sum(norms);
    tape.scale(s, 1.0 / obs.len() as f64)
}

/// Weighted total of the three policy-synthesis losses. The LMI loss is
/// deliberately not part of this sum; it is minimized in its own step.
pub fn total_loss(
    tape: &mut Tape,
    synthesis: TensorRef,
    latent_model: TensorRef,
    performance: Option<TensorRef>,
    w: &LossWeights,
) -> TensorRef {
    let a = tape.scale(synthesis, w.lam1);
    let b = tape.scale(latent_model, w.lam2);
    let mut total = tape.add(a, b);
    if let Some(p) = performance {
        let c = tape.scale(p, w.lam3);
        total = tape.add(total, c);
    }
    total
}
