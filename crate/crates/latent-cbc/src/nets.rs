//! The four networks of the synthesis pipeline — encoder, latent dynamics,
//! barrier, policy — their slow-moving target copies, the positive LMI
//! multipliers, and binary checkpoint persistence.
//!
//! All hidden activations share the slope pair (alpha, beta) = (0, 1), which
//! is what the Lipschitz certificate matrix assumes. The barrier network must
//! stay plain feed-forward (no skip connections); everything here is.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::Margins;
use crate::tensor::{Tape, TensorRef};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("input size mismatch: expected {expected}, got {got}")]
    InputSize { expected: usize, got: usize },
}

/// Hidden-layer activation. Both choices have minimum slope 0 and maximum
/// slope 1, so they share one (alpha, beta) pair for the LMI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    /// (minimum, maximum) slope of the activation.
    pub fn slopes(self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Linear,
    /// Squash into the closed interval [lo, hi] via a scaled tanh.
    TanhScaled { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Layer widths from input to output, at least one hidden layer.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
    /// Skip connection adding the first `output_dim` input coordinates to
    /// the output, so the net models a one-step residual. Used by the
    /// latent dynamics, whose output is near its latent input.
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputActivation) -> Self {
        assert!(widths.len() >= 3, "need at least one hidden layer");
        assert!(widths.iter().all(|&w| w >= 1), "widths must be >= 1");
        MlpSpec { widths, hidden, output, residual: false }
    }

    pub fn with_residual(mut self) -> Self {
        assert!(
            self.output_dim() <= self.input_dim(),
            "residual skip needs output_dim <= input_dim"
        );
        assert!(
            matches!(self.output, OutputActivation::Linear),
            "residual skip needs a linear output"
        );
        self.residual = true;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Dense feed-forward network. Weight matrices are row-major
/// (output x input); biases are plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform Xavier initialization, optionally shrunk by `gain` (the
    /// barrier starts small so the LMI begins feasible).
    pub fn init<R: Rng>(spec: MlpSpec, gain: f64, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        let mut net = Mlp { spec, weights, biases };
        // squashed outputs start in the linear region of the tanh; a
        // saturated output layer at initialization has a dead gradient
        if matches!(net.spec.output, OutputActivation::TanhScaled { .. }) {
            let last = net.weights.last_mut().expect("layers");
            for w in last.iter_mut() {
                *w *= 0.1;
            }
        }
        net
    }

    pub fn zeroed(spec: MlpSpec) -> Self {
        let weights = (0..spec.n_layers())
            .map(|l| vec![0.0; spec.widths[l] * spec.widths[l + 1]])
            .collect();
        let biases = (0..spec.n_layers())
            .map(|l| vec![0.0; spec.widths[l + 1]])
            .collect();
        Mlp { spec, weights, biases }
    }

    /// Plain forward pass without a tape (rollouts, verification probes).
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        if input.len() != self.spec.input_dim() {
            return Err(NetError::InputSize {
                expected: self.spec.input_dim(),
                got: input.len(),
            });
        }
        let mut h = input.to_vec();
        let last = self.spec.n_layers() - 1;
        for l in 0..=last {
            let (n_in, n_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = b[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (wi, hi) in row.iter().zip(&h) {
                    s += wi * hi;
                }
                next[o] = s;
            }
            if l < last {
                match self.spec.hidden {
                    Activation::Relu => next.iter_mut().for_each(|x| *x = x.max(0.0)),
                    Activation::Tanh => next.iter_mut().for_each(|x| *x = x.tanh()),
                }
            } else if let OutputActivation::TanhScaled { lo, hi } = self.spec.output {
                next.iter_mut()
                    .for_each(|x| *x = lo + (hi - lo) * (x.tanh() + 1.0) * 0.5);
            }
            h = next;
        }
        if self.spec.residual {
            for (o, v) in h.iter_mut().enumerate() {
                *v += input[o];
            }
        }
        Ok(h)
    }

    /// Insert this network's parameters onto a tape. `trainable` controls
    /// whether gradients accumulate (target copies are inserted frozen).
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> MlpTapeParams {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..self.spec.n_layers() {
            let (n_in, n_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let w = if trainable {
                tape.var(n_out, n_in, self.weights[l].clone())
            } else {
                tape.constant(n_out, n_in, self.weights[l].clone())
            };
            let b = if trainable {
                tape.var(1, n_out, self.biases[l].clone())
            } else {
                tape.constant(1, n_out, self.biases[l].clone())
            };
            weights.push(w);
            biases.push(b);
        }
        MlpTapeParams {
            spec: self.spec.clone(),
            weights,
            biases,
        }
    }
}

/// Tape handles for one network's parameters; batched forward runs on rows.
#[derive(Debug, Clone)]
pub struct MlpTapeParams {
    pub spec: MlpSpec,
    pub weights: Vec<TensorRef>,
    pub biases: Vec<TensorRef>,
}

impl MlpTapeParams {
    /// Batched forward: `x` is (batch x input_dim), output (batch x out_dim).
    pub fn forward(&self, tape: &mut Tape, x: TensorRef) -> TensorRef {
        let skip = if self.spec.residual {
            Some(tape.slice_cols(x, 0, self.spec.output_dim()))
        } else {
            None
        };
        let mut h = x;
        let last = self.spec.n_layers() - 1;
        for l in 0..=last {
            let wt = tape.transpose(self.weights[l]);
            let z = tape.matmul(h, wt).expect("layer width mismatch");
            let z = tape.add_row_broadcast(z, self.biases[l]);
            h = if l < last {
                match self.spec.hidden {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            } else {
                match self.spec.output {
                    OutputActivation::Linear => z,
                    OutputActivation::TanhScaled { lo, hi } => tape.tanh_scaled(z, lo, hi),
                }
            };
        }
        match skip {
            Some(s) => tape.add(h, s),
            None => h,
        }
    }
}

/// The four online (or target) networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub barrier: Mlp,
    pub policy: Mlp,
}

impl Nets {
    fn as_array(&self) -> [&Mlp; 4] {
        [&self.encoder, &self.dynamics, &self.barrier, &self.policy]
    }

    fn as_array_mut(&mut self) -> [&mut Mlp; 4] {
        [
            &mut self.encoder,
            &mut self.dynamics,
            &mut self.barrier,
            &mut self.policy,
        ]
    }
}

/// All trainable state: online parameters, target copies, LMI multipliers
/// (stored as exponents so they stay strictly positive), and the Polyak rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub online: Nets,
    pub target: Nets,
    /// log of the diagonal LMI multiplier, one entry per hidden neuron of
    /// the barrier network.
    pub lambda_log: Vec<f64>,
    pub rho: f64,
}

impl ParamStore {
    pub fn new<R: Rng>(
        encoder: MlpSpec,
        dynamics: MlpSpec,
        barrier: MlpSpec,
        policy: MlpSpec,
        rho: f64,
        rng: &mut R,
    ) -> Self {
        assert!(rho > 0.0 && rho < 1.0, "rho must be in (0,1)");
        let n_lambda: usize = barrier.hidden_widths().iter().sum();
        let online = Nets {
            encoder: Mlp::init(encoder, 1.0, rng),
            dynamics: Mlp::init(dynamics, 1.0, rng),
            // small barrier init keeps the Lipschitz LMI feasible from step 0
            barrier: Mlp::init(barrier, 0.3, rng),
            policy: Mlp::init(policy, 1.0, rng),
        };
        let target = online.clone();
        ParamStore {
            online,
            target,
            lambda_log: vec![0.0; n_lambda],
            rho,
        }
    }

    /// Latent dimension, read off the encoder output.
    pub fn latent_dim(&self) -> usize {
        self.online.encoder.spec.output_dim()
    }

    /// The positive diagonal multipliers (exp of the free parameters).
    pub fn lambda(&self) -> Vec<f64> {
        self.lambda_log.iter().map(|x| x.exp()).collect()
    }

    /// theta_minus <- rho * theta_minus + (1 - rho) * theta, elementwise
    /// over every target network.
    pub fn polyak_update(&mut self, rho: f64) {
        assert!((0.0..1.0).contains(&rho), "rho must be in [0,1)");
        let online = self.online.as_array().map(|m| m.clone());
        for (t, o) in self.target.as_array_mut().into_iter().zip(online.iter()) {
            for (tw, ow) in t.weights.iter_mut().zip(&o.weights) {
                for (a, b) in tw.iter_mut().zip(ow) {
                    *a = rho * *a + (1.0 - rho) * b;
                }
            }
            for (tb, ob) in t.biases.iter_mut().zip(&o.biases) {
                for (a, b) in tb.iter_mut().zip(ob) {
                    *a = rho * *a + (1.0 - rho) * b;
                }
            }
        }
    }
}

/// Metadata + parameters persisted to disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub env_id: String,
    pub latent_dim: usize,
    pub lipschitz_bound: f64,
    pub margins: Margins,
    pub seed: u64,
    pub converged: bool,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, self.version);
        put_str(&mut buf, &self.env_id);
        put_u32(&mut buf, self.latent_dim as u32);
        put_f64(&mut buf, self.lipschitz_bound);
        put_f64(&mut buf, self.margins.psi);
        put_f64(&mut buf, self.margins.eta);
        put_f64(&mut buf, self.margins.eps_bar);
        put_f64(&mut buf, self.margins.delta);
        put_f64(&mut buf, self.margins.lipschitz_bound);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.push(self.converged as u8);
        put_f64(&mut buf, self.store.rho);
        let nets = [
            ("encoder", &self.store.online.encoder),
            ("dynamics", &self.store.online.dynamics),
            ("barrier", &self.store.online.barrier),
            ("policy", &self.store.online.policy),
            ("encoder_target", &self.store.target.encoder),
            ("dynamics_target", &self.store.target.dynamics),
            ("barrier_target", &self.store.target.barrier),
            ("policy_target", &self.store.target.policy),
        ];
        put_u32(&mut buf, nets.len() as u32);
        for (name, mlp) in nets {
            put_str(&mut buf, name);
            put_u32(&mut buf, mlp.spec.widths.len() as u32);
            for &w in &mlp.spec.widths {
                put_u32(&mut buf, w as u32);
            }
            buf.push(match mlp.spec.hidden {
                Activation::Relu => 0,
                Activation::Tanh => 1,
            });
            match mlp.spec.output {
                OutputActivation::Linear => {
                    buf.push(0);
                    put_f64(&mut buf, 0.0);
                    put_f64(&mut buf, 0.0);
                }
                OutputActivation::TanhScaled { lo, hi } => {
                    buf.push(1);
                    put_f64(&mut buf, lo);
                    put_f64(&mut buf, hi);
                }
            }
            buf.push(mlp.spec.residual as u8);
            put_u32(&mut buf, mlp.weights.len() as u32);
            for l in 0..mlp.weights.len() {
                put_u32(&mut buf, mlp.spec.widths[l + 1] as u32);
                put_u32(&mut buf, mlp.spec.widths[l] as u32);
                for &v in &mlp.weights[l] {
                    put_f64(&mut buf, v);
                }
                put_u32(&mut buf, mlp.biases[l].len() as u32);
                for &v in &mlp.biases[l] {
                    put_f64(&mut buf, v);
                }
            }
        }
        put_u32(&mut buf, self.store.lambda_log.len() as u32);
        for &v in &self.store.lambda_log {
            put_f64(&mut buf, v);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::BadVersion(version));
        }
        let env_id = r.string()?;
        let latent_dim = r.u32()? as usize;
        let lipschitz_bound = r.f64()?;
        let psi = r.f64()?;
        let eta = r.f64()?;
        let eps_bar = r.f64()?;
        let delta = r.f64()?;
        let margins_lb = r.f64()?;
        let seed = u64::from_le_bytes(
            r.take(8)?
                .try_into()
                .map_err(|_| NetError::Corrupt("seed".into()))?,
        );
        let converged = r.u8()? != 0;
        let rho = r.f64()?;
        let n_nets = r.u32()? as usize;
        if n_nets != 8 {
            return Err(NetError::Corrupt(format!("expected 8 networks, got {n_nets}")));
        }
        let mut mlps = Vec::with_capacity(8);
        for _ in 0..8 {
            let _name = r.string()?;
            let n_widths = r.u32()? as usize;
            if n_widths < 3 || n_widths > 64 {
                return Err(NetError::Corrupt("implausible layer count".into()));
            }
            let mut widths = Vec::with_capacity(n_widths);
            for _ in 0..n_widths {
                widths.push(r.u32()? as usize);
            }
            let hidden = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                t => return Err(NetError::Corrupt(format!("bad activation tag {t}"))),
            };
            let out_tag = r.u8()?;
            let lo = r.f64()?;
            let hi = r.f64()?;
            let output = match out_tag {
                0 => OutputActivation::Linear,
                1 => OutputActivation::TanhScaled { lo, hi },
                t => return Err(NetError::Corrupt(format!("bad output tag {t}"))),
            };
            let residual = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(NetError::Corrupt(format!("bad residual tag {t}"))),
            };
            let n_layers = r.u32()? as usize;
            if n_layers != widths.len() - 1 {
                return Err(NetError::Corrupt("layer count mismatch".into()));
            }
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for l in 0..n_layers {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                if rows != widths[l + 1] || cols != widths[l] {
                    return Err(NetError::Corrupt("weight shape mismatch".into()));
                }
                let mut w = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    w.push(r.f64()?);
                }
                weights.push(w);
                let blen = r.u32()? as usize;
                if blen != widths[l + 1] {
                    return Err(NetError::Corrupt("bias shape mismatch".into()));
                }
                let mut b = Vec::with_capacity(blen);
                for _ in 0..blen {
                    b.push(r.f64()?);
                }
                biases.push(b);
            }
            mlps.push(Mlp {
                spec: MlpSpec { widths, hidden, output, residual },
                weights,
                biases,
            });
        }
        let n_lambda = r.u32()? as usize;
        let mut lambda_log = Vec::with_capacity(n_lambda);
        for _ in 0..n_lambda {
            lambda_log.push(r.f64()?);
        }
        let mut it = mlps.into_iter();
        let online = Nets {
            encoder: it.next().unwrap(),
            dynamics: it.next().unwrap(),
            barrier: it.next().unwrap(),
            policy: it.next().unwrap(),
        };
        let target = Nets {
            encoder: it.next().unwrap(),
            dynamics: it.next().unwrap(),
            barrier: it.next().unwrap(),
            policy: it.next().unwrap(),
        };
        Ok(Checkpoint {
            version,
            env_id,
            latent_dim,
            lipschitz_bound,
            margins: Margins {
                lipschitz_bound: margins_lb,
                eps_bar,
                delta,
                psi,
                eta,
            },
            seed,
            converged,
            store: ParamStore {
                online,
                target,
                lambda_log,
                rho,
            },
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::Corrupt("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.u32()? as usize;
        if n > 1 << 16 {
            return Err(NetError::Corrupt("implausible string length".into()));
        }
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| NetError::Corrupt("bad utf8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamStore::new(
            MlpSpec::new(vec![8, 6, 2], Activation::Relu, OutputActivation::Linear),
            MlpSpec::new(vec![3, 6, 2], Activation::Relu, OutputActivation::Linear),
            MlpSpec::new(vec![2, 4, 4, 1], Activation::Relu, OutputActivation::Linear),
            MlpSpec::new(
                vec![2, 6, 1],
                Activation::Tanh,
                OutputActivation::TanhScaled { lo: -10.0, hi: 10.0 },
            ),
            0.995,
            &mut rng,
        )
    }

    #[test]
    fn forward_is_deterministic() {
        let store = tiny_store(3);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.13 - 0.5).collect();
        let a = store.online.encoder.forward(&x).unwrap();
        let b = store.online.encoder.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = MlpSpec::new(vec![4, 3, 2], Activation::Relu, OutputActivation::Linear);
        let mut mlp = Mlp::zeroed(spec);
        mlp.biases[1] = vec![0.7, -0.2];
        let out = mlp.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out, vec![0.7, -0.2]);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let store = tiny_store(4);
        assert!(matches!(
            store.online.encoder.forward(&[0.0; 5]),
            Err(NetError::InputSize { .. })
        ));
    }

    #[test]
    fn policy_output_squashed() {
        let store = tiny_store(5);
        for i in 0..50 {
            let z = vec![(i as f64 - 25.0) * 3.0, (i as f64) * 2.0];
            let a = store.online.policy.forward(&z).unwrap();
            assert!(a[0] >= -10.0 && a[0] <= 10.0);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let store = tiny_store(6);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let plain = store.online.encoder.forward(&x).unwrap();
        let mut tape = Tape::new();
        let params = store.online.encoder.insert(&mut tape, true);
        let xin = tape.constant(1, 8, x);
        let out = params.forward(&mut tape, xin);
        let taped = tape.value(out).to_vec();
        for (a, b) in plain.iter().zip(&taped) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn residual_adds_input_prefix_on_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec::new(vec![3, 6, 2], Activation::Relu, OutputActivation::Linear);
        let base = Mlp::init(spec, 1.0, &mut rng);
        let mut res = base.clone();
        res.spec = res.spec.clone().with_residual();

        let x = vec![0.4, -1.3, 0.9];
        let plain_base = base.forward(&x).unwrap();
        let plain_res = res.forward(&x).unwrap();
        assert!((plain_res[0] - (plain_base[0] + x[0])).abs() < 1e-14);
        assert!((plain_res[1] - (plain_base[1] + x[1])).abs() < 1e-14);

        let mut tape = Tape::new();
        let params = res.insert(&mut tape, true);
        let xin = tape.constant(1, 3, x);
        let out = params.forward(&mut tape, xin);
        let taped = tape.value(out).to_vec();
        for (a, b) in plain_res.iter().zip(&taped) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn polyak_rho_zero_copies_online() {
        let mut store = tiny_store(7);
        for w in store.target.encoder.weights[0].iter_mut() {
            *w += 0.5;
        }
        store.polyak_update(0.0);
        assert_eq!(store.target, store.online);
    }

    #[test]
    fn polyak_geometric_decay() {
        let mut store = tiny_store(8);
        // freeze online, measure contraction of the gap
        let gap = |s: &ParamStore| -> f64 {
            s.online.encoder.weights[0]
                .iter()
                .zip(&s.target.encoder.weights[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        // perturb target so the gap starts nonzero
        for w in store.target.encoder.weights[0].iter_mut() {
            *w += 1.0;
        }
        let g0 = gap(&store);
        store.polyak_update(0.5);
        let g1 = gap(&store);
        store.polyak_update(0.5);
        let g2 = gap(&store);
        assert!((g1 - 0.5 * g0).abs() < 1e-12);
        assert!((g2 - 0.25 * g0).abs() < 1e-12);
    }

    #[test]
    fn polyak_scalar_formula() {
        // rho = 0.995, target 0, online 1 -> target becomes 0.005
        let mut store = tiny_store(9);
        store.online.encoder.weights[0][0] = 1.0;
        store.target.encoder.weights[0][0] = 0.0;
        store.polyak_update(0.995);
        assert!((store.target.encoder.weights[0][0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn lambda_strictly_positive() {
        let mut store = tiny_store(10);
        store.lambda_log = vec![-30.0, 0.0, 5.0, -1.0, 2.0, 0.1, -4.0, 3.0];
        assert!(store.lambda().iter().all(|&l| l > 0.0));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sldc");
        let store = tiny_store(11);
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            env_id: "pendulum".into(),
            latent_dim: 2,
            lipschitz_bound: 2.0,
            margins: Margins {
                lipschitz_bound: 2.0,
                eps_bar: 0.1,
                delta: 0.05,
                psi: 0.2,
                eta: 0.1,
            },
            seed: 42,
            converged: false,
            store,
        };
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.env_id, ck.env_id);
        assert_eq!(loaded.seed, ck.seed);
        assert_eq!(loaded.store, ck.store);
        assert_eq!(loaded.margins.psi.to_bits(), ck.margins.psi.to_bits());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sldc");
        let store = tiny_store(12);
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            env_id: "pendulum".into(),
            latent_dim: 2,
            lipschitz_bound: 2.0,
            margins: Margins::zero(2.0),
            seed: 1,
            converged: false,
            store,
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sldc");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(NetError::BadMagic)));
    }
}
