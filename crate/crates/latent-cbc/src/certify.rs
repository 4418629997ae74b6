//! Formal-verification surface: certified margins, covering radius, latent
//! consistency error, Lipschitz probes, and the margined-condition verifier.
//!
//! The chain is: the dataset's latent covering radius `eps_bar` and the
//! worst one-step latent prediction error `delta` are measured, then the
//! margins `psi = L_B * eps_bar` and `eta = L_B * delta` make the sampled
//! barrier conditions extend to the whole covered region (`L_B` is the
//! certified Lipschitz bound of the barrier network).

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::envs::{
    label, obs_input, rollout, sample_labeled_state, DataBuffer, EnvError, Label,
};
use crate::losses::{lmi_report, LmiReport};
use crate::nets::{Checkpoint, Mlp, NetError, Nets};

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("environment mismatch: checkpoint is {checkpoint}, data is {data}")]
    EnvMismatch { checkpoint: String, data: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// The certified quantities of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    /// prescribed Lipschitz bound of the barrier network
    pub lipschitz_bound: f64,
    /// latent covering radius of the dataset over the probe set
    pub eps_bar: f64,
    /// max one-step latent consistency error
    pub delta: f64,
    /// completeness margin, `lipschitz_bound * eps_bar`
    pub psi: f64,
    /// dynamics margin, `lipschitz_bound * delta`
    pub eta: f64,
}

impl Margins {
    pub fn zero(lipschitz_bound: f64) -> Self {
        Margins {
            lipschitz_bound,
            eps_bar: 0.0,
            delta: 0.0,
            psi: 0.0,
            eta: 0.0,
        }
    }

    pub fn from_measurements(lipschitz_bound: f64, eps_bar: f64, delta: f64) -> Self {
        assert!(lipschitz_bound >= 0.0 && eps_bar >= 0.0 && delta >= 0.0);
        Margins {
            lipschitz_bound,
            eps_bar,
            delta,
            psi: psi_margin(lipschitz_bound, eps_bar),
            eta: eta_margin(lipschitz_bound, delta),
        }
    }
}

/// Completeness margin: exactly the theoretical lower bound `L_B * eps_bar`;
/// callers may add slack on top.
pub fn psi_margin(lipschitz_bound: f64, eps_bar: f64) -> f64 {
    assert!(lipschitz_bound >= 0.0 && eps_bar >= 0.0);
    lipschitz_bound * eps_bar
}

/// Dynamics-consistency margin, `L_B * delta`.
pub fn eta_margin(lipschitz_bound: f64, delta: f64) -> f64 {
    assert!(lipschitz_bound >= 0.0 && delta >= 0.0);
    lipschitz_bound * delta
}

// ---------------------------------------------------------------------------
// Nearest neighbors / covering radius
// ---------------------------------------------------------------------------

struct KdNode {
    point: usize,
    axis: usize,
    left: i32,
    right: i32,
}

/// Static kd-tree over low-dimensional points for nearest-neighbor queries.
pub struct KdTree {
    pts: Vec<Vec<f64>>,
    nodes: Vec<KdNode>,
    root: i32,
}

impl KdTree {
    pub fn build(pts: Vec<Vec<f64>>) -> Self {
        assert!(!pts.is_empty());
        let dim = pts[0].len();
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        let mut tree = KdTree {
            pts,
            nodes: Vec::new(),
            root: -1,
        };
        tree.root = tree.build_rec(&mut idx, 0, dim);
        tree
    }

    fn build_rec(&mut self, idx: &mut [usize], depth: usize, dim: usize) -> i32 {
        if idx.is_empty() {
            return -1;
        }
        let axis = depth % dim;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            self.pts[a][axis]
                .partial_cmp(&self.pts[b][axis])
                .expect("non-finite coordinate")
        });
        let point = idx[mid];
        let node = self.nodes.len() as i32;
        self.nodes.push(KdNode {
            point,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1, dim);
        let right = self.build_rec(&mut hi[1..], depth + 1, dim);
        self.nodes[node as usize].left = left;
        self.nodes[node as usize].right = right;
        node
    }

    /// Euclidean distance from `q` to its nearest stored point.
    pub fn nearest_dist(&self, q: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best.sqrt()
    }

    fn search(&self, node: i32, q: &[f64], best: &mut f64) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.pts[n.point];
        let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < *best {
            *best = d2;
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if diff * diff < *best {
            self.search(far, q, best);
        }
    }
}

/// Covering radius: the largest distance from any probe point to its
/// nearest dataset point. Probes within `eps_bar` of the dataset are what
/// the completeness margin covers.
pub fn covering_radius(data: &[Vec<f64>], probes: &[Vec<f64>]) -> Result<f64, CertifyError> {
    if data.is_empty() {
        return Err(CertifyError::EmptySet("dataset"));
    }
    if probes.is_empty() {
        return Err(CertifyError::EmptySet("probe"));
    }
    let tree = KdTree::build(data.to_vec());
    let mut worst: f64 = 0.0;
    for p in probes {
        worst = worst.max(tree.nearest_dist(p));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Probe sets
// ---------------------------------------------------------------------------

/// Axis-aligned bounding box of a point set.
pub fn bounding_box(pts: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    assert!(!pts.is_empty());
    let d = pts[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in pts {
        for j in 0..d {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    (lo, hi)
}

/// Uniform grid over a box, `per_axis` points per axis (inclusive of both
/// endpoints). Total count is `per_axis^dim`.
pub fn grid_probes(lo: &[f64], hi: &[f64], per_axis: usize) -> Vec<Vec<f64>> {
    assert!(per_axis >= 2 && lo.len() == hi.len());
    let d = lo.len();
    let mut out = Vec::with_capacity(per_axis.pow(d as u32));
    let mut idx = vec![0usize; d];
    loop {
        let p: Vec<f64> = (0..d)
            .map(|j| lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (per_axis - 1) as f64)
            .collect();
        out.push(p);
        let mut j = 0;
        loop {
            if j == d {
                return out;
            }
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

// Direction-number parameters for the first Sobol dimensions beyond the
// van der Corput base: (polynomial degree, polynomial coefficients a,
// initial m values), per the standard Joe-Kuo tables.
const SOBOL_PARAMS: [(u32, u32, [u32; 4]); 5] = [
    (1, 0, [1, 0, 0, 0]),
    (2, 1, [1, 3, 0, 0]),
    (3, 1, [1, 3, 1, 0]),
    (3, 2, [1, 1, 1, 0]),
    (4, 1, [1, 1, 3, 3]),
];

const SOBOL_BITS: u32 = 32;

fn sobol_directions(dim_index: usize) -> Vec<u32> {
    let mut v = vec![0u32; SOBOL_BITS as usize + 1]; // 1-based
    if dim_index == 0 {
        for k in 1..=SOBOL_BITS as usize {
            v[k] = 1 << (SOBOL_BITS as usize - k);
        }
        return v;
    }
    let (s, a, m) = SOBOL_PARAMS[dim_index - 1];
    let s = s as usize;
    for k in 1..=s.min(SOBOL_BITS as usize) {
        v[k] = m[k - 1] << (SOBOL_BITS as usize - k);
    }
    for k in s + 1..=SOBOL_BITS as usize {
        v[k] = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                v[k] ^= v[k - i];
            }
        }
    }
    v
}

/// Low-discrepancy Sobol points mapped into a box; supports up to 6
/// dimensions, deterministic, skips the all-zeros first element.
pub fn sobol_probes(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let d = lo.len();
    assert!(d >= 1 && d <= 1 + SOBOL_PARAMS.len(), "sobol: 1..=6 dims");
    assert_eq!(lo.len(), hi.len());
    let dirs: Vec<Vec<u32>> = (0..d).map(sobol_directions).collect();
    let mut x = vec![0u32; d];
    let mut out = Vec::with_capacity(n);
    let scale = 1.0 / (1u64 << SOBOL_BITS) as f64;
    for i in 0..n {
        // Gray-code step: flip the direction of the lowest zero bit of i
        let c = (i as u64).trailing_ones() as usize + 1;
        let mut p = Vec::with_capacity(d);
        for j in 0..d {
            x[j] ^= dirs[j][c];
            p.push(lo[j] + (hi[j] - lo[j]) * (x[j] as f64 * scale));
        }
        out.push(p);
    }
    out
}

/// Default probe resolutions for the covering radius.
pub const GRID_PER_AXIS_2D: usize = 100;
pub const SOBOL_POINTS_HIGH_D: usize = 100_000;

/// Probes over the bounding box of the dataset latents: a dense grid in
/// one or two dimensions, a Sobol sequence above that.
pub fn default_probes(latents: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (lo, hi) = bounding_box(latents);
    if lo.len() <= 2 {
        grid_probes(&lo, &hi, GRID_PER_AXIS_2D)
    } else {
        sobol_probes(&lo, &hi, SOBOL_POINTS_HIGH_D)
    }
}

// ---------------------------------------------------------------------------
// Latent measurements
// ---------------------------------------------------------------------------

/// Online-encoder latents of every record's current observation.
pub fn encode_buffer(encoder: &Mlp, buf: &DataBuffer) -> Vec<Vec<f64>> {
    (0..buf.len())
        .map(|i| encoder.forward(&buf.obs_input(i)).expect("encoder input"))
        .collect()
}

/// Worst one-step latent prediction error over the buffer, with each
/// record's stored action: `max_i ||d(z_i, a_i) - E(O_{i+1})||`.
pub fn consistency_error(nets: &Nets, buf: &DataBuffer) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..buf.len() {
        let z = nets
            .encoder
            .forward(&buf.obs_input(i))
            .expect("encoder input");
        let mut za = z.clone();
        za.push(buf.record(i).action);
        let pred = nets.dynamics.forward(&za).expect("dynamics input");
        let target = nets
            .encoder
            .forward(&buf.obs_next_input(i))
            .expect("encoder input");
        let err: f64 = pred
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err);
    }
    worst
}

/// Stricter variant: maximize the prediction error over a uniform action
/// grid at every record instead of using only the stored action.
pub fn consistency_error_action_grid(nets: &Nets, buf: &DataBuffer, n_actions: usize) -> f64 {
    assert!(n_actions >= 2);
    let (lo, hi) = (buf.spec.action_lo, buf.spec.action_hi);
    let mut worst: f64 = 0.0;
    for i in 0..buf.len() {
        let z = nets
            .encoder
            .forward(&buf.obs_input(i))
            .expect("encoder input");
        let target = nets
            .encoder
            .forward(&buf.obs_next_input(i))
            .expect("encoder input");
        for k in 0..n_actions {
            let a = lo + (hi - lo) * k as f64 / (n_actions - 1) as f64;
            let mut za = z.clone();
            za.push(a);
            let pred = nets.dynamics.forward(&za).expect("dynamics input");
            let err: f64 = pred
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Lipschitz probes
// ---------------------------------------------------------------------------

/// Largest singular value by power iteration (100 iterations, tolerance
/// 1e-9). `w` is row-major `rows x cols`.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(w.len(), rows * cols);
    if w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..100 {
        // u = W v, then v = W' u, normalized
        let mut u = vec![0.0; rows];
        for i in 0..rows {
            u[i] = w[i * cols..(i + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let un: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= un);
        let mut vn = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                vn[j] += w[i * cols + j] * u[i];
            }
        }
        let new_sigma: f64 = vn.iter().map(|x| x * x).sum::<f64>().sqrt();
        if new_sigma == 0.0 {
            return 0.0;
        }
        vn.iter_mut().for_each(|x| *x /= new_sigma);
        v = vn;
        if (new_sigma - sigma).abs() <= 1e-9 {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Product of per-layer spectral norms — a valid global Lipschitz upper
/// bound for networks with 1-Lipschitz activations and linear output.
pub fn lipschitz_upper_bound(net: &Mlp) -> f64 {
    let mut prod = 1.0;
    for l in 0..net.spec.n_layers() {
        let (rows, cols) = (net.spec.widths[l + 1], net.spec.widths[l]);
        prod *= spectral_norm(&net.weights[l], rows, cols);
    }
    prod
}

/// Largest observed slope `|B(z1) - B(z2)| / ||z1 - z2||` over sample
/// pairs; coincident pairs are skipped. A lower bound on the true constant.
pub fn empirical_lipschitz(net: &Mlp, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    assert!(!pairs.is_empty());
    let mut worst: f64 = 0.0;
    for (z1, z2) in pairs {
        let dist: f64 = z1
            .iter()
            .zip(z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        let b1 = net.forward(z1).expect("input size");
        let b2 = net.forward(z2).expect("input size");
        let diff: f64 = b1
            .iter()
            .zip(&b2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / dist);
    }
    worst
}

/// Random latent pairs inside a box, for the empirical Lipschitz probe.
pub fn random_pairs<R: Rng>(
    lo: &[f64],
    hi: &[f64],
    n: usize,
    rng: &mut R,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = lo.len();
    let draw = |rng: &mut R| -> Vec<f64> {
        (0..d)
            .map(|j| {
                if hi[j] > lo[j] {
                    rng.gen_range(lo[j]..hi[j])
                } else {
                    lo[j]
                }
            })
            .collect()
    };
    (0..n).map(|_| (draw(rng), draw(rng))).collect()
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// How many policy rollouts the verifier runs and for how long.
#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub count: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            count: 100,
            horizon: 200,
            seed: 0,
        }
    }
}

/// Per-sample slacks of the margined conditions; a condition is violated
/// when its slack is positive.
#[derive(Debug, Clone, Default)]
pub struct SlackTable {
    /// (record index, B(z) + psi) over safe-labeled records
    pub q1: Vec<(usize, f64)>,
    /// (record index, -B(z) + psi) over unsafe-labeled records
    pub q2: Vec<(usize, f64)>,
    /// (record index, B(d(z, pi(z))) + eta - B(z) + psi) over all records
    pub q3: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub env_id: String,
    pub margins: Margins,
    pub n_records: usize,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub q1_violations: usize,
    pub q1_worst: f64,
    pub q2_violations: usize,
    pub q2_worst: f64,
    pub q3_violations: usize,
    pub q3_worst: f64,
    /// decrease condition evaluated the way training sees it, with the
    /// frozen target encoder/barrier
    pub q3_target_violations: usize,
    pub q3_target_worst: f64,
    pub lmi: LmiReport,
    pub empirical_lipschitz: f64,
    pub lipschitz_upper: f64,
    pub rollout_safe_starts: usize,
    pub rollout_violations: usize,
    pub certified: bool,
    pub slacks: SlackTable,
}

impl CertificateReport {
    /// Flat `key = value` rendering, stable order.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("env", self.env_id.clone());
        kv("lipschitz_bound", format!("{}", self.margins.lipschitz_bound));
        kv("eps_bar", format!("{}", self.margins.eps_bar));
        kv("delta", format!("{}", self.margins.delta));
        kv("psi", format!("{}", self.margins.psi));
        kv("eta", format!("{}", self.margins.eta));
        kv("n_records", format!("{}", self.n_records));
        kv("n_safe", format!("{}", self.n_safe));
        kv("n_unsafe", format!("{}", self.n_unsafe));
        kv("q1_violations", format!("{}", self.q1_violations));
        kv("q1_worst_slack", format!("{}", self.q1_worst));
        kv("q2_violations", format!("{}", self.q2_violations));
        kv("q2_worst_slack", format!("{}", self.q2_worst));
        kv("q3_violations", format!("{}", self.q3_violations));
        kv("q3_worst_slack", format!("{}", self.q3_worst));
        kv("q3_target_violations", format!("{}", self.q3_target_violations));
        kv("q3_target_worst_slack", format!("{}", self.q3_target_worst));
        kv("lmi_feasible", format!("{}", self.lmi.feasible));
        kv("lmi_logdet", format!("{}", self.lmi.logdet));
        kv("lmi_satisfied", format!("{}", self.lmi.satisfied));
        kv("empirical_lipschitz", format!("{}", self.empirical_lipschitz));
        kv("lipschitz_upper_bound", format!("{}", self.lipschitz_upper));
        kv("rollout_safe_starts", format!("{}", self.rollout_safe_starts));
        kv("rollout_violations", format!("{}", self.rollout_violations));
        kv("certified", format!("{}", self.certified));
        s
    }

    /// Per-sample slack CSV: `condition,record,slack`.
    pub fn render_slack_csv(&self) -> String {
        let mut s = String::from("condition,record,slack\n");
        for (i, v) in &self.slacks.q1 {
            let _ = writeln!(s, "q1,{i},{v}");
        }
        for (i, v) in &self.slacks.q2 {
            let _ = writeln!(s, "q2,{i},{v}");
        }
        for (i, v) in &self.slacks.q3 {
            let _ = writeln!(s, "q3,{i},{v}");
        }
        s
    }
}

fn scalar(v: &[f64]) -> f64 {
    debug_assert_eq!(v.len(), 1);
    v[0]
}

/// Barrier value at the latent of an observation input.
fn barrier_at(nets: &Nets, obs: &[f64]) -> f64 {
    let z = nets.encoder.forward(obs).expect("encoder input");
    scalar(&nets.barrier.forward(&z).expect("barrier input"))
}

/// Recompute the margins and check every margined condition, the Lipschitz
/// LMI, and closed-loop rollout safety for a checkpoint over a data buffer.
pub fn verify(
    ckpt: &Checkpoint,
    buf: &DataBuffer,
    rollouts: &RolloutConfig,
) -> Result<CertificateReport, CertifyError> {
    let data_env = buf.spec.id.to_string();
    if ckpt.env_id != data_env {
        return Err(CertifyError::EnvMismatch {
            checkpoint: ckpt.env_id.clone(),
            data: data_env,
        });
    }
    if buf.is_empty() {
        return Err(CertifyError::EmptySet("dataset"));
    }
    let nets = &ckpt.store.online;
    let target = &ckpt.store.target;
    let lb = ckpt.lipschitz_bound;

    // margins from fresh measurements
    let latents = encode_buffer(&nets.encoder, buf);
    let probes = default_probes(&latents);
    let eps_bar = covering_radius(&latents, &probes)?;
    let delta = consistency_error(nets, buf);
    let margins = Margins::from_measurements(lb, eps_bar, delta);

    let mut slacks = SlackTable::default();
    let (mut q1_worst, mut q2_worst, mut q3_worst, mut q3t_worst) =
        (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut q1v, mut q2v, mut q3v, mut q3tv) = (0usize, 0usize, 0usize, 0usize);

    for &i in buf.safe_indices() {
        let s = scalar(&nets.barrier.forward(&latents[i]).expect("barrier")) + margins.psi;
        if s > 0.0 {
            q1v += 1;
        }
        q1_worst = q1_worst.max(s);
        slacks.q1.push((i, s));
    }
    for &i in buf.unsafe_indices() {
        let s = -scalar(&nets.barrier.forward(&latents[i]).expect("barrier")) + margins.psi;
        if s > 0.0 {
            q2v += 1;
        }
        q2_worst = q2_worst.max(s);
        slacks.q2.push((i, s));
    }
    for (i, z) in latents.iter().enumerate() {
        let b_now = scalar(&nets.barrier.forward(z).expect("barrier"));
        let a = scalar(&nets.policy.forward(z).expect("policy"));
        // online variant: every network at the current parameters
        let mut za = z.clone();
        za.push(a);
        let next = nets.dynamics.forward(&za).expect("dynamics");
        let b_next = scalar(&nets.barrier.forward(&next).expect("barrier"));
        let s = b_next + margins.eta - b_now + margins.psi;
        if s > 0.0 {
            q3v += 1;
        }
        q3_worst = q3_worst.max(s);
        slacks.q3.push((i, s));
        // training variant: frozen target encoder/barrier around the step
        let mut zt = target
            .encoder
            .forward(&buf.obs_input(i))
            .expect("encoder");
        zt.push(a);
        let next_t = nets.dynamics.forward(&zt).expect("dynamics");
        let b_next_t = scalar(&target.barrier.forward(&next_t).expect("barrier"));
        let st = b_next_t + margins.eta - b_now + margins.psi;
        if st > 0.0 {
            q3tv += 1;
        }
        q3t_worst = q3t_worst.max(st);
    }

    let lmi = lmi_report(&nets.barrier, &ckpt.store.lambda(), lb);

    // Lipschitz probes over the latent bounding box
    let (lo, hi) = bounding_box(&latents);
    let mut rng = ChaCha8Rng::seed_from_u64(rollouts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let pairs = random_pairs(&lo, &hi, SOBOL_POINTS_HIGH_D, &mut rng);
    let emp_lip = empirical_lipschitz(&nets.barrier, &pairs);
    let lip_upper = lipschitz_upper_bound(&nets.barrier);

    // closed-loop rollouts from safe-labeled starts
    let mut rng = ChaCha8Rng::seed_from_u64(rollouts.seed);
    let mut rollout_violations = 0;
    for _ in 0..rollouts.count {
        let s0 = sample_labeled_state(&buf.spec, Label::Safe, &mut rng)?;
        debug_assert_eq!(label(&buf.spec, s0), Label::Safe);
        let traj = rollout(
            &buf.spec,
            &mut |obs| {
                let z = nets
                    .encoder
                    .forward(&obs_input(&obs.frames))
                    .expect("encoder input");
                scalar(&nets.policy.forward(&z).expect("policy input"))
            },
            s0,
            rollouts.horizon,
        )?;
        if !traj.safe {
            rollout_violations += 1;
        }
    }

    let certified = q1v == 0
        && q2v == 0
        && q3v == 0
        && lmi.satisfied
        && rollout_violations == 0;

    Ok(CertificateReport {
        env_id: ckpt.env_id.clone(),
        margins,
        n_records: buf.len(),
        n_safe: buf.safe_indices().len(),
        n_unsafe: buf.unsafe_indices().len(),
        q1_violations: q1v,
        q1_worst,
        q2_violations: q2v,
        q2_worst,
        q3_violations: q3v,
        q3_worst,
        q3_target_violations: q3tv,
        q3_target_worst: q3t_worst,
        lmi,
        empirical_lipschitz: emp_lip,
        lipschitz_upper: lip_upper,
        rollout_safe_starts: rollouts.count,
        rollout_violations,
        certified,
        slacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{sample_datasets, EnvSpec};
    use crate::nets::{Activation, MlpSpec, OutputActivation, ParamStore};
    use rand::SeedableRng;

    fn brute_covering(data: &[Vec<f64>], probes: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for p in probes {
            let mut best = f64::INFINITY;
            for d in data {
                let dist2: f64 = d.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(dist2);
            }
            worst = worst.max(best.sqrt());
        }
        worst
    }

    #[test]
    fn covering_radius_midpoint() {
        let data = vec![vec![0.0], vec![1.0]];
        let probes: Vec<Vec<f64>> = (0..101).map(|i| vec![i as f64 / 100.0]).collect();
        let r = covering_radius(&data, &probes).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covering_radius_self_cover_zero() {
        let data = vec![vec![0.3, 1.0], vec![-0.2, 0.5], vec![2.0, 2.0]];
        let r = covering_radius(&data, &data).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn covering_radius_monotone_in_dataset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probes: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let mut data: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let mut prev = covering_radius(&data, &probes).unwrap();
        for _ in 0..5 {
            for _ in 0..10 {
                data.push(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            }
            let r = covering_radius(&data, &probes).unwrap();
            assert!(r <= prev + 1e-15);
            prev = r;
        }
    }

    #[test]
    fn covering_radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for dim in [1usize, 2, 3, 4] {
            let data: Vec<Vec<f64>> = (0..500)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let probes: Vec<Vec<f64>> = (0..300)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.5..3.5)).collect())
                .collect();
            let fast = covering_radius(&data, &probes).unwrap();
            let brute = brute_covering(&data, &probes);
            assert_eq!(fast, brute, "dim {dim}");
        }
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(covering_radius(&[], &[vec![0.0]]).is_err());
        assert!(covering_radius(&[vec![0.0]], &[]).is_err());
    }

    #[test]
    fn margin_products() {
        assert_eq!(psi_margin(2.0, 0.1), 0.2);
        assert_eq!(psi_margin(5.0, 0.0), 0.0);
        assert_eq!(psi_margin(2.0, 0.2), 2.0 * psi_margin(2.0, 0.1));
        assert_eq!(eta_margin(1.5, 0.2), 1.5 * 0.2);
        assert!((eta_margin(1.5, 0.2) - 0.3).abs() < 1e-15);
        assert_eq!(eta_margin(1.5, 0.0), 0.0);
        assert_eq!(eta_margin(1.5, 0.4), 2.0 * eta_margin(1.5, 0.2));
        let m = Margins::from_measurements(2.0, 0.1, 0.05);
        assert_eq!(m.psi, 2.0 * 0.1);
        assert_eq!(m.eta, 2.0 * 0.05);
    }

    #[test]
    fn grid_probe_counts_and_bounds() {
        let g = grid_probes(&[0.0, -1.0], &[1.0, 1.0], 5);
        assert_eq!(g.len(), 25);
        assert!(g.iter().all(|p| (0.0..=1.0).contains(&p[0])
            && (-1.0..=1.0).contains(&p[1])));
        assert!(g.contains(&vec![0.0, -1.0]));
        assert!(g.contains(&vec![1.0, 1.0]));
    }

    #[test]
    fn sobol_probes_deterministic_and_spread() {
        let a = sobol_probes(&[0.0; 4], &[1.0; 4], 4096);
        let b = sobol_probes(&[0.0; 4], &[1.0; 4], 4096);
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|p| p.iter().all(|&x| (0.0..=1.0).contains(&x))));
        // first point of the sequence is the box midpoint
        for &x in &a[0] {
            assert!((x - 0.5).abs() < 1e-9);
        }
        for j in 0..4 {
            let mean: f64 = a.iter().map(|p| p[j]).sum::<f64>() / a.len() as f64;
            assert!((mean - 0.5).abs() < 0.01, "axis {j} mean {mean}");
        }
    }

    #[test]
    fn consistency_error_three_four_five() {
        // zeroed encoder -> all latents are the zero vector; dynamics bias
        // (0.3, 0.4) -> every record errs by exactly 0.5
        let spec = EnvSpec::pendulum().with_frames(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let buf = sample_datasets(&spec, 2, 2, 6, &mut rng).unwrap();
        let obs_dim = spec.obs_dim();
        let mk = |widths: Vec<usize>| {
            MlpSpec::new(widths, Activation::Relu, OutputActivation::Linear)
        };
        let encoder = crate::nets::Mlp::zeroed(mk(vec![obs_dim, 4, 2]));
        let mut dynamics = crate::nets::Mlp::zeroed(mk(vec![3, 4, 2]));
        let last = dynamics.biases.len() - 1;
        dynamics.biases[last] = vec![0.3, 0.4];
        let nets = Nets {
            encoder,
            dynamics,
            barrier: crate::nets::Mlp::zeroed(mk(vec![2, 4, 1])),
            policy: crate::nets::Mlp::zeroed(mk(vec![2, 4, 1])),
        };
        let delta = consistency_error(&nets, &buf);
        assert!((delta - 0.5).abs() < 1e-15);

        // subset max <= full max: drop records by rebuilding a smaller buffer
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let small = sample_datasets(&spec, 2, 2, 4, &mut rng).unwrap();
        assert!(consistency_error(&nets, &small) <= delta + 1e-15);

        // perfect model: zero dynamics bias matches the zero targets
        let nets_perfect = Nets {
            dynamics: crate::nets::Mlp::zeroed(mk(vec![3, 4, 2])),
            ..nets.clone()
        };
        assert_eq!(consistency_error(&nets_perfect, &buf), 0.0);

        // the action-grid variant can only be stricter
        assert!(consistency_error_action_grid(&nets, &buf, 5) >= delta - 1e-15);
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm(&[2.0], 1, 1), 2.0);
        assert_eq!(spectral_norm(&[0.0; 6], 2, 3), 0.0);
        // diag(3, 1) -> 3
        let s = spectral_norm(&[3.0, 0.0, 0.0, 1.0], 2, 2);
        assert!((s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_upper_bound_product() {
        let mut net = crate::nets::Mlp::zeroed(MlpSpec::new(
            vec![1, 1, 1],
            Activation::Relu,
            OutputActivation::Linear,
        ));
        net.weights[0] = vec![2.0];
        net.weights[1] = vec![3.0];
        assert!((lipschitz_upper_bound(&net) - 6.0).abs() < 1e-9);
        let zero = crate::nets::Mlp::zeroed(net.spec.clone());
        assert_eq!(lipschitz_upper_bound(&zero), 0.0);
    }

    #[test]
    fn empirical_lipschitz_linear_and_constant() {
        // B(z) = 2z via relu(2z) - relu(-2z)
        let mut net = crate::nets::Mlp::zeroed(MlpSpec::new(
            vec![1, 2, 1],
            Activation::Relu,
            OutputActivation::Linear,
        ));
        net.weights[0] = vec![2.0, -2.0];
        net.weights[1] = vec![1.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = random_pairs(&[-1.0], &[1.0], 1000, &mut rng);
        let e = empirical_lipschitz(&net, &pairs);
        assert!((e - 2.0).abs() < 1e-12);

        let constant = crate::nets::Mlp::zeroed(net.spec.clone());
        assert_eq!(empirical_lipschitz(&constant, &pairs), 0.0);
    }

    #[test]
    fn empirical_never_exceeds_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5u64 {
            let mut net_rng = ChaCha8Rng::seed_from_u64(seed);
            let net = crate::nets::Mlp::init(
                MlpSpec::new(vec![3, 6, 5, 1], Activation::Relu, OutputActivation::Linear),
                1.0,
                &mut net_rng,
            );
            let pairs = random_pairs(&[-2.0; 3], &[2.0; 3], 2000, &mut rng);
            assert!(empirical_lipschitz(&net, &pairs) <= lipschitz_upper_bound(&net) + 1e-9);
        }
    }

    #[test]
    fn verify_untrained_network_not_certified() {
        let spec = EnvSpec::pendulum().with_frames(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let buf = sample_datasets(&spec, 10, 10, 30, &mut rng).unwrap();
        let obs_dim = spec.obs_dim();
        let mk = |widths: Vec<usize>, out| MlpSpec::new(widths, Activation::Relu, out);
        let store = ParamStore::new(
            mk(vec![obs_dim, 8, 2], OutputActivation::Linear),
            mk(vec![3, 8, 2], OutputActivation::Linear),
            mk(vec![2, 8, 1], OutputActivation::Linear),
            mk(
                vec![2, 8, 1],
                OutputActivation::TanhScaled { lo: -10.0, hi: 10.0 },
            ),
            0.995,
            &mut rng,
        );
        let ckpt = Checkpoint {
            version: 1,
            env_id: "pendulum".into(),
            latent_dim: 2,
            lipschitz_bound: 2.0,
            margins: Margins::zero(2.0),
            seed: 0,
            converged: false,
            store,
        };
        let report = verify(
            &ckpt,
            &buf,
            &RolloutConfig {
                count: 3,
                horizon: 10,
                seed: 1,
            },
        )
        .unwrap();
        assert!(!report.certified);
        // random barrier + tight margins: at least one condition must break
        assert!(
            report.q1_violations + report.q2_violations + report.q3_violations > 0
                || !report.lmi.satisfied
        );
        assert_eq!(report.margins.psi, 2.0 * report.margins.eps_bar);
        assert_eq!(report.margins.eta, 2.0 * report.margins.delta);
        let text = report.render_text();
        assert!(text.contains("certified = false"));
        let csv = report.render_slack_csv();
        assert!(csv.starts_with("condition,record,slack\n"));
        assert_eq!(
            csv.lines().count(),
            1 + report.n_safe + report.n_unsafe + report.n_records
        );
    }

    #[test]
    fn verify_rejects_mismatched_environment() {
        let spec = EnvSpec::vehicle().with_frames(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let buf = sample_datasets(&spec, 3, 3, 9, &mut rng).unwrap();
        let mk = |widths: Vec<usize>, out| MlpSpec::new(widths, Activation::Relu, out);
        let store = ParamStore::new(
            mk(vec![128, 8, 2], OutputActivation::Linear),
            mk(vec![3, 8, 2], OutputActivation::Linear),
            mk(vec![2, 8, 1], OutputActivation::Linear),
            mk(
                vec![2, 8, 1],
                OutputActivation::TanhScaled { lo: -10.0, hi: 10.0 },
            ),
            0.995,
            &mut rng,
        );
        let ckpt = Checkpoint {
            version: 1,
            env_id: "pendulum".into(),
            latent_dim: 2,
            lipschitz_bound: 2.0,
            margins: Margins::zero(2.0),
            seed: 0,
            converged: false,
            store,
        };
        assert!(matches!(
            verify(&ckpt, &buf, &RolloutConfig::default()),
            Err(CertifyError::EnvMismatch { .. })
        ));
    }
}
