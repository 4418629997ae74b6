//! Scratch oracle: what (eps_bar, delta, safe-unsafe gap) are attainable if
//! the encoder were a perfect state regressor? Trains the encoder on the
//! ground-truth normalized state (not available to the real pipeline), fits
//! the dynamics on top, and prints the margin arithmetic.

use latent_cbc::certify::{covering_radius, default_probes};
use latent_cbc::envs::{sample_datasets, EnvSpec};
use latent_cbc::nets::{Activation, Mlp, MlpSpec, OutputActivation};
use latent_cbc::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm_state(s: &latent_cbc::envs::State) -> Vec<f64> {
    let c = s.coords();
    vec![c[0] / 1.81, c[1] / 2.02] // uniform stds over X = [-pi,pi]x[-3.5,3.5]
}

fn train_mse(
    net: &mut Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    steps: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) {
    let n_params: usize = net.weights.iter().map(|w| w.len()).sum::<usize>()
        + net.biases.iter().map(|b| b.len()).sum::<usize>();
    let mut adam = latent_cbc::train::Adam::new(lr, 0.9, 0.999, 1e-8, n_params);
    let out_dim = net.spec.output_dim();
    let in_dim = net.spec.input_dim();
    for _ in 0..steps {
        let idx: Vec<usize> = (0..64).map(|_| rng.gen_range(0..inputs.len())).collect();
        let mut tape = Tape::new();
        let p = net.insert(&mut tape, true);
        let rows: Vec<f64> = idx.iter().flat_map(|&i| inputs[i].clone()).collect();
        let x = tape.constant(idx.len(), in_dim, rows);
        let pred = p.forward(&mut tape, x);
        let tgt: Vec<f64> = idx.iter().flat_map(|&i| targets[i].clone()).collect();
        let t = tape.constant(idx.len(), out_dim, tgt);
        let diff = tape.sub(t, pred);
        let sq = tape.square(diff);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut grads = Vec::new();
        for v in p.weights.iter().chain(p.biases.iter()) {
            grads.extend_from_slice(tape.grad(*v).unwrap());
        }
        let mut flat = Vec::new();
        for w in net.weights.iter().chain(net.biases.iter()) {
            flat.extend_from_slice(w);
        }
        adam.step(&mut flat, &grads, 1.0).unwrap();
        let mut pos = 0;
        for w in net.weights.iter_mut().chain(net.biases.iter_mut()) {
            let len = w.len();
            w.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
    }
}

fn main() {
    let mut spec = EnvSpec::pendulum();
    spec.frame_width = 16;
    spec.frame_height = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let buf = sample_datasets(&spec, 200, 200, 3000, &mut rng).unwrap();
    let n = buf.len();
    let obs_dim = spec.obs_dim();

    // encoder regresses the normalized ground-truth state
    let e_spec = MlpSpec::new(
        vec![obs_dim, 64, 32, 2],
        Activation::Relu,
        OutputActivation::Linear,
    );
    let mut encoder = Mlp::init(e_spec, 1.0, &mut rng);
    let obs: Vec<Vec<f64>> = (0..n).map(|i| buf.obs_input(i)).collect();
    let states: Vec<Vec<f64>> = (0..n).map(|i| norm_state(&buf.record(i).state_now)).collect();
    train_mse(&mut encoder, &obs, &states, 8000, 1e-3, &mut rng);

    // regression quality
    let mut max_err: f64 = 0.0;
    let mut mean_err = 0.0;
    for i in 0..n {
        let p = encoder.forward(&obs[i]).unwrap();
        let e = ((p[0] - states[i][0]).powi(2) + (p[1] - states[i][1]).powi(2)).sqrt();
        max_err = max_err.max(e);
        mean_err += e / n as f64;
    }
    println!("state regression: max {max_err:.4}, mean {mean_err:.4}");

    // latents, covering radius, gap
    let zs: Vec<Vec<f64>> = obs.iter().map(|o| encoder.forward(o).unwrap()).collect();
    let probes = default_probes(&zs);
    let eps = covering_radius(&zs, &probes).unwrap();
    let mut gap = f64::INFINITY;
    for &i in buf.safe_indices() {
        for &j in buf.unsafe_indices() {
            let d: f64 = zs[i]
                .iter()
                .zip(&zs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            gap = gap.min(d);
        }
    }
    println!("eps_bar = {eps:.4}, min safe-unsafe gap = {gap:.4}, need gap >= 2*eps = {:.4}", 2.0 * eps);

    // dynamics on top of the frozen oracle encoder (residual)
    let d_spec = MlpSpec::new(
        vec![3, 32, 32, 2],
        Activation::Relu,
        OutputActivation::Linear,
    )
    .with_residual();
    let mut dynamics = Mlp::init(d_spec, 1.0, &mut rng);
    let din: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![zs[i][0], zs[i][1], buf.record(i).action])
        .collect();
    let dtgt: Vec<Vec<f64>> = (0..n)
        .map(|i| encoder.forward(&buf.obs_next_input(i)).unwrap())
        .collect();
    train_mse(&mut dynamics, &din, &dtgt, 8000, 1e-3, &mut rng);
    let mut dmax: f64 = 0.0;
    let mut dmean = 0.0;
    for i in 0..n {
        let p = dynamics.forward(&din[i]).unwrap();
        let e = ((p[0] - dtgt[i][0]).powi(2) + (p[1] - dtgt[i][1]).powi(2)).sqrt();
        dmax = dmax.max(e);
        dmean += e / n as f64;
    }
    // per-step latent motion for the q3 budget
    let mut motion_max: f64 = 0.0;
    for i in 0..n {
        let m: f64 = zs[i]
            .iter()
            .zip(&dtgt[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        motion_max = motion_max.max(m);
    }
    println!("delta: max {dmax:.4}, mean {dmean:.4}; max one-step motion {motion_max:.4}");
    println!(
        "q3 budget at L=2: need motion*2 >= psi+eta = 2*(eps+delta) = {:.4}",
        2.0 * (eps + dmax)
    );
}
