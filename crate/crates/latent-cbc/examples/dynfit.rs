//! Scratch diagnostic: can the dynamics net fit next-latent prediction for a
//! frozen random encoder? Reports max and mean prediction error over steps.

use latent_cbc::envs::{sample_datasets, EnvSpec};
use latent_cbc::nets::{Activation, Mlp, MlpSpec, OutputActivation};
use latent_cbc::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let spec = EnvSpec::pendulum();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let buf = sample_datasets(&spec, 200, 200, 3000, &mut rng).unwrap();
    let obs_dim = spec.obs_dim();
    let e_spec = MlpSpec::new(
        vec![obs_dim, 64, 32, 2],
        Activation::Relu,
        OutputActivation::Linear,
    );
    let d_spec = MlpSpec::new(
        vec![3, 32, 32, 2],
        Activation::Relu,
        OutputActivation::Linear,
    );
    let encoder = Mlp::init(e_spec, 1.0, &mut rng);
    let mut dynamics = Mlp::init(d_spec, 1.0, &mut rng);

    // frozen-encoder latents and targets (same encoder for both sides)
    let n = buf.len();
    let zs: Vec<Vec<f64>> = (0..n)
        .map(|i| encoder.forward(&buf.obs_input(i)).unwrap())
        .collect();
    let ts: Vec<Vec<f64>> = (0..n)
        .map(|i| encoder.forward(&buf.obs_next_input(i)).unwrap())
        .collect();
    // scale stats
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for z in &zs {
        for k in 0..2 {
            lo[k] = lo[k].min(z[k]);
            hi[k] = hi[k].max(z[k]);
        }
    }
    println!("latent bbox: {lo:?} .. {hi:?}");
    let ident_max: f64 = (0..n)
        .map(|i| {
            ((zs[i][0] - ts[i][0]).powi(2) + (zs[i][1] - ts[i][1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    println!("identity-predictor max error: {ident_max:.4}");

    let mut adam = latent_cbc::train::Adam::new(1e-3, 0.9, 0.999, 1e-8, param_count(&dynamics));
    for step in 0..6000 {
        let idx: Vec<usize> = (0..64).map(|_| rng.gen_range(0..n)).collect();
        let mut tape = Tape::new();
        let d = dynamics.insert(&mut tape, true);
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| vec![zs[i][0], zs[i][1], buf.record(i).action])
            .collect();
        let x = tape.constant(rows.len(), 3, rows.concat());
        let pred = d.forward(&mut tape, x);
        let tgt: Vec<f64> = idx.iter().flat_map(|&i| ts[i].clone()).collect();
        let t = tape.constant(idx.len(), 2, tgt);
        let diff = tape.sub(t, pred);
        let sq = tape.square(diff);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut grads = Vec::new();
        for p in d.weights.iter().chain(d.biases.iter()) {
            grads.extend_from_slice(tape.grad(*p).unwrap());
        }
        let mut flat = Vec::new();
        for w in dynamics.weights.iter().chain(dynamics.biases.iter()) {
            flat.extend_from_slice(w);
        }
        adam.step(&mut flat, &grads, 1.0).unwrap();
        let mut pos = 0;
        for w in dynamics
            .weights
            .iter_mut()
            .chain(dynamics.biases.iter_mut())
        {
            let len = w.len();
            w.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        if step % 1000 == 999 {
            let mut max_e: f64 = 0.0;
            let mut mean_e = 0.0;
            for i in 0..n {
                let p = dynamics
                    .forward(&[zs[i][0], zs[i][1], buf.record(i).action])
                    .unwrap();
                let e = ((p[0] - ts[i][0]).powi(2) + (p[1] - ts[i][1]).powi(2)).sqrt();
                max_e = max_e.max(e);
                mean_e += e / n as f64;
            }
            println!("step {}: delta(max) = {max_e:.4}, mean = {mean_e:.4}", step + 1);
        }
    }
}

fn param_count(m: &Mlp) -> usize {
    m.weights.iter().map(|w| w.len()).sum::<usize>() + m.biases.iter().map(|b| b.len()).sum::<usize>()
}
