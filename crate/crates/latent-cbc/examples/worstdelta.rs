//! Scratch diagnostic: load a checkpoint, rebuild the sampled dataset, and
//! print the transitions with the worst latent consistency error alongside
//! their ground-truth states.

use latent_cbc::envs::{sample_datasets, EnvSpec};
use latent_cbc::nets::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dir = Path::new(&args[1]);
    let ck = Checkpoint::load(&dir.join("checkpoint.bin")).unwrap();
    let mut spec = EnvSpec::pendulum();
    spec.frame_width = 16;
    spec.frame_height = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
    let buf = sample_datasets(&spec, 200, 200, 3000, &mut rng).unwrap();

    let nets = &ck.store.online;
    let mut errs: Vec<(f64, usize, f64)> = Vec::new();
    for i in 0..buf.len() {
        let z = nets.encoder.forward(&buf.obs_input(i)).unwrap();
        let zt = ck
            .store
            .target
            .encoder
            .forward(&buf.obs_next_input(i))
            .unwrap();
        let mut za = z.clone();
        za.push(buf.record(i).action);
        let p = nets.dynamics.forward(&za).unwrap();
        let e: f64 = p
            .iter()
            .zip(&zt)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let motion: f64 = z
            .iter()
            .zip(&zt)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        errs.push((e, i, motion));
    }
    errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("worst consistency errors:");
    for (e, i, motion) in errs.iter().take(15) {
        let r = buf.record(*i);
        println!(
            "err {e:.3} motion {motion:.3} state {:?} action {:.2} label {:?}",
            r.state_now.coords(),
            r.action,
            r.label
        );
    }
    let n = errs.len() as f64;
    let mean: f64 = errs.iter().map(|x| x.0).sum::<f64>() / n;
    let mut sorted: Vec<f64> = errs.iter().map(|x| x.0).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "mean {mean:.4}, p50 {:.4}, p90 {:.4}, p99 {:.4}, max {:.4}",
        sorted[(0.50 * n) as usize],
        sorted[(0.90 * n) as usize],
        sorted[(0.99 * n) as usize],
        sorted[sorted.len() - 1]
    );

    // how far can the dynamics alone get against the frozen encoder?
    use latent_cbc::tensor::Tape;
    use rand::Rng;
    let mut dynamics = nets.dynamics.clone();
    let zs: Vec<Vec<f64>> = (0..buf.len())
        .map(|i| nets.encoder.forward(&buf.obs_input(i)).unwrap())
        .collect();
    let ts: Vec<Vec<f64>> = (0..buf.len())
        .map(|i| nets.encoder.forward(&buf.obs_next_input(i)).unwrap())
        .collect();
    let n_params: usize = dynamics.weights.iter().map(|w| w.len()).sum::<usize>()
        + dynamics.biases.iter().map(|b| b.len()).sum::<usize>();
    let mut adam = latent_cbc::train::Adam::new(1e-3, 0.9, 0.999, 1e-8, n_params);
    for step in 0..12000 {
        let idx: Vec<usize> = (0..64).map(|_| rng.gen_range(0..buf.len())).collect();
        let mut tape = Tape::new();
        let d = dynamics.insert(&mut tape, true);
        let rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| vec![zs[i][0], zs[i][1], buf.record(i).action])
            .collect();
        let x = tape.constant(idx.len(), 3, rows);
        let pred = d.forward(&mut tape, x);
        let tgt: Vec<f64> = idx.iter().flat_map(|&i| ts[i].clone()).collect();
        let t = tape.constant(idx.len(), 2, tgt);
        let diff = tape.sub(t, pred);
        let sq = tape.square(diff);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let mut grads = Vec::new();
        for v in d.weights.iter().chain(d.biases.iter()) {
            grads.extend_from_slice(tape.grad(*v).unwrap());
        }
        let mut flat = Vec::new();
        for w in dynamics.weights.iter().chain(dynamics.biases.iter()) {
            flat.extend_from_slice(w);
        }
        adam.step(&mut flat, &grads, 1.0).unwrap();
        let mut pos = 0;
        for w in dynamics.weights.iter_mut().chain(dynamics.biases.iter_mut()) {
            let len = w.len();
            w.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        if step % 3000 == 2999 {
            let mut dmax: f64 = 0.0;
            let mut dmean = 0.0;
            for i in 0..buf.len() {
                let p = dynamics
                    .forward(&[zs[i][0], zs[i][1], buf.record(i).action])
                    .unwrap();
                let e: f64 = p
                    .iter()
                    .zip(&ts[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                dmax = dmax.max(e);
                dmean += e / buf.len() as f64;
            }
            println!("dyn-only step {}: max {dmax:.4}, mean {dmean:.4}", step + 1);
        }
    }
}
