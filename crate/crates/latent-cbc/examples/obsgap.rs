//! Scratch diagnostic: minimum pixel-space distance between safe and unsafe
//! observations at several frame resolutions.

use latent_cbc::envs::{sample_datasets, EnvId, EnvSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    for px in [16usize, 24, 32, 48] {
        let mut spec = EnvSpec::pendulum();
        spec.frame_width = px;
        spec.frame_height = px;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let buf = sample_datasets(&spec, 200, 200, 500, &mut rng).unwrap();
        let mut gap = f64::INFINITY;
        let mut arg = (0, 0);
        for &i in buf.safe_indices() {
            let oi = buf.obs_input(i);
            for &j in buf.unsafe_indices() {
                let oj = buf.obs_input(j);
                let d2: f64 = oi.iter().zip(&oj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < gap {
                    gap = d2;
                    arg = (i, j);
                }
            }
        }
        let si = buf.record(arg.0).state_now.coords();
        let sj = buf.record(arg.1).state_now.coords();
        println!(
            "{px}x{px}: min obs gap = {:.4} between safe {:?} and unsafe {:?}",
            gap.sqrt(),
            si,
            sj
        );
    }
}
