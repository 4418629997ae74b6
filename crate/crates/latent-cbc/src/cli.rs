//! Command-line front end: `train`, `verify`, `rollout`, `export`.
//!
//! Exit codes are a stable contract:
//! `0` success / certified, `1` verification failure, `2` usage or config
//! error, `3` runtime divergence.
//!
//! Run configuration is a flat TOML file mirroring [`TrainConfig`]; unknown
//! keys are rejected to catch typos. The output directory comes from
//! `--out`, overridable with the `LATENT_CBC_OUT` environment variable.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::certify::{verify, RolloutConfig};
use crate::envs::{
    backstep, label, observe, obs_input, rollout, sample_labeled_state, sample_state,
    DataBuffer, EnvId, EnvSpec, Label, State,
};
use crate::nets::Checkpoint;
use crate::train::{train, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNCERTIFIED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Output directory environment override.
pub const OUT_DIR_ENV: &str = "LATENT_CBC_OUT";

#[derive(Parser)]
#[command(name = "latent-cbc", version, about = "Train and verify Lipschitz-certified neural control barrier certificates from rendered observations")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run warm start + synthesis from a TOML config; writes the checkpoint,
    /// training log, dataset, and certificate report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// overrides the seed in the config file
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-check the margined conditions, the Lipschitz LMI, and rollout
    /// safety for a saved checkpoint over an exported dataset.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// dataset index file; the frame blob is expected next to it with a
        /// `.bin` extension
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// rollout count
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
    },
    /// Roll the saved policy out and write per-trajectory CSVs.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = StartRegion::Safe)]
        start_region: StartRegion,
    },
    /// Evaluate the barrier over a state grid (rendered, encoded, scored)
    /// and write level-set plot data.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// grid resolution per state axis
        #[arg(long, default_value_t = 41)]
        grid: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StartRegion {
    Safe,
    Anywhere,
}

/// Flat file mirror of [`TrainConfig`]; every field optional on top of the
/// per-environment defaults, unknown keys rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    env: String,
    frame_width: Option<usize>,
    frame_height: Option<usize>,
    latent_dim: Option<usize>,
    encoder_hidden: Option<Vec<usize>>,
    dynamics_hidden: Option<Vec<usize>>,
    barrier_hidden: Option<Vec<usize>>,
    policy_hidden: Option<Vec<usize>>,
    n_safe: Option<usize>,
    n_unsafe: Option<usize>,
    n_total: Option<usize>,
    warm_start_epochs: Option<usize>,
    max_iterations: Option<usize>,
    batch_size: Option<usize>,
    lr_main: Option<f64>,
    lr_encoder: Option<f64>,
    lr_lmi: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    rho: Option<f64>,
    xi1: Option<f64>,
    xi2: Option<f64>,
    xi3: Option<f64>,
    lam1: Option<f64>,
    lam2: Option<f64>,
    lam3: Option<f64>,
    lipschitz_bound: Option<f64>,
    rollouts_per_iter: Option<usize>,
    rollout_horizon: Option<usize>,
    main_steps_per_iter: Option<usize>,
    lmi_steps_per_iter: Option<usize>,
    seed: Option<u64>,
    tolerance: Option<f64>,
    pi_user: Option<f64>,
}

/// Parse a TOML config on top of the environment's defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig, String> {
    let fc: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    let env: EnvId = fc.env.parse()?;
    let mut cfg = match env {
        EnvId::Pendulum => TrainConfig::pendulum_default(),
        EnvId::Vehicle => TrainConfig::vehicle_default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = fc.$field { cfg.$field = v; })*
        };
    }
    take!(
        frame_width, frame_height, latent_dim, encoder_hidden, dynamics_hidden,
        barrier_hidden, policy_hidden, n_safe, n_unsafe, n_total, warm_start_epochs,
        max_iterations, batch_size, lr_main, lr_encoder, lr_lmi, beta1, beta2, adam_eps, rho,
        lipschitz_bound, rollouts_per_iter, rollout_horizon, main_steps_per_iter,
        lmi_steps_per_iter, seed, tolerance
    );
    if let Some(v) = fc.xi1 {
        cfg.weights.xi1 = v;
    }
    if let Some(v) = fc.xi2 {
        cfg.weights.xi2 = v;
    }
    if let Some(v) = fc.xi3 {
        cfg.weights.xi3 = v;
    }
    if let Some(v) = fc.lam1 {
        cfg.weights.lam1 = v;
    }
    if let Some(v) = fc.lam2 {
        cfg.weights.lam2 = v;
    }
    if let Some(v) = fc.lam3 {
        cfg.weights.lam3 = v;
    }
    if fc.pi_user.is_some() {
        cfg.pi_user = fc.pi_user;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn load_config(path: &Path) -> Result<TrainConfig, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text)
}

/// Reconstruct the environment a checkpoint was trained on: the id is
/// stored, the (square) frame size is recovered from the encoder input.
pub fn env_from_checkpoint(ckpt: &Checkpoint) -> Result<EnvSpec, String> {
    let id: EnvId = ckpt.env_id.parse()?;
    let base = match id {
        EnvId::Pendulum => EnvSpec::pendulum(),
        EnvId::Vehicle => EnvSpec::vehicle(),
    };
    let obs_dim = ckpt.store.online.encoder.spec.input_dim();
    if obs_dim % 2 != 0 {
        return Err("checkpoint encoder input is not two stacked frames".into());
    }
    let per_frame = obs_dim / 2;
    let side = (per_frame as f64).sqrt().round() as usize;
    if side * side != per_frame {
        return Err("checkpoint frames are not square; cannot infer size".into());
    }
    Ok(base.with_frames(side, side))
}

fn out_dir(cli_out: &Path) -> PathBuf {
    match std::env::var(OUT_DIR_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli_out.to_path_buf(),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    fs::write(dir.join(name), contents)
        .map_err(|e| format!("cannot write {name}: {e}"))
}

fn blob_path(index: &Path) -> PathBuf {
    index.with_extension("bin")
}

fn usage(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

pub fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> i32 {
    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return usage(&e),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out);
    let outcome = match train(&cfg) {
        Ok(o) => o,
        Err(TrainError::Diverged(it)) => {
            eprintln!("error: training diverged at iteration {it}");
            return EXIT_DIVERGED;
        }
        Err(TrainError::InvalidConfig(e)) => return usage(&e),
        Err(e) => return usage(&e.to_string()),
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        return usage(&e.to_string());
    }
    if let Err(e) = outcome.checkpoint.save(&dir.join("checkpoint.bin")) {
        return usage(&e.to_string());
    }
    if let Err(e) = write_file(&dir, "trainlog.csv", &outcome.log.to_csv()) {
        return usage(&e);
    }
    if let Err(e) = outcome
        .buffer
        .export(&dir.join("dataset.txt"), &dir.join("dataset.bin"))
    {
        return usage(&e.to_string());
    }
    let report = match verify(
        &outcome.checkpoint,
        &outcome.buffer,
        &RolloutConfig {
            count: 100,
            horizon: 200,
            seed: cfg.seed,
        },
    ) {
        Ok(r) => r,
        Err(e) => return usage(&e.to_string()),
    };
    if let Err(e) = write_file(&dir, "report.txt", &report.render_text()) {
        return usage(&e);
    }
    if let Err(e) = write_file(&dir, "slacks.csv", &report.render_slack_csv()) {
        return usage(&e);
    }
    print!("{}", report.render_text());
    println!("converged = {}", outcome.converged);
    if outcome.converged && report.certified {
        EXIT_OK
    } else {
        EXIT_UNCERTIFIED
    }
}

pub fn cmd_verify(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    seed: u64,
    n: usize,
    horizon: usize,
) -> i32 {
    let ckpt = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return usage(&e.to_string()),
    };
    let spec = match env_from_checkpoint(&ckpt) {
        Ok(s) => s,
        Err(e) => return usage(&e),
    };
    let buf = match DataBuffer::import(spec, dataset, &blob_path(dataset)) {
        Ok(b) => b,
        Err(e) => return usage(&e.to_string()),
    };
    let report = match verify(
        &ckpt,
        &buf,
        &RolloutConfig {
            count: n,
            horizon,
            seed,
        },
    ) {
        Ok(r) => r,
        Err(e) => return usage(&e.to_string()),
    };
    let dir = out_dir(out);
    if let Err(e) = write_file(&dir, "report.txt", &report.render_text()) {
        return usage(&e);
    }
    if let Err(e) = write_file(&dir, "slacks.csv", &report.render_slack_csv()) {
        return usage(&e);
    }
    print!("{}", report.render_text());
    if report.certified {
        EXIT_OK
    } else {
        EXIT_UNCERTIFIED
    }
}

fn state_csv_header(spec: &EnvSpec) -> &'static str {
    match spec.id {
        EnvId::Pendulum => "traj,t,theta,theta_dot,action,barrier,label",
        EnvId::Vehicle => "traj,t,x,y,theta,action,barrier,label",
    }
}

pub fn cmd_rollout(
    checkpoint: &Path,
    out: &Path,
    n: usize,
    horizon: usize,
    seed: u64,
    start_region: StartRegion,
) -> i32 {
    let ckpt = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return usage(&e.to_string()),
    };
    let spec = match env_from_checkpoint(&ckpt) {
        Ok(s) => s,
        Err(e) => return usage(&e),
    };
    let nets = &ckpt.store.online;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut csv = String::from(state_csv_header(&spec));
    csv.push('\n');
    let mut unsafe_entries = 0usize;
    for traj_id in 0..n {
        let s0 = match start_region {
            StartRegion::Safe => match sample_labeled_state(&spec, Label::Safe, &mut rng) {
                Ok(s) => s,
                Err(e) => return usage(&e.to_string()),
            },
            StartRegion::Anywhere => sample_state(&spec, &mut rng),
        };
        let traj = match rollout(
            &spec,
            &mut |obs| {
                let z = nets.encoder.forward(&obs_input(&obs.frames)).expect("encoder");
                nets.policy.forward(&z).expect("policy")[0]
            },
            s0,
            horizon,
        ) {
            Ok(t) => t,
            Err(e) => return usage(&e.to_string()),
        };
        if !traj.safe {
            unsafe_entries += 1;
        }
        let mut prev = backstep(&spec, traj.states[0]);
        for (t, s) in traj.states.iter().enumerate() {
            let obs = observe(&spec, prev, *s);
            let z = nets.encoder.forward(&obs_input(&obs.frames)).expect("encoder");
            let b = nets.barrier.forward(&z).expect("barrier")[0];
            let action = if t < traj.actions.len() {
                format!("{}", traj.actions[t])
            } else {
                String::new()
            };
            let coords: Vec<String> = s.coords().iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!(
                "{traj_id},{t},{},{action},{b},{}\n",
                coords.join(","),
                label(&spec, *s)
            ));
            prev = *s;
        }
    }
    let dir = out_dir(out);
    if let Err(e) = write_file(&dir, "rollouts.csv", &csv) {
        return usage(&e);
    }
    let summary = format!(
        "rollouts = {n}\nhorizon = {horizon}\nunsafe_entries = {unsafe_entries}\n"
    );
    if let Err(e) = write_file(&dir, "rollout_summary.txt", &summary) {
        return usage(&e);
    }
    print!("{summary}");
    EXIT_OK
}

pub fn cmd_export(checkpoint: &Path, out: &Path, grid: usize) -> i32 {
    if grid < 2 {
        return usage("--grid must be at least 2");
    }
    let ckpt = match Checkpoint::load(checkpoint) {
        Ok(c) => c,
        Err(e) => return usage(&e.to_string()),
    };
    let spec = match env_from_checkpoint(&ckpt) {
        Ok(s) => s,
        Err(e) => return usage(&e),
    };
    let nets = &ckpt.store.online;
    use std::f64::consts::PI;
    // state-space box to sweep, per environment
    let (lo, hi): (Vec<f64>, Vec<f64>) = match spec.id {
        EnvId::Pendulum => (vec![-PI, -3.5], vec![PI, 3.5]),
        EnvId::Vehicle => (vec![-2.0, -2.0, -PI], vec![2.0, 2.0, PI]),
    };
    let d = lo.len();
    let latent_dim = ckpt.latent_dim;
    let mut csv = String::new();
    match spec.id {
        EnvId::Pendulum => csv.push_str("theta,theta_dot"),
        EnvId::Vehicle => csv.push_str("x,y,theta"),
    }
    for j in 0..latent_dim {
        csv.push_str(&format!(",z{j}"));
    }
    csv.push_str(",barrier,label\n");
    let mut idx = vec![0usize; d];
    loop {
        let coords: Vec<f64> = (0..d)
            .map(|j| lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (grid - 1) as f64)
            .collect();
        let s = State::from_coords(spec.id, &coords);
        let obs = observe(&spec, backstep(&spec, s), s);
        let z = nets.encoder.forward(&obs_input(&obs.frames)).expect("encoder");
        let b = nets.barrier.forward(&z).expect("barrier")[0];
        let cs: Vec<String> = coords.iter().map(|v| v.to_string()).collect();
        let zs: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{b},{}\n",
            cs.join(","),
            zs.join(","),
            label(&spec, s)
        ));
        let mut j = 0;
        loop {
            if j == d {
                let dir = out_dir(out);
                if let Err(e) = write_file(&dir, "barrier_grid.csv", &csv) {
                    return usage(&e);
                }
                println!("wrote barrier_grid.csv ({} rows)", grid.pow(d as u32));
                return EXIT_OK;
            }
            idx[j] += 1;
            if idx[j] < grid {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Verify {
            checkpoint,
            dataset,
            out,
            seed,
            n,
            horizon,
        } => cmd_verify(&checkpoint, &dataset, &out, seed, n, horizon),
        Command::Rollout {
            checkpoint,
            out,
            n,
            horizon,
            seed,
            start_region,
        } => cmd_rollout(&checkpoint, &out, n, horizon, seed, start_region),
        Command::Export {
            checkpoint,
            out,
            grid,
        } => cmd_export(&checkpoint, &out, grid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = parse_config("env = \"pendulum\"\n").unwrap();
        assert_eq!(cfg, TrainConfig::pendulum_default());
        let cfg = parse_config("env = \"vehicle\"\nseed = 7\nlr_main = 0.01\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr_main, 0.01);
        assert_eq!(cfg.latent_dim, 4);
        assert_eq!(cfg.lipschitz_bound, 1.5);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = parse_config("env = \"pendulum\"\nlr_mian = 0.1\n").unwrap_err();
        assert!(err.contains("lr_mian"), "{err}");
    }

    #[test]
    fn config_rejects_negative_weight_naming_field() {
        let err = parse_config("env = \"pendulum\"\nxi1 = -1.0\n").unwrap_err();
        assert!(err.contains("xi1"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_environment() {
        assert!(parse_config("env = \"quadcopter\"\n").is_err());
    }

    #[test]
    fn missing_config_file_is_usage_error() {
        let code = cmd_train(Path::new("/nonexistent/config.toml"), Path::new("/tmp"), None);
        assert_eq!(code, EXIT_USAGE);
    }
}
