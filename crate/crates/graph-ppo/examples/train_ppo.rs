//! Minimal in-process PPO training run: one policy shared across swimmer
//! sizes, dimension-compensated clipping, and a before/after evaluation.
//!
//! This is the library-level version of the `train` subcommand; the callback
//! receives every update's metrics and every checkpoint payload, so a caller
//! can stream them anywhere.
//!
//! Run with: cargo run --release --example train_ppo

use graph_ppo::env::EnvConfig;
use graph_ppo::nn::PolicyNet;
use graph_ppo::ppo::{evaluate, train, TrainConfig, TrainEvent};

fn main() -> graph_ppo::Result<()> {
    let cfg = TrainConfig {
        seed: 3,
        total_timesteps: 20_000,
        rollout_steps: 512,
        num_envs: 4,
        minibatch_graphs: 128,
        epochs_per_update: 4,
        compensated: true,
        dim_low: 2,
        dim_high: 6,
        snapshot_interval: 10_000,
        ..TrainConfig::default()
    };

    let env_cfg = EnvConfig {
        max_episode_steps: 250,
        ..EnvConfig::default()
    };

    let eval_dims = [2usize, 4, 6];
    let untrained = PolicyNet::new(cfg.net.clone(), cfg.seed)?;
    let before = evaluate(&untrained, &env_cfg, &eval_dims, 5, 123)?;

    println!("training {} timesteps across swimmer sizes {}..={} joints", cfg.total_timesteps, cfg.dim_low, cfg.dim_high);
    let out = train(&cfg, &env_cfg, |event| {
        match event {
            TrainEvent::Update(m) => {
                if m.update % 2 == 0 {
                    println!(
                        "update {:>3}  timestep {:>6}  reward {:>8}  kl {:.5}  clip spread {:.4}",
                        m.update,
                        m.timestep,
                        m.mean_ep_reward
                            .map(|r| format!("{r:.3}"))
                            .unwrap_or_else(|| "-".to_string()),
                        m.approx_kl,
                        m.clip_spread
                    );
                }
            }
            TrainEvent::Checkpoint { timestep, bytes } => {
                println!("snapshot at timestep {timestep}: {} bytes", bytes.len());
            }
        }
        Ok(())
    })?;

    let after = evaluate(&out.net, &env_cfg, &eval_dims, 5, 123)?;
    println!();
    println!("{:>4}  {:>12}  {:>12}", "dim", "untrained", "trained");
    for (b, a) in before.iter().zip(&after) {
        println!("{:>4}  {:>12.4}  {:>12.4}", b.dim, b.mean, a.mean);
    }
    println!();
    println!("one set of weights controls every chain length; longer runs separate further.");
    Ok(())
}
