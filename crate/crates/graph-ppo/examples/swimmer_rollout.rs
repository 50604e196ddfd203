//! Drives the multi-link swimmer with a scripted traveling-wave gait and
//! prints the resulting motion, showing the environment API without any
//! learning in the loop.
//!
//! Run with: cargo run --release --example swimmer_rollout

use graph_ppo::env::{EnvConfig, SwimmerEnv};

fn main() -> graph_ppo::Result<()> {
    let cfg = EnvConfig {
        n_links: 6,
        max_episode_steps: 400,
        ..EnvConfig::default()
    };
    let mut env = SwimmerEnv::new(cfg)?;
    let dim = env.action_dim();
    env.reset_zero();

    println!("{}-link swimmer, {} joints, scripted traveling wave", env.n_links(), dim);
    println!();
    println!(
        "{:>5}  {:>9}  {:>9}  {:>9}  {:>10}",
        "step", "x", "y", "reward", "energy"
    );

    let mut total_reward = 0.0;
    let mut step = 0usize;
    loop {
        // Phase-lagged sinusoids alternate bends down the chain.
        let t = step as f64 * 0.05;
        let action: Vec<f64> = (0..dim)
            .map(|j| (t - 0.8 * j as f64).sin())
            .collect();
        let outcome = env.step(&action)?;
        total_reward += outcome.reward;
        step += 1;
        if step.is_multiple_of(50) {
            let s = env.state();
            println!(
                "{:>5}  {:>9.4}  {:>9.4}  {:>9.5}  {:>10.6}",
                step,
                s.root_position[0],
                s.root_position[1],
                outcome.reward,
                env.kinetic_energy()
            );
        }
        if outcome.terminated || outcome.truncated {
            break;
        }
    }

    let s = env.state();
    println!();
    println!(
        "episode return {:.4}; final position ({:.4}, {:.4}) after {} steps",
        total_reward, s.root_position[0], s.root_position[1], step
    );
    println!("the gait propels the body along +x; drag dissipates what the motors put in.");
    Ok(())
}
