//! Finite-difference audit of the reverse-mode gradients through the whole
//! graph network.
//!
//! Builds a batch of swimmer observations with different joint counts, runs
//! the network, backpropagates a scalar loss, and compares the accumulated
//! parameter gradients against central differences at probe coordinates in
//! every layer.
//!
//! Run with: cargo run --release --example gradient_check

use graph_ppo::autodiff::Tape;
use graph_ppo::env::{EnvConfig, SwimmerEnv};
use graph_ppo::nn::{GraphBatch, NetConfig, PolicyNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn observations() -> graph_ppo::Result<Vec<graph_ppo::env::GraphObservation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut obs = Vec::new();
    for dim in [2usize, 3, 5, 8] {
        let cfg = EnvConfig {
            n_links: dim + 1,
            ..EnvConfig::default()
        };
        let mut env = SwimmerEnv::new(cfg)?;
        env.reset(&mut rng);
        for _ in 0..3 {
            let action: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    1e-4 * z
                })
                .collect();
            env.step(&action)?;
        }
        obs.push(env.observation());
    }
    Ok(obs)
}

/// Scalar loss touching every output head: mean squared action mean, mean
/// squared value, and the scale itself.
fn loss(net: &PolicyNet, batch: &GraphBatch) -> graph_ppo::Result<(f64, Tape, graph_ppo::nn::ForwardPass)> {
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch)?;
    let mean_sq = tape.mul(pass.action_mean, pass.action_mean)?;
    let mean_term = tape.mean(mean_sq)?;
    let value_sq = tape.mul(pass.values, pass.values)?;
    let value_term = tape.mean(value_sq)?;
    let scale_term = tape.exp(pass.log_std)?;
    let partial = tape.add(mean_term, value_term)?;
    let total = tape.add(partial, scale_term)?;
    let value = tape.value(total)[0];
    tape.backward(total)?;
    Ok((value, tape, pass))
}

fn main() -> graph_ppo::Result<()> {
    let mut net = PolicyNet::new(NetConfig::default(), 17)?;
    let batch = GraphBatch::from_observations(&observations()?)?;

    let (base_loss, tape, pass) = loss(&net, &batch)?;
    net.params_mut().zero_grad();
    net.accumulate_grads(&tape, &pass)?;
    println!("loss = {base_loss:.6} over {} nodes in {} graphs", batch.n_nodes, batch.n_graphs);
    println!();
    println!("{:<22} {:>14} {:>14} {:>10}", "parameter", "analytic", "numeric", "rel err");

    let h = 1e-6;
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = 0.0f64;
    for name in &names {
        // Probe the first coordinate of every parameter tensor.
        let analytic = net.params().get(name).unwrap().grad[0];
        let original = net.params().get(name).unwrap().data[0];

        net.params_mut().get_mut(name).unwrap().data[0] = original + h;
        let (up, _, _) = loss(&net, &batch)?;
        net.params_mut().get_mut(name).unwrap().data[0] = original - h;
        let (down, _, _) = loss(&net, &batch)?;
        net.params_mut().get_mut(name).unwrap().data[0] = original;

        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("{name:<22} {analytic:>14.8} {numeric:>14.8} {rel:>10.2e}");
    }
    println!();
    println!("worst relative error {worst:.2e} (tolerance 1e-4)");
    assert!(worst < 1e-4);
    Ok(())
}
