//! Monte-Carlo check of the closed-form unclipped probability.
//!
//! Draws actions from the old policy, computes the exact likelihood ratio
//! against a drifted new policy, and counts how often the log ratio stays
//! inside the clip band. With equal standard deviations the count must match
//! the closed form to sampling noise; with a scale change the per-coordinate
//! log-ratio identity still holds exactly while the band count shifts.
//!
//! Run with: cargo run --release --example mc_validate

use graph_ppo::policy::{marginal_log_ratio, unclipped_prob_exact};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> graph_ppo::Result<()> {
    let epsilon = 0.2;
    let nu0 = 0.1;
    let samples = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    println!("band half-width {epsilon}, per-joint drift {nu0}, {samples} samples per cell");
    println!();
    println!(
        "{:>4} {:>6}  {:>10}  {:>10}  {:>7}  {:>12}",
        "dim", "eta", "mc frac", "closed", "z", "identity err"
    );
    for dim in [1usize, 2, 4, 8, 16] {
        for eta in [1.0f64, 0.95, 1.05] {
            let mut inside = 0u64;
            let mut identity_err = 0.0f64;
            for _ in 0..samples {
                let mut log_r = 0.0;
                for _ in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let lr = marginal_log_ratio(nu0, eta, z)?;
                    log_r += lr;
                    // The same quantity from the two densities directly, at
                    // a = z under mean 0, scale 1 for the old policy.
                    let direct =
                        -0.5 * ((z - nu0 * eta) / eta).powi(2) - eta.ln() + 0.5 * z * z;
                    identity_err = identity_err.max((lr - direct).abs());
                }
                if log_r.abs() <= epsilon {
                    inside += 1;
                }
            }
            let frac = inside as f64 / samples as f64;
            let nu_norm = nu0 * (dim as f64).sqrt();
            let p = unclipped_prob_exact(epsilon, nu_norm)?;
            let sigma = (p * (1.0 - p) / samples as f64).sqrt();
            let z_score = if sigma > 0.0 { (frac - p) / sigma } else { 0.0 };
            println!(
                "{:>4} {:>6}  {:>10.5}  {:>10.5}  {:>7.2}  {:>12.2e}",
                dim, eta, frac, p, z_score, identity_err
            );
        }
    }
    println!();
    println!("eta = 1 rows sit within sampling noise of the closed form; scale changes");
    println!("push mass out of the band (negative z against the equal-scale reference)");
    println!("while the per-coordinate identity stays at machine precision.");
    Ok(())
}
