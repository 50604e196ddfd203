//! Command-line front end.
//!
//! Six subcommands cover the analysis and training surface:
//!
//! * `prob-surface`: unclipped-probability surfaces over (dim, drift) grids,
//!   exact and approximate, with and without dimension compensation.
//! * `mc-validate`: Monte-Carlo check of the closed-form unclipped
//!   probability and of the per-marginal log-ratio identity.
//! * `trpo-scaling`: step-norm scaling of the trust-region and fixed-scale
//!   updates against action dimension, synthetic and sampled curvature.
//! * `train`: PPO from a TOML experiment config, streaming metrics CSV and
//!   periodic checkpoints.
//! * `eval`: deterministic evaluation of a checkpoint across joint counts.
//! * `figure-data`: tidy CSV bundles (surfaces, clip-fraction traces,
//!   per-checkpoint evaluation curves) regenerated from a run directory.
//!
//! Every command writes CSV files whose first line is `# generated_unix
//! <seconds>`; everything below that line is a deterministic function of the
//! arguments, so reruns are byte-identical apart from that one line.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::load_checkpoint;
use crate::policy::{
    compensated_epsilon, fisher_diag_gaussian, marginal_log_ratio, sqrt_2_over_pi,
    unclipped_prob_approx, unclipped_prob_exact, DiagonalGaussian,
};
use crate::ppo::{evaluate, train, TrainConfig, TrainEvent, UpdateMetrics};
use crate::trust_region::{scaling_experiment, scaling_experiment_mc, ScalingTable};

/// Schema version expected at the top of every experiment config.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Fixed metrics CSV layout. Joint counts outside 2..=10 still contribute to
/// `clip_spread` but have no dedicated column.
pub const METRICS_COLUMNS: [&str; 16] = [
    "timestep",
    "mean_ep_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_frac_dim_2",
    "clip_frac_dim_3",
    "clip_frac_dim_4",
    "clip_frac_dim_5",
    "clip_frac_dim_6",
    "clip_frac_dim_7",
    "clip_frac_dim_8",
    "clip_frac_dim_9",
    "clip_frac_dim_10",
    "clip_spread",
];

#[derive(Parser, Debug)]
#[command(
    name = "graph-ppo",
    about = "Graph-network PPO with dimension-compensated clipping: training, evaluation, and analysis datasets",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Exact and approximate unclipped-probability surfaces over a
    /// (dimension, per-joint drift) grid.
    ProbSurface(ProbSurfaceArgs),
    /// Monte-Carlo validation of the closed-form unclipped probability.
    McValidate(McValidateArgs),
    /// Step-norm scaling of trust-region and fixed-scale updates.
    TrpoScaling(TrpoScalingArgs),
    /// Train PPO from a TOML experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint deterministically across joint counts.
    Eval(EvalArgs),
    /// Regenerate tidy figure datasets from a training run directory.
    FigureData(FigureDataArgs),
}

#[derive(Args, Debug)]
pub struct ProbSurfaceArgs {
    /// Nominal clipping half-width.
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    /// Largest action dimension on the grid (1..=dim_max).
    #[arg(long, default_value_t = 32)]
    pub dim_max: usize,
    /// Number of log-spaced per-joint drift values.
    #[arg(long, default_value_t = 60)]
    pub nu0_points: usize,
    #[arg(long, default_value_t = 0.005)]
    pub nu0_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nu0_max: f64,
    /// Per-joint drift for the fixed-drift slice file.
    #[arg(long, default_value_t = 0.1)]
    pub fixed_nu0: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct McValidateArgs {
    /// Clipping half-width defining the band.
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    /// Samples per (eta, dim, drift) cell.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrpoScalingArgs {
    /// Trust-region radius.
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    /// Inverse scale of the fixed-scale update.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Score samples per dimension in the sampled-curvature mode.
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma/range list of dimensions, e.g. "1,2,4,8,16,32".
    #[arg(long, default_value = "1,2,4,8,16,32")]
    pub dims: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory: metrics.csv, checkpoints/, and a config copy.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Joint counts, e.g. "2-10,20".
    #[arg(long, default_value = "2-10,20")]
    pub dims: String,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional experiment config supplying the environment parameters;
    /// defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FigureDataArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Half-width for the regenerated probability surfaces.
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    /// Episodes per (checkpoint, dim) cell of the evaluation traces.
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    /// Joint counts for the evaluation traces.
    #[arg(long, default_value = "2-10,20")]
    pub dims: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Experiment configuration file: a versioned TOML document whose top-level
/// `seed` feeds every stochastic component, so two configs differing only in
/// one flag share all randomness.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub env: EnvConfig,
}

/// Parses and validates a config file, returning it together with the raw
/// text so run directories can keep a byte-exact provenance copy. The
/// top-level seed overrides any seed inside the train table.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema_version: expected {CONFIG_SCHEMA_VERSION}, got {}",
            cfg.schema_version
        )));
    }
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    cfg.env.validate()?;
    Ok((cfg, text))
}

/// Parses "2-10,20" style dimension lists: comma-separated entries, each a
/// number or an inclusive range.
pub fn parse_dims(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::RejectedInput(format!("empty entry in dims {text:?}")));
        }
        let parse_one = |s: &str| -> Result<usize> {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::RejectedInput(format!("bad dimension {s:?}")))?;
            if v == 0 {
                return Err(Error::RejectedInput("dimension 0 is not valid".into()));
            }
            Ok(v)
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (lo, hi) = (parse_one(a)?, parse_one(b)?);
                if hi < lo {
                    return Err(Error::RejectedInput(format!("range {part:?} is reversed")));
                }
                out.extend(lo..=hi);
            }
            None => out.push(parse_one(part)?),
        }
    }
    let mut seen = Vec::new();
    out.retain(|d| {
        if seen.contains(d) {
            false
        } else {
            seen.push(*d);
            true
        }
    });
    Ok(out)
}

/// Formats with up to 12 significant digits: plain decimal for moderate
/// magnitudes, scientific otherwise, trailing zeros trimmed. The output is a
/// pure function of the value, which is what keeps dataset files stable
/// across reruns.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".to_string()
        } else if x > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    let formatted = format!("{x:.11e}");
    let (mant, exp_str) = formatted
        .split_once('e')
        .expect("{:e} always contains an exponent");
    let exp: i32 = exp_str.parse().expect("exponent is an integer");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let trimmed = digits.trim_end_matches('0');
    let sig = if trimmed.is_empty() { "0" } else { trimmed };
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if (-4..12).contains(&exp) {
        if exp >= 0 {
            let int_len = exp as usize + 1;
            if sig.len() <= int_len {
                out.push_str(sig);
                for _ in 0..int_len - sig.len() {
                    out.push('0');
                }
            } else {
                out.push_str(&sig[..int_len]);
                out.push('.');
                out.push_str(&sig[int_len..]);
            }
        } else {
            out.push_str("0.");
            for _ in 0..(-exp - 1) as usize {
                out.push('0');
            }
            out.push_str(sig);
        }
    } else {
        out.push_str(&sig[..1]);
        if sig.len() > 1 {
            out.push('.');
            out.push_str(&sig[1..]);
        }
        let _ = write!(out, "e{exp}");
    }
    out
}

/// CSV file with a timestamp comment line, a header, and flushed rows.
pub struct CsvWriter {
    file: fs::File,
}

impl CsvWriter {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(file, "# generated_unix {secs}")?;
        writeln!(file, "{}", columns.join(","))?;
        Ok(Self { file })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.file, "{}", cells.join(","))?;
        self.file.flush()?;
        Ok(())
    }
}

fn log_spaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (la, lb) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (la + (lb - la) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// One surface cell: probabilities and error at a (dim, per-joint drift)
/// grid point under the given band half-width policy.
struct SurfaceCell {
    dim: usize,
    nu0: f64,
    nu_norm: f64,
    eps_eff: f64,
    p_exact: f64,
    p_approx: f64,
    abs_err: f64,
    dev_from_dim1: f64,
}

fn surface_cells(
    epsilon: f64,
    dim_max: usize,
    nu0s: &[f64],
    compensated: bool,
) -> Result<Vec<SurfaceCell>> {
    let mut cells = Vec::with_capacity(dim_max * nu0s.len());
    for &nu0 in nu0s {
        let p_ref = unclipped_prob_exact(epsilon, nu0)?;
        for dim in 1..=dim_max {
            let nu_norm = nu0 * (dim as f64).sqrt();
            let eps_eff = if compensated {
                compensated_epsilon(epsilon, dim)
            } else {
                epsilon
            };
            let p_exact = unclipped_prob_exact(eps_eff, nu_norm)?;
            let p_approx = unclipped_prob_approx(eps_eff, nu_norm)?;
            cells.push(SurfaceCell {
                dim,
                nu0,
                nu_norm,
                eps_eff,
                p_exact,
                p_approx,
                abs_err: (p_approx - p_exact).abs(),
                dev_from_dim1: p_exact - p_ref,
            });
        }
    }
    // Canonical order: dimension-major, drift within.
    cells.sort_by(|a, b| (a.dim, a.nu0).partial_cmp(&(b.dim, b.nu0)).unwrap());
    Ok(cells)
}

const SURFACE_COLUMNS: [&str; 8] = [
    "dim",
    "nu0",
    "nu_norm",
    "eps_eff",
    "p_exact",
    "p_approx",
    "abs_err",
    "dev_from_dim1",
];

fn write_surface(path: &Path, cells: &[SurfaceCell]) -> Result<()> {
    let mut csv = CsvWriter::create(path, &SURFACE_COLUMNS)?;
    for c in cells {
        csv.row(&[
            c.dim.to_string(),
            fmt_sig(c.nu0),
            fmt_sig(c.nu_norm),
            fmt_sig(c.eps_eff),
            fmt_sig(c.p_exact),
            fmt_sig(c.p_approx),
            fmt_sig(c.abs_err),
            fmt_sig(c.dev_from_dim1),
        ])?;
    }
    Ok(())
}

pub fn run_prob_surface(args: &ProbSurfaceArgs) -> Result<()> {
    if args.epsilon <= 0.0 || !args.epsilon.is_finite() {
        return Err(Error::RejectedInput(format!(
            "epsilon must be positive, got {}",
            args.epsilon
        )));
    }
    if args.dim_max == 0 || args.nu0_points == 0 {
        return Err(Error::RejectedInput(
            "dim_max and nu0_points must be positive".into(),
        ));
    }
    if !(args.nu0_min > 0.0 && args.nu0_max >= args.nu0_min) {
        return Err(Error::RejectedInput(format!(
            "need 0 < nu0_min <= nu0_max, got [{}, {}]",
            args.nu0_min, args.nu0_max
        )));
    }
    fs::create_dir_all(&args.out)?;
    let nu0s = log_spaced(args.nu0_min, args.nu0_max, args.nu0_points);

    let plain = surface_cells(args.epsilon, args.dim_max, &nu0s, false)?;
    let comp = surface_cells(args.epsilon, args.dim_max, &nu0s, true)?;
    write_surface(&args.out.join("surface.csv"), &plain)?;
    write_surface(&args.out.join("surface_compensated.csv"), &comp)?;

    let worst = plain
        .iter()
        .max_by(|a, b| a.abs_err.partial_cmp(&b.abs_err).unwrap())
        .expect("grid is non-empty");

    // Fixed-drift slice across dimensions, both policies side by side.
    let p_ref = unclipped_prob_exact(args.epsilon, args.fixed_nu0)?;
    let mut fixed = CsvWriter::create(
        &args.out.join("fixed_nu0.csv"),
        &[
            "dim",
            "nu_norm",
            "eps_eff_comp",
            "p_exact_plain",
            "p_exact_comp",
            "dev_plain",
            "dev_comp",
        ],
    )?;
    let mut max_dev_comp = 0.0f64;
    let mut min_plain = f64::INFINITY;
    let mut max_plain = f64::NEG_INFINITY;
    for dim in 1..=args.dim_max {
        let nu_norm = args.fixed_nu0 * (dim as f64).sqrt();
        let eps_comp = compensated_epsilon(args.epsilon, dim);
        let p_plain = unclipped_prob_exact(args.epsilon, nu_norm)?;
        let p_comp = unclipped_prob_exact(eps_comp, nu_norm)?;
        max_dev_comp = max_dev_comp.max((p_comp - p_ref).abs());
        min_plain = min_plain.min(p_plain);
        max_plain = max_plain.max(p_plain);
        fixed.row(&[
            dim.to_string(),
            fmt_sig(nu_norm),
            fmt_sig(eps_comp),
            fmt_sig(p_plain),
            fmt_sig(p_comp),
            fmt_sig(p_plain - p_ref),
            fmt_sig(p_comp - p_ref),
        ])?;
    }

    let mut summary = CsvWriter::create(&args.out.join("summary.csv"), &["key", "value"])?;
    for (key, value) in [
        ("epsilon", fmt_sig(args.epsilon)),
        ("max_abs_err", fmt_sig(worst.abs_err)),
        ("max_abs_err_dim", worst.dim.to_string()),
        ("max_abs_err_nu0", fmt_sig(worst.nu0)),
        ("max_abs_err_nu_norm", fmt_sig(worst.nu_norm)),
        (
            "clamp_boundary_nu_norm",
            fmt_sig(sqrt_2_over_pi() * args.epsilon),
        ),
        ("fixed_nu0", fmt_sig(args.fixed_nu0)),
        ("fixed_max_dev_comp", fmt_sig(max_dev_comp)),
        ("fixed_spread_plain", fmt_sig(max_plain - min_plain)),
    ] {
        summary.row(&[key.to_string(), value])?;
    }

    println!(
        "wrote {} cells per surface; max |approx - exact| = {} at dim {}, per-joint drift {}",
        plain.len(),
        fmt_sig(worst.abs_err),
        worst.dim,
        fmt_sig(worst.nu0)
    );
    Ok(())
}

pub fn run_mc_validate(args: &McValidateArgs) -> Result<()> {
    if args.samples < 1000 {
        return Err(Error::RejectedInput(format!(
            "samples must be at least 1000, got {}",
            args.samples
        )));
    }
    if args.epsilon <= 0.0 || !args.epsilon.is_finite() {
        return Err(Error::RejectedInput(format!(
            "epsilon must be positive, got {}",
            args.epsilon
        )));
    }
    fs::create_dir_all(&args.out)?;
    let dims = [1usize, 2, 4, 8, 16];
    let nu0s = [0.02, 0.05, 0.1, 0.2, 0.3];
    let etas = [1.0, 0.95, 1.05];
    let eps = args.epsilon;

    let mut csv = CsvWriter::create(
        &args.out.join("mc.csv"),
        &[
            "eta",
            "band",
            "dim",
            "nu0",
            "nu_norm",
            "samples",
            "unclipped_frac",
            "p_ref",
            "z_score",
            "quad_err_max",
        ],
    )?;

    let mut cell_index = 0u64;
    let mut all_eta1_z_ok = true;
    for &eta in &etas {
        for &dim in &dims {
            for &nu0 in &nu0s {
                cell_index += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                rng.set_stream(cell_index);
                let nu_norm = nu0 * (dim as f64).sqrt();
                // Reference: the eta = 1 closed form. For eta != 1 rows the
                // z-score measures the deviation that the quadratic term
                // introduces, signed.
                let p_ref = unclipped_prob_exact(eps, nu_norm)?;

                let mut in_log = 0u64;
                let mut in_ratio = 0u64;
                let mut quad_err_max = 0.0f64;
                let (mu_new, sigma_new) = (nu0 * eta, eta);
                for _ in 0..args.samples {
                    let mut log_r = 0.0;
                    for _ in 0..dim {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let lr = marginal_log_ratio(nu0, eta, z)?;
                        log_r += lr;
                        if eta != 1.0 {
                            // Same quantity straight from the two densities
                            // at a = mu_old + sigma_old z with mu_old = 0,
                            // sigma_old = 1.
                            let a = z;
                            let direct = -0.5 * ((a - mu_new) / sigma_new).powi(2)
                                - sigma_new.ln()
                                + 0.5 * a * a;
                            quad_err_max = quad_err_max.max((lr - direct).abs());
                        }
                    }
                    if log_r.abs() <= eps {
                        in_log += 1;
                    }
                    let r = log_r.exp();
                    if r >= 1.0 - eps && r <= 1.0 + eps {
                        in_ratio += 1;
                    }
                }

                let n = args.samples as f64;
                let sigma_frac = (p_ref * (1.0 - p_ref) / n).sqrt();
                let mut emit = |band: &str, count: u64| -> Result<()> {
                    let frac = count as f64 / n;
                    let z = if sigma_frac > 0.0 {
                        (frac - p_ref) / sigma_frac
                    } else {
                        0.0
                    };
                    if eta == 1.0 && band == "log" && z.abs() >= 3.0 {
                        all_eta1_z_ok = false;
                    }
                    csv.row(&[
                        fmt_sig(eta),
                        band.to_string(),
                        dim.to_string(),
                        fmt_sig(nu0),
                        fmt_sig(nu_norm),
                        args.samples.to_string(),
                        fmt_sig(frac),
                        fmt_sig(p_ref),
                        fmt_sig(z),
                        if eta == 1.0 {
                            String::new()
                        } else {
                            fmt_sig(quad_err_max)
                        },
                    ])
                };
                emit("log", in_log)?;
                if eta == 1.0 {
                    emit("ratio", in_ratio)?;
                }
            }
        }
    }
    println!(
        "wrote mc.csv; eta = 1 log-band cells all within 3 sigma: {}",
        if all_eta1_z_ok { "yes" } else { "NO" }
    );
    Ok(())
}

pub fn run_trpo_scaling(args: &TrpoScalingArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let dims = parse_dims(&args.dims)?;
    // Base curvature: one Gaussian action head in (mean, log scale) at the
    // trainer's initial scale.
    let base_policy = DiagonalGaussian::with_shared_log_std(vec![0.0], -0.5)?;
    let base_fisher = fisher_diag_gaussian(&base_policy);
    let g = [1.0, 0.5];

    let synthetic = scaling_experiment(&dims, &base_fisher, &g, args.delta, args.beta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mc = scaling_experiment_mc(
        &dims,
        (-0.5f64).exp(),
        &g,
        args.delta,
        args.beta,
        args.samples,
        &mut rng,
    )?;

    let write_table = |path: &Path, table: &ScalingTable| -> Result<()> {
        let mut csv = CsvWriter::create(path, &["dim", "trpo_norm", "beta_norm"])?;
        for r in &table.rows {
            csv.row(&[
                r.dim.to_string(),
                fmt_sig(r.trpo_norm),
                fmt_sig(r.beta_norm),
            ])?;
        }
        Ok(())
    };
    write_table(&args.out.join("synthetic.csv"), &synthetic)?;
    write_table(&args.out.join("monte_carlo.csv"), &mc)?;

    let slope_cell = |s: Option<f64>| s.map(fmt_sig).unwrap_or_default();
    let mut summary = CsvWriter::create(&args.out.join("scaling_summary.csv"), &["key", "value"])?;
    for (key, value) in [
        ("delta", fmt_sig(args.delta)),
        ("beta", fmt_sig(args.beta)),
        ("slope_trpo_synthetic", slope_cell(synthetic.trpo_slope)),
        ("slope_beta_synthetic", slope_cell(synthetic.beta_slope)),
        ("slope_trpo_mc", slope_cell(mc.trpo_slope)),
        ("slope_beta_mc", slope_cell(mc.beta_slope)),
    ] {
        summary.row(&[key.to_string(), value])?;
    }
    match (synthetic.trpo_slope, synthetic.beta_slope) {
        (Some(t), Some(b)) => println!(
            "synthetic slopes: trust-region {}, fixed-scale {}",
            fmt_sig(t),
            fmt_sig(b)
        ),
        _ => println!("single dimension: slopes not defined"),
    }
    Ok(())
}

fn metrics_cells(m: &UpdateMetrics) -> Vec<String> {
    let mut cells = Vec::with_capacity(METRICS_COLUMNS.len());
    cells.push(m.timestep.to_string());
    cells.push(m.mean_ep_reward.map(fmt_sig).unwrap_or_default());
    cells.push(fmt_sig(m.policy_loss));
    cells.push(fmt_sig(m.value_loss));
    cells.push(fmt_sig(m.entropy));
    cells.push(fmt_sig(m.approx_kl));
    for dim in 2..=10 {
        cells.push(
            m.clip_fractions
                .get(&dim)
                .map(|f| fmt_sig(*f))
                .unwrap_or_default(),
        );
    }
    cells.push(fmt_sig(m.clip_spread));
    cells
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let (cfg, raw) = load_config(&args.config)?;
    let ckpt_dir = args.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    // Byte-exact provenance copy of the config that produced this run.
    fs::write(args.out.join("config.toml"), &raw)?;
    let mut metrics = CsvWriter::create(&args.out.join("metrics.csv"), &METRICS_COLUMNS)?;

    let started = std::time::Instant::now();
    let out = train(&cfg.train, &cfg.env, |ev| match ev {
        TrainEvent::Update(m) => {
            metrics.row(&metrics_cells(m))?;
            println!(
                "update {:4}  timestep {:8}  reward {}  kl {}  clip spread {}",
                m.update,
                m.timestep,
                m.mean_ep_reward
                    .map(fmt_sig)
                    .unwrap_or_else(|| "-".to_string()),
                fmt_sig(m.approx_kl),
                fmt_sig(m.clip_spread)
            );
            Ok(())
        }
        TrainEvent::Checkpoint { timestep, bytes } => {
            let path = ckpt_dir.join(format!("checkpoint_{timestep:09}.json"));
            fs::write(&path, bytes)?;
            println!("checkpoint at timestep {timestep} -> {}", path.display());
            Ok(())
        }
    })?;
    println!(
        "finished {} timesteps in {} updates ({:.0} s)",
        out.final_timestep,
        out.metrics.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let bytes = fs::read(&args.checkpoint)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", args.checkpoint.display())))?;
    let checkpoint = load_checkpoint(&bytes)?;
    let env_cfg = match &args.config {
        Some(path) => load_config(path)?.0.env,
        None => EnvConfig::default(),
    };
    let dims = parse_dims(&args.dims)?;
    fs::create_dir_all(&args.out)?;
    let evals = evaluate(&checkpoint.net, &env_cfg, &dims, args.episodes, args.seed)?;
    let mut csv = CsvWriter::create(
        &args.out.join("eval.csv"),
        &["dim", "episodes", "mean_reward", "std_reward"],
    )?;
    for e in &evals {
        csv.row(&[
            e.dim.to_string(),
            e.episode_returns.len().to_string(),
            fmt_sig(e.mean),
            fmt_sig(e.std),
        ])?;
        println!(
            "dim {:3}: mean reward {} (std {})",
            e.dim,
            fmt_sig(e.mean),
            fmt_sig(e.std)
        );
    }
    Ok(())
}

/// Reads a CSV produced by [`CsvWriter`]: skips `#` comment lines, returns
/// (header, rows) as strings.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: no header line", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn column_index(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
}

pub fn run_figure_data(args: &FigureDataArgs) -> Result<()> {
    let metrics_path = args.run.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::MissingInput(format!(
            "{} (is this a training run directory?)",
            metrics_path.display()
        )));
    }
    fs::create_dir_all(&args.out)?;

    // Theory surfaces at the same defaults as prob-surface.
    let nu0s = log_spaced(0.005, 0.5, 60);
    let plain = surface_cells(args.epsilon, 32, &nu0s, false)?;
    let comp = surface_cells(args.epsilon, 32, &nu0s, true)?;
    write_surface(&args.out.join("fig_surface.csv"), &plain)?;
    write_surface(&args.out.join("fig_surface_compensated.csv"), &comp)?;

    // Clip-fraction traces: pass the stored cells through untouched.
    let (header, rows) = read_csv(&metrics_path)?;
    let ts_idx = column_index(&header, "timestep", &metrics_path)?;
    let reward_idx = column_index(&header, "mean_ep_reward", &metrics_path)?;
    let spread_idx = column_index(&header, "clip_spread", &metrics_path)?;
    let frac_idx: Vec<usize> = (2..=10)
        .map(|d| column_index(&header, &format!("clip_frac_dim_{d}"), &metrics_path))
        .collect::<Result<_>>()?;

    let mut clip_cols: Vec<&str> = vec!["timestep"];
    let frac_names: Vec<String> = (2..=10).map(|d| format!("clip_frac_dim_{d}")).collect();
    clip_cols.extend(frac_names.iter().map(String::as_str));
    clip_cols.push("clip_spread");
    let mut clip_csv = CsvWriter::create(&args.out.join("fig_clip_fractions.csv"), &clip_cols)?;
    let mut reward_csv = CsvWriter::create(
        &args.out.join("fig_reward.csv"),
        &["timestep", "mean_ep_reward"],
    )?;
    for row in &rows {
        let mut cells = vec![row[ts_idx].clone()];
        for &i in &frac_idx {
            cells.push(row[i].clone());
        }
        cells.push(row[spread_idx].clone());
        clip_csv.row(&cells)?;
        reward_csv.row(&[row[ts_idx].clone(), row[reward_idx].clone()])?;
    }

    // Evaluation traces from the snapshots.
    let dims = parse_dims(&args.dims)?;
    let mut trace_csv = CsvWriter::create(
        &args.out.join("fig_eval_traces.csv"),
        &["timestep", "dim", "mean_reward", "std_reward"],
    )?;
    let ckpt_dir = args.run.join("checkpoints");
    let mut checkpoints: Vec<(u64, PathBuf)> = Vec::new();
    if ckpt_dir.is_dir() {
        for entry in fs::read_dir(&ckpt_dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(ts) = name
                .strip_prefix("checkpoint_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                checkpoints.push((ts, path));
            }
        }
    }
    checkpoints.sort();
    if !checkpoints.is_empty() {
        let env_cfg = load_config(&args.run.join("config.toml"))?.0.env;
        for (ts, path) in &checkpoints {
            let checkpoint = load_checkpoint(&fs::read(path)?)?;
            let evals = evaluate(&checkpoint.net, &env_cfg, &dims, args.episodes, args.seed)?;
            for e in &evals {
                trace_csv.row(&[
                    ts.to_string(),
                    e.dim.to_string(),
                    fmt_sig(e.mean),
                    fmt_sig(e.std),
                ])?;
            }
        }
    }
    println!(
        "wrote figure bundles: {} metric rows, {} snapshots evaluated",
        rows.len(),
        checkpoints.len()
    );
    Ok(())
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::ProbSurface(a) => run_prob_surface(a),
        Command::McValidate(a) => run_mc_validate(a),
        Command::TrpoScaling(a) => run_trpo_scaling(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::FigureData(a) => run_figure_data(a),
    }
}
