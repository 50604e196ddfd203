//! Planar chain swimmer in a viscous medium.
//!
//! The body is a chain of rigid links joined by torque-driven hinges. Links
//! feel anisotropic drag at their midpoints (strong broadside, weak along the
//! axis), which is what lets an undulating chain push itself forward, plus a
//! rotational drag moment from the same broadside profile that resists each
//! link spinning in place. The
//! generalized coordinates are the root position, the root yaw, and one
//! relative angle per joint; dynamics come from assembling the chain's mass
//! matrix from per-link Jacobians and solving `M qdd = Q` each substep with a
//! semi-implicit Euler update.
//!
//! Observations are graphs: one node per joint carrying `[angle, angular
//! velocity]`, bidirectional edges between adjacent joints, and a per-body
//! global feature block `[yaw, yaw rate, vx, vy]`. Because the graph is built
//! from the chain, the same policy weights apply to a chain of any length.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

/// Physical and episode parameters for the chain swimmer.
///
/// Angles are radians, lengths meters, masses kilograms. Drag coefficients
/// are per unit length, so the force on a link scales with `link_length`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of rigid links; the chain has `n_links - 1` actuated joints.
    pub n_links: usize,
    /// Integrator substep in seconds.
    pub dt: f64,
    /// Substeps per control step.
    pub frame_skip: usize,
    pub link_length: f64,
    pub link_mass: f64,
    /// Drag coefficient for motion perpendicular to a link.
    pub normal_drag: f64,
    /// Drag coefficient for motion along a link.
    pub tangential_drag: f64,
    /// Peak joint torque; actions in [-1, 1] scale up to this.
    pub torque_limit: f64,
    /// Hard stop on each joint angle, symmetric about zero, radians.
    pub joint_stop: f64,
    /// Control steps before an episode is truncated.
    pub max_episode_steps: usize,
    pub forward_reward_weight: f64,
    pub ctrl_cost_weight: f64,
    /// Reset draws yaw and joint angles uniformly from +/- this, radians.
    pub reset_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_links: 3,
            dt: 0.01,
            frame_skip: 4,
            link_length: 0.1,
            link_mass: 0.01,
            normal_drag: 1.5,
            tangential_drag: 0.3,
            torque_limit: 1e-3,
            joint_stop: 100.0 * std::f64::consts::PI / 180.0,
            max_episode_steps: 1000,
            forward_reward_weight: 1.0,
            ctrl_cost_weight: 1e-4,
            reset_noise: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_links < 2 {
            return Err(Error::RejectedInput(format!(
                "n_links must be at least 2, got {}",
                self.n_links
            )));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("link_length", self.link_length),
            ("link_mass", self.link_mass),
            ("joint_stop", self.joint_stop),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::RejectedInput(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("normal_drag", self.normal_drag),
            ("tangential_drag", self.tangential_drag),
            ("torque_limit", self.torque_limit),
            ("forward_reward_weight", self.forward_reward_weight),
            ("ctrl_cost_weight", self.ctrl_cost_weight),
            ("reset_noise", self.reset_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::RejectedInput(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if self.frame_skip == 0 {
            return Err(Error::RejectedInput("frame_skip must be positive".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::RejectedInput(
                "max_episode_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Full generalized state of the swimmer, in named form.
#[derive(Debug, Clone, PartialEq)]
pub struct SwimmerState {
    pub root_position: [f64; 2],
    pub root_yaw: f64,
    pub joint_angles: Vec<f64>,
    pub root_velocity: [f64; 2],
    pub yaw_rate: f64,
    pub joint_velocities: Vec<f64>,
}

impl SwimmerState {
    /// Reflection across the x axis: the swimmer's mirror image.
    pub fn mirrored(&self) -> SwimmerState {
        SwimmerState {
            root_position: [self.root_position[0], -self.root_position[1]],
            root_yaw: -self.root_yaw,
            joint_angles: self.joint_angles.iter().map(|a| -a).collect(),
            root_velocity: [self.root_velocity[0], -self.root_velocity[1]],
            yaw_rate: -self.yaw_rate,
            joint_velocities: self.joint_velocities.iter().map(|v| -v).collect(),
        }
    }
}

/// A body observation in graph form: one node per joint, edges between
/// adjacent joints, and one global feature block for the whole body.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphObservation {
    /// Per-node `[joint angle, joint angular velocity]`.
    pub node_features: Vec<[f64; 2]>,
    /// Directed edges as `(source node, target node)` index pairs.
    pub edges: Vec<(usize, usize)>,
    /// Per-edge `[index offset (+1 or -1), link length]`.
    pub edge_features: Vec<[f64; 2]>,
    /// `[yaw, yaw rate, root vx, root vy]`.
    pub global_features: [f64; 4],
}

impl GraphObservation {
    /// Number of nodes, which equals the action dimension.
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: GraphObservation,
    pub reward: f64,
    /// Always false for the swimmer; kept so rollout code handles
    /// terminating tasks without special cases.
    pub terminated: bool,
    pub truncated: bool,
}

/// Parameters the dynamics core needs, separated from episode bookkeeping so
/// tests can drive the equations of motion directly.
#[derive(Debug, Clone, Copy)]
struct ChainParams {
    n_links: usize,
    link_length: f64,
    link_mass: f64,
    normal_drag: f64,
    tangential_drag: f64,
}

impl ChainParams {
    fn dof(&self) -> usize {
        self.n_links + 2
    }
}

/// Scratch buffers for the dynamics assembly, reused across substeps.
#[derive(Debug, Default)]
struct Scratch {
    alpha: Vec<f64>,
    cos_a: Vec<f64>,
    sin_a: Vec<f64>,
    adot: Vec<f64>,
    jac: Vec<f64>,
    mass: Vec<f64>,
    rhs: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, p: &ChainParams) {
        let dof = p.dof();
        self.alpha.resize(p.n_links, 0.0);
        self.cos_a.resize(p.n_links, 0.0);
        self.sin_a.resize(p.n_links, 0.0);
        self.adot.resize(p.n_links, 0.0);
        self.jac.resize(2 * dof, 0.0);
        self.mass.resize(dof * dof, 0.0);
        self.rhs.resize(dof, 0.0);
    }
}

/// Sine and cosine evaluated on `|a|` with the sine's sign reattached, so a
/// mirrored state produces bitwise-mirrored trigonometry regardless of the
/// platform libm.
fn sym_cos_sin(a: f64) -> (f64, f64) {
    let mag = a.abs();
    let (s, c) = mag.sin_cos();
    (c, if a.is_sign_negative() { -s } else { s })
}

/// Fills `s.alpha/cos_a/sin_a/adot` with per-link absolute angles, their
/// trigonometry, and per-link absolute angular rates.
fn link_angles(p: &ChainParams, q: &[f64], v: &[f64], s: &mut Scratch) {
    s.alpha[0] = q[2];
    s.adot[0] = v[2];
    for l in 1..p.n_links {
        s.alpha[l] = s.alpha[l - 1] + q[2 + l];
        s.adot[l] = s.adot[l - 1] + v[2 + l];
    }
    for l in 0..p.n_links {
        let (c, sn) = sym_cos_sin(s.alpha[l]);
        s.cos_a[l] = c;
        s.sin_a[l] = sn;
    }
}

/// Writes link `l`'s midpoint Jacobian (2 x dof, row-major) into `s.jac`.
///
/// The midpoint is the root plus the full preceding links plus half of link
/// `l`, so the column for angle coordinate `a` accumulates the turning
/// directions of every link between `a` and `l`.
fn link_jacobian(p: &ChainParams, l: usize, s: &mut Scratch) {
    let dof = p.dof();
    let len = p.link_length;
    s.jac.iter_mut().for_each(|x| *x = 0.0);
    s.jac[0] = 1.0;
    s.jac[dof + 1] = 1.0;
    let mut tx = -0.5 * len * s.sin_a[l];
    let mut ty = 0.5 * len * s.cos_a[l];
    for a in (0..=l).rev() {
        let col = 2 + a;
        s.jac[col] = tx;
        s.jac[dof + col] = ty;
        if a > 0 {
            tx += -len * s.sin_a[a - 1];
            ty += len * s.cos_a[a - 1];
        }
    }
}

/// Cholesky factorization and solve of a symmetric positive definite system,
/// in place: `a` (n x n, row-major) is overwritten with its lower factor and
/// `b` with the solution.
fn cholesky_solve_in_place(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(Error::NotPositiveDefinite);
                }
                a[i * n + i] = acc.sqrt();
            } else {
                a[i * n + j] = acc / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= a[i * n + k] * b[k];
        }
        b[i] = acc / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in i + 1..n {
            acc -= a[k * n + i] * b[k];
        }
        b[i] = acc / a[i * n + i];
    }
    Ok(())
}

/// Computes generalized accelerations for the chain.
///
/// `q` and `v` are `[x, y, yaw, joint angles...]` and their rates
/// (`n_links + 2` entries); `torques` has one entry per joint. The result is
/// written into `accel`. Link order fixes the floating-point summation
/// order, so results are reproducible across runs.
fn chain_accelerations(
    p: &ChainParams,
    q: &[f64],
    v: &[f64],
    torques: &[f64],
    s: &mut Scratch,
    accel: &mut [f64],
) -> Result<()> {
    let dof = p.dof();
    debug_assert_eq!(q.len(), dof);
    debug_assert_eq!(v.len(), dof);
    debug_assert_eq!(torques.len(), p.n_links - 1);
    debug_assert_eq!(accel.len(), dof);

    s.resize(p);
    link_angles(p, q, v, s);
    s.mass.iter_mut().for_each(|x| *x = 0.0);
    s.rhs.iter_mut().for_each(|x| *x = 0.0);

    let len = p.link_length;
    let mass = p.link_mass;
    let inertia = mass * len * len / 12.0;

    // Running sums of full preceding-link centripetal terms; link l adds its
    // own half-length term on top.
    let mut cent_x = 0.0;
    let mut cent_y = 0.0;

    for l in 0..p.n_links {
        link_jacobian(p, l, s);

        // Midpoint velocity.
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (c, &vc) in v.iter().enumerate() {
            vx += s.jac[c] * vc;
            vy += s.jac[dof + c] * vc;
        }

        // Anisotropic drag at the midpoint, plus the first moment of the
        // broadside drag profile: a rod spinning about its own center sweeps
        // fluid even though its midpoint is still, giving a restoring moment
        // of -c_n L^3/12 times the spin rate.
        let (tc, ts) = (s.cos_a[l], s.sin_a[l]);
        let vt = vx * tc + vy * ts;
        let vn = -vx * ts + vy * tc;
        let ft = -p.tangential_drag * len * vt;
        let fn_ = -p.normal_drag * len * vn;
        let fx = ft * tc - fn_ * ts;
        let fy = ft * ts + fn_ * tc;
        let spin_moment = -p.normal_drag * len * len * len / 12.0 * s.adot[l];

        // Centripetal contribution to the midpoint acceleration.
        let w2 = s.adot[l] * s.adot[l];
        let hx = -(cent_x + 0.5 * len * tc * w2);
        let hy = -(cent_y + 0.5 * len * ts * w2);
        cent_x += len * tc * w2;
        cent_y += len * ts * w2;

        // Generalized force: J^T (F - m h) folds drag and bias together;
        // the spin moment acts on every angle coordinate steering this link.
        let gx = fx - mass * hx;
        let gy = fy - mass * hy;
        for c in 0..dof {
            s.rhs[c] += s.jac[c] * gx + s.jac[dof + c] * gy;
        }
        for c in 2..=2 + l {
            s.rhs[c] += spin_moment;
        }

        // Mass matrix: translational part from the Jacobian, rotational part
        // over the angle coordinates that steer this link.
        for r in 0..dof {
            let jxr = s.jac[r];
            let jyr = s.jac[dof + r];
            if jxr == 0.0 && jyr == 0.0 {
                continue;
            }
            for c in r..dof {
                s.mass[r * dof + c] += mass * (jxr * s.jac[c] + jyr * s.jac[dof + c]);
            }
        }
        for r in 2..=2 + l {
            for c in r..=2 + l {
                s.mass[r * dof + c] += inertia;
            }
        }
    }

    for (i, tau) in torques.iter().enumerate() {
        s.rhs[3 + i] += tau;
    }

    for r in 0..dof {
        for c in 0..r {
            s.mass[r * dof + c] = s.mass[c * dof + r];
        }
    }

    accel.copy_from_slice(&s.rhs);
    cholesky_solve_in_place(&mut s.mass, dof, accel)
}

/// Kinetic energy of the chain at `(q, v)`.
fn chain_kinetic_energy(p: &ChainParams, q: &[f64], v: &[f64], s: &mut Scratch) -> f64 {
    let dof = p.dof();
    s.resize(p);
    link_angles(p, q, v, s);
    let inertia = p.link_mass * p.link_length * p.link_length / 12.0;
    let mut ke = 0.0;
    for l in 0..p.n_links {
        link_jacobian(p, l, s);
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (c, &vc) in v.iter().enumerate() {
            vx += s.jac[c] * vc;
            vy += s.jac[dof + c] * vc;
        }
        ke += 0.5 * p.link_mass * (vx * vx + vy * vy);
        ke += 0.5 * inertia * s.adot[l] * s.adot[l];
    }
    ke
}

/// Draws an action dimension uniformly from `lo..=hi`.
pub fn sample_dim<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    assert!(lo >= 1 && lo <= hi, "invalid dimension range {lo}..={hi}");
    rng.random_range(lo..=hi)
}

/// The swimmer environment: owns episode state and scratch buffers.
#[derive(Debug)]
pub struct SwimmerEnv {
    cfg: EnvConfig,
    n_links: usize,
    q: Vec<f64>,
    v: Vec<f64>,
    torques: Vec<f64>,
    steps_taken: usize,
    scratch: Scratch,
    accel: Vec<f64>,
}

impl SwimmerEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let n_links = cfg.n_links;
        let dof = n_links + 2;
        let mut env = Self {
            cfg,
            n_links,
            q: vec![0.0; dof],
            v: vec![0.0; dof],
            torques: vec![0.0; n_links - 1],
            steps_taken: 0,
            scratch: Scratch::default(),
            accel: vec![0.0; dof],
        };
        env.scratch.resize(&env.params());
        Ok(env)
    }

    fn params(&self) -> ChainParams {
        ChainParams {
            n_links: self.n_links,
            link_length: self.cfg.link_length,
            link_mass: self.cfg.link_mass,
            normal_drag: self.cfg.normal_drag,
            tangential_drag: self.cfg.tangential_drag,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn n_links(&self) -> usize {
        self.n_links
    }

    /// Number of actuated joints, equal to the action and node count.
    pub fn action_dim(&self) -> usize {
        self.n_links - 1
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Changes the chain length; the state resets to the zero pose.
    pub fn set_n_links(&mut self, n_links: usize) -> Result<()> {
        if n_links < 2 {
            return Err(Error::RejectedInput(format!(
                "n_links must be at least 2, got {n_links}"
            )));
        }
        self.n_links = n_links;
        let dof = n_links + 2;
        self.q = vec![0.0; dof];
        self.v = vec![0.0; dof];
        self.torques = vec![0.0; n_links - 1];
        self.accel = vec![0.0; dof];
        self.steps_taken = 0;
        self.scratch.resize(&self.params());
        Ok(())
    }

    /// Starts an episode from the exact zero pose, for reproducible probes.
    pub fn reset_zero(&mut self) -> GraphObservation {
        self.q.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.steps_taken = 0;
        self.observation()
    }

    /// Starts an episode with yaw and joint angles drawn from the reset
    /// noise range and all velocities zero.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> GraphObservation {
        self.reset_zero();
        let noise = self.cfg.reset_noise;
        if noise > 0.0 {
            for i in 2..self.q.len() {
                self.q[i] = rng.random_range(-noise..=noise);
            }
        }
        self.observation()
    }

    pub fn state(&self) -> SwimmerState {
        SwimmerState {
            root_position: [self.q[0], self.q[1]],
            root_yaw: self.q[2],
            joint_angles: self.q[3..].to_vec(),
            root_velocity: [self.v[0], self.v[1]],
            yaw_rate: self.v[2],
            joint_velocities: self.v[3..].to_vec(),
        }
    }

    /// Overwrites the dynamic state; the step counter is left unchanged.
    pub fn set_state(&mut self, state: &SwimmerState) -> Result<()> {
        let m = self.action_dim();
        if state.joint_angles.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: state.joint_angles.len(),
            });
        }
        if state.joint_velocities.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: state.joint_velocities.len(),
            });
        }
        check_finite(&state.root_position, "root_position")?;
        check_finite(&state.joint_angles, "joint_angles")?;
        check_finite(&state.root_velocity, "root_velocity")?;
        check_finite(&state.joint_velocities, "joint_velocities")?;
        crate::error::check_finite_scalar(state.root_yaw, "root_yaw")?;
        crate::error::check_finite_scalar(state.yaw_rate, "yaw_rate")?;
        self.q[0] = state.root_position[0];
        self.q[1] = state.root_position[1];
        self.q[2] = state.root_yaw;
        self.q[3..].copy_from_slice(&state.joint_angles);
        self.v[0] = state.root_velocity[0];
        self.v[1] = state.root_velocity[1];
        self.v[2] = state.yaw_rate;
        self.v[3..].copy_from_slice(&state.joint_velocities);
        Ok(())
    }

    /// Builds the graph observation for the current state.
    pub fn observation(&self) -> GraphObservation {
        let m = self.action_dim();
        let node_features: Vec<[f64; 2]> = (0..m).map(|i| [self.q[3 + i], self.v[3 + i]]).collect();
        let mut edges = Vec::with_capacity(2 * m.saturating_sub(1));
        let mut edge_features = Vec::with_capacity(edges.capacity());
        for i in 0..m.saturating_sub(1) {
            edges.push((i, i + 1));
            edge_features.push([1.0, self.cfg.link_length]);
            edges.push((i + 1, i));
            edge_features.push([-1.0, self.cfg.link_length]);
        }
        GraphObservation {
            node_features,
            edges,
            edge_features,
            global_features: [self.q[2], self.v[2], self.v[0], self.v[1]],
        }
    }

    pub fn kinetic_energy(&mut self) -> f64 {
        let p = self.params();
        chain_kinetic_energy(&p, &self.q, &self.v, &mut self.scratch)
    }

    /// One integrator substep under fixed joint torques.
    fn substep(&mut self, dt: f64) -> Result<()> {
        let p = self.params();
        chain_accelerations(&p, &self.q, &self.v, &self.torques, &mut self.scratch, &mut self.accel)?;
        for i in 0..self.v.len() {
            self.v[i] += dt * self.accel[i];
        }
        for i in 0..self.q.len() {
            self.q[i] += dt * self.v[i];
        }
        let stop = self.cfg.joint_stop;
        for j in 3..self.q.len() {
            if self.q[j] > stop {
                self.q[j] = stop;
                self.v[j] = 0.0;
            } else if self.q[j] < -stop {
                self.q[j] = -stop;
                self.v[j] = 0.0;
            }
        }
        Ok(())
    }

    /// Applies one control step: actions are clamped into `[-1, 1]`, scaled
    /// by the torque limit, and held for `frame_skip` substeps. The reward is
    /// the root's average forward (x) speed over the step minus a quadratic
    /// control cost on the clamped action.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let m = self.action_dim();
        if action.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: action.len(),
            });
        }
        check_finite(action, "action")?;

        let mut ctrl_cost = 0.0;
        for (i, a) in action.iter().enumerate() {
            let clamped = a.clamp(-1.0, 1.0);
            self.torques[i] = clamped * self.cfg.torque_limit;
            ctrl_cost += clamped * clamped;
        }

        let x_before = self.q[0];
        for _ in 0..self.cfg.frame_skip {
            self.substep(self.cfg.dt)?;
        }
        let elapsed = self.cfg.dt * self.cfg.frame_skip as f64;
        let forward_speed = (self.q[0] - x_before) / elapsed;

        self.steps_taken += 1;
        let reward = self.cfg.forward_reward_weight * forward_speed
            - self.cfg.ctrl_cost_weight * ctrl_cost;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminated: false,
            truncated: self.steps_taken >= self.cfg.max_episode_steps,
        })
    }
}
