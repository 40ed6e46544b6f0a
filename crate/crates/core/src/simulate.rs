//! Euler–Maruyama ensembles of the uncontrolled, controlled and time-reversed
//! dynamics, with per-node moments and control-energy accounting.
//!
//! Every path draws from its own ChaCha stream selected by `(seed, path index)`
//! and paths are reduced in fixed blocks in index order, so results do not
//! depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge_core::BridgeSolution;
use crate::dynamics::LinearSystem;
use crate::error::{BridgeError, Result};
use crate::psd::{self, GaussianMarginal};

const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub paths: usize,
    pub step: f64,
    pub seed: u64,
    /// Simulation stops this far from the singular end (`T − δ` forward, `δ` in reverse).
    pub horizon_clip: f64,
    pub direction: Direction,
    /// Multiplies the diffusion term only; 0 gives the noise-free flow.
    pub noise_scale: f64,
    /// Number of leading paths whose states are kept.
    pub sample_paths: usize,
    /// Keep states at every `thin`-th node.
    pub thin: usize,
    /// Upper bound on stored state entries.
    pub memory_budget: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            step: 1e-3,
            seed: 0,
            horizon_clip: 0.0,
            direction: Direction::Forward,
            noise_scale: 1.0,
            sample_paths: 100,
            thin: 10,
            memory_budget: 100_000_000,
        }
    }
}

impl SimulationConfig {
    fn validate(&self, horizon: f64, dim: usize) -> Result<()> {
        let bad = |m: String| Err(BridgeError::InvalidConfig(m));
        if self.paths == 0 {
            return bad("paths must be at least 1".into());
        }
        if !(self.horizon_clip >= 0.0 && self.horizon_clip < horizon) {
            return bad(format!("clip {} must lie in [0, T)", self.horizon_clip));
        }
        let span = horizon - self.horizon_clip;
        if !(self.step > 0.0 && self.step <= span / 10.0) {
            return bad(format!("step {} must lie in (0, (T − clip)/10]", self.step));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and nonnegative".into());
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        let nodes = node_count(span, self.step) + 1;
        let stored = self.sample_paths.min(self.paths) * dim * nodes.div_ceil(self.thin);
        if stored > self.memory_budget {
            return bad(format!("{stored} stored entries exceed the memory budget {}", self.memory_budget));
        }
        Ok(())
    }
}

fn node_count(span: f64, step: f64) -> usize {
    ((span / step) - 1e-9).ceil().max(1.0) as usize
}

/// Moments of a Monte-Carlo ensemble on an increasing time grid.
#[derive(Debug, Clone)]
pub struct SimulationEnsemble {
    pub direction: Direction,
    pub paths: usize,
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub mean_se: Vec<DVector<f64>>,
    /// Unbiased (divisor `paths − 1`) covariance per node.
    pub cov: Vec<DMatrix<f64>>,
    /// Standard error of each covariance entry, `sqrt(Var(x_i x_j) / paths)`.
    pub cov_se: Vec<DMatrix<f64>>,
    /// Mean of `∫₀ᵗ ‖u‖² ds` per node (zero for uncontrolled and reverse runs).
    pub energy: Vec<f64>,
    pub energy_se: Vec<f64>,
    /// Accumulated energy of each path at the last node.
    pub path_energy: Vec<f64>,
    pub sample_times: Vec<f64>,
    /// `sample_paths × n` states per sampled node.
    pub samples: Vec<DMatrix<f64>>,
}

impl SimulationEnsemble {
    pub fn state_dim(&self) -> usize {
        self.mean[0].len()
    }

    /// Index of the node closest to `t`.
    pub fn node_index(&self, t: f64) -> usize {
        let j = self.times.partition_point(|&x| x < t);
        if j == 0 {
            0
        } else if j == self.times.len() {
            j - 1
        } else if (self.times[j] - t) < (t - self.times[j - 1]) {
            j
        } else {
            j - 1
        }
    }

    pub fn cov_at(&self, t: f64) -> (&DMatrix<f64>, &DMatrix<f64>) {
        let k = self.node_index(t);
        (&self.cov[k], &self.cov_se[k])
    }

    /// Mean energy and its standard error at the node closest to `t`.
    pub fn energy_at(&self, t: f64) -> (f64, f64) {
        let k = self.node_index(t);
        (self.energy[k], self.energy_se[k])
    }
}

/// `(clip time, mean accumulated energy)` at every node.
pub fn energy_profile(ens: &SimulationEnsemble) -> Vec<(f64, f64)> {
    ens.times.iter().copied().zip(ens.energy.iter().copied()).collect()
}

/// Row-major step data: `x ← x + h·D x + √h·C z`, control `u = K x`.
struct Plan {
    n: usize,
    m: usize,
    h: f64,
    times: Vec<f64>,
    drift: Vec<Vec<f64>>,
    diffusion: Vec<Vec<f64>>,
    gain: Option<Vec<Vec<f64>>>,
    init: Vec<f64>,
    reverse: bool,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn matvec(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * cols..(i + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

#[derive(Clone)]
struct Acc {
    s1: Vec<f64>,
    s2: Vec<f64>,
    s4: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    energy: Vec<f64>,
    samples: Vec<Vec<f64>>,
}

impl Acc {
    fn new(nodes: usize, n: usize, stored_nodes: usize) -> Self {
        Self {
            s1: vec![0.0; nodes * n],
            s2: vec![0.0; nodes * n * n],
            s4: vec![0.0; nodes * n * n],
            e1: vec![0.0; nodes],
            e2: vec![0.0; nodes],
            energy: Vec::new(),
            samples: vec![Vec::new(); stored_nodes],
        }
    }

    fn merge(&mut self, other: Acc) {
        let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.s1, &other.s1);
        add(&mut self.s2, &other.s2);
        add(&mut self.s4, &other.s4);
        add(&mut self.e1, &other.e1);
        add(&mut self.e2, &other.e2);
        self.energy.extend(other.energy);
        for (a, b) in self.samples.iter_mut().zip(other.samples) {
            a.extend(b);
        }
    }
}

fn run(plan: &Plan, cfg: &SimulationConfig) -> SimulationEnsemble {
    let (n, m) = (plan.n, plan.m);
    let nodes = plan.times.len();
    let stored_idx: Vec<usize> = (0..nodes).filter(|k| k % cfg.thin == 0 || *k == nodes - 1).collect();
    let stored_nodes = stored_idx.len();
    let sample_paths = cfg.sample_paths.min(cfg.paths);
    let sqrt_h = plan.h.sqrt();
    let noise = cfg.noise_scale * sqrt_h;

    let chunks: Vec<Acc> = (0..cfg.paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc::new(nodes, n, stored_nodes);
            let mut x = vec![0.0; n];
            let mut z0 = vec![0.0; n];
            let mut z = vec![0.0; m];
            let mut dx = vec![0.0; n];
            let mut dz = vec![0.0; n];
            let mut u = vec![0.0; m];
            for p in c * CHUNK..((c + 1) * CHUNK).min(cfg.paths) {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(p as u64);
                for v in z0.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                matvec(&plan.init, n, &z0, &mut x);
                let mut energy = 0.0;
                let mut slot = 0;
                for k in 0..nodes {
                    let o = k * n;
                    for i in 0..n {
                        acc.s1[o + i] += x[i];
                        for j in 0..n {
                            let xx = x[i] * x[j];
                            acc.s2[o * n + i * n + j] += xx;
                            acc.s4[o * n + i * n + j] += xx * xx;
                        }
                    }
                    acc.e1[k] += energy;
                    acc.e2[k] += energy * energy;
                    if slot < stored_nodes && stored_idx[slot] == k {
                        if p < sample_paths {
                            acc.samples[slot].extend_from_slice(&x);
                        }
                        slot += 1;
                    }
                    if k == nodes - 1 {
                        break;
                    }
                    if let Some(gain) = &plan.gain {
                        matvec(&gain[k], n, &x, &mut u);
                        energy += plan.h * u.iter().map(|v| v * v).sum::<f64>();
                    }
                    for v in z.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    matvec(&plan.drift[k], n, &x, &mut dx);
                    matvec(&plan.diffusion[k], m, &z, &mut dz);
                    for i in 0..n {
                        x[i] += plan.h * dx[i] + noise * dz[i];
                    }
                }
                acc.energy.push(energy);
            }
            acc
        })
        .collect();

    let mut total = Acc::new(nodes, n, stored_nodes);
    for acc in chunks {
        total.merge(acc);
    }
    finish(plan, cfg, total, stored_idx, sample_paths)
}

fn finish(plan: &Plan, cfg: &SimulationConfig, acc: Acc, stored_idx: Vec<usize>, sample_paths: usize) -> SimulationEnsemble {
    let n = plan.n;
    let np = cfg.paths as f64;
    let denom = (np - 1.0).max(1.0);
    let nodes = plan.times.len();
    let mut mean = Vec::with_capacity(nodes);
    let mut mean_se = Vec::with_capacity(nodes);
    let mut cov = Vec::with_capacity(nodes);
    let mut cov_se = Vec::with_capacity(nodes);
    let mut energy = Vec::with_capacity(nodes);
    let mut energy_se = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let mu = DVector::from_fn(n, |i, _| acc.s1[k * n + i] / np);
        let raw = DMatrix::from_fn(n, n, |i, j| acc.s2[k * n * n + i * n + j] / np);
        let c = psd::symmetrize(&((&raw - &mu * mu.transpose()) * (np / denom)));
        let se = DMatrix::from_fn(n, n, |i, j| {
            let m2 = raw[(i, j)];
            let m4 = acc.s4[k * n * n + i * n + j] / np;
            ((m4 - m2 * m2).max(0.0) / np).sqrt()
        });
        let mse = DVector::from_fn(n, |i, _| (c[(i, i)].max(0.0) / np).sqrt());
        let e = acc.e1[k] / np;
        let ev = (acc.e2[k] / np - e * e).max(0.0) * np / denom;
        mean.push(mu);
        mean_se.push(mse);
        cov.push(c);
        cov_se.push(se);
        energy.push(e);
        energy_se.push((ev / np).sqrt());
    }
    let mut sample_times: Vec<f64> = stored_idx.iter().map(|&k| plan.times[k]).collect();
    let mut samples: Vec<DMatrix<f64>> =
        acc.samples.into_iter().map(|s| DMatrix::from_row_slice(sample_paths, n, &s)).collect();
    let mut times = plan.times.clone();
    if plan.reverse {
        for v in [&mut times, &mut sample_times] {
            v.reverse();
        }
        mean.reverse();
        mean_se.reverse();
        cov.reverse();
        cov_se.reverse();
        energy.reverse();
        energy_se.reverse();
        samples.reverse();
    }
    SimulationEnsemble {
        direction: if plan.reverse { Direction::Reverse } else { Direction::Forward },
        paths: cfg.paths,
        times,
        mean,
        mean_se,
        cov,
        cov_se,
        energy,
        energy_se,
        path_energy: acc.energy,
        sample_times,
        samples,
    }
}

fn forward_times(horizon: f64, cfg: &SimulationConfig) -> (Vec<f64>, f64) {
    let end = horizon - cfg.horizon_clip;
    let k = node_count(end, cfg.step);
    let h = end / k as f64;
    ((0..=k).map(|i| if i == k { end } else { i as f64 * h }).collect(), h)
}

fn reverse_times(horizon: f64, cfg: &SimulationConfig) -> (Vec<f64>, f64) {
    let start = cfg.horizon_clip;
    let k = node_count(horizon - start, cfg.step);
    let h = (horizon - start) / k as f64;
    ((0..=k).map(|i| if i == k { start } else { horizon - i as f64 * h }).collect(), h)
}

fn expect_direction(cfg: &SimulationConfig, d: Direction) -> Result<()> {
    if cfg.direction != d {
        return Err(BridgeError::InvalidConfig(format!("direction must be {d:?} for this simulation")));
    }
    Ok(())
}

/// Paths of `dζ = Aζ dt + B dW` started from `N(0, Σ₀)`.
pub fn simulate_uncontrolled(sys: &LinearSystem, m0: &GaussianMarginal, cfg: &SimulationConfig) -> Result<SimulationEnsemble> {
    expect_direction(cfg, Direction::Forward)?;
    cfg.validate(sys.horizon(), sys.state_dim())?;
    let (times, h) = forward_times(sys.horizon(), cfg);
    let steps = &times[..times.len() - 1];
    let plan = Plan {
        n: sys.state_dim(),
        m: sys.input_dim(),
        h,
        drift: steps.iter().map(|&t| row_major(&sys.a_at(t))).collect(),
        diffusion: steps.iter().map(|&t| row_major(&sys.b_at(t))).collect(),
        gain: None,
        init: row_major(m0.sqrt()),
        times,
        reverse: false,
    };
    Ok(run(&plan, cfg))
}

/// Paths of `dζ = (A + BK)ζ dt + B dW`, `K = −B'Q⁻¹`, started from `N(0, Σ₀)`.
pub fn simulate_controlled(sys: &LinearSystem, sol: &BridgeSolution, cfg: &SimulationConfig) -> Result<SimulationEnsemble> {
    expect_direction(cfg, Direction::Forward)?;
    if sol.singular_flags().terminal && cfg.horizon_clip == 0.0 {
        return Err(BridgeError::ClipRequired("the feedback gain diverges at T when Σ_T is singular"));
    }
    cfg.validate(sys.horizon(), sys.state_dim())?;
    let (times, h) = forward_times(sys.horizon(), cfg);
    let steps = &times[..times.len() - 1];
    let mut drift = Vec::with_capacity(steps.len());
    let mut gain = Vec::with_capacity(steps.len());
    for &t in steps {
        let k = sol.feedback_gain(t)?;
        drift.push(row_major(&(sys.a_at(t) + sys.b_at(t) * &k)));
        gain.push(row_major(&k));
    }
    let init = psd::psd_sqrt(sol.marginal_covariances().0)?;
    let plan = Plan {
        n: sys.state_dim(),
        m: sys.input_dim(),
        h,
        drift,
        diffusion: steps.iter().map(|&t| row_major(&sys.b_at(t))).collect(),
        gain: Some(gain),
        init: row_major(&init),
        times,
        reverse: false,
    };
    Ok(run(&plan, cfg))
}

/// Paths of the time-reversed bridge, `ζ_{t−h} = ζ_t − h(A + BB'P⁻¹)ζ_t + B√h z`,
/// started at `T` from `N(0, Σ_T)`.
pub fn simulate_reverse(
    sys: &LinearSystem,
    sol: &BridgeSolution,
    mt: &GaussianMarginal,
    cfg: &SimulationConfig,
) -> Result<SimulationEnsemble> {
    expect_direction(cfg, Direction::Reverse)?;
    if sol.singular_flags().initial && cfg.horizon_clip == 0.0 {
        return Err(BridgeError::ClipRequired("the reverse drift diverges at 0 when Σ₀ is singular"));
    }
    cfg.validate(sys.horizon(), sys.state_dim())?;
    let (times, h) = reverse_times(sys.horizon(), cfg);
    let steps = &times[..times.len() - 1];
    let mut drift = Vec::with_capacity(steps.len());
    for &t in steps {
        let b_minus = sys.a_at(t) + sys.bbt_at(t) * sol.p_inv_at(t)?;
        drift.push(row_major(&(-b_minus)));
    }
    let plan = Plan {
        n: sys.state_dim(),
        m: sys.input_dim(),
        h,
        drift,
        diffusion: steps.iter().map(|&t| row_major(&sys.b_at(t))).collect(),
        gain: None,
        init: row_major(mt.sqrt()),
        times,
        reverse: true,
    };
    Ok(run(&plan, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MatrixFunction;

    fn wiener() -> LinearSystem {
        LinearSystem::new(
            MatrixFunction::constant(DMatrix::zeros(1, 1)),
            MatrixFunction::constant(DMatrix::identity(1, 1)),
            1.0,
        )
        .unwrap()
    }

    fn cfg(paths: usize) -> SimulationConfig {
        SimulationConfig { paths, step: 1e-2, seed: 7, sample_paths: 5, thin: 1, ..Default::default() }
    }

    #[test]
    fn wiener_variance_grows_linearly() {
        let sys = wiener();
        let m0 = GaussianMarginal::new(&DMatrix::zeros(1, 1)).unwrap();
        let ens = simulate_uncontrolled(&sys, &m0, &cfg(4000)).unwrap();
        for t in [0.25, 0.5, 1.0] {
            let (c, se) = ens.cov_at(t);
            assert!((c[(0, 0)] - t).abs() < 4.0 * se[(0, 0)], "t={t}");
        }
        assert!(ens.energy.iter().all(|&e| e == 0.0));
        assert_eq!(ens.samples[0].shape(), (5, 1));
    }

    #[test]
    fn single_path_has_zero_energy() {
        let sys = wiener();
        let m0 = GaussianMarginal::new(&DMatrix::identity(1, 1)).unwrap();
        let ens = simulate_uncontrolled(&sys, &m0, &cfg(1)).unwrap();
        assert_eq!(ens.path_energy, vec![0.0]);
    }

    #[test]
    fn deterministic_across_runs() {
        let sys = wiener();
        let m0 = GaussianMarginal::new(&DMatrix::identity(1, 1)).unwrap();
        let a = simulate_uncontrolled(&sys, &m0, &cfg(300)).unwrap();
        let b = simulate_uncontrolled(&sys, &m0, &cfg(300)).unwrap();
        assert_eq!(a.cov, b.cov);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn config_is_validated() {
        let sys = wiener();
        let m0 = GaussianMarginal::new(&DMatrix::identity(1, 1)).unwrap();
        let bad = [
            SimulationConfig { paths: 0, ..cfg(1) },
            SimulationConfig { step: 0.5, ..cfg(1) },
            SimulationConfig { horizon_clip: 1.0, ..cfg(1) },
            SimulationConfig { thin: 0, ..cfg(1) },
            SimulationConfig { memory_budget: 10, ..cfg(100) },
            SimulationConfig { direction: Direction::Reverse, ..cfg(1) },
        ];
        for c in bad {
            assert!(simulate_uncontrolled(&sys, &m0, &c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn grids_end_exactly_at_clip() {
        let c = SimulationConfig { step: 0.03, horizon_clip: 0.05, ..cfg(1) };
        let (f, hf) = forward_times(1.0, &c);
        assert_eq!(*f.last().unwrap(), 0.95);
        assert!(hf <= 0.03);
        let (r, _) = reverse_times(1.0, &c);
        assert_eq!(r[0], 1.0);
        assert_eq!(*r.last().unwrap(), 0.05);
    }
}
