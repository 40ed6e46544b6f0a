//! Bridge between possibly rank-deficient Gaussian marginals.
//!
//! When `Σ_T` is singular `Q(t)⁻¹` blows up at `T`, and when `Σ₀` is singular
//! `P(t)⁻¹` blows up at `0`. Their values at the opposite ends stay finite and
//! have closed forms built from pseudoinverses and null-space projections:
//!
//! ```text
//! Q(0)⁻¹ = Φ'M⁻¹Φ + S†½(½I − R)S†½ − Π_N Ĥ S½ K S†½ − S†½ K S½ Ĥ Π_N
//!          − Π_N Ĥ Π_N + Π_N Ĥ S½ K² S½ Ĥ Π_N
//! ```
//!
//! with `S = Σ₀`, `Ĥ = Σ̂_T = Φ'M⁻¹Σ_T M⁻¹Φ`, `R = (¼I + S½ĤS½)^½` and
//! `K = (½I + R)⁻¹`. `P(T)⁻¹` has the same shape with `M⁻¹` as leading term,
//! `S = Σ_T` and `Ĥ = Σ̂₀ = M⁻¹ΦΣ₀Φ'M⁻¹`. The Riccati equations
//!
//! ```text
//! d/dt Q⁻¹ = −Q⁻¹A − A'Q⁻¹ + Q⁻¹BB'Q⁻¹
//! d/dt P⁻¹ = −P⁻¹A − A'P⁻¹ − P⁻¹BB'P⁻¹
//! ```
//!
//! are integrated away from the finite ends and stopped a clearance `δ` short
//! of the escape time. Endpoint covariances come from
//! `Σ₀ = P(0)(I + Q(0)⁻¹P(0))⁻¹` and `Σ_T = Q(T)(P(T)⁻¹Q(T) + I)⁻¹`.

use nalgebra::DMatrix;

use crate::bridge_core::{boundary_covariance, check_dims, BridgeSolution, EndpointFlags};
use crate::dynamics::{LinearSystem, Propagators};
use crate::error::{BridgeError, Result};
use crate::ode;
use crate::psd::{self, symmetrize, GaussianMarginal, SortedEigen};
use crate::verify::Check;

/// Sub-step length near an escape time, as a fraction of the distance to it.
pub const RICCATI_GRADING: f64 = 0.01;

/// Default endpoint clearance as a fraction of the horizon.
pub const DEFAULT_DELTA_FRACTION: f64 = 1e-3;

/// Fraction of the horizon next to a singular end where grid nodes are doubled.
const REFINED_FRACTION: f64 = 0.1;

/// Tolerance used by the structure and basis checks.
pub const STRUCTURE_TOL: f64 = 1e-8;

/// Marginal covariances pushed through the Gramian.
#[derive(Debug, Clone)]
pub struct HatSigma {
    /// `Σ̂_T = Φ(T,0)'M(T,0)⁻¹Σ_T M(T,0)⁻¹Φ(T,0)`
    pub hat_t: DMatrix<f64>,
    /// `Σ̂₀ = M(T,0)⁻¹Φ(T,0)Σ₀Φ(T,0)'M(T,0)⁻¹`
    pub hat_0: DMatrix<f64>,
}

impl HatSigma {
    pub fn new(props: &Propagators, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Self {
        let phi = &props.phi;
        let m_inv = &props.reach_inv;
        let hat_t = symmetrize(&(phi.transpose() * m_inv * mt.sigma() * m_inv * phi));
        let hat_0 = symmetrize(&(m_inv * phi * m0.sigma() * phi.transpose() * m_inv));
        Self { hat_t, hat_0 }
    }
}

fn limit_formula(lead: &DMatrix<f64>, marginal: &GaussianMarginal, hat: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let n = marginal.dim();
    let id = DMatrix::<f64>::identity(n, n);
    let s_half = marginal.sqrt();
    let s_pinv_half = marginal.pinv_sqrt();
    let pn = marginal.proj_null();
    let r = psd::psd_sqrt_with_tol(&symmetrize(&(&id * 0.25 + s_half * hat * s_half)), tol)?;
    let k = psd::sym_inverse(&(&id * 0.5 + &r), tol, "½I + R")?;
    let pn_h_s_k = pn * hat * s_half * &k;
    let cross = &pn_h_s_k * s_pinv_half;
    let value = lead + s_pinv_half * (&id * 0.5 - &r) * s_pinv_half
        - &cross
        - cross.transpose()
        - pn * hat * pn
        + &pn_h_s_k * pn_h_s_k.transpose();
    if !ode::all_finite(&value) {
        return Err(BridgeError::NumericalFailure("limit formula produced non-finite entries".into()));
    }
    Ok(symmetrize(&value))
}

pub(crate) fn q0_inverse_with(props: &Propagators, hat: &HatSigma, m0: &GaussianMarginal, tol: f64) -> Result<DMatrix<f64>> {
    let lead = symmetrize(&(props.phi.transpose() * &props.reach_inv * &props.phi));
    limit_formula(&lead, m0, &hat.hat_t, tol)
}

pub(crate) fn pt_inverse_with(props: &Propagators, hat: &HatSigma, mt: &GaussianMarginal, tol: f64) -> Result<DMatrix<f64>> {
    limit_formula(&props.reach_inv, mt, &hat.hat_0, tol)
}

/// Limit of `Q(0)⁻¹` as both marginals approach the given (possibly singular) ones.
pub fn q0_inverse_limit(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<DMatrix<f64>> {
    check_dims(sys, m0, mt)?;
    let props = sys.propagators()?;
    let hat = HatSigma::new(&props, m0, mt);
    q0_inverse_with(&props, &hat, m0, sys.rank_tol())
}

/// Limit of `P(T)⁻¹`, the time-reversed counterpart of [`q0_inverse_limit`].
pub fn pt_inverse_limit(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<DMatrix<f64>> {
    check_dims(sys, m0, mt)?;
    let props = sys.propagators()?;
    let hat = HatSigma::new(&props, m0, mt);
    pt_inverse_with(&props, &hat, mt, sys.rank_tol())
}

/// Blocks of `Q(0)⁻¹ − Φ'M⁻¹Φ` in the basis where `Σ₀ = diag(Λ₀, 0)`.
#[derive(Debug, Clone)]
pub struct EfgBlocks {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub lambda0: DMatrix<f64>,
    /// `Σ̂_T` in the same basis.
    pub hat_t: DMatrix<f64>,
    /// Orthogonal change of basis, columns range first.
    pub basis: DMatrix<f64>,
}

impl EfgBlocks {
    pub fn rank(&self) -> usize {
        self.e.nrows()
    }

    /// `[[E, F], [F', G]]`
    pub fn assembled(&self) -> DMatrix<f64> {
        let k = self.rank();
        let n = k + self.g.nrows();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((0, 0), (k, k)).copy_from(&self.e);
        out.view_mut((0, k), (k, n - k)).copy_from(&self.f);
        out.view_mut((k, 0), (n - k, k)).copy_from(&self.f.transpose());
        out.view_mut((k, k), (n - k, n - k)).copy_from(&self.g);
        out
    }

    /// The assembled blocks rotated back to the original coordinates.
    pub fn in_original_basis(&self) -> DMatrix<f64> {
        symmetrize(&(&self.basis * self.assembled() * self.basis.transpose()))
    }

    /// Max-abs residuals of `EΛE − E = Σ̂^E`, `EΛF − F = Σ̂^F`, `F'ΛF − G = Σ̂^G`.
    pub fn fixed_point_residuals(&self) -> [f64; 3] {
        let k = self.rank();
        let n = self.hat_t.nrows();
        let he = self.hat_t.view((0, 0), (k, k));
        let hf = self.hat_t.view((0, k), (k, n - k));
        let hg = self.hat_t.view((k, k), (n - k, n - k));
        let l = &self.lambda0;
        let r1 = &self.e * l * &self.e - &self.e - he;
        let r2 = &self.e * l * &self.f - &self.f - hf;
        let r3 = self.f.transpose() * l * &self.f - &self.g - hg;
        [amax(&r1), amax(&r2), amax(&r3)]
    }

    /// Largest eigenvalue of the assembled block matrix.
    pub fn max_eigenvalue(&self) -> f64 {
        if self.hat_t.nrows() == 0 {
            return 0.0;
        }
        psd::max_eigenvalue(&symmetrize(&self.assembled()))
    }

    /// Largest eigenvalue of `E` (negative when `E ≺ 0`); `-inf` when `E` is empty.
    pub fn e_max_eigenvalue(&self) -> f64 {
        if self.rank() == 0 {
            return f64::NEG_INFINITY;
        }
        psd::max_eigenvalue(&self.e)
    }
}

fn amax(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}

/// Computes `E`, `F`, `G` from `Σ₀` and `Σ̂_T` already written in a block basis
/// where `Σ₀ = diag(Λ₀, 0)` with `Λ₀ ≻ 0` leading.
pub fn efg_blocks_in_basis(sigma0: &DMatrix<f64>, hat_t: &DMatrix<f64>, rank_tol: f64) -> Result<EfgBlocks> {
    psd::check_square(sigma0, "Σ₀")?;
    let n = sigma0.nrows();
    if hat_t.shape() != (n, n) {
        return Err(BridgeError::Dimension("Σ̂_T must match Σ₀".into()));
    }
    let scale = sigma0.amax().max(f64::MIN_POSITIVE);
    let k = (0..n).take_while(|&i| sigma0[(i, i)] > rank_tol * scale).count();
    let mismatch = amax(&sigma0.view((0, k), (k, n - k)).into_owned())
        .max(amax(&sigma0.view((k, 0), (n - k, k)).into_owned()))
        .max(amax(&sigma0.view((k, k), (n - k, n - k)).into_owned()));
    if mismatch > STRUCTURE_TOL * scale.max(1.0) {
        return Err(BridgeError::BasisMismatch { residual: mismatch });
    }
    let lambda0 = symmetrize(&sigma0.view((0, 0), (k, k)).into_owned());
    let eig = SortedEigen::new(&lambda0);
    if k > 0 && eig.values[k - 1] <= 0.0 {
        return Err(BridgeError::BasisMismatch { residual: eig.values[k - 1].abs() });
    }
    let l_half = eig.map(f64::sqrt);
    let l_inv_half = eig.map(|v| 1.0 / v.sqrt());
    let he = hat_t.view((0, 0), (k, k)).into_owned();
    let hf = hat_t.view((0, k), (k, n - k)).into_owned();
    let hg = hat_t.view((k, k), (n - k, n - k)).into_owned();
    let id = DMatrix::<f64>::identity(k, k);

    let theta = psd::psd_sqrt_with_tol(&symmetrize(&(&id * 0.25 + &l_half * &he * &l_half)), rank_tol)?;
    let e = symmetrize(&(&l_inv_half * (&id * 0.5 - &theta) * &l_inv_half));
    let shifted_inv = psd::sym_inverse(&(&theta + &id * 0.5), rank_tol, "Θ + ½I")?;
    let f = -(&l_inv_half * &shifted_inv * &l_half * &hf);
    let w = &shifted_inv * &l_half * &hf;
    let g = symmetrize(&(-&hg + w.transpose() * &w));
    Ok(EfgBlocks { e, f, g, theta, lambda0, hat_t: hat_t.clone(), basis: DMatrix::identity(n, n) })
}

/// `E`, `F`, `G` for the given marginals, rotating to the eigenbasis of `Σ₀` first.
pub fn efg_blocks(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<EfgBlocks> {
    check_dims(sys, m0, mt)?;
    let props = sys.propagators()?;
    let hat = HatSigma::new(&props, m0, mt);
    let u = m0.block_basis();
    let sigma_b = symmetrize(&(u.transpose() * m0.sigma() * u));
    let hat_b = symmetrize(&(u.transpose() * &hat.hat_t * u));
    let mut blocks = efg_blocks_in_basis(&sigma_b, &hat_b, m0.rank_tol())?;
    blocks.basis = u.clone();
    Ok(blocks)
}

/// Finite boundary data of a singular bridge.
#[derive(Debug, Clone)]
pub struct SingularBoundary {
    /// `Q(0)⁻¹`
    pub q0_inv: DMatrix<f64>,
    /// `P(T)⁻¹`
    pub pt_inv: DMatrix<f64>,
    /// `P(0)`, supported on the range of `Σ₀`.
    pub p0: DMatrix<f64>,
    /// `Q(T)`, supported on the range of `Σ_T`.
    pub qt: DMatrix<f64>,
}

impl SingularBoundary {
    /// `P(0)(I + Q(0)⁻¹P(0))⁻¹`
    pub fn initial_covariance(&self) -> Result<DMatrix<f64>> {
        boundary_covariance(&self.p0, &self.q0_inv)
    }

    /// `Q(T)(P(T)⁻¹Q(T) + I)⁻¹`
    pub fn terminal_covariance(&self) -> Result<DMatrix<f64>> {
        boundary_covariance(&self.qt, &self.pt_inv)
    }
}

pub(crate) fn singular_boundary_with(
    sys: &LinearSystem,
    props: &Propagators,
    m0: &GaussianMarginal,
    mt: &GaussianMarginal,
) -> Result<SingularBoundary> {
    let tol = sys.rank_tol();
    let hat = HatSigma::new(props, m0, mt);
    let q0_inv = q0_inverse_with(props, &hat, m0, tol)?;
    let pt_inv = pt_inverse_with(props, &hat, mt, tol)?;
    let q0 = psd::sym_inverse(&q0_inv, tol, "Q(0)⁻¹")?;
    let pt = psd::sym_inverse(&pt_inv, tol, "P(T)⁻¹")?;
    let p0 = symmetrize(&(&props.phi_inv * (pt - &props.reach) * props.phi_inv.transpose()));
    let qt = symmetrize(&(&props.phi * q0 * props.phi.transpose() - &props.reach));
    Ok(SingularBoundary { q0_inv, pt_inv, p0, qt })
}

/// `Q(0)⁻¹`, `P(T)⁻¹` from the limit formulas and `P(0)`, `Q(T)` obtained by
/// propagating their inverses across the horizon in closed form.
pub fn singular_boundary(sys: &LinearSystem, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Result<SingularBoundary> {
    check_dims(sys, m0, mt)?;
    singular_boundary_with(sys, &sys.propagators()?, m0, mt)
}

fn range_block(m: &DMatrix<f64>, basis: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    (basis.transpose() * m * basis).view((0, 0), (k, k)).into_owned()
}

fn structure_side(
    checks: &mut Vec<Check>,
    side: &str,
    sym: &str,
    x: &DMatrix<f64>,
    opposite_inv: &DMatrix<f64>,
    marginal: &GaussianMarginal,
) {
    let scale = x.amax().max(1.0);
    let pn = marginal.proj_null();
    let pr = marginal.proj_range();
    let null_res = (pn * x).amax() / scale;
    let range_res = (x - pr * x * pr).amax() / scale;
    checks.push(Check::new(format!("structure.{side}.{sym}_null_projection"), null_res, STRUCTURE_TOL));
    checks.push(Check::new(format!("structure.{side}.{sym}_range_projection"), range_res, STRUCTURE_TOL));

    let k = marginal.rank();
    let basis = marginal.block_basis();
    let lambda = DMatrix::from_diagonal(&marginal.range_eigenvalues());
    let plus = range_block(x, basis, k);
    let e = range_block(opposite_inv, basis, k);
    let coupled = &lambda * &e * &plus;
    let fixed = &lambda + &coupled - &plus;
    let fixed_res = amax(&fixed) / amax(&plus).max(amax(&coupled)).max(1.0);
    let (smin, smax) = if k == 0 {
        (0.0, 0.0)
    } else {
        plus.singular_values().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)))
    };
    let check = Check::new(format!("structure.{side}.fixed_point"), fixed_res, STRUCTURE_TOL)
        .with_meta("rank", k)
        .with_meta("range_block_min_singular_value", smin)
        .with_meta("range_block_max_singular_value", smax);
    checks.push(check);
}

/// Residuals of the range/null block structure of `P(0)` and `Q(T)` and of
/// the fixed point `Λ + Λ·E·X₊ = X₊` satisfied by their range blocks.
pub fn boundary_structure(sb: &SingularBoundary, m0: &GaussianMarginal, mt: &GaussianMarginal) -> Vec<Check> {
    let mut checks = Vec::new();
    structure_side(&mut checks, "initial", "p0", &sb.p0, &sb.q0_inv, m0);
    structure_side(&mut checks, "terminal", "qt", &sb.qt, &sb.pt_inv, mt);
    checks
}

/// Grid of `steps` uniform intervals with nodes inside the clearance windows
/// replaced by the window edges and doubled density next to a singular end.
pub fn clipped_grid(horizon: f64, steps: usize, delta0: f64, delta_t: f64) -> Vec<f64> {
    let h = horizon / steps as f64;
    let mut nodes: Vec<f64> = (0..=steps).map(|i| if i == steps { horizon } else { i as f64 * h }).collect();
    let refine = |lo: f64, hi: f64, nodes: &mut Vec<f64>| {
        let extra: Vec<f64> = (0..steps)
            .map(|i| (i as f64 + 0.5) * h)
            .filter(|&m| m >= lo && m <= hi)
            .collect();
        nodes.extend(extra);
    };
    if delta0 > 0.0 {
        refine(0.0, REFINED_FRACTION * horizon, &mut nodes);
    }
    if delta_t > 0.0 {
        refine((1.0 - REFINED_FRACTION) * horizon, horizon, &mut nodes);
    }
    let eps = 1e-12 * horizon;
    nodes.retain(|&t| !(t > eps && t < delta0 - eps) && !(t > horizon - delta_t + eps && t < horizon - eps));
    if delta0 > 0.0 {
        nodes.push(delta0);
    }
    if delta_t > 0.0 {
        nodes.push(horizon - delta_t);
    }
    nodes.sort_by(f64::total_cmp);
    nodes.dedup_by(|a, b| (*a - *b).abs() <= eps);
    nodes
}

/// Integrates a Riccati right-hand side over `grid[range]` in the given
/// direction, grading sub-steps toward `escape` when it is set.
fn integrate_riccati<F>(
    sys: &LinearSystem,
    rhs: F,
    grid: &[f64],
    order: &[usize],
    x0: &DMatrix<f64>,
    escape: Option<f64>,
    which: &'static str,
) -> Result<Vec<(usize, DMatrix<f64>)>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let limit = 1e13 * (1.0 + x0.amax());
    let mut out = Vec::with_capacity(order.len());
    let mut x = x0.clone();
    out.push((order[0], x.clone()));
    for w in order.windows(2) {
        let (a, b) = (grid[w[0]], grid[w[1]]);
        let dir = (b - a).signum();
        let mut t = a;
        while (b - t) * dir > 1e-15 * sys.horizon() {
            let mut h = sys.max_step();
            if let Some(e) = escape {
                h = h.min(RICCATI_GRADING * (e - t).abs());
            }
            h = h.min((b - t).abs());
            x = ode::rk4_step(&rhs, t, &x, dir * h);
            t = if ((b - t).abs() - h).abs() <= 1e-15 * sys.horizon() { b } else { t + dir * h };
            if !ode::all_finite(&x) || x.amax() > limit {
                return Err(BridgeError::PrematureEscape { which, t });
            }
        }
        x = symmetrize(&x);
        out.push((w[1], x.clone()));
    }
    Ok(out)
}

/// Solves the bridge between possibly singular marginals on a grid of `steps`
/// intervals, stopping `delta` short of each singular end.
pub fn solve_singular(
    sys: &LinearSystem,
    m0: &GaussianMarginal,
    mt: &GaussianMarginal,
    steps: usize,
    delta: f64,
) -> Result<BridgeSolution> {
    check_dims(sys, m0, mt)?;
    let horizon = sys.horizon();
    if !(delta > 0.0 && delta < horizon / 2.0) {
        return Err(BridgeError::InvalidArgument(format!("clearance must lie in (0, T/2), got {delta}")));
    }
    if steps < 2 {
        return Err(BridgeError::InvalidArgument("at least two grid steps are required".into()));
    }
    let tol = sys.rank_tol();
    let props = sys.propagators()?;
    let boundary = singular_boundary_with(sys, &props, m0, mt)?;
    let flags = EndpointFlags { initial: m0.is_singular(), terminal: mt.is_singular() };
    let delta0 = if flags.initial { delta } else { 0.0 };
    let delta_t = if flags.terminal { delta } else { 0.0 };
    let grid = clipped_grid(horizon, steps, delta0, delta_t);
    let len = grid.len();

    let q_rhs = |t: f64, x: &DMatrix<f64>| {
        let a = sys.a_at(t);
        -(x * &a) - a.transpose() * x + x * sys.bbt_at(t) * x
    };
    let p_rhs = |t: f64, y: &DMatrix<f64>| {
        let a = sys.a_at(t);
        -(y * &a) - a.transpose() * y - y * sys.bbt_at(t) * y
    };
    let q_order: Vec<usize> = (0..len).filter(|&i| grid[i] <= horizon - delta_t + 1e-12 * horizon).collect();
    let p_order: Vec<usize> = (0..len).rev().filter(|&i| grid[i] >= delta0 - 1e-12 * horizon).collect();
    let q_escape = flags.terminal.then_some(horizon);
    let p_escape = flags.initial.then_some(0.0);

    let mut q_inv: Vec<Option<DMatrix<f64>>> = vec![None; len];
    let mut p_inv: Vec<Option<DMatrix<f64>>> = vec![None; len];
    for (i, x) in integrate_riccati(sys, q_rhs, &grid, &q_order, &boundary.q0_inv, q_escape, "Q(t)⁻¹")? {
        q_inv[i] = Some(x);
    }
    for (i, y) in integrate_riccati(sys, p_rhs, &grid, &p_order, &boundary.pt_inv, p_escape, "P(t)⁻¹")? {
        p_inv[i] = Some(y);
    }

    let sigma0 = boundary.initial_covariance()?;
    let sigma_t = boundary.terminal_covariance()?;
    let mut sigma = Vec::with_capacity(len);
    let mut gain = Vec::with_capacity(len);
    for i in 0..len {
        let s = if i == 0 {
            sigma0.clone()
        } else if i == len - 1 {
            sigma_t.clone()
        } else {
            match (&q_inv[i], &p_inv[i]) {
                (Some(q), Some(p)) => psd::sym_inverse(&(p + q), tol, "P(t)⁻¹ + Q(t)⁻¹")?,
                _ => return Err(BridgeError::NumericalFailure(format!("no covariance at t = {}", grid[i]))),
            }
        };
        sigma.push(s);
        gain.push(q_inv[i].as_ref().map(|q| -(sys.b_at(grid[i]).transpose() * q)));
    }

    Ok(BridgeSolution {
        grid,
        q_inv,
        p_inv,
        sigma,
        gain,
        singular: flags,
        delta,
        clearance: (delta0, delta_t),
        boundary,
        input: sys.input().clone(),
        endpoints: (m0.sigma().clone(), mt.sigma().clone()),
    })
}
