#![allow(dead_code)]

use covbridge::{GaussianMarginal, LinearSystem, MatrixFunction};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn brownian(n: usize) -> LinearSystem {
    LinearSystem::new(
        MatrixFunction::constant(DMatrix::zeros(n, n)),
        MatrixFunction::constant(DMatrix::identity(n, n)),
        1.0,
    )
    .unwrap()
}

/// Double integrator: position driven by a velocity that is forced.
pub fn inertial() -> LinearSystem {
    LinearSystem::new(
        MatrixFunction::constant(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
        MatrixFunction::constant(DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
        1.0,
    )
    .unwrap()
}

pub fn diag(v: &[f64]) -> GaussianMarginal {
    GaussianMarginal::new(&DMatrix::from_diagonal(&DVector::from_row_slice(v))).unwrap()
}

/// Position spread 1 → 0.2 with velocity pinned at both ends.
pub fn inertial_marginals() -> (GaussianMarginal, GaussianMarginal) {
    (diag(&[1.0, 0.0]), diag(&[0.2, 0.0]))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, n, rng).qr().q()
}

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let w = gaussian(n, n, rng);
    let s = &w * w.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2;
    (&s + s.transpose()) * 0.5
}

/// `W W'` with `W` of shape `n × rank`, in a random orientation.
pub fn random_psd_rank(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = random_orthogonal(n, rng);
    let vals: Vec<f64> = (0..n).map(|i| if i < rank { 0.3 + i as f64 * 0.4 } else { 0.0 }).collect();
    let s = &q * DMatrix::from_diagonal(&DVector::from_vec(vals)) * q.transpose();
    (&s + s.transpose()) * 0.5
}

/// Random constant pair on `[0, 1]`, redrawn until it passes the controllability probe.
pub fn random_system(n: usize, m: usize, rng: &mut ChaCha8Rng) -> LinearSystem {
    loop {
        let a = gaussian(n, n, rng) * 0.6;
        let b = gaussian(n, m, rng);
        if let Ok(sys) = LinearSystem::new(MatrixFunction::constant(a), MatrixFunction::constant(b), 1.0) {
            return sys;
        }
    }
}

/// The inertial system with rank-one marginals rotated by independent random rotations.
pub fn rotated_rank_one_pair(seed: u64) -> (LinearSystem, GaussianMarginal, GaussianMarginal) {
    let mut r = rng(seed);
    let u0 = random_orthogonal(2, &mut r);
    let ut = random_orthogonal(2, &mut r);
    let s0 = &u0 * DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]) * u0.transpose();
    let st = &ut * DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.0]) * ut.transpose();
    let sym = |s: DMatrix<f64>| (&s + s.transpose()) * 0.5;
    (inertial(), GaussianMarginal::new(&sym(s0)).unwrap(), GaussianMarginal::new(&sym(st)).unwrap())
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.amax() * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `∫₀ᵀ e^{A(T−τ)} BB' e^{A'(T−τ)} dτ` by composite 5-point Gauss–Legendre.
pub fn gramian_quadrature(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: f64, panels: usize) -> DMatrix<f64> {
    let nodes = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    let weights = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
    let n = a.nrows();
    let h = horizon / panels as f64;
    let bbt = b * b.transpose();
    let mut acc = DMatrix::zeros(n, n);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            let tau = mid + 0.5 * h * x;
            let phi = expm(&(a * (horizon - tau)));
            acc += &phi * &bbt * phi.transpose() * (0.5 * h * w);
        }
    }
    acc
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Frobenius condition number of the reachability Gramian over `[0, T]`.
pub fn gramian_condition(sys: &LinearSystem) -> f64 {
    let m = sys.reachability_gramian(sys.horizon(), 0.0).unwrap();
    m.norm() * inv(&m).norm()
}
