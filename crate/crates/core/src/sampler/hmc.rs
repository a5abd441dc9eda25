use rand::Rng;

use super::distributions::sample_std_gaussian_vec;

/// A differentiable negative log-density over a flat parameter vector.
pub trait PotentialTarget {
    fn dim(&self) -> usize;
    fn potential(&self, u: &[f64]) -> f64;
    fn gradient(&self, u: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    /// False once any position or gradient went non-finite.
    pub valid: bool,
}

/// `n_steps` leapfrog steps: half momentum, full position, half momentum.
pub fn leapfrog<T: PotentialTarget + ?Sized>(target: &T, u: &[f64], m: &[f64], eps: f64, n_steps: usize) -> Trajectory {
    let n = u.len();
    let mut pos = u.to_vec();
    let mut mom = m.to_vec();
    let mut g = vec![0.0; n];
    target.gradient(&pos, &mut g);
    for (p, gi) in mom.iter_mut().zip(&g) {
        *p -= 0.5 * eps * gi;
    }
    for step in 0..n_steps {
        for (x, p) in pos.iter_mut().zip(&mom) {
            *x += eps * p;
        }
        target.gradient(&pos, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Trajectory { position: pos, momentum: mom, valid: false };
        }
        let w = if step + 1 == n_steps { 0.5 * eps } else { eps };
        for (p, gi) in mom.iter_mut().zip(&g) {
            *p -= w * gi;
        }
    }
    let valid = pos.iter().chain(&mom).all(|v| v.is_finite());
    Trajectory { position: pos, momentum: mom, valid }
}

/// Outcome of one Metropolis-corrected Hamiltonian move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcStep {
    pub accepted: bool,
    /// `H_new - H_old`; infinite for an invalid trajectory.
    pub delta_h: f64,
    pub accept_prob: f64,
    /// Potential at the position the chain holds after the move.
    pub potential: f64,
}

/// Refreshes momentum, integrates `N_L ~ U{n_min..=n_max}` steps and applies
/// the Metropolis test. `u` is overwritten only on acceptance.
pub fn hmc_move<T: PotentialTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    u: &mut Vec<f64>,
    eps: f64,
    n_min: usize,
    n_max: usize,
    rng: &mut R,
) -> HmcStep {
    let m = sample_std_gaussian_vec(u.len(), rng);
    let n_steps = rng.random_range(n_min..=n_max);
    let u_old = target.potential(u);
    let h_old = u_old + 0.5 * m.iter().map(|v| v * v).sum::<f64>();
    let traj = leapfrog(target, u, &m, eps, n_steps);
    let log_u: f64 = rng.random::<f64>().ln();
    if !traj.valid {
        return HmcStep { accepted: false, delta_h: f64::INFINITY, accept_prob: 0.0, potential: u_old };
    }
    let u_new = target.potential(&traj.position);
    let h_new = u_new + 0.5 * traj.momentum.iter().map(|v| v * v).sum::<f64>();
    let delta_h = h_new - h_old;
    if !delta_h.is_finite() {
        return HmcStep { accepted: false, delta_h: f64::INFINITY, accept_prob: 0.0, potential: u_old };
    }
    let accept_prob = (-delta_h).exp().min(1.0);
    if log_u < -delta_h {
        *u = traj.position;
        HmcStep { accepted: true, delta_h, accept_prob, potential: u_new }
    } else {
        HmcStep { accepted: false, delta_h, accept_prob, potential: u_old }
    }
}

/// Gaussian `N(mean, diag(var))`, used to exercise the integrator.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PotentialTarget for DiagonalGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn potential(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.mean).zip(&self.var).map(|((x, m), v)| 0.5 * (x - m).powi(2) / v).sum()
    }

    fn gradient(&self, u: &[f64], grad: &mut [f64]) {
        for (((g, x), m), v) in grad.iter_mut().zip(u).zip(&self.mean).zip(&self.var) {
            *g = (x - m) / v;
        }
    }
}
