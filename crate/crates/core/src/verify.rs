//! Numeric checks of the solution-count, boundary-smoothness, alignment and
//! solver invariants, run by `qland verify`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::envs::{build_example1, enumerate_minibatches, EmbeddingTable, MiniBatch, EXAMPLE1_GAMMA};
use crate::fpe::{self, FpeConfig, Grid2D, SolverMode};
use crate::qlinear::{self, Theta};
use crate::{GradMode, Result};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn example1_batch(desc: &str) -> Result<(MiniBatch, EmbeddingTable)> {
    let (mdp, emb) = build_example1();
    Ok((MiniBatch::parse(desc, &mdp)?, emb))
}

/// Least-squares line `y = k x + b`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let k = sxy / sxx;
    (k, my - k * mx)
}

fn solution_counts() -> Result<(bool, String)> {
    let (mdp, emb) = build_example1();
    let mut counts = [0usize; 3];
    for b in enumerate_minibatches(&mdp)? {
        counts[qlinear::closed_form_solutions(&b, &emb, EXAMPLE1_GAMMA)?.count()] += 1;
    }
    Ok((
        counts == [0, 5, 4],
        format!("{} batches with one solution, {} with two", counts[1], counts[2]),
    ))
}

fn closed_forms_vanish() -> Result<(bool, String)> {
    let (mdp, emb) = build_example1();
    let mut worst: f64 = 0.0;
    for b in enumerate_minibatches(&mdp)? {
        let sols = qlinear::closed_form_solutions(&b, &emb, EXAMPLE1_GAMMA)?;
        for t in [sols.theta_pi1, sols.theta_pi2].into_iter().flatten() {
            for m in [GradMode::Semi, GradMode::Residual] {
                let f = qlinear::TwoSampleBatch::new(&b, &emb, EXAMPLE1_GAMMA)?.force(m, t);
                worst = worst.max(f[0].abs()).max(f[1].abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("largest force at a solution {worst:.3e}")))
}

/// Semi-gradient jump shrinks linearly; residual jump at (1, 1) persists.
pub fn boundary_smoothness() -> Result<(bool, String)> {
    let (b, emb) = example1_batch("s1a1s2,s1a2s3")?;
    let ts: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
    let p = Theta::new(1.0, 1.0);
    let mut semi = Vec::new();
    let mut res = Vec::new();
    for &t in &ts {
        let j = qlinear::boundary_discontinuity(&b, &emb, EXAMPLE1_GAMMA, p, [t, -t], GradMode::Semi)?;
        semi.push(j[0].hypot(j[1]));
        let j = qlinear::boundary_discontinuity(&b, &emb, EXAMPLE1_GAMMA, p, [t, -t], GradMode::Residual)?;
        res.push(j[0].hypot(j[1]));
    }
    let (k, intercept) = fit_line(&ts, &semi);
    let bounded = semi.iter().zip(&ts).all(|(j, t)| *j <= k * t * (1.0 + 1e-6) + 1e-15);
    let res_min = res.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((
        bounded && intercept.abs() <= 1e-10 && res_min >= 1e-3,
        format!("semi jump slope {k:.4e}, intercept {intercept:.2e}; smallest residual jump {res_min:.4e}"),
    ))
}

/// Cosines on the segment between the two solutions for both sign patterns.
pub fn alignment() -> Result<(bool, String)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let mut worst = [0.0f64; 2];
    for (k, (desc, expected)) in [("s1a1s2,s1a2s3", 1.0), ("s2a1s1,s2a2s4", -1.0)].into_iter().enumerate() {
        let (b, emb) = example1_batch(desc)?;
        let sols = qlinear::closed_form_solutions(&b, &emb, EXAMPLE1_GAMMA)?;
        let (p1, p2) = (sols.theta_pi1.expect("two solutions"), sols.theta_pi2.expect("two solutions"));
        for _ in 0..100 {
            let lambda = rng.random_range(1e-3..1.0 - 1e-3);
            let c = qlinear::alignment_cosine(&b, &emb, EXAMPLE1_GAMMA, p2.lerp(p1, lambda))?;
            worst[k] = worst[k].max((c - expected).abs());
        }
    }
    Ok((
        worst.iter().all(|w| *w <= 1e-9),
        format!("max |cos - 1| = {:.2e}, max |cos + 1| = {:.2e}", worst[0], worst[1]),
    ))
}

fn fpe_uniform() -> Result<(bool, String)> {
    let grid = Grid2D::centered(Theta::new(0.0, 0.0), 30, 0.1)?;
    let field = fpe::sample_force_field(|_| [0.0, 0.0], grid)?;
    let r = fpe::steady_state(&field, &FpeConfig::default())?;
    let u = 1.0 / grid.len() as f64;
    let dev = r.rho.iter().map(|p| (p - u).abs()).fold(0.0, f64::max);
    Ok((dev <= 1e-10, format!("max deviation from uniform {dev:.2e}")))
}

fn fpe_gibbs() -> Result<(bool, String)> {
    let grid = Grid2D::centered(Theta::new(0.5, -0.5), 40, 0.02)?;
    let sigma = fpe::DEFAULT_SIGMA;
    let u = |t: Theta| 0.5 * (t.a1 * t.a1 + t.a2 * t.a2) + 0.25 * t.a1 * t.a2;
    let field = fpe::sample_force_field(|t| [-(t.a1 + 0.25 * t.a2), -(t.a2 + 0.25 * t.a1)], grid)?;
    let r = fpe::steady_state(&field, &FpeConfig { sigma, ..FpeConfig::default() })?;
    let c: Vec<f64> = (0..grid.len())
        .filter_map(|k| {
            let (i, j) = grid.coords(k);
            grid.is_interior(i, j, 1).then(|| r.rho[k].ln() + u(grid.cell_center(i, j)) / sigma)
        })
        .collect();
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let rel = c.iter().map(|x| ((x - mean) / mean).abs()).fold(0.0, f64::max);
    let mass = (r.rho.iter().sum::<f64>() - 1.0).abs();
    Ok((
        rel <= 1e-2 && mass <= 1e-12 && r.residual_norm <= r.tolerance,
        format!("ln ρ + U/σ relative spread {rel:.2e}, mass error {mass:.1e}, residual {:.2e}", r.residual_norm),
    ))
}

fn fpe_decomposition() -> Result<(bool, String)> {
    let (b, emb) = example1_batch("s1a1s2,s1a2s3")?;
    let two = qlinear::TwoSampleBatch::new(&b, &emb, EXAMPLE1_GAMMA)?;
    let sols = two.solutions()?;
    let grid = Grid2D::centered(sols.center().expect("solutions exist"), 50, 0.19)?;
    let field = fpe::sample_force_field(|t| two.force(GradMode::Semi, t), grid)?;
    let cfg = FpeConfig::default();
    let r = fpe::steady_state(&field, &cfg)?;
    let d = fpe::decompose_force(&field, &r)?;
    let mut err: f64 = 0.0;
    for k in 0..grid.len() {
        let (i, j) = grid.coords(k);
        if grid.is_interior(i, j, 1) && d.masked.binary_search(&k).is_err() {
            err = err
                .max((d.gradient.fx[k] + d.flux.fx[k] - field.fx[k]).abs())
                .max((d.gradient.fy[k] + d.flux.fy[k] - field.fy[k]).abs());
        }
    }
    let rel = err / field.max_norm();
    let p = fpe::steady_state(&field, &FpeConfig { solver_mode: SolverMode::Propagate, ..cfg })?;
    let gap = r.rho.iter().zip(&p.rho).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        rel <= 0.05 && gap <= 1e-6,
        format!("reconstruction error {rel:.2e} of max force; propagate vs null-space gap {gap:.2e}"),
    ))
}

/// Runs every check in a fixed order.
pub fn run_all() -> Vec<Check> {
    vec![
        Check::from_result("solution counts", solution_counts()),
        Check::from_result("closed forms are zeros of both forces", closed_forms_vanish()),
        Check::from_result("boundary smoothness", boundary_smoothness()),
        Check::from_result("alignment on the solution segment", alignment()),
        Check::from_result("fpe uniform density", fpe_uniform()),
        Check::from_result("fpe gibbs density", fpe_gibbs()),
        Check::from_result("fpe force decomposition", fpe_decomposition()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit() {
        let (k, b) = fit_line(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((k - 2.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14);
    }

    #[test]
    fn every_check_passes() {
        for c in run_all() {
            assert!(c.passed, "{c}");
        }
    }
}
