//! The two-parameter linear Q-function `Q(s, a) = φ(s) θ(a)`.
//!
//! Everything here assumes a one-dimensional embedding and two actions. The
//! force fields are the negative residual gradient and the negative
//! semi-gradient of the two-sample Bellman loss, selected by the greedy
//! policy region of `θ`, without the `2/|D|` prefactor of the gradient
//! definitions (it only rescales time).

use serde::{Deserialize, Serialize};

use crate::envs::{ActionId, EmbeddingTable, MiniBatch, StateId};
use crate::{Error, GradMode, Result};

pub type Vec2 = [f64; 2];

/// Linear coefficients `(θ(a1), θ(a2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub a1: f64,
    pub a2: f64,
}

impl Theta {
    pub const fn new(a1: f64, a2: f64) -> Self {
        Theta { a1, a2 }
    }

    pub fn from_array([a1, a2]: Vec2) -> Self {
        Theta { a1, a2 }
    }

    pub fn to_array(self) -> Vec2 {
        [self.a1, self.a2]
    }

    pub fn get(self, a: ActionId) -> Result<f64> {
        match a.0 {
            0 => Ok(self.a1),
            1 => Ok(self.a2),
            _ => Err(Error::UnknownAction(a.to_string())),
        }
    }

    pub fn region(self) -> PolicyRegion {
        if self.a1 > self.a2 {
            PolicyRegion::Pi1
        } else if self.a1 < self.a2 {
            PolicyRegion::Pi2
        } else {
            PolicyRegion::Boundary
        }
    }

    pub fn offset(self, h: Vec2, scale: f64) -> Theta {
        Theta::new(self.a1 + scale * h[0], self.a2 + scale * h[1])
    }

    pub fn distance(self, other: Theta) -> f64 {
        (self.a1 - other.a1).hypot(self.a2 - other.a2)
    }

    pub fn lerp(self, other: Theta, t: f64) -> Theta {
        Theta::new(self.a1 + t * (other.a1 - self.a1), self.a2 + t * (other.a2 - self.a2))
    }

    pub fn is_finite(self) -> bool {
        self.a1.is_finite() && self.a2.is_finite()
    }
}

impl std::str::FromStr for Theta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [x, y] => {
                let parse = |v: &str| v.parse::<f64>().map_err(|e| Error::Parse(format!("`{v}`: {e}")));
                Ok(Theta::new(parse(x)?, parse(y)?))
            }
            _ => Err(Error::Parse(format!("expected `a1,a2`, got `{s}`"))),
        }
    }
}

/// Greedy-policy region of a parameter point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyRegion {
    /// `θ(a1) > θ(a2)`: every positively embedded state picks `a1`.
    Pi1,
    /// `θ(a1) < θ(a2)`.
    Pi2,
    Boundary,
}

/// Index of the largest value, ties resolved toward the lowest index.
pub fn greedy_action(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn q_value(emb: &EmbeddingTable, theta: Theta, s: StateId, a: ActionId) -> Result<f64> {
    let phi = emb.scalar(s)?;
    let coef = theta.get(a)?;
    if emb.is_terminal(s) {
        return Ok(0.0);
    }
    Ok(phi * coef)
}

fn td_error(emb: &EmbeddingTable, gamma: f64, theta: Theta, x: &crate::envs::Sample) -> Result<f64> {
    let q = q_value(emb, theta, x.s, x.a)?;
    let next = [
        q_value(emb, theta, x.s_next, ActionId(0))?,
        q_value(emb, theta, x.s_next, ActionId(1))?,
    ];
    let best = next[greedy_action(&next)];
    Ok(q - x.r - gamma * best)
}

/// Mean squared TD error over the batch.
pub fn bellman_loss(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64, theta: Theta) -> Result<f64> {
    let mut sum = 0.0;
    for x in batch.samples() {
        let d = td_error(emb, gamma, theta, x)?;
        sum += d * d;
    }
    Ok(sum / batch.len() as f64)
}

/// Which action the greedy policy picks at the next states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Pi1,
    Pi2,
}

impl Branch {
    fn of(theta: Theta) -> Branch {
        if theta.a1 >= theta.a2 {
            Branch::Pi1
        } else {
            Branch::Pi2
        }
    }

    fn index(self) -> usize {
        match self {
            Branch::Pi1 => 0,
            Branch::Pi2 => 1,
        }
    }
}

/// A batch `{(s_α, a1, s'_α, C_α), (s_β, a2, s'_β, C_β)}` reduced to the
/// embeddings the force equations need.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoSampleBatch {
    pub phi_alpha: f64,
    pub phi_alpha_next: f64,
    pub phi_beta: f64,
    pub phi_beta_next: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
    pub gamma: f64,
}

impl TwoSampleBatch {
    pub fn new(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64) -> Result<Self> {
        let samples = batch.samples();
        if samples.len() != 2 {
            return Err(Error::precondition(format!(
                "expected one a1 sample and one a2 sample, got {} samples",
                samples.len()
            )));
        }
        let alpha = samples.iter().find(|x| x.a == ActionId(0));
        let beta = samples.iter().find(|x| x.a == ActionId(1));
        let (alpha, beta) = match (alpha, beta) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::precondition("expected one a1 sample and one a2 sample")),
        };
        let phi = |s: StateId| -> Result<f64> {
            if emb.is_terminal(s) {
                Ok(0.0)
            } else {
                emb.scalar(s)
            }
        };
        Ok(TwoSampleBatch {
            phi_alpha: phi(alpha.s)?,
            phi_alpha_next: phi(alpha.s_next)?,
            phi_beta: phi(beta.s)?,
            phi_beta_next: phi(beta.s_next)?,
            c_alpha: alpha.r,
            c_beta: beta.r,
            gamma,
        })
    }

    /// `φ(s_α) - γ φ(s'_α)`.
    pub fn margin_alpha(&self) -> f64 {
        self.phi_alpha - self.gamma * self.phi_alpha_next
    }

    /// `φ(s_β) - γ φ(s'_β)`.
    pub fn margin_beta(&self) -> f64 {
        self.phi_beta - self.gamma * self.phi_beta_next
    }

    fn td_errors(&self, theta: Theta, branch: Branch) -> Vec2 {
        let target = theta.to_array()[branch.index()];
        [
            self.phi_alpha * theta.a1 - self.c_alpha - self.gamma * self.phi_alpha_next * target,
            self.phi_beta * theta.a2 - self.c_beta - self.gamma * self.phi_beta_next * target,
        ]
    }

    /// Negative semi-gradient under a fixed next-state policy:
    /// `(-φ(s_α) δ_α, -φ(s_β) δ_β)`.
    pub fn semi_branch(&self, theta: Theta, branch: Branch) -> Vec2 {
        let [da, db] = self.td_errors(theta, branch);
        [-self.phi_alpha * da, -self.phi_beta * db]
    }

    /// Negative residual gradient under a fixed next-state policy,
    /// `-(δ_α ∇δ_α + δ_β ∇δ_β)`.
    ///
    /// For `Pi1` this is
    /// `(-(φ_α - γφ'_α) δ_α + γφ'_β δ_β, -φ_β δ_β)`; for `Pi2` it is
    /// `(-φ_α δ_α, γφ'_α δ_α - (φ_β - γφ'_β) δ_β)`.
    pub fn residual_branch(&self, theta: Theta, branch: Branch) -> Vec2 {
        let [da, db] = self.td_errors(theta, branch);
        let g = self.gamma;
        match branch {
            Branch::Pi1 => [
                -self.margin_alpha() * da + g * self.phi_beta_next * db,
                -self.phi_beta * db,
            ],
            Branch::Pi2 => [
                -self.phi_alpha * da,
                g * self.phi_alpha_next * da - self.margin_beta() * db,
            ],
        }
    }

    pub fn force_branch(&self, method: GradMode, theta: Theta, branch: Branch) -> Vec2 {
        match method {
            GradMode::Semi => self.semi_branch(theta, branch),
            GradMode::Residual => self.residual_branch(theta, branch),
        }
    }

    /// Region-selected force: the `Pi1` branch when `θ(a1) >= θ(a2)`.
    pub fn force(&self, method: GradMode, theta: Theta) -> Vec2 {
        self.force_branch(method, theta, Branch::of(theta))
    }

    pub fn solutions(&self) -> Result<SolutionPair> {
        let (ma, mb) = (self.margin_alpha(), self.margin_beta());
        if ma == 0.0 || mb == 0.0 {
            return Err(Error::precondition(
                "degenerate batch: φ(s) - γφ(s') vanishes for one of the samples",
            ));
        }
        if self.c_alpha != self.c_beta || self.c_alpha >= 0.0 {
            return Err(Error::precondition(format!(
                "closed forms need a common negative reward, got {} and {}",
                self.c_alpha, self.c_beta
            )));
        }
        if self.phi_alpha <= 0.0 || self.phi_beta <= 0.0 {
            return Err(Error::precondition("closed forms need positive φ(s_α), φ(s_β)"));
        }
        let c = self.c_alpha;
        let g = self.gamma;
        let pi1 = Theta::new(
            c / ma,
            c / self.phi_beta + c * g * self.phi_beta_next / (self.phi_beta * ma),
        );
        let pi2 = Theta::new(
            c / self.phi_alpha + c * g * self.phi_alpha_next / (self.phi_alpha * mb),
            c / mb,
        );
        let coincident = (ma - mb).abs() <= 4.0 * f64::EPSILON * ma.abs().max(mb.abs());
        let exists_pi1 = coincident || mb / ma <= 1.0;
        let exists_pi2 = coincident || ma / mb <= 1.0;
        Ok(SolutionPair {
            theta_pi1: exists_pi1.then_some(pi1),
            theta_pi2: exists_pi2.then_some(if coincident { pi1 } else { pi2 }),
            exists_pi1,
            exists_pi2,
            coincident,
        })
    }
}

/// Zero-loss points of the two-sample Bellman loss, one per policy region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionPair {
    pub theta_pi1: Option<Theta>,
    pub theta_pi2: Option<Theta>,
    pub exists_pi1: bool,
    pub exists_pi2: bool,
    /// Both solutions coincide on the policy boundary.
    pub coincident: bool,
}

impl SolutionPair {
    pub fn count(&self) -> usize {
        if self.coincident {
            1
        } else {
            usize::from(self.exists_pi1) + usize::from(self.exists_pi2)
        }
    }

    /// Midpoint of both solutions, or the sole solution.
    pub fn center(&self) -> Option<Theta> {
        match (self.theta_pi1, self.theta_pi2) {
            (Some(a), Some(b)) => Some(a.lerp(b, 0.5)),
            (Some(a), None) | (None, Some(a)) => Some(a),
            (None, None) => None,
        }
    }
}

pub fn residual_force(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64, theta: Theta) -> Result<Vec2> {
    Ok(TwoSampleBatch::new(batch, emb, gamma)?.force(GradMode::Residual, theta))
}

pub fn semi_force(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64, theta: Theta) -> Result<Vec2> {
    Ok(TwoSampleBatch::new(batch, emb, gamma)?.force(GradMode::Semi, theta))
}

pub fn closed_form_solutions(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64) -> Result<SolutionPair> {
    TwoSampleBatch::new(batch, emb, gamma)?.solutions()
}

/// `F(θ + h) - F(θ - h)` for a boundary point `θ` and an offset with
/// `h1 > h2`, so the two arguments sit on opposite sides of the boundary.
pub fn boundary_discontinuity(
    batch: &MiniBatch,
    emb: &EmbeddingTable,
    gamma: f64,
    theta_boundary: Theta,
    h: Vec2,
    method: GradMode,
) -> Result<Vec2> {
    if theta_boundary.a1 != theta_boundary.a2 {
        return Err(Error::precondition(format!(
            "({}, {}) is not on the policy boundary",
            theta_boundary.a1, theta_boundary.a2
        )));
    }
    if !(h[0] >= h[1]) {
        return Err(Error::precondition("offset must satisfy h1 > h2 (or be zero)"));
    }
    if h[0] == h[1] && h[0] != 0.0 {
        return Err(Error::precondition("offset runs along the boundary and does not straddle it"));
    }
    let b = TwoSampleBatch::new(batch, emb, gamma)?;
    let plus = b.force(method, theta_boundary.offset(h, 1.0));
    let minus = b.force(method, theta_boundary.offset(h, -1.0));
    Ok([plus[0] - minus[0], plus[1] - minus[1]])
}

/// Cosine between `θ_π1 - θ_π2` and the semi-gradient force at `θ`, for `θ`
/// on the open segment between the two solutions.
pub fn alignment_cosine(batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64, theta: Theta) -> Result<f64> {
    let b = TwoSampleBatch::new(batch, emb, gamma)?;
    let scale = b.phi_alpha.abs().max(b.phi_beta.abs());
    if (b.phi_alpha - b.phi_beta).abs() > 1e-12 * scale {
        return Err(Error::precondition("alignment needs φ(s_α) = φ(s_β)"));
    }
    let sols = b.solutions()?;
    let (p1, p2) = match (sols.theta_pi1, sols.theta_pi2) {
        (Some(p1), Some(p2)) if !sols.coincident => (p1, p2),
        _ => return Err(Error::precondition("alignment needs two distinct solutions")),
    };
    let d = [p1.a1 - p2.a1, p1.a2 - p2.a2];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let rel = [theta.a1 - p2.a1, theta.a2 - p2.a2];
    let lambda = (rel[0] * d[0] + rel[1] * d[1]) / len2;
    let perp = (rel[0] * d[1] - rel[1] * d[0]).abs() / len2.sqrt();
    let off_segment = || {
        Error::precondition(format!(
            "({}, {}) is not inside the open segment between the solutions",
            theta.a1, theta.a2
        ))
    };
    if perp > 1e-9 * len2.sqrt() || !(0.0..=1.0).contains(&lambda) {
        return Err(off_segment());
    }
    let f = b.force(GradMode::Semi, theta);
    let fnorm = f[0].hypot(f[1]);
    // roundoff floor: at a solution the force is zero up to a few ulps
    if fnorm <= 1e-15 * (1.0 + theta.a1.abs() + theta.a2.abs()) {
        return Err(Error::UndefinedCosine(theta.a1, theta.a2));
    }
    if lambda == 0.0 || lambda == 1.0 {
        return Err(off_segment());
    }
    Ok((d[0] * f[0] + d[1] * f[1]) / (len2.sqrt() * fnorm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_example1, enumerate_minibatches, EXAMPLE1_GAMMA};
    use proptest::prelude::*;

    const G: f64 = EXAMPLE1_GAMMA;

    fn batch(desc: &str) -> (MiniBatch, EmbeddingTable) {
        let (mdp, emb) = build_example1();
        (MiniBatch::parse(desc, &mdp).unwrap(), emb)
    }

    fn b1() -> (MiniBatch, EmbeddingTable) {
        batch("s1a1s2,s1a2s3")
    }

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn q_values() {
        let (_, emb) = build_example1();
        let q = q_value(&emb, Theta::new(-2.0, 1.0), StateId(0), ActionId(0)).unwrap();
        assert!((q + 0.2).abs() < 1e-15);
        assert_eq!(q_value(&emb, Theta::new(3.0, -7.0), StateId(3), ActionId(1)).unwrap(), 0.0);
        let q = q_value(&emb, Theta::new(0.0, 2.0), StateId(2), ActionId(1)).unwrap();
        assert!((q - 29.0 / 90.0).abs() < 1e-15);
        assert!(q_value(&emb, Theta::new(0.0, 0.0), StateId(9), ActionId(0)).is_err());
        assert!(q_value(&emb, Theta::new(0.0, 0.0), StateId(0), ActionId(2)).is_err());
    }

    #[test]
    fn loss_at_origin() {
        let (b, emb) = b1();
        let l = bellman_loss(&b, &emb, G, Theta::new(0.0, 0.0)).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(bellman_loss(&b, &emb, G, Theta::new(1.0, -3.0)).unwrap() > 0.0);
    }

    #[test]
    fn forces_match_hand_evaluation() {
        let (b, emb) = b1();
        let t = Theta::new(-2.0, 1.0);
        assert!(close(residual_force(&b, &emb, G, t).unwrap(), [0.0155, -0.00605], 1e-15));
        assert!(close(semi_force(&b, &emb, G, t).unwrap(), [0.0155, -0.0055], 1e-15));
    }

    /// The force equations written out term by term, independent of the
    /// branch-generic implementation. The second component of the `π1`
    /// residual force uses the β sample.
    fn written_out(tb: &TwoSampleBatch, method: GradMode, t: Theta) -> Vec2 {
        let (pa, pan, pb, pbn, c, g) =
            (tb.phi_alpha, tb.phi_alpha_next, tb.phi_beta, tb.phi_beta_next, tb.c_alpha, tb.gamma);
        let (x, y) = (t.a1, t.a2);
        match (method, t.a1 >= t.a2) {
            (GradMode::Residual, true) => [
                -(pa - g * pan) * (pa * x - c - g * pan * x) + g * pbn * (pb * y - c - g * pbn * x),
                -pb * (pb * y - c - g * pbn * x),
            ],
            (GradMode::Residual, false) => [
                -pa * (pa * x - c - g * pan * y),
                g * pan * (pa * x - c - g * pan * y) - (pb - g * pbn) * (pb * y - c - g * pbn * y),
            ],
            (GradMode::Semi, true) => [-pa * (pa * x - c - g * pan * x), -pb * (pb * y - c - g * pbn * x)],
            (GradMode::Semi, false) => [-pa * (pa * x - c - g * pan * y), -pb * (pb * y - c - g * pbn * y)],
        }
    }

    #[test]
    fn forces_match_written_out_equations_on_every_batch() {
        let (mdp, emb) = build_example1();
        for batch in enumerate_minibatches(&mdp).unwrap() {
            let tb = TwoSampleBatch::new(&batch, &emb, G).unwrap();
            for &(x, y) in &[(-2.0, 1.0), (1.0, 1.0), (3.0, -4.0), (0.3, 0.2)] {
                let t = Theta::new(x, y);
                for m in [GradMode::Semi, GradMode::Residual] {
                    assert!(close(tb.force(m, t), written_out(&tb, m, t), 1e-15), "{} {m} {t:?}", batch.label());
                }
            }
        }
    }

    #[test]
    fn b1_closed_forms() {
        let (b, emb) = b1();
        let sols = closed_form_solutions(&b, &emb, G).unwrap();
        let p1 = sols.theta_pi1.unwrap();
        let p2 = sols.theta_pi2.unwrap();
        assert!((p1.a1 + 20.0 / 9.0).abs() < 1e-12 && (p1.a2 + 38.0 / 9.0).abs() < 1e-12);
        assert!((p2.a1 - 2.0 / 9.0).abs() < 1e-12 && (p2.a2 - 20.0 / 9.0).abs() < 1e-12);
        for p in [p1, p2] {
            assert!(bellman_loss(&b, &emb, G, p).unwrap() <= 1e-24);
        }
        assert!(close(semi_force(&b, &emb, G, p1).unwrap(), [0.0, 0.0], 1e-15));
        assert!(close(residual_force(&b, &emb, G, p2).unwrap(), [0.0, 0.0], 1e-15));
    }

    #[test]
    fn single_solution_batch() {
        let (b, emb) = batch("s1a1s2,s2a2s4");
        let sols = closed_form_solutions(&b, &emb, G).unwrap();
        assert!(!sols.exists_pi1 && sols.exists_pi2);
        assert_eq!(sols.count(), 1);
    }

    #[test]
    fn five_single_four_double() {
        let (mdp, emb) = build_example1();
        let counts: Vec<usize> = enumerate_minibatches(&mdp)
            .unwrap()
            .iter()
            .map(|b| closed_form_solutions(b, &emb, G).unwrap().count())
            .collect();
        assert_eq!(counts.iter().filter(|&&c| c == 1).count(), 5);
        assert_eq!(counts.iter().filter(|&&c| c == 2).count(), 4);
    }

    #[test]
    fn degenerate_margin_is_rejected() {
        let tb = TwoSampleBatch {
            phi_alpha: 0.9 * 0.1,
            phi_alpha_next: 0.1,
            phi_beta: 0.1,
            phi_beta_next: 0.0,
            c_alpha: -0.1,
            c_beta: -0.1,
            gamma: 0.9,
        };
        assert!(matches!(tb.solutions(), Err(Error::Precondition(_))));
    }

    #[test]
    fn coincident_solutions_sit_on_the_boundary() {
        let tb = TwoSampleBatch {
            phi_alpha: 0.1,
            phi_alpha_next: 0.05,
            phi_beta: 0.1,
            phi_beta_next: 0.05,
            c_alpha: -0.1,
            c_beta: -0.1,
            gamma: 0.9,
        };
        let sols = tb.solutions().unwrap();
        assert!(sols.coincident && sols.exists_pi1 && sols.exists_pi2);
        let p = sols.theta_pi1.unwrap();
        assert_eq!(sols.theta_pi2, Some(p));
        assert!((p.a1 - p.a2).abs() < 1e-12);
    }

    #[test]
    fn boundary_jumps() {
        let (b, emb) = b1();
        let on = Theta::new(1.0, 1.0);
        let semi = boundary_discontinuity(&b, &emb, G, on, [0.0, 0.0], GradMode::Semi).unwrap();
        assert_eq!(semi, [0.0, 0.0]);
        let tb = TwoSampleBatch::new(&b, &emb, G).unwrap();
        let jump_semi = {
            let p = tb.semi_branch(on, Branch::Pi1);
            let q = tb.semi_branch(on, Branch::Pi2);
            [p[0] - q[0], p[1] - q[1]]
        };
        assert_eq!(jump_semi, [0.0, 0.0]);
        let p = tb.residual_branch(on, Branch::Pi1);
        let q = tb.residual_branch(on, Branch::Pi2);
        assert!((p[0] - q[0]).hypot(p[1] - q[1]) > 1e-3);

        let t = 1e-9;
        let res = boundary_discontinuity(&b, &emb, G, on, [t, -t], GradMode::Residual).unwrap();
        assert!(res[0].hypot(res[1]) > 1e-3);
        assert!(boundary_discontinuity(&b, &emb, G, Theta::new(1.0, 0.5), [t, -t], GradMode::Semi).is_err());
        assert!(boundary_discontinuity(&b, &emb, G, on, [-t, t], GradMode::Semi).is_err());
    }

    #[test]
    fn alignment_signs() {
        let (b, emb) = b1();
        let sols = closed_form_solutions(&b, &emb, G).unwrap();
        let (p1, p2) = (sols.theta_pi1.unwrap(), sols.theta_pi2.unwrap());
        let c = alignment_cosine(&b, &emb, G, p2.lerp(p1, 0.3)).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
        assert!(matches!(alignment_cosine(&b, &emb, G, p1), Err(Error::UndefinedCosine(..))));
        assert!(matches!(alignment_cosine(&b, &emb, G, Theta::new(0.0, 0.0)), Err(Error::Precondition(_))));

        let (b2, emb) = batch("s2a1s1,s2a2s4");
        let sols = closed_form_solutions(&b2, &emb, G).unwrap();
        let (q1, q2) = (sols.theta_pi1.unwrap(), sols.theta_pi2.unwrap());
        let c = alignment_cosine(&b2, &emb, G, q2.lerp(q1, 0.7)).unwrap();
        assert!((c + 1.0).abs() < 1e-9);

        let (b3, emb) = batch("s2a1s1,s3a2s4");
        assert!(alignment_cosine(&b3, &emb, G, Theta::new(0.0, 0.0)).is_err());
    }

    fn ex1_batches() -> Vec<MiniBatch> {
        let (mdp, _) = build_example1();
        enumerate_minibatches(&mdp).unwrap()
    }

    proptest! {
        #[test]
        fn residual_force_is_half_negative_gradient(
            idx in 0usize..9, x in -6.0f64..6.0, y in -6.0f64..6.0,
        ) {
            prop_assume!((x - y).abs() > 1e-3);
            let (_, emb) = build_example1();
            let b = &ex1_batches()[idx];
            let t = Theta::new(x, y);
            let f = residual_force(b, &emb, G, t).unwrap();
            let h = 1e-6;
            let total = |p: Theta| 2.0 * bellman_loss(b, &emb, G, p).unwrap();
            let gx = (total(t.offset([h, 0.0], 1.0)) - total(t.offset([h, 0.0], -1.0))) / (2.0 * h);
            let gy = (total(t.offset([0.0, h], 1.0)) - total(t.offset([0.0, h], -1.0))) / (2.0 * h);
            let fd = [-0.5 * gx, -0.5 * gy];
            let scale = f[0].abs().max(f[1].abs()).max(1e-6);
            prop_assert!((f[0] - fd[0]).abs() <= 1e-5 * scale + 1e-10, "{f:?} vs {fd:?}");
            prop_assert!((f[1] - fd[1]).abs() <= 1e-5 * scale + 1e-10, "{f:?} vs {fd:?}");
        }

        #[test]
        fn semi_force_is_half_negative_frozen_gradient(
            idx in 0usize..9, x in -6.0f64..6.0, y in -6.0f64..6.0,
        ) {
            prop_assume!((x - y).abs() > 1e-3);
            let (_, emb) = build_example1();
            let b = &ex1_batches()[idx];
            let t = Theta::new(x, y);
            let f = semi_force(b, &emb, G, t).unwrap();
            // targets frozen at t
            let targets: Vec<f64> = b.samples().iter().map(|s| {
                let next = [
                    q_value(&emb, t, s.s_next, ActionId(0)).unwrap(),
                    q_value(&emb, t, s.s_next, ActionId(1)).unwrap(),
                ];
                s.r + G * next[greedy_action(&next)]
            }).collect();
            let frozen = |p: Theta| -> f64 {
                b.samples().iter().zip(&targets).map(|(s, y)| {
                    let d = q_value(&emb, p, s.s, s.a).unwrap() - y;
                    d * d
                }).sum()
            };
            let h = 1e-6;
            let gx = (frozen(t.offset([h, 0.0], 1.0)) - frozen(t.offset([h, 0.0], -1.0))) / (2.0 * h);
            let gy = (frozen(t.offset([0.0, h], 1.0)) - frozen(t.offset([0.0, h], -1.0))) / (2.0 * h);
            let fd = [-0.5 * gx, -0.5 * gy];
            let scale = f[0].abs().max(f[1].abs()).max(1e-6);
            prop_assert!((f[0] - fd[0]).abs() <= 1e-5 * scale + 1e-10);
            prop_assert!((f[1] - fd[1]).abs() <= 1e-5 * scale + 1e-10);
        }

        #[test]
        fn loss_is_continuous_across_the_boundary(idx in 0usize..9, x in -6.0f64..6.0) {
            let (_, emb) = build_example1();
            let b = &ex1_batches()[idx];
            let tb = TwoSampleBatch::new(b, &emb, G).unwrap();
            let t = Theta::new(x, x);
            let via = |br: Branch| { let d = tb.td_errors(t, br); (d[0] * d[0] + d[1] * d[1]) / 2.0 };
            prop_assert_eq!(via(Branch::Pi1), via(Branch::Pi2));
            let direct = bellman_loss(b, &emb, G, t).unwrap();
            prop_assert!((via(Branch::Pi1) - direct).abs() <= 1e-14 * direct.max(1e-300));
        }

        #[test]
        fn solutions_zero_forces_and_lie_in_their_region(idx in 0usize..9) {
            let (_, emb) = build_example1();
            let b = &ex1_batches()[idx];
            let sols = closed_form_solutions(b, &emb, G).unwrap();
            if let Some(p) = sols.theta_pi1 {
                prop_assert!(p.a1 >= p.a2);
            }
            if let Some(p) = sols.theta_pi2 {
                prop_assert!(p.a1 <= p.a2);
            }
            for p in sols.theta_pi1.into_iter().chain(sols.theta_pi2) {
                for m in [GradMode::Semi, GradMode::Residual] {
                    let f = TwoSampleBatch::new(b, &emb, G).unwrap().force(m, p);
                    prop_assert!(f[0].abs().max(f[1].abs()) <= 1e-12);
                }
            }
        }
    }
}
