//! Gradient-descent schedules on linear and network Q-functions, with
//! per-step metrics and policy-crossing analysis.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envs::{ActionId, EmbeddingTable, MiniBatch, StateId};
use crate::nn::{self, Mlp, SgdConfig, SgdState};
use crate::qlinear::{self, greedy_action, Theta, TwoSampleBatch};
use crate::{fmt_f64, Error, GradMode, Result};

/// Losses above this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub method: GradMode,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub damping: f64,
}

impl Phase {
    pub fn plain(method: GradMode, steps: usize, lr: f64) -> Self {
        Phase { method, steps, lr, momentum: 0.0, damping: 0.0 }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, damping: self.damping }
    }
}

/// Phases run in order; the optimizer velocity restarts at zero with each
/// phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

impl Schedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        let s = Schedule { phases };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::precondition("a schedule needs at least one phase"));
        }
        for p in &self.phases {
            if p.steps == 0 {
                return Err(Error::precondition("every phase needs at least one step"));
            }
            p.sgd().validate()?;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Linear model: residual then semi descent, 25,000 steps each at lr 0.1.
    pub fn linear_default() -> Self {
        Schedule {
            phases: vec![
                Phase::plain(GradMode::Residual, 25_000, 0.1),
                Phase::plain(GradMode::Semi, 25_000, 0.1),
            ],
        }
    }

    /// Two-layer network: 10,000 residual then 10,000 semi steps at lr 0.002.
    pub fn small_net_default() -> Self {
        Schedule {
            phases: vec![
                Phase::plain(GradMode::Residual, 10_000, 0.002),
                Phase::plain(GradMode::Semi, 10_000, 0.002),
            ],
        }
    }

    /// Grid-world network: 10,000 residual steps with momentum, then 15,000
    /// plain semi steps.
    pub fn gridworld_default() -> Self {
        Schedule {
            phases: vec![
                Phase { method: GradMode::Residual, steps: 10_000, lr: 0.3, momentum: 0.8, damping: 0.1 },
                Phase::plain(GradMode::Semi, 15_000, 0.1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Linear(Theta),
    Net(Mlp),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Number of updates applied so far.
    pub step: usize,
    /// Index of the phase that produced this record (0 for the start).
    pub phase: usize,
    pub method: GradMode,
    pub loss: f64,
    /// Parameters of a linear model.
    pub theta: Option<Theta>,
    /// `V(s) = max_a Q(s, a)` per tracked state.
    pub values: Vec<f64>,
    /// Greedy action per tracked state.
    pub argmax: Vec<ActionId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Non-terminal states appearing in the batch, ascending.
    pub tracked: Vec<StateId>,
    /// One record per step, including the starting point.
    pub records: Vec<StepRecord>,
    pub final_model: Model,
}

/// Non-terminal states appearing as `s` or `s'` in the batch.
pub fn tracked_states(batch: &MiniBatch, emb: &EmbeddingTable) -> Vec<StateId> {
    let mut out: Vec<StateId> = batch
        .samples()
        .iter()
        .flat_map(|x| [x.s, x.s_next])
        .filter(|&s| !emb.is_terminal(s))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

struct Evaluator<'a> {
    batch: &'a MiniBatch,
    emb: &'a EmbeddingTable,
    gamma: f64,
    tracked: Vec<StateId>,
}

#[derive(Clone, Copy)]
enum View<'m> {
    Linear(Theta),
    Net(&'m Mlp),
}

impl<'m> From<&'m Model> for View<'m> {
    fn from(m: &'m Model) -> Self {
        match m {
            Model::Linear(t) => View::Linear(*t),
            Model::Net(n) => View::Net(n),
        }
    }
}

impl Evaluator<'_> {
    fn record(&self, model: View<'_>, step: usize, phase: usize, method: GradMode) -> Result<StepRecord> {
        let (loss, theta) = match model {
            View::Linear(t) => (qlinear::bellman_loss(self.batch, self.emb, self.gamma, t)?, Some(t)),
            View::Net(net) => (nn::bellman_loss(net, self.batch, self.emb, self.gamma)?, None),
        };
        if !(loss <= DIVERGENCE_LIMIT) {
            return Err(Error::Diverged { step, loss });
        }
        let mut values = Vec::with_capacity(self.tracked.len());
        let mut argmax = Vec::with_capacity(self.tracked.len());
        for &s in &self.tracked {
            let q = match model {
                View::Linear(t) => {
                    let phi = self.emb.scalar(s)?;
                    vec![phi * t.a1, phi * t.a2]
                }
                View::Net(net) => nn::q_forward(net, self.emb.get(s)?)?,
            };
            let a = greedy_action(&q);
            values.push(q[a]);
            argmax.push(ActionId(a));
        }
        Ok(StepRecord { step, phase, method, loss, theta, values, argmax })
    }
}

/// Runs `schedule` from `model`. Linear models follow the force
/// (`θ <- θ + lr F(θ)`, i.e. the optimizer rule with gradient `-F`);
/// networks follow [`nn::batch_gradient`].
pub fn run_schedule(
    model: Model,
    batch: &MiniBatch,
    emb: &EmbeddingTable,
    gamma: f64,
    schedule: &Schedule,
) -> Result<Trajectory> {
    schedule.validate()?;
    let linear = match &model {
        Model::Linear(t) => {
            if !t.is_finite() {
                return Err(Error::precondition("starting parameters must be finite"));
            }
            Some(TwoSampleBatch::new(batch, emb, gamma)?)
        }
        Model::Net(net) => {
            if net.input_dim() != emb.dim() {
                return Err(Error::DimensionMismatch { expected: emb.dim(), found: net.input_dim() });
            }
            None
        }
    };
    let eval = Evaluator { batch, emb, gamma, tracked: tracked_states(batch, emb) };
    let mut records = Vec::with_capacity(schedule.total_steps() + 1);
    records.push(eval.record((&model).into(), 0, 0, schedule.phases[0].method)?);

    let mut model = model;
    let mut step = 0;
    for (k, phase) in schedule.phases.iter().enumerate() {
        let sgd = phase.sgd();
        match &mut model {
            Model::Linear(theta) => {
                let two = linear.as_ref().expect("built for linear models");
                let mut state = SgdState::new(2);
                let mut p = theta.to_array();
                for _ in 0..phase.steps {
                    let f = two.force(phase.method, Theta::from_array(p));
                    nn::sgd_update(&mut p, &[-f[0], -f[1]], &sgd, &mut state)?;
                    step += 1;
                    *theta = Theta::from_array(p);
                    records.push(eval.record(View::Linear(*theta), step, k, phase.method)?);
                }
            }
            Model::Net(net) => {
                let mut state = SgdState::new(net.n_params());
                for _ in 0..phase.steps {
                    let g = nn::batch_gradient(net, batch, emb, gamma, phase.method)?;
                    nn::sgd_step(net, &g, &sgd, &mut state)?;
                    step += 1;
                    records.push(eval.record(View::Net(net), step, k, phase.method)?);
                }
            }
        }
    }
    Ok(Trajectory { tracked: eval.tracked, records, final_model: model })
}

impl Trajectory {
    pub fn final_theta(&self) -> Option<Theta> {
        match &self.final_model {
            Model::Linear(t) => Some(*t),
            Model::Net(_) => None,
        }
    }

    /// Records produced by `phase`.
    pub fn phase_records(&self, phase: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().skip(1).filter(move |r| r.phase == phase)
    }

    /// CSV export. Linear: `step,phase,loss,theta_a1,theta_a2`; networks:
    /// `step,phase,loss,V_s..,argmax_s..` with one-based action numbers.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let linear = matches!(self.final_model, Model::Linear(_));
        let mut header = vec!["step".to_string(), "phase".into(), "loss".into()];
        if linear {
            header.extend(["theta_a1".into(), "theta_a2".into()]);
        } else {
            header.extend(self.tracked.iter().map(|s| format!("V_{s}")));
            header.extend(self.tracked.iter().map(|s| format!("argmax_{s}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.method.to_string(), fmt_f64(r.loss)];
            match r.theta {
                Some(t) if linear => row.extend([fmt_f64(t.a1), fmt_f64(t.a2)]),
                _ => {
                    row.extend(r.values.iter().map(|&v| fmt_f64(v)));
                    row.extend(r.argmax.iter().map(|a| (a.0 + 1).to_string()));
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub step: usize,
    pub method: GradMode,
    pub state: String,
    pub old_action: String,
    pub new_action: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingReport {
    /// Every change of a tracked state's greedy action, by step.
    pub crossings: Vec<Crossing>,
    /// Step of the largest loss among semi-gradient records.
    pub loss_peak_step: Option<usize>,
    /// Distance from the loss peak to the nearest semi-phase crossing.
    pub coincidence_gap: Option<usize>,
}

impl CrossingReport {
    /// Distinct steps at which a semi-gradient update changed the policy.
    pub fn semi_crossing_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self
            .crossings
            .iter()
            .filter(|c| c.method == GradMode::Semi)
            .map(|c| c.step)
            .collect();
        steps.dedup();
        steps
    }
}

pub fn analyze_crossings(traj: &Trajectory) -> CrossingReport {
    let mut crossings = Vec::new();
    for w in traj.records.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        for ((s, old), new) in traj.tracked.iter().zip(&prev.argmax).zip(&cur.argmax) {
            if old != new {
                crossings.push(Crossing {
                    step: cur.step,
                    method: cur.method,
                    state: s.to_string(),
                    old_action: old.to_string(),
                    new_action: new.to_string(),
                });
            }
        }
    }
    let mut peak: Option<(usize, f64)> = None;
    for r in traj.records.iter().skip(1).filter(|r| r.method == GradMode::Semi) {
        if peak.is_none_or(|(_, l)| r.loss > l) {
            peak = Some((r.step, r.loss));
        }
    }
    let loss_peak_step = peak.map(|(s, _)| s);
    let coincidence_gap = loss_peak_step.and_then(|p| {
        crossings
            .iter()
            .filter(|c| c.method == GradMode::Semi)
            .map(|c| c.step.abs_diff(p))
            .min()
    });
    CrossingReport { crossings, loss_peak_step, coincidence_gap }
}
