//! Deterministic MDPs, state embeddings and mini-batch samplers.
//!
//! Two environments are provided: the four-state chain used for every
//! two-parameter landscape, and a 19-state grid world used for the deep
//! network experiment. States and actions are zero-based internally and
//! print one-based (`s1`, `a1`) to match the usual naming.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionId(pub usize);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0 + 1)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0 + 1)
    }
}

fn parse_one_based(s: &str, prefix: char) -> Option<usize> {
    let digits = s.trim().strip_prefix(prefix)?;
    match digits.parse::<usize>() {
        Ok(n) if n >= 1 => Some(n - 1),
        _ => None,
    }
}

impl FromStr for StateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_one_based(s, 's')
            .map(StateId)
            .ok_or_else(|| Error::UnknownState(s.to_string()))
    }
}

impl FromStr for ActionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_one_based(s, 'a')
            .map(ActionId)
            .ok_or_else(|| Error::UnknownAction(s.to_string()))
    }
}

/// A deterministic MDP with a finite state and action set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    name: String,
    n_states: usize,
    n_actions: usize,
    /// `transitions[s * n_actions + a]`, `None` for terminal states.
    transitions: Vec<Option<StateId>>,
    rewards: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
}

impl Mdp {
    /// Assembles an MDP from a transition table. Every non-terminal state must
    /// have one `(action, next, reward)` entry per action.
    pub fn new(
        name: impl Into<String>,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        terminal: &[StateId],
        table: &[(StateId, ActionId, StateId, f64)],
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::precondition(format!("gamma {gamma} is not inside (0, 1)")));
        }
        if n_states == 0 || n_actions == 0 {
            return Err(Error::precondition("an MDP needs at least one state and one action"));
        }
        let mut is_terminal = vec![false; n_states];
        for s in terminal {
            *is_terminal
                .get_mut(s.0)
                .ok_or_else(|| Error::UnknownState(s.to_string()))? = true;
        }
        let mut transitions = vec![None; n_states * n_actions];
        let mut rewards = vec![0.0; n_states * n_actions];
        for &(s, a, next, r) in table {
            if s.0 >= n_states || next.0 >= n_states {
                return Err(Error::UnknownState(format!("{s} -> {next}")));
            }
            if a.0 >= n_actions {
                return Err(Error::UnknownAction(a.to_string()));
            }
            if is_terminal[s.0] {
                return Err(Error::precondition(format!("terminal state {s} has an outgoing transition")));
            }
            transitions[s.0 * n_actions + a.0] = Some(next);
            rewards[s.0 * n_actions + a.0] = r;
        }
        for s in 0..n_states {
            if is_terminal[s] {
                continue;
            }
            for a in 0..n_actions {
                if transitions[s * n_actions + a].is_none() {
                    return Err(Error::precondition(format!(
                        "missing transition for ({}, {})",
                        StateId(s),
                        ActionId(a)
                    )));
                }
            }
        }
        Ok(Mdp {
            name: name.into(),
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            terminal: is_terminal,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.n_states).map(StateId)
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> {
        (0..self.n_actions).map(ActionId)
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal.get(s.0).copied().unwrap_or(false)
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states().filter(move |&s| !self.is_terminal(s))
    }

    fn slot(&self, s: StateId, a: ActionId) -> Result<usize> {
        if s.0 >= self.n_states {
            return Err(Error::UnknownState(s.to_string()));
        }
        if a.0 >= self.n_actions {
            return Err(Error::UnknownAction(a.to_string()));
        }
        Ok(s.0 * self.n_actions + a.0)
    }

    /// Next state of `(s, a)`. Terminal states have no transitions.
    pub fn transition(&self, s: StateId, a: ActionId) -> Result<StateId> {
        let slot = self.slot(s, a)?;
        self.transitions[slot]
            .ok_or_else(|| Error::precondition(format!("{s} is terminal and has no transitions")))
    }

    pub fn reward(&self, s: StateId, a: ActionId) -> Result<f64> {
        let slot = self.slot(s, a)?;
        if self.terminal[s.0] {
            return Err(Error::precondition(format!("{s} is terminal and has no rewards")));
        }
        Ok(self.rewards[slot])
    }

    /// The transition record obtained by taking `a` in `s`.
    pub fn sample(&self, s: StateId, a: ActionId) -> Result<Sample> {
        Ok(Sample {
            s,
            a,
            s_next: self.transition(s, a)?,
            r: self.reward(s, a)?,
        })
    }
}

/// State embeddings `φ(s)`. Terminal states carry the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    terminal: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>, terminal: Vec<bool>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::precondition("embedding dimension must be positive"));
        }
        if terminal.len() != vectors.len() {
            return Err(Error::DimensionMismatch { expected: vectors.len(), found: terminal.len() });
        }
        for (v, &t) in vectors.iter().zip(&terminal) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            if t && v.iter().any(|&x| x != 0.0) {
                return Err(Error::precondition("terminal embeddings must be zero"));
            }
        }
        Ok(EmbeddingTable { dim, vectors, terminal })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, s: StateId) -> Result<&[f64]> {
        self.vectors
            .get(s.0)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownState(s.to_string()))
    }

    /// The scalar embedding of a one-dimensional table.
    pub fn scalar(&self, s: StateId) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, found: self.dim });
        }
        Ok(self.get(s)?[0])
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal.get(s.0).copied().unwrap_or(false)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

/// One transition record `(s, a, s', r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub s: StateId,
    pub a: ActionId,
    pub s_next: StateId,
    pub r: f64,
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.s, self.a, self.s_next, self.r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    samples: Vec<Sample>,
}

impl MiniBatch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::precondition("a mini-batch needs at least one sample"));
        }
        Ok(MiniBatch { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Drops samples rejected by `keep`. Fails if nothing would remain.
    pub fn retain(&mut self, keep: impl FnMut(&Sample) -> bool) -> Result<()> {
        let mut kept = self.samples.clone();
        kept.retain(keep);
        if kept.is_empty() {
            return Err(Error::precondition("filter removed every sample"));
        }
        self.samples = kept;
        Ok(())
    }

    /// Short label such as `s1a1s2_s1a2s3`, used for output file names.
    pub fn label(&self) -> String {
        self.samples
            .iter()
            .map(|x| format!("{}{}{}", x.s, x.a, x.s_next))
            .collect::<Vec<_>>()
            .join("_")
    }

    /// Parses a comma-separated list of `s<i>a<j>s<k>` tokens, taking rewards
    /// from `mdp` and checking each transition against it.
    pub fn parse(desc: &str, mdp: &Mdp) -> Result<Self> {
        let mut samples = Vec::new();
        for token in desc.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let a_pos = token
                .find('a')
                .ok_or_else(|| Error::Parse(format!("`{token}` is not of the form s<i>a<j>s<k>")))?;
            let rest = &token[a_pos..];
            let s_pos = rest
                .find('s')
                .ok_or_else(|| Error::Parse(format!("`{token}` is not of the form s<i>a<j>s<k>")))?;
            let s: StateId = token[..a_pos].parse()?;
            let a: ActionId = rest[..s_pos].parse()?;
            let s_next: StateId = rest[s_pos..].parse()?;
            let sample = mdp.sample(s, a)?;
            if sample.s_next != s_next {
                return Err(Error::precondition(format!(
                    "({s}, {a}) leads to {}, not {s_next}",
                    sample.s_next
                )));
            }
            samples.push(sample);
        }
        MiniBatch::new(samples)
    }
}

/// Discount used by the four-state chain.
pub const EXAMPLE1_GAMMA: f64 = 0.9;
/// Reward on every transition of the four-state chain.
pub const EXAMPLE1_REWARD: f64 = -0.1;

/// The four-state, two-action chain.
///
/// Transitions (read off the mini-batch labels of the landscape figures,
/// e.g. `(s1, a1, s2)`, `(s1, a2, s3)`, `(s2, a1, s1)`, `(s2, a2, s4)`,
/// `(s3, a1, s1)`, `(s3, a2, s4)`):
///
/// | state | a1 | a2 |
/// |-------|----|----|
/// | s1    | s2 | s3 |
/// | s2    | s1 | s4 |
/// | s3    | s1 | s4 |
///
/// `s4` is terminal and embedded at zero, so its value is identically 0.
pub fn build_example1() -> (Mdp, EmbeddingTable) {
    let (s1, s2, s3, s4) = (StateId(0), StateId(1), StateId(2), StateId(3));
    let (a1, a2) = (ActionId(0), ActionId(1));
    let r = EXAMPLE1_REWARD;
    let table = [
        (s1, a1, s2, r),
        (s1, a2, s3, r),
        (s2, a1, s1, r),
        (s2, a2, s4, r),
        (s3, a1, s1, r),
        (s3, a2, s4, r),
    ];
    let mdp = Mdp::new("example1", 4, 2, EXAMPLE1_GAMMA, &[s4], &table)
        .expect("the chain table is complete");
    let emb = EmbeddingTable::new(
        1,
        vec![vec![0.1], vec![11.0 / 180.0], vec![29.0 / 180.0], vec![0.0]],
        vec![false, false, false, true],
    )
    .expect("the chain embeddings are well formed");
    (mdp, emb)
}

/// Grid-world discount.
pub const GRIDWORLD_GAMMA: f64 = 0.98;
/// Grid-world embedding dimension: one column per state in the sampled box.
pub const GRIDWORLD_EMBED_DIM: usize = 15;
/// Default seeds. They index our own generator, so they do not reproduce the
/// embeddings or weights of any other framework.
pub const GRIDWORLD_EMBED_SEED: u64 = 4;
pub const GRIDWORLD_INIT_SEED: u64 = 75;

const GRID_ROWS: usize = 4;
const GRID_COLS: usize = 5;

/// Cell layout of the grid world, row-major, `None` for the wall cell.
///
/// ```text
///   s1  s2  s3  s4  s5
///   s6  s7  s8  s9  s10
///   s11 s12 s13 s14 s15
///   s16 s17 s18 s19 ##
/// ```
///
/// The top three rows form the 15-state box whose states carry the
/// 15 x 15 embedding matrix; `s16` is terminal.
const GRID_LAYOUT: [[Option<usize>; GRID_COLS]; GRID_ROWS] = [
    [Some(0), Some(1), Some(2), Some(3), Some(4)],
    [Some(5), Some(6), Some(7), Some(8), Some(9)],
    [Some(10), Some(11), Some(12), Some(13), Some(14)],
    [Some(15), Some(16), Some(17), Some(18), None],
];

/// Default sampled states: the first eleven states of the box, `s1..s11`,
/// giving 44 samples with all four actions.
pub const DEFAULT_GRIDWORLD_SUBSET: [StateId; 11] = [
    StateId(0),
    StateId(1),
    StateId(2),
    StateId(3),
    StateId(4),
    StateId(5),
    StateId(6),
    StateId(7),
    StateId(8),
    StateId(9),
    StateId(10),
];

fn grid_position(s: usize) -> (usize, usize) {
    for (row, cells) in GRID_LAYOUT.iter().enumerate() {
        for (col, cell) in cells.iter().enumerate() {
            if *cell == Some(s) {
                return (row, col);
            }
        }
    }
    unreachable!("every grid state has a cell")
}

/// The 19-state, four-action grid world (`up, down, left, right`).
///
/// Moves off the grid or into the wall bounce back to the current state.
/// Entering `s12`, `s13` or `s14` pays -1, entering `s15` pays +1, and every
/// other move pays 0. `s16` is terminal.
///
/// Embeddings are drawn uniformly from `[0, 1)` with a `Xoshiro256PlusPlus`
/// generator seeded by `embedding_seed` (via `seed_from_u64`): first the
/// 15 x 15 matrix for `s1..s15` row by row, then one extra row each for
/// `s17..s19`. Every row is scaled to unit Euclidean norm.
pub fn build_gridworld(embedding_seed: u64) -> (Mdp, EmbeddingTable) {
    const N_STATES: usize = 19;
    const TERMINAL: usize = 15;
    let moves: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

    let mut table = Vec::new();
    for s in 0..N_STATES {
        if s == TERMINAL {
            continue;
        }
        let (row, col) = grid_position(s);
        for (a, (dr, dc)) in moves.iter().enumerate() {
            let (nr, nc) = (row as isize + dr, col as isize + dc);
            let next = if nr < 0 || nc < 0 || nr >= GRID_ROWS as isize || nc >= GRID_COLS as isize {
                s
            } else {
                GRID_LAYOUT[nr as usize][nc as usize].unwrap_or(s)
            };
            let reward = match next {
                11..=13 => -1.0,
                14 => 1.0,
                _ => 0.0,
            };
            table.push((StateId(s), ActionId(a), StateId(next), reward));
        }
    }
    let mdp = Mdp::new("gridworld", N_STATES, 4, GRIDWORLD_GAMMA, &[StateId(TERMINAL)], &table)
        .expect("the grid table is complete");

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(embedding_seed);
    let draw_row = |rng: &mut Xoshiro256PlusPlus| {
        let mut row: Vec<f64> = (0..GRIDWORLD_EMBED_DIM).map(|_| rng.random::<f64>()).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
        row
    };
    let mut vectors = vec![vec![0.0; GRIDWORLD_EMBED_DIM]; N_STATES];
    for v in vectors.iter_mut().take(15) {
        *v = draw_row(&mut rng);
    }
    for v in vectors.iter_mut().skip(16) {
        *v = draw_row(&mut rng);
    }
    let terminal = (0..N_STATES).map(|s| s == TERMINAL).collect();
    let emb = EmbeddingTable::new(GRIDWORLD_EMBED_DIM, vectors, terminal)
        .expect("grid embeddings are well formed");
    (mdp, emb)
}

/// All two-sample batches `{(s_α, a1, s'_α, r), (s_β, a2, s'_β, r)}` with
/// `s_α`, `s_β` non-terminal, in lexicographic `(s_α, s_β)` order.
pub fn enumerate_minibatches(mdp: &Mdp) -> Result<Vec<MiniBatch>> {
    if mdp.n_actions() != 2 {
        return Err(Error::precondition(format!(
            "two-action sampling needs exactly two actions, the MDP has {}",
            mdp.n_actions()
        )));
    }
    let states: Vec<StateId> = mdp.non_terminal_states().collect();
    let mut batches = Vec::with_capacity(states.len() * states.len());
    for &alpha in &states {
        for &beta in &states {
            let first = mdp.sample(alpha, ActionId(0))?;
            let second = mdp.sample(beta, ActionId(1))?;
            batches.push(MiniBatch::new(vec![first, second])?);
        }
    }
    Ok(batches)
}

/// The Cartesian product of `state_subset` with every action.
pub fn gridworld_batch(mdp: &Mdp, state_subset: &[StateId]) -> Result<MiniBatch> {
    if state_subset.is_empty() {
        return Err(Error::precondition("the sampled state subset is empty"));
    }
    let mut samples = Vec::with_capacity(state_subset.len() * mdp.n_actions());
    for &s in state_subset {
        if s.0 >= mdp.n_states() {
            return Err(Error::UnknownState(s.to_string()));
        }
        if mdp.is_terminal(s) {
            return Err(Error::precondition(format!("{s} is terminal and cannot be sampled")));
        }
        for a in mdp.actions() {
            samples.push(mdp.sample(s, a)?);
        }
    }
    MiniBatch::new(samples)
}

/// Parses a state list such as `s1,s2,s5` or a range `s1-s11`.
pub fn parse_state_list(desc: &str) -> Result<Vec<StateId>> {
    let mut out = Vec::new();
    for token in desc.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some((lo, hi)) = token.split_once('-') {
            let (lo, hi): (StateId, StateId) = (lo.parse()?, hi.parse()?);
            if hi < lo {
                return Err(Error::Parse(format!("empty range `{token}`")));
            }
            out.extend((lo.0..=hi.0).map(StateId));
        } else {
            out.push(token.parse()?);
        }
    }
    Ok(out)
}

// JSON documents. Transitions and samples are arrays `[s, a, s', r]`;
// embeddings are row-major arrays, one row per state.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDocument {
    pub name: String,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub gamma: f64,
    pub terminal: Vec<String>,
    pub transitions: Vec<(String, String, String, f64)>,
    pub embedding_dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

impl EnvironmentDocument {
    pub fn new(mdp: &Mdp, emb: &EmbeddingTable) -> Self {
        let mut transitions = Vec::new();
        for s in mdp.non_terminal_states() {
            for a in mdp.actions() {
                let x = mdp.sample(s, a).expect("non-terminal states have every action");
                transitions.push((s.to_string(), a.to_string(), x.s_next.to_string(), x.r));
            }
        }
        EnvironmentDocument {
            name: mdp.name().to_string(),
            states: mdp.states().map(|s| s.to_string()).collect(),
            actions: mdp.actions().map(|a| a.to_string()).collect(),
            gamma: mdp.gamma(),
            terminal: mdp
                .states()
                .filter(|&s| mdp.is_terminal(s))
                .map(|s| s.to_string())
                .collect(),
            transitions,
            embedding_dim: emb.dim(),
            embeddings: emb.rows().to_vec(),
        }
    }

    pub fn into_parts(self) -> Result<(Mdp, EmbeddingTable)> {
        let terminal = self
            .terminal
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<StateId>>>()?;
        let table = self
            .transitions
            .iter()
            .map(|(s, a, n, r)| Ok((s.parse()?, a.parse()?, n.parse()?, *r)))
            .collect::<Result<Vec<_>>>()?;
        let mdp = Mdp::new(self.name, self.states.len(), self.actions.len(), self.gamma, &terminal, &table)?;
        let flags = mdp.states().map(|s| mdp.is_terminal(s)).collect();
        let emb = EmbeddingTable::new(self.embedding_dim, self.embeddings, flags)?;
        Ok((mdp, emb))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchDocument {
    pub samples: Vec<(String, String, String, f64)>,
}

impl From<&MiniBatch> for BatchDocument {
    fn from(batch: &MiniBatch) -> Self {
        BatchDocument {
            samples: batch
                .samples()
                .iter()
                .map(|x| (x.s.to_string(), x.a.to_string(), x.s_next.to_string(), x.r))
                .collect(),
        }
    }
}

impl TryFrom<BatchDocument> for MiniBatch {
    type Error = Error;

    fn try_from(doc: BatchDocument) -> Result<Self> {
        let samples = doc
            .samples
            .iter()
            .map(|(s, a, n, r)| {
                Ok(Sample { s: s.parse()?, a: a.parse()?, s_next: n.parse()?, r: *r })
            })
            .collect::<Result<Vec<_>>>()?;
        MiniBatch::new(samples)
    }
}
