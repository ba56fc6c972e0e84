//! One-dimensional symbolic episodic Harlow task.
//!
//! The world is a ring of `world_size` cells. The agent sees `field_size`
//! contiguous cells starting at its heading and can only turn one cell left
//! or right per step. Every trial starts with a fixation cross somewhere in
//! the receptive field; bringing it to the center cell yields the fixation
//! reward and reveals two objects, one of which is rewarding for the whole
//! episode. Bringing an object to the center completes the trial.
//!
//! ```text
//!  field index:  0   1   2   3   4   5   6   7
//!  fixation:     .   .   .   +   .   .   .   .     (cross 1 cell right of center)
//!  choice:       .   .   A   .   .   .   B   .     (after fixating)
//! ```
//!
//! Turning left shifts every visible symbol one field index to the right.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the per-cell one-hot block: empty, fixation cross, then one slot per object.
pub fn one_hot_width(num_objects: usize) -> usize {
    num_objects + 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub world_size: usize,
    pub field_size: usize,
    pub center: usize,
    pub trials: usize,
    pub step_cap: usize,
    pub num_objects: usize,
    pub train_objects: usize,
    pub reward_correct: f64,
    pub reward_wrong: f64,
    pub reward_fixation: f64,
    /// Field indices the two objects appear at.
    pub object_slots: [usize; 2],
    /// Reassign the rewarding object's side on every trial instead of once per episode.
    pub shuffle_sides: bool,
    pub context_dim: usize,
    pub encoding: ObsEncoding,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            world_size: 16,
            field_size: 8,
            center: 4,
            trials: 6,
            step_cap: 120,
            num_objects: 100,
            train_objects: 80,
            reward_correct: 1.0,
            reward_wrong: -1.0,
            reward_fixation: 0.2,
            object_slots: [2, 6],
            shuffle_sides: true,
            context_dim: 32,
            encoding: ObsEncoding::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.field_size == 0 || self.field_size > self.world_size {
            return bad(format!(
                "field_size {} must be in 1..={}",
                self.field_size, self.world_size
            ));
        }
        if self.center >= self.field_size {
            return bad(format!("center {} outside the receptive field", self.center));
        }
        for &slot in &self.object_slots {
            if slot >= self.field_size || slot == self.center {
                return bad(format!("object slot {slot} must be a non-center field index"));
            }
        }
        if self.object_slots[0] == self.object_slots[1] {
            return bad("object slots must differ".into());
        }
        if self.cross_offsets().is_empty() {
            return bad("receptive field has no valid fixation offsets".into());
        }
        if self.train_objects < 2 || self.num_objects - self.train_objects.min(self.num_objects) < 2 {
            return bad(format!(
                "both splits need at least two objects (num_objects {}, train_objects {})",
                self.num_objects, self.train_objects
            ));
        }
        if self.trials == 0 || self.step_cap == 0 {
            return bad("trials and step_cap must be positive".into());
        }
        if self.context_dim == 0 {
            return bad("context_dim must be positive".into());
        }
        if let ObsEncoding::Code { dim } = self.encoding {
            if dim == 0 {
                return bad("object code dimension must be positive".into());
            }
        }
        for r in [self.reward_correct, self.reward_wrong, self.reward_fixation] {
            if !r.is_finite() {
                return bad("reward values must be finite".into());
            }
        }
        Ok(())
    }

    /// Field indices the cross may appear at: everything except the center.
    pub fn cross_offsets(&self) -> Vec<usize> {
        (1..self.field_size).filter(|&k| k != self.center).collect()
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_objects,
            Split::Test => self.train_objects..self.num_objects,
        }
    }

    /// Width of one encoded cell.
    pub fn cell_width(&self) -> usize {
        match self.encoding {
            ObsEncoding::OneHot => one_hot_width(self.num_objects),
            ObsEncoding::Code { dim } => 3 + dim,
        }
    }

    /// Width of an encoded observation.
    pub fn obs_width(&self) -> usize {
        self.field_size * self.cell_width()
    }
}

/// How the symbolic receptive field is turned into the encoder's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsEncoding {
    /// One one-hot block per cell over {empty, cross, object_0..object_{n-1}}.
    OneHot,
    /// Per cell: one-hot over {empty, cross, object} followed by a fixed random
    /// appearance code for the object (zeros otherwise).
    Code { dim: usize },
}

impl Default for ObsEncoding {
    fn default() -> Self {
        ObsEncoding::Code { dim: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Left
        } else {
            Action::Right
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Fixation,
    Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    Fixation,
    Object(ObjectId),
}

impl Cell {
    pub fn one_hot_index(self) -> usize {
        match self {
            Cell::Empty => 0,
            Cell::Fixation => 1,
            Cell::Object(ObjectId(k)) => 2 + k as usize,
        }
    }
}

/// Identifies a reoccurring task. The vector is random and generated once;
/// `task_id` is the canonical integer used for exact-match lookups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextKey {
    pub task_id: u32,
    pub vector: Vec<f64>,
}

/// An ordered object pair: `rewarding` pays +1 for the whole episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub rewarding: ObjectId,
    pub distractor: ObjectId,
    pub context: ContextKey,
}

impl Task {
    pub fn id(&self) -> u32 {
        self.context.task_id
    }
}

/// Canonical id of the ordered pair `(rewarding, distractor)`.
pub fn task_id(num_objects: usize, rewarding: ObjectId, distractor: ObjectId) -> u32 {
    (rewarding.0 as usize * num_objects + distractor.0 as usize) as u32
}

/// Every ordered pair of distinct objects within a split.
pub fn task_universe(config: &EnvConfig, split: Split) -> Vec<(ObjectId, ObjectId)> {
    let range = config.split_range(split);
    let mut out = Vec::new();
    for a in range.clone() {
        for b in range.clone() {
            if a != b {
                out.push((ObjectId(a as u16), ObjectId(b as u16)));
            }
        }
    }
    out
}

/// Run-scoped table of context keys, generated lazily on first encounter.
#[derive(Debug, Clone, Default)]
pub struct ContextRegistry {
    keys: HashMap<u32, ContextKey>,
}

impl ContextRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, task_id: u32) -> Option<&ContextKey> {
        self.keys.get(&task_id)
    }

    fn key_for<R: Rng + ?Sized>(&mut self, task_id: u32, dim: usize, rng: &mut R) -> ContextKey {
        self.keys
            .entry(task_id)
            .or_insert_with(|| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x /= norm);
                ContextKey { task_id, vector: v }
            })
            .clone()
    }
}

/// Draws an ordered pair uniformly from the split (first object rewarding)
/// and attaches its context, creating it on first sight.
pub fn sample_task<R: Rng + ?Sized>(
    config: &EnvConfig,
    rng: &mut R,
    split: Split,
    registry: &mut ContextRegistry,
) -> Task {
    let range = config.split_range(split);
    let n = range.len();
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let rewarding = ObjectId((range.start + a) as u16);
    let distractor = ObjectId((range.start + b) as u16);
    let id = task_id(config.num_objects, rewarding, distractor);
    let context = registry.key_for(id, config.context_dim, rng);
    Task {
        rewarding,
        distractor,
        context,
    }
}

/// The eight visible cells, left to right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub cells: Vec<Cell>,
}

impl Observation {
    /// Concatenated per-cell one-hot blocks.
    pub fn one_hot(&self, num_objects: usize) -> Vec<f64> {
        let w = one_hot_width(num_objects);
        let mut out = vec![0.0; w * self.cells.len()];
        for (k, cell) in self.cells.iter().enumerate() {
            out[k * w + cell.one_hot_index()] = 1.0;
        }
        out
    }

    pub fn count(&self, pred: impl Fn(&Cell) -> bool) -> usize {
        self.cells.iter().filter(|c| pred(c)).count()
    }
}

/// Fixed appearance codes for every object. Derived from a constant seed so
/// that an object looks the same in every run.
#[derive(Debug, Clone)]
pub struct ObjectCodes {
    dim: usize,
    codes: Vec<f64>,
}

const OBJECT_CODE_SEED: u64 = 0x0b1ec7;

impl ObjectCodes {
    pub fn new(num_objects: usize, dim: usize) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(OBJECT_CODE_SEED);
        let mut codes = Vec::with_capacity(num_objects * dim);
        for _ in 0..num_objects {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            // scaled so that a code has roughly unit entries
            let scale = (dim as f64).sqrt() / norm;
            codes.extend(v.iter().map(|x| x * scale));
        }
        ObjectCodes { dim, codes }
    }

    pub fn code(&self, id: ObjectId) -> &[f64] {
        let k = id.0 as usize;
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }
}

/// Turns observations into encoder inputs according to [`ObsEncoding`].
#[derive(Debug, Clone)]
pub struct ObsEncoder {
    num_objects: usize,
    cell_width: usize,
    codes: Option<ObjectCodes>,
}

impl ObsEncoder {
    pub fn new(config: &EnvConfig) -> Self {
        let codes = match config.encoding {
            ObsEncoding::OneHot => None,
            ObsEncoding::Code { dim } => Some(ObjectCodes::new(config.num_objects, dim)),
        };
        ObsEncoder {
            num_objects: config.num_objects,
            cell_width: config.cell_width(),
            codes,
        }
    }

    pub fn width(&self, field_size: usize) -> usize {
        self.cell_width * field_size
    }

    pub fn encode_into(&self, obs: &Observation, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.cell_width * obs.cells.len(), 0.0);
        for (k, cell) in obs.cells.iter().enumerate() {
            let block = &mut out[k * self.cell_width..(k + 1) * self.cell_width];
            match &self.codes {
                None => block[cell.one_hot_index()] = 1.0,
                Some(codes) => match *cell {
                    Cell::Empty => block[0] = 1.0,
                    Cell::Fixation => block[1] = 1.0,
                    Cell::Object(id) => {
                        block[2] = 1.0;
                        block[3..].copy_from_slice(codes.code(id));
                    }
                },
            }
        }
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let mut out = Vec::new();
        self.encode_into(obs, &mut out);
        out
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub trial_index: usize,
    pub phase: Phase,
    pub fixated: bool,
    pub chose_correct: Option<bool>,
    /// Set on the step whose observation first shows the object pair.
    pub retrieval_step: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub world: Vec<Cell>,
    pub heading: usize,
    pub phase: Phase,
    pub trial_index: usize,
    pub step_count: usize,
    pub task: Task,
    /// Side of the rewarding object in the current choice phase.
    pub rewarding_side: Side,
    pub done: bool,
}

impl WorldState {
    /// Fresh episode: empty world, cross at a random non-center field index.
    pub fn reset<R: Rng + ?Sized>(
        config: &EnvConfig,
        task: Task,
        rng: &mut R,
    ) -> (WorldState, Observation) {
        let mut state = WorldState {
            world: vec![Cell::Empty; config.world_size],
            heading: 0,
            phase: Phase::Fixation,
            trial_index: 0,
            step_count: 0,
            task,
            rewarding_side: Side::Left,
            done: false,
        };
        if !config.shuffle_sides {
            state.rewarding_side = random_side(rng);
        }
        state.place_cross(config, rng);
        let obs = state.observation(config);
        (state, obs)
    }

    fn world_index(&self, config: &EnvConfig, field_index: usize) -> usize {
        (self.heading + field_index) % config.world_size
    }

    pub fn field_cell(&self, config: &EnvConfig, field_index: usize) -> Cell {
        self.world[self.world_index(config, field_index)]
    }

    pub fn observation(&self, config: &EnvConfig) -> Observation {
        Observation {
            cells: (0..config.field_size).map(|k| self.field_cell(config, k)).collect(),
        }
    }

    fn clear(&mut self) {
        self.world.iter_mut().for_each(|c| *c = Cell::Empty);
    }

    fn place_cross<R: Rng + ?Sized>(&mut self, config: &EnvConfig, rng: &mut R) {
        let offsets = config.cross_offsets();
        let off = offsets[rng.random_range(0..offsets.len())];
        let idx = self.world_index(config, off);
        self.world[idx] = Cell::Fixation;
    }

    fn place_objects<R: Rng + ?Sized>(&mut self, config: &EnvConfig, rng: &mut R) {
        if config.shuffle_sides {
            self.rewarding_side = random_side(rng);
        }
        let (left, right) = match self.rewarding_side {
            Side::Left => (self.task.rewarding, self.task.distractor),
            Side::Right => (self.task.distractor, self.task.rewarding),
        };
        let l = self.world_index(config, config.object_slots[0]);
        let r = self.world_index(config, config.object_slots[1]);
        self.world[l] = Cell::Object(left);
        self.world[r] = Cell::Object(right);
    }

    /// Applies one turn. Stepping a finished episode is an error.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        config: &EnvConfig,
        action: Action,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        self.heading = match action {
            Action::Left => (self.heading + config.world_size - 1) % config.world_size,
            Action::Right => (self.heading + 1) % config.world_size,
        };
        self.step_count += 1;

        let mut reward = 0.0;
        let mut fixated = false;
        let mut chose_correct = None;
        let mut retrieval_step = false;
        let centered = self.field_cell(config, config.center);
        match (self.phase, centered) {
            (Phase::Fixation, Cell::Fixation) => {
                reward = config.reward_fixation;
                fixated = true;
                self.clear();
                self.place_objects(config, rng);
                self.phase = Phase::Choice;
                retrieval_step = self.trial_index == 0;
            }
            (Phase::Choice, Cell::Object(id)) => {
                let correct = id == self.task.rewarding;
                reward = if correct {
                    config.reward_correct
                } else {
                    config.reward_wrong
                };
                chose_correct = Some(correct);
                self.clear();
                self.trial_index += 1;
                self.phase = Phase::Fixation;
                self.place_cross(config, rng);
            }
            _ => {}
        }
        self.done = self.trial_index == config.trials || self.step_count == config.step_cap;
        let trial_index = if chose_correct.is_some() {
            self.trial_index - 1
        } else {
            self.trial_index
        };
        Ok(StepOutcome {
            observation: self.observation(config),
            reward,
            done: self.done,
            info: StepInfo {
                trial_index,
                phase: self.phase,
                fixated,
                chose_correct,
                retrieval_step,
            },
        })
    }

    /// Field index holding the nearest reward target for the current phase.
    fn targets(&self, config: &EnvConfig) -> Vec<usize> {
        (0..config.world_size)
            .filter(|&w| {
                matches!(
                    (self.phase, self.world[w]),
                    (Phase::Fixation, Cell::Fixation) | (Phase::Choice, Cell::Object(_))
                )
            })
            .collect()
    }
}

fn random_side<R: Rng + ?Sized>(rng: &mut R) -> Side {
    if rng.random_bool(0.5) {
        Side::Left
    } else {
        Side::Right
    }
}

/// Minimal number of turns until the next reward event, by breadth-first
/// search over headings. Returns `None` if no target is present.
pub fn oracle_optimal_steps(config: &EnvConfig, state: &WorldState) -> Option<usize> {
    let targets = state.targets(config);
    if targets.is_empty() {
        return None;
    }
    let hits = |heading: usize| {
        let centered = (heading + config.center) % config.world_size;
        targets.contains(&centered)
    };
    let mut dist = vec![usize::MAX; config.world_size];
    let mut queue = VecDeque::new();
    dist[state.heading] = 0;
    queue.push_back(state.heading);
    while let Some(h) = queue.pop_front() {
        if hits(h) {
            return Some(dist[h]);
        }
        for next in [
            (h + config.world_size - 1) % config.world_size,
            (h + 1) % config.world_size,
        ] {
            if dist[next] == usize::MAX {
                dist[next] = dist[h] + 1;
                queue.push_back(next);
            }
        }
    }
    None
}

/// One line of the episode trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub step: usize,
    pub trial: usize,
    pub phase: Phase,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub heading: usize,
}

impl TraceRecord {
    pub fn from_outcome(episode: usize, step: usize, action: Action, state: &WorldState, out: &StepOutcome) -> Self {
        TraceRecord {
            episode,
            step,
            trial: out.info.trial_index,
            phase: out.info.phase,
            action,
            reward: out.reward,
            done: out.done,
            heading: state.heading,
        }
    }
}

pub fn write_trace<W: std::io::Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: std::io::BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
