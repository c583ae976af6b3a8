//! The abelian stabilization engine.
//!
//! Stabilization uses the site-wise representation: every site owns a stack
//! of instructions (`Sleep` or `Move(dir)`), and toppling an unstable site
//! consumes the next instruction on its stack. In literal mode the stack
//! entry at `(epoch, site, index)` is a pure function of the run seed, so the
//! final configuration and odometer do not depend on the toppling order.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};
use crate::lattice::{
    count_of, direction, raw_is_stable, Configuration, Regrid, Site, SiteState, TopologyKind,
    KILL, SLEEPER,
};
use crate::rng::{absorb, below, key_of_str, site_key, stream_at, SplitMix64};

/// One entry of a site's instruction stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Sleep,
    /// Step along direction `dir` (`2 * axis` is `+e_axis`, `2 * axis + 1` is `-e_axis`).
    Move(u8),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every instruction is drawn, including sleeps that do nothing at
    /// crowded sites. Order independent.
    #[default]
    Literal,
    /// Sleep draws at crowded sites are skipped. Same law, fewer draws,
    /// order dependent bitwise.
    Collapsed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Literal => "literal",
            Mode::Collapsed => "collapsed",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = ArwError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Mode::Literal),
            "collapsed" => Ok(Mode::Collapsed),
            other => Err(ArwError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Probability that a lone active particle sleeps before it steps: the sleep
/// clock (rate `lambda`) rings before the walk clock (rate 1).
pub fn sleep_probability(lambda: f64) -> f64 {
    if lambda.is_infinite() {
        1.0
    } else {
        lambda / (1.0 + lambda)
    }
}

/// Keyed stream of instructions.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSource {
    mode: Mode,
    run_seed: u64,
    epoch: u64,
    lambda: f64,
    /// `p_sleep` scaled to 32 bits; a draw sleeps when its high word is below it.
    sleep_threshold: u64,
}

const LITERAL_TAG: &str = "arw/literal";
const COLLAPSED_TAG: &str = "arw/collapsed";
const QUEUE_TAG: &str = "arw/queue";

impl InstructionSource {
    pub fn new(mode: Mode, run_seed: u64, lambda: f64) -> Result<Self> {
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(ArwError::domain(format!("sleep rate must be positive, got {lambda}")));
        }
        if mode == Mode::Literal && lambda.is_infinite() {
            return Err(ArwError::domain("literal mode needs a finite sleep rate"));
        }
        let p = sleep_probability(lambda);
        let sleep_threshold = (p * (1u64 << 32) as f64).round() as u64;
        Ok(InstructionSource { mode, run_seed, epoch: 0, lambda, sleep_threshold })
    }

    pub fn literal(run_seed: u64, lambda: f64) -> Result<Self> {
        Self::new(Mode::Literal, run_seed, lambda)
    }

    pub fn collapsed(run_seed: u64, lambda: f64) -> Result<Self> {
        Self::new(Mode::Collapsed, run_seed, lambda)
    }

    pub fn at_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn run_seed(&self) -> u64 {
        self.run_seed
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn p_sleep(&self) -> f64 {
        sleep_probability(self.lambda)
    }

    fn epoch_key(&self, epoch: u64) -> u64 {
        let tag = match self.mode {
            Mode::Literal => LITERAL_TAG,
            Mode::Collapsed => COLLAPSED_TAG,
        };
        absorb(absorb(absorb(key_of_str(tag), self.run_seed), epoch), 0)
    }

    #[inline(always)]
    fn decode(&self, word: u64, degree: u64) -> Instruction {
        if (word >> 32) < self.sleep_threshold {
            Instruction::Sleep
        } else {
            Instruction::Move(below(word << 32, degree) as u8)
        }
    }
}

/// The instruction at position `index` of `site`'s stack in `epoch`.
pub fn draw_instruction(
    source: &InstructionSource,
    epoch: u64,
    site: &Site,
    index: u64,
) -> Result<Instruction> {
    if source.mode != Mode::Literal {
        return Err(ArwError::Unsupported("collapsed sources have no per-site stacks".into()));
    }
    let base = absorb(source.epoch_key(epoch), site_key(site.coords()));
    Ok(source.decode(stream_at(base, index), 2 * site.dim() as u64))
}

/// Order in which unstable sites are toppled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerPolicy {
    #[default]
    Fifo,
    Lifo,
    /// Uniformly random unstable site, from a stream keyed by the given seed.
    RandomQueue(u64),
}

/// Cap on the number of instructions one stabilization may consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_instructions: Option<u64>,
}

pub const DEFAULT_BUDGET: u64 = 10_000_000_000;

impl Default for Budget {
    fn default() -> Self {
        Budget { max_instructions: Some(DEFAULT_BUDGET) }
    }
}

impl Budget {
    pub fn unlimited() -> Self {
        Budget { max_instructions: None }
    }

    pub fn limit(max: u64) -> Self {
        Budget { max_instructions: Some(max) }
    }
}

/// Raised when a stabilization runs out of budget. The configuration it was
/// working on is left in its partial, unstable state.
#[derive(Clone, Debug)]
pub struct BudgetExceeded {
    pub instructions: u64,
    pub moves: u64,
    pub exits: u64,
    pub odometer: Odometer,
}

impl fmt::Display for BudgetExceeded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "budget exceeded after {} instructions ({} moves, {} exits)",
            self.instructions, self.moves, self.exits
        )
    }
}

impl std::error::Error for BudgetExceeded {}

/// Per-site instruction counts of one stabilization, sorted by site.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Odometer {
    entries: Vec<(Site, u64)>,
}

impl Odometer {
    /// Build from `(site, count)` pairs; zero counts are dropped.
    pub fn from_entries(mut entries: Vec<(Site, u64)>) -> Self {
        entries.retain(|(_, c)| *c > 0);
        entries.sort_unstable();
        Odometer { entries }
    }

    pub fn get(&self, site: &Site) -> u64 {
        self.entries
            .binary_search_by(|(s, _)| s.cmp(site))
            .map_or(0, |i| self.entries[i].1)
    }

    /// Sites with a positive count, with their counts.
    pub fn entries(&self) -> &[(Site, u64)] {
        &self.entries
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.entries.iter().map(|(s, _)| s)
    }

    pub fn support_size(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }
}

/// Counters of one stabilization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub moves: u64,
    pub sleeps: u64,
    pub sleep_noops: u64,
    pub exits: u64,
}

impl StepCounters {
    pub fn instructions(&self) -> u64 {
        self.moves + self.sleeps + self.sleep_noops
    }
}

#[derive(Clone, Debug)]
pub struct StabilizationOutcome {
    pub initial_particles: u64,
    pub final_config: Configuration,
    pub odometer: Odometer,
    pub counters: StepCounters,
}

impl StabilizationOutcome {
    pub fn moves(&self) -> u64 {
        self.counters.moves
    }

    pub fn exits(&self) -> u64 {
        self.counters.exits
    }

    pub fn instructions_total(&self) -> u64 {
        self.counters.instructions()
    }

    /// Sites that held an active particle at some point. A site holding an
    /// active particle is unstable and consumes at least one instruction, so
    /// this is the support of the odometer.
    pub fn visited(&self) -> impl Iterator<Item = &Site> {
        self.odometer.sites()
    }

    pub fn visited_count(&self) -> usize {
        self.odometer.support_size()
    }
}

/// What applying one instruction did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Effect {
    MovedTo(Site),
    Slept,
    Noop,
    Killed,
}

/// Apply `instr` at the unstable site `site`.
pub fn apply_instruction(config: &mut Configuration, site: &Site, instr: Instruction) -> Result<Effect> {
    let state = config.get(site)?;
    if state.is_stable() {
        return Err(ArwError::Contract(format!("instruction applied at stable site {:?}", site.coords())));
    }
    match instr {
        Instruction::Sleep if state.n == 1 => {
            config.set(site, SiteState::SLEEPING)?;
            Ok(Effect::Slept)
        }
        Instruction::Sleep => Ok(Effect::Noop),
        Instruction::Move(dir) => {
            if dir as usize >= 2 * site.dim() {
                return Err(ArwError::Contract(format!("direction {dir} out of range")));
            }
            let target = config.topology().neighbors(site)?.swap_remove(dir as usize);
            config.set(site, SiteState::active(state.n - 1))?;
            match target {
                crate::lattice::Neighbor::Kill => Ok(Effect::Killed),
                crate::lattice::Neighbor::Site(y) => {
                    config.add_active(&y, 1)?;
                    Ok(Effect::MovedTo(y))
                }
            }
        }
    }
}

/// Reusable stabilization engine. Keeps per-site scratch buffers between
/// calls so repeated chain steps do not reallocate.
#[derive(Debug, Default)]
pub struct Stabilizer {
    policy: SchedulerPolicy,
    budget: Budget,
    odometer: Vec<u64>,
    base: Vec<u64>,
    queued: Vec<bool>,
    touched: Vec<usize>,
    queue: VecDeque<usize>,
    coords: Vec<i64>,
}

impl Stabilizer {
    pub fn new(policy: SchedulerPolicy, budget: Budget) -> Self {
        Stabilizer { policy, budget, ..Default::default() }
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    fn reset(&mut self, len: usize) {
        for &x in &self.touched {
            self.odometer[x] = 0;
        }
        self.touched.clear();
        self.queue.clear();
        if self.odometer.len() != len {
            self.odometer = vec![0; len];
            self.base = vec![0; len];
            self.queued = vec![false; len];
        }
    }

    fn regrid(&mut self, regrid: &Regrid) {
        let len = regrid.new.len;
        let mut odometer = vec![0u64; len];
        let mut base = vec![0u64; len];
        let mut queued = vec![false; len];
        for t in self.touched.iter_mut() {
            let j = regrid.map(*t);
            odometer[j] = self.odometer[*t];
            base[j] = self.base[*t];
            *t = j;
        }
        for q in self.queue.iter_mut() {
            *q = regrid.map(*q);
            queued[*q] = true;
        }
        self.odometer = odometer;
        self.base = base;
        self.queued = queued;
    }

    /// Stabilize `config` in place with the instructions of `epoch`.
    ///
    /// `hint`, when given, must contain every unstable site of `config`
    /// (storage indices); otherwise the whole grid is scanned.
    pub(crate) fn run(
        &mut self,
        config: &mut Configuration,
        source: &InstructionSource,
        epoch: u64,
        hint: Option<&[usize]>,
    ) -> Result<StepCounters, Box<BudgetExceeded>> {
        let epoch_key = source.epoch_key(epoch);
        let degree = 2 * config.dim() as u64;
        match source.mode {
            Mode::Literal => self.run_with(config, LiteralStacks { source, epoch_key, degree }, epoch, hint),
            Mode::Collapsed => self.run_with(
                config,
                CollapsedDraws { source, draws: SplitMix64::new(epoch_key), degree },
                epoch,
                hint,
            ),
        }
        .map_err(|e| match e {
            RunError::Budget(b) => b,
            RunError::Exhausted(_) => unreachable!("keyed stacks never run out"),
        })
    }

    fn run_with<D: Draw>(
        &mut self,
        config: &mut Configuration,
        mut stacks: D,
        epoch: u64,
        hint: Option<&[usize]>,
    ) -> Result<StepCounters, RunError> {
        self.reset(config.cells().len());
        match hint {
            Some(h) => {
                for &x in h {
                    if !raw_is_stable(config.cells()[x]) && !self.queued[x] {
                        self.queued[x] = true;
                        self.queue.push_back(x);
                    }
                }
            }
            None => {
                for (x, &c) in config.cells().iter().enumerate() {
                    if !raw_is_stable(c) {
                        self.queued[x] = true;
                        self.queue.push_back(x);
                    }
                }
            }
        }

        let dim = config.dim();
        let degree = 2 * dim;
        let adjacency = config.adjacency().cloned();
        let dynamic = config.topology().kind() == TopologyKind::DynamicLattice;
        let mut strides = config.layout().strides.clone();
        let mut picker = match self.policy {
            SchedulerPolicy::RandomQueue(seed) => {
                SplitMix64::new(absorb(absorb(key_of_str(QUEUE_TAG), seed), epoch))
            }
            _ => SplitMix64::new(0),
        };
        let max = self.budget.max_instructions.unwrap_or(u64::MAX);
        let mut c = StepCounters::default();
        let mut used = 0u64;
        self.coords.resize(dim, 0);

        loop {
            let next = match self.policy {
                SchedulerPolicy::Fifo => self.queue.pop_front(),
                SchedulerPolicy::Lifo => self.queue.pop_back(),
                SchedulerPolicy::RandomQueue(_) => {
                    if self.queue.is_empty() {
                        None
                    } else {
                        let i = picker.below(self.queue.len() as u64) as usize;
                        self.queue.swap_remove_back(i)
                    }
                }
            };
            let Some(mut x) = next else { break };
            self.queued[x] = false;

            // Topple x until it is stable.
            loop {
                let raw = config.cells()[x];
                if raw_is_stable(raw) {
                    break;
                }
                if used >= max {
                    self.queued[x] = true;
                    self.queue.push_back(x);
                    config.remove_particles(c.exits);
                    return Err(RunError::Budget(Box::new(BudgetExceeded {
                        instructions: used,
                        moves: c.moves,
                        exits: c.exits,
                        odometer: self.odometer_of(config),
                    })));
                }
                let k = self.odometer[x];
                if k == 0 {
                    config.layout().coords_into(x, &mut self.coords);
                    self.base[x] = stacks.site_base(&self.coords);
                }
                let Some(instr) = stacks.draw(self.base[x], k, raw) else {
                    config.remove_particles(c.exits);
                    return Err(RunError::Exhausted(config.site_at(x)));
                };
                used += 1;
                self.odometer[x] = k + 1;
                if k == 0 {
                    self.touched.push(x);
                }
                match instr {
                    Instruction::Sleep => {
                        if raw == 1 {
                            config.cells_mut()[x] = SLEEPER;
                            c.sleeps += 1;
                        } else {
                            c.sleep_noops += 1;
                        }
                    }
                    Instruction::Move(dir) => {
                        c.moves += 1;
                        config.cells_mut()[x] = raw - 1;
                        let target = match &adjacency {
                            Some(adj) => {
                                let j = adj[x * degree + dir as usize];
                                (j != KILL).then_some(j as usize)
                            }
                            None => {
                                let (axis, step) = direction(dir as usize);
                                Some(if step > 0 { x + strides[axis] } else { x - strides[axis] })
                            }
                        };
                        match target {
                            None => c.exits += 1,
                            Some(y) => {
                                let cells = config.cells_mut();
                                cells[y] = count_of(cells[y]) + 1;
                                if !self.queued[y] {
                                    self.queued[y] = true;
                                    self.queue.push_back(y);
                                }
                                if dynamic && config.on_border(y) {
                                    let regrid = config.grow();
                                    self.regrid(&regrid);
                                    x = regrid.map(x);
                                    strides = config.layout().strides.clone();
                                }
                            }
                        }
                    }
                }
            }
        }
        config.remove_particles(c.exits);
        Ok(c)
    }

    /// Odometer of the last call to `run`, keyed by site.
    pub(crate) fn odometer_of(&self, config: &Configuration) -> Odometer {
        Odometer::from_entries(
            self.touched
                .iter()
                .map(|&x| (config.site_at(x), self.odometer[x]))
                .collect(),
        )
    }

    /// Stabilize an owned configuration and report the full outcome.
    pub fn stabilize(
        &mut self,
        mut config: Configuration,
        source: &InstructionSource,
    ) -> Result<StabilizationOutcome> {
        check_feasible(&config)?;
        let initial_particles = config.total_particles();
        let counters = self.run(&mut config, source, source.epoch(), None)?;
        let odometer = self.odometer_of(&config);
        Ok(StabilizationOutcome { initial_particles, final_config: config, odometer, counters })
    }
}

enum RunError {
    Budget(Box<BudgetExceeded>),
    Exhausted(Site),
}

/// Supplier of instruction stacks for the engine.
trait Draw {
    /// Per-site key, computed when a site first topples in a run.
    fn site_base(&mut self, coords: &[i64]) -> u64;
    /// Instruction `k` of the site with key `base`, whose packed state is `raw`.
    fn draw(&mut self, base: u64, k: u64, raw: u32) -> Option<Instruction>;
}

struct LiteralStacks<'a> {
    source: &'a InstructionSource,
    epoch_key: u64,
    degree: u64,
}

impl Draw for LiteralStacks<'_> {
    #[inline(always)]
    fn site_base(&mut self, coords: &[i64]) -> u64 {
        absorb(self.epoch_key, site_key(coords))
    }

    #[inline(always)]
    fn draw(&mut self, base: u64, k: u64, _raw: u32) -> Option<Instruction> {
        Some(self.source.decode(stream_at(base, k), self.degree))
    }
}

struct CollapsedDraws<'a> {
    source: &'a InstructionSource,
    draws: SplitMix64,
    degree: u64,
}

impl Draw for CollapsedDraws<'_> {
    #[inline(always)]
    fn site_base(&mut self, _coords: &[i64]) -> u64 {
        0
    }

    #[inline(always)]
    fn draw(&mut self, _base: u64, _k: u64, raw: u32) -> Option<Instruction> {
        Some(if raw >= 2 {
            Instruction::Move(self.draws.below(self.degree) as u8)
        } else {
            self.source.decode(self.draws.next_u64(), self.degree)
        })
    }
}

struct ScriptedStacks<'a> {
    sites: Vec<&'a [Instruction]>,
    stacks: &'a BTreeMap<Site, Vec<Instruction>>,
}

impl Draw for ScriptedStacks<'_> {
    fn site_base(&mut self, coords: &[i64]) -> u64 {
        let stack = self.stacks.get(&Site::from(coords)).map_or(&[][..], |v| v.as_slice());
        self.sites.push(stack);
        (self.sites.len() - 1) as u64
    }

    fn draw(&mut self, base: u64, k: u64, _raw: u32) -> Option<Instruction> {
        self.sites[base as usize].get(k as usize).copied()
    }
}

/// Stabilize using explicitly given instruction stacks. Running out of a
/// site's stack is a contract violation.
pub fn stabilize_scripted(
    config: Configuration,
    stacks: &BTreeMap<Site, Vec<Instruction>>,
    policy: SchedulerPolicy,
    budget: Budget,
) -> Result<StabilizationOutcome> {
    let degree = 2 * config.dim();
    for (site, stack) in stacks {
        if let Some(Instruction::Move(d)) = stack.iter().find(|i| matches!(i, Instruction::Move(d) if *d as usize >= degree)) {
            return Err(ArwError::Contract(format!("direction {d} out of range at {:?}", site.coords())));
        }
    }
    check_feasible(&config)?;
    let mut config = config;
    let initial_particles = config.total_particles();
    let mut engine = Stabilizer::new(policy, budget);
    let counters = engine
        .run_with(&mut config, ScriptedStacks { sites: Vec::new(), stacks }, 0, None)
        .map_err(|e| match e {
            RunError::Budget(b) => ArwError::BudgetExceeded(b),
            RunError::Exhausted(site) => {
                ArwError::Contract(format!("instruction stack at {:?} exhausted", site.coords()))
            }
        })?;
    let odometer = engine.odometer_of(&config);
    Ok(StabilizationOutcome { initial_particles, final_config: config, odometer, counters })
}

/// A torus cannot hold more sleepers than it has sites.
pub(crate) fn check_feasible(config: &Configuration) -> Result<()> {
    if config.topology().kind() == TopologyKind::Torus {
        let sites = config.topology().volume().unwrap();
        if config.total_particles() > sites {
            return Err(ArwError::Infeasible { particles: config.total_particles(), sites });
        }
    }
    Ok(())
}

/// Stabilize `config` with the given source, scheduler and budget.
pub fn stabilize(
    config: Configuration,
    source: &InstructionSource,
    policy: SchedulerPolicy,
    budget: Budget,
) -> Result<StabilizationOutcome> {
    Stabilizer::new(policy, budget).stabilize(config, source)
}

/// Stabilize with collapsed sleep draws; `lambda` may be infinite.
pub fn stabilize_collapsed(
    config: Configuration,
    seed: u64,
    lambda: f64,
    policy: SchedulerPolicy,
    budget: Budget,
) -> Result<StabilizationOutcome> {
    stabilize(config, &InstructionSource::collapsed(seed, lambda)?, policy, budget)
}
