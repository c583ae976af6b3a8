//! Experimental settings built on the stabilizer: point and region sources,
//! Poisson sprinkling on a torus, and the wired, free and wake chains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};
use crate::harness::derive_seed;
use crate::lattice::{Configuration, Site, Topology, TopologyKind};
use crate::rng::{absorb, below, key_of_str, stream_at};
use crate::stabilizer::{
    check_feasible, BudgetExceeded, Budget, InstructionSource, Mode, SchedulerPolicy,
    StabilizationOutcome, Stabilizer, StepCounters,
};

/// Sleep rate, instruction mode and budget shared by a family of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub lambda: f64,
    pub mode: Mode,
    pub policy: SchedulerPolicy,
    pub budget: Budget,
}

impl Dynamics {
    pub fn new(lambda: f64, mode: Mode) -> Self {
        Dynamics { lambda, mode, policy: SchedulerPolicy::Fifo, budget: Budget::default() }
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_policy(mut self, policy: SchedulerPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn source(&self, seed: u64) -> Result<InstructionSource> {
        InstructionSource::new(self.mode, seed, self.lambda)
    }

    /// Stabilize `config` with instruction stacks keyed by `seed`.
    pub fn stabilize(&self, config: Configuration, seed: u64) -> Result<StabilizationOutcome> {
        Stabilizer::new(self.policy, self.budget).stabilize(config, &self.source(seed)?)
    }
}

/// Stabilize `n` active particles at the origin of `Z^d`.
pub fn point_source(n: u32, d: usize, seed: u64, dynamics: &Dynamics) -> Result<StabilizationOutcome> {
    if n == 0 {
        return Err(ArwError::domain("a point source needs at least one particle"));
    }
    let mut config = Configuration::empty(&Topology::dynamic(d)?);
    config.add_active(&Site::origin(d), n)?;
    dynamics.stabilize(config, seed)
}

/// A bounded region of `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Open ball `|x - center| < radius`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Half-open box `[lo_1, hi_1) x ... x [lo_d, hi_d)`.
    Cube { lo: Vec<f64>, hi: Vec<f64> },
    Union(Vec<Region>),
}

impl Region {
    pub fn disk(cx: f64, cy: f64, radius: f64) -> Self {
        Region::Ball { center: vec![cx, cy], radius }
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { center, .. } => center.len(),
            Region::Cube { lo, .. } => lo.len(),
            Region::Union(parts) => parts.first().map_or(0, Region::dim),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Ball { center, radius } => {
                center.iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum::<f64>() < radius * radius
            }
            Region::Cube { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v < h),
            Region::Union(parts) => parts.iter().any(|p| p.contains(x)),
        }
    }

    /// Closed axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Region::Cube { lo, hi } => (lo.clone(), hi.clone()),
            Region::Union(parts) => {
                let d = self.dim();
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for p in parts {
                    let (l, h) = p.bounds();
                    for a in 0..d {
                        lo[a] = lo[a].min(l[a]);
                        hi[a] = hi[a].max(h[a]);
                    }
                }
                (lo, hi)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(ArwError::domain("region has no dimension"));
        }
        match self {
            Region::Ball { radius, .. } if !(radius.is_finite() && *radius > 0.0) => {
                Err(ArwError::domain(format!("ball radius must be positive and finite, got {radius}")))
            }
            Region::Cube { lo, hi } if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l < h)) => {
                Err(ArwError::domain("cube needs lo < hi on every axis"))
            }
            Region::Union(parts) => {
                if parts.iter().any(|p| p.dim() != d) {
                    return Err(ArwError::domain("union parts differ in dimension"));
                }
                parts.iter().try_for_each(Region::validate)
            }
            _ => Ok(()),
        }
    }

    /// Lattice sites `x` with `eps * x` inside the region.
    pub fn lattice_points(&self, eps: f64) -> Result<Vec<Site>> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(ArwError::domain(format!("eps must be positive, got {eps}")));
        }
        self.validate()?;
        let d = self.dim();
        let (lo, hi) = self.bounds();
        let lo: Vec<i64> = lo.iter().map(|v| (v / eps).floor() as i64).collect();
        let hi: Vec<i64> = hi.iter().map(|v| (v / eps).ceil() as i64).collect();
        let mut out = Vec::new();
        let mut c = lo.clone();
        let mut x = vec![0.0; d];
        'outer: loop {
            for a in 0..d {
                x[a] = c[a] as f64 * eps;
            }
            if self.contains(&x) {
                out.push(Site::new(c.clone()));
            }
            for a in 0..d {
                if c[a] < hi[a] {
                    c[a] += 1;
                    continue 'outer;
                }
                c[a] = lo[a];
            }
            break;
        }
        Ok(out)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Text form used by configs and flags: `ball:c1,...,cd,r` (also
/// `disk:cx,cy,r`), `cube:lo1,...,lod:hi1,...,hid`, and unions joined by `+`.
impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Ball { center, radius } => write!(f, "ball:{},{radius}", join(center)),
            Region::Cube { lo, hi } => write!(f, "cube:{}:{}", join(lo), join(hi)),
            Region::Union(parts) => {
                let texts: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                f.write_str(&texts.join("+"))
            }
        }
    }
}

impl std::str::FromStr for Region {
    type Err = ArwError;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || ArwError::Config(format!("cannot parse region `{text}`"));
        let numbers = |list: &str| -> Result<Vec<f64>> {
            list.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad())).collect()
        };
        if text.contains('+') {
            let parts = text.split('+').map(str::parse).collect::<Result<Vec<Region>>>()?;
            return Ok(Region::Union(parts));
        }
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        let region = match kind.trim() {
            "ball" | "disk" => {
                let mut v = numbers(rest)?;
                let radius = v.pop().ok_or_else(bad)?;
                if v.is_empty() || (kind.trim() == "disk" && v.len() != 2) {
                    return Err(bad());
                }
                Region::Ball { center: v, radius }
            }
            "cube" => {
                let (lo, hi) = rest.split_once(':').ok_or_else(bad)?;
                Region::Cube { lo: numbers(lo)?, hi: numbers(hi)? }
            }
            _ => return Err(bad()),
        };
        region.validate()?;
        Ok(region)
    }
}

/// Stabilize one active particle at each site `x` with `eps * x` in `region`.
pub fn region_source(region: &Region, eps: f64, seed: u64, dynamics: &Dynamics) -> Result<StabilizationOutcome> {
    let points = region.lattice_points(eps)?;
    if points.is_empty() {
        return Err(ArwError::domain("the discretized region is empty"));
    }
    let mut config = Configuration::empty(&Topology::dynamic(region.dim())?);
    for p in &points {
        config.add_active(p, 1)?;
    }
    dynamics.stabilize(config, seed)
}

/// `count` active particles at independent uniform sites of a finite topology.
pub fn uniform_active(topology: &Topology, count: u64, seed: u64) -> Result<Configuration> {
    let v = topology
        .volume()
        .ok_or_else(|| ArwError::Unsupported("uniform placement on an infinite lattice".into()))?;
    let mut config = Configuration::empty(topology);
    let key = absorb(key_of_str("arw/uniform"), seed);
    for i in 0..count {
        config.add_active_at(below(stream_at(key, i), v) as usize, 1);
    }
    Ok(config)
}

/// Result of stabilizing a Poisson sprinkle.
#[derive(Clone, Debug)]
pub struct SprinkleOutcome {
    pub outcome: StabilizationOutcome,
    /// Sprinkles discarded because the torus would have been overfull.
    pub resamples: u32,
}

const MAX_SPRINKLE_ATTEMPTS: u32 = 10_000;

/// Stabilize `base + xi_t` on the torus `Z_L^d`, where `xi_t` is an i.i.d.
/// Poisson(`t`) field of active particles. Sprinkles that would put more
/// particles than sites on the torus are redrawn.
pub fn poisson_stabilize(
    side: usize,
    d: usize,
    base: Option<&Configuration>,
    t: f64,
    seed: u64,
    dynamics: &Dynamics,
) -> Result<SprinkleOutcome> {
    let topology = Topology::square_torus(side, d)?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(ArwError::domain(format!("sprinkle mean must be non-negative, got {t}")));
    }
    let start = match base {
        Some(b) => {
            if b.topology() != &topology {
                return Err(ArwError::domain("base configuration lives on a different topology"));
            }
            if !b.is_stable() {
                return Err(ArwError::domain("base configuration must be stable"));
            }
            b.clone()
        }
        None => Configuration::empty(&topology),
    };
    let sites = topology.volume().unwrap();
    let mut resamples = 0;
    let config = loop {
        if resamples >= MAX_SPRINKLE_ATTEMPTS {
            return Err(ArwError::Infeasible { particles: start.total_particles() + sites, sites });
        }
        let mut config = start.clone();
        if t > 0.0 {
            let poisson = Poisson::new(t).map_err(|e| ArwError::domain(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, resamples as u64, "sprinkle"));
            for x in 0..sites as usize {
                let k = poisson.sample(&mut rng) as u32;
                if k > 0 {
                    config.add_active_at(x, k);
                }
            }
        }
        if config.total_particles() <= sites {
            break config;
        }
        resamples += 1;
    };
    Ok(SprinkleOutcome { outcome: dynamics.stabilize(config, seed)?, resamples })
}

/// Stabilize `1_V` with killing at the boundary: one exact draw from the
/// stationary law of the wired chain on `V`.
pub fn wired_exact_sample(topology: &Topology, seed: u64, dynamics: &Dynamics) -> Result<Configuration> {
    if topology.kind() != TopologyKind::WiredBox {
        return Err(ArwError::domain("exact sampling needs a wired box"));
    }
    Ok(dynamics.stabilize(Configuration::all_active(topology)?, seed)?.final_config)
}

/// One committed chain step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the state this step produced.
    pub step: u64,
    pub particles: u64,
    pub counters: StepCounters,
}

/// A chain's current stable configuration and its history.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub config: Configuration,
    pub step: u64,
    pub epoch_counter: u64,
    pub history: Vec<StepRecord>,
}

impl ChainState {
    pub fn new(config: Configuration) -> Result<Self> {
        if !config.is_stable() {
            return Err(ArwError::domain("chain states must be stable"));
        }
        Ok(ChainState { config, step: 0, epoch_counter: 0, history: Vec::new() })
    }

    pub fn empty(topology: &Topology) -> Self {
        ChainState { config: Configuration::empty(topology), step: 0, epoch_counter: 0, history: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Wired,
    Free,
    Wake,
}

/// Drives chain steps. Instructions for step `k` come from epoch
/// `state.epoch_counter`; uniform driving sites come from a separate keyed
/// stream indexed by `state.step`.
#[derive(Debug)]
pub struct ChainDriver {
    source: InstructionSource,
    stabilizer: Stabilizer,
    drive_key: u64,
}

impl ChainDriver {
    pub fn new(seed: u64, dynamics: &Dynamics) -> Result<Self> {
        Ok(Self::with_drive_seed(seed, seed, dynamics)?)
    }

    /// Separate seeds for instructions and driving sites.
    pub fn with_drive_seed(seed: u64, drive_seed: u64, dynamics: &Dynamics) -> Result<Self> {
        Ok(ChainDriver {
            source: dynamics.source(seed)?,
            stabilizer: Stabilizer::new(dynamics.policy, dynamics.budget),
            drive_key: absorb(key_of_str("arw/drive"), drive_seed),
        })
    }

    /// Uniform driving site for the step leaving state `step`.
    pub fn drive_site(&self, topology: &Topology, step: u64) -> Result<Site> {
        let v = topology
            .volume()
            .ok_or_else(|| ArwError::Unsupported("uniform driving on an infinite lattice".into()))?;
        let layout_config = Configuration::empty(topology);
        Ok(layout_config.site_at(below(stream_at(self.drive_key, step), v) as usize))
    }

    fn drive_index(&self, config: &Configuration, step: u64) -> usize {
        let v = config.topology().volume().unwrap();
        below(stream_at(self.drive_key, step), v) as usize
    }

    /// Stabilize after the caller modified `state.config`; roll back on budget
    /// exhaustion so the state stays stable.
    fn commit(
        &mut self,
        state: &mut ChainState,
        backup: Configuration,
        hint: Option<&[usize]>,
    ) -> Result<StepRecord> {
        match self.stabilizer.run(&mut state.config, &self.source, state.epoch_counter, hint) {
            Ok(counters) => {
                state.step += 1;
                state.epoch_counter += 1;
                let rec = StepRecord { step: state.step, particles: state.config.total_particles(), counters };
                state.history.push(rec);
                Ok(rec)
            }
            Err(e) => {
                state.config = backup;
                Err(ArwError::BudgetExceeded(e))
            }
        }
    }

    fn add_at(&mut self, state: &mut ChainState, idx: usize) -> Result<StepRecord> {
        let backup = state.config.clone();
        state.config.add_active_at(idx, 1);
        self.commit(state, backup, Some(&[idx]))
    }

    /// `w_{k+1} = S_V(w_k + delta_v)` on a wired box.
    pub fn wired_step(&mut self, state: &mut ChainState, v: &Site) -> Result<StepRecord> {
        if state.config.topology().kind() != TopologyKind::WiredBox {
            return Err(ArwError::domain("wired steps need a wired box"));
        }
        let idx = state
            .config
            .index_of(v)
            .filter(|_| state.config.topology().contains(v))
            .ok_or_else(|| ArwError::domain(format!("driving site {:?} outside V", v.coords())))?;
        self.add_at(state, idx)
    }

    /// Wired step at a uniform site.
    pub fn wired_step_uniform(&mut self, state: &mut ChainState) -> Result<StepRecord> {
        if state.config.topology().kind() != TopologyKind::WiredBox {
            return Err(ArwError::domain("wired steps need a wired box"));
        }
        let idx = self.drive_index(&state.config, state.step);
        self.add_at(state, idx)
    }

    /// `phi_{k+1} = S(phi_k + delta_v)` on a torus, `v` uniform.
    pub fn free_step(&mut self, state: &mut ChainState) -> Result<StepRecord> {
        let topology = state.config.topology();
        if topology.kind() != TopologyKind::Torus {
            return Err(ArwError::domain("free steps need a torus"));
        }
        let sites = topology.volume().unwrap();
        if state.config.total_particles() >= sites {
            return Err(ArwError::Infeasible { particles: state.config.total_particles() + 1, sites });
        }
        let idx = self.drive_index(&state.config, state.step);
        self.add_at(state, idx)
    }

    /// `varphi_{k+1} = S(W(varphi_k))`: wake every particle, then stabilize.
    pub fn wake_step(&mut self, state: &mut ChainState) -> Result<StepRecord> {
        if state.config.topology().kind() != TopologyKind::Torus {
            return Err(ArwError::domain("wake steps need a torus"));
        }
        check_feasible(&state.config)?;
        let backup = state.config.clone();
        state.config.wake_all();
        self.commit(state, backup, None)
    }

    pub fn step(&mut self, kind: ChainKind, state: &mut ChainState) -> Result<StepRecord> {
        match kind {
            ChainKind::Wired => self.wired_step_uniform(state),
            ChainKind::Free => self.free_step(state),
            ChainKind::Wake => self.wake_step(state),
        }
    }
}

/// A point of a uniformly driven wired-chain density curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HockeyPoint {
    pub step: u64,
    /// Particles added per site, `k / L^d`.
    pub t: f64,
    pub global_density: f64,
    pub bulk_density: f64,
}

/// Central sub-box of side `L / 2` of `[1, L]^d`: lower corner and side.
pub fn bulk_window(side: usize) -> (i64, usize) {
    let half = side / 2;
    (1 + ((side - half) / 2) as i64, half)
}

fn bulk_count(config: &Configuration, side: usize) -> u64 {
    let d = config.dim();
    let (lo, half) = bulk_window(side);
    config
        .sleeper_indicator(&vec![lo; d], &vec![half; d])
        .iter()
        .map(|&b| b as u64)
        .sum()
}

/// Drive the wired chain on `[1, L]^d` from empty with uniform additions,
/// recording global and bulk densities after each step listed in `record_at`.
pub fn wired_drive_uniform(
    side: usize,
    d: usize,
    steps: u64,
    record_at: &[u64],
    seed: u64,
    dynamics: &Dynamics,
) -> Result<Vec<HockeyPoint>> {
    let topology = Topology::wired_cube(side, d)?;
    let volume = topology.volume().unwrap() as f64;
    let bulk_volume = (side / 2).pow(d as u32).max(1) as f64;
    let mut driver = ChainDriver::new(seed, dynamics)?;
    let mut state = ChainState::empty(&topology);
    let mut record: Vec<u64> = record_at.iter().copied().filter(|&k| k <= steps).collect();
    record.sort_unstable();
    record.dedup();
    let mut out = Vec::with_capacity(record.len());
    let mut next = record.iter().peekable();
    loop {
        if next.peek() == Some(&&state.step) {
            next.next();
            out.push(HockeyPoint {
                step: state.step,
                t: state.step as f64 / volume,
                global_density: state.config.total_particles() as f64 / volume,
                bulk_density: bulk_count(&state.config, side) as f64 / bulk_volume,
            });
        }
        if state.step >= steps {
            break;
        }
        // State histories are not needed here and would grow with the run.
        driver.wired_step_uniform(&mut state)?;
        state.history.clear();
    }
    Ok(out)
}

/// Superlinear threshold functions `f(N)` for the free chain's threshold time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdFunction {
    /// `N (ln N)^2`
    NLog2N,
    /// `N^{3/2}`
    NPow15,
    /// `c N ln N`
    CNLogN(f64),
}

impl ThresholdFunction {
    pub fn eval(&self, n: u64) -> f64 {
        let n = n as f64;
        match *self {
            ThresholdFunction::NLog2N => n * n.ln().powi(2),
            ThresholdFunction::NPow15 => n.powf(1.5),
            ThresholdFunction::CNLogN(c) => c * n * n.ln(),
        }
    }
}

impl std::str::FromStr for ThresholdFunction {
    type Err = ArwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nlog2n" => Ok(ThresholdFunction::NLog2N),
            "n1.5" | "npow1.5" => Ok(ThresholdFunction::NPow15),
            other => match other.strip_prefix("cnlogn:") {
                Some(c) => c
                    .parse::<f64>()
                    .ok()
                    .filter(|c| *c > 0.0)
                    .map(ThresholdFunction::CNLogN)
                    .ok_or_else(|| ArwError::Config(format!("bad constant in `{other}`"))),
                None => Err(ArwError::Config(format!(
                    "unknown threshold function `{other}` (nlog2n, n1.5, cnlogn:<c>)"
                ))),
            },
        }
    }
}

/// Tracks `tau_f(V) = inf { k : U_k >= f(#V) }`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdDetector {
    pub function: ThresholdFunction,
    pub triggered_at: Option<u64>,
    pub stop_on_trigger: bool,
}

impl ThresholdDetector {
    pub fn new(function: ThresholdFunction) -> Self {
        ThresholdDetector { function, triggered_at: None, stop_on_trigger: false }
    }

    pub fn stopping(mut self) -> Self {
        self.stop_on_trigger = true;
        self
    }

    /// Feed `U_k`. Returns true the first time the threshold is reached.
    pub fn observe(&mut self, k: u64, u_k: u64, sites: u64) -> bool {
        if self.triggered_at.is_none() && u_k as f64 >= self.function.eval(sites) {
            self.triggered_at = Some(k);
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The torus is full; no further particle can be added.
    Full,
    BudgetExceeded,
    Threshold,
}

/// Output of [`free_run`].
#[derive(Clone, Debug)]
pub struct FreeTrace {
    /// `(k, phi_k)` for each requested `k` that was reached.
    pub snapshots: Vec<(u64, Configuration)>,
    /// `U_k`: moves needed to stabilize `phi_k + delta_{v_{k+1}}`.
    pub moves: Vec<u64>,
    pub tau_f: Option<u64>,
    pub stop: Option<StopReason>,
    /// Details of the step that ran out of budget, if any.
    pub halted: Option<Box<BudgetExceeded>>,
}

/// Run the free chain on `Z_L^d` from empty for `steps` additions.
pub fn free_run(
    side: usize,
    d: usize,
    steps: u64,
    record_at: &[u64],
    mut detector: Option<&mut ThresholdDetector>,
    seed: u64,
    dynamics: &Dynamics,
) -> Result<FreeTrace> {
    let topology = Topology::square_torus(side, d)?;
    let sites = topology.volume().unwrap();
    if steps > sites {
        return Err(ArwError::domain(format!("{steps} additions exceed the {sites} sites of the torus")));
    }
    let mut driver = ChainDriver::new(seed, dynamics)?;
    let mut state = ChainState::empty(&topology);
    let mut trace = FreeTrace { snapshots: Vec::new(), moves: Vec::new(), tau_f: None, stop: None, halted: None };
    loop {
        let k = state.step;
        if record_at.contains(&k) {
            trace.snapshots.push((k, state.config.clone()));
        }
        if k >= steps {
            if k == sites {
                trace.stop = Some(StopReason::Full);
            }
            break;
        }
        match driver.free_step(&mut state) {
            Ok(rec) => {
                trace.moves.push(rec.counters.moves);
                if let Some(det) = detector.as_deref_mut() {
                    if det.observe(k, rec.counters.moves, sites) {
                        trace.tau_f = Some(k);
                        if det.stop_on_trigger {
                            trace.stop = Some(StopReason::Threshold);
                            break;
                        }
                    }
                }
            }
            Err(ArwError::BudgetExceeded(b)) => {
                trace.stop = Some(StopReason::BudgetExceeded);
                trace.halted = Some(b);
                break;
            }
            Err(e) => return Err(e),
        }
        state.history.clear();
    }
    Ok(trace)
}

/// Output of [`wake_run`].
#[derive(Clone, Debug)]
pub struct WakeTrace {
    pub snapshots: Vec<(u64, Configuration)>,
    pub records: Vec<StepRecord>,
    /// Set when a step ran out of budget; the chain halted at the last
    /// committed state.
    pub halted: Option<Box<BudgetExceeded>>,
}

/// Run `steps` steps of the wake chain from `initial` (which may hold
/// unstable piles; the first step wakes and stabilizes them).
pub fn wake_run(
    initial: Configuration,
    steps: u64,
    record_at: &[u64],
    seed: u64,
    dynamics: &Dynamics,
) -> Result<WakeTrace> {
    let mut driver = ChainDriver::new(seed, dynamics)?;
    let mut state = ChainState { config: initial, step: 0, epoch_counter: 0, history: Vec::new() };
    let mut trace = WakeTrace { snapshots: Vec::new(), records: Vec::new(), halted: None };
    loop {
        if record_at.contains(&state.step) {
            trace.snapshots.push((state.step, state.config.clone()));
        }
        if state.step >= steps {
            break;
        }
        match driver.wake_step(&mut state) {
            Ok(rec) => trace.records.push(rec),
            Err(ArwError::BudgetExceeded(b)) => {
                trace.halted = Some(b);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trace)
}

/// Run two chains in lockstep on shared instruction and driving streams and
/// report the first step at which their configurations coincide.
///
/// This is a coupling diagnostic: the coupling time bounds the mixing time
/// from above for this particular coupling only.
pub fn coupling_run(
    kind: ChainKind,
    a: Configuration,
    b: Configuration,
    shared_seed: u64,
    max_steps: u64,
    dynamics: &Dynamics,
) -> Result<Option<u64>> {
    if a.topology() != b.topology() {
        return Err(ArwError::domain("coupled chains must share a topology"));
    }
    let mut sa = ChainState::new(a)?;
    let mut sb = ChainState::new(b)?;
    let mut da = ChainDriver::new(shared_seed, dynamics)?;
    let mut db = ChainDriver::new(shared_seed, dynamics)?;
    for k in 0..=max_steps {
        if sa.config == sb.config {
            return Ok(Some(k));
        }
        if k == max_steps {
            break;
        }
        da.step(kind, &mut sa)?;
        db.step(kind, &mut sb)?;
        sa.history.clear();
        sb.history.clear();
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::SiteState;

    fn s(c: &[i64]) -> Site {
        Site::new(c.to_vec())
    }

    fn lit(lambda: f64) -> Dynamics {
        Dynamics::new(lambda, Mode::Literal)
    }

    #[test]
    fn single_particle_point_source() {
        let out = point_source(1, 2, 11, &Dynamics::new(0.5, Mode::Collapsed)).unwrap();
        assert_eq!(out.final_config.total_particles(), 1);
        assert_eq!(out.final_config.sleepers().len(), 1);
        // The walk trace ends where the particle fell asleep.
        let sleeper = &out.final_config.sleepers()[0];
        assert!(out.odometer.get(sleeper) > 0);
        assert_eq!(out.counters.sleeps, 1);
        assert!(point_source(0, 2, 0, &lit(1.0)).is_err());
    }

    #[test]
    fn unit_square_reduces_to_point_source() {
        let square = Region::Cube { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] };
        assert_eq!(square.lattice_points(1.0).unwrap(), vec![Site::origin(2)]);
        let dyn_ = lit(1.0);
        let a = region_source(&square, 1.0, 5, &dyn_).unwrap();
        let b = point_source(1, 2, 5, &dyn_).unwrap();
        assert_eq!(a.final_config, b.final_config);
        assert_eq!(a.odometer, b.odometer);
    }

    #[test]
    fn empty_region_is_rejected() {
        let tiny = Region::Ball { center: vec![0.5, 0.5], radius: 0.1 };
        assert!(matches!(region_source(&tiny, 1.0, 0, &lit(1.0)), Err(ArwError::Domain(_))));
        assert!(Region::disk(0.0, 0.0, 1.0).lattice_points(0.0).is_err());
    }

    #[test]
    fn region_text_round_trip() {
        for text in ["ball:0,0,1", "cube:0,0:1,2", "ball:0.5,0,1+cube:-1,-1:0,0"] {
            let r: Region = text.parse().unwrap();
            assert_eq!(r.to_string(), text);
        }
        assert_eq!("disk:1,2,3".parse::<Region>().unwrap(), Region::disk(1.0, 2.0, 3.0));
        for bad in ["disk:1,2", "ball:1,-1", "cube:0,0:0,1", "blob:1", "disk:1,2,3,4"] {
            assert!(bad.parse::<Region>().is_err(), "{bad}");
        }
    }

    #[test]
    fn disk_point_count() {
        let pts = Region::disk(0.0, 0.0, 1.0).lattice_points(1.0 / 8.0).unwrap();
        let brute = (-8i64..=8)
            .flat_map(|x| (-8i64..=8).map(move |y| (x, y)))
            .filter(|(x, y)| x * x + y * y < 64)
            .count();
        assert_eq!(pts.len(), brute);
    }

    #[test]
    fn zero_sprinkle_returns_immediately() {
        let out = poisson_stabilize(7, 2, None, 0.0, 1, &lit(1.0)).unwrap();
        assert_eq!(out.outcome.instructions_total(), 0);
        assert_eq!(out.resamples, 0);
    }

    #[test]
    fn overfull_sprinkles_are_resampled() {
        // Mean 1 per site on 9 sites: about half the sprinkles overshoot.
        let mut resampled = 0;
        for seed in 0..20 {
            let out = poisson_stabilize(3, 2, None, 1.0, seed, &lit(1.0)).unwrap();
            assert!(out.outcome.final_config.total_particles() <= 9);
            resampled += out.resamples;
        }
        assert!(resampled > 0);
    }

    #[test]
    fn sprinkle_on_base_keeps_base_particles() {
        let t = Topology::torus(&[7, 7]).unwrap();
        let mut base = Configuration::empty(&t);
        base.set(&s(&[3, 3]), SiteState::SLEEPING).unwrap();
        let out = poisson_stabilize(7, 2, Some(&base), 0.1, 2, &lit(1.0)).unwrap();
        assert!(out.outcome.initial_particles >= 1);
        assert_eq!(out.outcome.final_config.total_particles(), out.outcome.initial_particles);
        let other = Topology::torus(&[9, 9]).unwrap();
        assert!(poisson_stabilize(7, 2, Some(&Configuration::empty(&other)), 0.1, 2, &lit(1.0)).is_err());
    }

    #[test]
    fn single_site_exact_sampler() {
        let v = Topology::wired_box(&[1]).unwrap();
        let kept: u64 = (0..4000)
            .map(|seed| wired_exact_sample(&v, seed, &lit(1.0)).unwrap().total_particles())
            .sum();
        let f = kept as f64 / 4000.0;
        assert!((f - 0.5).abs() < 0.03, "{f}");
        assert!(wired_exact_sample(&Topology::torus(&[3]).unwrap(), 0, &lit(1.0)).is_err());
    }

    #[test]
    fn wired_step_wakes_and_balances_mass() {
        let v = Topology::wired_box(&[5, 5]).unwrap();
        let mut state = ChainState::empty(&v);
        state.config.set(&s(&[3, 3]), SiteState::SLEEPING).unwrap();
        let mut driver = ChainDriver::new(8, &lit(1.0)).unwrap();
        for _ in 0..200 {
            let before = state.config.total_particles();
            let rec = driver.wired_step(&mut state, &s(&[3, 3])).unwrap();
            assert_eq!(rec.particles + rec.counters.exits, before + 1);
            assert!(state.config.is_stable());
        }
        assert!(driver.wired_step(&mut state, &s(&[0, 3])).is_err());
        assert_eq!(state.step, 200);
    }

    #[test]
    fn driving_is_uniform_and_reproducible() {
        let t = Topology::torus(&[3, 3]).unwrap();
        let d1 = ChainDriver::new(4, &lit(1.0)).unwrap();
        let d2 = ChainDriver::new(4, &lit(2.0)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for k in 0..9000 {
            let v = d1.drive_site(&t, k).unwrap();
            assert_eq!(v, d2.drive_site(&t, k).unwrap());
            *counts.entry(v).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 9);
        assert!(counts.values().all(|&c| (800..1200).contains(&c)));
    }

    #[test]
    fn free_chain_fills_torus() {
        let trace = free_run(5, 2, 25, &[0, 10, 25], None, 3, &lit(1.0)).unwrap();
        assert_eq!(trace.moves.len(), 25);
        assert_eq!(trace.stop, Some(StopReason::Full));
        let (k, full) = trace.snapshots.last().unwrap();
        assert_eq!(*k, 25);
        assert_eq!(full.sleepers().len(), 25);
        assert_eq!(trace.snapshots[1].1.total_particles(), 10);
        assert!(free_run(5, 2, 26, &[], None, 3, &lit(1.0)).is_err());

        // No addition past full occupancy.
        let t = Topology::torus(&[3]).unwrap();
        let mut state = ChainState::new(Configuration::empty(&t)).unwrap();
        let mut driver = ChainDriver::new(1, &lit(1.0)).unwrap();
        for _ in 0..3 {
            driver.free_step(&mut state).unwrap();
        }
        assert!(matches!(driver.free_step(&mut state), Err(ArwError::Infeasible { .. })));
    }

    #[test]
    fn threshold_detector_fires_once() {
        let mut det = ThresholdDetector::new(ThresholdFunction::CNLogN(1.0));
        let f = ThresholdFunction::CNLogN(1.0).eval(100);
        assert!(!det.observe(0, (f - 1.0) as u64, 100));
        assert!(det.observe(1, f.ceil() as u64, 100));
        assert!(!det.observe(2, f.ceil() as u64 * 2, 100));
        assert_eq!(det.triggered_at, Some(1));
        assert_eq!("nlog2n".parse::<ThresholdFunction>().unwrap(), ThresholdFunction::NLog2N);
        assert_eq!("cnlogn:2".parse::<ThresholdFunction>().unwrap(), ThresholdFunction::CNLogN(2.0));
        assert!("cnlogn:-1".parse::<ThresholdFunction>().is_err());
    }

    #[test]
    fn free_run_reports_threshold_time() {
        let mut det = ThresholdDetector::new(ThresholdFunction::CNLogN(0.05)).stopping();
        let trace = free_run(16, 2, 256, &[], Some(&mut det), 9, &Dynamics::new(2.0, Mode::Collapsed)).unwrap();
        let tau = trace.tau_f.expect("threshold reached before full occupancy");
        assert_eq!(det.triggered_at, Some(tau));
        assert_eq!(trace.stop, Some(StopReason::Threshold));
        assert_eq!(trace.moves.len() as u64, tau + 1);
    }

    #[test]
    fn full_torus_wake_chain_is_constant() {
        let t = Topology::torus(&[4, 4]).unwrap();
        let mut full = Configuration::empty(&t);
        for site in t.sites().unwrap() {
            full.set(&site, SiteState::SLEEPING).unwrap();
        }
        let mut state = ChainState::new(full.clone()).unwrap();
        let mut driver = ChainDriver::new(2, &lit(1.0)).unwrap();
        for _ in 0..3 {
            driver.wake_step(&mut state).unwrap();
            assert_eq!(state.config, full);
        }
    }

    #[test]
    fn lone_wake_step_is_a_lazy_walk_increment() {
        let t = Topology::torus(&[11]).unwrap();
        let mut cfg = Configuration::empty(&t);
        cfg.set(&s(&[5]), SiteState::SLEEPING).unwrap();
        let mut state = ChainState::new(cfg).unwrap();
        let mut driver = ChainDriver::new(3, &lit(1.0)).unwrap();
        let mut stayed = 0;
        let n = 4000;
        for _ in 0..n {
            let before = state.config.sleepers()[0].coords()[0];
            let rec = driver.wake_step(&mut state).unwrap();
            let after = state.config.sleepers()[0].coords()[0];
            let disp = (after - before).rem_euclid(11);
            assert_eq!(rec.counters.sleeps, 1);
            assert_eq!(disp.min(11 - disp) as u64 <= rec.counters.moves, true);
            stayed += (rec.counters.moves == 0) as u32;
        }
        // Sleeps before moving with probability lambda / (1 + lambda) = 1/2.
        let f = stayed as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.03, "{f}");
    }

    #[test]
    fn wake_budget_halts_without_committing() {
        let t = Topology::torus(&[8, 8]).unwrap();
        let init = uniform_active(&t, 60, 1).unwrap();
        let dynamics = Dynamics::new(0.2, Mode::Literal).with_budget(Budget::limit(50));
        let trace = wake_run(init, 5, &[0, 1], 1, &dynamics).unwrap();
        assert!(trace.halted.is_some());
        assert!(trace.records.is_empty());
        assert_eq!(trace.snapshots.len(), 1);
    }

    #[test]
    fn wake_chain_conserves_particles() {
        let t = Topology::torus(&[9, 9]).unwrap();
        let init = uniform_active(&t, 30, 7).unwrap();
        let trace = wake_run(init, 6, &[6], 7, &lit(1.0)).unwrap();
        assert!(trace.records.iter().all(|r| r.particles == 30));
        assert!(trace.snapshots[0].1.is_stable());
    }

    #[test]
    fn identical_states_couple_immediately() {
        let v = Topology::wired_box(&[6, 6]).unwrap();
        let a = wired_exact_sample(&v, 1, &lit(2.0)).unwrap();
        assert_eq!(coupling_run(ChainKind::Wired, a.clone(), a, 9, 10, &lit(2.0)).unwrap(), Some(0));
        let t = Topology::torus(&[6, 6]).unwrap();
        assert!(coupling_run(ChainKind::Wired, Configuration::empty(&v), Configuration::empty(&t), 1, 1, &lit(2.0))
            .is_err());
    }

    #[test]
    fn coupled_chains_stay_together() {
        // On a 3-site path a lone discrepancy soon exits; once the two
        // configurations agree, shared randomness keeps them equal.
        let v = Topology::wired_box(&[3]).unwrap();
        let dynamics = lit(1.0);
        let mut coupled = 0;
        for seed in 0..200u64 {
            let a = Configuration::empty(&v);
            let mut b = a.clone();
            b.set(&s(&[2]), SiteState::SLEEPING).unwrap();
            if let Some(k) = coupling_run(ChainKind::Wired, a.clone(), b.clone(), seed, 12, &dynamics).unwrap() {
                coupled += 1;
                let mut sa = ChainState::new(a).unwrap();
                let mut sb = ChainState::new(b).unwrap();
                let mut da = ChainDriver::new(seed, &dynamics).unwrap();
                let mut db = ChainDriver::new(seed, &dynamics).unwrap();
                for j in 0..k + 10 {
                    da.wired_step_uniform(&mut sa).unwrap();
                    db.wired_step_uniform(&mut sb).unwrap();
                    if j + 1 >= k {
                        assert_eq!(sa.config, sb.config);
                    }
                }
            }
        }
        assert!(coupled > 150, "{coupled}");
    }

    #[test]
    fn hockey_curve_is_exact_before_exits() {
        let pts = wired_drive_uniform(8, 2, 20, &[0, 5, 20], 3, &lit(4.0)).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].global_density, 0.0);
        assert_eq!(pts[1].t, 5.0 / 64.0);
        assert!(pts[2].global_density <= pts[2].t);
        assert_eq!(bulk_window(128), (33, 64));
        assert_eq!(bulk_window(63), (17, 31));
    }
}
