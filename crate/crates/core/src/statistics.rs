//! Estimators: aggregate shape and density, annulus profiles, site
//! correlations and covariances, number variance, hockey-stick distance and
//! quadrature margins.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::chains::Region;
use crate::error::{ArwError, Result};
use crate::lattice::{Configuration, Site, TopologyKind};
use crate::stabilizer::StabilizationOutcome;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// Odometer-row iterator over the box `[-r, r]^d`.
fn cube_points(d: usize, r: i64) -> impl Iterator<Item = Vec<i64>> {
    let side = (2 * r + 1) as u64;
    (0..side.pow(d as u32)).map(move |mut k| {
        (0..d)
            .map(|_| {
                let c = (k % side) as i64 - r;
                k /= side;
                c
            })
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub particles: u64,
    pub visited: u64,
    /// `n / #A_n`.
    pub zeta_hat: f64,
    /// Largest `r` such that every site with `|x| < r` was visited.
    pub inradius: f64,
    /// Smallest lattice norm exceeding every visited site's norm: every
    /// visited site satisfies `|x| < outradius` and some site at that norm is
    /// unvisited.
    pub outradius: f64,
    pub sphericity: f64,
}

/// Density and roundness of a point-source aggregate centered at the origin.
pub fn aggregate_metrics(outcome: &StabilizationOutcome) -> Result<AggregateMetrics> {
    let n = outcome.initial_particles;
    if n == 0 || outcome.visited_count() == 0 {
        return Err(ArwError::domain("aggregate metrics need at least one particle"));
    }
    let visited: HashSet<&[i64]> = outcome.visited().map(Site::coords).collect();
    let d = outcome.final_config.dim();
    let max_sq = outcome.visited().map(Site::norm_sq).max().unwrap();
    let reach = outcome
        .visited()
        .flat_map(|s| s.coords().iter().map(|c| c.abs()))
        .max()
        .unwrap()
        + 1;
    let mut in_sq = i64::MAX;
    let mut out_sq = i64::MAX;
    for c in cube_points(d, reach) {
        let q: i64 = c.iter().map(|x| x * x).sum();
        if q > max_sq {
            out_sq = out_sq.min(q);
        }
        if q < in_sq && !visited.contains(c.as_slice()) {
            in_sq = q;
        }
    }
    let inradius = (in_sq as f64).sqrt();
    let outradius = (out_sq as f64).sqrt();
    Ok(AggregateMetrics {
        particles: n,
        visited: visited.len() as u64,
        zeta_hat: n as f64 / visited.len() as f64,
        inradius,
        outradius,
        sphericity: inradius / outradius,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusProfile {
    /// Outer radius of each annulus.
    pub radii: Vec<f64>,
    /// Sleepers per lattice site in each annulus.
    pub densities: Vec<f64>,
    /// Set when fewer annuli than requested fit inside the inradius.
    pub truncated: bool,
}

/// Sleeper density in equal-volume origin-centered annuli filling the ball
/// of radius `inradius`.
pub fn annulus_profile(outcome: &StabilizationOutcome, n_annuli: usize) -> Result<AnnulusProfile> {
    if n_annuli == 0 {
        return Err(ArwError::domain("need at least one annulus"));
    }
    let metrics = aggregate_metrics(outcome)?;
    let d = outcome.final_config.dim();
    let r = metrics.inradius;
    let reach = r.ceil() as i64;
    let sites: Vec<(f64, bool)> = cube_points(d, reach)
        .map(|c| {
            let norm = (c.iter().map(|x| x * x).sum::<i64>() as f64).sqrt();
            (norm, c)
        })
        .filter(|(norm, _)| *norm < r)
        .map(|(norm, c)| {
            let asleep = outcome.final_config.get(&Site::new(c)).map(|s| s.asleep).unwrap_or(false);
            (norm, asleep)
        })
        .collect();
    let mut k = n_annuli;
    loop {
        let radii: Vec<f64> = (1..=k).map(|i| r * (i as f64 / k as f64).powf(1.0 / d as f64)).collect();
        let mut sites_in = vec![0u64; k];
        let mut sleepers_in = vec![0u64; k];
        for &(norm, asleep) in &sites {
            let j = radii.iter().position(|&ro| norm < ro).unwrap_or(k - 1);
            sites_in[j] += 1;
            sleepers_in[j] += asleep as u64;
        }
        if sites_in.iter().all(|&c| c > 0) {
            let densities = sites_in.iter().zip(&sleepers_in).map(|(&s, &z)| z as f64 / s as f64).collect();
            return Ok(AnnulusProfile { radii, densities, truncated: k < n_annuli });
        }
        if k == 1 {
            return Err(ArwError::domain("no lattice site lies inside the inradius"));
        }
        k -= 1;
    }
}

/// Symmetries averaged over by [`correlation_table`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryGroup {
    /// Translations of the torus together with its reflections (and the
    /// axis swap when the torus is square).
    TorusSymmetries,
    /// Reflections and rotations of a square window about its center.
    D8,
    /// No averaging: the literal offset inside the window.
    Identity,
}

impl std::str::FromStr for SymmetryGroup {
    type Err = ArwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "torus" => Ok(SymmetryGroup::TorusSymmetries),
            "d8" => Ok(SymmetryGroup::D8),
            "identity" => Ok(SymmetryGroup::Identity),
            other => Err(ArwError::Config(format!("unknown symmetry group `{other}` (torus, d8, identity)"))),
        }
    }
}

/// Axis-aligned square window `[lo, lo + side)^2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Vec<i64>,
    pub side: usize,
}

impl Window {
    /// Centered window of side `floor(L / 2)` inside `[lower, lower + L)^2`.
    pub fn centered(lower: i64, extent: usize) -> Self {
        let side = extent / 2;
        Window { lo: vec![lower + ((extent - side) / 2) as i64; 2], side }
    }
}

/// Pair-count bookkeeping shared by the correlation estimators.
#[derive(Clone, Debug)]
pub struct PairCounter {
    group: SymmetryGroup,
    periodic: bool,
    /// Grid read from each sample, `[lo, lo + shape)`.
    lo: Vec<i64>,
    shape: [usize; 2],
    offsets: Vec<(i64, i64)>,
    /// Images of each offset.
    images: Vec<Vec<(i64, i64)>>,
    opportunities: Vec<u64>,
    topology: crate::lattice::Topology,
}

/// Counts from one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub occupied: u64,
    pub pairs: Vec<u64>,
}

fn images_of(x: i64, y: i64, swap: bool) -> Vec<(i64, i64)> {
    let mut out = vec![(x, y), (-x, y), (x, -y), (-x, -y)];
    if swap {
        out.extend([(y, x), (-y, x), (y, -x), (-y, -x)]);
    }
    out.sort_unstable();
    out.dedup();
    out
}

impl PairCounter {
    /// Set up counting for samples on `domain` (a reference configuration)
    /// and offsets `0 <= y <= x <= r_max`.
    pub fn new(
        domain: &Configuration,
        group: SymmetryGroup,
        r_max: usize,
        window: Option<Window>,
    ) -> Result<Self> {
        let topology = domain.topology().clone();
        if topology.dim() != 2 {
            return Err(ArwError::Unsupported("site correlations are implemented for d = 2".into()));
        }
        let torus = topology.kind() == TopologyKind::Torus;
        let (periodic, lo, shape) = match (group, &window) {
            (SymmetryGroup::TorusSymmetries, None) if torus => {
                let ext = topology.extent().unwrap();
                (true, vec![0, 0], [ext[0], ext[1]])
            }
            (SymmetryGroup::TorusSymmetries, _) => {
                return Err(ArwError::domain("torus symmetries need a full torus without a window"));
            }
            (_, Some(w)) => {
                if w.lo.len() != 2 || w.side == 0 {
                    return Err(ArwError::domain("window must be a non-empty square in d = 2"));
                }
                (false, w.lo.clone(), [w.side, w.side])
            }
            (_, None) => {
                let w = match topology.extent() {
                    Some(ext) if ext[0] == ext[1] => Window::centered(topology.lower_corner(), ext[0]),
                    Some(_) => return Err(ArwError::domain("default windows need a square domain")),
                    None => {
                        let (l, h) = domain
                            .occupied_bounds()
                            .ok_or_else(|| ArwError::domain("cannot size a window for an empty sample"))?;
                        let reach = (0..2).map(|a| l[a].abs().max(h[a].abs())).max().unwrap();
                        let extent = (2 * reach + 1) as usize;
                        Window::centered(-reach, extent)
                    }
                };
                (false, w.lo, [w.side, w.side])
            }
        };
        if periodic && shape.iter().any(|&s| s <= 2 * r_max) {
            return Err(ArwError::domain(format!("r_max = {r_max} wraps around the torus")));
        }
        let square = shape[0] == shape[1];
        let mut offsets = Vec::new();
        let mut images = Vec::new();
        let mut opportunities = Vec::new();
        for x in 0..=r_max as i64 {
            for y in 0..=x {
                let imgs = match group {
                    SymmetryGroup::Identity => vec![(x, y)],
                    SymmetryGroup::TorusSymmetries => images_of(x, y, square),
                    SymmetryGroup::D8 => images_of(x, y, true),
                };
                let opp: u64 = imgs
                    .iter()
                    .map(|&(dx, dy)| {
                        if periodic {
                            (shape[0] * shape[1]) as u64
                        } else {
                            let fx = (shape[0] as i64 - dx.abs()).max(0);
                            let fy = (shape[1] as i64 - dy.abs()).max(0);
                            (fx * fy) as u64
                        }
                    })
                    .sum();
                if opp == 0 {
                    return Err(ArwError::domain(format!("offset ({x}, {y}) does not fit in the window")));
                }
                offsets.push((x, y));
                images.push(imgs);
                opportunities.push(opp);
            }
        }
        Ok(PairCounter { group, periodic, lo, shape, offsets, images, opportunities, topology })
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    pub fn group(&self) -> SymmetryGroup {
        self.group
    }

    /// Sites read per sample.
    pub fn window_sites(&self) -> u64 {
        (self.shape[0] * self.shape[1]) as u64
    }

    fn grid(&self, sample: &Configuration) -> Result<Vec<u8>> {
        if sample.topology() != &self.topology {
            return Err(ArwError::domain("samples must share a domain"));
        }
        Ok(sample.sleeper_indicator(&self.lo, &self.shape))
    }

    pub fn count(&self, sample: &Configuration) -> Result<SampleCounts> {
        let g = self.grid(sample)?;
        let [w, h] = self.shape;
        let occupied = g.iter().map(|&b| b as u64).sum();
        let pairs = self
            .images
            .iter()
            .map(|imgs| imgs.iter().map(|&(dx, dy)| shifted_products(&g, w, h, dx, dy, self.periodic)).sum())
            .collect();
        Ok(SampleCounts { occupied, pairs })
    }
}

/// `sum_z g(z) g(z + (dx, dy))` over `z` in the grid; pairs leaving the grid
/// wrap when `periodic` and are skipped otherwise.
fn shifted_products(g: &[u8], w: usize, h: usize, dx: i64, dy: i64, periodic: bool) -> u64 {
    let mut total = 0u64;
    let xs: Vec<Option<usize>> = (0..w as i64)
        .map(|x| {
            let t = x + dx;
            if periodic {
                Some(t.rem_euclid(w as i64) as usize)
            } else {
                (0..w as i64).contains(&t).then_some(t as usize)
            }
        })
        .collect();
    for y in 0..h as i64 {
        let ty = y + dy;
        let ty = if periodic {
            ty.rem_euclid(h as i64)
        } else if (0..h as i64).contains(&ty) {
            ty
        } else {
            continue;
        } as usize;
        let row = &g[y as usize * w..(y as usize + 1) * w];
        let other = &g[ty * w..(ty + 1) * w];
        let mut s = 0u32;
        for (a, tx) in row.iter().zip(&xs) {
            if let Some(tx) = tx {
                s += (a & other[*tx]) as u32;
            }
        }
        total += s as u64;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub offsets: Vec<(i64, i64)>,
    pub corr: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Pooled sleeper density of the window over all samples.
    pub zeta_hat: f64,
    pub samples: usize,
    /// Pooled `E[1(z) 1(z + v)]` per offset.
    pub pair_probability: Vec<f64>,
}

impl CorrelationTable {
    pub fn get(&self, x: i64, y: i64) -> Option<(f64, f64)> {
        let (x, y) = (x.abs().max(y.abs()), x.abs().min(y.abs()));
        self.offsets.iter().position(|&o| o == (x, y)).map(|i| (self.corr[i], self.stderr[i]))
    }

    /// Correlations normalized with a nominal density instead of `zeta_hat`.
    pub fn with_zeta(&self, zeta: f64) -> Vec<f64> {
        self.pair_probability.iter().map(|p| (p - zeta * zeta) / (zeta - zeta * zeta)).collect()
    }
}

/// Accumulates per-sample pair counts and produces a [`CorrelationTable`].
#[derive(Clone, Debug)]
pub struct CorrelationAccumulator {
    counter: PairCounter,
    samples: Vec<SampleCounts>,
}

impl CorrelationAccumulator {
    pub fn new(counter: PairCounter) -> Self {
        CorrelationAccumulator { counter, samples: Vec::new() }
    }

    pub fn counter(&self) -> &PairCounter {
        &self.counter
    }

    pub fn add(&mut self, sample: &Configuration) -> Result<()> {
        let c = self.counter.count(sample)?;
        self.samples.push(c);
        Ok(())
    }

    pub fn push(&mut self, counts: SampleCounts) {
        self.samples.push(counts);
    }

    pub fn finish(&self) -> Result<CorrelationTable> {
        let s = self.samples.len();
        if s == 0 {
            return Err(ArwError::domain("no samples"));
        }
        let sites = self.counter.window_sites();
        let occupied: u64 = self.samples.iter().map(|c| c.occupied).sum();
        let denom = sites * s as u64;
        let zeta = occupied as f64 / denom as f64;
        if occupied == 0 || occupied == denom {
            return Err(ArwError::DegenerateDensity(zeta));
        }
        let var = zeta - zeta * zeta;
        let mut corr = Vec::new();
        let mut stderr = Vec::new();
        let mut pair_probability = Vec::new();
        for (i, &opp) in self.counter.opportunities.iter().enumerate() {
            let total: u64 = self.samples.iter().map(|c| c.pairs[i]).sum();
            // The zero offset is the density itself; reuse the same quotient
            // so its correlation is exactly one.
            let p = if self.counter.offsets[i] == (0, 0) {
                zeta
            } else {
                total as f64 / (opp * s as u64) as f64
            };
            pair_probability.push(p);
            corr.push((p - zeta * zeta) / var);
            let per_sample: Vec<f64> = self
                .samples
                .iter()
                .map(|c| (c.pairs[i] as f64 / opp as f64 - zeta * zeta) / var)
                .collect();
            stderr.push(standard_error(&per_sample));
        }
        Ok(CorrelationTable {
            offsets: self.counter.offsets.clone(),
            corr,
            stderr,
            zeta_hat: zeta,
            samples: s,
            pair_probability,
        })
    }
}

/// Symmetry- and sample-averaged site correlation coefficients
/// `(E[1(0) 1(v)] - zeta^2) / (zeta - zeta^2)` for offsets `0 <= y <= x <= r_max`.
pub fn correlation_table(
    samples: &[Configuration],
    group: SymmetryGroup,
    r_max: usize,
    window: Option<Window>,
) -> Result<CorrelationTable> {
    let first = samples.first().ok_or_else(|| ArwError::domain("no samples"))?;
    let mut acc = CorrelationAccumulator::new(PairCounter::new(first, group, r_max, window)?);
    for s in samples {
        acc.add(s)?;
    }
    acc.finish()
}

/// Covariances `Cov(1(c), 1(c + v))` for `v` in `[-r_max, r_max]^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMap {
    pub r_max: usize,
    /// Row-major in `(dy, dx)`, both from `-r_max` to `r_max`.
    pub values: Vec<f64>,
    /// Jackknife standard errors over samples.
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl CovarianceMap {
    pub fn get(&self, dx: i64, dy: i64) -> (f64, f64) {
        let w = 2 * self.r_max as i64 + 1;
        let i = ((dy + self.r_max as i64) * w + dx + self.r_max as i64) as usize;
        (self.values[i], self.stderr[i])
    }

    /// Mean over the `2d` nearest-neighbor offsets.
    pub fn nearest_neighbor(&self) -> (f64, f64) {
        let nn = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        let v = nn.iter().map(|&(x, y)| self.get(x, y).0).sum::<f64>() / 4.0;
        let e = nn.iter().map(|&(x, y)| self.get(x, y).1).sum::<f64>() / 4.0;
        (v, e)
    }
}

/// Ensemble covariance of sleeper indicators between `center` and nearby
/// sites. On a torus the covariance is averaged over all translations, so
/// `center` only fixes the domain. Standard errors are jackknife estimates
/// over samples.
pub fn covariance_map(samples: &[Configuration], center: &Site, r_max: usize) -> Result<CovarianceMap> {
    let first = samples.first().ok_or_else(|| ArwError::domain("no samples"))?;
    let topology = first.topology();
    if topology.dim() != 2 || center.dim() != 2 {
        return Err(ArwError::Unsupported("covariance maps are implemented for d = 2".into()));
    }
    let r = r_max as i64;
    let periodic = topology.kind() == TopologyKind::Torus;
    let (lo, shape) = match topology.extent() {
        Some(ext) if periodic => {
            if ext.iter().any(|&l| l <= 2 * r_max) {
                return Err(ArwError::domain(format!("r_max = {r_max} wraps around the torus")));
            }
            (vec![0, 0], [ext[0], ext[1]])
        }
        _ => (center.coords().iter().map(|c| c - r).collect(), [2 * r_max + 1; 2]),
    };
    let grids: Vec<Vec<u8>> = samples
        .iter()
        .map(|s| {
            if s.topology() != topology {
                return Err(ArwError::domain("samples must share a domain"));
            }
            Ok(s.sleeper_indicator(&lo, &shape))
        })
        .collect::<Result<_>>()?;
    let s = grids.len();
    let [w, h] = shape;
    let cells = w * h;
    let mut counts = vec![0u32; cells];
    for g in &grids {
        for (c, &b) in counts.iter_mut().zip(g) {
            *c += b as u32;
        }
    }
    let side = 2 * r_max + 1;
    let mut values = vec![0.0; side * side];
    let mut stderr = vec![0.0; side * side];
    // Pairs (z, z + v) with z ranging over the translation class: every site
    // on a torus, the center alone otherwise.
    let bases: Vec<usize> = if periodic { (0..cells).collect() } else { vec![r_max * w + r_max] };
    let nb = bases.len() as f64;
    let partner = |z: usize, dx: i64, dy: i64| -> usize {
        let (x, y) = ((z % w) as i64 + dx, (z / w) as i64 + dy);
        (y.rem_euclid(h as i64) as usize) * w + x.rem_euclid(w as i64) as usize
    };
    for dy in -r..=r {
        for dx in -r..=r {
            let idx = ((dy + r) as usize) * side + (dx + r) as usize;
            let pairs_of = |g: &[u8]| -> f64 {
                bases.iter().map(|&z| (g[z] & g[partner(z, dx, dy)]) as u64).sum::<u64>() as f64
            };
            let per_sample: Vec<f64> = grids.iter().map(|g| pairs_of(g)).collect();
            let p_total: f64 = per_sample.iter().sum();
            let q_total: f64 = bases
                .iter()
                .map(|&z| counts[z] as f64 * counts[partner(z, dx, dy)] as f64)
                .sum();
            let sf = s as f64;
            values[idx] = (p_total / sf - q_total / (sf * sf)) / nb;
            if s < 2 {
                continue;
            }
            let m = sf - 1.0;
            let loo: Vec<f64> = grids
                .iter()
                .zip(&per_sample)
                .map(|(g, &ps)| {
                    let cross: f64 = bases
                        .iter()
                        .map(|&z| {
                            let t = partner(z, dx, dy);
                            g[z] as f64 * counts[t] as f64 + counts[z] as f64 * g[t] as f64
                        })
                        .sum();
                    let q = q_total - cross + ps;
                    ((p_total - ps) / m - q / (m * m)) / nb
                })
                .collect();
            let lm = mean(&loo);
            let jk = loo.iter().map(|x| (x - lm) * (x - lm)).sum::<f64>() * m / sf;
            stderr[idx] = jk.sqrt();
        }
    }
    Ok(CovarianceMap { r_max, values, stderr, samples: s })
}

/// Sleepers of `config` inside the box `[lo, lo + shape)`.
pub fn box_count(config: &Configuration, lo: &[i64], shape: &[usize]) -> u64 {
    config.sleeper_indicator(lo, shape).iter().map(|&b| b as u64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub volume: f64,
    pub mean: f64,
    pub variance: f64,
    pub replicas: usize,
    /// `(count, frequency)` pairs in increasing count order.
    pub histogram: Vec<(u64, u64)>,
    /// Empirical `P(count >= zeta * volume)` when a density was given.
    pub tail: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: f64,
    /// 95% confidence interval from the regression residuals.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub points: Vec<VariancePoint>,
    pub fitted_alpha: Option<AlphaFit>,
}

/// Number variance of box counts. `counts[b]` holds one count per replica for
/// the box of shape `boxes[b]`. The growth exponent is the least-squares
/// slope of log variance against log linear size `vol^(1/d)`, fitted when at
/// least three box sizes with positive variance are given.
pub fn variance_curve(counts: &[Vec<u64>], boxes: &[Vec<usize>], zeta: Option<f64>) -> Result<VarianceCurve> {
    if counts.len() != boxes.len() || counts.is_empty() {
        return Err(ArwError::domain("need one count series per box"));
    }
    let mut points = Vec::new();
    for (cs, shape) in counts.iter().zip(boxes) {
        if cs.len() < 2 {
            return Err(ArwError::domain("variance needs at least two replicas per box"));
        }
        let volume = shape.iter().product::<usize>() as f64;
        let xs: Vec<f64> = cs.iter().map(|&c| c as f64).collect();
        let mut sorted = cs.clone();
        sorted.sort_unstable();
        let mut histogram: Vec<(u64, u64)> = Vec::new();
        for c in sorted {
            match histogram.last_mut() {
                Some((v, f)) if *v == c => *f += 1,
                _ => histogram.push((c, 1)),
            }
        }
        let tail = zeta.map(|z| cs.iter().filter(|&&c| c as f64 >= z * volume).count() as f64 / cs.len() as f64);
        points.push(VariancePoint {
            volume,
            mean: mean(&xs),
            variance: sample_variance(&xs),
            replicas: cs.len(),
            histogram,
            tail,
        });
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .zip(boxes)
        .filter(|(p, _)| p.variance > 0.0)
        .map(|(p, b)| (p.volume.ln() / b.len() as f64, p.variance.ln()))
        .collect();
    let mut sizes: Vec<f64> = fit.iter().map(|p| p.0).collect();
    sizes.dedup();
    let fitted_alpha = if sizes.len() >= 3 { Some(ols_slope(&fit)) } else { None };
    Ok(VarianceCurve { points, fitted_alpha })
}

fn ols_slope(points: &[(f64, f64)]) -> AlphaFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map(|d| d.inverse_cdf(0.975)).unwrap_or(f64::INFINITY);
    AlphaFit { alpha: slope, ci_low: slope - t * se, ci_high: slope + t * se }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HockeyFit {
    /// `max |density(t) - min(t, zeta_c)|` over the curve.
    pub distance: f64,
    /// Mean density over `t` in `[1.0, 1.2]`, if the curve reaches there.
    pub plateau: Option<f64>,
}

/// Sup-norm distance from `(t, density)` points to `t -> min(t, zeta_c)`.
pub fn hockey_distance(curve: &[(f64, f64)], zeta_c: f64) -> Result<HockeyFit> {
    if curve.is_empty() {
        return Err(ArwError::domain("empty density curve"));
    }
    if curve.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(ArwError::domain("density curve must be sorted in t"));
    }
    let distance = curve.iter().map(|&(t, rho)| (rho - t.min(zeta_c)).abs()).fold(0.0, f64::max);
    const EPS: f64 = 1e-9;
    let plateau: Vec<f64> =
        curve.iter().filter(|(t, _)| *t >= 1.0 - EPS && *t <= 1.2 + EPS).map(|p| p.1).collect();
    Ok(HockeyFit { distance, plateau: (!plateau.is_empty()).then(|| mean(&plateau)) })
}

/// Test functions for the quadrature inequality.
#[derive(Clone)]
pub enum TestFunction {
    One,
    Affine { a: Vec<f64>, b: f64 },
    NegSquaredDistance { x0: Vec<f64> },
    Custom { name: String, f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl TestFunction {
    pub fn id(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
        match self {
            TestFunction::One => "one".into(),
            TestFunction::Affine { a, b } => format!("affine[{}|{b}]", list(a)),
            TestFunction::NegSquaredDistance { x0 } => format!("negsq[{}]", list(x0)),
            TestFunction::Custom { name, .. } => name.clone(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::One => 1.0,
            TestFunction::Affine { a, b } => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b,
            TestFunction::NegSquaredDistance { x0 } => -x.iter().zip(x0).map(|(x, c)| (x - c) * (x - c)).sum::<f64>(),
            TestFunction::Custom { f, .. } => f(x),
        }
    }

    /// Discrete Laplacian on `eps Z^d` at `x`.
    fn laplacian(&self, x: &[f64], eps: f64) -> f64 {
        let mut y = x.to_vec();
        let mut acc = -2.0 * x.len() as f64 * self.eval(x);
        for a in 0..x.len() {
            for s in [eps, -eps] {
                y[a] = x[a] + s;
                acc += self.eval(&y);
            }
            y[a] = x[a];
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureReport {
    pub function_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    /// Standard error of the margin over outcomes (0 for a single outcome).
    pub stderr: f64,
}

/// Radius of the box used to smooth the sleeper field when locating `A*`.
pub const SUPPORT_SMOOTHING_RADIUS: i64 = 2;

/// Estimate of the limiting support `A*`: sites whose `(2r + 1)^d` box
/// neighborhood holds sleepers at local density at least `zeta_a / 2`.
pub fn smoothed_support(config: &Configuration, zeta_a: f64, radius: i64) -> Vec<Site> {
    let Some((lo, hi)) = config.occupied_bounds() else {
        return Vec::new();
    };
    let d = config.dim();
    let glo: Vec<i64> = lo.iter().map(|l| l - radius).collect();
    let shape: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| (h - l + 1 + 2 * radius) as usize).collect();
    let grid = config.sleeper_indicator(&glo, &shape);
    // Box sums by repeated 1-d prefix sums along each axis.
    let mut sums: Vec<u32> = grid.iter().map(|&b| b as u32).collect();
    let mut stride = 1;
    for &len in &shape {
        let block = stride * len;
        let mut out = vec![0u32; sums.len()];
        for base in (0..sums.len()).step_by(block) {
            for off in 0..stride {
                let mut prefix = vec![0u32; len + 1];
                for i in 0..len {
                    prefix[i + 1] = prefix[i] + sums[base + off + i * stride];
                }
                for i in 0..len {
                    let a = i.saturating_sub(radius as usize);
                    let b = (i + radius as usize + 1).min(len);
                    out[base + off + i * stride] = prefix[b] - prefix[a];
                }
            }
        }
        sums = out;
        stride = block;
    }
    let cells = (2 * radius + 1).pow(d as u32) as f64;
    let threshold = zeta_a / 2.0 * cells;
    let mut support = Vec::new();
    for (j, &s) in sums.iter().enumerate() {
        if s as f64 >= threshold {
            let mut c = vec![0i64; d];
            let mut k = j;
            for a in 0..d {
                c[a] = glo[a] + (k % shape[a]) as i64;
                k /= shape[a];
            }
            support.push(Site::new(c));
        }
    }
    support
}

/// Number of lattice edges between `sites` and their complement.
pub fn boundary_edges(sites: &[Site]) -> u64 {
    let set: HashSet<&[i64]> = sites.iter().map(Site::coords).collect();
    let mut n = 0;
    for s in sites {
        let mut c = s.coords().to_vec();
        for a in 0..c.len() {
            for step in [1, -1] {
                c[a] += step;
                n += !set.contains(c.as_slice()) as u64;
                c[a] -= step;
            }
        }
    }
    n
}

const LAPLACIAN_SAMPLES: usize = 4096;

/// Compare `eps^d sum_{eps x in A} u(eps x)` with
/// `zeta_a eps^d sum_{x in A*} u(eps x)` for each test function, `A*` being
/// the [`smoothed_support`] of each outcome.
pub fn quadrature_check(
    region: &Region,
    eps: f64,
    outcomes: &[StabilizationOutcome],
    zeta_a: f64,
    functions: &[TestFunction],
) -> Result<Vec<QuadratureReport>> {
    if outcomes.is_empty() {
        return Err(ArwError::domain("no outcomes"));
    }
    if !(zeta_a > 0.0 && zeta_a <= 1.0) {
        return Err(ArwError::domain(format!("zeta_a must lie in (0, 1], got {zeta_a}")));
    }
    let source = region.lattice_points(eps)?;
    let d = region.dim();
    let vol = eps.powi(d as i32);
    let scaled = |s: &Site| -> Vec<f64> { s.coords().iter().map(|&c| c as f64 * eps).collect() };
    let supports: Vec<Vec<Site>> = outcomes
        .iter()
        .map(|o| smoothed_support(&o.final_config, zeta_a, SUPPORT_SMOOTHING_RADIUS))
        .collect();
    let mut reports = Vec::new();
    for f in functions {
        let probe: Vec<&Site> = source.iter().chain(supports.iter().flatten()).collect();
        let stride = (probe.len() / LAPLACIAN_SAMPLES).max(1);
        for s in probe.iter().step_by(stride) {
            let x = scaled(s);
            let lap = f.laplacian(&x, eps);
            if lap > 1e-9 * (1.0 + f.eval(&x).abs()) {
                return Err(ArwError::NotSuperharmonic { name: f.id(), laplacian: lap, at: x });
            }
        }
        let lhs = vol * source.iter().map(|s| f.eval(&scaled(s))).sum::<f64>();
        let rhs_each: Vec<f64> = supports
            .iter()
            .map(|sup| zeta_a * vol * sup.iter().map(|s| f.eval(&scaled(s))).sum::<f64>())
            .collect();
        let margins: Vec<f64> = rhs_each.iter().map(|r| lhs - r).collect();
        let rhs = mean(&rhs_each);
        reports.push(QuadratureReport {
            function_id: f.id(),
            lhs,
            rhs,
            margin: mean(&margins),
            stderr: standard_error(&margins),
        });
    }
    Ok(reports)
}
