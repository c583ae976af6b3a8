//! Sites, topologies and particle configurations.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ArwError, Result};

/// A point of the lattice `Z^d`, in lattice units.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site(Vec<i64>);

impl Site {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        let coords = coords.into();
        assert!(!coords.is_empty(), "a site needs at least one coordinate");
        Site(coords)
    }

    pub fn origin(dim: usize) -> Self {
        Site::new(vec![0; dim])
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|c| c * c).sum()
    }
}

impl From<&[i64]> for Site {
    fn from(c: &[i64]) -> Self {
        Site::new(c.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyKind {
    /// The box `[1, L_1] x ... x [1, L_d]`; particles stepping out are killed.
    WiredBox,
    /// `Z_{L_1} x ... x Z_{L_d}` with coordinates `0..L_i`.
    Torus,
    /// All of `Z^d`, stored in an origin-centered grid that grows on demand.
    DynamicLattice,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    kind: TopologyKind,
    dim: usize,
    /// Side lengths; empty for the dynamic lattice.
    extent: Vec<usize>,
}

/// One entry of a neighbor list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Site(Site),
    Kill,
}

pub const MIN_TORUS_SIDE: usize = 3;

impl Topology {
    pub fn wired_box(sides: &[usize]) -> Result<Self> {
        if sides.is_empty() || sides.iter().any(|&l| l == 0) {
            return Err(ArwError::domain(format!("wired box sides must be positive, got {sides:?}")));
        }
        Ok(Topology { kind: TopologyKind::WiredBox, dim: sides.len(), extent: sides.to_vec() })
    }

    pub fn wired_cube(side: usize, dim: usize) -> Result<Self> {
        Self::wired_box(&vec![side; dim])
    }

    pub fn torus(sides: &[usize]) -> Result<Self> {
        if sides.is_empty() || sides.iter().any(|&l| l < MIN_TORUS_SIDE) {
            return Err(ArwError::domain(format!(
                "torus sides must be at least {MIN_TORUS_SIDE}, got {sides:?}"
            )));
        }
        Ok(Topology { kind: TopologyKind::Torus, dim: sides.len(), extent: sides.to_vec() })
    }

    pub fn square_torus(side: usize, dim: usize) -> Result<Self> {
        Self::torus(&vec![side; dim])
    }

    pub fn dynamic(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ArwError::domain("dimension must be at least 1"));
        }
        Ok(Topology { kind: TopologyKind::DynamicLattice, dim, extent: Vec::new() })
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Side lengths, or `None` for the unbounded lattice.
    pub fn extent(&self) -> Option<&[usize]> {
        match self.kind {
            TopologyKind::DynamicLattice => None,
            _ => Some(&self.extent),
        }
    }

    /// Number of sites `#V`, if finite.
    pub fn volume(&self) -> Option<u64> {
        self.extent().map(|e| e.iter().map(|&l| l as u64).product())
    }

    /// Smallest coordinate along every axis of a finite topology.
    pub fn lower_corner(&self) -> i64 {
        match self.kind {
            TopologyKind::WiredBox => 1,
            _ => 0,
        }
    }

    pub fn contains(&self, site: &Site) -> bool {
        if site.dim() != self.dim {
            return false;
        }
        match self.kind {
            TopologyKind::DynamicLattice => true,
            _ => {
                let lo = self.lower_corner();
                site.coords()
                    .iter()
                    .zip(&self.extent)
                    .all(|(&c, &l)| c >= lo && c < lo + l as i64)
            }
        }
    }

    fn check(&self, site: &Site) -> Result<()> {
        if site.dim() != self.dim {
            return Err(ArwError::domain(format!(
                "site {:?} has dimension {}, topology has {}",
                site.coords(),
                site.dim(),
                self.dim
            )));
        }
        if !self.contains(site) {
            return Err(ArwError::domain(format!("site {:?} outside {:?}", site.coords(), self)));
        }
        Ok(())
    }

    /// The `2d` neighbors of `site`, in direction order `+e_1, -e_1, +e_2, ...`.
    pub fn neighbors(&self, site: &Site) -> Result<Vec<Neighbor>> {
        self.check(site)?;
        let mut out = Vec::with_capacity(2 * self.dim);
        for dir in 0..2 * self.dim {
            let (axis, step) = direction(dir);
            let mut c = site.coords().to_vec();
            c[axis] += step;
            let n = match self.kind {
                TopologyKind::DynamicLattice => Neighbor::Site(Site(c)),
                TopologyKind::Torus => {
                    c[axis] = c[axis].rem_euclid(self.extent[axis] as i64);
                    Neighbor::Site(Site(c))
                }
                TopologyKind::WiredBox => {
                    if c[axis] < 1 || c[axis] > self.extent[axis] as i64 {
                        Neighbor::Kill
                    } else {
                        Neighbor::Site(Site(c))
                    }
                }
            };
            out.push(n);
        }
        Ok(out)
    }

    /// All sites of a finite topology in storage order (first axis fastest).
    pub fn sites(&self) -> Result<Vec<Site>> {
        let extent = self
            .extent()
            .ok_or_else(|| ArwError::Unsupported("site enumeration of an infinite lattice".into()))?;
        let layout = Layout::new(vec![self.lower_corner(); self.dim], extent.to_vec());
        Ok((0..layout.len).map(|i| Site(layout.coords(i))).collect())
    }
}

/// Convenience form of [`Topology::neighbors`].
pub fn neighbors(topology: &Topology, site: &Site) -> Result<Vec<Neighbor>> {
    topology.neighbors(site)
}

/// Axis and unit step of direction index `dir`.
#[inline(always)]
pub fn direction(dir: usize) -> (usize, i64) {
    (dir / 2, if dir % 2 == 0 { 1 } else { -1 })
}

/// Particle count and sleep flag of one site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteState {
    pub n: u32,
    pub asleep: bool,
}

impl SiteState {
    pub const EMPTY: SiteState = SiteState { n: 0, asleep: false };
    pub const SLEEPING: SiteState = SiteState { n: 1, asleep: true };

    pub fn active(n: u32) -> Self {
        SiteState { n, asleep: false }
    }

    pub fn is_stable(self) -> bool {
        self.n == 0 || (self.n == 1 && self.asleep)
    }

    pub(crate) fn pack(self) -> u32 {
        if self.asleep {
            SLEEPER
        } else {
            self.n
        }
    }

    pub(crate) fn unpack(raw: u32) -> Self {
        if raw == SLEEPER {
            SiteState::SLEEPING
        } else {
            SiteState::active(raw)
        }
    }
}

/// Packed encoding of a lone sleeping particle. Any other value is an
/// active particle count.
pub(crate) const SLEEPER: u32 = u32::MAX;

/// Particle count of a packed cell.
#[inline(always)]
pub(crate) fn count_of(raw: u32) -> u32 {
    if raw == SLEEPER {
        1
    } else {
        raw
    }
}

#[inline(always)]
pub(crate) fn raw_is_stable(raw: u32) -> bool {
    raw == 0 || raw == SLEEPER
}

pub(crate) const KILL: u32 = u32::MAX;

/// Row-major storage layout of an axis-aligned box of sites.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub lo: Vec<i64>,
    pub shape: Vec<usize>,
    pub strides: Vec<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(lo: Vec<i64>, shape: Vec<usize>) -> Self {
        let mut strides = Vec::with_capacity(shape.len());
        let mut acc = 1usize;
        for &s in &shape {
            strides.push(acc);
            acc = acc.checked_mul(s).expect("lattice storage overflow");
        }
        Layout { lo, shape, strides, len: acc }
    }

    pub fn index(&self, coords: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (axis, &c) in coords.iter().enumerate() {
            let off = c - self.lo[axis];
            if off < 0 || off >= self.shape[axis] as i64 {
                return None;
            }
            idx += off as usize * self.strides[axis];
        }
        Some(idx)
    }

    pub fn coords(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0; self.shape.len()];
        self.coords_into(idx, &mut out);
        out
    }

    pub fn coords_into(&self, mut idx: usize, out: &mut [i64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            let s = self.shape[axis];
            *o = self.lo[axis] + (idx % s) as i64;
            idx /= s;
        }
    }
}

/// Old and new layouts of a grid that has just grown.
#[derive(Clone, Debug)]
pub(crate) struct Regrid {
    pub old: Layout,
    pub new: Layout,
}

impl Regrid {
    pub fn map(&self, old_idx: usize) -> usize {
        let mut idx = 0usize;
        let mut rem = old_idx;
        for axis in 0..self.old.shape.len() {
            let s = self.old.shape[axis];
            let off = (rem % s) as i64 + self.old.lo[axis] - self.new.lo[axis];
            rem /= s;
            idx += off as usize * self.new.strides[axis];
        }
        idx
    }
}

const INITIAL_HALF_WIDTH: i64 = 16;

/// A particle configuration over a topology.
///
/// Wired boxes and tori use a dense array. The dynamic lattice uses an
/// origin-centered dense window that doubles whenever a particle reaches its
/// outermost layer, so every occupied site always has all `2d` neighbors in
/// storage.
#[derive(Clone, Debug)]
pub struct Configuration {
    topology: Topology,
    layout: Layout,
    cells: Vec<u32>,
    /// `2d` neighbor indices per site for finite topologies (`KILL` outside).
    adjacency: Option<Arc<[u32]>>,
    /// Outermost layer of the dynamic window.
    border: Vec<bool>,
    total: u64,
}

impl Configuration {
    pub fn empty(topology: &Topology) -> Self {
        let dim = topology.dim();
        let (layout, adjacency, border) = match topology.kind() {
            TopologyKind::DynamicLattice => {
                let layout = centered_layout(dim, INITIAL_HALF_WIDTH);
                let border = border_mask(&layout);
                (layout, None, border)
            }
            _ => {
                let layout = Layout::new(
                    vec![topology.lower_corner(); dim],
                    topology.extent().unwrap().to_vec(),
                );
                let adj = build_adjacency(topology, &layout);
                (layout, Some(adj), Vec::new())
            }
        };
        Configuration {
            topology: topology.clone(),
            cells: vec![0; layout.len],
            layout,
            adjacency,
            border,
            total: 0,
        }
    }

    /// One active particle on every site of a finite topology.
    pub fn all_active(topology: &Topology) -> Result<Self> {
        if topology.volume().is_none() {
            return Err(ArwError::Unsupported("1_V on an infinite lattice".into()));
        }
        let mut c = Configuration::empty(topology);
        c.cells.iter_mut().for_each(|x| *x = 1);
        c.total = c.cells.len() as u64;
        Ok(c)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn dim(&self) -> usize {
        self.topology.dim()
    }

    pub fn total_particles(&self) -> u64 {
        self.total
    }

    /// Particles per site, `|eta| / #V`.
    pub fn density(&self) -> Result<f64> {
        let v = self
            .topology
            .volume()
            .ok_or_else(|| ArwError::Unsupported("density on the infinite lattice".into()))?;
        Ok(self.total as f64 / v as f64)
    }

    pub fn get(&self, site: &Site) -> Result<SiteState> {
        self.topology.check(site)?;
        Ok(match self.layout.index(site.coords()) {
            Some(i) => SiteState::unpack(self.cells[i]),
            None => SiteState::EMPTY,
        })
    }

    pub fn set(&mut self, site: &Site, state: SiteState) -> Result<()> {
        self.topology.check(site)?;
        if state.asleep && state.n != 1 {
            return Err(ArwError::domain(format!("a sleeping site holds exactly one particle, got {}", state.n)));
        }
        let i = self.slot(site);
        self.total -= count_of(self.cells[i]) as u64;
        self.total += state.n as u64;
        self.cells[i] = state.pack();
        Ok(())
    }

    /// Add `count` active particles at `site`, waking a sleeper there.
    pub fn add_active(&mut self, site: &Site, count: u32) -> Result<()> {
        self.topology.check(site)?;
        let i = self.slot(site);
        self.add_active_at(i, count);
        Ok(())
    }

    /// Clear every sleep flag.
    pub fn wake_all(&mut self) {
        for c in &mut self.cells {
            if *c == SLEEPER {
                *c = 1;
            }
        }
    }

    pub fn is_stable(&self) -> bool {
        self.cells.iter().all(|&c| raw_is_stable(c))
    }

    /// Occupied sites with their states, in canonical order (last axis major).
    pub fn occupied(&self) -> Vec<(Site, SiteState)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, &c)| (Site(self.layout.coords(i)), SiteState::unpack(c)))
            .collect()
    }

    pub fn sleepers(&self) -> Vec<Site> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == SLEEPER)
            .map(|(i, _)| Site(self.layout.coords(i)))
            .collect()
    }

    /// Inclusive per-axis bounds of the occupied sites.
    pub fn occupied_bounds(&self) -> Option<(Vec<i64>, Vec<i64>)> {
        bounds_of(&self.layout, self.cells.iter().map(|&c| c != 0))
    }

    /// 0/1 indicator of a sleeping particle over the box `[lo, lo + shape)`,
    /// first axis fastest. Sites outside the stored region read as empty;
    /// on a torus coordinates wrap.
    pub fn sleeper_indicator(&self, lo: &[i64], shape: &[usize]) -> Vec<u8> {
        let window = Layout::new(lo.to_vec(), shape.to_vec());
        let mut out = vec![0u8; window.len];
        let mut c = vec![0i64; self.dim()];
        let torus = self.topology.kind() == TopologyKind::Torus;
        for (j, o) in out.iter_mut().enumerate() {
            window.coords_into(j, &mut c);
            if torus {
                for (axis, x) in c.iter_mut().enumerate() {
                    *x = x.rem_euclid(self.layout.shape[axis] as i64);
                }
            }
            if let Some(i) = self.layout.index(&c) {
                *o = (self.cells[i] == SLEEPER) as u8;
            }
        }
        out
    }

    /// ASCII graymap ("P2") of a 2-d slice. For `d >= 3`, `slice` fixes the
    /// coordinates of axes `2..d`; for `d = 1` the image has height 1.
    pub fn to_pgm(&self, slice: &[i64]) -> Result<String> {
        let d = self.dim();
        if d >= 3 && slice.len() != d - 2 {
            return Err(ArwError::domain(format!(
                "a {d}-d snapshot needs {} slice coordinates, got {}",
                d - 2,
                slice.len()
            )));
        }
        let (lo, hi) = match self.topology.extent() {
            Some(ext) => {
                let lo = vec![self.topology.lower_corner(); d];
                let hi = ext.iter().map(|&l| self.topology.lower_corner() + l as i64 - 1).collect();
                (lo, hi)
            }
            None => self.occupied_bounds().unwrap_or((vec![0; d], vec![0; d])),
        };
        let width = (hi[0] - lo[0] + 1) as usize;
        let (y0, height) = if d >= 2 { (lo[1], (hi[1] - lo[1] + 1) as usize) } else { (0, 1) };
        let mut out = String::new();
        writeln!(out, "P2\n{width} {height}\n255").unwrap();
        let mut c = vec![0i64; d];
        for row in 0..height {
            let mut line = String::with_capacity(width * 4);
            for col in 0..width {
                c[0] = lo[0] + col as i64;
                if d >= 2 {
                    c[1] = y0 + row as i64;
                }
                for (k, &s) in slice.iter().enumerate() {
                    c[k + 2] = s;
                }
                let v = match self.layout.index(&c).map(|i| self.cells[i]) {
                    None | Some(0) => 0,
                    Some(SLEEPER) => 255,
                    Some(_) => 128,
                };
                if col > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").unwrap();
            }
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    // ---- crate-internal raw access used by the stabilizer ----

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [u32] {
        &mut self.cells
    }

    pub(crate) fn adjacency(&self) -> Option<&Arc<[u32]>> {
        self.adjacency.as_ref()
    }

    pub(crate) fn on_border(&self, idx: usize) -> bool {
        !self.border.is_empty() && self.border[idx]
    }

    pub(crate) fn index_of(&self, site: &Site) -> Option<usize> {
        self.layout.index(site.coords())
    }

    pub(crate) fn site_at(&self, idx: usize) -> Site {
        Site(self.layout.coords(idx))
    }

    pub(crate) fn add_active_at(&mut self, idx: usize, count: u32) {
        let c = &mut self.cells[idx];
        *c = count_of(*c) + count;
        self.total += count as u64;
    }

    pub(crate) fn remove_particles(&mut self, removed: u64) {
        self.total -= removed;
    }

    /// Storage index of `site`, growing the dynamic window until the site is
    /// strictly inside it.
    fn slot(&mut self, site: &Site) -> usize {
        loop {
            if let Some(i) = self.layout.index(site.coords()) {
                if !self.on_border(i) {
                    return i;
                }
            }
            self.grow();
        }
    }

    /// Double the dynamic window. Returns the index remapping.
    pub(crate) fn grow(&mut self) -> Regrid {
        debug_assert_eq!(self.topology.kind(), TopologyKind::DynamicLattice);
        let half = -self.layout.lo[0];
        let new = centered_layout(self.dim(), half * 2);
        let regrid = Regrid { old: self.layout.clone(), new };
        let mut cells = vec![0u32; regrid.new.len];
        for (i, &c) in self.cells.iter().enumerate() {
            if c != 0 {
                cells[regrid.map(i)] = c;
            }
        }
        self.cells = cells;
        self.border = border_mask(&regrid.new);
        self.layout = regrid.new.clone();
        regrid
    }
}

/// Two configurations are equal when they live on the same topology and hold
/// the same states at every site, irrespective of storage layout.
impl PartialEq for Configuration {
    fn eq(&self, other: &Self) -> bool {
        if self.topology != other.topology || self.total != other.total {
            return false;
        }
        if self.layout == other.layout {
            return self.cells == other.cells;
        }
        self.occupied() == other.occupied()
    }
}

impl Eq for Configuration {}

fn centered_layout(dim: usize, half: i64) -> Layout {
    Layout::new(vec![-half; dim], vec![(2 * half + 1) as usize; dim])
}

fn border_mask(layout: &Layout) -> Vec<bool> {
    let mut c = vec![0i64; layout.shape.len()];
    (0..layout.len)
        .map(|i| {
            layout.coords_into(i, &mut c);
            c.iter()
                .enumerate()
                .any(|(a, &x)| x == layout.lo[a] || x == layout.lo[a] + layout.shape[a] as i64 - 1)
        })
        .collect()
}

fn build_adjacency(topology: &Topology, layout: &Layout) -> Arc<[u32]> {
    let d = topology.dim();
    assert!(layout.len < KILL as usize, "finite topology too large for 32-bit indices");
    let mut adj = Vec::with_capacity(layout.len * 2 * d);
    let mut c = vec![0i64; d];
    for i in 0..layout.len {
        layout.coords_into(i, &mut c);
        for dir in 0..2 * d {
            let (axis, step) = direction(dir);
            let lo = layout.lo[axis];
            let l = layout.shape[axis] as i64;
            let mut x = c[axis] + step;
            let inside = x >= lo && x < lo + l;
            let j = if inside {
                Some(i as i64 + step * layout.strides[axis] as i64)
            } else if topology.kind() == TopologyKind::Torus {
                x = (x - lo).rem_euclid(l) + lo;
                Some(i as i64 + (x - c[axis]) * layout.strides[axis] as i64)
            } else {
                None
            };
            adj.push(j.map_or(KILL, |j| j as u32));
        }
    }
    adj.into()
}

pub(crate) fn bounds_of(
    layout: &Layout,
    mask: impl Iterator<Item = bool>,
) -> Option<(Vec<i64>, Vec<i64>)> {
    let d = layout.shape.len();
    let mut lo = vec![i64::MAX; d];
    let mut hi = vec![i64::MIN; d];
    let mut c = vec![0i64; d];
    let mut any = false;
    for (i, m) in mask.enumerate() {
        if m {
            any = true;
            layout.coords_into(i, &mut c);
            for a in 0..d {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    any.then_some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(c: &[i64]) -> Site {
        Site::new(c.to_vec())
    }

    #[test]
    fn torus_wraps() {
        let t = Topology::torus(&[5, 5]).unwrap();
        let n = t.neighbors(&s(&[0, 0])).unwrap();
        assert_eq!(
            n,
            vec![
                Neighbor::Site(s(&[1, 0])),
                Neighbor::Site(s(&[4, 0])),
                Neighbor::Site(s(&[0, 1])),
                Neighbor::Site(s(&[0, 4])),
            ]
        );
    }

    #[test]
    fn wired_corner_has_two_kills() {
        let t = Topology::wired_box(&[3, 3]).unwrap();
        let n = t.neighbors(&s(&[1, 1])).unwrap();
        assert_eq!(
            n,
            vec![
                Neighbor::Site(s(&[2, 1])),
                Neighbor::Kill,
                Neighbor::Site(s(&[1, 2])),
                Neighbor::Kill,
            ]
        );
    }

    #[test]
    fn dynamic_line_neighbors() {
        let t = Topology::dynamic(1).unwrap();
        let n = t.neighbors(&s(&[7])).unwrap();
        assert_eq!(n, vec![Neighbor::Site(s(&[8])), Neighbor::Site(s(&[6]))]);
    }

    #[test]
    fn neighbors_outside_domain_is_an_error() {
        let t = Topology::wired_box(&[3, 3]).unwrap();
        assert!(matches!(t.neighbors(&s(&[0, 1])), Err(ArwError::Domain(_))));
        let t = Topology::torus(&[5]).unwrap();
        assert!(t.neighbors(&s(&[5])).is_err());
        assert!(t.neighbors(&s(&[1, 1])).is_err());
    }

    #[test]
    fn small_torus_rejected() {
        assert!(Topology::torus(&[2, 5]).is_err());
        assert!(Topology::torus(&[3]).is_ok());
    }

    #[test]
    fn adjacency_matches_neighbors() {
        for t in [
            Topology::torus(&[4, 3]).unwrap(),
            Topology::wired_box(&[3, 4]).unwrap(),
            Topology::torus(&[3, 3, 5]).unwrap(),
        ] {
            let c = Configuration::empty(&t);
            let adj = c.adjacency().unwrap().clone();
            let d = t.dim();
            for (i, site) in t.sites().unwrap().iter().enumerate() {
                let expect = t.neighbors(site).unwrap();
                for (dir, e) in expect.iter().enumerate() {
                    let got = adj[i * 2 * d + dir];
                    match e {
                        Neighbor::Kill => assert_eq!(got, KILL),
                        Neighbor::Site(y) => assert_eq!(c.site_at(got as usize), *y),
                    }
                }
            }
        }
    }

    #[test]
    fn densities() {
        let b = Topology::wired_box(&[10, 10]).unwrap();
        assert_eq!(Configuration::empty(&b).density().unwrap(), 0.0);

        let t = Topology::torus(&[5]).unwrap();
        let mut c = Configuration::empty(&t);
        c.set(&s(&[2]), SiteState::SLEEPING).unwrap();
        assert_eq!(c.density().unwrap(), 0.2);

        let b = Topology::wired_box(&[4, 4]).unwrap();
        assert_eq!(Configuration::all_active(&b).unwrap().density().unwrap(), 1.0);

        let d = Topology::dynamic(2).unwrap();
        assert!(matches!(Configuration::empty(&d).density(), Err(ArwError::Unsupported(_))));
    }

    #[test]
    fn sleeping_site_must_hold_one_particle() {
        let t = Topology::torus(&[5]).unwrap();
        let mut c = Configuration::empty(&t);
        assert!(c.set(&s(&[0]), SiteState { n: 2, asleep: true }).is_err());
    }

    #[test]
    fn adding_wakes_and_counts() {
        let t = Topology::torus(&[5, 5]).unwrap();
        let mut c = Configuration::empty(&t);
        c.set(&s(&[1, 1]), SiteState::SLEEPING).unwrap();
        c.add_active(&s(&[1, 1]), 1).unwrap();
        assert_eq!(c.get(&s(&[1, 1])).unwrap(), SiteState::active(2));
        assert_eq!(c.total_particles(), 2);
        assert!(!c.is_stable());
    }

    #[test]
    fn dynamic_window_grows_and_keeps_particles() {
        let t = Topology::dynamic(2).unwrap();
        let mut c = Configuration::empty(&t);
        c.set(&s(&[3, -2]), SiteState::SLEEPING).unwrap();
        c.add_active(&s(&[100, 0]), 2).unwrap();
        assert_eq!(c.get(&s(&[3, -2])).unwrap(), SiteState::SLEEPING);
        assert_eq!(c.get(&s(&[100, 0])).unwrap(), SiteState::active(2));
        assert_eq!(c.get(&s(&[-500, 9])).unwrap(), SiteState::EMPTY);
        assert_eq!(c.total_particles(), 3);
        assert_eq!(c.occupied_bounds(), Some((vec![3, -2], vec![100, 0])));
    }

    #[test]
    fn equality_ignores_layout() {
        let t = Topology::dynamic(1).unwrap();
        let mut a = Configuration::empty(&t);
        let mut b = Configuration::empty(&t);
        a.set(&s(&[2]), SiteState::SLEEPING).unwrap();
        b.set(&s(&[2]), SiteState::SLEEPING).unwrap();
        b.add_active(&s(&[90]), 1).unwrap();
        b.set(&s(&[90]), SiteState::EMPTY).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pgm_snapshot() {
        let t = Topology::wired_box(&[3, 2]).unwrap();
        let mut c = Configuration::empty(&t);
        c.set(&s(&[1, 1]), SiteState::SLEEPING).unwrap();
        c.add_active(&s(&[3, 2]), 2).unwrap();
        assert_eq!(c.to_pgm(&[]).unwrap(), "P2\n3 2\n255\n255 0 0\n0 0 128\n");

        let line = Topology::torus(&[4]).unwrap();
        let mut c = Configuration::empty(&line);
        c.set(&s(&[1]), SiteState::SLEEPING).unwrap();
        assert_eq!(c.to_pgm(&[]).unwrap(), "P2\n4 1\n255\n0 255 0 0\n");

        let cube = Topology::torus(&[3, 3, 3]).unwrap();
        let mut c = Configuration::empty(&cube);
        c.set(&s(&[0, 2, 1]), SiteState::SLEEPING).unwrap();
        assert!(c.to_pgm(&[]).is_err());
        assert_eq!(c.to_pgm(&[1]).unwrap(), "P2\n3 3\n255\n0 0 0\n0 0 0\n255 0 0\n");
    }

    #[test]
    fn torus_indicator_wraps() {
        let t = Topology::torus(&[4, 4]).unwrap();
        let mut c = Configuration::empty(&t);
        c.set(&s(&[0, 0]), SiteState::SLEEPING).unwrap();
        let ind = c.sleeper_indicator(&[-1, -1], &[2, 2]);
        assert_eq!(ind, vec![0, 0, 0, 1]);
    }
}
