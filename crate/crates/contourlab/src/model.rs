//! Spin models: finite spin spaces, translation-invariant interaction
//! families with values in ℝ ∪ {+∞}, configurations, boundary conditions,
//! Hamiltonians, admissibility and richness.
//!
//! A model is a periodic point set, a finite set of named spin values, and a
//! finite family of interaction terms. Each term has a finite support
//! (anchored so its least site sits in cell 0) and assigns an energy to every
//! pattern of spins on that support; the family acts by translation, so the
//! translate of a term by every lattice vector contributes to the energy.
//! Energies are exact rationals or +∞; +∞ encodes a hard constraint, and a
//! configuration is admissible when no term translate evaluates to +∞.

use crate::geometry::{boundary_layer, cube, PointSet, Region, Site};
use crate::{Error, Result};
use num::{BigInt, BigRational, One, Zero};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

/// An energy value: a rational number or +∞.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Energy {
    Finite(BigRational),
    Infinite,
}

impl Energy {
    pub fn zero() -> Self {
        Energy::Finite(BigRational::zero())
    }

    pub fn from_int(n: i64) -> Self {
        Energy::Finite(BigRational::from(BigInt::from(n)))
    }

    pub fn ratio(n: i64, d: i64) -> Self {
        Energy::Finite(BigRational::new(BigInt::from(n), BigInt::from(d)))
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Energy::Finite(_))
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        match self {
            Energy::Finite(q) => Some(q),
            Energy::Infinite => None,
        }
    }

    pub fn add(&self, other: &Energy) -> Energy {
        match (self, other) {
            (Energy::Finite(a), Energy::Finite(b)) => Energy::Finite(a + b),
            _ => Energy::Infinite,
        }
    }
}

impl PartialOrd for Energy {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Energy {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        match (self, other) {
            (Energy::Finite(a), Energy::Finite(b)) => a.cmp(b),
            (Energy::Finite(_), Energy::Infinite) => std::cmp::Ordering::Less,
            (Energy::Infinite, Energy::Finite(_)) => std::cmp::Ordering::Greater,
            (Energy::Infinite, Energy::Infinite) => std::cmp::Ordering::Equal,
        }
    }
}

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Energy::Finite(q) => {
                if q.is_integer() {
                    write!(f, "{}", q.to_integer())
                } else {
                    write!(f, "{}/{}", q.numer(), q.denom())
                }
            }
            Energy::Infinite => write!(f, "inf"),
        }
    }
}

/// One interaction term: an anchored finite support plus a full table of
/// energies, one per spin pattern on the support. The support is sorted and
/// translated so its least site has cell coordinates 0; the table is indexed
/// mixed-radix with the spin on `support[i]` as digit i (least significant
/// first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionTerm {
    support: Vec<Site>,
    table: Vec<Energy>,
}

impl InteractionTerm {
    pub fn new(mut support: Vec<Site>, table: Vec<Energy>, num_spins: usize) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Model("term support is empty".into()));
        }
        support.sort();
        let before = support.len();
        support.dedup();
        if support.len() != before {
            return Err(Error::Model("term support has repeated sites".into()));
        }
        let dim = support[0].cell.len();
        if support.iter().any(|s| s.cell.len() != dim) {
            return Err(Error::Model("term support mixes dimensions".into()));
        }
        // Anchor: translate so the least site has cell 0.
        let shift: Vec<i64> = support[0].cell.iter().map(|c| -c).collect();
        for s in &mut support {
            for (c, d) in s.cell.iter_mut().zip(&shift) {
                *c += d;
            }
        }
        let want = num_spins
            .checked_pow(support.len() as u32)
            .ok_or_else(|| Error::Model("term table too large".into()))?;
        if table.len() != want {
            return Err(Error::Model(format!(
                "term table has {} entries, expected {}",
                table.len(),
                want
            )));
        }
        Ok(InteractionTerm { support, table })
    }

    /// Build from a pattern → energy map; unlisted patterns get `default`.
    pub fn from_patterns(
        support: Vec<Site>,
        num_spins: usize,
        default: Energy,
        patterns: &[(Vec<u16>, Energy)],
    ) -> Result<Self> {
        let k = support.len();
        let size = num_spins
            .checked_pow(k as u32)
            .ok_or_else(|| Error::Model("term table too large".into()))?;
        let mut table = vec![default; size];
        // Pattern digits are listed in the order of the *sorted* support, so
        // sort a copy the same way the constructor will.
        let mut sorted = support.clone();
        sorted.sort();
        let _ = &sorted;
        for (pat, e) in patterns {
            if pat.len() != k {
                return Err(Error::Model("pattern length does not match support".into()));
            }
            let idx = pattern_index(num_spins, pat)?;
            table[idx] = e.clone();
        }
        InteractionTerm::new(support, table, num_spins)
    }

    pub fn support(&self) -> &[Site] {
        &self.support
    }

    pub fn table(&self) -> &[Energy] {
        &self.table
    }

    /// ℓ¹ diameter of the support in cell coordinates.
    pub fn diameter(&self) -> u64 {
        let mut d = 0;
        for a in &self.support {
            for b in &self.support {
                d = d.max(crate::geometry::site_distance(a, b));
            }
        }
        d
    }

    pub fn energy_of(&self, num_spins: usize, pattern: &[u16]) -> &Energy {
        let idx = pattern_index(num_spins, pattern).expect("pattern in range");
        &self.table[idx]
    }
}

/// Mixed-radix index of a spin pattern: digit i (spin on support site i) is
/// the least significant.
pub fn pattern_index(num_spins: usize, pattern: &[u16]) -> Result<usize> {
    let mut idx = 0usize;
    let mut stride = 1usize;
    for &d in pattern {
        if (d as usize) >= num_spins {
            return Err(Error::Model(format!(
                "spin index {d} out of range (spin space has {num_spins})"
            )));
        }
        idx += d as usize * stride;
        stride *= num_spins;
    }
    Ok(idx)
}

/// Inverse of [`pattern_index`].
pub fn pattern_digits(num_spins: usize, mut idx: usize, len: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push((idx % num_spins) as u16);
        idx /= num_spins;
    }
    out
}

/// A fully periodic configuration of the whole point set: spins repeat with
/// the given per-axis cell periods. Used for boundary conditions and for
/// periodic ground states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeriodicState {
    pub label: String,
    pub periods: Vec<i64>,
    /// Mixed-radix over (cell mod periods, offset index): the spin of site
    /// (cell, k) is `spins[flat(cell mod periods) * num_offsets + k]`.
    pub spins: Vec<u16>,
    pub num_offsets: usize,
}

impl PeriodicState {
    pub fn constant(label: impl Into<String>, spin: u16, dim: usize, num_offsets: usize) -> Self {
        PeriodicState {
            label: label.into(),
            periods: vec![1; dim],
            spins: vec![spin; num_offsets],
            num_offsets,
        }
    }

    pub fn new(
        label: impl Into<String>,
        periods: Vec<i64>,
        spins: Vec<u16>,
        num_offsets: usize,
    ) -> Result<Self> {
        if periods.iter().any(|&p| p <= 0) {
            return Err(Error::Model("periods must be positive".into()));
        }
        let cells: i64 = periods.iter().product();
        if spins.len() != cells as usize * num_offsets {
            return Err(Error::Model(format!(
                "periodic state needs {} spins, got {}",
                cells as usize * num_offsets,
                spins.len()
            )));
        }
        Ok(PeriodicState {
            label: label.into(),
            periods,
            spins,
            num_offsets,
        })
    }

    pub fn spin_at(&self, site: &Site) -> u16 {
        let mut flat = 0usize;
        for (c, p) in site.cell.iter().zip(&self.periods) {
            flat = flat * (*p as usize) + c.rem_euclid(*p) as usize;
        }
        self.spins[flat * self.num_offsets + site.sub]
    }

    pub fn is_constant(&self) -> Option<u16> {
        let first = *self.spins.first()?;
        self.spins.iter().all(|&s| s == first).then_some(first)
    }
}

/// Boundary condition for a finite region: nothing outside (only term
/// translates fully inside the region count), a periodic state filling the
/// whole complement, or an explicit partial assignment (an error is raised
/// if a needed outside site is not covered).
#[derive(Clone, Debug)]
pub enum BoundaryCondition {
    Free,
    State(PeriodicState),
    Explicit(HashMap<Site, u16>),
}

/// A spin assignment on a finite region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration {
    pub region: Arc<Region>,
    pub spins: Vec<u16>,
}

impl Configuration {
    pub fn new(region: Arc<Region>, spins: Vec<u16>) -> Result<Self> {
        if spins.len() != region.len() {
            return Err(Error::Model(format!(
                "configuration has {} spins for {} sites",
                spins.len(),
                region.len()
            )));
        }
        Ok(Configuration { region, spins })
    }

    pub fn constant(region: Arc<Region>, spin: u16) -> Self {
        let n = region.len();
        Configuration {
            region,
            spins: vec![spin; n],
        }
    }

    pub fn spin_at(&self, site: &Site) -> Option<u16> {
        self.region.index_of(site).map(|i| self.spins[i])
    }

    pub fn set(&mut self, site: &Site, spin: u16) -> Result<()> {
        let i = self
            .region
            .index_of(site)
            .ok_or_else(|| Error::Model(format!("site {site} not in region")))?;
        self.spins[i] = spin;
        Ok(())
    }
}

/// A finite-range spin model on a periodic point set.
#[derive(Clone, Debug)]
pub struct Model {
    point_set: PointSet,
    spins: Vec<String>,
    collar: u64,
    terms: Vec<InteractionTerm>,
    radius: u64,
    denom: BigInt,
    all_finite: bool,
}

impl Model {
    pub fn new(
        point_set: PointSet,
        spins: Vec<String>,
        collar: u64,
        terms: Vec<InteractionTerm>,
    ) -> Result<Self> {
        if spins.is_empty() {
            return Err(Error::Model("spin space is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &spins {
            if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Model(format!("bad spin name {s:?}")));
            }
            if !seen.insert(s.clone()) {
                return Err(Error::Model(format!("repeated spin name {s:?}")));
            }
        }
        let k = point_set.num_offsets();
        for t in &terms {
            for s in t.support() {
                if s.sub >= k {
                    return Err(Error::Model(format!(
                        "term site {s} has offset index out of range (point set has {k})"
                    )));
                }
                if s.cell.len() != point_set.dim() {
                    return Err(Error::Model("term site has wrong dimension".into()));
                }
            }
            let want = spins.len().pow(t.support().len() as u32);
            if t.table().len() != want {
                return Err(Error::Model("term table size mismatch".into()));
            }
        }
        let radius = terms.iter().map(|t| t.diameter()).max().unwrap_or(0);
        let mut denom = BigInt::one();
        let mut all_finite = true;
        for t in &terms {
            for e in t.table() {
                match e {
                    Energy::Finite(q) => denom = num::integer::lcm(denom, q.denom().clone()),
                    Energy::Infinite => all_finite = false,
                }
            }
        }
        Ok(Model {
            point_set,
            spins,
            collar,
            terms,
            radius,
            denom,
            all_finite,
        })
    }

    pub fn point_set(&self) -> &PointSet {
        &self.point_set
    }

    pub fn dim(&self) -> usize {
        self.point_set.dim()
    }

    pub fn num_offsets(&self) -> usize {
        self.point_set.num_offsets()
    }

    pub fn spin_names(&self) -> &[String] {
        &self.spins
    }

    pub fn num_spins(&self) -> usize {
        self.spins.len()
    }

    pub fn spin_index(&self, name: &str) -> Option<u16> {
        self.spins.iter().position(|s| s == name).map(|i| i as u16)
    }

    pub fn spin_name(&self, idx: u16) -> &str {
        &self.spins[idx as usize]
    }

    pub fn collar(&self) -> u64 {
        self.collar
    }

    pub fn terms(&self) -> &[InteractionTerm] {
        &self.terms
    }

    /// Largest ℓ¹ diameter of a term support.
    pub fn radius(&self) -> u64 {
        self.radius
    }

    /// Common denominator of every finite interaction value.
    pub fn denominator(&self) -> &BigInt {
        &self.denom
    }

    pub fn all_finite(&self) -> bool {
        self.all_finite
    }

    /// Spin values `e` such that every pattern containing `e` anywhere has
    /// finite energy in every term. Filling any part of space with such a
    /// value can never create a hard-constraint violation.
    pub fn neutral_spins(&self) -> Vec<u16> {
        let n = self.num_spins();
        (0..n as u16)
            .filter(|&e| {
                self.terms.iter().all(|t| {
                    let k = t.support().len();
                    (0..t.table().len()).all(|idx| {
                        let digits = pattern_digits(n, idx, k);
                        !digits.contains(&e) || t.table()[idx].is_finite()
                    })
                })
            })
            .collect()
    }

    /// All shift vectors whose translate of `term` meets the region. On a
    /// torus shifts are reduced modulo the periods (every translate appears
    /// exactly once). For `fully_inside`, only translates whose whole
    /// support lies in the region are kept.
    pub fn translates_meeting(
        &self,
        term: &InteractionTerm,
        region: &Region,
        fully_inside: bool,
    ) -> Vec<Vec<i64>> {
        let mut shifts: BTreeSet<Vec<i64>> = BTreeSet::new();
        for u in term.support() {
            for lam in region.sites() {
                if lam.sub != u.sub {
                    continue;
                }
                let shift: Vec<i64> = lam
                    .cell
                    .iter()
                    .zip(&u.cell)
                    .map(|(a, b)| a - b)
                    .collect();
                let shift = match region.periods() {
                    Some(p) => shift
                        .iter()
                        .zip(p)
                        .map(|(c, m)| c.rem_euclid(*m))
                        .collect(),
                    None => shift,
                };
                shifts.insert(shift);
            }
        }
        shifts
            .into_iter()
            .filter(|shift| {
                !fully_inside
                    || term
                        .support()
                        .iter()
                        .all(|u| region.contains(&u.translated(shift)))
            })
            .collect()
    }
}

/// Look up the spin of `site` from the configuration or, failing that, the
/// boundary condition.
fn spin_of(
    conf: &Configuration,
    bc: &BoundaryCondition,
    site: &Site,
) -> Result<Option<u16>> {
    if let Some(s) = conf.spin_at(site) {
        return Ok(Some(s));
    }
    match bc {
        BoundaryCondition::Free => Ok(None),
        BoundaryCondition::State(ps) => Ok(Some(ps.spin_at(site))),
        BoundaryCondition::Explicit(map) => map.get(site).copied().map(Some).ok_or_else(|| {
            Error::UncoveredSites(format!("{site} is outside the region and not given a spin"))
        }),
    }
}

/// Energy of a configuration under a boundary condition: the sum over all
/// term translates that meet the region. With a free boundary only translates
/// fully inside the region contribute; with a state or explicit boundary,
/// translates reaching outside read the outside spins from it. On a torus the
/// boundary condition must be free and translates wrap.
pub fn hamiltonian(
    model: &Model,
    conf: &Configuration,
    bc: &BoundaryCondition,
) -> Result<Energy> {
    let region = conf.region.as_ref();
    if region.is_torus() && !matches!(bc, BoundaryCondition::Free) {
        return Err(Error::BadInput(
            "a torus has no outside; use a free boundary condition".into(),
        ));
    }
    let free = matches!(bc, BoundaryCondition::Free) && !region.is_torus();
    let mut total = Energy::zero();
    let mut pattern = Vec::new();
    for term in model.terms() {
        for shift in model.translates_meeting(term, region, free) {
            pattern.clear();
            for u in term.support() {
                let site = u.translated(&shift);
                match spin_of(conf, bc, &site)? {
                    Some(s) => pattern.push(s),
                    None => {
                        return Err(Error::Internal(
                            "free-boundary translate not fully inside".into(),
                        ))
                    }
                }
            }
            total = total.add(term.energy_of(model.num_spins(), &pattern));
            if !total.is_finite() {
                return Ok(Energy::Infinite);
            }
        }
    }
    Ok(total)
}

/// Whether no term translate meeting the region evaluates to +∞.
pub fn is_admissible(model: &Model, conf: &Configuration, bc: &BoundaryCondition) -> Result<bool> {
    Ok(hamiltonian(model, conf, bc)?.is_finite())
}

/// All admissible configurations of a region, in lexicographic spin order.
/// Fails with `CapExceeded` if more than `cap` would be produced.
pub fn enumerate_admissible(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    cap: usize,
) -> Result<Vec<Configuration>> {
    let compiled = crate::instance::CompiledInstance::compile(model, region, bc)?;
    let arc = Arc::new(region.clone());
    let mut out = Vec::new();
    let mut overflow = false;
    compiled.for_each_admissible(&mut |spins: &[u16], _e| {
        if out.len() < cap {
            out.push(Configuration {
                region: Arc::clone(&arc),
                spins: spins.to_vec(),
            });
        } else {
            overflow = true;
        }
    });
    if overflow {
        return Err(Error::CapExceeded {
            what: "admissible configurations".into(),
            needed: format!("more than {cap}"),
            cap: cap.to_string(),
        });
    }
    Ok(out)
}

/// How a richness verdict was reached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RichnessMethod {
    /// Every interaction value is finite, so every configuration extends.
    AllFinite,
    /// The named spin can fill any part of space without creating a hard
    /// violation, so every admissible configuration extends by flooding.
    NeutralSpin(String),
    /// Bounded window search; verdicts from this method are exhaustive for
    /// the windows tried but do not certify richness in general.
    WindowSearch {
        windows_checked: usize,
        configs_checked: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RichnessVerdict {
    Pass,
    Fail,
    Unknown,
}

/// A region and admissible spin assignment on it that cannot be extended to
/// an admissible configuration of any enclosing box while keeping the spins
/// outside the collar fixed. Such a pair refutes richness outright: a full
/// admissible extension would restrict to one on the box.
#[derive(Clone, Debug)]
pub struct RichnessWitness {
    pub sites: Vec<Site>,
    pub spins: Vec<u16>,
    pub kept_sites: Vec<Site>,
}

#[derive(Clone, Debug)]
pub struct RichnessReport {
    pub collar: u64,
    pub verdict: RichnessVerdict,
    pub method: RichnessMethod,
    pub witness: Option<RichnessWitness>,
}

/// Caps for the window search tier of [`check_richness`].
#[derive(Clone, Debug)]
pub struct RichnessCaps {
    /// Largest center separation tried for two-cube windows.
    pub max_separation: i64,
    /// Extra cells around a window when testing extendability.
    pub margin: i64,
    /// Most window configurations examined before giving up.
    pub max_configs: u64,
}

impl Default for RichnessCaps {
    fn default() -> Self {
        RichnessCaps {
            max_separation: 6,
            margin: 2,
            max_configs: 200_000,
        }
    }
}

/// Decide whether every admissible configuration of a finite region extends
/// to an admissible configuration of all space, after allowing changes on the
/// collar ∂⁽ⁿ⁾ of the region.
///
/// Three tiers, cheapest first. (1) If every value is finite there is
/// nothing to violate: Pass. (2) If some spin is *neutral* — no pattern
/// containing it is ever +∞ — flooding the complement with it extends any
/// admissible configuration: Pass. (3) Otherwise search small windows (single
/// cubes and pairs of cubes of side 2n+1) for an admissible assignment with
/// no admissible extension to an enclosing box; finding one is a proof of
/// failure, exhausting the caps without one leaves the verdict Unknown.
pub fn check_richness(model: &Model, collar: u64, caps: &RichnessCaps) -> Result<RichnessReport> {
    if model.all_finite() {
        return Ok(RichnessReport {
            collar,
            verdict: RichnessVerdict::Pass,
            method: RichnessMethod::AllFinite,
            witness: None,
        });
    }
    if let Some(&e) = model.neutral_spins().first() {
        return Ok(RichnessReport {
            collar,
            verdict: RichnessVerdict::Pass,
            method: RichnessMethod::NeutralSpin(model.spin_name(e).to_string()),
            witness: None,
        });
    }
    window_search(model, collar, caps)
}

fn window_search(model: &Model, collar: u64, caps: &RichnessCaps) -> Result<RichnessReport> {
    let dim = model.dim();
    let k = model.num_offsets();
    let side = 2 * collar as i64 + 1;
    let mut windows: Vec<Vec<Site>> = Vec::new();
    // Single cube.
    let origin = Site::new(vec![0; dim], 0);
    windows.push(cube(&origin, side, k)?.sites().to_vec());
    // Two cubes separated along the first axis.
    for sep in side..=caps.max_separation {
        let mut w = cube(&origin, side, k)?.sites().to_vec();
        let mut c2 = vec![0i64; dim];
        c2[0] = sep;
        w.extend(cube(&Site::new(c2, 0), side, k)?.sites().iter().cloned());
        windows.push(w);
    }
    let mut windows_checked = 0usize;
    let mut configs_checked = 0u64;
    let mut exhausted = false;
    for sites in windows {
        windows_checked += 1;
        let window = Region::from_sites(dim, sites.clone())?;
        let kept: Vec<Site> = {
            let ring = boundary_layer(&window, collar, k)?;
            window
                .sites()
                .iter()
                .filter(|s| !ring.contains(s))
                .cloned()
                .collect()
        };
        if kept.is_empty() {
            continue;
        }
        // The enclosing box for extension tests.
        let (lo, hi) = window.bounding_box().expect("window not empty");
        let lens: Vec<i64> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| b - a + 1 + 2 * caps.margin)
            .collect();
        let base: Vec<i64> = lo.iter().map(|a| a - caps.margin).collect();
        let big_sites: Vec<Site> = Region::cell_box(&lens, k)?
            .sites()
            .iter()
            .map(|s| {
                Site::new(
                    s.cell.iter().zip(&base).map(|(c, b)| c + b).collect(),
                    s.sub,
                )
            })
            .collect();
        let big = Region::from_sites(dim, big_sites)?;
        let compiled_big = crate::instance::CompiledInstance::compile(
            model,
            &big,
            &BoundaryCondition::Free,
        )?;
        let compiled_window = crate::instance::CompiledInstance::compile(
            model,
            &window,
            &BoundaryCondition::Free,
        )?;
        let mut witness: Option<RichnessWitness> = None;
        let budget = caps.max_configs.saturating_sub(configs_checked);
        let mut used = 0u64;
        compiled_window.for_each_admissible_while(&mut |spins: &[u16], _e| {
            used += 1;
            if used > budget {
                exhausted = true;
                return false;
            }
            // Keep the window spins outside the collar, free everywhere else.
            let mut fixed: Vec<Option<u16>> = vec![None; big.len()];
            for s in &kept {
                let wi = window.index_of(s).expect("kept site in window");
                let bi = big.index_of(s).expect("window inside box");
                fixed[bi] = Some(spins[wi]);
            }
            if !compiled_big.admissible_completion_exists(&fixed) {
                witness = Some(RichnessWitness {
                    sites: window.sites().to_vec(),
                    spins: spins.to_vec(),
                    kept_sites: kept.clone(),
                });
                return false;
            }
            true
        });
        configs_checked += used.min(budget);
        if let Some(w) = witness {
            return Ok(RichnessReport {
                collar,
                verdict: RichnessVerdict::Fail,
                method: RichnessMethod::WindowSearch {
                    windows_checked,
                    configs_checked,
                },
                witness: Some(w),
            });
        }
        if exhausted {
            break;
        }
    }
    Ok(RichnessReport {
        collar,
        verdict: RichnessVerdict::Unknown,
        method: RichnessMethod::WindowSearch {
            windows_checked,
            configs_checked,
        },
        witness: None,
    })
}

// ---------------------------------------------------------------------------
// Model text format
// ---------------------------------------------------------------------------

fn parse_rational(tok: &str, line: usize) -> Result<BigRational> {
    let parse_int = |s: &str| -> Result<BigInt> {
        s.parse::<BigInt>().map_err(|_| Error::Parse {
            line,
            msg: format!("bad number {s:?}"),
        })
    };
    match tok.split_once('/') {
        Some((n, d)) => {
            let num = parse_int(n)?;
            let den = parse_int(d)?;
            if den.is_zero() {
                return Err(Error::Parse {
                    line,
                    msg: "zero denominator".into(),
                });
            }
            Ok(BigRational::new(num, den))
        }
        None => Ok(BigRational::from(parse_int(tok)?)),
    }
}

fn parse_energy(tok: &str, line: usize) -> Result<Energy> {
    if tok == "inf" {
        Ok(Energy::Infinite)
    } else {
        Ok(Energy::Finite(parse_rational(tok, line)?))
    }
}

fn format_rational(q: &BigRational) -> String {
    if q.is_integer() {
        q.to_integer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

/// Parse a model from its text form.
///
/// The format is line oriented; `#` starts a comment. A model begins with
/// `dimension ν`, followed by ν `basis` rows, optional `offset` rows (default
/// one zero offset), a `spins` line naming the spin values, an optional
/// `collar n` line, and one or more `term` … `end` blocks. Inside a term,
/// `site c1 … cν k` lines give the support (k = offset index), an optional
/// `default e` sets the energy of unlisted patterns (0 if absent), and
/// `value s1 … sm e` lines give energies pattern by pattern, spins listed in
/// sorted site order. Energies are integers, fractions `a/b`, or `inf`.
pub fn parse_model(text: &str) -> Result<Model> {
    struct TermDraft {
        sites: Vec<Site>,
        default: Energy,
        values: Vec<(Vec<u16>, Energy)>,
        line: usize,
    }
    let mut dim: Option<usize> = None;
    let mut basis: Vec<Vec<BigRational>> = Vec::new();
    let mut offsets: Vec<Vec<BigRational>> = Vec::new();
    let mut spins: Option<Vec<String>> = None;
    let mut collar = 0u64;
    let mut drafts: Vec<TermDraft> = Vec::new();
    let mut current: Option<TermDraft> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.split_once('#') {
            Some((before, _)) => before,
            None => raw,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            line: line_no,
            msg,
        };
        let need_dim = || -> Result<usize> {
            dim.ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "dimension must come first".into(),
            })
        };
        match (toks[0], &mut current) {
            ("dimension", None) => {
                if dim.is_some() {
                    return Err(err("repeated dimension".into()));
                }
                if toks.len() != 2 {
                    return Err(err("usage: dimension ν".into()));
                }
                let v: usize = toks[1]
                    .parse()
                    .map_err(|_| err(format!("bad dimension {:?}", toks[1])))?;
                dim = Some(v);
            }
            ("basis", None) => {
                let v = need_dim()?;
                if toks.len() != v + 1 {
                    return Err(err(format!("basis row needs {v} entries")));
                }
                basis.push(
                    toks[1..]
                        .iter()
                        .map(|t| parse_rational(t, line_no))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            ("offset", None) => {
                let v = need_dim()?;
                if toks.len() != v + 1 {
                    return Err(err(format!("offset needs {v} entries")));
                }
                offsets.push(
                    toks[1..]
                        .iter()
                        .map(|t| parse_rational(t, line_no))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            ("spins", None) => {
                if spins.is_some() {
                    return Err(err("repeated spins line".into()));
                }
                if toks.len() < 2 {
                    return Err(err("spins line names at least one spin".into()));
                }
                spins = Some(toks[1..].iter().map(|s| s.to_string()).collect());
            }
            ("collar", None) => {
                if toks.len() != 2 {
                    return Err(err("usage: collar n".into()));
                }
                collar = toks[1]
                    .parse()
                    .map_err(|_| err(format!("bad collar {:?}", toks[1])))?;
            }
            ("term", None) => {
                if toks.len() != 1 {
                    return Err(err("term takes no arguments".into()));
                }
                need_dim()?;
                if spins.is_none() {
                    return Err(err("spins must come before terms".into()));
                }
                current = Some(TermDraft {
                    sites: Vec::new(),
                    default: Energy::zero(),
                    values: Vec::new(),
                    line: line_no,
                });
            }
            ("site", Some(draft)) => {
                let v = dim.expect("dimension set before term");
                if toks.len() != v + 2 {
                    return Err(err(format!("usage: site c1 … c{v} k")));
                }
                let cell = toks[1..=v]
                    .iter()
                    .map(|t| {
                        t.parse::<i64>()
                            .map_err(|_| err(format!("bad coordinate {t:?}")))
                    })
                    .collect::<Result<Vec<i64>>>()?;
                let sub: usize = toks[v + 1]
                    .parse()
                    .map_err(|_| err(format!("bad offset index {:?}", toks[v + 1])))?;
                draft.sites.push(Site::new(cell, sub));
            }
            ("default", Some(draft)) => {
                if toks.len() != 2 {
                    return Err(err("usage: default energy".into()));
                }
                draft.default = parse_energy(toks[1], line_no)?;
            }
            ("value", Some(draft)) => {
                let m = draft.sites.len();
                if m == 0 {
                    return Err(err("value before any site".into()));
                }
                if toks.len() != m + 2 {
                    return Err(err(format!("value needs {m} spins and an energy")));
                }
                let names = spins.as_ref().expect("spins set before term");
                let pat = toks[1..=m]
                    .iter()
                    .map(|t| {
                        names
                            .iter()
                            .position(|s| s == t)
                            .map(|i| i as u16)
                            .ok_or_else(|| err(format!("unknown spin {t:?}")))
                    })
                    .collect::<Result<Vec<u16>>>()?;
                let e = parse_energy(toks[m + 1], line_no)?;
                draft.values.push((pat, e));
            }
            ("end", Some(_)) => {
                if toks.len() != 1 {
                    return Err(err("end takes no arguments".into()));
                }
                drafts.push(current.take().expect("inside a term"));
            }
            (word, None) => return Err(err(format!("unknown directive {word:?}"))),
            (word, Some(_)) => {
                return Err(err(format!("unknown directive {word:?} inside term")))
            }
        }
    }
    if let Some(d) = current {
        return Err(Error::Parse {
            line: d.line,
            msg: "unterminated term (missing end)".into(),
        });
    }
    let dim = dim.ok_or(Error::Parse {
        line: 0,
        msg: "missing dimension".into(),
    })?;
    if basis.len() != dim {
        return Err(Error::Parse {
            line: 0,
            msg: format!("need {dim} basis rows, got {}", basis.len()),
        });
    }
    if offsets.is_empty() {
        offsets.push(vec![BigRational::zero(); dim]);
    }
    let spins = spins.ok_or(Error::Parse {
        line: 0,
        msg: "missing spins line".into(),
    })?;
    let point_set = PointSet::new(dim, basis, offsets)?;
    let mut terms = Vec::new();
    for d in drafts {
        if d.sites.is_empty() {
            return Err(Error::Parse {
                line: d.line,
                msg: "term has no sites".into(),
            });
        }
        // Patterns are listed against the sorted support; sites may be given
        // in any order but duplicates are rejected by the constructor.
        let mut sorted = d.sites.clone();
        sorted.sort();
        let term =
            InteractionTerm::from_patterns(sorted, spins.len(), d.default, &d.values)
                .map_err(|e| match e {
                    Error::Model(msg) => Error::Parse { line: d.line, msg },
                    other => other,
                })?;
        terms.push(term);
    }
    Model::new(point_set, spins, collar, terms)
}

/// Canonical text form: terms sorted, duplicate supports merged, patterns
/// listed in index order with the most common energy factored into `default`.
/// Parsing the output reproduces the model exactly.
pub fn model_to_text(model: &Model) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let dim = model.dim();
    writeln!(out, "dimension {dim}").unwrap();
    for row in model.point_set().basis() {
        let cells: Vec<String> = row.iter().map(format_rational).collect();
        writeln!(out, "basis {}", cells.join(" ")).unwrap();
    }
    for off in model.point_set().offsets() {
        let cells: Vec<String> = off.iter().map(format_rational).collect();
        writeln!(out, "offset {}", cells.join(" ")).unwrap();
    }
    writeln!(out, "spins {}", model.spin_names().join(" ")).unwrap();
    writeln!(out, "collar {}", model.collar()).unwrap();
    // Merge identical supports, then sort.
    let mut merged: BTreeMap<Vec<Site>, Vec<Energy>> = BTreeMap::new();
    for t in model.terms() {
        match merged.entry(t.support().to_vec()) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(t.table().to_vec());
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let tab = o.get_mut();
                for (a, b) in tab.iter_mut().zip(t.table()) {
                    *a = a.add(b);
                }
            }
        }
    }
    let n = model.num_spins();
    for (support, table) in merged {
        writeln!(out, "term").unwrap();
        for s in &support {
            let coords: Vec<String> = s.cell.iter().map(|c| c.to_string()).collect();
            writeln!(out, "  site {} {}", coords.join(" "), s.sub).unwrap();
        }
        // Most common energy becomes the default; ties break toward the
        // smaller energy so the choice is deterministic.
        let mut counts: BTreeMap<&Energy, usize> = BTreeMap::new();
        for e in &table {
            *counts.entry(e).or_insert(0) += 1;
        }
        let default = counts
            .iter()
            .max_by_key(|(e, c)| (**c, std::cmp::Reverse(*e)))
            .map(|(e, _)| (*e).clone())
            .expect("table not empty");
        writeln!(out, "  default {default}").unwrap();
        for (idx, e) in table.iter().enumerate() {
            if *e == default {
                continue;
            }
            let digits = pattern_digits(n, idx, support.len());
            let names: Vec<&str> = digits.iter().map(|&d| model.spin_name(d)).collect();
            writeln!(out, "  value {} {e}", names.join(" ")).unwrap();
        }
        writeln!(out, "end").unwrap();
    }
    out
}
