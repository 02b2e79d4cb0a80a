//! Brute-force oracles: exact partition histograms, log partition functions,
//! Gibbs probabilities, marginals, expectations of additive observables, and
//! the volume/boundary partition-function bounds a rich model must satisfy.
//!
//! Everything here is ground truth for the rest of the crate. Results are
//! exact integer histograms over exact rational energies, summed in high
//! precision where a real number is needed. The one documented exception is
//! the transfer-matrix trace route of [`z_exact`], used for nearest-neighbour
//! tori too large to enumerate; it is f64 but carries only a few ulps of
//! summation error because every weight is positive.
//!
//! Setting the environment variable `CONTOURLAB_CACHE` to a directory caches
//! [`z_exact`] reports across runs, keyed by the model text, region, boundary
//! condition and β. Cache problems of any kind fall back to recomputation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use astro_float::BigFloat;
use num::{BigInt, BigRational, ToPrimitive};
use sha2::{Digest, Sha256};

use crate::geometry::{boundary_layer, Region, Site};
use crate::hp::{self, Hp};
use crate::instance::CompiledInstance;
use crate::model::{
    check_richness, enumerate_admissible, model_to_text, BoundaryCondition, Model, PeriodicState,
    RichnessCaps, RichnessReport,
};
use crate::transfer::{self, DpOpts};
use crate::{Error, Result};

/// Most search steps a single brute-force enumeration may take.
pub(crate) const ORACLE_STEP_CAP: u64 = 1 << 28;

/// Most admissible boundary patterns [`bounds_check`] enumerates per window.
const MAX_BOUNDARY_PATTERNS: usize = 1 << 17;

/// First line of every cache record; bump to invalidate old caches.
const CACHE_HEADER: &str = "contourlab zexact cache v1";

/// The exact multiset of admissible energies on a region: `counts[e]`
/// configurations have energy `e / denominator`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnergyHistogram {
    /// Common denominator converting the integer keys back to rationals.
    pub denominator: BigInt,
    /// Admissible-configuration count per scaled energy.
    pub counts: BTreeMap<i64, u128>,
}

impl EnergyHistogram {
    /// Number of admissible configurations.
    pub fn total(&self) -> u128 {
        self.counts.values().sum()
    }

    /// True when no configuration is admissible (the partition function is 0).
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// The histogram with energies as exact rationals, independent of the
    /// denominator convention — the right form for comparing histograms of
    /// different models (a source model and its block recode, say).
    pub fn rational_counts(&self) -> BTreeMap<BigRational, u128> {
        self.counts
            .iter()
            .map(|(&e, &c)| (BigRational::new(e.into(), self.denominator.clone()), c))
            .collect()
    }

    /// ln Σ counts·e^{−β·energy} in high precision.
    pub fn ln_z(&self, ctx: &mut Hp, beta: &BigRational) -> Result<BigFloat> {
        if self.counts.is_empty() {
            return Err(Error::BadInput(
                "no admissible configuration; the partition function is zero".into(),
            ));
        }
        ctx.ln_sum_exp_histogram(&self.counts, beta, &self.denominator)
    }

    /// The same sum in f64 (max-shifted, compensated); −∞ when empty. All
    /// terms are positive, so the relative error is a few ulps.
    pub fn ln_z_f64(&self, beta: &BigRational) -> f64 {
        if self.counts.is_empty() {
            return f64::NEG_INFINITY;
        }
        let b = beta.to_f64().unwrap_or(f64::NAN);
        let d = self.denominator.to_f64().unwrap_or(f64::NAN);
        let xs: Vec<f64> = self.counts.keys().map(|&e| -b * (e as f64) / d).collect();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (x, &c) in xs.iter().zip(self.counts.values()) {
            let term = (x - m).exp() * (c as f64);
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        m + sum.ln()
    }
}

fn reject_torus_bc(region: &Region, bc: &BoundaryCondition) -> Result<()> {
    if region.is_torus() && !matches!(bc, BoundaryCondition::Free) {
        return Err(Error::BadInput(
            "a torus has no outside; use a free boundary condition".into(),
        ));
    }
    Ok(())
}

/// The exact energy histogram of all admissible configurations of `region`
/// under `bc`. Runs the windowed sweep, so the cost is governed by the window
/// state count, not by the number of configurations.
pub fn energy_histogram(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
) -> Result<EnergyHistogram> {
    reject_torus_bc(region, bc)?;
    let ens = transfer::distribution(model, region, bc, &DpOpts::default())?;
    Ok(EnergyHistogram {
        counts: ens.total_counts(),
        denominator: ens.denominator,
    })
}

/// The energy histogram of the boundary-anchored ensemble: the `rings`
/// outermost layers of `region` are pinned to the boundary state's spins and
/// only the deeper sites fluctuate. This is the ensemble the contour
/// resummation reproduces, ring for ring.
pub fn frozen_collar_histogram(
    model: &Model,
    region: &Region,
    state: &PeriodicState,
    rings: u64,
) -> Result<EnergyHistogram> {
    let layer = boundary_layer(region, rings, model.num_offsets())?;
    let mut fixed = Vec::with_capacity(layer.len());
    for s in layer.sites() {
        let idx = region.index_of(s).ok_or_else(|| {
            Error::Internal("boundary layer produced a site outside its region".into())
        })?;
        fixed.push((idx, state.spin_at(s)));
    }
    let bc = BoundaryCondition::State(state.clone());
    let opts = DpOpts {
        fixed: &fixed,
        ..DpOpts::default()
    };
    let ens = transfer::distribution(model, region, &bc, &opts)?;
    Ok(EnergyHistogram {
        counts: ens.total_counts(),
        denominator: ens.denominator,
    })
}

/// How a partition sum was evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Exact integer energy histogram, summed in high precision.
    Histogram,
    /// f64 transfer-matrix trace (nearest-neighbour tori beyond enumeration).
    Trace,
}

impl Route {
    /// Short lowercase name for reports.
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Histogram => "histogram",
            Route::Trace => "trace",
        }
    }
}

/// A log-partition-function report.
#[derive(Clone, Debug)]
pub struct ZReport {
    /// ln Z; −∞ when no configuration is admissible.
    pub ln_z_f64: f64,
    /// Decimal rendering of ln Z, full precision on the histogram route.
    pub ln_z_text: String,
    /// High-precision value from a fresh histogram evaluation; `None` on the
    /// trace route and on cache hits (the decimal survives in `ln_z_text`).
    pub hp: Option<BigFloat>,
    /// Admissible-configuration count (histogram route only).
    pub count: Option<u128>,
    /// Which evaluation route produced the value.
    pub route: Route,
    /// Set when Z = 0: no configuration dresses this boundary, which a rich
    /// model never does.
    pub warning: Option<String>,
}

/// log Σ over admissible χ of e^{−β·H(χ|bc)}.
///
/// The histogram route is exact; tori whose exact sweep would exceed the
/// work caps fall back to the transfer trace when the model supports it
/// (2D, single offset, nearest-neighbour couplings). At β = 0 the value is
/// the log of the admissible-configuration count.
pub fn z_exact(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    beta: &BigRational,
) -> Result<ZReport> {
    reject_torus_bc(region, bc)?;
    let slot = cache_slot(model, region, bc, beta);
    if let Some(hit) = cache_read(&slot) {
        return Ok(hit);
    }
    let report = match energy_histogram(model, region, bc) {
        Ok(hist) => histogram_report(&hist, beta)?,
        Err(cap @ Error::CapExceeded { .. }) => {
            let traceable = region.is_torus() && matches!(bc, BoundaryCondition::Free);
            let traced = if traceable {
                let lens = region.periods().expect("torus region has periods");
                transfer::nn_torus_ln_z(model, lens, beta).ok()
            } else {
                None
            };
            match traced {
                Some(f) => ZReport {
                    ln_z_f64: f,
                    ln_z_text: format!("{f:.17e}"),
                    hp: None,
                    count: None,
                    route: Route::Trace,
                    warning: None,
                },
                None => return Err(cap),
            }
        }
        Err(e) => return Err(e),
    };
    cache_write(&slot, &report);
    Ok(report)
}

fn histogram_report(hist: &EnergyHistogram, beta: &BigRational) -> Result<ZReport> {
    if hist.is_empty() {
        return Ok(ZReport {
            ln_z_f64: f64::NEG_INFINITY,
            ln_z_text: "-inf".into(),
            hp: None,
            count: Some(0),
            route: Route::Histogram,
            warning: Some(
                "no admissible configuration: the partition function is zero \
                 (this boundary cannot be dressed; richness is violated)"
                    .into(),
            ),
        });
    }
    let mut ctx = Hp::new();
    let v = hist.ln_z(&mut ctx, beta)?;
    Ok(ZReport {
        ln_z_f64: hp::to_f64(&v),
        ln_z_text: format!("{v}"),
        hp: Some(v),
        count: Some(hist.total()),
        route: Route::Histogram,
        warning: None,
    })
}

fn cache_slot(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    beta: &BigRational,
) -> Option<PathBuf> {
    let dir = std::env::var_os("CONTOURLAB_CACHE")?;
    if dir.is_empty() {
        return None;
    }
    let mut pre = String::new();
    let _ = writeln!(pre, "{CACHE_HEADER}");
    let _ = writeln!(pre, "beta={beta}");
    let _ = writeln!(pre, "region={}", region_descriptor(region));
    let _ = writeln!(pre, "bc={}", bc_descriptor(bc));
    pre.push_str(&model_to_text(model));
    let hash = Sha256::digest(pre.as_bytes());
    let mut name = String::with_capacity(2 * hash.len() + 16);
    name.push_str("zexact-");
    for b in hash {
        let _ = write!(name, "{b:02x}");
    }
    name.push_str(".record");
    Some(PathBuf::from(dir).join(name))
}

fn region_descriptor(region: &Region) -> String {
    match region.periods() {
        Some(p) => {
            let mut s = String::from("torus");
            for l in p {
                let _ = write!(s, " {l}");
            }
            s
        }
        None => {
            let mut s = String::from("sites");
            for site in region.sites() {
                let _ = write!(s, " {site}");
            }
            s
        }
    }
}

fn bc_descriptor(bc: &BoundaryCondition) -> String {
    match bc {
        BoundaryCondition::Free => "free".into(),
        BoundaryCondition::State(ps) => format!(
            "state {} periods {:?} offsets {} spins {:?}",
            ps.label, ps.periods, ps.num_offsets, ps.spins
        ),
        BoundaryCondition::Explicit(map) => {
            let mut entries: Vec<(&Site, u16)> = map.iter().map(|(s, &v)| (s, v)).collect();
            entries.sort();
            let mut s = String::from("explicit");
            for (site, v) in entries {
                let _ = write!(s, " {site}:{v}");
            }
            s
        }
    }
}

fn cache_read(slot: &Option<PathBuf>) -> Option<ZReport> {
    let text = fs::read_to_string(slot.as_deref()?).ok()?;
    let mut lines = text.lines();
    if lines.next()? != CACHE_HEADER {
        return None;
    }
    let mut map: HashMap<&str, &str> = HashMap::new();
    for line in lines {
        let (k, v) = line.split_once('=')?;
        map.insert(k, v);
    }
    let route = match *map.get("route")? {
        "histogram" => Route::Histogram,
        "trace" => Route::Trace,
        _ => return None,
    };
    let count = match *map.get("count")? {
        "-" => None,
        c => Some(c.parse().ok()?),
    };
    let warning = match *map.get("warning")? {
        "" => None,
        w => Some(w.to_string()),
    };
    let bits: u64 = map.get("lnz_bits")?.parse().ok()?;
    Some(ZReport {
        ln_z_f64: f64::from_bits(bits),
        ln_z_text: map.get("lnz_text")?.to_string(),
        hp: None,
        count,
        route,
        warning,
    })
}

fn cache_write(slot: &Option<PathBuf>, report: &ZReport) {
    let Some(path) = slot else { return };
    let mut out = String::new();
    let _ = writeln!(out, "{CACHE_HEADER}");
    let _ = writeln!(out, "route={}", report.route.as_str());
    match report.count {
        Some(c) => {
            let _ = writeln!(out, "count={c}");
        }
        None => {
            let _ = writeln!(out, "count=-");
        }
    }
    let _ = writeln!(out, "warning={}", report.warning.as_deref().unwrap_or(""));
    let _ = writeln!(out, "lnz_bits={}", report.ln_z_f64.to_bits());
    let _ = writeln!(out, "lnz_text={}", report.ln_z_text);
    if let Some(dir) = path.parent() {
        let _ = fs::create_dir_all(dir);
    }
    let _ = fs::write(path, out);
}

/// A Gibbs-probability report with its exact count bookkeeping.
#[derive(Clone, Debug)]
pub struct ProbabilityReport {
    /// P[event], high precision.
    pub probability: BigFloat,
    /// The same probability in f64.
    pub probability_f64: f64,
    /// Admissible configurations satisfying the event.
    pub matching: u128,
    /// All admissible configurations.
    pub total: u128,
}

/// The probability of an event under the finite-volume Gibbs measure on
/// `region` with boundary condition `bc` at inverse temperature β, by
/// exhaustive enumeration. The event sees spins in `region.sites()` order.
pub fn gibbs_probability(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    beta: &BigRational,
    event: &mut dyn FnMut(&[u16]) -> bool,
) -> Result<ProbabilityReport> {
    reject_torus_bc(region, bc)?;
    let compiled = CompiledInstance::compile(model, region, bc)?;
    let mut all: BTreeMap<i64, u128> = BTreeMap::new();
    let mut hit: BTreeMap<i64, u128> = BTreeMap::new();
    let mut total = 0u128;
    let mut matching = 0u128;
    let fixed = vec![None; region.len()];
    let finished = compiled.walk(&fixed, ORACLE_STEP_CAP, &mut |spins, e| {
        *all.entry(e).or_insert(0) += 1;
        total += 1;
        if event(spins) {
            *hit.entry(e).or_insert(0) += 1;
            matching += 1;
        }
        true
    });
    if !finished {
        return Err(Error::CapExceeded {
            what: "brute-force Gibbs enumeration".into(),
            needed: format!("more than {ORACLE_STEP_CAP} search steps"),
            cap: ORACLE_STEP_CAP.to_string(),
        });
    }
    if total == 0 {
        return Err(Error::BadInput(
            "no admissible configuration; the Gibbs measure is undefined".into(),
        ));
    }
    let mut ctx = Hp::new();
    let probability = if matching == 0 {
        ctx.zero()
    } else {
        let ln_all = ctx.ln_sum_exp_histogram(&all, beta, model.denominator())?;
        let ln_hit = ctx.ln_sum_exp_histogram(&hit, beta, model.denominator())?;
        let d = ctx.sub(&ln_hit, &ln_all);
        ctx.exp(&d)
    };
    Ok(ProbabilityReport {
        probability_f64: hp::to_f64(&probability),
        probability,
        matching,
        total,
    })
}

/// One spin pattern at the observed sites, with its statistics.
#[derive(Clone, Debug)]
pub struct JointEntry {
    /// Spins at the observed sites, in the order they were given.
    pub pattern: Vec<u16>,
    /// Admissible configurations showing this pattern.
    pub count: u128,
    /// Probability of the pattern, high precision.
    pub probability: BigFloat,
    /// The same probability in f64.
    pub probability_f64: f64,
}

/// The exact joint distribution of the spins at a few chosen sites.
#[derive(Clone, Debug)]
pub struct JointDistribution {
    /// The observed sites.
    pub sites: Vec<Site>,
    /// All admissible configurations.
    pub total: u128,
    /// One entry per pattern that actually occurs, in pattern order.
    pub entries: Vec<JointEntry>,
}

/// The joint Gibbs distribution of the spins at `sites`, computed by the
/// marked windowed sweep — exact without enumerating configurations, so it
/// scales to regions far beyond `gibbs_probability`.
pub fn joint_distribution(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    beta: &BigRational,
    sites: &[Site],
) -> Result<JointDistribution> {
    reject_torus_bc(region, bc)?;
    let mut marks = Vec::with_capacity(sites.len());
    for s in sites {
        let canon = if region.is_torus() {
            region.wrap(s)
        } else {
            s.clone()
        };
        let idx = region
            .index_of(&canon)
            .ok_or_else(|| Error::BadInput(format!("observed site {s} is not in the region")))?;
        marks.push(idx);
    }
    let opts = DpOpts {
        marks: &marks,
        ..DpOpts::default()
    };
    let ens = transfer::distribution(model, region, bc, &opts)?;
    let total_hist = ens.total_counts();
    if total_hist.is_empty() {
        return Err(Error::BadInput(
            "no admissible configuration; the Gibbs measure is undefined".into(),
        ));
    }
    let mut ctx = Hp::new();
    let ln_all = ctx.ln_sum_exp_histogram(&total_hist, beta, &ens.denominator)?;
    let mut entries = Vec::new();
    let mut total = 0u128;
    for (pattern, dist) in &ens.by_marks {
        let count: u128 = dist.counts.values().sum();
        if count == 0 {
            continue;
        }
        total += count;
        let ln_pat = ctx.ln_sum_exp_histogram(&dist.counts, beta, &ens.denominator)?;
        let d = ctx.sub(&ln_pat, &ln_all);
        let probability = ctx.exp(&d);
        entries.push(JointEntry {
            pattern: pattern.clone(),
            count,
            probability_f64: hp::to_f64(&probability),
            probability,
        });
    }
    Ok(JointDistribution {
        sites: sites.to_vec(),
        total,
        entries,
    })
}

/// An expectation of an additive observable.
#[derive(Clone, Debug)]
pub struct ExpectationReport {
    /// The expectation, high precision.
    pub value: BigFloat,
    /// The same value in f64.
    pub value_f64: f64,
    /// All admissible configurations.
    pub count: u128,
}

/// ⟨Σ_i w(site_i, σ_i)⟩ — the Gibbs expectation of an integer-valued
/// additive observable, exact via per-energy first moments carried through
/// the windowed sweep. Rational-valued observables scale into this by
/// clearing denominators outside.
pub fn additive_expectation(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    beta: &BigRational,
    weight: &dyn Fn(&Site, u16) -> i64,
) -> Result<ExpectationReport> {
    reject_torus_bc(region, bc)?;
    let per_index = |i: usize, s: u16| weight(&region.sites()[i], s);
    let opts = DpOpts {
        moment: Some(&per_index),
        ..DpOpts::default()
    };
    let ens = transfer::distribution(model, region, bc, &opts)?;
    let counts = ens.total_counts();
    let moments = ens.total_moments();
    if counts.is_empty() {
        return Err(Error::BadInput(
            "no admissible configuration; the Gibbs measure is undefined".into(),
        ));
    }
    // ⟨M⟩ = Σ_e m_e·x^e / Σ_e c_e·x^e with x = e^{−β/D}; both sums may be
    // shifted by the lowest energy without changing the ratio, which keeps
    // every exponent in [−β·span/D, 0].
    let mut ctx = Hp::new();
    let e0 = *counts.keys().next().expect("non-empty histogram");
    let shifted_weight = |ctx: &mut Hp, e: i64| {
        let r = beta * BigRational::new(BigInt::from(e0 - e), ens.denominator.clone());
        let t = ctx.from_rational(&r);
        ctx.exp(&t)
    };
    let mut den = ctx.zero();
    for (&e, &c) in &counts {
        let x = shifted_weight(&mut ctx, e);
        let t = ctx.from_u128(c);
        let term = ctx.mul(&t, &x);
        den = ctx.add(&den, &term);
    }
    let mut num = ctx.zero();
    for (&e, &m) in &moments {
        if m == 0 {
            continue;
        }
        let x = shifted_weight(&mut ctx, e);
        let t = ctx.from_bigint(&BigInt::from(m));
        let term = ctx.mul(&t, &x);
        num = ctx.add(&num, &term);
    }
    let value = ctx.div(&num, &den);
    Ok(ExpectationReport {
        value_f64: hp::to_f64(&value),
        value,
        count: counts.values().sum(),
    })
}

/// A report on the partition-function bounds over cubic windows.
#[derive(Clone, Debug)]
pub struct BoundsReport {
    /// True when every instance had Z > 0, the volume constant is positive,
    /// and the boundary-ratio constant is finite.
    pub pass: bool,
    /// Measured volume constant: min over instances of ln Z/|Λ|. A rich
    /// model keeps this positive; −∞ records a vanished partition function.
    pub measured_c: f64,
    /// Measured boundary constant: max over windows of
    /// (max ln Z − min ln Z)/|∂Λ| across boundary patterns; ∞ when some
    /// pattern kills Z.
    pub ratio_constant: f64,
    /// Number of (window, boundary pattern) instances measured.
    pub instances: usize,
    /// Instances with no admissible configuration at all.
    pub zero_partitions: usize,
    /// The richness verdict for the model's declared collar, for context.
    pub richness: RichnessReport,
    /// A description of the first violating instance, when any.
    pub witness: Option<String>,
}

/// Measure the partition-function bounds behind the contour machinery: over
/// every cubic window with the given sides and every admissible pattern on
/// its interaction collar, ln Z/|Λ| must stay positive and the spread of
/// ln Z across patterns must be controlled by |∂Λ|.
///
/// Patterns need only be admissible on the collar itself; whether they
/// extend further out is not checked, because the boundaries a
/// richness-violating model fails to dress are exactly the interesting
/// instances.
pub fn bounds_check(model: &Model, beta: &BigRational, sides: &[i64]) -> Result<BoundsReport> {
    if sides.is_empty() {
        return Err(Error::BadInput(
            "bounds_check needs at least one window side".into(),
        ));
    }
    let richness = check_richness(model, model.collar(), &RichnessCaps::default())?;
    let mut measured_c = f64::INFINITY;
    let mut ratio_constant = 0.0f64;
    let mut instances = 0usize;
    let mut zero_partitions = 0usize;
    // A vanished partition function is the sharper witness; a merely
    // non-positive ln Z/|Λ| is kept only when no Z = 0 instance turns up.
    let mut zero_witness: Option<String> = None;
    let mut weak_witness: Option<String> = None;
    for &side in sides {
        if side < 1 {
            return Err(Error::BadInput("window sides must be positive".into()));
        }
        let lens = vec![side; model.dim()];
        let window = Region::cell_box(&lens, model.num_offsets())?;
        let collar = interaction_collar(model, &window)?;
        let patterns =
            enumerate_admissible(model, &collar, &BoundaryCondition::Free, MAX_BOUNDARY_PATTERNS)?;
        let volume = window.len() as f64;
        let boundary = boundary_layer(&window, 1, model.num_offsets())?.len() as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for pat in &patterns {
            let map: HashMap<Site, u16> = collar
                .sites()
                .iter()
                .cloned()
                .zip(pat.spins.iter().copied())
                .collect();
            let bc = BoundaryCondition::Explicit(map);
            let hist = energy_histogram(model, &window, &bc)?;
            instances += 1;
            if hist.is_empty() {
                zero_partitions += 1;
                measured_c = f64::NEG_INFINITY;
                if zero_witness.is_none() {
                    zero_witness = Some(format!(
                        "window {side}^{}, boundary {}: no admissible configuration (Z = 0)",
                        model.dim(),
                        describe_pattern(model, &pat.spins),
                    ));
                }
                continue;
            }
            let ln_z = hist.ln_z_f64(beta);
            let c = ln_z / volume;
            measured_c = measured_c.min(c);
            lo = lo.min(ln_z);
            hi = hi.max(ln_z);
            if c <= 0.0 && weak_witness.is_none() {
                weak_witness = Some(format!(
                    "window {side}^{}, boundary {}: ln Z/|Λ| = {c} ≤ 0",
                    model.dim(),
                    describe_pattern(model, &pat.spins),
                ));
            }
        }
        if hi > f64::NEG_INFINITY && lo < f64::INFINITY {
            ratio_constant = ratio_constant.max((hi - lo) / boundary);
        }
    }
    if instances == 0 {
        return Err(Error::BadInput(
            "no admissible boundary pattern on any window collar".into(),
        ));
    }
    if zero_partitions > 0 {
        ratio_constant = f64::INFINITY;
    }
    let pass = zero_partitions == 0 && measured_c > 0.0 && ratio_constant.is_finite();
    Ok(BoundsReport {
        pass,
        measured_c,
        ratio_constant,
        instances,
        zero_partitions,
        richness,
        witness: zero_witness.or(weak_witness),
    })
}

/// The exterior sites whose spins can influence the energy inside `region`:
/// every site of a term translate that meets the region but lies outside it.
fn interaction_collar(model: &Model, region: &Region) -> Result<Region> {
    let mut out: BTreeSet<Site> = BTreeSet::new();
    for term in model.terms() {
        for shift in model.translates_meeting(term, region, false) {
            for u in term.support() {
                let site = u.translated(&shift);
                if !region.contains(&site) {
                    out.insert(site);
                }
            }
        }
    }
    Region::from_sites(region.dim(), out.into_iter().collect())
}

fn describe_pattern(model: &Model, spins: &[u16]) -> String {
    let mut s = String::new();
    for (i, &v) in spins.iter().enumerate() {
        if i == 24 {
            s.push('…');
            break;
        }
        if i > 0 {
            s.push(' ');
        }
        s.push_str(model.spin_name(v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hamiltonian, parse_model, Configuration};
    use std::sync::Arc;

    fn ising() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n",
        )
        .unwrap()
    }

    fn hard_square() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins empty occ\ncollar 1\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 0\nvalue occ occ inf\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 0\nvalue occ occ inf\nend\n\
             term\nsite 0 0 0\ndefault 0\nvalue occ 1\nend\n",
        )
        .unwrap()
    }

    fn equal_neighbor() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins a b\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault inf\nvalue a a 0\nvalue b b 0\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault inf\nvalue a a 0\nvalue b b 0\nend\n",
        )
        .unwrap()
    }

    fn plus_state() -> PeriodicState {
        PeriodicState::constant("plus", 0, 2, 1)
    }

    fn beta(s: &str) -> BigRational {
        s.parse().unwrap()
    }

    #[test]
    fn beta_zero_counts_configurations() {
        let m = ising();
        let torus = Region::torus(&[2, 2], 1).unwrap();
        let r = z_exact(&m, &torus, &BoundaryCondition::Free, &beta("0")).unwrap();
        assert_eq!(r.count, Some(16));
        assert_eq!(r.route, Route::Histogram);
        assert!((r.ln_z_f64 - (16.0f64).ln()).abs() < 1e-14);

        // Hard squares on the 2×2 torus form a 4-cycle of exclusions:
        // 1 empty + 4 singles + 2 diagonal pairs = 7 admissible patterns.
        let hs = hard_square();
        let r = z_exact(&hs, &torus, &BoundaryCondition::Free, &beta("0")).unwrap();
        assert_eq!(r.count, Some(7));
        assert!((r.ln_z_f64 - (7.0f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn single_free_site_has_ln_two() {
        let m = ising();
        let one = Region::cell_box(&[1, 1], 1).unwrap();
        for b in ["0", "1", "7/2"] {
            let r = z_exact(&m, &one, &BoundaryCondition::Free, &beta(b)).unwrap();
            assert!((r.ln_z_f64 - (2.0f64).ln()).abs() < 1e-14, "beta {b}");
        }
    }

    #[test]
    fn histogram_route_matches_direct_hamiltonian_sum() {
        let m = ising();
        let region = Region::cell_box(&[3, 3], 1).unwrap();
        let bc = BoundaryCondition::State(plus_state());
        let b = beta("1");
        let r = z_exact(&m, &region, &bc, &b).unwrap();
        // Independent route: enumerate configurations, evaluate each energy
        // with the reference hamiltonian, and log-sum in f64.
        let arc = Arc::new(region.clone());
        let mut terms = Vec::new();
        for spins_idx in 0..1u32 << 9 {
            let spins: Vec<u16> = (0..9).map(|i| ((spins_idx >> i) & 1) as u16).collect();
            let conf = Configuration::new(Arc::clone(&arc), spins).unwrap();
            let e = hamiltonian(&m, &conf, &bc).unwrap();
            let e = e.as_rational().unwrap().to_f64().unwrap();
            terms.push(-e);
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let direct = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        assert!((r.ln_z_f64 - direct).abs() <= 1e-12 * direct.abs());
        assert_eq!(r.count, Some(512));
    }

    #[test]
    fn oversized_nn_torus_falls_back_to_the_trace() {
        let m = ising();
        let torus = Region::torus(&[14, 14], 1).unwrap();
        let r = z_exact(&m, &torus, &BoundaryCondition::Free, &beta("1")).unwrap();
        assert_eq!(r.route, Route::Trace);
        assert_eq!(r.count, None);
        // ln Z is pinched between the two ground states alone and a free
        // upper bound: 2e^{392} ≤ Z ≤ 2^{196}·e^{392}.
        assert!(r.ln_z_f64 > 392.0 && r.ln_z_f64 < 392.0 + 196.0 * (2.0f64).ln());

        // A next-nearest-neighbour term makes the torus untraceable, so the
        // cap error from the exact sweep must surface instead.
        let nnn = parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 2 0 0\ndefault 0\nvalue plus plus -1\nend\n",
        )
        .unwrap();
        let err = z_exact(&nnn, &torus, &BoundaryCondition::Free, &beta("1")).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { .. }), "{err}");
    }

    #[test]
    fn frozen_collar_keeps_only_the_deep_interior_free() {
        // On the 5×5 box with the two outermost rings pinned to plus, only
        // the center fluctuates: all-plus at −60 and one flip at −52.
        let m = ising();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        let hist = frozen_collar_histogram(&m, &region, &plus_state(), 2).unwrap();
        let expect: BTreeMap<i64, u128> = [(-60, 1), (-52, 1)].into_iter().collect();
        assert_eq!(hist.counts, expect);
        assert_eq!(hist.denominator, BigInt::from(1));
    }

    #[test]
    fn rational_counts_align_across_denominators() {
        let a = EnergyHistogram {
            denominator: BigInt::from(2),
            counts: [(1, 3u128), (4, 1)].into_iter().collect(),
        };
        let b = EnergyHistogram {
            denominator: BigInt::from(4),
            counts: [(2, 3u128), (8, 1)].into_iter().collect(),
        };
        assert_eq!(a.rational_counts(), b.rational_counts());
        assert_ne!(a.counts, b.counts);
    }

    #[test]
    fn probabilities_are_ratios_with_exact_counts() {
        let m = ising();
        let region = Region::cell_box(&[2, 2], 1).unwrap();
        let b = beta("0");
        let free = BoundaryCondition::Free;
        let mut always = |_: &[u16]| true;
        let r = gibbs_probability(&m, &region, &free, &b, &mut always).unwrap();
        assert_eq!(r.matching, r.total);
        assert!((r.probability_f64 - 1.0).abs() < 1e-30);

        // At β = 0 the measure is uniform: a single-site marginal is 1/2.
        let mut first_is_plus = |spins: &[u16]| spins[0] == 0;
        let r = gibbs_probability(&m, &region, &free, &b, &mut first_is_plus).unwrap();
        assert_eq!((r.matching, r.total), (8, 16));
        assert!((r.probability_f64 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn complementary_events_split_the_ensemble() {
        let m = ising();
        let region = Region::cell_box(&[3, 3], 1).unwrap();
        let bc = BoundaryCondition::State(plus_state());
        let b = beta("4/5");
        let center = region.index_of(&Site::at(&[1, 1])).unwrap();
        let mut ev = |spins: &[u16]| spins[center] == 0;
        let p = gibbs_probability(&m, &region, &bc, &b, &mut ev).unwrap();
        let mut ne = |spins: &[u16]| spins[center] != 0;
        let q = gibbs_probability(&m, &region, &bc, &b, &mut ne).unwrap();
        assert_eq!(p.matching + q.matching, p.total);
        assert!((p.probability_f64 + q.probability_f64 - 1.0).abs() < 1e-14);
        // Plus boundaries must pull the center towards plus at positive β.
        assert!(p.probability_f64 > 0.5);
    }

    #[test]
    fn joint_distribution_agrees_with_enumeration() {
        let m = ising();
        let region = Region::cell_box(&[3, 3], 1).unwrap();
        let bc = BoundaryCondition::State(plus_state());
        let b = beta("1");
        let sites = [Site::at(&[0, 0]), Site::at(&[2, 2])];
        let joint = joint_distribution(&m, &region, &bc, &b, &sites).unwrap();
        assert_eq!(joint.total, 512);
        let psum: f64 = joint.entries.iter().map(|e| e.probability_f64).sum();
        assert!((psum - 1.0).abs() < 1e-13);
        for entry in &joint.entries {
            let idx = [
                region.index_of(&sites[0]).unwrap(),
                region.index_of(&sites[1]).unwrap(),
            ];
            let want = entry.pattern.clone();
            let mut ev =
                |spins: &[u16]| spins[idx[0]] == want[0] && spins[idx[1]] == want[1];
            let direct = gibbs_probability(&m, &region, &bc, &b, &mut ev).unwrap();
            assert_eq!(direct.matching, entry.count);
            assert!(
                (direct.probability_f64 - entry.probability_f64).abs() < 1e-13,
                "pattern {:?}",
                entry.pattern
            );
        }
    }

    #[test]
    fn additive_expectation_matches_brute_force() {
        let m = ising();
        let region = Region::cell_box(&[3, 3], 1).unwrap();
        let b = beta("1");
        let magnet = |_: &Site, s: u16| if s == 0 { 1 } else { -1 };

        // Free boundary, zero field: the spin-flip symmetry kills ⟨M⟩.
        let free = additive_expectation(&m, &region, &BoundaryCondition::Free, &b, &magnet)
            .unwrap();
        assert!(free.value_f64.abs() < 1e-30, "{}", free.value_f64);

        // Plus boundary: positive, and equal to the enumerated ratio.
        let bc = BoundaryCondition::State(plus_state());
        let r = additive_expectation(&m, &region, &bc, &b, &magnet).unwrap();
        assert!(r.value_f64 > 0.0);
        let compiled = CompiledInstance::compile(&m, &region, &bc).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        compiled.for_each_admissible(&mut |spins, e| {
            let mag: i64 = spins.iter().map(|&s| if s == 0 { 1 } else { -1 }).sum();
            let w = (-(e as f64) - 52.0).exp(); // shift keeps exponents tame
            num += mag as f64 * w;
            den += w;
        });
        assert!((r.value_f64 - num / den).abs() < 1e-12 * (num / den).abs());
    }

    #[test]
    fn bounds_hold_for_soft_and_hard_core_models() {
        let b = beta("1");
        let r = bounds_check(&ising(), &b, &[3]).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.measured_c > 0.0);
        assert!(r.ratio_constant.is_finite());
        assert_eq!(r.zero_partitions, 0);
        assert_eq!(r.instances, 1 << 12);

        let r = bounds_check(&hard_square(), &b, &[3]).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.measured_c > 0.0);
    }

    #[test]
    fn equal_neighbor_violates_the_volume_bound() {
        // Mixed constant boundaries on different sides admit no configuration
        // at all, so ln Z/|Λ| collapses and the ratio bound blows up.
        let r = bounds_check(&equal_neighbor(), &beta("1"), &[3]).unwrap();
        assert!(!r.pass);
        assert_eq!(r.instances, 16);
        assert!(r.zero_partitions > 0);
        assert_eq!(r.measured_c, f64::NEG_INFINITY);
        assert_eq!(r.ratio_constant, f64::INFINITY);
        let w = r.witness.expect("a violating instance is described");
        assert!(w.contains("no admissible configuration"), "{w}");
    }

    #[test]
    fn cache_round_trips_and_survives_corruption() {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var("CONTOURLAB_CACHE", dir.path());
        let m = ising();
        let region = Region::cell_box(&[2, 2], 1).unwrap();
        let bc = BoundaryCondition::State(plus_state());
        let b = beta("3/2");
        let fresh = z_exact(&m, &region, &bc, &b).unwrap();
        assert!(fresh.hp.is_some());
        let slot = cache_slot(&m, &region, &bc, &b).expect("cache enabled");
        assert!(slot.exists(), "{}", slot.display());

        let cached = z_exact(&m, &region, &bc, &b).unwrap();
        assert!(cached.hp.is_none(), "cache hits carry the decimal only");
        assert_eq!(cached.ln_z_f64.to_bits(), fresh.ln_z_f64.to_bits());
        assert_eq!(cached.ln_z_text, fresh.ln_z_text);
        assert_eq!(cached.count, fresh.count);
        assert_eq!(cached.route, fresh.route);

        // A different β must not hit the same slot.
        let other = z_exact(&m, &region, &bc, &beta("2")).unwrap();
        assert!(other.hp.is_some());

        // Corruption is ignored and overwritten by recomputation.
        fs::write(&slot, "garbage").unwrap();
        let again = z_exact(&m, &region, &bc, &b).unwrap();
        assert!(again.hp.is_some());
        assert_eq!(again.ln_z_f64.to_bits(), fresh.ln_z_f64.to_bits());
        std::env::remove_var("CONTOURLAB_CACHE");
    }
}
