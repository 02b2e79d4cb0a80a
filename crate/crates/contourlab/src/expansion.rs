//! Resummation of partition functions over contour families, dressed contour
//! weights, truncated polymer series for free energies, phase-stability
//! reports, and a correlation-decay diagnostic.
//!
//! The resummation works on a finite box conditioned on its collar: the
//! boundary layer of depth `cube_size − 1` is pinned to the boundary state, so
//! every remaining admissible configuration decomposes into a compatible
//! family of contours and, conversely, every compatible family reconstructs
//! to exactly one configuration.  Summing `e^{−β(H(ground) + Σ Φ)}` over the
//! families therefore reproduces the collar-conditioned partition function
//! exactly, which the tests check against the brute-force histograms from
//! [`crate::exact`].

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use num::integer::Integer;
use num::{BigInt, BigRational, ToPrimitive};

use crate::contours::{
    contour_energy, enumerate_contours, extract_contours, peierls_estimate, reconstruct,
    supports_disconnected, Contour, ContourContext, ContourFamily,
};
use crate::exact::{energy_histogram, joint_distribution, EnergyHistogram, ORACLE_STEP_CAP};
use crate::geometry::{boundary_layer, Region, Site};
use crate::hp::{self, Hp};
use crate::instance::CompiledInstance;
use crate::model::{hamiltonian, BoundaryCondition, Configuration, Model, PeriodicState};
use crate::{Error, Result};
use astro_float::BigFloat;

/// Largest number of placed contours considered during family enumeration.
pub const MAX_FAMILY_POOL: usize = 512;

/// Largest number of compatible families enumerated for one region.
pub const MAX_FAMILIES: usize = 1 << 16;

/// Largest interior component evaluated exactly inside [`dressed_weight`].
pub const MAX_INTERIOR_SITES: usize = 26;

/// Default per-size growth bound for the number of connected support shapes
/// through a fixed site, used by [`convergence_threshold`].  4.65 bounds the
/// growth rate of connected cell sets in two dimensions.
pub const DEFAULT_SHAPE_GROWTH: f64 = 4.65;

/// Default free-energy tolerance (per site) for phase classification.
pub const DEFAULT_STABILITY_TOLERANCE: f64 = 1e-9;

/// Looks up the spin index of a ground-state label.
fn spin_of(ctx: &ContourContext, label: &str) -> Result<u16> {
    ctx.states()
        .iter()
        .find(|(l, _)| l == label)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::BadInput(format!("unknown ground-state label {label}")))
}

/// Rebuilds the constant periodic state behind a ground-state label.
fn state_of(ctx: &ContourContext, label: &str) -> Result<PeriodicState> {
    let spin = spin_of(ctx, label)?;
    Ok(PeriodicState::constant(
        label,
        spin,
        ctx.model().dim(),
        ctx.model().num_offsets(),
    ))
}

/// Sites of `region` that non-correct points may occupy: everything except
/// the outermost boundary ring.
fn allowed_zone(model: &Model, region: &Region) -> Result<Vec<Site>> {
    if region.is_torus() {
        return Err(Error::BadInput(
            "a torus has no boundary collar; contour resummation needs a finite box".into(),
        ));
    }
    let ring = boundary_layer(region, 1, model.num_offsets())?;
    let ring_set: HashSet<&Site> = ring.sites().iter().collect();
    Ok(region
        .sites()
        .iter()
        .filter(|s| !ring_set.contains(s))
        .cloned()
        .collect())
}

/// A pool of placeable contours in one region together with every compatible
/// family, kept as index sets into the pool.
struct FamilyEnsemble {
    region: Arc<Region>,
    pool: Vec<Contour>,
    energies: Vec<BigRational>,
    /// Families as ascending index lists; the first entry is always empty.
    families: Vec<Vec<usize>>,
}

/// Enumerates every compatible contour family with supports inside the
/// allowed zone of `region`, validating each candidate by reconstructing the
/// configuration and extracting it back.
fn enumerate_families(
    ctx: &ContourContext,
    region: &Region,
    external: &str,
) -> Result<FamilyEnsemble> {
    spin_of(ctx, external)?;
    let model = ctx.model();
    let zone = allowed_zone(model, region)?;
    let zone_set: HashSet<&Site> = zone.iter().collect();
    let kmax = zone.len();
    let arc = Arc::new(region.clone());

    let mut pool: Vec<Contour> = Vec::new();
    if kmax > 0 {
        if kmax > crate::contours::MAX_ENUMERATION_SUPPORT {
            return Err(Error::CapExceeded {
                what: "allowed-zone size for exhaustive family enumeration".into(),
                needed: kmax.to_string(),
                cap: crate::contours::MAX_ENUMERATION_SUPPORT.to_string(),
            });
        }
        for (label, _) in ctx.states() {
            for sub in 0..model.num_offsets() {
                let anchor = Site::new(vec![0; model.dim()], sub);
                for rep in enumerate_contours(ctx, label, kmax, &anchor)? {
                    for z in zone.iter().filter(|z| z.sub == sub) {
                        let placed = rep.translated(&z.cell);
                        if placed.support.iter().all(|s| zone_set.contains(s)) {
                            pool.push(placed);
                            if pool.len() > MAX_FAMILY_POOL {
                                return Err(Error::CapExceeded {
                                    what: "placed-contour pool".into(),
                                    needed: format!("more than {MAX_FAMILY_POOL}"),
                                    cap: MAX_FAMILY_POOL.to_string(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    // A contour whose surrounding label differs from the boundary state can
    // only appear nested inside a matching interior component of another
    // placed contour; drop the ones with no possible host.
    let keeps: Vec<bool> = pool
        .iter()
        .map(|c| {
            if c.sign == external {
                return true;
            }
            pool.iter().any(|d| {
                d.interiors.iter().any(|(label, sites)| {
                    label == &c.sign && {
                        let set: HashSet<&Site> = sites.iter().collect();
                        c.support.iter().all(|s| set.contains(s))
                    }
                })
            })
        })
        .collect();
    let mut pool: Vec<Contour> = pool
        .into_iter()
        .zip(keeps)
        .filter_map(|(c, k)| k.then_some(c))
        .collect();
    pool.sort();
    pool.dedup();

    let energies: Vec<BigRational> = pool
        .iter()
        .map(|c| contour_energy(ctx, c))
        .collect::<Result<_>>()?;
    let n = pool.len();
    let mut conflict = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if !supports_disconnected(&pool[i], &pool[j]) {
                conflict[i * n + j] = true;
                conflict[j * n + i] = true;
            }
        }
    }

    let mut families: Vec<Vec<usize>> = vec![Vec::new()];
    let mut chosen: Vec<usize> = Vec::new();
    descend(
        ctx,
        external,
        &arc,
        &pool,
        &conflict,
        0,
        &mut chosen,
        &mut families,
    )?;
    Ok(FamilyEnsemble {
        region: arc,
        pool,
        energies,
        families,
    })
}

/// Depth-first extension of the current index set by contours that stay
/// pairwise disconnected, keeping every candidate that survives the
/// reconstruct-and-extract round trip.
#[allow(clippy::too_many_arguments)]
fn descend(
    ctx: &ContourContext,
    external: &str,
    region: &Arc<Region>,
    pool: &[Contour],
    conflict: &[bool],
    start: usize,
    chosen: &mut Vec<usize>,
    families: &mut Vec<Vec<usize>>,
) -> Result<()> {
    let n = pool.len();
    for i in start..n {
        if chosen.iter().any(|&j| conflict[j * n + i]) {
            continue;
        }
        chosen.push(i);
        if family_is_valid(ctx, external, region, pool, chosen)? {
            families.push(chosen.clone());
            if families.len() > MAX_FAMILIES {
                return Err(Error::CapExceeded {
                    what: "compatible contour families".into(),
                    needed: format!("more than {MAX_FAMILIES}"),
                    cap: MAX_FAMILIES.to_string(),
                });
            }
        }
        descend(ctx, external, region, pool, conflict, i + 1, chosen, families)?;
        chosen.pop();
    }
    Ok(())
}

/// True when the chosen contours reconstruct to a configuration that
/// extracts back to exactly the same family.
fn family_is_valid(
    ctx: &ContourContext,
    external: &str,
    region: &Arc<Region>,
    pool: &[Contour],
    chosen: &[usize],
) -> Result<bool> {
    let contours: Vec<Contour> = chosen.iter().map(|&i| pool[i].clone()).collect();
    let family = ContourFamily {
        region: Arc::clone(region),
        external: external.to_string(),
        contours: contours.clone(),
    };
    let chi = match reconstruct(ctx, &family) {
        Ok(chi) => chi,
        Err(_) => return Ok(false),
    };
    let back = match extract_contours(ctx, &chi, external) {
        Ok(f) => f,
        Err(_) => return Ok(false),
    };
    let mut got = back.contours;
    got.sort();
    Ok(got == contours)
}

/// Builds an exact exponent histogram from rational energies with counts.
fn histogram_from_rationals(entries: &BTreeMap<BigRational, u128>) -> Result<EnergyHistogram> {
    let mut denominator = BigInt::from(1);
    for e in entries.keys() {
        denominator = denominator.lcm(e.denom());
    }
    let scale = BigRational::from(denominator.clone());
    let mut counts: BTreeMap<i64, u128> = BTreeMap::new();
    for (e, c) in entries {
        let key = (e * &scale).to_integer().to_i64().ok_or_else(|| {
            Error::Internal("an energy exponent overflows the histogram key range".into())
        })?;
        *counts.entry(key).or_insert(0) += c;
    }
    Ok(EnergyHistogram {
        denominator,
        counts,
    })
}

/// Result of an exact resummation over compatible contour families.
#[derive(Clone, Debug)]
pub struct ResummationReport {
    /// ln Z of the collar-conditioned box, high precision.
    pub ln_z: BigFloat,
    /// The same value rounded to f64.
    pub ln_z_f64: f64,
    /// Energy of the ground-state filling with the matching boundary state.
    pub base_energy: BigRational,
    /// Exact exponent histogram over families: base energy plus Σ Φ.
    pub histogram: EnergyHistogram,
    /// Number of compatible families summed, the empty family included.
    pub families: u128,
    /// Number of distinct placeable contours in the region.
    pub pool_size: usize,
}

/// Sums `e^{−β(H(ground) + Σ Φ(Γ))}` over every compatible contour family
/// with supports in the allowed zone of `region`.
///
/// The result equals the partition function of the box conditioned on its
/// collar (boundary layer of depth `cube_size − 1` pinned to the boundary
/// state), and the histogram carries the exact rational exponents so callers
/// can compare against a brute-force histogram term by term.
pub fn contour_partition(
    ctx: &ContourContext,
    region: &Region,
    sign: &str,
    beta: &BigRational,
) -> Result<ResummationReport> {
    let model = ctx.model();
    let state = state_of(ctx, sign)?;
    let spin = spin_of(ctx, sign)?;
    let fe = enumerate_families(ctx, region, sign)?;

    let spins = vec![spin; region.len()];
    let conf = Configuration::new(Arc::clone(&fe.region), spins)?;
    let bc = BoundaryCondition::State(state);
    let base = hamiltonian(model, &conf, &bc)?;
    let base_energy = base
        .as_rational()
        .cloned()
        .ok_or_else(|| Error::BadInput(format!("the ground state {sign} is not admissible here")))?;

    let mut exponents: BTreeMap<BigRational, u128> = BTreeMap::new();
    for family in &fe.families {
        let mut e = base_energy.clone();
        for &i in family {
            e += &fe.energies[i];
        }
        *exponents.entry(e).or_insert(0) += 1;
    }
    let histogram = histogram_from_rationals(&exponents)?;
    let mut ctx_hp = Hp::new();
    let ln_z = histogram.ln_z(&mut ctx_hp, beta)?;
    Ok(ResummationReport {
        ln_z_f64: hp::to_f64(&ln_z),
        ln_z,
        base_energy,
        histogram,
        families: fe.families.len() as u128,
        pool_size: fe.pool.len(),
    })
}

/// A contour weight at fixed inverse temperature: the bare Boltzmann factor
/// of Φ and its dressing by interior partition-function ratios.
#[derive(Clone, Debug)]
pub struct ContourWeight {
    pub contour: Contour,
    /// Φ of the contour, exact.
    pub phi: BigRational,
    /// ln of the bare weight, −β·Φ.
    pub ln_bare: BigFloat,
    /// Σ over interior components of ln Z(own label) − ln Z(surrounding label).
    pub interior_ln_ratio: BigFloat,
    /// ln of the dressed weight: bare plus the interior ratios.
    pub ln_dressed: BigFloat,
    /// The dressed log-weight rounded to f64.
    pub ln_dressed_f64: f64,
}

/// Computes the dressed weight of one contour: `e^{−βΦ}` times, for every
/// interior component, the ratio of the interior partition function with its
/// own label to the one with the contour's surrounding label.  Interiors are
/// evaluated exactly; an empty interior leaves the bare weight untouched.
pub fn dressed_weight(
    ctx: &ContourContext,
    contour: &Contour,
    beta: &BigRational,
) -> Result<ContourWeight> {
    let model = ctx.model();
    let phi = contour_energy(ctx, contour)?;
    let mut ctx_hp = Hp::new();
    let ln_bare = ctx_hp.from_rational(&(-(beta * &phi)));
    let mut interior_ln_ratio = ctx_hp.zero();
    let outer = state_of(ctx, &contour.sign)?;
    for (label, sites) in &contour.interiors {
        if sites.len() > MAX_INTERIOR_SITES {
            return Err(Error::CapExceeded {
                what: "interior component size (reduce the truncation order)".into(),
                needed: sites.len().to_string(),
                cap: MAX_INTERIOR_SITES.to_string(),
            });
        }
        let inner = state_of(ctx, label)?;
        let region = Region::from_sites(model.dim(), sites.clone())?;
        let own = energy_histogram(model, &region, &BoundaryCondition::State(inner))?;
        let sur = energy_histogram(model, &region, &BoundaryCondition::State(outer.clone()))?;
        let ln_own = own.ln_z(&mut ctx_hp, beta)?;
        let ln_sur = sur.ln_z(&mut ctx_hp, beta)?;
        let diff = ctx_hp.sub(&ln_own, &ln_sur);
        interior_ln_ratio = ctx_hp.add(&interior_ln_ratio, &diff);
    }
    let ln_dressed = ctx_hp.add(&ln_bare, &interior_ln_ratio);
    Ok(ContourWeight {
        contour: contour.clone(),
        phi,
        ln_bare,
        interior_ln_ratio,
        ln_dressed_f64: hp::to_f64(&ln_dressed),
        ln_dressed,
    })
}

/// Threshold for the convergence flag: the polymer-series tail over contours
/// through a fixed site is geometrically dominated once
/// `β·τ̂ ≥ 2 + ln(2·a·|S|)`, where `a` bounds the per-size growth of
/// connected support shapes through a site and `|S|` is the number of spin
/// values.  The two in `e²` absorbs the factor counting anchor choices
/// within a shape; the bound is a crude but checkable union bound, not a
/// sharp constant.
pub fn convergence_threshold(num_spins: usize, shape_growth: f64) -> f64 {
    2.0 + (2.0 * shape_growth * num_spins as f64).ln()
}

/// Truncated polymer series for the specific free energy of one phase.
#[derive(Clone, Debug)]
pub struct FreeEnergyReport {
    pub label: String,
    /// Truncation order: largest total polymer support size included.
    pub order: usize,
    /// Specific energy of the ground state, exact.
    pub ground_energy: BigRational,
    /// Truncated free energy per site, high precision.
    pub free_energy: BigFloat,
    /// The same value rounded to f64.
    pub free_energy_f64: f64,
    /// Number of polymer terms summed.
    pub polymer_terms: usize,
    /// Measured Peierls ratio min Φ/|supp| up to the truncation order.
    pub tau_hat: Option<f64>,
    /// Threshold that β·τ̂ must reach for the tail bound to certify
    /// absolute convergence.
    pub threshold: f64,
    /// Whether the tail bound certifies convergence; reported, never assumed.
    pub converged: bool,
}

/// Specific ground-state energy plus the polymer log-series truncated at
/// total support size `kmax`, per site.
///
/// Below twice the smallest contour size every polymer is a single contour,
/// so the series is the sum of dressed weights over anchored contours; the
/// function refuses truncation orders where multi-contour polymers would
/// enter, since those lie beyond the support-enumeration cap anyway.
pub fn free_energy_truncated(
    ctx: &ContourContext,
    sign: &str,
    beta: &BigRational,
    kmax: usize,
) -> Result<FreeEnergyReport> {
    if *beta <= BigRational::from(BigInt::from(0)) {
        return Err(Error::BadInput(
            "the truncated free energy needs a positive inverse temperature".into(),
        ));
    }
    let model = ctx.model();
    let state = state_of(ctx, sign)?;
    let ground = crate::groundstates::specific_energy(model, &state)?;
    let ground_energy = ground
        .as_rational()
        .cloned()
        .ok_or_else(|| Error::BadInput(format!("the state {sign} has infinite specific energy")))?;

    let mut reps: Vec<Contour> = Vec::new();
    for sub in 0..model.num_offsets() {
        let anchor = Site::new(vec![0; model.dim()], sub);
        reps.extend(enumerate_contours(ctx, sign, kmax, &anchor)?);
    }
    if let Some(min_size) = reps.iter().map(Contour::size).min() {
        if 2 * min_size <= kmax {
            return Err(Error::CapExceeded {
                what: "truncation order (multi-contour polymers would enter)".into(),
                needed: kmax.to_string(),
                cap: (2 * min_size - 1).to_string(),
            });
        }
    }

    // Deterministic summation order, independent of the sign label: sort by
    // size, support shape, energy, interior sizes, and finally the weight
    // itself, so symmetric phases sum identical sequences bitwise.
    let mut terms: Vec<(usize, Vec<Site>, BigRational, Vec<usize>, u64, BigFloat)> = Vec::new();
    for rep in &reps {
        let w = dressed_weight(ctx, rep, beta)?;
        let interior_sizes: Vec<usize> = rep.interiors.iter().map(|(_, s)| s.len()).collect();
        terms.push((
            rep.size(),
            rep.support.clone(),
            w.phi.clone(),
            interior_sizes,
            w.ln_dressed_f64.to_bits(),
            w.ln_dressed,
        ));
    }
    terms.sort_by(|a, b| {
        (&a.0, &a.1, &a.2, &a.3, &a.4).cmp(&(&b.0, &b.1, &b.2, &b.3, &b.4))
    });

    let mut ctx_hp = Hp::new();
    let mut series = ctx_hp.zero();
    for (_, _, _, _, _, ln_w) in &terms {
        let w = ctx_hp.exp(ln_w);
        series = ctx_hp.add(&series, &w);
    }
    let per_site = (beta * BigRational::from(BigInt::from(model.num_offsets() as i64))).recip();
    let per_site_hp = ctx_hp.from_rational(&per_site);
    let correction = ctx_hp.mul(&series, &per_site_hp);
    let ground_hp = ctx_hp.from_rational(&ground_energy);
    let free_energy = ctx_hp.sub(&ground_hp, &correction);

    let pr = peierls_estimate(ctx, kmax)?;
    let tau_hat = pr.tau_hat.as_ref().and_then(ToPrimitive::to_f64);
    let threshold = convergence_threshold(model.num_spins(), DEFAULT_SHAPE_GROWTH);
    let beta_f = beta.to_f64().unwrap_or(f64::NAN);
    let converged = tau_hat.is_some_and(|t| beta_f * t >= threshold);
    Ok(FreeEnergyReport {
        label: sign.to_string(),
        order: kmax,
        ground_energy,
        free_energy_f64: hp::to_f64(&free_energy),
        free_energy,
        polymer_terms: terms.len(),
        tau_hat,
        threshold,
        converged,
    })
}

/// One phase in a stability report.
#[derive(Clone, Debug)]
pub struct PhaseEntry {
    pub label: String,
    /// Truncated free energy per site.
    pub free_energy: f64,
    /// Distance above the minimal free energy.
    pub gap: f64,
    /// Whether the gap is within tolerance of the minimum.
    pub stable: bool,
}

/// Stability classification of every ground-state phase at one temperature.
#[derive(Clone, Debug)]
pub struct PhaseReport {
    /// One entry per ground-state label, in the model's label order.
    pub entries: Vec<PhaseEntry>,
    /// Labels of the stable phases; never empty.
    pub stable: Vec<String>,
    pub tolerance: f64,
    pub order: usize,
    /// Measured Peierls ratio shared by all phases.
    pub tau_hat: Option<f64>,
    /// Whether the tail bound certifies convergence at this β.
    pub converged: bool,
}

/// Classifies every ground-state label by its truncated free energy: labels
/// within `tolerance` of the minimum are stable, the rest metastable.
pub fn stable_phases(
    ctx: &ContourContext,
    beta: &BigRational,
    kmax: usize,
    tolerance: f64,
) -> Result<PhaseReport> {
    if !(tolerance > 0.0) {
        return Err(Error::BadInput(
            "the stability tolerance must be positive".into(),
        ));
    }
    let mut reports = Vec::new();
    for (label, _) in ctx.states() {
        reports.push(free_energy_truncated(ctx, label, beta, kmax)?);
    }
    let min = reports
        .iter()
        .map(|r| r.free_energy_f64)
        .fold(f64::INFINITY, f64::min);
    let entries: Vec<PhaseEntry> = reports
        .iter()
        .map(|r| {
            let gap = r.free_energy_f64 - min;
            PhaseEntry {
                label: r.label.clone(),
                free_energy: r.free_energy_f64,
                gap,
                stable: gap <= tolerance,
            }
        })
        .collect();
    let stable: Vec<String> = entries
        .iter()
        .filter(|e| e.stable)
        .map(|e| e.label.clone())
        .collect();
    Ok(PhaseReport {
        stable,
        tolerance,
        order: kmax,
        tau_hat: reports.first().and_then(|r| r.tau_hat),
        converged: reports.iter().all(|r| r.converged),
        entries,
    })
}

/// Probability that the extracted family contains a given one, computed two
/// independent ways.
#[derive(Clone, Debug)]
pub struct CorrelationReport {
    /// Probability from brute-force enumeration of the collar-conditioned
    /// ensemble, high precision.
    pub probability: BigFloat,
    /// The same value rounded to f64.
    pub probability_f64: f64,
    /// Probability from the contour-family resummation.
    pub resummed_f64: f64,
    /// Configurations whose extracted family contains the target.
    pub matching: u128,
    /// Configurations enumerated.
    pub total: u128,
    /// Set when the target family can never occur.
    pub warning: Option<String>,
}

/// True when `sub` is contained in `sup` with multiplicity; both sorted.
fn multiset_contains(sup: &[Contour], sub: &[Contour]) -> bool {
    let mut i = 0;
    for c in sub {
        loop {
            if i >= sup.len() {
                return false;
            }
            if &sup[i] == c {
                i += 1;
                break;
            }
            if &sup[i] > c {
                return false;
            }
            i += 1;
        }
    }
    true
}

/// Probability, under the collar-conditioned Gibbs measure with boundary
/// state `sign`, that the extracted contour family contains `fam`.
///
/// The exact route enumerates every configuration of the conditioned
/// ensemble, extracts its contours and tests containment; the resummation
/// route forms the ratio of family sums with and without the containment
/// constraint.  The two must agree to summation rounding.
pub fn contour_correlation(
    ctx: &ContourContext,
    region: &Region,
    sign: &str,
    beta: &BigRational,
    fam: &[Contour],
) -> Result<CorrelationReport> {
    let model = ctx.model();
    let state = state_of(ctx, sign)?;
    let mut target: Vec<Contour> = fam.to_vec();
    target.sort();

    // Structural impossibilities short-circuit to zero with a warning.
    let zone = allowed_zone(model, region)?;
    let zone_set: HashSet<&Site> = zone.iter().collect();
    let mut warning = None;
    for c in &target {
        if !c.support.iter().all(|s| zone_set.contains(s)) {
            warning = Some("a contour of the family leaves the allowed zone".to_string());
        }
    }
    for i in 0..target.len() {
        for j in i + 1..target.len() {
            if !supports_disconnected(&target[i], &target[j]) {
                warning = Some("the family has adjacent supports".to_string());
            }
        }
    }
    if let Some(w) = warning {
        let ctx_hp = Hp::new();
        return Ok(CorrelationReport {
            probability: ctx_hp.zero(),
            probability_f64: 0.0,
            resummed_f64: 0.0,
            matching: 0,
            total: 0,
            warning: Some(w),
        });
    }

    // Exact route: walk the conditioned ensemble and extract per leaf.
    let collar = boundary_layer(region, (ctx.cube_size() - 1) as u64, model.num_offsets())?;
    let arc = Arc::new(region.clone());
    let mut fixed: Vec<Option<u16>> = vec![None; region.len()];
    for s in collar.sites() {
        let idx = region
            .index_of(s)
            .ok_or_else(|| Error::Internal("collar site missing from its region".into()))?;
        fixed[idx] = Some(state.spin_at(s));
    }
    let bc = BoundaryCondition::State(state);
    let compiled = CompiledInstance::compile(model, region, &bc)?;
    let mut all: BTreeMap<i64, u128> = BTreeMap::new();
    let mut hit: BTreeMap<i64, u128> = BTreeMap::new();
    let mut total = 0u128;
    let mut matching = 0u128;
    let mut deferred: Option<Error> = None;
    let finished = compiled.walk(&fixed, ORACLE_STEP_CAP, &mut |spins, e| {
        let conf = Configuration {
            region: Arc::clone(&arc),
            spins: spins.to_vec(),
        };
        match extract_contours(ctx, &conf, sign) {
            Ok(mut family) => {
                family.contours.sort();
                *all.entry(e).or_insert(0) += 1;
                total += 1;
                if multiset_contains(&family.contours, &target) {
                    *hit.entry(e).or_insert(0) += 1;
                    matching += 1;
                }
                true
            }
            Err(err) => {
                deferred = Some(Error::Internal(format!(
                    "a collar-conditioned configuration failed to extract: {err}"
                )));
                false
            }
        }
    });
    if let Some(err) = deferred {
        return Err(err);
    }
    if !finished {
        return Err(Error::CapExceeded {
            what: "collar-conditioned enumeration".into(),
            needed: format!("more than {ORACLE_STEP_CAP} search steps"),
            cap: ORACLE_STEP_CAP.to_string(),
        });
    }
    if total == 0 {
        return Err(Error::BadInput(
            "no admissible configuration in the conditioned ensemble".into(),
        ));
    }
    let mut ctx_hp = Hp::new();
    let probability = if matching == 0 {
        ctx_hp.zero()
    } else {
        let ln_all = ctx_hp.ln_sum_exp_histogram(&all, beta, model.denominator())?;
        let ln_hit = ctx_hp.ln_sum_exp_histogram(&hit, beta, model.denominator())?;
        let d = ctx_hp.sub(&ln_hit, &ln_all);
        ctx_hp.exp(&d)
    };

    // Resummation route: the ratio of family sums; the base energy cancels.
    let fe = enumerate_families(ctx, region, sign)?;
    let indices: Option<Vec<usize>> = target
        .iter()
        .map(|c| fe.pool.iter().position(|p| p == c))
        .collect();
    let mut den: BTreeMap<BigRational, u128> = BTreeMap::new();
    let mut num: BTreeMap<BigRational, u128> = BTreeMap::new();
    for family in &fe.families {
        let mut e = BigRational::from(BigInt::from(0));
        for &i in family {
            e += &fe.energies[i];
        }
        *den.entry(e.clone()).or_insert(0) += 1;
        if let Some(idx) = &indices {
            if idx.iter().all(|i| family.contains(i)) {
                *num.entry(e).or_insert(0) += 1;
            }
        }
    }
    let resummed_f64 = if num.is_empty() {
        0.0
    } else {
        let hd = histogram_from_rationals(&den)?;
        let hn = histogram_from_rationals(&num)?;
        let ln_d = hd.ln_z(&mut ctx_hp, beta)?;
        let ln_n = hn.ln_z(&mut ctx_hp, beta)?;
        let d = ctx_hp.sub(&ln_n, &ln_d);
        hp::to_f64(&ctx_hp.exp(&d))
    };

    Ok(CorrelationReport {
        probability_f64: hp::to_f64(&probability),
        probability,
        resummed_f64,
        matching,
        total,
        warning: None,
    })
}

/// One distance in a decay diagnostic.
#[derive(Clone, Debug)]
pub struct DecayPoint {
    pub distance: i64,
    /// Connected two-point correlation at this distance.
    pub correlation: f64,
    /// ln of its absolute value.
    pub ln_abs: f64,
}

/// Least-squares fit of log-correlations against distance.
#[derive(Clone, Debug)]
pub struct DecayReport {
    pub points: Vec<DecayPoint>,
    /// Fitted slope of ln|correlation| vs distance; negative means decay.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Euclidean norm of the fit residuals.
    pub residual_norm: Option<f64>,
    /// Set when the fit is indeterminate (a correlation vanishes).
    pub note: Option<String>,
}

/// Measures connected two-point correlations at the given distances on a
/// `side`×`side` box with the periodic state as boundary condition, then
/// fits ln|correlation| against distance by least squares.
///
/// `observable` assigns an integer value to every spin; site pairs are
/// horizontal, centered in the box, offset index 0.  Correlations come from
/// exact joint distributions, not from any expansion.
pub fn decay_diagnostic(
    model: &Model,
    state: &PeriodicState,
    beta: &BigRational,
    side: i64,
    distances: &[i64],
    observable: &[i64],
) -> Result<DecayReport> {
    if model.dim() != 2 {
        return Err(Error::BadInput(
            "the decay diagnostic runs on two-dimensional boxes".into(),
        ));
    }
    if observable.len() != model.num_spins() {
        return Err(Error::BadInput(format!(
            "observable assigns {} values to {} spins",
            observable.len(),
            model.num_spins()
        )));
    }
    let mut ds: Vec<i64> = distances.to_vec();
    ds.sort_unstable();
    ds.dedup();
    if ds.len() < 3 {
        return Err(Error::BadInput(
            "at least three distinct distances are needed for a fit".into(),
        ));
    }
    if ds.first().is_some_and(|&d| d < 1) || ds.last().is_some_and(|&d| d > side - 1) {
        return Err(Error::BadInput(format!(
            "distances must lie in 1..={}",
            side - 1
        )));
    }
    let region = Region::cell_box(&[side, side], model.num_offsets())?;
    let bc = BoundaryCondition::State(state.clone());
    let y = side / 2;
    let ctx_hp = Hp::new();
    let mut points = Vec::new();
    let mut note = None;
    for &d in &ds {
        let x0 = (side - 1 - d) / 2;
        let a = Site::new(vec![x0, y], 0);
        let b = Site::new(vec![x0 + d, y], 0);
        let jd = joint_distribution(model, &region, &bc, beta, &[a, b])?;
        let mut m_ab = ctx_hp.zero();
        let mut m_a = ctx_hp.zero();
        let mut m_b = ctx_hp.zero();
        for entry in &jd.entries {
            let fa = observable[entry.pattern[0] as usize];
            let fb = observable[entry.pattern[1] as usize];
            let p = &entry.probability;
            m_ab = ctx_hp.add(&m_ab, &ctx_hp.mul(p, &ctx_hp.from_i64(fa * fb)));
            m_a = ctx_hp.add(&m_a, &ctx_hp.mul(p, &ctx_hp.from_i64(fa)));
            m_b = ctx_hp.add(&m_b, &ctx_hp.mul(p, &ctx_hp.from_i64(fb)));
        }
        let c = ctx_hp.sub(&m_ab, &ctx_hp.mul(&m_a, &m_b));
        let c_f64 = hp::to_f64(&c);
        if c_f64.abs() < 1e-30 {
            note = Some(format!(
                "the connected correlation at distance {d} vanishes to rounding; the rate is indeterminate"
            ));
        }
        points.push(DecayPoint {
            distance: d,
            correlation: c_f64,
            ln_abs: c_f64.abs().ln(),
        });
    }
    if note.is_some() {
        return Ok(DecayReport {
            points,
            slope: None,
            intercept: None,
            residual_norm: None,
            note,
        });
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.distance as f64).sum();
    let sy: f64 = points.iter().map(|p| p.ln_abs).sum();
    let sxx: f64 = points.iter().map(|p| (p.distance as f64).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.distance as f64 * p.ln_abs).sum();
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy * sxx - sx * sxy) / det;
    let residual_norm = points
        .iter()
        .map(|p| {
            let r = p.ln_abs - (intercept + slope * p.distance as f64);
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(DecayReport {
        points,
        slope: Some(slope),
        intercept: Some(intercept),
        residual_norm: Some(residual_norm),
        note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::frozen_collar_histogram;
    use crate::model::parse_model;

    fn ising() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n",
        )
        .unwrap()
    }

    fn ising_field(h: &str) -> Model {
        let text = format!(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\ndefault 0\nvalue plus -{h}\nvalue minus {h}\nend\n"
        );
        parse_model(&text).unwrap()
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

    fn spin_states() -> Vec<PeriodicState> {
        vec![
            PeriodicState::constant("plus", 0, 2, 1),
            PeriodicState::constant("minus", 1, 2, 1),
        ]
    }

    fn beta(s: &str) -> BigRational {
        s.parse().unwrap()
    }

    #[test]
    fn no_room_for_contours_gives_the_bare_boltzmann_factor() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Region::cell_box(&[4, 4], 1).unwrap();
        let r = contour_partition(&ctx, &region, "plus", &beta("1")).unwrap();
        assert_eq!(r.families, 1);
        assert_eq!(r.pool_size, 0);
        assert_eq!(r.histogram.total(), 1);
        let frozen = frozen_collar_histogram(&m, &region, &spin_states()[0], 2).unwrap();
        assert_eq!(r.histogram.rational_counts(), frozen.rational_counts());
    }

    #[test]
    fn resummation_matches_the_frozen_collar_ensemble() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        for (i, state) in spin_states().iter().enumerate() {
            for b in ["1/2", "1", "2"] {
                let r = contour_partition(&ctx, &region, &state.label, &beta(b)).unwrap();
                assert_eq!(r.families, 2, "one flip fits the 5x5 zone");
                let frozen = frozen_collar_histogram(&m, &region, state, 2).unwrap();
                assert_eq!(
                    r.histogram.rational_counts(),
                    frozen.rational_counts(),
                    "sign {i} beta {b}"
                );
                let mut hp_ctx = Hp::new();
                let ln_ref = frozen.ln_z(&mut hp_ctx, &beta(b)).unwrap();
                let rel = (r.ln_z_f64 - hp::to_f64(&ln_ref)).abs() / hp::to_f64(&ln_ref).abs();
                assert!(rel <= 1e-12, "sign {i} beta {b}: rel {rel}");
            }
        }
    }

    #[test]
    fn hard_square_droplets_match_the_oracle() {
        let m = hard_square();
        let empty = PeriodicState::constant("empty", 0, 2, 1);
        let ctx = ContourContext::new(&m, std::slice::from_ref(&empty)).unwrap();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        let r = contour_partition(&ctx, &region, "empty", &beta("1")).unwrap();
        assert_eq!(r.families, 2, "vacuum and the one-particle droplet");
        let frozen = frozen_collar_histogram(&m, &region, &empty, 2).unwrap();
        assert_eq!(r.histogram.rational_counts(), frozen.rational_counts());
        assert_eq!(r.base_energy, BigRational::from(BigInt::from(0)));
    }

    #[test]
    fn dressed_weight_reduces_to_bare_on_empty_interiors() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let anchor = Site::new(vec![0, 0], 0);
        let reps = enumerate_contours(&ctx, "plus", 9, &anchor).unwrap();
        assert_eq!(reps.len(), 1);
        assert!(reps[0].interiors.is_empty());
        let w = dressed_weight(&ctx, &reps[0], &beta("2")).unwrap();
        assert_eq!(hp::to_f64(&w.ln_dressed), hp::to_f64(&w.ln_bare));
        assert_eq!(w.phi, BigRational::from(BigInt::from(8)));
        assert!(w.ln_dressed_f64 < 0.0, "bare weight below one");
    }

    #[test]
    fn symmetric_interior_ratios_cancel() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Arc::new(Region::cell_box(&[9, 9], 1).unwrap());
        let mut spins = vec![0u16; region.len()];
        for x in 3..6 {
            for y in 3..6 {
                let idx = region.index_of(&Site::new(vec![x, y], 0)).unwrap();
                spins[idx] = 1;
            }
        }
        let conf = Configuration::new(Arc::clone(&region), spins).unwrap();
        let fam = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(fam.contours.len(), 1);
        let c = &fam.contours[0];
        assert_eq!(c.interiors.len(), 1, "the block center survives as interior");
        assert_eq!(c.interiors[0].0, "minus");
        let w = dressed_weight(&ctx, c, &beta("1")).unwrap();
        assert_eq!(
            hp::to_f64(&w.interior_ln_ratio),
            0.0,
            "the flip symmetry makes both interior partition functions equal"
        );
        assert_eq!(hp::to_f64(&w.ln_dressed), hp::to_f64(&w.ln_bare));
    }

    #[test]
    fn truncation_below_the_smallest_contour_returns_the_ground_energy() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let r = free_energy_truncated(&ctx, "plus", &beta("2"), 8).unwrap();
        assert_eq!(r.polymer_terms, 0);
        assert_eq!(r.ground_energy, BigRational::from(BigInt::from(-2)));
        assert_eq!(r.free_energy_f64, -2.0);
        assert!(r.tau_hat.is_none(), "no contour exists below size nine");
        assert!(!r.converged);
    }

    #[test]
    fn truncated_free_energies_are_symmetric_and_ordered() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        for k in [9usize, 10, 12] {
            let p = free_energy_truncated(&ctx, "plus", &beta("2"), k).unwrap();
            let q = free_energy_truncated(&ctx, "minus", &beta("2"), k).unwrap();
            assert_eq!(
                p.free_energy_f64.to_bits(),
                q.free_energy_f64.to_bits(),
                "order {k}"
            );
            assert_eq!(p.tau_hat, Some(8.0 / 9.0));
        }
        let f8 = free_energy_truncated(&ctx, "plus", &beta("2"), 8).unwrap();
        let f9 = free_energy_truncated(&ctx, "plus", &beta("2"), 9).unwrap();
        let hp_ctx = Hp::new();
        let drop = hp::to_f64(&hp_ctx.sub(&f8.free_energy, &f9.free_energy));
        let single_flip = 0.5 * (-16.0f64).exp();
        assert!(
            (drop - single_flip).abs() <= 1e-12 * single_flip,
            "the order-nine correction is the single-flip weight: {drop}"
        );
    }

    #[test]
    fn the_convergence_flag_follows_the_tail_bound() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let cold = free_energy_truncated(&ctx, "plus", &beta("6"), 9).unwrap();
        assert!(cold.converged, "beta 6 times 8/9 clears the threshold");
        let warm = free_energy_truncated(&ctx, "plus", &beta("2"), 9).unwrap();
        assert!(!warm.converged);
        assert_eq!(warm.threshold, convergence_threshold(2, DEFAULT_SHAPE_GROWTH));
    }

    #[test]
    fn a_field_splits_the_phases() {
        let m = ising_field("1/10");
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let r = stable_phases(&ctx, &beta("2"), 9, DEFAULT_STABILITY_TOLERANCE).unwrap();
        assert_eq!(r.stable, vec!["plus".to_string()]);
        let minus = r.entries.iter().find(|e| e.label == "minus").unwrap();
        assert!(!minus.stable);
        assert!(minus.gap > 0.19 && minus.gap < 0.21, "gap {}", minus.gap);
    }

    #[test]
    fn without_a_field_both_phases_are_stable() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let r = stable_phases(&ctx, &beta("2"), 9, DEFAULT_STABILITY_TOLERANCE).unwrap();
        assert_eq!(r.stable.len(), 2);
        for e in &r.entries {
            assert_eq!(e.gap, 0.0, "symmetric phases tie bitwise");
        }
    }

    #[test]
    fn correlation_routes_agree_on_the_single_flip() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        let anchor = Site::new(vec![0, 0], 0);
        let reps = enumerate_contours(&ctx, "plus", 9, &anchor).unwrap();
        let flip = reps[0].translated(&[1, 1]);
        assert_eq!(flip.support.len(), 9);
        let r = contour_correlation(&ctx, &region, "plus", &beta("1"), &[flip]).unwrap();
        assert!(r.warning.is_none());
        assert_eq!(r.total, 2);
        assert_eq!(r.matching, 1);
        let expect = (-8.0f64).exp() / (1.0 + (-8.0f64).exp());
        assert!((r.probability_f64 - expect).abs() <= 1e-15);
        assert!((r.probability_f64 - r.resummed_f64).abs() <= 1e-12 * expect);
    }

    #[test]
    fn the_empty_family_is_always_contained() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        let r = contour_correlation(&ctx, &region, "plus", &beta("1"), &[]).unwrap();
        assert_eq!(r.probability_f64, 1.0);
        assert_eq!(r.resummed_f64, 1.0);
        assert_eq!(r.matching, r.total);
    }

    #[test]
    fn impossible_families_get_a_warning_and_zero() {
        let m = ising();
        let ctx = ContourContext::new(&m, &spin_states()).unwrap();
        let region = Region::cell_box(&[5, 5], 1).unwrap();
        let anchor = Site::new(vec![0, 0], 0);
        let reps = enumerate_contours(&ctx, "plus", 9, &anchor).unwrap();
        let outside = reps[0].clone();
        let r = contour_correlation(&ctx, &region, "plus", &beta("1"), &[outside]).unwrap();
        assert_eq!(r.probability_f64, 0.0);
        assert!(r.warning.unwrap().contains("allowed zone"));
        let a = reps[0].translated(&[1, 1]);
        let b = reps[0].translated(&[2, 1]);
        let r = contour_correlation(&ctx, &region, "plus", &beta("1"), &[a, b]).unwrap();
        assert_eq!(r.resummed_f64, 0.0);
        assert!(r.warning.unwrap().contains("adjacent supports"));
    }

    #[test]
    fn cold_correlations_decay_with_distance() {
        let m = ising();
        let plus = PeriodicState::constant("plus", 0, 2, 1);
        let r = decay_diagnostic(&m, &plus, &beta("1"), 6, &[1, 2, 3], &[1, -1]).unwrap();
        assert_eq!(r.points.len(), 3);
        let slope = r.slope.unwrap();
        assert!(slope < 0.0, "slope {slope}");
        assert!(r.residual_norm.unwrap().is_finite());
        for p in &r.points {
            assert!(p.correlation > 0.0, "ferromagnetic correlations are positive");
        }
    }

    #[test]
    fn independent_spins_make_the_rate_indeterminate() {
        let m = ising();
        let plus = PeriodicState::constant("plus", 0, 2, 1);
        let r = decay_diagnostic(&m, &plus, &beta("0"), 6, &[1, 2, 3], &[1, -1]).unwrap();
        assert!(r.slope.is_none());
        assert!(r.note.unwrap().contains("indeterminate"));
    }

    #[test]
    fn too_few_distances_error_out() {
        let m = ising();
        let plus = PeriodicState::constant("plus", 0, 2, 1);
        let err = decay_diagnostic(&m, &plus, &beta("1"), 6, &[1, 2], &[1, -1]).unwrap_err();
        assert!(matches!(err, Error::BadInput(_)));
    }
}
