//! Sliding-window and transfer-operator evaluation of finite ensembles.
//!
//! Two engines complement the depth-first walk in [`crate::instance`]:
//!
//! * [`distribution`] sweeps a region in site order, keeping only a short
//!   window of still-relevant spins, and accumulates the exact energy
//!   histogram of every admissible configuration in 128-bit counts —
//!   optionally split by the spins at a few marked sites, extended with the
//!   first moment of an additive integer observable, or restricted by
//!   pinned spins.  On a torus the sweep conditions on the first lattice
//!   slab (the seam), so wrap-around couplings read fixed spins, and the
//!   per-seam histograms are summed.
//! * [`nn_torus_ln_z`] evaluates ln Z on a two-dimensional torus for
//!   single-offset models with nearest-neighbour couplings by a
//!   row-transfer trace, applying the row operator one tensor leg at a
//!   time.  It copes with spin spaces far too large for the histogram
//!   engine; every intermediate sum has nonnegative terms, so the float
//!   result is accurate to a small multiple of machine epsilon.

use std::collections::BTreeMap;

use num::{BigInt, BigRational, ToPrimitive};

use crate::geometry::Region;
use crate::hp::{self, Hp};
use crate::instance::{CompiledInstance, INF};
use crate::model::{BoundaryCondition, Energy, Model};
use crate::{Error, Result};

/// Cap on the number of window states `|S|^F`.
const MAX_STATES: usize = 1 << 21;
/// Cap on the number of seam assignments enumerated on a torus.
const MAX_SEAM_ASSIGNMENTS: u128 = 1 << 16;
/// Cap on the number of distinct scaled-energy slots.
const MAX_SLOTS: usize = 1 << 21;
/// Cap on `states × mark patterns × slots`, the size of one sweep layer.
const MAX_ENTRIES: usize = 1 << 22;
/// Cap on the (pessimistic) total slot-update count for a full evaluation.
const MAX_WORK: u128 = 5_000_000_000;
/// Cap on the number of marked spin patterns `|S|^marks`.
const MAX_MARK_PATTERNS: usize = 4096;
/// Cap on the row-state count `|S|^W` of the transfer trace.
const MAX_TRACE_STATES: usize = 1 << 20;
/// Vectors traced through the row operator per batch.
const TRACE_BATCH: usize = 64;

/// Exact counts (and optional first moments) per scaled integer energy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub(crate) struct Dist {
    /// Number of admissible configurations at each scaled energy.
    pub counts: BTreeMap<i64, u128>,
    /// Sum of the observable over those configurations, when requested.
    pub moments: BTreeMap<i64, i128>,
}

/// Sweep output: one distribution per marked spin pattern.
#[derive(Debug)]
pub(crate) struct Ensemble {
    /// (spins at the marked sites, in the order given) → distribution.
    /// A single entry with an empty pattern when no sites were marked;
    /// empty when no configuration is admissible.
    pub by_marks: Vec<(Vec<u16>, Dist)>,
    /// Common denominator converting scaled energies back to rationals.
    pub denominator: BigInt,
}

impl Ensemble {
    /// Histogram summed over mark patterns.
    pub fn total_counts(&self) -> BTreeMap<i64, u128> {
        let mut out: BTreeMap<i64, u128> = BTreeMap::new();
        for (_, d) in &self.by_marks {
            for (&e, &n) in &d.counts {
                *out.entry(e).or_insert(0) += n;
            }
        }
        out
    }

    /// Moment totals summed over mark patterns.
    pub fn total_moments(&self) -> BTreeMap<i64, i128> {
        let mut out: BTreeMap<i64, i128> = BTreeMap::new();
        for (_, d) in &self.by_marks {
            for (&e, &m) in &d.moments {
                *out.entry(e).or_insert(0) += m;
            }
        }
        out
    }

    /// ln Σ e^{−β·E} over the whole ensemble, in high precision.
    #[cfg(test)]
    pub fn ln_z(&self, hp: &mut Hp, beta: &BigRational) -> Result<astro_float::BigFloat> {
        let total = self.total_counts();
        if total.is_empty() {
            return Err(Error::BadInput(
                "no admissible configuration; the partition function is zero".into(),
            ));
        }
        hp.ln_sum_exp_histogram(&total, beta, &self.denominator)
    }
}

/// Options for [`distribution`].
#[derive(Default)]
pub(crate) struct DpOpts<'a> {
    /// Sites pinned to a single spin value.
    pub fixed: &'a [(usize, u16)],
    /// Sites whose spins split the output histogram (at most a few).
    pub marks: &'a [usize],
    /// Additive observable: weight of (site index, spin), summed over sites.
    pub moment: Option<&'a dyn Fn(usize, u16) -> i64>,
}

/// Where an instance slot reads its spin during the sweep.
enum Src {
    /// The spin being assigned at the current site.
    Current,
    /// A pinned seam site (torus only).
    Seam(usize),
    /// A window digit: `p` sites back from the current one, minus one.
    Digit(usize),
}

/// One instance rewritten against the sweep's window layout.
struct PlannedInst<'a> {
    table: &'a [i64],
    base_idx: u32,
    slots: Vec<(Src, u32)>,
}

impl PlannedInst<'_> {
    #[inline]
    fn eval(&self, seam: &[u16], digits: &[u16], s: u16) -> i64 {
        let mut idx = self.base_idx;
        for (src, stride) in &self.slots {
            let v = match src {
                Src::Current => s,
                Src::Seam(j) => seam[*j],
                Src::Digit(p) => digits[*p],
            };
            idx += v as u32 * stride;
        }
        self.table[idx as usize]
    }
}

/// Exact energy distribution of all admissible configurations on `region`
/// under `bc`, by a windowed sweep in site order.  See the module docs for
/// the options; errors are [`Error::CapExceeded`] when the window, seam,
/// energy range, or operation count would exceed the engine's caps.
pub(crate) fn distribution(
    model: &Model,
    region: &Region,
    bc: &BoundaryCondition,
    opts: &DpOpts,
) -> Result<Ensemble> {
    let compiled = CompiledInstance::compile(model, region, bc)?;
    let n = compiled.num_sites();
    if n == 0 {
        return Err(Error::BadInput("cannot sweep an empty region".into()));
    }
    let radix = compiled.num_spin_values() as usize;
    let denominator = compiled.denominator().clone();
    let empty = |denominator: BigInt| Ensemble {
        by_marks: Vec::new(),
        denominator,
    };
    let (base_energy, base_infinite) = compiled.base_parts();
    if base_infinite {
        return Ok(empty(denominator));
    }

    // Pins, marks, and the moment table.
    let mut fixed_at: Vec<Option<u16>> = vec![None; n];
    for &(site, spin) in opts.fixed {
        if site >= n {
            return Err(Error::BadInput(format!(
                "pinned site index {site} is outside the region (size {n})"
            )));
        }
        if (spin as usize) >= radix {
            return Err(Error::BadInput(format!(
                "pinned spin {spin} is outside the model's {radix} values"
            )));
        }
        if fixed_at[site].replace(spin).is_some() {
            return Err(Error::BadInput(format!("site {site} pinned twice")));
        }
    }
    let mut mark_of: Vec<Option<usize>> = vec![None; n];
    let mut markdim: usize = 1;
    for (j, &site) in opts.marks.iter().enumerate() {
        if site >= n {
            return Err(Error::BadInput(format!(
                "marked site index {site} is outside the region (size {n})"
            )));
        }
        if mark_of[site].replace(j).is_some() {
            return Err(Error::BadInput(format!("site {site} marked twice")));
        }
        markdim = markdim.saturating_mul(radix);
        if markdim > MAX_MARK_PATTERNS {
            return Err(Error::CapExceeded {
                what: "marked spin patterns".into(),
                needed: format!("{}^{}", radix, opts.marks.len()),
                cap: MAX_MARK_PATTERNS.to_string(),
            });
        }
    }
    let free_sites = fixed_at.iter().filter(|f| f.is_none()).count();
    let count_bits = free_sites as f64 * (radix as f64).log2();
    if count_bits > 126.0 {
        return Err(Error::CapExceeded {
            what: "exact configuration count".into(),
            needed: format!("about 2^{count_bits:.0}"),
            cap: "2^126".into(),
        });
    }
    let moment_table: Option<Vec<i64>> = opts.moment.map(|w| {
        let mut t = vec![0i64; n * radix];
        for (site, row) in t.chunks_mut(radix).enumerate() {
            for (s, cell) in row.iter_mut().enumerate() {
                *cell = w(site, s as u16);
            }
        }
        t
    });
    if let Some(t) = &moment_table {
        let sum_abs: u128 = t
            .chunks(radix)
            .map(|row| row.iter().map(|w| w.unsigned_abs()).max().unwrap_or(0) as u128)
            .sum();
        let moment_bits = count_bits + (sum_abs.max(1) as f64).log2();
        if moment_bits > 126.0 {
            return Err(Error::CapExceeded {
                what: "exact moment accumulator".into(),
                needed: format!("about 2^{moment_bits:.0}"),
                cap: "2^126".into(),
            });
        }
    }

    // Seam: on a torus, the first slab of sites (all sharing the smallest
    // leading cell coordinate) is enumerated outright, so every wrap-around
    // instance reads only seam spins and window digits.
    let sites = region.sites();
    let seam_len = if region.is_torus() {
        let first = sites[0].cell[0];
        sites.iter().take_while(|s| s.cell[0] == first).count()
    } else {
        0
    };
    let mut seam_assignments: u128 = 1;
    for f in fixed_at.iter().take(seam_len) {
        if f.is_none() {
            seam_assignments = seam_assignments.saturating_mul(radix as u128);
        }
    }
    if seam_assignments > MAX_SEAM_ASSIGNMENTS {
        return Err(Error::CapExceeded {
            what: "seam assignments on the torus".into(),
            needed: seam_assignments.to_string(),
            cap: MAX_SEAM_ASSIGNMENTS.to_string(),
        });
    }

    // Window width: how far back (excluding seam sites) any instance reads.
    let mut window: usize = 0;
    for view in compiled.instance_views() {
        for &(j, _) in view.vars {
            let j = j as usize;
            if j >= seam_len && j < view.last {
                window = window.max(view.last - j);
            }
        }
    }
    let mut states: usize = 1;
    for _ in 0..window {
        states = states.saturating_mul(radix);
        if states > MAX_STATES {
            return Err(Error::CapExceeded {
                what: "window states".into(),
                needed: format!("{radix}^{window}"),
                cap: MAX_STATES.to_string(),
            });
        }
    }

    // Energy slot range covering every partial sum along the sweep.
    let mut plo: i64 = base_energy;
    let mut phi: i64 = base_energy;
    let mut planned: Vec<Vec<PlannedInst>> = (0..n).map(|_| Vec::new()).collect();
    let mut seam_insts: Vec<PlannedInst> = Vec::new();
    for view in compiled.instance_views() {
        let finite_min = view.table.iter().filter(|&&v| v != INF).min().copied();
        let finite_max = view.table.iter().filter(|&&v| v != INF).max().copied();
        let (mn, mx) = match (finite_min, finite_max) {
            (Some(a), Some(b)) => (a, b),
            // A table with no finite entry forbids every configuration.
            _ => return Ok(empty(denominator)),
        };
        plo += mn.min(0);
        phi += mx.max(0);
        let in_seam = view.last < seam_len;
        let slots = view
            .vars
            .iter()
            .map(|&(j, stride)| {
                let j = j as usize;
                let src = if in_seam || j < seam_len {
                    Src::Seam(j)
                } else if j == view.last {
                    Src::Current
                } else {
                    Src::Digit(view.last - 1 - j)
                };
                (src, stride)
            })
            .collect();
        let inst = PlannedInst {
            table: view.table,
            base_idx: view.base_idx,
            slots,
        };
        if view.last < seam_len {
            seam_insts.push(inst);
        } else {
            planned[view.last].push(inst);
        }
    }
    let slots = usize::try_from(phi - plo + 1)
        .map_err(|_| Error::Internal("energy range is negative".into()))?;
    if slots > MAX_SLOTS {
        return Err(Error::CapExceeded {
            what: "scaled energy slots".into(),
            needed: slots.to_string(),
            cap: MAX_SLOTS.to_string(),
        });
    }
    let layer = states
        .checked_mul(markdim)
        .and_then(|x| x.checked_mul(slots))
        .filter(|&x| x <= MAX_ENTRIES)
        .ok_or_else(|| Error::CapExceeded {
            what: "sweep layer entries".into(),
            needed: format!("{states}×{markdim}×{slots}"),
            cap: MAX_ENTRIES.to_string(),
        })?;
    let work = seam_assignments
        .saturating_mul((n - seam_len).max(1) as u128)
        .saturating_mul(states as u128)
        .saturating_mul(radix as u128)
        .saturating_mul(markdim as u128)
        .saturating_mul(slots as u128);
    if work > MAX_WORK {
        return Err(Error::CapExceeded {
            what: "sweep slot updates".into(),
            needed: work.to_string(),
            cap: MAX_WORK.to_string(),
        });
    }

    // Mixed-radix helpers.
    let mut pow: Vec<usize> = Vec::with_capacity(window + 1);
    let mut p = 1usize;
    for _ in 0..=window {
        pow.push(p);
        p = p.saturating_mul(radix);
    }
    let push = |st: usize, s: u16| -> usize {
        if window == 0 {
            0
        } else {
            (st % pow[window - 1]) * radix + s as usize
        }
    };
    let mstride = |j: usize| -> usize { radix.pow(j as u32) };

    let track_moment = moment_table.is_some();
    let mut cur = vec![0u128; layer];
    let mut nxt = vec![0u128; layer];
    let mut mcur = vec![0i128; if track_moment { layer } else { 0 }];
    let mut mnxt = vec![0i128; if track_moment { layer } else { 0 }];
    let mut acc_counts = vec![0u128; markdim * slots];
    let mut acc_moments = vec![0i128; if track_moment { markdim * slots } else { 0 }];
    let mut digits: Vec<u16> = vec![0; window.max(1)];
    let choices_at: Vec<Vec<u16>> = (0..n)
        .map(|i| match fixed_at[i] {
            Some(s) => vec![s],
            None => (0..radix as u16).collect(),
        })
        .collect();

    // Odometer over seam assignments (a single pass when there is no seam).
    let mut seam_spins: Vec<u16> = (0..seam_len)
        .map(|i| fixed_at[i].unwrap_or(0))
        .collect();
    'seam: loop {
        // Seam-internal energy, start state, marks, and moment.
        let mut seam_ok = true;
        let mut seam_e = base_energy;
        for inst in &seam_insts {
            let v = inst.eval(&seam_spins, &digits, 0);
            if v == INF {
                seam_ok = false;
                break;
            }
            seam_e += v;
        }
        if seam_ok {
            let mut st = 0usize;
            let mut mr = 0usize;
            let mut m0: i128 = 0;
            for (i, &s) in seam_spins.iter().enumerate() {
                st = push(st, s);
                if let Some(j) = mark_of[i] {
                    mr += s as usize * mstride(j);
                }
                if let Some(t) = &moment_table {
                    m0 += t[i * radix + s as usize] as i128;
                }
            }
            let t0 = usize::try_from(seam_e - plo).expect("seam energy within bounds");
            cur.fill(0);
            cur[(st * markdim + mr) * slots + t0] = 1;
            if track_moment {
                mcur.fill(0);
                mcur[(st * markdim + mr) * slots + t0] = m0;
            }
            let mut live = (t0, t0);
            let mut alive = true;

            for i in seam_len..n {
                let insts = &planned[i];
                nxt.fill(0);
                if track_moment {
                    mnxt.fill(0);
                }
                let mut site_lo = i64::MAX;
                let mut site_hi = i64::MIN;
                for st in 0..states {
                    // Decode window digits once per state.
                    let mut x = st;
                    for d in digits.iter_mut().take(window) {
                        *d = (x % radix) as u16;
                        x /= radix;
                    }
                    for &s in &choices_at[i] {
                        let mut de = 0i64;
                        let mut ok = true;
                        for inst in insts {
                            let v = inst.eval(&seam_spins, &digits, s);
                            if v == INF {
                                ok = false;
                                break;
                            }
                            de += v;
                        }
                        if !ok {
                            continue;
                        }
                        site_lo = site_lo.min(de);
                        site_hi = site_hi.max(de);
                        let ns = push(st, s);
                        let madd = mark_of[i].map_or(0, |j| s as usize * mstride(j));
                        let w = moment_table
                            .as_ref()
                            .map_or(0i64, |t| t[i * radix + s as usize]);
                        for mr in 0..markdim {
                            let src = (st * markdim + mr) * slots;
                            let dst = ((ns * markdim + mr + madd) * slots) as isize + de as isize;
                            for t in live.0..=live.1 {
                                let c = cur[src + t];
                                if c != 0 {
                                    let d = (dst + t as isize) as usize;
                                    nxt[d] += c;
                                    if track_moment {
                                        mnxt[d] += mcur[src + t] + w as i128 * c as i128;
                                    }
                                }
                            }
                        }
                    }
                }
                if site_lo == i64::MAX {
                    alive = false;
                    break;
                }
                live = (
                    (live.0 as i64 + site_lo).max(0) as usize,
                    ((live.1 as i64 + site_hi).min(slots as i64 - 1)) as usize,
                );
                std::mem::swap(&mut cur, &mut nxt);
                if track_moment {
                    std::mem::swap(&mut mcur, &mut mnxt);
                }
            }
            if alive {
                for st in 0..states {
                    for mr in 0..markdim {
                        let src = (st * markdim + mr) * slots;
                        for t in live.0..=live.1 {
                            let c = cur[src + t];
                            if c != 0 {
                                acc_counts[mr * slots + t] += c;
                                if track_moment {
                                    acc_moments[mr * slots + t] += mcur[src + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        // Advance the odometer.
        let mut i = seam_len;
        while i > 0 {
            i -= 1;
            if fixed_at[i].is_some() {
                continue;
            }
            if (seam_spins[i] as usize) + 1 < radix {
                seam_spins[i] += 1;
                for k in i + 1..seam_len {
                    seam_spins[k] = fixed_at[k].unwrap_or(0);
                }
                continue 'seam;
            }
        }
        break;
    }

    // Assemble the per-pattern distributions.
    let mut by_marks = Vec::new();
    for mr in 0..markdim {
        let mut d = Dist::default();
        for t in 0..slots {
            let c = acc_counts[mr * slots + t];
            if c != 0 {
                d.counts.insert(plo + t as i64, c);
                if track_moment {
                    let m = acc_moments[mr * slots + t];
                    if m != 0 {
                        d.moments.insert(plo + t as i64, m);
                    }
                }
            }
        }
        if d.counts.is_empty() {
            continue;
        }
        let pattern: Vec<u16> = (0..opts.marks.len())
            .map(|j| ((mr / mstride(j)) % radix) as u16)
            .collect();
        by_marks.push((pattern, d));
    }
    Ok(Ensemble {
        by_marks,
        denominator,
    })
}

/// Scaled integer table accumulation with an infinity sentinel.
fn add_energy(a: i64, b: i64) -> i64 {
    if a == INF || b == INF {
        INF
    } else {
        a + b
    }
}

/// Nearest-neighbour couplings of a two-dimensional, single-offset model,
/// scaled to integers over the model's common denominator.
struct NnTables {
    n: usize,
    /// Single-site values, `h[s]`.
    h: Vec<i64>,
    /// Pair values along axis 0 (between consecutive rows), `p0[lower][upper]`.
    p0: Vec<i64>,
    /// Pair values along axis 1 (within a row), `p1[left][right]`.
    p1: Vec<i64>,
}

fn nn_tables(model: &Model) -> Result<NnTables> {
    if model.dim() != 2 || model.num_offsets() != 1 {
        return Err(Error::BadInput(
            "the transfer trace needs a two-dimensional model with a single \
             offset per cell"
                .into(),
        ));
    }
    let n = model.num_spins() as usize;
    let denom = model.denominator();
    let scale = |e: &Energy| -> Result<i64> {
        match e {
            Energy::Infinite => Ok(INF),
            Energy::Finite(q) => {
                let scaled = q * BigRational::from(denom.clone());
                scaled
                    .to_integer()
                    .to_i64()
                    .ok_or_else(|| Error::Internal("scaled energy overflows i64".into()))
            }
        }
    };
    let mut t = NnTables {
        n,
        h: vec![0; n],
        p0: vec![0; n * n],
        p1: vec![0; n * n],
    };
    for term in model.terms() {
        let sup = term.support();
        let table = term.table();
        match sup.len() {
            1 => {
                for s in 0..n {
                    t.h[s] = add_energy(t.h[s], scale(&table[s])?);
                }
            }
            2 => {
                let dx = sup[1].cell[0] - sup[0].cell[0];
                let dy = sup[1].cell[1] - sup[0].cell[1];
                // `dest[a][b]` reads (lower site a, higher site b); the raw
                // table is strided in support order.
                let (dest, swap) = match (dx, dy) {
                    (1, 0) => (&mut t.p0, false),
                    (-1, 0) => (&mut t.p0, true),
                    (0, 1) => (&mut t.p1, false),
                    (0, -1) => (&mut t.p1, true),
                    _ => {
                        return Err(Error::BadInput(
                            "the transfer trace supports single-site and \
                             nearest-neighbour pair couplings only"
                                .into(),
                        ))
                    }
                };
                for a in 0..n {
                    for b in 0..n {
                        let v = scale(&table[a + b * n])?;
                        let (lo, hi) = if swap { (b, a) } else { (a, b) };
                        dest[lo * n + hi] = add_energy(dest[lo * n + hi], v);
                    }
                }
            }
            _ => {
                return Err(Error::BadInput(
                    "the transfer trace supports single-site and \
                     nearest-neighbour pair couplings only"
                        .into(),
                ))
            }
        }
    }
    Ok(t)
}

/// Smallest finite entry of a scaled table, if any.
fn finite_min(t: &[i64]) -> Option<i64> {
    t.iter().filter(|&&v| v != INF).min().copied()
}

/// Exponential weight table `e^{−β (v − reference)/denom}`, rounded once in
/// high precision; infinite entries become weight zero.
fn weight_table(
    ctx: &mut Hp,
    values: &[i64],
    reference: i64,
    beta: &BigRational,
    denom: &BigInt,
) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            if v == INF {
                0.0
            } else {
                let x = -beta * BigRational::new(BigInt::from(v - reference), denom.clone());
                let xf = ctx.from_rational(&x);
                hp::to_f64(&ctx.exp(&xf))
            }
        })
        .collect()
}

/// ln Z of `model` on the torus with side lengths `lens = [rows, cols]`, by
/// tracing the row-transfer operator.  Requires a two-dimensional,
/// single-offset model whose couplings are single-site or nearest-neighbour
/// pairs, and both sides at least 3 so no wrap coincides with a direct
/// neighbour.  The trace runs over canonical representatives of row states
/// under rotation (and under a detected energy-preserving spin involution),
/// in batches, with Kahan summation of the diagonal.
pub(crate) fn nn_torus_ln_z(model: &Model, lens: &[i64], beta: &BigRational) -> Result<f64> {
    if lens.len() != 2 || lens.iter().any(|&l| l < 3) {
        return Err(Error::BadInput(
            "the transfer trace needs a two-dimensional torus with both \
             sides at least 3"
                .into(),
        ));
    }
    let tables = nn_tables(model)?;
    let n = tables.n;
    let rows = lens[0] as usize;
    let cols = lens[1] as usize;
    let mut states = 1usize;
    for _ in 0..cols {
        states = states.saturating_mul(n);
        if states > MAX_TRACE_STATES {
            return Err(Error::CapExceeded {
                what: "row states of the transfer trace".into(),
                needed: format!("{n}^{cols}"),
                cap: MAX_TRACE_STATES.to_string(),
            });
        }
    }

    let h_ref = finite_min(&tables.h)
        .ok_or_else(|| Error::BadInput("every single-site value is infinite".into()))?;
    let p0_ref = finite_min(&tables.p0)
        .ok_or_else(|| Error::BadInput("every axis-0 pair value is infinite".into()))?;
    let p1_ref = finite_min(&tables.p1)
        .ok_or_else(|| Error::BadInput("every axis-1 pair value is infinite".into()))?;

    // Overflow guard: after the reference shift every weight is ≤ 1, so the
    // trace is at most the configuration count n^volume.
    let denom = model.denominator();
    let volume = (rows * cols) as f64;
    if volume * (n as f64).ln() > 690.0 {
        return Err(Error::BadInput(
            "too many configurations for the float transfer trace".into(),
        ));
    }

    let mut ctx = Hp::new();
    let wh = weight_table(&mut ctx, &tables.h, h_ref, beta, denom);
    let wp0 = weight_table(&mut ctx, &tables.p0, p0_ref, beta, denom);
    let wp1 = weight_table(&mut ctx, &tables.p1, p1_ref, beta, denom);

    // Row weight: single-site values and the in-row ring of axis-1 pairs.
    let mut pow = Vec::with_capacity(cols + 1);
    let mut p = 1usize;
    for _ in 0..=cols {
        pow.push(p);
        p = p.saturating_mul(n);
    }
    let digits_of = |idx: usize, out: &mut [usize]| {
        let mut x = idx;
        for d in out.iter_mut() {
            *d = x % n;
            x /= n;
        }
    };
    let mut win = vec![0f64; states];
    {
        let mut d = vec![0usize; cols];
        for (idx, w) in win.iter_mut().enumerate() {
            digits_of(idx, &mut d);
            let mut v = 1.0;
            for l in 0..cols {
                v *= wh[d[l]] * wp1[d[l] * n + d[(l + 1) % cols]];
            }
            *w = v;
        }
    }

    // Energy-preserving spin involution s ↦ n−1−s, verified on the scaled
    // tables, halves the orbit count when present.
    let sigma = |s: usize| n - 1 - s;
    let use_flip = (0..n).all(|s| tables.h[sigma(s)] == tables.h[s])
        && (0..n).all(|a| {
            (0..n).all(|b| {
                tables.p0[sigma(a) * n + sigma(b)] == tables.p0[a * n + b]
                    && tables.p1[sigma(a) * n + sigma(b)] == tables.p1[a * n + b]
            })
        });

    // Canonical representatives of row states under rotation (and flip).
    let mut reps: Vec<(usize, f64)> = Vec::new();
    {
        let mut d = vec![0usize; cols];
        let mut images: Vec<usize> = Vec::with_capacity(2 * cols);
        for idx in 0..states {
            digits_of(idx, &mut d);
            images.clear();
            for r in 0..cols {
                let mut rot = 0usize;
                let mut flip = 0usize;
                for l in 0..cols {
                    let v = d[(l + r) % cols];
                    rot += v * pow[l];
                    flip += sigma(v) * pow[l];
                }
                images.push(rot);
                if use_flip {
                    images.push(flip);
                }
            }
            if images.iter().any(|&im| im < idx) {
                continue;
            }
            images.sort_unstable();
            images.dedup();
            reps.push((idx, images.len() as f64));
        }
    }

    // Leg matrix: a[out][in] = weight of (old-row spin in → new-row spin out).
    let mut a = vec![0f64; n * n];
    for o in 0..n {
        for i in 0..n {
            a[o * n + i] = wp0[i * n + o];
        }
    }

    let mut va = vec![0f64; states * TRACE_BATCH];
    let mut vb = vec![0f64; states * TRACE_BATCH];
    let mut sum = 0.0f64;
    let mut comp = 0.0f64; // Kahan compensation
    for chunk in reps.chunks(TRACE_BATCH) {
        let b = chunk.len();
        va.fill(0.0);
        for (bi, &(r0, _)) in chunk.iter().enumerate() {
            va[r0 * TRACE_BATCH + bi] = 1.0;
        }
        for _row in 0..rows {
            // Apply the between-row operator one leg at a time.
            for leg in 0..cols {
                let stride = pow[leg];
                let group = stride * n;
                let mut buf = [0f64; TRACE_BATCH];
                for base0 in (0..states).step_by(group) {
                    for lo in 0..stride {
                        let base = base0 + lo;
                        for o in 0..n {
                            buf[..b].fill(0.0);
                            for i in 0..n {
                                let w = a[o * n + i];
                                if w != 0.0 {
                                    let src = (base + i * stride) * TRACE_BATCH;
                                    for (x, y) in
                                        buf[..b].iter_mut().zip(&va[src..src + b])
                                    {
                                        *x += w * y;
                                    }
                                }
                            }
                            let dst = (base + o * stride) * TRACE_BATCH;
                            vb[dst..dst + b].copy_from_slice(&buf[..b]);
                        }
                    }
                }
                std::mem::swap(&mut va, &mut vb);
            }
            // Fold in the new row's own weight.
            for (idx, &w) in win.iter().enumerate() {
                let at = idx * TRACE_BATCH;
                for x in &mut va[at..at + b] {
                    *x *= w;
                }
            }
        }
        for (bi, &(r0, weight)) in chunk.iter().enumerate() {
            let term = weight * va[r0 * TRACE_BATCH + bi];
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
    }
    // Every summand is a product of non-negative weights, so the trace can
    // only be zero when all of them are: either nothing is admissible, or
    // the whole sifted sum sits below the f64 floor. A positive result in
    // the subnormal zone has lost mantissa bits and cannot be trusted.
    if !(sum > 0.0) {
        return Err(Error::BadInput(if model.all_finite() {
            "the float transfer trace underflowed; use the exact \
             histogram route"
                .into()
        } else {
            "no admissible configuration on the torus, or the trace \
             underflowed under the hard constraints"
                .into()
        }));
    }
    if sum < 1e-250 {
        return Err(Error::BadInput(
            "the float transfer trace came out too small to trust; use \
             the exact histogram route"
                .into(),
        ));
    }

    // Undo the reference shift exactly, rounding once at the end.
    let shift_count = BigInt::from((rows * cols) as u64);
    let total_ref = BigInt::from(h_ref + p0_ref + p1_ref) * shift_count;
    let corr = -(beta.clone()) * BigRational::new(total_ref, denom.clone());
    let corr_f = hp::to_f64(&ctx.from_rational(&corr));
    Ok(sum.ln() + corr_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Site;
    use crate::model::{parse_model, PeriodicState};

    fn ising() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n",
        )
        .unwrap()
    }

    fn ising_with_field() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins plus minus\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault 1\nvalue plus plus -1\nvalue minus minus -1\nend\n\
             term\nsite 0 0 0\ndefault 0\nvalue plus -1/10\nvalue minus 1/10\nend\n",
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

    /// A deliberately lopsided three-spin model with one hard exclusion, to
    /// exercise every table path with no symmetry to hide behind.
    fn lopsided() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins a b c\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault 1/3\nvalue a a -1\nvalue a b 2\nvalue b a 1/2\nvalue c c inf\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault -1/4\nvalue b c 5/3\nvalue c b -2/3\nend\n\
             term\nsite 0 0 0\ndefault 0\nvalue b 1/5\nvalue c -3/7\nend\n",
        )
        .unwrap()
    }

    fn brute_histogram(
        model: &Model,
        region: &Region,
        bc: &BoundaryCondition,
        fixed: &[(usize, u16)],
    ) -> BTreeMap<i64, u128> {
        let compiled = CompiledInstance::compile(model, region, bc).unwrap();
        let mut pins = vec![None; compiled.num_sites()];
        for &(i, s) in fixed {
            pins[i] = Some(s);
        }
        let mut out = BTreeMap::new();
        compiled.for_each_admissible_fixed(&pins, &mut |_, e| {
            *out.entry(e).or_insert(0u128) += 1;
        });
        out
    }

    #[test]
    fn box_histogram_matches_direct_enumeration() {
        let m = ising();
        let region = Region::cell_box(&[4, 4], 1).unwrap();
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let ens = distribution(&m, &region, &bc, &DpOpts::default()).unwrap();
        assert_eq!(ens.total_counts(), brute_histogram(&m, &region, &bc, &[]));
        let total: u128 = ens.total_counts().values().sum();
        assert_eq!(total, 1 << 16);
    }

    #[test]
    fn torus_seam_agrees_with_direct_enumeration() {
        let m = ising();
        let region = Region::torus(&[5, 4], 1).unwrap();
        let bc = BoundaryCondition::Free;
        let ens = distribution(&m, &region, &bc, &DpOpts::default()).unwrap();
        assert_eq!(ens.total_counts(), brute_histogram(&m, &region, &bc, &[]));
        let total: u128 = ens.total_counts().values().sum();
        assert_eq!(total, 1 << 20);
    }

    #[test]
    fn hard_constraints_prune_paths() {
        let m = hard_square();
        let region = Region::cell_box(&[4, 4], 1).unwrap();
        let ens = distribution(&m, &region, &BoundaryCondition::Free, &DpOpts::default()).unwrap();
        let counts = ens.total_counts();
        assert_eq!(counts, brute_histogram(&m, &region, &BoundaryCondition::Free, &[]));
        // Independent sets of the 4×4 grid graph.
        let total: u128 = counts.values().sum();
        assert_eq!(total, 1234);
    }

    #[test]
    fn lopsided_torus_with_exclusions_matches_enumeration() {
        let m = lopsided();
        let region = Region::torus(&[3, 4], 1).unwrap();
        let bc = BoundaryCondition::Free;
        let ens = distribution(&m, &region, &bc, &DpOpts::default()).unwrap();
        assert_eq!(ens.total_counts(), brute_histogram(&m, &region, &bc, &[]));
    }

    #[test]
    fn marked_sites_split_the_histogram() {
        let m = ising();
        let region = Region::cell_box(&[4, 4], 1).unwrap();
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let a = region.index_of(&Site::at(&[0, 0])).unwrap();
        let b = region.index_of(&Site::at(&[2, 3])).unwrap();
        let ens = distribution(
            &m,
            &region,
            &bc,
            &DpOpts {
                marks: &[a, b],
                ..DpOpts::default()
            },
        )
        .unwrap();
        assert_eq!(ens.by_marks.len(), 4);
        // Each split histogram must match a pinned brute-force count.
        for (pattern, dist) in &ens.by_marks {
            let brute = brute_histogram(&m, &region, &bc, &[(a, pattern[0]), (b, pattern[1])]);
            assert_eq!(&dist.counts, &brute);
        }
        // And the splits must add back to the full ensemble.
        assert_eq!(ens.total_counts(), brute_histogram(&m, &region, &bc, &[]));
    }

    #[test]
    fn moment_tracks_the_additive_observable() {
        let m = ising();
        let region = Region::cell_box(&[3, 4], 1).unwrap();
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let weight = |_: usize, s: u16| if s == 0 { 1i64 } else { -1 };
        let ens = distribution(
            &m,
            &region,
            &bc,
            &DpOpts {
                moment: Some(&weight),
                ..DpOpts::default()
            },
        )
        .unwrap();
        // Direct: accumulate Σ spins per energy by enumeration.
        let compiled = CompiledInstance::compile(&m, &region, &bc).unwrap();
        let mut want: BTreeMap<i64, i128> = BTreeMap::new();
        compiled.for_each_admissible(&mut |spins, e| {
            let mag: i128 = spins.iter().map(|&s| if s == 0 { 1i128 } else { -1 }).sum();
            *want.entry(e).or_insert(0) += mag;
        });
        want.retain(|_, m| *m != 0);
        assert_eq!(ens.total_moments(), want);
    }

    #[test]
    fn pinned_sites_restrict_the_ensemble() {
        let m = hard_square();
        let region = Region::torus(&[4, 4], 1).unwrap();
        let bc = BoundaryCondition::Free;
        // Pin one seam site and one bulk site to "occupied".
        let p1 = region.index_of(&Site::at(&[0, 1])).unwrap();
        let p2 = region.index_of(&Site::at(&[2, 2])).unwrap();
        let fixed = [(p1, 1u16), (p2, 1u16)];
        let ens = distribution(
            &m,
            &region,
            &bc,
            &DpOpts {
                fixed: &fixed,
                ..DpOpts::default()
            },
        )
        .unwrap();
        assert_eq!(ens.total_counts(), brute_histogram(&m, &region, &bc, &fixed));
    }

    #[test]
    fn ln_z_matches_the_high_precision_histogram_sum() {
        let m = ising();
        let region = Region::torus(&[4, 4], 1).unwrap();
        let ens = distribution(&m, &region, &BoundaryCondition::Free, &DpOpts::default()).unwrap();
        let mut hp = Hp::new();
        for beta in ["1/2", "1", "2"] {
            let b: BigRational = beta.parse().unwrap();
            let ln_dp = hp::to_f64(&ens.ln_z(&mut hp, &b).unwrap());
            let ln_trace = nn_torus_ln_z(&m, &[4, 4], &b).unwrap();
            assert!(
                (ln_dp - ln_trace).abs() <= 1e-12 * ln_dp.abs().max(1.0),
                "β={beta}: histogram {ln_dp} vs trace {ln_trace}"
            );
        }
    }

    #[test]
    fn trace_handles_a_lopsided_many_value_model() {
        let m = lopsided();
        let region = Region::torus(&[3, 4], 1).unwrap();
        let ens = distribution(&m, &region, &BoundaryCondition::Free, &DpOpts::default()).unwrap();
        let mut hp = Hp::new();
        for beta in ["1/2", "2"] {
            let b: BigRational = beta.parse().unwrap();
            let ln_dp = hp::to_f64(&ens.ln_z(&mut hp, &b).unwrap());
            let ln_trace = nn_torus_ln_z(&m, &[3, 4], &b).unwrap();
            assert!(
                (ln_dp - ln_trace).abs() <= 1e-12 * ln_dp.abs().max(1.0),
                "β={beta}: histogram {ln_dp} vs trace {ln_trace}"
            );
        }
    }

    #[test]
    fn trace_detects_the_spin_flip_symmetry_honestly() {
        // The plain model admits the involution; the field breaks it. Both
        // must still agree with the exact histogram.
        let m = ising_with_field();
        let region = Region::torus(&[4, 3], 1).unwrap();
        let ens = distribution(&m, &region, &BoundaryCondition::Free, &DpOpts::default()).unwrap();
        let mut hp = Hp::new();
        let b: BigRational = "1".parse().unwrap();
        let ln_dp = hp::to_f64(&ens.ln_z(&mut hp, &b).unwrap());
        let ln_trace = nn_torus_ln_z(&m, &[4, 3], &b).unwrap();
        assert!((ln_dp - ln_trace).abs() <= 1e-12 * ln_dp.abs().max(1.0));
    }

    #[test]
    fn caps_refuse_oversized_sweeps() {
        let m = ising();
        let region = Region::torus(&[12, 12], 1).unwrap();
        let err = distribution(&m, &region, &BoundaryCondition::Free, &DpOpts::default())
            .unwrap_err();
        assert!(matches!(err, Error::CapExceeded { .. }), "got {err:?}");
        // Too many marks.
        let region = Region::cell_box(&[4, 4], 1).unwrap();
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let marks: Vec<usize> = (0..13).collect();
        let err = distribution(
            &m,
            &region,
            &bc,
            &DpOpts {
                marks: &marks,
                ..DpOpts::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::CapExceeded { .. }), "got {err:?}");
    }

    #[test]
    fn reduced_model_trace_agrees_with_the_source_histogram() {
        // A 2×2-block recode of the nearest-neighbour two-spin model has 16
        // block labels; its torus partition function must match the source
        // model on the corresponding source torus.
        let m = ising();
        let states = [
            PeriodicState::constant("plus", 0, 2, 1),
            PeriodicState::constant("minus", 1, 2, 1),
        ];
        let red = crate::reduction::block_reduce(&m, &states, 2, 64).unwrap();
        assert_eq!(red.target.num_spins(), 16);
        let b: BigRational = "1".parse().unwrap();
        let ln33 = nn_torus_ln_z(&red.target, &[3, 3], &b).unwrap();
        let src6 = distribution(
            &m,
            &Region::torus(&[6, 6], 1).unwrap(),
            &BoundaryCondition::Free,
            &DpOpts::default(),
        )
        .unwrap();
        let mut ctx = Hp::new();
        let s6 = hp::to_f64(&src6.ln_z(&mut ctx, &b).unwrap());
        assert!((s6 - ln33).abs() <= 1e-12 * s6.abs(), "{s6} vs {ln33}");
    }

    #[test]
    fn trace_rejects_models_it_cannot_represent() {
        // Short sides are refused.
        let m = ising();
        assert!(nn_torus_ln_z(&m, &[2, 4], &"1".parse().unwrap()).is_err());
        // Non-nearest-neighbour couplings are refused.
        let longer = parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins u d\n\
             term\nsite 0 0 0\nsite 2 0 0\ndefault 0\nvalue u u -1\nend\n",
        )
        .unwrap();
        assert!(nn_torus_ln_z(&longer, &[4, 4], &"1".parse().unwrap()).is_err());
    }
}
