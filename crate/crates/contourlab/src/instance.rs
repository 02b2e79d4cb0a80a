//! Compiled enumeration engine for finite regions.
//!
//! Compiling a (model, region, boundary) triple resolves every interaction
//! term translate that contributes energy into a flat list of *instances*:
//! slots pointing at region sites plus a fixed part folded in from the
//! boundary. Energies are pre-scaled to integers over the model's common
//! denominator so the depth-first walk works entirely in i64, with i64::MAX
//! standing for +∞. Each instance is attached to the last region site it
//! reads, so a configuration built site by site evaluates every instance
//! exactly once, pruning the walk the moment a hard constraint is violated.

use crate::geometry::Region;
use crate::model::{BoundaryCondition, Energy, Model};
use crate::{Error, Result};
use num::{BigInt, BigRational, ToPrimitive};

/// Sentinel numerator for +∞.
pub(crate) const INF: i64 = i64::MAX;

struct TermInstance {
    /// Which term's table to read.
    term: u32,
    /// Mixed-radix contribution of the boundary-fixed slots.
    base_idx: u32,
    /// (region site index, stride) for each undetermined slot.
    vars: Vec<(u32, u32)>,
}

pub(crate) struct CompiledInstance {
    num_sites: usize,
    num_spins: u16,
    /// Scaled integer tables, one per model term.
    tables: Vec<Vec<i64>>,
    instances: Vec<TermInstance>,
    /// Instance indices keyed by the last region site they read.
    by_last: Vec<Vec<u32>>,
    /// Energy contributed by translates entirely fixed by the boundary.
    base_energy: i64,
    base_infinite: bool,
    denominator: BigInt,
}

/// Read-only view of one instance, for evaluation engines that organize the
/// sweep themselves instead of using the built-in depth-first walk.
pub(crate) struct InstanceView<'a> {
    /// Largest region site index the instance reads.
    pub last: usize,
    /// The term's scaled energy table.
    pub table: &'a [i64],
    /// Mixed-radix contribution of the boundary-fixed slots.
    pub base_idx: u32,
    /// (region site index, table stride) for each open slot.
    pub vars: &'a [(u32, u32)],
}

impl CompiledInstance {
    pub fn compile(model: &Model, region: &Region, bc: &BoundaryCondition) -> Result<Self> {
        if region.is_torus() && !matches!(bc, BoundaryCondition::Free) {
            return Err(Error::BadInput(
                "a torus has no outside; use a free boundary condition".into(),
            ));
        }
        let denom = model.denominator().clone();
        let scale = |e: &Energy| -> Result<i64> {
            match e {
                Energy::Infinite => Ok(INF),
                Energy::Finite(q) => {
                    let scaled = q * BigRational::from(denom.clone());
                    debug_assert!(scaled.is_integer());
                    scaled.to_integer().to_i64().ok_or_else(|| {
                        Error::Internal("scaled energy overflows i64".into())
                    })
                }
            }
        };
        let mut tables = Vec::with_capacity(model.terms().len());
        for t in model.terms() {
            tables.push(t.table().iter().map(&scale).collect::<Result<Vec<i64>>>()?);
        }
        let fully_inside = matches!(bc, BoundaryCondition::Free) && !region.is_torus();
        let num_spins = model.num_spins();
        let mut instances = Vec::new();
        let mut by_last: Vec<Vec<u32>> = vec![Vec::new(); region.len()];
        let mut base_energy: i64 = 0;
        let mut base_infinite = false;
        // Worst-case |sum| over any configuration, to rule out i64 overflow
        // in the walk: count every instance's largest finite magnitude.
        let mut worst: u128 = 0;
        for (ti, term) in model.terms().iter().enumerate() {
            for shift in model.translates_meeting(term, region, fully_inside) {
                let mut base_idx: u32 = 0;
                let mut vars: Vec<(u32, u32)> = Vec::new();
                let mut stride: u64 = 1;
                for u in term.support() {
                    let site = u.translated(&shift);
                    let s32 = u32::try_from(stride)
                        .map_err(|_| Error::Internal("term table stride overflow".into()))?;
                    match region.index_of(&site) {
                        Some(i) => vars.push((i as u32, s32)),
                        None => {
                            let spin = match bc {
                                BoundaryCondition::Free => {
                                    return Err(Error::Internal(
                                        "free-boundary translate reaches outside".into(),
                                    ))
                                }
                                BoundaryCondition::State(ps) => ps.spin_at(&site),
                                BoundaryCondition::Explicit(map) => {
                                    *map.get(&site).ok_or_else(|| {
                                        Error::UncoveredSites(format!(
                                            "{site} is outside the region and not given a spin"
                                        ))
                                    })?
                                }
                            };
                            base_idx += spin as u32 * s32;
                        }
                    }
                    stride *= num_spins as u64;
                }
                let table = &tables[ti];
                if vars.is_empty() {
                    let e = table[base_idx as usize];
                    if e == INF {
                        base_infinite = true;
                    } else {
                        base_energy = base_energy.saturating_add(e);
                        worst += e.unsigned_abs() as u128;
                    }
                } else {
                    let last = vars.iter().map(|&(i, _)| i).max().expect("nonempty");
                    let max_abs = table
                        .iter()
                        .filter(|&&e| e != INF)
                        .map(|&e| e.unsigned_abs())
                        .max()
                        .unwrap_or(0);
                    worst += max_abs as u128;
                    by_last[last as usize].push(instances.len() as u32);
                    instances.push(TermInstance {
                        term: ti as u32,
                        base_idx,
                        vars,
                    });
                }
            }
        }
        if worst > (i64::MAX / 4) as u128 {
            return Err(Error::Internal(
                "total energy scale overflows the integer range".into(),
            ));
        }
        Ok(CompiledInstance {
            num_sites: region.len(),
            num_spins: num_spins as u16,
            tables,
            instances,
            by_last,
            base_energy,
            base_infinite,
            denominator: denom,
        })
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn num_spin_values(&self) -> u16 {
        self.num_spins
    }

    /// Energy and infinity flag contributed by fully boundary-fixed translates.
    pub fn base_parts(&self) -> (i64, bool) {
        (self.base_energy, self.base_infinite)
    }

    /// Iterate over every instance with open slots.
    pub fn instance_views(&self) -> impl Iterator<Item = InstanceView<'_>> {
        self.instances.iter().map(move |inst| InstanceView {
            last: inst
                .vars
                .iter()
                .map(|&(i, _)| i as usize)
                .max()
                .expect("instances always keep at least one open slot"),
            table: &self.tables[inst.term as usize],
            base_idx: inst.base_idx,
            vars: &inst.vars,
        })
    }

    pub fn denominator(&self) -> &BigInt {
        &self.denominator
    }

    /// Convert a scaled integer energy back to the exact rational it encodes.
    #[cfg(test)]
    pub fn energy_rational(&self, scaled: i64) -> BigRational {
        BigRational::new(BigInt::from(scaled), self.denominator.clone())
    }

    fn eval(&self, inst: &TermInstance, spins: &[u16]) -> i64 {
        let mut idx = inst.base_idx;
        for &(site, stride) in &inst.vars {
            idx += spins[site as usize] as u32 * stride;
        }
        self.tables[inst.term as usize][idx as usize]
    }

    /// Depth-first walk over all admissible configurations, with optional
    /// per-site forced spins. The closure receives each admissible
    /// configuration and its scaled energy; returning false aborts the walk.
    /// `steps` counts spin assignments tried and the walk aborts when it
    /// exceeds `max_steps`. Returns false if aborted (by closure or budget).
    pub(crate) fn walk(
        &self,
        fixed: &[Option<u16>],
        max_steps: u64,
        f: &mut impl FnMut(&[u16], i64) -> bool,
    ) -> bool {
        if self.base_infinite {
            return true;
        }
        let n = self.num_sites;
        let mut spins: Vec<u16> = vec![0; n];
        let mut energy: Vec<i64> = vec![0; n + 1];
        energy[0] = self.base_energy;
        let mut steps: u64 = 0;
        // Explicit stack: position i holds the next spin to try at site i.
        let mut next: Vec<u16> = vec![0; n + 1];
        let mut depth: usize = 0;
        if n == 0 {
            return f(&spins, self.base_energy);
        }
        loop {
            if depth == n {
                if !f(&spins, energy[n]) {
                    return false;
                }
                depth -= 1;
                continue;
            }
            let choice = match fixed[depth] {
                Some(s) => {
                    if next[depth] == 0 {
                        Some(s)
                    } else {
                        None
                    }
                }
                None => {
                    let c = next[depth];
                    (c < self.num_spins).then_some(c)
                }
            };
            match choice {
                None => {
                    // Exhausted this site; backtrack.
                    next[depth] = 0;
                    if depth == 0 {
                        return true;
                    }
                    depth -= 1;
                }
                Some(s) => {
                    next[depth] += 1;
                    steps += 1;
                    if steps > max_steps {
                        return false;
                    }
                    spins[depth] = s;
                    let mut e = energy[depth];
                    let mut ok = true;
                    for &ii in &self.by_last[depth] {
                        let v = self.eval(&self.instances[ii as usize], &spins);
                        if v == INF {
                            ok = false;
                            break;
                        }
                        e += v;
                    }
                    if ok {
                        energy[depth + 1] = e;
                        depth += 1;
                        next[depth] = 0;
                    }
                }
            }
        }
    }

    /// Visit every admissible configuration with its scaled energy.
    pub fn for_each_admissible(&self, f: &mut impl FnMut(&[u16], i64)) {
        let fixed = vec![None; self.num_sites];
        self.walk(&fixed, u64::MAX, &mut |spins, e| {
            f(spins, e);
            true
        });
    }

    /// Visit admissible configurations until the closure returns false.
    pub fn for_each_admissible_while(&self, f: &mut impl FnMut(&[u16], i64) -> bool) {
        let fixed = vec![None; self.num_sites];
        self.walk(&fixed, u64::MAX, f);
    }

    /// Like [`Self::for_each_admissible`] with some sites pinned to given
    /// spins.
    pub fn for_each_admissible_fixed(
        &self,
        fixed: &[Option<u16>],
        f: &mut impl FnMut(&[u16], i64),
    ) {
        self.walk(fixed, u64::MAX, &mut |spins, e| {
            f(spins, e);
            true
        });
    }

    /// Whether any admissible configuration respects the pinned spins.
    pub fn admissible_completion_exists(&self, fixed: &[Option<u16>]) -> bool {
        self.admissible_completion_exists_capped(fixed, u64::MAX)
            .unwrap_or(true)
    }

    /// Budgeted existence check: None when the step budget ran out before
    /// either finding a completion or exhausting the space.
    pub fn admissible_completion_exists_capped(
        &self,
        fixed: &[Option<u16>],
        max_steps: u64,
    ) -> Option<bool> {
        let mut found = false;
        let completed = self.walk(fixed, max_steps, &mut |_, _| {
            found = true;
            false
        });
        if found {
            Some(true)
        } else if completed {
            Some(false)
        } else {
            None
        }
    }
}
