//! Periodic ground states: specific energies, exhaustive search over small
//! periods, and verification of claimed minimizers.
//!
//! The specific energy of a periodic configuration is its energy per site,
//! computed exactly on a torus whose sides are the state's periods: by
//! translation invariance the torus energy divided by the site count equals
//! the infinite-volume density. Ground states are found by enumerating every
//! admissible pattern on l×…×l tori for l up to a caller-chosen cap and
//! keeping the minimizers, reduced to their minimal periods. Two distinct
//! minimal-period patterns count as two states even when one is a translate
//! of the other: sublattice symmetry breaking (both checkerboards, say) is
//! part of the answer.

use crate::geometry::Region;
use crate::instance::CompiledInstance;
use crate::model::{BoundaryCondition, Energy, Model, PeriodicState};
use crate::{Error, Result};
use num::{BigInt, BigRational};

/// Energy per site of a fully periodic configuration, exact. +∞ when the
/// state violates a hard constraint.
pub fn specific_energy(model: &Model, state: &PeriodicState) -> Result<Energy> {
    if state.periods.len() != model.dim() {
        return Err(Error::Model("state dimension does not match model".into()));
    }
    if state.num_offsets != model.num_offsets() {
        return Err(Error::Model("state offset count does not match model".into()));
    }
    let torus = Region::torus(&state.periods, model.num_offsets())?;
    let compiled = CompiledInstance::compile(model, &torus, &BoundaryCondition::Free)?;
    let spins: Vec<Option<u16>> = torus
        .sites()
        .iter()
        .map(|s| Some(state.spin_at(s)))
        .collect();
    let mut result: Option<i64> = None;
    compiled.for_each_admissible_fixed(&spins, &mut |_, e| {
        result = Some(e);
    });
    match result {
        None => Ok(Energy::Infinite),
        Some(e) => {
            let sites = BigInt::from(torus.len());
            Ok(Energy::Finite(BigRational::new(
                BigInt::from(e),
                compiled.denominator() * sites,
            )))
        }
    }
}

/// Reduce a pattern on an l-torus to its minimal periods per axis.
fn minimal_period_state(
    label: String,
    lens: &[i64],
    torus: &Region,
    spins: &[u16],
    num_offsets: usize,
) -> PeriodicState {
    let dim = lens.len();
    let mut periods: Vec<i64> = lens.to_vec();
    for axis in 0..dim {
        let l = lens[axis];
        'cand: for p in 1..l {
            if l % p != 0 {
                continue;
            }
            for (i, site) in torus.sites().iter().enumerate() {
                let mut shifted = site.clone();
                shifted.cell[axis] = (shifted.cell[axis] + p).rem_euclid(l);
                let j = torus.index_of(&shifted).expect("torus is closed");
                if spins[i] != spins[j] {
                    continue 'cand;
                }
            }
            periods[axis] = p;
            break;
        }
    }
    let reduced = Region::torus(&periods, num_offsets).expect("positive periods");
    let data: Vec<u16> = reduced
        .sites()
        .iter()
        .map(|s| {
            let i = torus.index_of(s).expect("sub-box of the torus");
            spins[i]
        })
        .collect();
    // Region sites are sorted lexicographically by cell then offset, which is
    // exactly the mixed-radix order PeriodicState::spin_at expects.
    PeriodicState::new(label, periods, data, num_offsets).expect("consistent sizes")
}

/// The outcome of a ground-state search.
#[derive(Clone, Debug)]
pub struct GroundStateSet {
    pub states: Vec<PeriodicState>,
    /// Minimal specific energy over everything enumerated.
    pub specific_energy: BigRational,
    /// Largest period tried per axis.
    pub lcap: i64,
    /// True when a minimizer's minimal period reaches the cap, or the cap on
    /// enumerated patterns cut the search short: larger periods could still
    /// hold further (or lower) states, so the list may be incomplete —
    /// enlarge `lcap` until this clears, or treat the degeneracy as suspect.
    pub maybe_incomplete: bool,
}

/// Enumerate every admissible periodic configuration with all periods ≤
/// `lcap` and return the minimizers of the specific energy, reduced to
/// minimal periods and deduplicated. `max_patterns` bounds the total spin
/// patterns considered per torus before the search is cut short.
pub fn find_ground_states(
    model: &Model,
    lcap: i64,
    max_patterns: u64,
) -> Result<GroundStateSet> {
    find_low_states(model, lcap, max_patterns, &BigRational::zero())
}

/// Like [`find_ground_states`], but also keep every state whose specific
/// energy lies within `window` of the minimum. A positive window admits
/// near-minimal candidates — the reference states for metastable-phase
/// analysis when a perturbation splits a degenerate set; the classification
/// is only meaningful while the splitting stays below the contour-energy
/// scale. A zero window returns the exact minimizers.
pub fn find_low_states(
    model: &Model,
    lcap: i64,
    max_patterns: u64,
    window: &BigRational,
) -> Result<GroundStateSet> {
    if lcap < 1 {
        return Err(Error::BadInput("period cap must be at least 1".into()));
    }
    if window < &BigRational::zero() {
        return Err(Error::BadInput(
            "the energy window must be nonnegative".into(),
        ));
    }
    let dim = model.dim();
    let k = model.num_offsets();
    let mut best: Option<BigRational> = None;
    let mut found: Vec<(BigRational, PeriodicState)> = Vec::new();
    let mut truncated = false;
    for l in 1..=lcap {
        let sites = (l as u64).pow(dim as u32) * k as u64;
        let patterns = (model.num_spins() as f64).powi(sites as i32);
        if patterns > max_patterns as f64 {
            truncated = true;
            break;
        }
        let lens = vec![l; dim];
        let torus = Region::torus(&lens, k)?;
        let compiled = CompiledInstance::compile(model, &torus, &BoundaryCondition::Free)?;
        let denom_sites = compiled.denominator() * BigInt::from(torus.len());
        let mut kept: Vec<(BigRational, Vec<u16>)> = Vec::new();
        compiled.for_each_admissible(&mut |spins, e| {
            let density = BigRational::new(BigInt::from(e), denom_sites.clone());
            // Skip anything already outside the window around the running
            // minimum; the final cut below re-filters survivors.
            let in_range = match &best {
                None => true,
                Some(b) => density <= b + window,
            };
            if !in_range {
                return;
            }
            let improved = match &best {
                None => true,
                Some(b) => density < *b,
            };
            if improved {
                best = Some(density.clone());
            }
            kept.push((density, spins.to_vec()));
        });
        for (density, spins) in kept {
            let st = minimal_period_state(String::new(), &lens, &torus, &spins, k);
            if !found
                .iter()
                .any(|(_, f)| f.periods == st.periods && f.spins == st.spins)
            {
                found.push((density, st));
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::Inadmissible("no admissible periodic configuration within the period cap".into())
    })?;
    let cut = &best + window;
    found.retain(|(d, _)| *d <= cut);
    // Deterministic order: by energy, then constants first in spin order,
    // then by periods and pattern; labels are the spin name for constants,
    // g0, g1, … for the rest.
    found.sort_by_key(|(d, s)| {
        (
            d.clone(),
            s.is_constant().is_none(),
            s.is_constant().unwrap_or(0),
            s.periods.clone(),
            s.spins.clone(),
        )
    });
    let mut states: Vec<PeriodicState> = found.into_iter().map(|(_, s)| s).collect();
    let mut counter = 0usize;
    for st in &mut states {
        st.label = match st.is_constant() {
            Some(spin) => model.spin_name(spin).to_string(),
            None => {
                let l = format!("g{counter}");
                counter += 1;
                l
            }
        };
    }
    let at_cap = states
        .iter()
        .any(|s| s.periods.iter().any(|&p| p == lcap && lcap > 1));
    Ok(GroundStateSet {
        states,
        specific_energy: best,
        lcap,
        maybe_incomplete: truncated || at_cap,
    })
}

/// Result of checking a claimed ground state.
#[derive(Clone, Debug)]
pub struct GroundStateCheck {
    /// The claim's specific energy.
    pub energy: Energy,
    /// Whether it matches the minimum over all periods up to the cap.
    pub minimal: bool,
    /// A strictly better periodic state, when one exists within the cap.
    pub witness: Option<PeriodicState>,
}

/// Check a claimed periodic ground state against exhaustive enumeration up
/// to `lcap`.
pub fn verify_ground_state(
    model: &Model,
    state: &PeriodicState,
    lcap: i64,
    max_patterns: u64,
) -> Result<GroundStateCheck> {
    let energy = specific_energy(model, state)?;
    let set = find_ground_states(model, lcap, max_patterns)?;
    let minimal = match &energy {
        Energy::Infinite => false,
        Energy::Finite(q) => *q == set.specific_energy,
    };
    let witness = if minimal {
        None
    } else {
        set.states.into_iter().next()
    };
    Ok(GroundStateCheck {
        energy,
        minimal,
        witness,
    })
}
