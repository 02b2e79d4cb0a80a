//! Block recoding: turn a model with small periodic ground states into an
//! equivalent model on Zᵛ whose spins are admissible block patterns and whose
//! ground states are constant.
//!
//! Cells are grouped into l×…×l blocks, with l a multiple of every ground
//! state period chosen larger than the interaction radius. Every translate of
//! every source term then touches at most two blocks per axis, and grouping
//! translates by their position modulo l turns the source family into a
//! target family of terms whose supports are as small as possible: a term
//! whose translate stays inside one block becomes a single-site target term,
//! a bond crossing a block face becomes a two-site target term on adjacent
//! blocks, and so on. Summing a block's internal terms into one table keeps
//! the target family compact. Energies match exactly: on any block-aligned
//! region the target Hamiltonian of the recoded configuration equals the
//! source Hamiltonian, under free, periodic-state or torus boundaries alike.

use crate::geometry::{PointSet, Region, Site};
use crate::model::{
    enumerate_admissible, BoundaryCondition, Configuration, Energy, InteractionTerm, Model,
    PeriodicState,
};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::sync::Arc;

/// The block side: the smallest multiple of every ground-state period that
/// exceeds the interaction radius.
pub fn choose_block_size(radius: u64, periods: &[i64]) -> i64 {
    let mut p: i64 = 1;
    for &q in periods {
        p = num::integer::lcm(p, q.max(1));
    }
    let mut l = p;
    while l <= radius as i64 {
        l += p;
    }
    l
}

/// Convenience: block side for a model and its ground states.
pub fn choose_block(model: &Model, states: &[PeriodicState]) -> i64 {
    let all: Vec<i64> = states.iter().flat_map(|s| s.periods.clone()).collect();
    choose_block_size(model.radius(), &all)
}

/// A completed block recode.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub l: i64,
    pub source: Model,
    pub target: Model,
    /// Target spin index → source pattern on the block, in block-region site
    /// order.
    pub block_patterns: Vec<Vec<u16>>,
    /// The l×…×l block with every offset, fixing the pattern ordering.
    pub block_region: Region,
    /// Source ground state ↦ the constant target spin it becomes.
    pub state_map: Vec<(PeriodicState, u16)>,
}

fn floor_div(a: i64, l: i64) -> i64 {
    a.div_euclid(l)
}

/// Build the equivalent block model. Every state's periods must divide `l`;
/// the target spin space is the set of block patterns with no internal hard
/// violation, capped at `max_spins`.
pub fn block_reduce(
    model: &Model,
    states: &[PeriodicState],
    l: i64,
    max_spins: usize,
) -> Result<Reduction> {
    let dim = model.dim();
    let k = model.num_offsets();
    if l < 1 {
        return Err(Error::BadInput("block side must be positive".into()));
    }
    for st in states {
        if st.periods.iter().any(|&p| l % p != 0) {
            return Err(Error::BadInput(format!(
                "state {:?} has periods {:?} that do not divide the block side {l}",
                st.label, st.periods
            )));
        }
    }
    let lens = vec![l; dim];
    let block_region = Region::cell_box(&lens, k)?;
    // Target spins = admissible block patterns, in enumeration order.
    let block_confs = enumerate_admissible(
        model,
        &block_region,
        &BoundaryCondition::Free,
        max_spins,
    )
    .map_err(|e| match e {
        Error::CapExceeded { .. } => Error::CapExceeded {
            what: "block patterns (target spin space)".into(),
            needed: format!("more than {max_spins}"),
            cap: max_spins.to_string(),
        },
        other => other,
    })?;
    let block_patterns: Vec<Vec<u16>> = block_confs.into_iter().map(|c| c.spins).collect();
    if block_patterns.len() > u16::MAX as usize {
        return Err(Error::CapExceeded {
            what: "target spin space".into(),
            needed: block_patterns.len().to_string(),
            cap: u16::MAX.to_string(),
        });
    }
    let mut pattern_index: BTreeMap<&[u16], u16> = BTreeMap::new();
    for (i, p) in block_patterns.iter().enumerate() {
        pattern_index.insert(p.as_slice(), i as u16);
    }
    let spin_names: Vec<String> = block_patterns
        .iter()
        .map(|p| {
            p.iter()
                .map(|&s| model.spin_name(s))
                .collect::<Vec<_>>()
                .join(".")
        })
        .collect();
    let t = block_patterns.len();

    // Group source translates by their position modulo l and accumulate
    // target tables keyed by the anchored block support.
    let mut acc: BTreeMap<Vec<Site>, Vec<Energy>> = BTreeMap::new();
    let mut rho = vec![0i64; dim];
    loop {
        for term in model.terms() {
            // Blocks touched by this translate, with in-block positions.
            let placed: Vec<(Vec<i64>, Site)> = term
                .support()
                .iter()
                .map(|u| {
                    let abs: Vec<i64> =
                        u.cell.iter().zip(&rho).map(|(c, r)| c + r).collect();
                    let block: Vec<i64> = abs.iter().map(|&c| floor_div(c, l)).collect();
                    let inner: Vec<i64> = abs.iter().map(|&c| c.rem_euclid(l)).collect();
                    (block, Site::new(inner, u.sub))
                })
                .collect();
            let mut blocks: Vec<Vec<i64>> =
                placed.iter().map(|(b, _)| b.clone()).collect();
            blocks.sort();
            blocks.dedup();
            let anchor = blocks[0].clone();
            let support: Vec<Site> = blocks
                .iter()
                .map(|b| {
                    Site::new(
                        b.iter().zip(&anchor).map(|(c, a)| c - a).collect(),
                        0,
                    )
                })
                .collect();
            let m = support.len();
            let size = t.pow(m as u32);
            let entry = acc
                .entry(support.clone())
                .or_insert_with(|| vec![Energy::zero(); size]);
            if entry.len() != size {
                return Err(Error::Internal("block support table clash".into()));
            }
            // Which digit each placed site reads from.
            let digit_of: Vec<usize> = placed
                .iter()
                .map(|(b, _)| blocks.iter().position(|x| x == b).expect("member"))
                .collect();
            let inner_idx: Vec<usize> = placed
                .iter()
                .map(|(_, s)| block_region.index_of(s).expect("inner cell in block"))
                .collect();
            let mut digits = vec![0u16; m];
            for idx in 0..size {
                let mut rem = idx;
                for d in digits.iter_mut() {
                    *d = (rem % t) as u16;
                    rem /= t;
                }
                let mut pat: Vec<u16> = Vec::with_capacity(placed.len());
                for (pi, _) in placed.iter().enumerate() {
                    let block_spin = digits[digit_of[pi]];
                    pat.push(block_patterns[block_spin as usize][inner_idx[pi]]);
                }
                let v = term.energy_of(model.num_spins(), &pat);
                entry[idx] = entry[idx].add(v);
            }
        }
        // Next rho in [0,l)^dim.
        let mut axis = dim;
        for i in (0..dim).rev() {
            rho[i] += 1;
            if rho[i] < l {
                axis = i;
                break;
            }
            rho[i] = 0;
        }
        if axis == dim {
            break;
        }
    }
    let target_terms: Vec<InteractionTerm> = acc
        .into_iter()
        .map(|(support, table)| InteractionTerm::new(support, table, t))
        .collect::<Result<Vec<_>>>()?;
    let collar = model.collar().div_ceil(l as u64);
    let target = Model::new(
        PointSet::integer_lattice(dim),
        spin_names,
        collar,
        target_terms,
    )?;

    let mut state_map = Vec::new();
    for st in states {
        let pat: Vec<u16> = block_region
            .sites()
            .iter()
            .map(|s| st.spin_at(s))
            .collect();
        let spin = pattern_index.get(pat.as_slice()).copied().ok_or_else(|| {
            Error::Inadmissible(format!(
                "state {:?} is not admissible on a block",
                st.label
            ))
        })?;
        state_map.push((st.clone(), spin));
    }
    Ok(Reduction {
        l,
        source: model.clone(),
        target,
        block_patterns,
        block_region,
        state_map,
    })
}

impl Reduction {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// The constant target state a source ground state becomes.
    pub fn target_state(&self, label: &str) -> Option<PeriodicState> {
        self.state_map
            .iter()
            .find(|(s, _)| s.label == label)
            .map(|(s, spin)| PeriodicState::constant(s.label.clone(), *spin, self.dim(), 1))
    }

    /// Map a target region (blocks) to the source region it covers.
    pub fn lift_region(&self, target: &Region) -> Result<Region> {
        let dim = self.dim();
        let k = self.source.num_offsets();
        if let Some(p) = target.periods() {
            let lens: Vec<i64> = p.iter().map(|&x| x * self.l).collect();
            return Region::torus(&lens, k);
        }
        let mut sites = Vec::new();
        for b in target.sites() {
            for s in self.block_region.sites() {
                let cell: Vec<i64> = b
                    .cell
                    .iter()
                    .zip(&s.cell)
                    .map(|(x, c)| x * self.l + c)
                    .collect();
                sites.push(Site::new(cell, s.sub));
            }
        }
        Region::from_sites(dim, sites)
    }

    /// Expand a target configuration into the source configuration it
    /// encodes.
    pub fn lift(&self, conf: &Configuration) -> Result<Configuration> {
        let source_region = Arc::new(self.lift_region(&conf.region)?);
        let mut spins = vec![0u16; source_region.len()];
        for (bi, b) in conf.region.sites().iter().enumerate() {
            let pattern = &self.block_patterns[conf.spins[bi] as usize];
            for (si, s) in self.block_region.sites().iter().enumerate() {
                let cell: Vec<i64> = b
                    .cell
                    .iter()
                    .zip(&s.cell)
                    .map(|(x, c)| x * self.l + c)
                    .collect();
                let idx = source_region
                    .index_of(&Site::new(cell, s.sub))
                    .ok_or_else(|| Error::Internal("lifted site missing".into()))?;
                spins[idx] = pattern[si];
            }
        }
        Configuration::new(source_region, spins)
    }

    /// Recode a source configuration block by block. The region must consist
    /// of complete blocks aligned to multiples of the block side (a torus
    /// must have sides divisible by it), and every block pattern must be
    /// internally admissible.
    pub fn project(&self, conf: &Configuration) -> Result<Configuration> {
        let dim = self.dim();
        let l = self.l;
        let region = conf.region.as_ref();
        let target_region = if let Some(p) = region.periods() {
            if p.iter().any(|&x| x % l != 0) {
                return Err(Error::Misaligned(format!(
                    "torus sides {p:?} are not divisible by the block side {l}"
                )));
            }
            Region::torus(&p.iter().map(|&x| x / l).collect::<Vec<_>>(), 1)?
        } else {
            let mut blocks: Vec<Vec<i64>> = region
                .sites()
                .iter()
                .map(|s| s.cell.iter().map(|&c| floor_div(c, l)).collect())
                .collect();
            blocks.sort();
            blocks.dedup();
            let expected = blocks.len() * self.block_region.len();
            if expected != region.len() {
                return Err(Error::Misaligned(
                    "region does not consist of complete blocks".into(),
                ));
            }
            Region::from_sites(dim, blocks.into_iter().map(|c| Site::new(c, 0)).collect())?
        };
        let target_region = Arc::new(target_region);
        let mut spins = vec![0u16; target_region.len()];
        let mut index: BTreeMap<&[u16], u16> = BTreeMap::new();
        for (i, p) in self.block_patterns.iter().enumerate() {
            index.insert(p.as_slice(), i as u16);
        }
        for (bi, b) in target_region.sites().iter().enumerate() {
            let mut pat = Vec::with_capacity(self.block_region.len());
            for s in self.block_region.sites() {
                let cell: Vec<i64> = b
                    .cell
                    .iter()
                    .zip(&s.cell)
                    .map(|(x, c)| x * l + c)
                    .collect();
                let idx = region.index_of(&Site::new(cell, s.sub)).ok_or_else(|| {
                    Error::Misaligned("region does not consist of complete blocks".into())
                })?;
                pat.push(conf.spins[idx]);
            }
            spins[bi] = *index.get(pat.as_slice()).ok_or_else(|| {
                Error::Inadmissible(format!(
                    "block at {:?} holds a pattern with an internal hard violation",
                    b.cell
                ))
            })?;
        }
        Configuration::new(target_region, spins)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hamiltonian, parse_model};

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

    fn antiferromagnet() -> Model {
        parse_model(
            "dimension 2\nbasis 1 0\nbasis 0 1\nspins up down\n\
             term\nsite 0 0 0\nsite 1 0 0\ndefault -1\nvalue up up 1\nvalue down down 1\nend\n\
             term\nsite 0 0 0\nsite 0 1 0\ndefault -1\nvalue up up 1\nvalue down down 1\nend\n",
        )
        .unwrap()
    }

    fn constants(m: &Model, names: &[&str]) -> Vec<PeriodicState> {
        names
            .iter()
            .map(|n| PeriodicState::constant(*n, m.spin_index(n).unwrap(), 2, 1))
            .collect()
    }

    struct Rng(u64);
    impl Rng {
        fn next(&mut self) -> u64 {
            // xorshift*; plenty for sampling test configurations.
            self.0 ^= self.0 << 13;
            self.0 ^= self.0 >> 7;
            self.0 ^= self.0 << 17;
            self.0
        }
    }

    #[test]
    fn block_size_rule() {
        assert_eq!(choose_block_size(1, &[1, 1]), 2);
        assert_eq!(choose_block_size(1, &[2, 2]), 2);
        assert_eq!(choose_block_size(2, &[2, 2]), 4);
        assert_eq!(choose_block_size(1, &[2, 3]), 6);
        assert_eq!(choose_block_size(0, &[1]), 1);
        assert_eq!(choose_block_size(3, &[1]), 4);
    }

    #[test]
    fn target_spin_spaces() {
        let ising = block_reduce(&ising(), &constants(&ising(), &["plus", "minus"]), 2, 65536)
            .unwrap();
        assert_eq!(ising.target.num_spins(), 16);
        let hs = block_reduce(&hard_square(), &constants(&hard_square(), &["empty"]), 2, 65536)
            .unwrap();
        assert_eq!(hs.target.num_spins(), 7);
        let eq = block_reduce(
            &equal_neighbor(),
            &constants(&equal_neighbor(), &["a", "b"]),
            2,
            65536,
        )
        .unwrap();
        assert_eq!(eq.target.num_spins(), 2);
        assert_eq!(eq.target.spin_names(), &["a.a.a.a", "b.b.b.b"]);
    }

    #[test]
    fn target_radius_is_one() {
        let red =
            block_reduce(&ising(), &constants(&ising(), &["plus", "minus"]), 2, 65536).unwrap();
        assert_eq!(red.target.radius(), 1);
        // Supports: the block itself and its two axis neighbours.
        let supports: Vec<Vec<Site>> = red
            .target
            .terms()
            .iter()
            .map(|t| t.support().to_vec())
            .collect();
        assert!(supports.contains(&vec![Site::at(&[0, 0])]));
        assert!(supports.contains(&vec![Site::at(&[0, 0]), Site::at(&[1, 0])]));
        assert!(supports.contains(&vec![Site::at(&[0, 0]), Site::at(&[0, 1])]));
        assert_eq!(supports.len(), 3);
    }

    #[test]
    fn ground_states_become_constants() {
        let m = antiferromagnet();
        let found = crate::groundstates::find_ground_states(&m, 2, 1 << 20).unwrap();
        assert_eq!(found.states.len(), 2);
        let red = block_reduce(&m, &found.states, 2, 65536).unwrap();
        assert_eq!(red.state_map.len(), 2);
        let (s0, s1) = (red.state_map[0].1, red.state_map[1].1);
        assert_ne!(s0, s1);
        // The recoded model's ground states are exactly those two constants.
        let tset = crate::groundstates::find_ground_states(&red.target, 2, 1 << 20).unwrap();
        assert_eq!(
            tset.specific_energy,
            num::BigRational::from(num::BigInt::from(-8))
        );
        assert_eq!(tset.states.len(), 2);
        let labels: Vec<Option<u16>> =
            tset.states.iter().map(|s| s.is_constant()).collect();
        assert!(labels.contains(&Some(s0)));
        assert!(labels.contains(&Some(s1)));
    }

    #[test]
    fn energies_match_exhaustively_on_two_blocks() {
        let m = ising();
        let red = block_reduce(&m, &constants(&m, &["plus", "minus"]), 2, 65536).unwrap();
        let source_region = Arc::new(Region::cell_box(&[4, 2], 1).unwrap());
        for code in 0u32..(1 << 8) {
            let spins: Vec<u16> = (0..8).map(|i| ((code >> i) & 1) as u16).collect();
            let conf = Configuration::new(Arc::clone(&source_region), spins).unwrap();
            let projected = red.project(&conf).unwrap();
            let hs = hamiltonian(&m, &conf, &BoundaryCondition::Free).unwrap();
            let ht = hamiltonian(&red.target, &projected, &BoundaryCondition::Free).unwrap();
            assert_eq!(hs, ht);
        }
    }

    #[test]
    fn energies_match_with_state_boundary_and_torus() {
        let m = ising();
        let red = block_reduce(&m, &constants(&m, &["plus", "minus"]), 2, 65536).unwrap();
        let plus_src = BoundaryCondition::State(red.state_map[0].0.clone());
        let plus_tgt = BoundaryCondition::State(PeriodicState::constant(
            "plus",
            red.state_map[0].1,
            2,
            1,
        ));
        let box_region = Arc::new(Region::cell_box(&[4, 4], 1).unwrap());
        let torus_region = Arc::new(Region::torus(&[4, 4], 1).unwrap());
        let mut rng = Rng(0x9e3779b97f4a7c15);
        for _ in 0..300 {
            let bits = rng.next();
            let spins: Vec<u16> = (0..16).map(|i| ((bits >> i) & 1) as u16).collect();
            let conf = Configuration::new(Arc::clone(&box_region), spins.clone()).unwrap();
            let projected = red.project(&conf).unwrap();
            let hs = hamiltonian(&m, &conf, &plus_src).unwrap();
            let ht = hamiltonian(&red.target, &projected, &plus_tgt).unwrap();
            assert_eq!(hs, ht, "boxed boundary mismatch");
            let tconf = Configuration::new(Arc::clone(&torus_region), spins).unwrap();
            let tproj = red.project(&tconf).unwrap();
            assert!(tproj.region.is_torus());
            assert_eq!(tproj.region.periods(), Some(&[2i64, 2][..]));
            let hs = hamiltonian(&m, &tconf, &BoundaryCondition::Free).unwrap();
            let ht = hamiltonian(&red.target, &tproj, &BoundaryCondition::Free).unwrap();
            assert_eq!(hs, ht, "torus mismatch");
        }
    }

    #[test]
    fn hard_square_projection_rejects_bad_blocks() {
        let m = hard_square();
        let red = block_reduce(&m, &constants(&m, &["empty"]), 2, 65536).unwrap();
        let region = Arc::new(Region::cell_box(&[2, 2], 1).unwrap());
        // Two occupations stacked vertically inside one block.
        let bad = Configuration::new(Arc::clone(&region), vec![1, 1, 0, 0]).unwrap();
        assert!(matches!(red.project(&bad), Err(Error::Inadmissible(_))));
        // A diagonal pair is a fine block pattern.
        let good = Configuration::new(Arc::clone(&region), vec![1, 0, 0, 1]).unwrap();
        let p = red.project(&good).unwrap();
        assert_eq!(p.spins.len(), 1);
    }

    #[test]
    fn lift_inverts_project() {
        let m = hard_square();
        let red = block_reduce(&m, &constants(&m, &["empty"]), 2, 65536).unwrap();
        let region = Arc::new(Region::cell_box(&[4, 4], 1).unwrap());
        let confs = enumerate_admissible(&m, &region, &BoundaryCondition::Free, 2000).unwrap();
        assert_eq!(confs.len(), 1234);
        for conf in confs.iter().step_by(7) {
            let projected = red.project(conf).unwrap();
            let lifted = red.lift(&projected).unwrap();
            assert_eq!(&lifted, conf);
        }
    }

    #[test]
    fn misaligned_regions_are_rejected() {
        let m = ising();
        let red = block_reduce(&m, &constants(&m, &["plus", "minus"]), 2, 65536).unwrap();
        let odd = Arc::new(Region::cell_box(&[3, 2], 1).unwrap());
        let conf = Configuration::constant(odd, 0);
        assert!(matches!(red.project(&conf), Err(Error::Misaligned(_))));
        let t = Arc::new(Region::torus(&[3, 4], 1).unwrap());
        let conf = Configuration::constant(t, 0);
        assert!(matches!(red.project(&conf), Err(Error::Misaligned(_))));
    }

    #[test]
    fn period_mismatch_is_rejected() {
        let m = antiferromagnet();
        let found = crate::groundstates::find_ground_states(&m, 2, 1 << 20).unwrap();
        assert!(matches!(
            block_reduce(&m, &found.states, 3, 65536),
            Err(Error::BadInput(_))
        ));
    }

    #[test]
    fn equal_neighbor_reduces_to_itself() {
        let m = equal_neighbor();
        let red = block_reduce(&m, &constants(&m, &["a", "b"]), 2, 65536).unwrap();
        // Cross-block terms force equality; mixed pairs are +∞.
        for t in red.target.terms() {
            if t.support().len() == 2 {
                let aa = t.energy_of(2, &[0, 0]);
                let ab = t.energy_of(2, &[0, 1]);
                assert!(aa.is_finite());
                assert!(!ab.is_finite());
            }
        }
    }
}
