//! Contours of admissible configurations.
//!
//! A configuration that agrees with a constant ground state outside a finite
//! set decomposes into *contours*: the connected components of its set of
//! non-correct points, each carrying the spin pattern it was extracted with.
//! A point t is correct when the configuration restricted to the cube U(t)
//! (odd linear size, default 3) is the restriction of some constant ground
//! state.  This module extracts contours, rebuilds configurations from
//! compatible contour families, computes exact contour energies, enumerates
//! all contours up to a support-size cap, and estimates the Peierls constant.
//!
//! Everything here assumes constant ground states; models whose ground states
//! are merely periodic must be block-recoded first (see [`crate::reduction`]).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use num::{BigInt, BigRational};

use crate::geometry::{complement_components, connected_components, site_distance, Region, Site};
use crate::model::{
    hamiltonian, BoundaryCondition, Configuration, Energy, Model, PeriodicState,
};
use crate::{Error, Result};

/// Default linear size of the correctness-test cube U(t).
pub const DEFAULT_CUBE_SIZE: i64 = 3;

/// Hard cap on the contour support size accepted by [`enumerate_contours`].
pub const MAX_ENUMERATION_SUPPORT: usize = 12;

/// A contour: a connected support, the spin pattern on it, the ground-state
/// label of its external complement component, and the enclosed complement
/// components with their ground-state labels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Contour {
    /// Ground-state label of the surrounding (unbounded) complement component.
    pub sign: String,
    /// Support sites, sorted ascending.
    pub support: Vec<Site>,
    /// Spin at each support site, aligned with `support`.
    pub pattern: Vec<u16>,
    /// Bounded complement components as (ground-state label, sites) pairs,
    /// each site list sorted, entries ordered by their first site.
    pub interiors: Vec<(String, Vec<Site>)>,
}

impl Contour {
    /// Number of support sites.
    pub fn size(&self) -> usize {
        self.support.len()
    }

    /// The same contour shifted by a cell vector.
    pub fn translated(&self, shift: &[i64]) -> Contour {
        Contour {
            sign: self.sign.clone(),
            support: self.support.iter().map(|s| s.translated(shift)).collect(),
            pattern: self.pattern.clone(),
            interiors: self
                .interiors
                .iter()
                .map(|(l, sites)| {
                    (
                        l.clone(),
                        sites.iter().map(|s| s.translated(shift)).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Cell coordinates of the lexicographically least support site.
    pub fn anchor_cell(&self) -> &[i64] {
        &self.support[0].cell
    }

    /// The translate whose least support site has cell 0 (the canonical
    /// representative of the translation class).
    pub fn anchored(&self) -> Contour {
        let shift: Vec<i64> = self.anchor_cell().iter().map(|c| -c).collect();
        self.translated(&shift)
    }

    /// Total number of interior sites over all interior components.
    pub fn interior_size(&self) -> usize {
        self.interiors.iter().map(|(_, s)| s.len()).sum()
    }
}

/// True when the two supports are not L1-adjacent (minimum pairwise site
/// distance at least 2), so that the contours remain separate components.
pub fn supports_disconnected(a: &Contour, b: &Contour) -> bool {
    a.support
        .iter()
        .all(|s| b.support.iter().all(|t| site_distance(s, t) >= 2))
}

/// A compatible family of contours inside an ambient region with a constant
/// ground state outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContourFamily {
    pub region: Arc<Region>,
    /// Ground-state label outside the region (and on every unbounded stretch
    /// of the complement of the supports).
    pub external: String,
    pub contours: Vec<Contour>,
}

/// Shared setup for contour operations: the model together with its constant
/// ground states and the correctness-cube size.
pub struct ContourContext<'a> {
    model: &'a Model,
    /// (label, spin) per constant ground state, in the given order.
    states: Vec<(String, u16)>,
    cube_size: i64,
}

impl<'a> ContourContext<'a> {
    /// Build a context from constant ground states.  States with larger
    /// periods are rejected: recode the model onto blocks first so that every
    /// ground state becomes a constant.
    pub fn new(model: &'a Model, ground_states: &[PeriodicState]) -> Result<Self> {
        Self::with_cube_size(model, ground_states, DEFAULT_CUBE_SIZE)
    }

    /// As [`ContourContext::new`] with an explicit odd cube size.  Size 3 is
    /// the standard choice; larger cubes may be needed when the interaction
    /// radius exceeds 1.
    pub fn with_cube_size(
        model: &'a Model,
        ground_states: &[PeriodicState],
        cube_size: i64,
    ) -> Result<Self> {
        if cube_size <= 0 || cube_size % 2 == 0 {
            return Err(Error::BadInput(format!(
                "cube size must be odd and positive, got {cube_size}"
            )));
        }
        if ground_states.is_empty() {
            return Err(Error::BadInput(
                "contour context needs at least one constant ground state".into(),
            ));
        }
        let mut states = Vec::new();
        for st in ground_states {
            let Some(spin) = st.is_constant() else {
                return Err(Error::BadInput(format!(
                    "ground state {} is not constant; recode the model onto blocks first",
                    st.label
                )));
            };
            if usize::from(spin) >= model.num_spins() {
                return Err(Error::BadInput(format!(
                    "ground state {} uses spin index {spin} outside the model",
                    st.label
                )));
            }
            if states.iter().any(|(_, s)| *s == spin) {
                return Err(Error::BadInput(format!(
                    "duplicate constant ground state for spin {}",
                    model.spin_name(spin)
                )));
            }
            states.push((st.label.clone(), spin));
        }
        Ok(ContourContext {
            model,
            states,
            cube_size,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn cube_size(&self) -> i64 {
        self.cube_size
    }

    /// (label, spin) pairs of the constant ground states.
    pub fn states(&self) -> &[(String, u16)] {
        &self.states
    }

    fn spin_of_label(&self, label: &str) -> Result<u16> {
        self.states
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::BadInput(format!("unknown ground-state label {label}")))
    }

    fn label_of_spin(&self, spin: u16) -> Option<&str> {
        self.states
            .iter()
            .find(|(_, s)| *s == spin)
            .map(|(l, _)| l.as_str())
    }

    fn is_ground_spin(&self, spin: u16) -> bool {
        self.states.iter().any(|(_, s)| *s == spin)
    }

    fn half(&self) -> i64 {
        (self.cube_size - 1) / 2
    }

    /// Runs `f` over every cell of the cube centred at `cell`.
    fn for_each_cube_cell(&self, cell: &[i64], mut f: impl FnMut(&[i64])) {
        let h = self.half();
        let dim = cell.len();
        let mut delta = vec![-h; dim];
        let mut cur = vec![0i64; dim];
        loop {
            for i in 0..dim {
                cur[i] = cell[i] + delta[i];
            }
            f(&cur);
            let mut axis = dim;
            for i in (0..dim).rev() {
                delta[i] += 1;
                if delta[i] <= h {
                    axis = i;
                    break;
                }
                delta[i] = -h;
            }
            if axis == dim {
                break;
            }
        }
    }

    /// The correctness test: `Some(spin)` when every site of the cube around
    /// `t` takes the same value under `value` and that value is a constant
    /// ground state; `None` when `t` is non-correct.
    fn correct_spin(&self, t: &Site, mut value: impl FnMut(&Site) -> u16) -> Option<u16> {
        let k = self.model.num_offsets();
        let mut common: Option<u16> = None;
        let mut ok = true;
        self.for_each_cube_cell(&t.cell, |cell| {
            if !ok {
                return;
            }
            for sub in 0..k {
                let v = value(&Site::new(cell.to_vec(), sub));
                match common {
                    None => common = Some(v),
                    Some(c) if c != v => {
                        ok = false;
                        return;
                    }
                    _ => {}
                }
            }
        });
        match common {
            Some(c) if ok && self.is_ground_spin(c) => Some(c),
            _ => None,
        }
    }
}

fn check_extraction_region(region: &Region) -> Result<()> {
    if region.is_torus() {
        return Err(Error::BadInput(
            "contours are defined against a constant ground state outside; \
             use a finite box, not a torus"
                .into(),
        ));
    }
    if region.is_empty() {
        return Err(Error::BadInput("empty region".into()));
    }
    Ok(())
}

/// The boundary of `conf` relative to the constant ground state `sign`
/// outside: the sorted set of non-correct points.
///
/// The configuration must agree with the ground state near the edge of its
/// region: if any non-correct point falls outside the region or on its
/// outermost ring, the decomposition into contours would be cut off and the
/// call fails with [`Error::BoundaryTouchesEdge`] — enlarge the box.
pub fn boundary_of(
    ctx: &ContourContext,
    conf: &Configuration,
    sign: &str,
) -> Result<Vec<Site>> {
    let region = conf.region.as_ref();
    check_extraction_region(region)?;
    let q = ctx.spin_of_label(sign)?;
    let k = ctx.model.num_offsets();

    // Candidate points: everything whose cube meets the region.
    let mut cells: HashSet<Vec<i64>> = HashSet::new();
    for s in region.sites() {
        ctx.for_each_cube_cell(&s.cell, |c| {
            cells.insert(c.to_vec());
        });
    }

    let ring = crate::geometry::boundary_layer(region, 1, k)?;
    let mut non_correct = Vec::new();
    for cell in cells {
        for sub in 0..k {
            let t = Site::new(cell.clone(), sub);
            let correct = ctx
                .correct_spin(&t, |s| conf.spin_at(s).unwrap_or(q))
                .is_some();
            if correct {
                continue;
            }
            if !region.contains(&t) {
                return Err(Error::BoundaryTouchesEdge(format!(
                    "non-correct point {t} outside the box; enlarge the box"
                )));
            }
            if ring.contains(&t) {
                return Err(Error::BoundaryTouchesEdge(format!(
                    "non-correct point {t} on the box edge; enlarge the box"
                )));
            }
            non_correct.push(t);
        }
    }
    non_correct.sort();
    Ok(non_correct)
}

/// Extracts the contour family of an admissible configuration with constant
/// ground-state boundary condition `sign`.
///
/// One contour per connected component of the boundary; the pattern is the
/// configuration restricted to the component, the sign and interior labels
/// are read off the constant values the configuration takes on the adjacent
/// complement components.
pub fn extract_contours(
    ctx: &ContourContext,
    conf: &Configuration,
    sign: &str,
) -> Result<ContourFamily> {
    let q = ctx.spin_of_label(sign)?;
    let bc = BoundaryCondition::State(PeriodicState::constant(
        sign,
        q,
        ctx.model.dim(),
        ctx.model.num_offsets(),
    ));
    if !crate::model::is_admissible(ctx.model, conf, &bc)? {
        return Err(Error::Inadmissible(
            "cannot extract contours from an inadmissible configuration".into(),
        ));
    }

    let boundary = boundary_of(ctx, conf, sign)?;
    let k = ctx.model.num_offsets();
    let value = |s: &Site| conf.spin_at(s).unwrap_or(q);

    let mut contours = Vec::new();
    for support in connected_components(&boundary) {
        let pattern: Vec<u16> = support.iter().map(|s| value(s)).collect();
        let mut interiors: Vec<(String, Vec<Site>)> = Vec::new();
        let mut external_label: Option<u16> = None;
        let mut external_seen = false;
        for (comp, is_external) in complement_components(&support, k) {
            // The component's label is the constant value the configuration
            // takes on it, read at the sites hugging the support.  Peierls'
            // ground-state-on-components property makes this well defined;
            // a disagreement means the input was not a contour configuration.
            let mut label: Option<u16> = None;
            for u in &comp {
                if support.iter().all(|s| site_distance(u, s) >= 2) {
                    continue;
                }
                let v = value(u);
                match label {
                    None => label = Some(v),
                    Some(l) if l != v => {
                        return Err(Error::Internal(format!(
                            "complement component carries two values ({} and {}) \
                             next to a contour support",
                            ctx.model.spin_name(l),
                            ctx.model.spin_name(v)
                        )));
                    }
                    _ => {}
                }
            }
            let label = label.ok_or_else(|| {
                Error::Internal("complement component not adjacent to its contour".into())
            })?;
            if !ctx.is_ground_spin(label) {
                return Err(Error::Internal(format!(
                    "complement component carries non-ground value {}",
                    ctx.model.spin_name(label)
                )));
            }
            if is_external {
                if external_seen && external_label != Some(label) {
                    return Err(Error::Internal(
                        "ambiguous external component label".into(),
                    ));
                }
                external_seen = true;
                external_label = Some(label);
            } else {
                let name = ctx
                    .label_of_spin(label)
                    .expect("ground spin has a label")
                    .to_string();
                interiors.push((name, comp));
            }
        }
        let external_label = external_label
            .ok_or_else(|| Error::Internal("contour has no external component".into()))?;
        let sign_name = ctx
            .label_of_spin(external_label)
            .expect("ground spin has a label")
            .to_string();
        interiors.sort_by(|a, b| a.1.first().cmp(&b.1.first()));
        contours.push(Contour {
            sign: sign_name,
            support,
            pattern,
            interiors,
        });
    }
    contours.sort();
    Ok(ContourFamily {
        region: Arc::clone(&conf.region),
        external: sign.to_string(),
        contours,
    })
}

/// Rebuilds the unique configuration with the family's contours: each
/// contour's pattern on its support, the assigned constant ground state on
/// every complement component, the external ground state elsewhere.
///
/// Adjacent supports are rejected (they would have merged during
/// extraction).  Full compatibility of a hand-built family is certified by
/// re-extracting: `extract_contours(reconstruct(f)) = f`.
pub fn reconstruct(ctx: &ContourContext, family: &ContourFamily) -> Result<Configuration> {
    let region = family.region.as_ref();
    check_extraction_region(region)?;
    let q = ctx.spin_of_label(&family.external)?;

    for (i, a) in family.contours.iter().enumerate() {
        for (j, b) in family.contours.iter().enumerate().skip(i + 1) {
            if !supports_disconnected(a, b) {
                return Err(Error::BadInput(format!(
                    "incompatible family: supports of contours {i} and {j} are adjacent"
                )));
            }
        }
    }

    let mut conf = Configuration::constant(Arc::clone(&family.region), q);

    // Outer contours first, so that a nested contour repaints the inside of
    // the interior component it sits in.  Nesting strictly shrinks the
    // bounding box, so sorting by bounding-box volume descending works.
    let mut order: Vec<usize> = (0..family.contours.len()).collect();
    let volume = |c: &Contour| -> i128 {
        let mut lo = c.support[0].cell.clone();
        let mut hi = lo.clone();
        for s in c.support.iter() {
            for (i, v) in s.cell.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        lo.iter()
            .zip(&hi)
            .map(|(l, h)| (h - l + 1) as i128)
            .product()
    };
    order.sort_by_key(|&i| std::cmp::Reverse(volume(&family.contours[i])));

    let mut paint = |site: &Site, spin: u16| -> Result<()> {
        conf.set(site, spin).map_err(|_| {
            Error::BadInput(format!("contour site {site} lies outside the region"))
        })
    };
    for &i in &order {
        let c = &family.contours[i];
        for (label, sites) in &c.interiors {
            let spin = ctx.spin_of_label(label)?;
            for s in sites {
                paint(s, spin)?;
            }
        }
        for (s, &spin) in c.support.iter().zip(&c.pattern) {
            paint(s, spin)?;
        }
    }
    Ok(conf)
}

/// A box of whole cells spanning `lo-margin ..= hi+margin`, as a region.
fn margin_box(lo: &[i64], hi: &[i64], margin: i64, num_offsets: usize) -> Result<Region> {
    let dim = lo.len();
    let mut sites = Vec::new();
    let mut cur: Vec<i64> = lo.iter().map(|c| c - margin).collect();
    let top: Vec<i64> = hi.iter().map(|c| c + margin).collect();
    loop {
        for k in 0..num_offsets {
            sites.push(Site::new(cur.clone(), k));
        }
        let mut axis = dim;
        for i in (0..dim).rev() {
            cur[i] += 1;
            if cur[i] <= top[i] {
                axis = i;
                break;
            }
            cur[i] = lo[i] - margin;
        }
        if axis == dim {
            break;
        }
    }
    Region::from_sites(dim, sites)
}

fn bbox_of_contour(c: &Contour) -> (Vec<i64>, Vec<i64>) {
    let mut lo = c.support[0].cell.clone();
    let mut hi = lo.clone();
    let mut extend = |cell: &[i64]| {
        for i in 0..cell.len() {
            lo[i] = lo[i].min(cell[i]);
            hi[i] = hi[i].max(cell[i]);
        }
    };
    for s in &c.support {
        extend(&s.cell);
    }
    for (_, sites) in &c.interiors {
        for s in sites {
            extend(&s.cell);
        }
    }
    (lo, hi)
}

/// The contour energy Φ(Γ): the exact hamiltonian difference between the
/// configuration with the single contour Γ and the pure ground-state
/// configuration of Γ's sign, under that same boundary condition.
///
/// The value does not depend on the surrounding box once it clears the
/// contour; a margin of two cells plus the interaction radius is used.
pub fn contour_energy(ctx: &ContourContext, contour: &Contour) -> Result<BigRational> {
    let q = ctx.spin_of_label(&contour.sign)?;
    let k = ctx.model.num_offsets();
    let (lo, hi) = bbox_of_contour(contour);
    let margin = 2 + ctx.model.radius() as i64;
    let region = Arc::new(margin_box(&lo, &hi, margin, k)?);

    let family = ContourFamily {
        region: Arc::clone(&region),
        external: contour.sign.clone(),
        contours: vec![contour.clone()],
    };
    let chi = reconstruct(ctx, &family)?;
    let ground = Configuration::constant(Arc::clone(&region), q);
    let bc = BoundaryCondition::State(PeriodicState::constant(
        &contour.sign,
        q,
        ctx.model.dim(),
        k,
    ));
    let h_chi = hamiltonian(ctx.model, &chi, &bc)?;
    let h_ground = hamiltonian(ctx.model, &ground, &bc)?;
    let Some(h_ground) = h_ground.as_rational() else {
        return Err(Error::Internal(
            "ground-state configuration has infinite energy".into(),
        ));
    };
    match h_chi {
        Energy::Infinite => Err(Error::Inadmissible(
            "contour pattern is inadmissible: its reconstruction has infinite energy".into(),
        )),
        Energy::Finite(h) => Ok(h - h_ground),
    }
}

// ---------------------------------------------------------------------------
// Enumeration.

/// Flat-grid scratch space for the cell-level analysis of one candidate
/// support (single-offset fast path).
struct CellGrid {
    origin: Vec<i64>,
    dims: Vec<i64>,
    strides: Vec<i64>,
    mark: Vec<u32>,
    generation: u32,
    shape_tag: u32,
    external_tag: u32,
}

impl CellGrid {
    fn new(dim: usize) -> Self {
        CellGrid {
            origin: vec![0; dim],
            dims: vec![0; dim],
            strides: vec![0; dim],
            mark: Vec::new(),
            generation: 0,
            shape_tag: 0,
            external_tag: 0,
        }
    }

    /// Prepare the grid for a shape: frame = bounding box plus `margin`
    /// cells, enough for every cube centred on or next to the shape.
    fn load(&mut self, cells: &[&[i64]], margin: i64) {
        let dim = self.origin.len();
        for i in 0..dim {
            let lo = cells.iter().map(|c| c[i]).min().unwrap();
            let hi = cells.iter().map(|c| c[i]).max().unwrap();
            self.origin[i] = lo - margin;
            self.dims[i] = hi - lo + 1 + 2 * margin;
        }
        let mut stride = 1i64;
        for i in (0..dim).rev() {
            self.strides[i] = stride;
            stride *= self.dims[i];
        }
        let total = stride as usize;
        if self.mark.len() < total {
            self.mark.resize(total, 0);
        }
        // Three tags per shape: generation g means "unvisited complement",
        // g+1 "shape cell", g+2 "external complement".
        if self.generation > u32::MAX - 8 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.generation = 0;
        }
        self.generation += 4;
        self.shape_tag = self.generation + 1;
        self.external_tag = self.generation + 2;
        for i in 0..total {
            if self.mark[i] >= self.generation {
                self.mark[i] = 0;
            }
        }
        for c in cells {
            let idx = self.index(c).expect("shape cell inside frame");
            self.mark[idx] = self.shape_tag;
        }
    }

    fn index(&self, cell: &[i64]) -> Option<usize> {
        let mut idx = 0i64;
        for i in 0..cell.len() {
            let d = cell[i] - self.origin[i];
            if d < 0 || d >= self.dims[i] {
                return None;
            }
            idx += d * self.strides[i];
        }
        Some(idx as usize)
    }

    fn cell_of(&self, mut idx: usize) -> Vec<i64> {
        let dim = self.origin.len();
        let mut cell = vec![0i64; dim];
        for i in 0..dim {
            let s = self.strides[i] as usize;
            cell[i] = self.origin[i] + (idx / s) as i64;
            idx %= s;
        }
        cell
    }

    fn total(&self) -> usize {
        self.dims.iter().product::<i64>() as usize
    }

    fn is_shape(&self, idx: usize) -> bool {
        self.mark[idx] == self.shape_tag
    }

    /// Flood the external complement from the frame corner.
    fn flood_external(&mut self, stack: &mut Vec<usize>) {
        stack.clear();
        debug_assert!(!self.is_shape(0));
        self.mark[0] = self.external_tag;
        stack.push(0);
        let dim = self.origin.len();
        while let Some(idx) = stack.pop() {
            let cell = self.cell_of(idx);
            for axis in 0..dim {
                for step in [-1i64, 1] {
                    let mut n = cell.clone();
                    n[axis] += step;
                    if let Some(j) = self.index(&n) {
                        if self.mark[j] < self.generation {
                            self.mark[j] = self.external_tag;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }

    /// True when some cell within ℓ∞ distance `h` of `cell` is external
    /// (cells beyond the frame count as external).
    fn near_external(&self, cell: &[i64], h: i64) -> bool {
        let dim = cell.len();
        let mut delta = vec![-h; dim];
        loop {
            let mut cur = cell.to_vec();
            for i in 0..dim {
                cur[i] += delta[i];
            }
            match self.index(&cur) {
                None => return true,
                Some(j) if self.mark[j] == self.external_tag => return true,
                _ => {}
            }
            let mut axis = dim;
            for i in (0..dim).rev() {
                delta[i] += 1;
                if delta[i] <= h {
                    axis = i;
                    break;
                }
                delta[i] = -h;
            }
            if axis == dim {
                return false;
            }
        }
    }

    /// Remaining complement cells (neither shape nor external), grouped into
    /// connected components.
    fn internal_components(&mut self, stack: &mut Vec<usize>) -> Vec<Vec<Vec<i64>>> {
        let dim = self.origin.len();
        let mut comps = Vec::new();
        for start in 0..self.total() {
            if self.mark[start] >= self.generation {
                continue;
            }
            let tag = self.external_tag + 1;
            self.mark[start] = tag;
            stack.clear();
            stack.push(start);
            let mut comp = Vec::new();
            while let Some(idx) = stack.pop() {
                let cell = self.cell_of(idx);
                for axis in 0..dim {
                    for step in [-1i64, 1] {
                        let mut n = cell.clone();
                        n[axis] += step;
                        if let Some(j) = self.index(&n) {
                            if self.mark[j] < self.generation {
                                self.mark[j] = tag;
                                stack.push(j);
                            }
                        }
                    }
                }
                comp.push(cell);
            }
            comp.sort();
            comps.push(comp);
        }
        comps.sort_by(|a, b| a.first().cmp(&b.first()));
        comps
    }
}

/// Enumerates the connected site sets that contain `anchor` as their
/// lexicographically least site, up to `kmax` sites, calling `visit` once per
/// set.  The visited slice is in growth order, not sorted.
fn for_each_anchored_shape(
    dim: usize,
    num_offsets: usize,
    anchor: &Site,
    kmax: usize,
    visit: &mut impl FnMut(&[Site]),
) {
    fn neighbors(s: &Site, dim: usize, num_offsets: usize) -> Vec<Site> {
        let mut out = Vec::with_capacity(2 * dim * num_offsets + num_offsets - 1);
        for sub in 0..num_offsets {
            if sub != s.sub {
                out.push(Site::new(s.cell.clone(), sub));
            }
        }
        for axis in 0..dim {
            for step in [-1i64, 1] {
                let mut cell = s.cell.clone();
                cell[axis] += step;
                for sub in 0..num_offsets {
                    out.push(Site::new(cell.clone(), sub));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn rec(
        anchor: &Site,
        dim: usize,
        num_offsets: usize,
        kmax: usize,
        shape: &mut Vec<Site>,
        mut untried: Vec<Site>,
        seen: &mut HashSet<Site>,
        visit: &mut impl FnMut(&[Site]),
    ) {
        while let Some(u) = untried.pop() {
            shape.push(u.clone());
            visit(shape);
            if shape.len() < kmax {
                let mut added = Vec::new();
                let mut child = untried.clone();
                for v in neighbors(&u, dim, num_offsets) {
                    if v > *anchor && seen.insert(v.clone()) {
                        child.push(v.clone());
                        added.push(v);
                    }
                }
                rec(anchor, dim, num_offsets, kmax, shape, child, seen, visit);
                for v in added {
                    seen.remove(&v);
                }
            }
            shape.pop();
        }
    }

    let mut shape = vec![anchor.clone()];
    visit(&shape);
    if kmax <= 1 {
        return;
    }
    let mut seen: HashSet<Site> = HashSet::new();
    seen.insert(anchor.clone());
    let mut untried = Vec::new();
    for v in neighbors(anchor, dim, num_offsets) {
        if v > *anchor && seen.insert(v.clone()) {
            untried.push(v);
        }
    }
    rec(
        anchor,
        dim,
        num_offsets,
        kmax,
        &mut shape,
        untried,
        &mut seen,
        visit,
    );
}

/// Candidate analysis shared by the fast and generic paths: solve for the
/// patterns and interior labels that make `shape` exactly the non-correct
/// set, and push every resulting contour.
struct ShapeCase {
    /// Sorted support.
    support: Vec<Site>,
    /// Support sites not pinned to the external ground state (indices into
    /// `support`).  A site whose cube reaches the external component is
    /// pinned: correctness of the adjacent external points forces it.
    free: Vec<usize>,
    /// Interior components (site lists, sorted).
    interiors: Vec<Vec<Site>>,
    /// Complement sites whose cube meets the support (they must stay correct).
    watchers: Vec<Site>,
}

fn solve_case(
    ctx: &ContourContext,
    sign: &str,
    q: u16,
    case: &ShapeCase,
    out: &mut Vec<Contour>,
) -> Result<()> {
    let num_spins = ctx.model.num_spins() as u16;
    let n_free = case.free.len();
    let n_int = case.interiors.len();
    let n_states = ctx.states.len();

    let combos = (ctx.model.num_spins() as u64)
        .checked_pow(n_free as u32)
        .and_then(|p| p.checked_mul((n_states as u64).checked_pow(n_int as u32)?));
    match combos {
        Some(c) if c <= 1_000_000 => {}
        _ => {
            return Err(Error::CapExceeded {
                what: "contour pattern combinations".into(),
                needed: combos.map_or_else(|| "overflow".into(), |c| c.to_string()),
                cap: "1000000".into(),
            })
        }
    }

    // Index support sites and interior components for value lookup.
    let site_index: HashMap<&Site, usize> =
        case.support.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut interior_index: HashMap<&Site, usize> = HashMap::new();
    for (ci, comp) in case.interiors.iter().enumerate() {
        for s in comp {
            interior_index.insert(s, ci);
        }
    }

    let mut pattern: Vec<u16> = vec![q; case.support.len()];
    let mut labels: Vec<u16> = vec![0; n_int];
    let mut free_digits: Vec<u16> = vec![0; n_free];
    let mut label_digits: Vec<usize> = vec![0; n_int];

    loop {
        for (i, &si) in case.free.iter().enumerate() {
            pattern[si] = free_digits[i];
        }
        for (i, &d) in label_digits.iter().enumerate() {
            labels[i] = ctx.states[d].1;
        }

        let value = |s: &Site| -> u16 {
            if let Some(&i) = site_index.get(s) {
                pattern[i]
            } else if let Some(&ci) = interior_index.get(s) {
                labels[ci]
            } else {
                q
            }
        };

        let mut valid = true;
        // Every complement point near the support must stay correct.
        for u in &case.watchers {
            if ctx.correct_spin(u, value).is_none() {
                valid = false;
                break;
            }
        }
        // Every support point must be non-correct.
        if valid {
            for t in &case.support {
                if ctx.correct_spin(t, value).is_some() {
                    valid = false;
                    break;
                }
            }
        }
        if valid {
            let interiors: Vec<(String, Vec<Site>)> = case
                .interiors
                .iter()
                .zip(&labels)
                .map(|(comp, &spin)| {
                    let name = ctx
                        .label_of_spin(spin)
                        .expect("ground spin has a label")
                        .to_string();
                    (name, comp.clone())
                })
                .collect();
            let candidate = Contour {
                sign: sign.to_string(),
                support: case.support.clone(),
                pattern: pattern.clone(),
                interiors,
            };
            // Keep only admissible patterns: Φ(Γ) must be finite.
            match contour_energy(ctx, &candidate) {
                Ok(_) => out.push(candidate),
                Err(Error::Inadmissible(_)) => {}
                Err(e) => return Err(e),
            }
        }

        // Advance the mixed-radix counter over free sites and labels.
        let mut carried = true;
        for d in free_digits.iter_mut() {
            *d += 1;
            if *d < num_spins {
                carried = false;
                break;
            }
            *d = 0;
        }
        if carried {
            for d in label_digits.iter_mut() {
                *d += 1;
                if *d < n_states {
                    carried = false;
                    break;
                }
                *d = 0;
            }
        }
        if carried {
            break;
        }
    }
    Ok(())
}

/// All contours of the given sign whose support has `anchor` as its
/// lexicographically least site, with support size at most `kmax`
/// (translation representatives).  Every output has been validated: its
/// reconstruction extracts back to exactly itself.
pub fn enumerate_contours(
    ctx: &ContourContext,
    sign: &str,
    kmax: usize,
    anchor: &Site,
) -> Result<Vec<Contour>> {
    if kmax == 0 {
        return Ok(Vec::new());
    }
    if kmax > MAX_ENUMERATION_SUPPORT {
        return Err(Error::CapExceeded {
            what: "contour support size".into(),
            needed: kmax.to_string(),
            cap: MAX_ENUMERATION_SUPPORT.to_string(),
        });
    }
    let q = ctx.spin_of_label(sign)?;
    let dim = ctx.model.dim();
    let k = ctx.model.num_offsets();
    if anchor.cell.len() != dim {
        return Err(Error::BadInput(format!(
            "anchor has {} coordinates in a {dim}-dimensional model",
            anchor.cell.len()
        )));
    }
    if anchor.sub >= k {
        return Err(Error::BadInput(format!(
            "anchor offset index {} out of range (model has {k})",
            anchor.sub
        )));
    }

    let origin = Site::new(vec![0; dim], anchor.sub);
    let h = ctx.half();
    let mut grid = CellGrid::new(dim);
    let mut stack: Vec<usize> = Vec::new();
    let mut found: Vec<Contour> = Vec::new();
    let mut deferred: Option<Error> = None;

    let mut handle = |shape: &[Site]| {
        if deferred.is_some() {
            return;
        }
        // A point of the support with its whole cube clear of the external
        // component needs a full cube of support/interior sites around it;
        // in two dimensions with cube size 3 that takes at least 9 sites.
        if k == 1 && dim == 2 && ctx.cube_size == 3 && shape.len() < 9 {
            return;
        }
        let mut case = if k == 1 {
            let cells: Vec<&[i64]> = shape.iter().map(|s| s.cell.as_slice()).collect();
            grid.load(&cells, h);
            grid.flood_external(&mut stack);
            let mut support: Vec<Site> = shape.to_vec();
            support.sort();
            let mut free = Vec::new();
            for (i, s) in support.iter().enumerate() {
                if !grid.near_external(&s.cell, h) {
                    free.push(i);
                }
            }
            if free.is_empty() {
                // Correctness of the adjacent external points pins every
                // support site to the external ground state; the interior
                // labels are then forced to match and no point of the
                // support can be non-correct.
                return;
            }
            let interiors: Vec<Vec<Site>> = grid
                .internal_components(&mut stack)
                .into_iter()
                .map(|comp| comp.into_iter().map(|c| Site::new(c, 0)).collect())
                .collect();
            let mut watchers = Vec::new();
            for idx in 0..grid.total() {
                if grid.is_shape(idx) {
                    continue;
                }
                let cell = grid.cell_of(idx);
                let mut near = false;
                grid_near_shape(&grid, &cell, h, &mut near);
                if near {
                    watchers.push(Site::new(cell, 0));
                }
            }
            ShapeCase {
                support,
                free,
                interiors,
                watchers,
            }
        } else {
            // Generic path for multi-offset point sets: materialize the
            // margin-h frame and classify its complement by hand.
            let mut support: Vec<Site> = shape.to_vec();
            support.sort();
            let mut lo = support[0].cell.clone();
            let mut hi = lo.clone();
            for s in &support {
                for i in 0..dim {
                    lo[i] = lo[i].min(s.cell[i]);
                    hi[i] = hi[i].max(s.cell[i]);
                }
            }
            let frame = match margin_box(&lo, &hi, h, k) {
                Ok(f) => f,
                Err(e) => {
                    deferred = Some(e);
                    return;
                }
            };
            let support_set: HashSet<&Site> = support.iter().collect();
            let complement: Vec<Site> = frame
                .sites()
                .iter()
                .filter(|s| !support_set.contains(s))
                .cloned()
                .collect();
            let on_frame_edge = |s: &Site| {
                s.cell
                    .iter()
                    .enumerate()
                    .any(|(i, c)| *c == lo[i] - h || *c == hi[i] + h)
            };
            let mut interiors = Vec::new();
            let mut external_cells: HashSet<Vec<i64>> = HashSet::new();
            for comp in connected_components(&complement) {
                if comp.iter().any(on_frame_edge) {
                    for s in &comp {
                        external_cells.insert(s.cell.clone());
                    }
                } else {
                    interiors.push(comp);
                }
            }
            let near_external = |cell: &[i64]| -> bool {
                let mut near = false;
                ctx.for_each_cube_cell(cell, |c| {
                    if !near && external_cells.contains(c) {
                        near = true;
                    }
                });
                near
            };
            let mut free = Vec::new();
            for (i, s) in support.iter().enumerate() {
                if !near_external(&s.cell) {
                    free.push(i);
                }
            }
            if free.is_empty() {
                return;
            }
            let support_cells: HashSet<&[i64]> =
                support.iter().map(|s| s.cell.as_slice()).collect();
            let mut watchers = Vec::new();
            for u in &complement {
                let mut near = false;
                ctx.for_each_cube_cell(&u.cell, |c| {
                    if !near && support_cells.contains(c) {
                        near = true;
                    }
                });
                if near {
                    watchers.push(u.clone());
                }
            }
            ShapeCase {
                support,
                free,
                interiors,
                watchers,
            }
        };
        case.watchers.sort();
        case.watchers.dedup();
        let mut out = Vec::new();
        if let Err(e) = solve_case(ctx, sign, q, &case, &mut out) {
            deferred = Some(e);
            return;
        }
        found.append(&mut out);
    };

    for_each_anchored_shape(dim, k, &origin, kmax, &mut handle);
    if let Some(e) = deferred {
        return Err(e);
    }

    // Validate every survivor by a full round trip, then move it to the
    // requested anchor.
    let mut validated = Vec::new();
    for c in found {
        let (lo, hi) = bbox_of_contour(&c);
        let margin = 2 + ctx.model.radius() as i64;
        let region = Arc::new(margin_box(&lo, &hi, margin, k)?);
        let family = ContourFamily {
            region: Arc::clone(&region),
            external: c.sign.clone(),
            contours: vec![c.clone()],
        };
        let chi = reconstruct(ctx, &family)?;
        let back = extract_contours(ctx, &chi, &c.sign)?;
        if back.contours != vec![c.clone()] {
            return Err(Error::Internal(format!(
                "enumerated contour failed its round trip (support size {})",
                c.size()
            )));
        }
        validated.push(c.translated(&anchor.cell));
    }
    validated.sort();
    Ok(validated)
}

fn grid_near_shape(grid: &CellGrid, cell: &[i64], h: i64, near: &mut bool) {
    let dim = cell.len();
    let mut delta = vec![-h; dim];
    loop {
        let mut cur = cell.to_vec();
        for i in 0..dim {
            cur[i] += delta[i];
        }
        if let Some(j) = grid.index(&cur) {
            if grid.is_shape(j) {
                *near = true;
                return;
            }
        }
        let mut axis = dim;
        for i in (0..dim).rev() {
            delta[i] += 1;
            if delta[i] <= h {
                axis = i;
                break;
            }
            delta[i] = -h;
        }
        if axis == dim {
            return;
        }
    }
}

/// Report of a Peierls-constant estimation run.
#[derive(Clone, Debug)]
pub struct PeierlsReport {
    pub kmax: usize,
    /// Total contours enumerated over all signs.
    pub contours_checked: usize,
    /// min Φ(Γ)/|supp Γ|, or None when no contour exists up to kmax.
    pub tau_hat: Option<BigRational>,
    /// A contour attaining the minimum.
    pub witness: Option<Contour>,
    /// Φ of the witness.
    pub witness_energy: Option<BigRational>,
}

impl PeierlsReport {
    /// True when a contour of non-positive energy was found (the Peierls
    /// condition fails outright).
    pub fn violated(&self) -> bool {
        self.tau_hat
            .as_ref()
            .is_some_and(|t| *t <= BigRational::from(BigInt::from(0)))
    }
}

/// Estimates the Peierls constant: the minimum of Φ(Γ)/|supp Γ| over all
/// contours of every sign with support size at most `kmax`.  The result is a
/// certified bound for contours up to `kmax` only; larger supports are
/// unchecked.
pub fn peierls_estimate(ctx: &ContourContext, kmax: usize) -> Result<PeierlsReport> {
    let dim = ctx.model.dim();
    let mut checked = 0usize;
    let mut best: Option<(BigRational, Contour, BigRational)> = None;
    for (label, _) in ctx.states.iter() {
        for sub in 0..ctx.model.num_offsets() {
            let anchor = Site::new(vec![0; dim], sub);
            for c in enumerate_contours(ctx, label, kmax, &anchor)? {
                let phi = contour_energy(ctx, &c)?;
                let ratio = phi.clone() / BigRational::from(BigInt::from(c.size() as i64));
                checked += 1;
                let better = match &best {
                    None => true,
                    Some((r, _, _)) => ratio < *r,
                };
                if better {
                    best = Some((ratio, c, phi));
                }
            }
        }
    }
    let (tau_hat, witness, witness_energy) = match best {
        None => (None, None, None),
        Some((r, c, phi)) => (Some(r), Some(c), Some(phi)),
    };
    Ok(PeierlsReport {
        kmax,
        contours_checked: checked,
        tau_hat,
        witness,
        witness_energy,
    })
}

// ---------------------------------------------------------------------------
// Line records.

fn site_to_text(s: &Site) -> String {
    let mut out = String::new();
    for c in &s.cell {
        let _ = write!(out, "{c},");
    }
    let _ = write!(out, "{}", s.sub);
    out
}

fn parse_site(model: &Model, text: &str) -> Result<Site> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != model.dim() + 1 {
        return Err(parse_err(format!(
            "site `{text}` needs {} coordinates plus an offset index",
            model.dim()
        )));
    }
    let mut cell = Vec::with_capacity(model.dim());
    for p in &parts[..model.dim()] {
        cell.push(
            p.parse::<i64>()
                .map_err(|_| parse_err(format!("bad coordinate `{p}`")))?,
        );
    }
    let sub: usize = parts[model.dim()]
        .parse()
        .map_err(|_| parse_err(format!("bad offset index `{}`", parts[model.dim()])))?;
    if sub >= model.num_offsets() {
        return Err(parse_err(format!(
            "offset index {sub} out of range (model has {})",
            model.num_offsets()
        )));
    }
    Ok(Site::new(cell, sub))
}

fn parse_err(msg: String) -> Error {
    Error::Parse { line: 1, msg }
}

/// Serializes a contour as a single `contour ...` line.
pub fn contour_to_text(model: &Model, c: &Contour) -> String {
    let mut out = String::from("contour");
    let _ = write!(out, " sign={}", c.sign);
    let support: Vec<String> = c.support.iter().map(site_to_text).collect();
    let _ = write!(out, " support={}", support.join("|"));
    let pattern: Vec<&str> = c
        .pattern
        .iter()
        .map(|&s| model.spin_name(s))
        .collect();
    let _ = write!(out, " pattern={}", pattern.join("|"));
    if c.interiors.is_empty() {
        let _ = write!(out, " interiors=-");
    } else {
        let entries: Vec<String> = c
            .interiors
            .iter()
            .map(|(label, sites)| {
                let ss: Vec<String> = sites.iter().map(site_to_text).collect();
                format!("{label}:{}", ss.join("|"))
            })
            .collect();
        let _ = write!(out, " interiors={}", entries.join(";"));
    }
    out
}

/// Parses a `contour ...` line produced by [`contour_to_text`].
///
/// Validates syntax, spin names, site arity, and support connectivity, and
/// canonicalizes the ordering.  Whether the record is a valid contour of a
/// given ground-state set is decided by the contour operations themselves.
pub fn parse_contour(model: &Model, line: &str) -> Result<Contour> {
    let mut tokens = line.split_whitespace();
    match tokens.next() {
        Some("contour") => {}
        _ => return Err(parse_err("expected a `contour` record".into())),
    }
    let mut sign: Option<String> = None;
    let mut support: Option<Vec<Site>> = None;
    let mut pattern: Option<Vec<u16>> = None;
    let mut interiors: Option<Vec<(String, Vec<Site>)>> = None;
    for tok in tokens {
        let Some((key, val)) = tok.split_once('=') else {
            return Err(parse_err(format!("expected key=value, got `{tok}`")));
        };
        match key {
            "sign" => {
                if model.spin_index(val).is_none() {
                    return Err(parse_err(format!("unknown spin `{val}` in sign")));
                }
                sign = Some(val.to_string());
            }
            "support" => {
                let mut sites = Vec::new();
                for s in val.split('|') {
                    sites.push(parse_site(model, s)?);
                }
                support = Some(sites);
            }
            "pattern" => {
                let mut spins = Vec::new();
                for name in val.split('|') {
                    let Some(idx) = model.spin_index(name) else {
                        return Err(parse_err(format!("unknown spin `{name}` in pattern")));
                    };
                    spins.push(idx);
                }
                pattern = Some(spins);
            }
            "interiors" => {
                let mut entries = Vec::new();
                if val != "-" {
                    for entry in val.split(';') {
                        let Some((label, sites_text)) = entry.split_once(':') else {
                            return Err(parse_err(format!(
                                "interior entry `{entry}` needs label:sites"
                            )));
                        };
                        if model.spin_index(label).is_none() {
                            return Err(parse_err(format!(
                                "unknown spin `{label}` in interior label"
                            )));
                        }
                        let mut sites = Vec::new();
                        for s in sites_text.split('|') {
                            sites.push(parse_site(model, s)?);
                        }
                        sites.sort();
                        sites.dedup();
                        if sites.is_empty() {
                            return Err(parse_err("empty interior component".into()));
                        }
                        entries.push((label.to_string(), sites));
                    }
                }
                interiors = Some(entries);
            }
            other => return Err(parse_err(format!("unknown key `{other}`"))),
        }
    }
    let sign = sign.ok_or_else(|| parse_err("missing sign".into()))?;
    let support = support.ok_or_else(|| parse_err("missing support".into()))?;
    let pattern = pattern.ok_or_else(|| parse_err("missing pattern".into()))?;
    let mut interiors = interiors.unwrap_or_default();
    if support.len() != pattern.len() {
        return Err(parse_err(format!(
            "support has {} sites but pattern has {} spins",
            support.len(),
            pattern.len()
        )));
    }
    let mut paired: Vec<(Site, u16)> = support.into_iter().zip(pattern).collect();
    paired.sort();
    for w in paired.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(parse_err(format!("repeated support site {}", w[0].0)));
        }
    }
    let support: Vec<Site> = paired.iter().map(|(s, _)| s.clone()).collect();
    let pattern: Vec<u16> = paired.iter().map(|(_, p)| *p).collect();
    if connected_components(&support).len() != 1 {
        return Err(parse_err("support is not connected".into()));
    }
    interiors.sort_by(|a, b| a.1.first().cmp(&b.1.first()));
    Ok(Contour {
        sign,
        support,
        pattern,
        interiors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundstates::find_ground_states;
    use crate::model::parse_model;

    fn ising2d() -> Model {
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

    fn ising_ctx(model: &Model) -> ContourContext<'_> {
        let gs = find_ground_states(model, 2, 1_000_000).unwrap();
        ContourContext::new(model, &gs.states).unwrap()
    }

    fn plus_box(n: i64) -> Configuration {
        let region = Arc::new(Region::cell_box(&[n, n], 1).unwrap());
        Configuration::constant(region, 0)
    }

    fn flip(conf: &mut Configuration, x: i64, y: i64) {
        let s = Site::at(&[x, y]);
        let cur = conf.spin_at(&s).unwrap();
        conf.set(&s, 1 - cur).unwrap();
    }

    #[test]
    fn ground_state_has_empty_boundary() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let conf = plus_box(5);
        assert!(boundary_of(&ctx, &conf, "plus").unwrap().is_empty());
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert!(family.contours.is_empty());
    }

    #[test]
    fn single_flip_gives_one_nine_site_contour() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let mut conf = plus_box(5);
        flip(&mut conf, 2, 2);
        let boundary = boundary_of(&ctx, &conf, "plus").unwrap();
        assert_eq!(boundary.len(), 9);
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(family.contours.len(), 1);
        let c = &family.contours[0];
        assert_eq!(c.size(), 9);
        assert_eq!(c.sign, "plus");
        assert!(c.interiors.is_empty());
        // Pattern: plus shell, minus centre.
        let minus_count = c.pattern.iter().filter(|&&p| p == 1).count();
        assert_eq!(minus_count, 1);
        let phi = contour_energy(&ctx, c).unwrap();
        assert_eq!(phi, BigRational::from(BigInt::from(8)));
    }

    #[test]
    fn flip_near_the_edge_is_rejected() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        for (x, y) in [(0, 0), (1, 1), (4, 2)] {
            let mut conf = plus_box(5);
            flip(&mut conf, x, y);
            match extract_contours(&ctx, &conf, "plus") {
                Err(Error::BoundaryTouchesEdge(_)) => {}
                other => panic!("expected edge error for flip at ({x},{y}), got {other:?}"),
            }
        }
    }

    #[test]
    fn two_distant_flips_give_two_contours() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let region = Arc::new(Region::cell_box(&[9, 5], 1).unwrap());
        let mut conf = Configuration::constant(region, 0);
        flip(&mut conf, 2, 2);
        flip(&mut conf, 6, 2);
        let boundary = boundary_of(&ctx, &conf, "plus").unwrap();
        assert_eq!(boundary.len(), 18);
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(family.contours.len(), 2);
        // Energy factorization: H(χ) − H(ground) = ΣΦ(Γ).
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let h_chi = hamiltonian(&model, &conf, &bc).unwrap();
        let ground = Configuration::constant(Arc::clone(&conf.region), 0);
        let h_gs = hamiltonian(&model, &ground, &bc).unwrap();
        let delta = h_chi.as_rational().unwrap() - h_gs.as_rational().unwrap();
        let phi_sum: BigRational = family
            .contours
            .iter()
            .map(|c| contour_energy(&ctx, c).unwrap())
            .sum();
        assert_eq!(delta, phi_sum);
        assert_eq!(phi_sum, BigRational::from(BigInt::from(16)));
    }

    #[test]
    fn adjacent_pair_flip_merges_into_one_contour() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let mut conf = plus_box(7);
        flip(&mut conf, 3, 3);
        flip(&mut conf, 4, 3);
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(family.contours.len(), 1);
        assert_eq!(family.contours[0].size(), 12);
        let phi = contour_energy(&ctx, &family.contours[0]).unwrap();
        assert_eq!(phi, BigRational::from(BigInt::from(12)));
    }

    #[test]
    fn droplet_has_a_labeled_interior() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let mut conf = plus_box(15);
        for x in 5..=9 {
            for y in 5..=9 {
                flip(&mut conf, x, y);
            }
        }
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(family.contours.len(), 1);
        let c = &family.contours[0];
        assert_eq!(c.size(), 40);
        assert_eq!(c.sign, "plus");
        assert_eq!(c.interiors.len(), 1);
        let (label, sites) = &c.interiors[0];
        assert_eq!(label, "minus");
        assert_eq!(sites.len(), 9);
        assert!(sites.contains(&Site::at(&[7, 7])));
        let phi = contour_energy(&ctx, c).unwrap();
        assert_eq!(phi, BigRational::from(BigInt::from(40)));
        // Round trip back to the very same configuration.
        let rebuilt = reconstruct(&ctx, &family).unwrap();
        assert_eq!(rebuilt, conf);
        let again = extract_contours(&ctx, &rebuilt, "plus").unwrap();
        assert_eq!(again, family);
    }

    #[test]
    fn reconstruct_rejects_adjacent_supports() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        // Two single-flip contours whose 3×3 supports touch.
        let mut conf = plus_box(9);
        flip(&mut conf, 2, 4);
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        let c1 = family.contours[0].clone();
        let c2 = c1.translated(&[3, 0]);
        let bad = ContourFamily {
            region: Arc::clone(&family.region),
            external: "plus".into(),
            contours: vec![c1.clone(), c2],
        };
        match reconstruct(&ctx, &bad) {
            Err(Error::BadInput(msg)) => assert!(msg.contains("adjacent")),
            other => panic!("expected adjacency error, got {other:?}"),
        }
        // Distance 2 is fine.
        let c3 = c1.translated(&[4, 0]);
        let good = ContourFamily {
            region: Arc::clone(&family.region),
            external: "plus".into(),
            contours: vec![c1, c3],
        };
        let chi = reconstruct(&ctx, &good).unwrap();
        let back = extract_contours(&ctx, &chi, "plus").unwrap();
        assert_eq!(back.contours.len(), 2);
    }

    #[test]
    fn anchored_shape_counts_match_the_classic_sequence() {
        let expected = [1u64, 2, 6, 19, 63, 216, 760, 2725, 9910, 36446];
        let mut counts = vec![0u64; expected.len()];
        let anchor = Site::at(&[0, 0]);
        for_each_anchored_shape(2, 1, &anchor, expected.len(), &mut |shape: &[Site]| {
            counts[shape.len() - 1] += 1;
        });
        assert_eq!(counts, expected);
    }

    #[test]
    fn no_ising_contour_has_support_below_nine() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let found = enumerate_contours(&ctx, "plus", 8, &Site::at(&[0, 0])).unwrap();
        assert!(found.is_empty());
    }

    #[test]
    fn the_single_flip_is_the_unique_size_nine_contour() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        for sign in ["plus", "minus"] {
            let found = enumerate_contours(&ctx, sign, 9, &Site::at(&[0, 0])).unwrap();
            assert_eq!(found.len(), 1);
            let c = &found[0];
            assert_eq!(c.size(), 9);
            assert_eq!(c.sign, sign);
            assert!(c.interiors.is_empty());
            let phi = contour_energy(&ctx, c).unwrap();
            assert_eq!(phi, BigRational::from(BigInt::from(8)));
        }
    }

    #[test]
    fn size_twelve_adds_exactly_the_two_pair_flips() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let found = enumerate_contours(&ctx, "plus", 12, &Site::at(&[0, 0])).unwrap();
        assert_eq!(found.len(), 3);
        let mut sizes: Vec<usize> = found.iter().map(Contour::size).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![9, 12, 12]);
        for c in &found {
            if c.size() == 12 {
                let phi = contour_energy(&ctx, c).unwrap();
                assert_eq!(phi, BigRational::from(BigInt::from(12)));
            }
        }
    }

    #[test]
    fn hard_square_contour_is_one_inserted_particle() {
        let model = hard_square();
        let gs = find_ground_states(&model, 2, 1_000_000).unwrap();
        let ctx = ContourContext::new(&model, &gs.states).unwrap();
        let found = enumerate_contours(&ctx, "empty", 9, &Site::at(&[0, 0])).unwrap();
        assert_eq!(found.len(), 1);
        let c = &found[0];
        assert_eq!(c.size(), 9);
        let phi = contour_energy(&ctx, c).unwrap();
        assert_eq!(phi, BigRational::from(BigInt::from(1)));
        let report = peierls_estimate(&ctx, 9).unwrap();
        assert_eq!(
            report.tau_hat.clone().unwrap(),
            BigRational::new(BigInt::from(1), BigInt::from(9))
        );
        assert!(!report.violated());
    }

    #[test]
    fn peierls_estimate_for_ising_is_eight_ninths() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let report = peierls_estimate(&ctx, 9).unwrap();
        assert_eq!(report.contours_checked, 2);
        assert_eq!(
            report.tau_hat.clone().unwrap(),
            BigRational::new(BigInt::from(8), BigInt::from(9))
        );
        assert_eq!(report.witness.as_ref().unwrap().size(), 9);
        assert!(!report.violated());
    }

    #[test]
    fn peierls_estimate_scales_with_the_coupling() {
        // Ising with J = 2: every bond costs twice as much.
        let text = "\
dimension 2
basis 1 0
basis 0 1
spins plus minus
term
  site 0 0 0
  site 1 0 0
  default 2
  value plus plus -2
  value minus minus -2
end
term
  site 0 0 0
  site 0 1 0
  default 2
  value plus plus -2
  value minus minus -2
end
";
        let model = crate::model::parse_model(text).unwrap();
        let gs = find_ground_states(&model, 2, 1_000_000).unwrap();
        let ctx = ContourContext::new(&model, &gs.states).unwrap();
        let report = peierls_estimate(&ctx, 9).unwrap();
        assert_eq!(
            report.tau_hat.clone().unwrap(),
            BigRational::new(BigInt::from(16), BigInt::from(9))
        );
    }

    #[test]
    fn a_degenerate_model_reports_a_zero_cost_witness() {
        // No interaction at all: both constants are ground states and any
        // island costs nothing.
        let text = "\
dimension 2
basis 1 0
basis 0 1
spins a b
term
  site 0 0 0
  default 0
end
";
        let model = crate::model::parse_model(text).unwrap();
        let gs = find_ground_states(&model, 2, 1_000_000).unwrap();
        // Everything is a ground state here; the contour analysis makes
        // sense relative to the constant ones.
        let constants: Vec<_> = gs
            .states
            .iter()
            .filter(|s| s.is_constant().is_some())
            .cloned()
            .collect();
        assert_eq!(constants.len(), 2);
        let ctx = ContourContext::new(&model, &constants).unwrap();
        let report = peierls_estimate(&ctx, 9).unwrap();
        assert!(report.contours_checked > 0);
        assert_eq!(
            report.tau_hat.as_ref().unwrap(),
            &BigRational::from(BigInt::from(0))
        );
        assert!(report.violated());
        assert!(report.witness.is_some());
    }

    #[test]
    fn no_contours_below_the_cap_reports_none() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let report = peierls_estimate(&ctx, 8).unwrap();
        assert_eq!(report.contours_checked, 0);
        assert!(report.tau_hat.is_none());
        assert!(report.witness.is_none());
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        match enumerate_contours(&ctx, "plus", 13, &Site::at(&[0, 0])) {
            Err(Error::CapExceeded { .. }) => {}
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn contour_records_round_trip() {
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let mut conf = plus_box(15);
        for x in 5..=9 {
            for y in 5..=9 {
                flip(&mut conf, x, y);
            }
        }
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        let c = &family.contours[0];
        let line = contour_to_text(&model, c);
        assert!(line.starts_with("contour sign=plus support="));
        let back = parse_contour(&model, &line).unwrap();
        assert_eq!(&back, c);
    }

    #[test]
    fn contour_record_errors_are_reported() {
        let model = ising2d();
        let bad = [
            "boundary sign=plus support=0,0,0 pattern=minus interiors=-",
            "contour sign=up support=0,0,0 pattern=minus interiors=-",
            "contour sign=plus support=0,0 pattern=minus interiors=-",
            "contour sign=plus support=0,0,0 pattern=minus|plus interiors=-",
            "contour sign=plus support=0,0,0|5,5,0 pattern=minus|minus interiors=-",
            "contour sign=plus support=0,0,0|0,0,0 pattern=minus|minus interiors=-",
            "contour sign=plus support=0,0,0 pattern=minus interiors=plus",
            "contour sign=plus support=0,0,0 pattern=minus extra=1",
        ];
        for line in bad {
            assert!(
                matches!(parse_contour(&model, line), Err(Error::Parse { .. })),
                "expected parse error for `{line}`"
            );
        }
    }

    #[test]
    fn nested_contours_extract_and_rebuild() {
        // A minus droplet big enough to carry a plus flip deep inside it.
        let model = ising2d();
        let ctx = ising_ctx(&model);
        let mut conf = plus_box(19);
        for x in 4..=14 {
            for y in 4..=14 {
                flip(&mut conf, x, y);
            }
        }
        // Back to plus at the centre: a nested contour of sign minus.
        flip(&mut conf, 9, 9);
        let family = extract_contours(&ctx, &conf, "plus").unwrap();
        assert_eq!(family.contours.len(), 2);
        let signs: Vec<&str> = family.contours.iter().map(|c| c.sign.as_str()).collect();
        assert!(signs.contains(&"plus"));
        assert!(signs.contains(&"minus"));
        let rebuilt = reconstruct(&ctx, &family).unwrap();
        assert_eq!(rebuilt, conf);
        // Energy factorization with a nested family.
        let bc = BoundaryCondition::State(PeriodicState::constant("plus", 0, 2, 1));
        let h_chi = hamiltonian(&model, &conf, &bc).unwrap();
        let ground = Configuration::constant(Arc::clone(&conf.region), 0);
        let h_gs = hamiltonian(&model, &ground, &bc).unwrap();
        let delta = h_chi.as_rational().unwrap() - h_gs.as_rational().unwrap();
        let phi_sum: BigRational = family
            .contours
            .iter()
            .map(|c| contour_energy(&ctx, c).unwrap())
            .sum();
        assert_eq!(delta, phi_sum);
    }
}
