//! Lattices, periodic point sets, regions and their combinatorics.
//!
//! Points live on a periodic point set: a finite union of disjoint translates
//! of B·Zᵛ, addressed as (cell, offset-index) pairs. All distances are the
//! ℓ¹ norm of cell-coordinate differences, so adjacency means "differ by one
//! step along one axis" (2ν neighbours); diagonal cells are not adjacent.
//! Matrix and offset arithmetic is exact rational so membership tests never
//! depend on floating-point rounding.

use crate::{Error, Result};
use num::BigRational;
use num::{BigInt, One, Signed, Zero};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

/// A site of a periodic point set: the point B·cell + offsets\[sub\].
///
/// Ordering is lexicographic by cell coordinates, then by offset index; the
/// "lexicographically least site" of a set is its minimum under this order.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Site {
    pub cell: Vec<i64>,
    pub sub: usize,
}

impl Site {
    pub fn new(cell: Vec<i64>, sub: usize) -> Self {
        Site { cell, sub }
    }

    /// Site of Zᵛ proper (single zero offset).
    pub fn at(cell: &[i64]) -> Self {
        Site {
            cell: cell.to_vec(),
            sub: 0,
        }
    }

    pub fn translated(&self, shift: &[i64]) -> Self {
        let cell = self
            .cell
            .iter()
            .zip(shift)
            .map(|(a, b)| a + b)
            .collect();
        Site {
            cell,
            sub: self.sub,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.cell.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "):{}", self.sub)
    }
}

/// ℓ¹ norm of a cell vector: Σᵢ |tᵢ|.
pub fn lattice_norm(t: &[i64]) -> u64 {
    t.iter().map(|c| c.unsigned_abs()).sum()
}

/// ℓ¹ distance between two sites in cell coordinates. Offset indices do not
/// contribute: distinct points of the same cell are at distance zero, which
/// matches the convention that boundary layers and cube neighbourhoods are
/// taken cell-wise.
pub fn site_distance(a: &Site, b: &Site) -> u64 {
    a.cell
        .iter()
        .zip(&b.cell)
        .map(|(x, y)| x.abs_diff(*y))
        .sum()
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact inverse of a square rational matrix (rows of `m` are matrix rows).
/// Returns an error when the matrix is singular.
pub fn invert_matrix(m: &[Vec<BigRational>]) -> Result<Vec<Vec<BigRational>>> {
    let n = m.len();
    for row in m {
        if row.len() != n {
            return Err(Error::Geometry("basis matrix is not square".into()));
        }
    }
    // Gauss-Jordan on [m | I].
    let mut a: Vec<Vec<BigRational>> = m.to_vec();
    let mut inv: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        BigRational::one()
                    } else {
                        BigRational::zero()
                    }
                })
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).ok_or_else(|| {
            Error::Geometry("basis matrix is singular (det = 0)".into())
        })?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col].clone();
        for j in 0..n {
            a[col][j] = &a[col][j] / &p;
            inv[col][j] = &inv[col][j] / &p;
        }
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for j in 0..n {
                    a[r][j] = &a[r][j] - &f * &a[col][j];
                    inv[r][j] = &inv[r][j] - &f * &inv[col][j];
                }
            }
        }
    }
    Ok(inv)
}

fn mat_vec(m: &[Vec<BigRational>], v: &[BigRational]) -> Vec<BigRational> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// A periodic point set: the disjoint union over k of B·Zᵛ + offsets\[k\].
///
/// `basis` holds the rows of the ν×ν matrix B; `offsets` are points of the
/// fundamental parallelepiped F (spanned by the columns of B), pairwise
/// distinct modulo B·Zᵛ.
#[derive(Clone, Debug)]
pub struct PointSet {
    dim: usize,
    basis: Vec<Vec<BigRational>>,
    inverse: Vec<Vec<BigRational>>,
    offsets: Vec<Vec<BigRational>>,
}

impl PointSet {
    pub fn new(
        dim: usize,
        basis: Vec<Vec<BigRational>>,
        offsets: Vec<Vec<BigRational>>,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Geometry(format!(
                "dimension must be at least 2, got {dim}"
            )));
        }
        if basis.len() != dim || basis.iter().any(|r| r.len() != dim) {
            return Err(Error::Geometry(format!(
                "basis must be a {dim}x{dim} matrix"
            )));
        }
        if offsets.is_empty() {
            return Err(Error::Geometry("at least one offset is required".into()));
        }
        for o in &offsets {
            if o.len() != dim {
                return Err(Error::Geometry(format!(
                    "offsets must be {dim}-vectors"
                )));
            }
        }
        let inverse = invert_matrix(&basis)?;
        let ps = PointSet {
            dim,
            basis,
            inverse,
            offsets,
        };
        // Offsets must be pairwise distinct modulo B·Zᵛ: the difference of two
        // offsets, pulled back through B⁻¹, must not be an integer vector.
        for i in 0..ps.offsets.len() {
            for j in (i + 1)..ps.offsets.len() {
                let diff: Vec<BigRational> = ps.offsets[i]
                    .iter()
                    .zip(&ps.offsets[j])
                    .map(|(a, b)| a - b)
                    .collect();
                let t = mat_vec(&ps.inverse, &diff);
                if t.iter().all(|c| c.is_integer()) {
                    return Err(Error::Geometry(format!(
                        "offsets {i} and {j} coincide modulo the lattice"
                    )));
                }
            }
        }
        Ok(ps)
    }

    /// The integer lattice Zᵛ itself: identity basis, single zero offset.
    pub fn integer_lattice(dim: usize) -> Self {
        let basis = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| ratio(i64::from(i == j), 1))
                    .collect()
            })
            .collect();
        let offsets = vec![vec![BigRational::zero(); dim]];
        PointSet::new(dim, basis, offsets).expect("identity basis is invertible")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> &[Vec<BigRational>] {
        &self.basis
    }

    pub fn offsets(&self) -> &[Vec<BigRational>] {
        &self.offsets
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    /// The raw point B·cell + offsets\[sub\] of a site.
    pub fn point_of(&self, site: &Site) -> Vec<BigRational> {
        let t: Vec<BigRational> = site.cell.iter().map(|c| ratio(*c, 1)).collect();
        // basis rows form B, so B·t has entry i equal to row_i · t.
        let bt = mat_vec(&self.basis, &t);
        bt.iter()
            .zip(&self.offsets[site.sub])
            .map(|(a, b)| a + b)
            .collect()
    }

    /// ℓ¹ norm of a point of B·Zᵛ: pulls the point back through B⁻¹ and takes
    /// Σ|tᵢ|; rejects points that are not lattice vectors.
    pub fn norm_of_point(&self, p: &[BigRational]) -> Result<u64> {
        if p.len() != self.dim {
            return Err(Error::Geometry("point has wrong dimension".into()));
        }
        let t = mat_vec(&self.inverse, p);
        let mut total: u64 = 0;
        for c in &t {
            if !c.is_integer() {
                return Err(Error::Geometry(format!(
                    "point is not a lattice vector: B^-1 p has non-integer entry {c}"
                )));
            }
            let i: BigInt = c.to_integer();
            let step = u64::try_from(i.abs())
                .map_err(|_| Error::Geometry("norm overflows u64".into()))?;
            total += step;
        }
        Ok(total)
    }

    /// Locate a raw point in the point set: the unique (cell, sub) with
    /// p = B·cell + offsets\[sub\]. Points outside the set are rejected with
    /// the nearest member named in the error.
    pub fn cell_coordinates(&self, p: &[BigRational]) -> Result<Site> {
        if p.len() != self.dim {
            return Err(Error::Geometry("point has wrong dimension".into()));
        }
        let mut best: Option<(BigRational, Site)> = None;
        for (k, off) in self.offsets.iter().enumerate() {
            let shifted: Vec<BigRational> =
                p.iter().zip(off).map(|(a, b)| a - b).collect();
            let t = mat_vec(&self.inverse, &shifted);
            if t.iter().all(|c| c.is_integer()) {
                let cell = t
                    .iter()
                    .map(|c| {
                        i64::try_from(c.to_integer())
                            .map_err(|_| Error::Geometry("cell coordinate overflows i64".into()))
                    })
                    .collect::<Result<Vec<i64>>>()?;
                return Ok(Site::new(cell, k));
            }
            // Track the nearest rounded candidate for the error message.
            let rounded: Vec<i64> = t
                .iter()
                .map(|c| i64::try_from(c.round().to_integer()).unwrap_or(0))
                .collect();
            let candidate = Site::new(rounded, k);
            let q = self.point_of(&candidate);
            let dist: BigRational = q
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if best.as_ref().map(|(d, _)| &dist < d).unwrap_or(true) {
                best = Some((dist, candidate));
            }
        }
        let (_, near) = best.expect("at least one offset");
        let np = self.point_of(&near);
        let np_str: Vec<String> = np.iter().map(|c| c.to_string()).collect();
        Err(Error::Geometry(format!(
            "point is not in the point set; nearest member is ({}) = site {}",
            np_str.join(","),
            near
        )))
    }
}

/// A finite set of sites, optionally with torus periods.
///
/// On a torus every cell coordinate is stored reduced modulo the periods and
/// adjacency wraps around; a torus has no complement, so boundary layers are
/// not defined for it.
#[derive(Clone, Debug)]
pub struct Region {
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    torus: Option<Vec<i64>>,
    dim: usize,
}

impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.torus == other.torus && self.sites == other.sites
    }
}

impl Eq for Region {}

impl Region {
    pub fn from_sites(dim: usize, mut sites: Vec<Site>) -> Result<Self> {
        for s in &sites {
            if s.cell.len() != dim {
                return Err(Error::Geometry("site has wrong dimension".into()));
            }
        }
        sites.sort();
        sites.dedup();
        let index = sites
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        Ok(Region {
            sites,
            index,
            torus: None,
            dim,
        })
    }

    /// Axis-aligned box of cells 0..lens\[i\] with `num_offsets` sites per cell.
    pub fn cell_box(lens: &[i64], num_offsets: usize) -> Result<Self> {
        if lens.iter().any(|&l| l <= 0) {
            return Err(Error::Geometry("box side lengths must be positive".into()));
        }
        let dim = lens.len();
        let mut sites = Vec::new();
        let mut cur = vec![0i64; dim];
        loop {
            for k in 0..num_offsets {
                sites.push(Site::new(cur.clone(), k));
            }
            let mut axis = dim;
            for i in (0..dim).rev() {
                cur[i] += 1;
                if cur[i] < lens[i] {
                    axis = i;
                    break;
                }
                cur[i] = 0;
            }
            if axis == dim {
                break;
            }
        }
        Self::from_sites(dim, sites)
    }

    /// Square box in ν = lens.len() dimensions, then wrapped into a torus.
    pub fn torus(lens: &[i64], num_offsets: usize) -> Result<Self> {
        let mut r = Self::cell_box(lens, num_offsets)?;
        r.torus = Some(lens.to_vec());
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn is_torus(&self) -> bool {
        self.torus.is_some()
    }

    pub fn periods(&self) -> Option<&[i64]> {
        self.torus.as_deref()
    }

    /// Canonical representative of a site under the torus periods (identity
    /// for plain regions).
    pub fn wrap(&self, site: &Site) -> Site {
        match &self.torus {
            None => site.clone(),
            Some(p) => Site::new(
                site.cell
                    .iter()
                    .zip(p)
                    .map(|(c, m)| c.rem_euclid(*m))
                    .collect(),
                site.sub,
            ),
        }
    }

    pub fn contains(&self, site: &Site) -> bool {
        self.index.contains_key(&self.wrap(site))
    }

    pub fn index_of(&self, site: &Site) -> Option<usize> {
        self.index.get(&self.wrap(site)).copied()
    }

    /// Distance between two sites, minimised over period translates on a torus.
    pub fn distance(&self, a: &Site, b: &Site) -> u64 {
        match &self.torus {
            None => site_distance(a, b),
            Some(p) => a
                .cell
                .iter()
                .zip(&b.cell)
                .zip(p)
                .map(|((x, y), m)| {
                    let d = (x - y).rem_euclid(*m);
                    d.min(m - d) as u64
                })
                .sum(),
        }
    }

    /// Bounding box over cell coordinates: (mins, maxs), or None when empty.
    pub fn bounding_box(&self) -> Option<(Vec<i64>, Vec<i64>)> {
        bounding_box_of(&self.sites)
    }
}

fn bounding_box_of(sites: &[Site]) -> Option<(Vec<i64>, Vec<i64>)> {
    let first = sites.first()?;
    let mut lo = first.cell.clone();
    let mut hi = first.cell.clone();
    for s in sites {
        for (i, c) in s.cell.iter().enumerate() {
            lo[i] = lo[i].min(*c);
            hi[i] = hi[i].max(*c);
        }
    }
    Some((lo, hi))
}

/// The sites of Λ within ℓ¹ distance `n` of its complement: boundary layer
/// ∂⁽ⁿ⁾Λ, with n = 1 giving ∂Λ. The complement consists of every site of the
/// ambient point set (all offset indices at every cell) not in Λ. Not defined
/// on a torus, whose complement is empty.
pub fn boundary_layer(region: &Region, n: u64, num_offsets: usize) -> Result<Region> {
    if region.is_torus() {
        return Err(Error::Geometry(
            "boundary layer of a torus is undefined (no complement)".into(),
        ));
    }
    if n == 0 {
        return Region::from_sites(region.dim(), Vec::new());
    }
    if region.is_empty() {
        return Region::from_sites(region.dim(), Vec::new());
    }
    // Multi-source BFS inward from the complement. A site at distance d from
    // the complement has a cell-neighbour (or a same-cell missing offset) at
    // distance d - 1; seed with every Λ-site adjacent to a missing site.
    let dim = region.dim();
    let mut dist: HashMap<usize, u64> = HashMap::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, s) in region.sites().iter().enumerate() {
        let mut exposed = (0..num_offsets)
            .any(|k| k != s.sub && !region.contains(&Site::new(s.cell.clone(), k)));
        if !exposed {
            'axes: for axis in 0..dim {
                for step in [-1i64, 1] {
                    let mut c = s.cell.clone();
                    c[axis] += step;
                    if (0..num_offsets).any(|k| !region.contains(&Site::new(c.clone(), k))) {
                        exposed = true;
                        break 'axes;
                    }
                }
            }
        }
        if exposed {
            // Same-cell missing offset means distance 0 < 1 <= n; neighbour
            // cell missing means distance 1 <= n. Either way the site is in
            // the layer for n >= 1.
            dist.insert(i, 1);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let d = dist[&i];
        if d >= n {
            continue;
        }
        let s = region.sites()[i].clone();
        for axis in 0..dim {
            for step in [-1i64, 1] {
                let mut c = s.cell.clone();
                c[axis] += step;
                for k in 0..num_offsets {
                    if let Some(j) = region.index_of(&Site::new(c.clone(), k)) {
                        if !dist.contains_key(&j) {
                            dist.insert(j, d + 1);
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        // Same-cell other offsets are at distance 0 from this site.
        for k in 0..num_offsets {
            if k != s.sub {
                if let Some(j) = region.index_of(&Site::new(s.cell.clone(), k)) {
                    if !dist.contains_key(&j) {
                        dist.insert(j, d);
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    let sites = dist
        .keys()
        .map(|&i| region.sites()[i].clone())
        .collect();
    Region::from_sites(region.dim(), sites)
}

/// Partition of a finite site set into maximal ℓ¹-connected components.
/// Two sites are adjacent when their cells differ by at most one unit step
/// along one axis (same-cell sites of different offsets are adjacent).
/// Components are returned sorted by their least site; each component is
/// itself sorted.
pub fn connected_components(sites: &[Site]) -> Vec<Vec<Site>> {
    connected_components_wrapped(sites, None)
}

/// Like [`connected_components`], with adjacency wrapped modulo `periods`
/// when given (sites must already be reduced).
pub fn connected_components_wrapped(
    sites: &[Site],
    periods: Option<&[i64]>,
) -> Vec<Vec<Site>> {
    let set: BTreeMap<&Site, usize> =
        sites.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut seen = vec![false; sites.len()];
    let mut out: Vec<Vec<Site>> = Vec::new();
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by_key(|&i| &sites[i]);
    let wrap = |s: Site| -> Site {
        match periods {
            None => s,
            Some(p) => Site::new(
                s.cell
                    .iter()
                    .zip(p)
                    .map(|(c, m)| c.rem_euclid(*m))
                    .collect(),
                s.sub,
            ),
        }
    };
    for &start in &order {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let s = sites[i].clone();
            comp.push(s.clone());
            let mut push = |cand: Site| {
                if let Some(&j) = set.get(&cand) {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            };
            let dim = s.cell.len();
            let subs: BTreeSet<usize> = sites.iter().map(|t| t.sub).collect();
            for axis in 0..dim {
                for step in [-1i64, 1] {
                    let mut c = s.cell.clone();
                    c[axis] += step;
                    for &k in &subs {
                        push(wrap(Site::new(c.clone(), k)));
                    }
                }
            }
            for &k in &subs {
                if k != s.sub {
                    push(wrap(Site::new(s.cell.clone(), k)));
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out.sort_by(|a, b| a[0].cmp(&b[0]));
    out
}

/// Connected components of the complement of `x` inside a bounding frame one
/// cell wider than x's bounding box. Returns (component, touches_frame)
/// pairs; the component touching the frame is the one that would be infinite
/// in the full lattice, which is well defined because `x` is finite.
pub fn complement_components(
    x: &[Site],
    num_offsets: usize,
) -> Vec<(Vec<Site>, bool)> {
    let Some((lo, hi)) = bounding_box_of(x) else {
        return Vec::new();
    };
    let dim = lo.len();
    let xset: BTreeSet<&Site> = x.iter().collect();
    let mut complement = Vec::new();
    let mut cur: Vec<i64> = lo.iter().map(|c| c - 1).collect();
    let lo1: Vec<i64> = cur.clone();
    let hi1: Vec<i64> = hi.iter().map(|c| c + 1).collect();
    loop {
        for k in 0..num_offsets {
            let s = Site::new(cur.clone(), k);
            if !xset.contains(&s) {
                complement.push(s);
            }
        }
        let mut axis = dim;
        for i in (0..dim).rev() {
            cur[i] += 1;
            if cur[i] <= hi1[i] {
                axis = i;
                break;
            }
            cur[i] = lo1[i];
        }
        if axis == dim {
            break;
        }
    }
    let comps = connected_components(&complement);
    comps
        .into_iter()
        .map(|comp| {
            let touches = comp.iter().any(|s| {
                s.cell
                    .iter()
                    .zip(&lo1)
                    .zip(&hi1)
                    .any(|((c, l), h)| c == l || c == h)
            });
            (comp, touches)
        })
        .collect()
}

/// The cube U(t) of odd linear `size` centred at `center`: all sites (at
/// every offset index) whose cells are within ℓ∞ distance (size-1)/2.
pub fn cube(center: &Site, size: i64, num_offsets: usize) -> Result<Region> {
    if size <= 0 || size % 2 == 0 {
        return Err(Error::Geometry(format!(
            "cube size must be odd and positive, got {size}"
        )));
    }
    let h = (size - 1) / 2;
    let dim = center.cell.len();
    let mut sites = Vec::new();
    let mut delta = vec![-h; dim];
    loop {
        let cell: Vec<i64> = center
            .cell
            .iter()
            .zip(&delta)
            .map(|(c, d)| c + d)
            .collect();
        for k in 0..num_offsets {
            sites.push(Site::new(cell.clone(), k));
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
            break;
        }
    }
    Region::from_sites(dim, sites)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: i64) -> BigRational {
        ratio(n, 1)
    }

    fn rq(n: i64, d: i64) -> BigRational {
        ratio(n, d)
    }

    #[test]
    fn norm_of_cell_vectors() {
        assert_eq!(lattice_norm(&[1, -2]), 3);
        assert_eq!(lattice_norm(&[0, 0]), 0);
        assert_eq!(lattice_norm(&[-3, 4]), 7);
    }

    #[test]
    fn norm_through_scaled_basis() {
        // B = 2·I: the point (2,4) is the cell vector (1,2), norm 3.
        let basis = vec![vec![r(2), r(0)], vec![r(0), r(2)]];
        let ps = PointSet::new(2, basis, vec![vec![r(0), r(0)]]).unwrap();
        assert_eq!(ps.norm_of_point(&[r(2), r(4)]).unwrap(), 3);
        assert!(ps.norm_of_point(&[r(1), r(0)]).is_err());
    }

    #[test]
    fn norm_properties_triangle_and_symmetry() {
        let vecs: Vec<[i64; 2]> = (-3..=3)
            .flat_map(|a| (-3..=3).map(move |b| [a, b]))
            .collect();
        for u in &vecs {
            assert_eq!(lattice_norm(u), lattice_norm(&[-u[0], -u[1]]));
            for v in &vecs {
                let sum = [u[0] + v[0], u[1] + v[1]];
                assert!(lattice_norm(&sum) <= lattice_norm(u) + lattice_norm(v));
            }
        }
    }

    #[test]
    fn boundary_layers_of_3x3_box() {
        let b = Region::cell_box(&[3, 3], 1).unwrap();
        let l1 = boundary_layer(&b, 1, 1).unwrap();
        assert_eq!(l1.len(), 8);
        assert!(!l1.contains(&Site::at(&[1, 1])));
        let l2 = boundary_layer(&b, 2, 1).unwrap();
        assert_eq!(l2.len(), 9);
    }

    #[test]
    fn boundary_layer_is_monotone_in_n() {
        for lens in [[3, 3], [4, 2], [5, 4]] {
            let b = Region::cell_box(&lens, 1).unwrap();
            for n in 1..4 {
                let a = boundary_layer(&b, n, 1).unwrap();
                let c = boundary_layer(&b, n + 1, 1).unwrap();
                for s in a.sites() {
                    assert!(c.contains(s));
                }
            }
        }
    }

    #[test]
    fn boundary_layer_of_empty_region_is_empty() {
        let e = Region::from_sites(2, vec![]).unwrap();
        assert_eq!(boundary_layer(&e, 1, 1).unwrap().len(), 0);
    }

    #[test]
    fn boundary_layer_rejects_torus() {
        let t = Region::torus(&[3, 3], 1).unwrap();
        assert!(boundary_layer(&t, 1, 1).is_err());
    }

    #[test]
    fn components_of_small_sets() {
        let two = connected_components(&[Site::at(&[0, 0]), Site::at(&[5, 5])]);
        assert_eq!(two.len(), 2);
        let one = connected_components(&[Site::at(&[0, 0]), Site::at(&[1, 0])]);
        assert_eq!(one.len(), 1);
        // Diagonal neighbours are not adjacent.
        let diag = connected_components(&[Site::at(&[0, 0]), Site::at(&[1, 1])]);
        assert_eq!(diag.len(), 2);
    }

    #[test]
    fn components_partition_properties() {
        let sites: Vec<Site> = [[0, 0], [0, 1], [1, 1], [3, 3], [3, 4], [5, 0]]
            .iter()
            .map(|c| Site::at(c))
            .collect();
        let comps = connected_components(&sites);
        let total: usize = comps.iter().map(|c| c.len()).sum();
        assert_eq!(total, sites.len());
        // No two parts are mutually adjacent.
        for (i, a) in comps.iter().enumerate() {
            for b in comps.iter().skip(i + 1) {
                for s in a {
                    for t in b {
                        assert!(site_distance(s, t) > 1);
                    }
                }
            }
        }
    }

    #[test]
    fn cube_sizes_and_symmetry() {
        let c = cube(&Site::at(&[0, 0]), 3, 1).unwrap();
        assert_eq!(c.len(), 9);
        let c3 = cube(&Site::at(&[1, 2, 3]), 3, 1).unwrap();
        assert_eq!(c3.len(), 27);
        let c1 = cube(&Site::at(&[4, 4]), 1, 1).unwrap();
        assert_eq!(c1.len(), 1);
        assert!(cube(&Site::at(&[0, 0]), 2, 1).is_err());
        // Central symmetry: x -> 2t - x maps the cube onto itself.
        let t = Site::at(&[5, -2]);
        let c = cube(&t, 3, 1).unwrap();
        for s in c.sites() {
            let mirrored = Site::new(
                t.cell
                    .iter()
                    .zip(&s.cell)
                    .map(|(a, b)| 2 * a - b)
                    .collect(),
                0,
            );
            assert!(c.contains(&mirrored));
        }
    }

    #[test]
    fn cell_coordinates_on_integer_lattice() {
        let ps = PointSet::integer_lattice(2);
        let s = ps.cell_coordinates(&[r(3), r(-1)]).unwrap();
        assert_eq!(s, Site::at(&[3, -1]));
        let err = ps.cell_coordinates(&[rq(1, 2), r(0)]).unwrap_err();
        assert!(err.to_string().contains("nearest"));
    }

    #[test]
    fn cell_coordinates_on_two_offset_set() {
        // Two offsets (0,0) and (1/2,1/2) over the identity basis.
        let ps = PointSet::new(
            2,
            vec![vec![r(1), r(0)], vec![r(0), r(1)]],
            vec![vec![r(0), r(0)], vec![rq(1, 2), rq(1, 2)]],
        )
        .unwrap();
        let s = ps.cell_coordinates(&[rq(1, 2), rq(1, 2)]).unwrap();
        assert_eq!(s, Site::new(vec![0, 0], 1));
        let t = ps.cell_coordinates(&[rq(5, 2), rq(3, 2)]).unwrap();
        assert_eq!(t, Site::new(vec![2, 1], 1));
    }

    #[test]
    fn cell_coordinates_round_trip() {
        let ps = PointSet::new(
            2,
            vec![vec![r(2), r(1)], vec![r(0), r(1)]],
            vec![vec![r(0), r(0)], vec![r(1), rq(1, 2)]],
        )
        .unwrap();
        for x in -2..3 {
            for y in -2..3 {
                for k in 0..2 {
                    let s = Site::new(vec![x, y], k);
                    let p = ps.point_of(&s);
                    assert_eq!(ps.cell_coordinates(&p).unwrap(), s);
                }
            }
        }
    }

    #[test]
    fn coincident_offsets_are_rejected() {
        let err = PointSet::new(
            2,
            vec![vec![r(1), r(0)], vec![r(0), r(1)]],
            vec![vec![r(0), r(0)], vec![r(1), r(2)]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("coincide"));
    }

    #[test]
    fn torus_distance_wraps() {
        let t = Region::torus(&[4, 4], 1).unwrap();
        let a = Site::at(&[0, 0]);
        let b = Site::at(&[3, 0]);
        assert_eq!(t.distance(&a, &b), 1);
        assert_eq!(site_distance(&a, &b), 3);
    }

    #[test]
    fn complement_components_flag_external() {
        // Complement of a 3x3 block: single external component.
        let block: Vec<Site> = (0..3)
            .flat_map(|x| (0..3).map(move |y| Site::at(&[x, y])))
            .collect();
        let comps = complement_components(&block, 1);
        assert_eq!(comps.len(), 1);
        assert!(comps[0].1);
        // A ring encloses an internal component.
        let ring: Vec<Site> = (0..3)
            .flat_map(|x| (0..3).map(move |y| Site::at(&[x, y])))
            .filter(|s| s.cell != [1, 1])
            .collect();
        let comps = complement_components(&ring, 1);
        assert_eq!(comps.len(), 2);
        let internal: Vec<_> = comps.iter().filter(|(_, ext)| !ext).collect();
        assert_eq!(internal.len(), 1);
        assert_eq!(internal[0].0, vec![Site::at(&[1, 1])]);
    }
}
