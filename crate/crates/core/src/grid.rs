//! Uniform lattice geometry, cell sets and ternary phase fields.
//!
//! Cell `i` along an axis occupies `origin + h·[i, i+1)`; membership of a
//! cell in a continuum set is decided by its center. Linear indices run with
//! axis 0 fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ball_volume;
use crate::shape::Shape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dim: usize,
    origin: [f64; 3],
    extent: [usize; 3],
    h: f64,
}

impl GridGeometry {
    pub fn new(origin: &[f64], extent: &[usize], h: f64) -> Result<Self> {
        let dim = extent.len();
        if !(1..=3).contains(&dim) {
            return Err(Error::Geometry(format!("dimension {dim} not in 1..=3")));
        }
        if origin.len() != dim {
            return Err(Error::Geometry("origin length differs from dimension".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Geometry(format!("cell size h = {h} must be positive")));
        }
        if extent.iter().any(|&e| e == 0) {
            return Err(Error::Geometry("every extent must be at least 1".into()));
        }
        let total = extent
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Geometry("cell count overflows".into()))?;
        // offsets tables hold (2e-1)^n entries
        extent
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(2 * e))
            .ok_or_else(|| Error::Geometry("offset table overflows".into()))?;
        let _ = total;
        let mut o = [0.0; 3];
        let mut e = [1usize; 3];
        o[..dim].copy_from_slice(origin);
        e[..dim].copy_from_slice(extent);
        Ok(Self {
            dim,
            origin: o,
            extent: e,
            h,
        })
    }

    /// The box `[-half_width, half_width]^dim` split into `cells` cells per axis.
    pub fn centered(dim: usize, half_width: f64, cells: usize) -> Result<Self> {
        let h = 2.0 * half_width / cells as f64;
        Self::new(&vec![-half_width; dim], &vec![cells; dim], h)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.dim]
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent[..self.dim]
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn lower(&self) -> [f64; 3] {
        self.origin
    }

    pub fn upper(&self) -> [f64; 3] {
        let mut u = self.origin;
        for (k, item) in u.iter_mut().enumerate().take(self.dim) {
            *item += self.h * self.extent[k] as f64;
        }
        u
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i0 = idx % self.extent[0];
        let r = idx / self.extent[0];
        let i1 = r % self.extent[1];
        let i2 = r / self.extent[1];
        [i0, i1, i2]
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.extent[0] * (c[1] + self.extent[1] * c[2])
    }

    /// Index of a cell given possibly out-of-range signed coordinates.
    pub fn index_signed(&self, c: [i64; 3]) -> Option<usize> {
        for (k, &ck) in c.iter().enumerate() {
            if ck < 0 || ck as usize >= self.extent[k] {
                return None;
            }
        }
        Some(self.index([c[0] as usize, c[1] as usize, c[2] as usize]))
    }

    #[inline]
    pub fn center(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut p = [0.0; 3];
        for k in 0..self.dim {
            p[k] = self.origin[k] + self.h * (c[k] as f64 + 0.5);
        }
        p
    }

    pub fn center_vec(&self, idx: usize) -> Vec<f64> {
        self.center(idx)[..self.dim].to_vec()
    }

    /// Cell whose half-open box contains `p`.
    pub fn cell_containing(&self, p: &[f64]) -> Option<usize> {
        let mut c = [0i64; 3];
        for k in 0..self.dim {
            let t = ((p.get(k).copied().unwrap_or(0.0) - self.origin[k]) / self.h).floor();
            if !t.is_finite() {
                return None;
            }
            c[k] = t as i64;
        }
        self.index_signed(c)
    }

    /// Face-adjacent neighbours.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let c = self.coords(idx);
        (0..self.dim).flat_map(move |k| {
            let mut out = [None, None];
            if c[k] > 0 {
                let mut d = c;
                d[k] -= 1;
                out[0] = Some(self.index(d));
            }
            if c[k] + 1 < self.extent[k] {
                let mut d = c;
                d[k] += 1;
                out[1] = Some(self.index(d));
            }
            out.into_iter().flatten()
        })
    }

    /// Distance from `p` to the nearest box face (negative outside).
    pub fn distance_to_boundary(&self, p: &[f64]) -> f64 {
        let up = self.upper();
        (0..self.dim)
            .map(|k| (p[k] - self.origin[k]).min(up[k] - p[k]))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn check_same(&self, other: &GridGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    In,
    Out,
    Free,
}

/// Dense per-cell membership bitmap.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSet {
    geometry: GridGeometry,
    members: Vec<bool>,
}

impl CellSet {
    pub fn empty(geometry: &GridGeometry) -> Self {
        Self {
            members: vec![false; geometry.len()],
            geometry: geometry.clone(),
        }
    }

    pub fn full(geometry: &GridGeometry) -> Self {
        Self {
            members: vec![true; geometry.len()],
            geometry: geometry.clone(),
        }
    }

    pub fn from_fn(geometry: &GridGeometry, f: impl Fn(usize) -> bool) -> Self {
        Self {
            members: (0..geometry.len()).map(f).collect(),
            geometry: geometry.clone(),
        }
    }

    pub fn from_shape(geometry: &GridGeometry, shape: &Shape) -> Self {
        Self::from_fn(geometry, |i| shape.contains(&geometry.center(i)[..geometry.dim()]))
    }

    pub fn from_bits(geometry: &GridGeometry, members: Vec<bool>) -> Result<Self> {
        if members.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "membership length {} != cell count {}",
                members.len(),
                geometry.len()
            )));
        }
        Ok(Self {
            geometry: geometry.clone(),
            members,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn bits(&self) -> &[bool] {
        &self.members
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.members[idx]
    }

    pub fn insert(&mut self, idx: usize) {
        self.members[idx] = true;
    }

    pub fn remove(&mut self, idx: usize) {
        self.members[idx] = false;
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn indices(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn complement(&self) -> CellSet {
        CellSet {
            geometry: self.geometry.clone(),
            members: self.members.iter().map(|&b| !b).collect(),
        }
    }

    fn zip_with(&self, other: &CellSet, f: impl Fn(bool, bool) -> bool) -> Result<CellSet> {
        self.geometry.check_same(&other.geometry)?;
        Ok(CellSet {
            geometry: self.geometry.clone(),
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn union(&self, other: &CellSet) -> Result<CellSet> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &CellSet) -> Result<CellSet> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &CellSet) -> Result<CellSet> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.geometry == other.geometry
            && self.members.iter().zip(&other.members).all(|(&a, &b)| !a || b)
    }

    pub fn measure(&self) -> f64 {
        measure(self)
    }
}

/// Cells whose centers lie within distance `r` of `center`.
pub fn cells_in_ball(geometry: &GridGeometry, center: &[f64], r: f64) -> CellSet {
    let r2 = r * r;
    let dim = geometry.dim();
    CellSet::from_fn(geometry, |i| {
        let p = geometry.center(i);
        let d2: f64 = (0..dim)
            .map(|k| (p[k] - center.get(k).copied().unwrap_or(0.0)).powi(2))
            .sum();
        d2 <= r2
    })
}

/// Number of member cells times the cell volume.
pub fn measure(set: &CellSet) -> f64 {
    set.count() as f64 * set.geometry().cell_volume()
}

/// Cells on either side of a face between an IN and an OUT cell.
pub fn boundary_cells(field: &PhaseField) -> Result<CellSet> {
    field.require_resolved()?;
    let g = field.geometry();
    Ok(CellSet::from_fn(g, |i| {
        let li = field.label(i);
        g.neighbors(i).any(|j| field.label(j) != li)
    }))
}

/// Ternary labelling of the lattice together with the free region Ω and the
/// continuum data prescribed outside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    geometry: GridGeometry,
    labels: Vec<Label>,
    free: CellSet,
    exterior: Option<Shape>,
}

impl PhaseField {
    /// Rasterize `shape` on the fixed cells and mark `free` cells FREE. The
    /// shape also serves as the data outside the box.
    pub fn with_free(geometry: &GridGeometry, shape: &Shape, free: &CellSet) -> Result<Self> {
        geometry.check_same(free.geometry())?;
        let labels = (0..geometry.len())
            .map(|i| {
                if free.contains(i) {
                    Label::Free
                } else if shape.contains(&geometry.center(i)[..geometry.dim()]) {
                    Label::In
                } else {
                    Label::Out
                }
            })
            .collect();
        Ok(Self {
            geometry: geometry.clone(),
            labels,
            free: free.clone(),
            exterior: Some(shape.clone()),
        })
    }

    /// Fully resolved rasterization of `shape`, with `free` recorded as Ω.
    pub fn resolved(geometry: &GridGeometry, shape: &Shape, free: &CellSet) -> Result<Self> {
        let mut f = Self::with_free(geometry, shape, free)?;
        for i in 0..geometry.len() {
            f.labels[i] = if shape.contains(&geometry.center(i)[..geometry.dim()]) {
                Label::In
            } else {
                Label::Out
            };
        }
        Ok(f)
    }

    /// Field from explicit labels. Cells labelled FREE must lie in `free`.
    pub fn from_labels(
        geometry: &GridGeometry,
        labels: Vec<Label>,
        free: &CellSet,
        exterior: Option<Shape>,
    ) -> Result<Self> {
        geometry.check_same(free.geometry())?;
        if labels.len() != geometry.len() {
            return Err(Error::Geometry("label count differs from cell count".into()));
        }
        if labels
            .iter()
            .enumerate()
            .any(|(i, &l)| l == Label::Free && !free.contains(i))
        {
            return Err(Error::Domain("FREE label outside the free region".into()));
        }
        Ok(Self {
            geometry: geometry.clone(),
            labels,
            free: free.clone(),
            exterior,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, idx: usize) -> Label {
        self.labels[idx]
    }

    pub fn free_region(&self) -> &CellSet {
        &self.free
    }

    pub fn exterior(&self) -> Option<&Shape> {
        self.exterior.as_ref()
    }

    pub fn set_exterior(&mut self, exterior: Option<Shape>) {
        self.exterior = exterior;
    }

    /// +1 for IN, −1 for OUT, 0 for FREE.
    #[inline]
    pub fn sign(&self, idx: usize) -> f64 {
        match self.labels[idx] {
            Label::In => 1.0,
            Label::Out => -1.0,
            Label::Free => 0.0,
        }
    }

    pub fn set_label(&mut self, idx: usize, label: Label) -> Result<()> {
        if label == Label::Free && !self.free.contains(idx) {
            return Err(Error::Domain("cannot free a cell outside the free region".into()));
        }
        self.labels[idx] = label;
        Ok(())
    }

    pub fn unresolved_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Free).count()
    }

    pub fn is_resolved(&self) -> bool {
        self.unresolved_count() == 0
    }

    pub fn require_resolved(&self) -> Result<()> {
        match self.unresolved_count() {
            0 => Ok(()),
            k => Err(Error::Unresolved(k)),
        }
    }

    pub fn in_set(&self) -> CellSet {
        CellSet::from_fn(&self.geometry, |i| self.labels[i] == Label::In)
    }

    pub fn out_set(&self) -> CellSet {
        CellSet::from_fn(&self.geometry, |i| self.labels[i] == Label::Out)
    }

    /// Assign every free cell from `inside(idx)`.
    pub fn resolve_with(&self, mut inside: impl FnMut(usize) -> bool) -> PhaseField {
        let mut f = self.clone();
        for i in self.free.iter() {
            f.labels[i] = if inside(i) { Label::In } else { Label::Out };
        }
        f
    }

    /// Mark every free cell FREE again.
    pub fn unresolved(&self) -> PhaseField {
        let mut f = self.clone();
        for i in self.free.iter() {
            f.labels[i] = Label::Free;
        }
        f
    }

    /// Same labels with a different free region. Requires a resolved field.
    pub fn with_free_region(&self, free: &CellSet) -> Result<PhaseField> {
        self.require_resolved()?;
        self.geometry.check_same(free.geometry())?;
        let mut f = self.clone();
        f.free = free.clone();
        Ok(f)
    }

    /// Swap IN and OUT everywhere, the exterior data included.
    pub fn complement(&self) -> PhaseField {
        let labels = self
            .labels
            .iter()
            .map(|l| match l {
                Label::In => Label::Out,
                Label::Out => Label::In,
                Label::Free => Label::Free,
            })
            .collect();
        PhaseField {
            geometry: self.geometry.clone(),
            labels,
            free: self.free.clone(),
            exterior: self.exterior.clone().map(Shape::complement),
        }
    }

    /// Cells whose label differs from `other` (same geometry).
    pub fn differing_cells(&self, other: &PhaseField) -> Result<Vec<usize>> {
        self.geometry.check_same(&other.geometry)?;
        Ok((0..self.labels.len())
            .filter(|&i| self.labels[i] != other.labels[i])
            .collect())
    }
}

/// Normalized density `|E ∩ B_r(x)| / r^n` divided by the unit-ball volume.
pub fn relative_density(set: &CellSet, center: &[f64], r: f64) -> f64 {
    let g = set.geometry();
    let ball = cells_in_ball(g, center, r);
    let inside = ball.iter().filter(|&i| set.contains(i)).count() as f64;
    inside * g.cell_volume() / (ball_volume(g.dim()) * r.powi(g.dim() as i32))
}
