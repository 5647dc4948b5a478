//! Extension of `u = χ_E − χ_CE` to the upper half-space solving
//! `div(z^a ∇ũ) = 0`, `a = 1 − s`, through its Poisson kernel
//! `P(x, z) ∝ z^s / (|x|² + z²)^{(n+s)/2}`, and the weighted energies built on it.
//!
//! The kernel is normalized to unit mass per level: the continuum share
//! landing outside the box is integrated along rays against the exterior
//! data and the in-box share is scaled to the remaining mass. Energies are
//! therefore defined up to one global constant.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Convolver;
use crate::grid::{cells_in_ball, CellSet, GridGeometry, Label, PhaseField};
use crate::kernel::{box_exit, build_table, cauchy_radial, AngularRule, FractionalOrder, KernelTable};
use crate::mincut::{certify_minimizer, minimize};
use crate::numeric::{fmt17, GaussRule, KahanSum};
use crate::shape::Shape;

pub const LADDER_RATIO: f64 = 1.15;

const EXTERIOR_DIRECTIONS: usize = 128;

/// Multiplier on the half-plane ratio when bounding extension energy by `J`.
pub const LOCALIZATION_SAFETY: f64 = 5.0;

/// `z_j = h·1.15^j` up to the first level reaching `top`.
pub fn z_ladder(h: f64, top: f64) -> Vec<f64> {
    let mut z = vec![h];
    while *z.last().unwrap() < top {
        let next = z.last().unwrap() * LADDER_RATIO;
        z.push(next);
    }
    z
}

/// `Γ((n+s)/2) / (π^{n/2} Γ(s/2))`, the unit-mass constant of the continuum kernel.
pub fn poisson_constant(dim: usize, s: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n = dim as f64;
    (ln_gamma((n + s) / 2.0) - ln_gamma(s / 2.0)).exp() / std::f64::consts::PI.powf(n / 2.0)
}

#[derive(Clone, Debug)]
pub struct ExtensionField {
    geometry: GridGeometry,
    order: FractionalOrder,
    z_levels: Vec<f64>,
    base: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl ExtensionField {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn order(&self) -> FractionalOrder {
        self.order
    }

    pub fn z_levels(&self) -> &[f64] {
        &self.z_levels
    }

    /// Boundary values `u` at `z = 0`.
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn value(&self, cell: usize, j: usize) -> f64 {
        self.values[j][cell]
    }
}

/// Cell average of `c z^s (|y|² + z²)^{−(n+s)/2}` over the cell at offset `delta`.
fn cell_poisson(dim: usize, h: f64, s: f64, z: f64, c: f64, rule: &GaussRule, delta: [i64; 3]) -> f64 {
    let p = (dim as f64 + s) / 2.0;
    let f = |r2: f64| c * z.powf(s) * (r2 + z * z).powf(-p);
    let near = (0..dim).all(|k| delta[k].abs() <= 3) && z < 8.0 * h;
    if !near {
        let r2: f64 = (0..dim).map(|k| (delta[k] as f64 * h).powi(2)).sum();
        return f(r2) * h.powi(dim as i32);
    }
    let nodes: Vec<Vec<(f64, f64)>> = (0..dim)
        .map(|k| {
            let m = delta[k] as f64 * h;
            rule.on(m - h / 2.0, m + h / 2.0).collect()
        })
        .collect();
    let mut acc = KahanSum::new();
    match dim {
        1 => nodes[0].iter().for_each(|&(x, w)| acc.add(w * f(x * x))),
        2 => {
            for &(x, wx) in &nodes[0] {
                for &(y, wy) in &nodes[1] {
                    acc.add(wx * wy * f(x * x + y * y));
                }
            }
        }
        _ => {
            for &(x, wx) in &nodes[0] {
                for &(y, wy) in &nodes[1] {
                    for &(w3, ww) in &nodes[2] {
                        acc.add(wx * wy * ww * f(x * x + y * y + w3 * w3));
                    }
                }
            }
        }
    }
    acc.value()
}

/// Ray pieces beyond the box: `(direction weight, start, end, u value)`.
type Pieces = Vec<(f64, f64, f64, f64)>;

fn exterior_pieces(geom: &GridGeometry, shape: Option<&Shape>, rule: &AngularRule, cell: usize) -> Pieces {
    let dim = geom.dim();
    let x = geom.center(cell);
    let mut out = Vec::new();
    for (dir, w) in rule.nodes() {
        let exit = box_exit(geom, &x[..dim], dir);
        match shape {
            Some(shape) => {
                for seg in shape.ray_segments(&x[..dim], &dir[..dim], exit) {
                    out.push((w, seg.start, seg.end, if seg.inside { 1.0 } else { -1.0 }));
                }
            }
            None => out.push((w, exit, f64::INFINITY, 0.0)),
        }
    }
    out
}

/// `ũ(·, z)` at every requested level.
pub fn extend(field: &PhaseField, z_levels: &[f64], order: FractionalOrder) -> Result<ExtensionField> {
    field.require_resolved()?;
    let geom = field.geometry();
    let h = geom.h();
    if z_levels.is_empty() || z_levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("z levels must be increasing and nonempty".into()));
    }
    if z_levels[0] < h / 2.0 {
        return Err(Error::Domain(format!(
            "smallest level {} is below h/2 = {}; the kernel is under-resolved",
            z_levels[0],
            h / 2.0
        )));
    }
    let dim = geom.dim();
    let s = order.s();
    let c = poisson_constant(dim, s);
    let base: Vec<f64> = (0..geom.len()).map(|i| field.sign(i)).collect();
    let ones = vec![1.0; geom.len()];
    let rule = AngularRule::new(dim, EXTERIOR_DIRECTIONS);
    let pieces: Vec<Pieces> = (0..geom.len())
        .into_par_iter()
        .map(|i| exterior_pieces(geom, field.exterior(), &rule, i))
        .collect();
    let gl = GaussRule::new(8);
    let mut values = Vec::with_capacity(z_levels.len());
    for &z in z_levels {
        let conv = Convolver::new(geom, |d| cell_poisson(dim, h, s, z, c, &gl, d));
        let cu = conv.apply(&base);
        let c1 = conv.apply(&ones);
        let radial = cauchy_radial(dim, s, z);
        let scale = c / z.powi(dim as i32);
        let level: Vec<f64> = pieces
            .par_iter()
            .enumerate()
            .map(|(i, ps)| {
                let mut mass = KahanSum::new();
                let mut val = KahanSum::new();
                for &(w, a, b, sign) in ps {
                    let m = w * scale * radial(a, b);
                    mass.add(m);
                    val.add(sign * m);
                }
                (1.0 - mass.value()) * cu[i] / c1[i] + val.value()
            })
            .collect();
        values.push(level);
    }
    Ok(ExtensionField {
        geometry: geom.clone(),
        order,
        z_levels: z_levels.to_vec(),
        base,
        values,
    })
}

fn centered_difference(geom: &GridGeometry, v: &[f64], i: usize, k: usize) -> f64 {
    let c = geom.coords(i);
    let e = geom.extent()[k];
    let h = geom.h();
    let at = |ck: usize| {
        let mut cc = c;
        cc[k] = ck;
        v[geom.index(cc)]
    };
    if e == 1 {
        0.0
    } else if c[k] == 0 {
        (at(1) - at(0)) / h
    } else if c[k] == e - 1 {
        (at(e - 1) - at(e - 2)) / h
    } else {
        (at(c[k] + 1) - at(c[k] - 1)) / (2.0 * h)
    }
}

/// `∫ z^a |∇ũ|²` with each gradient cell weighted by `region(x, z_lo, z_hi)`,
/// the fraction of the cell centered at `x` times the layer `[z_lo, z_hi]`
/// to count. Layers run between consecutive levels, starting from `z = 0`.
pub fn weighted_energy(ext: &ExtensionField, region: impl Fn(&[f64], f64, f64) -> f64 + Sync) -> f64 {
    let geom = &ext.geometry;
    let dim = geom.dim();
    let a = ext.order.a();
    let s = ext.order.s();
    let vol = geom.cell_volume();
    let mut levels = vec![0.0];
    levels.extend_from_slice(&ext.z_levels);
    let layer_sums: Vec<f64> = (0..ext.z_levels.len())
        .into_par_iter()
        .map(|j| {
            let lo = if j == 0 { &ext.base } else { &ext.values[j - 1] };
            let hi = &ext.values[j];
            let dz = levels[j + 1] - levels[j];
            let zm = 0.5 * (levels[j + 1] + levels[j]);
            let (z_lo, z_hi) = (levels[j], levels[j + 1]);
            // next to z = 0, ũ ≈ u + b z^s and z^a|∂_z ũ|² ∼ z^{s−1} is not
            // integrable by the midpoint rule; that layer uses the exact
            // integrals for this profile
            let (wz, wx) = if j == 0 {
                let z1 = levels[1];
                (s / z1.powf(s), z1.powf(1.0 + a) / (1.0 + a))
            } else {
                let w = zm.powf(a) * dz;
                (w / (dz * dz), w)
            };
            let mut acc = KahanSum::new();
            for i in 0..geom.len() {
                let x = geom.center(i);
                let frac = region(&x[..dim], z_lo, z_hi);
                if frac == 0.0 {
                    continue;
                }
                let d = hi[i] - lo[i];
                let mut gx2 = 0.0;
                for k in 0..dim {
                    let gx = 0.5 * (centered_difference(geom, lo, i, k) + centered_difference(geom, hi, i, k));
                    gx2 += gx * gx;
                }
                acc.add(frac * vol * (wz * d * d + wx * gx2));
            }
            acc.value()
        })
        .collect();
    let mut total = KahanSum::new();
    layer_sums.into_iter().for_each(|v| total.add(v));
    total.value()
}

/// Share of a cell of side `h` times a layer lying in the half-ball `B_r⁺`
/// about the origin: exact in `z`, averaged over 4ⁿ points in `x`.
pub fn half_ball(r: f64, h: f64) -> impl Fn(&[f64], f64, f64) -> f64 + Sync {
    const SUB: usize = 4;
    move |x: &[f64], lo: f64, hi: f64| {
        let dim = x.len();
        let rho = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let half_diag = 0.5 * h * (dim as f64).sqrt();
        if lo >= r || rho - half_diag >= r {
            return 0.0;
        }
        if (rho + half_diag).powi(2) + hi * hi <= r * r {
            return 1.0;
        }
        let n = SUB.pow(dim as u32);
        let mut acc = 0.0;
        for m in 0..n {
            let mut q2 = 0.0;
            let mut rest = m;
            for v in x {
                let k = rest % SUB;
                rest /= SUB;
                let p = v + ((k as f64 + 0.5) / SUB as f64 - 0.5) * h;
                q2 += p * p;
            }
            if q2 < r * r {
                let top = (r * r - q2).sqrt();
                acc += ((top.min(hi) - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        }
        acc / n as f64
    }
}

/// Block-majority coarsening by a factor of two per axis (ties go IN).
pub fn coarsen(field: &PhaseField) -> Result<PhaseField> {
    field.require_resolved()?;
    let g = field.geometry();
    let dim = g.dim();
    if g.extent().iter().any(|e| e % 2 != 0) {
        return Err(Error::Geometry("coarsening needs even extents".into()));
    }
    let extent: Vec<usize> = g.extent().iter().map(|e| e / 2).collect();
    let coarse = GridGeometry::new(g.origin(), &extent, 2.0 * g.h())?;
    let mut sums = vec![0.0; coarse.len()];
    let mut free = vec![false; coarse.len()];
    for i in 0..g.len() {
        let c = g.coords(i);
        let mut cc = [0usize; 3];
        for k in 0..dim {
            cc[k] = c[k] / 2;
        }
        let j = coarse.index(cc);
        sums[j] += field.sign(i);
        free[j] |= field.free_region().contains(i);
    }
    let labels = sums.iter().map(|&v| if v >= 0.0 { Label::In } else { Label::Out }).collect();
    let free = CellSet::from_bits(&coarse, free)?;
    PhaseField::from_labels(&coarse, labels, &free, field.exterior().cloned())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhiCurve {
    pub radii: Vec<f64>,
    /// Richardson-extrapolated `Φ`.
    pub values: Vec<f64>,
    /// Size of the Richardson correction, used as the error bar.
    pub discretization_error: Vec<f64>,
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
}

fn phi_raw(field: &PhaseField, radii: &[f64], order: FractionalOrder) -> Result<Vec<f64>> {
    let top = 2.0 * radii.last().copied().unwrap_or(0.0);
    let ext = extend(field, &z_ladder(field.geometry().h(), top), order)?;
    let n = field.geometry().dim() as f64;
    let p = n + order.a() - 1.0;
    Ok(radii.iter().map(|&r| weighted_energy(&ext, half_ball(r, field.geometry().h())) / r.powf(p)).collect())
}

/// `Φ(r) = ∫_{B_r⁺} z^a|∇ũ|² / r^{n+a−1}` from the field and its coarsening.
pub fn phi(field: &PhaseField, radii: &[f64], order: FractionalOrder) -> Result<PhiCurve> {
    if radii.is_empty() || radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("radii must be positive and increasing".into()));
    }
    let g = field.geometry();
    let origin = vec![0.0; g.dim()];
    let r_max = *radii.last().unwrap();
    let room = g.distance_to_boundary(&origin);
    if r_max > room / 2.0 + 1e-12 {
        return Err(Error::Domain(format!(
            "radius {r_max} exceeds half the distance {room} from the origin to the box edge"
        )));
    }
    let fine = phi_raw(field, radii, order)?;
    let coarse = phi_raw(&coarsen(field)?, radii, order)?;
    // boundary-layer error decays like h^{min(s, 1−s)}
    let rate = order.s().min(order.a());
    let factor = 2f64.powf(rate) - 1.0;
    let mut values = Vec::with_capacity(radii.len());
    let mut err = Vec::with_capacity(radii.len());
    for (f, c) in fine.iter().zip(&coarse) {
        let corr = (f - c) / factor;
        values.push(f + corr);
        err.push(corr.abs());
    }
    Ok(PhiCurve {
        radii: radii.to_vec(),
        values,
        discretization_error: err,
        fine,
        coarse,
    })
}

pub fn write_phi_csv(curve: &PhiCurve, out: &mut impl Write) -> Result<()> {
    writeln!(out, "r,phi,err")?;
    for k in 0..curve.radii.len() {
        writeln!(
            out,
            "{},{},{}",
            fmt17(curve.radii[k]),
            fmt17(curve.values[k]),
            fmt17(curve.discretization_error[k])
        )?;
    }
    Ok(())
}

/// Planar cone `{θ ∈ [0, opening)}` with apex at the origin on a grid of
/// `cells` per side over `[−1, 1]²`.
pub fn cone_field(opening: f64, cells: usize) -> Result<PhaseField> {
    if !(opening > 0.0 && opening < std::f64::consts::TAU) {
        return Err(Error::Domain(format!("opening {opening} not in (0, 2π)")));
    }
    if cells % 4 != 0 {
        return Err(Error::Geometry("cone grids need a multiple of 4 cells per side".into()));
    }
    let g = GridGeometry::centered(2, 1.0, cells)?;
    let shape = Shape::Wedge { start: 0.0, opening };
    PhaseField::resolved(&g, &shape, &CellSet::empty(&g))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeEnergy {
    pub opening: f64,
    pub phi: f64,
    pub err: f64,
    /// `Φ` at half the evaluation radius, for the constancy check.
    pub phi_half: f64,
    pub err_half: f64,
}

impl ConeEnergy {
    /// `|Φ(r/2) − Φ(r)| / Φ(r)`.
    pub fn spread(&self) -> f64 {
        (self.phi_half - self.phi).abs() / self.phi.abs()
    }
}

/// `Φ_C` of a planar cone at `r_eval` and at `r_eval/2`.
pub fn cone_energy(opening: f64, order: FractionalOrder, r_eval: f64, cells: usize) -> Result<ConeEnergy> {
    let field = cone_field(opening, cells)?;
    let curve = phi(&field, &[r_eval / 2.0, r_eval], order)?;
    Ok(ConeEnergy {
        opening,
        phi: curve.values[1],
        err: curve.discretization_error[1],
        phi_half: curve.values[0],
        err_half: curve.discretization_error[0],
    })
}

pub fn write_cone_csv(rows: &[ConeEnergy], phi_halfplane: &ConeEnergy, out: &mut impl Write) -> Result<()> {
    writeln!(out, "opening,phi,phi_halfplane,gap,err")?;
    for c in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt17(c.opening),
            fmt17(c.phi),
            fmt17(phi_halfplane.phi),
            fmt17(c.phi - phi_halfplane.phi),
            fmt17(c.err + phi_halfplane.err)
        )?;
    }
    Ok(())
}

/// The 1D data shape as a cylinder over the first axis in 2D.
pub fn lift_shape(shape: &Shape) -> Result<Shape> {
    Ok(match shape {
        Shape::Empty => Shape::Empty,
        Shape::Full => Shape::Full,
        Shape::HalfSpace { normal, offset } => Shape::HalfSpace {
            normal: vec![normal.first().copied().unwrap_or(0.0), 0.0],
            offset: *offset,
        },
        Shape::Ball { center, radius } => {
            let c = center.first().copied().unwrap_or(0.0);
            Shape::Slabs {
                axis: 0,
                intervals: vec![(c - radius, c + radius)],
            }
        }
        Shape::Slabs { axis: 0, intervals } => Shape::Slabs {
            axis: 0,
            intervals: intervals.clone(),
        },
        Shape::Complement { of } => Shape::Complement {
            of: Box::new(lift_shape(of)?),
        },
        Shape::Union { parts } => Shape::Union {
            parts: parts.iter().map(lift_shape).collect::<Result<_>>()?,
        },
        Shape::Intersection { parts } => Shape::Intersection {
            parts: parts.iter().map(lift_shape).collect::<Result<_>>()?,
        },
        other => return Err(Error::Domain(format!("{other:?} is not a 1D shape"))),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductReport {
    pub certified_1d: bool,
    pub rows: usize,
    pub differing_cells: usize,
    pub energy_2d: f64,
    pub energy_cylinder: f64,
    pub matches: bool,
}

/// Cylinder `field1d × ℝ` on a strip of `rows` cells, with the 2D free region
/// over the 1D one. Above and below the strip the data is the same cylinder.
pub fn cylinder(field1d: &PhaseField, rows: usize) -> Result<PhaseField> {
    let g1 = field1d.geometry();
    if g1.dim() != 1 {
        return Err(Error::Geometry("product test needs a 1D field".into()));
    }
    field1d.require_resolved()?;
    let h = g1.h();
    let e = g1.extent()[0];
    let x0 = g1.origin()[0];
    let g2 = GridGeometry::new(&[x0, -(rows as f64) * h / 2.0], &[e, rows], h)?;
    let labels: Vec<Label> = (0..g2.len()).map(|i| field1d.label(g2.coords(i)[0])).collect();
    let free = CellSet::from_fn(&g2, |i| field1d.free_region().contains(g2.coords(i)[0]));
    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut open = None;
    for i in 0..=e {
        let inside = i < e && field1d.label(i) == Label::In;
        match (inside, open) {
            (true, None) => open = Some(i),
            (false, Some(start)) => {
                runs.push((x0 + start as f64 * h, x0 + i as f64 * h));
                open = None;
            }
            _ => {}
        }
    }
    let beyond = match field1d.exterior() {
        Some(shape) => Shape::Intersection {
            parts: vec![
                lift_shape(shape)?,
                Shape::Complement {
                    of: Box::new(Shape::Slabs {
                        axis: 0,
                        intervals: vec![(x0, x0 + e as f64 * h)],
                    }),
                },
            ],
        },
        None => Shape::Empty,
    };
    let exterior = Shape::Union {
        parts: vec![Shape::Slabs { axis: 0, intervals: runs }, beyond],
    };
    PhaseField::from_labels(&g2, labels, &free, Some(exterior))
}

/// Solves the 2D problem over cylindrical data and compares with the
/// cylinder over `field1d`.
pub fn product_consistency(field1d: &PhaseField, order: FractionalOrder, rows: usize) -> Result<ProductReport> {
    field1d.require_resolved()?;
    let t1 = build_table(field1d.geometry(), order)?;
    let certified_1d = certify_minimizer(field1d, &t1)?.certified;
    let cyl = cylinder(field1d, rows)?;
    let t2 = build_table(cyl.geometry(), order)?;
    let sol = minimize(&cyl.unresolved(), &t2, None)?;
    let differing = sol.field.differing_cells(&cyl)?.len();
    let energy_cylinder = crate::energy::local_energy(&cyl, &t2)?.j_value;
    Ok(ProductReport {
        certified_1d,
        rows,
        differing_cells: differing,
        energy_2d: sol.energy,
        energy_cylinder,
        matches: differing == 0,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Localization {
    pub extension_energy: f64,
    pub local_energy: f64,
    pub ratio: f64,
}

/// Extension energy over `B⁺_{inner}` against `J` over the unit ball.
pub fn localization(field: &PhaseField, table: &KernelTable, inner: f64) -> Result<Localization> {
    let g = field.geometry();
    let origin = vec![0.0; g.dim()];
    let unit = cells_in_ball(g, &origin, 1.0);
    let f = field.with_free_region(&unit)?;
    let j = crate::energy::local_energy(&f, table)?.j_value;
    let ext = extend(&f, &z_ladder(g.h(), 2.0 * inner), table.order())?;
    let e = weighted_energy(&ext, half_ball(inner, g.h()));
    Ok(Localization {
        extension_energy: e,
        local_energy: j,
        ratio: e / j,
    })
}
