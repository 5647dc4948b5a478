//! Nonlocal mean curvature in the principal-value sense, and the density and
//! clean-ball diagnostics of resolved fields.
//!
//! The value at a cell is `Σ ±w(c − c0)/h^n` over cells whose centers lie
//! farther than δ from the center of `c0`, plus the interaction of `c0` with
//! the prescribed exterior. Truncating the principal value at δ costs
//! `O(δ^{1−s})`; the reported bound estimates that term by comparing δ and 2δ.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, Label, PhaseField};
use crate::kernel::{exterior_tails, KernelTable};
use crate::numeric::{fmt17, KahanSum};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureSample {
    pub point: Vec<f64>,
    pub value: f64,
    pub excision_radius: f64,
    pub pv_error_bound: f64,
    pub tail_error_bound: f64,
    /// False when the evaluation cell has no face neighbour of the opposite phase.
    pub on_boundary: bool,
}

/// Values truncated at δ and at 2δ for one cell, plus the tail error.
struct Truncated {
    at_delta: f64,
    at_two_delta: f64,
    tail_error: f64,
}

fn truncated_values(field: &PhaseField, cell: usize, table: &KernelTable, delta: f64) -> Result<Truncated> {
    let geom = field.geometry();
    if field.label(cell) == Label::Free {
        return Err(Error::Unresolved(field.unresolved_count()));
    }
    let dim = geom.dim();
    let c0 = geom.center(cell);
    let vol = geom.cell_volume();
    let weights = table.weights();
    let base = table.base_index(cell);
    let mut far = KahanSum::new();
    let mut ring = KahanSum::new();
    for j in 0..geom.len() {
        let sign = match field.label(j) {
            Label::In => 1.0,
            Label::Out => -1.0,
            Label::Free => return Err(Error::Unresolved(field.unresolved_count())),
        };
        let cj = geom.center(j);
        let r2: f64 = (0..dim).map(|k| (cj[k] - c0[k]).powi(2)).sum();
        if r2 <= delta * delta {
            continue;
        }
        let w = sign * weights[base - table.linear_index(j)];
        if r2 > 4.0 * delta * delta {
            far.add(w);
        } else {
            ring.add(w);
        }
    }
    let tails = exterior_tails(geom, table.order(), field.exterior(), &[cell]);
    let tail = (tails.inside[0] - tails.outside[0]) / vol;
    let far = far.value() / vol + tail;
    Ok(Truncated {
        at_delta: far + ring.value() / vol,
        at_two_delta: far,
        tail_error: tails.error[0] / vol,
    })
}

fn richardson(order_s: f64, t: &Truncated) -> f64 {
    (t.at_delta - t.at_two_delta).abs() / (2f64.powf(1.0 - order_s) - 1.0)
}

/// Bound on the value change when the evaluation point sits `d` off a flat
/// interface: the strip of width `d` outside the excision ball.
fn displacement_bound(dim: usize, s: f64, d: f64, delta: f64) -> f64 {
    let sigma = match dim {
        1 => return 0.0,
        2 => 2.0,
        _ => 2.0 * std::f64::consts::PI,
    };
    let rho2 = (delta * delta - d * d).max(0.25 * delta * delta);
    2.0 * d * sigma * rho2.powf(-(1.0 + s) / 2.0) / (1.0 + s)
}

fn has_opposite_neighbour(field: &PhaseField, cell: usize) -> bool {
    let l = field.label(cell);
    field.geometry().neighbors(cell).any(|n| field.label(n) != l)
}

fn check_delta(geom: &GridGeometry, delta: f64) -> Result<()> {
    if !(delta >= 2.0 * geom.h() * (1.0 - 1e-12)) {
        return Err(Error::Domain(format!("excision radius {delta} is below 2h")));
    }
    Ok(())
}

/// Curvature at the center of the cell containing `x0`.
pub fn nl_mean_curvature(field: &PhaseField, x0: &[f64], table: &KernelTable, delta: f64) -> Result<CurvatureSample> {
    let geom = field.geometry();
    geom.check_same(table.geometry())?;
    check_delta(geom, delta)?;
    let cell = geom
        .cell_containing(x0)
        .ok_or_else(|| Error::Domain("evaluation point outside the box".into()))?;
    let t = truncated_values(field, cell, table, delta)?;
    let c = geom.center(cell);
    let d = (0..geom.dim()).map(|k| (x0[k] - c[k]).powi(2)).sum::<f64>().sqrt();
    let s = table.order().s();
    let value = t.at_delta;
    Ok(CurvatureSample {
        point: x0.to_vec(),
        value,
        excision_radius: delta,
        pv_error_bound: richardson(s, &t) + displacement_bound(geom.dim(), s, d, delta) + 1e-12 * value.abs(),
        tail_error_bound: t.tail_error,
        on_boundary: has_opposite_neighbour(field, cell),
    })
}

/// Curvature at the midpoint of the face shared by two adjacent cells,
/// averaged over the two cells. Odd displacement errors cancel.
pub fn face_curvature(field: &PhaseField, a: usize, b: usize, table: &KernelTable, delta: f64) -> Result<CurvatureSample> {
    let geom = field.geometry();
    geom.check_same(table.geometry())?;
    check_delta(geom, delta)?;
    if !geom.neighbors(a).any(|n| n == b) {
        return Err(Error::Domain("cells do not share a face".into()));
    }
    let ta = truncated_values(field, a, table, delta)?;
    let tb = truncated_values(field, b, table, delta)?;
    let avg = Truncated {
        at_delta: 0.5 * (ta.at_delta + tb.at_delta),
        at_two_delta: 0.5 * (ta.at_two_delta + tb.at_two_delta),
        tail_error: 0.5 * (ta.tail_error + tb.tail_error),
    };
    let ca = geom.center(a);
    let cb = geom.center(b);
    let point: Vec<f64> = (0..geom.dim()).map(|k| 0.5 * (ca[k] + cb[k])).collect();
    let s = table.order().s();
    Ok(CurvatureSample {
        point,
        value: avg.at_delta,
        excision_radius: delta,
        pv_error_bound: richardson(s, &avg) + 1e-12 * avg.at_delta.abs(),
        tail_error_bound: avg.tail_error,
        on_boundary: field.label(a) != field.label(b),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViscosityReport {
    pub samples: Vec<CurvatureSample>,
    pub violations: Vec<CurvatureSample>,
    /// Largest `value − bound` over samples (negative when all pass).
    pub max_excess: f64,
}

/// At every IN/OUT face inside the free region where a discrete ball of
/// radius 4h fits inside E and touches the face, the curvature must not
/// exceed its error bound.
pub fn viscosity_sign_check(field: &PhaseField, table: &KernelTable, delta: f64) -> Result<ViscosityReport> {
    let geom = field.geometry();
    geom.check_same(table.geometry())?;
    field.require_resolved()?;
    check_delta(geom, delta)?;
    let dim = geom.dim();
    let h = geom.h();
    let rho = 4.0 * h;
    let free = field.free_region();
    let mut faces = Vec::new();
    for a in free.iter() {
        if field.label(a) != Label::In {
            continue;
        }
        for b in geom.neighbors(a) {
            if field.label(b) != Label::Out || !free.contains(b) {
                continue;
            }
            let ca = geom.center(a);
            let cb = geom.center(b);
            let mid: Vec<f64> = (0..dim).map(|k| 0.5 * (ca[k] + cb[k])).collect();
            if geom.distance_to_boundary(&mid) < 2.0 * delta + h {
                continue;
            }
            // ball center pushed into E along the face normal
            let center: Vec<f64> = (0..dim).map(|k| mid[k] - rho * (cb[k] - ca[k]) / h).collect();
            if geom.distance_to_boundary(&center) < rho {
                continue;
            }
            let ball = crate::grid::cells_in_ball(geom, &center, rho * (1.0 - 1e-9));
            if ball.iter().all(|c| field.label(c) == Label::In) {
                faces.push((a, b));
            }
        }
    }
    let samples: Vec<Result<CurvatureSample>> = faces
        .par_iter()
        .map(|&(a, b)| face_curvature(field, a, b, table, delta))
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        out.push(s?);
    }
    let mut max_excess = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for s in &out {
        let excess = s.value - (s.pv_error_bound + s.tail_error_bound);
        max_excess = max_excess.max(excess);
        if excess > 0.0 {
            violations.push(s.clone());
        }
    }
    Ok(ViscosityReport {
        samples: out,
        violations,
        max_excess,
    })
}

/// Face midpoint toward the first face neighbour of the opposite phase, or
/// the cell center when there is none.
pub fn interface_point(field: &PhaseField, cell: usize) -> Vec<f64> {
    let geom = field.geometry();
    let dim = geom.dim();
    let c = geom.center(cell);
    let l = field.label(cell);
    for n in geom.neighbors(cell) {
        if field.label(n) != l {
            let cn = geom.center(n);
            return (0..dim).map(|k| 0.5 * (c[k] + cn[k])).collect();
        }
    }
    c[..dim].to_vec()
}

/// `(r, |E∩B_r(x)|/rⁿ)` about the interface point of `cell`.
pub fn density_profile(field: &PhaseField, cell: usize, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    field.require_resolved()?;
    let geom = field.geometry();
    let p = interface_point(field, cell);
    let room = geom.distance_to_boundary(&p);
    let e = field.in_set();
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        if r > room + 1e-12 {
            return Err(Error::Domain(format!("radius {r} leaves the box")));
        }
        let ball = crate::grid::cells_in_ball(geom, &p, r);
        let m = ball.intersection(&e)?.measure();
        out.push((r, m / r.powi(geom.dim() as i32)));
    }
    Ok(out)
}

/// Smallest `|E∩B_r(x)|/rⁿ` over interface cells of the free region and
/// radii `4h, 5h, …` up to a quarter of the shortest box side, keeping each
/// ball inside the box.
pub fn boundary_density(field: &PhaseField) -> Result<f64> {
    field.require_resolved()?;
    let geom = field.geometry();
    let h = geom.h();
    let side = geom.extent()[..geom.dim()].iter().min().copied().unwrap_or(0) as f64 * h;
    let top = side / 4.0;
    let cells = crate::grid::boundary_cells(field)?.intersection(field.free_region())?;
    let worst = cells
        .indices()
        .par_iter()
        .map(|&c| -> Result<f64> {
            let room = geom.distance_to_boundary(&interface_point(field, c));
            let radii: Vec<f64> = (4..)
                .map(|k| k as f64 * h)
                .take_while(|&r| r <= top.min(room) + 1e-12)
                .collect();
            Ok(density_profile(field, c, &radii)?
                .iter()
                .map(|p| p.1)
                .fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CleanBall {
    pub found_in: bool,
    pub found_out: bool,
    /// Radius ratio of the smaller of the found one-phase balls.
    pub c_realized: f64,
    /// Set when the realized ratio is at the grid scale.
    pub flagged: bool,
}

/// Largest one-phase balls inside `B_r(x)` about the interface point of `cell`.
pub fn clean_ball_check(field: &PhaseField, cell: usize, r: f64) -> Result<CleanBall> {
    field.require_resolved()?;
    let geom = field.geometry();
    let dim = geom.dim();
    let h = geom.h();
    let p = interface_point(field, cell);
    if geom.distance_to_boundary(&p) + 1e-12 < r {
        return Err(Error::Domain(format!("ball of radius {r} leaves the box")));
    }
    let members: Vec<(Vec<f64>, bool)> = crate::grid::cells_in_ball(geom, &p, r)
        .iter()
        .map(|c| (geom.center_vec(c), field.label(c) == Label::In))
        .collect();
    let dist = |a: &[f64], b: &[f64]| (0..dim).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    let best = |phase: bool| -> f64 {
        let opposite: Vec<&Vec<f64>> = members.iter().filter(|m| m.1 != phase).map(|m| &m.0).collect();
        members
            .par_iter()
            .filter(|m| m.1 == phase)
            .map(|(y, _)| {
                let mut rho = r - dist(y, &p);
                for o in &opposite {
                    rho = rho.min(dist(y, o));
                }
                rho
            })
            .reduce(|| 0.0, f64::max)
    };
    let rho_in = best(true);
    let rho_out = best(false);
    let found_in = rho_in >= h * (1.0 - 1e-9);
    let found_out = rho_out >= h * (1.0 - 1e-9);
    let c_realized = match (found_in, found_out) {
        (true, true) => rho_in.min(rho_out) / r,
        (true, false) => rho_in / r,
        (false, true) => rho_out / r,
        (false, false) => 0.0,
    };
    Ok(CleanBall {
        found_in,
        found_out,
        c_realized,
        flagged: c_realized <= 1.5 * h / r,
    })
}

/// CSV rows `x..., value, delta, pv_error, tail_error`.
pub fn write_csv(samples: &[CurvatureSample], dim: usize, out: &mut impl Write) -> Result<()> {
    let coords = ["x", "y", "z"];
    let mut header: Vec<&str> = coords[..dim].to_vec();
    header.extend(["value", "delta", "pv_error", "tail_error"]);
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let mut row: Vec<String> = s.point.iter().map(|&v| fmt17(v)).collect();
        row.extend([s.value, s.excision_radius, s.pv_error_bound, s.tail_error_bound].map(fmt17));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
