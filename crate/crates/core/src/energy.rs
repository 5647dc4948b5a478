//! Localized fractional perimeter of lattice phase fields.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Convolver;
use crate::grid::{CellSet, Label, PhaseField};
use crate::kernel::{exterior_tails, KernelTable};
use crate::numeric::{sum, KahanSum};

pub const L_INNER: &str = "L(E∩Ω, CE)";
pub const L_OUTER: &str = "L(E∖Ω, CE∩Ω)";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    #[serde(rename = "L_terms")]
    pub l_terms: BTreeMap<String, f64>,
    #[serde(rename = "J_value")]
    pub j_value: f64,
    pub tail_term: f64,
    pub tail_error_bound: f64,
}

/// `L(A, B) = Σ_{a∈A} Σ_{b∈B} w(a − b)`, summed per source cell with
/// compensation and reduced in cell order.
pub fn interaction(a: &CellSet, b: &CellSet, table: &KernelTable) -> Result<f64> {
    a.geometry().check_same(b.geometry())?;
    a.geometry().check_same(table.geometry())?;
    let targets: Vec<usize> = b.iter().map(|j| table.linear_index(j)).collect();
    let weights = table.weights();
    let rows: Vec<f64> = a
        .indices()
        .par_iter()
        .map(|&i| {
            let base = table.base_index(i);
            let mut acc = KahanSum::new();
            for &t in &targets {
                acc.add(weights[base - t]);
            }
            acc.value()
        })
        .collect();
    Ok(sum(rows))
}

/// `J_Ω(E) = L(E∩Ω, CE) + L(E∖Ω, CE∩Ω)` with the exterior continuum data
/// entering through cell tails.
pub fn local_energy(field: &PhaseField, table: &KernelTable) -> Result<EnergyReport> {
    field.geometry().check_same(table.geometry())?;
    field.require_resolved()?;
    let omega = field.free_region();
    if omega.is_empty() {
        return Err(Error::EmptyFreeRegion);
    }
    let e = field.in_set();
    let ce = field.out_set();
    let e_in = e.intersection(omega)?;
    let e_out = e.difference(omega)?;
    let ce_in = ce.intersection(omega)?;
    let l1 = interaction(&e_in, &ce, table)?;
    let l2 = interaction(&e_out, &ce_in, table)?;
    let tails = exterior_tails(field.geometry(), table.order(), field.exterior(), &omega.indices());
    let mut tail = KahanSum::new();
    for (k, &c) in tails.cells.iter().enumerate() {
        match field.label(c) {
            Label::In => tail.add(tails.outside[k]),
            Label::Out => tail.add(tails.inside[k]),
            Label::Free => unreachable!(),
        }
    }
    let tail_term = tail.value();
    let mut l_terms = BTreeMap::new();
    l_terms.insert(L_INNER.to_string(), l1);
    l_terms.insert(L_OUTER.to_string(), l2);
    Ok(EnergyReport {
        l_terms,
        j_value: sum([l1, l2, tail_term]),
        tail_term,
        tail_error_bound: tails.total_error(),
    })
}

/// Both sides of `J(F) − J(E) = [L(A⁻, E∖A⁻) − L(A⁻, CE)] − [L(A⁺, E) −
/// L(A⁺, C(E∪A⁺))] + 2L(A⁻, A⁺)` with `A⁺ = F∖E`, `A⁻ = E∖F`. Interactions
/// with the exterior data enter through the cell tails on both sides.
pub fn minimality_identity(e: &PhaseField, f: &PhaseField, table: &KernelTable) -> Result<(f64, f64)> {
    e.geometry().check_same(f.geometry())?;
    let omega = e.free_region();
    let differs = e.differing_cells(f)?;
    if differs.iter().any(|&c| !omega.contains(c)) {
        return Err(Error::Domain("E and F differ outside the free region".into()));
    }
    let lhs = local_energy(f, table)?.j_value - local_energy(e, table)?.j_value;
    let ein = e.in_set();
    let eout = e.out_set();
    let plus = f.in_set().difference(&ein)?;
    let minus = ein.difference(&f.in_set())?;
    let tails = exterior_tails(e.geometry(), table.order(), e.exterior(), &differs);
    let tail_sum = |set: &CellSet, inside: bool| -> f64 {
        sum(tails
            .cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| set.contains(c))
            .map(|(k, _)| if inside { tails.inside[k] } else { tails.outside[k] }))
    };
    let l = |a: &CellSet, b: &CellSet| interaction(a, b, table);
    let first = l(&minus, &ein.difference(&minus)?)? + tail_sum(&minus, true) - l(&minus, &eout)? - tail_sum(&minus, false);
    let second = l(&plus, &ein)? + tail_sum(&plus, true) - l(&plus, &eout.difference(&plus)?)? - tail_sum(&plus, false);
    let rhs = first - second + 2.0 * l(&minus, &plus)?;
    Ok((lhs, rhs))
}

/// Whole-box cut `L(E, CE)` by FFT convolution of the weights with `χ_CE`.
pub fn fft_cut_energy(field: &PhaseField, table: &KernelTable) -> Result<f64> {
    field.geometry().check_same(table.geometry())?;
    field.require_resolved()?;
    let conv = convolver(table);
    let out: Vec<f64> = field
        .labels()
        .iter()
        .map(|&l| if l == Label::Out { 1.0 } else { 0.0 })
        .collect();
    let field_out = conv.apply(&out);
    Ok(sum(field
        .labels()
        .iter()
        .zip(&field_out)
        .filter(|(l, _)| **l == Label::In)
        .map(|(_, v)| *v)))
}

/// Convolver for a weight table.
pub fn convolver(table: &KernelTable) -> Convolver {
    Convolver::new(table.geometry(), |d| table.weight(d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// `u = χ_E − χ_CE`.
    Signed,
    /// `u = χ_E`.
    Indicator,
}

/// `∫∫_{R^{2n} ∖ (CB_r)²} |u(x) − u(y)|² K` for the ball of radius `r`
/// about the origin, written as the B×B sum plus twice the B×(box ∖ B) sum
/// plus twice the interaction of B with the exterior data.
pub fn scalar_energy(field: &PhaseField, table: &KernelTable, r: f64, encoding: Encoding) -> Result<f64> {
    field.geometry().check_same(table.geometry())?;
    field.require_resolved()?;
    let geom = field.geometry();
    let origin = vec![0.0; geom.dim()];
    let ball = crate::grid::cells_in_ball(geom, &origin, r);
    if ball.is_empty() {
        return Err(Error::Domain(format!("ball of radius {r} contains no cell")));
    }
    if geom.distance_to_boundary(&origin) < r {
        return Err(Error::Domain("ball leaves the box".into()));
    }
    let u = |i: usize| -> f64 {
        match (field.label(i), encoding) {
            (Label::In, _) => 1.0,
            (_, Encoding::Signed) => -1.0,
            _ => 0.0,
        }
    };
    let jump = match encoding {
        Encoding::Signed => 4.0,
        Encoding::Indicator => 1.0,
    };
    let weights = table.weights();
    let all: Vec<(usize, usize, f64, bool)> = (0..geom.len())
        .map(|j| (j, table.linear_index(j), u(j), ball.contains(j)))
        .collect();
    let rows: Vec<f64> = ball
        .indices()
        .par_iter()
        .map(|&i| {
            let base = table.base_index(i);
            let ui = u(i);
            let mut acc = KahanSum::new();
            for &(_, lin, uj, in_ball) in &all {
                let d = ui - uj;
                if d != 0.0 {
                    let factor = if in_ball { 1.0 } else { 2.0 };
                    acc.add(factor * d * d * weights[base - lin]);
                }
            }
            acc.value()
        })
        .collect();
    let tails = exterior_tails(geom, table.order(), field.exterior(), &ball.indices());
    let mut tail = KahanSum::new();
    for (k, &c) in tails.cells.iter().enumerate() {
        let opposite = if field.label(c) == Label::In {
            tails.outside[k]
        } else {
            tails.inside[k]
        };
        tail.add(2.0 * jump * opposite);
    }
    Ok(sum(rows) + tail.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use crate::kernel::{build_table, FractionalOrder};
    use crate::shape::Shape;

    fn half_line_field(cells: usize) -> (PhaseField, KernelTable) {
        let g = GridGeometry::centered(1, 1.0, cells).unwrap();
        let shape = Shape::lower_half_space(1, 0, 0.0);
        let field = PhaseField::resolved(&g, &shape, &CellSet::full(&g)).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.5).unwrap()).unwrap();
        (field, t)
    }

    #[test]
    fn interaction_is_symmetric_and_additive() {
        let g = GridGeometry::centered(2, 1.0, 8).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.4).unwrap()).unwrap();
        let a = CellSet::from_fn(&g, |i| i % 3 == 0);
        let b = CellSet::from_fn(&g, |i| i % 3 == 1);
        let c = CellSet::from_fn(&g, |i| i % 3 == 2);
        let ab = interaction(&a, &b, &t).unwrap();
        assert!((ab - interaction(&b, &a, &t).unwrap()).abs() < 1e-12 * ab);
        let bc = b.union(&c).unwrap();
        let lhs = interaction(&a, &bc, &t).unwrap();
        let rhs = ab + interaction(&a, &c, &t).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs);
    }

    #[test]
    fn fft_matches_brute_force_cut() {
        let g = GridGeometry::centered(2, 1.0, 12).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.6).unwrap()).unwrap();
        let disk = Shape::Ball {
            center: vec![0.1, -0.2],
            radius: 0.6,
        };
        let f = PhaseField::resolved(&g, &disk, &CellSet::empty(&g)).unwrap();
        let brute = interaction(&f.in_set(), &f.out_set(), &t).unwrap();
        let fast = fft_cut_energy(&f, &t).unwrap();
        assert!((brute - fast).abs() < 1e-10 * brute);
    }

    #[test]
    fn half_line_energy_components() {
        let (field, t) = half_line_field(16);
        let rep = local_energy(&field, &t).unwrap();
        assert_eq!(rep.l_terms[L_OUTER], 0.0);
        assert!(rep.tail_term > 0.0);
        assert!(rep.tail_error_bound < 1e-8);
        let total = rep.l_terms[L_INNER] + rep.tail_term;
        assert!((total - rep.j_value).abs() < 1e-14 * total);
    }

    #[test]
    fn complement_symmetry() {
        let g = GridGeometry::centered(2, 1.0, 10).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.5).unwrap()).unwrap();
        let shape = Shape::lower_half_space(2, 0, 0.13);
        let omega = crate::grid::cells_in_ball(&g, &[0.0, 0.0], 0.7);
        let f = PhaseField::resolved(&g, &shape, &omega).unwrap();
        let a = local_energy(&f, &t).unwrap().j_value;
        let b = local_energy(&f.complement(), &t).unwrap().j_value;
        assert!((a - b).abs() < 1e-10 * a, "{a} vs {b}");
    }

    #[test]
    fn minimality_identity_on_a_small_instance() {
        let g = GridGeometry::centered(2, 1.0, 12).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.3).unwrap()).unwrap();
        let omega = crate::grid::cells_in_ball(&g, &[0.0, 0.0], 0.6);
        let e = PhaseField::resolved(&g, &Shape::lower_half_space(2, 1, 0.1), &omega).unwrap();
        let f = e.resolve_with(|i| i % 3 == 0);
        let (lhs, rhs) = minimality_identity(&e, &f, &t).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn unresolved_field_is_rejected() {
        let g = GridGeometry::centered(1, 1.0, 8).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.5).unwrap()).unwrap();
        let f = PhaseField::with_free(&g, &Shape::Empty, &CellSet::full(&g)).unwrap();
        assert!(matches!(local_energy(&f, &t), Err(Error::Unresolved(_))));
    }

    #[test]
    fn scalar_encodings_relate_to_local_energy() {
        let g = GridGeometry::centered(2, 1.0, 12).unwrap();
        let t = build_table(&g, FractionalOrder::new(0.5).unwrap()).unwrap();
        let shape = Shape::lower_half_space(2, 1, 0.05);
        let r = 0.5;
        let ball = crate::grid::cells_in_ball(&g, &[0.0, 0.0], r);
        let f = PhaseField::resolved(&g, &shape, &ball).unwrap();
        let j = local_energy(&f, &t).unwrap().j_value;
        let signed = scalar_energy(&f, &t, r, Encoding::Signed).unwrap();
        let ind = scalar_energy(&f, &t, r, Encoding::Indicator).unwrap();
        assert!((signed - 8.0 * j).abs() < 1e-10 * signed, "{signed} vs {}", 8.0 * j);
        assert!((ind - 2.0 * j).abs() < 1e-10 * ind);
    }
}
