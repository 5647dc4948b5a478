//! Exact minimization of the localized energy by a single s–t cut.
//!
//! The energy is a sum of unary terms and nonnegative pairwise terms
//! `w_ij·[x_i ≠ x_j]`, so it is graph-representable and one maximum flow gives
//! a global minimizer over all labelings of the free cells.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::convolver;
use crate::error::{Error, Result};
use crate::fft::Convolver;
use crate::grid::{Label, PhaseField};
use crate::kernel::{exterior_tails, ExteriorTails, KernelTable};
use crate::maxflow::GraphBuilder;
use crate::numeric::{sum, KahanSum};

/// Above this many free cells the all-pairs graph is refused.
pub const DENSE_FREE_CAP: usize = 6000;
/// Upper limit on pairwise terms with a cutoff.
pub const PAIR_CAP: usize = 60_000_000;

const NO_FREE: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct CutProblem {
    template: PhaseField,
    pub free_cells: Vec<usize>,
    /// Cost of labelling the free cell IN (interaction with fixed OUT data).
    pub unary_in: Vec<f64>,
    pub unary_out: Vec<f64>,
    pub pairs: Vec<(u32, u32, f64)>,
    pub constant: f64,
    pub cutoff: Option<f64>,
    /// Upper bound on the total weight of dropped free–free pairs.
    pub neglected_bound: f64,
    pub tail_error_bound: f64,
}

impl CutProblem {
    pub fn template(&self) -> &PhaseField {
        &self.template
    }

    /// Energy of a labelling of the free cells (`true` = IN).
    pub fn energy(&self, inside: &[bool]) -> f64 {
        let mut acc = KahanSum::new();
        acc.add(self.constant);
        for (k, &x) in inside.iter().enumerate() {
            acc.add(if x { self.unary_in[k] } else { self.unary_out[k] });
        }
        for &(i, j, w) in &self.pairs {
            if inside[i as usize] != inside[j as usize] {
                acc.add(w);
            }
        }
        acc.value()
    }

    /// Resolve the template with a labelling of the free cells.
    pub fn field_from(&self, inside: &[bool]) -> PhaseField {
        let mut labels = self.template.labels().to_vec();
        for (k, &c) in self.free_cells.iter().enumerate() {
            labels[c] = if inside[k] { Label::In } else { Label::Out };
        }
        PhaseField::from_labels(
            self.template.geometry(),
            labels,
            self.template.free_region(),
            self.template.exterior().cloned(),
        )
        .expect("labels come from a valid template")
    }

    /// Labelling of the free cells read from a field.
    pub fn labelling(&self, field: &PhaseField) -> Vec<bool> {
        self.free_cells.iter().map(|&c| field.label(c) == Label::In).collect()
    }
}

fn fixed_indicators(field: &PhaseField) -> (Vec<f64>, Vec<f64>) {
    let free = field.free_region();
    let mut fin = vec![0.0; field.geometry().len()];
    let mut fout = vec![0.0; field.geometry().len()];
    for i in 0..fin.len() {
        if free.contains(i) {
            continue;
        }
        match field.label(i) {
            Label::In => fin[i] = 1.0,
            Label::Out => fout[i] = 1.0,
            Label::Free => {}
        }
    }
    (fin, fout)
}

/// Build the cut problem for the free cells of `field`. Labels of cells
/// outside the free region are the boundary data; labels inside are ignored.
pub fn assemble(field: &PhaseField, table: &KernelTable, cutoff: Option<f64>) -> Result<CutProblem> {
    let geom = field.geometry();
    geom.check_same(table.geometry())?;
    let free = field.free_region();
    if free.is_empty() {
        return Err(Error::EmptyFreeRegion);
    }
    let free_cells = free.indices();
    let nf = free_cells.len();
    if cutoff.is_none() && nf > DENSE_FREE_CAP {
        return Err(Error::ResourceCap(format!(
            "{nf} free cells without a cutoff (limit {DENSE_FREE_CAP})"
        )));
    }
    let conv = convolver(table);
    let (fin, fout) = fixed_indicators(field);
    let near_out = conv.apply(&fout);
    let near_in = conv.apply(&fin);
    let tails = exterior_tails(geom, table.order(), field.exterior(), &free_cells);
    let unary_in: Vec<f64> = free_cells
        .iter()
        .enumerate()
        .map(|(k, &c)| near_out[c] + tails.outside[k])
        .collect();
    let unary_out: Vec<f64> = free_cells
        .iter()
        .enumerate()
        .map(|(k, &c)| near_in[c] + tails.inside[k])
        .collect();

    let mut pairs = Vec::new();
    let mut neglected = 0.0;
    match cutoff {
        None => {
            pairs.reserve(nf * (nf - 1) / 2);
            let weights = table.weights();
            let lin: Vec<usize> = free_cells.iter().map(|&c| table.linear_index(c)).collect();
            for a in 0..nf {
                let base = table.base_index(free_cells[a]);
                for b in (a + 1)..nf {
                    pairs.push((a as u32, b as u32, weights[base - lin[b]]));
                }
            }
        }
        Some(radius) => {
            let h = geom.h();
            let reach = (radius / h).floor() as i64;
            let dim = geom.dim();
            let mut offsets = Vec::new();
            let range = |k: usize| if k < dim { -reach..=reach } else { 0..=0 };
            for d2 in range(2) {
                for d1 in range(1) {
                    for d0 in range(0) {
                        let d = [d0, d1, d2];
                        // lexicographically positive half
                        let positive = d2 > 0 || (d2 == 0 && (d1 > 0 || (d1 == 0 && d0 > 0)));
                        let r2 = (d0 * d0 + d1 * d1 + d2 * d2) as f64;
                        if positive && r2.sqrt() * h <= radius {
                            offsets.push((d, table.weight(d)));
                        }
                    }
                }
            }
            let mut slot = vec![NO_FREE; geom.len()];
            for (k, &c) in free_cells.iter().enumerate() {
                slot[c] = k as u32;
            }
            for (a, &c) in free_cells.iter().enumerate() {
                let cc = geom.coords(c);
                for &(d, w) in &offsets {
                    let target = [cc[0] as i64 + d[0], cc[1] as i64 + d[1], cc[2] as i64 + d[2]];
                    if let Some(j) = geom.index_signed(target) {
                        let b = slot[j];
                        if b != NO_FREE {
                            pairs.push((a as u32, b, w));
                        }
                    }
                }
                if pairs.len() > PAIR_CAP {
                    return Err(Error::ResourceCap(format!("more than {PAIR_CAP} pairwise terms")));
                }
            }
            // weight of free–free pairs beyond the cutoff
            let far = Convolver::new(geom, |d| {
                let r2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
                if r2.sqrt() * h > radius {
                    table.weight(d)
                } else {
                    0.0
                }
            });
            let chi: Vec<f64> = (0..geom.len()).map(|i| if free.contains(i) { 1.0 } else { 0.0 }).collect();
            let reach_far = far.apply(&chi);
            neglected = 0.5 * sum(free_cells.iter().map(|&c| reach_far[c].max(0.0)));
        }
    }
    Ok(CutProblem {
        template: field.clone(),
        free_cells,
        unary_in,
        unary_out,
        pairs,
        constant: 0.0,
        cutoff,
        neglected_bound: neglected,
        tail_error_bound: tails.total_error(),
    })
}

#[derive(Clone, Debug)]
pub struct CutSolution {
    pub field: PhaseField,
    pub energy: f64,
    /// The returned labelling is within this of the optimum of the problem.
    pub rounding_bound: f64,
    pub neglected_bound: f64,
    pub polish_flips: usize,
}

/// Global minimizer of the cut problem. Ties resolve to the smallest IN set.
pub fn solve_exact(problem: &CutProblem) -> Result<CutSolution> {
    let nf = problem.free_cells.len();
    let s = nf;
    let t = nf + 1;
    let mut shifted = Vec::with_capacity(nf);
    let mut total = 0.0;
    for k in 0..nf {
        let m = problem.unary_in[k].min(problem.unary_out[k]);
        let (cin, cout) = (problem.unary_in[k] - m, problem.unary_out[k] - m);
        total += cin + cout;
        shifted.push((cin, cout));
    }
    total += problem.pairs.iter().map(|p| p.2).sum::<f64>();
    let limit = (1u64 << 61) as f64;
    let scale = if total > 0.0 { limit / total } else { 1.0 };
    let mut builder = GraphBuilder::new(nf + 2);
    let q = |x: f64| (x * scale).round() as i64;
    for (k, &(cin, cout)) in shifted.iter().enumerate() {
        builder.add_edge(s, k, q(cout), 0);
        builder.add_edge(k, t, q(cin), 0);
    }
    for &(i, j, w) in &problem.pairs {
        let c = q(w);
        builder.add_edge(i as usize, j as usize, c, c);
    }
    let edges = builder.edge_count() + problem.pairs.len();
    let mut graph = builder.build();
    graph.max_flow(s, t);
    let side = graph.source_side(s);
    let inside: Vec<bool> = side[..nf].to_vec();
    Ok(CutSolution {
        field: problem.field_from(&inside),
        energy: problem.energy(&inside),
        rounding_bound: edges as f64 / scale,
        neglected_bound: problem.neglected_bound,
        polish_flips: 0,
    })
}

/// Assemble, solve and, when pairs were dropped, descend on the full energy.
pub fn minimize(field: &PhaseField, table: &KernelTable, cutoff: Option<f64>) -> Result<CutSolution> {
    let problem = assemble(field, table, cutoff)?;
    let mut sol = solve_exact(&problem)?;
    if cutoff.is_some() {
        let mut state = FlipState::new(&sol.field, table)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flips = state.descend(&mut rng, usize::MAX);
        sol.polish_flips = flips;
        sol.energy = state.energy;
        sol.field = state.into_field();
    }
    Ok(sol)
}

/// Per-cell flip margins: `margin ≥ 0` means flipping does not lower J.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub certified: bool,
    pub worst_margin: f64,
    pub worst_cell: Option<usize>,
    pub tolerance: f64,
    pub checked: usize,
}

/// Interactions of each free cell with everything IN / OUT (box and exterior).
struct Couplings {
    cells: Vec<usize>,
    with_in: Vec<f64>,
    with_out: Vec<f64>,
    tails: ExteriorTails,
}

fn couplings(field: &PhaseField, table: &KernelTable) -> Result<Couplings> {
    field.geometry().check_same(table.geometry())?;
    field.require_resolved()?;
    let cells = field.free_region().indices();
    if cells.is_empty() {
        return Err(Error::EmptyFreeRegion);
    }
    let conv = convolver(table);
    let chi_in: Vec<f64> = field.labels().iter().map(|&l| (l == Label::In) as u8 as f64).collect();
    let chi_out: Vec<f64> = field.labels().iter().map(|&l| (l == Label::Out) as u8 as f64).collect();
    let a = conv.apply(&chi_in);
    let b = conv.apply(&chi_out);
    let tails = exterior_tails(field.geometry(), table.order(), field.exterior(), &cells);
    let with_in = cells.iter().enumerate().map(|(k, &c)| a[c] + tails.inside[k]).collect();
    let with_out = cells.iter().enumerate().map(|(k, &c)| b[c] + tails.outside[k]).collect();
    Ok(Couplings {
        cells,
        with_in,
        with_out,
        tails,
    })
}

/// Check that no single-cell flip inside the free region lowers the energy.
pub fn certify_minimizer(field: &PhaseField, table: &KernelTable) -> Result<Certificate> {
    let c = couplings(field, table)?;
    let mut worst = f64::INFINITY;
    let mut worst_cell = None;
    let mut scale: f64 = 0.0;
    for (k, &cell) in c.cells.iter().enumerate() {
        let margin = match field.label(cell) {
            Label::In => c.with_in[k] - c.with_out[k],
            _ => c.with_out[k] - c.with_in[k],
        };
        scale = scale.max(c.with_in[k] + c.with_out[k]);
        if margin < worst {
            worst = margin;
            worst_cell = Some(cell);
        }
    }
    let tolerance = 1e-10 * scale + c.tails.error.iter().cloned().fold(0.0, f64::max);
    Ok(Certificate {
        certified: worst >= -tolerance,
        worst_margin: worst,
        worst_cell,
        tolerance,
        checked: c.cells.len(),
    })
}

/// Incremental single-flip descent state over the free cells.
struct FlipState {
    field: PhaseField,
    table: KernelTable,
    cells: Vec<usize>,
    lin: Vec<usize>,
    base: Vec<usize>,
    with_in: Vec<f64>,
    with_out: Vec<f64>,
    inside: Vec<bool>,
    energy: f64,
    tol: f64,
}

impl FlipState {
    fn new(field: &PhaseField, table: &KernelTable) -> Result<Self> {
        let c = couplings(field, table)?;
        let energy = crate::energy::local_energy(field, table)?.j_value;
        let inside: Vec<bool> = c.cells.iter().map(|&x| field.label(x) == Label::In).collect();
        let scale = c
            .with_in
            .iter()
            .zip(&c.with_out)
            .map(|(a, b)| a + b)
            .fold(0.0, f64::max);
        Ok(Self {
            lin: c.cells.iter().map(|&x| table.linear_index(x)).collect(),
            base: c.cells.iter().map(|&x| table.base_index(x)).collect(),
            field: field.clone(),
            table: table.clone(),
            cells: c.cells,
            with_in: c.with_in,
            with_out: c.with_out,
            inside,
            energy,
            tol: 1e-13 * scale,
        })
    }

    /// Energy change from flipping free cell `k`.
    fn gain(&self, k: usize) -> f64 {
        if self.inside[k] {
            self.with_in[k] - self.with_out[k]
        } else {
            self.with_out[k] - self.with_in[k]
        }
    }

    fn flip(&mut self, k: usize) {
        self.energy += self.gain(k);
        let to_in = !self.inside[k];
        self.inside[k] = to_in;
        let weights = self.table.weights();
        let lk = self.lin[k];
        for j in 0..self.cells.len() {
            let w = weights[self.base[j] - lk];
            if to_in {
                self.with_in[j] += w;
                self.with_out[j] -= w;
            } else {
                self.with_in[j] -= w;
                self.with_out[j] += w;
            }
        }
    }

    /// Sweep in random order until no improving flip remains.
    fn descend(&mut self, rng: &mut ChaCha8Rng, max_sweeps: usize) -> usize {
        let mut order: Vec<usize> = (0..self.cells.len()).collect();
        let mut flips = 0;
        for _ in 0..max_sweeps {
            order.shuffle(rng);
            let mut changed = false;
            for &k in &order {
                if self.gain(k) < -self.tol {
                    self.flip(k);
                    flips += 1;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        flips
    }

    fn into_field(self) -> PhaseField {
        let mut labels = self.field.labels().to_vec();
        for (k, &c) in self.cells.iter().enumerate() {
            labels[c] = if self.inside[k] { Label::In } else { Label::Out };
        }
        PhaseField::from_labels(
            self.field.geometry(),
            labels,
            self.field.free_region(),
            self.field.exterior().cloned(),
        )
        .expect("valid labels")
    }
}

#[derive(Clone, Debug)]
pub struct LocalSearch {
    pub field: PhaseField,
    /// Energy after initialization and after every sweep.
    pub energy_trace: Vec<f64>,
    pub flips: usize,
}

/// Single-flip descent from a seeded random labelling of the free cells.
pub fn local_search(field: &PhaseField, table: &KernelTable, seed: u64) -> Result<LocalSearch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = field.resolve_with(|_| rng.gen_bool(0.5));
    run_search(&start, table, rng)
}

/// Single-flip descent from the labels already present.
pub fn local_search_from(field: &PhaseField, table: &KernelTable, seed: u64) -> Result<LocalSearch> {
    run_search(field, table, ChaCha8Rng::seed_from_u64(seed))
}

fn run_search(start: &PhaseField, table: &KernelTable, mut rng: ChaCha8Rng) -> Result<LocalSearch> {
    let mut state = FlipState::new(start, table)?;
    let mut trace = vec![state.energy];
    let mut flips = 0;
    loop {
        let f = state.descend(&mut rng, 1);
        trace.push(state.energy);
        flips += f;
        if f == 0 {
            break;
        }
    }
    Ok(LocalSearch {
        field: state.into_field(),
        energy_trace: trace,
        flips,
    })
}

/// Write the problem as text: `pair i j w` and `unary i c_in c_out` lines.
pub fn dump(problem: &CutProblem, out: &mut impl std::io::Write) -> Result<()> {
    for &(i, j, w) in &problem.pairs {
        writeln!(out, "pair {i} {j} {}", crate::numeric::fmt17(w))?;
    }
    for k in 0..problem.free_cells.len() {
        writeln!(
            out,
            "unary {k} {} {}",
            crate::numeric::fmt17(problem.unary_in[k]),
            crate::numeric::fmt17(problem.unary_out[k])
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::local_energy;
    use crate::grid::{cells_in_ball, CellSet, GridGeometry};
    use crate::kernel::{build_table, FractionalOrder};
    use crate::shape::Shape;

    fn setup(dim: usize, cells: usize, s: f64) -> (GridGeometry, KernelTable) {
        let g = GridGeometry::centered(dim, 1.0, cells).unwrap();
        let t = build_table(&g, FractionalOrder::new(s).unwrap()).unwrap();
        (g, t)
    }

    #[test]
    fn cut_cost_equals_local_energy() {
        let (g, t) = setup(2, 10, 0.5);
        let shape = Shape::Ball {
            center: vec![0.2, 0.0],
            radius: 0.6,
        };
        let omega = cells_in_ball(&g, &[0.0, 0.0], 0.55);
        let field = PhaseField::with_free(&g, &shape, &omega).unwrap();
        let p = assemble(&field, &t, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let labels: Vec<bool> = (0..p.free_cells.len()).map(|_| rng.gen_bool(0.5)).collect();
            let f = p.field_from(&labels);
            let j = local_energy(&f, &t).unwrap().j_value;
            let e = p.energy(&labels);
            assert!((j - e).abs() < 1e-10 * j, "{j} vs {e}");
        }
    }

    #[test]
    fn exact_on_enumerable_problem() {
        let (g, t) = setup(2, 8, 0.5);
        let shape = Shape::lower_half_space(2, 0, 0.1);
        let omega = CellSet::from_fn(&g, |i| {
            let c = g.coords(i);
            (3..=5).contains(&c[0]) && (2..=5).contains(&c[1])
        });
        let field = PhaseField::with_free(&g, &shape, &omega).unwrap();
        let p = assemble(&field, &t, None).unwrap();
        let n = p.free_cells.len();
        assert_eq!(n, 12);
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|k| mask & (1 << k) != 0).collect();
            best = best.min(p.energy(&labels));
        }
        let sol = solve_exact(&p).unwrap();
        assert!(sol.energy <= best + sol.rounding_bound + 1e-14, "{} vs {best}", sol.energy);
        assert!(certify_minimizer(&sol.field, &t).unwrap().certified);
    }

    #[test]
    fn local_search_trace_is_monotone_and_bounded_below() {
        let (g, t) = setup(2, 8, 0.5);
        let shape = Shape::lower_half_space(2, 1, 0.0);
        let omega = cells_in_ball(&g, &[0.0, 0.0], 0.6);
        let field = PhaseField::with_free(&g, &shape, &omega).unwrap();
        let exact = minimize(&field, &t, None).unwrap();
        for seed in 0..4 {
            let ls = local_search(&field, &t, seed).unwrap();
            for w in ls.energy_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            let last = *ls.energy_trace.last().unwrap();
            assert!(exact.energy <= last + exact.rounding_bound + 1e-12);
            let j = local_energy(&ls.field, &t).unwrap().j_value;
            assert!((j - last).abs() < 1e-9 * j);
        }
    }

    #[test]
    fn certificate_rejects_a_bad_labelling() {
        let (g, t) = setup(2, 12, 0.5);
        let shape = Shape::lower_half_space(2, 1, 0.0);
        let omega = cells_in_ball(&g, &[0.0, 0.0], 0.6);
        let field = PhaseField::with_free(&g, &shape, &omega).unwrap();
        let sol = minimize(&field, &t, None).unwrap();
        assert!(certify_minimizer(&sol.field, &t).unwrap().certified);
        // an isolated OUT cell deep in the IN phase
        let mut bad = sol.field.clone();
        let c = g.cell_containing(&[0.05, -0.4]).unwrap();
        assert_eq!(bad.label(c), Label::In);
        bad.set_label(c, Label::Out).unwrap();
        let cert = certify_minimizer(&bad, &t).unwrap();
        assert!(!cert.certified);
        assert_eq!(cert.worst_cell, Some(c));
    }

    #[test]
    fn cutoff_reports_neglected_weight() {
        let (g, t) = setup(2, 12, 0.5);
        let shape = Shape::lower_half_space(2, 1, 0.0);
        let field = PhaseField::with_free(&g, &shape, &cells_in_ball(&g, &[0.0, 0.0], 0.8)).unwrap();
        let p = assemble(&field, &t, Some(0.3)).unwrap();
        assert!(p.neglected_bound > 0.0);
        let dense = assemble(&field, &t, None).unwrap();
        let total: f64 = dense.pairs.iter().map(|x| x.2).sum();
        let kept: f64 = p.pairs.iter().map(|x| x.2).sum();
        assert!((total - kept - p.neglected_bound).abs() < 1e-9 * total);
    }

    #[test]
    fn rejects_empty_free_region() {
        let (g, t) = setup(1, 8, 0.5);
        let f = PhaseField::resolved(&g, &Shape::Empty, &CellSet::empty(&g)).unwrap();
        assert!(matches!(assemble(&f, &t, None), Err(Error::EmptyFreeRegion)));
    }

    #[test]
    fn dump_lists_every_term() {
        let (g, t) = setup(1, 6, 0.5);
        let f = PhaseField::with_free(&g, &Shape::Empty, &cells_in_ball(&g, &[0.0], 0.3)).unwrap();
        let p = assemble(&f, &t, None).unwrap();
        let mut buf = Vec::new();
        dump(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("pair")).count(), p.pairs.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("unary")).count(), p.free_cells.len());
    }
}
