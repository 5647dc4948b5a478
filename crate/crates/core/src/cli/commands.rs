use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{check_radii, FlowExpect, PhiCheck, RunConfig, Scenario, MAX_STEPS};
use super::report::{write_json, Report};
use super::{io_failure, Failure};
use crate::curvature::{nl_mean_curvature, viscosity_sign_check, write_csv, CurvatureSample};
use crate::energy::{local_energy, EnergyReport};
use crate::extension::{self, cone_energy, cylinder, product_consistency, write_cone_csv, write_phi_csv, ProductReport};
use crate::flow::{build_flow_kernel, run_flow_with, write_traces, StopReason};
use crate::grid::PhaseField;
use crate::io::{write_mask, write_pgm};
use crate::kernel::{build_table, KernelTable};
use crate::mincut::{assemble, certify_minimizer, dump, minimize as solve, Certificate, CutSolution};

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub dir: &'a Path,
    pub out: &'a Path,
    pub frames: Option<usize>,
}

impl Context<'_> {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<fs::File>, Failure> {
        let p = self.path(name);
        fs::File::create(&p).map(BufWriter::new).map_err(|e| io_failure(&p, e))
    }

    pub fn mask(&self, field: &PhaseField, stem: &str) -> Result<(), Failure> {
        let ext = if field.geometry().dim() == 2 { "pgm" } else { "txt" };
        Ok(write_mask(field, &self.path(&format!("{stem}.{ext}")))?)
    }
}

fn finish(mut w: BufWriter<fs::File>) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::Internal(e.to_string()))
}

fn require_free(sc: &Scenario) -> Result<(), Failure> {
    if sc.free.is_empty() {
        return Err(Failure::Schema("this command needs a nonempty [free] region".into()));
    }
    Ok(())
}

fn cutoff(value: Option<f64>, key: &str) -> Result<Option<f64>, Failure> {
    match value {
        Some(c) if !(c > 0.0 && c.is_finite()) => Err(Failure::Schema(format!("{key} = {c} violates cutoff > 0"))),
        other => Ok(other),
    }
}

#[derive(Serialize)]
struct MinimizeSummary {
    free_cells: usize,
    cut_energy: f64,
    rounding_bound: f64,
    neglected_bound: f64,
    polish_flips: usize,
    energy: EnergyReport,
    certificate: Certificate,
}

/// Minimizes, certifies and records the certificate check.
pub(super) fn certified_minimizer(
    sc: &Scenario,
    table: &KernelTable,
    cut: Option<f64>,
    report: &mut Report,
) -> Result<(CutSolution, Certificate), Failure> {
    let sol = solve(&sc.problem(), table, cut)?;
    let cert = certify_minimizer(&sol.field, table)?;
    report.push(
        "minimizer certificate (largest single-flip decrease)",
        -cert.worst_margin,
        cert.tolerance,
        cert.certified,
    );
    Ok((sol, cert))
}

pub fn energy(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let sc = ctx.cfg.scenario(ctx.dir)?;
    require_free(&sc)?;
    let table = build_table(&sc.geometry, sc.order)?;
    let field = sc.rasterized();
    let e = local_energy(&field, &table)?;
    write_json(&ctx.path("energy.json"), &e)?;
    ctx.mask(&field, "set")?;
    let l_sum: f64 = e.l_terms.values().sum();
    let j = e.j_value;
    report.at_most(
        "J_value equals L terms plus tail term",
        (j - l_sum - e.tail_term).abs(),
        1e-12 * j.abs(),
    );
    let l_min = e.l_terms.values().copied().fold(f64::INFINITY, f64::min).min(e.tail_term);
    report.at_most("L terms and tail term nonnegative", -l_min, 0.0);
    report.push("tail term resolved by its error bound", e.tail_error_bound, e.tail_term, e.tail_error_bound < e.tail_term || e.tail_term == 0.0);
    if ctx.cfg.energy.complement {
        let c = local_energy(&field.complement(), &table)?;
        report.at_most(
            "J(E) equals J(complement of E)",
            (c.j_value - j).abs(),
            1e-9 * j.abs() + e.tail_error_bound + c.tail_error_bound,
        );
    }
    Ok(())
}

pub fn minimize(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let sc = ctx.cfg.scenario(ctx.dir)?;
    require_free(&sc)?;
    let cut = cutoff(ctx.cfg.minimize.cutoff, "minimize.cutoff")?;
    let table = build_table(&sc.geometry, sc.order)?;
    if ctx.cfg.minimize.dump {
        let problem = assemble(&sc.problem(), &table, cut)?;
        let mut w = ctx.create("cut_problem.txt")?;
        dump(&problem, &mut w)?;
        finish(w)?;
    }
    let (sol, cert) = certified_minimizer(&sc, &table, cut, report)?;
    let e = local_energy(&sol.field, &table)?;
    let raster = local_energy(&sc.rasterized(), &table)?.j_value;
    let slack = sol.rounding_bound + sol.neglected_bound;
    report.at_most(
        "J(minimizer) - J(rasterized set)",
        e.j_value - raster,
        slack + 1e-12 * raster.abs(),
    );
    report.at_most(
        "cut energy equals J(minimizer)",
        (sol.energy - e.j_value).abs(),
        slack + 1e-9 * e.j_value.abs(),
    );
    ctx.mask(&sol.field, "minimizer")?;
    write_json(
        &ctx.path("minimize.json"),
        &MinimizeSummary {
            free_cells: sc.free.count(),
            cut_energy: sol.energy,
            rounding_bound: sol.rounding_bound,
            neglected_bound: sol.neglected_bound,
            polish_flips: sol.polish_flips,
            energy: e,
            certificate: cert,
        },
    )
}

pub fn curvature(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let p = &ctx.cfg.curvature;
    let sc = ctx.cfg.scenario(ctx.dir)?;
    let dim = sc.geometry.dim();
    let delta = p.delta_cells.unwrap_or(3.0) * sc.geometry.h();
    if !(delta > 0.0) {
        return Err(Failure::Schema("curvature.delta_cells must be positive".into()));
    }
    if !p.expected.is_empty() && p.expected.len() != p.points.len() {
        return Err(Failure::Schema("curvature.expected must match curvature.points".into()));
    }
    if p.points.iter().any(|x| x.len() != dim) {
        return Err(Failure::Schema(format!("curvature.points need {dim} coordinates")));
    }
    let table = build_table(&sc.geometry, sc.order)?;
    let field = if p.minimize {
        require_free(&sc)?;
        let (sol, _) = certified_minimizer(&sc, &table, cutoff(p.cutoff, "curvature.cutoff")?, report)?;
        ctx.mask(&sol.field, "minimizer")?;
        sol.field
    } else {
        sc.rasterized()
    };
    let samples: Vec<CurvatureSample> = if p.points.is_empty() {
        require_free(&sc)?;
        let v = viscosity_sign_check(&field, &table, delta)?;
        if p.minimize {
            report.push(
                format!("curvature <= pv_error_bound at {} tangent-ball faces", v.samples.len()),
                v.max_excess,
                0.0,
                v.violations.is_empty(),
            );
        }
        v.samples
    } else {
        let rel = p.rel_tol.unwrap_or(0.02);
        let mut out = Vec::new();
        for (k, x) in p.points.iter().enumerate() {
            let c = nl_mean_curvature(&field, x, &table, delta)?;
            if let Some(&want) = p.expected.get(k) {
                report.at_most(
                    format!("curvature at {x:?} against {want}"),
                    (c.value - want).abs(),
                    rel * want.abs() + c.pv_error_bound + c.tail_error_bound,
                );
            }
            out.push(c);
        }
        out
    };
    let bad = samples.iter().filter(|c| !c.value.is_finite()).count();
    report.at_most("non-finite curvature samples", bad as f64, 0.0);
    let mut w = ctx.create("curvature.csv")?;
    write_csv(&samples, dim, &mut w)?;
    finish(w)
}

#[derive(Serialize)]
struct FlowSummary {
    ell: f64,
    t: f64,
    steps: usize,
    stop: StopReason,
    extinction_step: Option<usize>,
}

pub fn flow(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let p = &ctx.cfg.flow;
    let sc = ctx.cfg.scenario(ctx.dir)?;
    require_free(&sc)?;
    let ell = p.ell.ok_or_else(|| Failure::Schema("missing key `flow.ell`".into()))?;
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Failure::Schema(format!("flow.ell = {ell} violates ell > 0")));
    }
    let steps = p.steps.unwrap_or(1000);
    if steps > MAX_STEPS {
        return Err(Failure::Cap(format!("flow.steps = {steps} exceeds {MAX_STEPS}")));
    }
    let every = ctx.frames.or(p.frames);
    if every == Some(0) {
        return Err(Failure::Schema("frame interval must be at least 1".into()));
    }
    let t = ell.powf(sc.order.s());
    let kernel = build_flow_kernel(&sc.geometry, sc.order, t).map_err(|e| Failure::Schema(e.to_string()))?;
    let field = sc.rasterized();
    let frames_dir = ctx.path("frames");
    let dim = sc.geometry.dim();
    let frame = |step: usize, f: &PhaseField| -> crate::error::Result<()> {
        if dim == 2 {
            if let Some(k) = every {
                if step % k == 0 {
                    let path = frames_dir.join(format!("frame_{step:06}.pgm"));
                    let mut w = BufWriter::new(fs::File::create(path)?);
                    write_pgm(&f.in_set(), &mut w)?;
                    w.flush()?;
                }
            }
        }
        Ok(())
    };
    if every.is_some() && dim == 2 {
        fs::create_dir_all(&frames_dir).map_err(|e| io_failure(&frames_dir, e))?;
        frame(0, &field)?;
    }
    let run = run_flow_with(&field, &kernel, steps, frame)?;
    report.push(
        "kernel center weight below 1/2",
        kernel.sample([0, 0, 0]),
        0.5,
        kernel.sample([0, 0, 0]) < 0.5,
    );
    match p.expect {
        FlowExpect::None => {}
        FlowExpect::Fixed => {
            let moved = run.final_field.differing_cells(&field)?.len();
            report.at_most("cells changed by the flow", moved as f64, 0.0);
        }
        FlowExpect::Shrinking => {
            let growth = run
                .traces
                .windows(2)
                .map(|w| w[1].measure - w[0].measure)
                .fold(f64::NEG_INFINITY, f64::max);
            report.at_most("largest one-step growth of the IN measure", growth, 0.0);
        }
        FlowExpect::Extinction => {
            let step = run.extinction_step();
            report.push(
                "extinction step",
                step.map_or(f64::NAN, |s| s as f64),
                steps as f64,
                step.is_some(),
            );
        }
    }
    let mut w = ctx.create("flow.csv")?;
    write_traces(&run.traces, &mut w)?;
    finish(w)?;
    ctx.mask(&run.final_field, "final")?;
    write_json(
        &ctx.path("flow.json"),
        &FlowSummary {
            ell,
            t,
            steps: run.traces.len() - 1,
            stop: run.stop,
            extinction_step: run.extinction_step(),
        },
    )
}

pub fn phi_checks(curve: &crate::extension::PhiCurve, check: PhiCheck, rel_tol: f64, report: &mut Report) {
    let low = curve
        .values
        .iter()
        .zip(&curve.discretization_error)
        .map(|(v, e)| v + e)
        .fold(f64::INFINITY, f64::min);
    report.at_most("phi nonnegative within error (negated lowest value)", -low, 0.0);
    match check {
        PhiCheck::Monotone => {
            let drop = (1..curve.values.len())
                .map(|k| {
                    curve.values[k - 1]
                        - curve.values[k]
                        - curve.discretization_error[k - 1]
                        - curve.discretization_error[k]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let drop = if drop.is_finite() { drop } else { 0.0 };
            report.at_most("phi nondecreasing (largest drop beyond error bars)", drop, 0.0);
        }
        PhiCheck::Constant => {
            let last = *curve.values.last().unwrap();
            let spread = curve
                .values
                .iter()
                .map(|v| (v - last).abs() / last.abs())
                .fold(0.0, f64::max);
            report.at_most("phi relative spread across radii", spread, rel_tol);
        }
        PhiCheck::None | PhiCheck::Auto => {}
    }
}

pub fn phi(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let p = &ctx.cfg.phi;
    check_radii(&p.radii, "phi.radii")?;
    let sc = ctx.cfg.scenario(ctx.dir)?;
    let g = &sc.geometry;
    let room = g.distance_to_boundary(&vec![0.0; g.dim()]);
    let r_max = *p.radii.last().unwrap();
    if r_max > room / 2.0 {
        return Err(Failure::Schema(format!(
            "phi.radii: {r_max} exceeds half the distance {room} from the origin to the box edge"
        )));
    }
    if g.extent()[..g.dim()].iter().any(|e| e % 2 != 0) {
        return Err(Failure::Schema("phi needs an even number of cells per side".into()));
    }
    let field = if p.minimize {
        require_free(&sc)?;
        let table = build_table(g, sc.order)?;
        let (sol, _) = certified_minimizer(&sc, &table, cutoff(p.cutoff, "phi.cutoff")?, report)?;
        ctx.mask(&sol.field, "minimizer")?;
        sol.field
    } else {
        sc.rasterized()
    };
    let curve = extension::phi(&field, &p.radii, sc.order)?;
    let check = match p.check {
        PhiCheck::Auto if p.minimize => PhiCheck::Monotone,
        other => other,
    };
    phi_checks(&curve, check, p.rel_tol.unwrap_or(0.03), report);
    let mut w = ctx.create("phi.csv")?;
    write_phi_csv(&curve, &mut w)?;
    finish(w)
}

pub fn cones(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let p = &ctx.cfg.cones;
    let order = ctx.cfg.order()?;
    let openings = if p.openings.is_empty() {
        vec![std::f64::consts::FRAC_PI_2]
    } else {
        p.openings.clone()
    };
    if openings.iter().any(|&o| !(o > 0.0 && o < std::f64::consts::TAU)) {
        return Err(Failure::Schema("cones.openings must lie in (0, 2π)".into()));
    }
    let r = p.r_eval.unwrap_or(0.5);
    if !(r > 0.0 && r <= 0.5) {
        return Err(Failure::Schema(format!("cones.r_eval = {r} violates 0 < r_eval <= 0.5")));
    }
    let mut cells = if p.cells.is_empty() { vec![64, 128] } else { p.cells.clone() };
    if cells.iter().any(|&c| c == 0 || c % 4 != 0) {
        return Err(Failure::Schema("cones.cells must be positive multiples of 4".into()));
    }
    if cells.iter().any(|&c| c > 1024) {
        return Err(Failure::Cap("cones.cells above 1024".into()));
    }
    cells.sort_unstable();
    cells.dedup();
    for (k, &n) in cells.iter().enumerate() {
        let hp = cone_energy(std::f64::consts::PI, order, r, n)?;
        report.at_most(format!("half-plane phi(r/2) vs phi(r) relative, {n} cells"), hp.spread(), 0.03);
        let mut rows = Vec::new();
        for &o in &openings {
            let c = cone_energy(o, order, r, n)?;
            report.at_most(format!("cone {o} phi(r/2) vs phi(r) relative, {n} cells"), c.spread(), 0.03);
            let gap = c.phi - hp.phi;
            let err = c.err + hp.err;
            report.push(format!("gap phi(cone {o}) - phi(half-plane) above error, {n} cells"), gap, err, gap > err);
            rows.push(c);
        }
        let mut w = ctx.create(&format!("cones_{n}.csv"))?;
        write_cone_csv(&rows, &hp, &mut w)?;
        finish(w)?;
        if k + 1 == cells.len() {
            let mut w = ctx.create("cones.csv")?;
            write_cone_csv(&rows, &hp, &mut w)?;
            finish(w)?;
        }
    }
    Ok(())
}

pub fn product(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let sc = ctx.cfg.scenario(ctx.dir)?;
    if sc.geometry.dim() != 1 {
        return Err(Failure::Schema("product needs dim = 1 data".into()));
    }
    require_free(&sc)?;
    let rows = ctx.cfg.product.rows.unwrap_or(16);
    if rows == 0 {
        return Err(Failure::Schema("product.rows must be at least 1".into()));
    }
    let table = build_table(&sc.geometry, sc.order)?;
    let sol = solve(&sc.problem(), &table, None)?;
    let rep: ProductReport = product_consistency(&sol.field, sc.order, rows)?;
    report.push(
        "1D minimizer certified",
        rep.certified_1d as u8 as f64,
        1.0,
        rep.certified_1d,
    );
    report.at_most("cells where the 2D minimizer leaves the cylinder", rep.differing_cells as f64, 0.0);
    ctx.mask(&sol.field, "minimizer_1d")?;
    ctx.mask(&cylinder(&sol.field, rows)?, "cylinder")?;
    write_json(&ctx.path("product.json"), &rep)
}
