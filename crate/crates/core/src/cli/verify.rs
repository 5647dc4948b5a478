//! The small verification suite run by `fracmin verify`: scaled-down versions
//! of the acceptance checks, each reduced to one report line.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::commands::{certified_minimizer, phi_checks, Context};
use super::config::{PhiCheck, Scenario};
use super::report::Report;
use super::Failure;
use crate::curvature::{boundary_density, nl_mean_curvature, viscosity_sign_check};
use crate::energy::{fft_cut_energy, interaction, local_energy, minimality_identity};
use crate::extension::{cone_energy, phi, product_consistency};
use crate::flow::{build_flow_kernel, power_law_exponent, run_flow};
use crate::grid::{cells_in_ball, CellSet, GridGeometry, Label, PhaseField};
use crate::kernel::{build_table, FractionalOrder};
use crate::mincut::{assemble, minimize, solve_exact};
use crate::shape::Shape;

fn order(s: f64) -> FractionalOrder {
    FractionalOrder::new(s).expect("suite orders lie in (0, 1)")
}

fn random_field(rng: &mut ChaCha8Rng, g: &GridGeometry, free: &CellSet) -> PhaseField {
    let offset = rng.gen_range(-0.5..0.5);
    let shape = Shape::lower_half_space(g.dim(), g.dim() - 1, offset);
    let base = PhaseField::with_free(g, &shape, free).expect("matching geometry");
    base.resolve_with(|_| rng.gen_bool(0.5))
}

fn identity(seed: u64, s: f64, instances: usize, report: &mut Report) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let g = if k % 2 == 0 {
            GridGeometry::centered(1, 1.0, 64)?
        } else {
            GridGeometry::centered(2, 1.0, 16)?
        };
        let table = build_table(&g, order(s))?;
        let free = cells_in_ball(&g, &vec![0.0; g.dim()], 0.6);
        let e = random_field(&mut rng, &g, &free);
        let flip = |l: Label| if l == Label::In { Label::Out } else { Label::In };
        let labels = (0..g.len())
            .map(|i| if free.contains(i) && rng.gen_bool(0.3) { flip(e.label(i)) } else { e.label(i) })
            .collect();
        let f = PhaseField::from_labels(&g, labels, &free, e.exterior().cloned())?;
        let (lhs, rhs) = minimality_identity(&e, &f, &table)?;
        let scale = lhs.abs().max(rhs.abs()).max(1e-6 * local_energy(&e, &table)?.j_value);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    report.at_most(format!("minimality identity, {instances} instances (relative)"), worst, 1e-10);
    Ok(())
}

fn enumeration(seed: u64, s: f64, instances: usize, report: &mut Report) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut tol: f64 = 0.0;
    for k in 0..instances {
        let (g, free) = if k % 2 == 0 {
            let g = GridGeometry::centered(1, 1.0, 32)?;
            let free = CellSet::from_fn(&g, |i| (10..22).contains(&i));
            (g, free)
        } else {
            let g = GridGeometry::centered(2, 1.0, 8)?;
            let free = CellSet::from_fn(&g, |i| {
                let c = g.coords(i);
                (2..6).contains(&c[0]) && (3..6).contains(&c[1])
            });
            (g, free)
        };
        let table = build_table(&g, order(s))?;
        let field = random_field(&mut rng, &g, &free).unresolved();
        let problem = assemble(&field, &table, None)?;
        let sol = solve_exact(&problem)?;
        let n = problem.free_cells.len();
        let best = (0u32..1 << n)
            .map(|m| problem.energy(&(0..n).map(|b| m >> b & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        let direct = local_energy(&sol.field, &table)?.j_value;
        worst = worst.max((sol.energy - best).abs()).max((sol.energy - direct).abs());
        tol = tol.max(sol.rounding_bound + 1e-12 * direct);
    }
    report.at_most(format!("exact minimizer against enumeration, {instances} instances"), worst, tol);
    Ok(())
}

/// Half-plane data on a 32×32 grid; returns the certified minimizers.
fn half_planes(report: &mut Report) -> Result<Vec<PhaseField>, Failure> {
    let g = GridGeometry::centered(2, 1.0, 32)?;
    let shape = Shape::lower_half_space(2, 1, 0.0);
    let mut out = Vec::new();
    for s in [0.3, 0.5, 0.7] {
        let sc = Scenario {
            geometry: g.clone(),
            order: order(s),
            set: CellSet::from_shape(&g, &shape),
            exterior: shape.clone(),
            free: cells_in_ball(&g, &[0.0, 0.0], 0.6),
        };
        let table = build_table(&g, sc.order)?;
        let (sol, cert) = certified_minimizer(&sc, &table, None, report)?;
        let diff = sol.field.differing_cells(&sc.rasterized())?.len();
        report.at_most(format!("half-plane minimizer mismatches, s = {s}"), diff as f64, 0.0);
        if cert.certified {
            out.push(sol.field);
        }
    }
    Ok(out)
}

fn interval_endpoint(report: &mut Report) -> Result<(), Failure> {
    let h = 1.0 / 256.0;
    let g = GridGeometry::new(&[-2.0], &[1024], h)?;
    let f = PhaseField::resolved(&g, &Shape::interval(-1.0, 1.0), &CellSet::full(&g))?;
    let table = build_table(&g, order(0.5))?;
    let exact = -2.0 * 2f64.sqrt();
    let v = nl_mean_curvature(&f, &[1.0], &table, 3.0 * h)?;
    report.at_most("interval endpoint curvature, relative error", (v.value - exact).abs() / exact.abs(), 0.02);
    Ok(())
}

fn sign_and_density(minimizers: &[PhaseField], report: &mut Report) -> Result<(), Failure> {
    let mut excess = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut density = f64::INFINITY;
    for (k, f) in minimizers.iter().enumerate() {
        let s = [0.3, 0.5, 0.7][k.min(2)];
        let table = build_table(f.geometry(), order(s))?;
        let v = viscosity_sign_check(f, &table, 3.0 * f.geometry().h())?;
        excess = excess.max(v.max_excess);
        violations += v.violations.len();
        density = density.min(boundary_density(f)?);
    }
    report.push("tangent-ball curvature above its bound", excess, 0.0, violations == 0);
    report.push("density ratio over unit-ball volume", density / PI, 0.05, density / PI >= 0.05);
    Ok(())
}

fn cones(s: f64, report: &mut Report) -> Result<(), Failure> {
    for cells in [64, 128] {
        let hp = cone_energy(PI, order(s), 0.5, cells)?;
        let q = cone_energy(FRAC_PI_2, order(s), 0.5, cells)?;
        if cells == 64 {
            report.at_most("half-plane phi constancy (relative)", hp.spread(), 0.03);
            report.at_most("quarter-plane phi constancy (relative)", q.spread(), 0.03);
        }
        let gap = q.phi - hp.phi;
        let err = q.err + hp.err;
        report.push(format!("energy gap quarter-plane minus half-plane, {cells} cells"), gap, err, gap > err);
    }
    Ok(())
}

/// Data whose minimizer has a boundary point at the origin by point symmetry.
pub fn symmetric_data() -> Shape {
    Shape::Intersection {
        parts: vec![
            Shape::Union {
                parts: vec![
                    Shape::lower_half_space(2, 1, 0.0),
                    Shape::Ball {
                        center: vec![0.6, 0.0],
                        radius: 0.3,
                    },
                ],
            },
            Shape::Complement {
                of: Box::new(Shape::Ball {
                    center: vec![-0.6, 0.0],
                    radius: 0.3,
                }),
            },
        ],
    }
}

fn monotonicity(report: &mut Report) -> Result<(), Failure> {
    let g = GridGeometry::centered(2, 1.0, 64)?;
    let shape = symmetric_data();
    let sc = Scenario {
        geometry: g.clone(),
        order: order(0.5),
        set: CellSet::from_shape(&g, &shape),
        exterior: shape,
        free: cells_in_ball(&g, &[0.0, 0.0], 0.75),
    };
    let table = build_table(&g, sc.order)?;
    let (sol, _) = certified_minimizer(&sc, &table, None, report)?;
    let radii: Vec<f64> = (1..=8).map(|k| 0.0625 * k as f64).collect();
    let curve = phi(&sol.field, &radii, sc.order)?;
    phi_checks(&curve, PhiCheck::Monotone, 0.0, report);
    Ok(())
}

fn flows(skip_scaling: bool, report: &mut Report) -> Result<(), Failure> {
    let g = GridGeometry::centered(2, 1.0, 64)?;
    let s = order(0.5);
    let k = build_flow_kernel(&g, s, 0.05f64.powf(0.5))?;
    let f = PhaseField::resolved(&g, &Shape::lower_half_space(2, 1, 0.0), &CellSet::full(&g))?;
    let run = run_flow(&f, &k, 50)?;
    let moved = run.final_field.differing_cells(&f)?.len();
    report.at_most("half-plane cells moved in 50 flow steps", moved as f64, 0.0);
    if skip_scaling {
        return Ok(());
    }
    for (s, ell) in [(0.5, 0.02), (0.3, 0.006)] {
        let g = GridGeometry::centered(2, 1.0, 256)?;
        let k = build_flow_kernel(&g, order(s), f64::powf(ell, s))?;
        let mut pts = Vec::new();
        for r in [0.3, 0.45, 0.6] {
            let shape = Shape::Ball {
                center: vec![0.0, 0.0],
                radius: r,
            };
            let mut f = PhaseField::resolved(&g, &shape, &CellSet::full(&g))?;
            f.set_exterior(Some(Shape::Empty));
            if let Some(n) = run_flow(&f, &k, 5000)?.extinction_step() {
                pts.push((r, n as f64));
            }
        }
        let e = if pts.len() == 3 { power_law_exponent(&pts) } else { f64::NAN };
        let dev = (e - (1.0 + s)).abs() / (1.0 + s);
        report.push(format!("disk extinction exponent, s = {s}, relative deviation"), dev, 0.15, dev <= 0.15);
    }
    Ok(())
}

fn fft(seed: u64, s: f64, report: &mut Report) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff7);
    let g = GridGeometry::centered(2, 1.0, 32)?;
    let table = build_table(&g, order(s))?;
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let bits = (0..g.len()).map(|_| rng.gen_bool(0.5)).collect();
        let e = CellSet::from_bits(&g, bits)?;
        let f = PhaseField::from_labels(
            &g,
            e.bits().iter().map(|&b| if b { Label::In } else { Label::Out }).collect(),
            &CellSet::empty(&g),
            None,
        )?;
        let brute = interaction(&e, &e.complement(), &table)?;
        worst = worst.max((fft_cut_energy(&f, &table)? - brute).abs() / brute);
    }
    report.at_most("FFT cut energy against direct summation (relative)", worst, 1e-8);
    Ok(())
}

fn product(report: &mut Report) -> Result<(), Failure> {
    let g = GridGeometry::centered(1, 2.0, 64)?;
    let shape = Shape::Union {
        parts: vec![Shape::lower_half_space(1, 0, -1.0), Shape::interval(1.0, 1.5)],
    };
    let free = cells_in_ball(&g, &[0.0], 1.0);
    let table = build_table(&g, order(0.5))?;
    let sol = minimize(&PhaseField::with_free(&g, &shape, &free)?, &table, None)?;
    let rep = product_consistency(&sol.field, order(0.5), 8)?;
    report.push("1D minimizer certified", rep.certified_1d as u8 as f64, 1.0, rep.certified_1d);
    report.at_most("cells where the 2D minimizer leaves the cylinder", rep.differing_cells as f64, 0.0);
    Ok(())
}

pub fn verify(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    let cfg = ctx.cfg;
    let s = cfg.order()?.s();
    let n = cfg.verify.instances.unwrap_or(20);
    if n == 0 {
        return Err(Failure::Schema("verify.instances must be at least 1".into()));
    }
    identity(cfg.seed, s, n, report)?;
    enumeration(cfg.seed, s, n.min(10), report)?;
    let minimizers = half_planes(report)?;
    interval_endpoint(report)?;
    sign_and_density(&minimizers, report)?;
    cones(0.5, report)?;
    monotonicity(report)?;
    flows(cfg.verify.skip_flow_scaling, report)?;
    fft(cfg.seed, s, report)?;
    product(report)
}
