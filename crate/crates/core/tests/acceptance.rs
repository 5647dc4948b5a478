//! Acceptance suite: twelve criteria, one PASS/FAIL line each, asserted
//! together at the end so every line is printed.

use std::f64::consts::{FRAC_PI_2, PI};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fracmin::curvature::{boundary_density, nl_mean_curvature, viscosity_sign_check};
use fracmin::energy::{fft_cut_energy, interaction, local_energy, minimality_identity};
use fracmin::extension::{cone_energy, phi, product_consistency};
use fracmin::flow::{build_flow_kernel, power_law_exponent, run_flow};
use fracmin::grid::{cells_in_ball, CellSet, GridGeometry, Label, PhaseField};
use fracmin::kernel::{build_table, FractionalOrder, KernelTable};
use fracmin::mincut::{assemble, certify_minimizer, minimize, solve_exact};
use fracmin::numeric::ball_volume;
use fracmin::shape::Shape;

struct Outcome {
    pass: bool,
    detail: String,
}

fn order(s: f64) -> FractionalOrder {
    FractionalOrder::new(s).unwrap()
}

fn flip(l: Label) -> Label {
    if l == Label::In {
        Label::Out
    } else {
        Label::In
    }
}

/// Random grid with at most 1024 cells, random exterior half-space, random
/// labels everywhere and a random ball as Ω.
fn random_instance(rng: &mut ChaCha8Rng) -> (PhaseField, KernelTable) {
    let g = if rng.gen_bool(0.5) {
        GridGeometry::centered(1, 1.0, 2 * rng.gen_range(8..=512)).unwrap()
    } else {
        let n = 2 * rng.gen_range(4..=16);
        GridGeometry::centered(2, 1.0, n).unwrap()
    };
    let dim = g.dim();
    let normal: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let exterior = Shape::HalfSpace {
        normal,
        offset: rng.gen_range(-0.5..0.5),
    };
    let center: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let free = cells_in_ball(&g, &center, rng.gen_range(0.3..0.7));
    let p = rng.gen_range(0.2..0.8);
    let labels = (0..g.len()).map(|_| if rng.gen_bool(p) { Label::In } else { Label::Out }).collect();
    let field = PhaseField::from_labels(&g, labels, &free, Some(exterior)).unwrap();
    let table = build_table(&g, order(rng.gen_range(0.1..0.9))).unwrap();
    (field, table)
}

fn c1_minimality_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (e, table) = random_instance(&mut rng);
        let q = rng.gen_range(0.05..0.6);
        let labels = (0..e.geometry().len())
            .map(|i| if e.free_region().contains(i) && rng.gen_bool(q) { flip(e.label(i)) } else { e.label(i) })
            .collect();
        let f = PhaseField::from_labels(e.geometry(), labels, e.free_region(), e.exterior().cloned()).unwrap();
        let (lhs, rhs) = minimality_identity(&e, &f, &table).unwrap();
        let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("200 instances, worst relative gap {worst:.3e}"),
    }
}

fn c2_enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    let mut assembly: f64 = 0.0;
    for k in 0..100 {
        let g = if k % 2 == 0 {
            GridGeometry::centered(1, 1.0, 48).unwrap()
        } else {
            GridGeometry::centered(2, 1.0, 12).unwrap()
        };
        let nfree = rng.gen_range(1..=16);
        let mut free = CellSet::empty(&g);
        while free.count() < nfree {
            free.insert(rng.gen_range(0..g.len()));
        }
        let labels: Vec<Label> = (0..g.len())
            .map(|i| {
                if free.contains(i) {
                    Label::Free
                } else if rng.gen_bool(0.5) {
                    Label::In
                } else {
                    Label::Out
                }
            })
            .collect();
        let exterior = Shape::lower_half_space(g.dim(), 0, rng.gen_range(-0.5..0.5));
        let field = PhaseField::from_labels(&g, labels, &free, Some(exterior)).unwrap();
        let table = build_table(&g, order(rng.gen_range(0.1..0.9))).unwrap();
        let problem = assemble(&field, &table, None).unwrap();
        let sol = solve_exact(&problem).unwrap();
        let n = problem.free_cells.len();
        let mut best = f64::INFINITY;
        let mut labelling = vec![false; n];
        for m in 0u32..1 << n {
            for (b, x) in labelling.iter_mut().enumerate() {
                *x = m >> b & 1 == 1;
            }
            best = best.min(problem.energy(&labelling));
        }
        // the enumerated energy is checked against the direct J on the
        // solution and on a random labelling
        let j = local_energy(&sol.field, &table).unwrap().j_value;
        for x in labelling.iter_mut() {
            *x = rng.gen_bool(0.5);
        }
        let j_random = local_energy(&problem.field_from(&labelling), &table).unwrap().j_value;
        assembly = assembly
            .max((problem.energy(&problem.labelling(&sol.field)) - j).abs() / j)
            .max((problem.energy(&labelling) - j_random).abs() / j_random);
        worst = worst.max((sol.energy - best).abs() / best.abs().max(f64::MIN_POSITIVE));
    }
    Outcome {
        pass: worst <= 1e-12 && assembly <= 1e-12,
        detail: format!("100 instances, energy gap to enumeration {worst:.3e}, assembly vs direct J {assembly:.3e}"),
    }
}

fn c3_half_planes(minimizers: &mut Vec<(PhaseField, f64)>) -> Outcome {
    let g = GridGeometry::centered(2, 1.0, 128).unwrap();
    let shape = Shape::lower_half_space(2, 1, 0.0);
    let free = cells_in_ball(&g, &[0.0, 0.0], 0.6);
    let raster = PhaseField::resolved(&g, &shape, &free).unwrap();
    let mut pass = true;
    let mut detail = format!("128×128, {} free cells:", free.count());
    for s in [0.3, 0.5, 0.7] {
        let t0 = Instant::now();
        let table = build_table(&g, order(s)).unwrap();
        let sol = minimize(&PhaseField::with_free(&g, &shape, &free).unwrap(), &table, None).unwrap();
        let diff = sol.field.differing_cells(&raster).unwrap().len();
        let elapsed = t0.elapsed();
        pass &= diff == 0 && elapsed < Duration::from_secs(120);
        detail += &format!(" s={s} mismatches {diff} ({:.1}s)", elapsed.as_secs_f64());
        if certify_minimizer(&sol.field, &table).unwrap().certified {
            minimizers.push((sol.field, s));
        }
    }
    Outcome { pass, detail }
}

fn c4_interval_endpoint() -> Outcome {
    let exact = -2.0 * 2f64.sqrt();
    let err = |h: f64| {
        let g = GridGeometry::new(&[-2.0], &[(4.0 / h) as usize], h).unwrap();
        let f = PhaseField::resolved(&g, &Shape::interval(-1.0, 1.0), &CellSet::full(&g)).unwrap();
        let table = build_table(&g, order(0.5)).unwrap();
        let v = nl_mean_curvature(&f, &[1.0], &table, 3.0 * h).unwrap().value;
        (v, (v - exact).abs())
    };
    let (v256, e256) = err(1.0 / 256.0);
    let (_, e128) = err(1.0 / 128.0);
    let (_, e512) = err(1.0 / 512.0);
    let r1 = e256 / e128;
    let r2 = e512 / e256;
    let halves = |r: f64| (0.35..=0.65).contains(&r);
    Outcome {
        pass: e256 <= 0.02 * exact.abs() && halves(r1) && halves(r2),
        detail: format!(
            "value {v256:.6} vs {exact:.6} ({:.3}%), error ratios {r1:.3} and {r2:.3}",
            100.0 * e256 / exact.abs()
        ),
    }
}

fn c5_euler_lagrange(minimizers: &[(PhaseField, f64)]) -> Outcome {
    let mut faces = 0;
    let mut violations = 0;
    let mut excess = f64::NEG_INFINITY;
    for (f, s) in minimizers {
        let table = build_table(f.geometry(), order(*s)).unwrap();
        let v = viscosity_sign_check(f, &table, 3.0 * f.geometry().h()).unwrap();
        faces += v.samples.len();
        violations += v.violations.len();
        excess = excess.max(v.max_excess);
    }
    Outcome {
        pass: violations == 0 && faces > 0,
        detail: format!(
            "{} minimizers, {faces} tangent-ball faces, {violations} violations, max excess {excess:.3e}",
            minimizers.len()
        ),
    }
}

fn c6_density(minimizers: &[(PhaseField, f64)]) -> Outcome {
    let mut worst = f64::INFINITY;
    for (f, _) in minimizers {
        let c = boundary_density(f).unwrap() / ball_volume(f.geometry().dim());
        worst = worst.min(c);
    }
    Outcome {
        pass: worst >= 0.05,
        detail: format!("{} minimizers, empirical constant {worst:.4} of the unit-ball volume", minimizers.len()),
    }
}

fn c7_cone_constancy() -> Outcome {
    let hp = cone_energy(PI, order(0.5), 0.5, 128).unwrap();
    let q = cone_energy(FRAC_PI_2, order(0.5), 0.5, 128).unwrap();
    Outcome {
        pass: hp.spread() <= 0.03 && q.spread() <= 0.03,
        detail: format!(
            "half-plane {:.4}/{:.4} ({:.2}%), quarter-plane {:.4}/{:.4} ({:.2}%)",
            hp.phi_half,
            hp.phi,
            100.0 * hp.spread(),
            q.phi_half,
            q.phi,
            100.0 * q.spread()
        ),
    }
}

/// Point-antisymmetric data: the minimizer has a boundary point at the origin.
fn symmetric_data() -> Shape {
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

fn c8_monotonicity(minimizers: &mut Vec<(PhaseField, f64)>) -> Outcome {
    let radii: Vec<f64> = (1..=8).map(|k| 0.0625 * k as f64).collect();
    let mut pass = true;
    let mut detail = String::new();
    for cells in [64, 96] {
        let g = GridGeometry::centered(2, 1.0, cells).unwrap();
        let free = cells_in_ball(&g, &[0.0, 0.0], 0.75);
        let table = build_table(&g, order(0.5)).unwrap();
        let sol = minimize(&PhaseField::with_free(&g, &symmetric_data(), &free).unwrap(), &table, None).unwrap();
        let certified = certify_minimizer(&sol.field, &table).unwrap().certified;
        let q = 0.5 * g.h();
        let above = g.cell_containing(&[q, q]).unwrap();
        let below = g.cell_containing(&[q, -q]).unwrap();
        let on_boundary = sol.field.label(above) != sol.field.label(below);
        let curve = phi(&sol.field, &radii, order(0.5)).unwrap();
        let worst = (1..radii.len())
            .map(|k| {
                curve.values[k - 1] - curve.values[k] - curve.discretization_error[k - 1] - curve.discretization_error[k]
            })
            .fold(f64::NEG_INFINITY, f64::max);
        pass &= certified && on_boundary && worst <= 0.0;
        detail += &format!(
            "{cells} cells: Φ {:.3}..{:.3}, largest drop beyond error bars {worst:.3e}; ",
            curve.values[0],
            curve.values[7]
        );
        if certified {
            minimizers.push((sol.field, 0.5));
        }
    }
    Outcome { pass, detail }
}

fn c9_energy_gap() -> Outcome {
    let mut pass = true;
    let mut detail = String::new();
    for cells in [128, 256] {
        let hp = cone_energy(PI, order(0.5), 0.5, cells).unwrap();
        let q = cone_energy(FRAC_PI_2, order(0.5), 0.5, cells).unwrap();
        let gap = q.phi - hp.phi;
        let err = q.err + hp.err;
        pass &= gap > err;
        detail += &format!("{cells} cells: gap {gap:.4} ± {err:.4}; ");
    }
    Outcome { pass, detail }
}

fn c10_flow() -> Outcome {
    let g = GridGeometry::centered(2, 1.0, 128).unwrap();
    let hp = PhaseField::resolved(&g, &Shape::lower_half_space(2, 1, 0.0), &CellSet::full(&g)).unwrap();
    let k = build_flow_kernel(&g, order(0.5), 0.02f64.sqrt()).unwrap();
    let run = run_flow(&hp, &k, 50).unwrap();
    let moved = run.final_field.differing_cells(&hp).unwrap().len();
    let mut pass = moved == 0;
    let mut detail = format!("half-plane moved {moved} cells in 50 steps; ");
    let g = GridGeometry::centered(2, 1.0, 256).unwrap();
    for (s, ell) in [(0.5, 0.02), (0.3, 0.006)] {
        let k = build_flow_kernel(&g, order(s), f64::powf(ell, s)).unwrap();
        let mut pts = Vec::new();
        for r in [0.3, 0.45, 0.6] {
            let shape = Shape::Ball {
                center: vec![0.0, 0.0],
                radius: r,
            };
            let mut f = PhaseField::resolved(&g, &shape, &CellSet::full(&g)).unwrap();
            f.set_exterior(Some(Shape::Empty));
            if let Some(n) = run_flow(&f, &k, 5000).unwrap().extinction_step() {
                pts.push((r, n as f64 * k.t()));
            }
        }
        let e = if pts.len() == 3 { power_law_exponent(&pts) } else { f64::NAN };
        let ok = (e - (1.0 + s)).abs() <= 0.15 * (1.0 + s);
        pass &= ok;
        detail += &format!("s={s}: exponent {e:.3} vs {:.2} ± 15% {}; ", 1.0 + s, if ok { "ok" } else { "out" });
    }
    Outcome { pass, detail }
}

fn resolved_random(g: &GridGeometry, rng: &mut ChaCha8Rng) -> (CellSet, PhaseField) {
    let bits = (0..g.len()).map(|_| rng.gen_bool(0.5)).collect();
    let e = CellSet::from_bits(g, bits).unwrap();
    let labels = e.bits().iter().map(|&b| if b { Label::In } else { Label::Out }).collect();
    let f = PhaseField::from_labels(g, labels, &CellSet::empty(g), None).unwrap();
    (e, f)
}

fn c11_fft() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let g = GridGeometry::centered(2, 1.0, 64).unwrap();
    let table = build_table(&g, order(0.5)).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (e, f) = resolved_random(&g, &mut rng);
        let brute = interaction(&e, &e.complement(), &table).unwrap();
        worst = worst.max((fft_cut_energy(&f, &table).unwrap() - brute).abs() / brute);
    }
    let g = GridGeometry::centered(2, 1.0, 256).unwrap();
    let table = build_table(&g, order(0.5)).unwrap();
    let (e, f) = resolved_random(&g, &mut rng);
    let ce = e.complement();
    let t0 = Instant::now();
    let brute = interaction(&e, &ce, &table).unwrap();
    let t_brute = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let fast = fft_cut_energy(&f, &table).unwrap();
    let t_fft = t0.elapsed().as_secs_f64();
    let speedup = t_brute / t_fft;
    Outcome {
        pass: worst <= 1e-8 && speedup >= 10.0 && (fast - brute).abs() <= 1e-8 * brute,
        detail: format!("64×64 worst relative gap {worst:.3e}; 256×256 {t_brute:.3}s vs {t_fft:.4}s ({speedup:.0}×)"),
    }
}

fn c12_product(minimizers: &mut Vec<(PhaseField, f64)>) -> Outcome {
    let g = GridGeometry::centered(1, 2.0, 64).unwrap();
    let shape = Shape::Union {
        parts: vec![Shape::lower_half_space(1, 0, -1.0), Shape::interval(1.0, 1.5)],
    };
    let free = cells_in_ball(&g, &[0.0], 1.0);
    let mut pass = true;
    let mut detail = String::new();
    for s in [0.3, 0.5, 0.7] {
        let table = build_table(&g, order(s)).unwrap();
        let sol = minimize(&PhaseField::with_free(&g, &shape, &free).unwrap(), &table, None).unwrap();
        let rep = product_consistency(&sol.field, order(s), 8).unwrap();
        pass &= rep.certified_1d && rep.matches;
        detail += &format!(
            "s={s}: certified {}, differing {} (J {:.6} vs {:.6}); ",
            rep.certified_1d, rep.differing_cells, rep.energy_2d, rep.energy_cylinder
        );
        if rep.certified_1d {
            minimizers.push((sol.field, s));
        }
    }
    Outcome { pass, detail }
}

#[test]
fn acceptance_criteria() {
    let mut minimizers = Vec::new();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = f();
        results.push((n, name, out, t0.elapsed().as_secs_f64()));
    };
    run(1, "minimality identity", &mut c1_minimality_identity);
    run(2, "exact minimizer vs enumeration", &mut c2_enumeration);
    run(3, "hyperplane minimality", &mut || c3_half_planes(&mut minimizers));
    run(4, "1D principal value closed form", &mut c4_interval_endpoint);
    run(8, "Φ monotonicity", &mut || c8_monotonicity(&mut minimizers));
    run(12, "product consistency", &mut || c12_product(&mut minimizers));
    run(5, "Euler-Lagrange sign", &mut || c5_euler_lagrange(&minimizers));
    run(6, "density estimate", &mut || c6_density(&minimizers));
    run(7, "Φ constancy on cones", &mut c7_cone_constancy);
    run(9, "energy gap sign", &mut c9_energy_gap);
    run(10, "MBO fixed point and scaling", &mut c10_flow);
    run(11, "FFT vs direct summation", &mut c11_fft);
    results.sort_by_key(|r| r.0);
    for (n, name, out, secs) in &results {
        println!(
            "{} criterion {n:>2} {name}: {} [{secs:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn cli_rejects_order_above_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "s = 1.2\ndim = 2\nh = 0.0625\n[box]\nlower = [-1.0, -1.0]\nupper = [1.0, 1.0]\n[set]\nkind = \"halfplane\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fracmin"))
        .args(["energy", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("0 < s < 1"), "{msg}");
}
