//! Fractional threshold dynamics: convolve `u = χ_E − χ_CE` with a
//! fractional heat kernel and keep `{G * u ≥ 0}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Convolver;
use crate::grid::{boundary_cells, GridGeometry, Label, PhaseField};
use crate::kernel::{cauchy_radial, exterior_point_integrals, AngularRule, FractionalOrder};
use crate::numeric::{fmt17, sum};

pub struct FlowKernel {
    geometry: GridGeometry,
    order: FractionalOrder,
    t: f64,
    samples: Vec<f64>,
    span: [usize; 3],
    /// Sum of the unnormalized profile values, for matching continuum tails.
    mass: f64,
    convolver: Convolver,
}

impl std::fmt::Debug for FlowKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowKernel").field("t", &self.t).field("span", &self.span).finish()
    }
}

impl FlowKernel {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn order(&self) -> FractionalOrder {
        self.order
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Spatial scale of the profile, `t^{1/(2σ)}`.
    pub fn length(&self) -> f64 {
        self.t.powf(1.0 / (2.0 * self.order.sigma()))
    }

    pub fn sample(&self, delta: [i64; 3]) -> f64 {
        let e = self.geometry.extent();
        let mut idx = 0;
        let mut stride = 1;
        for k in 0..3 {
            let ek = e.get(k).copied().unwrap_or(1) as i64;
            let shifted = delta[k] + ek - 1;
            if shifted < 0 || shifted >= 2 * ek - 1 {
                return 0.0;
            }
            idx += shifted as usize * stride;
            stride *= self.span[k];
        }
        self.samples[idx]
    }
}

/// `G(Δ) ∝ t/(|Δh|² + t^{1/σ})^{(n+2σ)/2}` on every offset realizable in
/// the box, normalized to unit discrete mass.
pub fn build_flow_kernel(geometry: &GridGeometry, order: FractionalOrder, t: f64) -> Result<FlowKernel> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("kernel time {t} must be positive")));
    }
    let dim = geometry.dim();
    let e = geometry.extent();
    let mut span = [1usize; 3];
    for k in 0..dim {
        span[k] = 2 * e[k] - 1;
    }
    let sigma = order.sigma();
    let ell2 = t.powf(1.0 / sigma);
    let p = (dim as f64 + 2.0 * sigma) / 2.0;
    let h = geometry.h();
    let total: usize = span.iter().product();
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let c = [i % span[0], (i / span[0]) % span[1], i / (span[0] * span[1])];
        let mut r2 = 0.0;
        for k in 0..dim {
            let d = (c[k] as f64 - (e[k] as f64 - 1.0)) * h;
            r2 += d * d;
        }
        // the factor t is constant and cancels in the normalization, but a
        // relative form keeps the values representable for tiny t
        samples.push((1.0 + r2 / ell2).powf(-p));
    }
    let mass = sum(samples.iter().copied());
    samples.iter_mut().for_each(|v| *v /= mass);
    let mut kernel = FlowKernel {
        geometry: geometry.clone(),
        order,
        t,
        samples,
        span,
        mass,
        convolver: Convolver::new(geometry, |_| 0.0),
    };
    let center = kernel.sample([0, 0, 0]);
    if center >= 0.5 {
        return Err(Error::Domain(format!(
            "kernel time {t} concentrates {center:.3} of the mass in one cell; thresholding would be the identity"
        )));
    }
    kernel.convolver = Convolver::new(geometry, |d| kernel.sample(d));
    Ok(kernel)
}

/// Per-cell contribution of the prescribed data outside the box to `G * u`,
/// on the same scale as the discrete convolution. Zero without exterior data.
pub fn exterior_drive(field: &PhaseField, kernel: &FlowKernel) -> Vec<f64> {
    let geom = field.geometry();
    let mut drive = vec![0.0; geom.len()];
    let Some(shape) = field.exterior() else {
        return drive;
    };
    let dim = geom.dim();
    let radial = cauchy_radial(dim, kernel.order.s(), kernel.length());
    let rule = AngularRule::new(dim, 128);
    let scale = 1.0 / (kernel.mass * geom.cell_volume());
    let cells = field.free_region().indices();
    use rayon::prelude::*;
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&c| {
            let x = geom.center(c);
            let (i, o, _) = exterior_point_integrals(geom, &x[..dim], shape, &rule, &radial);
            (i - o) * scale
        })
        .collect();
    for (c, v) in cells.into_iter().zip(values) {
        drive[c] = v;
    }
    drive
}

/// One threshold step. Cells outside the free region keep their labels.
pub fn mbo_step(field: &PhaseField, kernel: &FlowKernel) -> Result<PhaseField> {
    let drive = exterior_drive(field, kernel);
    mbo_step_with(field, kernel, &drive)
}

/// One threshold step with a precomputed exterior drive.
pub fn mbo_step_with(field: &PhaseField, kernel: &FlowKernel, drive: &[f64]) -> Result<PhaseField> {
    field.geometry().check_same(kernel.geometry())?;
    field.require_resolved()?;
    let u: Vec<f64> = (0..field.geometry().len()).map(|i| field.sign(i)).collect();
    let smoothed = kernel.convolver.apply(&u);
    let free = field.free_region();
    let mut labels = field.labels().to_vec();
    for i in free.iter() {
        labels[i] = if smoothed[i] + drive[i] >= 0.0 { Label::In } else { Label::Out };
    }
    PhaseField::from_labels(field.geometry(), labels, free, field.exterior().cloned())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowTrace {
    pub step: usize,
    pub measure: f64,
    pub interface_cells: usize,
    /// Smallest and largest distance from the IN centroid to interface cells.
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Extinction,
    Stationary,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct FlowRun {
    pub traces: Vec<FlowTrace>,
    pub final_field: PhaseField,
    pub stop: StopReason,
}

impl FlowRun {
    /// Step at which the IN phase vanished from the free region.
    pub fn extinction_step(&self) -> Option<usize> {
        (self.stop == StopReason::Extinction).then(|| self.traces.last().unwrap().step)
    }
}

fn trace(field: &PhaseField, step: usize) -> Result<FlowTrace> {
    let geom = field.geometry();
    let dim = geom.dim();
    let free = field.free_region();
    let inside: Vec<usize> = free.iter().filter(|&i| field.label(i) == Label::In).collect();
    let measure = inside.len() as f64 * geom.cell_volume();
    let boundary = boundary_cells(field)?.intersection(free)?;
    let mut centroid = [0.0; 3];
    for &i in &inside {
        let c = geom.center(i);
        for k in 0..dim {
            centroid[k] += c[k] / inside.len() as f64;
        }
    }
    let mut r_min = f64::INFINITY;
    let mut r_max: f64 = 0.0;
    for b in boundary.iter() {
        let c = geom.center(b);
        let r = (0..dim).map(|k| (c[k] - centroid[k]).powi(2)).sum::<f64>().sqrt();
        r_min = r_min.min(r);
        r_max = r_max.max(r);
    }
    if boundary.is_empty() {
        r_min = 0.0;
    }
    Ok(FlowTrace {
        step,
        measure,
        interface_cells: boundary.count(),
        r_min,
        r_max,
    })
}

/// Iterate until the IN phase leaves the free region, the field stops
/// changing, or `max_steps` steps have run.
pub fn run_flow(field: &PhaseField, kernel: &FlowKernel, max_steps: usize) -> Result<FlowRun> {
    run_flow_with(field, kernel, max_steps, |_, _| Ok(()))
}

/// `run_flow` calling `observe(step, field)` after every step.
pub fn run_flow_with(
    field: &PhaseField,
    kernel: &FlowKernel,
    max_steps: usize,
    mut observe: impl FnMut(usize, &PhaseField) -> Result<()>,
) -> Result<FlowRun> {
    let mut current = field.clone();
    let mut traces = vec![trace(&current, 0)?];
    let mut stop = StopReason::MaxSteps;
    let drive = exterior_drive(field, kernel);
    for step in 1..=max_steps {
        let next = mbo_step_with(&current, kernel, &drive)?;
        let stationary = next.labels() == current.labels();
        current = next;
        observe(step, &current)?;
        let tr = trace(&current, step)?;
        let extinct = tr.measure == 0.0;
        traces.push(tr);
        if extinct {
            stop = StopReason::Extinction;
            break;
        }
        if stationary {
            stop = StopReason::Stationary;
            break;
        }
    }
    Ok(FlowRun {
        traces,
        final_field: current,
        stop,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn power_law_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn write_traces(traces: &[FlowTrace], out: &mut impl Write) -> Result<()> {
    writeln!(out, "step,measure,interface_cells,r_min,r_max")?;
    for t in traces {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.step,
            fmt17(t.measure),
            t.interface_cells,
            fmt17(t.r_min),
            fmt17(t.r_max)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellSet;
    use crate::shape::Shape;

    fn order(s: f64) -> FractionalOrder {
        FractionalOrder::new(s).unwrap()
    }

    fn disk(g: &GridGeometry, center: [f64; 2], r: f64) -> PhaseField {
        let shape = Shape::Ball {
            center: center.to_vec(),
            radius: r,
        };
        let mut f = PhaseField::resolved(g, &shape, &CellSet::full(g)).unwrap();
        f.set_exterior(Some(Shape::Empty));
        f
    }

    #[test]
    fn kernel_has_unit_mass_and_is_monotone() {
        let g = GridGeometry::centered(2, 1.0, 32).unwrap();
        let k = build_flow_kernel(&g, order(0.5), 0.2).unwrap();
        assert!((sum(k.samples().iter().copied()) - 1.0).abs() < 1e-13);
        for d in 0..30 {
            assert!(k.sample([d + 1, 0, 0]) < k.sample([d, 0, 0]));
            assert_eq!(k.sample([d, 3, 0]), k.sample([-3, d, 0]));
        }
    }

    #[test]
    fn far_field_power_law() {
        let g = GridGeometry::centered(1, 1.0, 200).unwrap();
        assert!((g.h() - 0.01).abs() < 1e-15);
        let k = build_flow_kernel(&g, order(0.5), 0.01).unwrap_err();
        // at h = t = 0.01 the profile lives inside one cell
        assert!(matches!(k, Error::Domain(_)));
        // the decay ratio is a property of the unnormalized profile
        let ell2 = 0.01f64.powf(1.0 / 0.25);
        let g_at = |r: f64| 0.01 / (r * r + ell2).powf(0.75);
        let ratio = g_at(0.2) / g_at(0.4);
        assert!((ratio - 2f64.powf(1.5)).abs() < 0.05 * 2f64.powf(1.5));
        // and survives normalization on a resolved kernel
        let k = build_flow_kernel(&g, order(0.5), 0.3).unwrap();
        let ratio = k.sample([20, 0, 0]) / k.sample([40, 0, 0]);
        let want = ((0.16 + 0.3f64.powi(4)) / (0.04 + 0.3f64.powi(4))).powf(0.75);
        assert!((ratio - want).abs() < 1e-12 * want);
    }

    #[test]
    fn half_plane_is_a_fixed_point() {
        let g = GridGeometry::centered(2, 1.0, 48).unwrap();
        let hp = PhaseField::resolved(&g, &Shape::lower_half_space(2, 1, 0.0), &CellSet::full(&g)).unwrap();
        let k = build_flow_kernel(&g, order(0.5), 0.3).unwrap();
        let run = run_flow(&hp, &k, 10).unwrap();
        assert_eq!(run.stop, StopReason::Stationary);
        assert_eq!(run.final_field.labels(), hp.labels());
        let m0 = run.traces[0].measure;
        assert!(run.traces.iter().all(|t| t.measure == m0));
    }

    #[test]
    fn full_and_empty_are_fixed() {
        let g = GridGeometry::centered(2, 1.0, 16).unwrap();
        let k = build_flow_kernel(&g, order(0.5), 0.3).unwrap();
        for shape in [Shape::Full, Shape::Empty] {
            let f = PhaseField::resolved(&g, &shape, &CellSet::full(&g)).unwrap();
            assert_eq!(mbo_step(&f, &k).unwrap().labels(), f.labels());
        }
    }

    #[test]
    fn disk_measure_decreases() {
        let g = GridGeometry::centered(2, 1.0, 64).unwrap();
        let k = build_flow_kernel(&g, order(0.5), 0.35).unwrap();
        let f = disk(&g, [0.0, 0.0], 0.5);
        let run = run_flow(&f, &k, 5).unwrap();
        for w in run.traces.windows(2) {
            assert!(w[1].measure < w[0].measure);
        }
    }

    #[test]
    fn thresholding_is_monotone() {
        let g = GridGeometry::centered(2, 1.0, 48).unwrap();
        let k = build_flow_kernel(&g, order(0.3), 0.4).unwrap();
        let small = mbo_step(&disk(&g, [0.05, 0.0], 0.3), &k).unwrap();
        let large = mbo_step(&disk(&g, [0.0, 0.0], 0.45), &k).unwrap();
        assert!(small.in_set().is_subset(&large.in_set()));
    }

    #[test]
    fn translation_equivariance() {
        let g = GridGeometry::centered(2, 1.0, 48).unwrap();
        let h = g.h();
        let k = build_flow_kernel(&g, order(0.5), 0.3).unwrap();
        let a = mbo_step(&disk(&g, [0.0, 0.0], 0.3), &k).unwrap();
        let b = mbo_step(&disk(&g, [h, 0.0], 0.3), &k).unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            if c[0] + 1 < g.extent()[0] {
                let j = g.index([c[0] + 1, c[1], 0]);
                assert_eq!(a.label(i), b.label(j));
            }
        }
    }

    #[test]
    fn complement_duality_off_ties() {
        let g = GridGeometry::centered(2, 1.0, 40).unwrap();
        let k = build_flow_kernel(&g, order(0.5), 0.3).unwrap();
        let f = disk(&g, [0.03, -0.02], 0.4);
        let a = mbo_step(&f, &k).unwrap();
        let b = mbo_step(&f.complement(), &k).unwrap();
        assert_eq!(a.complement().labels(), b.labels());
    }

    #[test]
    fn exponent_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [0.3, 0.45, 0.6].iter().map(|&r: &f64| (r, 7.0 * r.powf(1.4))).collect();
        assert!((power_law_exponent(&pts) - 1.4).abs() < 1e-12);
    }
}
