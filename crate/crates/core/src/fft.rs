//! Zero-padded n-dimensional FFT convolution with a fixed lattice kernel.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::grid::GridGeometry;

/// Precomputed spectrum of a kernel `k(Δ)` defined on the offsets realizable
/// in a box. `apply(u)[x] = Σ_y k(x − y) u[y]` over cells of the box.
pub struct Convolver {
    geometry: GridGeometry,
    padded: [usize; 3],
    spectrum: Vec<Complex<f64>>,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver").field("padded", &self.padded).finish()
    }
}

impl Convolver {
    pub fn new(geometry: &GridGeometry, kernel: impl Fn([i64; 3]) -> f64) -> Self {
        let e = geometry.extent();
        let mut padded = [1usize; 3];
        for (k, &ek) in e.iter().enumerate() {
            padded[k] = 2 * ek;
        }
        let mut planner = FftPlanner::new();
        let forward = [0, 1, 2].map(|k| planner.plan_fft_forward(padded[k]));
        let inverse = [0, 1, 2].map(|k| planner.plan_fft_inverse(padded[k]));
        let total: usize = padded.iter().product();
        let mut spectrum = vec![Complex::new(0.0, 0.0); total];
        let range = |k: usize| -> std::ops::RangeInclusive<i64> {
            if k < e.len() {
                -(e[k] as i64 - 1)..=(e[k] as i64 - 1)
            } else {
                0..=0
            }
        };
        for d2 in range(2) {
            for d1 in range(1) {
                for d0 in range(0) {
                    let w = kernel([d0, d1, d2]);
                    if w == 0.0 {
                        continue;
                    }
                    let i0 = d0.rem_euclid(padded[0] as i64) as usize;
                    let i1 = d1.rem_euclid(padded[1] as i64) as usize;
                    let i2 = d2.rem_euclid(padded[2] as i64) as usize;
                    spectrum[i0 + padded[0] * (i1 + padded[1] * i2)] = Complex::new(w, 0.0);
                }
            }
        }
        let mut conv = Self {
            geometry: geometry.clone(),
            padded,
            spectrum: Vec::new(),
            forward,
            inverse,
        };
        conv.transform(&mut spectrum, false);
        conv.spectrum = spectrum;
        conv
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn transform(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let p = self.padded;
        let plans = if inverse { &self.inverse } else { &self.forward };
        for axis in 0..3 {
            let n = p[axis];
            if n == 1 {
                continue;
            }
            let stride: usize = p[..axis].iter().product();
            let lines = buf.len() / n;
            let mut line = vec![Complex::new(0.0, 0.0); n];
            let mut scratch = vec![Complex::new(0.0, 0.0); plans[axis].get_inplace_scratch_len()];
            for l in 0..lines {
                let inner = l % stride;
                let outer = l / stride;
                let base = inner + outer * stride * n;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = buf[base + j * stride];
                }
                plans[axis].process_with_scratch(&mut line, &mut scratch);
                for (j, v) in line.iter().enumerate() {
                    buf[base + j * stride] = *v;
                }
            }
        }
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        let p = self.padded;
        let e = self.geometry.extent();
        let total: usize = p.iter().product();
        let mut buf = vec![Complex::new(0.0, 0.0); total];
        for (idx, &v) in data.iter().enumerate() {
            if v != 0.0 {
                let c = self.geometry.coords(idx);
                buf[c[0] + p[0] * (c[1] + p[1] * c[2])] = Complex::new(v, 0.0);
            }
        }
        self.transform(&mut buf, false);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= s;
        }
        self.transform(&mut buf, true);
        let norm = 1.0 / total as f64;
        let n = self.geometry.len();
        let _ = e;
        (0..n)
            .map(|idx| {
                let c = self.geometry.coords(idx);
                buf[c[0] + p[0] * (c[1] + p[1] * c[2])].re * norm
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_direct_convolution() {
        for (dim, cells) in [(1usize, 13usize), (2, 7), (3, 4)] {
            let g = GridGeometry::centered(dim, 1.0, cells).unwrap();
            let k = |d: [i64; 3]| 1.0 / (1.0 + (d[0] * d[0] + 2 * d[1] * d[1] + 3 * d[2] * d[2]) as f64) + 0.1 * d[0] as f64;
            let conv = Convolver::new(&g, k);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv.apply(&u);
            for x in 0..g.len() {
                let cx = g.coords(x);
                let mut want = 0.0;
                for y in 0..g.len() {
                    let cy = g.coords(y);
                    let d = [0, 1, 2].map(|i| cx[i] as i64 - cy[i] as i64);
                    want += k(d) * u[y];
                }
                assert!((got[x] - want).abs() < 1e-11, "dim {dim}");
            }
        }
    }
}
