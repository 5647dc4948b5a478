//! Riesz-kernel interaction weights on the lattice.
//!
//! `w(Δ) = ∫_{cell 0} ∫_{cell Δ} |x − y|^{−(n+s)} dy dx`. Writing the double
//! integral against the autocorrelation of the cell indicator turns it into an
//! n-dimensional integral of `|t|^{−(n+s)}` times a tensor "tent" weight over
//! `[Δh − h, Δh + h]^n`. Splitting at the tent apex gives 2^n boxes on which
//! the weight is a product of affine factors. A box with the origin at a
//! corner is handled exactly through homogeneity: each monomial of degree `d`
//! integrates to `shell / (1 − 2^{−(d−s)})`, where the shell is the box minus
//! its half-size corner copy.
//!
//! Interactions with the continuum data outside the box are computed per cell
//! by angular quadrature with exact radial antiderivatives.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, PhaseField};
use crate::numeric::{sphere_area, GaussRule, KahanSum};
use crate::shape::Shape;

/// Offsets with every |Δ_k| ≤ this use the adaptive near-field quadrature.
pub const NEAR_FIELD_RADIUS: usize = 4;

const NEAR_RELATIVE_TOL: f64 = 1e-11;
const MAX_DEPTH: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionalOrder {
    s: f64,
    sigma: f64,
    a: f64,
}

impl FractionalOrder {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Order(s));
        }
        Ok(Self {
            s,
            sigma: s / 2.0,
            a: 1.0 - s,
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Order of the fractional Laplacian driving the diffusion, `s/2`.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Exponent of the extension weight `z^a`, `1 − s`.
    pub fn a(&self) -> f64 {
        self.a
    }
}

/// Dense table of cell-pair weights over every lattice offset realizable in
/// the box, `Δ_k ∈ [−(e_k − 1), e_k − 1]`.
#[derive(Clone, Debug)]
pub struct KernelTable {
    geometry: GridGeometry,
    order: FractionalOrder,
    weights: Vec<f64>,
    span: [usize; 3],
    near_field_radius: usize,
    tail_exponent_coeff: f64,
}

impl KernelTable {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn order(&self) -> FractionalOrder {
        self.order
    }

    pub fn near_field_radius(&self) -> usize {
        self.near_field_radius
    }

    /// Coefficient `C` of the far-field bound `C·R^{−s}` (unit-sphere area / s).
    pub fn tail_exponent_coeff(&self) -> f64 {
        self.tail_exponent_coeff
    }

    /// Raw weights in offset-table order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of offsets per axis, `2e_k − 1` (1 for unused axes).
    pub fn span(&self) -> [usize; 3] {
        self.span
    }

    #[inline]
    pub fn offset_index(&self, delta: [i64; 3]) -> Option<usize> {
        let e = self.geometry.extent();
        let mut idx = 0usize;
        let mut stride = 1usize;
        for k in 0..3 {
            let ek = if k < e.len() { e[k] as i64 } else { 1 };
            let shifted = delta[k] + ek - 1;
            if shifted < 0 || shifted >= 2 * ek - 1 {
                return None;
            }
            idx += shifted as usize * stride;
            stride *= self.span[k];
        }
        Some(idx)
    }

    /// Weight for a lattice offset; zero outside the realizable range.
    pub fn weight(&self, delta: [i64; 3]) -> f64 {
        self.offset_index(delta).map_or(0.0, |i| self.weights[i])
    }

    /// Weight between two cells of the table's geometry.
    #[inline]
    pub fn between(&self, a: usize, b: usize) -> f64 {
        let ca = self.geometry.coords(a);
        let cb = self.geometry.coords(b);
        self.weight([
            ca[0] as i64 - cb[0] as i64,
            ca[1] as i64 - cb[1] as i64,
            ca[2] as i64 - cb[2] as i64,
        ])
    }

    /// Index helpers for fast inner loops: `weights[base(a) − linear(b)]`
    /// is the weight between cells `a` and `b`.
    #[inline]
    pub fn base_index(&self, cell: usize) -> usize {
        let c = self.geometry.coords(cell);
        let e = self.geometry.extent();
        let mut idx = 0;
        let mut stride = 1;
        for k in 0..3 {
            let ek = if k < e.len() { e[k] } else { 1 };
            idx += (c[k] + ek - 1) * stride;
            stride *= self.span[k];
        }
        idx
    }

    #[inline]
    pub fn linear_index(&self, cell: usize) -> usize {
        let c = self.geometry.coords(cell);
        c[0] + self.span[0] * (c[1] + self.span[1] * c[2])
    }

    /// Midpoint value `h^{2n} |Δh|^{−(n+s)}`, the reference far-field rule.
    pub fn midpoint_weight(&self, delta: [i64; 3]) -> f64 {
        midpoint_weight(self.geometry.dim(), self.geometry.h(), self.order.s(), delta)
    }

    /// Iterate `(offset, weight)` over every entry.
    pub fn entries(&self) -> impl Iterator<Item = ([i64; 3], f64)> + '_ {
        let e = self.geometry.extent().to_vec();
        let span = self.span;
        self.weights.iter().enumerate().map(move |(i, &w)| {
            let c = [i % span[0], (i / span[0]) % span[1], i / (span[0] * span[1])];
            let mut d = [0i64; 3];
            for k in 0..e.len() {
                d[k] = c[k] as i64 - (e[k] as i64 - 1);
            }
            (d, w)
        })
    }

    /// Write the table to `dir` under a name derived from the header hash.
    pub fn save_cache(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let header = cache_header(&self.geometry, self.order);
        let path = dir.join(cache_file_name(&header));
        let mut buf = Vec::with_capacity(header.len() + 8 + self.weights.len() * 32);
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for (d, w) in self.entries() {
            for dk in d {
                buf.extend_from_slice(&dk.to_le_bytes());
            }
            buf.extend_from_slice(&w.to_le_bytes());
        }
        std::fs::File::create(&path)?.write_all(&buf)?;
        Ok(path)
    }

    /// Load a cached table for this configuration, if present and intact.
    pub fn load_cache(geometry: &GridGeometry, order: FractionalOrder, dir: &Path) -> Result<Option<Self>> {
        let header = cache_header(geometry, order);
        let path = dir.join(cache_file_name(&header));
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        if bytes.len() < header.len() + 8 || bytes[..header.len()] != header[..] {
            return Err(Error::Format(format!("cache header mismatch in {}", path.display())));
        }
        let mut pos = header.len();
        let count = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let span = spans(geometry);
        if count != span.iter().product::<usize>() || bytes.len() != pos + count * 32 {
            return Err(Error::Format("cache length mismatch".into()));
        }
        let mut table = Self::empty(geometry, order);
        for _ in 0..count {
            let mut d = [0i64; 3];
            for dk in d.iter_mut() {
                *dk = i64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
                pos += 8;
            }
            let w = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            let idx = table
                .offset_index(d)
                .ok_or_else(|| Error::Format("cache offset out of range".into()))?;
            table.weights[idx] = w;
        }
        Ok(Some(table))
    }

    fn empty(geometry: &GridGeometry, order: FractionalOrder) -> Self {
        let span = spans(geometry);
        Self {
            geometry: geometry.clone(),
            order,
            weights: vec![0.0; span.iter().product()],
            span,
            near_field_radius: NEAR_FIELD_RADIUS,
            tail_exponent_coeff: sphere_area(geometry.dim()) / order.s(),
        }
    }
}

const CACHE_VERSION: u32 = 1;

fn cache_header(geometry: &GridGeometry, order: FractionalOrder) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(b"FRACKERN");
    h.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    h.extend_from_slice(&(geometry.dim() as u32).to_le_bytes());
    for k in 0..3 {
        let e = geometry.extent().get(k).copied().unwrap_or(1) as u64;
        h.extend_from_slice(&e.to_le_bytes());
    }
    h.extend_from_slice(&geometry.h().to_le_bytes());
    h.extend_from_slice(&order.s().to_le_bytes());
    h
}

fn cache_file_name(header: &[u8]) -> String {
    let digest = Sha256::digest(header);
    let hex: String = digest.iter().take(12).map(|b| format!("{b:02x}")).collect();
    format!("kernel-{hex}.fkt")
}

fn spans(geometry: &GridGeometry) -> [usize; 3] {
    let mut span = [1usize; 3];
    for (k, &e) in geometry.extent().iter().enumerate() {
        span[k] = 2 * e - 1;
    }
    span
}

/// Build the weight table for every realizable offset.
pub fn build_table(geometry: &GridGeometry, order: FractionalOrder) -> Result<KernelTable> {
    let mut table = KernelTable::empty(geometry, order);
    let dim = geometry.dim();
    let e = geometry.extent();
    let max_e = *e.iter().max().unwrap();

    // weights are invariant under sign flips and axis permutations: compute
    // one value per sorted tuple of absolute offsets
    let mut canon: Vec<[usize; 3]> = Vec::new();
    match dim {
        1 => (0..max_e).for_each(|a| canon.push([a, 0, 0])),
        2 => {
            for a in 0..max_e {
                for b in 0..=a {
                    canon.push([a, b, 0]);
                }
            }
        }
        _ => {
            for a in 0..max_e {
                for b in 0..=a {
                    for c in 0..=b {
                        canon.push([a, b, c]);
                    }
                }
            }
        }
    }
    let h = geometry.h();
    let s = order.s();
    let values: Vec<Result<f64>> = canon
        .par_iter()
        .map(|c| cell_pair_weight(dim, h, s, [c[0] as i64, c[1] as i64, c[2] as i64]))
        .collect();
    let mut lookup = std::collections::HashMap::with_capacity(canon.len());
    for (c, v) in canon.iter().zip(values) {
        lookup.insert(*c, v?);
    }
    let span = table.span;
    for i in 0..table.weights.len() {
        let c = [i % span[0], (i / span[0]) % span[1], i / (span[0] * span[1])];
        let mut key = [0usize; 3];
        for k in 0..dim {
            key[k] = (c[k] as i64 - (e[k] as i64 - 1)).unsigned_abs() as usize;
        }
        key[..dim].sort_unstable_by(|a, b| b.cmp(a));
        table.weights[i] = lookup[&key];
    }
    Ok(table)
}

pub fn midpoint_weight(dim: usize, h: f64, s: f64, delta: [i64; 3]) -> f64 {
    let r2: f64 = delta[..dim].iter().map(|&d| (d as f64 * h).powi(2)).sum();
    if r2 == 0.0 {
        return 0.0;
    }
    h.powi(2 * dim as i32) * r2.powf(-(dim as f64 + s) / 2.0)
}

/// `∫_{|y−x|>R} |y − x|^{−(n+s)} dy = |S^{n−1}|·R^{−s}/s`.
pub fn tail_integral(dim: usize, order: FractionalOrder, radius: f64) -> f64 {
    sphere_area(dim) * radius.powf(-order.s()) / order.s()
}

#[derive(Clone, Copy)]
struct Cube {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Cube {
    fn children(&self, dim: usize) -> impl Iterator<Item = Cube> + '_ {
        (0..(1usize << dim)).map(move |mask| {
            let mut c = *self;
            for k in 0..dim {
                let mid = 0.5 * (self.lo[k] + self.hi[k]);
                if mask & (1 << k) == 0 {
                    c.hi[k] = mid;
                } else {
                    c.lo[k] = mid;
                }
            }
            c
        })
    }
}

fn gauss_cube<F: Fn(&[f64; 3]) -> f64>(dim: usize, rule: &GaussRule, cube: &Cube, f: &F) -> f64 {
    let axes: Vec<Vec<(f64, f64)>> = (0..dim).map(|k| rule.on(cube.lo[k], cube.hi[k]).collect()).collect();
    let mut acc = KahanSum::new();
    let mut t = [0.0; 3];
    match dim {
        1 => {
            for &(x, w) in &axes[0] {
                t[0] = x;
                acc.add(w * f(&t));
            }
        }
        2 => {
            for &(x, wx) in &axes[0] {
                t[0] = x;
                for &(y, wy) in &axes[1] {
                    t[1] = y;
                    acc.add(wx * wy * f(&t));
                }
            }
        }
        _ => {
            for &(x, wx) in &axes[0] {
                t[0] = x;
                for &(y, wy) in &axes[1] {
                    t[1] = y;
                    for &(z, wz) in &axes[2] {
                        t[2] = z;
                        acc.add(wx * wy * wz * f(&t));
                    }
                }
            }
        }
    }
    acc.value()
}

fn adaptive_cube<F: Fn(&[f64; 3]) -> f64>(
    dim: usize,
    rule: &GaussRule,
    cube: &Cube,
    f: &F,
    abs_tol: f64,
    depth: usize,
) -> Result<f64> {
    let coarse = gauss_cube(dim, rule, cube, f);
    let fine: f64 = cube.children(dim).map(|c| gauss_cube(dim, rule, &c, f)).sum();
    if (fine - coarse).abs() <= abs_tol.max(NEAR_RELATIVE_TOL * fine.abs()) {
        return Ok(fine);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::Quadrature(format!(
            "subdivision cap reached (estimate {fine:e}, change {:e})",
            (fine - coarse).abs()
        )));
    }
    let children: Vec<Cube> = cube.children(dim).collect();
    let mut acc = KahanSum::new();
    for c in &children {
        acc.add(adaptive_cube(dim, rule, c, f, abs_tol / children.len() as f64, depth + 1)?);
    }
    Ok(acc.value())
}

/// Exact cell-pair integral for one lattice offset.
pub fn cell_pair_weight(dim: usize, h: f64, s: f64, delta: [i64; 3]) -> Result<f64> {
    if delta[..dim].iter().all(|&d| d == 0) {
        return Ok(0.0);
    }
    let p = dim as f64 + s;
    let kernel = |t: &[f64; 3]| -> f64 {
        let r2: f64 = t[..dim].iter().map(|x| x * x).sum();
        r2.powf(-p / 2.0)
    };
    let near = delta[..dim].iter().all(|&d| d.unsigned_abs() as usize <= NEAR_FIELD_RADIUS);
    let far_order = match dim {
        1 => 8,
        2 => 6,
        _ => 4,
    };
    let rule = GaussRule::new(if near { 8 } else { far_order });
    let scale = midpoint_weight(dim, h, s, delta).max(midpoint_weight(dim, h, s, [1, 0, 0]) * 1e-300);
    let abs_tol = 1e-13 * scale;

    let mut total = KahanSum::new();
    for mask in 0..(1usize << dim) {
        // on this box τ_k = t_k − Δ_k h has a fixed sign and the tent factor
        // h − |τ_k| equals alpha_k + beta_k t_k
        let mut cube = Cube {
            lo: [0.0; 3],
            hi: [0.0; 3],
        };
        let mut alpha = [1.0; 3];
        let mut beta = [0.0; 3];
        for k in 0..dim {
            let c = delta[k] as f64 * h;
            if mask & (1 << k) == 0 {
                cube.lo[k] = c - h;
                cube.hi[k] = c;
                alpha[k] = h - c;
                beta[k] = 1.0;
            } else {
                cube.lo[k] = c;
                cube.hi[k] = c + h;
                alpha[k] = h + c;
                beta[k] = -1.0;
            }
        }
        let weight = |t: &[f64; 3]| -> f64 { (0..dim).map(|k| alpha[k] + beta[k] * t[k]).product() };
        let touches_origin = (0..dim).all(|k| cube.lo[k] == 0.0 || cube.hi[k] == 0.0);
        if !touches_origin {
            if near {
                let f = |t: &[f64; 3]| kernel(t) * weight(t);
                total.add(adaptive_cube(dim, &rule, &cube, &f, abs_tol, 0)?);
            } else {
                let f = |t: &[f64; 3]| kernel(t) * weight(t);
                total.add(gauss_cube(dim, &rule, &cube, &f));
            }
            continue;
        }
        // singular corner: expand the weight into monomials and use homogeneity
        for subset in 0..(1usize << dim) {
            let mut coef = 1.0;
            let mut degree = 0;
            for k in 0..dim {
                if subset & (1 << k) != 0 {
                    coef *= beta[k];
                    degree += 1;
                } else {
                    coef *= alpha[k];
                }
            }
            if coef == 0.0 {
                continue;
            }
            let exponent = degree as f64 - s;
            if exponent <= 0.0 {
                return Err(Error::Quadrature("non-integrable corner monomial".into()));
            }
            let mono = |t: &[f64; 3]| -> f64 {
                let mut m = kernel(t);
                for k in 0..dim {
                    if subset & (1 << k) != 0 {
                        m *= t[k];
                    }
                }
                m
            };
            let mut shell = KahanSum::new();
            for child in cube.children(dim) {
                let at_origin = (0..dim).all(|k| child.lo[k] == 0.0 || child.hi[k] == 0.0);
                if at_origin {
                    continue;
                }
                shell.add(adaptive_cube(dim, &rule, &child, &mono, abs_tol, 1)?);
            }
            total.add(coef * shell.value() / (1.0 - 2f64.powf(-exponent)));
        }
    }
    Ok(total.value())
}

/// Directions and weights for integrating over the unit sphere.
#[derive(Clone, Debug)]
pub struct AngularRule {
    dirs: Vec<[f64; 3]>,
    weights: Vec<f64>,
    /// Indices of a nested coarse sub-rule (and its weights) for error estimates.
    coarse: Vec<(usize, f64)>,
}

impl AngularRule {
    pub fn new(dim: usize, resolution: usize) -> Self {
        match dim {
            1 => Self {
                dirs: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
                weights: vec![1.0, 1.0],
                coarse: vec![(0, 1.0), (1, 1.0)],
            },
            2 => {
                let n = resolution.max(8) & !1;
                let dtheta = 2.0 * PI / n as f64;
                let phase = 0.3183;
                let dirs: Vec<[f64; 3]> = (0..n)
                    .map(|k| {
                        let th = (k as f64 + phase) * dtheta;
                        [th.cos(), th.sin(), 0.0]
                    })
                    .collect();
                let coarse = (0..n).step_by(2).map(|k| (k, 2.0 * dtheta)).collect();
                Self {
                    dirs,
                    weights: vec![dtheta; n],
                    coarse,
                }
            }
            _ => {
                let m = (resolution / 4).max(4) & !1;
                let rule = GaussRule::new(m);
                let nphi = 2 * m;
                let dphi = 2.0 * PI / nphi as f64;
                let mut dirs = Vec::new();
                let mut weights = Vec::new();
                let mut coarse = Vec::new();
                for (mu, wmu) in rule.on(-1.0, 1.0) {
                    let st = (1.0 - mu * mu).sqrt();
                    for j in 0..nphi {
                        let ph = (j as f64 + 0.3183) * dphi;
                        if j % 2 == 0 {
                            coarse.push((dirs.len(), wmu * 2.0 * dphi));
                        }
                        dirs.push([st * ph.cos(), st * ph.sin(), mu]);
                        weights.push(wmu * dphi);
                    }
                }
                Self { dirs, weights, coarse }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Directions with their weights; the weights sum to the sphere area.
    pub fn nodes(&self) -> impl Iterator<Item = (&[f64; 3], f64)> + '_ {
        self.dirs.iter().zip(self.weights.iter().copied())
    }
}

/// Exit distance of the ray `x + ρ·dir` from the box (x inside).
pub fn box_exit(geometry: &GridGeometry, x: &[f64], dir: &[f64; 3]) -> f64 {
    let lo = geometry.lower();
    let hi = geometry.upper();
    let mut best = f64::INFINITY;
    for k in 0..geometry.dim() {
        let d = dir[k];
        if d > 0.0 {
            best = best.min((hi[k] - x[k]) / d);
        } else if d < 0.0 {
            best = best.min((lo[k] - x[k]) / d);
        }
    }
    best.max(0.0)
}

/// Integrals over the region outside the box, split by membership in
/// `shape`, of a radial kernel whose radial antiderivative (including the
/// `ρ^{n−1}` Jacobian) is `radial(a, b)`. Returns `(inside, outside,
/// estimated angular error)`.
pub fn exterior_point_integrals<R: Fn(f64, f64) -> f64>(
    geometry: &GridGeometry,
    x: &[f64],
    shape: &Shape,
    rule: &AngularRule,
    radial: &R,
) -> (f64, f64, f64) {
    let dim = geometry.dim();
    let mut per_dir = Vec::with_capacity(rule.len());
    for dir in &rule.dirs {
        let exit = box_exit(geometry, x, dir);
        let mut inside = 0.0;
        let mut outside = 0.0;
        for seg in shape.ray_segments(&x[..dim], &dir[..dim], exit) {
            let v = radial(seg.start, seg.end);
            if seg.inside {
                inside += v;
            } else {
                outside += v;
            }
        }
        per_dir.push((inside, outside));
    }
    let mut fin = (KahanSum::new(), KahanSum::new());
    for (w, (i, o)) in rule.weights.iter().zip(&per_dir) {
        fin.0.add(w * i);
        fin.1.add(w * o);
    }
    let mut coarse = (KahanSum::new(), KahanSum::new());
    for &(k, w) in &rule.coarse {
        coarse.0.add(w * per_dir[k].0);
        coarse.1.add(w * per_dir[k].1);
    }
    let (fi, fo) = (fin.0.value(), fin.1.value());
    let err = (fi - coarse.0.value()).abs() + (fo - coarse.1.value()).abs();
    (fi, fo, err)
}

/// Radial antiderivative of the Riesz kernel with Jacobian: `∫_a^b ρ^{−1−s} dρ`.
pub fn riesz_radial(s: f64) -> impl Fn(f64, f64) -> f64 {
    move |a: f64, b: f64| {
        let fb = if b.is_infinite() { 0.0 } else { b.powf(-s) };
        (a.powf(-s) - fb) / s
    }
}

/// `∫_a^b ρ^{n−1} (1 + ρ²/ℓ²)^{−(n+s)/2} dρ`; `b` may be infinite.
pub fn cauchy_radial(dim: usize, s: f64, ell: f64) -> impl Fn(f64, f64) -> f64 {
    let rule = GaussRule::new(12);
    move |a: f64, b: f64| -> f64 {
        let (t0, t1) = (a / ell, b / ell);
        ell.powi(dim as i32) * unit_cauchy(&rule, dim, s, t0, t1)
    }
}

fn unit_cauchy(rule: &GaussRule, dim: usize, s: f64, t0: f64, t1: f64) -> f64 {
    if t1 <= t0 {
        return 0.0;
    }
    if dim == 2 {
        let f = |t: f64| if t.is_infinite() { 0.0 } else { (1.0 + t * t).powf(-s / 2.0) };
        return (f(t0) - f(t1)) / s;
    }
    let p = (dim as f64 + s) / 2.0;
    let mut acc = 0.0;
    // smooth core in t, power-law tail in v = t^{−s}
    if t0 < 1.0 {
        let hi = t1.min(1.0);
        let panels = 2;
        for k in 0..panels {
            let lo = t0 + (hi - t0) * k as f64 / panels as f64;
            let up = t0 + (hi - t0) * (k + 1) as f64 / panels as f64;
            acc += rule.integrate(lo, up, |t| t.powi(dim as i32 - 1) * (1.0 + t * t).powf(-p));
        }
    }
    if t1 > 1.0 {
        let v_hi = t0.max(1.0).powf(-s);
        let v_lo = if t1.is_infinite() { 0.0 } else { t1.powf(-s) };
        let panels = 3;
        for k in 0..panels {
            let lo = v_lo + (v_hi - v_lo) * k as f64 / panels as f64;
            let up = v_lo + (v_hi - v_lo) * (k + 1) as f64 / panels as f64;
            acc += rule.integrate(lo, up, |v| {
                let t = v.powf(-1.0 / s);
                (1.0 + t.powi(-2)).powf(-p) / s
            });
        }
    }
    acc
}

/// Cell-integrated interactions of lattice cells with the continuum data
/// outside the box: `inside[i] = ∫_{cell i} ∫_{y ∉ box, y ∈ S} K`, and
/// `outside[i]` likewise for the complement of `S`.
#[derive(Clone, Debug, Default)]
pub struct ExteriorTails {
    pub cells: Vec<usize>,
    pub inside: Vec<f64>,
    pub outside: Vec<f64>,
    pub error: Vec<f64>,
}

impl ExteriorTails {
    pub fn position(&self, cell: usize) -> Option<usize> {
        self.cells.binary_search(&cell).ok()
    }

    pub fn total_error(&self) -> f64 {
        crate::numeric::sum(self.error.iter().copied())
    }
}

/// Number of nodes per axis for a cell at the given layer from the faces,
/// and whether they are graded toward a face.
fn axis_plan(layer_lo: usize, layer_hi: usize, dim: usize) -> (usize, bool) {
    match (dim, layer_lo.min(layer_hi)) {
        (1, 0) => (16, true),
        (1, 1) => (12, false),
        (1, _) => (8, false),
        (_, 0) => (6, true),
        (_, 1) => (4, false),
        (_, n) if n < 8 => (2, false),
        _ => (1, false),
    }
}

/// Per-axis cell quadrature; graded nodes resolve the `d^{−s}` growth of the
/// tails at a box face.
fn axis_nodes(lo: f64, h: f64, q: usize, graded: bool, layers: (usize, usize), s: f64) -> Vec<(f64, f64)> {
    let rule = GaussRule::new(q);
    if !graded {
        return rule.on(lo, lo + h).collect();
    }
    let p = 1.0 / (1.0 - s);
    let toward_lo = layers.0 == 0;
    let toward_hi = layers.1 == 0;
    if toward_lo && toward_hi {
        // single-cell axis: grade toward both faces from the middle
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (u, w) in rule.on(0.0, 1.0) {
            let t = 0.5 * h * u.powf(p);
            let jw = 0.5 * h * w * p * u.powf(p - 1.0);
            out.push((lo + t, jw));
            out.push((lo + h - t, jw));
        }
        return out;
    }
    rule.on(0.0, 1.0)
        .map(|(u, w)| {
            let t = h * u.powf(p);
            let jw = h * w * p * u.powf(p - 1.0);
            if toward_lo {
                (lo + t, jw)
            } else {
                (lo + h - t, jw)
            }
        })
        .collect()
}

fn tensor_points(dim: usize, axes: &[Vec<(f64, f64)>], mut f: impl FnMut(&[f64], f64)) {
    let mut p = [0.0; 3];
    match dim {
        1 => {
            for &(x, w) in &axes[0] {
                p[0] = x;
                f(&p[..1], w);
            }
        }
        2 => {
            for &(x, wx) in &axes[0] {
                p[0] = x;
                for &(y, wy) in &axes[1] {
                    p[1] = y;
                    f(&p[..2], wx * wy);
                }
            }
        }
        _ => {
            for &(x, wx) in &axes[0] {
                p[0] = x;
                for &(y, wy) in &axes[1] {
                    p[1] = y;
                    for &(z, wz) in &axes[2] {
                        p[2] = z;
                        f(&p[..3], wx * wy * wz);
                    }
                }
            }
        }
    }
}

/// Exterior tails for the listed cells (sorted ascending). Without a
/// prescribed shape the interaction with everything outside the box is
/// unknown and is reported entirely as error.
pub fn exterior_tails(
    geometry: &GridGeometry,
    order: FractionalOrder,
    shape: Option<&Shape>,
    cells: &[usize],
) -> ExteriorTails {
    let radial = riesz_radial(order.s());
    exterior_tails_with(geometry, order, shape, cells, &radial)
}

/// As [`exterior_tails`] for an arbitrary radial antiderivative.
pub fn exterior_tails_with<R: Fn(f64, f64) -> f64 + Sync>(
    geometry: &GridGeometry,
    order: FractionalOrder,
    shape: Option<&Shape>,
    cells: &[usize],
    radial: &R,
) -> ExteriorTails {
    let dim = geometry.dim();
    let s = order.s();
    let h = geometry.h();
    let fine = AngularRule::new(dim, 256);
    let coarse_rule = AngularRule::new(dim, 96);
    let mut sorted = cells.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let e = geometry.extent().to_vec();
    let results: Vec<(f64, f64, f64)> = sorted
        .par_iter()
        .map(|&cell| {
            let c = geometry.coords(cell);
            let mut axes = Vec::with_capacity(dim);
            let mut coarse_axes = Vec::with_capacity(dim);
            let mut near_layer = usize::MAX;
            let mut single_point = true;
            for k in 0..dim {
                let lo = geometry.origin()[k] + h * c[k] as f64;
                let layers = (c[k], e[k] - 1 - c[k]);
                near_layer = near_layer.min(layers.0.min(layers.1));
                let (q, graded) = axis_plan(layers.0, layers.1, dim);
                single_point &= q == 1;
                axes.push(axis_nodes(lo, h, q, graded, layers, s));
                coarse_axes.push(axis_nodes(lo, h, (q / 2).max(1), graded, layers, s));
            }
            let rule = if near_layer < 8 { &fine } else { &coarse_rule };
            let point = |p: &[f64]| -> (f64, f64, f64) {
                match shape {
                    Some(sh) => exterior_point_integrals(geometry, p, sh, rule, radial),
                    None => {
                        let (i, o, e) = exterior_point_integrals(geometry, p, &Shape::Full, rule, radial);
                        (0.0, 0.0, i + o + e)
                    }
                }
            };
            let mut inside = KahanSum::new();
            let mut outside = KahanSum::new();
            let mut err = 0.0;
            let mut total = 0.0;
            tensor_points(dim, &axes, |p, w| {
                let (i, o, e) = point(p);
                inside.add(w * i);
                outside.add(w * o);
                err += w * e;
                total += w * (i + o + e);
            });
            let avg_err = if single_point {
                // midpoint rule: leading term of the second-order expansion
                // of a d^{-s} profile at distance d from the box
                let center = geometry.center(cell);
                let d = geometry.distance_to_boundary(&center[..dim]).max(0.5 * h);
                total * s * (1.0 + s) / 24.0 * (h / d).powi(2) * dim as f64
            } else {
                let mut coarse_total = 0.0;
                tensor_points(dim, &coarse_axes, |p, w| {
                    let (i, o, e) = point(p);
                    coarse_total += w * (i + o + e);
                });
                (coarse_total - total).abs()
            };
            (inside.value(), outside.value(), err + avg_err)
        })
        .collect();
    let mut tails = ExteriorTails {
        cells: sorted,
        ..Default::default()
    };
    for (i, o, e) in results {
        tails.inside.push(i);
        tails.outside.push(o);
        tails.error.push(e);
    }
    tails
}

/// Exterior tails for the free cells of a field.
pub fn field_tails(field: &PhaseField, table: &KernelTable) -> ExteriorTails {
    let cells = field.free_region().indices();
    exterior_tails(field.geometry(), table.order(), field.exterior(), &cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Double antiderivative of t^{-(1+s)}: F'' = f, F(0) = 0.
    fn f2(t: f64, s: f64) -> f64 {
        -t.powf(1.0 - s) / (s * (1.0 - s))
    }

    /// 1D closed form: w(d) = h^{1-s} (F(d+1) − 2F(d) + F(d−1)).
    fn closed_form_1d(d: i64, h: f64, s: f64) -> f64 {
        let d = d.unsigned_abs() as f64;
        h.powf(1.0 - s) * (f2(d + 1.0, s) - 2.0 * f2(d, s) + f2((d - 1.0).abs(), s))
    }

    fn order(s: f64) -> FractionalOrder {
        FractionalOrder::new(s).unwrap()
    }

    #[test]
    fn fractional_order_bounds() {
        assert!(FractionalOrder::new(0.0).is_err());
        assert!(FractionalOrder::new(1.0).is_err());
        assert!(FractionalOrder::new(1.2).is_err());
        let o = order(0.3);
        assert_eq!(o.sigma(), 0.15);
        assert_eq!(o.a(), 1.0 - 0.3);
    }

    #[test]
    fn adjacent_cells_match_closed_form() {
        let w = cell_pair_weight(1, 1.0, 0.5, [1, 0, 0]).unwrap();
        let want = 8.0 - 4.0 * 2f64.sqrt();
        assert!((w - want).abs() < 1e-10 * want, "{w} vs {want}");
    }

    #[test]
    fn one_dimensional_weights_match_closed_form() {
        for &s in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            for d in 1..12 {
                let w = cell_pair_weight(1, 0.37, s, [d, 0, 0]).unwrap();
                let want = closed_form_1d(d, 0.37, s);
                assert!((w - want).abs() < 1e-9 * want, "s={s} d={d}: {w} vs {want}");
            }
        }
    }

    #[test]
    fn offset_ten_against_midpoint_rule() {
        let w = cell_pair_weight(1, 1.0, 0.5, [10, 0, 0]).unwrap();
        let exact = closed_form_1d(10, 1.0, 0.5);
        assert!((w - exact).abs() < 1e-10 * exact);
        let mid = midpoint_weight(1, 1.0, 0.5, [10, 0, 0]);
        assert!((mid - 10f64.powf(-1.5)).abs() < 1e-15);
        // second-order correction (n+s)(2+s)/(12 d^2) accounts for the gap
        let predicted = mid * (1.0 + 1.5 * 2.5 / 1200.0);
        assert!((w - predicted).abs() / w < 2e-5, "{w} vs {predicted}");
    }

    #[test]
    fn zero_offset_has_zero_weight() {
        for dim in 1..=3 {
            assert_eq!(cell_pair_weight(dim, 0.1, 0.5, [0, 0, 0]).unwrap(), 0.0);
        }
    }

    /// Independent 2D oracle: 4D tensor Gauss on sub-cells with an analytic
    /// excision of nothing. Used only for a well-separated offset.
    fn brute_2d(delta: [i64; 2], h: f64, s: f64, q: usize, sub: usize) -> f64 {
        let rule = GaussRule::new(q);
        let hs = h / sub as f64;
        let mut pts_a = Vec::new();
        for i in 0..sub {
            for (x, w) in rule.on(i as f64 * hs, (i + 1) as f64 * hs) {
                pts_a.push((x, w));
            }
        }
        let mut acc = 0.0;
        for &(x1, w1) in &pts_a {
            for &(x2, w2) in &pts_a {
                for &(y1, v1) in &pts_a {
                    for &(y2, v2) in &pts_a {
                        let dx = delta[0] as f64 * h + y1 - x1;
                        let dy = delta[1] as f64 * h + y2 - x2;
                        acc += w1 * w2 * v1 * v2 * (dx * dx + dy * dy).powf(-(2.0 + s) / 2.0);
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn two_dimensional_separated_offset_matches_brute_force() {
        let w = cell_pair_weight(2, 1.0, 0.5, [2, 1, 0]).unwrap();
        let b = brute_2d([2, 1], 1.0, 0.5, 6, 3);
        assert!((w - b).abs() < 1e-8 * b, "{w} vs {b}");
    }

    #[test]
    fn refinement_consistency() {
        // parent weight = sum of 2^n × 2^n child-pair weights
        for (dim, delta) in [(1usize, [1i64, 0, 0]), (2, [1, 0, 0]), (2, [1, 1, 0]), (2, [3, 2, 0])] {
            let s = 0.5;
            let h = 1.0;
            let parent = cell_pair_weight(dim, h, s, delta).unwrap();
            let n_child = 1usize << dim;
            let mut acc = 0.0;
            for a in 0..n_child {
                for b in 0..n_child {
                    let mut d = [0i64; 3];
                    for k in 0..dim {
                        let ak = ((a >> k) & 1) as i64;
                        let bk = ((b >> k) & 1) as i64;
                        d[k] = 2 * delta[k] + bk - ak;
                    }
                    acc += cell_pair_weight(dim, h / 2.0, s, d).unwrap();
                }
            }
            assert!((acc - parent).abs() < 1e-6 * parent, "dim {dim} {delta:?}: {acc} vs {parent}");
        }
    }

    #[test]
    fn scaling_law() {
        for dim in 1..=2 {
            let s = 0.7;
            let lambda: f64 = 2.5;
            for delta in [[1i64, 0, 0], [1, 1, 0], [4, 2, 0], [7, 0, 0]] {
                let w1 = cell_pair_weight(dim, 0.2, s, delta).unwrap();
                let w2 = cell_pair_weight(dim, 0.2 * lambda, s, delta).unwrap();
                let ratio = w2 / w1;
                let want = lambda.powf(dim as f64 - s);
                assert!((ratio - want).abs() < 1e-11 * want, "{ratio} vs {want}");
            }
        }
    }

    #[test]
    fn table_symmetries_and_monotonicity() {
        let g = GridGeometry::centered(2, 1.0, 10).unwrap();
        let t = build_table(&g, order(0.5)).unwrap();
        assert_eq!(t.weight([0, 0, 0]), 0.0);
        for a in -9i64..=9 {
            for b in -9i64..=9 {
                let w = t.weight([a, b, 0]);
                assert_eq!(w, t.weight([-a, b, 0]));
                assert_eq!(w, t.weight([b, a, 0]));
                if (a, b) != (0, 0) {
                    assert!(w > 0.0);
                }
            }
        }
        // radial monotonicity along sampled offsets
        let mut samples: Vec<(f64, f64)> = t
            .entries()
            .filter(|(d, _)| *d != [0, 0, 0])
            .map(|(d, w)| (((d[0] * d[0] + d[1] * d[1]) as f64).sqrt(), w))
            .collect();
        samples.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        for pair in samples.windows(2) {
            if pair[1].0 > pair[0].0 + 1e-9 {
                assert!(pair[1].1 < pair[0].1, "{pair:?}");
            }
        }
    }

    #[test]
    fn far_field_close_to_corrected_midpoint() {
        let g = GridGeometry::centered(2, 1.0, 24).unwrap();
        let s = 0.5;
        let t = build_table(&g, order(s)).unwrap();
        for (d, w) in t.entries() {
            let r2 = (d[0] * d[0] + d[1] * d[1]) as f64;
            if r2.sqrt() < NEAR_FIELD_RADIUS as f64 {
                continue;
            }
            let mid = t.midpoint_weight(d);
            let corrected = mid * (1.0 + (2.0 + s) * (2.0 + s) / (12.0 * r2));
            assert!((w - corrected).abs() / w < 2e-3, "{d:?}: {w} vs {corrected}");
        }
    }

    #[test]
    fn tail_integral_values() {
        let o = order(0.5);
        assert!((tail_integral(1, o, 1.0) - 4.0).abs() < 1e-14);
        assert!((tail_integral(1, o, 4.0) - 2.0).abs() < 1e-14);
        let mut last = f64::INFINITY;
        for r in [0.5, 1.0, 10.0, 1e3, 1e6] {
            let v = tail_integral(2, o, r);
            assert!(v < last && v > 0.0);
            last = v;
        }
    }

    #[test]
    fn one_dimensional_tails_match_double_antiderivative() {
        // box [-1, 1], exterior IN on (-inf, -1], OUT on [1, inf)
        let g = GridGeometry::new(&[-1.0], &[8], 0.25).unwrap();
        let s = 0.5;
        let shape = Shape::interval(-1e300, 0.0);
        let cells: Vec<usize> = (0..8).collect();
        let tails = exterior_tails(&g, order(s), Some(&shape), &cells);
        // ∫_{x0}^{x1} ∫_{b}^{∞} (y − x)^{-1-s} dy dx = ((b−x0)^{1−s} − (b−x1)^{1−s}) / (s(1−s))
        let block = |x0: f64, x1: f64, b: f64| ((b - x0).powf(1.0 - s) - (b - x1).powf(1.0 - s)) / (s * (1.0 - s));
        for (k, &c) in tails.cells.iter().enumerate() {
            let x0 = -1.0 + 0.25 * c as f64;
            let x1 = x0 + 0.25;
            let want_out = block(x0, x1, 1.0);
            let want_in = block(-x1, -x0, 1.0);
            assert!((tails.outside[k] - want_out).abs() < 1e-9 * want_out, "cell {c}");
            assert!((tails.inside[k] - want_in).abs() < 1e-9 * want_in, "cell {c}");
            assert!(tails.error[k] >= 0.0);
        }
    }

    #[test]
    fn two_dimensional_tails_for_full_exterior() {
        // center cell of a large box sees ≈ the tail integral at the inscribed radius
        let g = GridGeometry::centered(2, 1.0, 21).unwrap();
        let o = order(0.5);
        let center = g.cell_containing(&[0.0, 0.0]).unwrap();
        let tails = exterior_tails(&g, o, Some(&Shape::Full), &[center]);
        let v = tails.inside[0] / g.cell_volume();
        assert!(tails.outside[0].abs() < 1e-300);
        // bounded between the tail outside the circumscribed and inscribed circles
        assert!(v < tail_integral(2, o, 1.0) && v > tail_integral(2, o, 2f64.sqrt()));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::centered(2, 1.0, 6).unwrap();
        let t = build_table(&g, order(0.4)).unwrap();
        t.save_cache(dir.path()).unwrap();
        let back = KernelTable::load_cache(&g, order(0.4), dir.path()).unwrap().unwrap();
        assert_eq!(back.weights(), t.weights());
        assert!(KernelTable::load_cache(&g, order(0.41), dir.path()).unwrap().is_none());
    }

    #[test]
    fn cauchy_radial_total_mass_is_a_beta_function() {
        for dim in 1..=3 {
            for s in [0.3, 0.5, 0.8] {
                let ell = 0.7;
                let r = cauchy_radial(dim, s, ell);
                let want = ell.powi(dim as i32) * statrs::function::beta::beta(dim as f64 / 2.0, s / 2.0) / 2.0;
                let got = r(0.0, f64::INFINITY);
                assert!((got - want).abs() < 1e-9 * want, "dim {dim} s {s}: {got} vs {want}");
                let split = r(0.0, 0.3) + r(0.3, 2.5) + r(2.5, f64::INFINITY);
                assert!((split - want).abs() < 1e-9 * want);
            }
        }
    }
}
