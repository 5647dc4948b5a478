//! Continuum sets used as prescribed data: half-spaces, balls, wedges, slabs
//! and their boolean combinations.
//!
//! Cells are classified by their centers. Outside the computational box the
//! same shapes are integrated exactly along rays, which needs the ray/boundary
//! crossing parameters each primitive provides.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Empty,
    Full,
    /// `{x : x·normal <= offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// Closed ball.
    Ball { center: Vec<f64>, radius: f64 },
    /// Planar sector with apex at the origin, polar angle in `[start, start + opening)`.
    Wedge { start: f64, opening: f64 },
    /// `{x : x[axis] in a closed interval of the list}`.
    Slabs { axis: usize, intervals: Vec<(f64, f64)> },
    Complement { of: Box<Shape> },
    Union { parts: Vec<Shape> },
    Intersection { parts: Vec<Shape> },
}

#[inline]
fn comp(v: &[f64], i: usize) -> f64 {
    v.get(i).copied().unwrap_or(0.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n).map(|i| comp(a, i) * comp(b, i)).sum()
}

impl Shape {
    /// Lower half-space `{x[axis] <= offset}` in `dim` dimensions.
    pub fn lower_half_space(dim: usize, axis: usize, offset: f64) -> Shape {
        let mut normal = vec![0.0; dim];
        normal[axis] = 1.0;
        Shape::HalfSpace { normal, offset }
    }

    pub fn interval(a: f64, b: f64) -> Shape {
        Shape::Slabs {
            axis: 0,
            intervals: vec![(a, b)],
        }
    }

    pub fn complement(self) -> Shape {
        match self {
            Shape::Complement { of } => *of,
            Shape::Empty => Shape::Full,
            Shape::Full => Shape::Empty,
            other => Shape::Complement { of: Box::new(other) },
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Shape::Empty => false,
            Shape::Full => true,
            Shape::HalfSpace { normal, offset } => dot(x, normal) <= *offset,
            Shape::Ball { center, radius } => {
                let n = x.len().max(center.len());
                let d2: f64 = (0..n).map(|i| (comp(x, i) - comp(center, i)).powi(2)).sum();
                d2 <= radius * radius
            }
            Shape::Wedge { start, opening } => {
                let phi = comp(x, 1).atan2(comp(x, 0));
                let rel = (phi - start).rem_euclid(TAU);
                rel < *opening
            }
            Shape::Slabs { axis, intervals } => {
                let v = comp(x, *axis);
                intervals.iter().any(|&(a, b)| a <= v && v <= b)
            }
            Shape::Complement { of } => !of.contains(x),
            Shape::Union { parts } => parts.iter().any(|p| p.contains(x)),
            Shape::Intersection { parts } => parts.iter().all(|p| p.contains(x)),
        }
    }

    /// Parameters `rho > 0` where the ray `x + rho·dir` (unit `dir`) may cross
    /// the boundary. A superset is fine; membership is re-tested between them.
    pub fn ray_crossings(&self, x: &[f64], dir: &[f64], out: &mut Vec<f64>) {
        match self {
            Shape::Empty | Shape::Full => {}
            Shape::HalfSpace { normal, offset } => {
                let den = dot(dir, normal);
                if den != 0.0 {
                    let rho = (offset - dot(x, normal)) / den;
                    if rho > 0.0 {
                        out.push(rho);
                    }
                }
            }
            Shape::Ball { center, radius } => {
                let n = x.len().max(center.len());
                let rel: Vec<f64> = (0..n).map(|i| comp(x, i) - comp(center, i)).collect();
                let b = dot(dir, &rel);
                let c = dot(&rel, &rel) - radius * radius;
                let disc = b * b - c;
                if disc > 0.0 {
                    let sq = disc.sqrt();
                    for rho in [-b - sq, -b + sq] {
                        if rho > 0.0 {
                            out.push(rho);
                        }
                    }
                }
            }
            Shape::Wedge { start, opening } => {
                for angle in [*start, start + opening] {
                    let e = [angle.cos(), angle.sin()];
                    let cx = comp(x, 0) * e[1] - comp(x, 1) * e[0];
                    let cd = comp(dir, 0) * e[1] - comp(dir, 1) * e[0];
                    if cd != 0.0 {
                        let rho = -cx / cd;
                        if rho > 0.0 {
                            out.push(rho);
                        }
                    }
                }
            }
            Shape::Slabs { axis, intervals } => {
                let d = comp(dir, *axis);
                if d != 0.0 {
                    let v = comp(x, *axis);
                    for &(a, b) in intervals {
                        for edge in [a, b] {
                            let rho = (edge - v) / d;
                            if rho > 0.0 {
                                out.push(rho);
                            }
                        }
                    }
                }
            }
            Shape::Complement { of } => of.ray_crossings(x, dir, out),
            Shape::Union { parts } | Shape::Intersection { parts } => {
                for p in parts {
                    p.ray_crossings(x, dir, out);
                }
            }
        }
    }

    /// Segments `[a, b)` of the ray beyond `rho_min` that lie inside the
    /// shape (`inside = true`) or outside it. `b` may be infinite.
    pub fn ray_segments(&self, x: &[f64], dir: &[f64], rho_min: f64) -> Vec<RaySegment> {
        let mut cuts = Vec::new();
        self.ray_crossings(x, dir, &mut cuts);
        cuts.retain(|&r| r > rho_min);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut segs = Vec::with_capacity(cuts.len() + 1);
        let mut a = rho_min;
        let mut p = vec![0.0; x.len()];
        let probe = |rho: f64, p: &mut Vec<f64>| {
            for i in 0..x.len() {
                p[i] = x[i] + rho * comp(dir, i);
            }
            self.contains(p)
        };
        for &b in &cuts {
            let inside = probe(0.5 * (a + b), &mut p);
            push_segment(&mut segs, a, b, inside);
            a = b;
        }
        let inside = probe(2.0 * a + 1.0, &mut p);
        push_segment(&mut segs, a, f64::INFINITY, inside);
        segs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySegment {
    pub start: f64,
    pub end: f64,
    pub inside: bool,
}

fn push_segment(segs: &mut Vec<RaySegment>, a: f64, b: f64, inside: bool) {
    if let Some(last) = segs.last_mut() {
        if last.inside == inside {
            last.end = b;
            return;
        }
    }
    segs.push(RaySegment {
        start: a,
        end: b,
        inside,
    });
}
