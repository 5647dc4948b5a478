//! Run configuration: a single TOML file.
//!
//! ```toml
//! s = 0.5
//! dim = 2
//! h = 0.03125
//! seed = 1                      # optional, defaults to DEFAULT_SEED
//!
//! [box]
//! lower = [-1.0, -1.0]
//! upper = [1.0, 1.0]
//!
//! [set]                         # prescribed set, also the data outside the box
//! kind = "halfplane"            # halfplane | wedge | ball | interval | mask | shape
//! normal = [0.0, 1.0]           # {x·normal <= offset}
//! offset = 0.0
//!
//! [free]                        # free region Ω: none | all | ball | box
//! kind = "ball"
//! radius = 0.5
//!
//! [minimize]                    # command sections, all optional
//! cutoff = 0.25
//! ```
//!
//! Relative mask paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::Failure;
use crate::grid::{cells_in_ball, CellSet, GridGeometry, Label, PhaseField};
use crate::io::read_mask;
use crate::kernel::FractionalOrder;
use crate::shape::Shape;

pub const DEFAULT_SEED: u64 = 1;
/// Largest grid the CLI accepts, in cells.
pub const MAX_CELLS: usize = 1 << 22;
pub const MAX_STEPS: usize = 100_000;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub s: f64,
    pub dim: Option<usize>,
    pub h: Option<f64>,
    #[serde(rename = "box")]
    pub bounds: Option<BoxSpec>,
    pub set: Option<SetSpec>,
    pub free: Option<FreeSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub minimize: MinimizeParams,
    #[serde(default)]
    pub curvature: CurvatureParams,
    #[serde(default)]
    pub flow: FlowParams,
    #[serde(default)]
    pub phi: PhiParams,
    #[serde(default)]
    pub cones: ConeParams,
    #[serde(default)]
    pub product: ProductParams,
    #[serde(default)]
    pub verify: VerifyParams,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Outside {
    In,
    #[default]
    Out,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    Halfplane {
        /// Defaults to the last coordinate axis.
        normal: Option<Vec<f64>>,
        #[serde(default)]
        offset: f64,
    },
    Wedge {
        opening: f64,
        #[serde(default)]
        start: f64,
    },
    Ball {
        radius: f64,
        center: Option<Vec<f64>>,
    },
    Interval {
        a: f64,
        b: f64,
    },
    Mask {
        path: PathBuf,
        #[serde(default)]
        outside: Outside,
    },
    Shape {
        shape: Shape,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FreeSpec {
    #[default]
    None,
    All,
    Ball {
        radius: f64,
        center: Option<Vec<f64>>,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    /// Also evaluate the complement field.
    #[serde(default = "yes")]
    pub complement: bool,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeParams {
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub dump: bool,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureParams {
    /// Excision radius in cells.
    pub delta_cells: Option<f64>,
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    /// Reference values for `points`.
    #[serde(default)]
    pub expected: Vec<f64>,
    pub rel_tol: Option<f64>,
    /// Minimize first and evaluate on the minimizer.
    #[serde(default)]
    pub minimize: bool,
    pub cutoff: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FlowExpect {
    #[default]
    None,
    Fixed,
    Shrinking,
    Extinction,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    /// Kernel length scale; the step time is `ell^s`.
    pub ell: Option<f64>,
    pub steps: Option<usize>,
    pub frames: Option<usize>,
    #[serde(default)]
    pub expect: FlowExpect,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PhiCheck {
    #[default]
    Auto,
    None,
    Monotone,
    Constant,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiParams {
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub minimize: bool,
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub check: PhiCheck,
    pub rel_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeParams {
    /// Openings in radians; π is the half-plane and is always evaluated.
    #[serde(default)]
    pub openings: Vec<f64>,
    pub r_eval: Option<f64>,
    #[serde(default)]
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductParams {
    pub rows: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    /// Random instances per randomized check.
    pub instances: Option<usize>,
    /// Skip the flow scaling runs.
    #[serde(default)]
    pub skip_flow_scaling: bool,
}

fn yes() -> bool {
    true
}

fn schema(msg: impl Into<String>) -> Failure {
    Failure::Schema(msg.into())
}

/// Grid, prescribed data and free region built from a validated config.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub geometry: GridGeometry,
    pub order: FractionalOrder,
    /// Rasterized prescribed set on every cell.
    pub set: CellSet,
    pub exterior: Shape,
    pub free: CellSet,
}

impl Scenario {
    /// The prescribed set with Ω recorded but every cell resolved.
    pub fn rasterized(&self) -> PhaseField {
        let labels = self.set.bits().iter().map(|&b| if b { Label::In } else { Label::Out }).collect();
        PhaseField::from_labels(&self.geometry, labels, &self.free, Some(self.exterior.clone()))
            .expect("labels are resolved")
    }

    pub fn problem(&self) -> PhaseField {
        self.rasterized().unresolved()
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| schema(e.to_string()))?;
        cfg.order()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text)?, dir))
    }

    pub fn order(&self) -> Result<FractionalOrder, Failure> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(schema(format!("s = {} violates the bound 0 < s < 1", self.s)));
        }
        FractionalOrder::new(self.s).map_err(|e| schema(e.to_string()))
    }

    fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, Failure> {
        value.as_ref().ok_or_else(|| schema(format!("missing key `{key}`")))
    }

    pub fn geometry(&self) -> Result<GridGeometry, Failure> {
        let dim = *Self::require(&self.dim, "dim")?;
        if !(1..=3).contains(&dim) {
            return Err(schema(format!("dim = {dim} violates 1 <= dim <= 3")));
        }
        let h = *Self::require(&self.h, "h")?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(schema(format!("h = {h} violates h > 0")));
        }
        let b = Self::require(&self.bounds, "box")?;
        if b.lower.len() != dim || b.upper.len() != dim {
            return Err(schema(format!("box corners need {dim} coordinates")));
        }
        let mut extent = Vec::with_capacity(dim);
        for k in 0..dim {
            let cells = (b.upper[k] - b.lower[k]) / h;
            let rounded = cells.round();
            if !(rounded >= 1.0 && (cells - rounded).abs() < 1e-9 * rounded.max(1.0)) {
                return Err(schema(format!("box side {k} is not a positive multiple of h")));
            }
            extent.push(rounded as usize);
        }
        let total = extent.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        match total {
            Some(n) if n <= MAX_CELLS => {}
            _ => return Err(Failure::Cap(format!("grid {extent:?} exceeds {MAX_CELLS} cells"))),
        }
        GridGeometry::new(&b.lower, &extent, h).map_err(|e| schema(e.to_string()))
    }

    fn point(&self, p: &Option<Vec<f64>>, dim: usize, key: &str) -> Result<Vec<f64>, Failure> {
        match p {
            None => Ok(vec![0.0; dim]),
            Some(v) if v.len() == dim => Ok(v.clone()),
            Some(_) => Err(schema(format!("{key} needs {dim} coordinates"))),
        }
    }

    pub fn scenario(&self, dir: &Path) -> Result<Scenario, Failure> {
        let order = self.order()?;
        let geometry = self.geometry()?;
        let dim = geometry.dim();
        let spec = Self::require(&self.set, "set")?;
        let shape = |shape: Shape| -> Scenario {
            Scenario {
                set: CellSet::from_shape(&geometry, &shape),
                geometry: geometry.clone(),
                order,
                exterior: shape,
                free: CellSet::empty(&geometry),
            }
        };
        let mut sc = match spec {
            SetSpec::Halfplane { normal, offset } => {
                let normal = match normal {
                    None => {
                        let mut n = vec![0.0; dim];
                        n[dim - 1] = 1.0;
                        n
                    }
                    Some(n) if n.len() == dim && n.iter().any(|v| *v != 0.0) => n.clone(),
                    Some(_) => return Err(schema(format!("set.normal needs {dim} coordinates, not all zero"))),
                };
                shape(Shape::HalfSpace { normal, offset: *offset })
            }
            SetSpec::Wedge { opening, start } => {
                if dim != 2 {
                    return Err(schema("wedges need dim = 2"));
                }
                if !(*opening > 0.0 && *opening < std::f64::consts::TAU) {
                    return Err(schema(format!("set.opening = {opening} violates 0 < opening < 2π")));
                }
                shape(Shape::Wedge {
                    start: *start,
                    opening: *opening,
                })
            }
            SetSpec::Ball { radius, center } => {
                if !(*radius > 0.0) {
                    return Err(schema(format!("set.radius = {radius} violates radius > 0")));
                }
                shape(Shape::Ball {
                    center: self.point(center, dim, "set.center")?,
                    radius: *radius,
                })
            }
            SetSpec::Interval { a, b } => {
                if dim != 1 {
                    return Err(schema("intervals need dim = 1"));
                }
                if !(a < b) {
                    return Err(schema(format!("set interval [{a}, {b}] violates a < b")));
                }
                shape(Shape::interval(*a, *b))
            }
            SetSpec::Mask { path, outside } => {
                let full = if path.is_absolute() { path.clone() } else { dir.join(path) };
                let set = read_mask(&geometry, &full).map_err(|e| schema(format!("mask {}: {e}", full.display())))?;
                Scenario {
                    set,
                    geometry: geometry.clone(),
                    order,
                    exterior: if *outside == Outside::In { Shape::Full } else { Shape::Empty },
                    free: CellSet::empty(&geometry),
                }
            }
            SetSpec::Shape { shape: s } => shape(s.clone()),
        };
        sc.free = match self.free.clone().unwrap_or_default() {
            FreeSpec::None => CellSet::empty(&geometry),
            FreeSpec::All => CellSet::full(&geometry),
            FreeSpec::Ball { radius, center } => {
                if !(radius > 0.0) {
                    return Err(schema(format!("free.radius = {radius} violates radius > 0")));
                }
                cells_in_ball(&geometry, &self.point(&center, dim, "free.center")?, radius)
            }
            FreeSpec::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(schema(format!("free box corners need {dim} coordinates")));
                }
                CellSet::from_fn(&geometry, |i| {
                    let c = geometry.center(i);
                    (0..dim).all(|k| c[k] >= lower[k] && c[k] <= upper[k])
                })
            }
        };
        Ok(sc)
    }
}

/// Positive, strictly increasing.
pub fn check_radii(radii: &[f64], key: &str) -> Result<(), Failure> {
    if radii.is_empty() {
        return Err(schema(format!("{key} is empty")));
    }
    if radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(schema(format!("{key} must be positive and sorted increasing")));
    }
    Ok(())
}
