use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("fractional order s = {0} is outside (0, 1)")]
    Order(f64),

    #[error("geometry mismatch between operands")]
    GeometryMismatch,

    #[error("phase field still has {0} free cells")]
    Unresolved(usize),

    #[error("free region is empty")]
    EmptyFreeRegion,

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("{0}")]
    Domain(String),

    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
