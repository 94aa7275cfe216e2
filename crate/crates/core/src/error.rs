use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} out of range (T = {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("unsupported reward kind for {op}: {kind}")]
    UnsupportedReward { op: &'static str, kind: String },

    #[error("fit diverged: {0}")]
    FitDiverged(String),

    #[error("particle collapse at timestep {t}: {forced} of {m} advances were forced")]
    ParticleCollapse { t: usize, forced: usize, m: usize },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("artifact format: {0}")]
    ArtifactFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
