use thiserror::Error;

/// Violations of model invariants detected while building or stepping a model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },
    #[error("density {density} veh/m exceeds jam density {jam} veh/m at {location}")]
    DensityAboveJam {
        location: String,
        density: f64,
        jam: f64,
    },
    #[error("negative state value {value} at {location}")]
    NegativeState { location: String, value: f64 },
    #[error("accumulation {accumulation} veh exceeds jam accumulation {jam} veh in subregion {region}")]
    AccumulationAboveJam {
        region: usize,
        accumulation: f64,
        jam: f64,
    },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

impl ModelError {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ModelError::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Errors raised while loading or validating a scenario file.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unit error in `{field}`: {reason}")]
    Unit { field: String, reason: String },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ScenarioError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
