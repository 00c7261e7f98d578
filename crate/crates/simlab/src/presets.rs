//! Bundled experiment configurations.

use crate::config::ExperimentSpec;
use crate::error::{Result, SimError};

const PRESETS: &[(&str, &str)] = &[
    ("table1_gaussian_homo", include_str!("../presets/table1_gaussian_homo.toml")),
    ("table1_uniform_homo", include_str!("../presets/table1_uniform_homo.toml")),
    ("table1_gaussian_hetero", include_str!("../presets/table1_gaussian_hetero.toml")),
    ("table1_laplace_hetero", include_str!("../presets/table1_laplace_hetero.toml")),
    ("table1_student_t_hetero", include_str!("../presets/table1_student_t_hetero.toml")),
    ("table2_gaussian_homo", include_str!("../presets/table2_gaussian_homo.toml")),
    ("table2_uniform_homo", include_str!("../presets/table2_uniform_homo.toml")),
    ("table2_gaussian_hetero", include_str!("../presets/table2_gaussian_hetero.toml")),
    ("table2_laplace_hetero", include_str!("../presets/table2_laplace_hetero.toml")),
    ("table2_student_t_hetero", include_str!("../presets/table2_student_t_hetero.toml")),
    ("logistic", include_str!("../presets/logistic.toml")),
    ("clt", include_str!("../presets/clt.toml")),
    ("equivalence", include_str!("../presets/equivalence.toml")),
    ("deviation_bound", include_str!("../presets/deviation_bound.toml")),
    ("variance_bound", include_str!("../presets/variance_bound.toml")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// TOML source of a bundled preset.
pub fn source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            SimError::config(format!(
                "unknown preset `{name}`; available: {}",
                names().join(", ")
            ))
        })
}

pub fn load(name: &str) -> Result<ExperimentSpec> {
    ExperimentSpec::from_toml_str(source(name)?)
}
