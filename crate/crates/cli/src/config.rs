//! TOML run configuration. Unknown keys are rejected; every default is
//! filled in so the resolved config can be echoed into the report.

use std::sync::Arc;

use mingraph::analytic::{ExprField, SharedField};
use mingraph::continuation::NewtonOptions;
use mingraph::domain::DomainSpec;
use mingraph::flow::FlowConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flow,
    Continuation,
    Conditions,
    Lemmas,
    Nonexistence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Ball { dim: usize, radius: f64 },
    RoundedBox { half_widths: Vec<f64>, corner: f64 },
    Ellipsoid { axes: Vec<f64> },
    CatenoidNeck { neck_radius: f64, half_length: f64 },
    /// `level` is negative inside.
    CustomLevelSet { dim: usize, level: String, bbox_half_width: f64 },
}

impl DomainConfig {
    pub fn dim(&self) -> usize {
        match self {
            Self::Ball { dim, .. } | Self::CustomLevelSet { dim, .. } => *dim,
            Self::RoundedBox { half_widths, .. } => half_widths.len(),
            Self::Ellipsoid { axes } => axes.len(),
            Self::CatenoidNeck { .. } => 3,
        }
    }

    pub fn build(&self) -> Result<DomainSpec, String> {
        let r = match self {
            Self::Ball { dim, radius } => DomainSpec::ball(*dim, *radius),
            Self::RoundedBox { half_widths, corner } => DomainSpec::rounded_box(half_widths, *corner),
            Self::Ellipsoid { axes } => DomainSpec::ellipsoid(axes),
            Self::CatenoidNeck { neck_radius, half_length } => DomainSpec::catenoid_neck(*neck_radius, *half_length),
            Self::CustomLevelSet { dim, level, bbox_half_width } => {
                let f = ExprField::parse(level, *dim).map_err(|e| format!("level set '{level}': {e}"))?;
                DomainSpec::custom(Arc::new(f), *bbox_half_width)
            }
        };
        r.map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// One expression per component; the last one is the large component φ.
    pub components: Vec<String>,
}

impl DataConfig {
    pub fn fields(&self, dim: usize) -> Result<Vec<SharedField>, String> {
        self.components
            .iter()
            .map(|s| {
                ExprField::parse(s, dim).map(|f| Arc::new(f) as SharedField).map_err(|e| format!("expression '{s}': {e}"))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Band over which λ₋ of the distance Hessian is taken.
    pub band_width: f64,
    /// Overrides the measured λ₋.
    pub lambda_minus: Option<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { band_width: 0.1, lambda_minus: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionsConfig {
    pub beta0: f64,
    pub safety: f64,
}

impl Default for ConditionsConfig {
    fn default() -> Self {
        Self { beta0: 4.0, safety: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub steps: usize,
    pub t_min_step: f64,
    /// Check `min Θ > 1/Ψ`, `sup det g < Ψ` along the path.
    pub psi_monitor: bool,
    pub track_lambda_star: bool,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self { steps: 10, t_min_step: 1.0 / 1024.0, psi_monitor: true, track_lambda_star: false }
    }
}

/// Post-solve experiments on the final field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub lambda_star: bool,
    /// Random variations for the stability margin; 0 skips it.
    pub margin_samples: usize,
    /// Newton restarts of the uniqueness probe; 0 skips it.
    pub uniqueness_trials: usize,
    /// Perturbation size relative to `sup |u|`.
    pub uniqueness_scale: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self { lambda_star: false, margin_samples: 0, uniqueness_trials: 0, uniqueness_scale: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaConfig {
    pub trials: u64,
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    /// `K` of the gradient lemma.
    pub k: f64,
    /// Hill-climb evaluations per case; 0 skips the search.
    pub tightness_budget: u64,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self { trials: 100_000, n: vec![2, 3, 4], m: vec![1, 2, 3], k: 1.0, tightness_budget: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonexistenceConfig {
    pub eps: f64,
    pub margin: f64,
    /// Replaces the peak by this multiple of the threshold.
    pub peak_scale: Option<f64>,
    /// Also run the data with the peak at 0.1 × threshold.
    pub contrast: bool,
}

impl Default for NonexistenceConfig {
    fn default() -> Self {
        Self { eps: 1.0, margin: 1.0, peak_scale: None, contrast: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Binary dump of the final field.
    pub dump_field: bool,
    /// CSV of the final field next to the dump.
    pub field_csv: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must agree with the subcommand when present.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub conditions: ConditionsConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub newton: NewtonOptions,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub lemmas: LemmaConfig,
    #[serde(default)]
    pub nonexistence: NonexistenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A configuration problem, with the 1-based line it points at.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "config error at line {l}: {}", self.message),
            None => write!(f, "config error: {}", self.message),
        }
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Errors inside tagged tables are reported at the table header; move them
/// to the first line after it that mentions the token quoted in the message.
fn refine(src: &str, start: usize, message: &str) -> usize {
    let token = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .or_else(|| message.split('"').nth(1).map(|t| format!("\"{t}\"")));
    let header = src[start..].trim_start().starts_with('[');
    match token {
        Some(t) if header && !t.is_empty() => match src[start..].find(&t) {
            Some(o) => line_of(src, start + o),
            None => line_of(src, start),
        },
        _ => line_of(src, start),
    }
}

/// Line of the first occurrence of `needle`, if any.
pub fn find_line(src: &str, needle: &str) -> Option<usize> {
    src.find(needle).map(|o| line_of(src, o))
}

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| {
            let message = e.message().to_string();
            let line = e.span().map(|s| refine(src, s.start, &message));
            ConfigError { line, message }
        })
    }

    pub fn require_domain(&self, src: &str) -> Result<(DomainSpec, f64), ConfigError> {
        let d = self.domain.as_ref().ok_or(ConfigError { line: None, message: "missing [domain] table".into() })?;
        let spec = d.build().map_err(|message| ConfigError { line: find_line(src, "[domain]"), message })?;
        let h = self.h.ok_or(ConfigError { line: None, message: "missing grid spacing h".into() })?;
        if !(h > 0.0) {
            return Err(ConfigError { line: find_line(src, "h ="), message: format!("h = {h} must be positive") });
        }
        Ok((spec, h))
    }

    pub fn require_data(&self, src: &str, dim: usize) -> Result<Vec<SharedField>, ConfigError> {
        let d = self.data.as_ref().ok_or(ConfigError { line: None, message: "missing [data] table".into() })?;
        if d.components.is_empty() {
            return Err(ConfigError { line: find_line(src, "components"), message: "no data components".into() });
        }
        d.fields(dim).map_err(|message| {
            let line = d
                .components
                .iter()
                .find(|c| ExprField::parse(c, dim).is_err())
                .and_then(|c| find_line(src, c.as_str()));
            ConfigError { line, message }
        })
    }
}
