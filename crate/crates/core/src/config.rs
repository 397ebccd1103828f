//! Pipeline configuration: one TOML tree with the Burgers study values as
//! defaults. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{ClusterCount, ClusterOptions, ClusterStrategy, CombinationSpec};
use crate::error::{Result, SromError};
use crate::fom::FomConfig;
use crate::latent::{log_grid, RankRule};
use crate::ode::OdeOptions;
use crate::opinf::GhatDictionary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FomSection {
    pub n_elements: usize,
    pub reynolds: f64,
    pub dt: f64,
    pub t_final: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub mu_list: Vec<f64>,
}

impl Default for FomSection {
    fn default() -> Self {
        let base = FomConfig::default();
        Self {
            n_elements: base.n_elements,
            reynolds: base.reynolds,
            dt: base.dt,
            t_final: base.t_final,
            newton_tol: base.newton_tol,
            newton_max_iter: base.newton_max_iter,
            mu_list: (0..9).map(|i| (4 + i) as f64 / 10.0).collect(),
        }
    }
}

impl FomSection {
    pub fn fom_config(&self, mu: f64) -> FomConfig {
        FomConfig {
            n_elements: self.n_elements,
            reynolds: self.reynolds,
            dt: self.dt,
            t_final: self.t_final,
            mu,
            newton_tol: self.newton_tol,
            newton_max_iter: self.newton_max_iter,
        }
    }
}

/// `"auto"` or a fixed integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for RankChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RankChoice::Auto => s.serialize_str("auto"),
            RankChoice::Fixed(r) => s.serialize_u64(*r as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RankChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match ClusterCount::deserialize(d)? {
            ClusterCount::Auto => RankChoice::Auto,
            ClusterCount::Fixed(r) => RankChoice::Fixed(r),
        })
    }
}

impl std::str::FromStr for RankChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.parse::<ClusterCount>()? {
            ClusterCount::Auto => RankChoice::Auto,
            ClusterCount::Fixed(r) => RankChoice::Fixed(r),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    pub r: RankChoice,
    pub q: usize,
    pub energy_threshold: f64,
    pub rule: RankRule,
}

impl Default for RankSection {
    fn default() -> Self {
        Self {
            r: RankChoice::Auto,
            q: 8,
            energy_threshold: 5e-2,
            rule: RankRule::AnyScenario,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpinfSection {
    /// Polynomial order of the manifold representation.
    pub p: usize,
    /// Degrees of the `g_hat` monomials; defaults to `3..=2p`.
    pub ghat_degrees: Option<Vec<usize>>,
    pub ghat_dictionary: GhatDictionary,
    pub gamma_grid: Vec<f64>,
    pub lambda1: Vec<f64>,
    /// Shared values of `lambda_2 = lambda_3`.
    pub lambda23: Vec<f64>,
    /// Explicit `(lambda_1, lambda_2, lambda_3)` grid; overrides the two lists.
    pub lambda_grid: Option<Vec<[f64; 3]>>,
    /// Candidates within this relative margin of the smallest training
    /// error compete on regularization strength; 0 selects the minimizer.
    pub selection_tolerance: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for OpinfSection {
    fn default() -> Self {
        Self {
            p: 2,
            ghat_degrees: None,
            ghat_dictionary: GhatDictionary::Elementwise,
            gamma_grid: log_grid(-6.0, 2.0, 9),
            lambda1: vec![1e-1, 1.0, 1e1, 1e2, 1e3],
            lambda23: vec![1e2, 1e3, 1e4, 1e5, 1e6],
            lambda_grid: None,
            selection_tolerance: 0.1,
            rtol: 1e-6,
            atol: 1e-9,
        }
    }
}

impl OpinfSection {
    pub fn grid(&self) -> Vec<[f64; 3]> {
        match &self.lambda_grid {
            Some(g) => g.clone(),
            None => self
                .lambda1
                .iter()
                .flat_map(|&a| self.lambda23.iter().map(move |&b| [a, b, b]))
                .collect(),
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.ghat_degrees.clone().unwrap_or_else(|| (3..=2 * self.p).collect())
    }

    pub fn ode(&self) -> OdeOptions {
        OdeOptions {
            rtol: self.rtol,
            atol: self.atol,
            ..OdeOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub strategy: ClusterStrategy,
    pub m: ClusterCount,
    pub seed: u64,
    pub restarts: usize,
    /// Allow fewer than three clusters (degenerate runs).
    pub allow_small_m: bool,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        Self {
            strategy: ClusterStrategy::SpectralEmbedKmeans,
            m: ClusterCount::Auto,
            seed: 0,
            restarts: 10,
            allow_small_m: false,
        }
    }
}

impl ClusteringSection {
    pub fn options(&self) -> ClusterOptions {
        ClusterOptions {
            strategy: self.strategy,
            count: self.m,
            seed: self.seed,
            restarts: self.restarts,
            allow_small_m: self.allow_small_m,
            ..ClusterOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub n_samples: usize,
    pub seed: u64,
    pub alpha_floor: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 2024,
            alpha_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationSection {
    pub test_mu: f64,
    pub t_final: f64,
    /// Keep every `output_stride`-th full-order time step.
    pub output_stride: usize,
    pub rtol: f64,
    pub atol: f64,
    pub confidence: f64,
    /// Time columns reconstructed at once when computing statistics.
    pub stats_block: usize,
}

impl Default for PropagationSection {
    fn default() -> Self {
        Self {
            test_mu: 1.0,
            t_final: 2.0,
            output_stride: 1,
            rtol: 1e-6,
            atol: 1e-9,
            confidence: 0.95,
            stats_block: 64,
        }
    }
}

impl PropagationSection {
    pub fn ode(&self) -> OdeOptions {
        OdeOptions {
            rtol: self.rtol,
            atol: self.atol,
            ..OdeOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fom: FomSection,
    pub scenarios: CombinationSpec,
    pub ranks: RankSection,
    pub opinf: OpinfSection,
    pub clustering: ClusteringSection,
    pub sampling: SamplingSection,
    pub propagation: PropagationSection,
}

fn bad(msg: impl Into<String>) -> SromError {
    SromError::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SromError::Config(msg) => bad(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SromError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fom;
        if f.mu_list.is_empty() {
            return Err(bad("fom.mu_list is empty"));
        }
        for mu in &f.mu_list {
            self.fom.fom_config(*mu).validate().map_err(|e| bad(e.to_string()))?;
        }
        self.scenarios
            .subsets(f.mu_list.len())
            .map_err(|e| bad(format!("scenarios: {e}")))?;
        let r = &self.ranks;
        if !(r.energy_threshold > 0.0 && r.energy_threshold < 1.0) {
            return Err(bad("ranks.energy_threshold must lie in (0, 1)"));
        }
        if r.r == RankChoice::Fixed(0) {
            return Err(bad("ranks.r must be positive"));
        }
        let o = &self.opinf;
        if o.p < 2 {
            return Err(bad("opinf.p must be at least 2"));
        }
        if o.degrees().iter().any(|&d| d < 3 || d > 2 * o.p) {
            return Err(bad(format!("opinf.ghat_degrees must lie in [3, {}]", 2 * o.p)));
        }
        if o.gamma_grid.is_empty() || o.gamma_grid.iter().any(|&g| !(g >= 0.0)) {
            return Err(bad("opinf.gamma_grid must be nonempty and nonnegative"));
        }
        let grid = o.grid();
        if grid.is_empty() || grid.iter().flatten().any(|&l| !(l >= 0.0)) {
            return Err(bad("opinf regularization grid must be nonempty and nonnegative"));
        }
        if !(o.selection_tolerance >= 0.0) {
            return Err(bad("opinf.selection_tolerance must be nonnegative"));
        }
        if !(o.rtol > 0.0 && o.atol > 0.0) {
            return Err(bad("opinf tolerances must be positive"));
        }
        if let ClusterCount::Fixed(m) = self.clustering.m {
            if m == 0 || (m < 3 && !self.clustering.allow_small_m) {
                return Err(bad("clustering.m must be at least 3"));
            }
        }
        let s = &self.sampling;
        if s.n_samples == 0 {
            return Err(bad("sampling.n_samples must be positive"));
        }
        if !(s.alpha_floor > 0.0 && s.alpha_floor < 0.1) {
            return Err(bad("sampling.alpha_floor must lie in (0, 0.1)"));
        }
        let p = &self.propagation;
        if !(p.t_final > 0.0) || p.output_stride == 0 || p.stats_block == 0 {
            return Err(bad("propagation.t_final, output_stride and stats_block must be positive"));
        }
        if !(p.confidence > 0.0 && p.confidence < 1.0) {
            return Err(bad("propagation.confidence must lie in (0, 1)"));
        }
        if !(p.rtol > 0.0 && p.atol > 0.0) {
            return Err(bad("propagation tolerances must be positive"));
        }
        Ok(())
    }

    /// Output times of the propagation stage.
    pub fn propagation_times(&self) -> Vec<f64> {
        let dt = self.fom.dt * self.propagation.output_stride as f64;
        let n = (self.propagation.t_final / dt).round() as usize;
        (0..=n).map(|i| i as f64 * dt).collect()
    }
}
