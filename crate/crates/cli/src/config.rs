//! Experiment configuration: a flat TOML file with named sections.
//!
//! Physical parameters carry no defaults; tolerances and solver options do.
//! The config hash covers the parsed structure, so formatting and comments
//! do not change it.

use anyhow::{bail, Context, Result};
use bspde_core::coeffs::node_noise;
use bspde_core::tree::{AdaptedField, Measurability};
use bspde_core::{
    CoefficientSet, GammaTerm, Grid, InitialLaw, McModel, NonlocalCondition, OperatorForm, Profile,
    ScenarioTree, SolveMethod, TargetSpace, TimeWeights,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub discretization: DiscretizationSection,
    pub coefficients: CoefficientSection,
    pub condition: ConditionSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub mc: McSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    /// Time steps.
    pub m: usize,
    /// Driving Brownian components.
    pub n_brownian: usize,
    /// Interior grid points.
    pub j: usize,
    pub horizon: f64,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub form: FormSpec,
    pub b: ProfileSpec,
    pub drift: ProfileSpec,
    pub lambda: ProfileSpec,
    pub beta: Vec<ProfileSpec>,
    pub beta_bar: Vec<ProfileSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum FormSpec {
    Divergence,
    NonDivergence,
}

impl From<FormSpec> for OperatorForm {
    fn from(f: FormSpec) -> Self {
        match f {
            FormSpec::Divergence => OperatorForm::Divergence,
            FormSpec::NonDivergence => OperatorForm::NonDivergence,
        }
    }
}

/// Named coefficient presets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant {
        value: f64,
    },
    Smooth {
        base: f64,
        amp: f64,
        freq: f64,
        #[serde(default)]
        rate: f64,
    },
    NodeRandom {
        base: f64,
        amp: f64,
        seed: u64,
    },
}

impl From<&ProfileSpec> for Profile {
    fn from(spec: &ProfileSpec) -> Self {
        match *spec {
            ProfileSpec::Constant { value } => Profile::Constant(value),
            ProfileSpec::Smooth {
                base,
                amp,
                freq,
                rate,
            } => Profile::Smooth {
                base,
                amp,
                freq,
                rate,
            },
            ProfileSpec::NodeRandom { base, amp, seed } => Profile::NodeRandom { base, amp, seed },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSection {
    pub target: TargetSpec,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub point_times: Vec<PointTimeSpec>,
    /// Constant time-kernel weight k0; omit for none.
    #[serde(default)]
    pub k0: Option<f64>,
    pub xi: FieldSpec,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSpec {
    F0,
    Ft,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointTimeSpec {
    pub time: f64,
    pub weight: f64,
}

/// Grid-field presets for xi, phi and rho.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Sine {
        amp: f64,
        #[serde(default = "one")]
        freq: f64,
    },
    Random {
        seed: u64,
        amp: f64,
    },
    Uniform,
    DeltaCenter,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub method: MethodSpec,
    pub node_budget: u64,
    pub max_q_dim: usize,
    pub boundary_tol: f64,
    pub phi: FieldSpec,
    /// Adapted-noise amplitude added to phi when phi is `random`.
    pub eps_flag_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: MethodSpec::Direct,
            node_budget: 1 << 20,
            max_q_dim: 4096,
            boundary_tol: 1e-9,
            phi: FieldSpec::Zero,
            eps_flag_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    Direct,
    Neumann,
}

impl From<MethodSpec> for SolveMethod {
    fn from(m: MethodSpec) -> Self {
        match m {
            MethodSpec::Direct => SolveMethod::Direct,
            MethodSpec::Neumann => SolveMethod::Neumann,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub start: StartSpec,
    pub dump_paths: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            seed: 42,
            start: StartSpec::Center,
            dump_paths: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum StartSpec {
    Center,
    Point { x: f64 },
    Sine,
    Uniform,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.discretization;
        if d.m < 1 || d.j < 3 || d.n_brownian < 1 {
            bail!("discretization requires m >= 1, j >= 3, n_brownian >= 1");
        }
        if !(d.horizon > 0.0) || !(d.x_max > d.x_min) {
            bail!("discretization requires horizon > 0 and x_max > x_min");
        }
        if self.coefficients.beta.len() != d.n_brownian
            || self.coefficients.beta_bar.len() != d.n_brownian
        {
            bail!(
                "need exactly n_brownian = {} beta and beta_bar presets",
                d.n_brownian
            );
        }
        if !(self.solver.boundary_tol > 0.0) || !(self.solver.eps_flag_tol > 0.0) {
            bail!("tolerances must be positive");
        }
        if self.condition.kappa.is_none()
            && self.condition.point_times.is_empty()
            && self.condition.k0.is_none()
        {
            bail!("the condition needs at least one term (kappa, point_times or k0)");
        }
        if !(self.mc.dt > 0.0) || self.mc.n_paths == 0 {
            bail!("mc requires dt > 0 and n_paths >= 1");
        }
        Ok(())
    }

    /// Hex digest of the parsed configuration (canonical field order).
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn tree(&self) -> bspde_core::Result<ScenarioTree> {
        ScenarioTree::with_budget(
            self.discretization.m,
            self.discretization.n_brownian,
            self.discretization.horizon,
            self.solver.node_budget as u128,
        )
    }

    pub fn grid(&self) -> bspde_core::Result<Grid> {
        Grid::new(
            self.discretization.x_min,
            self.discretization.x_max,
            self.discretization.j,
        )
    }

    pub fn coefficient_set(
        &self,
        tree: &ScenarioTree,
        grid: &Grid,
    ) -> bspde_core::Result<CoefficientSet> {
        let c = &self.coefficients;
        let beta: Vec<Profile> = c.beta.iter().map(Profile::from).collect();
        let beta_bar: Vec<Profile> = c.beta_bar.iter().map(Profile::from).collect();
        CoefficientSet::from_profiles(
            tree,
            grid,
            tree.depth(),
            c.form.into(),
            &Profile::from(&c.b),
            &Profile::from(&c.drift),
            &Profile::from(&c.lambda),
            &beta,
            &beta_bar,
        )
    }

    pub fn condition(&self) -> NonlocalCondition {
        let mut terms = Vec::new();
        if let Some(kappa) = self.condition.kappa {
            terms.push(GammaTerm::ScaledInitial { kappa });
        }
        for pt in &self.condition.point_times {
            terms.push(GammaTerm::PointTime {
                time: pt.time,
                weight: pt.weight,
                kernel: None,
            });
        }
        if let Some(k0) = self.condition.k0 {
            terms.push(GammaTerm::TimeKernel {
                k0: TimeWeights::Constant(k0),
            });
        }
        NonlocalCondition {
            terms,
            target: match self.condition.target {
                TargetSpec::F0 => TargetSpace::F0,
                TargetSpec::Ft => TargetSpace::FT,
            },
        }
    }

    /// Deterministic grid field from a preset (xi, rho).
    pub fn grid_field(&self, grid: &Grid, spec: &FieldSpec, seed_shift: u64) -> Vec<f64> {
        match spec {
            FieldSpec::Zero => vec![0.0; grid.len()],
            FieldSpec::Sine { amp, freq } => (0..grid.len())
                .map(|j| {
                    let xi = (grid.x(j) - grid.x_min()) / (grid.x_max() - grid.x_min());
                    amp * (std::f64::consts::PI * freq * xi).sin()
                })
                .collect(),
            FieldSpec::Random { seed, amp } => (0..grid.len())
                .map(|j| amp * node_noise(seed.wrapping_add(seed_shift), j, 0))
                .collect(),
            FieldSpec::Uniform => {
                let v = 1.0 / (grid.x_max() - grid.x_min());
                vec![v; grid.len()]
            }
            FieldSpec::DeltaCenter => {
                let mut v = vec![0.0; grid.len()];
                v[grid.len() / 2] = 1.0 / grid.h();
                v
            }
        }
    }

    /// Source field phi from the solver preset; `None` when zero.
    pub fn phi_field(
        &self,
        tree: &ScenarioTree,
        grid: &Grid,
        seed_shift: u64,
    ) -> Option<AdaptedField> {
        match &self.solver.phi {
            FieldSpec::Zero => None,
            FieldSpec::Random { seed, amp } => {
                let s = seed.wrapping_add(seed_shift);
                let amp = *amp;
                Some(AdaptedField::from_fn(
                    tree,
                    tree.depth(),
                    grid.len(),
                    Measurability::Adapted,
                    move |t, node, j| amp * node_noise(s, t * 7919 + j, node),
                ))
            }
            other => {
                let vals = self.grid_field(grid, other, seed_shift);
                Some(AdaptedField::from_fn(
                    tree,
                    tree.depth(),
                    grid.len(),
                    Measurability::Deterministic,
                    move |_, _, j| vals[j],
                ))
            }
        }
    }

    pub fn mc_model(&self) -> bspde_core::Result<McModel> {
        let c = &self.coefficients;
        McModel::new(
            self.discretization.x_min,
            self.discretization.x_max,
            self.discretization.horizon,
            Profile::from(&c.b),
            Profile::from(&c.drift),
            Profile::from(&c.lambda),
            c.beta.iter().map(Profile::from).collect(),
            c.beta_bar.iter().map(Profile::from).collect(),
        )
    }

    pub fn mc_start(&self) -> InitialLaw {
        match self.mc.start {
            StartSpec::Center => {
                InitialLaw::Point(0.5 * (self.discretization.x_min + self.discretization.x_max))
            }
            StartSpec::Point { x } => InitialLaw::Point(x),
            StartSpec::Sine => InitialLaw::SineDensity,
            StartSpec::Uniform => InitialLaw::Uniform,
        }
    }
}
