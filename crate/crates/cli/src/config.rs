use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use vhj_core::bsde::{LadderConfig, RegressionConfig};
use vhj_core::dual::NuStarConfig;
use vhj_core::problem::{by_name, default_lq, kpz, lq, CustomConfig, ProblemSpec, ValidateConfig, KPZ_LAMBDA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Preset {
    Smoke,
    Acceptance,
    Deep,
}

impl Preset {
    /// `(n_paths, steps)`
    pub fn scale(self) -> (usize, usize) {
        match self {
            Preset::Smoke => (1_000, 20),
            Preset::Acceptance => (100_000, 50),
            Preset::Deep => (1_000_000, 100),
        }
    }

    /// Smoke runs stop at `n = 16`: a thousand paths cannot resolve larger `n`.
    pub fn schedule(self) -> Option<Vec<f64>> {
        match self {
            Preset::Smoke => Some(vec![1.0, 2.0, 4.0, 8.0, 16.0]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum OracleKind {
    ColeHopf,
    Riccati,
    Fd,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Forward,
    Ladder,
    Dual,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Horizon; the problem's own when absent.
    pub horizon: Option<f64>,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: None, steps: Preset::Smoke.scale().1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { n_paths: Preset::Smoke.scale().0, seed: 1, antithetic: false }
    }
}

/// Start state `(t, x, a)`; empty `x`/`a` mean the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
}

impl Default for EvalPoint {
    fn default() -> Self {
        Self { t: 0.0, x: Vec::new(), a: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    /// Penalization level of the sandwich; must be on the schedule.
    pub n: f64,
    /// Fresh paths for each trial; the Monte Carlo size when absent.
    pub n_paths: Option<usize>,
    pub nu_star: NuStarConfig,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { n: 16.0, n_paths: None, nu_star: NuStarConfig::default() }
    }
}

/// `|u_MC - u_oracle| <= max(abs, rel·|u_oracle|)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Finite-difference window half-width around each point.
    pub fd_half_width: f64,
    pub fd_nx: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { kind: OracleKind::None, abs_tol: 0.05, rel_tol: 0.05, fd_half_width: 3.0, fd_nx: 121 }
    }
}

/// Everything a run depends on. Written back, with every default filled in,
/// at the top of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registry name, or `custom` together with `custom_spec`.
    pub problem: String,
    pub custom_spec: Option<PathBuf>,
    pub preset: Preset,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub regression: RegressionConfig,
    pub ladder: LadderConfig,
    pub points: Vec<EvalPoint>,
    pub validation: ValidateConfig,
    pub dual: DualConfig,
    pub oracle: OracleConfig,
    pub stages: Vec<Stage>,
    pub out: PathBuf,
    /// Write each forward bundle as `paths_<i>.bin`.
    pub dump_paths: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "kpz".into(),
            custom_spec: None,
            preset: Preset::Smoke,
            grid: GridConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            regression: RegressionConfig::default(),
            ladder: LadderConfig::default(),
            points: Vec::new(),
            validation: ValidateConfig::default(),
            dual: DualConfig::default(),
            oracle: OracleConfig::default(),
            stages: vec![Stage::Validate, Stage::Forward, Stage::Ladder, Stage::Dual, Stage::Oracle],
            out: PathBuf::from("out"),
            dump_paths: false,
        }
    }
}

/// Command-line values layered over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub oracle: Option<OracleKind>,
    pub stages: Option<Vec<Stage>>,
    pub dump_paths: bool,
}

impl ExperimentConfig {
    /// Defaults, then the TOML file, then `ov`. The preset scale fills
    /// `n_paths`, `steps` and the smoke schedule unless the file sets them.
    pub fn load(file: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let (mut cfg, table) = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => (Self::default(), toml::Table::new()),
        };
        if let Some(p) = ov.preset {
            cfg.preset = p;
        }
        let (n_paths, steps) = cfg.preset.scale();
        let set = |section: &str, key: &str| table.get(section).and_then(|s| s.get(key)).is_some();
        if !set("monte_carlo", "n_paths") {
            cfg.monte_carlo.n_paths = n_paths;
        }
        if !set("grid", "steps") {
            cfg.grid.steps = steps;
        }
        if let (false, Some(s)) = (set("ladder", "schedule"), cfg.preset.schedule()) {
            cfg.ladder.schedule = s;
        }
        if let Some(v) = &ov.problem {
            cfg.problem = v.clone();
        }
        if let Some(v) = ov.seed {
            cfg.monte_carlo.seed = v;
        }
        if let Some(v) = &ov.out {
            cfg.out = v.clone();
        }
        if let Some(v) = ov.oracle {
            cfg.oracle.kind = v;
        }
        if let Some(v) = &ov.stages {
            cfg.stages = v.clone();
        }
        cfg.dump_paths |= ov.dump_paths;
        cfg.stages.sort();
        cfg.stages.dedup();
        cfg.check()?;
        Ok(cfg)
    }

    fn parse_toml(text: &str) -> Result<(Self, toml::Table)> {
        let table: toml::Table = text.parse()?;
        let cfg: Self = toml::from_str(text)?;
        Ok((cfg, table))
    }

    /// Rejections that need no problem instance.
    pub fn check(&self) -> Result<()> {
        if let Some(h) = self.grid.horizon {
            if !(h > 0.0 && h.is_finite()) {
                bail!("grid.horizon must be positive, got {h}");
            }
        }
        if self.grid.steps == 0 {
            bail!("grid.steps must be positive");
        }
        if self.monte_carlo.n_paths < 2 {
            bail!("monte_carlo.n_paths must be at least 2");
        }
        if self.preset != Preset::Smoke && self.monte_carlo.n_paths < 1_000 {
            bail!("{:?} runs need monte_carlo.n_paths >= 1000, got {}", self.preset, self.monte_carlo.n_paths);
        }
        if self.problem == "custom" && self.custom_spec.is_none() {
            bail!("problem = \"custom\" needs custom_spec");
        }
        if self.stages.contains(&Stage::Dual) && !self.ladder.schedule.contains(&self.dual.n) {
            bail!("dual.n = {} is not on the ladder schedule {:?}", self.dual.n, self.ladder.schedule);
        }
        self.regression.check()?;
        self.ladder.check()?;
        Ok(())
    }

    /// The problem instance with the configured horizon.
    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let spec = match self.problem.as_str() {
            "custom" => {
                let p = self.custom_spec.as_ref().expect("checked");
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let custom: CustomConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                custom.build()?
            }
            "kpz" => kpz(KPZ_LAMBDA, 1, self.grid.horizon.unwrap_or(1.0)),
            "lq" => lq(&vhj_core::problem::LqParams { horizon: self.grid.horizon.unwrap_or(1.0), ..default_lq() })?,
            name => by_name(name)?,
        };
        Ok(match self.grid.horizon {
            Some(h) => ProblemSpec { horizon: h, ..spec },
            None => spec,
        })
    }

    /// Points with the origin filled in, checked against the horizon.
    pub fn resolve_points(&mut self, spec: &ProblemSpec) -> Result<()> {
        self.grid.horizon = Some(spec.horizon);
        if self.points.is_empty() {
            self.points.push(EvalPoint::default());
        }
        for (i, p) in self.points.iter_mut().enumerate() {
            if p.x.is_empty() {
                p.x = vec![0.0; spec.dim];
            }
            if p.a.is_empty() {
                p.a = vec![0.0; spec.dim];
            }
            if p.x.len() != spec.dim || p.a.len() != spec.dim {
                bail!("points[{i}] has the wrong dimension for a {}-dimensional problem", spec.dim);
            }
            if !(p.t >= 0.0 && p.t < spec.horizon) {
                bail!("points[{i}].t = {} must lie in [0, {})", p.t, spec.horizon);
            }
        }
        Ok(())
    }
}
