//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown and repeated keys are errors,
//! as are values that fail to parse or violate a constraint; every error names the
//! line and key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use twofluid::closure::ClosureParams;
use twofluid::picard::PicardConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}, key `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "key `{k}`: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Local,
    Global,
    Resolvent,
    DecaySpectrum,
    Closure,
    Mms,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Global => "global",
            Mode::Resolvent => "resolvent",
            Mode::DecaySpectrum => "decay-spectrum",
            Mode::Closure => "closure",
            Mode::Mms => "mms",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "local" => Mode::Local,
            "global" => Mode::Global,
            "resolvent" => Mode::Resolvent,
            "decay-spectrum" => Mode::DecaySpectrum,
            "closure" => Mode::Closure,
            "mms" => Mode::Mms,
            _ => return None,
        })
    }
}

/// Spatial profile of the initial density perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Constant,
    Cos,
    Gauss,
    /// a few low cosine modes with seeded random weights
    Random,
}

impl Shape {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "constant" => Shape::Constant,
            "cos" => Shape::Cos,
            "gauss" => Shape::Gauss,
            "random" => Shape::Random,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Constant => "constant",
            Shape::Cos => "cos",
            Shape::Gauss => "gauss",
            Shape::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub mu: f64,
    pub nu: f64,
    pub dim: usize,
    pub cells: usize,
    pub cells_y: usize,
    pub length: f64,
    pub length_y: f64,
    pub r_star: f64,
    pub q_star: f64,
    pub amplitude: f64,
    pub q_amplitude: f64,
    pub velocity_amplitude: f64,
    pub shape: Shape,
    pub initial_file: Option<PathBuf>,
    pub dt: f64,
    pub window_t: f64,
    pub horizon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub ball_m: f64,
    pub delta: f64,
    pub p: f64,
    pub q: f64,
    pub lambda0: f64,
    pub sector_epsilon: f64,
    pub sector_lambda0: f64,
    pub sector_radius_max: f64,
    pub sector_radii: usize,
    pub sector_rays: usize,
    pub periodic: bool,
    pub periodic_points: usize,
    pub mms_cells: Vec<usize>,
    pub mms_fine_cells: usize,
    pub mms_dts: Vec<f64>,
    pub closure_r: f64,
    pub closure_q: f64,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub snapshot_every: usize,
    pub restart: Option<PathBuf>,
    pub max_windows: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: None,
            gamma_plus: 3.0,
            gamma_minus: 1.5,
            mu: 1.0,
            nu: 0.0,
            dim: 1,
            cells: 32,
            cells_y: 0,
            length: 1.0,
            length_y: 1.0,
            r_star: 1.0,
            q_star: 1.0,
            amplitude: 0.0,
            q_amplitude: f64::NAN,
            velocity_amplitude: 0.0,
            shape: Shape::Cos,
            initial_file: None,
            dt: 0.01,
            window_t: 0.1,
            horizon: 1.0,
            max_iter: 50,
            tol: 1e-10,
            ball_m: 1.0,
            delta: 0.1,
            p: 2.0,
            q: 2.0,
            lambda0: 1.0,
            sector_epsilon: std::f64::consts::FRAC_PI_4,
            sector_lambda0: 1.0,
            sector_radius_max: 1e4,
            sector_radii: 16,
            sector_rays: 9,
            periodic: false,
            periodic_points: 64,
            mms_cells: vec![16, 32, 64],
            mms_fine_cells: 128,
            mms_dts: vec![0.1, 0.05, 0.025],
            closure_r: 1.0,
            closure_q: 1.0,
            output_dir: None,
            seed: 0,
            snapshot_every: 10,
            restart: None,
            max_windows: None,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn boolean(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError { line: None, key: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    /// Parses and validates a configuration text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError { line: Some(line), key: None, message: format!("expected `key = value`, got `{content}`") });
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), line) {
                return Err(ConfigError { line: Some(line), key: Some(k.into()), message: format!("repeated key (first set on line {prev})") });
            }
            cfg.set(k, v).map_err(|message| ConfigError { line: Some(line), key: Some(k.into()), message })?;
        }
        cfg.finish().map_err(|(key, message)| ConfigError { line: seen.get(&key).copied(), key: Some(key), message })?;
        Ok(cfg)
    }

    /// Assigns one key. Returns a message on failure.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        let path = || -> Result<Option<PathBuf>, String> {
            if v.is_empty() {
                Err("empty path".into())
            } else {
                Ok(Some(PathBuf::from(v)))
            }
        };
        match k {
            "mode" => self.mode = Some(Mode::parse(v).ok_or_else(|| format!("unknown mode `{v}`"))?),
            "gamma_plus" => self.gamma_plus = num(v)?,
            "gamma_minus" => self.gamma_minus = num(v)?,
            "mu" => self.mu = num(v)?,
            "nu" => self.nu = num(v)?,
            "dim" => self.dim = num(v)?,
            "cells" => self.cells = num(v)?,
            "cells_y" => self.cells_y = num(v)?,
            "length" => self.length = num(v)?,
            "length_y" => self.length_y = num(v)?,
            "r_star" => self.r_star = num(v)?,
            "q_star" => self.q_star = num(v)?,
            "amplitude" => self.amplitude = num(v)?,
            "q_amplitude" => self.q_amplitude = num(v)?,
            "velocity_amplitude" => self.velocity_amplitude = num(v)?,
            "shape" => self.shape = Shape::parse(v).ok_or_else(|| format!("unknown shape `{v}` (constant, cos, gauss, random)"))?,
            "initial_file" => self.initial_file = path()?,
            "dt" => self.dt = num(v)?,
            "window_T" => self.window_t = num(v)?,
            "horizon" => self.horizon = num(v)?,
            "max_iter" => self.max_iter = num(v)?,
            "tol" => self.tol = num(v)?,
            "ball_M" => self.ball_m = num(v)?,
            "delta" => self.delta = num(v)?,
            "p" => self.p = num(v)?,
            "q" => self.q = num(v)?,
            "lambda0" => self.lambda0 = num(v)?,
            "sector_epsilon" => self.sector_epsilon = num(v)?,
            "sector_lambda0" => self.sector_lambda0 = num(v)?,
            "sector_radius_max" => self.sector_radius_max = num(v)?,
            "sector_radii" => self.sector_radii = num(v)?,
            "sector_rays" => self.sector_rays = num(v)?,
            "periodic" => self.periodic = boolean(v).ok_or_else(|| format!("expected true or false, got `{v}`"))?,
            "periodic_points" => self.periodic_points = num(v)?,
            "mms_cells" => self.mms_cells = list(v).ok_or_else(|| format!("expected a comma separated list of integers, got `{v}`"))?,
            "mms_fine_cells" => self.mms_fine_cells = num(v)?,
            "mms_dts" => self.mms_dts = list(v).ok_or_else(|| format!("expected a comma separated list of numbers, got `{v}`"))?,
            "closure_r" => self.closure_r = num(v)?,
            "closure_q" => self.closure_q = num(v)?,
            "output_dir" => self.output_dir = path()?,
            "seed" => self.seed = num(v)?,
            "snapshot_every" => self.snapshot_every = num(v)?,
            "restart" => self.restart = path()?,
            "max_windows" => self.max_windows = Some(num(v)?),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Fills derived defaults and checks constraints. Errors carry the offending key.
    pub fn finish(&mut self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        if self.cells_y == 0 {
            self.cells_y = self.cells;
        }
        if self.q_amplitude.is_nan() {
            self.q_amplitude = self.amplitude;
        }
        if let Err(e) = ClosureParams::new(self.gamma_plus, self.gamma_minus, self.mu, self.nu) {
            return err("gamma_plus", e.to_string());
        }
        if !matches!(self.dim, 1 | 2) {
            return err("dim", format!("must be 1 or 2, got {}", self.dim));
        }
        if self.cells < 2 {
            return err("cells", format!("need at least 2 cells, got {}", self.cells));
        }
        if self.dim == 2 && self.cells_y < 2 {
            return err("cells_y", format!("need at least 2 cells, got {}", self.cells_y));
        }
        for (k, v) in [("length", self.length), ("length_y", self.length_y), ("horizon", self.horizon), ("sector_lambda0", self.sector_lambda0)] {
            if !(v > 0.0) || !v.is_finite() {
                return err(k, format!("must be positive, got {v}"));
            }
        }
        for (k, v) in [("r_star", self.r_star), ("q_star", self.q_star)] {
            if !(v >= 0.0) || !v.is_finite() {
                return err(k, format!("must be non-negative, got {v}"));
            }
        }
        if self.r_star + self.q_star <= 0.0 {
            return err("r_star", "total density r_star + q_star must be positive".into());
        }
        for (k, v) in [("amplitude", self.amplitude), ("q_amplitude", self.q_amplitude)] {
            if !(v.abs() < 1.0) {
                return err(k, format!("relative density amplitude must lie in (-1, 1), got {v}"));
            }
        }
        if !self.velocity_amplitude.is_finite() {
            return err("velocity_amplitude", "must be finite".into());
        }
        if let Err(e) = self.picard().validate() {
            return err("dt", e.to_string());
        }
        if self.snapshot_every == 0 {
            return err("snapshot_every", "must be positive".into());
        }
        if !(self.sector_epsilon > 0.0 && self.sector_epsilon < std::f64::consts::FRAC_PI_2) {
            return err("sector_epsilon", format!("must lie in (0, pi/2), got {}", self.sector_epsilon));
        }
        if !(self.sector_radius_max >= self.sector_lambda0) {
            return err("sector_radius_max", "must be at least sector_lambda0".into());
        }
        if self.sector_radii < 2 || self.sector_rays < 2 {
            return err("sector_radii", "need at least 2 radii and 2 rays".into());
        }
        if self.periodic_points < 3 {
            return err("periodic_points", "need at least 3 points".into());
        }
        if self.mms_cells.len() < 2 || self.mms_cells.iter().any(|c| *c < 2) {
            return err("mms_cells", "need at least two grids of at least 2 cells".into());
        }
        if self.mms_dts.len() < 2 || self.mms_dts.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return err("mms_dts", "need at least two steps in (0, 1]".into());
        }
        if !(self.closure_r >= 0.0 && self.closure_q >= 0.0 && self.closure_r + self.closure_q > 0.0) {
            return err("closure_r", "need closure_r, closure_q >= 0 with positive sum".into());
        }
        if self.max_windows == Some(0) {
            return err("max_windows", "must be positive".into());
        }
        Ok(())
    }

    pub fn params(&self) -> ClosureParams {
        ClosureParams::new(self.gamma_plus, self.gamma_minus, self.mu, self.nu).expect("validated at load")
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            window_t: self.window_t,
            dt: self.dt,
            max_iter: self.max_iter,
            tol: self.tol,
            ball_m: self.ball_m,
            delta: self.delta,
            p: self.p,
            q: self.q,
            lambda0: self.lambda0,
        }
    }

    /// Canonical text of every setting, used for hashing. Floats use the shortest
    /// round-trip form.
    pub fn canonical(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |v: Vec<String>| v.join(",");
        let rows: Vec<(&str, String)> = vec![
            ("mode", self.mode.map(Mode::name).unwrap_or("").to_string()),
            ("gamma_plus", format!("{:?}", self.gamma_plus)),
            ("gamma_minus", format!("{:?}", self.gamma_minus)),
            ("mu", format!("{:?}", self.mu)),
            ("nu", format!("{:?}", self.nu)),
            ("dim", self.dim.to_string()),
            ("cells", self.cells.to_string()),
            ("cells_y", self.cells_y.to_string()),
            ("length", format!("{:?}", self.length)),
            ("length_y", format!("{:?}", self.length_y)),
            ("r_star", format!("{:?}", self.r_star)),
            ("q_star", format!("{:?}", self.q_star)),
            ("amplitude", format!("{:?}", self.amplitude)),
            ("q_amplitude", format!("{:?}", self.q_amplitude)),
            ("velocity_amplitude", format!("{:?}", self.velocity_amplitude)),
            ("shape", self.shape.name().to_string()),
            ("initial_file", opt(&self.initial_file)),
            ("dt", format!("{:?}", self.dt)),
            ("window_T", format!("{:?}", self.window_t)),
            ("horizon", format!("{:?}", self.horizon)),
            ("max_iter", self.max_iter.to_string()),
            ("tol", format!("{:?}", self.tol)),
            ("ball_M", format!("{:?}", self.ball_m)),
            ("delta", format!("{:?}", self.delta)),
            ("p", format!("{:?}", self.p)),
            ("q", format!("{:?}", self.q)),
            ("lambda0", format!("{:?}", self.lambda0)),
            ("sector_epsilon", format!("{:?}", self.sector_epsilon)),
            ("sector_lambda0", format!("{:?}", self.sector_lambda0)),
            ("sector_radius_max", format!("{:?}", self.sector_radius_max)),
            ("sector_radii", self.sector_radii.to_string()),
            ("sector_rays", self.sector_rays.to_string()),
            ("periodic", self.periodic.to_string()),
            ("periodic_points", self.periodic_points.to_string()),
            ("mms_cells", join(self.mms_cells.iter().map(|c| c.to_string()).collect())),
            ("mms_fine_cells", self.mms_fine_cells.to_string()),
            ("mms_dts", join(self.mms_dts.iter().map(|d| format!("{d:?}")).collect())),
            ("closure_r", format!("{:?}", self.closure_r)),
            ("closure_q", format!("{:?}", self.closure_q)),
            ("output_dir", opt(&self.output_dir)),
            ("seed", self.seed.to_string()),
            ("snapshot_every", self.snapshot_every.to_string()),
            ("restart", opt(&self.restart)),
            ("max_windows", self.max_windows.map(|m| m.to_string()).unwrap_or_default()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults() {
        let c = RunConfig::parse("# demo\ncells = 16\n dt=0.02 # inline\nshape = gauss\nmms_cells = 8, 16\n\nperiodic = yes\n").unwrap();
        assert_eq!(c.cells, 16);
        assert_eq!(c.cells_y, 16);
        assert_eq!(c.dt, 0.02);
        assert_eq!(c.shape, Shape::Gauss);
        assert_eq!(c.mms_cells, vec![8, 16]);
        assert!(c.periodic);
        assert_eq!(c.q_amplitude, c.amplitude);
    }

    #[test]
    fn errors_carry_context() {
        let e = RunConfig::parse("cells = 8\nbogus = 1\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(2), Some("bogus")));
        let e = RunConfig::parse("dt = abc").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(1), Some("dt")));
        let e = RunConfig::parse("cells = 8\ncells = 9").unwrap_err();
        assert!(e.message.contains("line 1"));
        let e = RunConfig::parse("no equals sign").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = RunConfig::parse("\n\ndim = 3").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(3), Some("dim")));
        let e = RunConfig::parse("gamma_plus = 0.5").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("gamma_plus"));
        assert!(RunConfig::parse("tol = 2\nball_M = 1").is_err());
        assert!(e.to_string().contains("gamma_plus"));
    }

    #[test]
    fn canonical_is_stable_and_discriminating() {
        let a = RunConfig::parse("cells = 8").unwrap();
        let b = RunConfig::parse("cells=8\n# comment").unwrap();
        let c = RunConfig::parse("cells = 9").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_ne!(a.canonical(), c.canonical());
    }
}
