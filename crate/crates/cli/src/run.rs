//! Execution of one configured run and the artifacts it leaves on disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use twofluid::closure::{closure_derivatives, omega_coefficients, phase_point, ClosureParams, PhasePoint};
use twofluid::diagnostics::{besov_proxy, e_t_proxy, fit_decay, xdot_density, xdot_norm, xnorm, DecayFit, NormReport};
use twofluid::grid::{DiffOps, Grid, Location, VectorField};
use twofluid::lagrangian::SimState;
use twofluid::linear_core::LinearCoeffs;
use twofluid::mms::{spatial_study, temporal_study, MmsError};
use twofluid::picard::{Checkpoint, IterationTrace, Linearization, Run, RunOutput};
use twofluid::spectra::{decay_spectrum, summarize, sweep_sector, ResolventParts, SectorSpec, SweepSummary};
use twofluid::Error;

use crate::config::{ConfigError, Mode, RunConfig, Shape};

/// Largest generator handled by the dense eigensolver inside `decay`.
const MAX_DENSE_GENERATOR: usize = 1500;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Core(Error),
    Io { path: PathBuf, message: String },
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Io { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Core(e)
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Core(Error::Parameter(_) | Error::Shape(_)) => EXIT_CONFIG,
            RunError::Core(e) if e.is_invariant_violation() => EXIT_INVARIANT,
            _ => EXIT_SOLVER,
        }
    }
}

/// Directory receiving the artifacts of a run: `--out` if given, otherwise
/// `output_dir` (or the mode name) under `$TWOFLUID_OUT` (or the working directory).
pub fn output_dir(cfg: &RunConfig, mode: Mode, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os(crate::OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    root.join(cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(mode.name())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Files written by a run, with their hashes for the manifest.
pub struct Artifacts {
    pub dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir).map_err(|e| RunError::Io { path: dir.to_path_buf(), message: e.to_string() })?;
        Ok(Self { dir: dir.to_path_buf(), files: vec![] })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| RunError::Io { path: path.clone(), message: e.to_string() })?;
        let hash = sha256_hex(bytes);
        match self.files.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = hash,
            None => self.files.push((name.to_string(), hash)),
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io { path: self.dir.join(name), message: e.to_string() })?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json`: config hash, versions, status and the hash of every file.
    pub fn manifest(&mut self, cfg: &RunConfig, mode: Mode, status: &str) -> Result<(), RunError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            mode: &'a str,
            status: &'a str,
            config_sha256: String,
            config: String,
            versions: Versions,
            files: Vec<FileEntry<'a>>,
        }
        #[derive(Serialize)]
        struct Versions {
            twofluid_cli: &'static str,
            twofluid_core: &'static str,
        }
        #[derive(Serialize)]
        struct FileEntry<'a> {
            name: &'a str,
            sha256: &'a str,
        }
        let canonical = cfg.canonical();
        let mut files: Vec<FileEntry> = self.files.iter().map(|(n, h)| FileEntry { name: n, sha256: h }).collect();
        files.sort_by(|a, b| a.name.cmp(b.name));
        let m = Manifest {
            mode: mode.name(),
            status,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: canonical.clone(),
            versions: Versions { twofluid_cli: env!("CARGO_PKG_VERSION"), twofluid_core: twofluid::VERSION },
            files,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| RunError::Io { path: self.dir.join("manifest.json"), message: e.to_string() })?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, text).map_err(|e| RunError::Io { path, message: e.to_string() })
    }
}

/// Grid described by the configuration.
pub fn build_grid(cfg: &RunConfig) -> Result<Grid, RunError> {
    Ok(if cfg.dim == 1 { Grid::interval(0.0, cfg.length, cfg.cells + 1)? } else { Grid::rectangle([0.0, 0.0], [cfg.length, cfg.length_y], cfg.cells + 1, cfg.cells_y + 1)? })
}

/// Perturbation profile in normalized coordinates, with values in `[-1, 1]`.
fn profile(cfg: &RunConfig) -> impl Fn([f64; 2]) -> f64 {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wx: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wy: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nx: f64 = wx.iter().map(|w| w.abs()).sum::<f64>().max(1e-12);
    let ny: f64 = wy.iter().map(|w| w.abs()).sum::<f64>().max(1e-12);
    let (shape, dim, lx, ly) = (cfg.shape, cfg.dim, cfg.length, cfg.length_y);
    move |c: [f64; 2]| {
        let x = c[0] / lx;
        let y = if dim == 2 { c[1] / ly } else { 0.0 };
        match shape {
            Shape::Constant => 0.0,
            Shape::Cos => (PI * x).cos() * if dim == 2 { (PI * y).cos() } else { 1.0 },
            Shape::Gauss => {
                let r2 = (x - 0.5).powi(2) + if dim == 2 { (y - 0.5).powi(2) } else { 0.0 };
                (-r2 / 0.02).exp()
            }
            Shape::Random => {
                let fx: f64 = wx.iter().enumerate().map(|(k, w)| w * ((k + 1) as f64 * PI * x).cos()).sum::<f64>() / nx;
                let fy: f64 = if dim == 2 { wy.iter().enumerate().map(|(k, w)| w * ((k + 1) as f64 * PI * y).cos()).sum::<f64>() / ny } else { 1.0 };
                fx * fy
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(ConfigError { line: None, key: None, message: format!("{}: {e}", path.display()) }))
}

/// Initial absolute state from the configuration or from `initial_file`.
pub fn initial_state(cfg: &RunConfig, grid: &Grid) -> Result<SimState, RunError> {
    use std::f64::consts::PI;
    if let Some(path) = &cfg.initial_file {
        let s: SimState = read_json(path)?;
        s.r.check(grid)?;
        s.q.check(grid)?;
        s.v.check(grid)?;
        return Ok(s);
    }
    let phi = profile(cfg);
    let r = grid.sample(Location::Cells, |c| cfg.r_star * (1.0 + cfg.amplitude * phi(c)));
    let q = grid.sample(Location::Cells, |c| cfg.q_star * (1.0 + cfg.q_amplitude * phi(c)));
    let (lx, ly, dim, a) = (cfg.length, cfg.length_y, cfg.dim, cfg.velocity_amplitude);
    let v = grid.sample_vector(true, |c| {
        let s = (PI * c[0] / lx).sin() * if dim == 2 { (PI * c[1] / ly).sin() } else { 1.0 };
        [a * s, if dim == 2 { a * s } else { 0.0 }]
    });
    Ok(SimState { r, q, v })
}

fn snapshot_csv(grid: &Grid, out: &RunOutput, every: usize) -> (String, String) {
    let d = grid.dim();
    let mut cells = String::from(if d == 1 { "step,t,cell,x,r,q\n" } else { "step,t,cell,x,y,r,q\n" });
    let mut nodes = String::from(if d == 1 { "step,t,node,x,v_0\n" } else { "step,t,node,x,y,v_0,v_1\n" });
    let last = out.states.len() - 1;
    for (step, (t, s)) in out.times.iter().zip(&out.states).enumerate() {
        if step % every != 0 && step != last {
            continue;
        }
        for c in 0..grid.n_cells() {
            let x = grid.cell_coord(c);
            let _ = write!(cells, "{step},{t:.16e},{c},{:.16e}", x[0]);
            if d == 2 {
                let _ = write!(cells, ",{:.16e}", x[1]);
            }
            let _ = writeln!(cells, ",{:.16e},{:.16e}", s.r.values[c], s.q.values[c]);
        }
        for n in 0..grid.n_nodes() {
            let x = grid.node_coord(n);
            let _ = write!(nodes, "{step},{t:.16e},{n},{:.16e}", x[0]);
            if d == 2 {
                let _ = write!(nodes, ",{:.16e}", x[1]);
            }
            for j in 0..d {
                let _ = write!(nodes, ",{:.16e}", s.v.values[n * d + j]);
            }
            nodes.push('\n');
        }
    }
    (cells, nodes)
}

fn traces_csv(traces: &[IterationTrace]) -> String {
    let mut s = String::from(IterationTrace::CSV_HEADER);
    for t in traces {
        s.push_str(&t.to_csv());
    }
    s
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    mode: &'static str,
    completed: bool,
    windows: usize,
    final_time: f64,
    horizon: f64,
    blow_up_time: Option<f64>,
    exponents_admissible: bool,
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct DecayCrossCheck {
    beta_fit: Option<DecayFit>,
    beta_hat: Option<f64>,
    relative_difference: Option<f64>,
}

/// Writes every flow artifact for the levels recorded so far.
fn write_flow_outputs(art: &mut Artifacts, cfg: &RunConfig, ops: &DiffOps, out: &RunOutput, mode: Linearization) -> Result<Option<DecayFit>, RunError> {
    let grid = &ops.grid;
    art.write("iterations.csv", traces_csv(&out.traces).as_bytes())?;
    if out.states.is_empty() {
        return Ok(None);
    }
    let (cells, nodes) = snapshot_csv(grid, out, cfg.snapshot_every);
    art.write("cells.csv", cells.as_bytes())?;
    art.write("nodes.csv", nodes.as_bytes())?;
    let (r_ref, q_ref) = match mode {
        Linearization::Local => (out.states[0].r.values.clone(), out.states[0].q.values.clone()),
        Linearization::Global { r_star, q_star } => (vec![r_star; grid.n_cells()], vec![q_star; grid.n_cells()]),
    };
    let traj = out.trajectory(&r_ref, &q_ref);
    let density = if traj.len() >= 2 { Some(xdot_density(ops, &traj, cfg.p, cfg.q)?) } else { None };
    let mut ts = String::from("step,t,grad_budget,mass_r,mass_q,xdot_density\n");
    for (i, t) in out.times.iter().enumerate() {
        let dens = density.as_ref().map(|d| format!("{:.16e}", d[i])).unwrap_or_default();
        let _ = writeln!(ts, "{i},{t:.16e},{:.16e},{:.16e},{:.16e},{dens}", out.budget[i], out.masses[i][0], out.masses[i][1]);
    }
    art.write("timeseries.csv", ts.as_bytes())?;
    let Some(density) = density else {
        return Ok(None);
    };
    let beta_fit = match mode {
        Linearization::Global { .. } => fit_decay(&traj.times, &density).ok(),
        Linearization::Local => None,
    };
    let x = xnorm(ops, &traj, cfg.p, cfg.q)?;
    let closure = out.closure.expect("recorded with the first level");
    let span = out.times.last().unwrap() - out.times[0];
    let report = NormReport {
        p: cfg.p,
        q: cfg.q,
        horizon: span,
        x_norm: x,
        xdot: xdot_norm(ops, &traj, cfg.p, cfg.q, 0.0)?,
        grad_budget: *out.budget.last().unwrap(),
        delta: cfg.delta,
        masses_initial: out.masses[0],
        masses_final: *out.masses.last().unwrap(),
        mass_drift: out.max_mass_drift(),
        alpha_range: [closure.alpha_min, closure.alpha_max],
        max_r_minus_z: closure.max_r_minus_z,
        beta_fit,
        e_t_proxy: e_t_proxy(&x, span, cfg.p),
        besov_v0: besov_proxy(ops, &out.states[0].v, cfg.p, cfg.q)?,
    };
    art.write_json("report.json", &report)?;
    Ok(beta_fit)
}

fn run_flow(cfg: &RunConfig, mode: Mode, art: &mut Artifacts) -> Result<(), RunError> {
    let grid = build_grid(cfg)?;
    let ops = DiffOps::new(&grid);
    let params = cfg.params();
    let lin = match mode {
        Mode::Local => Linearization::Local,
        _ => Linearization::Global { r_star: cfg.r_star, q_star: cfg.q_star },
    };
    let mut run = match &cfg.restart {
        Some(path) => {
            let ck: Checkpoint = read_json(path)?;
            ck.state.r.check(&grid)?;
            Run::resume(&ops, &params, cfg.picard(), lin, ck, cfg.horizon)?
        }
        None => Run::new(&ops, &params, cfg.picard(), lin, initial_state(cfg, &grid)?, cfg.horizon)?,
    };
    let mut windows = 0;
    let mut failure: Option<Error> = None;
    while !run.done() {
        match run.step_window() {
            Ok(_) => {
                windows += 1;
                art.write_json("checkpoint.json", &run.checkpoint)?;
                if cfg.max_windows.is_some_and(|m| windows >= m) {
                    break;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let beta_fit = write_flow_outputs(art, cfg, &ops, &run.output, lin)?;
    if mode == Mode::Global && failure.is_none() {
        let co = LinearCoeffs::around_constant(&ops, cfg.r_star, cfg.q_star, &params)?;
        let size = 2 * grid.n_cells() + grid.interior_nodes().len() * grid.dim();
        let beta_hat = if size <= MAX_DENSE_GENERATOR { Some(decay_spectrum(&ops, &co, &params)?.beta_hat) } else { None };
        let rel = match (beta_fit, beta_hat) {
            (Some(f), Some(b)) => Some((f.beta - b).abs() / b.abs()),
            _ => None,
        };
        art.write_json("decay.json", &DecayCrossCheck { beta_fit, beta_hat, relative_difference: rel })?;
    }
    let summary = RunSummary {
        mode: mode.name(),
        completed: failure.is_none() && run.done(),
        windows,
        final_time: run.checkpoint.time,
        horizon: cfg.horizon,
        blow_up_time: run.output.blow_up,
        exponents_admissible: cfg.picard().exponents_admissible(),
        error: failure.as_ref().map(|e| e.to_string()),
    };
    art.write_json("run.json", &summary)?;
    if let Some(t) = run.output.blow_up {
        eprintln!("warning: perturbation energy exceeded four times its initial value at t = {t}; data may not be small enough");
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosureReport {
    pub phase: PhasePoint,
    pub dz_dr: f64,
    pub dz_dq: f64,
    pub omega1: f64,
    pub omega2: f64,
}

pub fn closure_eval(r: f64, q: f64, params: &ClosureParams) -> Result<ClosureReport, Error> {
    let phase = phase_point(r, q, params)?;
    let (dz_dr, dz_dq) = closure_derivatives(phase.z, r, params)?;
    let (omega1, omega2) = omega_coefficients(phase.z, r, params)?;
    Ok(ClosureReport { phase, dz_dr, dz_dq, omega1, omega2 })
}

fn run_closure(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    let rep = closure_eval(cfg.closure_r, cfg.closure_q, &cfg.params())?;
    println!("{}", serde_json::to_string_pretty(&rep).expect("plain data"));
    art.write_json("closure.json", &rep)
}

fn run_mms(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    #[derive(Serialize)]
    struct MmsSummary {
        spatial_orders: Vec<f64>,
        temporal_orders: Vec<f64>,
    }
    let params = cfg.params();
    let (srows, sord) = spatial_study(params, &cfg.mms_cells)?;
    let (trows, tord) = temporal_study(params, cfg.mms_fine_cells, &cfg.mms_dts)?;
    let mut csv = String::from("study,cells,dt,err_v,err_density,order\n");
    let mut emit = |study: &str, rows: &[MmsError], orders: &[f64]| {
        for (i, r) in rows.iter().enumerate() {
            let order = if i == 0 { String::new() } else { format!("{:.16e}", orders[i - 1]) };
            let _ = writeln!(csv, "{study},{},{:.16e},{:.16e},{:.16e},{order}", r.cells, r.dt, r.err_v, r.err_density);
        }
    };
    emit("space", &srows, &sord);
    emit("time", &trows, &tord);
    art.write("mms.csv", csv.as_bytes())?;
    art.write_json("mms.json", &MmsSummary { spatial_orders: sord, temporal_orders: tord })
}

fn run_resolvent(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    #[derive(Serialize)]
    struct Summary {
        periodic: bool,
        epsilon: f64,
        lambda0: f64,
        sweep: SweepSummary,
    }
    let grid = build_grid(cfg)?;
    let ops = DiffOps::new(&grid);
    let params = cfg.params();
    let co = LinearCoeffs::around_constant(&ops, cfg.r_star, cfg.q_star, &params)?;
    let spec = SectorSpec::grid(cfg.sector_epsilon, cfg.sector_lambda0, cfg.sector_radius_max, cfg.sector_radii, cfg.sector_rays)?;
    let samples = if cfg.periodic {
        if cfg.dim != 1 {
            return Err(RunError::Config(ConfigError { line: None, key: Some("periodic".into()), message: "the periodic sweep is one-dimensional".into() }));
        }
        ResolventParts::periodic_1d(cfg.periodic_points, cfg.length / cfg.periodic_points as f64, &co, &params)?.sweep(&spec)?
    } else {
        sweep_sector(&ops, &co, &params, &spec)?
    };
    let mut csv = String::from("lambda_re,lambda_im,norm_j0,norm_j1,norm_j2,failed\n");
    for s in &samples {
        let _ = writeln!(csv, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}", s.lambda_re, s.lambda_im, s.norm_j0, s.norm_j1, s.norm_j2, s.failed);
    }
    art.write("resolvent.csv", csv.as_bytes())?;
    let sweep = summarize(&samples);
    if sweep.failed > 0 {
        eprintln!("warning: {} of {} resolvent samples failed", sweep.failed, sweep.samples);
    }
    art.write_json("resolvent_summary.json", &Summary { periodic: cfg.periodic, epsilon: cfg.sector_epsilon, lambda0: cfg.sector_lambda0, sweep })
}

fn run_spectrum(cfg: &RunConfig, art: &mut Artifacts) -> Result<(), RunError> {
    #[derive(Serialize)]
    struct Summary {
        beta_hat: f64,
        kernel: usize,
        eigenvalues: usize,
        warning: Option<String>,
    }
    let grid = build_grid(cfg)?;
    let ops = DiffOps::new(&grid);
    let params = cfg.params();
    let co = LinearCoeffs::around_constant(&ops, cfg.r_star, cfg.q_star, &params)?;
    let sp = decay_spectrum(&ops, &co, &params)?;
    let mut csv = String::from("re,im\n");
    for z in &sp.eigenvalues {
        let _ = writeln!(csv, "{:.16e},{:.16e}", z.re, z.im);
    }
    art.write("eigenvalues.csv", csv.as_bytes())?;
    if let Some(w) = &sp.warning {
        eprintln!("warning: {w}");
    }
    art.write_json("spectrum.json", &Summary { beta_hat: sp.beta_hat, kernel: sp.kernel, eigenvalues: sp.eigenvalues.len(), warning: sp.warning.clone() })
}

/// Executes the run and writes the manifest. On failure the artifacts written so far
/// stay in place next to `failure.json`.
pub fn run(cfg: &RunConfig, mode: Mode, dir: &Path) -> Result<PathBuf, RunError> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(RunError::Config(ConfigError { line: None, key: Some("mode".into()), message: format!("config is for `{}` but `{}` was requested", m.name(), mode.name()) }));
        }
    }
    let mut art = Artifacts::create(dir)?;
    let result = match mode {
        Mode::Local | Mode::Global => run_flow(cfg, mode, &mut art),
        Mode::Closure => run_closure(cfg, &mut art),
        Mode::Mms => run_mms(cfg, &mut art),
        Mode::Resolvent => run_resolvent(cfg, &mut art),
        Mode::DecaySpectrum => run_spectrum(cfg, &mut art),
    };
    match result {
        Ok(()) => {
            art.manifest(cfg, mode, "ok")?;
            Ok(art.dir)
        }
        Err(e) => {
            #[derive(Serialize)]
            struct Failure {
                exit_code: i32,
                error: String,
            }
            art.write_json("failure.json", &Failure { exit_code: e.exit_code(), error: e.to_string() })?;
            art.manifest(cfg, mode, "failed")?;
            Err(e)
        }
    }
}

/// Zero velocity field on the grid, for callers assembling states by hand.
pub fn zero_velocity(grid: &Grid) -> VectorField {
    VectorField::zeros(grid, true)
}
