use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dualfilt::bsde::{
    self, lsmc_backward_solve, solve_and_evaluate, EvaluationOptions, PathEnsemble, Policy, RegressionSpec,
};
use dualfilt::deterministic::{optimize_deterministic_control, verify_duality_principle, DeterministicControl};
use dualfilt::filters::{kalman_trajectory, wonham_trajectory, zakai_trajectory};
use dualfilt::hmm::{forward_marginal, simulate_path, ObservationPath};
use dualfilt::io;
use dualfilt::lq::{
    min_energy_objective, mitter_newton_lg_decompose, simulate_lg_path, solve_kalman_dre,
    solve_min_energy_dual, solve_min_variance_dual, LGModel,
};
use dualfilt::rng::{path_stream, StreamRole};
use dualfilt::{Error, FiniteModel, Result, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::args::*;
use crate::report::{hash_input, InputFile};

const MAX_STEPS: usize = 1_000_000;
const MAX_PATHS: usize = 10_000_000;

pub struct Outcome {
    pub inputs: Vec<InputFile>,
    pub result: Value,
}

struct Ctx<'a> {
    global: &'a GlobalArgs,
    inputs: Vec<InputFile>,
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

impl Ctx<'_> {
    fn grid(&self) -> Result<TimeGrid> {
        let g = self.global;
        if g.steps > MAX_STEPS {
            return Err(Error::InvalidArgument(format!("steps {} above {MAX_STEPS}", g.steps)));
        }
        TimeGrid::new(g.horizon, g.steps)
    }

    fn paths(&self) -> Result<usize> {
        let n = self.global.paths;
        if n == 0 || n > MAX_PATHS {
            return Err(Error::InvalidArgument(format!("paths must be in 1..={MAX_PATHS}, got {n}")));
        }
        Ok(n)
    }

    fn read_input(&mut self, role: &'static str, path: &Path) -> Result<String> {
        let text = io::read_text(path)?;
        self.inputs.push(hash_input(role, path, text.as_bytes()));
        Ok(text)
    }

    fn config_text(&mut self) -> Result<String> {
        let path: PathBuf = self
            .global
            .config
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
        self.read_input("config", &path)
    }

    fn finite_model(&mut self) -> Result<FiniteModel> {
        let text = self.config_text()?;
        io::parse_finite_model(&text)
    }

    fn lg_model(&mut self) -> Result<LGModel> {
        let text = self.config_text()?;
        io::parse_lg_model(&text)
    }

    /// Observation path from `--obs`, or simulated with the given sampler.
    fn observations(
        &mut self,
        args: &ObservationArgs,
        simulate: impl FnOnce(&TimeGrid) -> ObservationPath,
    ) -> Result<(TimeGrid, ObservationPath)> {
        match &args.obs {
            Some(path) => {
                let text = self.read_input("observations", path)?;
                io::read_observation_csv(text.as_bytes())
            }
            None => {
                let grid = self.grid()?;
                let obs = simulate(&grid);
                Ok((grid, obs))
            }
        }
    }
}

fn terminal_for(model_dim: usize, text: &str) -> Result<DVector<f64>> {
    let f = io::parse_vector(text)?;
    if f.len() != model_dim {
        return Err(Error::DimensionMismatch {
            what: "terminal function",
            expected: model_dim,
            got: f.len(),
        });
    }
    Ok(f)
}

fn finite_sampler(model: &FiniteModel, seed: u64, path: u64) -> impl FnOnce(&TimeGrid) -> ObservationPath + '_ {
    move |grid| {
        let mut rng = path_stream(seed, StreamRole::Simulation, path);
        simulate_path(model, grid, &mut rng).1
    }
}

fn lg_sampler(lg: &LGModel, seed: u64, path: u64) -> impl FnOnce(&TimeGrid) -> ObservationPath + '_ {
    move |grid| {
        let mut rng = path_stream(seed, StreamRole::Simulation, path);
        simulate_lg_path(lg, grid, &mut rng).1
    }
}

pub fn run(global: &GlobalArgs, command: &Command) -> Result<Outcome> {
    let mut ctx = Ctx {
        global,
        inputs: Vec::new(),
    };
    let result = match command {
        Command::Model(ModelCommand::Validate { kind }) => validate(&mut ctx, *kind)?,
        Command::Simulate(args) => simulate(&mut ctx, args)?,
        Command::Filter(FilterCommand::Wonham(args)) => filter_wonham(&mut ctx, args)?,
        Command::Filter(FilterCommand::Kalman(args)) => filter_kalman(&mut ctx, args)?,
        Command::Dual(DualCommand::DetCheck { terminal, control }) => det_check(&mut ctx, &terminal.terminal, control)?,
        Command::Dual(DualCommand::DetOpt { terminal, csv }) => det_opt(&mut ctx, &terminal.terminal, csv.as_deref())?,
        Command::Dual(DualCommand::Lq { terminal }) => dual_lq(&mut ctx, terminal)?,
        Command::Dual(DualCommand::Mee(args)) => dual_mee(&mut ctx, args)?,
        Command::Dual(DualCommand::MnCompare(args)) => mn_compare(&mut ctx, args)?,
        Command::Bsde(BsdeCommand::Solve { bsde, csv, csv_paths }) => {
            bsde_solve(&mut ctx, bsde, csv.as_deref(), *csv_paths)?
        }
        Command::Bsde(BsdeCommand::Gap(args)) => bsde_gap(&mut ctx, args)?,
        Command::Bsde(BsdeCommand::Martingale(args)) => bsde_martingale(&mut ctx, args)?,
        Command::Bsde(BsdeCommand::Prop1(args)) => bsde_prop1(&mut ctx, args)?,
    };
    Ok(Outcome {
        inputs: ctx.inputs,
        result,
    })
}

fn validate(ctx: &mut Ctx, kind: ModelKind) -> Result<Value> {
    Ok(match kind {
        ModelKind::Finite => {
            let model = ctx.finite_model()?;
            json!({
                "valid": true,
                "kind": "finite",
                "d": model.d(),
                "m": model.m(),
                "model": to_json(&io::FiniteModelFile::from_model(&model)),
            })
        }
        ModelKind::Lg => {
            let lg = ctx.lg_model()?;
            json!({
                "valid": true,
                "kind": "lg",
                "d": lg.d(),
                "m": lg.m(),
                "p": lg.p(),
                "model": to_json(&io::LGModelFile::from_model(&lg)),
            })
        }
    })
}

fn simulate(ctx: &mut Ctx, args: &SimulateArgs) -> Result<Value> {
    let model = ctx.finite_model()?;
    let grid = ctx.grid()?;
    let mut rng = path_stream(ctx.global.seed, StreamRole::Simulation, args.path);
    let (x, z) = simulate_path(&model, &grid, &mut rng);
    if let Some(csv) = &args.csv {
        io::write_observation_csv(create(csv)?, &grid, &z)?;
    }
    let k = grid.steps();
    Ok(json!({
        "path": args.path,
        "jump_times": x.jump_times,
        "states": x.states,
        "terminal_state": x.terminal_state(),
        "z_terminal": z.cumulative.row(k).iter().copied().collect::<Vec<_>>(),
        "terminal_marginal": vec_json(&forward_marginal(&model, grid.horizon())?),
    }))
}

fn filter_wonham(ctx: &mut Ctx, args: &ObservationArgs) -> Result<Value> {
    let model = ctx.finite_model()?;
    let (grid, z) = ctx.observations(args, finite_sampler(&model, ctx.global.seed, args.path))?;
    let w = wonham_trajectory(&model, &z, grid.dt())?;
    let zk = zakai_trajectory(&model, &z, grid.dt())?;
    if let Some(csv) = &args.csv {
        io::write_filter_csv(create(csv)?, &grid, &w)?;
    }
    let last = w.last().expect("trajectory includes the prior");
    let zlast = zk.last().expect("trajectory includes the prior");
    let gap = w
        .iter()
        .zip(&zk)
        .map(|(a, b)| (&a.pi - b.normalized()).amax())
        .fold(0.0, f64::max);
    Ok(json!({
        "steps": grid.steps(),
        "dt": grid.dt(),
        "pi_terminal": vec_json(&last.pi),
        "clip_events": last.clip_events,
        "zakai_terminal_normalized": vec_json(&zlast.normalized()),
        "zakai_terminal_log_norm": zlast.log_norm,
        "zakai_wonham_sup_discrepancy": gap,
    }))
}

fn filter_kalman(ctx: &mut Ctx, args: &ObservationArgs) -> Result<Value> {
    let lg = ctx.lg_model()?;
    let (grid, z) = ctx.observations(args, lg_sampler(&lg, ctx.global.seed, args.path))?;
    let traj = kalman_trajectory(&lg, &z, grid.dt())?;
    if let Some(csv) = &args.csv {
        io::write_kalman_csv(create(csv)?, &grid, &traj)?;
    }
    let last = traj.last().expect("trajectory includes the prior");
    Ok(json!({
        "steps": grid.steps(),
        "mean_terminal": vec_json(&last.mean),
        "cov_terminal": mat_json(&last.cov),
    }))
}

fn det_check(ctx: &mut Ctx, terminal: &str, control: &str) -> Result<Value> {
    let model = ctx.finite_model()?;
    let f = terminal_for(model.d(), terminal)?;
    let grid = ctx.grid()?;
    let value = io::parse_vector(control)?;
    if value.len() != model.m() {
        return Err(Error::DimensionMismatch {
            what: "control",
            expected: model.m(),
            got: value.len(),
        });
    }
    let u = DeterministicControl::constant(&grid, value.as_slice());
    let report = verify_duality_principle(&model, &f, &u, &grid, ctx.paths()?, ctx.global.seed)?;
    Ok(to_json(&report))
}

fn det_opt(ctx: &mut Ctx, terminal: &str, csv: Option<&Path>) -> Result<Value> {
    let model = ctx.finite_model()?;
    let f = terminal_for(model.d(), terminal)?;
    let grid = ctx.grid()?;
    let best = optimize_deterministic_control(&model, &f, &grid)?;
    if let Some(path) = csv {
        let mut w = create(path)?;
        use std::io::Write;
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=model.m()).map(|c| format!("u_{c}")))
            .collect();
        let io_err = |e: std::io::Error| Error::Io(e.to_string());
        writeln!(w, "{}", header.join(",")).map_err(io_err)?;
        for k in 0..grid.steps() {
            let row: Vec<String> = best.control.u.row(k).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{:e},{}", grid.time(k), row.join(",")).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    Ok(json!({
        "cost": to_json(&best.report),
        "iterations": best.iterations,
        "grad_norm": best.grad_norm,
        "control_first": best.control.u.row(0).iter().copied().collect::<Vec<_>>(),
        "control_last": best.control.u.row(grid.steps() - 1).iter().copied().collect::<Vec<_>>(),
    }))
}

fn dual_lq(ctx: &mut Ctx, terminal: &str) -> Result<Value> {
    let lg = ctx.lg_model()?;
    let f = terminal_for(lg.d(), terminal)?;
    let grid = ctx.grid()?;
    let sol = solve_min_variance_dual(&lg, &f, &grid)?;
    Ok(json!({
        "value": sol.value,
        "terminal_variance": sol.terminal_variance,
        "certificate_residual": sol.certificate_residual(),
        "y0": vec_json(&sol.y[0]),
        "u0": vec_json(&sol.u[0]),
    }))
}

fn dual_mee(ctx: &mut Ctx, args: &ObservationArgs) -> Result<Value> {
    let lg = ctx.lg_model()?;
    let (grid, z) = ctx.observations(args, lg_sampler(&lg, ctx.global.seed, args.path))?;
    let me = solve_min_energy_dual(&lg, &z, &grid)?;
    let kal = kalman_trajectory(&lg, &z, grid.dt())?;
    let m_t = me.m_tilde.last().expect("trajectory includes the start");
    let kal_t = &kal.last().expect("trajectory includes the prior").mean;
    if let Some(csv) = &args.csv {
        let states: Vec<_> = me
            .m_tilde
            .iter()
            .zip(&kal)
            .map(|(m, k)| dualfilt::filters::KalmanState {
                mean: m.clone(),
                cov: k.cov.clone(),
            })
            .collect();
        io::write_kalman_csv(create(csv)?, &grid, &states)?;
    }
    Ok(json!({
        "objective": me.value,
        "m_tilde_0": vec_json(&me.m_tilde_0),
        "m_tilde_terminal": vec_json(m_t),
        "kalman_mean_terminal": vec_json(kal_t),
        "terminal_discrepancy": (m_t - kal_t).amax(),
    }))
}

fn mn_compare(ctx: &mut Ctx, args: &ObservationArgs) -> Result<Value> {
    let lg = ctx.lg_model()?;
    let (grid, z) = ctx.observations(args, lg_sampler(&lg, ctx.global.seed, args.path))?;
    let me = solve_min_energy_dual(&lg, &z, &grid)?;
    let (d, p, k) = (lg.d(), lg.p(), grid.steps());
    // the Kalman-type gain `-σᵀΣ⁻¹`, and no feedback at all
    let covs = solve_kalman_dre(&lg, &grid)?;
    let kalman_gains = covs[..k]
        .iter()
        .map(|s| {
            s.clone()
                .try_inverse()
                .map(|inv| -(lg.sigma.transpose() * inv))
                .ok_or_else(|| Error::SolverFailure("singular filter covariance".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let zero_gains = vec![DMatrix::zeros(p, d); k];
    let a = mitter_newton_lg_decompose(&lg, &z, &me.m_tilde_0, &me.u, &zero_gains, &grid)?;
    let b = mitter_newton_lg_decompose(&lg, &z, &me.m_tilde_0, &me.u, &kalman_gains, &grid)?;
    let objective = min_energy_objective(&lg, &z, &me.m_tilde_0, &me.u, &grid)?;
    Ok(json!({
        "objective": objective,
        "half_objective": 0.5 * objective,
        "zero_gain": {"j1": a.j1, "j2": a.j2},
        "kalman_gain": {"j1": b.j1, "j2": b.j2},
        "j1_bit_identical": a.j1.to_bits() == b.j1.to_bits(),
    }))
}

struct BsdeSetup {
    model: FiniteModel,
    f: DVector<f64>,
    policy: Policy,
    grid: TimeGrid,
    spec: RegressionSpec,
    paths: usize,
}

fn bsde_setup(ctx: &mut Ctx, args: &BsdeArgs) -> Result<BsdeSetup> {
    let model = ctx.finite_model()?;
    let f = terminal_for(model.d(), &args.terminal.terminal)?;
    let spec = RegressionSpec {
        degree: args.degree,
        ridge: args.ridge,
    };
    spec.validate()?;
    let policy = match args.delta {
        Some(delta) => Policy::Perturbed { delta },
        None => Policy::Optimal,
    };
    Ok(BsdeSetup {
        model,
        f,
        policy,
        grid: ctx.grid()?,
        spec,
        paths: ctx.paths()?,
    })
}

fn bsde_solve(ctx: &mut Ctx, args: &BsdeArgs, csv: Option<&Path>, csv_paths: usize) -> Result<Value> {
    let s = bsde_setup(ctx, args)?;
    let seed = ctx.global.seed;
    let ensemble = PathEnsemble::simulate(&s.model, &s.grid, s.paths, seed, StreamRole::Training, false)?;
    let traj = lsmc_backward_solve(&s.model, &s.f, &s.policy, &ensemble, &s.spec)?;
    if let Some(path) = csv {
        let ids: Vec<usize> = (0..csv_paths.min(s.paths)).collect();
        io::write_dual_trajectory_csv(create(path)?, &traj, &ensemble, &ids)?;
    }
    drop(ensemble);
    let mut start = traj.new_value();
    traj.eval(0, s.model.prior.as_slice(), &mut start);
    let eval = bsde::evaluate_trajectory(&s.model, &traj, s.paths, seed, EvaluationOptions::default())?;
    Ok(json!({
        "policy": to_json(&s.policy),
        "y0": start.y,
        "u0": start.u,
        "v0": start.v,
        "evaluation": to_json(&eval.gap),
    }))
}

fn bsde_gap(ctx: &mut Ctx, args: &BsdeArgs) -> Result<Value> {
    let s = bsde_setup(ctx, args)?;
    let report = bsde::duality_gap_report(&s.model, &s.f, &s.policy, &s.grid, s.paths, ctx.global.seed, &s.spec)?;
    Ok(json!({ "policy": to_json(&s.policy), "gap": to_json(&report) }))
}

fn bsde_martingale(ctx: &mut Ctx, args: &BsdeArgs) -> Result<Value> {
    let s = bsde_setup(ctx, args)?;
    let report = bsde::martingale_drift_check(&s.model, &s.f, &s.policy, &s.grid, s.paths, ctx.global.seed, &s.spec)?;
    let beyond: Vec<usize> = report
        .increments
        .iter()
        .enumerate()
        .filter(|(_, m)| m.z_score(0.0).abs() > 3.0)
        .map(|(k, _)| k)
        .collect();
    Ok(json!({
        "policy": to_json(&s.policy),
        "martingale": to_json(&report),
        "steps_beyond_3se": beyond,
    }))
}

fn bsde_prop1(ctx: &mut Ctx, args: &BsdeArgs) -> Result<Value> {
    let s = bsde_setup(ctx, args)?;
    if args.delta.is_some() {
        return Err(Error::InvalidArgument("prop1 runs the optimal policy only".into()));
    }
    let (_, eval) = solve_and_evaluate(
        &s.model,
        &s.f,
        &s.policy,
        &s.grid,
        s.paths,
        ctx.global.seed,
        &s.spec,
        EvaluationOptions {
            martingale: false,
            prop1: true,
        },
    )?;
    Ok(json!({
        "prop1": to_json(&eval.prop1),
        "gap": to_json(&eval.gap),
    }))
}
