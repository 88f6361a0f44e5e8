//! The five commands.

use std::fmt::Write as _;
use std::path::Path;

use ricefield::data_io::{simulate_phantom, wls_initialize, Dataset, PhantomSpec};
use ricefield::design::{GradientScheme, ModelSpec};
use ricefield::diagnostics::{compute_dic, export_maps, export_profiles, map_values, MapKind, SphereMesh};
use ricefield::priors::VoxelGraph;
use ricefield::sampler::{initial_hyper, run_chain, ChainState, ChainSummary, Problem, TraceRow};

use crate::config::RunConfig;
use crate::draws::{read_draws, write_draws};
use crate::{io_err, CliError};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.tsv";
pub const DRAWS_FILE: &str = "draws.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIC_FILE: &str = "dic.json";
pub const ACCEPTANCE_FILE: &str = "acceptance.tsv";
pub const ABORT_FILE: &str = "abort.json";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| match e {
        ricefield::Error::Io(source) => CliError::File { path: path.display().to_string(), source },
        other => CliError::Core(other),
    })
}

pub fn load_summary(run: &Path) -> Result<ChainSummary, CliError> {
    let path = run.join(SUMMARY_FILE);
    serde_json::from_str(&read(&path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.simulate;
    let scheme = GradientScheme::shells(&s.shells)?;
    let phantom = PhantomSpec::crossing(s.sigma, s.quantize)?;
    let data = simulate_phantom(&phantom, &scheme, s.seed)?;
    data.save(&cfg.paths.data)?;
    let shells: Vec<String> = s.shells.iter().map(|b| format!("{b}")).collect();
    println!(
        "scheme: {} shells (b = {} s/mm^2) x {} directions = {} acquisitions",
        s.shells.len(),
        shells.join(", "),
        scheme.n_acquisitions() / s.shells.len(),
        scheme.n_acquisitions()
    );
    let [nx, ny, nz] = data.dims;
    println!(
        "phantom: {nx}x{ny}x{nz} voxels, sigma = {}{}, seed {} -> {}",
        s.sigma,
        s.quantize.map(|q| format!(", quantization step {q}")).unwrap_or_default(),
        s.seed,
        cfg.paths.data.display()
    );
    Ok(())
}

fn wls_state(cfg: &RunConfig, data: &Dataset, spec: &ModelSpec) -> Result<(ChainState, usize), CliError> {
    let init = wls_initialize(data, spec, cfg.init.b_max)?;
    let graph = data.graph()?;
    let hyper = match cfg.fixed_hyper()? {
        Some(h) => h,
        None => initial_hyper(spec, &init.theta, &graph)?,
    };
    let borrowed = init.borrowed.iter().filter(|&&b| b).count();
    Ok((ChainState { theta: init.theta, sigma2: init.sigma2, hyper, cycle: 0, rng_seed: cfg.sampler.seed }, borrowed))
}

pub fn init(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(&cfg.paths.data)?;
    let spec = cfg.model.spec();
    let (state, borrowed) = wls_state(cfg, &data, &spec)?;
    write(&cfg.paths.init, &serde_json::to_string_pretty(&state).expect("state serializes"))?;
    println!(
        "WLS initialization of {} voxels ({} borrowed from neighbours), b <= {} s/mm^2 -> {}",
        data.n_voxels(),
        borrowed,
        cfg.init.b_max,
        cfg.paths.init.display()
    );
    Ok(())
}

/// Table of posterior means and standard deviations of the hyperparameters.
pub fn hyper_table(summary: &ChainSummary) -> String {
    let mut out = String::from("Posterior mean and standard deviation of regularization parameters\n");
    let _ = writeln!(out, "{:<12}{:>14}{:>14}", "parameter", "mean", "sd");
    for ((name, m), s) in summary.hyper_names.iter().zip(&summary.hyper_mean).zip(&summary.hyper_sd) {
        let _ = writeln!(out, "{name:<12}{m:>14.6}{s:>14.6}");
    }
    out
}

fn trace_text(trace: &[TraceRow], names: &[String]) -> String {
    let mut out = String::from("cycle\tlog_likelihood\tlog_prior");
    for n in names {
        out += "\t";
        out += n;
    }
    out += "\tacceptance\n";
    for r in trace {
        let _ = write!(out, "{}\t{:?}\t{:?}", r.cycle, r.log_likelihood, r.log_prior);
        for h in &r.hyper {
            let _ = write!(out, "\t{h:?}");
        }
        let _ = writeln!(out, "\t{:?}", r.acceptance);
    }
    out
}

pub fn fit(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(&cfg.paths.data)?;
    let spec = cfg.model.spec();
    let mut state = if cfg.paths.init.exists() {
        let state: ChainState = serde_json::from_str(&read(&cfg.paths.init)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", cfg.paths.init.display())))?;
        state
    } else {
        wls_state(cfg, &data, &spec)?.0
    };
    if let Some(h) = cfg.fixed_hyper()? {
        state.hyper = h;
    }
    let problem = Problem::from_dataset(&data, spec)?;
    state.validate(&problem).map_err(|e| {
        CliError::Usage(format!("initial state does not fit the model or dataset: {e}"))
    })?;
    let sampler = cfg.sampler_config();
    sampler.validate()?;
    let run = &cfg.paths.run;
    std::fs::create_dir_all(run).map_err(io_err(run))?;
    write(&run.join(CONFIG_FILE), &cfg.to_toml())?;
    let out = match run_chain(&problem, state.clone(), &sampler) {
        Ok(o) => o,
        Err(e @ (ricefield::Error::Numeric(_) | ricefield::Error::Singular(_))) => {
            let dump = run.join(ABORT_FILE);
            let body = serde_json::json!({ "error": e.to_string(), "initial_state": state });
            write(&dump, &serde_json::to_string_pretty(&body).expect("dump serializes"))?;
            return Err(CliError::Abort { msg: e.to_string(), dump: dump.display().to_string() });
        }
        Err(e) => return Err(e.into()),
    };
    let s = &out.summary;
    write(&run.join(SUMMARY_FILE), &serde_json::to_string_pretty(s).expect("summary serializes"))?;
    write(&run.join(TRACE_FILE), &trace_text(&out.trace, &s.hyper_names))?;
    write_draws(&out.draws, &run.join(DRAWS_FILE))?;
    println!(
        "{} cycles, burn-in {}, {} retained draws, {} skipped blocks -> {}",
        s.cycles,
        s.burn_in,
        s.n_samples,
        s.skipped_blocks,
        run.display()
    );
    if !s.hyper_names.is_empty() {
        print!("{}", hyper_table(s));
    }
    Ok(())
}

/// Counts of voxel acceptance rates in ten equal bins over [0, 1].
pub fn acceptance_histogram(rates: &[f64]) -> [usize; 10] {
    let mut h = [0; 10];
    for &r in rates {
        h[((r * 10.0).floor() as usize).min(9)] += 1;
    }
    h
}

pub fn diagnose(cfg: &RunConfig) -> Result<(), CliError> {
    let run = &cfg.paths.run;
    let summary = load_summary(run)?;
    let draws = read_draws(&run.join(DRAWS_FILE))?;
    if draws.theta.len() < 2 {
        return Err(CliError::Usage(format!(
            "DIC needs at least 2 retained post-burn-in draws; the run in {} has {} (cycles {}, burn-in {}, thin {})",
            run.display(),
            draws.theta.len(),
            summary.cycles,
            summary.burn_in,
            cfg.sampler.thin
        )));
    }
    let data = load_dataset(&cfg.paths.data)?;
    let problem = Problem::from_dataset(&data, summary.spec)?;
    let dic = compute_dic(&problem, &draws)?;
    write(&run.join(DIC_FILE), &serde_json::to_string_pretty(&dic).expect("report serializes"))?;
    println!("DIC {:?}", dic.dic);
    println!("effective number of parameters {:?}", dic.n_eff);
    println!("mean deviance {:?}", dic.mean_deviance);
    println!("deviance at posterior mean {:?}", dic.deviance_at_mean);
    let hist = acceptance_histogram(&summary.acceptance);
    let mut table = String::from("lower\tupper\tvoxels\n");
    println!("acceptance rate histogram (voxels per bin)");
    for (k, n) in hist.iter().enumerate() {
        let (lo, hi) = (k as f64 / 10.0, (k + 1) as f64 / 10.0);
        let _ = writeln!(table, "{lo:.1}\t{hi:.1}\t{n}");
        println!("  [{lo:.1}, {hi:.1}) {n}");
    }
    write(&run.join(ACCEPTANCE_FILE), &table)
}

pub fn export(cfg: &RunConfig) -> Result<(), CliError> {
    let summary = load_summary(&cfg.paths.run)?;
    let data = load_dataset(&cfg.paths.data)?;
    let graph = VoxelGraph::from_mask(data.dims, &data.mask)?;
    let dir = &cfg.paths.export;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut images = 0;
    for kind in MapKind::ALL {
        match map_values(&summary, kind) {
            Ok(values) => images += export_maps(&values, &graph, kind, dir, "map")?.len(),
            Err(ricefield::Error::NotApplicable(m)) => log::warn!("skipping {} map: {m}", kind.name()),
            Err(e) => return Err(e.into()),
        }
    }
    let mesh = SphereMesh::icosphere(2);
    export_profiles(&summary.theta_mean, summary.p, &summary.spec, &graph, &mesh, &dir.join("profiles"))?;
    println!("{images} images, map tables and profiles ({} mesh vertices) -> {}", mesh.vertices.len(), dir.display());
    Ok(())
}
