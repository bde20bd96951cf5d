use std::io::Write;
use std::path::{Path, PathBuf};

use clicktomo::bench::{extrapolate, run_scaling, write_records_csv, ScalingFits, ScalingOptions, WeightScheme};
use clicktomo::detector::{exact_povm, simulate_coherent_probe, simulate_thermal, MAX_EXACT_PIXELS};
use clicktomo::metrics::{poisson_pnd, thermal_pnd, MetricReport};
use clicktomo::probe::build_probe_matrix;
use clicktomo::reconstruction::{eme_reconstruct, lambda_sweep, write_lambda_sweep_csv, LabeledStatistics};
use clicktomo::tomography::{dark_count_probability, gamma_sweep, povm_relative_error, solve};
use clicktomo::{
    ClickStatistics, DetectorConfig, EmeOptions, MeasurementMatrix, Method, NoiseModel, Pnd, PovmMatrix,
    ProbeMatrix, PulseStream,
};
use serde::Serialize;

use crate::config::{DetectorSpec, ExperimentConfig, SampleSpec};
use crate::error::{CliError, CliResult};
use crate::output::{open, with_path, OutputDir};
use crate::{
    BenchArgs, InputState, MethodArg, ReconstructArgs, SimulateArgs, SweepGammaArgs, SweepLambdaArgs, TomoArgs,
    WeightArg,
};

pub const DEFAULT_GAMMAS: &str = "1e-5,1e-4,1e-3,1e-2,1e-1";

// Pulse streams `0..D` belong to the probes; inputs draw from disjoint ranges.
const RECONSTRUCT_STREAM: u64 = 1 << 32;
const SWEEP_STREAM: u64 = 1 << 33;

const GIB: f64 = (1u64 << 30) as f64;

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(e.into())
}

fn core<T>(r: clicktomo::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Core)
}

fn output_dir(cfg: &ExperimentConfig, command: &'static str) -> CliResult<OutputDir> {
    OutputDir::create(cfg.output_dir(), command, cfg.hash(), cfg.seed()?)
}

fn require_file(path: &Path, hint: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} not found; {hint}", path.display())))
    }
}

fn read_inputs(dir: &Path) -> CliResult<(MeasurementMatrix<f64>, ProbeMatrix<f64>)> {
    let hint = "run `clicktomo simulate` first or pass --input";
    let mpath = dir.join("measurements.csv");
    let fpath = dir.join("probes.csv");
    require_file(&mpath, hint)?;
    require_file(&fpath, hint)?;
    let (p, alpha) = with_path(&mpath, MeasurementMatrix::read_csv(open(&mpath)?))?;
    let f = with_path(&fpath, ProbeMatrix::read_csv(open(&fpath)?))?;
    if alpha != f.alpha_sq() {
        return Err(CliError::Usage(format!(
            "{} and {} list different probe means",
            mpath.display(),
            fpath.display()
        )));
    }
    Ok((p, f))
}

fn read_povm(path: &Path) -> CliResult<PovmMatrix<f64>> {
    require_file(path, "run `clicktomo tomo` first or pass --povm")?;
    with_path(path, PovmMatrix::read_csv(open(path)?))
}

/// `--detector`, then `<output>/detector.json`, then the config's own detector entry.
fn load_detector(cfg: &ExperimentConfig, explicit: Option<&Path>) -> CliResult<DetectorConfig> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => Some(cfg.output_dir().join("detector.json")).filter(|p| p.is_file()),
    };
    match path {
        Some(p) => {
            require_file(&p, "pass a detector written by `clicktomo simulate`")?;
            with_path(&p, DetectorConfig::read_json(&p))
        }
        None => cfg.detector(),
    }
}

pub fn simulate(mut cfg: ExperimentConfig, args: &SimulateArgs) -> CliResult<()> {
    if let Some(n) = args.pixels {
        cfg.detector = DetectorSpec::Sample(SampleSpec { n_pixels: n });
    }
    if let Some(rule) = args.rule {
        cfg.probe.rule = rule;
    }
    let seed = cfg.seed()?;
    let detector = cfg.detector()?;
    let plan = cfg.probe_plan(&detector)?;
    let f = core(build_probe_matrix::<f64>(&plan))?;
    let stats = plan
        .alpha_sq_values
        .iter()
        .enumerate()
        .map(|(d, &a)| {
            simulate_coherent_probe::<f64>(&detector, a, NoiseModel::laser(), plan.pulses_per_probe, PulseStream::new(seed, d as u64))
        })
        .collect::<clicktomo::Result<Vec<_>>>()?;
    let p = core(MeasurementMatrix::from_statistics(&stats))?;

    let out = output_dir(&cfg, "simulate")?;
    out.json("config.json", &cfg.canonical())?;
    out.text("detector.json", &(core(detector.to_json())? + "\n"))?;
    out.text("probe_plan.json", &(core(plan.to_json())? + "\n"))?;
    out.csv("probes.csv", |w| core(f.write_csv(w)))?;
    out.csv("measurements.csv", |w| core(p.write_csv(&plan.alpha_sq_values, w)))?;
    println!(
        "N = {}, {} probes up to |alpha|^2 = {}, M = {}, {} pulses per probe",
        detector.n_pixels,
        plan.n_probes(),
        plan.alpha_sq_max(),
        plan.truncation,
        plan.pulses_per_probe
    );
    Ok(())
}

#[derive(Serialize)]
struct MethodStats {
    status: String,
    objective: f64,
    p_dark: f64,
    masked_fraction: f64,
    n_variables: usize,
    fallback_rows: Vec<usize>,
    iterations: usize,
    kkt_primal_residual: f64,
    kkt_dual_residual: f64,
    kkt_complementarity: f64,
    max_row_sum_deviation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_error_vs_truth: Option<f64>,
}

#[derive(Serialize)]
struct SolverStats {
    gamma: f64,
    n_pixels: usize,
    truncation: usize,
    n_probes: usize,
    sdt: Option<MethodStats>,
    mdt: Option<MethodStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_error_mdt_vs_sdt: Option<f64>,
}

/// Sweep row without timings, so reruns reproduce the file exactly.
#[derive(Serialize)]
struct GammaRow {
    gamma: f64,
    p_dark: f64,
    objective: f64,
    roughness: f64,
    masked_fraction: f64,
    iterations: usize,
    converged: bool,
}

fn write_gamma_sweep(
    out: &OutputDir,
    cfg: &ExperimentConfig,
    p: &MeasurementMatrix<f64>,
    f: &ProbeMatrix<f64>,
    gammas: &[f64],
) -> CliResult<bool> {
    if gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(CliError::Usage("sweep values of gamma must be positive".into()));
    }
    let rows = gamma_sweep(p, f, gammas, &cfg.solver)?;
    out.csv("gamma_sweep.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        for r in &rows {
            wr.serialize(GammaRow {
                gamma: r.gamma,
                p_dark: r.p_dark,
                objective: r.objective,
                roughness: r.roughness,
                masked_fraction: r.masked_fraction,
                iterations: r.iterations,
                converged: r.converged,
            })
            .map_err(csv_err)?;
        }
        wr.flush().map_err(|e| CliError::io(Path::new("gamma_sweep.csv"), e))
    })?;
    for r in &rows {
        println!("gamma = {:e}: p_dark = {:.5}, masked = {:.3}", r.gamma, r.p_dark, r.masked_fraction);
    }
    Ok(rows.iter().all(|r| r.converged))
}

pub fn tomo(cfg: ExperimentConfig, args: &TomoArgs) -> CliResult<()> {
    let input = args.input.clone().unwrap_or_else(|| cfg.output_dir());
    let (p, f) = read_inputs(&input)?;
    let truth = match load_detector(&cfg, Some(&input.join("detector.json")).filter(|p| p.is_file()).map(PathBuf::as_path)) {
        Ok(d) if d.n_pixels == p.n_pixels() && d.n_pixels <= MAX_EXACT_PIXELS => {
            Some(core(exact_povm::<f64>(&d, f.truncation()))?)
        }
        _ => None,
    };
    let methods: &[Method] = match args.method {
        MethodArg::Sdt => &[Method::Sdt],
        MethodArg::Mdt => &[Method::Mdt],
        MethodArg::Both => &[Method::Sdt, Method::Mdt],
    };
    let out = output_dir(&cfg, "tomo")?;
    let mut stats = SolverStats {
        gamma: cfg.gamma,
        n_pixels: p.n_pixels(),
        truncation: f.truncation(),
        n_probes: f.n_probes(),
        sdt: None,
        mdt: None,
        relative_error_mdt_vs_sdt: None,
    };
    let mut povms = Vec::new();
    let mut failures = Vec::new();
    for &method in methods {
        let sol = solve(method, &p, &f, cfg.gamma, &cfg.solver)?;
        if !sol.converged() {
            failures.push(format!("{method}: {:?}", sol.status));
        }
        out.csv(&format!("povm_{method}.csv"), |w| core(sol.povm.write_csv(w)))?;
        let relative_error_vs_truth = match &truth {
            Some(t) => Some(core(povm_relative_error(sol.povm.values(), t.values()))?),
            None => None,
        };
        let entry = MethodStats {
            status: format!("{:?}", sol.status),
            objective: sol.objective,
            p_dark: core(dark_count_probability(&sol.povm))?,
            masked_fraction: sol.masked_fraction,
            n_variables: sol.n_variables,
            fallback_rows: sol.fallback_rows.clone(),
            iterations: sol.iterations,
            kkt_primal_residual: sol.kkt_primal_residual,
            kkt_dual_residual: sol.kkt_dual_residual,
            kkt_complementarity: sol.kkt_complementarity,
            max_row_sum_deviation: sol.povm.max_row_sum_deviation(),
            relative_error_vs_truth,
        };
        println!(
            "{method}: {:?} in {} iterations, solve {:.3}s (assembly {:.3}s), peak {} bytes, p_dark = {:.5}, masked = {:.3}",
            sol.status,
            sol.iterations,
            sol.wall_time,
            sol.assembly_time,
            sol.peak_memory,
            entry.p_dark,
            entry.masked_fraction
        );
        match method {
            Method::Sdt => stats.sdt = Some(entry),
            Method::Mdt => stats.mdt = Some(entry),
        }
        povms.push(sol.povm);
    }
    if let [sdt, mdt] = povms.as_slice() {
        let e = core(povm_relative_error(mdt.values(), sdt.values()))?;
        println!("relative error MDT vs SDT: {e:.4}");
        stats.relative_error_mdt_vs_sdt = Some(e);
    }
    out.json("solver_stats.json", &stats)?;
    if args.gamma_sweep && !write_gamma_sweep(&out, &cfg, &p, &f, &args.gammas)? {
        failures.push("gamma sweep: some solves did not converge".into());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

pub fn sweep_gamma(cfg: ExperimentConfig, args: &SweepGammaArgs) -> CliResult<()> {
    let input = args.input.clone().unwrap_or_else(|| cfg.output_dir());
    let (p, f) = read_inputs(&input)?;
    let out = output_dir(&cfg, "sweep-gamma")?;
    if write_gamma_sweep(&out, &cfg, &p, &f, &args.gammas)? {
        Ok(())
    } else {
        Err(CliError::Numerical("some solves in the gamma sweep did not converge".into()))
    }
}

fn simulate_input(
    detector: &DetectorConfig,
    input: InputState,
    mean: f64,
    pulses: u64,
    stream: PulseStream,
) -> CliResult<ClickStatistics<f64>> {
    Ok(match input {
        // The input is taken to be an ideal coherent state; jitter is a probe property.
        InputState::Coherent => simulate_coherent_probe(detector, mean, NoiseModel::none(), pulses, stream)?,
        InputState::Thermal => simulate_thermal(detector, mean, pulses, stream)?,
    })
}

fn reference_pnd(input: InputState, mean: f64, truncation: usize) -> Pnd<f64> {
    match input {
        InputState::Coherent => poisson_pnd(mean, truncation),
        InputState::Thermal => thermal_pnd(mean, truncation),
    }
}

#[derive(Serialize)]
struct MetricsDoc {
    input: &'static str,
    mean_n: f64,
    repeat: usize,
    lambda: f64,
    #[serde(flatten)]
    metrics: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    std: Option<MetricReport>,
    max_iterations: usize,
    all_converged: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn summarize(reports: &[MetricReport]) -> (MetricReport, MetricReport) {
    let col = |g: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(g).collect::<Vec<_>>());
    let (fm, fs) = col(|r| r.fidelity);
    let (tm, ts) = col(|r| r.tvd);
    let (g2m, g2s) = col(|r| r.g2);
    let (g3m, g3s) = col(|r| r.g3);
    let (mm, ms) = col(|r| r.mean);
    (
        MetricReport { fidelity: fm, tvd: tm, g2: g2m, g3: g3m, mean: mm },
        MetricReport { fidelity: fs, tvd: ts, g2: g2s, g3: g3s, mean: ms },
    )
}

pub fn reconstruct(cfg: ExperimentConfig, args: &ReconstructArgs) -> CliResult<()> {
    if !(args.mean >= 0.0 && args.mean.is_finite()) {
        return Err(CliError::Usage(format!("--mean must be nonnegative, got {}", args.mean)));
    }
    if args.repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let seed = cfg.seed()?;
    let povm_path = args.povm.clone().unwrap_or_else(|| cfg.output_dir().join("povm_mdt.csv"));
    let povm = read_povm(&povm_path)?;
    let detector = load_detector(&cfg, args.detector.as_deref())?;
    if detector.n_pixels != povm.n_pixels() {
        return Err(CliError::Usage(format!(
            "detector has {} pixels but the POVM {} outcomes",
            detector.n_pixels,
            povm.n_pixels() + 1
        )));
    }
    let m = povm.truncation();
    let truth = reference_pnd(args.input, args.mean, m);
    let opts = EmeOptions::with_lambda(cfg.lambda);

    let mut pnds = Vec::with_capacity(args.repeat);
    let mut reports = Vec::with_capacity(args.repeat);
    let mut max_iterations = 0;
    let mut all_converged = true;
    for r in 0..args.repeat {
        let stream = PulseStream::new(seed, RECONSTRUCT_STREAM + r as u64);
        let clicks = simulate_input(&detector, args.input, args.mean, cfg.pulses, stream)?;
        let res = eme_reconstruct(&clicks, &povm, &opts)?;
        max_iterations = max_iterations.max(res.diagnostics.iterations);
        all_converged &= res.diagnostics.converged;
        reports.push(core(MetricReport::compute(res.pnd.probs(), truth.probs()))?);
        pnds.push(res.pnd);
    }
    let (mean_report, std_report) = summarize(&reports);

    let out = output_dir(&cfg, "reconstruct")?;
    out.csv("pnd.csv", |w| {
        if args.repeat == 1 {
            return core(pnds[0].write_csv(w));
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "probability", "std"]).map_err(csv_err)?;
        for k in 0..=m {
            let (mu, sd) = mean_std(&pnds.iter().map(|p| p.probs()[k]).collect::<Vec<_>>());
            wr.write_record([k.to_string(), mu.to_string(), sd.to_string()]).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| CliError::io(Path::new("pnd.csv"), e))
    })?;
    out.csv("truth.csv", |w| core(truth.write_csv(w)))?;
    out.csv("metrics.csv", |w| {
        for (i, r) in reports.iter().enumerate() {
            core(r.write_csv_row(&mut *w, i == 0))?;
        }
        Ok(())
    })?;
    let doc = MetricsDoc {
        input: match args.input {
            InputState::Coherent => "coherent",
            InputState::Thermal => "thermal",
        },
        mean_n: args.mean,
        repeat: args.repeat,
        lambda: cfg.lambda,
        metrics: mean_report.clone(),
        std: (args.repeat > 1).then_some(std_report),
        max_iterations,
        all_converged,
    };
    out.json("metrics.json", &doc)?;
    println!(
        "fidelity {:.6}, tvd {:.5}, g2 {:.4}, g3 {:.4}, mean {:.4}",
        mean_report.fidelity, mean_report.tvd, mean_report.g2, mean_report.g3, mean_report.mean
    );
    if !all_converged {
        log::warn!("reconstruction hit the iteration cap before the change threshold");
    }
    Ok(())
}

pub fn sweep_lambda(cfg: ExperimentConfig, args: &SweepLambdaArgs) -> CliResult<()> {
    if args.means.iter().any(|m| !(*m >= 0.0)) || args.lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(CliError::Usage("means and lambdas must be nonnegative".into()));
    }
    let seed = cfg.seed()?;
    let povm_path = args.povm.clone().unwrap_or_else(|| cfg.output_dir().join("povm_mdt.csv"));
    let povm = read_povm(&povm_path)?;
    let detector = load_detector(&cfg, args.detector.as_deref())?;
    let m = povm.truncation();
    let mut cases = Vec::new();
    for (i, &mean) in args.means.iter().enumerate() {
        for (j, input) in [InputState::Coherent, InputState::Thermal].into_iter().enumerate() {
            let stream = PulseStream::new(seed, SWEEP_STREAM + (2 * i + j) as u64);
            cases.push(LabeledStatistics {
                clicks: simulate_input(&detector, input, mean, cfg.pulses, stream)?,
                truth: reference_pnd(input, mean, m),
            });
        }
    }
    let rows = lambda_sweep(&cases, &povm, &args.lambdas, &EmeOptions::default())?;
    let out = output_dir(&cfg, "sweep-lambda")?;
    out.csv("lambda_sweep.csv", |w| core(write_lambda_sweep_csv(&rows, w)))?;
    for r in &rows {
        println!("lambda = {}: mean fidelity {:.6}, min {:.6}", r.lambda, r.mean_fidelity, r.min_fidelity);
    }
    Ok(())
}

#[derive(Serialize)]
struct FitsDoc {
    #[serde(flatten)]
    fits: ScalingFits,
    #[serde(skip_serializing_if = "Option::is_none")]
    memory_budget_gib: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_pixels_for_memory_budget: Option<Option<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_budget_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_pixels_for_time_budget: Option<Option<u64>>,
}

pub fn bench(cfg: ExperimentConfig, args: &BenchArgs) -> CliResult<()> {
    if args.pixels.is_empty() {
        return Err(CliError::Usage("--pixels needs at least one value".into()));
    }
    let opts = ScalingOptions {
        solver: cfg.solver.clone(),
        repetitions: args.repetitions,
        gamma: cfg.gamma,
        pulses_per_probe: cfg.pulses,
        seed: cfg.seed()?,
        memory_limit: args.memory_limit.map(|g| (g * GIB) as u64),
    };
    let records = run_scaling(&args.pixels, &opts)?;
    let out = output_dir(&cfg, "bench")?;
    out.csv("scaling.csv", |w| core(write_records_csv(&records, w)))?;
    let mut stdout = std::io::stdout().lock();
    for r in &records {
        let _ = writeln!(
            stdout,
            "N = {:3} {}: {:.4}s, {} bytes, masked {:.3}{}",
            r.n_pixels,
            r.method,
            r.solve_time,
            r.peak_memory,
            r.masked_fraction,
            if r.failed { " (failed)" } else { "" }
        );
    }
    let weights = match args.weights {
        WeightArg::Relative => WeightScheme::Relative,
        WeightArg::Uniform => WeightScheme::Uniform,
    };
    let fits = ScalingFits::from_records(&records, weights)?;
    let mut doc = FitsDoc {
        fits,
        memory_budget_gib: None,
        max_pixels_for_memory_budget: None,
        time_budget_s: None,
        max_pixels_for_time_budget: None,
    };
    let f = &doc.fits;
    for (name, fit) in [
        ("time SDT", &f.time_sdt),
        ("time MDT", &f.time_mdt),
        ("memory SDT", &f.memory_sdt),
        ("memory MDT", &f.memory_mdt),
    ] {
        let _ = writeln!(stdout, "{name}: a = {:.4e}, b = {:.3}, residual {:.3e}", fit.a, fit.b, fit.residual);
    }
    if let Some(gib) = args.budget {
        let n = extrapolate(&doc.fits.memory_mdt, gib * GIB)?;
        let _ = writeln!(stdout, "largest N within {gib} GiB (MDT memory fit): {}", fmt_n(n));
        doc.memory_budget_gib = Some(gib);
        doc.max_pixels_for_memory_budget = Some(n);
    }
    if let Some(secs) = args.time_budget {
        let n = extrapolate(&doc.fits.time_mdt, secs)?;
        let _ = writeln!(stdout, "largest N within {secs} s (MDT time fit): {}", fmt_n(n));
        doc.time_budget_s = Some(secs);
        doc.max_pixels_for_time_budget = Some(n);
    }
    out.json("fits.json", &doc)?;
    Ok(())
}

fn fmt_n(n: Option<u64>) -> String {
    n.map_or_else(|| "none (budget below N = 1)".to_string(), |n| n.to_string())
}
