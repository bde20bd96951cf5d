//! Acceptance criteria 1 to 11. Prints one PASS/FAIL line per criterion and
//! exits with status 1 if any criterion fails.
//!
//! Runs without the libtest harness so that criteria execute one at a time;
//! the timing criteria would otherwise compete with each other for cores.

use std::time::Instant;

use clicktomo::bench::{
    extrapolate, fit_power_law, run_scaling, FitResult, ScalingFits, ScalingOptions, ScalingRecord, WeightScheme,
};
use clicktomo::detector::{exact_click_distribution, exact_povm, sample_detector, simulate_coherent_probe, simulate_fock, simulate_thermal};
use clicktomo::memory::TrackingAllocator;
use clicktomo::metrics::{poisson_pnd, thermal_pnd, tvd, MetricReport};
use clicktomo::probe::build_probe_matrix;
use clicktomo::reconstruction::eme_reconstruct;
use clicktomo::tomography::{
    dark_count_probability, gamma_sweep, povm_relative_error, solve_mdt, solve_sdt, unconstrained_solution,
};
use clicktomo::{
    DetectorConfig, EmeOptions, Matrix, MeasurementMatrix, Method, NoiseModel, ProbeMatrix, ProbePlan, PulseStream,
    QpSolution, Result, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

const SEED: u64 = 7;
const GAMMA: f64 = 1e-4;
const PULSES: u64 = 100_000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    results: Vec<(usize, bool)>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &str, start: Instant, outcome: Result<Verdict>) {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{secs:.1} s]",
            if pass { "PASS" } else { "FAIL" }
        );
        self.results.push((id, pass));
    }
}

fn within_time(start: Instant, limit_s: f64) -> (bool, String) {
    let t = start.elapsed().as_secs_f64();
    (t < limit_s, format!("runtime {t:.1} s (limit {limit_s} s)"))
}

fn oracle_equivalence() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = (0.0f64, 0usize, 0u64);
    for i in 0..20u64 {
        let n = rng.random_range(2..=6);
        let cfg = sample_detector(n, 1000 + i)?;
        for k in 0..=10u64 {
            let mc = simulate_fock::<f64>(&cfg, k, 1_000_000, PulseStream::new(SEED, 100 * i + k))?;
            let exact = exact_click_distribution::<f64>(&cfg, k)?;
            let d = tvd(&mc.probs, &exact)?;
            if d > worst.0 {
                worst = (d, n, k);
            }
        }
    }
    let (fast, time) = within_time(start, 120.0);
    Ok(verdict(
        worst.0 < 5e-3 && fast,
        format!(
            "max TVD {:.2e} (limit 5e-3, at N = {}, k = {}) over 220 cases, {time}",
            worst.0, worst.1, worst.2
        ),
    ))
}

fn identifiability() -> Result<Verdict> {
    let start = Instant::now();
    let cfg = sample_detector(4, SEED)?;
    let plan = ProbePlan::standard(4, 1)?;
    let f = build_probe_matrix::<f64>(&plan)?;
    let truth = exact_povm::<f64>(&cfg, plan.truncation)?;
    let p = MeasurementMatrix::normalized(f.values().matmul(truth.values())?)?;
    let opts = SolverOptions::default();
    let sdt = solve_sdt(&p, &f, 1e-6, &opts)?;
    let mdt = solve_mdt(&p, &f, 1e-6, &opts)?;
    let es = povm_relative_error(sdt.povm.values(), truth.values())?;
    let em = povm_relative_error(mdt.povm.values(), truth.values())?;
    let (fast, time) = within_time(start, 60.0);
    Ok(verdict(
        es < 1e-2 && em < 1e-2 && sdt.converged() && mdt.converged() && fast,
        format!(
            "N = 4, |alpha|^2 <= {}, M = {}: relative error SDT {es:.4}, MDT {em:.4} (limit 1e-2), {time}",
            plan.alpha_sq_max(),
            plan.truncation
        ),
    ))
}

struct TomoRun {
    detector: DetectorConfig,
    plan: ProbePlan,
    p: MeasurementMatrix<f64>,
    f: ProbeMatrix<f64>,
    sdt: QpSolution<f64>,
    mdt: QpSolution<f64>,
    seconds: f64,
}

fn tomo_run(detector: DetectorConfig, plan: ProbePlan) -> Result<TomoRun> {
    let start = Instant::now();
    let f = build_probe_matrix::<f64>(&plan)?;
    let stats = plan
        .alpha_sq_values
        .iter()
        .enumerate()
        .map(|(d, &a)| {
            simulate_coherent_probe::<f64>(&detector, a, NoiseModel::laser(), plan.pulses_per_probe, PulseStream::new(SEED, d as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = MeasurementMatrix::from_statistics(&stats)?;
    let opts = SolverOptions::default();
    let sdt = solve_sdt(&p, &f, GAMMA, &opts)?;
    let mdt = solve_mdt(&p, &f, GAMMA, &opts)?;
    Ok(TomoRun {
        detector,
        plan,
        p,
        f,
        sdt,
        mdt,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn mdt_matches_sdt(run: &TomoRun) -> Result<Verdict> {
    let e = povm_relative_error(run.mdt.povm.values(), run.sdt.povm.values())?;
    let fast = run.seconds < 600.0;
    Ok(verdict(
        e < 0.03 && run.sdt.converged() && run.mdt.converged() && fast,
        format!(
            "N = 10, M = {}, {} pulses per probe: relative error {e:.4} (limit 0.03), runtime {:.1} s (limit 600 s)",
            run.plan.truncation, run.plan.pulses_per_probe, run.seconds
        ),
    ))
}

fn row_sum_lemma() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n_pixels = rng.random_range(2..=10);
        let m = rng.random_range(5..=30);
        let d = rng.random_range(3..=m + 10);
        let gamma = 10f64.powf(rng.random_range(-6.0..-1.0));
        let stochastic = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let v: Vec<Vec<f64>> = (0..rows)
                .map(|_| {
                    let r: Vec<f64> = (0..cols).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect();
            Matrix::from_rows(&v)
        };
        let f = ProbeMatrix::from_parts(stochastic(d, m + 1, &mut rng)?, (1..=d).map(|a| a as f64).collect())?;
        let p = MeasurementMatrix::normalized(stochastic(d, n_pixels + 1, &mut rng)?)?;
        let sol = unconstrained_solution(&p, &f, gamma)?;
        worst = worst.max(sol.max_row_sum_deviation);
    }
    Ok(verdict(
        worst < 1e-6,
        format!("10 random instances: max |row sum - 1| = {worst:.2e} (limit 1e-6)"),
    ))
}

fn dark_counts(run: &TomoRun) -> Result<Verdict> {
    let pd_sdt = dark_count_probability(&run.sdt.povm)?;
    let pd_mdt = dark_count_probability(&run.mdt.povm)?;
    let sweep = gamma_sweep(&run.p, &run.f, &[1e-5, 1e-4, 1e-3, 1e-2, 1e-1], &SolverOptions::default())?;
    let low = sweep.first().map_or(f64::NAN, |r| r.p_dark);
    let high = sweep.last().map_or(f64::NAN, |r| r.p_dark);
    Ok(verdict(
        pd_sdt < 0.10 && pd_mdt < 0.10 && high > low && sweep.iter().all(|r| r.converged),
        format!(
            "p_dark at gamma = 1e-4: SDT {pd_sdt:.4}, MDT {pd_mdt:.4} (limit 0.10); sweep p_dark(1e-5) = {low:.4} < p_dark(1e-1) = {high:.4}"
        ),
    ))
}

struct Reconstruction {
    thermal: bool,
    mean: f64,
    report: MetricReport,
}

fn reconstructions(run: &TomoRun) -> Result<(Vec<Reconstruction>, f64)> {
    let start = Instant::now();
    let m = run.mdt.povm.truncation();
    let opts = EmeOptions::with_lambda(0.02);
    let mut out = Vec::new();
    for (i, mean) in [5.0, 10.0, 20.0].into_iter().enumerate() {
        for thermal in [false, true] {
            let stream = PulseStream::new(SEED, (1 << 32) + 2 * i as u64 + thermal as u64);
            let (clicks, truth) = if thermal {
                (simulate_thermal::<f64>(&run.detector, mean, PULSES, stream)?, thermal_pnd(mean, m))
            } else {
                (
                    simulate_coherent_probe::<f64>(&run.detector, mean, NoiseModel::none(), PULSES, stream)?,
                    poisson_pnd(mean, m),
                )
            };
            let res = eme_reconstruct(&clicks, &run.mdt.povm, &opts)?;
            out.push(Reconstruction {
                thermal,
                mean,
                report: MetricReport::compute(res.pnd.probs(), truth.probs())?,
            });
        }
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

fn label(r: &Reconstruction) -> String {
    format!("{}({})", if r.thermal { "thermal" } else { "coherent" }, r.mean)
}

fn fidelities(run: &TomoRun, recs: &[Reconstruction], seconds: f64) -> Verdict {
    let total = run.seconds + seconds;
    let worst = recs
        .iter()
        .min_by(|a, b| a.report.fidelity.total_cmp(&b.report.fidelity))
        .expect("six reconstructions");
    let list: Vec<String> = recs.iter().map(|r| format!("{} {:.4}", label(r), r.report.fidelity)).collect();
    verdict(
        recs.iter().all(|r| r.report.fidelity > 0.99) && total < 900.0,
        format!(
            "N = 20, M = {}: min fidelity {:.4} at {} (limit 0.99); {}; runtime {total:.1} s (limit 900 s)",
            run.plan.truncation,
            worst.report.fidelity,
            label(worst),
            list.join(", ")
        ),
    )
}

fn correlations(recs: &[Reconstruction]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in recs {
        let (g2_band, g3_band) = if r.thermal {
            ((1.85, 2.15), (5.4, 6.6))
        } else {
            ((0.95, 1.05), (0.9, 1.1))
        };
        let ok2 = (g2_band.0..=g2_band.1).contains(&r.report.g2);
        let ok3 = (g3_band.0..=g3_band.1).contains(&r.report.g3);
        pass &= ok2 && ok3;
        parts.push(format!(
            "{} g2 {:.3}{} g3 {:.3}{}",
            label(r),
            r.report.g2,
            if ok2 { "" } else { " (out of band)" },
            r.report.g3,
            if ok3 { "" } else { " (out of band)" }
        ));
    }
    verdict(pass, parts.join(", "))
}

fn variable_reduction(runs: &[&TomoRun]) -> Verdict {
    let fractions: Vec<(usize, f64)> = runs.iter().map(|r| (r.detector.n_pixels, r.mdt.masked_fraction)).collect();
    let pass = fractions.iter().all(|(_, f)| (0.2..=0.6).contains(f));
    let list: Vec<String> = fractions.iter().map(|(n, f)| format!("N = {n}: {f:.3}")).collect();
    verdict(pass, format!("masked fraction {} (band [0.2, 0.6])", list.join(", ")))
}

fn median_time(records: &[ScalingRecord], n: usize, method: Method) -> Option<f64> {
    records
        .iter()
        .find(|r| r.n_pixels == n && r.method == method && !r.failed)
        .map(|r| r.solve_time)
}

fn solve_time_advantage(records: &[ScalingRecord]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [40, 60] {
        match (median_time(records, n, Method::Sdt), median_time(records, n, Method::Mdt)) {
            (Some(s), Some(m)) => {
                pass &= m <= 0.8 * s;
                parts.push(format!("N = {n}: MDT {m:.3} s / SDT {s:.3} s = {:.2}", m / s));
            }
            _ => {
                pass = false;
                parts.push(format!("N = {n}: solve failed"));
            }
        }
    }
    verdict(pass, format!("{} (limit 0.80, medians of 3)", parts.join(", ")))
}

fn power_law(records: &[ScalingRecord]) -> Result<Verdict> {
    let pts: Vec<(f64, f64)> = [10.0, 20.0, 30.0, 40.0, 60.0].iter().map(|&n: &f64| (n, 2.0 * n.powi(3))).collect();
    let exact = fit_power_law(&pts, WeightScheme::Relative)?;
    let exact_ok = (exact.a - 2.0).abs() <= 1e-10 && (exact.b - 3.0).abs() <= 1e-10;
    let fits = ScalingFits::from_records(records, WeightScheme::Relative)?;
    let measured = [
        ("t_SDT", &fits.time_sdt),
        ("t_MDT", &fits.time_mdt),
        ("m_SDT", &fits.memory_sdt),
        ("m_MDT", &fits.memory_mdt),
    ];
    let in_band = measured.iter().all(|(_, f)| (2.0..=4.5).contains(&f.b));
    let allocator = records.iter().all(|r| r.memory_measured);
    let list: Vec<String> = measured.iter().map(|(name, f)| format!("{name} b = {:.2}", f.b)).collect();
    Ok(verdict(
        exact_ok && in_band && allocator,
        format!(
            "synthetic fit a - 2 = {:.1e}, b - 3 = {:.1e} (limit 1e-10); measured {} (band [2, 4.5]) over N = 10, 20, 30, 40, 60",
            exact.a - 2.0,
            exact.b - 3.0,
            list.join(", ")
        ),
    ))
}

fn extrapolation() -> Result<Verdict> {
    let fit = FitResult {
        a: 0.85e-6,
        b: 3.58,
        residual: 0.0,
    };
    let n = extrapolate(&fit, 1024.0)?;
    Ok(verdict(
        n.is_some_and(|n| (320..=360).contains(&n)),
        format!("a = 0.85e-6 GB, b = 3.58, budget 1024 GB: N = {n:?} (band [320, 360])"),
    ))
}

fn main() {
    let mut suite = Suite { results: Vec::new() };

    let t = Instant::now();
    suite.record(1, "oracle equivalence", t, oracle_equivalence());
    let t = Instant::now();
    suite.record(2, "noise-free identifiability", t, identifiability());

    let t = Instant::now();
    let run10 = sample_detector(10, SEED).and_then(|d| {
        let plan = ProbePlan::standard(10, PULSES)?;
        tomo_run(d, plan)
    });
    match &run10 {
        Ok(run) => suite.record(3, "MDT matches SDT", t, mdt_matches_sdt(run)),
        Err(e) => suite.record(3, "MDT matches SDT", t, Err(clicktomo::Error::InvalidArgument(e.to_string()))),
    }
    let t = Instant::now();
    suite.record(4, "row-sum lemma", t, row_sum_lemma());
    let t = Instant::now();
    match &run10 {
        Ok(run) => suite.record(5, "dark-count behavior", t, dark_counts(run)),
        Err(e) => suite.record(5, "dark-count behavior", t, Err(clicktomo::Error::InvalidArgument(e.to_string()))),
    }

    let t = Instant::now();
    let run20 = sample_detector(20, SEED).and_then(|d| {
        let plan = ProbePlan::saturating(20, d.total_efficiency(), PULSES)?;
        tomo_run(d, plan)
    });
    let recs = run20.as_ref().map_err(|e| e.to_string()).and_then(|run| {
        reconstructions(run).map_err(|e| e.to_string())
    });
    match (&run20, &recs) {
        (Ok(run), Ok((recs, secs))) => {
            suite.record(6, "reconstruction fidelity", t, Ok(fidelities(run, recs, *secs)));
            let t = Instant::now();
            suite.record(7, "correlation functions", t, Ok(correlations(recs)));
        }
        (_, Err(e)) => {
            let err = || Err(clicktomo::Error::InvalidArgument(e.clone()));
            suite.record(6, "reconstruction fidelity", t, err());
            suite.record(7, "correlation functions", t, err());
        }
        (Err(_), Ok(_)) => unreachable!("reconstructions need the N = 20 run"),
    }
    let t = Instant::now();
    match (&run10, &run20) {
        (Ok(a), Ok(b)) => suite.record(8, "variable reduction", t, Ok(variable_reduction(&[a, b]))),
        _ => suite.record(8, "variable reduction", t, Ok(verdict(false, "tomography runs failed"))),
    }

    let t = Instant::now();
    let opts = ScalingOptions {
        repetitions: 3,
        gamma: GAMMA,
        pulses_per_probe: PULSES,
        seed: SEED,
        ..Default::default()
    };
    let records = run_scaling(&[10, 20, 30, 40, 60], &opts);
    match &records {
        Ok(r) => suite.record(9, "solve-time advantage", t, Ok(solve_time_advantage(r))),
        Err(e) => suite.record(9, "solve-time advantage", t, Err(clicktomo::Error::InvalidArgument(e.to_string()))),
    }
    let t = Instant::now();
    match &records {
        Ok(r) => suite.record(10, "power-law fitting", t, power_law(r)),
        Err(e) => suite.record(10, "power-law fitting", t, Err(clicktomo::Error::InvalidArgument(e.to_string()))),
    }
    let t = Instant::now();
    suite.record(11, "extrapolation check", t, extrapolation());

    let passed = suite.results.iter().filter(|(_, p)| *p).count();
    println!("acceptance: {passed}/{} criteria passed", suite.results.len());
    if passed != suite.results.len() {
        std::process::exit(1);
    }
}
