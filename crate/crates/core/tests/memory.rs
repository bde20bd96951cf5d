use clicktomo::detector::{exact_povm, sample_detector};
use clicktomo::memory::{tracking_active, PeakScope, TrackingAllocator};
use clicktomo::probe::build_probe_matrix;
use clicktomo::tomography::{solve_mdt, solve_sdt};
use clicktomo::{MeasurementMatrix, ProbePlan, SolverOptions};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[test]
fn peak_scope_sees_allocations() {
    assert!(tracking_active());
    let scope = PeakScope::start();
    let v = vec![0u8; 1 << 20];
    std::hint::black_box(&v);
    drop(v);
    assert!(scope.finish().unwrap() >= 1 << 20);
}

#[test]
fn solves_report_measured_peaks_that_grow_with_size() {
    let opts = SolverOptions::default();
    let mut peaks = Vec::new();
    for n in [4, 8] {
        let cfg = sample_detector(n, 3).unwrap();
        let plan = ProbePlan::standard(n, 1).unwrap();
        let f = build_probe_matrix::<f64>(&plan).unwrap();
        let truth = exact_povm::<f64>(&cfg, plan.truncation).unwrap();
        let p = MeasurementMatrix::normalized(f.values().matmul(truth.values()).unwrap()).unwrap();
        let sdt = solve_sdt(&p, &f, 1e-4, &opts).unwrap();
        let mdt = solve_mdt(&p, &f, 1e-4, &opts).unwrap();
        assert!(sdt.peak_memory_measured && mdt.peak_memory_measured);
        // One Hessian per outcome is a floor for the SDT peak.
        let m1 = plan.truncation + 1;
        assert!(sdt.peak_memory >= (n + 1) * m1 * m1 * 8);
        peaks.push(sdt.peak_memory);
    }
    assert!(peaks[1] > peaks[0]);
}
