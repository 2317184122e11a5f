use proptest::prelude::*;
use voltmon::detector::{first_anomaly, first_anomaly_in_csv, rms, scan_file, AnomalyKind, DetectorConfig};
use voltmon::waveform::{generate_samples, read_csv, write_rows, FaultSpec, VoltageSample, WaveformConfig};

/// Direct summation, independent of the detector's iterator pipeline.
fn rms_oracle(values: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let y = v * v - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
    }
    (acc / values.len() as f64).sqrt()
}

/// Per-window brute force: (window index, kind) of every out-of-band window.
fn scan_oracle(rows: &[VoltageSample], cfg: &DetectorConfig) -> Vec<(u64, AnomalyKind)> {
    let len = cfg.window_len();
    let mut out = Vec::new();
    let mut w = 0;
    while w * len < rows.len() {
        let end = ((w + 1) * len).min(rows.len());
        if end - w * len >= cfg.samples_per_cycle as usize {
            let vals: Vec<f64> = rows[w * len..end].iter().map(|s| s.volts).collect();
            let r = rms_oracle(&vals);
            if r < cfg.lower_frac * cfg.nominal_rms {
                out.push((w as u64, AnomalyKind::Undervoltage));
            } else if r > cfg.upper_frac * cfg.nominal_rms {
                out.push((w as u64, AnomalyKind::Overvoltage));
            }
        }
        w += 1;
    }
    out
}

#[test]
fn sixteen_value_window_matches_oracle() {
    let w = [
        312.5, -17.25, 0.125, 229.875, -325.27, 101.0, -0.5, 44.4, -199.99, 250.0, 3.0, -3.0,
        77.7, -288.8, 12.345, -150.0,
    ];
    // 50-digit mpmath evaluation of sqrt(sum(x^2)/n), frozen.
    let frozen = 173.813_595_515_245_88;
    let got = rms(&w).unwrap();
    assert!((got - frozen).abs() / frozen < 1e-12, "{got}");
    assert!((rms_oracle(&w) - frozen).abs() / frozen < 1e-12);
}

#[test]
fn end_outage_matches_window_oracle() {
    let cfg = DetectorConfig::default();
    let rows = generate_samples(&WaveformConfig::default(), 20_000, &[FaultSpec::outage(18_000, 2000)]).unwrap();
    let got: Vec<_> = scan_file(0, "f", &rows, &cfg)
        .iter()
        .map(|r| (r.window_index, r.kind))
        .collect();
    assert_eq!(got, scan_oracle(&rows, &cfg));
    assert_eq!(got, vec![(9, AnomalyKind::Undervoltage)]);
}

fn arb_fault(n: u64) -> impl Strategy<Value = FaultSpec> {
    (0..n, 1..n, 0u8..3, 0.05f64..0.99, 1.01f64..2.0).prop_map(move |(start, dur, kind, sag, swell)| {
        let dur = dur.min(n - start);
        match kind {
            0 => FaultSpec::sag(start, dur, sag),
            1 => FaultSpec::swell(start, dur, swell),
            _ => FaultSpec::outage(start, dur),
        }
    })
}

proptest! {
    #[test]
    fn rms_scale_equivariant(values in proptest::collection::vec(-400.0f64..400.0, 1..64), k in -10.0f64..10.0) {
        let base = rms(&values).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
        let r = rms(&scaled).unwrap();
        let expected = k.abs() * base;
        prop_assert!((r - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn rms_matches_oracle(values in proptest::collection::vec(-400.0f64..400.0, 1..256)) {
        let r = rms(&values).unwrap();
        let o = rms_oracle(&values);
        prop_assert!((r - o).abs() <= 1e-12 * o.max(1e-300));
    }

    #[test]
    fn reports_never_inside_band(seed: u64, fault in arb_fault(8000)) {
        let cfg = DetectorConfig::default();
        let wf = WaveformConfig::default().with_seed(seed);
        let rows = generate_samples(&wf, 8000, &[fault]).unwrap();
        for r in scan_file(1, "f", &rows, &cfg) {
            prop_assert!(r.rms_value < cfg.lower_bound() || r.rms_value > cfg.upper_bound());
            prop_assert_eq!(r.kind == AnomalyKind::Undervoltage, r.rms_value < cfg.lower_bound());
        }
    }

    #[test]
    fn aligned_rechunking_preserves_report_count(seed: u64, fault in arb_fault(12_000), split in 1usize..6) {
        let cfg = DetectorConfig::default();
        let wf = WaveformConfig::default().with_seed(seed);
        let rows = generate_samples(&wf, 12_000, &[fault]).unwrap();
        let whole = scan_file(0, "all", &rows, &cfg).len();
        let chunk = split * cfg.window_len();
        let pieces: usize = rows.chunks(chunk).map(|c| scan_file(0, "part", c, &cfg).len()).sum();
        prop_assert_eq!(whole, pieces);
    }

    #[test]
    fn healthy_then_faulty_reports_only_fault_windows(seed: u64, healthy_windows in 1u64..5, fault in arb_fault(6000)) {
        let cfg = DetectorConfig::default();
        let wl = cfg.window_len() as u64;
        let offset = healthy_windows * wl;
        let wf = WaveformConfig::default().with_seed(seed);
        let rows = generate_samples(&wf, offset + 6000, &[fault.shifted(offset)]).unwrap();
        for r in scan_file(0, "f", &rows, &cfg) {
            let (lo, hi) = (r.window_index * wl, (r.window_index + 1) * wl);
            prop_assert!(r.window_index >= healthy_windows);
            prop_assert!(fault.start_sample + offset < hi && fault.end() + offset > lo);
        }
    }
}

#[test]
fn scan_agrees_with_oracle_on_random_faults() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let cfg = DetectorConfig::default();
    for _ in 0..200 {
        let n = rng.gen_range(100..12_000u64);
        let start = rng.gen_range(0..n);
        let dur = rng.gen_range(1..=n - start);
        let fault = match rng.gen_range(0..3) {
            0 => FaultSpec::sag(start, dur, rng.gen_range(0.05..0.99)),
            1 => FaultSpec::swell(start, dur, rng.gen_range(1.01..2.0)),
            _ => FaultSpec::outage(start, dur),
        };
        let wf = WaveformConfig::default().with_seed(rng.gen());
        let rows = generate_samples(&wf, n, &[fault]).unwrap();
        let got: Vec<_> = scan_file(0, "f", &rows, &cfg).iter().map(|r| (r.window_index, r.kind)).collect();
        assert_eq!(got, scan_oracle(&rows, &cfg), "{fault:?} n={n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_csv_scan_matches_batch_scan(seed: u64, n in 1u64..9000, fault in arb_fault(9000)) {
        let cfg = DetectorConfig::default();
        let fault = FaultSpec { start_sample: fault.start_sample % n, duration_samples: fault.duration_samples.min(n - fault.start_sample % n), ..fault };
        let wf = WaveformConfig::default().with_seed(seed);
        let bytes = write_rows(&generate_samples(&wf, n, &[fault]).unwrap());
        let batch = first_anomaly(2, "f", &read_csv(&bytes).unwrap(), &cfg);
        prop_assert_eq!(first_anomaly_in_csv(2, "f", &bytes, &cfg).unwrap(), batch);
    }
}

#[test]
fn streaming_csv_scan_reports_parse_errors() {
    let cfg = DetectorConfig::default();
    assert!(first_anomaly_in_csv(0, "f", b"timestamp_us,volts\n", &cfg).is_err());
    assert!(first_anomaly_in_csv(0, "f", b"timestamp_us,volts\n0,1.0\n0,1.0\n", &cfg).is_err());
    assert!(first_anomaly_in_csv(0, "f", b"nope\n", &cfg).is_err());
}
