use proptest::prelude::*;
use xlstm_se::bench::{
    loglog_slope, parse_csv, refit, run_bench, table, to_csv, BenchConfig, BenchReport, Kernel,
    CSV_HEADER,
};
use xlstm_se::Error;

fn small() -> BenchConfig {
    BenchConfig {
        seq_lens: vec![8, 16, 32, 128],
        d: 8,
        reps: 5,
        ..BenchConfig::default()
    }
}

#[test]
fn small_grid_produces_every_run() {
    let r = run_bench(&small()).unwrap();
    assert_eq!(r.runs.len(), 4 * 4);
    assert_eq!(r.slopes.len(), 4);
    for run in &r.runs {
        assert!(run.median_s > 0.0 && run.iqr_s >= 0.0, "{run:?}");
        assert!(run.reps >= 5 && run.inner >= 1);
    }
    assert!(r.separation().is_some());
    let t = table(&r);
    assert!(t.contains("attention_naive") && t.contains("separation"));
}

#[test]
fn csv_round_trip_and_refit() {
    let r = run_bench(&small()).unwrap();
    let csv = to_csv(&r).unwrap();
    assert!(csv.starts_with(CSV_HEADER));
    let rows = parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), r.runs.len());
    for (row, run) in rows.iter().zip(&r.runs) {
        assert_eq!(
            (row.kernel, row.seq_len, row.d, row.state_bytes),
            (run.kernel, run.seq_len, run.d, run.state_bytes)
        );
        assert_eq!(row.median_s, run.median_s);
        assert_eq!(row.iqr_s, run.iqr_s);
        assert_eq!(Some(row.slope), r.slope(row.kernel));
    }
    for (k, s) in refit(&rows).unwrap() {
        let col = rows.iter().find(|row| row.kernel == k).unwrap().slope;
        assert!((s - col).abs() < 1e-12, "{k}: {s} vs {col}");
    }
}

#[test]
fn empty_report_is_rejected() {
    let r = BenchReport {
        runs: vec![],
        slopes: vec![],
        threads: 1,
    };
    assert!(matches!(to_csv(&r), Err(Error::Contract(_))));
}

#[test]
fn malformed_csv_is_rejected() {
    assert!(parse_csv("kernel,T\n").is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\nlstm,1,2,3\n")).is_err());
    assert!(parse_csv(&format!("{CSV_HEADER}\nrnn,1,2,3,4,5,6\n")).is_err());
    assert_eq!(parse_csv(&format!("{CSV_HEADER}\n")).unwrap(), vec![]);
}

#[test]
fn grids_are_validated() {
    let bad = [
        BenchConfig {
            seq_lens: vec![16, 32, 64],
            ..small()
        },
        BenchConfig {
            seq_lens: vec![16, 32, 64, 128],
            ..small()
        },
        BenchConfig { reps: 4, ..small() },
        BenchConfig {
            kernels: vec![],
            ..small()
        },
        BenchConfig {
            threads: 0,
            ..small()
        },
    ];
    for cfg in bad {
        assert!(matches!(run_bench(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn memory_accounting() {
    for d in [16, 64] {
        for t in [512, 1000, 8192] {
            assert_eq!(
                Kernel::AttentionNaive.state_bytes(2 * t, d),
                2 * Kernel::AttentionNaive.state_bytes(t, d)
            );
            assert_eq!(
                Kernel::MlstmParallel.state_bytes(2 * t, d),
                2 * Kernel::MlstmParallel.state_bytes(t, d)
            );
            assert_eq!(
                Kernel::MlstmRecurrent.state_bytes(t, d),
                Kernel::MlstmRecurrent.state_bytes(1, d)
            );
            assert_eq!(
                Kernel::Lstm.state_bytes(t, d),
                Kernel::Lstm.state_bytes(1, d)
            );
        }
        assert_eq!(
            Kernel::MlstmRecurrent.state_bytes(7, d),
            (d * d + d + 1) * 8
        );
    }
}

proptest! {
    #[test]
    fn refit_recovers_power_laws(p in 0.2f64..3.0, a in 1e-6f64..1.0, base in 2usize..64) {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| {
            let t = (base << i) as f64;
            (t, a * t.powf(p))
        }).collect();
        prop_assert!((loglog_slope(&pts).unwrap() - p).abs() < 1e-9);
    }
}
