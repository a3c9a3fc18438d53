use damamba::bench::{
    allocator_installed, from_csv, partner_scaling_benchmark, peak_during, run_scaling_benchmark, to_csv,
    CountingAlloc, PartnerConfig, ScalingConfig, FULL_ATTENTION, HYBRID,
};
use damamba::config::ModelConfig;
use damamba::Error;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[test]
fn counter_sees_this_threads_allocations() {
    assert!(allocator_installed());
    let (v, peak) = peak_during(|| vec![1u8; 1 << 20]);
    assert_eq!(v.len(), 1 << 20);
    assert!(peak >= 1 << 20 && peak < (1 << 20) + 4096, "{peak}");
    // Freed memory does not count twice.
    let (_, peak) = peak_during(|| {
        for _ in 0..4 {
            drop(std::hint::black_box(vec![0u64; 1 << 16]));
        }
    });
    assert!(peak < 1 << 20, "{peak}");
}

fn small() -> ScalingConfig {
    ScalingConfig {
        lengths: vec![128, 256, 512],
        ..ScalingConfig::default()
    }
}

#[test]
fn capped_run_emits_oom_rows_for_the_quadratic_variant_only() {
    let cfg = ScalingConfig {
        cap_bytes: Some(3_500_000),
        ..small()
    };
    let rows = run_scaling_benchmark(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    let (hyb, full): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.variant == HYBRID);
    assert!(hyb.iter().all(|r| !r.oom && r.peak_bytes.unwrap() <= 3_500_000));
    assert!(full.iter().all(|r| r.variant == FULL_ATTENTION));
    let last = full.last().unwrap();
    assert_eq!(last.n, 512);
    assert!(last.oom && last.time_ms.is_none());
    assert!(!full[0].oom);
}

#[test]
fn rows_are_complete_and_round_trip() {
    let rows = run_scaling_benchmark(&small()).unwrap();
    for v in [HYBRID, FULL_ATTENTION] {
        let of: Vec<_> = rows.iter().filter(|r| r.variant == v).collect();
        assert_eq!(of.iter().map(|r| r.n).collect::<Vec<_>>(), vec![128, 256, 512]);
        // Parameter count does not depend on n.
        assert!(of.iter().all(|r| r.params == of[0].params && r.params > 0));
        assert!(of.iter().all(|r| r.time_ms.unwrap() > 0.0));
        assert!(of[1..].iter().all(|r| r.time_ratio.unwrap().is_finite() && r.peak_ratio.unwrap().is_finite()));
    }
    // Memory: linear for the hybrid block, close to quadratic for full attention.
    let peak = |v: &str, n: usize| rows.iter().find(|r| r.variant == v && r.n == n).unwrap().peak_bytes.unwrap() as f64;
    assert!(peak(HYBRID, 512) / peak(HYBRID, 256) < 2.2);
    assert!(peak(FULL_ATTENTION, 512) / peak(FULL_ATTENTION, 256) > 2.8);

    let text = to_csv(&rows).unwrap();
    assert!(text.starts_with("variant,n,time_ms,peak_bytes,params"));
    assert_eq!(from_csv(&text).unwrap(), rows);
}

#[test]
fn partner_rows() {
    let cfg = PartnerConfig {
        participants: vec![2, 3],
        n: 64,
        model: ModelConfig {
            d: 4,
            k_audio: 8,
            k_visual: 8,
            layers: 1,
            ..ModelConfig::default()
        },
        ..PartnerConfig::default()
    };
    let rows = partner_scaling_benchmark(&cfg).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["context-m2", "context-m3"]);
    assert!(rows[1].time_ratio.unwrap() > 1.0);
    assert_eq!(from_csv(&to_csv(&rows).unwrap()).unwrap(), rows);

    let bad = PartnerConfig {
        participants: vec![1, 2],
        ..cfg
    };
    assert!(matches!(partner_scaling_benchmark(&bad), Err(Error::Config(_))));
}
