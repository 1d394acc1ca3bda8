use longattn_core::attention::{AttentionSpec, Variant};
use longattn_core::bench::{normalize, ordering_check, read_csv, run_scaling, write_csv, BenchSpec, ScalingConfig};

fn grid() -> ScalingConfig {
    ScalingConfig {
        specs: vec![
            BenchSpec::new("local", AttentionSpec::block_local(64, false, 4, 16)),
            BenchSpec::new("global_local", AttentionSpec::global_local(64, 32, false, 4, 16)),
            BenchSpec::new("full", AttentionSpec::full(4, 16)),
        ],
        lengths: vec![256, 512, 1024],
        repeats: 1,
        ff_mult: 4,
        baseline: None,
        seed: 0,
    }
}

#[test]
fn scaling_laws_and_ordering() {
    let mut rows = run_scaling(&grid()).unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].label == "local" && rows[0].seq_len == 256 && rows[0].mac_ratio == 1.0);

    normalize(&mut rows, "full", 256).unwrap();
    let full: Vec<f64> = rows.iter().filter(|r| r.label == "full").map(|r| r.score_ratio).collect();
    assert_eq!(full, [1.0, 4.0, 16.0]);
    normalize(&mut rows, "local", 256).unwrap();
    let local: Vec<f64> = rows.iter().filter(|r| r.label == "local").map(|r| r.score_ratio).collect();
    assert_eq!(local, [1.0, 2.0, 4.0]);

    let at = |label: &str, l: usize| rows.iter().find(|r| r.label == label && r.seq_len == l).unwrap().clone();
    let overhead = at("global_local", 1024).mac_count as f64 / at("local", 1024).mac_count as f64;
    assert!(overhead > 1.0 && overhead <= 1.3, "{overhead}");

    let full_row = at("full", 512);
    assert_eq!((full_row.b, full_row.g, full_row.variant), (None, 0, Variant::Full));
    assert_eq!(at("global_local", 512).g, 32);

    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("label,variant,L,b,g,staggered,wall_ms,mac_count,score_elems,"));
    assert_eq!(read_csv(text.as_bytes()).unwrap(), rows);
    let report = ordering_check(text.as_bytes()).unwrap();
    assert!(report.pass(), "{report:?}");
    // 256 = 4b, so only the local <= full checks apply there.
    assert_eq!(report.checks.len(), 3 + 2);
}

#[test]
fn counters_are_reproducible() {
    let mut cfg = grid();
    cfg.lengths = vec![128];
    let a: Vec<u64> = run_scaling(&cfg).unwrap().iter().map(|r| r.mac_count).collect();
    let b: Vec<u64> = run_scaling(&cfg).unwrap().iter().map(|r| r.mac_count).collect();
    assert_eq!(a, b);
}

#[test]
fn full_ties_local_when_one_block_covers_the_input() {
    let cfg = ScalingConfig {
        specs: vec![
            BenchSpec::new("local", AttentionSpec::block_local(32, false, 2, 8)),
            BenchSpec::new("full", AttentionSpec::full(2, 8)),
        ],
        lengths: vec![32],
        repeats: 1,
        ff_mult: 2,
        baseline: None,
        seed: 3,
    };
    let rows = run_scaling(&cfg).unwrap();
    assert_eq!(rows[0].mac_count, rows[1].mac_count);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    assert!(ordering_check(buf.as_slice()).unwrap().pass());
}

#[test]
fn ordering_violations_fail() {
    let csv = "label,variant,L,b,g,staggered,wall_ms,mac_count,score_elems,wall_ratio,mac_ratio,score_ratio\n\
               l,block_local,512,64,0,false,1,100,1,1,1,1\n\
               gl,global_local,512,64,8,false,1,90,1,1,1,1\n\
               f,full,512,,0,false,1,500,1,1,1,1\n";
    let report = ordering_check(csv.as_bytes()).unwrap();
    assert!(!report.pass());
    assert_eq!(report.checks.iter().filter(|c| !c.pass).count(), 1);
}

#[test]
fn malformed_csv_is_a_parse_error() {
    let bad = "label,variant,L\nx,block_local,notanumber\n";
    assert!(ordering_check(bad.as_bytes()).is_err());
    let unknown = "label,variant,L,b,g,staggered,wall_ms,mac_count,score_elems,wall_ratio,mac_ratio,score_ratio\n\
                   x,sparse,8,2,0,false,1,1,1,1,1,1\n";
    assert!(ordering_check(unknown.as_bytes()).is_err());
}

#[test]
fn empty_grid_is_rejected() {
    let mut cfg = grid();
    cfg.repeats = 0;
    assert!(run_scaling(&cfg).is_err());
    let mut cfg = grid();
    cfg.baseline = Some(("nope".into(), 256));
    cfg.lengths = vec![64];
    assert!(run_scaling(&cfg).is_err());
}
