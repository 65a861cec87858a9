use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rae_core::attack::AttackConfig;
use rae_core::imagecore::{load_png, save_png, synthetic_texture, to_grayscale};
use rae_core::pipeline::*;
use rae_core::rdhgi::extract;

fn corpus(dir: &Path, n: u64) {
    for i in 0..n {
        let side = if i % 2 == 0 { 64 } else { 72 };
        save_png(&synthetic_texture(side, side, 500 + i).unwrap(), dir.join(format!("img{i:02}.png"))).unwrap();
    }
}

fn config(input: &Path, out: PathBuf, jobs: usize) -> RunConfig {
    RunConfig {
        inputs: vec![input.to_path_buf()],
        out_dir: out,
        oracle: OracleSpec::Mlp { seed: 7, classes: 10 },
        attack: AttackConfig {
            seed: 11,
            budget: 0,
            ..AttackConfig::default()
        },
        target: TargetMode::Random,
        payload: PayloadSpec::Random { bits: 96, seed: 3 },
        truncate: false,
        jobs,
        arms: vec![("beam".into(), true), ("baseline".into(), false)],
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn corpus_runs_are_parallelism_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    corpus(&input, 6);
    let a = run_corpus(&config(&input, tmp.path().join("a"), 1)).unwrap();
    let b = run_corpus(&config(&input, tmp.path().join("b"), 4)).unwrap();
    assert_eq!(a.aggregate, b.aggregate);
    let (sa, sb) = (snapshot(&tmp.path().join("a")), snapshot(&tmp.path().join("b")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(sb[k] == *v, "{k} differs");
    }
    // Per image a report and a trace, images only when the attack landed.
    let landed = a.records.iter().filter(|r| r.report.is_some()).count();
    assert_eq!(sa.len(), 2 * 6 * 2 + 2 * landed + 1);
    assert!(landed > 0);
    let csv = String::from_utf8(sa["aggregate.csv"].clone()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with(AGGREGATE_HEADER));
}

#[test]
fn aggregates_match_records() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    corpus(&input, 4);
    let res = run_corpus(&config(&input, tmp.path().join("out"), 2)).unwrap();
    for row in &res.aggregate {
        let recs: Vec<_> = res.records.iter().filter(|r| r.arm == row.arm).collect();
        assert_eq!(row.images, recs.len());
        let mean = recs.iter().map(|r| r.attack_queries as f64).sum::<f64>() / recs.len() as f64;
        assert!((row.mean_queries - mean).abs() < 1e-9);
        assert!(row.mean_psnr_rae_vs_ae > row.mean_psnr_rae_vs_source);
        for r in recs.iter().filter_map(|r| r.report.as_ref()) {
            assert_eq!(r.queries_used, r.attack_queries + 1);
            assert!(r.l2_rdh > 0.0 && r.l2_total > 0.0);
        }
    }
    // Every written RAE verifies against its AE.
    for rec in res.records.iter().filter(|r| r.report.is_some()) {
        let dir = tmp.path().join("out").join(&rec.arm);
        let rae = load_png(dir.join(format!("{}_rae.png", rec.image))).unwrap();
        let ae = load_png(dir.join(format!("{}_ae.png", rec.image))).unwrap();
        assert_eq!(to_grayscale(&rae), to_grayscale(&ae));
        assert!(extract(&rae).unwrap().cover == ae);
        assert!(verify(&rae, Some(&ae)).0.pass);
    }
}

#[test]
fn per_image_failures_do_not_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    corpus(&input, 2);
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let mut cfg = config(&input, tmp.path().join("out"), 2);
    cfg.arms.truncate(1);
    let res = run_corpus(&cfg).unwrap();
    assert_eq!(res.records.len(), 3);
    let broken = res.records.iter().find(|r| r.image == "broken").unwrap();
    assert!(broken.error.is_some() && !broken.attack_success);
}

#[test]
fn rae_query_is_counted_against_a_budget_of_one() {
    // The labeling query on the RAE is the only query outside the attack.
    let x = synthetic_texture(64, 64, 9).unwrap();
    let oracle = OracleSpec::Mlp { seed: 7, classes: 10 }.build(64, 64);
    let t = label(&x, oracle.as_ref()).unwrap();
    let cfg = AttackConfig::untargeted(t);
    let out = make_rae(&x, &rae_core::rdhgi::Payload::random(32, 1), &cfg, oracle.as_ref(), false).unwrap();
    assert_eq!(out.report.queries_used, out.outcome.queries_used + 1);
    assert_eq!(out.report.rae_success, out.report.rae_label != Some(t));
}
