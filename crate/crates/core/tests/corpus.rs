mod common;

use std::fs;
use std::path::Path;

use hisgt_core::corpus::{
    from_jsonl, ingest_tables, split, synthesize_ground_truth, to_jsonl, ClusteredParams, CodeSystem, IngestConfig,
    PhenotypeMapping,
};
use hisgt_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Tables {
    patients: Vec<String>,
    admissions: Vec<String>,
    diagnoses: Vec<String>,
}

fn write(dir: &Path, t: &Tables) {
    let body = |head: &str, rows: &[String]| format!("{head}\n{}\n", rows.join("\n"));
    fs::write(dir.join("patients.csv"), body("subject_id,gender", &t.patients)).unwrap();
    fs::write(
        dir.join("admissions.csv"),
        body("subject_id,hadm_id,admittime", &t.admissions),
    )
    .unwrap();
    fs::write(
        dir.join("diagnoses.csv"),
        body("subject_id,hadm_id,seq_num,icd_code", &t.diagnoses),
    )
    .unwrap();
}

fn ingest(dir: &Path) -> hisgt_core::Result<hisgt_core::corpus::IngestOutput> {
    ingest_tables(
        &dir.join("patients.csv"),
        &dir.join("admissions.csv"),
        &dir.join("diagnoses.csv"),
        &PhenotypeMapping::default_generic(),
        &IngestConfig {
            system: CodeSystem::Generic,
            ..IngestConfig::default()
        },
    )
}

fn random_tables(seed: u64) -> Tables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tables {
        patients: Vec::new(),
        admissions: Vec::new(),
        diagnoses: Vec::new(),
    };
    let mut hadm = 100;
    for p in 0..40 {
        t.patients.push(format!("{p},F"));
        for _ in 0..rng.random_range(1..4) {
            hadm += 1;
            let day = rng.random_range(1..28);
            let hour = rng.random_range(0..24);
            t.admissions
                .push(format!("{p},{hadm},2101-03-{day:02} {hour:02}:{:02}:00", hadm % 60));
            for s in 1..=rng.random_range(1..5) {
                let code = format!(
                    "{}{:02}",
                    (b'A' + rng.random_range(0..4u8)) as char,
                    rng.random_range(0..20)
                );
                t.diagnoses.push(format!("{p},{hadm},{s},{code}"));
            }
        }
    }
    t
}

#[test]
fn ingestion_ignores_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = random_tables(5);
    write(dir.path(), &t);
    let a = ingest(dir.path()).unwrap();
    assert_eq!(a.records.len(), 40);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..3 {
        t.patients.shuffle(&mut rng);
        t.admissions.shuffle(&mut rng);
        t.diagnoses.shuffle(&mut rng);
        write(dir.path(), &t);
        assert_eq!(ingest(dir.path()).unwrap().records, a.records);
    }
    for r in &a.records {
        assert!(r.visits.windows(2).all(|w| w[0].admit_ts <= w[1].admit_ts));
    }
}

#[test]
fn visits_sorted_and_rejects_reported() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tables {
        patients: vec!["1,M".into()],
        admissions: vec![
            "1,20,2101-05-02".into(),
            "1,10,2101-01-01".into(),
            "1,30,2101-06-01".into(),
        ],
        diagnoses: vec![
            "1,20,1,B01".into(),
            "1,10,2,A02".into(),
            "1,10,1,A01".into(),
            "1,99,1,C01".into(),
        ],
    };
    write(dir.path(), &t);
    let out = ingest(dir.path()).unwrap();
    assert_eq!(out.records.len(), 1);
    let r = &out.records[0];
    let visits: Vec<Vec<&str>> = r
        .visits
        .iter()
        .map(|v| v.codes.iter().map(|c| c.as_str()).collect())
        .collect();
    // admission 30 has no diagnoses and is dropped
    assert_eq!(visits, [vec!["A01", "A02"], vec!["B01"]]);
    assert_eq!(out.rejects.len(), 1);
    assert!(out.rejects[0].reason.contains("unknown admission `99`"));
    assert_eq!(out.rejects[0].source_line, 5);
}

#[test]
fn schema_and_row_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = random_tables(1);
    write(dir.path(), &t);
    fs::write(dir.path().join("admissions.csv"), "subject_id,hadm_id\n1,2\n").unwrap();
    match ingest(dir.path()) {
        Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "admittime"),
        other => panic!("{other:?}"),
    }
    t.admissions[2] = "0,999,not a date".into();
    write(dir.path(), &t);
    match ingest(dir.path()) {
        Err(Error::Row { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_is_a_seeded_partition() {
    let spec = ClusteredParams {
        n_records: 537,
        ..ClusteredParams::toy()
    }
    .build()
    .unwrap();
    let records = synthesize_ground_truth(&spec).unwrap();
    let s = split(&records, 9).unwrap();
    assert_eq!(s, split(&records, 9).unwrap());
    assert_ne!(s.train, split(&records, 10).unwrap().train);
    let mut ids: Vec<&str> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .map(|r| r.patient_id.as_str())
        .collect();
    ids.sort_unstable();
    let mut want: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    want.sort_unstable();
    assert_eq!(ids, want);
    for (got, frac) in [(s.train.len(), 0.72), (s.val.len(), 0.08), (s.test.len(), 0.2)] {
        assert!((got as f64 - 537.0 * frac).abs() <= 1.0, "{got}");
    }
}

#[test]
fn generator_matches_analytic_unigram() {
    let spec = ClusteredParams {
        n_records: 10_000,
        seed: 3,
        ..ClusteredParams::toy()
    }
    .build()
    .unwrap();
    let records = synthesize_ground_truth(&spec).unwrap();
    let mut counts = vec![0.0; spec.codes.len()];
    for r in &records {
        for c in r.codes() {
            counts[spec.codes.iter().position(|x| x == c.as_str()).unwrap()] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let want = spec.expected_unigram();
    assert!((want.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let tv: f64 = counts
        .iter()
        .zip(&want)
        .map(|(c, w)| (c / total - w).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn jsonl_roundtrip() {
    let spec = ClusteredParams {
        n_records: 200,
        ..ClusteredParams::toy()
    }
    .build()
    .unwrap();
    let records = synthesize_ground_truth(&spec).unwrap();
    let text = to_jsonl(&records).unwrap();
    let back = from_jsonl(&text, CodeSystem::Generic).unwrap();
    assert_eq!(back, records);
    assert_eq!(to_jsonl(&back).unwrap(), text);
}
