#![allow(dead_code)]

pub mod oracle;

use hisgt_core::corpus::{CodeId, CodeSystem, PatientRecord, Visit};
use hisgt_core::model::FrozenTables;
use hisgt_core::tokenizer::Vocabulary;

/// Deterministic pseudo-random values in [-1, 1).
pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| hisgt_nn::rng::uniform(seed, i) * 2.0 - 1.0)
        .collect()
}

/// Vocabulary with `n_labels` labels and `n_codes` generic codes.
pub fn vocab(n_labels: usize, n_codes: usize) -> Vocabulary {
    let labels = (0..n_labels).map(|i| format!("label{i}")).collect();
    let codes = (0..n_codes).map(|i| format!("A{:03}", i)).collect();
    Vocabulary::new(CodeSystem::Generic, labels, codes).unwrap()
}

/// Random frozen tables shaped like real ones: zero hierarchy rows outside
/// codes, zero semantic rows for specials.
pub fn tables(v: &Vocabulary, d_h: usize, d_s: usize, seed: u64) -> FrozenTables {
    let mut h = noise(v.len() * d_h, seed);
    let mut s = noise(v.len() * d_s, seed + 1);
    for id in 0..v.len() as u32 {
        let i = id as usize;
        if !v.is_code(id) {
            h[i * d_h..(i + 1) * d_h].fill(0.0);
        }
        if v.is_special(id) {
            s[i * d_s..(i + 1) * d_s].fill(0.0);
        }
    }
    FrozenTables {
        hier: Some((h, "h".into())),
        sem: Some((s, "s".into())),
    }
}

pub fn record(id: &str, labels: &[&str], visits: &[&[&str]]) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
        visits: visits
            .iter()
            .enumerate()
            .map(|(i, v)| Visit {
                admit_ts: i as i64,
                codes: v.iter().map(|c| CodeId::new(CodeSystem::Generic, c).unwrap()).collect(),
            })
            .collect(),
    }
}

pub struct World {
    pub spec: hisgt_core::corpus::GroundTruthSpec,
    pub records: Vec<PatientRecord>,
    pub vocab: Vocabulary,
    pub tables: FrozenTables,
}

/// Toy generator corpus with GNN hierarchy vectors and fallback semantics.
pub fn toy_world(n_records: usize, d_h: usize, d_s: usize) -> World {
    use hisgt_core::corpus::{synthesize_ground_truth, ClusteredParams};
    use hisgt_core::hierarchy::{train_hier_embeddings, CodeSystemDescriptor, GnnConfig, GraphOptions, HierGraph};
    use hisgt_core::semantics::fallback_embed;

    let params = ClusteredParams {
        n_records,
        ..ClusteredParams::toy()
    };
    let spec = params.build().unwrap();
    let records = synthesize_ground_truth(&spec).unwrap();
    let vocab = Vocabulary::new(spec.system, spec.mapping.labels.clone(), spec.codes.clone()).unwrap();
    let graph = HierGraph::build(
        vocab.codes().iter().map(String::as_str),
        &CodeSystemDescriptor::generic(),
        GraphOptions::default(),
    )
    .unwrap();
    let hier = train_hier_embeddings(
        &graph,
        &GnnConfig {
            dim: d_h,
            epochs: 200,
            ..GnnConfig::default()
        },
    )
    .unwrap()
    .table;
    let sem = fallback_embed(&params.catalog(&spec), d_s, 0).unwrap();
    let tables = FrozenTables::from_tables(&vocab, Some(&hier), Some(&sem));
    World {
        spec,
        records,
        vocab,
        tables,
    }
}

/// Replace every parameter with seeded noise so no gradient path is dead.
pub fn scramble<T: hisgt_nn::Scalar>(store: &mut hisgt_nn::ParamStore<T>, seed: u64) {
    for (k, p) in store.iter_mut().enumerate() {
        let n = p.value().numel();
        let gain = p.name.ends_with(".g");
        let vals = noise(n, seed + k as u64);
        for (x, r) in p.value_mut().data_mut().iter_mut().zip(vals) {
            *x = T::from_f64(if gain { 1.0 + 0.2 * r } else { 0.3 * r });
        }
    }
}
