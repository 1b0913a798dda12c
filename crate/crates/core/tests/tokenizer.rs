mod common;

use common::{record, vocab};
use hisgt_core::tokenizer::{
    decode, encode, EncodeOptions, GrammarState, TokenKind, Vocabulary, END_LABEL, END_RECORD, END_VISIT, PADDING,
    START_RECORD,
};
use proptest::prelude::*;

const N_CODES: usize = 12;
const N_LABELS: usize = 4;

fn arb_record() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<usize>>)> {
    (
        proptest::collection::vec(0..N_LABELS, 0..4),
        proptest::collection::vec(proptest::collection::vec(0..N_CODES, 1..6), 0..6),
    )
}

fn build(v: &Vocabulary, labels: &[usize], visits: &[Vec<usize>]) -> hisgt_core::corpus::PatientRecord {
    let l: Vec<&str> = labels.iter().map(|&i| v.labels()[i].as_str()).collect();
    let vs: Vec<Vec<&str>> = visits
        .iter()
        .map(|vv| vv.iter().map(|&i| v.codes()[i].as_str()).collect())
        .collect();
    let slices: Vec<&[&str]> = vs.iter().map(Vec::as_slice).collect();
    record("p", &l, &slices)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode((labels, visits) in arb_record()) {
        let v = vocab(N_LABELS, N_CODES);
        let r = build(&v, &labels, &visits);
        let seq = encode(&r, &v, 64, EncodeOptions::default()).unwrap();
        prop_assert_eq!(seq.dropped_visits, 0);
        prop_assert_eq!(seq.ids.len(), 64);
        prop_assert!(seq.ids[seq.true_len..].iter().all(|&t| t == PADDING));
        prop_assert_eq!(seq.ids[seq.true_len - 1], END_RECORD);
        let d = decode(&seq.ids, &v);
        prop_assert!(d.valid, "{:?}", d.violations);
        prop_assert_eq!(&d.record.labels, &r.labels);
        let got: Vec<_> = d.record.visits.iter().map(|x| &x.codes).collect();
        let want: Vec<_> = r.visits.iter().map(|x| &x.codes).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn truncation_keeps_a_valid_prefix((labels, visits) in arb_record(), max_len in 8usize..30) {
        let v = vocab(N_LABELS, N_CODES);
        let r = build(&v, &labels, &visits);
        let seq = encode(&r, &v, max_len, EncodeOptions::default()).unwrap();
        let d = decode(&seq.ids, &v);
        prop_assert!(d.valid);
        let kept = r.visits.len() - seq.dropped_visits;
        prop_assert_eq!(d.record.visits.len(), kept);
        // adding a visit never shortens the encoding
        let mut longer = visits.clone();
        longer.push(vec![0]);
        let r2 = build(&v, &labels, &longer);
        prop_assert!(encode(&r2, &v, max_len, EncodeOptions::default()).unwrap().true_len >= seq.true_len);
    }

    #[test]
    fn grammar_accepts_exactly_the_record_language(ids in proptest::collection::vec(0u32..(5 + N_LABELS + N_CODES) as u32, 0..14)) {
        let v = vocab(N_LABELS, N_CODES);
        let kinds: Vec<TokenKind> = ids.iter().map(|&i| v.kind(i).unwrap()).collect();
        let mut state = Ok(GrammarState::AtStart);
        for &k in &kinds {
            state = state.and_then(|s| s.next(k));
        }
        let accepted = state == Ok(GrammarState::Done);
        prop_assert_eq!(accepted, in_language(&kinds));
        prop_assert_eq!(accepted, decode(&ids, &v).valid);
    }
}

/// START label* END_LABEL (code+ END_VISIT)* END_RECORD PADDING*, by direct scan.
fn in_language(k: &[TokenKind]) -> bool {
    use TokenKind::*;
    let mut i = 0;
    if k.get(i) != Some(&StartRecord) {
        return false;
    }
    i += 1;
    while k.get(i) == Some(&Label) {
        i += 1;
    }
    if k.get(i) != Some(&EndLabel) {
        return false;
    }
    i += 1;
    loop {
        let start = i;
        while k.get(i) == Some(&Code) {
            i += 1;
        }
        if i == start {
            break;
        }
        if k.get(i) != Some(&EndVisit) {
            return false;
        }
        i += 1;
    }
    if k.get(i) != Some(&EndRecord) {
        return false;
    }
    k[i + 1..].iter().all(|&t| t == Padding)
}

#[test]
fn reference_layout() {
    let v = Vocabulary::new(
        hisgt_core::corpus::CodeSystem::Generic,
        vec!["L1".into()],
        vec!["C1".into(), "C2".into(), "C3".into()],
    )
    .unwrap();
    let r = record("p", &["L1"], &[&["C1", "C2"], &["C3"]]);
    let s = encode(&r, &v, 12, EncodeOptions::default()).unwrap();
    let (l1, c1, c2, c3) = (5, 6, 7, 8);
    assert_eq!(
        s.ids,
        [
            START_RECORD,
            l1,
            END_LABEL,
            c1,
            c2,
            END_VISIT,
            c3,
            END_VISIT,
            END_RECORD,
            PADDING,
            PADDING,
            PADDING
        ]
    );
}
