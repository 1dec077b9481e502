use std::collections::HashSet;

use av_rationale::corpus::{
    load_corpus, read_pairs_jsonl, sample_pairs, write_pairs_jsonl, CorpusDoc, CorpusFormat,
    SamplerConfig, SamplingError,
};
use av_rationale::BinLabel;
use av_testkit::synthetic_corpus;
use proptest::prelude::*;

fn doc_of<'a>(docs: &'a [CorpusDoc], text: &str) -> &'a CorpusDoc {
    docs.iter()
        .find(|d| d.text == text)
        .expect("pair text comes from the corpus")
}

#[test]
fn balanced_unique_and_reproducible() {
    let docs = synthetic_corpus(40, 5);
    assert_eq!(docs.len(), 200);
    let cfg = SamplerConfig::new(100, 42);
    let pairs = sample_pairs(&docs, &cfg).unwrap();
    let yes = pairs.iter().filter(|p| p.gold == BinLabel::Yes).count();
    assert_eq!((yes, pairs.len() - yes), (50, 50));
    let mut seen = HashSet::new();
    for p in &pairs {
        let a = doc_of(&docs, &p.text1);
        let b = doc_of(&docs, &p.text2);
        assert_ne!(a.doc_id, b.doc_id);
        assert_eq!(p.gold == BinLabel::Yes, a.author_id == b.author_id);
        let key = if a.doc_id < b.doc_id {
            (&a.doc_id, &b.doc_id)
        } else {
            (&b.doc_id, &a.doc_id)
        };
        assert!(seen.insert(key), "document pair repeated");
    }

    let dir = tempfile::tempdir().unwrap();
    let (f1, f2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_pairs_jsonl(&f1, &pairs).unwrap();
    write_pairs_jsonl(&f2, &sample_pairs(&docs, &cfg).unwrap()).unwrap();
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    assert_eq!(read_pairs_jsonl(&f1).unwrap(), pairs);
    assert_ne!(
        sample_pairs(&docs, &SamplerConfig::new(100, 43)).unwrap(),
        pairs
    );
}

#[test]
fn too_few_positives_reports_achievable() {
    // 3 authors with 2 docs each: 3 positive candidates.
    let docs = synthetic_corpus(3, 2);
    match sample_pairs(&docs, &SamplerConfig::new(10, 1)) {
        Err(SamplingError::Infeasible {
            positives,
            achievable,
            ..
        }) => {
            assert_eq!(positives, 3);
            assert_eq!(achievable, 6);
        }
        other => panic!("expected Infeasible, got {other:?}"),
    }
    assert_eq!(
        sample_pairs(&docs, &SamplerConfig::new(6, 1))
            .unwrap()
            .len(),
        6
    );
}

#[test]
fn truncation_applies() {
    let mut docs = synthetic_corpus(2, 2);
    for d in &mut docs {
        d.text = format!("{} {}", d.doc_id, "word ".repeat(500));
    }
    let mut cfg = SamplerConfig::new(2, 3);
    cfg.max_words_per_doc = 300;
    for p in sample_pairs(&docs, &cfg).unwrap() {
        assert_eq!(p.text1.split_whitespace().count(), 300);
        assert_eq!(p.text2.split_whitespace().count(), 300);
    }
}

#[test]
fn loads_delimited_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    std::fs::write(
        &csv,
        "doc_id,author_id,text\nd1,a,\"hello, world\"\nd2,b,\nd1,c,dup\n",
    )
    .unwrap();
    let loaded = load_corpus(&csv, CorpusFormat::from_path(&csv)).unwrap();
    assert_eq!(loaded.docs.len(), 1);
    assert_eq!(loaded.docs[0].text, "hello, world");
    assert_eq!(loaded.rejects.len(), 2);

    let jl = dir.path().join("c.jsonl");
    std::fs::write(
        &jl,
        "{\"doc_id\":\"x\",\"author_id\":\"a\",\"text\":\"t\"}\n",
    )
    .unwrap();
    assert_eq!(
        load_corpus(&jl, CorpusFormat::from_path(&jl))
            .unwrap()
            .docs
            .len(),
        1
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampler_invariants(authors in 2usize..12, per in 2usize..6, n in 2usize..30, seed in any::<u64>()) {
        let docs = synthetic_corpus(authors, per);
        let cfg = SamplerConfig::new(n, seed);
        match sample_pairs(&docs, &cfg) {
            Ok(pairs) => {
                prop_assert_eq!(pairs.len(), n);
                let yes = pairs.iter().filter(|p| p.gold == BinLabel::Yes).count();
                prop_assert_eq!(yes, n.div_ceil(2));
                let ids: HashSet<_> = pairs.iter().map(|p| &p.pair_id).collect();
                prop_assert_eq!(ids.len(), n);
                prop_assert_eq!(sample_pairs(&docs, &cfg).unwrap(), pairs);
            }
            Err(SamplingError::Infeasible { positives, negatives, achievable, .. }) => {
                prop_assert!(n.div_ceil(2) as u64 > positives || (n / 2) as u64 > negatives);
                prop_assert!((achievable as usize) < n);
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}
