use av_rationale::metrics::{consistency, cs1, cs2};
use av_rationale::parser::{
    extract_confidence_score, extract_intermediate_label, label_from_confidence,
};
use av_rationale::{
    parse_rationale, BinLabel, FeatureAnalysis, FeatureKey, FinalScore, ParseFailureKind,
    RationaleRecord, TriLabel,
};
use av_testkit::SAMPLE_OUTPUT;
use proptest::prelude::*;

use TriLabel::{Maybe, No, Yes};

#[test]
fn sample_output_sample_output() {
    let record = parse_rationale(SAMPLE_OUTPUT, "t2").unwrap();
    assert_eq!(
        record.intermediates(),
        vec![Maybe, No, Yes, No, Yes, No, Maybe, No]
    );
    assert_eq!(record.final_score().value(), 0.375);
    assert_eq!(record.final_score().literal(), "0.375");
    assert_eq!(record.output(), BinLabel::No);
    assert_eq!((cs1(&record), cs2(&record)), (1, 1));
    assert_eq!(consistency(&record), 1.0);
}

#[test]
fn sample_output_missing_tone_and_mood() {
    let text: String = SAMPLE_OUTPUT
        .lines()
        .filter(|l| !l.starts_with("tone and mood"))
        .collect::<Vec<_>>()
        .join("\n");
    let err = parse_rationale(&text, "t2").unwrap_err();
    assert_eq!(
        err.kind,
        ParseFailureKind::MissingKey("tone and mood".into())
    );
}

#[test]
fn sample_output_out_of_range_score() {
    let text = SAMPLE_OUTPUT.replace("final score: 0.375", "final score: 1.2");
    let err = parse_rationale(&text, "t2").unwrap_err();
    assert_eq!(err.kind, ParseFailureKind::BadFinalScore);
}

#[test]
fn sample_output_canonical_form_reparses() {
    let record = parse_rationale(SAMPLE_OUTPUT, "t2").unwrap();
    let again = parse_rationale(&record.to_canonical_json(), "t2").unwrap();
    assert_eq!(again, record);
    assert!(record
        .to_canonical_json()
        .contains("\"final score\": 0.375,"));
}

#[test]
fn label_extraction_examples() {
    assert_eq!(
        extract_intermediate_label("...maintaining a formal tone. Conclusion: YES"),
        Some(Yes)
    );
    assert_eq!(
        extract_intermediate_label("Both texts use commas. MAYBE"),
        Some(Maybe)
    );
    assert_eq!(
        extract_intermediate_label("It says yes early but concludes NO"),
        Some(No)
    );
    assert_eq!(extract_intermediate_label("nothing conclusive"), None);
}

#[test]
fn confidence_examples() {
    let cot = "Taking all this together, I would rate the likelihood as 0.7 (moderate confidence) that both texts share an author.";
    let s = extract_confidence_score(cot).unwrap();
    assert_eq!(s, 0.7);
    assert_eq!(label_from_confidence(s), BinLabel::Yes);
    assert_eq!(
        extract_confidence_score("Analysis...\nConfidence Score: 0.8").unwrap(),
        0.8
    );
    assert_eq!(
        extract_confidence_score("I cannot determine this.")
            .unwrap_err()
            .kind,
        ParseFailureKind::NoScoreFound
    );
    assert_eq!(label_from_confidence(0.5), BinLabel::Yes);
    assert_eq!(label_from_confidence(0.49), BinLabel::No);
}

static LABEL_RE: std::sync::LazyLock<regex::Regex> =
    std::sync::LazyLock::new(|| regex::Regex::new(r"(?i)\b(yes|no|maybe)\b").unwrap());

fn tri() -> impl Strategy<Value = TriLabel> {
    prop_oneof![Just(Yes), Just(No), Just(Maybe)]
}

fn score_literal() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("0".to_string()),
        Just("1".to_string()),
        Just("1.0".to_string()),
        Just("0.5".to_string()),
        (0u32..10_000).prop_map(|n| format!("0.{n:04}")),
        (0u32..1000).prop_map(|n| format!("0.{n}")),
    ]
}

fn feature_text(label: TriLabel) -> impl Strategy<Value = String> {
    // Free text without standalone label words, then the label.
    "[a-zA-Z0-9 ,.;:()'\"\\-\\\\/{}\\[\\]\n\té]{0,80}".prop_map(move |body| {
        let cleaned = LABEL_RE.replace_all(&body, "x").into_owned();
        format!("{cleaned} {label}")
    })
}

fn arb_record() -> impl Strategy<Value = RationaleRecord> {
    (
        proptest::array::uniform8(tri()),
        score_literal(),
        prop_oneof![Just(BinLabel::Yes), Just(BinLabel::No)],
        "[a-z0-9-]{1,12}",
    )
        .prop_flat_map(|(labels, score, output, id)| {
            let texts: Vec<_> = labels.iter().map(|&l| feature_text(l)).collect();
            (texts, Just(score), Just(output), Just(id))
        })
        .prop_map(|(texts, score, output, id)| {
            let features = FeatureKey::ALL
                .iter()
                .zip(texts)
                .map(|(&k, t)| FeatureAnalysis::new(k, t).unwrap())
                .collect();
            RationaleRecord::new(id, features, FinalScore::parse(&score).unwrap(), output).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonical_round_trip(record in arb_record()) {
        let text = record.to_canonical_json();
        let back = parse_rationale(&text, record.pair_id()).unwrap();
        prop_assert_eq!(&back, &record);
        prop_assert_eq!(back.final_score().literal(), record.final_score().literal());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_rationale(&text, "fuzz");
        let _ = extract_confidence_score(&text);
    }

    #[test]
    fn parser_is_total_on_brace_heavy_input(s in "[{}\\[\\]\":,' a-zA-Z0-9.\n]{0,300}") {
        let _ = parse_rationale(&s, "fuzz");
    }
}

proptest! {
    #[test]
    fn trailing_label_free_text_keeps_label(label in tri(), tail in "[a-z ,.]{0,40}") {
        prop_assume!(!LABEL_RE.is_match(&tail));
        let text = format!("Some analysis. {label}");
        prop_assert_eq!(extract_intermediate_label(&format!("{text} {tail}")), Some(label));
    }
}
