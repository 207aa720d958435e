use dpsyn_core::corpus::*;
use proptest::prelude::*;

const WORDS: &[&str] = &["a", "b", "c", "d", "e", "f", "the", "owl", "write", "poem"];

fn texts() -> impl Strategy<Value = Vec<String>> {
    let text = prop::collection::vec(prop::sample::select(WORDS), 0..14).prop_map(|w| w.join(" "));
    prop::collection::vec(text, 0..30)
}

fn is_subsequence(kept: &Corpus, of: &Corpus) -> bool {
    let mut it = of.records.iter();
    kept.records.iter().all(|r| it.any(|o| o == r))
}

fn check(op: &dyn Fn(&Corpus) -> Corpus, c: &Corpus) -> Result<(), TestCaseError> {
    let once = op(c);
    prop_assert!(is_subsequence(&once, c));
    prop_assert_eq!(op(&once), once);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ops_are_idempotent_and_order_preserving(raw in texts(), n in 1usize..6, min in 0usize..6) {
        let c = Corpus::from_texts(CorpusRole::Real, "r", &raw);
        let t = SimpleTokenizer;
        check(&dedup_exact, &c)?;
        check(&|x| dedup_ngram(x, n, &t).unwrap(), &c)?;
        check(&|x| filter_min_tokens(x, min, &t), &c)?;
        check(&|x| filter_patterns(x, &["write * poem", "the owl"]).unwrap(), &c)?;
        let config = PreprocessConfig { ngram: n, min_tokens: min, patterns: vec!["a * b".into()], ..Default::default() };
        check(&|x| preprocess(x, &config, &t).unwrap(), &c)?;
    }
}

#[test]
fn ngram_fixture_keeps_first_owners() {
    let s = "one two three four five six seven eight nine ten";
    let u = "red orange yellow green blue indigo violet black white grey";
    let c = Corpus::from_texts(
        CorpusRole::Real,
        "r",
        &[
            format!("start {s}"),
            format!("{u} end"),
            format!("{s} again"),
            "one two three four five six seven eight nine".to_string(),
            format!("prefix {u}"),
            "ONE two three four five six seven eight nine ten".to_string(),
        ],
    );
    let out = dedup_ngram(&c, 10, &SimpleTokenizer).unwrap();
    let ids: Vec<&str> = out.ids().collect();
    assert_eq!(ids, ["r-0", "r-1", "r-3"]);
}
