use std::sync::OnceLock;

use diffexplain::tokenizer::{TokenSequence, Vocabulary};
use diffexplain::Error;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    prompt: String,
    ids: Vec<u32>,
}

fn clip() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(Vocabulary::clip)
}

fn corpus() -> Vec<Case> {
    serde_json::from_str(include_str!("fixtures/tokenizer_reference.json")).unwrap()
}

#[test]
fn reference_corpus_matches_exactly() {
    let cases = corpus();
    assert_eq!(cases.len(), 100);
    let mismatches: Vec<_> = cases
        .iter()
        .filter(|c| clip().tokenize(&c.prompt).ids() != c.ids.as_slice())
        .map(|c| c.prompt.clone())
        .collect();
    assert!(mismatches.is_empty(), "mismatched prompts: {mismatches:?}");
}

#[test]
fn clip_vocabulary_size() {
    assert_eq!(clip().len(), 49408);
    assert_eq!(clip().merges().len(), 48894);
    assert_eq!(clip().begin_id(), 49406);
    assert_eq!(clip().end_id(), 49407);
    assert_eq!(clip().pad_id(), 0);
    assert_eq!(clip().max_length(), 77);
}

#[test]
fn empty_prompt() {
    let seq = clip().tokenize("");
    assert_eq!(seq.ids()[..2], [49406, 49407]);
    assert!(seq.ids()[2..].iter().all(|&id| id == 0));
    assert_eq!(seq.len(), 77);
    assert_eq!(clip().detokenize(&seq).unwrap(), "");
    assert_eq!(clip().tokenize("   \t\n ").ids(), seq.ids());
}

#[test]
fn long_prompt_truncates() {
    let prompt = vec!["bunny"; 200].join(" ");
    let seq = clip().tokenize(&prompt);
    assert_eq!(seq.len(), 77);
    assert_eq!(seq.content_len(), 75);
    assert_eq!(seq.ids()[76], clip().end_id());
    assert_eq!(seq.ids()[1..76].iter().filter(|&&id| id == clip().end_id()).count(), 0);
}

#[test]
fn hello_world_round_trip() {
    let seq = clip().tokenize("hello world");
    assert_eq!(clip().detokenize(&seq).unwrap(), "hello world");
}

#[test]
fn unknown_id_rejected() {
    let mut ids = vec![0u32; 77];
    ids[0] = 49406;
    ids[1] = 1_000_000_000;
    ids[2] = 49407;
    let seq = TokenSequence::from_ids(ids, clip()).unwrap();
    assert!(matches!(clip().detokenize(&seq), Err(Error::UnknownTokenId(1_000_000_000))));
}

#[test]
fn detokenize_reports_unknown_ids() {
    let tiny = Vocabulary::load(
        br#"{"<|startoftext|>": 0, "<|endoftext|>": 1, "!": 2, "a</w>": 3}"#.as_slice(),
        b"".as_slice(),
    )
    .unwrap();
    let seq = clip().tokenize("zebra crossing");
    assert!(matches!(tiny.detokenize(&seq), Err(Error::UnknownTokenId(_))));
}

#[test]
fn spans_cover_source_words() {
    let prompt = "A Very   Futuristic cityscape, trending on ArtStation";
    let seq = clip().tokenize(prompt);
    let chars: Vec<char> = prompt.chars().collect();
    for (&id, span) in seq.content_ids().iter().zip(seq.spans()) {
        let span = span.expect("tokenized text has spans");
        let source: String = chars[span.start..span.end].iter().collect::<String>().to_lowercase();
        let token = clip().token(id).unwrap().trim_end_matches("</w>");
        assert_eq!(source, token, "token {token:?} vs source {source:?}");
    }
}

#[test]
fn template_prompt_pieces() {
    let seq = clip().tokenize("a cute bunny, detailed, trending on artstation");
    let tokens: Vec<&str> = seq.content_ids().iter().map(|&id| clip().token(id).unwrap()).collect();
    assert_eq!(
        tokens,
        ["a</w>", "cute</w>", "bunny</w>", ",</w>", "detailed</w>", ",</w>", "trending</w>", "on</w>", "art", "station</w>"]
    );
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,10}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn always_max_length(prompt in "\\PC{0,120}") {
        let seq = clip().tokenize(&prompt);
        prop_assert_eq!(seq.len(), 77);
        prop_assert_eq!(seq.ids()[0], clip().begin_id());
        prop_assert_eq!(seq.ids()[seq.end_position()], clip().end_id());
        prop_assert!(seq.content_len() <= 75);
        prop_assert!(seq.ids()[seq.end_position() + 1..].iter().all(|&id| id == clip().pad_id()));
        prop_assert_eq!(clip().tokenize(&prompt), seq);
    }

    #[test]
    fn prefix_stability(p in prop::collection::vec(word(), 1..8), extra in prop::collection::vec(word(), 1..4)) {
        let base = p.join(" ");
        let longer = format!("{base} {}", extra.join(" "));
        let a = clip().tokenize(&base);
        let b = clip().tokenize(&longer);
        prop_assume!(b.content_len() < 75);
        prop_assert_eq!(a.content_ids(), &b.content_ids()[..a.content_len()]);
    }

    #[test]
    fn words_round_trip(p in prop::collection::vec(word(), 0..12)) {
        let prompt = p.join(" ");
        let seq = clip().tokenize(&prompt);
        prop_assert_eq!(clip().detokenize(&seq).unwrap(), prompt);
    }

    #[test]
    fn tokenize_detokenize_is_stable(prompt in "[ -~]{0,80}") {
        let seq = clip().tokenize(&prompt);
        prop_assume!(seq.content_len() < 75);
        let text = clip().detokenize(&seq).unwrap();
        let again = clip().tokenize(&text);
        prop_assert_eq!(again.ids(), seq.ids());
    }
}
