use pico_icl::corpus::{spans_to_bio, EntitySpan, Label, LabelScheme, LabeledSentence, Split, Token};
use proptest::prelude::*;

/// Any label of the full scheme, coarse or fine.
pub fn label() -> impl Strategy<Value = Label> {
    let scheme = LabelScheme::pico();
    let mut all: Vec<Label> = scheme.coarse_labels().collect();
    all.extend(scheme.fine_labels().iter().cloned());
    proptest::sample::select(all)
}

/// Non-overlapping spans over a sentence of `1..=max_len` tokens.
pub fn spans(max_len: usize) -> impl Strategy<Value = (usize, Vec<EntitySpan>)> {
    (1..=max_len)
        .prop_flat_map(|len| (Just(len), proptest::collection::vec((0..len, 1..5usize, label()), 0..6)))
        .prop_map(|(len, raw)| {
            let mut taken = vec![false; len];
            let mut spans = Vec::new();
            for (start, width, label) in raw {
                let end = (start + width - 1).min(len - 1);
                if taken[start..=end].iter().any(|t| *t) {
                    continue;
                }
                taken[start..=end].iter_mut().for_each(|t| *t = true);
                spans.push(EntitySpan { start, end, label, surface: String::new() });
            }
            spans.sort_by_key(|s| s.start);
            (len, spans)
        })
}

/// A well-formed sentence with tokens `w0 w1 ...`.
pub fn sentence(max_len: usize) -> impl Strategy<Value = LabeledSentence> {
    spans(max_len).prop_map(|(len, spans)| {
        let tags = spans_to_bio(&spans, len).unwrap();
        let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
        LabeledSentence::new("s", Token::from_texts(&words), tags, Split::Test).unwrap()
    })
}
