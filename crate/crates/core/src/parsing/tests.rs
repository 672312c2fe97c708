use std::sync::Arc;

use super::*;
use crate::backend::tokenize;
use crate::model::TokenRecord;
use crate::similarity::{ConstantSimilarity, LexicalSimilarity};

fn rules() -> ClassifierRules {
    ClassifierRules::default()
}

fn lexical() -> Similarity {
    Similarity::new(Arc::new(LexicalSimilarity))
}

fn texts(p: &ParsedExplanation) -> Vec<&str> {
    p.reason_texts.iter().map(String::as_str).collect()
}

fn trace_of(text: &str) -> GenerationTrace {
    let toks = tokenize(text)
        .into_iter()
        .map(|t| TokenRecord::new(t, -0.1))
        .collect();
    GenerationTrace::new(toks, "fp").unwrap()
}

#[test]
fn decision_then_numbered_reasons() {
    let raw = "The TEXT is toxic.\n\n1. It insults a group.\n2. It uses a slur.";
    let p = parse_explanation(raw, StageKind::Justify);
    assert_eq!(p.decision_text, "The TEXT is toxic.");
    assert_eq!(texts(&p), ["It insults a group.", "It uses a slur."]);
    assert_eq!(p.decision_sentences.len(), 1);
    assert_eq!(p.source_fingerprint, fingerprint(raw));
}

#[test]
fn decision_header_is_stripped() {
    let raw = "**Decision:** Toxic\n**Reasons:**\n1. **Insult**: calls people names\n2) Threat";
    let p = parse_explanation(raw, StageKind::Justify);
    assert_eq!(p.decision_text, "Toxic");
    assert_eq!(texts(&p), ["**Insult**: calls people names", "Threat"]);
}

#[test]
fn bold_number_markers() {
    let raw = "Yes.\n**1.** First\n**2.** Second";
    assert_eq!(texts(&parse_explanation(raw, StageKind::Justify)), ["First", "Second"]);
}

#[test]
fn continuation_lines_join_the_item() {
    let raw = "Toxic.\n1. Starts here\ncontinues here\n\n   indented tail\n\nTrailing commentary.\n2. Next";
    let p = parse_explanation(raw, StageKind::Justify);
    assert_eq!(
        texts(&p),
        ["Starts here\ncontinues here\n\n   indented tail", "Next"]
    );
}

#[test]
fn refusal_without_list() {
    let raw = "I cannot generate text that is toxic. Is there anything else I can help you with?";
    let p = parse_explanation(raw, StageKind::Justify);
    assert_eq!(p.reason_count(), 0);
    assert_eq!(p.decision_sentences.len(), 2);
    assert!(detect_refusal(raw, &rules()));
    assert!(!detect_refusal("The text is toxic. I cannot agree with it.", &rules()));
    assert!(!detect_refusal("I cannot ignore this.\n1. It has a slur.", &rules()));
}

#[test]
fn no_additional_reason_is_two_sentence_decision() {
    let raw = "No additional reason is required to justify why the TEXT is toxic. The provided REASON(S) are sufficient to explain why the TEXT is toxic.";
    let p = parse_explanation(raw, StageKind::UpholdReasonInternal);
    assert_eq!(p.reason_count(), 0);
    assert_eq!(p.decision_sentences.len(), 2);
    let k = classify_decision(&p.decision_text, StageKind::UpholdReasonInternal, &rules(), &lexical())
        .unwrap();
    assert_eq!(k, DecisionKind::Sufficient);
}

#[test]
fn inline_additional_reason_is_one_reason() {
    let raw = "Decision: Yes, an additional reason is required to justify why the TEXT is toxic.\nAdditional reason: The TEXT uses derogatory language to describe Islam by associating it with \"Satanists\" and \"Nazis,\" which is a form of religious slander and defamation. This kind of language can be hurtful and perpetuate negative stereotypes about Muslims, contributing to a toxic environment of intolerance and prejudice.";
    let p = parse_explanation(raw, StageKind::UpholdReasonExternal);
    assert_eq!(
        p.decision_text,
        "Yes, an additional reason is required to justify why the TEXT is toxic."
    );
    assert_eq!(p.reason_count(), 1);
    assert!(p.reason_texts[0].starts_with("The TEXT uses derogatory"));
    let k = classify_decision(&p.decision_text, StageKind::UpholdReasonExternal, &rules(), &lexical())
        .unwrap();
    assert_eq!(k, DecisionKind::Insufficient);
}

#[test]
fn nonsensical_necessity_answer() {
    let raw = "**Decision:** The TEXT is not toxic.\n**Additional Reason(s):**\n4. **Contextual Clarity**: The text is not ambiguous or misleading. It clearly states a historical perspective on the involvement of men in science, without implying that women or other genders are incapable of scientific endeavors.";
    let p = parse_explanation(raw, StageKind::UpholdStanceNecessity(0));
    assert_eq!(p.decision_text, "The TEXT is not toxic.");
    assert_eq!(p.reason_count(), 1);
    assert!(p.reason_texts[0].starts_with("**Contextual Clarity**"));
    let k = classify_decision(&p.decision_text, StageKind::UpholdStanceNecessity(0), &rules(), &lexical())
        .unwrap();
    assert_eq!(k, DecisionKind::Nonsensical);
}

#[test]
fn stance_statement_at_uphold_is_nonsensical() {
    let k = classify_decision(
        "**Decision:** The text is toxic.",
        StageKind::UpholdStanceSufficiency(0),
        &rules(),
        &lexical(),
    )
    .unwrap();
    assert_eq!(k, DecisionKind::Nonsensical);
}

#[test]
fn sufficiency_keywords() {
    let r = rules();
    let sim = lexical();
    let k = |t: &str| classify_decision(t, StageKind::UpholdReasonInternal, &r, &sim).unwrap();
    assert_eq!(k("The reason may be sufficient on its own."), DecisionKind::Doubtful);
    assert_eq!(k("The given reason is not sufficient."), DecisionKind::Insufficient);
    assert_eq!(k("Insufficient."), DecisionKind::Insufficient);
    assert_eq!(k("No further reasons are needed."), DecisionKind::Sufficient);
    assert_eq!(k("Additional reasons are not needed."), DecisionKind::Sufficient);
    assert_eq!(k("No."), DecisionKind::Sufficient);
    assert_eq!(k("Yes."), DecisionKind::Insufficient);
    assert_eq!(k("I cannot identify any additional reasons."), DecisionKind::Sufficient);
    assert_eq!(k("I can't help with that."), DecisionKind::Refusal);
    assert_eq!(
        k("No additional reason is required. However, more context could be helpful."),
        DecisionKind::Sufficient
    );
}

#[test]
fn similarity_fallback_respects_floor() {
    let r = rules();
    let high = Similarity::new(Arc::new(ConstantSimilarity::new("c", 0.9)));
    let low = Similarity::new(Arc::new(ConstantSimilarity::new("c", 0.2)));
    let text = "Hmm, let me think about it.";
    // Equal means across classes: the first class in order wins.
    assert_eq!(
        classify_decision(text, StageKind::UpholdReasonInternal, &r, &high).unwrap(),
        DecisionKind::Sufficient
    );
    assert_eq!(
        classify_decision(text, StageKind::UpholdReasonInternal, &r, &low).unwrap(),
        DecisionKind::Nonsensical
    );
}

#[test]
fn stance_rules() {
    let r = rules();
    let s = |t: &str| classify_stance(t, &r);
    assert_eq!(s("The TEXT is toxic."), Stance::Toxic);
    assert_eq!(s("Yes, it is."), Stance::Toxic);
    assert_eq!(s("The TEXT is not toxic."), Stance::NonToxic);
    assert_eq!(s("This text is non-toxic."), Stance::NonToxic);
    assert_eq!(s("No, the text isn't toxic."), Stance::NonToxic);
    assert_eq!(s("The text does not contain toxic language."), Stance::NonToxic);
    assert_eq!(s("The TEXT may be toxic."), Stance::MaybeToxic);
    assert_eq!(s("It is potentially toxic."), Stance::MaybeToxic);
    assert_eq!(s("It is not necessarily toxic."), Stance::MaybeToxic);
    assert_eq!(s("It is borderline."), Stance::MaybeToxic);
    assert_eq!(s("Hard to say."), Stance::Unresolved);
}

#[test]
fn unparseable_output_is_all_decision() {
    let raw = "Just some words without structure";
    let p = parse_explanation(raw, StageKind::Justify);
    assert_eq!(p.decision_text, raw);
    assert_eq!(p.reason_count(), 0);
}

#[test]
fn reasons_only_output_has_no_decision() {
    let p = parse_explanation("1. A\n2. B", StageKind::Justify);
    assert!(p.decision_span.is_none());
    assert_eq!(p.reason_count(), 2);
}

#[test]
fn alignment_maps_spans_to_tokens() {
    let raw = "The TEXT is toxic.\n1. It insults.\n2. It threatens.";
    let trace = trace_of(raw);
    let p = align_spans(&trace, &parse_explanation(raw, StageKind::Justify)).unwrap();
    for s in p.spans_in_order() {
        let t = s.tokens.unwrap();
        let joined: String = trace.tokens_in(&t).iter().map(|x| x.text.as_str()).collect();
        assert_eq!(joined, s.text(raw));
        assert!(!t.is_empty());
    }
    assert_eq!(p.reason_spans[0].text(raw), " It insults.");
    assert!(p.reason_spans[0].tokens.unwrap().widened);
    assert_eq!(p.reason_texts[0], "It insults.");
}

#[test]
fn alignment_widens_straddling_tokens() {
    let raw = "Toxic.\n1. Bad";
    // One token covers the marker and the start of the reason.
    let toks = vec![
        TokenRecord::new("Toxic.", -0.1),
        TokenRecord::new("\n", -0.1),
        TokenRecord::new("1. Ba", -0.1),
        TokenRecord::new("d", -0.1),
    ];
    let trace = GenerationTrace::new(toks, "fp").unwrap();
    let p = align_spans(&trace, &parse_explanation(raw, StageKind::Justify)).unwrap();
    let r = p.reason_spans[0];
    assert_eq!(r.text(raw), "1. Bad");
    assert!(r.tokens.unwrap().widened);
    assert_eq!(r.tokens.unwrap().start, 2);
    assert!(!p.decision_span.unwrap().tokens.unwrap().widened);
}

#[test]
fn alignment_rejects_other_text() {
    let parsed = parse_explanation("Toxic.\n1. A", StageKind::Justify);
    assert!(align_spans(&trace_of("Other."), &parsed).is_err());
}

#[test]
fn analyze_classifies_by_stage() {
    let r = rules();
    let sim = lexical();
    let j = analyze(&trace_of("The TEXT is toxic.\n1. Slur."), StageKind::Justify, &r, &sim).unwrap();
    assert_eq!(j.stance, Stance::Toxic);
    assert!(j.decision_kind.is_none());
    let u = analyze(
        &trace_of("I cannot generate text that is toxic."),
        StageKind::UpholdReasonInternal,
        &r,
        &sim,
    )
    .unwrap();
    assert_eq!(u.decision_kind, Some(DecisionKind::Refusal));
    assert!(u.refusal);
    let j = analyze(&trace_of("I can't do that."), StageKind::Justify, &r, &sim).unwrap();
    assert!(j.refusal);
    let j = analyze(
        &trace_of("I cannot generate text that is toxic."),
        StageKind::Justify,
        &r,
        &sim,
    )
    .unwrap();
    assert!(j.refusal);
    assert_eq!(j.stance, Stance::Unresolved);
}
