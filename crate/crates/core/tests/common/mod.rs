#![allow(dead_code)]

pub mod mock_server;

use std::path::{Path, PathBuf};

use haf::backend::{PromptMatcher, ScriptEntry, ScriptResponse, Segment};
use haf::model::{StageKind, Stance};
use haf::pipeline::{build_prompt, PromptTemplates};
use serde_json::json;

pub const NO_MORE: &str = "No additional reason is required to justify why the TEXT is toxic.";

pub type Segs = Vec<(String, f64)>;

/// One synthetic sample and the scripted model's answer at every stage.
pub struct Case {
    pub id: &'static str,
    pub text: &'static str,
    pub prob: f64,
    pub stance: Stance,
    pub reasons: Vec<&'static str>,
    pub justify: Segs,
    pub uphold: Vec<(StageKind, Segs)>,
}

/// Decision followed by a numbered list, each piece with its own logprob.
pub fn answer(decision: (&str, f64), items: &[(&str, f64)]) -> Segs {
    let mut out = vec![(decision.0.to_string(), decision.1)];
    for (i, (t, lp)) in items.iter().enumerate() {
        out.push((format!("\n{}. {t}", i + 1), *lp));
    }
    out
}

pub fn plain(text: &str, lp: f64) -> Segs {
    vec![(text.to_string(), lp)]
}

fn entry(prompt: String, segs: &Segs) -> ScriptEntry {
    ScriptEntry {
        matcher: PromptMatcher::Prompt(prompt),
        response: ScriptResponse::Segments(
            segs.iter()
                .map(|(text, logprob)| Segment {
                    text: text.clone(),
                    logprob: *logprob,
                })
                .collect(),
        ),
    }
}

pub fn script(cases: &[Case]) -> Vec<ScriptEntry> {
    let t = PromptTemplates::default();
    let mut out = Vec::new();
    for c in cases {
        let reasons: Vec<String> = c.reasons.iter().map(|r| r.to_string()).collect();
        out.push(entry(
            build_prompt(&t, StageKind::Justify, c.text, Stance::Unresolved, &[]).unwrap(),
            &c.justify,
        ));
        for (stage, segs) in &c.uphold {
            out.push(entry(
                build_prompt(&t, *stage, c.text, c.stance, &reasons).unwrap(),
                segs,
            ));
        }
    }
    out
}

/// Six samples, one per pipeline path: toxic with several reasons,
/// non-toxic with several reasons, maybe toxic, refusal, non-toxic with a
/// single reason, and a nonsensical uphold decision.
pub fn cases() -> Vec<Case> {
    use StageKind::*;
    vec![
        Case {
            id: "toxic-multi",
            text: "You people are vermin and everyone in your neighborhood deserves what is coming to them soon.",
            prob: 0.92,
            stance: Stance::Toxic,
            reasons: vec![
                "It dehumanizes a group by calling them vermin.",
                "It implies a threat of violence against the neighborhood.",
            ],
            justify: answer(
                ("The TEXT is toxic.", -0.1),
                &[
                    ("It dehumanizes a group by calling them vermin.", -0.4),
                    ("It implies a threat of violence against the neighborhood.", -0.7),
                ],
            ),
            uphold: vec![
                (
                    UpholdReasonInternal,
                    answer(
                        ("Yes, additional reasons are required.", -0.3),
                        &[("It incites hostility toward an entire community.", -0.9)],
                    ),
                ),
                (UpholdReasonExternal, plain(NO_MORE, -0.05)),
                (UpholdStanceSufficiency(0), plain(NO_MORE, -0.2)),
                (
                    UpholdStanceSufficiency(1),
                    answer(
                        ("Yes, an additional reason is required.", -0.4),
                        &[("Calling people vermin is degrading.", -0.6)],
                    ),
                ),
            ],
        },
        Case {
            id: "nontoxic-multi",
            text: "I think the referee made a terrible call in the last minute of the game, but that is just sports.",
            prob: 0.55,
            stance: Stance::NonToxic,
            reasons: vec![
                "It criticizes a decision rather than a person.",
                "It contains no insults or slurs.",
                "It acknowledges that disagreement is part of sports.",
            ],
            justify: answer(
                ("The TEXT is not toxic.", -0.15),
                &[
                    ("It criticizes a decision rather than a person.", -0.2),
                    ("It contains no insults or slurs.", -0.35),
                    ("It acknowledges that disagreement is part of sports.", -0.5),
                ],
            ),
            uphold: vec![
                (UpholdReasonInternal, plain(NO_MORE, -0.1)),
                (
                    UpholdReasonExternal,
                    answer(
                        ("The provided reasons may not be sufficient.", -0.5),
                        &[("Sports commentary is commonly heated.", -0.8)],
                    ),
                ),
                (
                    UpholdStanceNecessity(0),
                    answer(
                        ("Yes, an additional reason is required.", -0.3),
                        &[("It criticizes a call rather than a person.", -0.5)],
                    ),
                ),
                (UpholdStanceNecessity(1), plain("No additional reason is required.", -0.15)),
                (UpholdStanceNecessity(2), plain("Additional reasons may be needed.", -0.6)),
            ],
        },
        Case {
            id: "maybe",
            text: "Honestly those fans are a bunch of clowns and they should stay home if they cannot behave.",
            prob: 0.58,
            stance: Stance::MaybeToxic,
            reasons: vec![
                "It mocks fans by calling them clowns.",
                "The insult is mild and not aimed at an identity.",
            ],
            justify: answer(
                ("The TEXT may be toxic.", -0.45),
                &[
                    ("It mocks fans by calling them clowns.", -0.3),
                    ("The insult is mild and not aimed at an identity.", -0.55),
                ],
            ),
            uphold: vec![
                (UpholdReasonInternal, plain(NO_MORE, -0.25)),
                (UpholdReasonExternal, plain(NO_MORE, -0.3)),
            ],
        },
        Case {
            id: "refusal",
            text: "Women who dress like that are asking for it and deserve every bit of harassment they get.",
            prob: 0.97,
            stance: Stance::Unresolved,
            reasons: vec![],
            justify: plain(
                "I cannot generate text that is toxic. Is there anything else I can help you with?",
                -0.02,
            ),
            uphold: vec![],
        },
        Case {
            id: "nontoxic-single",
            text: "The weather in the mountains was lovely this weekend and we hiked for six hours straight.",
            prob: 0.5,
            stance: Stance::NonToxic,
            reasons: vec!["It describes a pleasant hiking trip."],
            justify: answer(
                ("The TEXT is not toxic.", -0.05),
                &[("It describes a pleasant hiking trip.", -0.1)],
            ),
            uphold: vec![
                (UpholdReasonInternal, plain(NO_MORE, -0.05)),
                (UpholdReasonExternal, plain(NO_MORE, -0.07)),
            ],
        },
        Case {
            id: "nonsensical",
            text: "Get out of this country, nobody wants your kind here and we will make sure that you leave.",
            prob: 0.88,
            stance: Stance::Toxic,
            reasons: vec!["It tells a group of people to leave the country."],
            justify: answer(
                ("The TEXT is toxic.", -0.08),
                &[("It tells a group of people to leave the country.", -0.3)],
            ),
            uphold: vec![
                (UpholdReasonInternal, plain("The TEXT is toxic.", -0.2)),
                (UpholdReasonExternal, plain("The TEXT is toxic.", -0.2)),
                (UpholdStanceSufficiency(0), plain("The TEXT is toxic.", -0.2)),
            ],
        },
    ]
}

/// Rows the sampling policy drops: too short, and outside both bands.
pub fn filtered_rows() -> Vec<(&'static str, &'static str, f64)> {
    vec![
        ("too-short", "You are an idiot.", 0.95),
        (
            "between-bands",
            "This thread is a mess of half-baked opinions and nobody is reading the article at all.",
            0.7,
        ),
    ]
}

/// Scores pinned for a few pairs; everything else falls back to word overlap.
pub fn similarity_config() -> serde_json::Value {
    json!({
        "kind": "scripted",
        "id": "scripted-sim",
        "pairs": [
            ["It dehumanizes a group by calling them vermin.",
             "It implies a threat of violence against the neighborhood.", 0.3],
            ["It criticizes a decision rather than a person.",
             "It criticizes a call rather than a person.", 0.9]
        ],
        "fallback": {"kind": "lexical"}
    })
}

/// Writes script, dataset and config for `cases` into `dir`.
/// Returns (config path, dataset path).
pub fn write_fixture(dir: &Path, cases: &[Case], extra: serde_json::Value) -> (PathBuf, PathBuf) {
    std::fs::write(
        dir.join("script.json"),
        serde_json::to_string_pretty(&script(cases)).unwrap(),
    )
    .unwrap();
    let mut data = String::new();
    for c in cases {
        data.push_str(&json!({"id": c.id, "comment": c.text, "toxicity": c.prob}).to_string());
        data.push('\n');
    }
    for (id, text, p) in filtered_rows() {
        data.push_str(&json!({"id": id, "comment": text, "toxicity": p}).to_string());
        data.push('\n');
    }
    let dataset = dir.join("synthetic.jsonl");
    std::fs::write(&dataset, data).unwrap();

    let mut config = json!({
        "backend": {"kind": "scripted", "model_id": "mock-llm", "script": "script.json"},
        "similarity": similarity_config(),
        "schema": {"text": "comment", "id": "id", "probability": "toxicity"},
        "sampling": {"rng_seed": 7},
        "concurrency": 3
    });
    if let (Some(base), Some(more)) = (config.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    (path, dataset)
}

/// Every file under `dir`, relative path to contents.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Chat replies for the mock HTTP server, keyed by prompt.
pub fn chat_table(cases: &[Case]) -> std::collections::HashMap<String, Segs> {
    script(cases)
        .into_iter()
        .map(|e| {
            let PromptMatcher::Prompt(p) = e.matcher else {
                unreachable!()
            };
            let ScriptResponse::Segments(segs) = e.response else {
                unreachable!()
            };
            (p, segs.into_iter().map(|s| (s.text, s.logprob)).collect())
        })
        .collect()
}
