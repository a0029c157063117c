//! Frozen prompt renderings: the encoder concatenation layout and the
//! Alpaca decoder/inference templates must reproduce the stored fixtures
//! byte for byte.

use daicl_core::corpus::Token;
use daicl_core::embed::{tokenize, Vocabulary};
use daicl_core::prompt::{
    build_encoder_instance, render_inference_prompt, InferMode, InstanceLabel, PromptTemplate,
    Task, NER_INSTRUCTION,
};

fn toks(text: &str) -> Vec<Token> {
    tokenize(text)
}

#[test]
fn decoder_ner_prompt_matches_golden() {
    let template = PromptTemplate::alpaca(Task::Ner);
    let contexts = vec![
        toks("the dystrophin gene was altered in mice"),
        toks("researchers injected the virus into muscle cells"),
        toks("physical mapping of the human mhc region"),
    ];
    let text = template
        .render(
            &contexts,
            "XPR2 gene and the dystrophy locus .",
            "XPR2 gene, dystrophy locus",
        )
        .unwrap();
    assert_eq!(text, include_str!("fixtures/decoder_prompt_ner.txt"));
    // The Appendix-style instruction is embedded verbatim.
    assert!(text.contains("Please identify all entities from the input sentence."));
    assert!(text.contains(NER_INSTRUCTION));
}

#[test]
fn decoder_sa_prompt_matches_golden() {
    let template = PromptTemplate::alpaca(Task::Sa);
    let text = template
        .render(
            &[
                toks("great sound quality for the price"),
                toks("battery barely lasts an hour"),
            ],
            "the speaker arrived broken and support ignored me",
            "negative",
        )
        .unwrap();
    assert_eq!(text, include_str!("fixtures/decoder_prompt_sa.txt"));
}

#[test]
fn decoder_prompt_without_contexts_matches_golden() {
    let template = PromptTemplate::alpaca(Task::Sa);
    let text = template.render(&[], "works fine", "").unwrap();
    assert_eq!(text, include_str!("fixtures/decoder_prompt_no_context.txt"));
}

#[test]
fn inference_prompts_match_goldens() {
    let demos = vec![
        (
            "In the study at the University 's Institute for Human Gene Therapy , researchers altered a common-cold virus ."
                .to_string(),
            "Institute for Human Gene Therapy".to_string(),
        ),
        ("Both drugs are types of interferon .".to_string(), "None".to_string()),
        (
            "When it approved Avonex in May , the FDA said both Biogen 's product and Betaseron were developed ."
                .to_string(),
            "Avonex, FDA, Biogen, Betaseron".to_string(),
        ),
    ];
    let retrieved = render_inference_prompt(
        "Physical mapping 220 kb centromeric of the human MHC .",
        &demos,
        Task::Ner,
        InferMode::Retrieved,
    )
    .unwrap();
    assert_eq!(retrieved, include_str!("fixtures/inference_prompt_ner.txt"));

    let none = render_inference_prompt(
        "Physical mapping 220 kb centromeric of the human MHC .",
        &[],
        Task::Ner,
        InferMode::None,
    )
    .unwrap();
    assert_eq!(none, include_str!("fixtures/inference_prompt_ner_none.txt"));

    let sa = render_inference_prompt(
        "the speaker arrived broken",
        &[("great sound".to_string(), "positive".to_string())],
        Task::Sa,
        InferMode::Random,
    )
    .unwrap();
    assert_eq!(sa, include_str!("fixtures/inference_prompt_sa.txt"));
}

#[test]
fn encoder_instance_rendering_matches_golden() {
    let source = toks("XPR2 gene and the dystrophy locus .");
    let contexts: Vec<Vec<Token>> = [
        "physical mapping of the human mhc",
        "the dystrophin gene in mice",
        "dna sequence analysis of the segment",
        "the ring1 hke6 and hke4 genes",
        "expression in fibroblasts and keratinocytes",
    ]
    .iter()
    .map(|s| toks(s))
    .collect();
    let mut vocab = Vocabulary::new();
    for t in &source {
        vocab.intern(t.as_str());
    }
    for c in &contexts {
        for t in c {
            vocab.intern(t.as_str());
        }
    }
    let inst =
        build_encoder_instance(&source, InstanceLabel::Unlabeled, &contexts, &vocab, 512).unwrap();
    let rendered: Vec<&str> = inst
        .ids
        .iter()
        .map(|&id| vocab.token(id).unwrap())
        .collect();
    assert_eq!(
        rendered.join(" "),
        include_str!("fixtures/encoder_instance.txt")
    );
}
