//! In-context PICO extraction from clinical trial abstracts.
//!
//! The pipeline: a BIO-tagged [`corpus`] becomes instruction records
//! ([`instructgen`]); for every test sentence, demonstrations are chosen by
//! embedding similarity ([`demoindex`]) and rendered into a prompt
//! ([`promptkit`]); a completion endpoint answers ([`llmgateway`]); the
//! answer is parsed and aligned back to tokens ([`extractparse`]) and scored
//! ([`evalkit`]). [`runner`] ties the stages together.

pub mod corpus;
pub mod demoindex;
pub mod evalkit;
pub mod extractparse;
pub mod instructgen;
pub mod llmgateway;
pub mod promptkit;
pub mod runner;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/instructions.md")]
    struct Instructions;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    struct Retrieval;
    #[doc = include_str!("../../../book/src/prompts.md")]
    struct Prompts;
    #[doc = include_str!("../../../book/src/gateway.md")]
    struct Gateway;
    #[doc = include_str!("../../../book/src/parsing.md")]
    struct Parsing;
    #[doc = include_str!("../../../book/src/scoring.md")]
    struct Scoring;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
}
