#![allow(dead_code)]

pub mod gen;
pub mod openai_stub;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pico_icl::corpus::{spans_to_bio, write_conll, Coarse, EntitySpan, Label, LabeledSentence, Split, Token};
use pico_icl::demoindex::{write_embeddings, EmbeddingVector};
use pico_icl::llmgateway::{Backend, FinishReason, GenerationRequest, GenerationResponse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const PARTICIPANTS: &[&str] = &[
    "adults with asthma",
    "children with otitis",
    "postmenopausal women",
    "elderly smokers",
    "obese adolescents",
    "pregnant mothers",
    "stroke survivors",
    "dialysis recipients",
];
const INTERVENTIONS: &[&str] = &[
    "inhaled budesonide",
    "oral metformin",
    "amoxicillin syrup",
    "vitamin D",
    "nicotine patches",
    "aerobic training",
    "folic acid",
    "intravenous iron",
];
const OUTCOMES: &[&str] = &[
    "lung function",
    "ear effusion",
    "bone density",
    "relapse rates",
    "body weight",
    "birth weight",
    "walking speed",
    "haemoglobin concentration",
];

/// Templates with `{P}`, `{I}`, `{O}` slots. Filler words never appear in
/// any entity phrase.
const TEMPLATES: &[&str] = &[
    "We randomized {P} to {I} or placebo and measured {O} .",
    "In {P} , {I} improved {O} after twelve weeks .",
    "{I} given to {P} did not change {O} .",
    "The effect of {I} on {O} was assessed among {P} .",
    "Among {P} receiving {I} , {O} was recorded monthly .",
];
const PLAIN: &[&str] = &[
    "Methods are described elsewhere .",
    "The trial was registered before enrolment began .",
    "Funding came from a national agency .",
];

pub const CLUSTERS: usize = 8;

pub struct Synthetic {
    pub sentence: LabeledSentence,
    pub cluster: usize,
}

fn build(id: String, split: Split, template: &str, cluster: usize) -> LabeledSentence {
    let mut words: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    for piece in template.split(' ') {
        let (coarse, phrase) = match piece {
            "{P}" => (Some(Coarse::Participants), PARTICIPANTS[cluster]),
            "{I}" => (Some(Coarse::Interventions), INTERVENTIONS[cluster]),
            "{O}" => (Some(Coarse::Outcomes), OUTCOMES[cluster]),
            w => (None, w),
        };
        let start = words.len();
        words.extend(phrase.split(' ').map(str::to_string));
        if let Some(c) = coarse {
            spans.push(EntitySpan {
                start,
                end: words.len() - 1,
                label: Label::coarse(c),
                surface: phrase.to_string(),
            });
        }
    }
    let tags = spans_to_bio(&spans, words.len()).expect("spans fit");
    LabeledSentence::new(id, Token::from_texts(&words), tags, split).expect("valid sentence")
}

/// `n` sentences drawn from [`CLUSTERS`] topical clusters. Every cluster
/// shares one participant, intervention and outcome phrase; about one in
/// eight sentences carries no entities. All sentences pass the alignment
/// audit.
pub fn synthetic_corpus(n: usize, split: Split, seed: u64) -> Vec<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("{}-{i}", split.name());
            let cluster = rng.random_range(0..CLUSTERS);
            let sentence = if rng.random_range(0..8) == 0 {
                let text = PLAIN[rng.random_range(0..PLAIN.len())];
                build(id, split, text, cluster)
            } else {
                build(id, split, TEMPLATES[rng.random_range(0..TEMPLATES.len())], cluster)
            };
            Synthetic { sentence, cluster }
        })
        .collect()
}

/// Embeddings clustered around one random centroid per cluster.
pub fn clustered_embeddings(items: &[Synthetic], dim: usize, noise: f64, seed: u64) -> Vec<(String, EmbeddingVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1u64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centroids: Vec<Vec<f64>> = (0..CLUSTERS).map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .map(|it| {
            let v = centroids[it.cluster].iter().map(|c| (c + noise * normal.sample(&mut rng)) as f32).collect();
            (it.sentence.id().to_string(), EmbeddingVector::new(v).unwrap())
        })
        .collect()
}

pub fn write_corpus(path: &Path, items: &[Synthetic]) {
    let sentences: Vec<LabeledSentence> = items.iter().map(|s| s.sentence.clone()).collect();
    write_conll(File::create(path).unwrap(), &sentences).unwrap();
}

/// Corpus, embedding files and a config in `dir`; returns the config path.
pub fn write_experiment(dir: &Path, n_train: usize, n_test: usize, strategy: &str, k: usize, backend: &str) -> PathBuf {
    let train = synthetic_corpus(n_train, Split::Train, 11);
    let test = synthetic_corpus(n_test, Split::Test, 12);
    write_corpus(&dir.join("train.conll"), &train);
    write_corpus(&dir.join("test.conll"), &test);
    write_embeddings(&dir.join("train.emb"), &clustered_embeddings(&train, 32, 0.3, 21)).unwrap();
    write_embeddings(&dir.join("test.emb"), &clustered_embeddings(&test, 32, 0.3, 22)).unwrap();
    let config = format!(
        r#"output_dir = "out"
seed = 7

[corpus]
train = "train.conll"
test = "test.conll"

[selection]
strategy = "{strategy}"
k = {k}

[embeddings]
train = "train.emb"
test = "test.emb"

[gateway]
backend = "{backend}"
model = "mock"
max_in_flight = 4
"#
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Answers with the output of the first demonstration in the prompt, or
/// `no entities` for zero-shot prompts.
pub struct EchoFirstDemo;

impl Backend for EchoFirstDemo {
    fn complete(&self, req: &GenerationRequest) -> GenerationResponse {
        let text = req
            .prompt
            .split("\n\n")
            .find_map(|block| block.strip_prefix("input: ").and_then(|b| b.split_once("\noutput:\n")))
            .map(|(_, out)| out.to_string())
            .filter(|out| !out.is_empty())
            .unwrap_or_else(|| "no entities".to_string());
        GenerationResponse { text, finish_reason: FinishReason::Stop, latency_ms: 0, error: None }
    }
}

pub fn echo_backend() -> Arc<dyn Backend> {
    Arc::new(EchoFirstDemo)
}
