//! Retrieval-augmented corpus construction.
//!
//! For each pressure map and task: ask the generator for a question, retrieve
//! the closest knowledge entries, sample a few of them, generate candidate
//! answers, score each with the judge and a keyword-plus-similarity feature
//! score, and keep the best.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{
    cosine, EmbeddingProvider, JudgeClient, TextGenClient, DESCRIPTION_TAG, KNOWLEDGE_TAG, QUESTION_TAG, TASK_TAG,
};
use crate::error::{Error, ParseError, Result};
use crate::prompt::TaskType;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: usize,
    pub instruction: String,
    pub answer: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub entries: Vec<KnowledgeEntry>,
    pub dim: usize,
    pub provider: String,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Deserialize)]
struct KbLine {
    instruction: String,
    answer: String,
}

/// Embeds each line's instruction; ids follow input order. Blank lines are
/// ignored.
pub fn build_kb<R: BufRead>(corpus: R, provider: &dyn EmbeddingProvider) -> Result<KnowledgeBase> {
    let mut entries = Vec::new();
    let mut dim = 0;
    for (i, line) in corpus.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KbLine = serde_json::from_str(&line).map_err(|e| ParseError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        let embedding = provider.embed(&rec.instruction)?;
        if dim == 0 {
            dim = embedding.len();
        } else if embedding.len() != dim {
            return Err(Error::data(format!(
                "embedding width changed from {dim} to {} at line {}",
                embedding.len(),
                i + 1
            )));
        }
        entries.push(KnowledgeEntry {
            id: entries.len(),
            instruction: rec.instruction,
            answer: rec.answer,
            embedding,
        });
    }
    Ok(KnowledgeBase {
        entries,
        dim,
        provider: provider.id(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retrieved {
    pub id: usize,
    pub similarity: f64,
}

/// The `min(k, |kb|)` entries most similar to `query`, by descending cosine
/// with ties broken by ascending id.
pub fn retrieve_topk(query: &str, kb: &KnowledgeBase, k: usize, provider: &dyn EmbeddingProvider) -> Result<Vec<Retrieved>> {
    if kb.is_empty() {
        return Err(Error::data("knowledge base is empty"));
    }
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let q = provider.embed(query)?;
    let mut scored: Vec<Retrieved> = kb
        .entries
        .iter()
        .map(|e| Retrieved {
            id: e.id,
            similarity: cosine(&q, &e.embedding),
        })
        .collect();
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
    scored.truncate(k);
    Ok(scored)
}

/// Uniform sample of `m` items without replacement, kept in rank order.
pub fn sample_knowledge<T: Clone>(ranked: &[T], m: usize, seed: u64) -> Vec<T> {
    if m >= ranked.len() {
        return ranked.to_vec();
    }
    let mut r = rng::stream(seed, &[0x534b]);
    let mut idx = rand::seq::index::sample(&mut r, ranked.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| ranked[i].clone()).collect()
}

pub const DEFAULT_LEXICON: &[&str] = &[
    "left", "right", "front", "rear", "back", "forward", "backward", "upright", "reclined", "lean", "leaning",
    "edge", "thigh", "thighs", "tailbone", "pelvis", "spine", "lumbar", "hip", "hips", "buttock", "buttocks",
    "sitting", "bones", "pressure", "weight", "load", "balanced", "uneven", "even", "peak", "contact", "posture",
    "backrest", "seat", "legs", "feet", "circulation", "strain",
];

/// Lexicon terms appearing in `text` as whole words, case-insensitively.
pub fn extract_keywords(text: &str, lexicon: &[String]) -> std::collections::BTreeSet<String> {
    let words: std::collections::BTreeSet<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    lexicon
        .iter()
        .map(|t| t.to_lowercase())
        .filter(|t| words.contains(t))
        .collect()
}

/// `β·coverage + (1−β)·max(0, cosine)`, where coverage is the share of the
/// description's lexicon terms that the candidate also contains.
pub fn score_feat(
    candidate: &str,
    description: &str,
    lexicon: &[String],
    provider: &dyn EmbeddingProvider,
    beta: f64,
) -> Result<f64> {
    if lexicon.is_empty() {
        return Err(Error::config("keyword lexicon is empty"));
    }
    if description.trim().is_empty() {
        return Err(Error::data("description is empty"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0, 1]")));
    }
    let kd = extract_keywords(description, lexicon);
    let kc = extract_keywords(candidate, lexicon);
    let coverage = kd.intersection(&kc).count() as f64 / kd.len().max(1) as f64;
    let sim = if candidate.trim().is_empty() {
        0.0
    } else {
        cosine(&provider.embed(candidate)?, &provider.embed(description)?).max(0.0)
    };
    Ok(beta * coverage + (1.0 - beta) * sim)
}

pub fn score_final(s_llm: f64, s_feat: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("S_llm", s_llm), ("S_feat", s_feat), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(alpha * s_llm + (1.0 - alpha) * s_feat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub m: usize,
    pub n_candidates: usize,
    pub alpha: f64,
    pub beta: f64,
    pub max_in_flight: usize,
    pub lexicon: Vec<String>,
    pub rubric: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            m: 5,
            n_candidates: 3,
            alpha: 0.5,
            beta: 0.5,
            max_in_flight: 4,
            lexicon: DEFAULT_LEXICON.iter().map(|s| s.to_string()).collect(),
            rubric: "score the answer from 0 to 1 as the mean of two subscores: accuracy against the \
                     pressure description and relevance to the question."
                .into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.n_candidates == 0 || self.max_in_flight == 0 {
            return Err(Error::config("k, m, n_candidates and max_in_flight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("alpha and beta must lie in [0, 1]"));
        }
        if self.lexicon.is_empty() {
            return Err(Error::config("keyword lexicon is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub textgen: &'a dyn TextGenClient,
    pub judge: &'a dyn JudgeClient,
    pub embed: &'a dyn EmbeddingProvider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub text: String,
    pub s_llm: f64,
    pub s_feat: f64,
    pub s_final: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub s_llm: f64,
    pub s_feat: f64,
    pub s_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSample {
    pub pressure_file: String,
    pub description: String,
    pub task_type: TaskType,
    pub question: String,
    pub answer: String,
    pub scores: Scores,
    pub kb_ids: Vec<usize>,
    #[serde(skip)]
    pub candidates: Vec<CandidateResponse>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn question_prompt(task: TaskType, description: &str) -> String {
    format!(
        "write one question a user might ask about a seated posture.\n{TASK_TAG} {task}\n{DESCRIPTION_TAG} {description}\n"
    )
}

fn answer_prompt(task: TaskType, description: &str, question: &str, knowledge: &[&str]) -> String {
    let mut p = format!(
        "answer the question using the pressure description and the domain knowledge.\n{TASK_TAG} {task}\n\
         {DESCRIPTION_TAG} {description}\n{QUESTION_TAG} {question}\n{KNOWLEDGE_TAG}\n"
    );
    for k in knowledge {
        p.push_str("- ");
        p.push_str(&k.replace('\n', " "));
        p.push('\n');
    }
    p
}

pub fn build_sample(
    pressure_file: &str,
    description: &str,
    task: TaskType,
    kb: &KnowledgeBase,
    clients: Clients<'_>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<AlignedSample> {
    let mut provenance = vec![format!("sample {pressure_file} [{task}]")];
    let fail = |e: Error, provenance: &[String]| match e {
        Error::Pipeline { .. } => e,
        other => Error::Pipeline {
            message: other.to_string(),
            provenance: provenance.to_vec(),
        },
    };
    let question = clients
        .textgen
        .generate(&question_prompt(task, description), 1)
        .map_err(|e| fail(e, &provenance))?
        .into_iter()
        .next()
        .ok_or_else(|| fail(Error::Client("no question generated".into()), &provenance))?;
    provenance.push(format!("question: {question}"));
    let ranked = retrieve_topk(&question, kb, cfg.k, clients.embed).map_err(|e| fail(e, &provenance))?;
    let chosen = sample_knowledge(&ranked, cfg.m, seed);
    let kb_ids: Vec<usize> = chosen.iter().map(|r| r.id).collect();
    provenance.push(format!("knowledge ids: {kb_ids:?}"));
    let knowledge: Vec<&str> = kb_ids.iter().map(|&i| kb.entries[i].answer.as_str()).collect();
    let texts = clients
        .textgen
        .generate(&answer_prompt(task, description, &question, &knowledge), cfg.n_candidates)
        .map_err(|e| fail(e, &provenance))?;
    let mut warnings = Vec::new();
    if texts.is_empty() {
        return Err(fail(Error::Client("no candidate answers generated".into()), &provenance));
    }
    if texts.len() < cfg.n_candidates {
        warnings.push(format!("{} of {} candidates generated", texts.len(), cfg.n_candidates));
    }
    let mut candidates = Vec::with_capacity(texts.len());
    for text in texts.into_iter().take(cfg.n_candidates) {
        let raw = clients
            .judge
            .judge(&question, &text, description, &cfg.rubric)
            .map_err(|e| fail(e, &provenance))?;
        if !raw.is_finite() {
            return Err(fail(Error::Client(format!("judge returned {raw}")), &provenance));
        }
        let s_llm = raw.clamp(0.0, 1.0);
        if s_llm != raw {
            warnings.push(format!("judge score {raw} clamped"));
        }
        let s_feat =
            score_feat(&text, description, &cfg.lexicon, clients.embed, cfg.beta).map_err(|e| fail(e, &provenance))?;
        let s_final = score_final(s_llm, s_feat, cfg.alpha)?;
        candidates.push(CandidateResponse {
            text,
            s_llm,
            s_feat,
            s_final,
        });
    }
    let finals: Vec<f64> = candidates.iter().map(|c| c.s_final).collect();
    let best = &candidates[select_best(&finals).expect("at least one candidate")];
    Ok(AlignedSample {
        pressure_file: pressure_file.to_string(),
        description: description.to_string(),
        task_type: task,
        question,
        answer: best.text.clone(),
        scores: Scores {
            s_llm: best.s_llm,
            s_feat: best.s_feat,
            s_final: best.s_final,
        },
        kb_ids,
        candidates,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub pressure_file: String,
    pub description: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub per_task: BTreeMap<TaskType, usize>,
    pub emitted: usize,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

/// One sample per (spec, task) pair in input order. Calls run on at most
/// `max_in_flight` threads; failed samples are skipped and reported, and more
/// than half failing is an error.
pub fn build_corpus(
    specs: &[SampleSpec],
    tasks: &[TaskType],
    kb: &KnowledgeBase,
    clients: Clients<'_>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<AlignedSample>, CorpusReport)> {
    cfg.validate()?;
    if specs.is_empty() || tasks.is_empty() {
        return Err(Error::data("corpus needs at least one map and one task type"));
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..tasks.len()).map(move |t| (s, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let results: Vec<Result<AlignedSample>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, t)| {
                let spec = &specs[s];
                let sample_seed = rng::derive_seed(seed, &[s as u64, t as u64]);
                build_sample(&spec.pressure_file, &spec.description, tasks[t], kb, clients, cfg, sample_seed)
            })
            .collect()
    });
    let mut report = CorpusReport::default();
    let mut samples = Vec::new();
    for (r, &(s, t)) in results.into_iter().zip(&jobs) {
        match r {
            Ok(s) => {
                *report.per_task.entry(s.task_type).or_insert(0) += 1;
                report
                    .warnings
                    .extend(s.warnings.iter().map(|w| format!("{} [{}]: {w}", s.pressure_file, s.task_type)));
                samples.push(s);
            }
            Err(e) => report
                .failures
                .push(format!("{} [{}]: {e}", specs[s].pressure_file, tasks[t])),
        }
    }
    report.emitted = samples.len();
    if report.failures.len() * 2 > jobs.len() {
        return Err(Error::Pipeline {
            message: format!("{} of {} samples failed", report.failures.len(), jobs.len()),
            provenance: report.failures.clone(),
        });
    }
    Ok((samples, report))
}

pub fn write_corpus<W: Write>(mut out: W, samples: &[AlignedSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{HashEmbedding, StubJudge, StubTextGen};

    fn kb_from(lines: &[(&str, &str)]) -> KnowledgeBase {
        let text: String = lines
            .iter()
            .map(|(i, a)| serde_json::json!({"instruction": i, "answer": a}).to_string() + "\n")
            .collect();
        build_kb(text.as_bytes(), &HashEmbedding::default()).unwrap()
    }

    #[test]
    fn kb_ids_and_parse_errors() {
        let kb = kb_from(&[("a b", "x"), ("c d", "y"), ("e f", "z")]);
        assert_eq!(kb.entries.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        let empty = build_kb("".as_bytes(), &HashEmbedding::default()).unwrap();
        assert!(empty.is_empty());
        assert!(retrieve_topk("q", &empty, 3, &HashEmbedding::default()).is_err());
        let err = build_kb("{\"instruction\":\"a\",\"answer\":\"b\"}\nnot json\n".as_bytes(), &HashEmbedding::default());
        assert!(matches!(err, Err(Error::Parse(ParseError::Line { line: 2, .. }))));
    }

    #[test]
    fn self_query_ranks_first() {
        let kb = kb_from(&[("left hip pain", "x"), ("sitting too long", "y"), ("tailbone pressure", "z")]);
        let r = retrieve_topk("sitting too long", &kb, 10, &HashEmbedding::default()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].id, 1);
        assert!((r[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampling_keeps_rank_order() {
        let ranked: Vec<usize> = (0..10).collect();
        assert_eq!(sample_knowledge(&ranked, 10, 3), ranked);
        let s = sample_knowledge(&ranked, 5, 3);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_knowledge(&ranked, 5, 3));
    }

    #[test]
    fn final_score_cases() {
        assert_eq!(score_final(0.3, 0.9, 1.0).unwrap(), 0.3);
        assert_eq!(score_final(0.3, 0.9, 0.0).unwrap(), 0.9);
        assert!((score_final(0.8, 0.6, 0.5).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(score_final(1.2, 0.6, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn select_prefers_lowest_index_on_ties() {
        assert_eq!(select_best(&[0.2, 0.9, 0.5]), Some(1));
        assert_eq!(select_best(&[0.5, 0.5]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn keyword_extraction_is_whole_word() {
        let lex: Vec<String> = ["left", "back"].iter().map(|s| s.to_string()).collect();
        let k = extract_keywords("Leftover BACK pain, left side", &lex);
        assert_eq!(k.into_iter().collect::<Vec<_>>(), vec!["back", "left"]);
        assert!(score_feat("a", "b", &[], &HashEmbedding::default(), 0.5).is_err());
    }

    #[test]
    fn pipeline_is_hermetic() {
        let kb = kb_from(&[
            ("why sit upright", "upright sitting keeps the spine neutral."),
            ("tailbone pain", "reclining loads the tailbone."),
            ("thigh numbness", "perching presses on the thighs."),
        ]);
        let clients = Clients {
            textgen: &StubTextGen,
            judge: &StubJudge,
            embed: &HashEmbedding::default(),
        };
        let cfg = PipelineConfig::default();
        let a = build_sample("m.pmap", "reclined, left-weighted", TaskType::Analysis, &kb, clients, &cfg, 4).unwrap();
        let b = build_sample("m.pmap", "reclined, left-weighted", TaskType::Analysis, &kb, clients, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.candidates.len(), 3);
        assert!(a.candidates.iter().all(|c| c.s_final <= a.scores.s_final));
    }
}
