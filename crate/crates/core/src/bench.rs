//! Accuracy benchmarks: corpus and QA ingestion, a synthetic split-knowledge
//! corpus, the scenario runner and accuracy ± standard error reporting.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::attestation::{generate_signing_key, AttestationPolicy};
use crate::embedding::{tokenize, Embedder, HashedEmbedder};
use crate::federation::LoopbackFederation;
use crate::inference::{default_template, InferenceBackend, PromptTemplate};
use crate::orchestrator::{
    assemble_prompt, score_rerank, Orchestrator, OrchestratorSettings, OverlapScorer,
    RelevanceScorer, DEFAULT_POLL_TIMEOUT,
};
use crate::par::{self, ExecMode};
use crate::protocol::{Chunk, FederationConfig, Query, SiteSelection, Strategy};
use crate::provider::{ProviderError, ProviderRuntime};
use crate::vector_store::VectorIndex;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{path}: line {line}: {reason}")]
    Ingest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("federation: {0}")]
    Federation(String),
}

impl From<ProviderError> for BenchError {
    fn from(e: ProviderError) -> Self {
        BenchError::Federation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
    Maybe,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Yes, Label::No, Label::Maybe];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
            Label::Maybe => "maybe",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "yes" => Ok(Label::Yes),
            "no" => Ok(Label::No),
            "maybe" => Ok(Label::Maybe),
            other => Err(format!("label {other:?} is not one of yes, no, maybe")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub gold: Label,
}

fn read_lines(path: &Path) -> Result<String, BenchError> {
    fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn string_field(obj: &serde_json::Value, field: &str) -> Result<String, String> {
    match obj.get(field) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(serde_json::Value::Number(n)) if field == "id" => Ok(n.to_string()),
        Some(_) => Err(format!("field {field:?} must be a string")),
        None => Err(format!("missing field {field:?}")),
    }
}

/// One `{"id","title","text"}` object per line; chunk text is
/// `title + "\n" + text`.
pub fn load_corpus(path: &Path, provider_id: &str, product: &str) -> Result<Vec<Chunk>, BenchError> {
    let body = read_lines(path)?;
    let mut chunks = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| BenchError::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let obj: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = string_field(&obj, "id").map_err(err)?;
        let title = string_field(&obj, "title").map_err(err)?;
        let text = string_field(&obj, "text").map_err(err)?;
        let chunk = Chunk::new(provider_id, product, &id, format!("{title}\n{text}"))
            .map_err(|e| err(e.to_string()))?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

/// One `{"id","question","answer"}` object per line.
pub fn load_qa(path: &Path) -> Result<Vec<QAItem>, BenchError> {
    let body = read_lines(path)?;
    let mut items = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| BenchError::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let obj: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let id = string_field(&obj, "id").map_err(err)?;
        let question = string_field(&obj, "question").map_err(err)?;
        let gold = string_field(&obj, "answer")
            .map_err(err)?
            .parse::<Label>()
            .map_err(err)?;
        items.push(QAItem { id, question, gold });
    }
    Ok(items)
}

/// A provider's data, grouped by product name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCorpus {
    pub site_id: String,
    pub products: BTreeMap<String, Vec<Chunk>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSet {
    pub sites: Vec<SiteCorpus>,
    pub qa: Vec<QAItem>,
}

pub const SYNTH_PRODUCTS: [&str; 2] = ["pubmed", "textbooks"];
/// Retrieval depth the synthetic corpus is checked against.
pub const SYNTH_DEPTH: usize = 8;
const MAX_REDRAW_ROUNDS: usize = 64;

pub fn site_name(i: usize) -> String {
    format!("site{i}")
}

struct Words {
    keyword: String,
    topics: [String; 3],
    fillers: Vec<String>,
}

struct WordSource {
    rng: SplitMix64,
    used: HashSet<String>,
}

impl WordSource {
    const CONSONANTS: &'static [u8] = b"bcdfghjklmnprstvwxz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn word(&mut self) -> String {
        loop {
            let len = self.rng.gen_range(6..=9);
            let w: String = (0..len)
                .map(|i| {
                    let set = if i % 2 == 0 { Self::CONSONANTS } else { Self::VOWELS };
                    set[self.rng.gen_range(0..set.len())] as char
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, fillers: usize) -> Words {
        Words {
            keyword: self.word(),
            topics: [self.word(), self.word(), self.word()],
            fillers: (0..fillers).map(|_| self.word()).collect(),
        }
    }
}

fn question_text(w: &Words) -> String {
    format!("Does {} relate to {} {} {}?", w.keyword, w.topics[0], w.topics[1], w.topics[2])
}

fn relevant_text(w: &Words, gold: Label) -> String {
    format!(
        "Finding on {}: {} {} {} observed. ANSWER::{gold}",
        w.keyword, w.topics[0], w.topics[1], w.topics[2]
    )
}

fn distractor_text(w: &Words, filler: &str) -> String {
    format!("Notes on {} {} {} reviewed in {filler}", w.topics[0], w.topics[1], w.topics[2])
}

fn home(i: usize, sites: usize) -> (usize, &'static str) {
    (i % sites, SYNTH_PRODUCTS[(i / sites) % SYNTH_PRODUCTS.len()])
}

fn assemble(words: &[Words], golds: &[Label], sites: usize) -> SyntheticSet {
    let mut corpora: Vec<SiteCorpus> = (0..sites)
        .map(|s| SiteCorpus {
            site_id: site_name(s),
            products: SYNTH_PRODUCTS.iter().map(|p| (p.to_string(), Vec::new())).collect(),
        })
        .collect();
    let mut qa = Vec::with_capacity(words.len());
    for (i, (w, &gold)) in words.iter().zip(golds).enumerate() {
        let (s, p) = home(i, sites);
        let site = site_name(s);
        corpora[s]
            .products
            .get_mut(p)
            .expect("synthetic product")
            .push(Chunk::new(&site, p, &format!("r{i}"), relevant_text(w, gold)).expect("valid chunk"));
        let mut fillers = w.fillers.iter();
        for (s, corpus) in corpora.iter_mut().enumerate() {
            let site = site_name(s);
            for (p, chunks) in corpus.products.iter_mut() {
                for j in 0..SYNTH_DEPTH {
                    let text = distractor_text(w, fillers.next().expect("enough fillers"));
                    chunks.push(Chunk::new(&site, p, &format!("d{i}-{j}"), text).expect("valid chunk"));
                }
            }
        }
        qa.push(QAItem {
            id: format!("q{i:04}"),
            question: question_text(w),
            gold,
        });
    }
    SyntheticSet { sites: corpora, qa }
}

/// Indices of questions whose planted split does not hold under the
/// reference embedder and the overlap scorer at depth `SYNTH_DEPTH`.
fn violations(set: &SyntheticSet, mode: ExecMode) -> Vec<usize> {
    let embedder = HashedEmbedder::default();
    let mut indexes = Vec::new();
    for corpus in &set.sites {
        for (p, chunks) in &corpus.products {
            let index = VectorIndex::ingest_with(p, chunks.clone(), &embedder, mode).expect("synthetic ingest");
            indexes.push(index);
        }
    }
    let sites = set.sites.len();
    let flags = par::map_range(mode, set.qa.len(), |i| {
        let item = &set.qa[i];
        let q = embedder.embed_text(&item.question);
        let (s, p) = home(i, sites);
        let relevant_id = format!("{}/{p}/r{i}", site_name(s));
        let mut pool = Vec::new();
        for index in &indexes {
            let hits = index
                .top_k_with(&q, SYNTH_DEPTH, ExecMode::Sequential)
                .expect("synthetic top-k");
            pool.extend(hits);
        }
        let Some(rel) = pool.iter().find(|c| c.chunk.id == relevant_id) else {
            return true;
        };
        let rel_overlap = score_rerank(&item.question, &rel.chunk.text);
        pool.iter().filter(|c| c.chunk.id != relevant_id).any(|c| {
            c.chunk.text.contains("ANSWER::")
                || c.score >= rel.score
                || score_rerank(&item.question, &c.chunk.text) >= rel_overlap
        })
    });
    flags
        .into_iter()
        .enumerate()
        .filter_map(|(i, bad)| bad.then_some(i))
        .collect()
}

/// Split-knowledge corpus: question i has exactly one relevant chunk,
/// carrying its answer marker, on site `i mod sites`. Every product of every
/// site also holds `SYNTH_DEPTH` topical distractors per question without a
/// marker, so a site lacking the answer retrieves no marker at all.
/// Words are redrawn for any question whose split does not hold.
pub fn synth_corpus(n_questions: usize, sites: usize, seed: u64) -> Result<SyntheticSet, BenchError> {
    synth_corpus_with(n_questions, sites, seed, ExecMode::preferred())
}

pub fn synth_corpus_with(
    n_questions: usize,
    sites: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SyntheticSet, BenchError> {
    if sites == 0 {
        return Err(BenchError::Config("sites must be at least 1".into()));
    }
    let fillers = sites * SYNTH_PRODUCTS.len() * SYNTH_DEPTH;
    let mut src = WordSource {
        rng: SplitMix64::seed_from_u64(seed),
        used: ["finding", "observed", "answer", "notes", "reviewed", "does", "relate"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut words = Vec::with_capacity(n_questions);
    let mut golds = Vec::with_capacity(n_questions);
    for _ in 0..n_questions {
        words.push(src.words(fillers));
        golds.push(Label::ALL[src.rng.gen_range(0..Label::ALL.len())]);
    }
    for _ in 0..MAX_REDRAW_ROUNDS {
        let set = assemble(&words, &golds, sites);
        let bad = violations(&set, mode);
        if bad.is_empty() {
            return Ok(set);
        }
        for i in bad {
            words[i] = src.words(fillers);
        }
    }
    Err(BenchError::Config(format!(
        "no valid synthetic corpus after {MAX_REDRAW_ROUNDS} rounds"
    )))
}

/// Binomial standard error in percentage points.
pub fn binomial_se(accuracy_pct: f64, n: usize) -> f64 {
    let p = accuracy_pct / 100.0;
    100.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scenario {
    Cot,
    SingleSite(String),
    FedragEmbeddingRank,
    FedragRerank,
}

impl FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cot" => Ok(Scenario::Cot),
            "fedrag_embedding_rank" => Ok(Scenario::FedragEmbeddingRank),
            "fedrag_rerank" => Ok(Scenario::FedragRerank),
            _ => match s.strip_prefix("single_site:") {
                Some(id) if !id.is_empty() => Ok(Scenario::SingleSite(id.to_string())),
                _ => Err(BenchError::Config(format!("unknown scenario {s:?}"))),
            },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Cot => f.write_str("cot"),
            Scenario::SingleSite(id) => write!(f, "single_site:{id}"),
            Scenario::FedragEmbeddingRank => f.write_str("fedrag_embedding_rank"),
            Scenario::FedragRerank => f.write_str("fedrag_rerank"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub predicted: String,
    pub gold: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub scenario: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub se_pct: f64,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    pub fn from_items(dataset: &str, scenario: &str, items: Vec<ItemRecord>) -> Self {
        let n = items.len();
        let correct = items.iter().filter(|r| r.predicted == r.gold.as_str()).count();
        let accuracy_pct = if n == 0 { 0.0 } else { 100.0 * correct as f64 / n as f64 };
        Self {
            dataset: dataset.to_string(),
            scenario: scenario.to_string(),
            n,
            correct,
            accuracy_pct,
            se_pct: if n == 0 { 0.0 } else { binomial_se(accuracy_pct, n) },
            items,
        }
    }
}

/// First yes/no/maybe token of the answer; otherwise its first token, or
/// "unknown" when it has none.
pub fn parse_prediction(answer: &str) -> String {
    let tokens = tokenize(answer);
    tokens
        .iter()
        .find(|t| t.parse::<Label>().is_ok())
        .or(tokens.first())
        .cloned()
        .unwrap_or_else(|| crate::inference::UNKNOWN_ANSWER.to_string())
}

/// Everything a scenario run needs besides the scenario itself.
pub struct BenchSetup {
    pub dataset: String,
    pub corpora: Vec<SiteCorpus>,
    pub qa: Vec<QAItem>,
    pub federation: FederationConfig,
    pub template: PromptTemplate,
    pub backend: Arc<dyn InferenceBackend>,
    pub scorer: Arc<dyn RelevanceScorer>,
    pub embedder: Arc<dyn Embedder>,
    pub audit_dir: Option<PathBuf>,
    pub parallel: bool,
}

impl BenchSetup {
    /// Extractive backend, overlap scorer and hashed embedder.
    pub fn reference(dataset: &str, corpora: Vec<SiteCorpus>, qa: Vec<QAItem>) -> Self {
        Self {
            dataset: dataset.to_string(),
            corpora,
            qa,
            federation: FederationConfig::default(),
            template: default_template(),
            backend: Arc::new(crate::inference::ExtractiveBackend),
            scorer: Arc::new(OverlapScorer::default()),
            embedder: Arc::new(HashedEmbedder::default()),
            audit_dir: None,
            parallel: false,
        }
    }

    pub fn synthetic(set: SyntheticSet) -> Self {
        Self::reference("synthetic", set.sites, set.qa)
    }
}

fn scenario_config(scenario: &Scenario, setup: &BenchSetup) -> Result<FederationConfig, BenchError> {
    let mut config = setup.federation.clone();
    match scenario {
        Scenario::Cot => {}
        Scenario::SingleSite(id) => {
            if !setup.corpora.iter().any(|c| &c.site_id == id) {
                return Err(BenchError::Config(format!("single_site: no site named {id}")));
            }
            config.site_selection = SiteSelection::Explicit(vec![id.clone()]);
        }
        Scenario::FedragEmbeddingRank => {
            config.site_selection = SiteSelection::All;
            config.strategy = Strategy::EmbeddingRank;
        }
        Scenario::FedragRerank => {
            config.site_selection = SiteSelection::All;
            config.strategy = Strategy::Rerank;
        }
    }
    config.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    Ok(config)
}

/// Starts an orchestrator and one provider runtime per site, all connected
/// through the in-process loopback transport.
pub async fn start_federation(
    setup: &BenchSetup,
    config: FederationConfig,
) -> Result<LoopbackFederation, BenchError> {
    let mode = if setup.parallel { ExecMode::preferred() } else { ExecMode::Sequential };
    let orchestrator = Orchestrator::new(OrchestratorSettings {
        federation: config,
        template: setup.template.clone(),
        embedder_ids: vec![setup.embedder.descriptor().embedder_id],
        scorer: Arc::clone(&setup.scorer),
        backend: Arc::clone(&setup.backend),
        signing_key: generate_signing_key(),
        audit_dir: setup.audit_dir.clone(),
        poll_timeout: DEFAULT_POLL_TIMEOUT,
    })
    .map_err(|e| BenchError::Config(e.to_string()))?;
    let policy = AttestationPolicy::new([orchestrator.measurement().clone()], &orchestrator.verifying_key())
        .map_err(|e| BenchError::Config(e.to_string()))?;

    let mut federation = LoopbackFederation::new(Arc::clone(&orchestrator));
    for corpus in &setup.corpora {
        let mut runtime = ProviderRuntime::new(&corpus.site_id, policy.clone());
        for (product, chunks) in &corpus.products {
            let index = VectorIndex::ingest_with(product, chunks.clone(), setup.embedder.as_ref(), mode)
                .map_err(|e| BenchError::Config(format!("{}/{product}: {e}", corpus.site_id)))?;
            runtime.add_product(index, Arc::clone(&setup.embedder))?;
        }
        federation.connect(Arc::new(runtime)).await?;
    }
    Ok(federation)
}

async fn answer_all(
    orchestrator: &Arc<Orchestrator>,
    qa: &[QAItem],
    shards: usize,
) -> Result<Vec<String>, BenchError> {
    let ask = |orchestrator: Arc<Orchestrator>, question: String| async move {
        orchestrator
            .answer_query(Query::new(question))
            .await
            .map(|r| r.answer_text)
            .map_err(|e| BenchError::Federation(e.to_string()))
    };
    if shards <= 1 {
        let mut out = Vec::with_capacity(qa.len());
        for item in qa {
            out.push(ask(Arc::clone(orchestrator), item.question.clone()).await?);
        }
        return Ok(out);
    }
    let per_shard = qa.len().div_ceil(shards);
    let mut set = tokio::task::JoinSet::new();
    for (k, shard) in qa.chunks(per_shard.max(1)).enumerate() {
        let questions: Vec<String> = shard.iter().map(|q| q.question.clone()).collect();
        let orchestrator = Arc::clone(orchestrator);
        set.spawn(async move {
            let mut out = Vec::with_capacity(questions.len());
            for q in questions {
                out.push(ask(Arc::clone(&orchestrator), q).await?);
            }
            Ok::<_, BenchError>((k, out))
        });
    }
    let mut parts = Vec::new();
    while let Some(joined) = set.join_next().await {
        parts.push(joined.map_err(|e| BenchError::Federation(e.to_string()))??);
    }
    parts.sort_by_key(|(k, _)| *k);
    Ok(parts.into_iter().flat_map(|(_, out)| out).collect())
}

/// Answers every question under `scenario` and scores the first label token
/// of each answer against gold.
pub async fn run_scenario(scenario: &Scenario, setup: &BenchSetup) -> Result<EvalReport, BenchError> {
    if setup.qa.is_empty() {
        return Err(BenchError::Config("no questions".into()));
    }
    let config = scenario_config(scenario, setup)?;
    let answers = match scenario {
        Scenario::Cot => setup
            .qa
            .iter()
            .map(|item| {
                let prompt = assemble_prompt(&item.question, &[], &setup.template);
                setup
                    .backend
                    .generate(&prompt)
                    .map_err(|e| BenchError::Federation(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => {
            let federation = start_federation(setup, config).await?;
            let shards = if setup.parallel {
                std::thread::available_parallelism().map_or(4, |n| n.get())
            } else {
                1
            };
            let answers = answer_all(federation.orchestrator(), &setup.qa, shards).await?;
            drop(federation);
            answers
        }
    };
    let items = setup
        .qa
        .iter()
        .zip(answers)
        .map(|(item, answer)| ItemRecord {
            id: item.id.clone(),
            predicted: parse_prediction(&answer),
            gold: item.gold,
        })
        .collect();
    Ok(EvalReport::from_items(&setup.dataset, &scenario.to_string(), items))
}

/// Blocking wrapper that owns its own runtime.
pub fn run_scenario_blocking(scenario: &Scenario, setup: &BenchSetup) -> Result<EvalReport, BenchError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| BenchError::Federation(e.to_string()))?
        .block_on(async {
            tokio::time::timeout(Duration::from_secs(3600), run_scenario(scenario, setup))
                .await
                .map_err(|_| BenchError::Federation("benchmark timed out".into()))?
        })
}

/// Scenario rows, one `accuracy ± se` column per dataset plus the row average.
pub fn compare_report(reports: &[EvalReport]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut scenarios: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    let mut header = vec!["Method".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    header.push("Average".to_string());
    let mut rows = vec![header];
    for s in &scenarios {
        let mut row = vec![s.to_string()];
        let mut accs = Vec::new();
        for d in &datasets {
            match reports.iter().find(|r| r.scenario == *s && r.dataset == *d) {
                Some(r) => {
                    row.push(format!("{:.2} ± {:.2}", r.accuracy_pct, r.se_pct));
                    accs.push(r.accuracy_pct);
                }
                None => row.push("-".to_string()),
            }
        }
        row.push(format!("{:.2}", accs.iter().sum::<f64>() / accs.len() as f64));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if k == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}
