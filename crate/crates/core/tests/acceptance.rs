//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cfedrag::bench::{binomial_se, run_scenario, synth_corpus, BenchSetup, Scenario};
use cfedrag::embedding::{cosine, HashedEmbedder};
use cfedrag::federation::LoopbackFederation;
use cfedrag::inference::{generate_extractive, InferenceBackend, InferenceError, PromptTemplate};
use cfedrag::net::serve_provider_endpoint;
use cfedrag::orchestrator::{aggregate_embedding_rank, Orchestrator, OrchestratorSettings};
use cfedrag::protocol::{
    content_hash, rank_order, Chunk, FederationConfig, Message, Query, RetrievalResponse, ScoreKind, ScoredChunk,
    Strategy,
};
use cfedrag::provider::{register, Dialer};
use cfedrag::tls;
use cfedrag::transport::WireTap;
use cfedrag::vector_store::VectorIndex;
use common::*;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde_json::json;

type Outcome = Result<(), String>;
type Mutation = (&'static str, Box<dyn Fn(&mut OrchestratorSettings)>);
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
        .block_on(f)
}

fn within(start: Instant, limit: Duration, what: &str) -> Outcome {
    let took = start.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

fn error_bars() -> Outcome {
    let a = binomial_se(67.20, 500);
    let b = binomial_se(79.61, 618);
    ensure!((a - 2.10).abs() <= 0.01, "se(67.20, 500) = {a}");
    ensure!((b - 1.62).abs() <= 0.01, "se(79.61, 618) = {b}");
    Ok(())
}

fn budget() -> Outcome {
    let start = Instant::now();
    let record = block_on(async {
        let orchestrator = Orchestrator::new(settings(FederationConfig::default())).unwrap();
        let policy = policy_for(&orchestrator);
        let mut fed = LoopbackFederation::new(Arc::clone(&orchestrator));
        for site in ["site1", "site2"] {
            let products: Vec<(&str, Vec<String>)> = ["pubmed", "textbooks"]
                .iter()
                .map(|p| (*p, (0..12).map(|i| format!("cardiac arrest {site} {p} case {i}")).collect()))
                .collect();
            fed.connect(Arc::new(runtime(site, policy.clone(), &products))).await.unwrap();
        }
        orchestrator.answer_query(Query::new("cardiac arrest case")).await
    })
    .map_err(|e| e.to_string())?;
    ensure!(record.candidate_count == 32, "candidate_count = {}", record.candidate_count);
    ensure!(record.context_digests.len() == 8, "|context| = {}", record.context_digests.len());
    within(start, Duration::from_secs(5), "budget run")
}

fn federated_equals_centralized() -> Outcome {
    let start = Instant::now();
    let vocab: Vec<String> = (0..40).map(|i| format!("term{i}")).collect();
    let e = HashedEmbedder::default();
    let mut rng = SplitMix64::seed_from_u64(2024);
    for trial in 0..100 {
        let all: Vec<Chunk> = (0..200)
            .map(|i| {
                let len = 2 + (rng.next_u64() % 6) as usize;
                let words: Vec<&str> = (0..len).map(|_| vocab[(rng.next_u64() % 40) as usize].as_str()).collect();
                let site = format!("site{}", rng.next_u64() % 3);
                Chunk::new(&site, "docs", &format!("{i:03}"), words.join(" ")).unwrap()
            })
            .collect();
        let q = e.embed_text(&format!("{} {}", vocab[trial % 40], vocab[(trial * 7 + 3) % 40]));
        let responses: Vec<RetrievalResponse> = (0..3)
            .map(|s| {
                let id = format!("site{s}");
                let mine: Vec<Chunk> = all.iter().filter(|c| c.provider_id == id).cloned().collect();
                let top = if mine.is_empty() {
                    Vec::new()
                } else {
                    VectorIndex::ingest("docs", mine, &e).unwrap().top_k(&q, 8).unwrap()
                };
                RetrievalResponse {
                    provider_id: id,
                    per_product: BTreeMap::from([("docs".to_string(), top)]),
                    elapsed_ms: 0,
                }
            })
            .collect();
        let merged = aggregate_embedding_rank(&responses, 8, false);

        let mut central: Vec<ScoredChunk> = all
            .iter()
            .map(|c| ScoredChunk {
                chunk: c.clone(),
                score: cosine(&q, &e.embed_text(&c.text)).unwrap(),
                score_kind: ScoreKind::Embedding,
            })
            .collect();
        central.sort_by(rank_order);
        central.truncate(8);
        let got: Vec<&str> = merged.chunks.iter().map(|c| c.chunk.id.as_str()).collect();
        let want: Vec<&str> = central.iter().map(|c| c.chunk.id.as_str()).collect();
        ensure!(got == want, "trial {trial}: federated {got:?} vs centralized {want:?}");
    }
    within(start, Duration::from_secs(30), "100 trials")
}

fn split_knowledge() -> Outcome {
    let start = Instant::now();
    let setup = BenchSetup::synthetic(synth_corpus(200, 2, 42).map_err(|e| e.to_string())?);
    let scenarios = [
        Scenario::Cot,
        Scenario::SingleSite("site0".into()),
        Scenario::SingleSite("site1".into()),
        Scenario::FedragRerank,
    ];
    let reports = block_on(async {
        let mut out = Vec::new();
        for s in &scenarios {
            out.push(run_scenario(s, &setup).await);
        }
        out
    });
    let acc: Vec<f64> = reports
        .into_iter()
        .map(|r| r.map(|r| r.accuracy_pct))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(acc[0] == 0.0, "cot = {}%", acc[0]);
    for (i, a) in acc[1..3].iter().enumerate() {
        ensure!((45.0..=55.0).contains(a), "single_site:site{i} = {a}%");
    }
    ensure!(acc[3] >= 95.0, "fedrag_rerank = {}%", acc[3]);
    within(start, Duration::from_secs(60), "split-knowledge benchmark")
}

fn rerank_improvement() -> Outcome {
    let (q1, q2, q3) = ("quorvex", "plinthar", "dazmilo");
    let query = format!("{q1} {q2} {q3}");
    let target = format!("{q1} {q2} {q3} ANSWER::yes");
    let mut distractors = Vec::new();
    for (a, b) in [(q1, q2), (q1, q3), (q2, q3)] {
        for (x, y) in [(4, 4), (4, 5), (5, 5)] {
            distractors.push(format!("{} {} ANSWER::no", vec![a; x].join(" "), vec![b; y].join(" ")));
        }
    }
    let e = HashedEmbedder::default();
    let qv = e.embed_text(&query);
    let target_score = cosine(&qv, &e.embed_text(&target)).unwrap();
    let lower = distractors
        .iter()
        .filter(|d| cosine(&qv, &e.embed_text(d)).unwrap() > target_score)
        .count();
    ensure!(lower >= 8, "only {lower} distractors outscore the target by embedding");

    let run = |strategy: Strategy| {
        let target = target.clone();
        let distractors = distractors.clone();
        let query = query.clone();
        block_on(async move {
            let orchestrator = Orchestrator::new(settings(FederationConfig {
                strategy,
                ..FederationConfig::default()
            }))
            .unwrap();
            let policy = policy_for(&orchestrator);
            let mut fed = LoopbackFederation::new(Arc::clone(&orchestrator));
            let mut site1 = words("unrelated filler", 10);
            site1.push(target);
            fed.connect(Arc::new(runtime("site1", policy.clone(), &[("pubmed", site1)])))
                .await
                .unwrap();
            fed.connect(Arc::new(runtime("site2", policy, &[("pubmed", distractors)])))
                .await
                .unwrap();
            orchestrator.answer_query(Query::new(query)).await.unwrap()
        })
    };
    let target_id = "site1/pubmed/10";
    let reranked = run(Strategy::Rerank);
    let embedded = run(Strategy::EmbeddingRank);
    ensure!(reranked.context_ids.iter().any(|id| id == target_id), "rerank dropped the target");
    ensure!(reranked.answer_text == "yes", "rerank answered {}", reranked.answer_text);
    ensure!(!embedded.context_ids.iter().any(|id| id == target_id), "embedding rank kept the target");
    ensure!(embedded.answer_text != "yes", "embedding rank answered {}", embedded.answer_text);
    Ok(())
}

struct RenamedBackend;

impl InferenceBackend for RenamedBackend {
    fn backend_id(&self) -> &str {
        "llama3-8b"
    }

    fn generate(&self, prompt: &str) -> Result<String, InferenceError> {
        Ok(generate_extractive(prompt))
    }
}

fn attestation_gating() -> Outcome {
    let start = Instant::now();
    let baseline = Orchestrator::new(settings(FederationConfig::default())).unwrap();
    let allowed = baseline.measurement().clone();
    let mutations: Vec<Mutation> = vec![
        ("strategy", Box::new(|s| s.federation.strategy = Strategy::EmbeddingRank)),
        ("embedder id", Box::new(|s| s.embedder_ids = vec!["contriever".into()])),
        ("inference model id", Box::new(|s| s.backend = Arc::new(RenamedBackend))),
        (
            "template",
            Box::new(|s| s.template = PromptTemplate::new("Q: {query}\nC: {context}\nA:").unwrap()),
        ),
        ("m", Box::new(|s| s.federation.m = 16)),
        ("n", Box::new(|s| s.federation.n = 4)),
    ];
    for (field, mutate) in mutations {
        let mut s = settings(FederationConfig::default());
        mutate(&mut s);
        let orchestrator = Orchestrator::new(s).unwrap();
        ensure!(*orchestrator.measurement() != allowed, "{field}: measurement unchanged");
        let mut policy = policy_for(&orchestrator);
        policy.allowed_measurements = [allowed.clone()].into();
        let tap = WireTap::new();
        let (connected, answer) = block_on(async {
            let mut fed = LoopbackFederation::new(Arc::clone(&orchestrator)).with_tap(tap.clone());
            let rt = runtime("site1", policy, &[("pubmed", vec!["SENTINEL-GATE zymoglyph ANSWER::yes".into()])]);
            let connected = fed.connect(Arc::new(rt)).await;
            (connected, orchestrator.answer_query(Query::new("zymoglyph")).await)
        });
        ensure!(connected.is_err(), "{field}: provider accepted the mutated pipeline");
        match answer {
            Err(e) => ensure!(e.code() == "attestation-failed", "{field}: query failed with {}", e.code()),
            Ok(_) => return Err(format!("{field}: query was answered")),
        }
        let chunks_sent = tap
            .messages()
            .iter()
            .filter(|(_, m)| matches!(m, Message::TaskResult(_) | Message::Task(_)))
            .count();
        ensure!(chunks_sent == 0, "{field}: {chunks_sent} task frames crossed the wire");
        ensure!(!tap.contains(b"SENTINEL-GATE"), "{field}: chunk text crossed the wire");
    }
    within(start, Duration::from_secs(10), "gating checks")
}

fn mutual_tls() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let rogue = tempfile::tempdir().unwrap();
    tls::generate_pki(dir.path(), &["orchestrator".into(), "site1".into()]).map_err(|e| e.to_string())?;
    tls::generate_pki(rogue.path(), &["site1".into()]).map_err(|e| e.to_string())?;
    let ca = dir.path().join("ca.pem");
    block_on(async {
        let orchestrator = Orchestrator::new(settings(FederationConfig::default())).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let address = listener.local_addr().unwrap().to_string();
        let server = tls::mtls_server_config(
            &dir.path().join("orchestrator.pem"),
            &dir.path().join("orchestrator.key"),
            &ca,
        )
        .unwrap();
        tokio::spawn(serve_provider_endpoint(Arc::clone(&orchestrator), listener, server));
        let provider = Arc::new(runtime("site1", policy_for(&orchestrator), &[("pubmed", words("x", 3))]));
        let attempt = |config: Arc<rustls::ClientConfig>| {
            let dialer = Dialer {
                address: address.clone(),
                server_name: "localhost".into(),
                tls: config,
                tap: None,
            };
            let provider = Arc::clone(&provider);
            async move { tokio::time::timeout(Duration::from_secs(10), register(&dialer, provider)).await }
        };

        let no_cert = attempt(tls::client_config(&ca).unwrap()).await;
        ensure!(matches!(no_cert, Ok(Err(_))), "no-certificate provider: {no_cert:?}");
        let untrusted = tls::mtls_client_config(&rogue.path().join("site1.pem"), &rogue.path().join("site1.key"), &ca)
            .unwrap();
        let untrusted = attempt(untrusted).await;
        ensure!(matches!(untrusted, Ok(Err(_))), "untrusted-CA provider: {untrusted:?}");
        ensure!(orchestrator.registry().live_ids().is_empty(), "a rejected provider registered");

        let good = tls::mtls_client_config(&dir.path().join("site1.pem"), &dir.path().join("site1.key"), &ca).unwrap();
        let control = tokio::spawn(attempt(good));
        for _ in 0..500 {
            if !orchestrator.registry().live_ids().is_empty() {
                control.abort();
                return Ok(());
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        Err("control provider with a valid certificate never registered".into())
    })
}

fn partial_failure() -> Outcome {
    let deadline_ms = 1_000;
    let (record, took) = block_on(async {
        let orchestrator = Orchestrator::new(settings(FederationConfig {
            deadline_ms,
            ..FederationConfig::default()
        }))
        .unwrap();
        let policy = policy_for(&orchestrator);
        let mut fed = LoopbackFederation::new(Arc::clone(&orchestrator));
        let healthy = runtime("site1", policy.clone(), &[("pubmed", vec!["zymoglyph trial ANSWER::yes".into()])]);
        let stalled = runtime("site2", policy, &[("pubmed", words("site2", 5))])
            .with_response_delay(Duration::from_millis(2 * deadline_ms));
        fed.connect(Arc::new(healthy)).await.unwrap();
        fed.connect(Arc::new(stalled)).await.unwrap();
        let start = Instant::now();
        let record = orchestrator.answer_query(Query::new("zymoglyph trial")).await;
        (record, start.elapsed())
    });
    let record = record.map_err(|e| e.to_string())?;
    ensure!(
        took <= Duration::from_millis(deadline_ms + 2_000),
        "answer took {took:?}"
    );
    ensure!(record.answer_text == "yes", "answer {}", record.answer_text);
    ensure!(record.participating_providers == ["site1"], "participating {:?}", record.participating_providers);
    ensure!(
        record.failed_providers.iter().any(|f| f.provider_id == "site2" && f.reason == "timeout"),
        "failures {:?}",
        record.failed_providers
    );
    Ok(())
}

fn bench_cli(args: &[&str], env: &[(&str, &str)]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cfedrag"))
        .args(args)
        .envs(env.iter().copied())
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "bench failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        bench_cli(
            &[
                "bench", "run", "--scenario", "fedrag_rerank", "--seed", "42", "--sites", "2", "--questions", "100",
                "--out", out.to_str().unwrap(),
            ],
            &[],
        )?;
        reports.push(fs::read(out.join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure!(!reports[0].is_empty(), "empty report");
    ensure!(reports[0] == reports[1], "the two JSON reports differ");
    Ok(())
}

fn scan(dir: &Path, out: &mut Vec<u8>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            scan(&path, out);
        } else {
            out.extend(fs::read(&path).unwrap());
        }
    }
}

fn audit_hygiene() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut sentinels = Vec::new();
    let mut digests = Vec::new();
    let mut corpora = Vec::new();
    for site in ["site1", "site2"] {
        let mut body = String::new();
        for i in 0..40 {
            let sentinel = format!("SNTL{site}X{i:03}Q");
            let text = format!("{sentinel} zymoglyph {} ANSWER::{}", i % 7, ["yes", "no", "maybe"][i % 3]);
            let title = format!("cardiac trial {i}");
            digests.push(content_hash(&format!("{title}\n{text}")));
            body.push_str(&(json!({"id": format!("{i}"), "title": title, "text": text}).to_string() + "\n"));
            sentinels.push(sentinel);
        }
        let path = root.join(format!("{site}-pubmed.jsonl"));
        fs::write(&path, body).unwrap();
        corpora.push(format!("{site}={}", path.display()));
    }
    let qa = root.join("qa.jsonl");
    let questions: String = (0..30)
        .map(|i| json!({"id": i.to_string(), "question": format!("cardiac trial {} zymoglyph {}?", i, i % 7), "answer": "yes"}).to_string() + "\n")
        .collect();
    fs::write(&qa, questions).unwrap();
    let audit = root.join("audit");
    let report = root.join("report");
    let mut args = vec![
        "bench".to_string(), "run".into(), "--scenario".into(), "fedrag_rerank".into(), "--scenario".into(),
        "fedrag_embedding_rank".into(), "--scenario".into(), "single_site:site1".into(), "--qa".into(),
        qa.display().to_string(), "--audit-dir".into(), audit.display().to_string(), "--out".into(),
        report.display().to_string(),
    ];
    for c in &corpora {
        args.push("--corpus".into());
        args.push(c.clone());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = bench_cli(&args, &[("RUST_LOG", "trace")])?;

    let mut persisted = Vec::new();
    scan(&audit, &mut persisted);
    ensure!(!persisted.is_empty(), "audit dir is empty");
    let mut everything = persisted.clone();
    everything.extend(&out.stdout);
    everything.extend(&out.stderr);
    let everything = String::from_utf8_lossy(&everything);
    let leaked: Vec<&String> = sentinels.iter().filter(|s| everything.contains(s.as_str())).collect();
    ensure!(leaked.is_empty(), "{} sentinels leaked, e.g. {}", leaked.len(), leaked[0]);
    let persisted = String::from_utf8_lossy(&persisted);
    let present: HashSet<&String> = digests.iter().filter(|d| persisted.contains(d.as_str())).collect();
    ensure!(!present.is_empty(), "no chunk digests in the audit log");
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("error-bar arithmetic", error_bars),
        ("budget contract", budget),
        ("federated equals centralized", federated_equals_centralized),
        ("split-knowledge ordering", split_knowledge),
        ("re-rank improvement", rerank_improvement),
        ("attestation gating", attestation_gating),
        ("mutual TLS", mutual_tls),
        ("partial failure", partial_failure),
        ("determinism", determinism),
        ("audit hygiene", audit_hygiene),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("criterion {:2} PASS  {name} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:2} FAIL  {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
