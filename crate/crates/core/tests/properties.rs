use std::collections::{BTreeMap, HashSet};

use cfedrag::attestation::{measure, PipelineManifest, Sealer};
use cfedrag::embedding::{cosine, HashedEmbedder};
use cfedrag::orchestrator::{aggregate_embedding_rank, aggregate_rerank, OverlapScorer};
use cfedrag::par::ExecMode;
use cfedrag::protocol::{
    content_hash, decode_frame, encode_frame, is_ranked, Chunk, ErrorPayload, Message, QueryRequest,
    RetrievalResponse, ScoreKind, ScoredChunk, TaskResult,
};
use cfedrag::provider::{apply_filters, FilterRules};
use cfedrag::vector_store::VectorIndex;
use proptest::prelude::*;

const VOCAB: [&str; 12] = [
    "heart", "attack", "renal", "stone", "pain", "acute", "chronic", "fever", "lung", "cancer", "dose", "trial",
];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..6).prop_map(|w| w.join(" "))
}

fn corpus(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(text(), 1..max)
}

fn scored(provider: &str, product: &str, i: usize, text: &str, score: f64) -> ScoredChunk {
    ScoredChunk {
        chunk: Chunk::new(provider, product, &i.to_string(), text).unwrap(),
        score,
        score_kind: ScoreKind::Embedding,
    }
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        ".*".prop_map(|text| Message::Query(QueryRequest { text })),
        ("[a-z-]{1,20}", ".*").prop_map(|(c, m)| Message::Error(ErrorPayload::new(&c, m))),
        (any::<u64>(), prop::collection::vec((text(), -1.0f64..1.0), 0..6)).prop_map(|(task_id, hits)| {
            let mut list: Vec<ScoredChunk> = hits
                .iter()
                .enumerate()
                .map(|(i, (t, s))| scored("site1", "pubmed", i, t, *s))
                .collect();
            list.sort_by(cfedrag::protocol::rank_order);
            Message::TaskResult(TaskResult {
                task_id,
                response: Some(RetrievalResponse {
                    provider_id: "site1".into(),
                    per_product: BTreeMap::from([("pubmed".to_string(), list)]),
                    elapsed_ms: 3,
                }),
                error: None,
            })
        }),
    ]
}

fn manifest() -> PipelineManifest {
    PipelineManifest {
        strategy: Some("rerank".into()),
        embedder_ids: Some(vec!["hashed-v1".into()]),
        reranker_id: Some("overlap-v1".into()),
        inference_backend_id: Some("extractive-v1".into()),
        prompt_template_hash: Some("00".repeat(32)),
        n: Some(8),
        m: Some(8),
    }
}

proptest! {
    #[test]
    fn frame_round_trip(msg in message()) {
        let bytes = encode_frame(&msg).unwrap();
        prop_assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        prop_assert_eq!(decode_frame(&bytes).unwrap(), msg);
    }

    #[test]
    fn content_hash_is_injective_on_one_byte_edits(s in "[ -~]{1,64}", idx in any::<prop::sample::Index>()) {
        prop_assert_eq!(content_hash(&s), content_hash(&s.clone()));
        let mut bytes = s.clone().into_bytes();
        let i = idx.index(bytes.len());
        bytes[i] = if bytes[i] == b'a' { b'b' } else { b'a' };
        let t = String::from_utf8(bytes).unwrap();
        prop_assert_ne!(content_hash(&s), content_hash(&t));
    }

    #[test]
    fn embeddings_are_unit_or_zero(s in ".{0,80}") {
        let v = HashedEmbedder::default().embed_text(&s);
        prop_assert!(v.is_zero() || (v.norm() - 1.0).abs() < 1e-5);
        prop_assert!(v.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cosine_is_symmetric(a in ".{0,40}", b in ".{0,40}") {
        let e = HashedEmbedder::default();
        let (u, v) = (e.embed_text(&a), e.embed_text(&b));
        prop_assert_eq!(cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
    }

    #[test]
    fn top_k_is_ranked_bounded_and_mode_independent(texts in corpus(40), q in text(), k in 1usize..12) {
        let e = HashedEmbedder::default();
        let chunks: Vec<Chunk> = texts.iter().enumerate()
            .map(|(i, t)| Chunk::new("p", "x", &i.to_string(), t.as_str()).unwrap())
            .collect();
        let index = VectorIndex::ingest("x", chunks, &e).unwrap();
        let qv = e.embed_text(&q);
        let seq = index.top_k_with(&qv, k, ExecMode::Sequential).unwrap();
        let par = index.top_k_with(&qv, k, ExecMode::Parallel).unwrap();
        prop_assert!(seq.len() <= k && seq.len() == k.min(texts.len()));
        prop_assert!(is_ranked(&seq));
        prop_assert_eq!(seq, par);
    }

    #[test]
    fn index_bytes_round_trip(texts in corpus(30)) {
        let chunks: Vec<Chunk> = texts.iter().enumerate()
            .map(|(i, t)| Chunk::new("p", "x", &i.to_string(), t.as_str()).unwrap())
            .collect();
        let index = VectorIndex::ingest("x", chunks, &HashedEmbedder::default()).unwrap();
        let back = VectorIndex::from_bytes(&index.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), index.to_bytes());
        prop_assert_eq!(back.chunks(), index.chunks());
    }

    #[test]
    fn stats_never_carry_text(texts in prop::collection::vec("[a-z]{12,20}", 1..10)) {
        let chunks: Vec<Chunk> = texts.iter().enumerate()
            .map(|(i, t)| Chunk::new("p", "x", &i.to_string(), t.as_str()).unwrap())
            .collect();
        let index = VectorIndex::ingest("x", chunks, &HashedEmbedder::default()).unwrap();
        let stats = serde_json::to_string(&index.stats()).unwrap();
        for t in &texts {
            prop_assert!(!stats.contains(t.as_str()));
        }
    }

    #[test]
    fn federated_merge_equals_centralized(texts in corpus(60), q in text(), parts in prop::collection::vec(0usize..3, 60)) {
        let e = HashedEmbedder::default();
        let all: Vec<Chunk> = texts.iter().enumerate()
            .map(|(i, t)| Chunk::new(&format!("site{}", parts[i]), "x", &format!("{i:03}"), t.as_str()).unwrap())
            .collect();
        let qv = e.embed_text(&q);
        let mut responses = Vec::new();
        for site in 0..3 {
            let id = format!("site{site}");
            let mine: Vec<Chunk> = all.iter().filter(|c| c.provider_id == id).cloned().collect();
            let index = VectorIndex::ingest("x", mine, &e).unwrap();
            responses.push(RetrievalResponse {
                provider_id: id,
                per_product: BTreeMap::from([("x".to_string(), index.top_k(&qv, 8).unwrap())]),
                elapsed_ms: 0,
            });
        }
        let merged = aggregate_embedding_rank(&responses, 8, false);
        let mut central: Vec<ScoredChunk> = all.iter().map(|c| {
            let v = e.embed_text(&c.text);
            ScoredChunk { chunk: c.clone(), score: cosine(&qv, &v).unwrap(), score_kind: ScoreKind::Embedding }
        }).collect();
        central.sort_by(cfedrag::protocol::rank_order);
        central.truncate(8);
        let got: Vec<&str> = merged.chunks.iter().map(|c| c.chunk.id.as_str()).collect();
        let want: Vec<&str> = central.iter().map(|c| c.chunk.id.as_str()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn aggregation_invariants(texts in corpus(40), q in text(), n in 1usize..10, dedup in any::<bool>()) {
        let list: Vec<ScoredChunk> = texts.iter().enumerate()
            .map(|(i, t)| scored(if i % 2 == 0 { "a" } else { "b" }, "x", i, t, 1.0 / (1 + i) as f64))
            .collect();
        let responses: Vec<RetrievalResponse> = ["a", "b"].iter().map(|p| {
            let mine: Vec<ScoredChunk> = list.iter().filter(|c| c.chunk.provider_id == *p).cloned().collect();
            RetrievalResponse { provider_id: p.to_string(), per_product: BTreeMap::from([("x".to_string(), mine)]), elapsed_ms: 0 }
        }).collect();
        for ctx in [
            aggregate_embedding_rank(&responses, n, dedup),
            aggregate_rerank(&q, &responses, &OverlapScorer::default(), n, dedup).unwrap(),
        ] {
            prop_assert!(ctx.chunks.len() <= n);
            prop_assert!(is_ranked(&ctx.chunks));
            prop_assert_eq!(ctx.candidate_count, texts.len());
            if dedup {
                let digests: HashSet<&str> = ctx.chunks.iter().map(|c| c.chunk.content_digest.as_str()).collect();
                prop_assert_eq!(digests.len(), ctx.chunks.len());
            }
        }
    }

    #[test]
    fn redaction_is_sound(texts in prop::collection::vec("[a-z ]{0,8}[0-9]{3}-[0-9]{2}-[0-9]{4}[a-z ]{0,8}", 1..10)) {
        let rules = FilterRules::parse("\\d{3}-\\d{2}-\\d{4}\t[REDACTED]").unwrap();
        let chunks: Vec<Chunk> = texts.iter().enumerate()
            .map(|(i, t)| Chunk::new("p", "x", &i.to_string(), t.as_str()).unwrap())
            .collect();
        let out = apply_filters(&chunks, &rules);
        prop_assert_eq!(out.len(), chunks.len());
        let pattern = rules.rules()[0].pattern();
        for c in &out {
            prop_assert!(!pattern.is_match(&c.text));
            prop_assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn manifest_mutation_changes_measurement(field in 0usize..7, salt in "[a-z0-9]{1,8}", bump in 1u32..100) {
        let base = manifest();
        let mut m = base.clone();
        match field {
            0 => m.strategy = Some(format!("embedding_rank{salt}")),
            1 => m.embedder_ids = Some(vec![format!("model-{salt}")]),
            2 => m.reranker_id = Some(format!("cross-{salt}")),
            3 => m.inference_backend_id = Some(format!("llm-{salt}")),
            4 => m.prompt_template_hash = Some(content_hash(&salt)),
            5 => m.n = Some(8 + bump),
            _ => m.m = Some(8 + bump),
        }
        prop_assert_ne!(measure(&base).unwrap(), measure(&m).unwrap());
    }

    #[test]
    fn sealing_binds_query_id(plain in prop::collection::vec(any::<u8>(), 0..256), a in "[a-z0-9]{1,12}", b in "[a-z0-9]{1,12}") {
        let sealer = Sealer::random();
        let sealed = sealer.seal(&plain, &a).unwrap();
        prop_assert_eq!(sealer.unseal(&sealed, &a).unwrap(), plain);
        if a != b {
            prop_assert!(sealer.unseal(&sealed, &b).is_err());
        }
    }
}
