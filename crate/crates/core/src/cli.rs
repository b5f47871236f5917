//! Command-line entry points. Exit codes: 0 success, 1 domain error,
//! 2 usage error. Results go to stdout, diagnostics to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attestation::{generate_signing_key, signing_key_from_hex, AttestationPolicy};
use crate::bench::{
    compare_report, load_corpus, load_qa, run_scenario_blocking, synth_corpus_with, BenchSetup, Scenario,
    SiteCorpus,
};
use crate::embedding::{Embedder, HashedEmbedder, RemoteEmbedder, HASHED_EMBEDDER_ID};
use crate::inference::{default_template, ExtractiveBackend, InferenceBackend, PromptTemplate, RemoteChatBackend};
use crate::net::{serve_client_endpoint, serve_provider_endpoint, QueryClient};
use crate::orchestrator::{
    Orchestrator, OrchestratorSettings, OverlapScorer, RelevanceScorer, RemoteScorer, DEFAULT_POLL_TIMEOUT,
};
use crate::par::ExecMode;
use crate::protocol::FederationConfig;
use crate::provider::{register, Dialer, FilterRules, ProviderError, ProviderRuntime};
use crate::tls;
use crate::vector_store::{load_index, save_index, VectorIndex};

#[derive(Debug, Parser)]
#[command(name = "cfedrag", version, about = "Confidential federated retrieval-augmented generation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test PKI management.
    #[command(subcommand)]
    Certs(CertsCommand),
    /// Build a vector index from a JSONL corpus.
    Ingest(IngestArgs),
    /// Data-provider node.
    #[command(subcommand)]
    Provider(ProviderCommand),
    /// Orchestrator node.
    #[command(subcommand)]
    Orchestrator(OrchestratorCommand),
    /// Ask one question.
    Query(QueryArgs),
    /// Accuracy benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Orchestrator attestation keys.
    #[command(subcommand)]
    Attest(AttestCommand),
}

#[derive(Debug, Subcommand)]
enum CertsCommand {
    /// Generate a CA plus one certificate/key pair per name.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        names: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    product: String,
    #[arg(long = "provider")]
    provider_id: String,
    #[arg(long)]
    out: PathBuf,
    /// Embedding server; the hashed reference embedder is used when absent.
    #[arg(long, requires = "embed_model")]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ProviderCommand {
    Serve(ProviderServeArgs),
}

#[derive(Debug, Args)]
struct ProviderServeArgs {
    #[arg(long)]
    orchestrator: String,
    /// TLS name to expect on the orchestrator certificate; defaults to the host.
    #[arg(long)]
    server_name: Option<String>,
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    ca: PathBuf,
    /// name=index-path, repeatable.
    #[arg(long = "product", value_parser = parse_pair)]
    products: Vec<(String, PathBuf)>,
    #[arg(long)]
    filters: Option<PathBuf>,
    /// JSON attestation policy: allowed measurements and the orchestrator key.
    #[arg(long)]
    policy: PathBuf,
    /// Embedding server for indexes not built with the hashed embedder.
    #[arg(long)]
    embed_endpoint: Option<String>,
    /// Stop after the first session instead of reconnecting.
    #[arg(long)]
    once: bool,
}

#[derive(Debug, Subcommand)]
enum OrchestratorCommand {
    Serve(OrchestratorServeArgs),
    /// Print the attestation policy providers should trust for a config.
    Measure {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
struct OrchestratorServeArgs {
    #[arg(long)]
    listen_providers: String,
    #[arg(long)]
    listen_clients: String,
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    ca: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    orchestrator: String,
    #[arg(long)]
    ca: PathBuf,
    #[arg(long)]
    server_name: Option<String>,
    #[arg(long)]
    verbose: bool,
    question: String,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    Run(BenchRunArgs),
}

#[derive(Debug, Args)]
struct BenchRunArgs {
    /// Scenario name, repeatable: cot, single_site:<id>, fedrag_embedding_rank, fedrag_rerank.
    #[arg(long = "scenario", required = true)]
    scenarios: Vec<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    sites: usize,
    #[arg(long, default_value_t = 100)]
    questions: usize,
    #[arg(long)]
    qa: Option<PathBuf>,
    /// site=corpus-path, repeatable; the product is named after the file stem.
    #[arg(long = "corpus", value_parser = parse_pair, requires = "qa")]
    corpora: Vec<(String, PathBuf)>,
    /// Directory for report.txt and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    audit_dir: Option<PathBuf>,
    /// Shard questions across concurrent workers.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Subcommand)]
enum AttestCommand {
    /// Write a new hex-encoded signing key and print its public key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Overlap,
    Remote { endpoint: String, model_id: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InferenceConfig {
    #[default]
    Extractive,
    Remote { endpoint: String, model_id: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestConfig {
    pub embedder_ids: Vec<String>,
    pub reranker: ScorerConfig,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        Self {
            embedder_ids: vec![HASHED_EMBEDDER_ID.to_string()],
            reranker: ScorerConfig::Overlap,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlsPaths {
    pub cert: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub ca: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttestationConfig {
    /// Hex-encoded Ed25519 signing key; an ephemeral key is used when absent.
    pub key_path: Option<PathBuf>,
    pub audit_dir: Option<PathBuf>,
}

/// The orchestrator config file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub federation: FederationConfig,
    pub manifest: ManifestConfig,
    pub template: Option<PromptTemplate>,
    pub inference: InferenceConfig,
    pub tls: TlsPaths,
    pub attestation: AttestationConfig,
}

impl OrchestratorConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config
            .federation
            .validate()
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.tls.cert,
            &mut config.tls.key,
            &mut config.tls.ca,
            &mut config.attestation.key_path,
            &mut config.attestation.audit_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn scorer(&self) -> Arc<dyn RelevanceScorer> {
        match &self.manifest.reranker {
            ScorerConfig::Overlap => Arc::new(OverlapScorer::default()),
            ScorerConfig::Remote { endpoint, model_id } => Arc::new(RemoteScorer {
                endpoint: endpoint.clone(),
                model_id: model_id.clone(),
            }),
        }
    }

    pub fn backend(&self) -> Arc<dyn InferenceBackend> {
        match &self.inference {
            InferenceConfig::Extractive => Arc::new(ExtractiveBackend),
            InferenceConfig::Remote { endpoint, model_id } => Arc::new(RemoteChatBackend {
                endpoint: endpoint.clone(),
                model_id: model_id.clone(),
            }),
        }
    }

    pub fn settings(&self) -> Result<OrchestratorSettings, String> {
        let signing_key = match &self.attestation.key_path {
            Some(p) => {
                let hex = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                signing_key_from_hex(hex.trim()).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => generate_signing_key(),
        };
        Ok(OrchestratorSettings {
            federation: self.federation.clone(),
            template: self.template.clone().unwrap_or_else(default_template),
            embedder_ids: self.manifest.embedder_ids.clone(),
            scorer: self.scorer(),
            backend: self.backend(),
            signing_key,
            audit_dir: self.attestation.audit_dir.clone(),
            poll_timeout: DEFAULT_POLL_TIMEOUT,
        })
    }
}

type CmdResult = Result<(), String>;

fn runtime() -> Result<tokio::runtime::Runtime, String> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())
}

fn certs_gen(out: &Path, names: &[String]) -> CmdResult {
    let files = tls::generate_pki(out, names).map_err(|e| e.to_string())?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn ingest(args: &IngestArgs) -> CmdResult {
    let chunks = load_corpus(&args.corpus, &args.provider_id, &args.product).map_err(|e| e.to_string())?;
    let embedder: Box<dyn Embedder> = match (&args.embed_endpoint, &args.embed_model) {
        (Some(endpoint), Some(model)) => Box::new(RemoteEmbedder::new(endpoint, model)),
        _ => Box::new(HashedEmbedder::default()),
    };
    let index = VectorIndex::ingest(&args.product, chunks, embedder.as_ref()).map_err(|e| e.to_string())?;
    save_index(&index, &args.out).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string(&index.stats()).map_err(|e| e.to_string())?);
    Ok(())
}

fn host_of(address: &str) -> String {
    let host = address.rsplit_once(':').map_or(address, |(h, _)| h);
    host.trim_start_matches('[').trim_end_matches(']').to_string()
}

fn provider_runtime(args: &ProviderServeArgs) -> Result<ProviderRuntime, String> {
    let certs = tls::load_certs(&args.cert).map_err(|e| e.to_string())?;
    let provider_id = tls::common_name(&certs[0])
        .ok_or_else(|| format!("{}: certificate has no common name", args.cert.display()))?;
    let policy_text =
        fs::read_to_string(&args.policy).map_err(|e| format!("{}: {e}", args.policy.display()))?;
    let policy: AttestationPolicy =
        serde_json::from_str(&policy_text).map_err(|e| format!("{}: {e}", args.policy.display()))?;
    policy
        .validate()
        .map_err(|e| format!("{}: {e}", args.policy.display()))?;
    let mut runtime = ProviderRuntime::new(provider_id, policy);
    if let Some(path) = &args.filters {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let rules = FilterRules::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        runtime = runtime.with_filters(rules);
    }
    for (name, path) in &args.products {
        let mut index = load_index(path).map_err(|e| format!("{}: {e}", path.display()))?;
        index
            .set_product(name)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let d = index.descriptor().clone();
        let embedder: Arc<dyn Embedder> = if d.embedder_id == HASHED_EMBEDDER_ID {
            Arc::new(HashedEmbedder::new(d.dimension))
        } else {
            let endpoint = args
                .embed_endpoint
                .as_ref()
                .ok_or_else(|| format!("{}: embedder {} needs --embed-endpoint", path.display(), d.embedder_id))?;
            Arc::new(RemoteEmbedder::new(endpoint, &d.embedder_id).with_dimension(d.dimension))
        };
        runtime.add_product(index, embedder).map_err(|e| e.to_string())?;
    }
    Ok(runtime)
}

fn provider_serve(args: &ProviderServeArgs) -> CmdResult {
    let provider = Arc::new(provider_runtime(args)?);
    let dialer = Dialer {
        address: args.orchestrator.clone(),
        server_name: args.server_name.clone().unwrap_or_else(|| host_of(&args.orchestrator)),
        tls: tls::mtls_client_config(&args.cert, &args.key, &args.ca).map_err(|e| e.to_string())?,
        tap: None,
    };
    runtime()?.block_on(async {
        loop {
            match register(&dialer, Arc::clone(&provider)).await {
                Ok(()) if args.once => return Ok(()),
                Ok(()) => tracing::info!("session closed by orchestrator; reconnecting"),
                Err(ProviderError::ConnectionRefused(e)) if !args.once => {
                    tracing::warn!(error = %e, "orchestrator unreachable; retrying")
                }
                Err(e) => return Err(e.to_string()),
            }
            tokio::time::sleep(Duration::from_secs(1)).await;
        }
    })
}

fn orchestrator_measure(config: &Path) -> CmdResult {
    let config = OrchestratorConfig::load(config)?;
    if config.attestation.key_path.is_none() {
        return Err("attestation.key_path is required to derive a policy".into());
    }
    let settings = config.settings()?;
    let orchestrator = Orchestrator::new(settings).map_err(|e| e.to_string())?;
    let policy = AttestationPolicy::new([orchestrator.measurement().clone()], &orchestrator.verifying_key())
        .map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&policy).map_err(|e| e.to_string())?);
    Ok(())
}

fn orchestrator_serve(args: &OrchestratorServeArgs) -> CmdResult {
    let config = OrchestratorConfig::load(&args.config)?;
    let pick = |flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str| {
        flag.clone()
            .or_else(|| file.clone())
            .ok_or_else(|| format!("--{name} is required (or tls.{name} in the config)"))
    };
    let cert = pick(&args.cert, &config.tls.cert, "cert")?;
    let key = pick(&args.key, &config.tls.key, "key")?;
    let ca = pick(&args.ca, &config.tls.ca, "ca")?;
    let provider_tls = tls::mtls_server_config(&cert, &key, &ca).map_err(|e| e.to_string())?;
    let client_tls = tls::server_config(&cert, &key).map_err(|e| e.to_string())?;
    let ephemeral = config.attestation.key_path.is_none();
    let orchestrator = Orchestrator::new(config.settings()?).map_err(|e| e.to_string())?;
    if ephemeral {
        let policy = AttestationPolicy::new([orchestrator.measurement().clone()], &orchestrator.verifying_key())
            .map_err(|e| e.to_string())?;
        println!("{}", serde_json::to_string(&policy).map_err(|e| e.to_string())?);
    }
    runtime()?.block_on(async {
        let providers = tokio::net::TcpListener::bind(&args.listen_providers)
            .await
            .map_err(|e| format!("{}: {e}", args.listen_providers))?;
        let clients = tokio::net::TcpListener::bind(&args.listen_clients)
            .await
            .map_err(|e| format!("{}: {e}", args.listen_clients))?;
        tracing::info!(
            providers = %args.listen_providers,
            clients = %args.listen_clients,
            measurement = %orchestrator.measurement(),
            "orchestrator listening"
        );
        tokio::select! {
            r = serve_provider_endpoint(Arc::clone(&orchestrator), providers, provider_tls) => r,
            r = serve_client_endpoint(Arc::clone(&orchestrator), clients, client_tls) => r,
        }
        .map_err(|e| e.to_string())
    })
}

fn query(args: &QueryArgs) -> CmdResult {
    let tls = tls::client_config(&args.ca).map_err(|e| e.to_string())?;
    let server_name = args.server_name.clone().unwrap_or_else(|| host_of(&args.orchestrator));
    let record = runtime()?.block_on(async {
        let mut client = QueryClient::connect(&args.orchestrator, &server_name, tls)
            .await
            .map_err(|e| e.to_string())?;
        client.query(&args.question).await.map_err(|e| e.to_string())
    })?;
    println!("{}", record.answer_text);
    if args.verbose {
        println!("query_id: {}", record.query_id);
        println!("strategy: {}", record.strategy.as_str());
        println!("measurement: {}", record.measurement);
        println!("candidates: {}", record.candidate_count);
        for (id, digest) in record.context_ids.iter().zip(&record.context_digests) {
            println!("context: {id} {digest}");
        }
        println!("participating: {}", record.participating_providers.join(","));
        for f in &record.failed_providers {
            println!("failed: {} ({})", f.provider_id, f.reason);
        }
    }
    Ok(())
}

fn bench_corpora(corpora: &[(String, PathBuf)]) -> Result<Vec<SiteCorpus>, String> {
    let mut sites: BTreeMap<String, SiteCorpus> = BTreeMap::new();
    for (site, path) in corpora {
        let product = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format!("{}: cannot name a product after this file", path.display()))?
            .to_string();
        let chunks = load_corpus(path, site, &product).map_err(|e| e.to_string())?;
        let entry = sites.entry(site.clone()).or_insert_with(|| SiteCorpus {
            site_id: site.clone(),
            products: BTreeMap::new(),
        });
        if entry.products.insert(product.clone(), chunks).is_some() {
            return Err(format!("site {site} has two corpora named {product}"));
        }
    }
    Ok(sites.into_values().collect())
}

fn bench_run(args: &BenchRunArgs) -> CmdResult {
    let scenarios = args
        .scenarios
        .iter()
        .map(|s| s.parse::<Scenario>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut setup = match &args.qa {
        Some(qa_path) => {
            let qa = load_qa(qa_path).map_err(|e| e.to_string())?;
            let dataset = qa_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("qa")
                .to_string();
            BenchSetup::reference(&dataset, bench_corpora(&args.corpora)?, qa)
        }
        None => {
            let mode = if args.parallel { ExecMode::preferred() } else { ExecMode::Sequential };
            let set = synth_corpus_with(args.questions, args.sites, args.seed, mode)
                .map_err(|e| e.to_string())?;
            BenchSetup::synthetic(set)
        }
    };
    setup.audit_dir = args.audit_dir.clone();
    setup.parallel = args.parallel;

    let mut reports = Vec::new();
    for scenario in &scenarios {
        reports.push(run_scenario_blocking(scenario, &setup).map_err(|e| e.to_string())?);
    }
    let table = compare_report(&reports);
    print!("{table}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let json = serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())?;
        let txt_path = dir.join("report.txt");
        let json_path = dir.join("report.json");
        fs::write(&txt_path, &table).map_err(|e| format!("{}: {e}", txt_path.display()))?;
        fs::write(&json_path, json + "\n").map_err(|e| format!("{}: {e}", json_path.display()))?;
    }
    Ok(())
}

fn attest_keygen(out: &Path) -> CmdResult {
    let key = generate_signing_key();
    fs::write(out, hex::encode(key.to_bytes()) + "\n").map_err(|e| format!("{}: {e}", out.display()))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(out, fs::Permissions::from_mode(0o600))
            .map_err(|e| format!("{}: {e}", out.display()))?;
    }
    println!("{}", hex::encode(key.verifying_key().as_bytes()));
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Certs(CertsCommand::Gen { out, names }) => certs_gen(&out, &names),
        Command::Ingest(args) => ingest(&args),
        Command::Provider(ProviderCommand::Serve(args)) => provider_serve(&args),
        Command::Orchestrator(OrchestratorCommand::Serve(args)) => orchestrator_serve(&args),
        Command::Orchestrator(OrchestratorCommand::Measure { config }) => orchestrator_measure(&config),
        Command::Query(args) => query(&args),
        Command::Bench(BenchCommand::Run(args)) => bench_run(&args),
        Command::Attest(AttestCommand::Keygen { out }) => attest_keygen(&out),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
