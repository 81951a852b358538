//! Batch subcommands. Each run writes its outputs atomically together with
//! a `<out>.manifest.json`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use linkwerk::evalgen::{
    demo_corpus, evaluate, DEMO_SEED, generate_corpus, read_truth, write_truth, CorruptionConfig, EvalError, Prediction,
    RecordsPerEntity,
};
use linkwerk::fttp::scenario::{run_scenario, ScriptError, THREE_SITES};
use linkwerk::fttp::{encode_identity, scan, FttpConfig};
use linkwerk::idmodel::csv::{read_records, write_records};
use linkwerk::idmodel::{normalize, IdentityError, NormalizedIdentity};
use linkwerk::linkage::{
    deterministic_cascade, link_datasets, link_within, presets, read_cascade_records, LinkageConfig,
    LinkageError, LinkageResult, Scorer,
};
use linkwerk::pprl::{BloomEncoder, CodecError, KeyRing, Secret};
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::manifest::{ManifestBuilder, Outputs};
use crate::service::ServiceError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Input { path: String, msg: String },
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Linkage(#[from] LinkageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("scenario line {}: {}", .0.line, .0.msg)]
    Script(ScriptError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Usage(String),
    #[error("{0} invariant scan(s) failed")]
    ScansFailed(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "linkwerk", version, about = "Record linkage, pseudonymization and fTTP simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Canonicalize identity records.
    Normalize(IoArgs),
    /// Bloom-encode identity records for fTTP submission.
    Encode(EncodeArgs),
    /// Probabilistic linkage: one input deduplicates, two inputs link.
    Link(LinkArgs),
    /// Deterministic cascade of claim records against registry records.
    Cascade(CascadeArgs),
    /// Generate a synthetic corpus with ground truth.
    GenCorpus(GenArgs),
    /// Score a predicted clustering against ground truth.
    Evaluate(EvalArgs),
    /// Run a multi-site fTTP scenario and its invariant scans.
    Simulate(SimArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Write a key file with fresh random secrets.
    Keygen(KeygenArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// fTTP configuration JSON; the bundled default otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "LINKWERK_KEYFILE")]
    pub keyfile: PathBuf,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, default_value = "registry-probabilistic")]
    pub preset: String,
    /// Linkage configuration JSON, used instead of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "LINKWERK_KEYFILE")]
    pub keyfile: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    /// Claims CSV, then registry CSV.
    #[arg(long = "in", num_args = 1, required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Records CSV; truth goes to `--truth` or `<out>.truth.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Request JSON `{nEntities, recordsPerEntity, corruption}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// The bundled 100-record demo corpus; other flags are ignored.
    #[arg(long)]
    pub demo: bool,
    #[arg(long, default_value_t = 1000)]
    pub entities: usize,
    /// `N` or `MIN-MAX` records per entity.
    #[arg(long, default_value = "1-4")]
    pub per_entity: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub typo_rate: f64,
    #[arg(long, default_value_t = 0.02)]
    pub field_swap_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub date_error_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub name_change_rate: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction: CSV `record_id,cluster` or a linkage result JSON.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario script; the bundled three-site script otherwise.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the seed in the script header.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LINKWERK_CONFIG")]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Key ids to generate.
    #[arg(long = "id", default_values_t = ["bloom".to_string(), "fttp".into(), "registry".into(), "psn".into()])]
    pub ids: Vec<String>,
    /// Deterministic secrets, for tests only.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CorpusRequest {
    pub n_entities: usize,
    pub records_per_entity: RecordsPerEntity,
    pub corruption: CorruptionConfig,
}

/// Runs one subcommand. `args` are echoed into the manifest.
pub fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    match cli.command {
        Command::Normalize(a) => normalize_cmd(a, args),
        Command::Encode(a) => encode_cmd(a, args),
        Command::Link(a) => link_cmd(a, args),
        Command::Cascade(a) => cascade_cmd(a, args),
        Command::GenCorpus(a) => gen_cmd(a, args),
        Command::Evaluate(a) => eval_cmd(a, args),
        Command::Simulate(a) => simulate_cmd(a, args),
        Command::Serve(a) => serve_cmd(a),
        Command::Keygen(a) => keygen_cmd(a, args),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read(path)?)
        .map_err(|e| CliError::Input { path: path.display().to_string(), msg: e.to_string() })
}

fn load_records(path: &Path, m: &mut ManifestBuilder) -> Result<Vec<NormalizedIdentity>, CliError> {
    m.input(path).map_err(io_err(path))?;
    let records = read_records(read(path)?.as_slice())
        .map_err(|e| CliError::Input { path: path.display().to_string(), msg: e.to_string() })?;
    Ok(records.iter().map(normalize).collect::<Result<_, _>>()?)
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("output serializes");
    b.push(b'\n');
    b
}

fn finish(m: ManifestBuilder, out: &Path, bytes: Vec<u8>) -> Result<(), CliError> {
    let mut o = Outputs::new();
    o.stage(out, &bytes).map_err(io_err(out))?;
    m.finish(o, out).map_err(io_err(out))?;
    Ok(())
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn normalize_cmd(a: IoArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("normalize", args);
    let mut all = Vec::new();
    for p in &a.inputs {
        all.extend(load_records(p, &mut m)?);
    }
    let bytes = match a.format {
        Format::Json => json_bytes(&all),
        Format::Csv => {
            let mut buf = Vec::new();
            let recs: Vec<_> = all.iter().map(NormalizedIdentity::to_record).collect();
            write_records(&mut buf, &recs)?;
            buf
        }
    };
    finish(m, &a.out, bytes)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EncodedRecord {
    record_id: String,
    encoding: String,
}

fn encode_cmd(a: EncodeArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("encode", args);
    let cfg: FttpConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FttpConfig::default_preset(),
    };
    m.config(&cfg.bloom);
    let keys = KeyRing::load(&a.keyfile)?;
    let encoder = BloomEncoder::new(cfg.bloom.clone(), &keys)?;
    let mut out = Vec::new();
    for p in &a.io.inputs {
        for n in load_records(p, &mut m)? {
            let enc = encode_identity(&encoder, &n)?;
            out.push(EncodedRecord { record_id: n.source_record_id.clone(), encoding: enc.to_wire() });
        }
    }
    let bytes = match a.io.format {
        Format::Json => json_bytes(&out),
        Format::Csv => csv_bytes(&["record_id", "encoding"], out.iter().map(|r| [&r.record_id, &r.encoding])),
    };
    finish(m, &a.io.out, bytes)
}

fn linkage_config(preset: &str, config: Option<&Path>) -> Result<LinkageConfig, CliError> {
    match config {
        Some(p) => Ok(LinkageConfig::from_json(&String::from_utf8_lossy(&read(p)?))?),
        None => Ok(presets::load(preset)?),
    }
}

pub fn run_link(cfg: LinkageConfig, keys: Option<&KeyRing>, inputs: &[Vec<NormalizedIdentity>]) -> Result<LinkageResult, CliError> {
    let scorer = Scorer::new(cfg, keys)?;
    match inputs {
        [one] => Ok(link_within(one, &scorer)),
        [a, b] => Ok(link_datasets(a, b, &scorer)),
        _ => Err(CliError::Usage("link takes one or two --in files".into())),
    }
}

fn link_cmd(a: LinkArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("link", args);
    let cfg = linkage_config(&a.preset, a.config.as_deref())?;
    m.config(&cfg);
    m.seed(cfg.seed);
    let keys = a.keyfile.as_deref().map(KeyRing::load).transpose()?;
    let inputs = a.io.inputs.iter().map(|p| load_records(p, &mut m)).collect::<Result<Vec<_>, _>>()?;
    let result = run_link(cfg, keys.as_ref(), &inputs)?;
    let bytes = match a.io.format {
        Format::Json => json_bytes(&result),
        Format::Csv => {
            let mut buf = Vec::new();
            result.write_csv(&mut buf)?;
            buf
        }
    };
    finish(m, &a.io.out, bytes)
}

fn cascade_cmd(a: CascadeArgs, args: Vec<String>) -> Result<(), CliError> {
    let [claims_path, registry_path] = a.inputs.as_slice() else {
        return Err(CliError::Usage("cascade takes --in CLAIMS --in REGISTRY".into()));
    };
    let mut m = ManifestBuilder::start("cascade", args);
    m.seed(a.seed);
    let mut load = |p: &Path| -> Result<_, CliError> {
        m.input(p).map_err(io_err(p))?;
        read_cascade_records(read(p)?.as_slice())
            .map_err(|e| CliError::Input { path: p.display().to_string(), msg: e.to_string() })
    };
    let claims = load(claims_path)?;
    let registry = load(registry_path)?;
    let result = deterministic_cascade(&claims, &registry, a.seed);
    let bytes = match a.format {
        Format::Json => json_bytes(&result),
        Format::Csv => csv_bytes(
            &["claim_id", "registry_id", "step"],
            result.assignments.iter().map(|(c, r)| {
                let step = serde_json::to_value(result.steps[c]).expect("enum");
                [c.clone(), r.clone(), step.as_str().unwrap_or_default().to_string()]
            }),
        ),
    };
    finish(m, &a.out, bytes)
}

fn parse_per_entity(s: &str) -> Result<RecordsPerEntity, CliError> {
    let bad = || CliError::Usage(format!("--per-entity {s:?}: expected N or MIN-MAX"));
    match s.split_once('-') {
        Some((lo, hi)) => Ok(RecordsPerEntity::Uniform {
            min: lo.trim().parse().map_err(|_| bad())?,
            max: hi.trim().parse().map_err(|_| bad())?,
        }),
        None => Ok(RecordsPerEntity::Fixed { n: s.trim().parse().map_err(|_| bad())? }),
    }
}

pub fn truth_path(out: &Path) -> PathBuf {
    out.with_extension("truth.csv")
}

fn gen_cmd(a: GenArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("gen-corpus", args);
    let corpus = if a.demo {
        m.config(&"demo");
        m.seed(DEMO_SEED);
        demo_corpus()
    } else {
        let mut req = match &a.config {
            Some(p) => read_json::<CorpusRequest>(p)?,
            None => CorpusRequest {
                n_entities: a.entities,
                records_per_entity: parse_per_entity(&a.per_entity)?,
                corruption: CorruptionConfig {
                    typo_rate: a.typo_rate,
                    field_swap_rate: a.field_swap_rate,
                    date_error_rate: a.date_error_rate,
                    missing_rate: a.missing_rate,
                    name_change_rate: a.name_change_rate,
                    seed: 0,
                },
            },
        };
        if let Some(s) = a.seed {
            req.corruption.seed = s;
        }
        m.config(&req);
        m.seed(req.corruption.seed);
        generate_corpus(req.n_entities, req.records_per_entity, &req.corruption)?
    };
    let mut records = Vec::new();
    write_records(&mut records, &corpus.records)?;
    let mut truth = Vec::new();
    write_truth(&mut truth, &corpus.truth)?;
    let truth_out = a.truth.unwrap_or_else(|| truth_path(&a.out));
    let mut o = Outputs::new();
    o.stage(&a.out, &records).map_err(io_err(&a.out))?;
    o.stage(&truth_out, &truth).map_err(io_err(&truth_out))?;
    m.finish(o, &a.out).map_err(io_err(&a.out))?;
    Ok(())
}

#[derive(Deserialize)]
struct PredictionRow {
    record_id: String,
    cluster: String,
}

pub fn read_prediction(path: &Path) -> Result<Prediction, CliError> {
    let bytes = read(path)?;
    let input_err = |msg: String| CliError::Input { path: path.display().to_string(), msg };
    if path.extension().is_some_and(|e| e == "json") {
        let result: LinkageResult = serde_json::from_slice(&bytes).map_err(|e| input_err(e.to_string()))?;
        return Ok(Prediction::from_linkage(&result));
    }
    let mut map = std::collections::BTreeMap::new();
    for (i, row) in csv::Reader::from_reader(bytes.as_slice()).deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| input_err(format!("row {}: {e}", i + 2)))?;
        if map.insert(row.record_id.clone(), row.cluster).is_some() {
            return Err(input_err(format!("row {}: duplicate record {}", i + 2, row.record_id)));
        }
    }
    Ok(Prediction(map))
}

fn eval_cmd(a: EvalArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("evaluate", args);
    m.input(&a.input).map_err(io_err(&a.input))?;
    m.input(&a.truth).map_err(io_err(&a.truth))?;
    let prediction = read_prediction(&a.input)?;
    let truth = read_truth(read(&a.truth)?.as_slice())?;
    let report = evaluate(&prediction, &truth, None)?;
    let bytes = match a.format {
        Format::Json => json_bytes(&report),
        Format::Csv => {
            let v = serde_json::to_value(&report).expect("report serializes");
            let obj = v.as_object().expect("struct");
            let rows: Vec<[String; 2]> = obj
                .iter()
                .map(|(k, v)| [k.clone(), v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())])
                .collect();
            csv_bytes(&["metric", "value"], rows)
        }
    };
    finish(m, &a.out, bytes)
}

fn simulate_cmd(a: SimArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("simulate", args);
    let mut script = match &a.input {
        Some(p) => {
            m.input(p).map_err(io_err(p))?;
            String::from_utf8_lossy(&read(p)?).into_owned()
        }
        None => THREE_SITES.to_string(),
    };
    if let Some(seed) = a.seed {
        script = reseed(&script, seed)?;
    }
    let mut run = run_scenario(&script).map_err(CliError::Script)?;
    m.seed(run.log.header.seed);
    let reports = scan::run_all(&mut run);
    for r in &reports {
        eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    finish(m, &a.out, run.log.to_jsonl().into_bytes())?;
    match reports.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::ScansFailed(n)),
    }
}

fn reseed(script: &str, seed: u64) -> Result<String, CliError> {
    let (head, rest) = script.split_once('\n').unwrap_or((script, ""));
    let mut h: serde_json::Value =
        serde_json::from_str(head).map_err(|e| CliError::Script(ScriptError { line: 1, msg: e.to_string() }))?;
    h["seed"] = seed.into();
    Ok(format!("{h}\n{rest}"))
}

fn serve_cmd(a: ServeArgs) -> Result<(), CliError> {
    let cfg = ServiceConfig::load(&a.config).map_err(ServiceError::from)?;
    let rt = tokio::runtime::Runtime::new().map_err(io_err(&a.config))?;
    Ok(rt.block_on(crate::service::serve(cfg))?)
}

fn keygen_cmd(a: KeygenArgs, args: Vec<String>) -> Result<(), CliError> {
    let mut m = ManifestBuilder::start("keygen", args);
    let mut rng: Box<dyn RngCore> = match a.seed {
        Some(s) => {
            m.seed(s);
            Box::new(rand::rngs::StdRng::seed_from_u64(s))
        }
        None => Box::new(rand::rngs::OsRng),
    };
    let ids: BTreeSet<&String> = a.ids.iter().collect();
    let mut ring = KeyRing::new();
    for id in ids {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        ring.insert(Secret::new(id.as_str(), b.to_vec()));
    }
    finish(m, &a.out, ring.to_json().into_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_entity_forms() {
        assert_eq!(parse_per_entity("2").unwrap(), RecordsPerEntity::Fixed { n: 2 });
        assert_eq!(parse_per_entity("1-4").unwrap(), RecordsPerEntity::Uniform { min: 1, max: 4 });
        assert!(parse_per_entity("x").is_err());
    }

    #[test]
    fn reseed_rewrites_the_header_only() {
        let s = reseed(THREE_SITES, 7).unwrap();
        assert!(s.starts_with("{\"format\""));
        assert!(s.lines().next().unwrap().contains("\"seed\":7"));
        assert_eq!(s.lines().skip(1).collect::<Vec<_>>(), THREE_SITES.lines().skip(1).collect::<Vec<_>>());
    }

    #[test]
    fn parses_documented_flags() {
        let c = Cli::try_parse_from(["linkwerk", "link", "--in", "a.csv", "--out", "o.json", "--format", "csv"]).unwrap();
        assert!(matches!(c.command, Command::Link(LinkArgs { io: IoArgs { format: Format::Csv, .. }, .. })));
        assert!(Cli::try_parse_from(["linkwerk", "link", "--out", "o.json"]).is_err());
    }
}
