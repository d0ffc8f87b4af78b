use std::fs;
use std::path::{Path, PathBuf};

use dpsynth_core::accountant::{AccountantReport, DpParams, PrivacyMode, SamplingPlan};
use dpsynth_core::attack::{
    pii_templates, run_mia, run_naive_pii_attack, run_pii_attack, MiaArm, MiaConfig, DEFAULT_ANSWER_PREFIX,
    DEFAULT_ATTACK_PROMPT,
};
use dpsynth_core::eval::{
    evaluate_icl, evaluate_structured, EvalReport, GreedyIclModel, StructuredReport, TaskDefinition, DEFAULT_HEADER,
};
use dpsynth_core::pipeline::{
    builtin_templates, read_corpus, read_dataset, write_corpus, write_traces, CorpusRecord, Generator, PipelineError,
    TemplatePair,
};
use dpsynth_core::provider::{AnyProvider, RemoteProvider, ToyModel, ToyModelSpec};
use serde::{Deserialize, Serialize};

use crate::config::{AttackKindConfig, LoadedConfig, ProviderConfig, RunOptions, AUTH_TOKEN_ENV};
use crate::CliError;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_TRACE_FILE: &str = "partial_trace.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const STRUCTURED_REPORT_FILE: &str = "structured_report.json";
pub const ATTACK_REPORT_FILE: &str = "attack_report.json";

const MIA_PUBLIC_TEMPLATE: &str = "Write one text with label {label}.\nText: ";
const MIA_PRIVATE_TEMPLATE: &str = "Here is a text with label {label}.\n{text}\nWrite another one.\nText: ";

pub fn build_provider(config: &ProviderConfig) -> Result<AnyProvider, CliError> {
    match (&config.toy_spec, &config.remote) {
        (Some(path), None) => Ok(AnyProvider::Toy(ToyModel::new(ToyModelSpec::load(path)?))),
        (None, Some(remote)) => {
            let mut remote = remote.clone();
            if remote.auth_token.is_none() {
                remote.auth_token = std::env::var(AUTH_TOKEN_ENV).ok();
            }
            Ok(AnyProvider::Remote(RemoteProvider::connect(remote)?))
        }
        _ => Err(CliError::Config("[provider] needs exactly one of toy_spec or [provider.remote]".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub temperature: f64,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
}

impl From<&SamplingPlan> for SamplingSummary {
    fn from(p: &SamplingPlan) -> Self {
        Self {
            temperature: p.temperature,
            max_tokens: p.max_tokens,
            clip_bound: p.clip_bound,
            subset_size: p.subset_size,
        }
    }
}

/// Everything needed to rerun a command bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub config_file: String,
    pub config_sha256: String,
    pub config_text: String,
    pub master_seed: u64,
    pub non_private: bool,
    pub sampling: SamplingSummary,
    pub accountant: Option<AccountantReport>,
    pub records: usize,
    pub outputs: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn output_dir(loaded: &LoadedConfig, opts: &RunOptions) -> PathBuf {
    opts.output_dir.clone().unwrap_or_else(|| loaded.config.output_dir.clone())
}

fn seed(loaded: &LoadedConfig, opts: &RunOptions) -> u64 {
    opts.master_seed.unwrap_or(loaded.config.master_seed)
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub records: Vec<CorpusRecord>,
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

pub fn cmd_generate(loaded: &LoadedConfig, opts: &RunOptions) -> Result<GenerateSummary, CliError> {
    let config = &loaded.config;
    let gen_cfg = config
        .generate
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no [generate] section".into()))?;
    let mode = config.privacy_mode(opts)?;
    let templates = match &gen_cfg.template {
        Some(name) => builtin_templates(name)
            .ok_or_else(|| CliError::Config(format!("unknown built-in template {name:?}")))?,
        None => TemplatePair::new(
            gen_cfg.public_template.as_deref().unwrap_or_default(),
            gen_cfg.private_template.as_deref().unwrap_or_default(),
        )?,
    };
    let data = read_dataset(&gen_cfg.dataset)?;
    let requests: Vec<(String, usize)> = gen_cfg.counts.iter().map(|(l, n)| (l.clone(), *n)).collect();
    let provider = build_provider(&config.provider)?;
    let generator = Generator::new(&provider, templates, mode.clone())?
        .with_extras(gen_cfg.slots.clone())
        .with_parallel(config.provider.parallel);
    let master_seed = seed(loaded, opts);
    let dir = output_dir(loaded, opts);
    create_dir(&dir)?;

    let synthetic = match generator.generate_corpus(&data, &requests, gen_cfg.per_label, master_seed) {
        Ok(records) => records,
        Err(PipelineError::Provider {
            source,
            partial: Some(trace),
        }) => {
            write_json(&dir.join(PARTIAL_TRACE_FILE), &trace)?;
            return Err(CliError::from(source));
        }
        Err(e) => return Err(e.into()),
    };
    let records: Vec<CorpusRecord> = synthetic.iter().map(CorpusRecord::from).collect();
    write_corpus(dir.join(CORPUS_FILE), &records)?;
    write_traces(dir.join(TRACES_FILE), &synthetic)?;

    let plan = generator.plan();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "generate".into(),
        config_file: loaded
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config_sha256: loaded.sha256.clone(),
        config_text: loaded.text.clone(),
        master_seed,
        non_private: matches!(mode, PrivacyMode::NonPrivate(_)),
        sampling: plan.into(),
        accountant: plan.report,
        records: records.len(),
        outputs: vec![CORPUS_FILE.into(), TRACES_FILE.into()],
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(GenerateSummary {
        records,
        manifest,
        output_dir: dir,
    })
}

#[derive(Debug, Default)]
pub struct EvaluateSummary {
    pub icl: Option<EvalReport>,
    pub structured: Option<StructuredReport>,
}

pub fn cmd_evaluate(loaded: &LoadedConfig, opts: &RunOptions) -> Result<EvaluateSummary, CliError> {
    let config = &loaded.config;
    let eval_cfg = config
        .evaluate
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no [evaluate] section".into()))?;
    let dir = output_dir(loaded, opts);
    let corpus_path = eval_cfg.corpus.clone().unwrap_or_else(|| dir.join(CORPUS_FILE));
    let needs_corpus = eval_cfg.structured.is_some() || eval_cfg.k > 0;
    let corpus = if needs_corpus {
        if !corpus_path.exists() {
            return Err(CliError::Config(format!("corpus {} does not exist", corpus_path.display())));
        }
        read_corpus(&corpus_path)?
    } else {
        Vec::new()
    };
    create_dir(&dir)?;

    let mut summary = EvaluateSummary::default();
    if let Some(task_path) = &eval_cfg.task {
        let task = TaskDefinition::load(task_path)?;
        let provider = build_provider(&config.provider)?;
        let model = GreedyIclModel::new(&provider, eval_cfg.max_answer_tokens);
        let report = evaluate_icl(
            &corpus,
            &task,
            eval_cfg.k,
            eval_cfg.runs,
            seed(loaded, opts),
            &model,
            config.provider.parallel,
        )?;
        write_json(&dir.join(EVAL_REPORT_FILE), &report)?;
        summary.icl = Some(report);
    }
    if let Some(schema) = &eval_cfg.structured {
        let texts: Vec<&str> = corpus.iter().map(|r| r.text.as_str()).collect();
        let report = evaluate_structured(&texts, schema);
        write_json(&dir.join(STRUCTURED_REPORT_FILE), &report)?;
        summary.structured = Some(report);
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// `None` for the non-private baseline.
    pub epsilon: Option<f64>,
    pub leak_count: Option<usize>,
    pub mean_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKindConfig,
    pub trials: usize,
    pub master_seed: u64,
    pub arms: Vec<ArmResult>,
}

impl std::fmt::Display for AttackReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[attack] kind={:?} trials={} seed={}", self.kind, self.trials, self.master_seed)?;
        for arm in &self.arms {
            let name = arm.epsilon.map(|e| format!("epsilon={e}")).unwrap_or_else(|| "non-private".into());
            write!(f, "\n  {name:<16}")?;
            if let Some(n) = arm.leak_count {
                write!(f, " leaks = {n}/{}", self.trials)?;
            }
            if let Some(auc) = arm.mean_auc {
                write!(f, " mean AUC = {auc:.4}")?;
            }
        }
        Ok(())
    }
}

pub fn cmd_attack(loaded: &LoadedConfig, opts: &RunOptions) -> Result<AttackReport, CliError> {
    opts.validate()?;
    let config = &loaded.config;
    let attack = config
        .attack
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no [attack] section".into()))?;
    let delta = config
        .privacy
        .delta
        .ok_or_else(|| CliError::Config("[privacy] delta is required for attacks".into()))?;
    if attack.epsilons.is_empty() {
        return Err(CliError::Config("[attack] epsilons must list at least one budget".into()));
    }
    let data = read_dataset(&attack.dataset)?;
    let provider = build_provider(&config.provider)?;
    let master_seed = seed(loaded, opts);
    let privacy = &config.privacy;
    let mut arms = Vec::new();

    match attack.kind {
        AttackKindConfig::PiiExtraction => {
            let templates = pii_templates(
                attack.attack_prompt.as_deref().unwrap_or(DEFAULT_ATTACK_PROMPT),
                attack.answer_prefix.as_deref().unwrap_or(DEFAULT_ANSWER_PREFIX),
            )?;
            for &epsilon in &attack.epsilons {
                let params = DpParams::new(epsilon, delta, attack.max_tokens, privacy.clip_bound, privacy.subset_size)?;
                let outcome = run_pii_attack(&data, &params, &provider, attack.trials, master_seed, &templates)?;
                arms.push(ArmResult {
                    epsilon: Some(epsilon),
                    leak_count: Some(outcome.leak_count),
                    mean_auc: None,
                });
            }
            let naive = run_naive_pii_attack(
                &data,
                &provider,
                attack.trials,
                attack.naive_temperature,
                attack.max_tokens,
                master_seed,
                &templates,
            )?;
            arms.push(ArmResult {
                epsilon: None,
                leak_count: Some(naive.leak_count),
                mean_auc: None,
            });
        }
        AttackKindConfig::MembershipInference => {
            let nonmember_path = attack
                .nonmember_dataset
                .as_ref()
                .ok_or_else(|| CliError::Config("membership inference needs nonmember_dataset".into()))?;
            let nonmembers = read_dataset(nonmember_path)?;
            let mia = MiaConfig {
                probes_per_side: attack.probes_per_side,
                header: attack.header.clone().unwrap_or_else(|| DEFAULT_HEADER.into()),
                templates: TemplatePair::new(
                    attack.public_template.as_deref().unwrap_or(MIA_PUBLIC_TEMPLATE),
                    attack.private_template.as_deref().unwrap_or(MIA_PRIVATE_TEMPLATE),
                )?,
            };
            for &epsilon in &attack.epsilons {
                let params = DpParams::new(epsilon, delta, privacy.max_tokens, privacy.clip_bound, privacy.subset_size)?;
                let outcome = run_mia(
                    &data,
                    &nonmembers,
                    &MiaArm::Private(params),
                    &provider,
                    attack.trials,
                    master_seed,
                    &mia,
                )?;
                arms.push(ArmResult {
                    epsilon: Some(epsilon),
                    leak_count: None,
                    mean_auc: Some(outcome.mean_auc),
                });
            }
            let raw = run_mia(&data, &nonmembers, &MiaArm::NonPrivate, &provider, attack.trials, master_seed, &mia)?;
            arms.push(ArmResult {
                epsilon: None,
                leak_count: None,
                mean_auc: Some(raw.mean_auc),
            });
        }
    }
    let report = AttackReport {
        kind: attack.kind,
        trials: attack.trials,
        master_seed,
        arms,
    };
    let dir = output_dir(loaded, opts);
    create_dir(&dir)?;
    write_json(&dir.join(ATTACK_REPORT_FILE), &report)?;
    Ok(report)
}

/// Accountant report for `params`. Reads and writes nothing.
pub fn cmd_audit(params: &DpParams) -> Result<AccountantReport, CliError> {
    Ok(AccountantReport::new(params)?)
}
