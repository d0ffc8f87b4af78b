//! Run configuration (TOML).
//!
//! Relative paths are resolved against the directory holding the config file.
//! Every privacy parameter must be given explicitly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dpsynth_core::accountant::{DpParams, NonPrivateParams, PrivacyMode};
use dpsynth_core::eval::Schema;
use dpsynth_core::provider::RemoteEndpointConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const AUTH_TOKEN_ENV: &str = "DPSYNTH_AUTH_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub toy_spec: Option<PathBuf>,
    pub remote: Option<RemoteEndpointConfig>,
    /// Query sessions and examples concurrently.
    #[serde(default)]
    pub parallel: bool,
}

/// Privacy section. `epsilon` and `delta` may only be omitted in non-private mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
}

impl PrivacyConfig {
    pub fn dp_params(&self) -> Result<DpParams, CliError> {
        let (Some(epsilon), Some(delta)) = (self.epsilon, self.delta) else {
            return Err(CliError::Config(
                "[privacy] epsilon and delta are required (use --non-private --temperature for non-private runs)"
                    .into(),
            ));
        };
        Ok(DpParams::new(epsilon, delta, self.max_tokens, self.clip_bound, self.subset_size)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub dataset: PathBuf,
    /// Built-in template pair name; or give both `public_template` and `private_template`.
    pub template: Option<String>,
    pub public_template: Option<String>,
    pub private_template: Option<String>,
    #[serde(default = "yes")]
    pub per_label: bool,
    /// Number of examples to generate per label.
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Defaults to `<output_dir>/corpus.jsonl`.
    pub corpus: Option<PathBuf>,
    pub task: Option<PathBuf>,
    #[serde(default)]
    pub k: usize,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
    /// Also report JSON parse/validate rates of the corpus texts.
    pub structured: Option<Schema>,
}

fn one() -> usize {
    1
}

fn default_answer_tokens() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKindConfig {
    PiiExtraction,
    MembershipInference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKindConfig,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    /// Private data (email-bearing records, or the member pool).
    pub dataset: PathBuf,
    /// Non-member pool for membership inference.
    pub nonmember_dataset: Option<PathBuf>,
    pub attack_prompt: Option<String>,
    pub answer_prefix: Option<String>,
    /// Tokens per extraction attempt.
    #[serde(default = "default_attack_tokens")]
    pub max_tokens: usize,
    /// Temperature of the naive non-private baseline; absent means greedy.
    pub naive_temperature: Option<f64>,
    #[serde(default = "default_probes")]
    pub probes_per_side: usize,
    pub header: Option<String>,
    pub public_template: Option<String>,
    pub private_template: Option<String>,
}

fn default_attack_tokens() -> usize {
    dpsynth_core::attack::PII_ATTACK_TOKENS
}

fn default_probes() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub provider: ProviderConfig,
    pub privacy: PrivacyConfig,
    pub generate: Option<GenerateConfig>,
    pub evaluate: Option<EvaluateConfig>,
    pub attack: Option<AttackSection>,
}

/// A parsed config together with its source text and hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub sha256: String,
    pub path: PathBuf,
}

/// Command-line switches that change how a config is run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunOptions {
    pub non_private: bool,
    pub temperature: Option<f64>,
    pub master_seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn validate(&self) -> Result<(), CliError> {
        match (self.non_private, self.temperature) {
            (true, None) => Err(CliError::Config("--non-private requires an explicit --temperature".into())),
            (false, Some(_)) => Err(CliError::Config("--temperature is only allowed together with --non-private".into())),
            _ => Ok(()),
        }
    }
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Parse `text` as if it had been read from `path`.
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        config.check()?;
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Self {
            config,
            text: text.to_string(),
            sha256,
            path: path.to_path_buf(),
        })
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(what: &str, p: &Path) -> Result<(), CliError> {
    if !p.exists() {
        return Err(CliError::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        if let Some(p) = &mut self.provider.toy_spec {
            resolve(base, p);
        }
        if let Some(g) = &mut self.generate {
            resolve(base, &mut g.dataset);
        }
        if let Some(e) = &mut self.evaluate {
            if let Some(p) = &mut e.corpus {
                resolve(base, p);
            }
            if let Some(p) = &mut e.task {
                resolve(base, p);
            }
        }
        if let Some(a) = &mut self.attack {
            resolve(base, &mut a.dataset);
            if let Some(p) = &mut a.nonmember_dataset {
                resolve(base, p);
            }
        }
    }

    fn check(&self) -> Result<(), CliError> {
        match (&self.provider.toy_spec, &self.provider.remote) {
            (Some(p), None) => must_exist("toy model spec", p)?,
            (None, Some(_)) => {}
            _ => {
                return Err(CliError::Config(
                    "[provider] needs exactly one of toy_spec or [provider.remote]".into(),
                ))
            }
        }
        if let Some(g) = &self.generate {
            must_exist("dataset", &g.dataset)?;
            let custom = (g.public_template.is_some(), g.private_template.is_some());
            match (&g.template, custom) {
                (Some(_), (false, false)) | (None, (true, true)) => {}
                _ => {
                    return Err(CliError::Config(
                        "[generate] needs either template or both public_template and private_template".into(),
                    ))
                }
            }
        }
        if let Some(e) = &self.evaluate {
            if let Some(t) = &e.task {
                must_exist("task definition", t)?;
            }
            if e.task.is_none() && e.structured.is_none() {
                return Err(CliError::Config("[evaluate] needs a task, a structured schema, or both".into()));
            }
        }
        if let Some(a) = &self.attack {
            must_exist("attack dataset", &a.dataset)?;
            if let Some(p) = &a.nonmember_dataset {
                must_exist("non-member dataset", p)?;
            }
            if a.trials == 0 {
                return Err(CliError::Config("[attack] trials must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// The sampling mode selected by the config and the command-line switches.
    pub fn privacy_mode(&self, opts: &RunOptions) -> Result<PrivacyMode, CliError> {
        opts.validate()?;
        if opts.non_private {
            let temperature = opts.temperature.expect("validated above");
            return Ok(PrivacyMode::NonPrivate(NonPrivateParams {
                temperature,
                max_tokens: self.privacy.max_tokens,
                clip_bound: self.privacy.clip_bound,
                subset_size: self.privacy.subset_size,
            }));
        }
        Ok(PrivacyMode::Private(self.privacy.dp_params()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
master_seed = 7
output_dir = "out"

[provider]
toy_spec = "model.toy"

[privacy]
epsilon = 1.0
delta = 1e-6
max_tokens = 100
clip_bound = 10.0
subset_size = 500
"#;

    fn with_model(text: &str) -> (tempfile::TempDir, Result<LoadedConfig, CliError>) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("model.toy"), "").unwrap();
        let path = dir.path().join("run.toml");
        let loaded = LoadedConfig::parse(text, &path);
        (dir, loaded)
    }

    #[test]
    fn resolves_paths_and_hashes_text() {
        let (dir, loaded) = with_model(BASE);
        let loaded = loaded.unwrap();
        assert_eq!(loaded.config.output_dir, dir.path().join("out"));
        assert_eq!(loaded.sha256.len(), 64);
        let mode = loaded.config.privacy_mode(&RunOptions::default()).unwrap();
        assert!(matches!(mode, PrivacyMode::Private(_)));
    }

    #[test]
    fn privacy_parameters_are_mandatory() {
        let (_d, loaded) = with_model(&BASE.replace("epsilon = 1.0\n", ""));
        let cfg = loaded.unwrap().config;
        assert!(matches!(cfg.privacy_mode(&RunOptions::default()), Err(CliError::Config(_))));
        let opts = RunOptions {
            non_private: true,
            temperature: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(cfg.privacy_mode(&opts), Ok(PrivacyMode::NonPrivate(_))));
        let (_d, loaded) = with_model(&BASE.replace("clip_bound = 10.0\n", ""));
        assert!(matches!(loaded, Err(CliError::Config(_))));
    }

    #[test]
    fn non_private_switches_must_come_together() {
        let (_d, loaded) = with_model(BASE);
        let cfg = loaded.unwrap().config;
        for opts in [
            RunOptions {
                non_private: true,
                ..Default::default()
            },
            RunOptions {
                temperature: Some(1.0),
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.privacy_mode(&opts), Err(CliError::Config(_))));
        }
    }

    #[test]
    fn provider_and_paths_validated() {
        let (_d, loaded) = with_model(&BASE.replace("model.toy", "missing.toy"));
        assert!(matches!(loaded, Err(CliError::Config(m)) if m.contains("missing.toy")));
        let both = BASE.replace(
            "toy_spec = \"model.toy\"",
            "toy_spec = \"model.toy\"\n[provider.remote]\nbase_url = \"http://x\"\nmodel_name = \"m\"",
        );
        let (_d, loaded) = with_model(&both);
        assert!(matches!(loaded, Err(CliError::Config(_))));
        let (_d, loaded) = with_model(&format!("{BASE}\n[generate]\ndataset = \"nope.jsonl\"\ntemplate = \"agnews\"\ncounts = {{ a = 1 }}\n"));
        assert!(matches!(loaded, Err(CliError::Config(m)) if m.contains("nope.jsonl")));
    }
}
