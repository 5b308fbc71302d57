//! Run configuration: defaults, then the TOML file, then `REPE_*`
//! environment variables, then `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use repe_core::pipeline::PipelineConfig;
use repe_core::{Factor, SteeringConfig, ToyModelConfig};

use crate::exit::Failure;

pub const ENV_PREFIX: &str = "REPE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Built-in synthetic network.
    Toy,
    /// Pre-captured activation files.
    Acf,
    /// Live model hooks.
    Tap,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::Acf => "acf",
            BackendKind::Tap => "tap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Template bank JSON; the bundled bank when unset.
    pub templates: Option<PathBuf>,
    /// Directory holding `pairs-<factor>.jsonl` and `vignettes.jsonl` to use
    /// instead of generating them.
    pub corpus: Option<PathBuf>,
    /// Directory holding `<factor>.acf` and `vignettes.acf` for the acf backend.
    pub acf_in: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("repe-out"),
            templates: None,
            corpus: None,
            acf_in: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Corpus sampling, capture noise and fold assignment.
    pub base: u64,
    /// Toy network weights.
    pub model: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { base: 0, model: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub pairs_per_factor: usize,
    pub variants_per_family: usize,
    /// Template families for the vignette set; all when empty.
    pub families: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        CorpusConfig {
            pairs_per_factor: p.pairs_per_factor,
            variants_per_family: p.variants_per_family,
            families: p.families,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Held-out accuracy a layer needs to join the stable range.
    pub stable_accuracy: f64,
    pub stable_min_len: usize,
    /// Significance level for the antecedent weights.
    pub significance: f64,
    /// Largest |beta| the placebo may carry.
    pub placebo_beta: f64,
    /// Minimum |mean delta| that counts as a causal effect.
    pub effect: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            stable_accuracy: repe_core::extract::STABLE_THRESHOLD,
            stable_min_len: repe_core::extract::STABLE_MIN_LEN,
            significance: repe_core::weighting::ALPHA,
            placebo_beta: repe_core::weighting::PLACEBO_BOUND,
            effect: repe_core::intervene::EFFECT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    /// Keys the steering-strength table.
    pub model_family: String,
    pub factors: Vec<Factor>,
    pub folds: usize,
    /// Inclusive layer range for regression and steering; all layers when unset.
    pub layers: Option<[usize; 2]>,
    /// Steering strength; looked up in `alpha_table` by family when unset.
    pub alpha: Option<f64>,
    pub alpha_table: BTreeMap<String, f64>,
    pub paths: Paths,
    pub seeds: Seeds,
    pub corpus: CorpusConfig,
    pub thresholds: Thresholds,
    /// Synthetic network settings. An empty `gamma` means the default ramp
    /// for `toy.layers`.
    pub toy: ToyModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let alpha_table = ["toy", "generic", "llama", "qwen", "gemma"]
            .into_iter()
            .map(|f| (f.to_string(), SteeringConfig::default_alpha(f)))
            .collect();
        RunConfig {
            backend: BackendKind::Toy,
            model_family: "toy".into(),
            factors: Factor::ALL.to_vec(),
            folds: 5,
            layers: None,
            alpha: None,
            alpha_table,
            paths: Paths::default(),
            seeds: Seeds::default(),
            corpus: CorpusConfig::default(),
            thresholds: Thresholds::default(),
            toy: ToyModelConfig::default(),
        }
    }
}

/// Sources layered over the defaults, lowest priority first.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    /// `dotted.key=value` assignments.
    pub sets: Vec<String>,
}

impl RunConfig {
    pub fn resolve(src: &Overrides) -> Result<RunConfig, Failure> {
        let mut root = toml::Value::try_from(RunConfig::default()).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(path) = &src.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            merge(&mut root, toml::Value::Table(file));
        }
        for (key, value) in &src.env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let dotted = rest.to_ascii_lowercase().replace("__", ".");
            assign(&mut root, &dotted, value)?;
        }
        for s in &src.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects key=value, got {s:?}")))?;
            assign(&mut root, k.trim(), v.trim())?;
        }
        let mut cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
        if cfg.toy.gamma.is_empty() {
            cfg.toy.gamma = repe_core::toynet::default_gamma(cfg.toy.layers);
        }
        // The model seed lives under `seeds`; `toy.seed` just mirrors it.
        cfg.toy.seed = cfg.seeds.model;
        Ok(cfg)
    }

    /// Range and existence checks; paths are checked relative to the
    /// current directory.
    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Err(Failure::config(m));
        if self.factors.is_empty() {
            return bad("factor registry is empty".into());
        }
        let mut seen = self.factors.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.factors.len() {
            return bad("factor registry lists a factor twice".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.corpus.pairs_per_factor < self.folds {
            return bad(format!(
                "pairs_per_factor {} is smaller than folds {}",
                self.corpus.pairs_per_factor, self.folds
            ));
        }
        if self.corpus.variants_per_family == 0 {
            return bad("variants_per_family must be positive".into());
        }
        if let Some([a, b]) = self.layers {
            if a > b {
                return bad(format!("layer range [{a}, {b}] is reversed"));
            }
        }
        let alpha = self.steering_alpha()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return bad(format!("steering alpha must be positive, got {alpha}"));
        }
        let t = &self.thresholds;
        if !(0.5..=1.0).contains(&t.stable_accuracy) {
            return bad(format!("stable_accuracy {} outside [0.5, 1]", t.stable_accuracy));
        }
        if t.stable_min_len == 0 {
            return bad("stable_min_len must be positive".into());
        }
        if !(t.significance > 0.0 && t.significance < 1.0) {
            return bad(format!("significance {} outside (0, 1)", t.significance));
        }
        if !(0.0..=1.0).contains(&t.placebo_beta) {
            return bad(format!("placebo_beta {} outside [0, 1]", t.placebo_beta));
        }
        if !(t.effect > 0.0 && t.effect <= 4.0) {
            return bad(format!("effect {} outside (0, 4]", t.effect));
        }
        self.toy.validate().map_err(|e| Failure::config(e.to_string()))?;
        let exists = |p: &Option<PathBuf>, what: &str| -> Result<(), Failure> {
            match p {
                Some(p) if !p.exists() => Err(Failure::config(format!("{what} path {} does not exist", p.display()))),
                _ => Ok(()),
            }
        };
        exists(&self.paths.templates, "templates")?;
        exists(&self.paths.corpus, "corpus")?;
        exists(&self.paths.acf_in, "acf_in")?;
        if self.backend == BackendKind::Acf && self.paths.acf_in.is_none() {
            return bad("backend acf needs paths.acf_in".into());
        }
        Ok(())
    }

    pub fn steering_alpha(&self) -> Result<f64, Failure> {
        if let Some(a) = self.alpha {
            return Ok(a);
        }
        let family = self.model_family.to_ascii_lowercase();
        self.alpha_table
            .iter()
            .filter(|(k, _)| family.starts_with(k.as_str()) || family.contains(k.as_str()))
            .max_by_key(|(k, _)| k.len())
            .or_else(|| self.alpha_table.get_key_value("generic"))
            .map(|(_, &a)| a)
            .ok_or_else(|| Failure::config(format!("no alpha for model family {:?}", self.model_family)))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seeds.base,
            toy: self.toy.clone(),
            pairs_per_factor: self.corpus.pairs_per_factor,
            folds: self.folds,
            families: self.corpus.families.clone(),
            variants_per_family: self.corpus.variants_per_family,
            alpha: self
                .steering_alpha()
                .unwrap_or_else(|_| SteeringConfig::default_alpha(&self.model_family)),
        }
    }

    pub fn layer_range(&self) -> Option<(usize, usize)> {
        self.layers.map(|[a, b]| (a, b))
    }

    /// Digest of every setting that can change results; the output
    /// directory is excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn assign(root: &mut toml::Value, dotted: &str, raw: &str) -> Result<(), Failure> {
    let keys: Vec<&str> = dotted.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Failure::config(format!("malformed key {dotted:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("{dotted:?}: {k} is not a section")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Failure::config(format!("{dotted:?} does not name a setting")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Reads `path` relative to the working directory.
pub fn template_bank(path: Option<&Path>) -> anyhow::Result<repe_core::TemplateBank> {
    let bank = match path {
        Some(p) => repe_core::TemplateBank::from_json(&std::fs::read_to_string(p)?)?,
        None => repe_core::TemplateBank::builtin(),
    };
    bank.validate()?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(env: &[(&str, &str)], sets: &[&str]) -> Result<RunConfig, Failure> {
        RunConfig::resolve(&Overrides {
            file: None,
            env: env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            sets: sets.iter().map(|s| s.to_string()).collect(),
        })
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.steering_alpha().unwrap(), 3.0);
    }

    #[test]
    fn flags_beat_env() {
        let cfg = resolve(
            &[("REPE_FOLDS", "4"), ("REPE_TOY__NOISE_SIGMA", "0.1"), ("OTHER", "x")],
            &["folds=7", "paths.out_dir=/tmp/x"],
        )
        .unwrap();
        assert_eq!(cfg.folds, 7);
        assert_eq!(cfg.toy.noise_sigma, 0.1);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_and_bad_ranges_rejected() {
        assert!(resolve(&[], &["fodls=3"]).is_err());
        assert!(resolve(&[], &["thresholds.effect=-1"]).unwrap().validate().is_err());
        assert!(resolve(&[], &["factors=[\"weekday\",\"weekday\"]"]).unwrap().validate().is_err());
        assert!(resolve(&[], &["paths.templates=/no/such/file"]).unwrap().validate().is_err());
    }

    #[test]
    fn alpha_by_family() {
        let cfg = resolve(&[], &["model_family=gemma-2-9b"]).unwrap();
        assert_eq!(cfg.steering_alpha().unwrap(), 3000.0);
        let cfg = resolve(&[], &["model_family=mistral"]).unwrap();
        assert_eq!(cfg.steering_alpha().unwrap(), 15.0);
        let cfg = resolve(&[], &["model_family=mistral", "alpha=2"]).unwrap();
        assert_eq!(cfg.steering_alpha().unwrap(), 2.0);
    }

    #[test]
    fn empty_gamma_follows_layer_count() {
        let cfg = resolve(&[], &["toy.layers=8", "toy.gamma=[]"]).unwrap();
        assert_eq!(cfg.toy.gamma.len(), 9);
        cfg.validate().unwrap();
    }

    #[test]
    fn digest_ignores_out_dir() {
        let a = resolve(&[], &["paths.out_dir=a"]).unwrap();
        let b = resolve(&[], &["paths.out_dir=b"]).unwrap();
        let c = resolve(&[], &["seeds.base=1"]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
