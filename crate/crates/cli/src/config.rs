//! INI application config with sections `[data]`, `[model]`, `[train]` and
//! `[embedder]`. Unknown sections and keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use pess_core::embedder::EmbedderSpec;
use pess_core::losses::LossWeights;
use pess_core::pipeline::TrainConfig;
use pess_core::seq2seq::{ModelConfig, NllMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum CorpusFormat {
    #[default]
    PersonaChat,
    Esconv,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "persona-chat" | "persona_chat" => Ok(Self::PersonaChat),
            "esconv" => Ok(Self::Esconv),
            _ => Err(format!("unknown corpus format {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: CorpusFormat,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppConfig {
    pub data: DataConfig,
    pub embedder: EmbedderSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("[{section}] {key}: cannot parse {value:?}"))
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let ini = Ini::load_from_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config = AppConfig::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                config.set(section, key, value)?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let (s, k, v) = (section, key, value);
        let m = &mut self.model;
        let t = &mut self.train;
        match (s, k) {
            ("data", "train") => self.data.train = Some(v.into()),
            ("data", "validation") => self.data.validation = Some(v.into()),
            ("data", "test") => self.data.test = Some(v.into()),
            ("data", "format") => self.data.format = v.parse()?,
            ("data", "out_dir") => self.data.out_dir = Some(v.into()),

            ("model", "d_model") => m.d_model = parse(s, k, v)?,
            ("model", "n_layers") => m.n_layers = parse(s, k, v)?,
            ("model", "n_heads") => m.n_heads = parse(s, k, v)?,
            ("model", "ffn_dim") => m.ffn_dim = parse(s, k, v)?,
            ("model", "max_len") => m.max_len = parse(s, k, v)?,
            ("model", "dropout") => m.dropout = parse(s, k, v)?,
            ("model", "seed") => m.seed = parse(s, k, v)?,

            ("train", "epochs_total") => t.epochs_total = parse(s, k, v)?,
            ("train", "epochs_nll_only") => t.epochs_nll_only = parse(s, k, v)?,
            ("train", "learning_rate") => t.learning_rate = parse(s, k, v)?,
            ("train", "batch_size") => t.batch_size = parse(s, k, v)?,
            ("train", "tau") => t.tau = parse(s, k, v)?,
            ("train", "w_complete") => t.loss_weights.w_complete = parse(s, k, v)?,
            ("train", "w_consist") => t.loss_weights.w_consist = parse(s, k, v)?,
            ("train", "ablation") => t.ablation = v.parse().map_err(|e: pess_core::Error| e.to_string())?,
            ("train", "seed") => t.seed = parse(s, k, v)?,
            ("train", "weight_decay") => t.weight_decay = parse(s, k, v)?,
            ("train", "grad_clip") => t.grad_clip = parse(s, k, v)?,
            ("train", "max_new") => t.max_new = parse(s, k, v)?,
            ("train", "nll_mode") => {
                t.nll_mode = match v {
                    "mean" => NllMode::Mean,
                    "sum" => NllMode::Sum,
                    _ => return Err(format!("[train] nll_mode must be mean or sum, got {v:?}")),
                }
            }

            ("embedder", "name") => self.embedder.name = v.to_string(),
            ("embedder", "dimension") => self.embedder.dimension = parse(s, k, v)?,
            ("embedder", "deterministic") => self.embedder.deterministic = parse(s, k, v)?,

            ("data" | "model" | "train" | "embedder", _) => return Err(format!("unknown key [{s}] {k}")),
            _ => return Err(format!("unknown section [{s}] (key {k})")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.embedder.validate().map_err(|e| e.to_string())?;
        LossWeights::validate(&self.train.loss_weights).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<AppConfig, String> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pess.ini");
        std::fs::write(&path, text).unwrap();
        AppConfig::load(&path)
    }

    #[test]
    fn full_file() {
        let c = load(
            "[data]\ntrain = t.jsonl\nformat = esconv\n\n[model]\nd_model = 32\nn_heads = 2\n\n[train]\nablation = nll_only\ntau = 0.8\n\n[embedder]\ndimension = 128\n",
        )
        .unwrap();
        assert_eq!(c.data.format, CorpusFormat::Esconv);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.train.tau, 0.8);
        assert_eq!(c.embedder.dimension, 128);
        assert_eq!(c.train.ablation.as_str(), "nll_only");
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(load("[model]\nwidth = 3\n").unwrap_err().contains("unknown key"));
        assert!(load("[extra]\na = 1\n").unwrap_err().contains("unknown section"));
        assert!(load("d_model = 3\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(load("[model]\nd_model = many\n").is_err());
        assert!(load("[model]\nd_model = 30\nn_heads = 4\n").is_err());
        assert!(load("[train]\nepochs_total = 2\nepochs_nll_only = 3\n").is_err());
    }
}
