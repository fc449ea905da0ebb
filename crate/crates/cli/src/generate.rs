//! Text generation from trained checkpoints: generate, generate-cvae.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use camgen::corpus::ControlClass;
use camgen::cvae::{split_sentences, Cvae, MetricPolicy};
use camgen::transformer::{Decode, Transformer};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, write_snapshot, Overrides};
use crate::data::{parse_list, required};
use crate::log;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecodeKind {
    Greedy,
    Sample,
}

impl DecodeKind {
    pub fn with(self, temperature: f64, seed: u64) -> Decode {
        match self {
            DecodeKind::Greedy => Decode::Greedy,
            DecodeKind::Sample => Decode::Sample { temperature, seed },
        }
    }
}

fn write_output(out: &Option<PathBuf>, config: &impl Serialize, record: serde_json::Value) -> Result<()> {
    if let Some(dir) = out {
        write_snapshot(dir, config)?;
        let path = dir.join("generation.json");
        fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateRun {
    pub model: Option<PathBuf>,
    pub metric: ControlClass,
    pub topic: usize,
    pub keywords: Vec<String>,
    pub max_tokens: usize,
    pub decode: DecodeKind,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateRun {
    fn default() -> Self {
        GenerateRun {
            model: None,
            metric: ControlClass::High,
            topic: 0,
            keywords: Vec::new(),
            max_tokens: 128,
            decode: DecodeKind::Greedy,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Generate an article for a control class, topic and keywords.
#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// low, medium or high.
    #[arg(long)]
    metric: Option<ControlClass>,
    #[arg(long)]
    topic: Option<usize>,
    /// Comma-separated keywords.
    #[arg(long)]
    keywords: Option<String>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long, value_enum)]
    decode: Option<DecodeKind>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the resolved config and a JSON record here.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenerateArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let keywords = self.keywords.as_deref().map(parse_list::<String>).transpose()?;
        let mut o = Overrides::default();
        o.set("model", self.model)?.set("metric", self.metric)?.set("topic", self.topic)?.set("keywords", keywords)?;
        o.set("max_tokens", self.max_tokens)?.set("decode", self.decode)?.set("temperature", self.temperature)?;
        o.set("seed", self.seed)?;
        let cfg: GenerateRun = resolve("generate", config, o)?;
        let model = Transformer::load(required(&cfg.model, "model")?)?;
        let vocab = model.vocab();
        let prompt = vocab.format_prompt(cfg.metric, cfg.topic, &cfg.keywords)?;
        let ids = model.generate(&prompt, cfg.metric, cfg.decode.with(cfg.temperature, cfg.seed), cfg.max_tokens)?;
        let text = vocab.decode_text(&ids);
        log::info("generate", json!({ "tokens": ids.len() }));
        println!("{text}");
        write_output(&self.out, &cfg, json!({ "metric": cfg.metric, "topic": cfg.topic, "keywords": cfg.keywords, "text": text }))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateCvaeRun {
    pub model: Option<PathBuf>,
    /// Plain text whose sentences form the preceding context.
    pub context_file: Option<PathBuf>,
    pub metric: ControlClass,
    pub policy: MetricPolicy,
    /// Sampling temperature; greedy decoding when absent.
    pub temperature: Option<f64>,
    pub max_len: usize,
    /// Sentences to generate; each joins the context of the next.
    pub sentences: usize,
    pub seed: u64,
}

impl Default for GenerateCvaeRun {
    fn default() -> Self {
        GenerateCvaeRun {
            model: None,
            context_file: None,
            metric: ControlClass::High,
            policy: MetricPolicy::Force,
            temperature: None,
            max_len: 40,
            sentences: 1,
            seed: 0,
        }
    }
}

/// Generate follow-up sentences for a context with the CVAE.
#[derive(Debug, Args)]
pub struct GenerateCvaeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    context_file: Option<PathBuf>,
    #[arg(long)]
    metric: Option<ControlClass>,
    /// force, sample or argmax.
    #[arg(long)]
    policy: Option<MetricPolicy>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenerateCvaeArgs {
    pub fn run(self, config: Option<&Path>) -> Result<()> {
        let mut o = Overrides::default();
        o.set("model", self.model)?.set("context_file", self.context_file)?.set("metric", self.metric)?;
        o.set("policy", self.policy)?.set("temperature", self.temperature)?.set("sentences", self.sentences)?;
        o.set("seed", self.seed)?;
        let cfg: GenerateCvaeRun = resolve("generate-cvae", config, o)?;
        let model = Cvae::load(required(&cfg.model, "model")?)?;
        let vocab = model.vocab();
        let context_text = match &cfg.context_file {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut context = split_sentences(vocab, &vocab.encode_text(&context_text));
        let mut produced = Vec::new();
        for k in 0..cfg.sentences {
            let window = &context[context.len().saturating_sub(model.config().max_context)..];
            let seed = camgen::autodiff::init::derive_seed(cfg.seed, k as u64);
            let ids = model.generate(window, cfg.metric, cfg.policy, cfg.temperature, cfg.max_len, seed)?;
            produced.push(vocab.decode_text(&ids));
            context.push(ids);
        }
        let text = produced.join(" ");
        log::info("generate_cvae", json!({ "sentences": produced.len() }));
        println!("{text}");
        write_output(&self.out, &cfg, json!({ "metric": cfg.metric, "context": context_text, "text": text }))
    }
}
