//! The pipeline stages. Stages talk to each other only through files under
//! the work dir, one subdirectory per stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use saeaudit::activations::{
    extract_activations, layer_file_name, read_activation_file, split_activation_set, write_activation_dir,
    ActivationSet,
};
use saeaudit::audit::{
    audit_layer, build_concept_graph, concept_summary, layer_summaries, load_probe_dataset, profile_neurons,
    top_detectors, NeuronAssignment,
};
use saeaudit::corpus::{
    build_token_stream, load_corpus, read_sentences, read_token_stream, split_sentences, write_sentences,
    write_token_stream, ManifestEntry, SplitRole,
};
use saeaudit::io::{sha256_file, write_file};
use saeaudit::lm_train::{mean_nll, train_lm};
use saeaudit::sae::{evaluate_sae, train_sae};
use saeaudit::tokenizer::BpeVocab;
use saeaudit::{GptModel, SaeModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::manifest::{config_hash, hash_tree, StageManifest};
use crate::runlog::RunLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    TrainLm,
    EvalLm,
    Extract,
    TrainSae,
    EvalSae,
    Audit,
    Report,
    Generate,
}

/// Stages run by `--stage all`, in order.
pub const PIPELINE: [Stage; 8] = [
    Stage::Prepare,
    Stage::TrainLm,
    Stage::EvalLm,
    Stage::Extract,
    Stage::TrainSae,
    Stage::EvalSae,
    Stage::Audit,
    Stage::Report,
];

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Prepare,
        Stage::TrainLm,
        Stage::EvalLm,
        Stage::Extract,
        Stage::TrainSae,
        Stage::EvalSae,
        Stage::Audit,
        Stage::Report,
        Stage::Generate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainLm => "train-lm",
            Stage::EvalLm => "eval-lm",
            Stage::Extract => "extract",
            Stage::TrainSae => "train-sae",
            Stage::EvalSae => "eval-sae",
            Stage::Audit => "audit",
            Stage::Report => "report",
            Stage::Generate => "generate",
        }
    }

    /// Whether `--layers` applies.
    pub fn takes_layers(self) -> bool {
        matches!(self, Stage::Extract | Stage::TrainSae | Stage::EvalSae | Stage::Audit)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                anyhow!("unknown stage `{s}`; expected one of {} or all", names.join(", "))
            })
    }
}

pub const TRAIN_TOKENS: &str = "train.tokens";
pub const VAL_TOKENS: &str = "val.tokens";
pub const TEST_TOKENS: &str = "test.tokens";
pub const SENTENCES: &str = "sentences.jsonl";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const CATALOG: &str = "catalog.jsonl";

/// Per-invocation options that are not part of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub force: bool,
    pub layers: Option<Vec<u32>>,
}

/// What a stage invocation did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub struct Pipeline<'a> {
    pub cfg: &'a PipelineConfig,
    pub opts: RunOptions,
    pub log: &'a mut RunLog,
}

struct Input {
    path: PathBuf,
    producer: Option<Stage>,
}

impl Pipeline<'_> {
    pub fn work_dir(&self) -> &Path {
        &self.cfg.paths.work_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.work_dir().join(stage.name())
    }

    fn layers_for(&self, stage: Stage) -> Vec<u32> {
        match &self.opts.layers {
            Some(l) if stage.takes_layers() => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            _ => self.cfg.sae_layers(),
        }
    }

    fn artifact(&self, producer: Stage, file: &str) -> Input {
        Input {
            path: self.stage_dir(producer).join(file),
            producer: Some(producer),
        }
    }

    fn external(path: &Path) -> Input {
        Input {
            path: path.to_path_buf(),
            producer: None,
        }
    }

    fn inputs(&self, stage: Stage) -> Result<Vec<Input>> {
        let cfg = self.cfg;
        let vocab = [Self::external(&cfg.paths.vocab), Self::external(&cfg.paths.merges)];
        let layers = self.layers_for(stage);
        let act = |l: u32| self.artifact(Stage::Extract, &layer_file_name(l));
        let sae = |l: u32| self.artifact(Stage::TrainSae, &sae_file_name(l));
        Ok(match stage {
            Stage::Prepare => {
                let mut v = vec![Self::external(&cfg.paths.corpus_dir.join("manifest.json"))];
                if let Ok(bytes) = std::fs::read(cfg.paths.corpus_dir.join("manifest.json")) {
                    let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes).context("corpus manifest")?;
                    v.extend(entries.iter().map(|e| Self::external(&cfg.paths.corpus_dir.join(&e.filename))));
                }
                v.extend(vocab);
                v
            }
            Stage::TrainLm => vec![
                self.artifact(Stage::Prepare, TRAIN_TOKENS),
                self.artifact(Stage::Prepare, VAL_TOKENS),
            ],
            Stage::EvalLm => vec![
                self.artifact(Stage::TrainLm, MODEL_CKPT),
                self.artifact(Stage::Prepare, VAL_TOKENS),
                self.artifact(Stage::Prepare, TEST_TOKENS),
            ],
            Stage::Extract => {
                let mut v = vec![
                    self.artifact(Stage::TrainLm, MODEL_CKPT),
                    self.artifact(Stage::Prepare, SENTENCES),
                ];
                v.extend(vocab);
                v
            }
            Stage::TrainSae | Stage::EvalSae => {
                let mut v: Vec<Input> = layers.iter().map(|&l| act(l)).collect();
                if stage == Stage::EvalSae {
                    v.extend(layers.iter().map(|&l| sae(l)));
                }
                v
            }
            Stage::Audit => {
                let mut v = vec![self.artifact(Stage::TrainLm, MODEL_CKPT), Self::external(&cfg.paths.probes)];
                v.extend(vocab);
                v.extend(layers.iter().map(|&l| sae(l)));
                v
            }
            Stage::Report => vec![
                self.artifact(Stage::Audit, CATALOG),
                self.artifact(Stage::Audit, "layers.json"),
            ],
            Stage::Generate => {
                let mut v = vec![self.artifact(Stage::TrainLm, MODEL_CKPT)];
                v.extend(vocab);
                v
            }
        })
    }

    /// The part of the configuration a stage depends on.
    fn stage_config(&self, stage: Stage) -> Result<Value> {
        let cfg = self.cfg;
        let layers = self.layers_for(stage);
        Ok(match stage {
            Stage::Prepare => json!({"corpus": cfg.corpus}),
            Stage::TrainLm => json!({"model": cfg.model, "train": cfg.train}),
            Stage::EvalLm => json!({}),
            Stage::Extract => json!({"layers": layers}),
            Stage::TrainSae => {
                let saes = layers.iter().map(|&l| cfg.sae_config(l)).collect::<Result<Vec<_>>>()?;
                json!({"layers": layers, "split_ratio": cfg.sae.split_ratio, "seed": cfg.seed, "sae": saes})
            }
            Stage::EvalSae => json!({"layers": layers, "split_ratio": cfg.sae.split_ratio, "seed": cfg.seed}),
            Stage::Audit => json!({"layers": layers, "audit": cfg.audit}),
            Stage::Report => json!({"report": cfg.report}),
            Stage::Generate => json!({"generate": cfg.generate, "seed": cfg.seed}),
        })
    }

    /// Runs one stage unless its manifest shows identical config and inputs
    /// and intact outputs.
    pub fn run_stage(&mut self, stage: Stage) -> Result<Outcome> {
        let inputs = self.inputs(stage)?;
        let missing: Vec<&Input> = inputs.iter().filter(|i| !i.path.is_file()).collect();
        if !missing.is_empty() {
            let parts: Vec<String> = missing
                .iter()
                .map(|i| match i.producer {
                    Some(p) => format!("{} (run stage `{p}` first)", i.path.display()),
                    None => format!("{} (input file not found)", i.path.display()),
                })
                .collect();
            bail!("stage `{stage}` is missing upstream artifacts: {}", parts.join("; "));
        }
        let mut input_hashes = BTreeMap::new();
        for i in &inputs {
            input_hashes.insert(self.display_path(&i.path), sha256_file(&i.path)?);
        }
        let config = self.stage_config(stage)?;
        let hash = config_hash(stage.name(), &config);
        let dir = self.stage_dir(stage);
        if !self.opts.force {
            if let Some(m) = StageManifest::read(&dir) {
                if m.config_hash == hash && m.inputs == input_hashes && m.outputs_intact(&dir) {
                    self.log.info(Some(stage.name()), "skip", "up to date", Value::Null);
                    println!("{stage}: up to date");
                    return Ok(Outcome::UpToDate);
                }
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        self.log.info(Some(stage.name()), "start", "stage started", json!({"config_hash": hash}));
        let summary = self.execute(stage, &dir)?;
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash,
            config,
            inputs: input_hashes,
            outputs: hash_tree(&dir)?,
        };
        manifest.write(&dir)?;
        self.log.info(Some(stage.name()), "done", "stage finished", summary.clone());
        println!("{stage}: {}", one_line(&summary));
        Ok(Outcome::Ran)
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(self.work_dir())
            .map_or_else(|_| p.display().to_string(), |r| r.display().to_string())
    }

    fn vocab(&self) -> Result<BpeVocab> {
        Ok(BpeVocab::load(&self.cfg.paths.vocab, &self.cfg.paths.merges)?)
    }

    fn model(&self) -> Result<GptModel> {
        Ok(GptModel::load(&self.stage_dir(Stage::TrainLm).join(MODEL_CKPT))?)
    }

    fn execute(&mut self, stage: Stage, dir: &Path) -> Result<Value> {
        match stage {
            Stage::Prepare => self.prepare(dir),
            Stage::TrainLm => self.train_lm(dir),
            Stage::EvalLm => self.eval_lm(dir),
            Stage::Extract => self.extract(dir),
            Stage::TrainSae => self.train_sae(dir),
            Stage::EvalSae => self.eval_sae(dir),
            Stage::Audit => self.audit(dir),
            Stage::Report => self.report(dir),
            Stage::Generate => self.generate(dir),
        }
    }

    fn prepare(&mut self, dir: &Path) -> Result<Value> {
        let vocab = self.vocab()?;
        let docs = load_corpus(&self.cfg.paths.corpus_dir)?;
        let eot = vocab.end_of_text().ok_or_else(|| anyhow!("vocabulary has no end-of-text token"))?;
        let train_role: Vec<_> = docs
            .iter()
            .filter(|d| d.split == SplitRole::Train)
            .map(|d| d.document.clone())
            .collect();
        let streams = build_token_stream(&train_role, &vocab, self.cfg.corpus.split_ratio)?;
        let mut test = Vec::new();
        let mut test_docs = Vec::new();
        for d in docs.iter().filter(|d| d.split == SplitRole::Eval) {
            test.extend(vocab.encode(&d.document.text));
            test.push(eot);
            test_docs.push(d.document.id.clone());
        }
        let mut sentences = Vec::new();
        for d in &docs {
            if !d.markers_found {
                self.log.emit(
                    crate::runlog::Level::Warn,
                    Some("prepare"),
                    "no-markers",
                    format!("{}: boilerplate markers not found, kept whole text", d.document.id),
                    Value::Null,
                );
            }
            sentences.extend(split_sentences(&d.document));
        }
        write_token_stream(&dir.join(TRAIN_TOKENS), &streams.train)?;
        write_token_stream(&dir.join(VAL_TOKENS), &streams.validation)?;
        write_token_stream(&dir.join(TEST_TOKENS), &test)?;
        write_sentences(&dir.join(SENTENCES), &sentences)?;
        let admitted = sentences.iter().filter(|s| s.admitted).count();
        let summary = json!({
            "documents": docs.len(),
            "train_docs": streams.train_docs,
            "validation_docs": streams.validation_docs,
            "test_docs": test_docs,
            "train_tokens": streams.train.len(),
            "validation_tokens": streams.validation.len(),
            "test_tokens": test.len(),
            "sentences": sentences.len(),
            "admitted_sentences": admitted,
        });
        write_json(&dir.join("corpus.json"), &summary)?;
        Ok(summary)
    }

    fn train_lm(&mut self, dir: &Path) -> Result<Value> {
        let train = read_token_stream(&self.stage_dir(Stage::Prepare).join(TRAIN_TOKENS))?;
        let val = read_token_stream(&self.stage_dir(Stage::Prepare).join(VAL_TOKENS))?;
        let model = GptModel::new(self.cfg.model.clone())?;
        let out = train_lm(model, &train, &val, &self.cfg.train)?;
        let mut log = String::new();
        for r in &out.log {
            log.push_str(&serde_json::to_string(r)?);
            log.push('\n');
        }
        // wall-clock times make the log differ between runs; keep it apart
        // from the deterministic outputs
        std::fs::write(self.work_dir().join("train-lm.log.jsonl"), log)?;
        out.selected().save(&dir.join(MODEL_CKPT))?;
        out.model.save(&dir.join("final.ckpt"))?;
        let summary = json!({
            "steps": self.cfg.train.steps,
            "parameters": out.model.parameter_count(),
            "best_step": out.best.as_ref().map(|b| b.0),
            "best_val_loss": out.best.as_ref().map(|b| b.1),
            "final_train_loss": out.log.last().map(|r| r.train_loss),
        });
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn eval_lm(&mut self, dir: &Path) -> Result<Value> {
        let model = self.model()?;
        let ctx = model.config().context_length;
        let mut out = serde_json::Map::new();
        for (name, file) in [("validation", VAL_TOKENS), ("test", TEST_TOKENS)] {
            let ids = read_token_stream(&self.stage_dir(Stage::Prepare).join(file))?;
            if ids.len() < 2 {
                out.insert(name.into(), Value::Null);
                continue;
            }
            let nll = mean_nll(&model, &ids, ctx)?;
            out.insert(
                name.into(),
                json!({"tokens": ids.len(), "mean_nll": nll, "perplexity": nll.exp()}),
            );
        }
        let summary = Value::Object(out);
        write_json(&dir.join("perplexity.json"), &summary)?;
        Ok(summary)
    }

    fn extract(&mut self, dir: &Path) -> Result<Value> {
        let model = self.model()?;
        let vocab = self.vocab()?;
        let layers = self.layers_for(Stage::Extract);
        check_layers(&layers, model.config().layers)?;
        let sentences = read_sentences(&self.stage_dir(Stage::Prepare).join(SENTENCES))?;
        let ex = extract_activations(&model, &sentences, &vocab)?;
        let sets: Vec<ActivationSet> = ex.sets.into_iter().filter(|s| layers.contains(&s.layer)).collect();
        let manifest = write_activation_dir(dir, &sets)?;
        write_jsonl(&dir.join("skipped.jsonl"), ex.skipped.iter().map(|s| {
            json!({"item": s.item, "sentence": s.sentence, "tokens": s.tokens, "reason": s.reason})
        }))?;
        Ok(json!({
            "layers": layers,
            "rows": manifest.files.first().map_or(0, |f| f.rows),
            "dim": model.config().embed_dim,
            "skipped": ex.skipped.len(),
        }))
    }

    fn split(&self, layer: u32) -> Result<(ActivationSet, ActivationSet)> {
        let set = read_activation_file(&self.stage_dir(Stage::Extract).join(layer_file_name(layer)))?;
        Ok(split_activation_set(&set, self.cfg.sae.split_ratio, self.cfg.seed)?)
    }

    fn train_sae(&mut self, dir: &Path) -> Result<Value> {
        let mut layers_out = Vec::new();
        for layer in self.layers_for(Stage::TrainSae) {
            let cfg = self.cfg.sae_config(layer)?;
            let (train, val) = self.split(layer)?;
            let t = train_sae(&cfg, &train, &val)?;
            t.model.save(&dir.join(sae_file_name(layer)))?;
            write_jsonl(&dir.join(format!("layer_{layer:02}.log.jsonl")), t.log.iter().map(|r| json!(r)))?;
            let best = t.log.iter().find(|r| r.epoch == t.best_epoch).map(|r| r.val_mse);
            self.log.info(
                Some("train-sae"),
                "layer",
                format!("layer {layer}: best epoch {} of {}", t.best_epoch, t.log.len()),
                json!({"layer": layer, "best_epoch": t.best_epoch, "val_mse": best}),
            );
            layers_out.push(json!({
                "layer": layer,
                "hidden_dim": cfg.hidden_dim,
                "k": cfg.k,
                "train_rows": train.rows(),
                "val_rows": val.rows(),
                "epochs": t.log.len(),
                "best_epoch": t.best_epoch,
                "best_val_mse": best,
            }));
        }
        let summary = json!({"layers": layers_out});
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn eval_sae(&mut self, dir: &Path) -> Result<Value> {
        let mut rows = Vec::new();
        for layer in self.layers_for(Stage::EvalSae) {
            let sae = SaeModel::load(&self.stage_dir(Stage::TrainSae).join(sae_file_name(layer)))?;
            let (_, val) = self.split(layer)?;
            rows.push(evaluate_sae(&sae, &val)?);
        }
        let summary = json!({"validation": rows});
        write_json(&dir.join("metrics.json"), &summary)?;
        Ok(summary)
    }

    fn audit(&mut self, dir: &Path) -> Result<Value> {
        let model = self.model()?;
        let vocab = self.vocab()?;
        let prompts = load_probe_dataset(&self.cfg.paths.probes)?;
        let layers = self.layers_for(Stage::Audit);
        check_layers(&layers, model.config().layers)?;
        let saes = layers
            .iter()
            .map(|&l| SaeModel::load(&self.stage_dir(Stage::TrainSae).join(sae_file_name(l))))
            .collect::<saeaudit::Result<Vec<_>>>()?;
        let run = profile_neurons(&model, &vocab, &saes, &prompts)?;
        let mut catalog = Vec::new();
        let mut stats = Vec::new();
        let mut meta = Vec::new();
        for profile in &run.layers {
            let a = audit_layer(profile, &run.prompts, &self.cfg.audit)?;
            meta.push(LayerMeta {
                layer: a.layer,
                neurons: profile.neurons(),
                prompts: profile.prompts(),
                retained: a.retained.len(),
                assigned: a.assignments.len(),
                skipped_concepts: a.skipped_concepts.iter().map(|c| c.name().to_string()).collect(),
            });
            stats.extend(a.stats);
            catalog.extend(a.assignments);
        }
        write_jsonl(&dir.join(CATALOG), catalog.iter().map(|a| json!(a)))?;
        write_jsonl(&dir.join("stats.jsonl"), stats.iter().map(|s| json!(s)))?;
        write_json(&dir.join("layers.json"), &meta)?;
        write_jsonl(&dir.join("skipped.jsonl"), run.skipped.iter().map(|s| {
            json!({"item": s.item, "tokens": s.tokens, "reason": s.reason})
        }))?;
        Ok(json!({
            "prompts": run.prompts.len(),
            "skipped_prompts": run.skipped.len(),
            "layers": meta.iter().map(|m| json!({"layer": m.layer, "retained": m.retained, "assigned": m.assigned})).collect::<Vec<_>>(),
        }))
    }

    fn report(&mut self, dir: &Path) -> Result<Value> {
        let audit_dir = self.stage_dir(Stage::Audit);
        let catalog = read_catalog(&audit_dir.join(CATALOG))?;
        let meta: Vec<LayerMeta> = serde_json::from_slice(&std::fs::read(audit_dir.join("layers.json"))?)?;
        let layers: Vec<u32> = meta.iter().map(|m| m.layer).collect();
        let by_layer = layer_summaries(&catalog, &layers);
        let by_concept = concept_summary(&catalog);
        let top = top_detectors(&catalog, self.cfg.report.top_detectors);
        write_json(&dir.join("layer_summary.json"), &by_layer)?;
        write_json(&dir.join("concept_summary.json"), &by_concept)?;
        write_json(&dir.join("top_detectors.json"), &top)?;
        let mut edges = 0;
        for &l in &layers {
            let g = build_concept_graph(&catalog, l);
            edges += g.edges.len();
            write_file(&dir.join("graphs").join(format!("layer_{l:02}.dot")), g.to_dot().as_bytes())?;
            write_json(&dir.join("graphs").join(format!("layer_{l:02}.json")), &g)?;
        }
        let md = crate::report::markdown(&by_layer, &by_concept, &top);
        std::fs::write(dir.join("report.md"), md)?;
        Ok(json!({"assignments": catalog.len(), "layers": layers, "graph_edges": edges}))
    }

    fn generate(&mut self, dir: &Path) -> Result<Value> {
        let model = self.model()?;
        let vocab = self.vocab()?;
        let g = &self.cfg.generate;
        let prompt = vocab.encode(&g.prompt);
        let ids = model.generate(&prompt, g.max_new, g.temperature, self.cfg.seed)?;
        let text = vocab.decode(&ids)?;
        let out = json!({"prompt": g.prompt, "temperature": g.temperature, "max_new": g.max_new, "text": text});
        write_json(&dir.join("sample.json"), &out)?;
        println!("{text}");
        Ok(json!({"tokens": ids.len()}))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub layer: u32,
    pub neurons: usize,
    pub prompts: usize,
    pub retained: usize,
    pub assigned: usize,
    pub skipped_concepts: Vec<String>,
}

pub fn sae_file_name(layer: u32) -> String {
    format!("layer_{layer:02}.sae")
}

pub fn read_catalog(path: &Path) -> Result<Vec<NeuronAssignment>> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    src.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn check_layers(layers: &[u32], model_layers: usize) -> Result<()> {
    if let Some(l) = layers.iter().find(|&&l| l == 0 || l as usize > model_layers) {
        bail!("layer {l} outside 1..={model_layers}");
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_file(path, (serde_json::to_string_pretty(v)? + "\n").as_bytes())?;
    Ok(())
}

fn write_jsonl(path: &Path, rows: impl IntoIterator<Item = Value>) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r)?);
        s.push('\n');
    }
    write_file(path, s.as_bytes())?;
    Ok(())
}

fn one_line(v: &Value) -> String {
    match v {
        Value::Object(m) => m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
        other => other.to_string(),
    }
}
