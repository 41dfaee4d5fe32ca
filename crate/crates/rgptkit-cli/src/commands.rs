//! Implementations of the five commands. Each takes the fully resolved
//! configuration and reads nothing else from the environment, so a run is
//! reproducible from its emitted config snapshot.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use rgptkit::backbone::{DirImages, Image, ImageProvider, SyntheticImages};
use rgptkit::checkpoint::{load_model, save_model};
use rgptkit::config::{BackendKind, EvalProtocol, RunConfig};
use rgptkit::datasets::{
    balanced_sample, parse_annotations, per_image_sample, synthesize_conversations,
    AnnotationRecord, SamplingPolicy,
};
use rgptkit::error::{Error, Result};
use rgptkit::eval::{
    answer_pope_questions, eval_captioning, eval_classification, eval_pope, eval_rec,
    inject_gt_candidates, iou, CaptionEntry, ClassificationItem, EvalReport, PopeItem,
    PopeQuestion, RecItem,
};
use rgptkit::model::{DecodeStrategy, PipelineModel, RegionAssistant, StagePlan};
use rgptkit::model::optim::{AdamW, Stage};
use rgptkit::recap::{
    corpus_stats, filter_by_similarity, read_recap_jsonl, run_recap, write_recap_jsonl,
    CaptionerBackend, MockBackend, RecapPools, RemoteBackend, WordOverlapScorer,
};
use rgptkit::region::{RegionShape, RegionSpec};
use rgptkit::seed::sub_rng;
use rgptkit::sequence::template::{fill_template, PromptSlots, TaskKind, TemplatePool};
use rgptkit::sequence::{
    placeholder_ids, read_conversations_jsonl, write_conversations_jsonl, Conversation, Turn,
};
use rgptkit::tokenize::WordTokenizer;

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} must be set for this command")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{what} line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

fn provider_for(images: &Option<PathBuf>, seed: u64) -> Box<dyn ImageProvider> {
    match images {
        Some(dir) => Box::new(DirImages::new(dir.clone())),
        None => Box::new(SyntheticImages::new(seed)),
    }
}

// ---------------------------------------------------------------------------
// data prepare
// ---------------------------------------------------------------------------

pub fn data_prepare(cfg: &RunConfig) -> Result<()> {
    let input = require(&cfg.data.input, "data.input (or --input)")?;
    let records = parse_annotations(&read_text(input)?, cfg.data.format)
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;

    let policy = SamplingPolicy {
        per_class_cap: cfg.data.per_class_cap,
        per_image_cap: cfg.data.per_image_cap,
        seed: cfg.seed,
    };
    let mut sampled = records.clone();
    if policy.per_class_cap.is_some() {
        sampled = balanced_sample(&sampled, &policy)?;
    }
    if policy.per_image_cap.is_some() {
        sampled = per_image_sample(&sampled, &policy)?;
    }

    let mut conversations = Vec::new();
    let mut per_task = serde_json::Map::new();
    for task in &cfg.data.tasks {
        let pool = TemplatePool::builtin(*task);
        let mut rng = sub_rng(cfg.seed, &["cli-data", task.name()]);
        let convs = synthesize_conversations(&sampled, &pool, &mut rng, cfg.data.max_turns)?;
        per_task.insert(task.name().to_string(), convs.len().into());
        conversations.extend(convs);
    }

    let mut per_class = serde_json::Map::new();
    for rec in &sampled {
        let key = rec.class_name.as_deref().unwrap_or("(no class)").to_string();
        let count = per_class.get(&key).and_then(|v| v.as_u64()).unwrap_or(0);
        per_class.insert(key, (count + 1).into());
    }

    let manifest = serde_json::json!({
        "format": cfg.data.format.name(),
        "seed": cfg.seed,
        "caps": {
            "per_class": cfg.data.per_class_cap,
            "per_image": cfg.data.per_image_cap,
        },
        "records": { "input": records.len(), "sampled": sampled.len() },
        "per_class": per_class,
        "per_task": per_task,
        "conversations": conversations.len(),
    });

    let conv_path = cfg.out_dir.join("conversations.jsonl");
    std::fs::write(&conv_path, write_conversations_jsonl(&conversations)?)?;
    let manifest_path = cfg.out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!(
        "{} conversations -> {}",
        conversations.len(),
        conv_path.display()
    );
    println!("manifest -> {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(cfg: &RunConfig) -> Result<()> {
    let input = require(&cfg.stage.input, "stage.input (or --input)")?;
    let conversations = read_conversations_jsonl(&read_text(input)?)
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    if conversations.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no conversations",
            input.display()
        )));
    }

    let mut plan = match cfg.stage.stage {
        Stage::Pretrain => StagePlan::pretrain(),
        Stage::Finetune => StagePlan::finetune(),
    };
    if let Some(lr) = cfg.stage.lr_max {
        plan.lr_max = lr;
    }
    plan.batch_size = cfg.stage.batch_size;

    let mut model = match (&cfg.stage.init_from, cfg.stage.stage) {
        (Some(path), _) => load_model(path)?,
        (None, Stage::Finetune) => {
            return Err(Error::Config(
                "finetuning resumes from a pretrain checkpoint; set stage.init_from".into(),
            ))
        }
        (None, Stage::Pretrain) => {
            let mut texts: Vec<&str> = conversations
                .iter()
                .flat_map(|c| c.turns.iter().map(|t| t.text.as_str()))
                .collect();
            texts.extend(cfg.pipeline.chat.vocab_fragments());
            let tokenizer = WordTokenizer::build(texts);
            PipelineModel::new(cfg.pipeline.clone(), tokenizer)?
        }
    };

    let provider = provider_for(&cfg.stage.images, cfg.seed);
    let mut images: HashMap<&str, Image> = HashMap::new();
    for conv in &conversations {
        if !images.contains_key(conv.image_ref.as_str()) {
            images.insert(&conv.image_ref, provider.load_image(&conv.image_ref)?);
        }
    }

    // One fixed pass order; batches wrap around it. Shuffled so neighboring
    // steps do not see the file's grouping.
    let mut order: Vec<usize> = (0..conversations.len()).collect();
    let mut rng = sub_rng(cfg.seed, &["cli-train", "order"]);
    for i in (1..order.len()).rev() {
        use rand::Rng;
        order.swap(i, rng.random_range(0..=i));
    }

    let mut opt = AdamW::new(plan.optim_config(cfg.stage.steps));
    let mut curve = String::from("step,lr,loss\n");
    let n = conversations.len();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.stage.steps {
        let batch: Vec<(&Conversation, &Image)> = (0..plan.batch_size)
            .map(|j| {
                let idx = order[(step * plan.batch_size + j) % n];
                let conv = &conversations[idx];
                (conv, &images[conv.image_ref.as_str()])
            })
            .collect();
        let lr = opt.config().lr_at(step);
        let loss = model.train_step(&batch, &plan, &mut opt)?;
        curve.push_str(&format!("{step},{lr},{loss}\n"));
        last_loss = loss;
        if step % cfg.stage.log_every == 0 || step + 1 == cfg.stage.steps {
            log::info!("step {step}: lr {lr:.3e} loss {loss:.6}");
        }
    }

    let curve_path = cfg.out_dir.join("loss_curve.csv");
    std::fs::write(&curve_path, curve)?;
    let ckpt_path = cfg.out_dir.join("checkpoint.rgpt");
    save_model(&ckpt_path, &mut model)?;
    println!(
        "{} steps of {}, final loss {last_loss:.6}",
        cfg.stage.steps,
        plan.stage.name()
    );
    println!("checkpoint -> {}", ckpt_path.display());
    println!("loss curve -> {}", curve_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// recap run
// ---------------------------------------------------------------------------

pub fn recap_run(cfg: &RunConfig) -> Result<()> {
    let input = require(&cfg.recap.input, "recap.input (or --input)")?;
    let records: Vec<AnnotationRecord> = parse_jsonl(&read_text(input)?, "annotation record")?;

    let backend: Box<dyn CaptionerBackend> = match cfg.recap.backend {
        BackendKind::Mock => Box::new(MockBackend::new(cfg.seed)),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.recap.remote.clone())),
    };
    let provider = provider_for(&cfg.recap.images, cfg.seed);
    let journal = cfg
        .recap
        .journal
        .then(|| cfg.out_dir.join("recap_journal.jsonl"));

    let mut captioned = run_recap(
        &records,
        provider.as_ref(),
        backend.as_ref(),
        &RecapPools::builtin(),
        cfg.seed,
        cfg.recap.workers,
        journal.as_deref(),
    )?;
    let kept = filter_by_similarity(&mut captioned, &WordOverlapScorer, cfg.recap.threshold)?;

    let all_path = cfg.out_dir.join("recap_records.jsonl");
    std::fs::write(&all_path, write_recap_jsonl(&captioned)?)?;
    let kept_path = cfg.out_dir.join("recap_kept.jsonl");
    std::fs::write(&kept_path, write_recap_jsonl(&kept)?)?;

    let stats = serde_json::json!({
        "corpus": corpus_stats(&kept),
        "captioned": captioned.len(),
        "kept": kept.len(),
        "threshold": cfg.recap.threshold,
        "backend": cfg.recap.backend.name(),
    });
    let stats_text = serde_json::to_string_pretty(&stats)? + "\n";
    std::fs::write(cfg.out_dir.join("recap_stats.json"), &stats_text)?;
    print!("{stats_text}");
    println!("records -> {}", all_path.display());
    println!("kept -> {}", kept_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Answers every protocol perfectly by reading the ground truth the items
/// carry. Exists to check protocol plumbing end to end.
struct OracleAssistant {
    /// Per image, the ground-truth class of each region in driver order.
    classes: HashMap<String, Vec<String>>,
    /// Per image, candidate-box sets with the ground-truth box they must
    /// be matched against.
    rec: HashMap<String, Vec<(Vec<[f64; 4]>, [f64; 4])>>,
}

impl OracleAssistant {
    fn for_classification(items: &[ClassificationItem]) -> Self {
        let mut classes: HashMap<String, Vec<String>> = HashMap::new();
        for item in items {
            classes
                .entry(item.image_ref.clone())
                .or_default()
                .push(item.gt_class.clone());
        }
        OracleAssistant {
            classes,
            rec: HashMap::new(),
        }
    }

    fn for_rec(items: &[RecItem]) -> Self {
        let mut rec: HashMap<String, Vec<(Vec<[f64; 4]>, [f64; 4])>> = HashMap::new();
        for item in items {
            let boxes = item
                .candidates
                .iter()
                .filter_map(|c| match &c.shape {
                    RegionShape::Box(b) => Some(*b),
                    _ => None,
                })
                .collect();
            rec.entry(item.image_ref.clone())
                .or_default()
                .push((boxes, item.gt_box));
        }
        OracleAssistant {
            classes: HashMap::new(),
            rec,
        }
    }
}

impl RegionAssistant for OracleAssistant {
    fn reply(&self, conv: &Conversation) -> Result<String> {
        let last = conv
            .turns
            .last()
            .ok_or_else(|| Error::Eval("oracle got an empty conversation".into()))?;
        if let Some(answers) = self.classes.get(&conv.image_ref) {
            let named: Vec<&str> = placeholder_ids(&last.text)
                .iter()
                .filter_map(|&id| answers.get(id as usize - 1).map(String::as_str))
                .collect();
            return Ok(named.join(", "));
        }
        if let Some(entries) = self.rec.get(&conv.image_ref) {
            let asked: Vec<[f64; 4]> = conv
                .regions
                .iter()
                .filter_map(|r| match &r.shape {
                    RegionShape::Box(b) => Some(*b),
                    _ => None,
                })
                .collect();
            let (boxes, gt) = entries
                .iter()
                .find(|(boxes, _)| *boxes == asked)
                .ok_or_else(|| Error::Eval("oracle cannot match the asked regions".into()))?;
            let best = boxes
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    iou(*a.1, *gt)
                        .partial_cmp(&iou(*b.1, *gt))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .map(|(k, _)| k + 1)
                .ok_or_else(|| Error::Eval("oracle got no candidate regions".into()))?;
            return Ok(format!("Region [{best}]."));
        }
        Err(Error::Eval(format!(
            "oracle has no ground truth for image '{}'",
            conv.image_ref
        )))
    }

    fn score_candidates(&self, conv: &Conversation, candidates: &[String]) -> Result<Vec<f64>> {
        let answer = self.reply(conv)?;
        let first = answer.split(',').next().unwrap_or("").trim();
        Ok(candidates
            .iter()
            .map(|c| if c == first { 0.0 } else { -5.0 })
            .collect())
    }
}

/// One region with reference captions, for the captioning protocol.
#[derive(Debug, Clone, Deserialize)]
struct CaptionItem {
    #[serde(rename = "image")]
    image_ref: String,
    region: RegionSpec,
    references: Vec<String>,
}

fn caption_entries(
    model: &dyn RegionAssistant,
    items: &[CaptionItem],
    seed: u64,
) -> Result<Vec<CaptionEntry>> {
    let pool = TemplatePool::builtin(TaskKind::DetailedCaption);
    items
        .iter()
        .enumerate()
        .map(|(idx, item)| {
            let mut region = item.region.clone();
            region.id = 1;
            let mut rng = sub_rng(seed, &["eval-caption", &item.image_ref, &idx.to_string()]);
            let (_, template) = pool.draw(&mut rng);
            let prompt = fill_template(
                template,
                &PromptSlots {
                    region_ids: &[1],
                    description: None,
                },
            )?;
            let conv = Conversation {
                image_ref: item.image_ref.clone(),
                regions: vec![region],
                turns: vec![Turn::user(prompt)],
            };
            Ok(CaptionEntry {
                candidate: model.reply(&conv)?,
                references: item.references.clone(),
            })
        })
        .collect()
}

fn load_eval_model(cfg: &RunConfig) -> Result<PipelineModel> {
    let path = require(&cfg.eval.checkpoint, "eval.checkpoint (or --checkpoint)")?;
    load_model(path)
}

fn finish_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    let path = cfg
        .out_dir
        .join(format!("eval_{}.json", report.protocol));
    std::fs::write(&path, report.to_json_pretty()? + "\n")?;
    for (name, value) in &report.metrics {
        println!("{name} {value:.4}");
    }
    println!("report -> {}", path.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let input = require(&cfg.eval.input, "eval.input (or --input)")?;
    let text = read_text(input)?;
    let report = match cfg.eval.protocol {
        EvalProtocol::Classification => {
            let items: Vec<ClassificationItem> = parse_jsonl(&text, "classification item")?;
            let metrics = if cfg.eval.oracle {
                let oracle = OracleAssistant::for_classification(&items);
                eval_classification(&oracle, &items, cfg.eval.mode, cfg.eval.use_scores, cfg.seed)?
            } else {
                let model = load_eval_model(cfg)?;
                let provider = provider_for(&cfg.eval.images, cfg.seed);
                let assistant = model.assistant(provider.as_ref(), DecodeStrategy::Greedy);
                eval_classification(
                    &assistant,
                    &items,
                    cfg.eval.mode,
                    cfg.eval.use_scores,
                    cfg.seed,
                )?
            };
            metrics.report()?
        }
        EvalProtocol::Rec => {
            let items: Vec<RecItem> = parse_jsonl(&text, "rec item")?;
            let items = inject_gt_candidates(items)?;
            let metrics = if cfg.eval.oracle {
                let oracle = OracleAssistant::for_rec(&items);
                eval_rec(&oracle, &items, cfg.seed)?
            } else {
                let model = load_eval_model(cfg)?;
                let provider = provider_for(&cfg.eval.images, cfg.seed);
                let assistant = model.assistant(provider.as_ref(), DecodeStrategy::Greedy);
                eval_rec(&assistant, &items, cfg.seed)?
            };
            metrics.report()?
        }
        EvalProtocol::Caption => {
            let items: Vec<CaptionItem> = parse_jsonl(&text, "caption item")?;
            let entries = if cfg.eval.oracle {
                // The oracle echoes the first reference.
                items
                    .iter()
                    .map(|item| {
                        let first = item.references.first().cloned().ok_or_else(|| {
                            Error::Eval(format!(
                                "caption item for '{}' has no references",
                                item.image_ref
                            ))
                        })?;
                        Ok(CaptionEntry {
                            candidate: first,
                            references: item.references.clone(),
                        })
                    })
                    .collect::<Result<Vec<CaptionEntry>>>()?
            } else {
                let model = load_eval_model(cfg)?;
                let provider = provider_for(&cfg.eval.images, cfg.seed);
                let assistant = model.assistant(provider.as_ref(), DecodeStrategy::Greedy);
                caption_entries(&assistant, &items, cfg.seed)?
            };
            eval_captioning(&entries)?.report()?
        }
        EvalProtocol::Pope => {
            // Accept either pre-answered items or open questions.
            let answered: Option<Vec<PopeItem>> = parse_jsonl(&text, "pope item").ok();
            let items = match answered {
                Some(items) if !items.is_empty() => items,
                _ => {
                    let questions: Vec<PopeQuestion> = parse_jsonl(&text, "pope question")?;
                    if cfg.eval.oracle {
                        questions
                            .iter()
                            .map(|q| PopeItem {
                                image_ref: q.image_ref.clone(),
                                question: q.question.clone(),
                                label: q.label,
                                prediction: q.label,
                            })
                            .collect()
                    } else {
                        let model = load_eval_model(cfg)?;
                        let provider = provider_for(&cfg.eval.images, cfg.seed);
                        let assistant =
                            model.assistant(provider.as_ref(), DecodeStrategy::Greedy);
                        answer_pope_questions(&assistant, &questions)?
                    }
                }
            };
            eval_pope(&items)?.report()?
        }
    };
    finish_report(cfg, &report)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let input = require(&cfg.recap.input, "recap.input (or --input)")?;
    let records = read_recap_jsonl(&read_text(input)?)
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let stats = corpus_stats(&records);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
