//! Annotation ingestion, capped sampling, and conversation synthesis.
//!
//! The flow is: [`read_annotations`] adapts one of three on-disk schemas into
//! flat [`AnnotationRecord`]s with normalized boxes, [`balanced_sample`] and
//! [`per_image_sample`] enforce the per-category and per-image caps, and
//! [`synthesize_conversations`] turns the survivors into multi-turn chat
//! transcripts whose assistant sides are the annotated ground truth.
//!
//! Sampling determinism is load-bearing: every random choice runs on a
//! sub-stream derived from the global seed plus a stable label (the class
//! name or the image reference), so adding or removing one image never
//! perturbs what is kept for any other image.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionSpec;
use crate::seed::sub_rng;
use crate::sequence::template::{
    fill_template, make_task_prompt, PromptSlots, TaskKind, TemplatePool, REGION_HOLE,
};
use crate::sequence::{Conversation, Turn};

/// Answer emitted for a region-choice question whose description matches
/// nothing on the image.
pub const NO_MATCH_ANSWER: &str = "No corresponding options found.";

/// Fraction of region-choice turns synthesized as unanswerable, using a
/// description borrowed from another image.
pub const REC_NEGATIVE_RATE: f64 = 0.25;

/// One annotated region of one image, the unit every sampler works on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub region: RegionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        if self.class_name.is_none() && self.caption.is_none() && self.description.is_none() {
            return Err(Error::Data(format!(
                "record for image '{}' carries neither class_name, caption nor description",
                self.image_ref
            )));
        }
        Ok(())
    }
}

/// Caps applied before conversation synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub per_class_cap: Option<usize>,
    pub per_image_cap: Option<usize>,
    pub seed: u64,
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, cap) in [
            ("per_class_cap", self.per_class_cap),
            ("per_image_cap", self.per_image_cap),
        ] {
            if cap == Some(0) {
                return Err(Error::Config(format!("{name} must be at least 1 when set")));
            }
        }
        Ok(())
    }
}

/// Uniformly keeps at most `per_class_cap` records of every class, without
/// replacement, on an independent seeded stream per class. Records keep
/// their input order. With no cap set this is the identity.
pub fn balanced_sample(
    records: &[AnnotationRecord],
    policy: &SamplingPolicy,
) -> Result<Vec<AnnotationRecord>> {
    policy.validate()?;
    let cap = match policy.per_class_cap {
        Some(c) => c,
        None => return Ok(records.to_vec()),
    };
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let class = rec.class_name.as_deref().ok_or_else(|| {
            Error::Data(format!(
                "per-class sampling needs class_name on every record; image '{}' lacks one",
                rec.image_ref
            ))
        })?;
        by_class.entry(class).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (class, indices) in by_class {
        keep.extend(choose_without_replacement(
            &indices,
            cap,
            &mut sub_rng(policy.seed, &["balanced", class]),
        ));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| records[i].clone()).collect())
}

/// Uniformly keeps at most `per_image_cap` records per image. Each image
/// draws from its own sub-stream keyed by the image reference, so the
/// selection for one image is unaffected by any other image's records.
pub fn per_image_sample(
    records: &[AnnotationRecord],
    policy: &SamplingPolicy,
) -> Result<Vec<AnnotationRecord>> {
    policy.validate()?;
    let cap = policy.per_image_cap.ok_or_else(|| {
        Error::Config("per_image_sample requires per_image_cap to be set".into())
    })?;
    let mut by_image: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        match index.get(rec.image_ref.as_str()) {
            Some(&slot) => by_image[slot].1.push(i),
            None => {
                index.insert(&rec.image_ref, by_image.len());
                by_image.push((&rec.image_ref, vec![i]));
            }
        }
    }
    let mut keep = Vec::new();
    for (image, indices) in by_image {
        keep.extend(choose_without_replacement(
            &indices,
            cap,
            &mut sub_rng(policy.seed, &["per_image", image]),
        ));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| records[i].clone()).collect())
}

/// Partial Fisher-Yates: uniformly picks `k` of the given values.
fn choose_without_replacement<R: Rng>(values: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if values.len() <= k {
        return values.to_vec();
    }
    let mut pool = values.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Builds one conversation per image: up to `max_turns` instruction/response
/// pairs whose instructions come from the template pool and whose responses
/// are the records' annotated ground truth.
///
/// Task-specific shapes:
/// - caption tasks: one turn per record, response is the caption;
/// - classification: one turn per record, response is the class name;
/// - relation: one turn per record pair, response joins both captions;
///   images with a single region fall back to a brief-caption turn;
/// - region choice: every turn lists all of the image's regions as
///   candidates; a seeded fraction of turns borrows a description from
///   another image and answers [`NO_MATCH_ANSWER`].
pub fn synthesize_conversations<R: Rng>(
    records: &[AnnotationRecord],
    pool: &TemplatePool,
    rng: &mut R,
    max_turns: usize,
) -> Result<Vec<Conversation>> {
    if max_turns == 0 {
        return Err(Error::Config("max_turns must be at least 1".into()));
    }
    for rec in records {
        rec.validate()?;
    }
    let mut by_image: Vec<(&str, Vec<&AnnotationRecord>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for rec in records {
        match index.get(rec.image_ref.as_str()) {
            Some(&slot) => by_image[slot].1.push(rec),
            None => {
                index.insert(&rec.image_ref, by_image.len());
                by_image.push((&rec.image_ref, vec![rec]));
            }
        }
    }

    let mut out = Vec::with_capacity(by_image.len());
    for (image, group) in &by_image {
        let regions: Vec<RegionSpec> = group
            .iter()
            .enumerate()
            .map(|(k, rec)| {
                let mut spec = rec.region.clone();
                spec.id = (k + 1) as u32;
                spec
            })
            .collect();
        let mut turns = Vec::new();
        match pool.task {
            TaskKind::BriefCaption | TaskKind::DetailedCaption => {
                for (k, rec) in group.iter().take(max_turns).enumerate() {
                    turns.push(Turn::user(caption_prompt(pool, (k + 1) as u32, rng)?));
                    turns.push(Turn::assistant(require_caption(rec)?));
                }
            }
            TaskKind::Classification => {
                for (k, rec) in group.iter().take(max_turns).enumerate() {
                    let class = rec.class_name.as_deref().ok_or_else(|| {
                        Error::Data(format!(
                            "classification task needs class_name; image '{image}' has a record without one"
                        ))
                    })?;
                    let slots = PromptSlots {
                        region_ids: &[(k + 1) as u32],
                        description: None,
                    };
                    turns.push(Turn::user(make_task_prompt(pool, &slots, rng)?));
                    turns.push(Turn::assistant(class));
                }
            }
            TaskKind::Relation => {
                if group.len() < 2 {
                    // Single-region images cannot ask about a pair; fall back
                    // to one brief caption turn so the image still teaches.
                    let brief = TemplatePool::builtin(TaskKind::BriefCaption);
                    turns.push(Turn::user(caption_prompt(&brief, 1, rng)?));
                    turns.push(Turn::assistant(require_caption(group[0])?));
                } else {
                    for (p, pair) in group.chunks_exact(2).take(max_turns).enumerate() {
                        let ids = [(2 * p + 1) as u32, (2 * p + 2) as u32];
                        let slots = PromptSlots {
                            region_ids: &ids,
                            description: None,
                        };
                        let (_, template) = pool.draw_where(rng, |t| {
                            t.matches(REGION_HOLE).count() == 2
                        })?;
                        turns.push(Turn::user(fill_template(template, &slots)?));
                        turns.push(Turn::assistant(format!(
                            "{} and {}",
                            require_caption(pair[0])?,
                            require_caption(pair[1])?
                        )));
                    }
                }
            }
            TaskKind::Rec => {
                let all_ids: Vec<u32> = (1..=group.len() as u32).collect();
                let own: Vec<&str> = group
                    .iter()
                    .filter_map(|r| r.description.as_deref())
                    .collect();
                let distractors: Vec<&str> = records
                    .iter()
                    .filter(|r| r.image_ref != *image)
                    .filter_map(|r| r.description.as_deref())
                    .filter(|d| !own.contains(d))
                    .collect();
                for (k, rec) in group.iter().take(max_turns).enumerate() {
                    let desc = rec.description.as_deref().ok_or_else(|| {
                        Error::Data(format!(
                            "region-choice task needs description; image '{image}' has a record without one"
                        ))
                    })?;
                    let negative =
                        !distractors.is_empty() && rng.random::<f64>() < REC_NEGATIVE_RATE;
                    let (question_desc, answer) = if negative {
                        let pick = distractors[rng.random_range(0..distractors.len())];
                        (pick, NO_MATCH_ANSWER.to_string())
                    } else {
                        (desc, format!("Region [{}].", k + 1))
                    };
                    let quoted = format!("\"{question_desc}\"");
                    let slots = PromptSlots {
                        region_ids: &all_ids,
                        description: Some(&quoted),
                    };
                    turns.push(Turn::user(make_task_prompt(pool, &slots, rng)?));
                    turns.push(Turn::assistant(answer));
                }
            }
        }
        let conv = Conversation {
            image_ref: image.to_string(),
            regions,
            turns,
        };
        conv.validate()?;
        out.push(conv);
    }
    Ok(out)
}

fn caption_prompt<R: Rng>(pool: &TemplatePool, id: u32, rng: &mut R) -> Result<String> {
    let slots = PromptSlots {
        region_ids: &[id],
        description: None,
    };
    make_task_prompt(pool, &slots, rng)
}

fn require_caption(rec: &AnnotationRecord) -> Result<String> {
    rec.caption.clone().ok_or_else(|| {
        Error::Data(format!(
            "caption task needs caption; image '{}' has a record without one",
            rec.image_ref
        ))
    })
}

/// On-disk annotation schemas [`read_annotations`] understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// `{"images": [...], "annotations": [...], "categories": [...]}` with
    /// pixel `bbox: [x, y, w, h]`; yields class-name records.
    CocoDetection,
    /// `[{"image", "width", "height", "regions": [{"x","y","width","height",
    /// "phrase"}]}]`; yields caption records.
    VgRegions,
    /// `[{"image", "width", "height", "refs": [{"bbox", "expression"}]}]`;
    /// yields description records.
    Refexp,
}

impl AnnotationFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "coco_detection" => Some(AnnotationFormat::CocoDetection),
            "vg_regions" => Some(AnnotationFormat::VgRegions),
            "refexp" => Some(AnnotationFormat::Refexp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnnotationFormat::CocoDetection => "coco_detection",
            AnnotationFormat::VgRegions => "vg_regions",
            AnnotationFormat::Refexp => "refexp",
        }
    }
}

/// Reads an annotation file and normalizes every box by its image size.
/// Boxes reaching past the image edge are clamped to it with a logged
/// warning; boxes with no area are rejected.
pub fn read_annotations(path: impl AsRef<Path>, format: AnnotationFormat) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_annotations(&text, format)
}

/// Same as [`read_annotations`] but from an in-memory string.
pub fn parse_annotations(text: &str, format: AnnotationFormat) -> Result<Vec<AnnotationRecord>> {
    match format {
        AnnotationFormat::CocoDetection => parse_coco(text),
        AnnotationFormat::VgRegions => parse_vg(text),
        AnnotationFormat::Refexp => parse_refexp(text),
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    bbox: [f64; 4],
    category_id: i64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

fn parse_coco(text: &str) -> Result<Vec<AnnotationRecord>> {
    let file: CocoFile = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("detection file does not parse: {e}")))?;
    let images: HashMap<i64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    let classes: HashMap<i64, &str> = file
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut next_id: HashMap<&str, u32> = HashMap::new();
    let mut out = Vec::with_capacity(file.annotations.len());
    for (i, ann) in file.annotations.iter().enumerate() {
        let image = images.get(&ann.image_id).ok_or_else(|| {
            Error::Data(format!("annotation {i} references unknown image id {}", ann.image_id))
        })?;
        let class = classes.get(&ann.category_id).ok_or_else(|| {
            Error::Data(format!(
                "annotation {i} references unknown category id {}",
                ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        let region = normalized_box(
            next_region_id(&mut next_id, &image.file_name),
            x,
            y,
            w,
            h,
            image.width,
            image.height,
            &format!("annotation {i} on '{}'", image.file_name),
        )?;
        out.push(AnnotationRecord {
            image_ref: image.file_name.clone(),
            region,
            class_name: Some((*class).to_string()),
            caption: None,
            description: None,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VgImage {
    image: String,
    width: f64,
    height: f64,
    regions: Vec<VgRegion>,
}

#[derive(Deserialize)]
struct VgRegion {
    x: f64,
    y: f64,
    width: f64,
    height: f64,
    phrase: String,
}

fn parse_vg(text: &str) -> Result<Vec<AnnotationRecord>> {
    let file: Vec<VgImage> = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("region file does not parse: {e}")))?;
    let mut out = Vec::new();
    for img in &file {
        for (k, reg) in img.regions.iter().enumerate() {
            let region = normalized_box(
                (k + 1) as u32,
                reg.x,
                reg.y,
                reg.width,
                reg.height,
                img.width,
                img.height,
                &format!("region {k} on '{}'", img.image),
            )?;
            out.push(AnnotationRecord {
                image_ref: img.image.clone(),
                region,
                class_name: None,
                caption: Some(reg.phrase.clone()),
                description: None,
            });
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RefexpImage {
    image: String,
    width: f64,
    height: f64,
    refs: Vec<RefexpRef>,
}

#[derive(Deserialize)]
struct RefexpRef {
    bbox: [f64; 4],
    expression: String,
}

fn parse_refexp(text: &str) -> Result<Vec<AnnotationRecord>> {
    let file: Vec<RefexpImage> = serde_json::from_str(text)
        .map_err(|e| Error::Data(format!("referring-expression file does not parse: {e}")))?;
    let mut out = Vec::new();
    for img in &file {
        for (k, r) in img.refs.iter().enumerate() {
            let [x, y, w, h] = r.bbox;
            let region = normalized_box(
                (k + 1) as u32,
                x,
                y,
                w,
                h,
                img.width,
                img.height,
                &format!("ref {k} on '{}'", img.image),
            )?;
            out.push(AnnotationRecord {
                image_ref: img.image.clone(),
                region,
                class_name: None,
                caption: None,
                description: Some(r.expression.clone()),
            });
        }
    }
    Ok(out)
}

fn next_region_id<'a>(counters: &mut HashMap<&'a str, u32>, image: &'a str) -> u32 {
    let c = counters.entry(image).or_insert(0);
    *c += 1;
    *c
}

#[allow(clippy::too_many_arguments)]
fn normalized_box(
    id: u32,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    img_w: f64,
    img_h: f64,
    what: &str,
) -> Result<RegionSpec> {
    if !(img_w > 0.0) || !(img_h > 0.0) {
        return Err(Error::Data(format!("{what}: image has non-positive size")));
    }
    if !(w > 0.0) || !(h > 0.0) {
        return Err(Error::Data(format!("{what}: box has no area")));
    }
    let raw = [x / img_w, y / img_h, (x + w) / img_w, (y + h) / img_h];
    let clamped = [
        raw[0].clamp(0.0, 1.0),
        raw[1].clamp(0.0, 1.0),
        raw[2].clamp(0.0, 1.0),
        raw[3].clamp(0.0, 1.0),
    ];
    if clamped != raw {
        log::warn!("{what}: box {raw:?} reaches outside the image; clamped to {clamped:?}");
    }
    RegionSpec::new_box(id, clamped).map_err(|e| Error::Data(format!("{what}: {e}")))
}

/// One dataset's role within a training stage: the tasks synthesized from it
/// and the sampling caps applied first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleSpec {
    pub dataset: String,
    pub tasks: Vec<TaskKind>,
    pub policy: SamplingPolicy,
}

/// Dataset bundles for the alignment stage: capped category classification
/// plus caption, relation and region-choice conversations.
pub fn pretrain_bundles(seed: u64) -> Vec<BundleSpec> {
    vec![
        BundleSpec {
            dataset: "v3det".into(),
            tasks: vec![TaskKind::Classification],
            policy: SamplingPolicy {
                per_class_cap: Some(100),
                per_image_cap: None,
                seed,
            },
        },
        BundleSpec {
            dataset: "vg".into(),
            tasks: vec![TaskKind::BriefCaption, TaskKind::Relation],
            policy: SamplingPolicy {
                per_class_cap: None,
                per_image_cap: Some(10),
                seed,
            },
        },
        BundleSpec {
            dataset: "refcocog".into(),
            tasks: vec![TaskKind::BriefCaption, TaskKind::Rec],
            policy: SamplingPolicy {
                per_class_cap: None,
                per_image_cap: None,
                seed,
            },
        },
    ]
}

/// Dataset bundles for the instruction stage: tighter category caps, two
/// extra detection sources, and detailed captions from the recaption set.
pub fn finetune_bundles(seed: u64) -> Vec<BundleSpec> {
    vec![
        BundleSpec {
            dataset: "v3det".into(),
            tasks: vec![TaskKind::Classification, TaskKind::BriefCaption],
            policy: SamplingPolicy {
                per_class_cap: Some(10),
                per_image_cap: None,
                seed,
            },
        },
        BundleSpec {
            dataset: "coco".into(),
            tasks: vec![TaskKind::Classification],
            policy: SamplingPolicy {
                per_class_cap: Some(20),
                per_image_cap: None,
                seed,
            },
        },
        BundleSpec {
            dataset: "lvis".into(),
            tasks: vec![TaskKind::Classification],
            policy: SamplingPolicy {
                per_class_cap: Some(20),
                per_image_cap: None,
                seed,
            },
        },
        BundleSpec {
            dataset: "vg".into(),
            tasks: vec![TaskKind::BriefCaption, TaskKind::Relation],
            policy: SamplingPolicy {
                per_class_cap: None,
                per_image_cap: Some(10),
                seed,
            },
        },
        BundleSpec {
            dataset: "refcocog".into(),
            tasks: vec![TaskKind::BriefCaption, TaskKind::Rec],
            policy: SamplingPolicy {
                per_class_cap: None,
                per_image_cap: None,
                seed,
            },
        },
        BundleSpec {
            dataset: "recap".into(),
            tasks: vec![TaskKind::DetailedCaption],
            policy: SamplingPolicy {
                per_class_cap: None,
                per_image_cap: None,
                seed,
            },
        },
    ]
}

/// Parses records from JSON-lines text, one record per line.
pub fn read_records_jsonl(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("record line {}: {e}", i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Serializes records as JSON-lines text.
pub fn write_records_jsonl(records: &[AnnotationRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        rec.validate()?;
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}
