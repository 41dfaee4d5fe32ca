//! Evaluation protocols and their metric kernels.
//!
//! Four protocols are covered: region classification (accuracy from free
//! generation plus mean average precision from candidate scoring),
//! referring comprehension over box proposals, region captioning (METEOR
//! and a tf-idf consensus metric), and yes/no hallucination probing.
//! Protocol drivers work against any [`RegionAssistant`]; metric kernels
//! are plain functions so they can be checked against hand computations.
//!
//! All drivers are deterministic: prompt variants are drawn from
//! sub-streams keyed by the item's image reference, never from shared
//! mutable state, so re-running an evaluation reproduces its report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RegionAssistant;
use crate::region::{RegionShape, RegionSpec};
use crate::seed::sub_rng;
use crate::sequence::template::{
    append_guidance, fill_template, PromptSlots, TaskKind, TemplatePool, COCO_GUIDANCE,
    REC_GUIDANCE,
};
use crate::sequence::{assemble_classification_eval, ClassificationMode, Conversation, Turn};

/// Candidate answer a referring-comprehension model gives when no region
/// matches the query.
pub const REC_NO_MATCH: &str = "No corresponding options found.";

// ---------------------------------------------------------------------------
// Items
// ---------------------------------------------------------------------------

/// One region to classify against a closed candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationItem {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub region: RegionSpec,
    pub gt_class: String,
    pub candidate_set: Vec<String>,
}

impl ClassificationItem {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        if self.candidate_set.is_empty() {
            return Err(Error::Eval(format!(
                "classification item for '{}' has an empty candidate set",
                self.image_ref
            )));
        }
        let gt = canonical(&self.gt_class);
        if !self.candidate_set.iter().any(|c| canonical(c) == gt) {
            return Err(Error::Eval(format!(
                "ground-truth class '{}' is not in the candidate set",
                self.gt_class
            )));
        }
        Ok(())
    }
}

/// One referring-comprehension query over box proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecItem {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub candidates: Vec<RegionSpec>,
    pub gt_box: [f64; 4],
    pub query: String,
}

impl RecItem {
    pub fn validate(&self) -> Result<()> {
        for c in &self.candidates {
            c.validate()?;
            if !matches!(c.shape, RegionShape::Box(_)) {
                return Err(Error::Eval(format!(
                    "candidate {} on '{}' is not a box",
                    c.id, self.image_ref
                )));
            }
        }
        let [x1, y1, x2, y2] = self.gt_box;
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Eval(format!(
                "ground-truth box {:?} on '{}' is degenerate",
                self.gt_box, self.image_ref
            )));
        }
        Ok(())
    }

    fn candidate_boxes(&self) -> Vec<[f64; 4]> {
        self.candidates
            .iter()
            .map(|c| match &c.shape {
                RegionShape::Box(b) => *b,
                _ => unreachable!("validated as boxes"),
            })
            .collect()
    }
}

/// A binary answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    /// Reads the first word of a reply; anything that is not "yes" counts
    /// as "no".
    pub fn from_reply(text: &str) -> YesNo {
        match canonical(text).split_whitespace().next() {
            Some("yes") => YesNo::Yes,
            _ => YesNo::No,
        }
    }
}

/// One yes/no probe with its label and the model's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeItem {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    pub label: YesNo,
    pub prediction: YesNo,
}

/// A yes/no probe that has not been answered yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestion {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub question: String,
    pub label: YesNo,
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

fn box_area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union of two [x1, y1, x2, y2] boxes. A box with no
/// area scores 0 against everything.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (area_a, area_b) = (box_area(a), box_area(b));
    if area_a <= 0.0 || area_b <= 0.0 {
        log::warn!("iou of a degenerate box ({a:?} vs {b:?}) reported as 0");
        return 0.0;
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (area_a + area_b - inter)
}

/// Appends the ground-truth box as an extra candidate to every item whose
/// proposals all miss it (max IoU below 0.5). Afterwards every item has a
/// candidate overlapping its ground truth at 0.5 or better.
pub fn inject_gt_candidates(items: Vec<RecItem>) -> Result<Vec<RecItem>> {
    items
        .into_iter()
        .map(|mut item| {
            item.validate()?;
            let best = item
                .candidate_boxes()
                .iter()
                .map(|&b| iou(b, item.gt_box))
                .fold(0.0, f64::max);
            if best < 0.5 {
                let next_id = item.candidates.iter().map(|c| c.id).max().unwrap_or(0) + 1;
                item.candidates
                    .push(RegionSpec::new_box(next_id, item.gt_box)?);
            }
            Ok(item)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Answer normalization
// ---------------------------------------------------------------------------

/// Lowercases, replaces punctuation with spaces, and collapses whitespace.
pub fn canonical(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Decides whether a free-form answer should count as a given class even
/// though the surface strings differ. Hook for synonym handling; the
/// default pipeline runs without one.
pub trait SemanticMatcher {
    fn matches(&self, answer: &str, class: &str) -> bool;
}

/// Maps a free-form answer onto the candidate class it names, or `None`
/// when the answer is outside the set. Matching is case- and
/// punctuation-insensitive but otherwise exact.
pub fn normalize_class_answer(text: &str, candidates: &[String]) -> Option<String> {
    normalize_class_answer_with(text, candidates, None)
}

/// Like [`normalize_class_answer`], consulting `matcher` for items the
/// exact rule rejects.
pub fn normalize_class_answer_with(
    text: &str,
    candidates: &[String],
    matcher: Option<&dyn SemanticMatcher>,
) -> Option<String> {
    let answer = canonical(text);
    if answer.is_empty() {
        return None;
    }
    for c in candidates {
        if canonical(c) == answer {
            return Some(c.clone());
        }
    }
    if let Some(m) = matcher {
        for c in candidates {
            if m.matches(text, c) {
                return Some(c.clone());
            }
        }
    }
    None
}

/// Extracts k from the first "Region [k]" in a reply, however it is cased
/// or spaced. The no-match sentence and free text yield `None`.
pub fn parse_region_answer(text: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)region\s*\[\s*([0-9]+)\s*\]").expect("answer pattern compiles")
    });
    re.captures(text)?.get(1)?.as_str().parse().ok()
}

// ---------------------------------------------------------------------------
// Yes/no metrics
// ---------------------------------------------------------------------------

/// Binary metrics with "yes" as the positive class. Metrics whose
/// denominator was zero are reported as 0 and listed in
/// `zero_denominators`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    pub zero_denominators: Vec<String>,
}

pub fn eval_pope(items: &[PopeItem]) -> Result<PopeMetrics> {
    if items.is_empty() {
        return Err(Error::Eval("no yes/no items to evaluate".into()));
    }
    let count = |l: YesNo, p: YesNo| {
        items
            .iter()
            .filter(|i| i.label == l && i.prediction == p)
            .count() as f64
    };
    let tp = count(YesNo::Yes, YesNo::Yes);
    let fp = count(YesNo::No, YesNo::Yes);
    let fne = count(YesNo::Yes, YesNo::No);
    let tn = count(YesNo::No, YesNo::No);
    let n = items.len() as f64;
    let mut zero = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            zero.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let accuracy = (tp + tn) / n;
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fne);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
    let yes_ratio = (tp + fp) / n;
    Ok(PopeMetrics {
        accuracy,
        precision,
        recall,
        f1,
        yes_ratio,
        zero_denominators: zero,
    })
}

/// Puts each question to the model as a single-turn conversation and reads
/// the reply's leading yes/no.
pub fn answer_pope_questions(
    model: &dyn RegionAssistant,
    questions: &[PopeQuestion],
) -> Result<Vec<PopeItem>> {
    questions
        .iter()
        .map(|q| {
            let conv = Conversation {
                image_ref: q.image_ref.clone(),
                regions: Vec::new(),
                turns: vec![Turn::user(q.question.clone())],
            };
            let reply = model.reply(&conv)?;
            Ok(PopeItem {
                image_ref: q.image_ref.clone(),
                question: q.question.clone(),
                label: q.label,
                prediction: YesNo::from_reply(&reply),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Captioning metrics
// ---------------------------------------------------------------------------

/// Balance between precision and recall in the harmonic mean (recall-heavy).
pub const METEOR_ALPHA: f64 = 0.9;
/// Exponent of the fragmentation penalty.
pub const METEOR_BETA: f64 = 3.0;
/// Weight of the fragmentation penalty.
pub const METEOR_GAMMA: f64 = 0.5;
/// Width of the Gaussian length penalty in the consensus metric.
pub const CIDER_SIGMA: f64 = 6.0;
/// Longest n-gram the consensus metric considers.
pub const CIDER_MAX_N: usize = 4;

/// One candidate caption with its reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub candidate: String,
    pub references: Vec<String>,
}

/// Corpus averages plus the per-entry scores they average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub meteor: f64,
    pub cider: f64,
    pub per_item: Vec<CaptionScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub meteor: f64,
    pub cider: f64,
}

fn caption_tokens(s: &str) -> Vec<String> {
    canonical(s).split_whitespace().map(String::from).collect()
}

/// Word-alignment score of a candidate against one reference: harmonic
/// precision/recall over exact surface matches, discounted by how
/// fragmented the alignment is. In [0, 1].
///
/// Matching is greedy: each candidate token takes the first unused
/// identical reference token, and a chunk is a maximal run of matches
/// consecutive on both sides.
pub fn meteor_single(candidate: &str, reference: &str) -> f64 {
    let cand = caption_tokens(candidate);
    let refr = caption_tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; refr.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (ci, token) in cand.iter().enumerate() {
        if let Some(ri) = refr
            .iter()
            .enumerate()
            .position(|(ri, r)| !used[ri] && r == token)
        {
            used[ri] = true;
            pairs.push((ci, ri));
        }
    }
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let p = m / cand.len() as f64;
    let r = m / refr.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Best [`meteor_single`] over all references.
pub fn meteor_score(candidate: &str, references: &[String]) -> f64 {
    references
        .iter()
        .map(|r| meteor_single(candidate, r))
        .fold(0.0, f64::max)
}

type NgramCounts = HashMap<String, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join("\u{1}")).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct TfidfVec {
    // Per n-gram order: weight per n-gram and the vector's norm.
    weights: Vec<NgramCounts>,
    norms: Vec<f64>,
    length: usize,
}

fn tfidf_vec(tokens: &[String], df: &[HashMap<String, f64>], log_corpus: f64) -> TfidfVec {
    let mut weights = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let mut w = ngram_counts(tokens, n);
        let mut sq = 0.0;
        for (gram, count) in w.iter_mut() {
            let seen = df[n - 1].get(gram).copied().unwrap_or(0.0).max(1.0);
            *count *= log_corpus - seen.ln();
            sq += *count * *count;
        }
        weights.push(w);
        norms.push(sq.sqrt());
    }
    TfidfVec {
        weights,
        norms,
        length: tokens.len(),
    }
}

fn cider_sim(cand: &TfidfVec, refr: &TfidfVec) -> f64 {
    let delta = cand.length as f64 - refr.length as f64;
    let len_penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        if cand.norms[n] == 0.0 || refr.norms[n] == 0.0 {
            continue;
        }
        let mut dot = 0.0;
        for (gram, &wc) in &cand.weights[n] {
            if let Some(&wr) = refr.weights[n].get(gram) {
                // Clipping the candidate weight stops a caption from
                // scoring by repeating one reference n-gram.
                dot += wc.min(wr) * wr;
            }
        }
        total += len_penalty * dot / (cand.norms[n] * refr.norms[n]);
    }
    total / CIDER_MAX_N as f64
}

/// Consensus captioning scores for a whole corpus: candidate and reference
/// n-grams (orders 1..=4) are weighted by tf-idf over the reference
/// corpus, compared by clipped cosine similarity under a Gaussian length
/// penalty, and scaled by 10. Needs at least two entries so document
/// frequencies are informative.
pub fn cider_scores(entries: &[CaptionEntry]) -> Result<Vec<f64>> {
    if entries.len() < 2 {
        return Err(Error::Eval(format!(
            "consensus captioning scores need at least 2 entries, got {}",
            entries.len()
        )));
    }
    for (i, e) in entries.iter().enumerate() {
        if e.references.is_empty() || e.references.iter().any(|r| caption_tokens(r).is_empty()) {
            return Err(Error::Eval(format!("entry {i} has an empty reference")));
        }
    }
    // Document frequency: how many entries' reference sets contain each
    // n-gram at least once.
    let mut df: Vec<HashMap<String, f64>> = vec![HashMap::new(); CIDER_MAX_N];
    for e in entries {
        for n in 1..=CIDER_MAX_N {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for r in &e.references {
                seen.extend(ngram_counts(&caption_tokens(r), n).into_keys());
            }
            for gram in seen {
                *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let log_corpus = (entries.len() as f64).ln();
    Ok(entries
        .iter()
        .map(|e| {
            let cand = tfidf_vec(&caption_tokens(&e.candidate), &df, log_corpus);
            let total: f64 = e
                .references
                .iter()
                .map(|r| cider_sim(&cand, &tfidf_vec(&caption_tokens(r), &df, log_corpus)))
                .sum();
            10.0 * total / e.references.len() as f64
        })
        .collect())
}

/// Scores every entry and averages. See [`meteor_score`] and
/// [`cider_scores`] for the two kernels.
pub fn eval_captioning(entries: &[CaptionEntry]) -> Result<CaptionMetrics> {
    let cider = cider_scores(entries)?;
    let per_item: Vec<CaptionScores> = entries
        .iter()
        .zip(&cider)
        .map(|(e, &c)| CaptionScores {
            meteor: meteor_score(&e.candidate, &e.references),
            cider: c,
        })
        .collect();
    let n = per_item.len() as f64;
    Ok(CaptionMetrics {
        meteor: per_item.iter().map(|s| s.meteor).sum::<f64>() / n,
        cider: per_item.iter().map(|s| s.cider).sum::<f64>() / n,
        per_item,
    })
}

// ---------------------------------------------------------------------------
// Classification protocol
// ---------------------------------------------------------------------------

/// Outcome of classifying one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub gt_class: String,
    /// The candidate the model's reply named, if any.
    pub answer: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Mean average precision from candidate scoring; absent when scoring
    /// was not requested.
    pub map: Option<f64>,
    pub mode: ClassificationMode,
    pub per_item: Vec<ClassificationOutcome>,
}

/// Classifies every item by free generation under the chosen instruction
/// layout, and optionally ranks candidate sets by model score for mean
/// average precision. Items of one image are grouped into the layout the
/// mode prescribes; region ids are renumbered 1.. per image.
pub fn eval_classification(
    model: &dyn RegionAssistant,
    items: &[ClassificationItem],
    mode: ClassificationMode,
    use_scores: bool,
    seed: u64,
) -> Result<ClassificationMetrics> {
    if items.is_empty() {
        return Err(Error::Eval("no classification items".into()));
    }
    for item in items {
        item.validate()?;
    }
    let groups = group_by_image(items);
    let pool = TemplatePool::builtin(TaskKind::Classification);
    let mut answers: Vec<Option<String>> = vec![None; items.len()];
    for (image_ref, members) in &groups {
        let regions = renumbered_regions(items, members);
        let mut rng = sub_rng(seed, &["eval-classification", image_ref]);
        let convs =
            assemble_classification_eval(image_ref, &regions, mode, &pool, COCO_GUIDANCE, &mut rng)?;
        match mode {
            ClassificationMode::OneTurnAll => {
                // One reply covers the whole image: one class per region,
                // comma-separated, in region order.
                let reply = model.reply(&convs[0])?;
                for (k, part) in reply.split(',').enumerate() {
                    if let Some(&i) = members.get(k) {
                        answers[i] = normalize_class_answer(part, &items[i].candidate_set);
                    }
                }
            }
            ClassificationMode::MultiTurnAll => {
                // One conversation, answered region by region with the
                // history of earlier answers in place.
                let script = &convs[0];
                let mut working = Conversation {
                    image_ref: script.image_ref.clone(),
                    regions: script.regions.clone(),
                    turns: Vec::new(),
                };
                for (k, user_turn) in script.turns.iter().enumerate() {
                    working.turns.push(user_turn.clone());
                    let reply = model.reply(&working)?;
                    let i = members[k];
                    answers[i] = normalize_class_answer(&reply, &items[i].candidate_set);
                    working.turns.push(Turn::assistant(reply));
                }
            }
            ClassificationMode::OneTurnOne => {
                for (k, conv) in convs.iter().enumerate() {
                    let i = members[k];
                    let reply = model.reply(conv)?;
                    answers[i] = normalize_class_answer(&reply, &items[i].candidate_set);
                }
            }
        }
    }

    let per_item: Vec<ClassificationOutcome> = items
        .iter()
        .zip(&answers)
        .map(|(item, answer)| {
            let correct = answer
                .as_deref()
                .is_some_and(|a| canonical(a) == canonical(&item.gt_class));
            ClassificationOutcome {
                image_ref: item.image_ref.clone(),
                gt_class: item.gt_class.clone(),
                answer: answer.clone(),
                correct,
            }
        })
        .collect();
    let accuracy =
        per_item.iter().filter(|o| o.correct).count() as f64 / per_item.len() as f64;

    let map = if use_scores {
        Some(mean_average_precision(model, items, seed)?)
    } else {
        None
    };
    Ok(ClassificationMetrics {
        accuracy,
        map,
        mode,
        per_item,
    })
}

/// Groups item indices by image reference in first-appearance order.
fn group_by_image(items: &[ClassificationItem]) -> Vec<(&str, Vec<usize>)> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        match index.get(item.image_ref.as_str()) {
            Some(&g) => groups[g].1.push(i),
            None => {
                index.insert(&item.image_ref, groups.len());
                groups.push((&item.image_ref, vec![i]));
            }
        }
    }
    groups
}

/// The group's regions with ids renumbered 1.. in item order, so every
/// driver pass presents a given region under the same number.
fn renumbered_regions(items: &[ClassificationItem], members: &[usize]) -> Vec<RegionSpec> {
    members
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut r = items[i].region.clone();
            r.id = (k + 1) as u32;
            r
        })
        .collect()
}

/// Scores each item's candidate set, then computes one average precision
/// per class by ranking all items against that class and averaging the
/// precision at every true positive. Classes without positives are
/// skipped.
fn mean_average_precision(
    model: &dyn RegionAssistant,
    items: &[ClassificationItem],
    seed: u64,
) -> Result<f64> {
    let pool = TemplatePool::builtin(TaskKind::Classification);
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); items.len()];
    for (image_ref, members) in &group_by_image(items) {
        let regions = renumbered_regions(items, members);
        let mut rng = sub_rng(seed, &["eval-classification-scores", image_ref]);
        let convs = assemble_classification_eval(
            image_ref,
            &regions,
            ClassificationMode::OneTurnOne,
            &pool,
            COCO_GUIDANCE,
            &mut rng,
        )?;
        for (k, &i) in members.iter().enumerate() {
            scores[i] = model.score_candidates(&convs[k], &items[i].candidate_set)?;
        }
    }
    let classes: BTreeSet<String> = items.iter().map(|i| canonical(&i.gt_class)).collect();
    let mut aps = Vec::new();
    for class in classes {
        // Every item whose candidate set offers this class is ranked by
        // the score it assigns the class.
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        for (item, item_scores) in items.iter().zip(&scores) {
            let Some(pos) = item
                .candidate_set
                .iter()
                .position(|c| canonical(c) == class)
            else {
                continue;
            };
            ranked.push((item_scores[pos], canonical(&item.gt_class) == class));
        }
        let positives = ranked.iter().filter(|(_, p)| *p).count();
        if positives == 0 {
            continue;
        }
        // Stable sort keeps input order among equal scores.
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, (_, positive)) in ranked.iter().enumerate() {
            if *positive {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / positives as f64);
    }
    if aps.is_empty() {
        return Err(Error::Eval("no class has a positive item".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

// ---------------------------------------------------------------------------
// Referring comprehension protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecOutcome {
    #[serde(rename = "image")]
    pub image_ref: String,
    /// 1-based candidate index the reply named, if any.
    pub answer: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecMetrics {
    pub accuracy: f64,
    pub per_item: Vec<RecOutcome>,
}

/// Puts each query to the model with all candidate regions listed and
/// checks whether the answered candidate overlaps the ground truth at IoU
/// 0.5. Items must already have a candidate overlapping the ground truth
/// (see [`inject_gt_candidates`]); unparseable answers count as wrong.
pub fn eval_rec(
    model: &dyn RegionAssistant,
    items: &[RecItem],
    seed: u64,
) -> Result<RecMetrics> {
    if items.is_empty() {
        return Err(Error::Eval("no referring-comprehension items".into()));
    }
    let pool = TemplatePool::builtin(TaskKind::Rec);
    let mut per_item = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        item.validate()?;
        let boxes = item.candidate_boxes();
        if !boxes.iter().any(|&b| iou(b, item.gt_box) >= 0.5) {
            return Err(Error::Eval(format!(
                "item {idx}: no candidate overlaps the ground truth at 0.5; \
                 run inject_gt_candidates first"
            )));
        }
        let regions: Vec<RegionSpec> = item
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut r = c.clone();
                r.id = (k + 1) as u32;
                r
            })
            .collect();
        let ids: Vec<u32> = regions.iter().map(|r| r.id).collect();
        let mut rng = sub_rng(seed, &["eval-rec", &item.image_ref, &idx.to_string()]);
        let (_, template) = pool.draw(&mut rng);
        let quoted = format!("\"{}\"", item.query);
        let prompt = fill_template(
            template,
            &PromptSlots {
                region_ids: &ids,
                description: Some(&quoted),
            },
        )?;
        let conv = Conversation {
            image_ref: item.image_ref.clone(),
            regions,
            turns: vec![Turn::user(append_guidance(&prompt, REC_GUIDANCE))],
        };
        let reply = model.reply(&conv)?;
        let answer = parse_region_answer(&reply).filter(|&k| k >= 1 && k <= boxes.len());
        let correct = answer.is_some_and(|k| iou(boxes[k - 1], item.gt_box) >= 0.5);
        per_item.push(RecOutcome {
            image_ref: item.image_ref.clone(),
            answer,
            correct,
        });
    }
    let accuracy = per_item.iter().filter(|o| o.correct).count() as f64 / per_item.len() as f64;
    Ok(RecMetrics { accuracy, per_item })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Serializable summary of one evaluation run. Map keys are sorted, so the
/// JSON is byte-stable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub metrics: BTreeMap<String, f64>,
    pub per_item: Vec<serde_json::Value>,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn to_values<T: Serialize>(items: &[T]) -> Result<Vec<serde_json::Value>> {
    items.iter().map(|i| Ok(serde_json::to_value(i)?)).collect()
}

impl PopeMetrics {
    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            protocol: "pope".into(),
            params: BTreeMap::new(),
            metrics: BTreeMap::from([
                ("accuracy".into(), self.accuracy),
                ("precision".into(), self.precision),
                ("recall".into(), self.recall),
                ("f1".into(), self.f1),
                ("yes_ratio".into(), self.yes_ratio),
            ]),
            per_item: Vec::new(),
        })
    }
}

impl CaptionMetrics {
    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            protocol: "caption".into(),
            params: BTreeMap::from([
                ("meteor_alpha".into(), serde_json::json!(METEOR_ALPHA)),
                ("meteor_beta".into(), serde_json::json!(METEOR_BETA)),
                ("meteor_gamma".into(), serde_json::json!(METEOR_GAMMA)),
                ("cider_sigma".into(), serde_json::json!(CIDER_SIGMA)),
                ("cider_max_n".into(), serde_json::json!(CIDER_MAX_N)),
            ]),
            metrics: BTreeMap::from([
                ("meteor".into(), self.meteor),
                ("cider".into(), self.cider),
            ]),
            per_item: to_values(&self.per_item)?,
        })
    }
}

impl ClassificationMetrics {
    pub fn report(&self) -> Result<EvalReport> {
        let mut metrics = BTreeMap::from([("accuracy".into(), self.accuracy)]);
        if let Some(map) = self.map {
            metrics.insert("map".into(), map);
        }
        Ok(EvalReport {
            protocol: "classification".into(),
            params: BTreeMap::from([(
                "mode".into(),
                serde_json::json!(self.mode.name()),
            )]),
            metrics,
            per_item: to_values(&self.per_item)?,
        })
    }
}

impl RecMetrics {
    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            protocol: "rec".into(),
            params: BTreeMap::new(),
            metrics: BTreeMap::from([("accuracy".into(), self.accuracy)]),
            per_item: to_values(&self.per_item)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::placeholder_ids;
    use rand::Rng;

    #[test]
    fn iou_matches_hand_cases() {
        let unit = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(unit, unit), 1.0);
        assert_eq!(iou([0.0, 0.0, 0.4, 0.4], [0.5, 0.5, 1.0, 1.0]), 0.0);
        // Left half of the unit box: intersection 0.5, union 1.0.
        assert_eq!(iou(unit, [0.0, 0.0, 0.5, 1.0]), 0.5);
        assert_eq!(iou([0.2, 0.2, 0.2, 0.8], unit), 0.0, "no area, no overlap");
    }

    #[test]
    fn iou_matches_cell_counting_on_snapped_boxes() {
        // Boxes with coordinates on a 1/20 lattice have exactly countable
        // areas; a cell-counting reimplementation must agree.
        let mut rng = sub_rng(17, &["iou"]);
        for _ in 0..200 {
            let mut snap = || {
                let a = rng.random_range(0..20u32);
                let b = rng.random_range(a + 1..=20u32);
                (a as f64 / 20.0, b as f64 / 20.0)
            };
            let (ax1, ax2) = snap();
            let (ay1, ay2) = snap();
            let (bx1, bx2) = snap();
            let (by1, by2) = snap();
            let a = [ax1, ay1, ax2, ay2];
            let b = [bx1, by1, bx2, by2];
            let mut inter = 0u32;
            let mut union = 0u32;
            for cx in 0..20 {
                for cy in 0..20 {
                    let (x, y) = (cx as f64 / 20.0 + 0.025, cy as f64 / 20.0 + 0.025);
                    let in_a = x > a[0] && x < a[2] && y > a[1] && y < a[3];
                    let in_b = x > b[0] && x < b[2] && y > b[1] && y < b[3];
                    inter += (in_a && in_b) as u32;
                    union += (in_a || in_b) as u32;
                }
            }
            let expected = inter as f64 / union as f64;
            assert!(
                (iou(a, b) - expected).abs() < 1e-12,
                "{a:?} vs {b:?}: {} != {expected}",
                iou(a, b)
            );
        }
    }

    fn rec_item(candidates: Vec<[f64; 4]>, gt: [f64; 4]) -> RecItem {
        RecItem {
            image_ref: "img".into(),
            candidates: candidates
                .into_iter()
                .enumerate()
                .map(|(i, b)| RegionSpec::new_box((i + 1) as u32, b).unwrap())
                .collect(),
            gt_box: gt,
            query: "the thing".into(),
        }
    }

    #[test]
    fn injection_straddles_the_half_overlap_boundary() {
        let gt = [0.0, 0.0, 0.5, 0.4];
        // Shifting a same-size box along x: IoU = (w - dx) / (w + dx).
        // dx chosen so the ratios land just below and just above 0.5.
        let below = [0.168, 0.0, 0.668, 0.4]; // (0.5-0.168)/(0.5+0.168) ~ 0.497
        let above = [0.164, 0.0, 0.664, 0.4]; // (0.5-0.164)/(0.5+0.164) ~ 0.506
        assert!(iou(below, gt) < 0.5 && iou(above, gt) > 0.5);

        let out = inject_gt_candidates(vec![rec_item(vec![below], gt)]).unwrap();
        assert_eq!(out[0].candidates.len(), 2, "a miss at 0.497 injects the gt");
        let out = inject_gt_candidates(vec![rec_item(vec![above], gt)]).unwrap();
        assert_eq!(out[0].candidates.len(), 1, "a hit at 0.506 injects nothing");
    }

    #[test]
    fn injection_guarantees_a_half_overlap_candidate() {
        let mut rng = sub_rng(3, &["inject"]);
        for _ in 0..50 {
            let mut random_box = || {
                let x1: f64 = rng.random_range(0.0..0.8);
                let y1: f64 = rng.random_range(0.0..0.8);
                [
                    x1,
                    y1,
                    rng.random_range((x1 + 0.05)..1.0),
                    rng.random_range((y1 + 0.05)..1.0),
                ]
            };
            let gt = random_box();
            let item = rec_item(vec![random_box(), random_box()], gt);
            let out = inject_gt_candidates(vec![item]).unwrap();
            let best = out[0]
                .candidate_boxes()
                .iter()
                .map(|&b| iou(b, gt))
                .fold(0.0, f64::max);
            assert!(best >= 0.5);
        }
    }

    #[test]
    fn class_answers_normalize_and_reject_out_of_set() {
        let coco: Vec<String> = ["person", "tv", "laptop", "cup"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(normalize_class_answer("TV", &coco).as_deref(), Some("tv"));
        assert_eq!(
            normalize_class_answer("  laptop. ", &coco).as_deref(),
            Some("laptop")
        );
        assert_eq!(normalize_class_answer("Aerocraft", &coco), None);
        assert_eq!(normalize_class_answer("", &coco), None);

        struct FirstLetter;
        impl SemanticMatcher for FirstLetter {
            fn matches(&self, answer: &str, class: &str) -> bool {
                answer.chars().next().map(|c| c.to_ascii_lowercase())
                    == class.chars().next().map(|c| c.to_ascii_lowercase())
            }
        }
        assert_eq!(
            normalize_class_answer_with("Pedestrian", &coco, Some(&FirstLetter)).as_deref(),
            Some("person"),
            "the hook may rescue answers the exact rule rejects"
        );
    }

    #[test]
    fn region_answers_parse_and_negatives_do_not() {
        assert_eq!(parse_region_answer("Region [2]."), Some(2));
        assert_eq!(parse_region_answer("No corresponding options found."), None);
        assert_eq!(parse_region_answer("region[10]"), Some(10));
        assert_eq!(parse_region_answer("REGION [ 7 ]"), Some(7));
        assert_eq!(parse_region_answer("I think Region [3] fits"), Some(3));
        assert_eq!(parse_region_answer("Region 5"), None);
        assert_eq!(parse_region_answer(""), None);
    }

    fn pope_items(spec: &[(YesNo, YesNo)]) -> Vec<PopeItem> {
        spec.iter()
            .map(|&(label, prediction)| PopeItem {
                image_ref: "img".into(),
                question: "Is there a dog?".into(),
                label,
                prediction,
            })
            .collect()
    }

    #[test]
    fn pope_metrics_match_hand_confusion_counts() {
        use YesNo::{No, Yes};
        let mut spec = Vec::new();
        spec.extend(std::iter::repeat_n((Yes, Yes), 3)); // TP
        spec.extend(std::iter::repeat_n((No, Yes), 1)); // FP
        spec.extend(std::iter::repeat_n((Yes, No), 1)); // FN
        spec.extend(std::iter::repeat_n((No, No), 5)); // TN
        let m = eval_pope(&pope_items(&spec)).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.f1, 0.75);
        assert_eq!(m.yes_ratio, 0.4);
        assert!(m.zero_denominators.is_empty());
    }

    #[test]
    fn all_yes_predictions_force_the_known_pattern() {
        use YesNo::{No, Yes};
        let items = pope_items(&[(Yes, Yes), (Yes, Yes), (No, Yes), (No, Yes)]);
        let m = eval_pope(&items).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.yes_ratio, 1.0);
    }

    #[test]
    fn zero_denominators_are_flagged_not_crashed() {
        use YesNo::No;
        let m = eval_pope(&pope_items(&[(No, No), (No, No)])).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(
            m.zero_denominators,
            vec!["precision".to_string(), "recall".to_string(), "f1".to_string()]
        );
        assert!(eval_pope(&[]).is_err());
    }

    #[test]
    fn meteor_matches_the_penalty_formula_on_exact_match() {
        let refs = vec!["the cat sat".to_string()];
        let expected = 1.0 - 0.5 * (1.0f64 / 3.0).powi(3);
        assert!((meteor_score("the cat sat", &refs) - expected).abs() < 1e-12);
        assert_eq!(meteor_score("dog runs fast", &refs), 0.0);
        assert_eq!(meteor_score("", &refs), 0.0);
    }

    #[test]
    fn meteor_penalizes_fragmented_alignments() {
        let refs = vec!["a b c d".to_string()];
        let contiguous = meteor_score("a b c d", &refs);
        // Same four matches, but scrambled into four chunks.
        let scrambled = meteor_score("b a d c", &refs);
        assert!(contiguous > scrambled);
        for s in [contiguous, scrambled] {
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn meteor_stays_in_bounds_and_rewards_exactness() {
        let mut rng = sub_rng(9, &["meteor"]);
        let vocab = ["sun", "sea", "sand", "boat", "gull", "wave", "rock"];
        for _ in 0..200 {
            let len = rng.random_range(3..7usize);
            let sentence: Vec<&str> = (0..len)
                .map(|_| vocab[rng.random_range(0..vocab.len())])
                .collect();
            let reference = sentence.join(" ");
            let refs = vec![reference.clone()];
            let exact = meteor_score(&reference, &refs);
            assert!((0.0..=1.0).contains(&exact));
            // Drop one word: strictly worse than the exact match.
            let dropped = sentence[..len - 1].join(" ");
            let partial = meteor_score(&dropped, &refs);
            assert!((0.0..=1.0).contains(&partial));
            assert!(
                exact > partial,
                "dropping a word must cost score: {reference:?}"
            );
        }
    }

    fn entry(candidate: &str, reference: &str) -> CaptionEntry {
        CaptionEntry {
            candidate: candidate.into(),
            references: vec![reference.into()],
        }
    }

    #[test]
    fn disjoint_corpus_with_exact_candidates_scores_ten() {
        // Two entries with no shared vocabulary: every n-gram has document
        // frequency 1, so idf is positive everywhere, cosines are 1, and
        // the length penalty is 1.
        let entries = vec![
            entry("a red fox jumps high", "a red fox jumps high"),
            entry("blue whales swim deep tonight", "blue whales swim deep tonight"),
        ];
        let scores = cider_scores(&entries).unwrap();
        for s in scores {
            assert!((s - 10.0).abs() < 1e-9, "got {s}");
        }
        let metrics = eval_captioning(&entries).unwrap();
        assert!((metrics.cider - 10.0).abs() < 1e-9);
    }

    #[test]
    fn consensus_score_never_prefers_disjoint_over_exact() {
        let mut rng = sub_rng(13, &["cider"]);
        let vocab_a = ["car", "road", "tree", "sign", "lane"];
        let vocab_b = ["pond", "duck", "reed", "mist", "bank"];
        for _ in 0..50 {
            let sentence = |rng: &mut rand_chacha::ChaCha8Rng, vocab: &[&str]| {
                (0..rng.random_range(4..8usize))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let ref_a = sentence(&mut rng, &vocab_a);
            let ref_b = sentence(&mut rng, &vocab_b);
            let exact = vec![entry(&ref_a, &ref_a), entry(&ref_b, &ref_b)];
            let disjoint = vec![entry(&ref_b, &ref_a), entry(&ref_a, &ref_b)];
            let exact_scores = cider_scores(&exact).unwrap();
            let disjoint_scores = cider_scores(&disjoint).unwrap();
            for (e, d) in exact_scores.iter().zip(&disjoint_scores) {
                assert!(e >= d, "exact {e} vs disjoint {d}");
            }
        }
    }

    #[test]
    fn captioning_rejects_thin_or_empty_corpora() {
        assert!(cider_scores(&[entry("a b c d", "a b c d")]).is_err());
        let bad = vec![
            CaptionEntry {
                candidate: "a b c d".into(),
                references: vec![],
            },
            entry("x y z w", "x y z w"),
        ];
        assert!(cider_scores(&bad).is_err());
    }

    /// Answers from a fixed per-image script, reading the asked region id
    /// out of the prompt's placeholders.
    struct ScriptedOracle {
        by_image: HashMap<String, Vec<String>>,
    }

    impl RegionAssistant for ScriptedOracle {
        fn reply(&self, conv: &Conversation) -> Result<String> {
            let answers = &self.by_image[&conv.image_ref];
            let last = conv.turns.last().expect("conversation has turns");
            let ids = placeholder_ids(&last.text);
            let named: Vec<String> = ids
                .iter()
                .map(|&id| answers[id as usize - 1].clone())
                .collect();
            Ok(named.join(", "))
        }

        fn score_candidates(
            &self,
            conv: &Conversation,
            candidates: &[String],
        ) -> Result<Vec<f64>> {
            let answers = &self.by_image[&conv.image_ref];
            let last = conv.turns.last().expect("conversation has turns");
            let id = placeholder_ids(&last.text)[0] as usize;
            let gt = canonical(&answers[id - 1]);
            Ok(candidates
                .iter()
                .map(|c| if canonical(c) == gt { 0.0 } else { -5.0 })
                .collect())
        }
    }

    fn classification_fixture() -> (Vec<ClassificationItem>, ScriptedOracle) {
        let set: Vec<String> = ["cat", "dog", "tv"].iter().map(|s| s.to_string()).collect();
        let mut items = Vec::new();
        let mut by_image = HashMap::new();
        for (image, classes) in [("a.png", vec!["cat", "tv"]), ("b.png", vec!["dog"])] {
            by_image.insert(
                image.to_string(),
                classes.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            );
            for (k, class) in classes.iter().enumerate() {
                items.push(ClassificationItem {
                    image_ref: image.into(),
                    region: RegionSpec::new_box(
                        (k + 1) as u32,
                        [0.1 * (k + 1) as f64, 0.1, 0.5 + 0.1 * (k + 1) as f64, 0.6],
                    )
                    .unwrap(),
                    gt_class: class.to_string(),
                    candidate_set: set.clone(),
                });
            }
        }
        (items, ScriptedOracle { by_image })
    }

    #[test]
    fn oracle_hits_full_accuracy_in_every_mode() {
        let (items, oracle) = classification_fixture();
        for mode in [
            ClassificationMode::OneTurnOne,
            ClassificationMode::OneTurnAll,
            ClassificationMode::MultiTurnAll,
        ] {
            let m = eval_classification(&oracle, &items, mode, false, 5).unwrap();
            assert_eq!(m.accuracy, 1.0, "mode {}", mode.name());
            assert!(m.map.is_none());
            assert!(m.per_item.iter().all(|o| o.correct));
        }
    }

    #[test]
    fn oracle_scoring_gives_full_mean_average_precision() {
        let (items, oracle) = classification_fixture();
        let m = eval_classification(
            &oracle,
            &items,
            ClassificationMode::OneTurnOne,
            true,
            5,
        )
        .unwrap();
        assert_eq!(m.map, Some(1.0));
    }

    /// Always answers the same fixed text.
    struct FixedReply(&'static str);

    impl RegionAssistant for FixedReply {
        fn reply(&self, _conv: &Conversation) -> Result<String> {
            Ok(self.0.to_string())
        }
        fn score_candidates(
            &self,
            _conv: &Conversation,
            candidates: &[String],
        ) -> Result<Vec<f64>> {
            Ok(vec![0.0; candidates.len()])
        }
    }

    #[test]
    fn out_of_set_answers_count_as_wrong() {
        let (items, _) = classification_fixture();
        let m = eval_classification(
            &FixedReply("Aerocraft"),
            &items,
            ClassificationMode::OneTurnOne,
            false,
            5,
        )
        .unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert!(m.per_item.iter().all(|o| o.answer.is_none()));
    }

    #[test]
    fn average_precision_matches_a_thresholded_curve_oracle() {
        // Rank all items for one class with hand-built distinct scores and
        // compare against precision-delta-recall integration.
        struct HandScores(Vec<f64>);
        impl RegionAssistant for HandScores {
            fn reply(&self, _conv: &Conversation) -> Result<String> {
                Ok("cat".into())
            }
            fn score_candidates(
                &self,
                conv: &Conversation,
                candidates: &[String],
            ) -> Result<Vec<f64>> {
                // Image refs are "i0".."i4"; score for "cat" varies by item,
                // other classes sit at a floor.
                let idx: usize = conv.image_ref[1..].parse().unwrap();
                Ok(candidates
                    .iter()
                    .map(|c| if c == "cat" { self.0[idx] } else { -100.0 })
                    .collect())
            }
        }
        let set: Vec<String> = ["cat", "dog"].iter().map(|s| s.to_string()).collect();
        let gts = ["cat", "dog", "cat", "dog", "cat"];
        let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1];
        let items: Vec<ClassificationItem> = gts
            .iter()
            .enumerate()
            .map(|(i, gt)| ClassificationItem {
                image_ref: format!("i{i}"),
                region: RegionSpec::new_box(1, [0.1, 0.1, 0.9, 0.9]).unwrap(),
                gt_class: gt.to_string(),
                candidate_set: set.clone(),
            })
            .collect();
        let m = eval_classification(
            &HandScores(scores.clone()),
            &items,
            ClassificationMode::OneTurnOne,
            true,
            5,
        )
        .unwrap();

        // Independent derivation: walk thresholds down the "cat" ranking
        // and integrate precision over recall steps.
        let mut ranked: Vec<(f64, bool)> = scores
            .iter()
            .zip(&gts)
            .map(|(&s, &gt)| (s, gt == "cat"))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let total_pos = ranked.iter().filter(|(_, p)| *p).count() as f64;
        let mut ap_cat = 0.0;
        let mut seen_pos = 0.0;
        for (k, (_, pos)) in ranked.iter().enumerate() {
            if *pos {
                let prev_recall = seen_pos / total_pos;
                seen_pos += 1.0;
                let recall = seen_pos / total_pos;
                let precision = seen_pos / (k + 1) as f64;
                ap_cat += precision * (recall - prev_recall);
            }
        }
        // "dog" mirrors the construction: its positives score -100 like
        // everything else, so ties keep input order; with all scores tied
        // the ranking is input order: dog at ranks 2 and 4.
        let ap_dog = (1.0 / 2.0 + 2.0 / 4.0) / 2.0;
        let expected = (ap_cat + ap_dog) / 2.0;
        assert!(
            (m.map.unwrap() - expected).abs() < 1e-12,
            "{} vs {expected}",
            m.map.unwrap()
        );
    }

    /// Answers referring queries from a fixed map of image -> index.
    struct RecOracle(HashMap<String, usize>);

    impl RegionAssistant for RecOracle {
        fn reply(&self, conv: &Conversation) -> Result<String> {
            match self.0.get(&conv.image_ref) {
                Some(k) => Ok(format!("Region [{k}].")),
                None => Ok(REC_NO_MATCH.to_string()),
            }
        }
        fn score_candidates(
            &self,
            _conv: &Conversation,
            candidates: &[String],
        ) -> Result<Vec<f64>> {
            Ok(vec![0.0; candidates.len()])
        }
    }

    fn rec_fixture() -> Vec<RecItem> {
        let mut items = vec![
            rec_item(vec![[0.0, 0.0, 0.3, 0.3], [0.5, 0.5, 0.9, 0.9]], [0.5, 0.5, 0.9, 0.9]),
            rec_item(vec![[0.1, 0.1, 0.4, 0.4]], [0.6, 0.6, 0.9, 0.9]),
        ];
        items[0].image_ref = "hit.png".into();
        items[1].image_ref = "miss.png".into();
        inject_gt_candidates(items).unwrap()
    }

    #[test]
    fn rec_oracle_and_refuser_bracket_accuracy() {
        let items = rec_fixture();
        // Ground truth sits at candidate 2 in both items (matching box in
        // the first, injected into the second).
        let oracle = RecOracle(HashMap::from([
            ("hit.png".to_string(), 2usize),
            ("miss.png".to_string(), 2usize),
        ]));
        let m = eval_rec(&oracle, &items, 5).unwrap();
        assert_eq!(m.accuracy, 1.0);

        let refuser = RecOracle(HashMap::new());
        let m = eval_rec(&refuser, &items, 5).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert!(m.per_item.iter().all(|o| o.answer.is_none()));
    }

    #[test]
    fn rec_rejects_items_that_skipped_injection() {
        let bare = vec![rec_item(vec![[0.1, 0.1, 0.4, 0.4]], [0.6, 0.6, 0.9, 0.9])];
        let oracle = RecOracle(HashMap::new());
        assert!(matches!(eval_rec(&oracle, &bare, 5), Err(Error::Eval(_))));
    }

    #[test]
    fn answered_pope_questions_carry_parsed_predictions() {
        let questions = vec![
            PopeQuestion {
                image_ref: "a.png".into(),
                question: "Is there a cat in the image?".into(),
                label: YesNo::Yes,
            },
            PopeQuestion {
                image_ref: "b.png".into(),
                question: "Is there a zeppelin in the image?".into(),
                label: YesNo::No,
            },
        ];
        let items = answer_pope_questions(&FixedReply("Yes, there is."), &questions).unwrap();
        assert!(items.iter().all(|i| i.prediction == YesNo::Yes));
        let m = eval_pope(&items).unwrap();
        assert_eq!(m.yes_ratio, 1.0);
        assert_eq!(m.accuracy, 0.5);

        assert_eq!(YesNo::from_reply("no."), YesNo::No);
        assert_eq!(YesNo::from_reply("Yes!"), YesNo::Yes);
        assert_eq!(YesNo::from_reply("maybe"), YesNo::No);
    }

    #[test]
    fn reports_serialize_with_stable_keys() {
        let (items, oracle) = classification_fixture();
        let m = eval_classification(&oracle, &items, ClassificationMode::OneTurnOne, true, 5)
            .unwrap();
        let a = m.report().unwrap().to_json_pretty().unwrap();
        let b = m.report().unwrap().to_json_pretty().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"protocol\": \"classification\""));
        assert!(a.contains("\"accuracy\""));
        let parsed: EvalReport = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed.metrics["map"], 1.0);
    }
}
