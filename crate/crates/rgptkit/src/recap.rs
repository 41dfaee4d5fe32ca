//! Two-stage region recaptioning: a global image caption conditions a
//! detailed per-region caption, followed by similarity filtering.
//!
//! Stage 1 asks a captioning backend to describe the whole image. Stage 2
//! crops each region (with a small context margin), splices the global
//! caption and optionally the region's class name into a prompt, and asks
//! the backend again. [`filter_by_similarity`] then drops captions that do
//! not match their region, and [`corpus_stats`] summarizes what is left.
//!
//! Every prompt draw runs on a sub-stream keyed by the image reference (and
//! the region's index within its image), so reruns and resumed runs
//! reproduce byte-identical records, and [`run_recap`] can parallelize over
//! records without losing determinism.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Image, ImageProvider};
use crate::datasets::AnnotationRecord;
use crate::error::{Error, Result};
use crate::region::{RegionShape, RegionSpec};
use crate::seed::sub_rng;

/// Hole in stage-2 prompts receiving the stage-1 caption.
pub const GLOBAL_HOLE: &str = "⟨GlobalCaption⟩";
/// Hole in class-conditioned stage-2 prompts receiving the class name.
pub const CLASS_HOLE: &str = "⟨ClassName⟩";
/// Fraction of the region's width and height added on each side before
/// cropping, so the backend sees a little context.
pub const CROP_MARGIN: f64 = 0.10;
/// Default similarity threshold for [`filter_by_similarity`].
pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// How often a failed caption request is retried and how long to back off.
/// The delay doubles after every attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            backoff: Duration::ZERO,
        }
    }
}

/// A service that captions an image under an instruction prompt.
pub trait CaptionerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, image: &Image, prompt: &str) -> Result<String>;
    fn retry(&self) -> RetryPolicy {
        RetryPolicy::none()
    }
}

/// Scores how well a record's region caption fits its region, in [-1, 1].
/// Must be a pure function of the record.
pub trait RegionTextScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, record: &RecapRecord) -> Result<f64>;
}

/// One recaptioned region, carrying everything needed to audit how it was
/// produced: both prompts and, after filtering, the similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecapRecord {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub region: RegionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub global_caption: String,
    pub region_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    pub stage_prompts: [String; 2],
}

/// A flat list of prompt variants for one stage.
#[derive(Debug, Clone)]
pub struct PromptPool {
    pub name: String,
    prompts: Vec<String>,
}

impl PromptPool {
    /// One prompt per non-empty line.
    pub fn from_lines(name: impl Into<String>, text: &str) -> Result<Self> {
        let name = name.into();
        let prompts: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if prompts.is_empty() {
            return Err(Error::Config(format!("prompt pool '{name}' is empty")));
        }
        Ok(PromptPool { name, prompts })
    }

    /// Ten variants of "describe the whole image".
    pub fn stage1() -> Self {
        Self::from_lines(
            "recap-stage1",
            include_str!("../fixtures/prompts/recap_stage1.txt"),
        )
        .expect("bundled pool is non-empty")
    }

    /// Ten class-conditioned region variants with global-caption and
    /// class-name holes.
    pub fn stage2_class() -> Self {
        Self::from_lines(
            "recap-stage2-class",
            include_str!("../fixtures/prompts/recap_stage2_class.txt"),
        )
        .expect("bundled pool is non-empty")
    }

    /// Ten class-free region variants with only the global-caption hole.
    pub fn stage2_plain() -> Self {
        Self::from_lines(
            "recap-stage2-plain",
            include_str!("../fixtures/prompts/recap_stage2_plain.txt"),
        )
        .expect("bundled pool is non-empty")
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.prompts.get(index).map(String::as_str)
    }

    /// Uniform draw.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (usize, &str) {
        let idx = rng.random_range(0..self.prompts.len());
        (idx, &self.prompts[idx])
    }
}

/// The three pools one recaptioning run draws from.
#[derive(Debug, Clone)]
pub struct RecapPools {
    pub stage1: PromptPool,
    pub stage2_class: PromptPool,
    pub stage2_plain: PromptPool,
}

impl RecapPools {
    pub fn builtin() -> Self {
        RecapPools {
            stage1: PromptPool::stage1(),
            stage2_class: PromptPool::stage2_class(),
            stage2_plain: PromptPool::stage2_plain(),
        }
    }
}

/// The prompt sent and the caption it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub prompt: String,
    pub caption: String,
}

fn generate_with_retries(
    backend: &dyn CaptionerBackend,
    image: &Image,
    prompt: &str,
) -> Result<String> {
    let policy = backend.retry();
    let mut delay = policy.backoff;
    let mut last = String::new();
    for attempt in 0..=policy.max_retries {
        if attempt > 0 && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match backend.generate(image, prompt) {
            Ok(text) => {
                let text = text.trim();
                if text.is_empty() {
                    return Err(Error::Backend {
                        name: backend.name().to_string(),
                        message: "empty caption".into(),
                    });
                }
                return Ok(text.to_string());
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Backend {
        name: backend.name().to_string(),
        message: format!(
            "{} attempts failed, last error: {last}",
            policy.max_retries + 1
        ),
    })
}

/// Stage 1: caption the whole image under a prompt drawn uniformly from the
/// pool. The caption comes back whitespace-trimmed and non-empty.
pub fn stage1_global<R: Rng>(
    image: &Image,
    backend: &dyn CaptionerBackend,
    pool: &PromptPool,
    rng: &mut R,
) -> Result<StageOutput> {
    let (_, prompt) = pool.draw(rng);
    let caption = generate_with_retries(backend, image, prompt)?;
    Ok(StageOutput {
        prompt: prompt.to_string(),
        caption,
    })
}

/// Stage 2: caption one region. The prompt is a pool variant with the
/// global caption (and, for class-conditioned pools, the class name)
/// spliced in; the backend sees the region's crop plus a 10% margin.
pub fn stage2_region<R: Rng>(
    image: &Image,
    region: &RegionSpec,
    class_name: Option<&str>,
    global_caption: &str,
    backend: &dyn CaptionerBackend,
    pool: &PromptPool,
    rng: &mut R,
) -> Result<StageOutput> {
    region.validate()?;
    let (_, template) = pool.draw(rng);
    let mut prompt = template.to_string();
    if template.contains(CLASS_HOLE) {
        let class = class_name.map(str::trim).filter(|c| !c.is_empty()).ok_or_else(|| {
            Error::Config(format!(
                "pool '{}' is class-conditioned but no class name was given",
                pool.name
            ))
        })?;
        prompt = prompt.replace(CLASS_HOLE, class);
    }
    prompt = prompt.replace(GLOBAL_HOLE, global_caption.trim());
    for hole in [GLOBAL_HOLE, CLASS_HOLE] {
        if prompt.contains(hole) {
            return Err(Error::Config(format!(
                "pool '{}' left an unfilled {hole} hole",
                pool.name
            )));
        }
    }
    let crop = crop_with_margin(image, region, CROP_MARGIN)?;
    let caption = generate_with_retries(backend, &crop, &prompt)?;
    Ok(StageOutput { prompt, caption })
}

/// Crops the region's bounding rectangle dilated by `margin` of its width
/// and height on every side, clamped to the image.
pub fn crop_with_margin(image: &Image, region: &RegionSpec, margin: f64) -> Result<Image> {
    let side = match &region.shape {
        // Run lengths are defined against a square grid; recover its side.
        RegionShape::Rle(counts) => {
            let total: u64 = counts.iter().sum();
            (total as f64).sqrt().round() as usize
        }
        _ => 1,
    };
    let bb = region.bounding_box(side.max(1))?;
    if !(bb[2] > bb[0]) || !(bb[3] > bb[1]) {
        return Err(Error::EmptyImage(format!(
            "region {} has no area to crop",
            region.id
        )));
    }
    let (bw, bh) = (bb[2] - bb[0], bb[3] - bb[1]);
    let x0 = (bb[0] - margin * bw).max(0.0);
    let y0 = (bb[1] - margin * bh).max(0.0);
    let x1 = (bb[2] + margin * bw).min(1.0);
    let y1 = (bb[3] + margin * bh).min(1.0);
    let (w, h) = (image.width() as f64, image.height() as f64);
    image.crop(
        (y0 * h).floor() as usize,
        (y1 * h).ceil() as usize,
        (x0 * w).floor() as usize,
        (x1 * w).ceil() as usize,
    )
}

/// Scores every record, then returns the records whose score clears the
/// threshold. All records in the slice get their `similarity` field set so
/// dropped ones can be audited.
pub fn filter_by_similarity(
    records: &mut [RecapRecord],
    scorer: &dyn RegionTextScorer,
    threshold: f64,
) -> Result<Vec<RecapRecord>> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "similarity threshold must lie in [-1, 1], got {threshold}"
        )));
    }
    for rec in records.iter_mut() {
        let s = scorer.score(rec)?;
        if !(-1.0..=1.0).contains(&s) {
            return Err(Error::Eval(format!(
                "scorer '{}' returned {s}, outside [-1, 1]",
                scorer.name()
            )));
        }
        rec.similarity = Some(s);
    }
    Ok(records
        .iter()
        .filter(|r| r.similarity.unwrap_or(f64::NEG_INFINITY) >= threshold)
        .cloned()
        .collect())
}

/// Corpus summary: distinct images, total regions, and the mean
/// whitespace-token count of the region captions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub regions: usize,
    pub avg_words: f64,
}

pub fn corpus_stats(records: &[RecapRecord]) -> CorpusStats {
    let images = records
        .iter()
        .map(|r| r.image_ref.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let total_words: usize = records
        .iter()
        .map(|r| r.region_caption.split_whitespace().count())
        .sum();
    let avg_words = if records.is_empty() {
        0.0
    } else {
        total_words as f64 / records.len() as f64
    };
    CorpusStats {
        images,
        regions: records.len(),
        avg_words,
    }
}

/// Random stream for an image's stage-1 prompt draw.
pub fn stage1_stream(seed: u64, image_ref: &str) -> ChaCha8Rng {
    sub_rng(seed, &["recap-stage1", image_ref])
}

/// Random stream for one region's stage-2 prompt draw. `index` is the
/// region's position among its image's records.
pub fn stage2_stream(seed: u64, image_ref: &str, index: usize) -> ChaCha8Rng {
    sub_rng(seed, &["recap-stage2", image_ref, &index.to_string()])
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    key: String,
    record: RecapRecord,
}

fn journal_key(backend: &str, seed: u64, image_ref: &str, index: usize) -> String {
    format!("{backend}\u{1f}{seed}\u{1f}{image_ref}\u{1f}{index}")
}

fn load_journal(path: &Path) -> Result<HashMap<String, RecapRecord>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(entry) => {
                done.insert(entry.key, entry.record);
            }
            // A torn final line means the previous run died mid-write;
            // drop it so the record is redone.
            Err(e) if i + 1 == lines.len() => {
                log::warn!("journal {}: dropping torn final line: {e}", path.display());
            }
            Err(e) => {
                return Err(Error::Data(format!(
                    "journal {} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(done)
}

/// Runs both stages over every record, parallelized across `workers`
/// threads. Output order matches input order and content depends only on
/// (records, seed, backend), never on scheduling.
///
/// With a journal path, each finished record is appended to the journal
/// immediately, and records already present are not regenerated, so an
/// interrupted run resumes where it stopped.
pub fn run_recap(
    records: &[AnnotationRecord],
    images: &dyn ImageProvider,
    backend: &dyn CaptionerBackend,
    pools: &RecapPools,
    seed: u64,
    workers: usize,
    journal_path: Option<&Path>,
) -> Result<Vec<RecapRecord>> {
    for rec in records {
        rec.validate()?;
    }
    // Index of each record within its image, in input order; the pair
    // (image_ref, index) names the record's random stream and journal key.
    let mut per_image: HashMap<&str, usize> = HashMap::new();
    let index_within: Vec<usize> = records
        .iter()
        .map(|r| {
            let c = per_image.entry(r.image_ref.as_str()).or_insert(0);
            let i = *c;
            *c += 1;
            i
        })
        .collect();
    let keys: Vec<String> = records
        .iter()
        .zip(&index_within)
        .map(|(r, &i)| journal_key(backend.name(), seed, &r.image_ref, i))
        .collect();

    let done = match journal_path {
        Some(p) => load_journal(p)?,
        None => HashMap::new(),
    };
    let journal = match journal_path {
        Some(p) => Some(Mutex::new(std::io::BufWriter::new(
            std::fs::OpenOptions::new().create(true).append(true).open(p)?,
        ))),
        None => None,
    };

    let pending: Vec<usize> = (0..records.len())
        .filter(|&i| !done.contains_key(&keys[i]))
        .collect();
    let workers = workers.max(1);

    // Stage 1 runs once per image that still has pending regions; the
    // loaded image is kept for the stage-2 crops.
    let mut image_order: Vec<&str> = Vec::new();
    for &i in &pending {
        let r = records[i].image_ref.as_str();
        if !image_order.contains(&r) {
            image_order.push(r);
        }
    }
    let globals: Mutex<HashMap<&str, (Image, StageOutput)>> = Mutex::new(HashMap::new());
    run_indexed(workers.min(image_order.len().max(1)), image_order.len(), |j| {
        let image_ref = image_order[j];
        let image = images.load_image(image_ref)?;
        let out = stage1_global(
            &image,
            backend,
            &pools.stage1,
            &mut stage1_stream(seed, image_ref),
        )?;
        globals.lock().unwrap().insert(image_ref, (image, out));
        Ok(())
    })?;
    let globals = globals.into_inner().unwrap();

    let fresh: Mutex<HashMap<usize, RecapRecord>> = Mutex::new(HashMap::new());
    run_indexed(workers.min(pending.len().max(1)), pending.len(), |j| {
        let i = pending[j];
        let rec = &records[i];
        let (image, global) = &globals[rec.image_ref.as_str()];
        let class = rec.class_name.as_deref().map(str::trim).filter(|c| !c.is_empty());
        let pool = if class.is_some() {
            &pools.stage2_class
        } else {
            &pools.stage2_plain
        };
        let out = stage2_region(
            image,
            &rec.region,
            class,
            &global.caption,
            backend,
            pool,
            &mut stage2_stream(seed, &rec.image_ref, index_within[i]),
        )?;
        let record = RecapRecord {
            image_ref: rec.image_ref.clone(),
            region: rec.region.clone(),
            class_name: class.map(String::from),
            global_caption: global.caption.clone(),
            region_caption: out.caption,
            similarity: None,
            stage_prompts: [global.prompt.clone(), out.prompt],
        };
        if let Some(journal) = &journal {
            let line = serde_json::to_string(&JournalEntry {
                key: keys[i].clone(),
                record: record.clone(),
            })?;
            let mut w = journal.lock().unwrap();
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        fresh.lock().unwrap().insert(i, record);
        Ok(())
    })?;
    let mut fresh = fresh.into_inner().unwrap();

    let mut out = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        match fresh.remove(&i) {
            Some(r) => out.push(r),
            None => out.push(done[&keys[i]].clone()),
        }
    }
    Ok(out)
}

/// Runs `work(0..n)` across a fixed number of threads, handing out indices
/// through a shared counter. The first error wins; all threads still join.
fn run_indexed<F>(workers: usize, n: usize, work: F) -> Result<()>
where
    F: Fn(usize) -> Result<()> + Sync,
{
    if n == 0 {
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n) {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                if let Err(e) = work(i) {
                    let mut slot = failure.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some(e);
                    }
                    break;
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Parses recaption records from JSON-lines text.
pub fn read_recap_jsonl(text: &str) -> Result<Vec<RecapRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: RecapRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("recaption line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Serializes recaption records as JSON-lines text.
pub fn write_recap_jsonl(records: &[RecapRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Offline captioner: emits a deterministic caption built from the prompt's
/// content words plus seeded filler adjectives. Pure in (seed, image,
/// prompt), so reruns reproduce every caption exactly.
pub struct MockBackend {
    seed: u64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend { seed }
    }
}

const MOCK_STOPWORDS: &[&str] = &[
    "a", "an", "the", "in", "of", "on", "this", "that", "is", "are", "be", "to", "and", "with",
    "what", "which", "every", "describe", "description", "detailed", "detail", "provide", "give",
    "write", "offer", "share", "explain", "please", "account", "image", "picture", "photo",
    "region", "close", "up", "crop", "cropped", "view", "shown", "shows", "visible",
];

const MOCK_FILLERS: &[&str] = &[
    "weathered", "glossy", "angular", "faded", "compact", "oversized", "striped", "translucent",
    "matte", "crooked", "pristine", "cluttered", "dim", "vivid", "rounded", "boxy",
];

fn image_fingerprint(image: &Image) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut absorb = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    absorb(image.height() as u64);
    absorb(image.width() as u64);
    let flat = image.pixels.as_slice().expect("pixel array is contiguous");
    let step = (flat.len() / 64).max(1);
    for v in flat.iter().step_by(step) {
        absorb(v.to_bits());
    }
    h
}

impl CaptionerBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate(&self, image: &Image, prompt: &str) -> Result<String> {
        let fp = image_fingerprint(image).to_string();
        let mut rng = sub_rng(self.seed, &["mock-caption", &fp, prompt]);
        let mut words: Vec<String> = Vec::new();
        for w in prompt.split(|c: char| !c.is_alphanumeric()) {
            let w = w.to_lowercase();
            if w.is_empty() || MOCK_STOPWORDS.contains(&w.as_str()) || words.contains(&w) {
                continue;
            }
            // Drop some content words so downstream similarity scores vary.
            if rng.random::<f64>() < 0.8 {
                words.push(w);
            }
        }
        for _ in 0..2 + rng.random_range(0..4usize) {
            words.push(MOCK_FILLERS[rng.random_range(0..MOCK_FILLERS.len())].to_string());
        }
        if words.is_empty() {
            words.push("surface".to_string());
        }
        Ok(format!("a scene with {}", words.join(" ")))
    }
}

/// Overlap-based stand-in for a learned region-text similarity: the overlap
/// coefficient between the caption's word set and the class name's word set
/// (or the global caption's words when the record has no class).
pub struct WordOverlapScorer;

fn word_set(s: &str) -> std::collections::BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl RegionTextScorer for WordOverlapScorer {
    fn name(&self) -> &str {
        "word-overlap"
    }

    fn score(&self, record: &RecapRecord) -> Result<f64> {
        let caption = word_set(&record.region_caption);
        let reference = match record.class_name.as_deref().filter(|c| !c.trim().is_empty()) {
            Some(class) => word_set(class),
            None => word_set(&record.global_caption),
        };
        if caption.is_empty() || reference.is_empty() {
            return Ok(0.0);
        }
        let inter = caption.intersection(&reference).count();
        Ok(inter as f64 / caption.len().min(reference.len()) as f64)
    }
}

/// Captioner speaking to an HTTP service: POST `{url}/generate` with JSON
/// `{"image": <base64 PNG>, "prompt": <string>}`, expecting `{"text": ...}`.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            url: "http://127.0.0.1:8090".into(),
            timeout_ms: 30_000,
            retries: 2,
            backoff_ms: 250,
        }
    }
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        RemoteBackend { cfg, agent }
    }

    fn fail(&self, message: String) -> Error {
        Error::Backend {
            name: self.name().to_string(),
            message,
        }
    }
}

impl CaptionerBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.cfg.retries,
            backoff: Duration::from_millis(self.cfg.backoff_ms),
        }
    }

    fn generate(&self, image: &Image, prompt: &str) -> Result<String> {
        let png = image.to_png_bytes()?;
        let body = serde_json::json!({
            "image": base64::engine::general_purpose::STANDARD.encode(&png),
            "prompt": prompt,
        })
        .to_string();
        let url = format!("{}/generate", self.cfg.url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| self.fail(format!("POST {url}: {e}")))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| self.fail(format!("reading response: {e}")))?;
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let reply: Reply = serde_json::from_str(&text)
            .map_err(|e| self.fail(format!("response is not {{\"text\": ...}}: {e}")))?;
        Ok(reply.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SyntheticImages;
    use ndarray::Array3;
    use std::collections::BTreeSet;
    use std::io::Read as _;
    use std::sync::atomic::AtomicU32;

    fn flat_image(id: &str, h: usize, w: usize, level: f64) -> Image {
        Image::new(id, Array3::from_elem((h, w, 3), level)).unwrap()
    }

    struct FixedBackend(&'static str);

    impl CaptionerBackend for FixedBackend {
        fn name(&self) -> &str {
            "fixed"
        }
        fn generate(&self, _image: &Image, _prompt: &str) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    struct FlakyBackend {
        fail_first: u32,
        calls: AtomicU32,
    }

    impl CaptionerBackend for FlakyBackend {
        fn name(&self) -> &str {
            "flaky"
        }
        fn generate(&self, _image: &Image, _prompt: &str) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(Error::Data("transient".into()))
            } else {
                Ok("recovered".into())
            }
        }
        fn retry(&self) -> RetryPolicy {
            RetryPolicy {
                max_retries: 3,
                backoff: Duration::ZERO,
            }
        }
    }

    #[test]
    fn mock_backend_is_deterministic_under_seed() {
        let image = flat_image("x", 32, 40, 0.3);
        let a = MockBackend::new(7).generate(&image, "Describe the image in detail.").unwrap();
        let b = MockBackend::new(7).generate(&image, "Describe the image in detail.").unwrap();
        assert_eq!(a, b);
        let c = MockBackend::new(8).generate(&image, "Describe the image in detail.").unwrap();
        assert_ne!(a, c, "the seed must matter");
        let other = flat_image("x", 32, 40, 0.9);
        let d = MockBackend::new(7).generate(&other, "Describe the image in detail.").unwrap();
        assert_ne!(a, d, "the pixels must matter");
    }

    #[test]
    fn stage1_trims_whitespace_and_rejects_empty() {
        let image = flat_image("x", 16, 16, 0.5);
        let pool = PromptPool::stage1();
        let out = stage1_global(
            &image,
            &FixedBackend("  a desk with devices \n"),
            &pool,
            &mut sub_rng(1, &["t"]),
        )
        .unwrap();
        assert_eq!(out.caption, "a desk with devices");
        assert!(pool.get(0).is_some_and(|p| !p.is_empty()));

        let err = stage1_global(&image, &FixedBackend("   "), &pool, &mut sub_rng(1, &["t"]));
        match err {
            Err(Error::Backend { name, message }) => {
                assert_eq!(name, "fixed");
                assert!(message.contains("empty caption"));
            }
            other => panic!("expected a backend error, got {other:?}"),
        }
    }

    #[test]
    fn thousand_draws_visit_every_stage1_prompt() {
        let pool = PromptPool::stage1();
        assert_eq!(pool.len(), 10);
        let mut rng = sub_rng(11, &["draws"]);
        let seen: BTreeSet<usize> = (0..1000).map(|_| pool.draw(&mut rng).0).collect();
        assert_eq!(seen.len(), 10, "uniform draws must visit all ten prompts");
    }

    #[test]
    fn retries_recover_and_exhaustion_names_the_backend() {
        let image = flat_image("x", 16, 16, 0.5);
        let flaky = FlakyBackend {
            fail_first: 2,
            calls: AtomicU32::new(0),
        };
        assert_eq!(generate_with_retries(&flaky, &image, "p").unwrap(), "recovered");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);

        let dead = FlakyBackend {
            fail_first: u32::MAX,
            calls: AtomicU32::new(0),
        };
        match generate_with_retries(&dead, &image, "p") {
            Err(Error::Backend { name, message }) => {
                assert_eq!(name, "flaky");
                assert!(message.contains("4 attempts"));
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
        assert_eq!(dead.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn class_conditioned_prompt_carries_global_and_class() {
        let image = flat_image("desk", 60, 80, 0.4);
        let region = RegionSpec::new_box(1, [0.2, 0.2, 0.8, 0.8]).unwrap();
        let out = stage2_region(
            &image,
            &region,
            Some("laptop"),
            "a desk with devices",
            &FixedBackend("a thin laptop"),
            &PromptPool::stage2_class(),
            &mut sub_rng(3, &["t"]),
        )
        .unwrap();
        assert!(out.prompt.contains("a desk with devices"));
        assert!(out.prompt.contains("laptop"));
        assert!(!out.prompt.contains(GLOBAL_HOLE));
        assert!(!out.prompt.contains(CLASS_HOLE));
    }

    #[test]
    fn class_free_pool_needs_no_class_and_class_pool_demands_one() {
        let image = flat_image("desk", 60, 80, 0.4);
        let region = RegionSpec::new_box(1, [0.2, 0.2, 0.8, 0.8]).unwrap();
        let plain = PromptPool::stage2_plain();
        assert!(plain
            .get(0)
            .unwrap()
            .contains("describe the close-up region in detail"));
        let out = stage2_region(
            &image,
            &region,
            None,
            "a desk with devices",
            &FixedBackend("something"),
            &plain,
            &mut sub_rng(4, &["t"]),
        )
        .unwrap();
        assert!(out.prompt.contains("a desk with devices"));

        let err = stage2_region(
            &image,
            &region,
            None,
            "a desk with devices",
            &FixedBackend("something"),
            &PromptPool::stage2_class(),
            &mut sub_rng(4, &["t"]),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_area_region_cannot_be_cropped() {
        let image = flat_image("x", 50, 50, 0.5);
        let point = RegionSpec::new_polygon(1, vec![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(matches!(
            crop_with_margin(&image, &point, CROP_MARGIN),
            Err(Error::EmptyImage(_))
        ));
    }

    #[test]
    fn crop_margin_widens_the_box_and_clamps_at_edges() {
        // Quarter margins on power-of-two boxes keep every product exact,
        // so the pixel counts below are not at the mercy of ceil().
        let image = flat_image("x", 128, 64, 0.5);
        let region = RegionSpec::new_box(1, [0.25, 0.25, 0.75, 0.75]).unwrap();
        let crop = crop_with_margin(&image, &region, 0.25).unwrap();
        // Width 0.5 dilated by 0.125 per side: 0.125..0.875 of each axis.
        assert_eq!((crop.width(), crop.height()), (48, 96));

        let corner = RegionSpec::new_box(1, [0.0, 0.0, 0.5, 0.5]).unwrap();
        let crop = crop_with_margin(&image, &corner, 0.25).unwrap();
        // The left and top margins clamp at the image edge.
        assert_eq!((crop.width(), crop.height()), (40, 80));
    }

    fn hand_record(caption: &str, class: Option<&str>, global: &str) -> RecapRecord {
        RecapRecord {
            image_ref: "img".into(),
            region: RegionSpec::new_box(1, [0.1, 0.1, 0.9, 0.9]).unwrap(),
            class_name: class.map(String::from),
            global_caption: global.into(),
            region_caption: caption.into(),
            similarity: None,
            stage_prompts: ["p1".into(), "p2".into()],
        }
    }

    #[test]
    fn overlap_scores_match_hand_computation() {
        let scorer = WordOverlapScorer;
        let disjoint = hand_record("red apple on table", Some("bicycle"), "");
        assert_eq!(scorer.score(&disjoint).unwrap(), 0.0);
        let exact = hand_record("a striped cat sleeping", Some("cat"), "");
        assert_eq!(scorer.score(&exact).unwrap(), 1.0);
        // Intersection {coffee}; smaller set {coffee, cup} has two words.
        let partial = hand_record("coffee mug empty", Some("coffee cup"), "");
        assert_eq!(scorer.score(&partial).unwrap(), 0.5);
        // Intersection {street}; the global caption's three words are the
        // smaller set.
        let classless = hand_record("a wide street scene", None, "street with cars");
        assert_eq!(scorer.score(&classless).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn threshold_minus_one_keeps_all_and_scores_everything() {
        let mut records = vec![
            hand_record("red apple on table", Some("bicycle"), ""),
            hand_record("a striped cat", Some("cat"), ""),
        ];
        let kept = filter_by_similarity(&mut records, &WordOverlapScorer, -1.0).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(records.iter().all(|r| r.similarity.is_some()));
    }

    #[test]
    fn disjoint_captions_drop_at_default_threshold() {
        let mut records = vec![
            hand_record("red apple on table", Some("bicycle"), ""),
            hand_record("a striped cat", Some("cat"), ""),
        ];
        let kept = filter_by_similarity(&mut records, &WordOverlapScorer, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].class_name.as_deref(), Some("cat"));
        assert_eq!(records[0].similarity, Some(0.0));
    }

    #[test]
    fn out_of_range_threshold_is_rejected() {
        let mut records = vec![hand_record("a", Some("a"), "")];
        assert!(matches!(
            filter_by_similarity(&mut records, &WordOverlapScorer, 1.5),
            Err(Error::Config(_))
        ));
        assert!(filter_by_similarity(&mut [], &WordOverlapScorer, 0.0)
            .unwrap()
            .is_empty());
    }

    fn small_corpus() -> Vec<AnnotationRecord> {
        let mut out = Vec::new();
        for (image, class) in [("a.png", "laptop"), ("a.png", "mug"), ("b.png", "monitor")] {
            out.push(AnnotationRecord {
                image_ref: image.into(),
                region: RegionSpec::new_box(1, [0.2, 0.25, 0.7, 0.75]).unwrap(),
                class_name: Some(class.into()),
                caption: None,
                description: None,
            });
        }
        out.push(AnnotationRecord {
            image_ref: "b.png".into(),
            region: RegionSpec::new_box(2, [0.1, 0.1, 0.4, 0.5]).unwrap(),
            class_name: None,
            caption: None,
            description: Some("no class here".into()),
        });
        out
    }

    #[test]
    fn recap_run_is_deterministic_and_order_preserving() {
        let records = small_corpus();
        let provider = SyntheticImages::new(5);
        let backend = MockBackend::new(5);
        let pools = RecapPools::builtin();
        let a = run_recap(&records, &provider, &backend, &pools, 21, 3, None).unwrap();
        let b = run_recap(&records, &provider, &backend, &pools, 21, 1, None).unwrap();
        assert_eq!(a, b, "worker count must not change the output");
        assert_eq!(a.len(), records.len());
        for (rec, src) in a.iter().zip(&records) {
            assert_eq!(rec.image_ref, src.image_ref);
            assert!(!rec.region_caption.is_empty());
            assert!(!rec.global_caption.is_empty());
        }
        // Records of the same image share one global caption.
        assert_eq!(a[0].global_caption, a[1].global_caption);
        assert_eq!(a[0].stage_prompts[0], a[1].stage_prompts[0]);
        // Class-conditioned records carry the class inside the prompt.
        assert!(a[0].stage_prompts[1].contains("laptop"));
        assert!(!a[3].stage_prompts[1].contains(CLASS_HOLE));

        let c = run_recap(&records, &provider, &backend, &pools, 22, 3, None).unwrap();
        assert_ne!(a, c, "the seed must matter");
    }

    #[test]
    fn recorded_prompts_reproduce_from_their_streams() {
        let records = small_corpus();
        let provider = SyntheticImages::new(5);
        let backend = MockBackend::new(5);
        let pools = RecapPools::builtin();
        let out = run_recap(&records, &provider, &backend, &pools, 33, 2, None).unwrap();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for rec in &out {
            let idx = {
                let c = seen.entry(rec.image_ref.as_str()).or_insert(0);
                let i = *c;
                *c += 1;
                i
            };
            let (_, p1) = pools.stage1.draw(&mut stage1_stream(33, &rec.image_ref));
            assert_eq!(rec.stage_prompts[0], p1);
            let pool = if rec.class_name.is_some() {
                &pools.stage2_class
            } else {
                &pools.stage2_plain
            };
            let (_, template) = pool.draw(&mut stage2_stream(33, &rec.image_ref, idx));
            let mut expect = template.to_string();
            if let Some(class) = &rec.class_name {
                expect = expect.replace(CLASS_HOLE, class);
            }
            expect = expect.replace(GLOBAL_HOLE, &rec.global_caption);
            assert_eq!(rec.stage_prompts[1], expect);
        }
    }

    struct CountingBackend {
        inner: MockBackend,
        calls: AtomicU32,
    }

    impl CaptionerBackend for CountingBackend {
        fn name(&self) -> &str {
            self.inner.name()
        }
        fn generate(&self, image: &Image, prompt: &str) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.generate(image, prompt)
        }
    }

    #[test]
    fn journal_resume_skips_finished_records() {
        let records = small_corpus();
        let provider = SyntheticImages::new(5);
        let pools = RecapPools::builtin();
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("journal.jsonl");

        let backend = CountingBackend {
            inner: MockBackend::new(5),
            calls: AtomicU32::new(0),
        };
        let first =
            run_recap(&records[..2], &provider, &backend, &pools, 9, 2, Some(&journal)).unwrap();
        // One stage-1 call for image a plus one stage-2 call per record.
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);

        let resumed =
            run_recap(&records, &provider, &backend, &pools, 9, 2, Some(&journal)).unwrap();
        // Only image b's stage 1 and its two regions run now.
        assert_eq!(backend.calls.load(Ordering::SeqCst), 6);
        assert_eq!(resumed.len(), records.len());
        assert_eq!(&resumed[..2], &first[..]);

        let from_scratch = run_recap(&records, &provider, &backend, &pools, 9, 2, None).unwrap();
        assert_eq!(resumed, from_scratch, "resume must not change the output");
    }

    #[test]
    fn torn_journal_line_is_redone_not_fatal() {
        let records = small_corpus();
        let provider = SyntheticImages::new(5);
        let backend = MockBackend::new(5);
        let pools = RecapPools::builtin();
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("journal.jsonl");
        run_recap(&records, &provider, &backend, &pools, 9, 1, Some(&journal)).unwrap();
        let text = std::fs::read_to_string(&journal).unwrap();
        let cut = text.len() - 20;
        std::fs::write(&journal, &text[..cut]).unwrap();
        let out = run_recap(&records, &provider, &backend, &pools, 9, 1, Some(&journal)).unwrap();
        let clean = run_recap(&records, &provider, &backend, &pools, 9, 1, None).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn filtering_is_monotone_and_idempotent_on_a_real_run() {
        let records = small_corpus();
        let provider = SyntheticImages::new(5);
        let backend = MockBackend::new(5);
        let pools = RecapPools::builtin();
        let generated = run_recap(&records, &provider, &backend, &pools, 21, 2, None).unwrap();
        let mut prev: Option<Vec<RecapRecord>> = None;
        for threshold in [-1.0, 0.0, 0.2, 0.5, 0.9, 1.0] {
            let mut working = generated.clone();
            let kept = filter_by_similarity(&mut working, &WordOverlapScorer, threshold).unwrap();
            if let Some(prev) = &prev {
                assert!(
                    kept.iter().all(|r| prev.contains(r) || prev.iter().any(
                        |p| p.image_ref == r.image_ref && p.region == r.region
                    )),
                    "raising the threshold must only shrink the kept set"
                );
                assert!(kept.len() <= prev.len());
            }
            let mut again = kept.clone();
            let rekept =
                filter_by_similarity(&mut again, &WordOverlapScorer, threshold).unwrap();
            assert_eq!(rekept, kept, "refiltering filtered output must be a no-op");
            prev = Some(kept);
        }
    }

    #[test]
    fn corpus_stats_match_hand_means() {
        let mut one = hand_record("a b c", None, "g");
        one.image_ref = "i1".into();
        let stats = corpus_stats(&[one.clone()]);
        assert_eq!((stats.images, stats.regions), (1, 1));
        assert_eq!(stats.avg_words, 3.0);

        let mut two = hand_record("x y", None, "g");
        two.image_ref = "i2".into();
        let mut four = hand_record("p q r s", None, "g");
        four.image_ref = "i1".into();
        let stats = corpus_stats(&[two, four]);
        assert_eq!((stats.images, stats.regions), (2, 2));
        assert_eq!(stats.avg_words, 3.0);

        let empty = corpus_stats(&[]);
        assert_eq!((empty.images, empty.regions), (0, 0));
        assert_eq!(empty.avg_words, 0.0);
    }

    #[test]
    fn recap_jsonl_round_trips() {
        let mut rec = hand_record("a tidy desk", Some("desk"), "an office");
        rec.similarity = Some(0.5);
        let text = write_recap_jsonl(&[rec.clone()]).unwrap();
        let back = read_recap_jsonl(&text).unwrap();
        assert_eq!(back, vec![rec]);
        assert!(read_recap_jsonl("not json\n").is_err());
    }

    /// Minimal one-request HTTP server; answers every request with `reply`.
    fn spawn_server(reply: &'static str, requests: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for _ in 0..requests {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let header_end = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break pos + 4;
                    }
                };
                let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
                let length: usize = headers
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse().unwrap())
                    .unwrap_or(0);
                while buf.len() < header_end + length {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                }
                bodies.push(String::from_utf8_lossy(&buf[header_end..]).to_string());
                let resp = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    reply.len(),
                    reply
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn remote_backend_speaks_the_wire_protocol() {
        let (url, server) = spawn_server(r#"{"text": "a caption from afar"}"#, 1);
        let backend = RemoteBackend::new(RemoteConfig {
            url,
            timeout_ms: 5_000,
            retries: 0,
            backoff_ms: 0,
        });
        let image = flat_image("x", 8, 8, 0.5);
        let caption = backend.generate(&image, "describe this").unwrap();
        assert_eq!(caption, "a caption from afar");
        let bodies = server.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["prompt"], "describe this");
        let png = base64::engine::general_purpose::STANDARD
            .decode(body["image"].as_str().unwrap())
            .unwrap();
        let decoded = Image::from_png_bytes("x", &png).unwrap();
        assert_eq!((decoded.height(), decoded.width()), (8, 8));
    }

    #[test]
    fn malformed_remote_reply_is_a_backend_error() {
        let (url, server) = spawn_server(r#"{"caption": "wrong key"}"#, 1);
        let backend = RemoteBackend::new(RemoteConfig {
            url,
            timeout_ms: 5_000,
            retries: 0,
            backoff_ms: 0,
        });
        let image = flat_image("x", 8, 8, 0.5);
        match backend.generate(&image, "p") {
            Err(Error::Backend { name, .. }) => assert_eq!(name, "remote"),
            other => panic!("expected a backend error, got {other:?}"),
        }
        server.join().unwrap();
    }
}
