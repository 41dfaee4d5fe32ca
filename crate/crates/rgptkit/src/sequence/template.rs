//! Instruction template pools and prompt construction.
//!
//! Five task pools ship as fixture files, one template per line. Templates
//! carry two kinds of holes: `⟨region⟩` (replaced by one or more indexed
//! placeholders such as `⟨region1⟩`) and `⟨description⟩` (replaced by a
//! referring expression). A template with a single region hole receives the
//! whole region list; a template with several consumes one region per hole
//! in order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REGION_HOLE: &str = "⟨region⟩";
pub const DESCRIPTION_HOLE: &str = "⟨description⟩";

/// Guidance sentence constraining classification answers to the closed
/// COCO-80 label set.
pub const COCO_GUIDANCE: &str = "Answer the question using COCO-80 category names.";
/// Guidance sentence constraining referring-comprehension answers to the
/// "Region [x]" format.
pub const REC_GUIDANCE: &str = "Answer the question using the template Region [x].";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BriefCaption,
    DetailedCaption,
    Relation,
    Classification,
    Rec,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "brief_caption" => Some(TaskKind::BriefCaption),
            "detailed_caption" => Some(TaskKind::DetailedCaption),
            "relation" => Some(TaskKind::Relation),
            "classification" => Some(TaskKind::Classification),
            "rec" => Some(TaskKind::Rec),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::BriefCaption => "brief_caption",
            TaskKind::DetailedCaption => "detailed_caption",
            TaskKind::Relation => "relation",
            TaskKind::Classification => "classification",
            TaskKind::Rec => "rec",
        }
    }
}

/// A non-empty list of instruction templates for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePool {
    pub task: TaskKind,
    templates: Vec<String>,
}

impl TemplatePool {
    pub fn from_lines(task: TaskKind, text: &str) -> Result<Self> {
        let templates: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if templates.is_empty() {
            return Err(Error::Sequence(format!(
                "template pool for {} is empty",
                task.name()
            )));
        }
        Ok(TemplatePool { task, templates })
    }

    /// The pool shipped with the crate for `task`.
    pub fn builtin(task: TaskKind) -> Self {
        let text = match task {
            TaskKind::BriefCaption => include_str!("../../fixtures/prompts/brief_caption.txt"),
            TaskKind::DetailedCaption => {
                include_str!("../../fixtures/prompts/detailed_caption.txt")
            }
            TaskKind::Relation => include_str!("../../fixtures/prompts/relation.txt"),
            TaskKind::Classification => include_str!("../../fixtures/prompts/classification.txt"),
            TaskKind::Rec => include_str!("../../fixtures/prompts/rec.txt"),
        };
        Self::from_lines(task, text).expect("shipped pools are non-empty")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&str> {
        self.templates
            .get(index)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Sequence(format!(
                    "template index {index} out of range for pool of {}",
                    self.templates.len()
                ))
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(String::as_str)
    }

    /// Uniform draw; the index consumed from `rng` fully determines the
    /// template.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> (usize, &str) {
        let idx = rng.random_range(0..self.templates.len());
        (idx, self.templates[idx].as_str())
    }

    /// Uniform draw over templates satisfying `pred`.
    pub fn draw_where<R: Rng>(
        &self,
        rng: &mut R,
        pred: impl Fn(&str) -> bool,
    ) -> Result<(usize, &str)> {
        let matching: Vec<usize> = (0..self.templates.len())
            .filter(|&i| pred(&self.templates[i]))
            .collect();
        if matching.is_empty() {
            return Err(Error::Sequence(format!(
                "no template in the {} pool satisfies the predicate",
                self.task.name()
            )));
        }
        let idx = matching[rng.random_range(0..matching.len())];
        Ok((idx, self.templates[idx].as_str()))
    }
}

/// Values available to fill template holes.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptSlots<'a> {
    pub region_ids: &'a [u32],
    pub description: Option<&'a str>,
}

/// Render one or more region ids as placeholder text:
/// `⟨region1⟩`, `⟨region1⟩ and ⟨region2⟩`, or
/// `⟨region1⟩, ⟨region2⟩ and ⟨region3⟩`.
pub fn region_list(ids: &[u32]) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            if i + 1 == ids.len() {
                out.push_str(" and ");
            } else {
                out.push_str(", ");
            }
        }
        out.push_str(&format!("⟨region{id}⟩"));
    }
    out
}

/// Substitute every hole in `template` from `slots`.
pub fn fill_template(template: &str, slots: &PromptSlots) -> Result<String> {
    let region_holes = template.matches(REGION_HOLE).count();
    let mut out = template.to_string();
    match region_holes {
        0 => {}
        1 => {
            if slots.region_ids.is_empty() {
                return Err(Error::Sequence(
                    "template has a region hole but no region ids were given".into(),
                ));
            }
            out = out.replacen(REGION_HOLE, &region_list(slots.region_ids), 1);
        }
        n => {
            if slots.region_ids.len() != n {
                return Err(Error::Sequence(format!(
                    "template has {n} region holes but {} region ids were given",
                    slots.region_ids.len()
                )));
            }
            for id in slots.region_ids {
                out = out.replacen(REGION_HOLE, &format!("⟨region{id}⟩"), 1);
            }
        }
    }
    if out.contains(DESCRIPTION_HOLE) {
        let desc = slots.description.ok_or_else(|| {
            Error::Sequence("template has a description hole but no description was given".into())
        })?;
        out = out.replace(DESCRIPTION_HOLE, desc);
    }
    debug_assert!(!out.contains(REGION_HOLE) && !out.contains(DESCRIPTION_HOLE));
    Ok(out)
}

/// Draw a template uniformly and fill it.
pub fn make_task_prompt<R: Rng>(
    pool: &TemplatePool,
    slots: &PromptSlots,
    rng: &mut R,
) -> Result<String> {
    let (_, template) = pool.draw(rng);
    fill_template(template, slots)
}

/// Fill the template at a fixed pool index.
pub fn make_task_prompt_at(pool: &TemplatePool, slots: &PromptSlots, index: usize) -> Result<String> {
    fill_template(pool.get(index)?, slots)
}

/// Append a guidance sentence to a prompt. Empty guidance is a no-op.
pub fn append_guidance(prompt: &str, guidance: &str) -> String {
    if guidance.is_empty() {
        prompt.to_string()
    } else {
        format!("{prompt} {guidance}")
    }
}
