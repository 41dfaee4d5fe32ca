//! Conversations and their assembly into mixed token/embedding sequences.
//!
//! A conversation is an ordered list of user/assistant turns over one image
//! and its declared regions. Assembly produces the element stream the
//! decoder consumes: image-cell slots first, then per turn a role tag and
//! the turn's tokens, with every `⟨regionN⟩` placeholder replaced by one
//! region slot. The loss mask selects assistant text tokens (plus the
//! closing end-of-sequence token) and nothing else, so instructions,
//! role tags, and embedding slots never contribute to the loss.

pub mod template;

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionSpec;
use crate::tokenize::{Tokenize, EOS_ID};

pub use template::{
    append_guidance, fill_template, make_task_prompt, make_task_prompt_at, region_list,
    PromptSlots, TaskKind, TemplatePool, COCO_GUIDANCE, REC_GUIDANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
        }
    }

    /// Only assistant turns are supervised.
    pub fn is_target(&self) -> bool {
        self.role == Role::Assistant
    }
}

/// One instruction-tuning sample: an image, its regions, and chat turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    #[serde(rename = "image")]
    pub image_ref: String,
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
    pub turns: Vec<Turn>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new("⟨region([0-9]+)⟩").expect("placeholder pattern compiles"))
}

/// All `⟨regionN⟩` ids referenced in `text`, in textual order.
pub fn placeholder_ids(text: &str) -> Vec<u32> {
    placeholder_re()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

impl Conversation {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Sequence("conversation has no turns".into()));
        }
        let mut declared = HashSet::new();
        for region in &self.regions {
            region.validate().map_err(|e| {
                Error::Sequence(format!("{}: {e}", self.image_ref))
            })?;
            if !declared.insert(region.id) {
                return Err(Error::Sequence(format!(
                    "{}: duplicate region id {}",
                    self.image_ref, region.id
                )));
            }
        }
        for turn in &self.turns {
            for id in placeholder_ids(&turn.text) {
                if !declared.contains(&id) {
                    return Err(Error::Sequence(format!(
                        "{}: text references undeclared region id {id}",
                        self.image_ref
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of user/assistant exchanges (rounded up for trailing user
    /// turns awaiting a reply).
    pub fn pair_count(&self) -> usize {
        let users = self.turns.iter().filter(|t| t.role == Role::User).count();
        users
    }
}

/// Role formatting applied at assembly time. The default mirrors a plain
/// two-speaker chat layout with no system preamble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatFormat {
    pub system: String,
    pub user_tag: String,
    pub assistant_tag: String,
}

impl Default for ChatFormat {
    fn default() -> Self {
        ChatFormat {
            system: String::new(),
            user_tag: "USER:".to_string(),
            assistant_tag: "ASSISTANT:".to_string(),
        }
    }
}

impl ChatFormat {
    pub fn validate(&self) -> Result<()> {
        if self.user_tag.trim().is_empty() || self.assistant_tag.trim().is_empty() {
            return Err(Error::Config("chat role tags must be non-empty".into()));
        }
        Ok(())
    }

    /// Every text fragment the tokenizer must know to encode conversations
    /// without unknown tokens.
    pub fn vocab_fragments(&self) -> Vec<&str> {
        let mut v = vec![self.user_tag.as_str(), self.assistant_tag.as_str()];
        if !self.system.is_empty() {
            v.push(self.system.as_str());
        }
        v
    }
}

/// One element of an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    Token(u32),
    /// Index into the pooled image embedding rows.
    ImageSlot(usize),
    /// Region id whose pooled embedding fills this position.
    RegionSlot(u32),
}

/// The decoder-ready form of a conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence {
    pub elements: Vec<Element>,
    pub loss_mask: Vec<bool>,
    /// Supervised token id at each masked-in position.
    pub targets: Vec<Option<u32>>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn slot_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| !matches!(e, Element::Token(_)))
            .count()
    }

    /// Region ids in element order, one entry per region slot.
    pub fn region_slots(&self) -> Vec<u32> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::RegionSlot(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// Internal consistency: mask only on tokens, targets only where
    /// masked, never a masked first element.
    pub fn check_invariants(&self) -> Result<()> {
        if self.loss_mask.len() != self.elements.len() || self.targets.len() != self.elements.len()
        {
            return Err(Error::Sequence("mask/target length mismatch".into()));
        }
        for (i, (&mask, element)) in self.loss_mask.iter().zip(&self.elements).enumerate() {
            if mask && !matches!(element, Element::Token(_)) {
                return Err(Error::Sequence(format!(
                    "embedding slot at {i} is marked as a loss target"
                )));
            }
            if mask != self.targets[i].is_some() {
                return Err(Error::Sequence(format!(
                    "target presence disagrees with mask at {i}"
                )));
            }
            if let (true, Element::Token(id)) = (mask, element) {
                if self.targets[i] != Some(*id) {
                    return Err(Error::Sequence(format!(
                        "target at {i} does not match its token"
                    )));
                }
            }
        }
        if self.loss_mask.first().copied().unwrap_or(false) {
            return Err(Error::Sequence(
                "first element cannot be supervised: no left context".into(),
            ));
        }
        Ok(())
    }
}

/// Assemble a conversation into the decoder's element stream.
///
/// `image_slots` is the number of pooled image embeddings injected before
/// the first turn (the pooled grid area). Placeholders become region slots
/// one for one; assistant text and its closing end-of-sequence token are the
/// only supervised positions.
pub fn build_sequence(
    conv: &Conversation,
    image_slots: usize,
    chat: &ChatFormat,
    tokenizer: &dyn Tokenize,
) -> Result<MixedSequence> {
    conv.validate()?;
    chat.validate()?;

    let mut elements = Vec::new();
    let mut loss_mask = Vec::new();
    let push_tokens = |elements: &mut Vec<Element>,
                           loss_mask: &mut Vec<bool>,
                           text: &str,
                           supervised: bool| {
        for id in tokenizer.encode(text) {
            elements.push(Element::Token(id));
            loss_mask.push(supervised);
        }
    };

    if !chat.system.is_empty() {
        push_tokens(&mut elements, &mut loss_mask, &chat.system, false);
    }
    for i in 0..image_slots {
        elements.push(Element::ImageSlot(i));
        loss_mask.push(false);
    }

    let re = placeholder_re();
    for turn in &conv.turns {
        let tag = match turn.role {
            Role::User => &chat.user_tag,
            Role::Assistant => &chat.assistant_tag,
        };
        push_tokens(&mut elements, &mut loss_mask, tag, false);

        let supervised = turn.is_target();
        let mut cursor = 0;
        for caps in re.captures_iter(&turn.text) {
            let whole = caps.get(0).unwrap();
            push_tokens(
                &mut elements,
                &mut loss_mask,
                &turn.text[cursor..whole.start()],
                supervised,
            );
            let id: u32 = caps[1]
                .parse()
                .map_err(|_| Error::Sequence(format!("placeholder id overflow in {:?}", &caps[0])))?;
            // Slots carry no token id, so they are never supervised even
            // inside an assistant turn.
            elements.push(Element::RegionSlot(id));
            loss_mask.push(false);
            cursor = whole.end();
        }
        push_tokens(&mut elements, &mut loss_mask, &turn.text[cursor..], supervised);

        if supervised {
            elements.push(Element::Token(EOS_ID));
            loss_mask.push(true);
        }
    }

    let targets = elements
        .iter()
        .zip(&loss_mask)
        .map(|(e, &m)| match (e, m) {
            (Element::Token(id), true) => Some(*id),
            _ => None,
        })
        .collect();

    let seq = MixedSequence {
        elements,
        loss_mask,
        targets,
    };
    seq.check_invariants()?;
    Ok(seq)
}

/// How classification questions are laid out at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationMode {
    /// One conversation, one user turn naming every region.
    OneTurnAll,
    /// One conversation, one user turn per region, answered sequentially.
    MultiTurnAll,
    /// An independent single-turn conversation per region.
    OneTurnOne,
}

impl ClassificationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one_turn_all" => Some(ClassificationMode::OneTurnAll),
            "multi_turn_all" => Some(ClassificationMode::MultiTurnAll),
            "one_turn_one" => Some(ClassificationMode::OneTurnOne),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassificationMode::OneTurnAll => "one_turn_all",
            ClassificationMode::MultiTurnAll => "multi_turn_all",
            ClassificationMode::OneTurnOne => "one_turn_one",
        }
    }
}

/// Build the user-side conversations for classifying `regions` of one
/// image. Assistant turns are absent; the evaluation driver fills them in
/// as the model answers. Guidance lands on the first user turn of a
/// conversation (every conversation is independent in one-turn-one mode).
pub fn assemble_classification_eval<R: Rng>(
    image_ref: &str,
    regions: &[RegionSpec],
    mode: ClassificationMode,
    pool: &TemplatePool,
    guidance: &str,
    rng: &mut R,
) -> Result<Vec<Conversation>> {
    if regions.is_empty() {
        return Err(Error::Eval("no regions to classify".into()));
    }
    let single_hole = |t: &str| t.matches(template::REGION_HOLE).count() == 1;
    let mut conversations = Vec::new();
    match mode {
        ClassificationMode::OneTurnAll => {
            let ids: Vec<u32> = regions.iter().map(|r| r.id).collect();
            let (_, t) = pool.draw_where(rng, single_hole)?;
            let prompt = fill_template(
                t,
                &PromptSlots {
                    region_ids: &ids,
                    description: None,
                },
            )?;
            conversations.push(Conversation {
                image_ref: image_ref.to_string(),
                regions: regions.to_vec(),
                turns: vec![Turn::user(append_guidance(&prompt, guidance))],
            });
        }
        ClassificationMode::MultiTurnAll => {
            let mut turns = Vec::new();
            for (i, region) in regions.iter().enumerate() {
                let (_, t) = pool.draw_where(rng, single_hole)?;
                let prompt = fill_template(
                    t,
                    &PromptSlots {
                        region_ids: &[region.id],
                        description: None,
                    },
                )?;
                let prompt = if i == 0 {
                    append_guidance(&prompt, guidance)
                } else {
                    prompt
                };
                turns.push(Turn::user(prompt));
            }
            conversations.push(Conversation {
                image_ref: image_ref.to_string(),
                regions: regions.to_vec(),
                turns,
            });
        }
        ClassificationMode::OneTurnOne => {
            for region in regions {
                let (_, t) = pool.draw_where(rng, single_hole)?;
                let prompt = fill_template(
                    t,
                    &PromptSlots {
                        region_ids: &[region.id],
                        description: None,
                    },
                )?;
                conversations.push(Conversation {
                    image_ref: image_ref.to_string(),
                    regions: vec![region.clone()],
                    turns: vec![Turn::user(append_guidance(&prompt, guidance))],
                });
            }
        }
    }
    Ok(conversations)
}

/// Read conversations from JSON-lines text, one object per line.
pub fn read_conversations_jsonl(text: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("conversation line {}: {e}", lineno + 1)))?;
        conv.validate()?;
        out.push(conv);
    }
    Ok(out)
}

/// Write conversations as JSON-lines text.
pub fn write_conversations_jsonl(convs: &[Conversation]) -> Result<String> {
    let mut out = String::new();
    for conv in convs {
        out.push_str(&serde_json::to_string(conv)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::WordTokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_region_specs() -> Vec<RegionSpec> {
        vec![
            RegionSpec::new_box(1, [0.1, 0.1, 0.4, 0.4]).unwrap(),
            RegionSpec::new_box(2, [0.5, 0.5, 0.9, 0.9]).unwrap(),
        ]
    }

    fn tokenizer_for(conv: &Conversation, chat: &ChatFormat) -> WordTokenizer {
        let mut texts: Vec<String> = conv.turns.iter().map(|t| t.text.clone()).collect();
        for f in chat.vocab_fragments() {
            texts.push(f.to_string());
        }
        WordTokenizer::build(texts.iter().map(String::as_str))
    }

    #[test]
    fn image_slots_come_first_then_tags_then_text() {
        let conv = Conversation {
            image_ref: "img".into(),
            regions: vec![],
            turns: vec![Turn::user("hello there"), Turn::assistant("hi")],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let seq = build_sequence(&conv, 4, &chat, &tok).unwrap();
        for i in 0..4 {
            assert_eq!(seq.elements[i], Element::ImageSlot(i));
        }
        assert!(matches!(seq.elements[4], Element::Token(_)));
        // USER: hello there ASSISTANT: hi <eos> after the four slots.
        assert_eq!(seq.len(), 4 + 1 + 2 + 1 + 1 + 1);
        assert_eq!(seq.masked_count(), 2); // "hi" + eos
        assert_eq!(seq.targets.iter().flatten().count(), 2);
    }

    #[test]
    fn closed_form_length_and_mask_sum() {
        // Ten instruction elements (tag + 8 words + answer tag) and five
        // supervised elements (4 words + eos) on top of 576 image slots.
        let conv = Conversation {
            image_ref: "img".into(),
            regions: vec![],
            turns: vec![
                Turn::user("one two three four five six seven eight"),
                Turn::assistant("alpha beta gamma delta"),
            ],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let seq = build_sequence(&conv, 576, &chat, &tok).unwrap();
        assert_eq!(seq.len(), 576 + 10 + 5);
        assert_eq!(seq.masked_count(), 5);
    }

    #[test]
    fn placeholders_become_region_slots_in_textual_order() {
        let conv = Conversation {
            image_ref: "img".into(),
            regions: two_region_specs(),
            turns: vec![
                Turn::user("compare ⟨region1⟩ with ⟨region2⟩ please"),
                Turn::assistant("they differ"),
            ],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let seq = build_sequence(&conv, 2, &chat, &tok).unwrap();
        assert_eq!(seq.region_slots(), vec![1, 2]);
        // One slot per placeholder: 2 image + 2 region slots total.
        assert_eq!(seq.slot_count(), 4);
        // "compare with please" tokens survive around the slots.
        let token_count = seq.len() - seq.slot_count();
        let expected_tokens = 1 + 3 + 1 + 2 + 1; // USER: + text + ASSISTANT: + reply + eos
        assert_eq!(token_count, expected_tokens);
    }

    #[test]
    fn undeclared_placeholder_is_rejected() {
        let conv = Conversation {
            image_ref: "img".into(),
            regions: two_region_specs(),
            turns: vec![Turn::user("what is ⟨region9⟩?")],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let err = build_sequence(&conv, 1, &chat, &tok).unwrap_err();
        assert!(matches!(err, Error::Sequence(_)), "{err}");
    }

    #[test]
    fn assistant_placeholder_is_allowed_but_unsupervised() {
        let conv = Conversation {
            image_ref: "img".into(),
            regions: two_region_specs(),
            turns: vec![
                Turn::user("pick one"),
                Turn::assistant("the answer is ⟨region2⟩ here"),
            ],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let seq = build_sequence(&conv, 1, &chat, &tok).unwrap();
        seq.check_invariants().unwrap();
        // 4 assistant words + eos supervised; the slot is not.
        assert_eq!(seq.masked_count(), 5);
        assert_eq!(seq.region_slots(), vec![2]);
    }

    #[test]
    fn region_free_sequence_round_trips_text() {
        let conv = Conversation {
            image_ref: "img".into(),
            regions: vec![],
            turns: vec![
                Turn::user("describe the picture"),
                Turn::assistant("a cat on a mat"),
            ],
        };
        let chat = ChatFormat::default();
        let tok = tokenizer_for(&conv, &chat);
        let seq = build_sequence(&conv, 0, &chat, &tok).unwrap();
        let ids: Vec<u32> = seq
            .elements
            .iter()
            .filter_map(|e| match e {
                Element::Token(id) => Some(*id),
                _ => None,
            })
            .collect();
        assert_eq!(
            tok.decode(&ids),
            "USER: describe the picture ASSISTANT: a cat on a mat"
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let convs = vec![Conversation {
            image_ref: "images/img_001.png".into(),
            regions: two_region_specs(),
            turns: vec![
                Turn::user("label ⟨region1⟩"),
                Turn::assistant("car"),
            ],
        }];
        let text = write_conversations_jsonl(&convs).unwrap();
        assert!(text.contains("\"image\":\"images/img_001.png\""), "{text}");
        assert!(text.contains("\"role\":\"user\""), "{text}");
        let back = read_conversations_jsonl(&text).unwrap();
        assert_eq!(back, convs);
    }

    #[test]
    fn classification_modes_have_documented_shapes() {
        let regions = vec![
            RegionSpec::new_box(1, [0.0, 0.0, 0.3, 0.3]).unwrap(),
            RegionSpec::new_box(2, [0.3, 0.3, 0.6, 0.6]).unwrap(),
            RegionSpec::new_box(3, [0.6, 0.6, 0.9, 0.9]).unwrap(),
        ];
        let pool = TemplatePool::builtin(TaskKind::Classification);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let one_all = assemble_classification_eval(
            "img",
            &regions,
            ClassificationMode::OneTurnAll,
            &pool,
            COCO_GUIDANCE,
            &mut rng,
        )
        .unwrap();
        assert_eq!(one_all.len(), 1);
        assert_eq!(one_all[0].turns.len(), 1);
        assert_eq!(placeholder_ids(&one_all[0].turns[0].text), vec![1, 2, 3]);
        assert!(one_all[0].turns[0].text.ends_with(COCO_GUIDANCE));

        let multi = assemble_classification_eval(
            "img",
            &regions,
            ClassificationMode::MultiTurnAll,
            &pool,
            COCO_GUIDANCE,
            &mut rng,
        )
        .unwrap();
        assert_eq!(multi.len(), 1);
        assert_eq!(multi[0].turns.len(), 3);
        for (i, turn) in multi[0].turns.iter().enumerate() {
            assert_eq!(turn.role, Role::User);
            assert_eq!(placeholder_ids(&turn.text), vec![(i + 1) as u32]);
            assert_eq!(turn.text.ends_with(COCO_GUIDANCE), i == 0);
        }

        let one_one = assemble_classification_eval(
            "img",
            &regions,
            ClassificationMode::OneTurnOne,
            &pool,
            COCO_GUIDANCE,
            &mut rng,
        )
        .unwrap();
        assert_eq!(one_one.len(), 3);
        for (i, conv) in one_one.iter().enumerate() {
            assert_eq!(conv.turns.len(), 1);
            assert_eq!(placeholder_ids(&conv.turns[0].text), vec![(i + 1) as u32]);
            assert!(conv.turns[0].text.ends_with(COCO_GUIDANCE));
            assert_eq!(conv.regions.len(), 1);
        }

        let single = assemble_classification_eval(
            "img",
            &regions[..1],
            ClassificationMode::OneTurnAll,
            &pool,
            COCO_GUIDANCE,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let single_other = assemble_classification_eval(
            "img",
            &regions[..1],
            ClassificationMode::OneTurnOne,
            &pool,
            COCO_GUIDANCE,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(single, single_other);

        assert!(assemble_classification_eval(
            "img",
            &[],
            ClassificationMode::OneTurnAll,
            &pool,
            "",
            &mut rng,
        )
        .is_err());
    }
}
