use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// System instruction given to backends that accept one.
pub const SYSTEM_INSTRUCTION: &str = "The following is a conversation between a human content moderator, who works on meme moderation, and an AI assistant. The assistant provides an informative interpretation of memes, including details about the underlying message and any potential prejudice (i.e. towards individuals or communities) within the memes. It is important that the interpretation utilizes both the visual and linguistic elements of the memes.";

/// Human prompt for the interpretation stage. `{length_control}` is expanded
/// once when the bundle is built; `{caption}` and `{text}` at render time.
pub const INTERPRETATION_TEMPLATE: &str = "Given that the generated caption for the meme is \"{caption}\" and the overlaid text on this meme is \"{text}\", interpret the conveyed message and any potential bias conveyed in the meme {length_control}.";

pub const LENGTH_CONTROL: &str = "using a paragraph containing three sentences";

/// Stand-in caption prompt; no published wording exists for this stage.
pub const CAPTION_PROMPT: &str = "Describe this image in one sentence.";

const CAPTION: &str = "{caption}";
const TEXT: &str = "{text}";
const LENGTH: &str = "{length_control}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template must contain {placeholder} exactly once, found {count}")]
    Placeholder {
        placeholder: &'static str,
        count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Caption,
    Text,
}

/// A validated prompt set. Construct with [`PromptBundle::new`] so that a
/// broken template fails here instead of at render time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBundle", into = "RawBundle")]
pub struct PromptBundle {
    system_instruction: Option<String>,
    caption_prompt: String,
    interpretation_template: String,
    length_control: String,
    // literal, slot, literal, slot, literal
    pieces: [String; 3],
    order: [Slot; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawBundle {
    system_instruction: Option<String>,
    caption_prompt: String,
    interpretation_template: String,
    length_control: String,
}

impl TryFrom<RawBundle> for PromptBundle {
    type Error = PromptError;

    fn try_from(raw: RawBundle) -> Result<Self, Self::Error> {
        PromptBundle::new(
            raw.system_instruction,
            raw.caption_prompt,
            raw.interpretation_template,
            raw.length_control,
        )
    }
}

impl From<PromptBundle> for RawBundle {
    fn from(b: PromptBundle) -> Self {
        RawBundle {
            system_instruction: b.system_instruction,
            caption_prompt: b.caption_prompt,
            interpretation_template: b.interpretation_template,
            length_control: b.length_control,
        }
    }
}

impl Default for PromptBundle {
    fn default() -> Self {
        PromptBundle::new(
            Some(SYSTEM_INSTRUCTION.to_string()),
            CAPTION_PROMPT.to_string(),
            INTERPRETATION_TEMPLATE.to_string(),
            LENGTH_CONTROL.to_string(),
        )
        .expect("built-in template is valid")
    }
}

impl PromptBundle {
    pub fn new(
        system_instruction: Option<String>,
        caption_prompt: String,
        interpretation_template: String,
        length_control: String,
    ) -> Result<Self, PromptError> {
        let expanded = match interpretation_template.matches(LENGTH).count() {
            0 => interpretation_template.clone(),
            1 => interpretation_template.replacen(LENGTH, &length_control, 1),
            count => {
                return Err(PromptError::Placeholder {
                    placeholder: LENGTH,
                    count,
                })
            }
        };
        for placeholder in [CAPTION, TEXT] {
            let count = expanded.matches(placeholder).count();
            if count != 1 {
                return Err(PromptError::Placeholder { placeholder, count });
            }
        }
        let caption_at = expanded.find(CAPTION).unwrap();
        let text_at = expanded.find(TEXT).unwrap();
        let (first, second, order) = if caption_at < text_at {
            ((caption_at, CAPTION), (text_at, TEXT), [Slot::Caption, Slot::Text])
        } else {
            ((text_at, TEXT), (caption_at, CAPTION), [Slot::Text, Slot::Caption])
        };
        let pieces = [
            expanded[..first.0].to_string(),
            expanded[first.0 + first.1.len()..second.0].to_string(),
            expanded[second.0 + second.1.len()..].to_string(),
        ];
        Ok(Self {
            system_instruction,
            caption_prompt,
            interpretation_template,
            length_control,
            pieces,
            order,
        })
    }

    pub fn system_instruction(&self) -> Option<&str> {
        self.system_instruction.as_deref()
    }

    pub fn caption_prompt(&self) -> &str {
        &self.caption_prompt
    }

    pub fn interpretation_template(&self) -> &str {
        &self.interpretation_template
    }

    pub fn length_control(&self) -> &str {
        &self.length_control
    }

    /// Substitutes caption and overlay text verbatim. Substituted values are
    /// never rescanned, so braces or quotes inside them are left alone.
    pub fn render_interpretation_prompt(&self, caption: &str, overlay_text: &str) -> String {
        let value = |slot: Slot| match slot {
            Slot::Caption => caption,
            Slot::Text => overlay_text,
        };
        let mut out = String::with_capacity(
            self.pieces.iter().map(String::len).sum::<usize>() + caption.len() + overlay_text.len(),
        );
        out.push_str(&self.pieces[0]);
        out.push_str(value(self.order[0]));
        out.push_str(&self.pieces[1]);
        out.push_str(value(self.order[1]));
        out.push_str(&self.pieces[2]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodingStrategy {
    #[default]
    Greedy,
}

/// Greedy decoding only; there is deliberately no temperature or seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub strategy: DecodingStrategy,
    pub no_repeat_ngram_size: u32,
    pub max_new_tokens: u32,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            strategy: DecodingStrategy::Greedy,
            no_repeat_ngram_size: 2,
            max_new_tokens: 256,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }

    fn canonical(&self) -> String {
        format!(
            "strategy=greedy;no_repeat_ngram_size={};max_new_tokens={}",
            self.no_repeat_ngram_size, self.max_new_tokens
        )
    }
}

fn digest_fields(fields: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Digest of everything a backend sees for one request. `system` is the
/// instruction actually sent (None when the backend cannot take one).
pub fn prompt_hash(system: Option<&str>, rendered_prompt: &str, config: &DecodingConfig) -> String {
    let system_field = match system {
        Some(s) => format!("1:{s}"),
        None => "0:".to_string(),
    };
    digest_fields(&[&system_field, rendered_prompt, &config.canonical()])
}
