//! ChatML-style prompt rendering for the `qwen3` (thinking) and
//! `qwen3_nothink` templates, and think-block parsing of generations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Pre-filled empty thought appended by the no-think template.
pub const EMPTY_THINK_BLOCK: &str = "<think>\n\n</think>\n\n";

const IM_START: &str = "<|im_start|>";
const IM_END: &str = "<|im_end|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "qwen3")]
    Think,
    #[serde(rename = "qwen3_nothink")]
    NoThink,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Think => "qwen3",
            TemplateId::NoThink => "qwen3_nothink",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown template id {0:?} (expected \"qwen3\" or \"qwen3_nothink\")")]
pub struct UnknownTemplate(pub String);

impl FromStr for TemplateId {
    type Err = UnknownTemplate;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qwen3" => Ok(TemplateId::Think),
            "qwen3_nothink" => Ok(TemplateId::NoThink),
            other => Err(UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("bad role sequence at message {index}: {reason}")]
    BadRoleSequence { index: usize, reason: String },
}

/// Renders `messages` as ChatML.
///
/// Roles must alternate user/assistant, starting with user, after an
/// optional leading system message.
pub fn render(
    messages: &[Message],
    template: TemplateId,
    add_generation_prompt: bool,
) -> Result<String, TemplateError> {
    check_roles(messages)?;
    let mut out = String::new();
    for m in messages {
        out.push_str(IM_START);
        out.push_str(m.role.as_str());
        out.push('\n');
        out.push_str(&m.content);
        out.push_str(IM_END);
        out.push('\n');
    }
    if add_generation_prompt {
        out.push_str(IM_START);
        out.push_str("assistant\n");
        if template == TemplateId::NoThink {
            out.push_str(EMPTY_THINK_BLOCK);
        }
    }
    Ok(out)
}

fn check_roles(messages: &[Message]) -> Result<(), TemplateError> {
    if messages.is_empty() {
        return Err(TemplateError::BadRoleSequence {
            index: 0,
            reason: "no messages".into(),
        });
    }
    let start = usize::from(messages[0].role == Role::System);
    for (i, m) in messages.iter().enumerate().skip(start) {
        let expected = if (i - start) % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        if m.role != expected {
            return Err(TemplateError::BadRoleSequence {
                index: i,
                reason: format!("expected {}, found {}", expected.as_str(), m.role.as_str()),
            });
        }
    }
    Ok(())
}

/// A generation split into its leading thought and the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThinkSplit {
    pub thought: String,
    pub answer: String,
    pub wellformed: bool,
}

/// Splits off a leading `<think>...</think>` block.
///
/// Only the first block counts as the thought; later think tags stay in
/// the answer verbatim. An unclosed block swallows the rest of the text
/// and is reported as malformed.
pub fn strip_think(text: &str) -> ThinkSplit {
    let trimmed = text.trim_start();
    let Some(after_open) = trimmed.strip_prefix(THINK_OPEN) else {
        return ThinkSplit {
            thought: String::new(),
            answer: text.to_string(),
            wellformed: true,
        };
    };
    match after_open.find(THINK_CLOSE) {
        Some(end) => ThinkSplit {
            thought: after_open[..end].to_string(),
            answer: after_open[end + THINK_CLOSE.len()..].trim_start().to_string(),
            wellformed: true,
        },
        None => ThinkSplit {
            thought: after_open.to_string(),
            answer: String::new(),
            wellformed: false,
        },
    }
}

/// True when `text` contains a think-open marker anywhere.
pub fn contains_think_open(text: &str) -> bool {
    text.contains(THINK_OPEN)
}
