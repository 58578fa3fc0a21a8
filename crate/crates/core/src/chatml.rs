//! ChatML conversations: `<|im_start|>role\ncontent<|im_end|>\n` per turn, rendered
//! to token streams whose loss mask covers only assistant replies.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokenizer::{TokenId, Vocabulary, DEFAULT_SPECIALS, IM_END, IM_START};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::System, Role::User, Role::Assistant];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChatError {
    #[error("turn {turn}: content contains special-token text {special:?}")]
    SpecialInContent { turn: usize, special: String },
    #[error("vocabulary does not register {0:?}")]
    MissingSpecial(&'static str),
    #[error("token {offset}: expected {IM_START}")]
    ExpectedStart { offset: usize },
    #[error("turn opened at token {offset} ({role}) is never closed with {IM_END}")]
    Unterminated { offset: usize, role: String },
    #[error("token {offset}: unknown role {role:?}")]
    UnknownRole { offset: usize, role: String },
    #[error("token {offset}: turn header lacks the newline after the role")]
    MissingHeaderNewline { offset: usize },
    #[error("token {offset}: expected a newline after {IM_END}")]
    MissingTrailingNewline { offset: usize },
    #[error("token {offset}: unexpected special token inside a turn")]
    UnexpectedSpecial { offset: usize },
    #[error("token {offset}: turn is not valid UTF-8")]
    Utf8 { offset: usize },
    #[error("token {offset}: id is not in the vocabulary")]
    UnknownId { offset: usize },
    #[error("the last turn is already an assistant reply")]
    EndsWithAssistant,
    #[error("line {line}: {msg}")]
    Json { line: usize, msg: String },
}

/// An ordered list of turns whose contents never contain special-token text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conversation {
    turns: Vec<Turn>,
}

fn check_content(turn: usize, content: &str) -> Result<(), ChatError> {
    match DEFAULT_SPECIALS.iter().find(|s| content.contains(*s)) {
        Some(s) => Err(ChatError::SpecialInContent {
            turn,
            special: s.to_string(),
        }),
        None => Ok(()),
    }
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self, ChatError> {
        for (i, t) in turns.iter().enumerate() {
            check_content(i, &t.content)?;
        }
        Ok(Self { turns })
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) -> Result<(), ChatError> {
        let content = content.into();
        check_content(self.turns.len(), &content)?;
        self.turns.push(Turn { role, content });
        Ok(())
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// The exact text a render produces.
    pub fn to_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{IM_START}{}\n{}{IM_END}\n", t.role, t.content))
            .collect()
    }
}

/// Token ids with a same-length 0/1 loss mask.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedStream {
    pub ids: Vec<TokenId>,
    pub mask: Vec<u8>,
}

impl MaskedStream {
    fn push(&mut self, ids: &[TokenId], m: u8) {
        self.ids.extend_from_slice(ids);
        self.mask.extend(std::iter::repeat_n(m, ids.len()));
    }
}

struct Delims {
    start: TokenId,
    end: TokenId,
}

fn delims(v: &Vocabulary) -> Result<Delims, ChatError> {
    Ok(Delims {
        start: v.special_id(IM_START).ok_or(ChatError::MissingSpecial(IM_START))?,
        end: v.special_id(IM_END).ok_or(ChatError::MissingSpecial(IM_END))?,
    })
}

/// Renders every turn; the mask is 1 on assistant content and the assistant's
/// closing `<|im_end|>`, 0 on everything else.
pub fn render(conv: &Conversation, v: &Vocabulary) -> Result<MaskedStream, ChatError> {
    let d = delims(v)?;
    let newline = v.encode("\n", false).ids;
    let mut out = MaskedStream::default();
    for t in &conv.turns {
        let m = u8::from(t.role == Role::Assistant);
        out.push(&[d.start], 0);
        out.push(&v.encode(t.role.as_str(), false).ids, 0);
        out.push(&newline, 0);
        out.push(&v.encode(&t.content, false).ids, m);
        out.push(&[d.end], m);
        out.push(&newline, 0);
    }
    Ok(out)
}

/// Render plus the `<|im_start|>assistant\n` prelude that decoding continues from.
pub fn generation_prompt(conv: &Conversation, v: &Vocabulary) -> Result<Vec<TokenId>, ChatError> {
    if conv.turns.last().is_some_and(|t| t.role == Role::Assistant) {
        return Err(ChatError::EndsWithAssistant);
    }
    let d = delims(v)?;
    let mut ids = render(conv, v)?.ids;
    ids.push(d.start);
    ids.extend(v.encode(Role::Assistant.as_str(), false).ids);
    ids.extend(v.encode("\n", false).ids);
    Ok(ids)
}

fn decode_span(v: &Vocabulary, ids: &[TokenId], base: usize) -> Result<Vec<u8>, ChatError> {
    let mut out = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if v.is_special(id) {
            return Err(ChatError::UnexpectedSpecial { offset: base + i });
        }
        out.extend_from_slice(v.token_bytes(id).ok_or(ChatError::UnknownId { offset: base + i })?);
    }
    Ok(out)
}

/// Inverse of [`render`]. Errors carry the token offset where parsing failed.
pub fn parse(ids: &[TokenId], v: &Vocabulary) -> Result<Conversation, ChatError> {
    let d = delims(v)?;
    let mut turns = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        if ids[i] != d.start {
            return Err(ChatError::ExpectedStart { offset: i });
        }
        let open = i;
        let body_start = i + 1;
        let Some(len) = ids[body_start..].iter().position(|&t| t == d.end) else {
            let header = ids[body_start..]
                .iter()
                .position(|&t| v.is_special(t))
                .map_or(&ids[body_start..], |p| &ids[body_start..body_start + p]);
            let bytes = v.decode(header).unwrap_or_default();
            let role = String::from_utf8_lossy(bytes.split(|&b| b == b'\n').next().unwrap_or(&[])).into_owned();
            return Err(ChatError::Unterminated { offset: open, role });
        };
        let body = decode_span(v, &ids[body_start..body_start + len], body_start)?;
        let text = String::from_utf8(body).map_err(|_| ChatError::Utf8 { offset: body_start })?;
        let Some((role, content)) = text.split_once('\n') else {
            return Err(ChatError::MissingHeaderNewline { offset: body_start });
        };
        let role = role.parse::<Role>().map_err(|_| ChatError::UnknownRole {
            offset: body_start,
            role: role.to_string(),
        })?;
        turns.push(Turn {
            role,
            content: content.to_string(),
        });

        // The separator after <|im_end|> runs to the next <|im_start|> or the end.
        let sep_start = body_start + len + 1;
        let sep_len = ids[sep_start..]
            .iter()
            .position(|&t| t == d.start)
            .unwrap_or(ids.len() - sep_start);
        let sep = decode_span(v, &ids[sep_start..sep_start + sep_len], sep_start)?;
        if sep != b"\n" {
            return Err(ChatError::MissingTrailingNewline { offset: sep_start });
        }
        i = sep_start + sep_len;
    }
    Conversation::new(turns)
}

/// Reads one conversation per line, each a JSON array of `{"role", "content"}`
/// objects. Blank lines are skipped.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<Conversation>, ChatError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ChatError::Json {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let turns: Vec<Turn> = serde_json::from_str(&line).map_err(|e| ChatError::Json {
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(Conversation::new(turns).map_err(|e| ChatError::Json {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
