//! Byte-level tokenizer and the dialogue turn protocol.
//!
//! Ids `0..=255` are raw bytes. Three control ids sit on top, giving the desk
//! vocabulary of 259. A formatted dialogue looks like
//!
//! ```text
//! <start_of_turn>user
//! Knock knock.<end_of_turn>
//! <start_of_turn>model
//! ```
//!
//! where the final line cues the model to answer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const START_TURN: u32 = 257;
pub const END_TURN: u32 = 258;
pub const DESK_VOCAB: usize = 259;

pub const BOS_STR: &str = "<bos>";
pub const START_TURN_STR: &str = "<start_of_turn>";
pub const END_TURN_STR: &str = "<end_of_turn>";

const CONTROL: [(&str, u32); 3] = [
    (BOS_STR, BOS),
    (START_TURN_STR, START_TURN),
    (END_TURN_STR, END_TURN),
];

/// Token ids. Byte ids and control ids share one space.
pub type TokenStream = Vec<u32>;

/// Every byte of `text` becomes one id. Never produces a control id.
pub fn encode_text(text: &str) -> TokenStream {
    text.bytes().map(u32::from).collect()
}

/// Like [`encode_text`], but literal control strings become control ids.
/// This is how a formatted dialogue is turned into a prompt.
pub fn encode_with_control(text: &str) -> TokenStream {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match CONTROL
            .iter()
            .find(|(lit, _)| bytes[i..].starts_with(lit.as_bytes()))
        {
            Some((lit, id)) => {
                out.push(*id);
                i += lit.len();
            }
            None => {
                out.push(u32::from(bytes[i]));
                i += 1;
            }
        }
    }
    out
}

/// Exact inverse of byte encoding; control ids expand to their literals.
pub fn decode_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            _ => match CONTROL.iter().find(|(_, c)| *c == id) {
                Some((lit, _)) => out.extend_from_slice(lit.as_bytes()),
                None => {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: DESK_VOCAB,
                    })
                }
            },
        }
    }
    Ok(out)
}

/// Decodes to text. Byte runs that are not valid UTF-8 (possible with sampled
/// output) are replaced with U+FFFD; use [`decode_bytes`] for the raw bytes.
pub fn decode_text(ids: &[u32]) -> Result<String> {
    let bytes = decode_bytes(ids)?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    User,
    Model,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Model => "model",
        }
    }

    fn other(self) -> Role {
        match self {
            Role::User => Role::Model,
            Role::Model => Role::User,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Role::User),
            "model" => Ok(Role::Model),
            _ => Err(Error::Dialogue {
                offset: 0,
                msg: format!("unknown role `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, role: Role, text: impl Into<String>) -> Self {
        self.turns.push(Turn {
            role,
            text: text.into(),
        });
        self
    }

    /// Checks alternation (starting with the user) and reserved strings.
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Dialogue {
                offset: 0,
                msg: "empty dialogue".into(),
            });
        }
        let mut expect = Role::User;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.role != expect {
                return Err(Error::Dialogue {
                    offset: 0,
                    msg: format!("turn {i} is `{}`, expected `{expect}`", turn.role),
                });
            }
            if let Some((lit, pos)) = find_reserved(&turn.text) {
                return Err(Error::Dialogue {
                    offset: pos,
                    msg: format!("turn {i} text contains reserved `{lit}`"),
                });
            }
            expect = expect.other();
        }
        Ok(())
    }
}

fn find_reserved(text: &str) -> Option<(&'static str, usize)> {
    CONTROL
        .iter()
        .filter_map(|(lit, _)| text.find(lit).map(|p| (*lit, p)))
        .min_by_key(|&(_, p)| p)
}

/// Renders the dialogue, appending the model cue after a final user turn.
pub fn format_dialogue(dialogue: &Dialogue) -> Result<String> {
    dialogue.validate()?;
    let mut out = String::new();
    for turn in &dialogue.turns {
        out.push_str(START_TURN_STR);
        out.push_str(turn.role.as_str());
        out.push('\n');
        out.push_str(&turn.text);
        out.push_str(END_TURN_STR);
        out.push('\n');
    }
    if dialogue.turns.last().map(|t| t.role) == Some(Role::User) {
        out.push_str(START_TURN_STR);
        out.push_str(Role::Model.as_str());
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`format_dialogue`]. A trailing model cue is accepted and
/// dropped. Errors carry the byte offset where framing broke.
pub fn parse_dialogue(s: &str) -> Result<Dialogue> {
    let err = |offset: usize, msg: &str| Error::Dialogue {
        offset,
        msg: msg.to_string(),
    };
    if s.is_empty() {
        return Err(err(0, "empty dialogue"));
    }
    let mut turns = Vec::new();
    let mut pos = 0;
    while pos < s.len() {
        let rest = &s[pos..];
        if !rest.starts_with(START_TURN_STR) {
            return Err(err(pos, "expected <start_of_turn>"));
        }
        let role_at = pos + START_TURN_STR.len();
        let Some(nl) = s[role_at..].find('\n') else {
            return Err(err(role_at, "role line is not terminated"));
        };
        let role: Role = s[role_at..role_at + nl]
            .parse()
            .map_err(|_| err(role_at, "unknown role"))?;
        let body_at = role_at + nl + 1;
        if body_at == s.len() && role == Role::Model {
            // generation cue
            if turns.last().map(|t: &Turn| t.role) != Some(Role::User) {
                return Err(err(pos, "model cue must follow a user turn"));
            }
            break;
        }
        let Some(end) = s[body_at..].find(END_TURN_STR) else {
            return Err(err(pos, "turn is missing <end_of_turn>"));
        };
        let text = &s[body_at..body_at + end];
        if let Some((_, p)) = find_reserved(text) {
            return Err(err(body_at + p, "control token inside turn text"));
        }
        let after = body_at + end + END_TURN_STR.len();
        if s.as_bytes().get(after) != Some(&b'\n') {
            return Err(err(after, "expected newline after <end_of_turn>"));
        }
        turns.push(Turn {
            role,
            text: text.to_string(),
        });
        pos = after + 1;
    }
    let d = Dialogue { turns };
    d.validate().map_err(|e| match e {
        Error::Dialogue { msg, .. } => err(0, &msg),
        other => other,
    })?;
    Ok(d)
}

/// Reads the `role:<TAB>text` line format. Blank lines are skipped.
pub fn parse_dialogue_lines(input: &str) -> Result<Dialogue> {
    let mut turns = Vec::new();
    let mut offset = 0;
    for line in input.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let Some((role, text)) = line.split_once(":\t") else {
            return Err(Error::Dialogue {
                offset: start,
                msg: "expected `user:<TAB>text` or `model:<TAB>text`".into(),
            });
        };
        let role = role.parse().map_err(|_| Error::Dialogue {
            offset: start,
            msg: format!("unknown role `{role}`"),
        })?;
        turns.push(Turn {
            role,
            text: text.to_string(),
        });
    }
    let d = Dialogue { turns };
    d.validate()?;
    Ok(d)
}
