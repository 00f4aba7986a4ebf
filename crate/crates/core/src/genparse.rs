//! Parsing raw model generations into slot maps.
//!
//! Generations come in two shapes. Regular outputs are a bare dictionary:
//!
//! ```text
//! {'payment_frequency': 'monthly', 'payment_amount': '€30', 'new_limit': 'None'}
//! ```
//!
//! Reasoning outputs put a trace between think tags and the dictionary between
//! response tags. Closing tags are accepted both as `</thinking>` and as
//! `<\thinking>`.
//!
//! The dictionary reader is lenient: it takes single or double quotes, a
//! trailing comma, bare `None`/`null`, and prose around the braces. Every such
//! repair is reported as a [`Diagnostic`] so that well-formed output can be
//! told apart from output that merely parsed.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SlotMap;

/// Literal tag strings framing the thinking and response blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagGrammar {
    pub open_think: String,
    pub close_think: String,
    pub open_response: String,
    pub close_response: String,
}

impl Default for TagGrammar {
    fn default() -> Self {
        Self {
            open_think: "<thinking>".into(),
            close_think: "</thinking>".into(),
            open_response: "<response>".into(),
            close_response: "</response>".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Think,
    Response,
}

impl TagGrammar {
    fn tags(&self, block: Block) -> (&str, &str) {
        match block {
            Block::Think => (&self.open_think, &self.close_think),
            Block::Response => (&self.open_response, &self.close_response),
        }
    }
}

/// `</tag>` also closes as `<\tag>`.
fn close_forms(close: &str) -> Vec<String> {
    let mut forms = vec![close.to_string()];
    if let Some(rest) = close.strip_prefix("</") {
        forms.push(format!("<\\{rest}"));
    }
    forms
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    UnclosedTag { tag: String },
    MissingResponseBlock,
    LeadingText,
    TrailingText,
    SurroundingText,
    TrailingComma,
    DuplicateKey { key: String },
    BareKey { key: String },
    BareValue { key: String, raw: String },
    Unparseable { cause: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnclosedTag { tag } => write!(f, "tag {tag} is never closed"),
            Diagnostic::MissingResponseBlock => {
                f.write_str("no response block; parsed text after the thinking block")
            }
            Diagnostic::LeadingText => f.write_str("text before the thinking block"),
            Diagnostic::TrailingText => f.write_str("text after the response block"),
            Diagnostic::SurroundingText => f.write_str("prose around the dictionary"),
            Diagnostic::TrailingComma => f.write_str("trailing comma in dictionary"),
            Diagnostic::DuplicateKey { key } => write!(f, "duplicate key {key:?}, last wins"),
            Diagnostic::BareKey { key } => write!(f, "unquoted key {key:?}"),
            Diagnostic::BareValue { key, raw } => write!(f, "unquoted value {raw:?} for {key:?}"),
            Diagnostic::Unparseable { cause } => write!(f, "no usable dictionary: {cause}"),
        }
    }
}

/// A located tag block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedBlock<'a> {
    pub inner: &'a str,
    /// Byte span from the open tag through the close tag (or end of text).
    pub span: Range<usize>,
    pub closed: bool,
}

/// Finds the first `block` in `text`. An open tag without a close tag yields
/// the rest of the text with `closed == false`.
pub fn extract_tagged<'a>(
    text: &'a str,
    grammar: &TagGrammar,
    block: Block,
) -> Option<TaggedBlock<'a>> {
    let (open, close) = grammar.tags(block);
    let start = text.find(open)?;
    let body_start = start + open.len();
    let body = &text[body_start..];
    let close_at = close_forms(close)
        .into_iter()
        .filter_map(|form| body.find(&form).map(|pos| (pos, form.len())))
        .min();
    Some(match close_at {
        Some((pos, len)) => TaggedBlock {
            inner: &body[..pos],
            span: start..body_start + pos + len,
            closed: true,
        },
        None => TaggedBlock {
            inner: body,
            span: start..text.len(),
            closed: false,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DictError {
    #[error("no dictionary found")]
    NoDictFound,
    #[error("malformed dictionary at byte {position}: {cause}")]
    MalformedDict { position: usize, cause: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotDict {
    pub values: SlotMap,
    pub diagnostics: Vec<Diagnostic>,
}

/// Parses the first brace-delimited dictionary literal in `text`.
///
/// If a `{` does not open a valid dictionary the next one is tried; the error
/// from the first attempt is returned when none succeeds.
pub fn parse_slot_dict(text: &str) -> Result<SlotDict, DictError> {
    let mut first_err = None;
    for (start, _) in text.match_indices('{') {
        let mut parser = DictParser::new(text, start);
        match parser.parse() {
            Ok(end) => {
                let mut dict = SlotDict {
                    values: parser.values,
                    diagnostics: Vec::new(),
                };
                if !text[..start].trim().is_empty() || !text[end..].trim().is_empty() {
                    dict.diagnostics.push(Diagnostic::SurroundingText);
                }
                dict.diagnostics.extend(parser.diagnostics);
                return Ok(dict);
            }
            // A nested value means this was a dictionary, just not a flat one.
            Err(e) if parser.nested => return Err(e),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(DictError::NoDictFound))
}

struct DictParser<'a> {
    text: &'a str,
    pos: usize,
    values: SlotMap,
    diagnostics: Vec<Diagnostic>,
    nested: bool,
}

impl<'a> DictParser<'a> {
    fn new(text: &'a str, start: usize) -> Self {
        Self {
            text,
            pos: start,
            values: SlotMap::new(),
            diagnostics: Vec::new(),
            nested: false,
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn fail<T>(&self, cause: impl Into<String>) -> Result<T, DictError> {
        Err(DictError::MalformedDict {
            position: self.pos,
            cause: cause.into(),
        })
    }

    fn expect(&mut self, want: char) -> Result<(), DictError> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => self.fail(format!("expected {want:?}, found {c:?}")),
            None => self.fail(format!("expected {want:?}, found end of text")),
        }
    }

    /// Returns the byte offset just past the closing brace.
    fn parse(&mut self) -> Result<usize, DictError> {
        self.expect('{')?;
        self.skip_ws();
        if self.peek() == Some('}') {
            self.bump();
            return Ok(self.pos);
        }
        loop {
            self.skip_ws();
            let key = self.key()?;
            self.skip_ws();
            self.expect(':')?;
            self.skip_ws();
            let value = self.value(&key)?;
            if self.values.insert(key.clone(), value).is_some() {
                self.diagnostics.push(Diagnostic::DuplicateKey { key });
            }
            self.skip_ws();
            match self.peek() {
                Some('}') => {
                    self.bump();
                    return Ok(self.pos);
                }
                Some(',') => {
                    self.bump();
                    self.skip_ws();
                    if self.peek() == Some('}') {
                        self.bump();
                        self.diagnostics.push(Diagnostic::TrailingComma);
                        return Ok(self.pos);
                    }
                }
                Some(c) => return self.fail(format!("expected ',' or '}}', found {c:?}")),
                None => return self.fail("unclosed dictionary"),
            }
        }
    }

    fn key(&mut self) -> Result<String, DictError> {
        match self.peek() {
            Some('\'') | Some('"') => self.quoted(),
            Some(c) if c.is_alphanumeric() || c == '_' => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_alphanumeric() || c == '_' || c == '-')
                {
                    self.bump();
                }
                let key = self.text[start..self.pos].to_string();
                self.diagnostics.push(Diagnostic::BareKey { key: key.clone() });
                Ok(key)
            }
            Some(c) => self.fail(format!("expected a key, found {c:?}")),
            None => self.fail("unclosed dictionary"),
        }
    }

    fn value(&mut self, key: &str) -> Result<String, DictError> {
        match self.peek() {
            Some('\'') | Some('"') => self.quoted(),
            Some('{') | Some('[') => {
                self.nested = true;
                self.fail("nested values are not supported")
            }
            Some(_) => {
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c != ',' && c != '}' && c != '\n') {
                    self.bump();
                }
                let raw = self.text[start..self.pos].trim_end();
                if raw.is_empty() {
                    return self.fail("missing value");
                }
                self.diagnostics.push(Diagnostic::BareValue {
                    key: key.to_string(),
                    raw: raw.to_string(),
                });
                Ok(match raw {
                    "None" | "none" | "null" | "NULL" | "Null" => "None".to_string(),
                    other => other.to_string(),
                })
            }
            None => self.fail("unclosed dictionary"),
        }
    }

    fn quoted(&mut self) -> Result<String, DictError> {
        let quote = self.bump().expect("caller checked the quote");
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return self.fail("unterminated string"),
                Some(c) if c == quote => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('u') => out.push(self.unicode_escape()?),
                    Some(c @ ('\\' | '\'' | '"' | '/')) => out.push(c),
                    Some(c) => {
                        out.push('\\');
                        out.push(c);
                    }
                    None => return self.fail("unterminated string"),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn unicode_escape(&mut self) -> Result<char, DictError> {
        let start = self.pos;
        let hex = self.text.get(start..start + 4).unwrap_or("");
        let code = u32::from_str_radix(hex, 16)
            .ok()
            .filter(|_| hex.len() == 4)
            .and_then(char::from_u32);
        match code {
            Some(c) => {
                self.pos += 4;
                Ok(c)
            }
            None => self.fail("invalid \\u escape"),
        }
    }
}

/// Writes a slot map in the single-quoted form models are trained to emit.
/// `\` and `'` inside keys and values are backslash-escaped.
pub fn format_slot_dict(map: &SlotMap) -> String {
    if map.is_empty() {
        return "{}".to_string();
    }
    let body: Vec<String> = map
        .iter()
        .map(|(k, v)| format!("'{}': '{}'", escape(k), escape(v)))
        .collect();
    format!("{{{}}}", body.join(", "))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Regular,
    Reasoning,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedGeneration {
    pub mode: ParseMode,
    pub thinking: Option<String>,
    pub slot_values: SlotMap,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedGeneration {
    pub fn is_malformed(&self) -> bool {
        self.mode == ParseMode::Malformed
    }
}

/// Parses one model generation. Never fails: output without a usable
/// dictionary comes back as [`ParseMode::Malformed`] with an empty map.
pub fn parse_generation(text: &str, grammar: &TagGrammar) -> ParsedGeneration {
    let mut diagnostics = Vec::new();
    let Some(think) = extract_tagged(text, grammar, Block::Think) else {
        return finish(ParseMode::Regular, None, parse_slot_dict(text), diagnostics);
    };

    if !text[..think.span.start].trim().is_empty() {
        diagnostics.push(Diagnostic::LeadingText);
    }
    let thinking = Some(think.inner.trim().to_string());
    if !think.closed {
        diagnostics.push(Diagnostic::UnclosedTag {
            tag: grammar.open_think.clone(),
        });
        let err = Err(DictError::NoDictFound);
        return finish(ParseMode::Reasoning, thinking, err, diagnostics);
    }

    let after = &text[think.span.end..];
    let dict = match extract_tagged(after, grammar, Block::Response) {
        Some(resp) => {
            if !after[..resp.span.start].trim().is_empty() {
                diagnostics.push(Diagnostic::LeadingText);
            }
            if resp.closed {
                if !after[resp.span.end..].trim().is_empty() {
                    diagnostics.push(Diagnostic::TrailingText);
                }
            } else {
                diagnostics.push(Diagnostic::UnclosedTag {
                    tag: grammar.open_response.clone(),
                });
            }
            parse_slot_dict(resp.inner)
        }
        None => {
            diagnostics.push(Diagnostic::MissingResponseBlock);
            parse_slot_dict(after)
        }
    };
    finish(ParseMode::Reasoning, thinking, dict, diagnostics)
}

fn finish(
    mode: ParseMode,
    thinking: Option<String>,
    dict: Result<SlotDict, DictError>,
    mut diagnostics: Vec<Diagnostic>,
) -> ParsedGeneration {
    match dict {
        Ok(d) => {
            diagnostics.extend(d.diagnostics);
            ParsedGeneration {
                mode,
                thinking,
                slot_values: d.values,
                diagnostics,
            }
        }
        Err(e) => {
            diagnostics.push(Diagnostic::Unparseable {
                cause: e.to_string(),
            });
            ParsedGeneration {
                mode: ParseMode::Malformed,
                thinking,
                slot_values: SlotMap::new(),
                diagnostics,
            }
        }
    }
}
