//! Parsed-document representation consumed from an upstream PDF parser.
//!
//! The ingestion format is a frozen JSON layout:
//!
//! ```json
//! {"doc_id": "...", "source_path": "...", "metadata": {...},
//!  "pages": [{"page_number": 1, "blocks": [{"kind": "heading", "level": 1, "text": "..."}]}]}
//! ```
//!
//! Unknown keys are ignored, missing required keys are errors. Loading walks the
//! raw JSON tree by hand so every violation can be reported with a JSON pointer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DocError {
    #[error("malformed input at {pointer}: {message}")]
    MalformedInput { pointer: String, message: String },
    #[error("failed to read {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("page span {start}..{end} outside document range {first}..{last}")]
    SpanOutOfRange { start: u32, end: u32, first: u32, last: u32 },
}

impl DocError {
    fn malformed(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        DocError::MalformedInput { pointer: pointer.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Heading,
    Paragraph,
    Caption,
    Table,
    List,
    Other,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Heading => "heading",
            BlockKind::Paragraph => "paragraph",
            BlockKind::Caption => "caption",
            BlockKind::Table => "table",
            BlockKind::List => "list",
            BlockKind::Other => "other",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "heading" => BlockKind::Heading,
            "paragraph" => BlockKind::Paragraph,
            "caption" => BlockKind::Caption,
            "table" => BlockKind::Table,
            "list" => BlockKind::List,
            "other" => BlockKind::Other,
            _ => return None,
        })
    }

    fn allows_empty_text(self) -> bool {
        matches!(self, BlockKind::Table | BlockKind::Other)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    #[serde(rename = "kind")]
    pub block_kind: BlockKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    pub text: String,
}

impl Block {
    pub fn heading(level: u32, text: impl Into<String>) -> Self {
        Block { block_kind: BlockKind::Heading, level: Some(level), text: text.into() }
    }

    pub fn paragraph(text: impl Into<String>) -> Self {
        Block { block_kind: BlockKind::Paragraph, level: None, text: text.into() }
    }

    pub fn is_heading(&self) -> bool {
        self.block_kind == BlockKind::Heading
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Page {
    pub page_number: u32,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParsedDocument {
    pub doc_id: String,
    pub source_path: String,
    pub metadata: BTreeMap<String, Value>,
    pub pages: Vec<Page>,
}

impl ParsedDocument {
    /// Builds a document from already-constructed pages, enforcing the same
    /// invariants as [`load_document`].
    pub fn new(doc_id: impl Into<String>, source_path: impl Into<String>, pages: Vec<Page>) -> Result<Self, DocError> {
        let doc =
            ParsedDocument { doc_id: doc_id.into(), source_path: source_path.into(), metadata: BTreeMap::new(), pages };
        let value = serde_json::to_value(&doc).expect("document serializes");
        parse_document(&value)
    }

    pub fn first_page(&self) -> Option<u32> {
        self.pages.first().map(|p| p.page_number)
    }

    pub fn last_page(&self) -> Option<u32> {
        self.pages.last().map(|p| p.page_number)
    }

    pub fn block_count(&self) -> usize {
        self.pages.iter().map(|p| p.blocks.len()).sum()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }
}

pub fn load_document(path: &Path) -> Result<ParsedDocument, DocError> {
    let raw =
        std::fs::read_to_string(path).map_err(|source| DocError::IoFailure { path: path.to_path_buf(), source })?;
    parse_document_str(&raw)
}

pub fn parse_document_str(raw: &str) -> Result<ParsedDocument, DocError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| {
        DocError::malformed("", format!("invalid JSON at line {} column {}: {e}", e.line(), e.column()))
    })?;
    parse_document(&value)
}

fn require<'a>(obj: &'a Map<String, Value>, key: &str, pointer: &str) -> Result<&'a Value, DocError> {
    obj.get(key).ok_or_else(|| DocError::malformed(pointer, format!("missing required key `{key}`")))
}

fn require_str<'a>(obj: &'a Map<String, Value>, key: &str, pointer: &str) -> Result<&'a str, DocError> {
    require(obj, key, pointer)?
        .as_str()
        .ok_or_else(|| DocError::malformed(format!("{pointer}/{key}"), "expected a string"))
}

fn parse_document(value: &Value) -> Result<ParsedDocument, DocError> {
    let obj = value.as_object().ok_or_else(|| DocError::malformed("", "expected a JSON object"))?;

    let doc_id = require_str(obj, "doc_id", "")?;
    if doc_id.trim().is_empty() {
        return Err(DocError::malformed("/doc_id", "doc_id must be non-empty"));
    }
    let source_path = require_str(obj, "source_path", "")?;

    let metadata = match obj.get("metadata") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(m)) => m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Some(_) => return Err(DocError::malformed("/metadata", "expected an object")),
    };

    let raw_pages =
        require(obj, "pages", "")?.as_array().ok_or_else(|| DocError::malformed("/pages", "expected an array"))?;

    let mut pages = Vec::with_capacity(raw_pages.len());
    let mut seen = BTreeSet::new();
    let mut previous: Option<u32> = None;
    for (pi, raw_page) in raw_pages.iter().enumerate() {
        let pointer = format!("/pages/{pi}");
        let page = parse_page(raw_page, &pointer)?;
        if !seen.insert(page.page_number) {
            return Err(DocError::malformed(
                format!("{pointer}/page_number"),
                format!("duplicate page_number {}", page.page_number),
            ));
        }
        if let Some(prev) = previous {
            if page.page_number < prev {
                return Err(DocError::malformed(
                    format!("{pointer}/page_number"),
                    format!("page_number {} follows {prev}; pages must ascend", page.page_number),
                ));
            }
        }
        previous = Some(page.page_number);
        pages.push(page);
    }

    Ok(ParsedDocument { doc_id: doc_id.to_string(), source_path: source_path.to_string(), metadata, pages })
}

fn parse_page(value: &Value, pointer: &str) -> Result<Page, DocError> {
    let obj = value.as_object().ok_or_else(|| DocError::malformed(pointer, "expected an object"))?;
    let page_number = require(obj, "page_number", pointer)?
        .as_u64()
        .filter(|n| *n >= 1 && *n <= u32::MAX as u64)
        .ok_or_else(|| DocError::malformed(format!("{pointer}/page_number"), "expected a positive integer"))?
        as u32;
    let raw_blocks = require(obj, "blocks", pointer)?
        .as_array()
        .ok_or_else(|| DocError::malformed(format!("{pointer}/blocks"), "expected an array"))?;
    let blocks = raw_blocks
        .iter()
        .enumerate()
        .map(|(bi, b)| parse_block(b, &format!("{pointer}/blocks/{bi}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Page { page_number, blocks })
}

fn parse_block(value: &Value, pointer: &str) -> Result<Block, DocError> {
    let obj = value.as_object().ok_or_else(|| DocError::malformed(pointer, "expected an object"))?;
    let kind_str = require_str(obj, "kind", pointer)?;
    let block_kind = BlockKind::parse(kind_str)
        .ok_or_else(|| DocError::malformed(format!("{pointer}/kind"), format!("unknown block kind `{kind_str}`")))?;
    let level = match obj.get("level") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|n| *n >= 1 && *n <= u32::MAX as u64)
                .ok_or_else(|| DocError::malformed(format!("{pointer}/level"), "expected a positive integer"))?
                as u32,
        ),
    };
    match (block_kind, level) {
        (BlockKind::Heading, None) => return Err(DocError::malformed(pointer, "heading block is missing `level`")),
        (kind, Some(_)) if kind != BlockKind::Heading => {
            return Err(DocError::malformed(
                format!("{pointer}/level"),
                format!("`level` is only allowed on heading blocks, found on {kind}"),
            ))
        }
        _ => {}
    }
    let text = require_str(obj, "text", pointer)?;
    if text.is_empty() && !block_kind.allows_empty_text() {
        return Err(DocError::malformed(
            format!("{pointer}/text"),
            format!("{block_kind} block must have non-empty text"),
        ));
    }
    Ok(Block { block_kind, level, text: text.to_string() })
}

/// Maps the byte range `start..end` of flattened text back to its source block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub start: usize,
    pub end: usize,
    pub page_number: u32,
    pub block_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatText {
    pub text: String,
    pub provenance: Vec<Provenance>,
}

/// Joins block texts in reading order with `\n`. Blocks with empty text are
/// skipped. Offsets in the provenance map are byte offsets into `text`.
pub fn flatten_text(doc: &ParsedDocument, span: Option<RangeInclusive<u32>>) -> Result<FlatText, DocError> {
    if let Some(span) = &span {
        let (first, last) = match (doc.first_page(), doc.last_page()) {
            (Some(f), Some(l)) => (f, l),
            _ => (0, 0),
        };
        if span.start() > span.end() || *span.start() < first || *span.end() > last {
            return Err(DocError::SpanOutOfRange { start: *span.start(), end: *span.end(), first, last });
        }
    }

    let mut text = String::new();
    let mut provenance = Vec::new();
    for page in &doc.pages {
        if let Some(span) = &span {
            if !span.contains(&page.page_number) {
                continue;
            }
        }
        for (block_index, block) in page.blocks.iter().enumerate() {
            if block.text.is_empty() {
                continue;
            }
            if !provenance.is_empty() {
                text.push('\n');
            }
            let start = text.len();
            text.push_str(&block.text);
            provenance.push(Provenance { start, end: text.len(), page_number: page.page_number, block_index });
        }
    }
    Ok(FlatText { text, provenance })
}
