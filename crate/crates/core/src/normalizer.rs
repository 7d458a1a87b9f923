//! Standardizes extracted instrument names against a canonical dictionary.
//!
//! Matching precedence is exact > alias > fuzzy > unmatched:
//!
//! * exact: the case-folded surface equals a canonical name;
//! * alias: it equals an alias, or its outer text or parenthesized part equals
//!   a canonical name, an alias, or a parenthesized part of one;
//! * fuzzy: the best normalized edit-distance score over [`normalize_key`]
//!   forms reaches the threshold;
//! * unmatched: the whitespace-collapsed surface passes through unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.90;

// ============================================================================
// Dictionary
// ============================================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_type: Option<String>,
}

#[derive(Debug, Error)]
pub enum DictError {
    #[error("failed to read dictionary {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dictionary line {line}: {message}")]
    Invalid { line: usize, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "RawDictionary", try_from = "RawDictionary")]
pub struct InstrumentDictionary {
    version: String,
    entries: Vec<DictEntry>,
    by_canonical: HashMap<String, usize>,
    by_alias: HashMap<String, usize>,
    by_part: HashMap<String, usize>,
    keys: Vec<Vec<NormalizedKey>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDictionary {
    version: String,
    entries: Vec<DictEntry>,
}

impl From<InstrumentDictionary> for RawDictionary {
    fn from(d: InstrumentDictionary) -> Self {
        RawDictionary { version: d.version, entries: d.entries }
    }
}

impl TryFrom<RawDictionary> for InstrumentDictionary {
    type Error = String;
    fn try_from(raw: RawDictionary) -> Result<Self, String> {
        InstrumentDictionary::new(raw.version, raw.entries).map_err(|e| e.to_string())
    }
}

impl InstrumentDictionary {
    pub fn new(version: impl Into<String>, entries: Vec<DictEntry>) -> Result<Self, DictError> {
        Self::build(version.into(), entries, &|_| 0)
    }

    fn build(version: String, entries: Vec<DictEntry>, line_of: &dyn Fn(usize) -> usize) -> Result<Self, DictError> {
        let invalid = |entry: usize, message: String| DictError::Invalid { line: line_of(entry), message };
        let mut by_canonical = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.canonical_name.trim().is_empty() {
                return Err(invalid(i, format!("entry {i} has an empty canonical_name")));
            }
            if let Some(prev) = by_canonical.insert(fold(&e.canonical_name), i) {
                return Err(invalid(
                    i,
                    format!("canonical name `{}` duplicates entry {prev} (case-insensitive)", e.canonical_name),
                ));
            }
        }
        let mut by_alias = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for alias in &e.aliases {
                if let Some(prev) = by_alias.insert(fold(alias), i) {
                    return Err(invalid(
                        i,
                        format!("alias `{alias}` of `{}` already listed under entry {prev}", e.canonical_name),
                    ));
                }
            }
        }
        for (i, e) in entries.iter().enumerate() {
            if let Some(parent) = &e.parent {
                if !by_canonical.contains_key(&fold(parent)) {
                    return Err(invalid(i, format!("parent `{parent}` of `{}` is not an entry", e.canonical_name)));
                }
            }
        }
        // cycle check: every parent chain must terminate within entries.len() steps
        for (i, e) in entries.iter().enumerate() {
            let mut cursor = e.parent.as_ref();
            let mut steps = 0;
            while let Some(p) = cursor {
                steps += 1;
                if steps > entries.len() {
                    return Err(invalid(i, format!("parent links from `{}` form a cycle", e.canonical_name)));
                }
                cursor = entries[by_canonical[&fold(p)]].parent.as_ref();
            }
        }

        let mut by_part = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for name in std::iter::once(&e.canonical_name).chain(&e.aliases) {
                for part in paren_parts(name) {
                    by_part.entry(part).or_insert(i);
                }
            }
        }
        let keys = entries
            .iter()
            .map(|e| std::iter::once(&e.canonical_name).chain(&e.aliases).map(|n| normalize_key(n)).collect())
            .collect();

        Ok(InstrumentDictionary { version, entries, by_canonical, by_alias, by_part, keys })
    }

    pub fn load(path: &Path) -> Result<Self, DictError> {
        let raw = std::fs::read_to_string(path).map_err(|source| DictError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&raw)
    }

    /// Parses the dictionary JSON. Invariant violations report the line of the
    /// offending entry's `canonical_name`.
    pub fn parse(raw: &str) -> Result<Self, DictError> {
        let parsed: RawDictionary =
            serde_json::from_str(raw).map_err(|e| DictError::Invalid { line: e.line(), message: e.to_string() })?;
        let lines = canonical_name_lines(raw);
        Self::build(parsed.version, parsed.entries, &|i| lines.get(i).copied().unwrap_or(0))
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn lookup(&self, canonical: &str) -> Option<&DictEntry> {
        self.by_canonical.get(&fold(canonical)).map(|&i| &self.entries[i])
    }

    /// Top of the battery hierarchy containing `entry`.
    fn root_of(&self, mut entry: usize) -> usize {
        while let Some(parent) = &self.entries[entry].parent {
            entry = self.by_canonical[&fold(parent)];
        }
        entry
    }
}

fn canonical_name_lines(raw: &str) -> Vec<usize> {
    raw.lines()
        .enumerate()
        .flat_map(|(i, line)| std::iter::repeat_n(i + 1, line.matches("\"canonical_name\"").count()))
        .collect()
}

// ============================================================================
// Keys and similarity
// ============================================================================

/// Comparison form of a name: the text outside parentheses and, separately,
/// the parenthesized text (typically an acronym or its expansion).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedKey {
    pub key: String,
    pub expansion: Option<String>,
}

impl fmt::Display for NormalizedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.expansion, self.key.is_empty()) {
            (None, _) => f.write_str(&self.key),
            (Some(e), true) => write!(f, "({e})"),
            (Some(e), false) => write!(f, "{} ({e})", self.key),
        }
    }
}

/// Lowercases, strips accents, splits off parenthesized text, turns intra-word
/// hyphens into spaces, drops other punctuation and collapses whitespace.
pub fn normalize_key(s: &str) -> NormalizedKey {
    let plain: String = s.to_lowercase().nfd().filter(|c| !is_combining_mark(*c)).collect();
    let mut outside = String::new();
    let mut inside = String::new();
    let mut depth = 0usize;
    for c in plain.chars() {
        match c {
            '(' => {
                depth += 1;
                inside.push(' ');
            }
            ')' if depth > 0 => {
                depth -= 1;
                inside.push(' ');
                outside.push(' ');
            }
            _ if depth > 0 => inside.push(c),
            _ => outside.push(c),
        }
    }
    let expansion = clean_part(&inside);
    NormalizedKey { key: clean_part(&outside), expansion: (!expansion.is_empty()).then_some(expansion) }
}

fn is_dash(c: char) -> bool {
    matches!(c, '-' | '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}')
}

fn clean_part(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if c.is_whitespace()
            || (is_dash(c)
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()))
        {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folded, whitespace-collapsed form used for exact and alias lookups.
pub fn fold(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Folded outer text and parenthesized text of a raw name, when it has both.
fn paren_parts(name: &str) -> Vec<String> {
    let (Some(open), Some(close)) = (name.find('('), name.rfind(')')) else {
        return Vec::new();
    };
    if open >= close {
        return Vec::new();
    }
    let outer = format!("{} {}", &name[..open], &name[close + 1..]);
    [fold(&outer), fold(&name[open + 1..close])].into_iter().filter(|p| !p.is_empty()).collect()
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len_a, len_b)`, with two empty strings scoring 1.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

/// Best similarity between any non-empty component of two keys.
pub fn key_similarity(a: &NormalizedKey, b: &NormalizedKey) -> f64 {
    let parts = |k: &NormalizedKey| -> Vec<String> {
        std::iter::once(k.key.clone()).chain(k.expansion.clone()).filter(|p| !p.is_empty()).collect()
    };
    let (pa, pb) = (parts(a), parts(b));
    let mut best: f64 = 0.0;
    for x in &pa {
        for y in &pb {
            best = best.max(similarity(x, y));
        }
    }
    best
}

// ============================================================================
// Normalization
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Alias,
    Fuzzy,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalInstrument {
    pub canonical_name: String,
    pub match_kind: MatchKind,
    pub match_score: f64,
    pub surface_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_type: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizerConfig {
    pub fuzzy_threshold: f64,
    pub collapse_subtests: bool,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig { fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD, collapse_subtests: false }
    }
}

/// Resolution of a single surface form, before battery collapsing.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMatch {
    pub entry: Option<usize>,
    pub kind: MatchKind,
    pub score: f64,
}

impl InstrumentDictionary {
    pub fn match_surface(&self, surface: &str, threshold: f64) -> SurfaceMatch {
        let folded = fold(surface);
        let hit = |entry, kind| SurfaceMatch { entry: Some(entry), kind, score: 1.0 };
        if let Some(&i) = self.by_canonical.get(&folded) {
            return hit(i, MatchKind::Exact);
        }
        if let Some(&i) = self.by_alias.get(&folded) {
            return hit(i, MatchKind::Alias);
        }
        let parts = paren_parts(surface);
        for part in &parts {
            if let Some(&i) = self.by_canonical.get(part).or_else(|| self.by_alias.get(part)) {
                return hit(i, MatchKind::Alias);
            }
        }
        for part in std::iter::once(&folded).chain(&parts) {
            if let Some(&i) = self.by_part.get(part) {
                return hit(i, MatchKind::Alias);
            }
        }

        let key = normalize_key(surface);
        let mut best: Option<(f64, usize)> = None;
        for (i, candidates) in self.keys.iter().enumerate() {
            let score = candidates.iter().map(|c| key_similarity(&key, c)).fold(0.0, f64::max);
            let better = match best {
                None => true,
                Some((s, j)) => {
                    score > s || (score == s && self.entries[i].canonical_name < self.entries[j].canonical_name)
                }
            };
            if better {
                best = Some((score, i));
            }
        }
        match best {
            Some((score, i)) if score >= threshold => SurfaceMatch { entry: Some(i), kind: MatchKind::Fuzzy, score },
            _ => SurfaceMatch { entry: None, kind: MatchKind::Unmatched, score: 0.0 },
        }
    }
}

/// Maps each distinct surface form to exactly one canonical instrument,
/// merging forms that resolve to the same name. Output follows first
/// appearance order.
pub fn normalize<'a>(
    surfaces: impl IntoIterator<Item = &'a str>,
    dict: &InstrumentDictionary,
    cfg: &NormalizerConfig,
) -> Vec<CanonicalInstrument> {
    let mut out: Vec<CanonicalInstrument> = Vec::new();
    let mut slot_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_surface = std::collections::HashSet::new();

    for surface in surfaces {
        let surface = collapse_ws(surface);
        if surface.is_empty() || !seen_surface.insert(surface.clone()) {
            continue;
        }
        let m = dict.match_surface(&surface, cfg.fuzzy_threshold);
        let (canonical, default_type) = match m.entry {
            Some(i) => {
                let i = if cfg.collapse_subtests { dict.root_of(i) } else { i };
                let entry = &dict.entries[i];
                (entry.canonical_name.clone(), entry.default_type.clone())
            }
            None => (surface.clone(), None),
        };
        match slot_of.get(&fold(&canonical)) {
            Some(&slot) => {
                let existing = &mut out[slot];
                existing.surface_names.push(surface);
                if m.kind < existing.match_kind {
                    existing.match_kind = m.kind;
                }
                existing.match_score = existing.match_score.max(m.score);
            }
            None => {
                slot_of.insert(fold(&canonical), out.len());
                out.push(CanonicalInstrument {
                    canonical_name: canonical,
                    match_kind: m.kind,
                    match_score: m.score,
                    surface_names: vec![surface],
                    default_type,
                });
            }
        }
    }
    out
}
