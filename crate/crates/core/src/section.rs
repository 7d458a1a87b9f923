//! Methods-section span detection over heading blocks.

use serde::{Deserialize, Serialize};

use crate::doc_model::ParsedDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    HeadingMatch,
    FallbackFullText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub start_page: u32,
    pub end_page: u32,
    pub detection_mode: DetectionMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub matched_heading: Option<String>,
}

impl SectionSpan {
    pub fn pages(&self) -> std::ops::RangeInclusive<u32> {
        self.start_page..=self.end_page
    }
}

/// Keyword tables for heading classification. Matching is case-insensitive and
/// whole-word over the heading text after leading numbering is stripped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub methods_keywords: Vec<String>,
    pub results_keywords: Vec<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        DetectorConfig {
            methods_keywords: owned(&[
                "method",
                "methods",
                "methodology",
                "materials and methods",
                "data and methods",
                "research design",
            ]),
            results_keywords: owned(&["result", "results", "findings", "analysis and results", "discussion"]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadingFamily {
    Methods,
    Results,
}

/// Removes leading section numbering such as `3.`, `3.1`, `IV.` or `A)`.
pub fn strip_numbering(heading: &str) -> &str {
    let mut rest = heading.trim_start();
    loop {
        let token_end = rest.find(|c: char| c.is_whitespace()).unwrap_or(rest.len());
        let token = &rest[..token_end];
        if token.is_empty() || !is_numbering_token(token) {
            return rest;
        }
        rest = rest[token_end..].trim_start();
    }
}

fn is_numbering_token(token: &str) -> bool {
    let core = token.trim_end_matches(['.', ')', ':', '-']);
    let core = core.trim_start_matches('(');
    if core.is_empty() {
        // bare punctuation such as "-" or "§"
        return token.chars().all(|c| !c.is_alphanumeric());
    }
    let dotted_digits = core.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_digit()));
    // letters only count as numbering when punctuated: "IV." or "A)"
    let punctuated = token.len() > core.len();
    let roman = core.chars().all(|c| "IVXLCDM".contains(c));
    let single_letter = core.len() == 1 && core.chars().all(|c| c.is_ascii_uppercase());
    dotted_digits || (punctuated && (roman || single_letter))
}

fn word_key(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    let padded = format!(" {haystack} ");
    padded.contains(&format!(" {phrase} "))
}

impl DetectorConfig {
    fn classify(&self, heading: &str) -> Option<HeadingFamily> {
        let key = word_key(strip_numbering(heading));
        let hit = |table: &[String]| table.iter().any(|kw| contains_phrase(&key, &word_key(kw)));
        if hit(&self.methods_keywords) {
            Some(HeadingFamily::Methods)
        } else if hit(&self.results_keywords) {
            Some(HeadingFamily::Results)
        } else {
            None
        }
    }
}

/// Finds the methods-section page span. The first methods-family heading opens
/// the span and the next results-family heading closes it; a results heading
/// ahead of the first methods heading, or no methods heading at all, yields the
/// full document.
pub fn detect_method_span(doc: &ParsedDocument, cfg: &DetectorConfig) -> SectionSpan {
    let first = doc.first_page().unwrap_or(1);
    let last = doc.last_page().unwrap_or(first);
    let fallback = SectionSpan {
        start_page: first,
        end_page: last,
        detection_mode: DetectionMode::FallbackFullText,
        matched_heading: None,
    };

    let headings = doc.pages.iter().flat_map(|page| {
        page.blocks.iter().filter(|b| b.is_heading()).map(move |b| (page.page_number, b.text.as_str()))
    });

    let mut methods: Option<(u32, &str)> = None;
    for (page, text) in headings {
        match (cfg.classify(text), methods) {
            (Some(HeadingFamily::Results), None) => return fallback,
            (Some(HeadingFamily::Methods), None) => methods = Some((page, text)),
            (Some(HeadingFamily::Results), Some((start, heading))) => {
                let end = if page == start { page } else { page - 1 };
                return SectionSpan {
                    start_page: start,
                    end_page: end.max(start),
                    detection_mode: DetectionMode::HeadingMatch,
                    matched_heading: Some(heading.to_string()),
                };
            }
            _ => {}
        }
    }

    match methods {
        Some((start, heading)) => SectionSpan {
            start_page: start,
            end_page: last,
            detection_mode: DetectionMode::HeadingMatch,
            matched_heading: Some(heading.to_string()),
        },
        None => fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc_model::{Block, Page};

    fn doc(n: u32, headings: &[(u32, &str)]) -> ParsedDocument {
        let pages = (1..=n)
            .map(|p| {
                let mut blocks: Vec<Block> =
                    headings.iter().filter(|(hp, _)| *hp == p).map(|(_, h)| Block::heading(1, *h)).collect();
                blocks.push(Block::paragraph(format!("Body text on page {p}.")));
                Page { page_number: p, blocks }
            })
            .collect();
        ParsedDocument::new("d", "", pages).unwrap()
    }

    #[test]
    fn numbered_method_and_results() {
        let d = doc(12, &[(1, "1. Introduction"), (4, "3. Method"), (9, "4. Results")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!(span.detection_mode, DetectionMode::HeadingMatch);
        assert_eq!((span.start_page, span.end_page), (4, 8));
        assert_eq!(span.matched_heading.as_deref(), Some("3. Method"));
    }

    #[test]
    fn no_methods_heading_falls_back() {
        let d = doc(7, &[(1, "Introduction"), (3, "Background")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!(span.detection_mode, DetectionMode::FallbackFullText);
        assert_eq!((span.start_page, span.end_page), (1, 7));
    }

    #[test]
    fn methodology_and_findings() {
        let d = doc(8, &[(2, "Methodology"), (6, "Findings")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!((span.start_page, span.end_page), (2, 5));
    }

    #[test]
    fn shared_page_keeps_results_page() {
        let d = doc(6, &[(3, "II. Methods"), (3, "III. Results")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!((span.start_page, span.end_page), (3, 3));
    }

    #[test]
    fn results_before_methods_falls_back() {
        let d = doc(6, &[(2, "Results"), (4, "Methods")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!(span.detection_mode, DetectionMode::FallbackFullText);
    }

    #[test]
    fn first_methods_heading_wins() {
        let d = doc(10, &[(2, "Methods"), (4, "Analytic Methods"), (7, "Discussion")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!((span.start_page, span.end_page), (2, 6));
        assert_eq!(span.matched_heading.as_deref(), Some("Methods"));
    }

    #[test]
    fn methods_without_results_runs_to_end() {
        let d = doc(5, &[(2, "Research Design")]);
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!(span.detection_mode, DetectionMode::HeadingMatch);
        assert_eq!((span.start_page, span.end_page), (2, 5));
    }

    #[test]
    fn paragraphs_never_match() {
        let mut d = doc(4, &[]);
        d.pages[1].blocks.push(Block::paragraph("Methods"));
        let span = detect_method_span(&d, &DetectorConfig::default());
        assert_eq!(span.detection_mode, DetectionMode::FallbackFullText);
    }

    #[test]
    fn numbering_is_stripped() {
        assert_eq!(strip_numbering("3. Method"), "Method");
        assert_eq!(strip_numbering("IV. Results"), "Results");
        assert_eq!(strip_numbering("2.1 Data and Methods"), "Data and Methods");
        assert_eq!(strip_numbering("A. Methods"), "Methods");
        assert_eq!(strip_numbering("Methods"), "Methods");
        // a real word made of roman letters survives
        assert_eq!(strip_numbering("I think"), "I think");
    }

    #[test]
    fn whole_word_matching() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.classify("Methodological Notes"), None);
        assert_eq!(cfg.classify("Results and Discussion"), Some(HeadingFamily::Results));
        assert_eq!(cfg.classify("MATERIALS AND METHODS"), Some(HeadingFamily::Methods));
    }
}
