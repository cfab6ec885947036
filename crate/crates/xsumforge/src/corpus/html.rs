//! Minimal HTML text extraction for locally archived article pages.
//!
//! This is not a general-purpose HTML parser; it handles the regular markup
//! of saved article pages: nested elements, attributes in single or double
//! quotes, comments, and a handful of text entities. Content inside `script`,
//! `style`, `title`, and `head` never counts as article text.

use super::CorpusError;

/// Class attribute that marks a page's single-sentence summary.
pub const SUMMARY_CLASS: &str = "story-body__introduction";

/// Splits a page into (summary text, remaining body text). The summary is the
/// concatenated text of every element carrying [`SUMMARY_CLASS`]; the body is
/// all other text. Both are whitespace-normalized.
pub fn extract_summary(html: &str) -> Result<(String, String), CorpusError> {
    let mut summary_parts: Vec<String> = Vec::new();
    let mut body_parts: Vec<String> = Vec::new();
    let mut found_summary = false;

    // Open-element stack entries: (name, is_summary_root).
    let mut stack: Vec<(String, bool)> = Vec::new();
    let mut summary_depth = 0usize;
    let mut suppress_depth = 0usize;

    let bytes = html.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if html[i..].starts_with("<!--") {
                i = match html[i + 4..].find("-->") {
                    Some(end) => i + 4 + end + 3,
                    None => bytes.len(),
                };
                continue;
            }
            let close = match html[i..].find('>') {
                Some(off) => i + off,
                None => break,
            };
            let tag = &html[i + 1..close];
            i = close + 1;
            let tag = tag.trim();
            if tag.starts_with('!') || tag.starts_with('?') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let name = name.trim().to_ascii_lowercase();
                close_element(&name, &mut stack, &mut summary_depth, &mut suppress_depth);
                continue;
            }
            let self_closing = tag.ends_with('/');
            let tag = tag.trim_end_matches('/');
            let name: String = tag
                .chars()
                .take_while(|c| !c.is_whitespace())
                .collect::<String>()
                .to_ascii_lowercase();
            if name.is_empty() {
                continue;
            }
            let is_summary = class_attr(tag)
                .map(|classes| classes.split_whitespace().any(|c| c == SUMMARY_CLASS))
                .unwrap_or(false);
            if is_summary {
                found_summary = true;
            }
            if self_closing || is_void(&name) {
                continue;
            }
            stack.push((name.clone(), is_summary));
            if is_summary {
                summary_depth += 1;
            }
            if is_suppressed(&name) {
                suppress_depth += 1;
            }
        } else {
            let next_tag = html[i..].find('<').map(|off| i + off).unwrap_or(bytes.len());
            let text = decode_entities(&html[i..next_tag]);
            let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
            if !text.is_empty() && suppress_depth == 0 {
                if summary_depth > 0 {
                    summary_parts.push(text);
                } else {
                    body_parts.push(text);
                }
            }
            i = next_tag;
        }
    }

    if !found_summary {
        return Err(CorpusError::MissingSummaryClass);
    }
    Ok((summary_parts.join(" "), body_parts.join(" ")))
}

fn close_element(
    name: &str,
    stack: &mut Vec<(String, bool)>,
    summary_depth: &mut usize,
    suppress_depth: &mut usize,
) {
    // Lenient matching: pop until the named element is found, tolerating
    // unclosed children.
    let Some(pos) = stack.iter().rposition(|(n, _)| n == name) else {
        return;
    };
    while stack.len() > pos {
        let (popped, was_summary) = stack.pop().unwrap();
        if was_summary {
            *summary_depth -= 1;
        }
        if is_suppressed(&popped) {
            *suppress_depth -= 1;
        }
    }
}

fn is_void(name: &str) -> bool {
    matches!(name, "br" | "hr" | "img" | "input" | "meta" | "link" | "area" | "base" | "col" | "embed" | "source" | "track" | "wbr")
}

fn is_suppressed(name: &str) -> bool {
    matches!(name, "script" | "style" | "title" | "head" | "noscript")
}

fn class_attr(tag: &str) -> Option<&str> {
    let lower = tag.to_ascii_lowercase();
    let mut search = 0;
    while let Some(off) = lower[search..].find("class") {
        let at = search + off;
        // Require a word boundary before "class".
        let boundary_ok = at == 0
            || lower.as_bytes()[at - 1].is_ascii_whitespace()
            || lower.as_bytes()[at - 1] == b'"'
            || lower.as_bytes()[at - 1] == b'\'';
        let rest = tag[at + 5..].trim_start();
        if boundary_ok {
            if let Some(rest) = rest.strip_prefix('=') {
                let rest = rest.trim_start();
                let mut chars = rest.chars();
                return match chars.next() {
                    Some(q @ ('"' | '\'')) => {
                        let inner = &rest[1..];
                        inner.find(q).map(|end| &inner[..end])
                    }
                    Some(_) => Some(rest.split_whitespace().next().unwrap_or("")),
                    None => None,
                };
            }
        }
        search = at + 5;
    }
    None
}

fn decode_entities(text: &str) -> String {
    if !text.contains('&') {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let candidates: &[(&str, &str)] = &[
            ("&amp;", "&"),
            ("&lt;", "<"),
            ("&gt;", ">"),
            ("&quot;", "\""),
            ("&#39;", "'"),
            ("&apos;", "'"),
            ("&nbsp;", " "),
            ("&pound;", "£"),
        ];
        let mut matched = false;
        for (entity, replacement) in candidates {
            if rest.starts_with(entity) {
                out.push_str(replacement);
                rest = &rest[entity.len()..];
                matched = true;
                break;
            }
        }
        if !matched {
            out.push('&');
            rest = &rest[1..];
        }
    }
    out.push_str(rest);
    out
}
