//! Word-level tokenizer: alphanumeric runs are words, every other
//! non-whitespace character is a token of its own.

/// A token together with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize_spans(text: &str) -> Vec<Span<'_>> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(Span { text: &text[s..i], start: s, end: i });
        }
        if !c.is_whitespace() {
            let end = i + c.len_utf8();
            out.push(Span { text: &text[i..end], start: i, end });
        }
    }
    if let Some(s) = word_start {
        out.push(Span { text: &text[s..], start: s, end: text.len() });
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|s| s.text.to_string()).collect()
}

/// Joins tokens with single spaces; inverse of [`tokenize`] up to whitespace.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
