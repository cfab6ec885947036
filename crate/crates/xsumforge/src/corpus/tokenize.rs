//! Whitespace tokenization with punctuation detachment, plus the sentence
//! splitter used for article bodies.

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and tokenizes: split on whitespace, detach leading and trailing
/// punctuation into their own tokens, keep intra-word periods so acronyms like
/// "U.K." survive as single tokens (including their final period).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        tokenize_word(word, &mut tokens);
    }
    tokens
}

fn tokenize_word(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    while start < chars.len() && is_punct(chars[start]) {
        out.push(chars[start].to_string());
        start += 1;
    }
    let mut end = chars.len();
    while end > start && is_punct(chars[end - 1]) {
        end -= 1;
    }
    // An acronym keeps its final period: reattach one trailing '.' when the
    // stripped core still contains a period.
    if end < chars.len() && chars[end] == '.' && chars[start..end].contains(&'.') {
        end += 1;
    }
    if end > start {
        out.push(chars[start..end].iter().flat_map(|c| c.to_lowercase()).collect());
    }
    for &c in &chars[end..] {
        out.push(c.to_string());
    }
}

/// Splits raw (not yet lowercased) text into sentences at `[.?!]+` followed
/// by whitespace and an uppercase letter.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '?' | '!') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1], '.' | '?' | '!') {
                j += 1;
            }
            let mut k = j + 1;
            let mut saw_space = false;
            while k < chars.len() && chars[k].is_whitespace() {
                saw_space = true;
                k += 1;
            }
            if saw_space && k < chars.len() && chars[k].is_uppercase() {
                let sentence: String = chars[start..=j].iter().collect();
                let sentence = sentence.trim();
                if !sentence.is_empty() {
                    sentences.push(sentence.to_string());
                }
                start = k;
                i = k;
                continue;
            }
            i = j + 1;
            continue;
        }
        i += 1;
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}
