use std::collections::HashSet;

use super::{split_camel, CodeRecord, DropReason, TokenFilter};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Punct(char),
}

/// Identifiers and punctuation of Java-like source. Comments, string and
/// character literals and numbers are dropped.
fn lex(src: &str) -> Vec<Tok> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '/' if chars.get(i + 1) == Some(&'*') => {
                i += 2;
                while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                    i += 1;
                }
                i += 2;
            }
            '"' | '\'' => {
                i += 1;
                while i < chars.len() && chars[i] != c {
                    if chars[i] == '\\' {
                        i += 1;
                    }
                    i += 1;
                }
                i += 1;
            }
            c if c.is_alphabetic() || c == '_' || c == '$' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            c if c.is_numeric() => {
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '.') {
                    i += 1;
                }
            }
            c if c.is_whitespace() => i += 1,
            c => {
                out.push(Tok::Punct(c));
                i += 1;
            }
        }
    }
    out
}

fn is_punct(t: Option<&Tok>, c: char) -> bool {
    matches!(t, Some(Tok::Punct(p)) if *p == c)
}

/// Index just past a balanced `<...>` starting at `i`, or `i` if there is none.
fn skip_generics(toks: &[Tok], i: usize) -> usize {
    if !is_punct(toks.get(i), '<') {
        return i;
    }
    let mut depth = 0;
    for (k, t) in toks.iter().enumerate().skip(i) {
        match t {
            Tok::Punct('<') => depth += 1,
            Tok::Punct('>') => {
                depth -= 1;
                if depth == 0 {
                    return k + 1;
                }
            }
            Tok::Punct(';' | '{' | '}' | '(' | ')') => return i,
            _ => {}
        }
    }
    i
}

struct Method<'a> {
    name: String,
    body: &'a [Tok],
}

fn locate_method<'a>(toks: &'a [Tok], filter: &TokenFilter) -> Option<Method<'a>> {
    let name_at = (0..toks.len()).find(|&i| match &toks[i] {
        Tok::Ident(id) => {
            is_punct(toks.get(i + 1), '(')
                && !filter.is_keyword(id)
                && !(i > 0 && is_punct(toks.get(i - 1), '@'))
        }
        _ => false,
    })?;
    let Tok::Ident(name) = &toks[name_at] else {
        return None;
    };
    // Closing parenthesis of the parameter list.
    let mut depth = 0;
    let mut close = None;
    for (k, t) in toks.iter().enumerate().skip(name_at + 1) {
        match t {
            Tok::Punct('(') => depth += 1,
            Tok::Punct(')') => {
                depth -= 1;
                if depth == 0 {
                    close = Some(k);
                    break;
                }
            }
            _ => {}
        }
    }
    let open = (close? + 1..toks.len()).find(|&k| is_punct(toks.get(k), '{'))?;
    let mut depth = 0;
    for (k, t) in toks.iter().enumerate().skip(open) {
        match t {
            Tok::Punct('{') => depth += 1,
            Tok::Punct('}') => {
                depth -= 1;
                if depth == 0 {
                    return Some(Method {
                        name: name.clone(),
                        body: &toks[open + 1..k],
                    });
                }
            }
            _ => {}
        }
    }
    None
}

/// Call sites in order: every identifier directly before `(` (or before a
/// generic argument list following `new`) that is not a keyword and not a
/// bare recursive call. Receiver-qualified calls are always kept.
fn api_calls(body: &[Tok], own_name: &str, filter: &TokenFilter) -> Vec<String> {
    let mut out = Vec::new();
    for (i, t) in body.iter().enumerate() {
        let Tok::Ident(id) = t else { continue };
        if filter.is_keyword(id) {
            continue;
        }
        let after_new = i > 0 && body[i - 1] == Tok::Ident("new".into());
        let next = if after_new { skip_generics(body, i + 1) } else { i + 1 };
        if !is_punct(body.get(next), '(') {
            continue;
        }
        let dotted = i > 0 && is_punct(body.get(i - 1), '.');
        if !dotted && !after_new && id == own_name {
            continue;
        }
        out.push(id.clone());
    }
    out
}

/// Camel-splits, lowercases, filters and deduplicates (first occurrence wins).
pub fn normalize_tokens<'a, I>(words: I, filter: &TokenFilter) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for w in words {
        for part in split_camel(w) {
            if filter.keeps(&part) && seen.insert(part.clone()) {
                out.push(part);
            }
        }
    }
    out
}

/// Lowercases and strips punctuation, returning whitespace-separated words.
pub fn normalize_description(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// First sentence of a doc comment with comment markers removed. Javadoc
/// block tags (`@param` and later) are ignored.
fn first_sentence(comment: &str) -> String {
    let mut text = String::new();
    for line in comment.lines() {
        let line = line
            .trim()
            .trim_start_matches("/**")
            .trim_start_matches("/*")
            .trim_start_matches("//")
            .trim_end_matches("*/")
            .trim_start_matches('*')
            .trim();
        if line.starts_with('@') {
            break;
        }
        if !line.is_empty() {
            text.push_str(line);
            text.push(' ');
        }
    }
    let chars: Vec<char> = text.chars().collect();
    let end = (0..chars.len())
        .find(|&i| matches!(chars[i], '.' | '?' | '!') && chars.get(i + 1).is_none_or(|c| c.is_whitespace()))
        .unwrap_or(chars.len());
    chars[..end].iter().collect()
}

/// Comments preceding the first line of code, markers included.
pub fn leading_comment(src: &str) -> String {
    let mut rest = src.trim_start();
    let mut out = String::new();
    loop {
        if let Some(body) = rest.strip_prefix("/*") {
            let end = body.find("*/").map_or(body.len(), |e| e + 2);
            out.push_str("/*");
            out.push_str(&body[..end]);
            out.push('\n');
            rest = body[end..].trim_start();
        } else if rest.starts_with("//") {
            let end = rest.find('\n').unwrap_or(rest.len());
            out.push_str(&rest[..end]);
            out.push('\n');
            rest = rest[end..].trim_start();
        } else {
            return out;
        }
    }
}

/// Extracts the three code features and the description from raw source.
pub fn extract_features(
    id: &str,
    raw_method: &str,
    raw_comment: &str,
    filter: &TokenFilter,
) -> Result<CodeRecord, DropReason> {
    let toks = lex(raw_method);
    let method = locate_method(&toks, filter).ok_or(DropReason::Unparseable)?;
    let api_sequence_tokens = api_calls(method.body, &method.name, filter);
    let body_words = method.body.iter().filter_map(|t| match t {
        Tok::Ident(s) => Some(s.as_str()),
        Tok::Punct(_) => None,
    });
    let record = CodeRecord {
        id: id.to_string(),
        method_name_tokens: split_camel(&method.name),
        method_name: method.name,
        api_sequence_tokens,
        body_tokens: normalize_tokens(body_words, filter),
        description_tokens: normalize_description(&first_sentence(raw_comment)),
        raw_source: Some(raw_method.to_string()),
    };
    record.validate()?;
    Ok(record)
}
