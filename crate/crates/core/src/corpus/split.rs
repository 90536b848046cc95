#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Lower,
    Upper,
    Digit,
    Other,
}

fn class(c: char) -> Class {
    if c.is_numeric() {
        Class::Digit
    } else if c.is_uppercase() {
        Class::Upper
    } else if c.is_alphabetic() {
        Class::Lower
    } else {
        Class::Other
    }
}

/// Splits an identifier into lowercase words.
///
/// Boundaries: lower→upper (`getValue`), letter↔digit (`utf8Decode`), the
/// last capital of an acronym run before a lowercase letter (`HTTPResponse`),
/// and any non-alphanumeric character such as `_`.
pub fn split_camel(identifier: &str) -> Vec<String> {
    let chars: Vec<char> = identifier.chars().collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let cls = class(c);
        if cls == Class::Other {
            flush(&mut current, &mut words);
            continue;
        }
        if let Some(&prev) = i.checked_sub(1).map(|p| &chars[p]) {
            let prev_cls = class(prev);
            let next_lower = chars.get(i + 1).is_some_and(|n| class(*n) == Class::Lower);
            let boundary = match (prev_cls, cls) {
                (Class::Lower, Class::Upper) => true,
                (Class::Digit, Class::Lower | Class::Upper) => true,
                (Class::Lower | Class::Upper, Class::Digit) => true,
                (Class::Upper, Class::Upper) => next_lower,
                _ => false,
            };
            if boundary {
                flush(&mut current, &mut words);
            }
        }
        current.extend(c.to_lowercase());
    }
    flush(&mut current, &mut words);
    if words.is_empty() && !identifier.is_empty() {
        words.push(identifier.to_lowercase());
    }
    words
}

fn flush(current: &mut String, words: &mut Vec<String>) {
    if !current.is_empty() {
        words.push(std::mem::take(current));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_camel_case() {
        assert_eq!(split_camel("getValue"), ["get", "value"]);
        assert_eq!(split_camel("getThemeImage"), ["get", "theme", "image"]);
        assert_eq!(split_camel("x"), ["x"]);
    }

    #[test]
    fn acronyms_digits_and_underscores() {
        assert_eq!(split_camel("parseHTTPResponse2Json"), ["parse", "http", "response", "2", "json"]);
        assert_eq!(split_camel("MAX_VALUE"), ["max", "value"]);
        assert_eq!(split_camel("snake_case_name"), ["snake", "case", "name"]);
        assert_eq!(split_camel("HashMap"), ["hash", "map"]);
        assert_eq!(split_camel("URL"), ["url"]);
        assert_eq!(split_camel("base64Encode"), ["base", "64", "encode"]);
    }

    #[test]
    fn degenerate_input_is_returned_lowercased() {
        assert_eq!(split_camel("___"), ["___"]);
        assert!(split_camel("").is_empty());
    }

    #[test]
    fn splitting_is_idempotent_on_words() {
        for w in split_camel("readAllBytesFromInputStream2X") {
            assert_eq!(split_camel(&w), vec![w.clone()]);
        }
    }
}
