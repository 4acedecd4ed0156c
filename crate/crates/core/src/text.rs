//! Word-level text normalisation shared by the corpus and the tokenizer.

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases and collapses internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Splits on whitespace and peels leading/trailing punctuation into separate
/// tokens. Word-internal hyphens and apostrophes stay attached
/// (`hotel-area` is one token).
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && PUNCT.contains(&chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && PUNCT.contains(&chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// All start positions where `needle` occurs as a contiguous run in `haystack`.
pub fn find_all<T: PartialEq>(haystack: &[T], needle: &[T]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len()).filter(|&i| haystack[i..i + needle.len()] == *needle).collect()
}

pub fn is_question(text: &str) -> bool {
    text.contains('?')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_but_keeps_hyphens() {
        assert_eq!(words("The hotel-area is North."), vec!["the", "hotel-area", "is", "north", "."]);
        assert_eq!(words("(yes) ok?!"), vec!["(", "yes", ")", "ok", "?", "!"]);
        assert!(words("   ").is_empty());
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  Palace   HOTEL "), "palace hotel");
    }

    #[test]
    fn find_all_reports_every_occurrence() {
        let h = words("a table for a table");
        assert_eq!(find_all(&h, &words("a table")), vec![0, 3]);
        assert!(find_all(&h, &words("table a table a table")).is_empty());
    }
}
