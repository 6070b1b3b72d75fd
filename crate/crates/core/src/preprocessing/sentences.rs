/// Lowercase words whose trailing period never ends a sentence.
pub const ABBREVIATIONS: [&str; 13] = [
    "dr", "mr", "mrs", "ms", "prof", "st", "vs", "e.g", "i.e", "approx", "fig", "cf", "resp",
];

fn is_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Rule-based splitter: a sentence ends at `.`, `!` or `?` followed by
/// whitespace and an uppercase letter, or by the end of the text, unless the
/// period closes a guarded abbreviation.
pub fn split_sentences(report: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = report.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(i, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let end = i + ch.len_utf8();
        let rest = &chars[k + 1..];
        let boundary = match rest.iter().position(|&(_, c)| !c.is_whitespace()) {
            None => true,
            Some(0) => false,
            Some(p) => rest[p].1.is_uppercase(),
        };
        if !boundary || (ch == '.' && is_abbreviation(&report[start..i])) {
            continue;
        }
        let s = report[start..end].trim();
        if !s.is_empty() && s.chars().any(|c| c.is_alphanumeric()) {
            out.push(s.to_string());
        }
        start = end;
    }
    let tail = report[start..].trim();
    if tail.chars().any(|c| c.is_alphanumeric()) {
        out.push(tail.to_string());
    }
    out
}
