//! Text normalization used wherever model output is compared against
//! expected strings.

/// Collapses runs of whitespace to a single space, trims the ends and maps
/// typographic quotes and apostrophes to their ASCII forms.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(match ch {
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' => '\'',
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' => '"',
            other => other,
        });
    }
    out
}

/// Normalized equality.
pub fn same(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

/// The decision body with the leading `"<char_name> "` and the trailing
/// sentence punctuation removed, e.g. `"decides to build the missile"`.
pub fn decision_clause(decision: &str, char_name: &str) -> String {
    let norm = normalize(decision);
    let name = normalize(char_name);
    let body = norm
        .strip_prefix(&name)
        .map(str::trim_start)
        .unwrap_or(norm.as_str());
    body.trim_end_matches(['.', '!', ';', ' ']).to_string()
}

/// The action itself: the decision with `"<char_name> decides to "` removed.
pub fn decision_action(decision: &str, char_name: &str) -> String {
    let clause = decision_clause(decision, char_name);
    clause
        .strip_prefix("decides to ")
        .map(str::to_string)
        .unwrap_or(clause)
}
