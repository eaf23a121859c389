//! Word-level text handling shared by ingestion, truncation and statistics.

/// Collapses runs of Unicode whitespace to single spaces and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace-delimited word tokens.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn word_count(text: &str) -> usize {
    words(text).count()
}

/// Keeps the first `cap` words. Returns the (normalized) text and whether
/// anything was dropped.
pub fn truncate_words(text: &str, cap: usize) -> (String, bool) {
    let mut kept = Vec::with_capacity(cap.min(1024));
    let mut dropped = false;
    for (i, w) in words(text).enumerate() {
        if i < cap {
            kept.push(w);
        } else {
            dropped = true;
            break;
        }
    }
    (kept.join(" "), dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_collapses_unicode_whitespace() {
        assert_eq!(normalize_whitespace("  a\t\u{00a0}b\n\nc  "), "a b c");
        assert_eq!(normalize_whitespace("\u{2003}"), "");
    }

    #[test]
    fn truncation_boundary() {
        assert_eq!(truncate_words("a b c", 3), ("a b c".to_string(), false));
        assert_eq!(truncate_words("a b c d", 3), ("a b c".to_string(), true));
        assert_eq!(word_count("a  b\tc"), 3);
    }
}
