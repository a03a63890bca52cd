//! Label normalization shared by every matching rule in the crate.

/// Trims, lowercases and collapses internal whitespace runs to one space.
pub fn normalize(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Number of whitespace tokens of the normalized label.
pub fn token_count(label: &str) -> usize {
    label.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_whitespace() {
        assert_eq!(normalize("  Long\t  Tail \n"), "long tail");
        assert_eq!(normalize("Cat "), "cat");
        assert_eq!(normalize("   "), "");
    }

    #[test]
    fn counts_tokens() {
        assert_eq!(token_count("very long curved horn"), 4);
        assert_eq!(token_count(""), 0);
    }
}
