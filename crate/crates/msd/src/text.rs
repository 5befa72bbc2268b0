//! Shared tokenizer: lowercase, split on whitespace, keep punctuation as
//! single-character tokens. Deterministic by construction.

/// Splits text into lowercased word and punctuation tokens.
///
/// Alphanumeric runs become one token each; every other non-whitespace
/// character becomes its own token. `"BrandX low-sugar: Ice"` tokenizes to
/// `["brandx", "low", "-", "sugar", ":", "ice"]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token set for Jaccard overlap computations.
pub fn token_set(text: &str) -> std::collections::BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Jaccard similarity of two token sets; 0 when both are empty.
pub fn jaccard(a: &std::collections::BTreeSet<String>, b: &std::collections::BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("BrandX low-sugar: Ice Cream"),
            vec!["brandx", "low", "-", "sugar", ":", "ice", "cream"]
        );
    }

    #[test]
    fn tokenize_empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }

    #[test]
    fn tokenize_is_deterministic() {
        let t = "EXPLICIT: a; b";
        assert_eq!(tokenize(t), tokenize(t));
    }

    #[test]
    fn jaccard_basics() {
        let a = token_set("premium ice cream");
        let b = token_set("premium cream soda");
        // inter = {premium, cream} = 2, union = 4
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a), 1.0);
        let empty = token_set("");
        assert_eq!(jaccard(&empty, &empty), 0.0);
    }
}
