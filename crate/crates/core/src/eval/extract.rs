//! First-word label extraction.

/// Outcome of reading a label out of generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    /// Index into the label set.
    Class(usize),
    Unparseable,
}

const ECHO: &str = "resposta";

fn fold_accents(c: char) -> char {
    match c {
        'á' | 'à' | 'â' | 'ã' | 'ä' => 'a',
        'é' | 'è' | 'ê' | 'ë' => 'e',
        'í' | 'ì' | 'î' | 'ï' => 'i',
        'ó' | 'ò' | 'ô' | 'õ' | 'ö' => 'o',
        'ú' | 'ù' | 'û' | 'ü' => 'u',
        'ç' => 'c',
        'ñ' => 'n',
        other => other,
    }
}

/// Lower-cases and trims surrounding punctuation. Accents are kept unless
/// `fold` is set.
pub fn normalize_token(token: &str, fold: bool) -> String {
    let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
    let lower = trimmed.to_lowercase();
    if fold {
        lower.chars().map(fold_accents).collect()
    } else {
        lower
    }
}

/// Finds `token` in `labels` under the normalization rules.
pub fn match_label(token: &str, labels: &[String], fold: bool) -> Option<usize> {
    let key = normalize_token(token, fold);
    if key.is_empty() {
        return None;
    }
    labels.iter().position(|l| normalize_token(l, fold) == key)
}

/// Reads the class from generated text: skip an echoed "Resposta:", take the
/// first whitespace-delimited token, match it against `labels`.
pub fn extract_label(generated: &str, labels: &[String], fold: bool) -> Prediction {
    let mut tokens = generated.split_whitespace().peekable();
    if let Some(first) = tokens.peek() {
        let lower = first.to_lowercase();
        if lower.starts_with(ECHO) && normalize_token(first, false) == ECHO {
            let had_colon = first.ends_with(':');
            tokens.next();
            if !had_colon && tokens.peek() == Some(&":") {
                tokens.next();
            }
        }
    }
    tokens
        .next()
        .and_then(|t| match_label(t, labels, fold))
        .map_or(Prediction::Unparseable, Prediction::Class)
}
