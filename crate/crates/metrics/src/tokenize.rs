use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub source: String,
}

/// NFKC, lowercase, then Unicode word boundaries (UAX #29). Punctuation and
/// whitespace segments are dropped.
pub fn tokenize(text: &str) -> TokenizedText {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    TokenizedText {
        tokens: folded.unicode_words().map(str::to_owned).collect(),
        source: text.to_owned(),
    }
}
