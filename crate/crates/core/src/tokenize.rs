//! Lowercasing word/punctuation tokenizer shared by the n-gram scorer,
//! the TF-IDF embedder and the distinguishing-word counts.

/// Splits `text` into lowercase tokens.
///
/// A token is either a maximal run of alphanumeric characters (apostrophes
/// between two alphanumerics stay inside the word, so `don't` is one token)
/// or a single punctuation/symbol character. Whitespace separates tokens
/// and is never emitted.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if is_apostrophe(c)
            && !word.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            word.push('\'');
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() && !c.is_control() {
                tokens.extend(std::iter::once(c.to_lowercase().collect::<String>()));
            }
        }
        i += 1;
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}
