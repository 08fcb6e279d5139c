use std::collections::{BTreeMap, HashMap};

use crate::augment::UNK;

/// Sentence boundary token. It is fed as the first decoder input and predicted as the
/// last output.
pub const EOS: &str = "</s>";
pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Wraps an explicit token list. The first two entries must be `</s>` and `<unk>`.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }

    /// Specials first, then tokens by descending frequency, ties in byte order.
    pub fn build<'a, I: IntoIterator<Item = &'a String>>(tokens: I) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            if t != EOS && t != UNK {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut sorted: Vec<(&str, usize)> = counts.into_iter().collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut list = vec![EOS.to_string(), UNK.to_string()];
        list.extend(sorted.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(list)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_frequency() {
        let toks: Vec<String> = ["b", "a", "b", "c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let v = Vocab::build(&toks);
        assert_eq!(v.tokens(), &["</s>", "<unk>", "b", "a", "c"]);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.decode(&v.encode(&toks)), toks);
    }
}
