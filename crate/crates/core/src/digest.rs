//! Content digests and seed derivation shared by manifests.

use sha2::{Digest, Sha256};

use crate::corpus::SentencePair;
use crate::text_norm::TokenSentence;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex digits of a sha256 digest.
pub fn short(digest: &str) -> &str {
    &digest[..16.min(digest.len())]
}

/// Digest of a corpus in its labelled TSV form.
pub fn pairs_digest(pairs: &[SentencePair]) -> String {
    let mut buf = Vec::new();
    crate::corpus::write_tsv(&mut buf, pairs, true).expect("writing to memory");
    sha256_hex(&buf)
}

pub fn sentences_digest(sents: &[TokenSentence]) -> String {
    let mut buf = Vec::new();
    crate::corpus::write_lines(&mut buf, sents).expect("writing to memory");
    sha256_hex(&buf)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` under a global seed.
pub fn item_seed(global: u64, index: u64) -> u64 {
    mix64(global ^ mix64(index))
}

/// Seed for a named sub-task under a global seed.
pub fn label_seed(global: u64, label: &str) -> u64 {
    let d = Sha256::digest(label.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&d[..8]);
    mix64(global ^ u64::from_le_bytes(word))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(short("ba7816bf8f01cfea414140de"), "ba7816bf8f01cfea");
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(item_seed(1, 0), item_seed(1, 1));
        assert_ne!(item_seed(1, 0), item_seed(2, 0));
        assert_ne!(label_seed(7, "bt"), label_seed(7, "ft"));
        assert_eq!(label_seed(7, "bt"), label_seed(7, "bt"));
    }
}
