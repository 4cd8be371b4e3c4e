//! Byte-level tokenizer: ids 0..3 are special, every byte `b` maps to `b + 3`.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect()
}

/// Raw bytes for a token sequence. Special tokens are rejected.
pub fn detokenize_bytes(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            if (BYTE_OFFSET..VOCAB_SIZE as u32).contains(&t) {
                Ok((t - BYTE_OFFSET) as u8)
            } else {
                Err(Error::Data(format!("token id {t} is not a byte token")))
            }
        })
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<String> {
    String::from_utf8(detokenize_bytes(tokens)?)
        .map_err(|e| Error::Data(format!("tokens do not form valid UTF-8: {e}")))
}

/// Decoding for model output, which need not be valid UTF-8. Special tokens are skipped.
pub fn detokenize_lossy(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t >= BYTE_OFFSET && (t as usize) < VOCAB_SIZE)
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_offsets() {
        assert_eq!(tokenize("abc"), vec![100, 101, 102]);
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn special_and_out_of_range_rejected() {
        assert!(detokenize(&[EOS]).is_err());
        assert!(detokenize(&[VOCAB_SIZE as u32]).is_err());
    }

    #[test]
    fn lossy_skips_specials() {
        let mut t = vec![BOS];
        t.extend(tokenize("oi"));
        t.push(EOS);
        assert_eq!(detokenize_lossy(&t), "oi");
    }

    proptest! {
        #[test]
        fn round_trip(s in "\\PC*") {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
