//! Byte-level corpus ingestion and synthetic data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Read a UTF-8 text file as byte-level tokens (vocabulary 256), optionally
/// truncated to `max_len` tokens.
pub fn ingest_text(path: &Path, max_len: Option<usize>) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyData(format!("{} is empty", path.display())));
    }
    std::str::from_utf8(&bytes)
        .map_err(|_| Error::InvalidArg(format!("{} is not valid UTF-8", path.display())))?;
    let mut tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
    if let Some(n) = max_len {
        tokens.truncate(n);
    }
    Ok(tokens)
}

/// Letters plus a little punctuation: a 32-symbol alphabet keeps the chain's
/// entropy well below the uniform bound so loss curves have somewhere to go.
const ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz .,;:\n";

/// Deterministic order-`order` byte Markov chain over a 32-symbol alphabet.
/// Each context allows four successors with fixed probabilities
/// (0.55, 0.25, 0.12, 0.08).
pub fn synth_markov(seed: u64, order: usize, length: usize) -> Vec<usize> {
    assert!((1..=3).contains(&order), "markov order must be 1..=3");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let m = ALPHABET.len();
    let contexts = m.pow(order as u32);
    // Four allowed successors per context, sampled once up front.
    let table: Vec<[usize; 4]> = (0..contexts)
        .map(|_| {
            let mut succ = [0usize; 4];
            for s in succ.iter_mut() {
                *s = rng.random_range(0..m);
            }
            succ
        })
        .collect();
    const CUM: [f64; 4] = [0.55, 0.80, 0.92, 1.0];

    let mut out = Vec::with_capacity(length);
    let mut ctx = 0usize;
    for _ in 0..length {
        let succ = &table[ctx % contexts];
        let u: f64 = rng.random();
        let pick = CUM.iter().position(|&c| u < c).unwrap_or(3);
        let sym = succ[pick];
        out.push(ALPHABET[sym] as usize);
        ctx = (ctx * m + sym) % contexts;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn ascii_bytes_become_tokens() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"ab").unwrap();
        let tokens = ingest_text(f.path(), None).unwrap();
        assert_eq!(tokens, vec![97, 98]);
    }

    #[test]
    fn truncation_is_exact() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"hello world").unwrap();
        let tokens = ingest_text(f.path(), Some(4)).unwrap();
        assert_eq!(tokens.len(), 4);
        assert_eq!(tokens, vec![104, 101, 108, 108]);
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(ingest_text(f.path(), None), Err(Error::EmptyData(_))));
    }

    #[test]
    fn non_utf8_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&[0xff, 0xfe, 0x41]).unwrap();
        assert!(ingest_text(f.path(), None).is_err());
    }

    #[test]
    fn markov_is_reproducible() {
        let a = synth_markov(7, 2, 512);
        let b = synth_markov(7, 2, 512);
        assert_eq!(a, b);
        let c = synth_markov(8, 2, 512);
        assert_ne!(a, c);
        assert_eq!(a.len(), 512);
        assert!(a.iter().all(|&t| t < 256));
    }
}
