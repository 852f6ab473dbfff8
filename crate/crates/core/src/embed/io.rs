//! Binary embedding file.
//!
//! Layout (all integers little-endian `u64`, floats little-endian `f64`):
//!
//! ```text
//! "SEEDEMB1"
//! dim l_min l_max context_window negatives_per_positive epochs n_words n_subwords
//! learning_rate
//! n_words    x (u32 byte length, UTF-8 bytes)
//! n_subwords x (u32 byte length, UTF-8 bytes)
//! input vectors   (n_words + n_subwords) x dim
//! output vectors  n_words x dim
//! ```

use std::fs;
use std::path::Path;

use super::{EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SEEDEMB1";

pub fn save_embeddings(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBEDDING_MAGIC);
    for v in [
        c.dim,
        c.l_min,
        c.l_max,
        c.context_window,
        c.negatives_per_positive,
        c.epochs,
        model.words().len(),
        model.subwords().len(),
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&c.learning_rate.to_le_bytes());
    for s in model.words().iter().chain(model.subwords()) {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    for v in model.input_vectors().iter().chain(model.output_vectors()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: expected_total.max((self.pos + n) as u64),
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, 0)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, 0)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, expected_total: u64) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, expected_total)?.try_into().expect("8 bytes")))
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8, 8)?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format(format!(
            "bad embedding magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(EMBEDDING_MAGIC)
        )));
    }
    let mut meta = [0u64; 8];
    for m in &mut meta {
        *m = r.u64()?;
    }
    let [dim, l_min, l_max, window, negatives, epochs, n_words, n_subwords] = meta.map(|v| v as usize);
    let learning_rate = r.f64(0)?;
    let config = EmbeddingConfig {
        dim,
        l_min,
        l_max,
        context_window: window,
        negatives_per_positive: negatives,
        epochs,
        learning_rate,
    };
    config.validate().map_err(|e| Error::Format(format!("invalid embedding header: {e}")))?;

    let mut strings = Vec::with_capacity(n_words + n_subwords);
    for _ in 0..n_words + n_subwords {
        let len = r.u32()? as usize;
        let raw = r.take(len, 0)?;
        strings.push(
            String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(format!("vocabulary entry is not UTF-8: {e}")))?,
        );
    }
    let subwords = strings.split_off(n_words);
    let words = strings;

    let n_input = (n_words + n_subwords) * dim;
    let n_output = n_words * dim;
    let expected = (r.pos + 8 * (n_input + n_output)) as u64;
    if expected != bytes.len() as u64 {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let input = (0..n_input).map(|_| r.f64(expected)).collect::<Result<Vec<_>>>()?;
    let output = (0..n_output).map(|_| r.f64(expected)).collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingModel::from_parts(config, words, subwords, input, output))
}
