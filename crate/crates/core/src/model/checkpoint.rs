//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! "RCPT" | u32 version | u32 len, config JSON | u8 stage
//! | [u8; 32] token vocab digest | [u8; 32] ingredient vocab digest
//! | u32 len, token vocab text | u32 len, ingredient vocab TSV
//! | u32 tensor count | per tensor: u16 len, name | u8 dtype | u8 ndim | u64 dims.. | raw data
//! ```

use std::path::Path;

use super::{ModelConfig, RecipeModel, TrainingStage};
use crate::corpus::{IngredientVocab, TokenVocab};
use crate::tensor::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RCPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn save_checkpoint(model: &RecipeModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `ingredients` is given its digest must match the
/// one recorded in the file.
pub fn load_checkpoint(path: &Path, ingredients: Option<&IngredientVocab>) -> Result<RecipeModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = from_bytes(&bytes)?;
    if let Some(v) = ingredients {
        if v.digest() != model.ingredients().digest() {
            return Err(Error::VocabMismatch { which: "ingredient" });
        }
    }
    Ok(model)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub(crate) fn to_bytes(model: &RecipeModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_blob(&mut out, serde_json::to_string(model.config())?.as_bytes());
    out.push(model.stage().tag());
    out.extend_from_slice(&model.tokens().digest());
    out.extend_from_slice(&model.ingredients().digest());
    put_blob(&mut out, model.tokens().to_text().as_bytes());
    put_blob(&mut out, model.ingredients().to_tsv().as_bytes());
    let params = model.params();
    put_u32(&mut out, params.len() as u32);
    for (_, name, m) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(2);
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::CorruptCheckpoint("text section is not UTF-8".into()))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<RecipeModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::CorruptCheckpoint("missing magic bytes".into()))? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_str(r.text()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config record: {e}")))?;
    let stage = TrainingStage::from_tag(r.u8()?)
        .ok_or_else(|| Error::CorruptCheckpoint("unknown stage marker".into()))?;
    let tok_digest = r.digest()?;
    let ing_digest = r.digest()?;
    let tokens = TokenVocab::from_text(r.text()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("token vocabulary: {e}")))?;
    let ingredients = IngredientVocab::from_tsv(r.text()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("ingredient vocabulary: {e}")))?;
    if tokens.digest() != tok_digest {
        return Err(Error::VocabMismatch { which: "token" });
    }
    if ingredients.digest() != ing_digest {
        return Err(Error::VocabMismatch { which: "ingredient" });
    }
    let mut model = RecipeModel::new(config, tokens, ingredients, 0)
        .map_err(|e| Error::CorruptCheckpoint(format!("inconsistent config: {e}")))?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{n} tensors stored, layout needs {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; n];
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::CorruptCheckpoint(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let ndim = r.u8()?;
        if ndim != 2 {
            return Err(Error::CorruptCheckpoint(format!("tensor {name}: {ndim} dimensions")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let id = model
            .params()
            .lookup(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected tensor {name}")))?;
        if model.params().get(id).shape() != (rows, cols) {
            return Err(Error::CorruptCheckpoint(format!("tensor {name}: shape mismatch")));
        }
        let raw = r.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.params_mut().get_mut(id) = Matrix::from_vec(rows, cols, data);
        seen[id.index()] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::CorruptCheckpoint("missing tensors".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensor table".into()));
    }
    model.set_stage(stage);
    Ok(model)
}
