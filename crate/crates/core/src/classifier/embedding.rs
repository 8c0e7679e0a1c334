use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Text and image embeddings of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub prompt_id: String,
    #[serde(rename = "text")]
    pub text_part: Vec<f64>,
    #[serde(rename = "image")]
    pub image_part: Vec<f64>,
}

impl EmbeddingVector {
    /// Model input: text part followed by image part.
    pub fn combined(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.text_part.len() + self.image_part.len());
        out.extend_from_slice(&self.text_part);
        out.extend_from_slice(&self.image_part);
        out
    }
}

/// A set of embeddings sharing one text and one image dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    pub text_dim: usize,
    pub image_dim: usize,
    vectors: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(text_dim: usize, image_dim: usize) -> Self {
        Self {
            text_dim,
            image_dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.text_dim + self.image_dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn get(&self, prompt_id: &str) -> Option<&EmbeddingVector> {
        self.index.get(prompt_id).map(|&i| &self.vectors[i])
    }

    pub fn push(&mut self, v: EmbeddingVector) -> Result<()> {
        if v.text_part.len() != self.text_dim {
            return Err(Error::DimensionMismatch {
                expected: self.text_dim,
                actual: v.text_part.len(),
            });
        }
        if v.image_part.len() != self.image_dim {
            return Err(Error::DimensionMismatch {
                expected: self.image_dim,
                actual: v.image_part.len(),
            });
        }
        if v.text_part
            .iter()
            .chain(&v.image_part)
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "non-finite embedding for {}",
                v.prompt_id
            )));
        }
        if self.index.contains_key(&v.prompt_id) {
            return Err(Error::DuplicateIdConflict(v.prompt_id));
        }
        self.index.insert(v.prompt_id.clone(), self.vectors.len());
        self.vectors.push(v);
        Ok(())
    }

    /// Binary form: little-endian u32 text dim, u32 image dim, u32 count,
    /// then per record a u32 id length, the UTF-8 id and the f32 values.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let text_dim = r.read_u32::<LittleEndian>()? as usize;
        let image_dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut set = Self::new(text_dim, image_dim);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let prompt_id = String::from_utf8(id)
                .map_err(|e| Error::InvalidConfig(format!("embedding id: {e}")))?;
            let mut read = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| Ok(r.read_f32::<LittleEndian>()? as f64))
                    .collect()
            };
            let text_part = read(text_dim)?;
            let image_part = read(image_dim)?;
            set.push(EmbeddingVector {
                prompt_id,
                text_part,
                image_part,
            })?;
        }
        Ok(set)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.text_dim as u32)?;
        w.write_u32::<LittleEndian>(self.image_dim as u32)?;
        w.write_u32::<LittleEndian>(self.vectors.len() as u32)?;
        for v in &self.vectors {
            w.write_u32::<LittleEndian>(v.prompt_id.len() as u32)?;
            w.write_all(v.prompt_id.as_bytes())?;
            for x in v.text_part.iter().chain(&v.image_part) {
                w.write_f32::<LittleEndian>(*x as f32)?;
            }
        }
        Ok(())
    }

    /// Text form: one `{"prompt_id", "text", "image"}` object per line.
    /// Dimensions come from the first record.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut set: Option<Self> = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: EmbeddingVector =
                serde_json::from_str(&line).map_err(|e| Error::SchemaError {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            set.get_or_insert_with(|| Self::new(v.text_part.len(), v.image_part.len()))
                .push(v)?;
        }
        Ok(set.unwrap_or_default())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for v in &self.vectors {
            serde_json::to_writer(&mut w, v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Loads `.jsonl`/`.json` files as text, anything else as binary.
    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        if is_text_path(path) {
            Self::read_jsonl(f)
        } else {
            Self::read_binary(f)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        if is_text_path(path) {
            self.write_jsonl(&mut f)?;
        } else {
            self.write_binary(&mut f)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn is_text_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "json")
    )
}
