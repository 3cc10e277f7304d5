//! Binary parameter persistence.
//!
//! Layout: magic "DBMF", version u32, section count u32, then per section a
//! u16 name length, the UTF-8 name, a dtype byte (0 = 32-bit floats,
//! 1 = UTF-8 JSON), a rank byte, the dims as u32s, and the raw payload. All
//! integers and floats are little-endian. Metadata travels as one JSON
//! section named "__meta__". Files are written to a temporary sibling and
//! renamed into place.

use std::io::{Cursor, Read, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::{json, Value};

use crate::classifier::{ClassifierParams, HiddenLayer};
use crate::error::{Error, Result};
use crate::net::NetParams;

const MAGIC: &[u8; 4] = b"DBMF";
const VERSION: u32 = 1;
const META_NAME: &str = "__meta__";
const DTYPE_F32: u8 = 0;
const DTYPE_JSON: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSection {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<TensorSection>,
    pub meta: Value,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&TensorSection> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing section {name}")))
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata is missing {key}")))
    }

    fn check_model_tag(&self, want: &str) -> Result<()> {
        match self.meta.get("model").and_then(Value::as_str) {
            Some(tag) if tag == want => Ok(()),
            Some(tag) => Err(Error::Format(format!(
                "checkpoint holds a {tag} model, expected {want}"
            ))),
            None => Err(Error::Format("checkpoint metadata has no model tag".into())),
        }
    }
}

fn encode(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for s in &checkpoint.sections {
        if s.name == META_NAME {
            return Err(Error::Format(format!("{META_NAME} is reserved for metadata")));
        }
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Format(format!("duplicate section name {}", s.name)));
        }
        if s.name.len() > u16::MAX as usize || s.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("section {} header does not fit", s.name)));
        }
        let count: u64 = s.dims.iter().map(|&d| d as u64).product();
        if count != s.data.len() as u64 {
            return Err(Error::Shape(format!(
                "section {} declares {count} elements but holds {}",
                s.name,
                s.data.len()
            )));
        }
    }
    let meta_bytes = serde_json::to_string(&checkpoint.meta)
        .map_err(|e| Error::Format(e.to_string()))?
        .into_bytes();

    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(checkpoint.sections.len() as u32 + 1)?;
    for s in &checkpoint.sections {
        out.write_u16::<LittleEndian>(s.name.len() as u16)?;
        out.write_all(s.name.as_bytes())?;
        out.write_u8(DTYPE_F32)?;
        out.write_u8(s.dims.len() as u8)?;
        for &d in &s.dims {
            out.write_u32::<LittleEndian>(d)?;
        }
        for &v in &s.data {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.write_u16::<LittleEndian>(META_NAME.len() as u16)?;
    out.write_all(META_NAME.as_bytes())?;
    out.write_u8(DTYPE_JSON)?;
    out.write_u8(1)?;
    out.write_u32::<LittleEndian>(meta_bytes.len() as u32)?;
    out.write_all(&meta_bytes)?;
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, not a checkpoint")));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let n_sections = cur.read_u32::<LittleEndian>()?;
    let mut sections = Vec::new();
    let mut meta: Option<Value> = None;
    for _ in 0..n_sections {
        let name_len = cur.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("section name is not UTF-8: {e}")))?;
        let dtype = cur.read_u8()?;
        let rank = cur.read_u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.read_u32::<LittleEndian>()?);
        }
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        match dtype {
            DTYPE_F32 => {
                let mut data = vec![0f32; count as usize];
                cur.read_f32_into::<LittleEndian>(&mut data)?;
                sections.push(TensorSection { name, dims, data });
            }
            DTYPE_JSON => {
                if name != META_NAME {
                    return Err(Error::Format(format!("JSON section {name} is not {META_NAME}")));
                }
                if meta.is_some() {
                    return Err(Error::Format("duplicate metadata section".into()));
                }
                let mut text = vec![0u8; count as usize];
                cur.read_exact(&mut text)?;
                let text = String::from_utf8(text)
                    .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
                meta = Some(
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Format(format!("metadata is not JSON: {e}")))?,
                );
            }
            other => return Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::Format("trailing bytes after the last section".into()));
    }
    Ok(Checkpoint { sections, meta: meta.unwrap_or(Value::Null) })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = encode(checkpoint)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new()?,
    };
    tmp.write_all(&bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Denoiser parameters as named sections plus a dims-bearing metadata object.
/// `extra` entries are merged into the metadata.
pub fn net_to_checkpoint(params: &NetParams, extra: &Value) -> Result<Checkpoint> {
    let dims: std::collections::HashMap<&str, Vec<u32>> = [
        ("class_embed", vec![params.num_classes() as u32, params.class_embed_dim() as u32]),
        ("w_in", vec![params.hidden_dim() as u32, params.input_dim() as u32]),
        ("b_in", vec![params.hidden_dim() as u32]),
        ("w_hidden", vec![params.hidden_dim() as u32, params.hidden_dim() as u32]),
        ("b_hidden", vec![params.hidden_dim() as u32]),
        ("w_out", vec![params.data_dim() as u32, params.hidden_dim() as u32]),
        ("b_out", vec![params.data_dim() as u32]),
    ]
    .into_iter()
    .collect();
    let sections = params
        .arrays()
        .into_iter()
        .map(|(name, data)| TensorSection {
            name: name.to_string(),
            dims: dims[name].clone(),
            data: data.to_vec(),
        })
        .collect();
    let mut meta = json!({
        "model": "denoiser",
        "data_dim": params.data_dim(),
        "hidden_dim": params.hidden_dim(),
        "time_embed_dim": params.time_embed_dim(),
        "class_embed_dim": params.class_embed_dim(),
        "num_classes": params.num_classes(),
    });
    if let Some(obj) = extra.as_object() {
        for (k, v) in obj {
            meta[k] = v.clone();
        }
    }
    Ok(Checkpoint { sections, meta })
}

pub fn net_from_checkpoint(checkpoint: &Checkpoint) -> Result<NetParams> {
    checkpoint.check_model_tag("denoiser")?;
    let get = |name: &str| -> Result<Vec<f32>> { Ok(checkpoint.section(name)?.data.clone()) };
    NetParams::from_arrays(
        checkpoint.meta_usize("data_dim")?,
        checkpoint.meta_usize("hidden_dim")?,
        checkpoint.meta_usize("time_embed_dim")?,
        checkpoint.meta_usize("class_embed_dim")?,
        checkpoint.meta_usize("num_classes")?,
        get("class_embed")?,
        get("w_in")?,
        get("b_in")?,
        get("w_hidden")?,
        get("b_hidden")?,
        get("w_out")?,
        get("b_out")?,
    )
}

/// Base classifier parameters; a hidden_dim of 0 in the metadata marks a
/// linear model with no hidden sections.
pub fn classifier_to_checkpoint(params: &ClassifierParams, extra: &Value) -> Result<Checkpoint> {
    let mut sections = Vec::new();
    let feature_dim = if params.hidden_dim() > 0 { params.hidden_dim() } else { params.input_dim() };
    if let Some(layer) = &params.hidden {
        sections.push(TensorSection {
            name: "hidden_w".into(),
            dims: vec![params.hidden_dim() as u32, params.input_dim() as u32],
            data: layer.w.clone(),
        });
        sections.push(TensorSection {
            name: "hidden_b".into(),
            dims: vec![params.hidden_dim() as u32],
            data: layer.b.clone(),
        });
    }
    sections.push(TensorSection {
        name: "w_out".into(),
        dims: vec![params.num_classes() as u32, feature_dim as u32],
        data: params.w_out.clone(),
    });
    sections.push(TensorSection {
        name: "b_out".into(),
        dims: vec![params.num_classes() as u32],
        data: params.b_out.clone(),
    });
    let mut meta = json!({
        "model": "classifier",
        "input_dim": params.input_dim(),
        "num_classes": params.num_classes(),
        "hidden_dim": params.hidden_dim(),
    });
    if let Some(obj) = extra.as_object() {
        for (k, v) in obj {
            meta[k] = v.clone();
        }
    }
    Ok(Checkpoint { sections, meta })
}

pub fn classifier_from_checkpoint(checkpoint: &Checkpoint) -> Result<ClassifierParams> {
    checkpoint.check_model_tag("classifier")?;
    let hidden_dim = checkpoint.meta_usize("hidden_dim")?;
    let hidden = if hidden_dim > 0 {
        Some(HiddenLayer {
            w: checkpoint.section("hidden_w")?.data.clone(),
            b: checkpoint.section("hidden_b")?.data.clone(),
        })
    } else {
        None
    };
    ClassifierParams::from_arrays(
        checkpoint.meta_usize("input_dim")?,
        checkpoint.meta_usize("num_classes")?,
        hidden,
        checkpoint.section("w_out")?.data.clone(),
        checkpoint.section("b_out")?.data.clone(),
    )
}
