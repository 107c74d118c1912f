//! Persisted prompt states, CTR models and selection reports.
//!
//! FCTR layout, little-endian:
//!
//! ```text
//! "FCTR" | u32 version = 1 | u32 d_text | u32 d_ref | u32 d_out | u32 d_ext
//! f64 alpha | f64 temperature
//! w_text (d_out × d_text) | w_ref (d_out × d_ref) | out_proj (d_ext × d_out), f64 row-major
//! ```

use std::path::{Path, PathBuf};

use fsir_core::ctr::{CtrModel, CtrTrainConfig};
use fsir_core::prompt::{PromptState, TrainConfig};
use fsir_core::refselect::SelectionResult;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

/// A trained prompt as written by `refine-pl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFile {
    pub query_id: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub context: Vec<Vec<f64>>,
    pub a: f64,
    pub b: f64,
    pub config: TrainConfig,
    pub loss_trajectory: Vec<f64>,
}

impl PromptFile {
    pub fn new(query_id: &str, state: &PromptState, config: &TrainConfig, loss_trajectory: Vec<f64>) -> Self {
        Self {
            query_id: query_id.into(),
            m: state.context_len(),
            context: state.context.clone(),
            a: state.a,
            b: state.b,
            config: config.clone(),
            loss_trajectory,
        }
    }

    pub fn state(&self) -> PromptState {
        PromptState {
            composer: self.config.composer,
            context: self.context.clone(),
            a: self.a,
            b: self.b,
        }
    }
}

pub const FCTR_MAGIC: &[u8; 4] = b"FCTR";
pub const FCTR_VERSION: u32 = 1;

pub fn encode_ctr(model: &CtrModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(FCTR_MAGIC);
    w.u32(FCTR_VERSION);
    for d in [model.d_text, model.d_ref, model.d_out, model.d_ext] {
        w.u32(d as u32);
    }
    w.f64s(&[model.alpha, model.temperature]);
    w.f64s(&model.w_text);
    w.f64s(&model.w_ref);
    w.f64s(&model.out_proj);
    w.buf
}

pub fn decode_ctr(bytes: &[u8]) -> Result<CtrModel> {
    let mut r = Reader::new(bytes);
    let version = r.header(FCTR_MAGIC, "FCTR")?;
    if version != FCTR_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [d_text, d_ref, d_out, d_ext] = dims;
    let head = r.f64s(2)?;
    let payload = |rows: usize, cols: usize| rows.checked_mul(cols).filter(|&n| n <= bytes.len());
    let sizes = [payload(d_out, d_text), payload(d_out, d_ref), payload(d_ext, d_out)];
    let [Some(nt), Some(nr), Some(no)] = sizes else {
        return Err(Error::TruncatedFile);
    };
    let model = CtrModel {
        d_text,
        d_ref,
        d_out,
        d_ext,
        alpha: head[0],
        temperature: head[1],
        w_text: r.f64s(nt)?,
        w_ref: r.f64s(nr)?,
        out_proj: r.f64s(no)?,
    };
    r.finish()?;
    model.validate()?;
    Ok(model)
}

/// JSON written next to an FCTR file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrSidecar {
    pub config: CtrTrainConfig,
    pub triplets: usize,
    pub excluded_duplicates: usize,
    pub loss_trajectory: Vec<f64>,
    /// SHA-256 of the frozen image corpus, identical before and after training.
    pub external_digest: String,
}

/// `model.fctr` → `model.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

pub fn write_ctr(model: &CtrModel, sidecar: &CtrSidecar, path: &Path) -> Result<()> {
    write_file(path, &encode_ctr(model))?;
    let json = serde_json::to_string_pretty(sidecar)? + "\n";
    write_file(&sidecar_path(path), json.as_bytes())
}

pub fn read_ctr(path: &Path) -> Result<CtrModel> {
    decode_ctr(&read_file(path)?)
}

pub fn selection_report_json(results: &[SelectionResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)? + "\n")
}
