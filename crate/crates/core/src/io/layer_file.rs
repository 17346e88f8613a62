//! `RSPL` decomposed-layer files.
//!
//! ```text
//! "RSPL" | version u8
//! m_in u32 | m_out u32 | r u32 | kept-width policy u32
//! w_cols   f32[m_in * m_out]  column-major (column j = input channel j)
//! a_r      f32[m_out * r]     row-major
//! b_r      f32[r * m_in]      row-major
//! selected u32[r]
//! keep_fraction f64 | rank f64
//! ```
//!
//! Weights are narrowed to `f32` on write, so `read(write(layer))` is exact only
//! for layers whose entries are already `f32`-representable; `write(read(bytes))`
//! always reproduces the bytes.

use std::path::Path;
use std::sync::Arc;

use super::binary::{dim_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::Result;
use crate::layer::{ColumnMajorMatrix, DecomposedLayer, SparsityPlan};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"RSPL";
pub const VERSION: u8 = 1;
/// Exact `ceil(s * m_in)` top-k selection per input vector.
pub const KEPT_POLICY_EXACT_TOP_K: u32 = 0;

pub fn encode_layer(layer: &DecomposedLayer) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.header(MAGIC, VERSION);
    let plan = layer.plan();
    w.u32(dim_u32(layer.m_in(), "m_in")?);
    w.u32(dim_u32(layer.m_out(), "m_out")?);
    w.u32(dim_u32(plan.rank, "rank")?);
    w.u32(KEPT_POLICY_EXACT_TOP_K);
    w.f32s(layer.w_cols().as_slice());
    w.f32s(layer.a_r().as_slice());
    w.f32s(layer.b_r().as_slice());
    for &c in layer.selected_components() {
        w.u32(dim_u32(c, "component index")?);
    }
    w.f64(plan.keep_fraction);
    w.f64(plan.rank as f64);
    Ok(w.into_bytes())
}

pub fn decode_layer(bytes: &[u8], path: &Path) -> Result<DecomposedLayer> {
    let mut r = ByteReader::new(bytes, path);
    r.header(MAGIC, VERSION)?;
    let m_in = r.u32()? as usize;
    let m_out = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let policy = r.u32()?;
    if policy != KEPT_POLICY_EXACT_TOP_K {
        return Err(r.malformed(format!("unknown kept-width policy {policy}")));
    }
    let w_cols = r.f32s(m_in * m_out)?;
    let a_r = r.f32s(m_out * rank)?;
    let b_r = r.f32s(rank * m_in)?;
    let selected = (0..rank)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let keep_fraction = r.f64()?;
    let plan_rank = r.f64()?;
    if plan_rank != rank as f64 {
        return Err(r.malformed(format!(
            "plan rank {plan_rank} disagrees with header rank {rank}"
        )));
    }
    if selected.iter().any(|&c| c >= m_in.min(m_out)) || selected.windows(2).any(|w| w[0] >= w[1]) {
        return Err(r.malformed("selected components out of range or not ascending"));
    }
    let malformed = |e: crate::error::Error| r.malformed(e.to_string());
    let plan = SparsityPlan::new(keep_fraction, rank).map_err(malformed)?;
    let w_cols = ColumnMajorMatrix::from_column_data(m_out, m_in, w_cols).map_err(malformed)?;
    let a_r = Matrix::new(m_out, rank, a_r).map_err(malformed)?;
    let b_r = Matrix::new(rank, m_in, b_r).map_err(malformed)?;
    let layer = DecomposedLayer::from_parts(Arc::new(w_cols), a_r, b_r, plan, selected)
        .map_err(malformed)?;
    r.finish()?;
    Ok(layer)
}

pub fn write_layer(layer: &DecomposedLayer, path: &Path) -> Result<()> {
    write_file(path, &encode_layer(layer)?)
}

pub fn read_layer(path: &Path) -> Result<DecomposedLayer> {
    decode_layer(&read_file(path)?, path)
}
