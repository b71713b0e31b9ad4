//! Artifact formats: error and CPU-time CSV files, the enrichment history,
//! plain-text field matrices, and the versioned offline-space cache.

use std::io::{Read, Write};
use std::path::Path;

use dybo_core::fem::CellField;
use dybo_core::grid::GridPair;
use dybo_core::msbasis::{OfflineSpace, SparseCol};
use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One row of the per-time error table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub t: f64,
    /// `ubar`, `u1`..`um`, or `var`.
    pub function: String,
    /// `start` or `end` (of enrichment within the recorded step).
    pub status: String,
    pub e2: f64,
}

/// One row of the enrichment history.
#[derive(Debug, Clone)]
pub struct EnrichRow {
    pub t: f64,
    pub level: usize,
    pub residual_sum: f64,
    pub selected: usize,
    pub added_total: usize,
    /// Energy error vs the fine solutions, when tracked; NaN writes empty.
    pub energy: f64,
}

/// Cumulative CPU seconds of a time loop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CpuBreakdown {
    pub mean_s: f64,
    pub modes_s: f64,
    pub total_s: f64,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub fn write_error_csv(path: &Path, rows: &[ErrorRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["t", "function", "status", "e2"]).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([r.t.to_string(), r.function.clone(), r.status.clone(), r.e2.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_error_csv(path: &Path) -> Result<Vec<ErrorRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != 4 {
            return Err(io_err(path, format!("expected 4 columns, got {}", rec.len())));
        }
        rows.push(ErrorRow {
            t: rec[0].parse().map_err(|e| io_err(path, e))?,
            function: rec[1].to_string(),
            status: rec[2].to_string(),
            e2: rec[3].parse().map_err(|e| io_err(path, e))?,
        });
    }
    Ok(rows)
}

pub fn write_enrichment_csv(path: &Path, rows: &[EnrichRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["t", "level", "residual_sum", "selected", "added_total", "energy_error"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        let energy = if r.energy.is_finite() { r.energy.to_string() } else { String::new() };
        w.write_record([
            r.t.to_string(),
            r.level.to_string(),
            r.residual_sum.to_string(),
            r.selected.to_string(),
            r.added_total.to_string(),
            energy,
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the CPU table in the three-row layout `mean/modes/total`.
pub fn write_cpu_csv(path: &Path, cpu: &CpuBreakdown) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["section", "seconds"]).map_err(|e| io_err(path, e))?;
    for (name, v) in [("mean", cpu.mean_s), ("modes", cpu.modes_s), ("total", cpu.total_s)] {
        w.write_record([name.to_string(), v.to_string()]).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_cpu_csv(path: &Path) -> Result<CpuBreakdown, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut cpu = CpuBreakdown::default();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let v: f64 = rec[1].parse().map_err(|e| io_err(path, e))?;
        match &rec[0] {
            "mean" => cpu.mean_s = v,
            "modes" => cpu.modes_s = v,
            "total" => cpu.total_s = v,
            other => return Err(io_err(path, format!("unknown cpu row `{other}`"))),
        }
    }
    Ok(cpu)
}

/// Writes a cell field as a plain-text matrix, one row per cell row, top row
/// at largest y.
pub fn write_cell_field(path: &Path, field: &CellField) -> Result<(), CliError> {
    let mut out = String::new();
    for cy in (0..field.n).rev() {
        for cx in 0..field.n {
            if cx > 0 {
                out.push(' ');
            }
            out.push_str(&field.values[cy * field.n + cx].to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Writes a nodal field as a plain-text matrix, top row at largest y.
pub fn write_node_field(path: &Path, g: &GridPair, v: &DVector<f64>) -> Result<(), CliError> {
    let nps = g.nodes_per_side();
    if v.len() != g.n_nodes() {
        return Err(io_err(path, "field does not match the grid nodes"));
    }
    let mut out = String::new();
    for iy in (0..nps).rev() {
        for ix in 0..nps {
            if ix > 0 {
                out.push(' ');
            }
            out.push_str(&v[iy * nps + ix].to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// First eight bytes of the SHA-256 of a cell field, as the cache's media
/// check value.
pub fn field_check(field: &CellField) -> u64 {
    let mut h = Sha256::new();
    h.update((field.n as u64).to_le_bytes());
    for v in &field.values {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

const CACHE_MAGIC: &[u8; 8] = b"DYOFFL01";

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Config("offline cache truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn usize(&mut self) -> Result<usize, CliError> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Serializes the offline part of a multiscale space (online columns are
/// never cached).
pub fn save_offline(path: &Path, space: &OfflineSpace, media_check: u64) -> Result<(), CliError> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(CACHE_MAGIC);
    w.u64(space.g.n_coarse as u64);
    w.u64(space.g.n_fine_per_coarse as u64);
    w.u64(media_check);
    w.u64(space.free_nodes.len() as u64);
    for &nd in &space.free_nodes {
        w.u64(nd as u64);
    }
    w.u64(space.counts.len() as u64);
    for &c in &space.counts {
        w.u64(c as u64);
    }
    for ev in &space.eigenvalues {
        w.u64(ev.len() as u64);
        for &v in ev {
            w.f64(v);
        }
    }
    w.u64(space.offline_cols.len() as u64);
    for (col, &owner) in space.offline_cols.iter().zip(&space.offline_owner) {
        w.u64(owner as u64);
        w.u64(col.idx.len() as u64);
        for &i in &col.idx {
            w.u64(i as u64);
        }
        for &v in &col.val {
            w.f64(v);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&w.buf).map_err(|e| io_err(path, e))
}

/// Loads a cached offline space and checks it against the configured grid
/// and mean field.
pub fn load_offline(path: &Path, g: GridPair, media_check: u64) -> Result<OfflineSpace, CliError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(io_err(path, "not an offline cache file"));
    }
    let (nc, nf) = (r.usize()?, r.usize()?);
    if nc != g.n_coarse || nf != g.n_fine_per_coarse {
        return Err(io_err(
            path,
            format!("cache built for a {nc}x{nf} grid, configuration uses {}x{}", g.n_coarse, g.n_fine_per_coarse),
        ));
    }
    let check = r.u64()?;
    if check != media_check {
        return Err(io_err(path, "cache does not match the configured mean field"));
    }
    let n_free = r.usize()?;
    let mut free_nodes = Vec::with_capacity(n_free);
    for _ in 0..n_free {
        free_nodes.push(r.usize()?);
    }
    let mut free_index = vec![usize::MAX; g.n_nodes()];
    for (d, &nd) in free_nodes.iter().enumerate() {
        if nd >= g.n_nodes() {
            return Err(io_err(path, "free node out of range"));
        }
        free_index[nd] = d;
    }
    let n_in = r.usize()?;
    if n_in != g.n_interior_coarse() {
        return Err(io_err(path, "interior node count does not match the grid"));
    }
    let mut counts = Vec::with_capacity(n_in);
    for _ in 0..n_in {
        counts.push(r.usize()?);
    }
    let mut eigenvalues = Vec::with_capacity(n_in);
    for _ in 0..n_in {
        let k = r.usize()?;
        let mut ev = Vec::with_capacity(k);
        for _ in 0..k {
            ev.push(r.f64()?);
        }
        eigenvalues.push(ev);
    }
    let n_cols = r.usize()?;
    if n_cols != counts.iter().sum::<usize>() {
        return Err(io_err(path, "column count does not match the per-node counts"));
    }
    let mut offline_cols = Vec::with_capacity(n_cols);
    let mut offline_owner = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let owner = r.usize()?;
        if owner >= n_in {
            return Err(io_err(path, "column owner out of range"));
        }
        let nnz = r.usize()?;
        let mut idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let i = r.usize()?;
            if i >= n_free {
                return Err(io_err(path, "column index out of range"));
            }
            idx.push(i);
        }
        let mut val = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            val.push(r.f64()?);
        }
        offline_cols.push(SparseCol { idx, val });
        offline_owner.push(owner);
    }
    if r.pos != buf.len() {
        return Err(io_err(path, "trailing bytes in cache"));
    }
    Ok(OfflineSpace {
        g,
        free_nodes,
        free_index,
        offline_cols,
        offline_owner,
        counts,
        eigenvalues,
        online_cols: Vec::new(),
        online_owner: Vec::new(),
    })
}
