use std::fmt::Write as _;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingTable, Modality};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KGE1";

/// Reads a TSV or binary table (detected by magic) and checks its modality
/// tag against `modality`.
pub fn load_table(path: &Path, modality: &Modality) -> Result<EmbeddingTable> {
    let mut head = [0u8; 4];
    let is_binary = std::fs::File::open(path)
        .and_then(|mut f| f.read(&mut head).map(|n| n == 4 && &head == MAGIC))
        .map_err(|e| Error::io(path, e))?;
    let table = if is_binary { read_binary(path)? } else { read_tsv(path)? };
    if table.modality() != modality {
        return Err(Error::load(
            path,
            1,
            format!("file holds modality `{}`, expected `{modality}`", table.modality()),
        ));
    }
    log::info!("{}: {} rows of {modality} (dim {})", path.display(), table.len(), table.dim());
    Ok(table)
}

pub fn read_tsv(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::load(path, 1, "missing header row"))?;
    let mut dim = None;
    let mut modality = None;
    for field in header.trim_end_matches('\r').split('\t').skip(1) {
        if let Some(v) = field.strip_prefix("dim=") {
            dim = Some(v.parse::<usize>().map_err(|_| Error::load(path, 1, "bad dim"))?);
        } else if let Some(v) = field.strip_prefix("modality=") {
            modality = Some(v.parse::<Modality>().map_err(|e| Error::load(path, 1, e.to_string()))?);
        }
    }
    let (Some(dim), Some(modality)) = (dim, modality) else {
        return Err(Error::load(
            path,
            1,
            "header must be `node_id<TAB>dim=<n><TAB>modality=<name>`",
        ));
    };
    let mut table = EmbeddingTable::new(modality, dim);
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let (id, values) = row
            .split_once('\t')
            .ok_or_else(|| Error::load(path, line, "expected `node_id<TAB>v0,v1,...`"))?;
        let node: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::load(path, line, format!("bad node id `{id}`")))?;
        let vector: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::load(path, line, format!("node {node}: unparsable value")))?;
        if vector.len() != dim {
            return Err(Error::load(
                path,
                line,
                format!("node {node}: vector has dim {}, header says {dim}", vector.len()),
            ));
        }
        table
            .insert(node, vector)
            .map_err(|e| Error::load(path, line, e.to_string()))?;
    }
    Ok(table)
}

pub fn write_tsv(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut out = format!("node_id\tdim={}\tmodality={}\n", table.dim(), table.modality());
    for (node, v) in table.iter() {
        let _ = write!(out, "{node}\t");
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // `{}` prints the shortest string that parses back to the same bits.
            let _ = write!(out, "{x}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_binary(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let tag = table.modality().tag().as_bytes();
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(tag.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(tag).map_err(io)?;
    w.write_all(&(table.dim() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(table.len() as u64).to_le_bytes()).map_err(io)?;
    for (node, v) in table.iter() {
        w.write_all(&(node as u64).to_le_bytes()).map_err(io)?;
        for x in v {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_binary(path: &Path) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::load(path, 0, format!("truncated or corrupt binary table ({what})"));
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| bad("magic"))?;
    if &b4 != MAGIC {
        return Err(Error::load(path, 0, "not a KGE1 embedding file"));
    }
    r.read_exact(&mut b4).map_err(|_| bad("tag length"))?;
    let mut tag = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut tag).map_err(|_| bad("tag"))?;
    let tag = String::from_utf8(tag).map_err(|_| bad("tag utf-8"))?;
    let modality: Modality = tag.parse().map_err(|e: Error| Error::load(path, 0, e.to_string()))?;
    r.read_exact(&mut b4).map_err(|_| bad("dim"))?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(|_| bad("row count"))?;
    let rows = u64::from_le_bytes(b8);
    let mut table = EmbeddingTable::new(modality, dim);
    for _ in 0..rows {
        r.read_exact(&mut b8).map_err(|_| bad("node id"))?;
        let node = u64::from_le_bytes(b8) as usize;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b8).map_err(|_| bad("values"))?;
            v.push(f64::from_le_bytes(b8));
        }
        table.insert(node, v).map_err(|e| Error::load(path, 0, e.to_string()))?;
    }
    Ok(table)
}
