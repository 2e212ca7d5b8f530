//! Index file layout (little-endian):
//!
//! ```text
//! "FRIX" | u32 version | u32 dim | u32 count
//! count × ( u32 len, id utf-8 | u8 category | u32 len, image_ref utf-8 | dim × f32 )
//! u32 len, encoder tag utf-8        (optional trailer)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::index::{EmbeddingIndex, GarmentRecord};
use crate::category::Category;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"FRIX";
pub const INDEX_VERSION: u32 = 1;

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_index(index, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_index<W: Write>(index: &EmbeddingIndex, w: &mut W) -> std::io::Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_u32::<LittleEndian>(INDEX_VERSION)?;
    w.write_u32::<LittleEndian>(index.dim() as u32)?;
    w.write_u32::<LittleEndian>(index.len() as u32)?;
    for r in index.records() {
        write_str(w, &r.id)?;
        w.write_u8(r.category.code())?;
        write_str(w, &r.image_ref)?;
        for v in &r.embedding {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    write_str(w, index.encoder_tag())
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_index(&mut BufReader::new(file), &path.display().to_string())
}

fn read_index<R: Read>(r: &mut R, name: &str) -> Result<EmbeddingIndex> {
    let truncated = |what: &str| Error::format(name, format!("truncated file while reading {what}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != INDEX_MAGIC {
        return Err(Error::format(
            name,
            format!("bad magic: expected {:?}, found {:?}", INDEX_MAGIC, magic),
        ));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| truncated("version"))?;
    if version != INDEX_VERSION {
        return Err(Error::format(
            name,
            format!("unsupported version: expected {INDEX_VERSION}, found {version}"),
        ));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(|_| truncated("dimension"))? as usize;
    let count = r.read_u32::<LittleEndian>().map_err(|_| truncated("record count"))? as usize;

    let read_str = |r: &mut R, what: &str| -> Result<String> {
        let len = r.read_u32::<LittleEndian>().map_err(|_| truncated(what))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| truncated(what))?;
        String::from_utf8(buf).map_err(|_| Error::format(name, format!("{what} is not utf-8")))
    };

    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let id = read_str(r, &format!("id of record {i}"))?;
        let code = r.read_u8().map_err(|_| truncated("category"))?;
        let category = Category::from_code(code)
            .ok_or_else(|| Error::format(name, format!("record `{id}` has category code {code}")))?;
        let image_ref = read_str(r, &format!("image_ref of `{id}`"))?;
        let mut embedding = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut embedding)
            .map_err(|_| truncated(&format!("embedding of `{id}`")))?;
        records.push(GarmentRecord {
            id,
            image_ref,
            category,
            embedding,
        });
    }
    let tag = match r.read_u32::<LittleEndian>() {
        Ok(len) => {
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf).map_err(|_| truncated("encoder tag"))?;
            String::from_utf8(buf).map_err(|_| Error::format(name, "encoder tag is not utf-8"))?
        }
        Err(_) => String::new(),
    };
    EmbeddingIndex::new(dim, tag, records)
}

/// One line of the catalog manifest: `id<TAB>category<TAB>image_path<TAB>caption`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub id: String,
    pub category: Category,
    pub image_path: String,
    pub caption: String,
}

pub fn read_catalog_manifest(path: &Path) -> Result<Vec<CatalogEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() < 3 {
            return Err(Error::format(&name, format!("line {}: expected 4 tab-separated fields", n + 1)));
        }
        out.push(CatalogEntry {
            id: fields[0].to_string(),
            category: fields[1].parse()?,
            image_path: fields[2].to_string(),
            caption: fields.get(3).unwrap_or(&"").to_string(),
        });
    }
    Ok(out)
}

pub fn write_catalog_manifest(path: &Path, entries: &[CatalogEntry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for e in entries {
        writeln!(w, "{}\t{}\t{}\t{}", e.id, e.category, e.image_path, e.caption).map_err(io)?;
    }
    w.flush().map_err(io)
}
