//! Run manifest plus parameter snapshots.
//!
//! The manifest is flat `key = value` text recording every weight, schedule
//! value, and seed a run used, enough to reproduce it bit for bit.
//! Parameters are stored in a versioned binary file keyed by name.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::objective::{ParamKind, ParamStore};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut body = String::new();
    for (k, v) in entries {
        body.push_str(k);
        body.push_str(" = ");
        body.push_str(v);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

const PARAMS_MAGIC: &[u8; 8] = b"PLPARAMS";
const PARAMS_VERSION: u32 = 1;

fn kind_tag(kind: ParamKind) -> (u8, u32) {
    match kind {
        ParamKind::Base => (0, 0),
        ParamKind::NoDecay => (1, 0),
        ParamKind::Order(r) => (2, r as u32),
        ParamKind::GateLogit(r) => (3, r as u32),
    }
}

fn kind_from_tag(tag: u8, arg: u32) -> Result<ParamKind> {
    Ok(match tag {
        0 => ParamKind::Base,
        1 => ParamKind::NoDecay,
        2 => ParamKind::Order(arg as usize),
        3 => ParamKind::GateLogit(arg as usize),
        other => {
            return Err(Error::CacheFormat(format!(
                "unknown parameter kind tag {other}"
            )))
        }
    })
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, value, kind) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        let (tag, arg) = kind_tag(kind);
        w.write_all(&[tag])?;
        w.write_all(&arg.to_le_bytes())?;
        w.write_all(&(value.rows() as u64).to_le_bytes())?;
        w.write_all(&(value.cols() as u64).to_le_bytes())?;
        for &v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::CacheFormat("bad parameter file magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != PARAMS_VERSION {
        return Err(Error::CacheFormat("unsupported parameter file version".into()));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let count = u64::from_le_bytes(v8) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut v8)?;
        let name_len = u64::from_le_bytes(v8) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CacheFormat("non-utf8 parameter name".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        r.read_exact(&mut v4)?;
        let kind = kind_from_tag(tag[0], u32::from_le_bytes(v4))?;
        r.read_exact(&mut v8)?;
        let rows = u64::from_le_bytes(v8) as usize;
        r.read_exact(&mut v8)?;
        let cols = u64::from_le_bytes(v8) as usize;
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            r.read_exact(&mut v8)?;
            *v = f64::from_le_bytes(v8);
        }
        store.add(name, Matrix::new(rows, cols, data), kind);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::row_vector(&[1.5, -2.5]), ParamKind::Base);
        store.add("b.c", Matrix::scalar(-3.0), ParamKind::GateLogit(2));
        store.add("d", Matrix::zeros(2, 3), ParamKind::Order(3));
        let dir = std::env::temp_dir().join("plrank_params_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");
        save_params(&path, &store).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((n1, m1, k1), (n2, m2, k2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2);
            assert_eq!(k1, k2);
        }
        std::fs::remove_file(&path).unwrap();
    }
}
