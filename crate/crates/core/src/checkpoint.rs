//! Named-tensor checkpoint files.
//!
//! Layout: `"PLMC" | version u32 | records...` where each record is
//! `name_len u32 | name utf-8 | rank u32 | dims u32 × rank | values f32 × Π dims`.
//! All integers and floats are little-endian; records run to end of file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::ParamStore;
use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLMC";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| ParseError::Truncated(what.to_string()).into()
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(ParseError::BadMagic { expected: "PLMC" }.into());
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != VERSION {
        return Err(ParseError::Version(version).into());
    }
    let mut out = Vec::new();
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated("record name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| ParseError::Truncated("record name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>().map_err(truncated("rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(truncated("dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from(r.read_f32::<LittleEndian>().map_err(truncated("values"))?));
        }
        let t = Tensor::new(dims, data).map_err(|e| Error::data(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))?;
    fs::write(path, buf)?;
    Ok(())
}

/// Overwrites every store parameter that appears in the file. Returns how many
/// parameters were loaded; a shape disagreement is an error.
pub fn load_into_store(store: &mut ParamStore, path: &Path) -> Result<usize> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let records = read_tensors(fs::File::open(path)?)?;
    let mut n = 0;
    for (name, t) in records {
        if let Some(id) = store.id(&name) {
            store
                .set_value(id, t)
                .map_err(|e| Error::config(format!("checkpoint tensor {name}: {e}")))?;
            n += 1;
        }
    }
    Ok(n)
}

/// Rounds a tensor through the on-disk precision.
pub fn to_stored_precision(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}
