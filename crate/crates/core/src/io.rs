//! ETF tensor files and ETW weight containers.
//!
//! ETF: `"ETF1"`, u32 rank, `rank` u32 extents, u8 dtype (0 = f32, 1 = f64),
//! row-major little-endian payload.
//!
//! ETW: `"ETW1"`, u32 entry count, then per entry a u32-length-prefixed
//! UTF-8 name, an embedded ETF blob and one frozen-flag byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{ParamSet, Scalar, Tensor};

const ETF_MAGIC: &[u8; 4] = b"ETF1";
const ETW_MAGIC: &[u8; 4] = b"ETW1";

fn fmt_err(format: &'static str, detail: impl Into<String>) -> Error {
    Error::Format { format, detail: detail.into() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(self.format, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn encode_etf<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(ETF_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE);
    for &v in t.data() {
        v.to_le_bytes_into(out);
    }
}

fn read_etf<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    if r.take(4)? != ETF_MAGIC {
        return Err(fmt_err("ETF", "bad magic"));
    }
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let dtype = r.u8()?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = match dtype {
        0 => r.take(4 * n)?.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect(),
        1 => r.take(8 * n)?.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect(),
        d => return Err(fmt_err("ETF", format!("unknown dtype {d}"))),
    };
    Tensor::new(shape, data)
}

pub fn decode_etf<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { buf: bytes, pos: 0, format: "ETF" };
    let t = read_etf(&mut r)?;
    if r.pos != bytes.len() {
        return Err(fmt_err("ETF", "trailing bytes"));
    }
    Ok(t)
}

pub fn encode_etw<T: Scalar>(ps: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ETW_MAGIC);
    out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for e in ps.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        encode_etf(&e.value, &mut out);
        out.push(u8::from(e.frozen));
    }
    out
}

pub fn decode_etw<T: Scalar>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut r = Reader { buf: bytes, pos: 0, format: "ETW" };
    if r.take(4)? != ETW_MAGIC {
        return Err(fmt_err("ETW", "bad magic"));
    }
    let count = r.u32()?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| fmt_err("ETW", e.to_string()))?.to_string();
        r.format = "ETF";
        let value = read_etf(&mut r)?;
        r.format = "ETW";
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(fmt_err("ETW", format!("bad frozen flag {b}"))),
        };
        ps.insert(name, value, frozen);
    }
    if r.pos != bytes.len() {
        return Err(fmt_err("ETW", "trailing bytes"));
    }
    Ok(ps)
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_etf<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_etf(t, &mut buf);
    write_atomic(path, &buf)
}

pub fn load_etf<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_etf(&bytes)
}

pub fn save_etw<T: Scalar>(path: &Path, ps: &ParamSet<T>) -> Result<()> {
    write_atomic(path, &encode_etw(ps))
}

pub fn load_etw<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_etw(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;
    use proptest::prelude::*;

    #[test]
    fn etf_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_etf(&t, &mut buf);
        let mut want = b"ETF1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn etw_preserves_names_and_flags() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::<f32>::new();
        ps.insert("backbone.a", Tensor::randn(&[3, 4], 1.0, &mut rng), true);
        ps.insert("control.b", Tensor::randn(&[5], 1.0, &mut rng), false);
        let back: ParamSet<f32> = decode_etw(&encode_etw(&ps)).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode_etf::<f32>(b"ETF2").is_err());
        let mut buf = Vec::new();
        encode_etf(&Tensor::<f32>::zeros(&[3]), &mut buf);
        assert!(decode_etf::<f32>(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(decode_etf::<f32>(&buf).is_err());
    }

    proptest! {
        #[test]
        fn etf_round_trip(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let t = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
            let mut buf = Vec::new();
            encode_etf(&t, &mut buf);
            prop_assert_eq!(decode_etf::<f32>(&buf).unwrap(), t);
        }
    }
}
