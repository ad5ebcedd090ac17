//! Reader and writer for the NetCDF classic container (CDF-1 and the 64-bit
//! offset CDF-2 variant).
//!
//! The reader handles fixed and record variables of every classic numeric type
//! and applies `scale_factor`/`add_offset`; `_FillValue` and `missing_value`
//! cells come back as NaN so the caller can report them. The writer emits
//! fixed-size variables only, which keeps its output byte-deterministic.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};

use crate::error::{Error, Result};

const NC_DIMENSION: u32 = 0x0A;
const NC_VARIABLE: u32 = 0x0B;
const NC_ATTRIBUTE: u32 = 0x0C;
const STREAMING: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcType {
    Byte = 1,
    Char = 2,
    Short = 3,
    Int = 4,
    Float = 5,
    Double = 6,
}

impl NcType {
    fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => NcType::Byte,
            2 => NcType::Char,
            3 => NcType::Short,
            4 => NcType::Int,
            5 => NcType::Float,
            6 => NcType::Double,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            NcType::Byte | NcType::Char => 1,
            NcType::Short => 2,
            NcType::Int | NcType::Float => 4,
            NcType::Double => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Text(String),
    Numbers(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone)]
pub struct Dimension {
    pub name: String,
    /// Current length; for the record dimension this is the record count.
    pub len: usize,
    pub is_record: bool,
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub dim_ids: Vec<usize>,
    pub attrs: Vec<Attribute>,
    pub nc_type: NcType,
    vsize: usize,
    begin: u64,
}

impl Variable {
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attrs.iter().find(|a| a.name == name).map(|a| &a.value)
    }

    pub fn attr_text(&self, name: &str) -> Option<&str> {
        match self.attr(name) {
            Some(AttrValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    fn attr_number(&self, name: &str) -> Option<f64> {
        match self.attr(name) {
            Some(AttrValue::Numbers(v)) => v.first().copied(),
            _ => None,
        }
    }
}

/// A parsed classic NetCDF file held in memory.
#[derive(Debug)]
pub struct NcFile {
    path: PathBuf,
    bytes: Vec<u8>,
    pub dims: Vec<Dimension>,
    pub attrs: Vec<Attribute>,
    pub vars: Vec<Variable>,
    numrecs: usize,
    record_size: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of header")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn padded(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self.take(n)?;
        self.take(pad4(n) - n)?;
        Ok(s)
    }

    fn name(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let raw = self.padded(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }
}

fn pad4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

fn decode(ty: NcType, raw: &[u8]) -> Vec<f64> {
    match ty {
        NcType::Byte => raw.iter().map(|&b| b as i8 as f64).collect(),
        NcType::Char => raw.iter().map(|&b| b as f64).collect(),
        NcType::Short => raw.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]]) as f64).collect(),
        NcType::Int => raw.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64).collect(),
        NcType::Float => raw.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64).collect(),
        NcType::Double => raw.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect(),
    }
}

impl NcFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let bytes = std::fs::read(&path)?;
        Self::parse(path, bytes)
    }

    pub fn parse(path: PathBuf, bytes: Vec<u8>) -> Result<Self> {
        let err = |msg: String| Error::NetCdf { path: path.clone(), msg };
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        let magic = c.take(4).map_err(err)?;
        let version = match magic {
            b"CDF\x01" => 1,
            b"CDF\x02" => 2,
            b"\x89HDF" => return Err(err("netCDF-4/HDF5 files are not supported; convert to classic format".into())),
            _ => return Err(err("not a NetCDF classic file".into())),
        };
        let numrecs_raw = c.u32().map_err(err)?;

        let mut dims = Vec::new();
        let tag = c.u32().map_err(err)?;
        let n = c.u32().map_err(err)? as usize;
        if tag == NC_DIMENSION {
            for _ in 0..n {
                let name = c.name().map_err(err)?;
                let len = c.u32().map_err(err)? as usize;
                dims.push(Dimension { name, len, is_record: len == 0 });
            }
        } else if tag != 0 || n != 0 {
            return Err(err(format!("bad dimension list tag {tag:#x}")));
        }
        let attrs = read_attrs(&mut c).map_err(err)?;

        let mut vars = Vec::new();
        let tag = c.u32().map_err(err)?;
        let n = c.u32().map_err(err)? as usize;
        if tag == NC_VARIABLE {
            for _ in 0..n {
                let name = c.name().map_err(err)?;
                let nd = c.u32().map_err(err)? as usize;
                let dim_ids = (0..nd).map(|_| c.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>().map_err(err)?;
                if dim_ids.iter().any(|&d| d >= dims.len()) {
                    return Err(err(format!("variable {name} references an unknown dimension")));
                }
                let vattrs = read_attrs(&mut c).map_err(err)?;
                let code = c.u32().map_err(err)?;
                let nc_type = NcType::from_code(code).ok_or_else(|| err(format!("unknown type code {code}")))?;
                let vsize = c.u32().map_err(err)? as usize;
                let begin = if version == 1 { c.u32().map_err(err)? as u64 } else { c.u64().map_err(err)? };
                vars.push(Variable { name, dim_ids, attrs: vattrs, nc_type, vsize, begin });
            }
        } else if tag != 0 || n != 0 {
            return Err(err(format!("bad variable list tag {tag:#x}")));
        }

        let is_record_var = |v: &Variable| v.dim_ids.first().is_some_and(|&d| dims[d].is_record);
        let record_vars: Vec<&Variable> = vars.iter().filter(|v| is_record_var(v)).collect();
        let record_size = if record_vars.len() == 1 {
            // a lone record variable is not padded
            let v = record_vars[0];
            v.dim_ids[1..].iter().map(|&d| dims[d].len).product::<usize>() * v.nc_type.size()
        } else {
            record_vars.iter().map(|v| v.vsize).sum()
        };
        let numrecs = if numrecs_raw == STREAMING {
            let first = record_vars.iter().map(|v| v.begin as usize).min().unwrap_or(bytes.len());
            if record_size == 0 { 0 } else { (bytes.len() - first) / record_size }
        } else {
            numrecs_raw as usize
        };
        for d in dims.iter_mut().filter(|d| d.is_record) {
            d.len = numrecs;
        }
        Ok(Self { path, bytes, dims, attrs, vars, numrecs, record_size })
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.vars.iter().find(|v| v.name == name)
    }

    pub fn shape_of(&self, v: &Variable) -> Vec<usize> {
        v.dim_ids.iter().map(|&d| self.dims[d].len).collect()
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::NetCdf { path: self.path.clone(), msg: msg.into() }
    }

    /// Values of `name` as f64 in row-major order with packing undone and fill
    /// values mapped to NaN.
    pub fn read(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let v = self.variable(name).ok_or_else(|| self.err(format!("variable `{name}` not found")))?;
        let shape = self.shape_of(v);
        let is_record = v.dim_ids.first().is_some_and(|&d| self.dims[d].is_record);
        let ty = v.nc_type;
        let raw: Vec<u8> = if is_record {
            let slab: usize = shape[1..].iter().product::<usize>() * ty.size();
            let mut out = Vec::with_capacity(slab * self.numrecs);
            for r in 0..self.numrecs {
                let start = v.begin as usize + r * self.record_size;
                let chunk = self.bytes.get(start..start + slab).ok_or_else(|| self.err(format!("record {r} of `{name}` truncated")))?;
                out.extend_from_slice(chunk);
            }
            out
        } else {
            let len = shape.iter().product::<usize>() * ty.size();
            let start = v.begin as usize;
            self.bytes.get(start..start + len).ok_or_else(|| self.err(format!("data of `{name}` truncated")))?.to_vec()
        };
        let mut values = decode(ty, &raw);
        let fills: Vec<f64> = ["_FillValue", "missing_value"].iter().filter_map(|a| v.attr_number(a)).collect();
        let default_fill = match ty {
            NcType::Float => Some(9.969_209_968_386_869e36),
            NcType::Double => Some(9.969_209_968_386_869e36),
            _ => None,
        };
        let scale = v.attr_number("scale_factor").unwrap_or(1.0);
        let offset = v.attr_number("add_offset").unwrap_or(0.0);
        for x in values.iter_mut() {
            let is_fill = fills.iter().any(|f| *f == *x) || default_fill.is_some_and(|f| (*x - f).abs() <= f * 1e-6);
            *x = if is_fill { f64::NAN } else { *x * scale + offset };
        }
        Ok((shape, values))
    }

    /// Decoded CF time coordinate.
    pub fn read_times(&self, name: &str) -> Result<Vec<DateTime<Utc>>> {
        let v = self.variable(name).ok_or_else(|| self.err(format!("time variable `{name}` not found")))?;
        let units = v.attr_text("units").ok_or_else(|| self.err("time variable has no units"))?.to_string();
        let (_, raw) = self.read(name)?;
        let (step, epoch) = parse_time_units(&units).ok_or_else(|| self.err(format!("unsupported time units `{units}`")))?;
        raw.iter()
            .map(|&x| {
                if !x.is_finite() {
                    return Err(self.err("non-finite time value"));
                }
                let secs = x * step;
                Ok(epoch + Duration::milliseconds((secs * 1000.0).round() as i64))
            })
            .collect()
    }
}

fn read_attrs(c: &mut Cursor) -> std::result::Result<Vec<Attribute>, String> {
    let tag = c.u32()?;
    let n = c.u32()? as usize;
    if tag == 0 && n == 0 {
        return Ok(Vec::new());
    }
    if tag != NC_ATTRIBUTE {
        return Err(format!("bad attribute list tag {tag:#x}"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.name()?;
        let ty = NcType::from_code(c.u32()?).ok_or("unknown attribute type")?;
        let count = c.u32()? as usize;
        let raw = c.padded(count * ty.size())?;
        let value = if ty == NcType::Char {
            AttrValue::Text(String::from_utf8_lossy(raw).trim_end_matches('\0').to_string())
        } else {
            AttrValue::Numbers(decode(ty, raw))
        };
        out.push(Attribute { name, value });
    }
    Ok(out)
}

/// `"<unit> since <date>[ <time>]"` to (seconds per unit, epoch).
pub fn parse_time_units(units: &str) -> Option<(f64, DateTime<Utc>)> {
    let (unit, since) = units.split_once(" since ")?;
    let step = match unit.trim().to_ascii_lowercase().as_str() {
        "seconds" | "second" | "s" => 1.0,
        "minutes" | "minute" => 60.0,
        "hours" | "hour" | "h" => 3600.0,
        "days" | "day" | "d" => 86400.0,
        _ => return None,
    };
    let since = since.trim().trim_end_matches('Z').trim_end_matches(" UTC").replace('T', " ");
    let naive = NaiveDateTime::parse_from_str(&since, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(&since, "%Y-%m-%d %H:%M"))
        .or_else(|_| NaiveDate::parse_from_str(&since, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).expect("midnight")))
        .ok()?;
    Some((step, naive.and_utc()))
}

/// Builder for a classic file with fixed-size variables.
#[derive(Debug, Default)]
pub struct NcWriter {
    dims: Vec<(String, usize)>,
    attrs: Vec<Attribute>,
    vars: Vec<PendingVar>,
}

#[derive(Debug)]
struct PendingVar {
    name: String,
    dims: Vec<usize>,
    attrs: Vec<Attribute>,
    data: PendingData,
}

#[derive(Debug)]
enum PendingData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl PendingData {
    fn nc_type(&self) -> NcType {
        match self {
            PendingData::F32(_) => NcType::Float,
            PendingData::F64(_) => NcType::Double,
        }
    }

    fn len(&self) -> usize {
        match self {
            PendingData::F32(v) => v.len(),
            PendingData::F64(v) => v.len(),
        }
    }
}

impl NcWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_dim(&mut self, name: &str, len: usize) -> usize {
        self.dims.push((name.to_string(), len));
        self.dims.len() - 1
    }

    pub fn add_global_attr(&mut self, name: &str, value: AttrValue) {
        self.attrs.push(Attribute { name: name.into(), value });
    }

    pub fn add_var_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>, attrs: Vec<Attribute>) -> Result<()> {
        self.push_var(name, dims, PendingData::F64(data), attrs)
    }

    pub fn add_var_f32(&mut self, name: &str, dims: &[usize], data: Vec<f32>, attrs: Vec<Attribute>) -> Result<()> {
        self.push_var(name, dims, PendingData::F32(data), attrs)
    }

    fn push_var(&mut self, name: &str, dims: &[usize], data: PendingData, attrs: Vec<Attribute>) -> Result<()> {
        if dims.iter().any(|&d| d >= self.dims.len()) {
            return Err(Error::Config(format!("variable {name} references an unknown dimension")));
        }
        let expected: usize = dims.iter().map(|&d| self.dims[d].1).product();
        if expected != data.len() {
            return Err(Error::Shape(format!("variable {name}: {} values for {expected} cells", data.len())));
        }
        self.vars.push(PendingVar { name: name.into(), dims: dims.to_vec(), attrs, data });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let data_len: usize = self.vars.iter().map(|v| pad4(v.data.len() * v.data.nc_type().size())).sum();
        let version: u8 = if data_len > (i32::MAX as usize) / 2 { 2 } else { 1 };
        let header = |begins: &[u64]| -> Vec<u8> {
            let mut h = Vec::new();
            h.extend_from_slice(b"CDF");
            h.push(version);
            put_u32(&mut h, 0);
            if self.dims.is_empty() {
                put_u32(&mut h, 0);
                put_u32(&mut h, 0);
            } else {
                put_u32(&mut h, NC_DIMENSION);
                put_u32(&mut h, self.dims.len() as u32);
                for (name, len) in &self.dims {
                    put_name(&mut h, name);
                    put_u32(&mut h, *len as u32);
                }
            }
            put_attrs(&mut h, &self.attrs);
            if self.vars.is_empty() {
                put_u32(&mut h, 0);
                put_u32(&mut h, 0);
            } else {
                put_u32(&mut h, NC_VARIABLE);
                put_u32(&mut h, self.vars.len() as u32);
                for (v, &begin) in self.vars.iter().zip(begins) {
                    put_name(&mut h, &v.name);
                    put_u32(&mut h, v.dims.len() as u32);
                    v.dims.iter().for_each(|&d| put_u32(&mut h, d as u32));
                    put_attrs(&mut h, &v.attrs);
                    put_u32(&mut h, v.data.nc_type() as u32);
                    let vsize = pad4(v.data.len() * v.data.nc_type().size()).min(u32::MAX as usize);
                    put_u32(&mut h, vsize as u32);
                    if version == 1 {
                        put_u32(&mut h, begin as u32);
                    } else {
                        h.extend_from_slice(&begin.to_be_bytes());
                    }
                }
            }
            h
        };
        // header length does not depend on the begin values
        let header_len = header(&vec![0; self.vars.len()]).len();
        let mut begins = Vec::with_capacity(self.vars.len());
        let mut off = header_len as u64;
        for v in &self.vars {
            begins.push(off);
            off += pad4(v.data.len() * v.data.nc_type().size()) as u64;
        }
        let mut out = header(&begins);
        out.reserve(data_len);
        for v in &self.vars {
            let start = out.len();
            match &v.data {
                PendingData::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
                PendingData::F64(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            }
            let written = out.len() - start;
            out.resize(start + pad4(written), 0);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn put_u32(h: &mut Vec<u8>, v: u32) {
    h.extend_from_slice(&v.to_be_bytes());
}

fn put_name(h: &mut Vec<u8>, name: &str) {
    put_u32(h, name.len() as u32);
    h.extend_from_slice(name.as_bytes());
    h.resize(h.len() + pad4(name.len()) - name.len(), 0);
}

fn put_attrs(h: &mut Vec<u8>, attrs: &[Attribute]) {
    if attrs.is_empty() {
        put_u32(h, 0);
        put_u32(h, 0);
        return;
    }
    put_u32(h, NC_ATTRIBUTE);
    put_u32(h, attrs.len() as u32);
    for a in attrs {
        put_name(h, &a.name);
        match &a.value {
            AttrValue::Text(s) => {
                put_u32(h, NcType::Char as u32);
                put_u32(h, s.len() as u32);
                h.extend_from_slice(s.as_bytes());
                h.resize(h.len() + pad4(s.len()) - s.len(), 0);
            }
            AttrValue::Numbers(v) => {
                put_u32(h, NcType::Double as u32);
                put_u32(h, v.len() as u32);
                v.iter().for_each(|x| h.extend_from_slice(&x.to_be_bytes()));
            }
        }
    }
}

pub fn text_attr(name: &str, value: &str) -> Attribute {
    Attribute { name: name.into(), value: AttrValue::Text(value.into()) }
}

pub fn number_attr(name: &str, value: f64) -> Attribute {
    Attribute { name: name.into(), value: AttrValue::Numbers(vec![value]) }
}
