//! Binary checkpoint and dataset containers.
//!
//! Both share one layout: a magic line, the `# `-prefixed configuration echo,
//! one text line per entry naming its shape and byte offset, a `payload N`
//! line, then `N` bytes of little-endian `f32`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParameterStore, Tag};
use crate::synthdata::{Dataset, Sample};
use crate::tensor::{Array, Precision};

pub const CHECKPOINT_MAGIC: &str = "clipvid checkpoint v1";
pub const DATASET_MAGIC: &str = "clipvid dataset v1";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| Error::Container(format!("bad shape `{s}`"))))
        .collect()
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Splits a container into its text lines and payload.
fn split<'a>(bytes: &'a [u8], magic: &str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Container("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::Container("header is not UTF-8".into()))?;
        pos += end + 1;
        if lines.is_empty() && line != magic {
            return Err(Error::Container(format!("expected `{magic}`, found `{line}`")));
        }
        if let Some(n) = line.strip_prefix("payload ") {
            let n: usize = n.parse().map_err(|_| Error::Container(format!("bad payload line `{line}`")))?;
            let payload = &bytes[pos..];
            if payload.len() != n {
                return Err(Error::Container(format!("payload is {} bytes, header says {n}", payload.len())));
            }
            return Ok((lines, payload));
        }
        lines.push(line);
    }
}

fn read_f32(payload: &[u8], offset: usize, count: usize) -> Result<Vec<f64>> {
    let end = offset + 4 * count;
    if end > payload.len() {
        return Err(Error::Container(format!("entry at {offset} overruns payload")));
    }
    Ok(payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn echo_of(lines: &[&str]) -> String {
    lines
        .iter()
        .filter(|l| l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn to_bytes(echo: &str, store: &ParameterStore) -> Vec<u8> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n{echo}");
    let mut payload = Vec::new();
    for (name, entry) in store.iter() {
        let _ = writeln!(
            header,
            "tensor {name} {} f32 {} {}",
            entry.tag,
            shape_str(entry.value.shape()),
            payload.len()
        );
        push_f32(&mut payload, entry.value.data());
    }
    let _ = writeln!(header, "payload {}", payload.len());
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint into its echo and an `f32` store.
pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParameterStore)> {
    let (lines, payload) = split(bytes, CHECKPOINT_MAGIC)?;
    let mut store = ParameterStore::new();
    for line in &lines[1..] {
        if line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 6 || f[0] != "tensor" || f[3] != "f32" {
            return Err(Error::Container(format!("bad tensor line `{line}`")));
        }
        let tag: Tag = f[2].parse()?;
        let shape = parse_shape(f[4])?;
        let offset: usize = f[5].parse().map_err(|_| Error::Container(format!("bad offset in `{line}`")))?;
        let data = read_f32(payload, offset, shape.iter().product())?;
        let value = Array::new(shape, data)?.with_precision(Precision::F32);
        store.insert(f[1], tag, value)?;
    }
    Ok((echo_of(&lines), store))
}

pub fn save(path: &Path, echo: &str, store: &ParameterStore) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(echo, store))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParameterStore)> {
    from_bytes(&std::fs::read(path)?)
}

pub fn dataset_to_bytes(echo: &str, data: &Dataset) -> Vec<u8> {
    let mut header = format!("{DATASET_MAGIC}\n{echo}");
    let _ = writeln!(
        header,
        "categories {}",
        data.category_ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    );
    let mut payload = Vec::new();
    for s in &data.samples {
        let _ = writeln!(header, "video {} f32 {} {}", s.label, shape_str(s.video.shape()), payload.len());
        push_f32(&mut payload, s.video.data());
    }
    let _ = writeln!(header, "payload {}", payload.len());
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(String, Dataset)> {
    let (lines, payload) = split(bytes, DATASET_MAGIC)?;
    let mut category_ids = None;
    let mut samples = Vec::new();
    for line in &lines[1..] {
        if line.starts_with('#') {
            continue;
        }
        if let Some(ids) = line.strip_prefix("categories ") {
            let ids = ids
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u32>().map_err(|_| Error::Container(format!("bad category id `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            category_ids = Some(ids);
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "video" || f[2] != "f32" {
            return Err(Error::Container(format!("bad video line `{line}`")));
        }
        let label: usize = f[1].parse().map_err(|_| Error::Container(format!("bad label in `{line}`")))?;
        let shape = parse_shape(f[3])?;
        let offset: usize = f[4].parse().map_err(|_| Error::Container(format!("bad offset in `{line}`")))?;
        let data = read_f32(payload, offset, shape.iter().product())?;
        samples.push(Sample {
            video: Array::new(shape, data)?,
            label,
        });
    }
    let category_ids = category_ids.ok_or_else(|| Error::Container("missing categories line".into()))?;
    if let Some(s) = samples.iter().find(|s| s.label >= category_ids.len()) {
        return Err(Error::Container(format!("label {} out of range", s.label)));
    }
    Ok((echo_of(&lines), Dataset { category_ids, samples }))
}
