//! Self-describing checkpoint files.
//!
//! A text header (magic line, `key=value` lines, one `param` line per tensor,
//! `end`) followed by all parameters as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::nn::ParamStore;
use crate::backbone::unet::{Architecture, Unet};
use crate::backbone::ToyBackbone;
use crate::diffmath::{make_schedule, ScheduleKind};
use crate::error::{Error, Result};

pub const MAGIC: &str = "injectdiff-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Short content hash identifying a checkpoint.
pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

pub fn to_bytes(b: &ToyBackbone) -> Vec<u8> {
    let a = b.architecture();
    let s = &b.schedule;
    let mut header = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\n");
    let kv = [
        ("arch.resolution", a.resolution.to_string()),
        ("arch.image_channels", a.image_channels.to_string()),
        ("arch.patch", a.patch.to_string()),
        (
            "arch.channels",
            a.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("arch.heads", a.heads.to_string()),
        ("arch.groups", a.groups.to_string()),
        ("arch.time_dim", a.time_dim.to_string()),
        ("arch.text_dim", a.text_dim.to_string()),
        ("arch.prompt_seed", a.prompt_seed.to_string()),
        ("schedule.kind", s.kind().to_string()),
        ("schedule.num_train_steps", s.num_train_steps().to_string()),
    ];
    for (k, v) in kv {
        header.push_str(&format!("{k}={v}\n"));
    }
    for e in b.params.entries() {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("param {} {}\n", e.name, dims.join("x")));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(b.params.num_params() * 4);
    for v in b.params.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyBackbone> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&c| c == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(corrupt("missing magic line"));
    }
    let version_line = next_line()?;
    let found: u32 = version_line
        .strip_prefix("format_version=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing format_version"))?;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    let mut kv = std::collections::BTreeMap::new();
    let mut params: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("param ") {
            let (name, dims) = rest.split_once(' ').ok_or_else(|| corrupt(format!("bad param line {line:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(format!("bad shape in {line:?}")))?;
            params.push((name.to_string(), shape));
        } else {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| corrupt(format!("missing {k}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| corrupt(format!("bad value for {k}"))) };
    let channels: Vec<usize> = get("arch.channels")?
        .split(',')
        .map(|c| c.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| corrupt("bad arch.channels"))?;
    let channels: [usize; 3] = channels.try_into().map_err(|_| corrupt("arch.channels needs 3 entries"))?;
    let arch = Architecture {
        resolution: num("arch.resolution")? as usize,
        image_channels: num("arch.image_channels")? as usize,
        patch: num("arch.patch")? as usize,
        channels,
        heads: num("arch.heads")? as usize,
        groups: num("arch.groups")? as usize,
        time_dim: num("arch.time_dim")? as usize,
        text_dim: num("arch.text_dim")? as usize,
        prompt_seed: num("arch.prompt_seed")?,
    };
    let kind: ScheduleKind = get("schedule.kind")?.parse()?;
    let schedule = make_schedule(num("schedule.num_train_steps")? as usize, kind)?;

    let (unet, mut store): (Unet, ParamStore) = Unet::new(&arch, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        store.entries().iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != params {
        return Err(corrupt("parameter list does not match the architecture"));
    }
    let blob = &bytes[pos..];
    if blob.len() != store.num_params() * 4 {
        return Err(corrupt(format!(
            "expected {} bytes of parameters, found {}",
            store.num_params() * 4,
            blob.len()
        )));
    }
    for (dst, chunk) in store.data_mut().iter_mut().zip(blob.chunks_exact(4)) {
        *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(ToyBackbone::assemble(unet, store, schedule))
}

pub fn save(b: &ToyBackbone, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(b)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ToyBackbone> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
