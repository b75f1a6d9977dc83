//! On-disk formats.
//!
//! * viewable images: binary PGM (`P5`), 16-bit big-endian, maxval 65535;
//!   label maps use the same container at maxval 255
//! * lossless images: 16-byte header (`DDPSIMG1`, u32 width, u32 height,
//!   little endian) followed by little-endian f64 pixels
//! * ridge models: `DDPSRDG1` header, dimensions, lambda, fingerprint and
//!   little-endian f64 weights
//! * memory banks: text table with `# key=value` metadata lines
//!
//! Every write goes to a sibling temporary file that is then renamed over
//! the destination.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::conditional::RidgeModel;
use crate::dcats::MemoryBank;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

const RAW_MAGIC: &[u8; 8] = b"DDPSIMG1";
const RIDGE_MAGIC: &[u8; 8] = b"DDPSRDG1";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.display().to_string())
    } else {
        Error::Io(format!("{}: {e}", path.display()))
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| io_err(tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(tmp, e))?;
    f.sync_all().map_err(|e| io_err(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn pgm_bytes(w: usize, h: usize, maxval: u32, samples: impl Iterator<Item = u32>) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for s in samples {
        if maxval > 255 {
            out.extend((s as u16).to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    out
}

/// Encodes `img` clamped to `[0, 1]` as a 16-bit PGM.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let samples = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u32);
    pgm_bytes(img.width(), img.height(), 65535, samples)
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, "not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])? as u32);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, "maxval out of range"));
    }
    let width = if maxval > 255 { 2 } else { 1 };
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * width {
        return Err(format_err(path, "pixel data length does not match header"));
    }
    let samples = if width == 2 {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        body.iter().map(|b| *b as u32).collect()
    };
    Ok((w, h, maxval, samples))
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let (w, h, maxval, samples) = parse_pgm(path, &read_bytes(path)?)?;
    let data = samples.into_iter().map(|s| s as f64 / maxval as f64).collect();
    Image::new(w, h, data)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let bytes = pgm_bytes(
        labels.width(),
        labels.height(),
        255,
        labels.labels().iter().map(|l| *l as u32),
    );
    atomic_write(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (w, h, maxval, samples) = parse_pgm(path, &read_bytes(path)?)?;
    if maxval != 255 {
        return Err(format_err(path, "label maps use maxval 255"));
    }
    LabelMap::new(w, h, samples.into_iter().map(|s| s as u8).collect())
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * img.len());
    out.extend(RAW_MAGIC);
    out.extend((img.width() as u32).to_le_bytes());
    out.extend((img.height() as u32).to_le_bytes());
    img.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
    out
}

pub fn decode_raw(path: &Path, bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(format_err(path, "missing raw image header"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * w * h {
        return Err(format_err(path, "pixel data length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(w, h, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_raw(img))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    decode_raw(path, &read_bytes(path)?)
}

pub fn encode_ridge(model: &RidgeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(RIDGE_MAGIC);
    out.extend((model.patch_in as u32).to_le_bytes());
    out.extend((model.scale_k as u32).to_le_bytes());
    out.extend(model.ridge_lambda.to_le_bytes());
    out.extend((model.trained_on.len() as u32).to_le_bytes());
    out.extend(model.trained_on.as_bytes());
    model.weights.iter().for_each(|v| out.extend(v.to_le_bytes()));
    out
}

pub fn decode_ridge(path: &Path, bytes: &[u8]) -> Result<RidgeModel> {
    let bad = |r: &str| format_err(path, r);
    if bytes.len() < 28 || &bytes[..8] != RIDGE_MAGIC {
        return Err(bad("missing ridge model header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let patch_in = u32_at(8);
    let scale_k = u32_at(12);
    let ridge_lambda = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let fp_len = u32_at(24);
    let fp_end = 28 + fp_len;
    let trained_on = bytes
        .get(28..fp_end)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| bad("bad fingerprint field"))?
        .to_string();
    let body = &bytes[fp_end..];
    if body.len() % 8 != 0 {
        return Err(bad("weight block is not a whole number of f64"));
    }
    let weights = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = RidgeModel {
        patch_in,
        scale_k,
        weights,
        ridge_lambda,
        trained_on,
    };
    model.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(model)
}

pub fn write_ridge(path: &Path, model: &RidgeModel) -> Result<()> {
    atomic_write(path, &encode_ridge(model))
}

pub fn read_ridge(path: &Path) -> Result<RidgeModel> {
    decode_ridge(path, &read_bytes(path)?)
}

pub fn encode_bank(bank: &MemoryBank) -> String {
    let mut s = String::new();
    s.push_str(&format!("# fingerprint={}\n", bank.fingerprint));
    s.push_str(&format!("# n_refs={}\n", bank.n_refs));
    s.push_str(&format!("# n_draws={}\n", bank.n_draws));
    s.push_str(&format!("# noise_sigma={}\n", bank.noise_sigma));
    s.push_str(&format!("# evaluations={}\n", bank.evaluations));
    s.push_str("# columns: t avg_loglik se\n");
    for i in 0..bank.len() {
        s.push_str(&format!("{} {} {}\n", bank.t_grid[i], bank.avg_loglik[i], bank.se[i]));
    }
    s
}

pub fn decode_bank(path: &Path, text: &str) -> Result<MemoryBank> {
    let bad = |r: String| format_err(path, r);
    let mut meta = std::collections::BTreeMap::new();
    let mut bank = MemoryBank {
        t_grid: Vec::new(),
        avg_loglik: Vec::new(),
        se: Vec::new(),
        n_refs: 0,
        n_draws: 0,
        noise_sigma: 0.0,
        evaluations: 0,
        fingerprint: String::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(bad(format!("line {}: expected 3 columns", n + 1)));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number {s:?}", n + 1)));
        bank.t_grid.push(cols[0].parse().map_err(|_| bad(format!("line {}: bad time", n + 1)))?);
        bank.avg_loglik.push(parse(cols[1])?);
        bank.se.push(parse(cols[2])?);
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad metadata `{k}`"))) };
    bank.fingerprint = get("fingerprint")?.clone();
    bank.n_refs = num("n_refs")?;
    bank.n_draws = num("n_draws")?;
    bank.evaluations = num("evaluations")?;
    bank.noise_sigma = get("noise_sigma")?
        .parse()
        .map_err(|_| bad("bad metadata `noise_sigma`".into()))?;
    bank.validate().map_err(|e| bad(e.to_string()))?;
    Ok(bank)
}

pub fn write_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    atomic_write(path, encode_bank(bank).as_bytes())
}

pub fn read_bank(path: &Path) -> Result<MemoryBank> {
    decode_bank(path, &read_text(path)?)
}
