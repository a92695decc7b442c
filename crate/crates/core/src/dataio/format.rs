//! Sequence directories: `frame_%05d.ppm`, `mask_%05d.pgm`,
//! `flow_%05d.flo` and `meta.txt`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageFormat};

use super::VideoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLO_MAGIC: &[u8; 4] = b"PIEH";
pub const MANIFEST: &str = "manifest.txt";

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn encode_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, rgb: bool) -> Result<()> {
    let mut out = create(path)?;
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .encode(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn decode_pnm(path: &Path) -> Result<DynamicImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    image::load(BufReader::new(file), ImageFormat::Pnm).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a `[3, H, W]` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("write_ppm", format!("need 3 channels, got {c}")));
    }
    let d = image.data();
    let n = h * w;
    let bytes: Vec<u8> = (0..n)
        .flat_map(|i| [quantize(d[i]), quantize(d[n + i]), quantize(d[2 * n + i])])
        .collect();
    encode_pnm(path, &bytes, w, h, true)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = decode_pnm(path)?;
    let img = img
        .as_rgb8()
        .ok_or_else(|| Error::format(path, "expected an 8-bit RGB pixmap"))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Writes a `[1, H, W]` map in `[0, 1]` as binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape("write_pgm", format!("need 1 channel, got {c}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    encode_pnm(path, &bytes, w, h, false)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let img = decode_pnm(path)?;
    let img = img
        .as_luma8()
        .ok_or_else(|| Error::format(path, "expected an 8-bit graymap"))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(&[1, h, w], img.as_raw().iter().map(|&b| b as f32 / 255.0).collect())
}

/// Middlebury `.flo`: magic, width, height, then interleaved `(dx, dy)`.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let (c, h, w) = flow.dims3()?;
    if c != 2 {
        return Err(Error::shape("write_flo", format!("need 2 channels, got {c}")));
    }
    let mut out = create(path)?;
    let n = h * w;
    let d = flow.data();
    let mut bytes = Vec::with_capacity(12 + 8 * n);
    bytes.extend_from_slice(FLO_MAGIC);
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..n {
        bytes.extend_from_slice(&d[i].to_le_bytes());
        bytes.extend_from_slice(&d[n + i].to_le_bytes());
    }
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(path, "missing PIEH magic"));
    }
    let int = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (w, h) = (int(4), int(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w * h;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {w}x{h}, found {}", 12 + 8 * n, bytes.len()),
        ));
    }
    let float = |k: usize| {
        let o = 12 + 4 * k;
        f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"))
    };
    let mut data = vec![0.0f32; 2 * n];
    for i in 0..n {
        data[i] = float(2 * i);
        data[n + i] = float(2 * i + 1);
    }
    Tensor::new(&[2, h, w], data)
}

fn indexed(dir: &Path, stem: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{t:05}.{ext}"))
}

pub fn save_sequence(sample: &VideoSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = sample.dims()?;
    for t in 0..sample.len() {
        write_ppm(&indexed(dir, "frame", t, "ppm"), &sample.frames[t])?;
        write_pgm(&indexed(dir, "mask", t, "pgm"), &sample.masks[t])?;
        write_flo(&indexed(dir, "flow", t, "flo"), &sample.flow[t])?;
    }
    let meta = format!("T = {}\nH = {h}\nW = {w}\nname = {}\n", sample.len(), sample.name);
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

fn read_meta(dir: &Path) -> Result<(usize, usize, usize, String)> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut t, mut h, mut w, mut name) = (None, None, None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("expected 'key = value', got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::format(&path, format!("{k}: expected an integer, got '{v}'")))
        };
        match k {
            "T" => t = Some(num(v)?),
            "H" => h = Some(num(v)?),
            "W" => w = Some(num(v)?),
            "name" => name = Some(v.to_string()),
            other => return Err(Error::format(&path, format!("unknown key '{other}'"))),
        }
    }
    match (t, h, w) {
        (Some(t), Some(h), Some(w)) => Ok((t, h, w, name.unwrap_or_default())),
        _ => Err(Error::format(&path, "T, H and W are required")),
    }
}

/// Reads a sequence directory; every file must exist and agree with the
/// dimensions in `meta.txt`.
pub fn load_sequence(dir: &Path) -> Result<VideoSample> {
    let (t_len, h, w, name) = read_meta(dir)?;
    let mut sample = VideoSample {
        name,
        frames: Vec::with_capacity(t_len),
        flow: Vec::with_capacity(t_len),
        masks: Vec::with_capacity(t_len),
    };
    let check = |path: PathBuf, tensor: Tensor, c: usize| -> Result<Tensor> {
        if tensor.shape() != [c, h, w] {
            return Err(Error::format(
                &path,
                format!("dimensions {:?} disagree with meta.txt ({h}x{w})", &tensor.shape()[1..]),
            ));
        }
        Ok(tensor)
    };
    for t in 0..t_len {
        let p = indexed(dir, "frame", t, "ppm");
        sample.frames.push(check(p.clone(), read_ppm(&p)?, 3)?);
        let p = indexed(dir, "mask", t, "pgm");
        let m = check(p.clone(), read_pgm(&p)?, 1)?;
        if !m.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::format(&p, "mask values must be 0 or 255"));
        }
        sample.masks.push(m);
        let p = indexed(dir, "flow", t, "flo");
        sample.flow.push(check(p.clone(), read_flo(&p)?, 2)?);
    }
    sample.validate()?;
    Ok(sample)
}

pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Sequence directories listed in `dir/manifest.txt`, in order.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| dir.join(l))
        .collect())
}
