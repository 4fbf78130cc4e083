//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::fs;
use std::path::Path;

use cimnet_core::Tensor;

use crate::error::{io_err, Error, Result};

/// Decodes a P5/P6 image to `[1, C, H, W]` with values `v / 255`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(format!("unsupported magic {:?}", String::from_utf8_lossy(other))),
    };
    let mut field = |name: &str| -> std::result::Result<usize, String> {
        let t = token(bytes, &mut pos).ok_or_else(|| format!("header ends before {name}"))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {name} {:?}", String::from_utf8_lossy(t)))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval}, only 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let need = channels * width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", raster.len()));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; need];
    for (i, &v) in raster[..need].iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * plane + p] = f32::from(v) / 255.0;
    }
    Tensor::from_vec(&[1, channels, height, width], data).map_err(|e| e.to_string())
}

/// Next whitespace-separated header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Encodes `[1, C, H, W]` or `[C, H, W]` (C = 1 or 3) as P5/P6, mapping
/// `x` to `round(255 · clamp(x, 0, 1))`.
pub fn encode_pnm(t: &Tensor<f32>) -> std::result::Result<Vec<u8>, String> {
    let (c, h, w) = match *t.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(format!("cannot encode tensor of shape {:?}", t.shape())),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(format!("{c} channels; images have 1 or 3")),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            let x = t.data()[ch * plane + p];
            let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            out.push((255.0 * x).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pnm(&bytes).map_err(|detail| Error::Image { path: path.into(), detail })
}

pub fn write_pnm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pnm(t).map_err(|detail| Error::Image { path: path.into(), detail })?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Promotes a grayscale `[1, 1, H, W]` image to three identical channels.
pub fn to_rgb(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims4()?;
    match c {
        3 => Ok(t.clone()),
        1 => {
            let plane = h * w;
            let mut data = Vec::with_capacity(n * 3 * plane);
            for i in 0..n {
                let src = &t.data()[i * plane..(i + 1) * plane];
                for _ in 0..3 {
                    data.extend_from_slice(src);
                }
            }
            Ok(Tensor::from_vec(&[n, 3, h, w], data)?)
        }
        _ => Err(Error::Data(format!("{c}-channel image"))),
    }
}
