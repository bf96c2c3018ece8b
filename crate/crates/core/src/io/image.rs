//! Binary PGM (`P5`) and PPM (`P6`) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Encodes one `[1, h, w, c]` u8 image, `c` in {1, 3}.
pub fn encode_pnm(img: &Tensor<u8>) -> Result<Vec<u8>> {
    let [n, h, w, c] = img.shape().0;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Shape(format!(
                "images need 1 or 3 channels, got {c}"
            )))
        }
    };
    if n != 1 {
        return Err(Error::Shape(format!(
            "encode one image at a time, got batch {n}"
        )));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(img.data());
    Ok(out)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a binary PGM/PPM with `maxval <= 255` into `[1, h, w, c]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<u8>> {
    let mut pos = 0;
    let c = match next_token(bytes, &mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let mut num = || -> Result<usize> {
        let t = next_token(bytes, &mut pos)?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad PNM header field {t:?}")))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = w * h * c;
    if bytes.len() < pos + len {
        return Err(Error::Format("truncated PNM raster".into()));
    }
    let data = bytes[pos..pos + len]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Tensor::from_vec(Shape::new(1, h, w, c), data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor<u8>> {
    decode_pnm(&std::fs::read(path)?)
}

/// Tiles `x` (values in `[0, 2^n_bits)`) into a grid `cols` wide, scaling
/// level `2^n_bits - 1` to 255. Unused tiles stay black.
pub fn image_grid<T: Real>(x: &Tensor<T>, n_bits: u32, cols: usize) -> Result<Tensor<u8>> {
    let [n, h, w, c] = x.shape().0;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!(
            "images need 1 or 3 channels, got {c}"
        )));
    }
    if cols == 0 || n == 0 {
        return Err(Error::Validation(
            "grid needs at least one column and one image".into(),
        ));
    }
    let top = ((1u32 << n_bits) - 1) as f64;
    let rows = n.div_ceil(cols);
    let mut grid = Tensor::<u8>::full(Shape::new(1, rows * h, cols * w, c), 0);
    for b in 0..n {
        let (gy, gx) = (b / cols, b % cols);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = x.at(b, i, j, ch).as_f64();
                    let v = if v.is_finite() {
                        v.floor().clamp(0.0, top)
                    } else {
                        0.0
                    };
                    let px = if top > 0.0 {
                        (v * 255.0 / top).round()
                    } else {
                        0.0
                    };
                    grid.set(0, gy * h + i, gx * w + j, ch, px as u8);
                }
            }
        }
    }
    Ok(grid)
}

pub fn write_image_grid<T: Real>(
    x: &Tensor<T>,
    n_bits: u32,
    cols: usize,
    path: &Path,
) -> Result<()> {
    let bytes = encode_pnm(&image_grid(x, n_bits, cols)?)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
