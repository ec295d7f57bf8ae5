//! Binary PPM output and signed heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// P6 bytes for a `[3, H, W]` image in `[0, 1]`, optionally enlarged by an integer factor.
pub fn ppm_bytes(img: &Tensor, upscale: usize) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape("ppm", format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let k = upscale.max(1);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{} {}\n255\n", w * k, h * k).into_bytes();
    let d = img.data();
    for y in 0..h * k {
        for x in 0..w * k {
            for c in 0..3 {
                let v = d[(c * h + y / k) * w + x / k];
                let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor, upscale: usize) -> Result<()> {
    fs::write(path, ppm_bytes(img, upscale)?)?;
    Ok(())
}

/// Parse P6 bytes (maxval 255) back into `[3, H, W]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM field '{s}'")));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::Data("only P6 with maxval 255 is supported".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let px = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| Error::Data("truncated PPM data".into()))?;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        px[p * 3 + c] as f64 / 255.0
    }))
}

/// Diverging blue–white–red rendering of a signed `[H, W]` map, symmetric around zero.
pub fn heatmap(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::shape("heatmap", format!("expected [H, W], got {:?}", map.shape())));
    }
    let scale = map.max_abs();
    let plane = map.len();
    let d = map.data();
    Ok(Tensor::from_fn(&[3, map.shape()[0], map.shape()[1]], |i| {
        let (c, p) = (i / plane, i % plane);
        let v = if scale > 0.0 { d[p] / scale } else { 0.0 };
        // Positive fades white to red, negative fades white to blue.
        match c {
            0 => if v >= 0.0 { 1.0 } else { 1.0 + v },
            1 => 1.0 - v.abs(),
            _ => if v <= 0.0 { 1.0 } else { 1.0 - v },
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_header() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| (i % 7) as f64 / 6.0);
        let bytes = ppm_bytes(&img, 1).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        let back = read_ppm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        let big = ppm_bytes(&img, 4).unwrap();
        assert!(big.starts_with(b"P6\n12 8\n255\n"));
    }

    #[test]
    fn heatmap_colors() {
        let m = Tensor::new(&[1, 3], vec![-2.0, 0.0, 2.0]).unwrap();
        let h = heatmap(&m).unwrap();
        let px = |p: usize| [h.data()[p], h.data()[3 + p], h.data()[6 + p]];
        assert_eq!(px(0), [0.0, 0.0, 1.0]);
        assert_eq!(px(1), [1.0, 1.0, 1.0]);
        assert_eq!(px(2), [1.0, 0.0, 0.0]);
    }
}
