//! Binary PPM (P6) codec and bilinear resampling.

use std::path::Path;

use crate::error::{Error, ImageError, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB image in planar `[3, H, W]` layout, values in `[0, 1]`.
pub type Image = Tensor<f32>;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::MalformedHeader("missing `P6` magic".into()));
    }
    if bytes[1] != b'6' {
        return Err(ImageError::Unsupported(format!("PPM variant P{}", bytes[1] as char)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][i];
            return Err(ImageError::MalformedHeader(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageError::MalformedHeader(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::MalformedHeader("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval} (only 8-bit supported)")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos,
    })
}

/// Decode a P6 byte stream to `[3, H, W]` scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, ImageError> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let expected = plane * 3;
    let payload = &bytes[h.offset..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let scale = 1.0 / h.maxval as f32;
    let mut data = vec![0f32; expected];
    for (p, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = (px[c] as f32 * scale).min(1.0);
        }
    }
    Ok(Tensor::new(&[3, h.height, h.width], data).expect("sized"))
}

/// Encode `[3, H, W]` in `[0, 1]` as P6 with maxval 255, rounding to nearest.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let [3, height, width] = image.shape()[..] else {
        return Err(Error::invalid("encode_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(plane * 3);
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let [channels, in_h, in_w] = image.shape()[..] else {
        return Err(Error::invalid("resize_bilinear", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "target size must be positive"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    let src = image.data();
    let mut data = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * in_h * in_w..(c + 1) * in_h * in_w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let at = |y: usize, x: usize| plane[y * in_w + x] as f64;
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                data.push((top * (1.0 - wy) + bottom * wy) as f32);
            }
        }
    }
    Tensor::new(&[channels, out_h, out_w], data)
}

/// Read a PPM and resize it to `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = read_ppm(path)?;
    if img.shape()[1] == size && img.shape()[2] == size {
        return Ok(img);
    }
    resize_bilinear(&img, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn white_upsampled_is_ones() {
        let img = decode_ppm(&ppm(2, 2, &[255; 12])).unwrap();
        let r = resize_bilinear(&img, 4, 4).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let px: Vec<u8> = (0..75).map(|i| (i * 37 % 256) as u8).collect();
        let img = decode_ppm(&ppm(5, 5, &px)).unwrap();
        let r = resize_bilinear(&img, 5, 5).unwrap();
        for (a, b) in img.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkerboard_downsample_averages() {
        let mut px = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let v = if (x + y) % 2 == 0 { 255 } else { 0 };
                px.extend([v, v, v]);
            }
        }
        let img = decode_ppm(&ppm(4, 4, &px)).unwrap();
        let r = resize_bilinear(&img, 2, 2).unwrap();
        assert_eq!(r.shape(), &[3, 2, 2]);
        for &v in r.data() {
            assert!((v - 0.5).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn comments_and_channel_order() {
        let bytes = b"P6 # c\n1 # w\n1\n255\n\xff\x00\x80".to_vec();
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn header_and_payload_errors_are_distinct() {
        assert!(matches!(decode_ppm(b"P6\n2 x\n255\n"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"GIF89a"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(
            decode_ppm(&ppm(2, 2, &[0; 5])),
            Err(ImageError::TruncatedPayload { expected: 12, found: 5 })
        ));
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0"), Err(ImageError::Unsupported(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n"), Err(ImageError::Unsupported(_))));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let px: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let bytes = ppm(4, 4, &px);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }
}
