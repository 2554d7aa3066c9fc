use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Planar `[3, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let scale = 1.0 / 255.0;
        Tensor::from_fn(vec![3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            T::from_f64(f64::from(self.pixels[rest * 3 + c]) * scale)
        })
    }

    /// Inverse of [`RgbImage::to_tensor`]: accepts `[3, H, W]` or
    /// `[1, 3, H, W]`, clamps to `[0, 1]` and rounds to the nearest level.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[3, h, w] | &[1, 3, h, w] => (h, w),
            s => {
                return Err(Error::InvalidShape {
                    op: "from_tensor",
                    msg: format!("expected [3, H, W] or [1, 3, H, W], got {s:?}"),
                })
            }
        };
        let d = t.data();
        let mut pixels = vec![0u8; h * w * 3];
        for c in 0..3 {
            for p in 0..h * w {
                pixels[p * 3 + c] = quantize(d[c * h * w + p].as_f64() * 255.0);
            }
        }
        Self::new(w, h, pixels)
    }
}

/// Clamps to `[0, 255]` and rounds half away from zero.
pub(crate) fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(Self::Png),
            "ppm" => Some(Self::Ppm),
            _ => None,
        }
    }
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1A, b'\n'];

/// Loads an 8-bit RGB PNG or binary PPM (P6, maxval 255).
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes).map_err(|msg| Error::format(path, msg))
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(|msg| Error::format(path, msg))
    } else {
        Err(Error::format(path, "unsupported format (expected PNG or PPM P6)"))
    }
}

/// Writes losslessly; the format follows the file extension.
pub fn save_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)
        .ok_or_else(|| Error::format(path, "unsupported extension (expected .png or .ppm)"))?;
    let bytes = match format {
        ImageFormat::Png => encode_png(image).map_err(|msg| Error::format(path, msg))?,
        ImageFormat::Ppm => encode_ppm(image),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format!("PNG: {e}"))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("PNG bit depth {:?}, expected 8", info.bit_depth));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(format!("PNG color type {:?}, expected RGB", info.color_type));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "PNG: image too large".to_string())?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| format!("PNG: {e}"))?;
    buf.truncate(frame.buffer_size());
    if frame.line_size != w * 3 {
        return Err("PNG: unexpected row stride".into());
    }
    RgbImage::new(w, h, buf).map_err(|e| e.to_string())
}

fn encode_png(image: &RgbImage) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(
            BufWriter::new(&mut out),
            image.width as u32,
            image.height as u32,
        );
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| e.to_string())?;
        writer
            .write_image_data(&image.pixels)
            .map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    // Header: "P6", width, height, maxval, separated by whitespace with
    // optional '#' comments, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("PPM: truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("PPM: malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "PPM: header value out of range".to_string())?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("PPM: malformed header".into());
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("PPM maxval {maxval}, expected 255"));
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or("PPM: dimensions overflow")?;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(format!("PPM: truncated pixel data ({} of {need} bytes)", data.len()));
    }
    RgbImage::new(w, h, data[..need].to_vec()).map_err(|e| e.to_string())
}

fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = SplitMix64::new(seed);
        let px = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
        RgbImage::new(w, h, px).unwrap()
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(16, 16, 1);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn grayscale_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 4, 4);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[128; 16]).unwrap();
        }
        fs::write(&p, out).unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("color type"), "{err}");
    }

    #[test]
    fn truncated_and_unknown_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        fs::write(&p, b"P6\n4 4\n255\n\x01\x02").unwrap();
        assert!(load_image(&p).unwrap_err().to_string().contains("truncated"));
        let q = dir.path().join("x.bmp");
        fs::write(&q, b"BM....").unwrap();
        assert!(load_image(&q).is_err());
        assert!(save_image(&random_image(2, 2, 0), dir.path().join("x.jpg")).is_err());
    }

    #[test]
    fn ppm_header_comments() {
        let img = RgbImage::filled(2, 1, [1, 2, 3]);
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(img.pixels());
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn tensor_round_trip_and_layout() {
        let img = random_image(96, 96, 2);
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 96, 96]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
        // channel-major: element [1, 0, 5] is the green value of pixel (5, 0)
        assert_eq!(t.data()[96 * 96 + 5], f32::from(img.get(5, 0, 1)) / 255.0);
    }

    #[test]
    fn quantize_rounds_half_away_and_clamps() {
        assert_eq!(quantize(2.5), 3);
        assert_eq!(quantize(-4.0), 0);
        assert_eq!(quantize(300.0), 255);
        assert_eq!(quantize(254.49), 254);
    }
}
