//! Canonical image representation and file I/O.
//!
//! Pixels live in channel-planar `f32` with nominal range `[0, 1]`; 8-bit
//! interleaved data exists only at the file boundary. PNG (8-bit,
//! non-interlaced) plus binary PPM/PGM are the supported formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("expected {expected} channels, got {got}")]
    WrongChannelCount { expected: usize, got: usize },
    #[error("border shave {n} too large for {height}x{width} image")]
    ShaveTooLarge {
        n: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid image dims: channels={channels} height={height} width={width}")]
    InvalidDims {
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// Channel-planar floating-point image. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PlanarImage {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if !(channels == 1 || channels == 3) || height == 0 || width == 0 {
            return Err(ImageError::InvalidDims {
                channels,
                height,
                width,
            });
        }
        assert_eq!(data.len(), channels * height * width, "data length mismatch");
        assert!(data.iter().all(|v| v.is_finite()), "non-finite pixel value");
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width]).unwrap()
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).unwrap()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel plane as a contiguous slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rectangular crop; `y0 + h <= height`, `x0 + w <= width`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> PlanarImage {
        assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let row = (c * self.height + y0 + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        PlanarImage::new(self.channels, h, w, data).unwrap()
    }

    /// Map every sample through `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> PlanarImage {
        PlanarImage {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// 8-bit interleaved samples, the I/O carrier.
#[derive(Debug, Clone)]
pub struct ImageU8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn to_planar(&self) -> PlanarImage {
        let n = self.height * self.width;
        let mut data = vec![0.0f32; self.channels * n];
        for i in 0..n {
            for c in 0..self.channels {
                data[c * n + i] = self.data[i * self.channels + c] as f32 / 255.0;
            }
        }
        PlanarImage::new(self.channels, self.height, self.width, data).unwrap()
    }

    pub fn from_planar(img: &PlanarImage) -> ImageU8 {
        let n = img.height * img.width;
        let mut data = vec![0u8; img.channels * n];
        for i in 0..n {
            for c in 0..img.channels {
                let v = img.data[c * n + i].clamp(0.0, 1.0);
                data[i * img.channels + c] = (v * 255.0).round() as u8;
            }
        }
        ImageU8 {
            channels: img.channels,
            height: img.height,
            width: img.width,
            data,
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<PlanarImage, ImageError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|source| ImageError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let mut magic = [0u8; 2];
    file.read_exact(&mut magic)
        .map_err(|_| ImageError::CorruptHeader("file shorter than 2 bytes".into()))?;
    drop(file);
    match &magic {
        [0x89, b'P'] => load_png(path),
        [b'P', b'5'] | [b'P', b'6'] => load_pnm(path),
        _ => Err(ImageError::UnsupportedFormat(format!(
            "{}: unrecognized magic {:02x}{:02x}",
            path.display(),
            magic[0],
            magic[1]
        ))),
    }
}

fn load_png(path: &Path) -> Result<PlanarImage, ImageError> {
    let file = File::open(path).map_err(|source| ImageError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::CorruptHeader(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedFormat(format!(
            "{}: only 8-bit PNG supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    if info.interlaced {
        return Err(ImageError::UnsupportedFormat(format!(
            "{}: interlaced PNG not supported",
            path.display()
        )));
    }
    let color = info.color_type;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::CorruptHeader(format!("{}: {e}", path.display())))?;
    let (w, h) = (out.width as usize, out.height as usize);
    buf.truncate(out.buffer_size());
    // Strip alpha if present; other color types rejected.
    let (channels, data) = match color {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::GrayscaleAlpha => {
            (1, buf.chunks_exact(2).map(|p| p[0]).collect())
        }
        png::ColorType::Rgba => (
            3,
            buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ),
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "{}: PNG color type {other:?} not supported",
                path.display()
            )))
        }
    };
    Ok(ImageU8 {
        channels,
        height: h,
        width: w,
        data,
    }
    .to_planar())
}

fn load_pnm(path: &Path) -> Result<PlanarImage, ImageError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ImageError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
    let corrupt = |msg: &str| ImageError::CorruptHeader(format!("{}: {msg}", path.display()));
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(corrupt("not a P5/P6 header")),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // '#' comments allowed, then a single whitespace byte before raster data.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| corrupt("bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::UnsupportedFormat(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(corrupt("missing raster separator"));
    }
    pos += 1;
    let expected = channels * width * height;
    if bytes.len() - pos < expected {
        return Err(corrupt("raster shorter than header promises"));
    }
    Ok(ImageU8 {
        channels,
        height,
        width,
        data: bytes[pos..pos + expected].to_vec(),
    }
    .to_planar())
}

/// Clamps to `[0, 1]`, quantizes by `round(v * 255)` and writes PNG or
/// binary PPM/PGM depending on the file extension (`.ppm`/`.pgm` -> PNM,
/// anything else -> PNG).
pub fn save_image(img: &PlanarImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let u8img = ImageU8::from_planar(img);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" | "pgm" => save_pnm(&u8img, path),
        _ => save_png(&u8img, path),
    }
}

fn save_png(img: &ImageU8, path: &Path) -> Result<(), ImageError> {
    let unwritable = |source| ImageError::Unwritable {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(unwritable)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ImageError::Unwritable {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| ImageError::Unwritable {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })
}

fn save_pnm(img: &ImageU8, path: &Path) -> Result<(), ImageError> {
    let unwritable = |source| ImageError::Unwritable {
        path: path.display().to_string(),
        source,
    };
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut w = BufWriter::new(File::create(path).map_err(unwritable)?);
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height).map_err(unwritable)?;
    w.write_all(&img.data).map_err(unwritable)?;
    w.flush().map_err(unwritable)
}

/// Studio-swing BT.601 luma, the convention under which published Y-PSNR
/// baselines are computed.
pub fn rgb_to_y(img: &PlanarImage) -> Result<PlanarImage, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::WrongChannelCount {
            expected: 3,
            got: img.channels,
        });
    }
    let n = img.height * img.width;
    let (r, g, b) = (&img.data[..n], &img.data[n..2 * n], &img.data[2 * n..]);
    let data = (0..n)
        .map(|i| (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0)
        .collect();
    PlanarImage::new(1, img.height, img.width, data)
}

/// Central crop dropping `n` pixels from every border.
pub fn shave_border(img: &PlanarImage, n: usize) -> Result<PlanarImage, ImageError> {
    if 2 * n >= img.height.min(img.width) {
        return Err(ImageError::ShaveTooLarge {
            n,
            height: img.height,
            width: img.width,
        });
    }
    Ok(img.crop(n, n, img.height - 2 * n, img.width - 2 * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp(channels: usize, h: usize, w: usize) -> PlanarImage {
        let n = channels * h * w;
        let data = (0..n).map(|i| (i % 256) as f32 / 255.0).collect();
        PlanarImage::new(channels, h, w, data).unwrap()
    }

    #[test]
    fn png_round_trip_1x1_extremes() {
        let dir = tempdir().unwrap();
        for (v, expect) in [(1.0f32, 1.0f32), (0.0, 0.0)] {
            let img = PlanarImage::constant(3, 1, 1, v);
            let p = dir.path().join("px.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.data(), &[expect; 3]);
        }
    }

    #[test]
    fn pgm_quarter_levels() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        std::fs::write(&p, {
            let mut b = b"P5\n2 2\n255\n".to_vec();
            b.extend_from_slice(&[0, 85, 170, 255]);
            b
        })
        .unwrap();
        let img = load_image(&p).unwrap();
        let expect = [0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0];
        for (got, want) in img.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn save_clamps_and_quantizes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let img = PlanarImage::new(1, 1, 2, vec![0.5, 1.2]).unwrap();
        save_image(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let raster = &bytes[bytes.len() - 2..];
        assert_eq!(raster, &[128, 255]);
    }

    #[test]
    fn round_trip_error_bound_and_idempotence() {
        let dir = tempdir().unwrap();
        let img = ramp(3, 7, 5);
        let p = dir.path().join("r.png");
        save_image(&img, &p).unwrap();
        let once = load_image(&p).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(once.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-9, "max_err={max_err}");
        // second round trip is exact
        save_image(&once, &p).unwrap();
        let twice = load_image(&p).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn y_conversion_reference_points() {
        let cases = [
            ([1.0, 1.0, 1.0], 235.0 / 255.0),
            ([0.0, 0.0, 0.0], 16.0 / 255.0),
            ([0.0, 1.0, 0.0], (16.0 + 128.553) / 255.0),
        ];
        for (rgb, want) in cases {
            let img =
                PlanarImage::new(3, 1, 1, rgb.to_vec()).unwrap();
            let y = rgb_to_y(&img).unwrap();
            assert!((y.data()[0] - want).abs() < 1e-6, "rgb={rgb:?}");
        }
    }

    #[test]
    fn y_range_bound() {
        let img = ramp(3, 8, 8);
        let y = rgb_to_y(&img).unwrap();
        for &v in y.data() {
            assert!(v >= 16.0 / 255.0 - 1e-6 && v <= 235.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rgb_to_y_rejects_gray() {
        let img = PlanarImage::zeros(1, 2, 2);
        assert!(matches!(
            rgb_to_y(&img),
            Err(ImageError::WrongChannelCount { .. })
        ));
    }

    #[test]
    fn shave_cases() {
        let img = ramp(1, 10, 10);
        assert_eq!(shave_border(&img, 0).unwrap(), img);
        let s = shave_border(&img, 3).unwrap();
        assert_eq!((s.height(), s.width()), (4, 4));

        let img8 = ramp(1, 8, 8);
        let s = shave_border(&img8, 2).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(s.get(0, y, x), img8.get(0, y + 2, x + 2));
            }
        }
        assert!(shave_border(&img8, 4).is_err());
    }

    #[test]
    fn rejects_garbage_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"notanimage").unwrap();
        assert!(matches!(
            load_image(&p),
            Err(ImageError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(ImageError::Unreadable { .. })
        ));
    }

    #[test]
    fn rejects_truncated_pnm() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&p), Err(ImageError::CorruptHeader(_))));
    }
}
