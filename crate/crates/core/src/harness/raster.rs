//! 8-bit raster files: binary PGM/PPM read and write, PNG read.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Planar image with values in `[0, 1]`, `channels x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!("raster {channels}x{height}x{width} with {} values", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    fn from_interleaved(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0.0; channels * plane];
        for (p, px) in bytes.chunks_exact(channels).enumerate().take(plane) {
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + p] = v as f32 / 255.0;
            }
        }
        Self::new(channels, height, width, data)
    }

    fn interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..plane {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * plane + p]));
            }
        }
        out
    }

    /// Replicates a single channel into three.
    pub fn to_rgb(&self) -> Raster {
        match self.channels {
            3 => self.clone(),
            1 => Raster {
                channels: 3,
                height: self.height,
                width: self.width,
                data: self.data.repeat(3),
            },
            _ => {
                let plane = self.height * self.width;
                Raster {
                    channels: 3,
                    height: self.height,
                    width: self.width,
                    data: self.data[..3 * plane].to_vec(),
                }
            }
        }
    }

    /// Mean over channels.
    pub fn to_gray(&self) -> Raster {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|p| (0..self.channels).map(|c| self.data[c * plane + p]).sum::<f32>() / self.channels as f32)
            .collect();
        Raster {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// `round(255 p)` clamped to a byte.
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_pnm(bytes: &[u8]) -> Result<Raster> {
    let bad = |m: &str| Error::Format(format!("PNM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("only maxval 255 is supported, got {maxval}")));
    }
    let need = channels * width * height;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    Raster::from_interleaved(channels, height, width, body)
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    match info.color_type {
        png::ColorType::Grayscale => Raster::from_interleaved(1, h, w, bytes),
        png::ColorType::GrayscaleAlpha => {
            let g: Vec<u8> = bytes.chunks_exact(2).map(|c| c[0]).collect();
            Raster::from_interleaved(1, h, w, &g)
        }
        png::ColorType::Rgb => Raster::from_interleaved(3, h, w, bytes),
        png::ColorType::Rgba => {
            let rgb: Vec<u8> = bytes.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect();
            Raster::from_interleaved(3, h, w, &rgb)
        }
        png::ColorType::Indexed => Err(Error::Format("PNG: palette was not expanded".into())),
    }
}

/// Reads a PGM (P5), PPM (P6) or PNG file.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        parse_pnm(&bytes)
    } else {
        Err(Error::Format(format!("{}: not a PGM, PPM or PNG file", path.display())))
    }
}

/// Writes a one-channel raster as P5 or a three-channel raster as P6.
pub fn write_pnm(raster: &Raster, path: &Path) -> Result<()> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot write a {c}-channel raster as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.interleaved());
    let mut f = BufWriter::new(fs::File::create(path)?);
    std::io::Write::write_all(&mut f, &out)?;
    Ok(())
}

/// Bilinear resize with half-pixel centers; the identity when extents match.
pub fn resize_bilinear_raster(r: &Raster, height: usize, width: usize) -> Raster {
    if (height, width) == (r.height, r.width) {
        return r.clone();
    }
    let (sh, sw) = (r.height as f32 / height as f32, r.width as f32 / width as f32);
    let axis = |i: usize, scale: f32, n: usize| {
        let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f32)
    };
    let mut data = Vec::with_capacity(r.channels * height * width);
    for c in 0..r.channels {
        let plane = &r.data[c * r.height * r.width..(c + 1) * r.height * r.width];
        for i in 0..height {
            let (y0, y1, fy) = axis(i, sh, r.height);
            for j in 0..width {
                let (x0, x1, fx) = axis(j, sw, r.width);
                let top = plane[y0 * r.width + x0] * (1.0 - fx) + plane[y0 * r.width + x1] * fx;
                let bot = plane[y1 * r.width + x0] * (1.0 - fx) + plane[y1 * r.width + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Raster {
        channels: r.channels,
        height,
        width,
        data,
    }
}

/// Nearest-neighbor resize; the identity when extents match.
pub fn resize_nearest_raster(r: &Raster, height: usize, width: usize) -> Raster {
    if (height, width) == (r.height, r.width) {
        return r.clone();
    }
    let pick = |i: usize, n_out: usize, n_in: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut data = Vec::with_capacity(r.channels * height * width);
    for c in 0..r.channels {
        let plane = &r.data[c * r.height * r.width..(c + 1) * r.height * r.width];
        for i in 0..height {
            let y = pick(i, height, r.height);
            for j in 0..width {
                data.push(plane[y * r.width + pick(j, width, r.width)]);
            }
        }
    }
    Raster {
        channels: r.channels,
        height,
        width,
        data,
    }
}
