//! On-disk formats: RNT1 tensors, PFM depth maps, ASCII PLY clouds, binary
//! PGM images and plain-text camera files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};

pub const TENSOR_MAGIC: &[u8; 4] = b"RNT1";

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(x: f32) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![x],
        }
    }

    pub fn encode(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * (self.dims.len() + self.data.len()));
        self.encode(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
        let word = |at: usize| -> std::result::Result<u32, String> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated tensor".to_string())
        };
        if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
            return Err("bad magic, expected RNT1".into());
        }
        let ndim = word(4)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for i in 0..ndim {
            dims.push(word(8 + 4 * i)? as usize);
        }
        let n: usize = dims.iter().product();
        let start = 8 + 4 * ndim;
        let end = start + 4 * n;
        let raw = bytes.get(start..end).ok_or("truncated tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Tensor { dims, data }, end))
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = Tensor::decode(&bytes).map_err(|m| Error::parse(path, m))?;
    if used != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// A container file is a plain concatenation of RNT1 tensors.
pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.encode(&mut buf).expect("writing to a Vec cannot fail");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    let mut out = Vec::new();
    while at < bytes.len() {
        let (t, used) = Tensor::decode(&bytes[at..]).map_err(|m| Error::parse(path, m))?;
        out.push(t);
        at += used;
    }
    Ok(out)
}

/// Single-channel image, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f64;
                let mut n = 0usize;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let (rr, cc) = (r * factor + dr, c * factor + dc);
                        if rr < self.height && cc < self.width {
                            acc += self.at(rr, cc) as f64;
                            n += 1;
                        }
                    }
                }
                data.push((acc / n as f64) as f32);
            }
        }
        Image::new(w, h, data)
    }
}

/// Converts an RGB triple to luma.
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Writes a little-endian grayscale PFM. Row 0 of `image` is the top row;
/// PFM stores rows bottom to top.
pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    for r in (0..image.height).rev() {
        for c in 0..image.width {
            buf.extend_from_slice(&image.at(r, c).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    Some((tokens, i + 1))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, start) = header_tokens(&bytes, 4).ok_or_else(|| Error::parse(path, "truncated PFM header"))?;
    if tokens[0] != "Pf" {
        return Err(Error::parse(path, "only grayscale 'Pf' PFM files are supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, "bad PFM size"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let scale: f64 = tokens[3].parse().map_err(|_| Error::parse(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let payload = bytes
        .get(start..start + 4 * width * height)
        .ok_or_else(|| Error::parse(path, "truncated PFM data"))?;
    let mut data = vec![0.0f32; width * height];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = c.try_into().unwrap();
        let x = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (i / width, i % width);
        data[(height - 1 - file_row) * width + col] = x;
    }
    Ok(Image::new(width, height, data))
}

/// Binary 8- or 16-bit PGM (P5), intensities mapped to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, start) = header_tokens(&bytes, 4).ok_or_else(|| Error::parse(path, "truncated PGM header"))?;
    if tokens[0] != "P5" {
        return Err(Error::parse(path, "only binary PGM (P5) is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, "bad PGM header"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, "PGM maxval must be in 1..=65535"));
    }
    let n = width * height;
    let data: Vec<f32> = if maxval < 256 {
        let raw = bytes.get(start..start + n).ok_or_else(|| Error::parse(path, "truncated PGM data"))?;
        raw.iter().map(|&b| b as f32 / maxval as f32).collect()
    } else {
        let raw = bytes
            .get(start..start + 2 * n)
            .ok_or_else(|| Error::parse(path, "truncated PGM data"))?;
        raw.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32)
            .collect()
    };
    Ok(Image::new(width, height, data))
}

/// Writes a 16-bit binary PGM; intensities are clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", image.width, image.height).into_bytes();
    for &x in &image.data {
        buf.extend(((x.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        out.push_str(&format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, "unexpected end of PLY"))?
            .map_err(|e| Error::io(path, e))
    };
    if next()?.trim() != "ply" {
        return Err(Error::parse(path, "missing 'ply' magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = next()?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, _] if *fmt != "ascii" => {
                return Err(Error::parse(path, "only ASCII PLY is supported"))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(path, "bad vertex count"))?)
            }
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::parse(path, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(path, format!("missing property {name}")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next()?;
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|w| w.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, "bad vertex value"))?;
        if vals.len() < props.len() {
            return Err(Error::parse(path, "short vertex line"));
        }
        points.push(Vec3::new(vals[ix] as f64, vals[iy] as f64, vals[iz] as f64));
    }
    Ok(points)
}

/// Camera text file: `K` + 3 rows, `R` + 3 rows, `t` + 1 row, `size` + `width height`.
pub fn parse_camera(text: &str, id: usize, path: &Path) -> Result<Camera> {
    let rows = |n: usize, lines: &mut dyn Iterator<Item = &str>| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for _ in 0..n {
            let l = lines.next().ok_or_else(|| Error::parse(path, "unexpected end of camera file"))?;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("bad number in '{l}'")))?;
            if vals.len() != 3 {
                return Err(Error::parse(path, format!("expected 3 values in '{l}'")));
            }
            out.extend(vals);
        }
        Ok(out)
    };
    let mut lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    lines.reverse();
    let mut it = std::iter::from_fn(move || lines.pop());
    let tag = |it: &mut dyn Iterator<Item = &str>, want: &str| -> Result<()> {
        match it.next() {
            Some(l) if l == want => Ok(()),
            other => Err(Error::parse(path, format!("expected '{want}', found {other:?}"))),
        }
    };
    tag(&mut it, "K")?;
    let k = rows(3, &mut it)?;
    tag(&mut it, "R")?;
    let r = rows(3, &mut it)?;
    tag(&mut it, "t")?;
    let t = rows(1, &mut it)?;
    tag(&mut it, "size")?;
    let size = it.next().ok_or_else(|| Error::parse(path, "missing image size"))?;
    let wh: Vec<usize> = size
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, "bad image size"))?;
    if wh.len() != 2 {
        return Err(Error::parse(path, "size needs 'width height'"));
    }
    Camera::new(
        id,
        Mat3::from_row_slice(&k),
        Mat3::from_row_slice(&r),
        Vec3::from_row_slice(&t),
        wh[0],
        wh[1],
    )
    .map_err(|e| Error::parse(path, e.to_string()))
}

pub fn format_camera(camera: &Camera) -> String {
    let mut s = String::from("K\n");
    let row = |m: &Mat3, r: usize| format!("{:e} {:e} {:e}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)]);
    for r in 0..3 {
        s.push_str(&row(&camera.k, r));
    }
    s.push_str("R\n");
    for r in 0..3 {
        s.push_str(&row(&camera.r, r));
    }
    s.push_str(&format!("t\n{:e} {:e} {:e}\n", camera.t.x, camera.t.y, camera.t.z));
    s.push_str(&format!("size\n{} {}\n", camera.width, camera.height));
    s
}

pub fn read_camera(path: &Path, id: usize) -> Result<Camera> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_camera(&text, id, path)
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    fs::write(path, format_camera(camera)).map_err(|e| Error::io(path, e))
}
