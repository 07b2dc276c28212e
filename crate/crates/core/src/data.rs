//! Image files, pair manifests and the synthetic low-light dataset.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Stream};
use crate::tensor::{Real, Tensor};
use crate::training::Dataset;

/// Quantizes `[0,1]` to a byte, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn to_tensor(w: usize, h: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = w * h;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        rgb[p * 3 + c] as f32 / 255.0
    })
}

/// Interleaved 8-bit RGB of a `[3,H,W]` tensor. Out-of-range values are
/// clamped with one warning per image.
fn to_rgb<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = t.dims3("save_image")?;
    if c != 3 {
        return Err(Error::Dimension {
            op: "save_image",
            axis: "channels",
            expected: 3,
            found: c,
        });
    }
    let d = t.data();
    if d.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        log::warn!("image values outside [0,1] were clamped before saving");
    }
    let plane = w * h;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        for (ch, b) in px.iter_mut().enumerate() {
            *b = quantize(d[ch * plane + i].as_f64());
        }
    }
    Ok((w, h, out))
}

pub fn encode_ppm<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::format("PPM", msg);
    let mut pos = 0;
    // Whitespace-separated header tokens; `#` starts a comment to end of line.
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(bad(&format!("magic `{magic}` is not P6")));
    }
    let mut num = |field: &str| -> Result<usize> {
        token()?.parse().map_err(|_| bad(&format!("bad {field}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(bad(&format!(
            "maxval {maxval} unsupported, need 255 (8-bit)"
        )));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero extent"));
    }
    let start = pos + 1;
    let need = w * h * 3;
    let body = bytes.get(start..).unwrap_or(&[]);
    if body.len() < need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("PPM pixel data truncated: {} of {need} bytes", body.len()),
        )));
    }
    Ok(to_tensor(w, h, &body[..need]))
}

pub fn encode_png<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc
            .write_header()
            .map_err(|e| Error::format("PNG", e.to_string()))?;
        wr.write_image_data(&rgb)
            .map_err(|e| Error::format("PNG", e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            "PNG bit depth",
            format!("{:?} unsupported, need 8", info.bit_depth),
        ));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::format(
            "PNG color type",
            format!("{:?} unsupported, need RGB", info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    Ok(to_tensor(w, h, &buf[..frame.buffer_size()]))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a P6 PPM or 8-bit RGB PNG as a `[3,H,W]` tensor in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let res = if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    };
    res.map_err(|e| Error::Path {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes PNG for a `.png` extension and PPM otherwise.
pub fn save_image<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = if is_png(path) {
        encode_png(t)?
    } else {
        encode_ppm(t)?
    };
    fs::write(path, bytes).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            gain: 0.3,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be >= 1", self.gamma)));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::Config(format!(
                "gain {} must be in (0,1]",
                self.gain
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// `clamp(gain * ref^gamma + N(0, sigma^2), 0, 1)` with noise from the
/// seed's noise stream.
pub fn synth_degrade<T: Real>(reference: &Tensor<T>, p: &DegradeParams) -> Result<Tensor<T>> {
    p.validate()?;
    let mut rng = stream(p.seed, Stream::Noise);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let identity = p.gamma == 1.0 && p.gain == 1.0;
    let out = reference.data().iter().map(|&v| {
        let mut x = if identity {
            v.as_f64()
        } else {
            p.gain * v.as_f64().powf(p.gamma)
        };
        if p.noise_sigma > 0.0 {
            x += noise.sample(&mut rng);
        }
        T::of(x.clamp(0.0, 1.0))
    });
    Tensor::new(reference.shape().to_vec(), out.collect())
}

/// A `[3,size,size]` reference image: a smooth colour gradient with a few
/// flat rectangles and fine texture on top.
pub fn synth_raster(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Stream::Raster);
    let s = size.max(1) as f64;
    let base: [[f64; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.2..0.9)));
    let ramp: [f64; 2] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let n_rect = rng.gen_range(2..=5);
    let rects: Vec<([f64; 4], [f64; 3])> = (0..n_rect)
        .map(|_| {
            let (y0, x0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            let (h, w) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
            (
                [y0, x0, y0 + h, x0 + w],
                std::array::from_fn(|_| rng.gen_range(0.05..1.0)),
            )
        })
        .collect();
    let freq = rng.gen_range(0.15..0.6);
    let texture: Vec<f64> = (0..3 * size * size)
        .map(|_| rng.gen_range(-0.04..0.04))
        .collect();
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / plane, (i % plane) / size, i % size);
        let (u, v) = (y as f64 / s, x as f64 / s);
        let t = 0.5
            + 0.5
                * (ramp[0].cos() * u + ramp[0].sin() * v - 0.5
                    + 0.3 * (ramp[1] + 3.0 * u * v).sin());
        let mut val = base[0][c] * (1.0 - t) + base[1][c] * t;
        for (r, col) in &rects {
            if u >= r[0] && u < r[2] && v >= r[1] && v < r[3] {
                val = col[c];
            }
        }
        val += 0.05 * ((x as f64 * freq).sin() * (y as f64 * freq * 1.3).cos()) + texture[i];
        val.clamp(0.0, 1.0) as f32
    })
}

/// `(low, ref)` paths, one pair per line, tab-separated, relative to the
/// manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairManifest {
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl PairManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 || f.iter().any(|s| s.is_empty()) {
                return Err(Error::format(
                    "manifest",
                    format!(
                        "line {}: expected 2 tab-separated fields, found {}",
                        i + 1,
                        f.len()
                    ),
                ));
            }
            pairs.push((PathBuf::from(f[0]), PathBuf::from(f[1])));
        }
        Ok(Self { pairs })
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(a, b)| format!("{}\t{}\n", a.display(), b.display()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Loads every pair, resolving paths against `base`, and checks that
    /// the two images of each pair have the same extent.
    pub fn load_pairs(&self, base: &Path) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let low = load_image(&base.join(a))?;
                let reference = load_image(&base.join(b))?;
                if low.shape() != reference.shape() {
                    return Err(Error::format(
                        "manifest",
                        format!(
                            "pair {}: {:?} vs {:?}",
                            i + 1,
                            low.shape(),
                            reference.shape()
                        ),
                    ));
                }
                Ok((low, reference))
            })
            .collect()
    }
}

/// Loads a manifest file and all its pairs as a training dataset.
pub fn load_dataset(manifest: &Path) -> Result<Dataset<f32>> {
    let m = PairManifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Dataset::new(m.load_pairs(base)?)
}

/// Writes `n` reference rasters, their degraded counterparts and
/// `manifest.tsv` into `out_dir`; returns the manifest path. Each pair gets
/// its own derived seeds. A non-empty `out_dir` is refused unless `force`.
pub fn build_synth_dataset(
    n: usize,
    size: usize,
    seed: u64,
    degrade: &DegradeParams,
    out_dir: &Path,
    force: bool,
) -> Result<PathBuf> {
    degrade.validate()?;
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let occupied = fs::read_dir(out_dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied && !force {
        return Err(Error::Path {
            path: out_dir.to_path_buf(),
            msg: "directory is not empty; pass --force to overwrite".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::Path {
        path: out_dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut manifest = PairManifest::default();
    for i in 0..n {
        let reference = synth_raster(size, derive_seed(seed, Stream::Raster, i as u64));
        let p = DegradeParams {
            seed: derive_seed(degrade.seed ^ seed, Stream::Noise, i as u64),
            ..*degrade
        };
        let low = synth_degrade(&reference, &p)?;
        let (ln, rn) = (format!("low_{i:04}.ppm"), format!("ref_{i:04}.ppm"));
        save_image(&low, &out_dir.join(&ln))?;
        save_image(&reference, &out_dir.join(&rn))?;
        manifest.pairs.push((ln.into(), rn.into()));
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::Path {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    Ok(path)
}
