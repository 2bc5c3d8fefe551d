//! Synthetic paired data: procedurally drawn text lines (HR) and a blind
//! stochastic degradation pipeline (LR).
//!
//! Images are `[-1, 1]` grids. On disk they are 8-bit PNGs with
//! `u = round((v + 1) / 2 * 255)`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageflow::ImageGrid;
use crate::rng::{self, StreamRng};
use crate::textdiff::{TokenSequence, Vocab};
use crate::trainer::TrainTriple;

/// Ten digits and sixteen visually distinct capitals.
pub const DEFAULT_CHARSET: &str = "0123456789ABCDEFGHJKLMNPRT";

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// 5x7 bitmaps, one string per row, `#` = ink.
fn glyph_rows(c: char) -> Option<[&'static str; GLYPH_H]> {
    Some(match c {
        '0' => [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        '1' => ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        '2' => [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        '3' => ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
        '4' => ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        '5' => ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        '6' => ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
        '7' => ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        '8' => [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        '9' => [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'B' => ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
        'C' => [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
        'D' => ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
        'E' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'F' => ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
        'G' => [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
        'H' => ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'J' => ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
        'K' => ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
        'L' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'M' => ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
        'N' => ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'R' => ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        _ => return None,
    })
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::Config(format!(
            "{name} range ({lo}, {hi}) must satisfy {min} <= lo <= hi <= {max}"
        )));
    }
    Ok(())
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub charset: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Inclusive transcription length range.
    pub min_len: usize,
    pub max_len: usize,
    /// Integer upscaling of the 5x7 font.
    pub glyph_scale: usize,
    /// Per-channel intensity ranges in `[-1, 1]`.
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    /// Maximum per-glyph offset in HR pixels.
    pub jitter: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            charset: DEFAULT_CHARSET.to_string(),
            height: 32,
            width: 128,
            channels: 3,
            min_len: 4,
            max_len: 4,
            glyph_scale: 4,
            foreground: (-1.0, -0.3),
            background: (0.3, 1.0),
            jitter: 1,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(&self.charset)?;
        if let Some(c) = vocab.glyphs().iter().find(|&&c| glyph_rows(c).is_none()) {
            return Err(Error::Config(format!("no glyph for character {c:?}")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.glyph_scale == 0 || GLYPH_H * self.glyph_scale + 2 * self.jitter > self.height {
            return Err(Error::Config("glyph height does not fit the canvas".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.max_len > self.capacity() {
            return Err(Error::Config(format!(
                "max_len {} exceeds canvas capacity {}",
                self.max_len,
                self.capacity()
            )));
        }
        check_range("foreground", self.foreground, -1.0, 1.0)?;
        check_range("background", self.background, -1.0, 1.0)
    }

    fn cell_width(&self) -> usize {
        (GLYPH_W + 1) * self.glyph_scale
    }

    /// Glyphs that fit on one line.
    pub fn capacity(&self) -> usize {
        self.width.saturating_sub(2 * self.jitter) / self.cell_width().max(1)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.charset)
    }

    /// A random transcription of length in `[min_len, max_len]`.
    pub fn random_text<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let glyphs: Vec<char> = self.charset.chars().collect();
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len).map(|_| glyphs[rng.random_range(0..glyphs.len())]).collect()
    }
}

/// Draws `text` centered on a flat background. PAD draws nothing; MASK and
/// too-long texts are rejected.
pub fn render(text: &TokenSequence, spec: &RenderSpec, seed: u64) -> Result<ImageGrid> {
    let vocab = spec.vocab()?;
    if text.vocab_size() != vocab.size() {
        return Err(Error::Contract(format!(
            "token vocabulary {} does not match charset vocabulary {}",
            text.vocab_size(),
            vocab.size()
        )));
    }
    let mut glyphs = Vec::new();
    for &id in text.ids() {
        if id == vocab.pad_id() {
            continue;
        }
        let c = vocab
            .glyphs()
            .get(id as usize)
            .ok_or_else(|| Error::Contract(format!("token {id} is not a glyph")))?;
        glyphs.push(glyph_rows(*c).ok_or_else(|| Error::Contract(format!("no glyph for {c:?}")))?);
    }
    if glyphs.len() > spec.capacity() {
        return Err(Error::Domain(format!(
            "{} glyphs exceed the canvas capacity of {}",
            glyphs.len(),
            spec.capacity()
        )));
    }
    let mut r = rng::seeded(seed);
    let c = spec.channels;
    let bg: Vec<f64> = (0..c).map(|_| uniform(&mut r, spec.background)).collect();
    let fg: Vec<f64> = (0..c).map(|_| uniform(&mut r, spec.foreground)).collect();
    let mut img = ImageGrid::zeros(spec.height, spec.width, c);
    for y in 0..spec.height {
        for x in 0..spec.width {
            for (ch, &v) in bg.iter().enumerate() {
                img.set(y, x, ch, v);
            }
        }
    }
    let s = spec.glyph_scale;
    let cell = spec.cell_width();
    // Trailing one-column gap of the last cell is not part of the text.
    let line_w = (glyphs.len() * cell).saturating_sub(s);
    let x0 = (spec.width - line_w) / 2;
    let y0 = (spec.height - GLYPH_H * s) / 2;
    let j = spec.jitter as i64;
    for (g, rows) in glyphs.iter().enumerate() {
        let dx = r.random_range(-j..=j);
        let dy = r.random_range(-j..=j);
        let gx = (x0 + g * cell) as i64 + dx;
        let gy = y0 as i64 + dy;
        for (ry, row) in rows.iter().enumerate() {
            for (rx, b) in row.bytes().enumerate() {
                if b != b'#' {
                    continue;
                }
                for sy in 0..s {
                    for sx in 0..s {
                        let y = gy + (ry * s + sy) as i64;
                        let x = gx + (rx * s + sx) as i64;
                        if (0..spec.height as i64).contains(&y) && (0..spec.width as i64).contains(&x) {
                            for (ch, &v) in fg.iter().enumerate() {
                                img.set(y as usize, x as usize, ch, v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Magnitude ranges of one severity regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Severity {
    /// Gaussian blur sigma in HR pixels.
    pub blur_sigma: (f64, f64),
    pub noise_std: (f64, f64),
    /// Block-DCT quality in `[1, 100]`; 100 is lossless.
    pub quality: (f64, f64),
}

impl Severity {
    pub const CLEAN: Severity = Severity {
        blur_sigma: (0.0, 0.0),
        noise_std: (0.0, 0.0),
        quality: (100.0, 100.0),
    };

    fn validate(&self) -> Result<()> {
        check_range("blur_sigma", self.blur_sigma, 0.0, 16.0)?;
        check_range("noise_std", self.noise_std, 0.0, 1.0)?;
        check_range("quality", self.quality, 1.0, 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// 2 or 4.
    pub scale: usize,
    pub mild: Severity,
    pub severe: Severity,
    /// Probability of the severe regime.
    pub severe_prob: f64,
    /// Shuffle the order of blur, noise, compression and downsampling.
    pub shuffle_order: bool,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            scale: 4,
            mild: Severity {
                blur_sigma: (0.2, 1.0),
                noise_std: (0.0, 0.02),
                quality: (60.0, 95.0),
            },
            severe: Severity {
                blur_sigma: (0.6, 1.6),
                noise_std: (0.01, 0.05),
                quality: (30.0, 70.0),
            },
            severe_prob: 0.5,
            shuffle_order: true,
        }
    }
}

impl DegradeSpec {
    /// Only the bicubic downsample.
    pub fn clean(scale: usize) -> Self {
        Self {
            scale,
            mild: Severity::CLEAN,
            severe: Severity::CLEAN,
            severe_prob: 0.5,
            shuffle_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("degradation scale must be 2 or 4, got {}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.severe_prob) {
            return Err(Error::Config("severe_prob must lie in [0, 1]".into()));
        }
        self.mild.validate()?;
        self.severe.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Blur,
    Noise,
    Compress,
    Downsample,
}

/// Seeded blind degradation. Output size is exactly the input size divided
/// by `scale`.
pub fn degrade(hr: &ImageGrid, spec: &DegradeSpec, seed: u64) -> Result<ImageGrid> {
    spec.validate()?;
    let (h, w, _) = hr.shape();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by {}", spec.scale)));
    }
    let mut r = rng::seeded(seed);
    let sev = if r.random::<f64>() < spec.severe_prob {
        spec.severe
    } else {
        spec.mild
    };
    let sigma = uniform(&mut r, sev.blur_sigma);
    let noise = uniform(&mut r, sev.noise_std);
    let quality = uniform(&mut r, sev.quality);
    let mut ops = [Op::Blur, Op::Noise, Op::Compress, Op::Downsample];
    if spec.shuffle_order {
        ops.shuffle(&mut r);
    }
    let mut img = hr.clone();
    for op in ops {
        // Blur sigma is given in HR pixels; rescale if already downsampled.
        let res = img.width() as f64 / w as f64;
        img = match op {
            Op::Blur => gaussian_blur(&img, sigma * res),
            Op::Noise => add_noise(&img, noise, &mut r),
            Op::Compress => block_dct_quantize(&img, quality),
            Op::Downsample => bicubic_resize(&img, h / spec.scale, w / spec.scale)?,
        };
    }
    Ok(img)
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` is identity.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let (h, w, c) = img.shape();
    let pass = |src: &ImageGrid, horizontal: bool| {
        let mut out = ImageGrid::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let o = i as i64 - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as i64 + o).clamp(0, w as i64 - 1) as usize)
                        } else {
                            ((y as i64 + o).clamp(0, h as i64 - 1) as usize, x)
                        };
                        acc += kv * src.get(yy, xx, ch);
                    }
                    out.set(y, x, ch, acc);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn add_noise(img: &ImageGrid, std: f64, rng: &mut StreamRng) -> ImageGrid {
    if std <= 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += std * z;
    }
    out
}

/// Orthonormal DCT-II basis of size `n`: `basis[k][i]`.
fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

pub const DCT_BLOCK: usize = 8;

/// Compression surrogate: 8x8 block DCT per channel, coefficients rounded
/// to a step that grows with frequency and shrinks with `quality`.
/// Quality 100 is the identity. Edge blocks use their actual size.
pub fn block_dct_quantize(img: &ImageGrid, quality: f64) -> ImageGrid {
    if quality >= 100.0 {
        return img.clone();
    }
    let base = 0.004 * (100.0 - quality);
    let (h, w, c) = img.shape();
    let mut out = img.clone();
    for by in (0..h).step_by(DCT_BLOCK) {
        for bx in (0..w).step_by(DCT_BLOCK) {
            let bh = DCT_BLOCK.min(h - by);
            let bw = DCT_BLOCK.min(w - bx);
            let (cy, cx) = (dct_basis(bh), dct_basis(bw));
            for ch in 0..c {
                let mut coef = vec![0.0; bh * bw];
                for u in 0..bh {
                    for v in 0..bw {
                        let mut acc = 0.0;
                        for y in 0..bh {
                            for x in 0..bw {
                                acc += cy[u][y] * cx[v][x] * img.get(by + y, bx + x, ch);
                            }
                        }
                        let step = base * (1.0 + (u + v) as f64 / 2.0);
                        coef[u * bw + v] = (acc / step).round() * step;
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        let mut acc = 0.0;
                        for u in 0..bh {
                            for v in 0..bw {
                                acc += cy[u][y] * cx[v][x] * coef[u * bw + v];
                            }
                        }
                        out.set(by + y, bx + x, ch, acc);
                    }
                }
            }
        }
    }
    out
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Normalized taps `(first index, weights)` for each output sample. When
/// shrinking, the kernel is stretched by the scale factor (antialiasing).
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let support = 2.0 * scale.max(1.0);
    let stretch = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for i in lo..=hi {
                let wgt = cubic((i as f64 - center) / stretch);
                if wgt != 0.0 {
                    idx.push(i.clamp(0, n_in as i64 - 1) as usize);
                    wts.push(wgt);
                }
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|v| *v /= sum);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize with clamped borders.
pub fn bicubic_resize(img: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    let (h, w, c) = img.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("cannot resize to or from an empty image".into()));
    }
    let tx = resize_taps(w, out_w);
    let ty = resize_taps(h, out_h);
    let mut mid = ImageGrid::zeros(h, out_w, c);
    for y in 0..h {
        for (x, (idx, wts)) in tx.iter().enumerate() {
            for ch in 0..c {
                let v = idx.iter().zip(wts).map(|(&i, wt)| wt * img.get(y, i, ch)).sum();
                mid.set(y, x, ch, v);
            }
        }
    }
    let mut out = ImageGrid::zeros(out_h, out_w, c);
    for (y, (idx, wts)) in ty.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let v = idx.iter().zip(wts).map(|(&i, wt)| wt * mid.get(i, x, ch)).sum();
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

pub fn from_u8(u: u8) -> f64 {
    u as f64 / 255.0 * 2.0 - 1.0
}

/// Rounds every value to what a PNG round trip would give.
pub fn quantize(img: &ImageGrid) -> ImageGrid {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn write_png(img: &ImageGrid, path: &Path) -> Result<()> {
    let (h, w, c) = img.shape();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Grayscale PNGs load as one channel, everything else as RGB.
pub fn read_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        image::DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        other => (3, other.into_rgb8().into_raw()),
    };
    ImageGrid::new(h, w, c, raw.into_iter().map(from_u8).collect())
}

/// One line of a manifest, with paths resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub text: String,
}

pub const MANIFEST_HEADER: &str = "id\thr_path\tlr_path\ttranscription";

fn manifest_text(records: &[(String, String, String, String)]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for (id, hr, lr, text) in records {
        s.push_str(&format!("{id}\t{hr}\t{lr}\t{text}\n"));
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = body.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Config(format!("{} lacks the manifest header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("{}:{}: expected 4 fields", path.display(), i + 2)));
            }
            Ok(ManifestRecord {
                id: f[0].to_string(),
                hr_path: base.join(f[1]),
                lr_path: base.join(f[2]),
                text: f[3].to_string(),
            })
        })
        .collect()
}

/// What [`make_dataset`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub count: usize,
}

/// The HR/LR pair and transcription of sample `index`, a pure function of
/// `(specs, seed, index)`.
pub fn make_sample(render_spec: &RenderSpec, degrade_spec: &DegradeSpec, seed: u64, index: u64) -> Result<(String, ImageGrid, ImageGrid)> {
    let vocab = render_spec.vocab()?;
    let mut r = rng::stream(seed, "data/text", index);
    let text = render_spec.random_text(&mut r);
    let ids = vocab.encode(&text, text.chars().count())?;
    let hr = render(&ids, render_spec, rng::derive_seed(seed, "data/render", index))?;
    let lr = degrade(&hr, degrade_spec, rng::derive_seed(seed, "data/degrade", index))?;
    Ok((text, hr, lr))
}

/// Writes `hr/NNNNNN.png`, `lr/NNNNNN.png`, `manifest.tsv` and the seeded
/// `train.tsv` / `test.tsv` split (`test_count` records in test). Specs are
/// validated before anything is written.
pub fn make_dataset(
    out_dir: &Path,
    count: usize,
    test_count: usize,
    render_spec: &RenderSpec,
    degrade_spec: &DegradeSpec,
    seed: u64,
) -> Result<DatasetFiles> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if test_count > count {
        return Err(Error::Config(format!("test_count {test_count} exceeds count {count}")));
    }
    render_spec.validate()?;
    degrade_spec.validate()?;
    if render_spec.height % degrade_spec.scale != 0 || render_spec.width % degrade_spec.scale != 0 {
        return Err(Error::Config(format!(
            "canvas {}x{} is not divisible by scale {}",
            render_spec.height, render_spec.width, degrade_spec.scale
        )));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let (text, hr, lr) = make_sample(render_spec, degrade_spec, seed, i as u64)?;
        let id = format!("{i:06}");
        let hr_rel = format!("hr/{id}.png");
        let lr_rel = format!("lr/{id}.png");
        write_png(&hr, &out_dir.join(&hr_rel))?;
        write_png(&lr, &out_dir.join(&lr_rel))?;
        records.push((id, hr_rel, lr_rel, text));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(seed, "data/split", 0));
    let (test_idx, train_idx) = order.split_at(test_count);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    let files = DatasetFiles {
        manifest: out_dir.join("manifest.tsv"),
        train: out_dir.join("train.tsv"),
        test: out_dir.join("test.tsv"),
        count,
    };
    for (path, recs) in [
        (&files.manifest, records.clone()),
        (&files.train, pick(train_idx)),
        (&files.test, pick(test_idx)),
    ] {
        std::fs::write(path, manifest_text(&recs)).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// Supplies training batches for a given step.
pub trait BatchSource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<TrainTriple>>;
}

/// Renders and degrades fresh samples every step.
#[derive(Debug, Clone)]
pub struct OnlineSource {
    pub render: RenderSpec,
    pub degrade: DegradeSpec,
    pub seq_len: usize,
    pub seed: u64,
}

impl OnlineSource {
    pub fn new(render: RenderSpec, degrade: DegradeSpec, seq_len: usize, seed: u64) -> Result<Self> {
        render.validate()?;
        degrade.validate()?;
        if render.max_len > seq_len {
            return Err(Error::Config(format!("max_len {} exceeds seq_len {seq_len}", render.max_len)));
        }
        Ok(Self {
            render,
            degrade,
            seq_len,
            seed,
        })
    }
}

impl BatchSource for OnlineSource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<TrainTriple>> {
        let vocab = self.render.vocab()?;
        let step_seed = rng::derive_seed(self.seed, "data/online", step);
        (0..size as u64)
            .map(|i| {
                let (text, hr, lr) = make_sample(&self.render, &self.degrade, step_seed, i)?;
                Ok(TrainTriple {
                    hr: quantize(&hr),
                    lr: quantize(&lr),
                    text: vocab.encode(&text, self.seq_len)?,
                })
            })
            .collect()
    }
}

/// Samples records uniformly (with replacement) from a loaded manifest.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    items: Vec<TrainTriple>,
    seed: u64,
}

impl ManifestSource {
    pub fn load(records: &[ManifestRecord], vocab: &Vocab, seq_len: usize, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("manifest has no records".into()));
        }
        let items = records
            .iter()
            .map(|r| {
                Ok(TrainTriple {
                    hr: read_png(&r.hr_path)?,
                    lr: read_png(&r.lr_path)?,
                    text: vocab.encode(&r.text, seq_len)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, seed })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl BatchSource for ManifestSource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<TrainTriple>> {
        let mut r = rng::stream(self.seed, "data/batch", step);
        Ok((0..size)
            .map(|_| self.items[r.random_range(0..self.items.len())].clone())
            .collect())
    }
}
