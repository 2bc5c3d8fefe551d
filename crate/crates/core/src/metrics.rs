//! Transcription accuracy, normalized edit distance and PSNR, plus the
//! evaluation harness that runs the sampler over a manifest.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imageflow::ImageGrid;
use crate::rng;
use crate::sampler::{sample_batch, JointDenoiser, SampleConfig};
use crate::synthdata::{bicubic_resize, ManifestRecord};
use crate::textdiff::Vocab;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Peak-to-peak range of `[-1, 1]` images.
pub const PSNR_PEAK: f64 = 2.0;
/// Label written into every report.
pub const METRIC_SOURCE: &str = "text from the model's own joint-inference text branch (no external recognizer)";

/// Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - ED(p, g) / max(|p|, |g|)`; two empty strings give 1.
pub fn ned(p: &str, g: &str) -> f64 {
    let n = p.chars().count().max(g.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(p, g) as f64 / n as f64
}

/// Exact-match fraction over `(prediction, ground_truth)` pairs.
pub fn acc(pairs: &[(&str, &str)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("accuracy over an empty set".into()));
    }
    Ok(pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64)
}

/// `10 log10(peak^2 / MSE)` with peak 2; zero MSE returns [`PSNR_CAP`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub ground_truth: String,
    pub ned: f64,
    pub psnr: f64,
    /// PSNR of the bicubic upsampling of the LR input.
    pub psnr_bicubic: f64,
}

impl EvalRow {
    pub fn exact_match(&self) -> bool {
        self.prediction == self.ground_truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<EvalRow>,
    pub acc: f64,
    pub mean_ned: f64,
    pub mean_psnr: f64,
    pub mean_psnr_bicubic: f64,
    pub steps: usize,
}

impl Report {
    /// Unweighted means over rows.
    pub fn from_rows(rows: Vec<EvalRow>, steps: usize) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = rows
            .iter()
            .map(|r| (r.prediction.as_str(), r.ground_truth.as_str()))
            .collect();
        let acc = acc(&pairs)?;
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            acc,
            mean_ned: mean(|r| r.ned),
            mean_psnr: mean(|r| r.psnr),
            mean_psnr_bicubic: mean(|r| r.psnr_bicubic),
            steps,
            rows,
        })
    }

    /// Tab-separated rows `id prediction ground_truth ned psnr exact_match`,
    /// then `#`-prefixed summary lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tprediction\tground_truth\tned\tpsnr\texact_match\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                r.id,
                r.prediction,
                r.ground_truth,
                r.ned,
                r.psnr,
                u8::from(r.exact_match())
            );
        }
        let _ = writeln!(s, "# count\t{}", self.rows.len());
        let _ = writeln!(s, "# steps\t{}", self.steps);
        let _ = writeln!(s, "# acc\t{:.6}", self.acc);
        let _ = writeln!(s, "# mean_ned\t{:.6}", self.mean_ned);
        let _ = writeln!(s, "# mean_psnr\t{:.6}", self.mean_psnr);
        let _ = writeln!(s, "# mean_psnr_bicubic\t{:.6}", self.mean_psnr_bicubic);
        let _ = writeln!(s, "# psnr_cap\t{PSNR_CAP}");
        let _ = writeln!(s, "# metric_source\t{METRIC_SOURCE}");
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} records, {} steps: ACC {:.4}  NED {:.4}  PSNR {:.3} dB (bicubic {:.3} dB)",
            self.rows.len(),
            self.steps,
            self.acc,
            self.mean_ned,
            self.mean_psnr,
            self.mean_psnr_bicubic
        )
    }
}

/// Evaluation inputs already loaded into memory.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub hr: ImageGrid,
    pub lr: ImageGrid,
    pub text: String,
}

impl EvalItem {
    pub fn load(record: &ManifestRecord) -> Result<Self> {
        Ok(Self {
            id: record.id.clone(),
            hr: crate::synthdata::read_png(&record.hr_path)?,
            lr: crate::synthdata::read_png(&record.lr_path)?,
            text: record.text.clone(),
        })
    }
}

/// Samples every item (in chunks of `batch`) and scores it. Item `i` uses
/// the sampler seed `derive_seed(seed, "eval", i)`. `on_output` sees each
/// SR image as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<D: JointDenoiser + ?Sized>(
    denoiser: &D,
    items: &[EvalItem],
    vocab: &Vocab,
    seq_len: usize,
    cfg: SampleConfig,
    seed: u64,
    batch: usize,
    mut on_output: impl FnMut(&EvalItem, &ImageGrid) -> Result<()>,
) -> Result<Report> {
    if items.is_empty() {
        return Err(Error::Domain("nothing to evaluate".into()));
    }
    let batch = batch.max(1);
    let mut rows = Vec::with_capacity(items.len());
    for (chunk_idx, chunk) in items.chunks(batch).enumerate() {
        let lrs: Vec<ImageGrid> = chunk.iter().map(|it| it.lr.clone()).collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|j| rng::derive_seed(seed, "eval", (chunk_idx * batch + j) as u64))
            .collect();
        let outs = sample_batch(
            denoiser,
            &lrs,
            chunk[0].hr.shape(),
            seq_len,
            vocab.size(),
            cfg,
            &seeds,
            |_, _| Ok(()),
        )?;
        for (it, out) in chunk.iter().zip(outs) {
            on_output(it, &out.image)?;
            let (h, w, _) = it.hr.shape();
            let baseline = bicubic_resize(&it.lr, h, w)?.clamp(-1.0, 1.0);
            let prediction = vocab.decode(&out.text);
            rows.push(EvalRow {
                id: it.id.clone(),
                ned: ned(&prediction, &it.text),
                psnr: psnr(&out.image, &it.hr)?,
                psnr_bicubic: psnr(&baseline, &it.hr)?,
                prediction,
                ground_truth: it.text.clone(),
            });
        }
    }
    Report::from_rows(rows, cfg.steps)
}
