//! Image quality metrics, feature cross-correlation and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Bucket;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MisfModel};
use crate::tensor::{shape_str, Scalar, Tensor};
use crate::Graph;

/// PSNR written to files in place of infinity.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, shape_str(a.shape()), shape_str(b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for data in [0, 1]; infinite for identical inputs.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn cap_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

/// `100 * mean |a - b|`.
pub fn l1_pct<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("l1_pct", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(100.0 * s / a.len().max(1) as f64)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Luma plane of item `b` (1-channel inputs are used as is).
pub fn grayscale<T: Scalar>(t: &Tensor<T>, b: usize) -> Result<Vec<f64>> {
    let [_, c, h, w] = t.shape();
    match c {
        1 => Ok(t.item(b).iter().map(|v| v.as_f64()).collect()),
        3 => Ok((0..h * w)
            .map(|i| (0..3).map(|ch| LUMA[ch] * t.item(b)[ch * h * w + i].as_f64()).sum())
            .collect()),
        _ => Err(Error::shape("grayscale", "1 or 3 channels", c)),
    }
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of two gray planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Grayscale SSIM averaged over the batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let [n, _, h, w] = a.shape();
    let mut s = 0.0;
    for i in 0..n {
        s += ssim_plane(&grayscale(a, i)?, &grayscale(b, i)?, h, w)?;
    }
    Ok(s / n.max(1) as f64)
}

/// Normalized cross-correlation of two flattened tensors.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cross_correlation", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::Contract("cross-correlation of a zero-variance feature".into()));
    }
    Ok((num / (da.sqrt() * db.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSite {
    /// Layer-3 encoder features before semantic filtering.
    PreFilter,
    /// The same features after semantic filtering.
    PostFilter,
}

impl FeatureSite {
    fn trace_name(self) -> &'static str {
        match self {
            FeatureSite::PreFilter => "F3",
            FeatureSite::PostFilter => "F3^",
        }
    }
}

impl std::str::FromStr for FeatureSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "pre-filter" => Ok(FeatureSite::PreFilter),
            "post" | "post-filter" => Ok(FeatureSite::PostFilter),
            _ => Err(Error::Config(format!("unknown feature site `{s}` (pre or post)"))),
        }
    }
}

/// Layer-3 features of one image at `site`.
pub fn site_features<T: Scalar>(
    model: &MisfModel<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    site: FeatureSite,
) -> Result<Tensor<T>> {
    if site == FeatureSite::PostFilter && !model.variant().feature_filter() {
        return Err(Error::Contract(format!(
            "{} has no feature-level filter",
            model.variant()
        )));
    }
    let mut g = Graph::inference();
    let i = g.constant(image.clone());
    let m = g.constant(mask.clone());
    let out = model.forward(&mut g, i, m, &ForwardOptions::default())?;
    let v = out
        .trace
        .get(site.trace_name())
        .ok_or_else(|| Error::Contract(format!("{} has no {} features", model.variant(), site.trace_name())))?;
    Ok(g.value(v).clone())
}

/// Cross-correlation between the features of the corrupted input and of the
/// ground truth at one site.
pub fn feature_similarity<T: Scalar>(
    model: &MisfModel<T>,
    corrupted: &Tensor<T>,
    clean: &Tensor<T>,
    mask: &Tensor<T>,
    site: FeatureSite,
) -> Result<f64> {
    let a = site_features(model, corrupted, mask, site)?;
    let b = site_features(model, clean, mask, site)?;
    let fa: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let fb: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    normalized_cross_correlation(&fa, &fb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub bucket: String,
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_pct: f64,
}

impl MetricRow {
    pub fn measure<T: Scalar>(
        id: &str,
        bucket: Bucket,
        variant: &str,
        result: &Tensor<T>,
        truth: &Tensor<T>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            bucket: bucket.to_string(),
            variant: variant.to_string(),
            psnr: cap_psnr(psnr(result, truth)?),
            ssim: ssim(result, truth)?,
            l1_pct: l1_pct(result, truth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub bucket: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

const CSV_HEADER: [&str; 6] = ["id", "bucket", "variant", "psnr", "ssim", "l1_pct"];
/// `id` of the aggregate lines appended to CSV reports.
pub const AGGREGATE_ID: &str = "mean";

impl MetricReport {
    /// Per-bucket means, buckets in sorted order.
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let mut groups: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry(r.bucket.clone()).or_default().push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|(bucket, rs)| {
                let n = rs.len() as f64;
                Aggregate {
                    bucket,
                    count: rs.len(),
                    psnr: rs.iter().map(|r| r.psnr).sum::<f64>() / n,
                    ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
                    l1_pct: rs.iter().map(|r| r.l1_pct).sum::<f64>() / n,
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory csv");
        for r in &self.rows {
            w.serialize((&r.id, &r.bucket, &r.variant, r.psnr, r.ssim, r.l1_pct))
                .expect("in-memory csv");
        }
        for a in &self.aggregates {
            let variant = self
                .rows
                .iter()
                .find(|r| r.bucket == a.bucket)
                .map_or("", |r| r.variant.as_str());
            w.serialize((AGGREGATE_ID, &a.bucket, variant, a.psnr, a.ssim, a.l1_pct))
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    /// Inverse of [`MetricReport::to_csv`]; aggregates are recomputed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<(String, String, String, f64, f64, f64)>() {
            let (id, bucket, variant, psnr, ssim, l1_pct) =
                rec.map_err(|e| Error::Config(format!("report csv: {e}")))?;
            if id != AGGREGATE_ID {
                rows.push(MetricRow {
                    id,
                    bucket,
                    variant,
                    psnr,
                    ssim,
                    l1_pct,
                });
            }
        }
        Ok(Self::new(rows))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        let path = path.as_ref();
        let text = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Write `rows` with aggregates.
pub fn emit_report(rows: Vec<MetricRow>, path: impl AsRef<Path>, format: ReportFormat) -> Result<MetricReport> {
    let report = MetricReport::new(rows);
    report.write(path, format)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct 2-D window evaluation.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let k1 = gaussian_window(11, 1.5);
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k1[i] * k1[j];
                        let (p, q) = (a[(y0 + i) * w + x0 + j], b[(y0 + i) * w + x0 + j]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn psnr_values() {
        let a = rand_img(0, [1, 3, 8, 8]).map(|v| v * 0.8);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), 99.0);
        assert!(psnr(&a, &Tensor::zeros([1, 3, 8, 9])).is_err());
    }

    #[test]
    fn l1_pct_values() {
        let z = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let o = Tensor::full([1, 3, 4, 4], 1.0);
        assert_eq!(l1_pct(&z, &o).unwrap(), 100.0);
        assert_eq!(l1_pct(&o, &o).unwrap(), 0.0);
    }

    #[test]
    fn ssim_matches_oracle() {
        let a = rand_img(1, [1, 3, 20, 17]);
        let b = rand_img(2, [1, 3, 20, 17]);
        let (ga, gb) = (grayscale(&a, 0).unwrap(), grayscale(&b, 0).unwrap());
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - ssim_oracle(&ga, &gb, 20, 17)).abs() < 1e-8);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images() {
        let (c, d) = (0.4, 0.05);
        let a = Tensor::<f64>::full([1, 1, 12, 12], c);
        let b = Tensor::full([1, 1, 12, 12], c + d);
        let expected = (2.0 * c * (c + d) + SSIM_C1) / (c * c + (c + d) * (c + d) + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros([1, 1, 10, 12]), &Tensor::zeros([1, 1, 10, 12])).is_err());
    }

    #[test]
    fn ncc_bounds() {
        let a = [1.0, 2.0, 4.0, -1.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((normalized_cross_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((normalized_cross_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(normalized_cross_correlation(&a, &[3.0; 4]).is_err());
    }

    fn row(id: &str, bucket: &str, psnr: f64) -> MetricRow {
        MetricRow {
            id: id.into(),
            bucket: bucket.into(),
            variant: "misf".into(),
            psnr,
            ssim: 0.5,
            l1_pct: psnr / 10.0,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(
            MetricReport::new(vec![]).to_csv(),
            "id,bucket,variant,psnr,ssim,l1_pct\n"
        );
    }

    #[test]
    fn aggregates_and_round_trip() {
        let r = MetricReport::new(vec![
            row("a", "0-20", 20.0),
            row("b", "0-20", 30.0),
            row("c", "20-40", 10.0),
        ]);
        assert_eq!(r.aggregates[0].psnr, 25.0);
        assert_eq!(r.aggregates[0].count, 2);
        let back = MetricReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.to_json(), r.to_json());
    }
}
