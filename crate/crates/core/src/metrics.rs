//! Chamfer distance, point-to-point (D1) and point-to-plane (D2) distortion
//! with their PSNR forms, and the training objective.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RateLoss;
use crate::error::{CoreError, Result};
use crate::geometry::{sq_dist, sub, Point, PointCloud};

/// Index of the nearest point in `cloud`; ties go to the lower index.
fn nearest(p: &Point, cloud: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, q) in cloud.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean squared nearest-neighbour distance from `a` into `b`.
fn directed_p2p(a: &[Point], b: &[Point]) -> f64 {
    a.iter().map(|p| nearest(p, b).1).sum::<f64>() / a.len() as f64
}

/// Mean over `a` of the squared projection of (a − nearest b) onto the
/// normal of that nearest b.
fn directed_p2plane(a: &[Point], b: &[Point], b_normals: &[Point]) -> f64 {
    a.iter()
        .map(|p| {
            let (j, _) = nearest(p, b);
            let d = sub(p, &b[j]);
            let n = b_normals[j];
            let dot = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
            dot * dot
        })
        .sum::<f64>()
        / a.len() as f64
}

pub fn chamfer(x: &PointCloud, y: &PointCloud) -> f64 {
    directed_p2p(x.points(), y.points()) + directed_p2p(y.points(), x.points())
}

pub fn d1(x: &PointCloud, y: &PointCloud) -> f64 {
    directed_p2p(x.points(), y.points()).max(directed_p2p(y.points(), x.points()))
}

pub fn d2(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let (Some(nx), Some(ny)) = (x.normals(), y.normals()) else {
        return Err(CoreError::Argument("D2 needs normals on both clouds".into()));
    };
    Ok(directed_p2plane(x.points(), y.points(), ny).max(directed_p2plane(y.points(), x.points(), nx)))
}

/// 10·log₁₀(3P²/D); +∞ when D = 0.
pub fn psnr(distortion: f64, peak: f64) -> f64 {
    if distortion == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / distortion).log10()
    }
}

pub fn d1_psnr(x: &PointCloud, y: &PointCloud, peak: f64) -> f64 {
    psnr(d1(x, y), peak)
}

pub fn d2_psnr(x: &PointCloud, y: &PointCloud, peak: f64) -> Result<f64> {
    Ok(psnr(d2(x, y)?, peak))
}

pub fn rate_loss(n_send: f64, n_mod: f64, orientation: RateLoss) -> f64 {
    match orientation {
        RateLoss::Penalty => n_send / n_mod,
        RateLoss::Verbatim => n_mod / n_send,
    }
}

pub fn total_loss(
    cd: f64,
    n_send: f64,
    n_mod: f64,
    lambda: f64,
    rate: Option<RateLoss>,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(CoreError::Argument(format!("lambda {lambda} must be non-negative")));
    }
    Ok(match rate {
        None => cd,
        Some(o) => cd + lambda * rate_loss(n_send, n_mod, o),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub d1: f64,
    pub d1_psnr: f64,
    pub d2: f64,
    pub d2_psnr: f64,
    pub peak: f64,
    pub n_send: f64,
    pub n_mod: usize,
}

impl MetricReport {
    /// Scores `recon` against `reference`; both need normals. The peak
    /// defaults to the reference's largest absolute coordinate.
    pub fn compute(
        reference: &PointCloud,
        recon: &PointCloud,
        peak: Option<f64>,
        n_send: f64,
        n_mod: usize,
    ) -> Result<Self> {
        let peak = peak.unwrap_or_else(|| reference.peak());
        let d1v = d1(reference, recon);
        let d2v = d2(reference, recon)?;
        Ok(Self {
            cd: chamfer(reference, recon),
            d1: d1v,
            d1_psnr: psnr(d1v, peak),
            d2: d2v,
            d2_psnr: psnr(d2v, peak),
            peak,
            n_send,
            n_mod,
        })
    }

    /// Field-wise mean; PSNR values are averaged in dB.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(CoreError::Argument("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            cd: avg(|r| r.cd),
            d1: avg(|r| r.d1),
            d1_psnr: avg(|r| r.d1_psnr),
            d2: avg(|r| r.d2),
            d2_psnr: avg(|r| r.d2_psnr),
            peak: avg(|r| r.peak),
            n_send: avg(|r| r.n_send),
            n_mod: reports[0].n_mod,
        })
    }
}

/// One CSV row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub snr_db: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "model", "snr_db", "seed", "cd", "d1", "d1_psnr", "d2", "d2_psnr", "peak", "n_send", "n_mod",
    ])?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.model.clone(),
            r.snr_db.to_string(),
            r.seed.to_string(),
            m.cd.to_string(),
            m.d1.to_string(),
            m.d1_psnr.to_string(),
            m.d2.to_string(),
            m.d2_psnr.to_string(),
            m.peak.to_string(),
            m.n_send.to_string(),
            m.n_mod.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
