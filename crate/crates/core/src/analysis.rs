//! Embedding extraction and inspection: PCA to three components,
//! silhouette scores over metadata tags, SVG scatter plots and CSV tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::jsonfmt::float17;
use crate::machines::MachineClass;
use crate::model::{encode_pairs, ModelError, ModelParams};
use crate::rng::{mix, SplitMix64};

pub const PCA_ITERATIONS: usize = 200;
pub const PCA_TOL: f64 = 1e-12;
pub const TABLE_HEADER: &str = "machine_id,pc1,pc2,pc3,class,mass_bucket,year_bucket";

const EMBED_TAG: u64 = 0xE4BE_DD00;
const PCA_START_TAG: u64 = 0x9CA5_7A27;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("samples per machine must be at least 1")]
    NoSamples,
    #[error("machine {0} has no window of length {1}")]
    NoWindows(u32, usize),
    #[error("PCA needs at least 4 records and embedding dim 3, got {records} records of dim {dim}")]
    TooFewRecords { records: usize, dim: usize },
    #[error("records have mixed embedding dimensions")]
    RaggedRecords,
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("silhouette needs two labels with at least two members each")]
    TooFewLabels,
    #[error("unknown tag `{0}` (valid tags: class, mass-bucket, year-bucket)")]
    UnknownTag(String),
    #[error("projections and records are not aligned at position {0}")]
    Misaligned(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Vehicle mass bucket label, kg.
pub fn mass_bucket(mass: f64) -> &'static str {
    match mass {
        m if m < 600.0 => "<600",
        m if m < 1000.0 => "600-1000",
        m if m < 1500.0 => "1000-1500",
        m if m < 2000.0 => "1500-2000",
        m if m <= 2500.0 => "2000-2500",
        _ => ">2500",
    }
}

/// Twenty-year build-year bucket label; 2020 closes the last bucket.
pub fn year_bucket(year: i32) -> &'static str {
    match year {
        y if y < 1960 => "<1960",
        y if y < 1980 => "1960-1980",
        y if y < 2000 => "1980-2000",
        y if y <= 2020 => "2000-2020",
        _ => ">2020",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub machine_id: u32,
    pub class: MachineClass,
    /// `None` for machines without a mass (non-vehicles).
    pub mass_bucket: Option<String>,
    pub year_bucket: Option<String>,
    pub s: Vec<f64>,
}

/// Encode `k` windows per machine, sampled uniformly over all valid start
/// ticks with `SplitMix64(mix([seed, machine_id, EMBED_TAG]))`. Records come
/// out in ascending machine id, then sample order.
pub fn embed_fleet(model: &ModelParams, dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<EmbeddingRecord>, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::NoSamples);
    }
    let n = model.dims.seq_len;
    let mut entries: Vec<_> = dataset.manifest.machines.iter().zip(&dataset.trajectories).collect();
    entries.sort_by_key(|(e, _)| e.spec.machine_id);
    let mut out = Vec::with_capacity(entries.len() * k);
    for (entry, traj) in entries {
        let id = entry.spec.machine_id;
        if traj.len() < n {
            return Err(AnalysisError::NoWindows(id, n));
        }
        let starts = (traj.len() - n + 1) as u64;
        let mut rng = SplitMix64::new(mix(&[seed, id as u64, EMBED_TAG]));
        for _ in 0..k {
            let start = rng.below(starts) as usize;
            let s = encode_pairs(model, &traj.pairs[start..start + n])?;
            out.push(EmbeddingRecord {
                machine_id: id,
                class: entry.tags.class,
                mass_bucket: entry.tags.mass.map(|m| mass_bucket(m).to_string()),
                year_bucket: entry.tags.year.map(|y| year_bucket(y).to_string()),
                s,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub machine_id: u32,
    pub coords: [f64; 3],
    pub explained_variance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub projections: Vec<Projection>,
    /// Orthonormal rows, descending eigenvalue.
    pub basis: [Vec<f64>; 3],
    pub explained_variance: [f64; 3],
    pub mean: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn sym_matvec(c: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    c.iter().map(|row| dot(row, v)).collect()
}

/// Top three principal directions by power iteration with deflation.
///
/// Each direction runs at most [`PCA_ITERATIONS`] iterations, stopping once
/// successive iterates differ by less than [`PCA_TOL`]. Iterates are kept
/// orthogonal to earlier directions, so the basis is orthonormal even when
/// the spectrum is degenerate. Each basis vector's largest-magnitude
/// component is made positive.
pub fn pca3(records: &[EmbeddingRecord]) -> Result<Pca, AnalysisError> {
    let dim = records.first().map_or(0, |r| r.s.len());
    if records.len() < 4 || dim < 3 {
        return Err(AnalysisError::TooFewRecords { records: records.len(), dim });
    }
    if records.iter().any(|r| r.s.len() != dim) {
        return Err(AnalysisError::RaggedRecords);
    }
    let count = records.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in records {
        mean.iter_mut().zip(&r.s).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let centered: Vec<Vec<f64>> = records.iter().map(|r| r.s.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();

    let mut cov = vec![vec![0.0; dim]; dim];
    for x in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += x[i] * x[j];
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= count);
    let trace: f64 = (0..dim).map(|i| cov[i][i]).sum();
    if !(trace > 0.0) {
        return Err(AnalysisError::DegenerateCovariance);
    }

    let mut rng = SplitMix64::new(mix(&[PCA_START_TAG, dim as u64]));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut eigen: Vec<f64> = Vec::with_capacity(3);
    let mut deflated = cov.clone();
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.symmetric()).collect();
        orthogonalize(&mut v, &basis);
        normalize(&mut v);
        for _ in 0..PCA_ITERATIONS {
            let mut w = sym_matvec(&deflated, &v);
            orthogonalize(&mut w, &basis);
            // Null remaining spectrum: any unit vector orthogonal to the basis will do.
            if normalize(&mut w) <= trace * 1e-300 {
                break;
            }
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        // Re-orthogonalize to clear accumulated drift.
        orthogonalize(&mut v, &basis);
        normalize(&mut v);
        let lambda = dot(&v, &sym_matvec(&cov, &v)).max(0.0);
        for i in 0..dim {
            for j in 0..dim {
                deflated[i][j] -= lambda * v[i] * v[j];
            }
        }
        basis.push(v);
        eigen.push(lambda);
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigen[b].total_cmp(&eigen[a]));
    let mut sorted: Vec<Vec<f64>> = order.iter().map(|&k| basis[k].clone()).collect();
    for v in sorted.iter_mut() {
        let pivot = v.iter().fold(0.0f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let explained = [eigen[order[0]] / trace, eigen[order[1]] / trace, eigen[order[2]] / trace].map(|f| f.clamp(0.0, 1.0));
    let projections = records
        .iter()
        .zip(&centered)
        .map(|(r, x)| Projection {
            machine_id: r.machine_id,
            coords: [dot(&sorted[0], x), dot(&sorted[1], x), dot(&sorted[2], x)],
            explained_variance: explained,
        })
        .collect();
    let [b0, b1, b2]: [Vec<f64>; 3] = sorted.try_into().expect("three components");
    Ok(Pca { projections, basis: [b0, b1, b2], explained_variance: explained, mean })
}

/// Mean silhouette over all points whose label has at least two members.
/// Points labelled `None` are left out.
pub fn silhouette<F>(records: &[EmbeddingRecord], label_fn: F) -> Result<f64, AnalysisError>
where
    F: Fn(&EmbeddingRecord) -> Option<String>,
{
    let mut groups: BTreeMap<String, Vec<&[f64]>> = BTreeMap::new();
    for r in records {
        if let Some(label) = label_fn(r) {
            groups.entry(label).or_default().push(&r.s);
        }
    }
    groups.retain(|_, members| members.len() >= 2);
    if groups.len() < 2 {
        return Err(AnalysisError::TooFewLabels);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let groups: Vec<&Vec<&[f64]>> = groups.values().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (gi, group) in groups.iter().enumerate() {
        for (pi, p) in group.iter().enumerate() {
            let a = group.iter().enumerate().filter(|(qi, _)| *qi != pi).map(|(_, q)| dist(p, q)).sum::<f64>()
                / (group.len() - 1) as f64;
            let b = groups
                .iter()
                .enumerate()
                .filter(|(gj, _)| *gj != gi)
                .map(|(_, other)| other.iter().map(|q| dist(p, q)).sum::<f64>() / other.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Class,
    MassBucket,
    YearBucket,
}

impl FromStr for Tag {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "class" => Ok(Tag::Class),
            "mass-bucket" => Ok(Tag::MassBucket),
            "year-bucket" => Ok(Tag::YearBucket),
            other => Err(AnalysisError::UnknownTag(other.to_string())),
        }
    }
}

impl Tag {
    pub fn label(self, r: &EmbeddingRecord) -> Option<String> {
        match self {
            Tag::Class => Some(r.class.as_str().to_string()),
            Tag::MassBucket => r.mass_bucket.clone(),
            Tag::YearBucket => r.year_bucket.clone(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Class => "class",
            Tag::MassBucket => "mass-bucket",
            Tag::YearBucket => "year-bucket",
        }
    }
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;
const PLOT_RIGHT: f64 = WIDTH - 160.0;

/// Companion table path: `out_path` with a `.csv` extension.
pub fn table_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("csv")
}

fn render_svg(projections: &[Projection], labels: &[String], tag: Tag) -> String {
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let color = |label: &str| PALETTE[present.iter().position(|p| *p == label).unwrap_or(0) % PALETTE.len()];

    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (-1.0f64, 1.0f64, -1.0f64, 1.0f64);
    if !projections.is_empty() {
        x_lo = projections.iter().map(|p| p.coords[0]).fold(f64::INFINITY, f64::min);
        x_hi = projections.iter().map(|p| p.coords[0]).fold(f64::NEG_INFINITY, f64::max);
        y_lo = projections.iter().map(|p| p.coords[1]).fold(f64::INFINITY, f64::min);
        y_hi = projections.iter().map(|p| p.coords[1]).fold(f64::NEG_INFINITY, f64::max);
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-12);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x_lo, x_hi) = pad(x_lo, x_hi);
    let (y_lo, y_hi) = pad(y_lo, y_hi);
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (PLOT_RIGHT - MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{MARGIN}" y1="{b}" x2="{PLOT_RIGHT}" y2="{b}"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/></g>"#,
        b = HEIGHT - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<g font-family="sans-serif" font-size="12"><text x="{:.2}" y="{:.2}" text-anchor="middle">PC1</text><text x="15" y="{:.2}" transform="rotate(-90 15 {:.2})" text-anchor="middle">PC2</text><text x="{MARGIN}" y="30">colored by {}</text></g>"#,
        (MARGIN + PLOT_RIGHT) / 2.0,
        HEIGHT - 15.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        tag.as_str()
    );
    let _ = writeln!(s, r#"<g id="points">"#);
    for (p, label) in projections.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="4" fill="{}" fill-opacity="0.8"><title>machine {} ({label})</title></circle>"#,
            sx(p.coords[0]),
            sy(p.coords[1]),
            color(label),
            p.machine_id
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="12">"#);
    for (k, label) in present.iter().enumerate() {
        let y = MARGIN + 20.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{y:.1}" r="5" fill="{}"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            PLOT_RIGHT + 20.0,
            color(label),
            PLOT_RIGHT + 32.0,
            y + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn render_table(projections: &[Projection], records: &[EmbeddingRecord]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for (p, r) in projections.iter().zip(records) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.machine_id,
            float17(p.coords[0]),
            float17(p.coords[1]),
            float17(p.coords[2]),
            r.class,
            r.mass_bucket.as_deref().unwrap_or("NA"),
            r.year_bucket.as_deref().unwrap_or("NA")
        );
    }
    s
}

/// Write the SVG scatter of the first two components to `out_path` and
/// the full coordinate table next to it (see [`table_path`]). Points whose
/// record lacks the requested tag are drawn under `NA`.
pub fn emit_scatter(
    projections: &[Projection],
    records: &[EmbeddingRecord],
    tag: Tag,
    out_path: &Path,
) -> Result<(), AnalysisError> {
    if projections.len() != records.len() {
        return Err(AnalysisError::Misaligned(projections.len().min(records.len())));
    }
    if let Some(k) = projections.iter().zip(records).position(|(p, r)| p.machine_id != r.machine_id) {
        return Err(AnalysisError::Misaligned(k));
    }
    let labels: Vec<String> = records.iter().map(|r| tag.label(r).unwrap_or_else(|| "NA".into())).collect();
    let write = |path: &Path, text: String| fs::write(path, text).map_err(|source| AnalysisError::Io { path: path.to_path_buf(), source });
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| AnalysisError::Io { path: parent.to_path_buf(), source })?;
    }
    write(out_path, render_svg(projections, &labels, tag))?;
    write(&table_path(out_path), render_table(projections, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, s: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord { machine_id: id, class: MachineClass::Suv, mass_bucket: None, year_bucket: None, s }
    }

    fn cloud(seed: u64, n: usize, dim: usize) -> Vec<EmbeddingRecord> {
        let mut rng = SplitMix64::new(seed);
        (0..n).map(|i| rec(i as u32, (0..dim).map(|_| rng.symmetric()).collect())).collect()
    }

    fn assert_orthonormal(basis: &[Vec<f64>; 3]) {
        for i in 0..3 {
            assert!((dot(&basis[i], &basis[i]) - 1.0).abs() < 1e-9);
            for j in 0..i {
                assert!(dot(&basis[i], &basis[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn buckets() {
        assert_eq!(mass_bucket(600.0), "600-1000");
        assert_eq!(mass_bucket(1000.0), "1000-1500");
        assert_eq!(mass_bucket(2500.0), "2000-2500");
        assert_eq!(year_bucket(1979), "1960-1980");
        assert_eq!(year_bucket(1980), "1980-2000");
        assert_eq!(year_bucket(2020), "2000-2020");
    }

    #[test]
    fn pca_recovers_rank_one_direction() {
        let mut v: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        normalize(&mut v);
        let mean: Vec<f64> = (0..16).map(|i| 0.1 * i as f64).collect();
        let records: Vec<_> = (0..20)
            .map(|k| {
                let t = k as f64 - 9.5;
                rec(k, mean.iter().zip(&v).map(|(m, d)| m + t * d).collect())
            })
            .collect();
        let pca = pca3(&records).unwrap();
        let sign = dot(&pca.basis[0], &v).signum();
        for (a, b) in pca.basis[0].iter().zip(&v) {
            assert!((a - sign * b).abs() < 1e-6);
        }
        assert!(pca.explained_variance[0] > 0.999);
        assert_orthonormal(&pca.basis);
    }

    #[test]
    fn pca_spans_coordinate_subspace() {
        let mut rng = SplitMix64::new(4);
        let records: Vec<_> = (0..30)
            .map(|k| {
                let mut s = vec![0.0; 16];
                s[2] = 3.0 * rng.symmetric();
                s[7] = 2.0 * rng.symmetric();
                s[11] = rng.symmetric();
                rec(k, s)
            })
            .collect();
        let pca = pca3(&records).unwrap();
        assert!((pca.explained_variance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for b in &pca.basis {
            let inside: f64 = b[2] * b[2] + b[7] * b[7] + b[11] * b[11];
            assert!((inside - 1.0).abs() < 1e-9);
        }
        assert_orthonormal(&pca.basis);
    }

    #[test]
    fn pca_isotropic_cloud_is_balanced() {
        let pca = pca3(&cloud(8, 4000, 3)).unwrap();
        let ev = pca.explained_variance;
        assert!(ev[0] >= ev[1] && ev[1] >= ev[2]);
        assert!(ev[0] / ev[2] < 1.2, "{ev:?}");
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(pca3(&cloud(1, 3, 5)), Err(AnalysisError::TooFewRecords { .. })));
        let same: Vec<_> = (0..5).map(|k| rec(k, vec![1.0, 2.0, 3.0])).collect();
        let err = pca3(&same).unwrap_err();
        assert_eq!(err.to_string(), "degenerate covariance");
    }

    #[test]
    fn pca_sign_convention() {
        let pca = pca3(&cloud(3, 50, 6)).unwrap();
        for b in &pca.basis {
            let pivot = b.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m });
            assert!(pivot > 0.0);
        }
    }

    proptest! {
        #[test]
        fn pca_invariants(seed in any::<u64>(), n in 4usize..40, dim in 3usize..10) {
            let records = cloud(seed, n, dim);
            let pca = pca3(&records).unwrap();
            assert_orthonormal(&pca.basis);
            let ev = pca.explained_variance;
            prop_assert!(ev[0] >= ev[1] && ev[1] >= ev[2]);
            prop_assert!(ev.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert!(ev.iter().sum::<f64>() <= 1.0 + 1e-12);
            for i in 0..n {
                for j in 0..i {
                    let dp: f64 = (0..3).map(|k| (pca.projections[i].coords[k] - pca.projections[j].coords[k]).powi(2)).sum::<f64>().sqrt();
                    let ds: f64 = records[i].s.iter().zip(&records[j].s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    prop_assert!(dp <= ds + 1e-9);
                }
            }
        }
    }

    fn labelled(points: &[(f64, f64)], labels: &[&str]) -> Vec<EmbeddingRecord> {
        points
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(k, (&(x, y), l))| EmbeddingRecord { mass_bucket: Some(l.to_string()), ..rec(k as u32, vec![x, y]) })
            .collect()
    }

    #[test]
    fn silhouette_examples() {
        let two = labelled(&[(0.0, 0.0), (0.0, 0.01), (100.0, 0.0), (100.0, 0.01)], &["a", "a", "b", "b"]);
        assert!(silhouette(&two, |r| r.mass_bucket.clone()).unwrap() > 0.999);

        let same = labelled(&[(1.0, 1.0); 4], &["a", "a", "b", "b"]);
        assert_eq!(silhouette(&same, |r| r.mass_bucket.clone()).unwrap(), 0.0);

        let lonely = labelled(&[(0.0, 0.0), (1.0, 0.0), (5.0, 5.0)], &["a", "a", "b"]);
        assert!(matches!(silhouette(&lonely, |r| r.mass_bucket.clone()), Err(AnalysisError::TooFewLabels)));
    }

    #[test]
    fn silhouette_of_random_labels_is_near_zero() {
        let mut rng = SplitMix64::new(21);
        let mut records = cloud(20, 400, 8);
        for r in records.iter_mut() {
            r.mass_bucket = Some(["a", "b", "c"][rng.below(3) as usize].to_string());
        }
        let score = silhouette(&records, |r| r.mass_bucket.clone()).unwrap();
        assert!(score.abs() < 0.1, "{score}");
    }

    #[test]
    fn silhouette_excludes_singletons() {
        let pts = labelled(&[(0.0, 0.0), (0.0, 0.1), (9.0, 0.0), (9.0, 0.1), (4.0, 4.0)], &["a", "a", "b", "b", "c"]);
        let with = silhouette(&pts, |r| r.mass_bucket.clone()).unwrap();
        let without = silhouette(&pts[..4], |r| r.mass_bucket.clone()).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn scatter_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svg");
        emit_scatter(&[], &[], Tag::Class, &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<line") && !svg.contains("<circle"));
        assert_eq!(fs::read_to_string(table_path(&path)).unwrap(), format!("{TABLE_HEADER}\n"));

        let classes = [MachineClass::Suv, MachineClass::Track, MachineClass::Sport, MachineClass::Gt];
        let records: Vec<_> = cloud(2, 16, 4)
            .into_iter()
            .enumerate()
            .map(|(k, r)| EmbeddingRecord { class: classes[k % 4], ..r })
            .collect();
        let pca = pca3(&records).unwrap();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        emit_scatter(&pca.projections, &records, Tag::Class, &a).unwrap();
        emit_scatter(&pca.projections, &records, Tag::Class, &b).unwrap();
        let svg = fs::read_to_string(&a).unwrap();
        assert_eq!(svg, fs::read_to_string(&b).unwrap());
        let legend = svg.split(r#"<g id="legend""#).nth(1).unwrap();
        assert_eq!(legend.matches("<text").count(), 4);
        for c in classes {
            assert!(legend.contains(&format!(">{c}<")));
        }
        let table = fs::read_to_string(table_path(&a)).unwrap();
        assert_eq!(table.lines().count(), 17);
        assert!(table.lines().nth(1).unwrap().ends_with(",SUV,NA,NA"));
    }

    #[test]
    fn unknown_tag_lists_valid_ones() {
        let err = "colour".parse::<Tag>().unwrap_err().to_string();
        assert!(err.contains("class") && err.contains("mass-bucket") && err.contains("year-bucket"));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let records = cloud(2, 5, 3);
        let mut pca = pca3(&records).unwrap();
        pca.projections[2].machine_id = 99;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_scatter(&pca.projections, &records, Tag::Class, &dir.path().join("x.svg")),
            Err(AnalysisError::Misaligned(2))
        ));
    }
}
