//! Embedding arithmetic, zero-shot classification, retrieval and range maps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::encoders::{EncoderHandle, Modality, PrototypeTable, Record};
use crate::error::{Error, Result};
use crate::numcore::{dot, l2_normalize, norm, SeededRng};
use crate::synthdata::{MultimodalSample, World};

/// Sum of unit embeddings, renormalized.
pub fn combine_embeddings(parts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Size("combine_embeddings needs at least one part".into()))?;
    let mut sum = vec![0.0; first.len()];
    for p in parts {
        if p.len() != sum.len() {
            return Err(Error::Shape(format!(
                "cannot add embeddings of dimension {} and {}",
                sum.len(),
                p.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    l2_normalize(&sum)
}

/// Index of the highest score; ties go to the lowest index.
fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Class of the prototype (already unit-norm) with the highest cosine.
pub fn classify_normalized(e: &[f64], prototypes: &[Vec<f64>]) -> Result<usize> {
    if let Some(p) = prototypes.iter().find(|p| p.len() != e.len()) {
        return Err(Error::Shape(format!(
            "embedding dimension {} vs prototype dimension {}",
            e.len(),
            p.len()
        )));
    }
    Ok(argmax(prototypes.iter().map(|p| dot(e, p))))
}

pub fn zero_shot_classify(e: &[f64], prototypes: &PrototypeTable) -> Result<usize> {
    classify_normalized(e, &prototypes.normalized()?)
}

/// Fraction of `labels` matched by classifying `embeddings`.
pub fn accuracy_of(embeddings: &[Vec<f64>], labels: &[usize], prototypes: &[Vec<f64>]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Size("no examples to classify".into()));
    }
    let hits: Vec<bool> = embeddings
        .par_iter()
        .zip(labels)
        .map(|(e, &l)| classify_normalized(e, prototypes).map(|c| c == l))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Zero-shot top-1 accuracy of one encoder over the samples that carry its
/// modality.
pub fn zero_shot_accuracy(
    encoder: &EncoderHandle,
    prototypes: &PrototypeTable,
    samples: &[&MultimodalSample],
    modality: Modality,
) -> Result<f64> {
    combined_zero_shot_accuracy(&[(modality, encoder)], prototypes, samples)
}

/// Zero-shot accuracy of the summed embeddings of several modalities.
/// Samples lacking any of the modalities are skipped.
pub fn combined_zero_shot_accuracy(
    encoders: &[(Modality, &EncoderHandle)],
    prototypes: &PrototypeTable,
    samples: &[&MultimodalSample],
) -> Result<f64> {
    let mut records: Vec<Vec<Record>> = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let r: Option<Vec<Record>> = encoders.iter().map(|(m, _)| s.record(*m)).collect();
        if let Some(r) = r {
            records.push(r);
            labels.push(s.label());
        }
    }
    let embeddings: Vec<Vec<f64>> = records
        .par_iter()
        .map(|recs| {
            let parts = encoders
                .iter()
                .zip(recs)
                .map(|((_, enc), r)| enc.encode(r))
                .collect::<Result<Vec<_>>>()?;
            combine_embeddings(&parts)
        })
        .collect::<Result<_>>()?;
    accuracy_of(&embeddings, &labels, &prototypes.normalized()?)
}

/// Retrieval gallery of unit-norm items.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    embeddings: Vec<Vec<f64>>,
    ids: Vec<u64>,
    labels: Option<Vec<usize>>,
}

impl Gallery {
    pub fn new(embeddings: Vec<Vec<f64>>, ids: Vec<u64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Size("gallery is empty".into()));
        }
        if ids.len() != embeddings.len() || labels.as_ref().is_some_and(|l| l.len() != embeddings.len()) {
            return Err(Error::Size("gallery ids/labels do not match item count".into()));
        }
        let d = embeddings[0].len();
        for e in &embeddings {
            if e.len() != d {
                return Err(Error::Shape("gallery items differ in dimension".into()));
            }
            if (norm(e) - 1.0).abs() > 1e-6 {
                return Err(Error::Domain("gallery items must be unit-norm".into()));
            }
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Data(format!("duplicate gallery id {dup}")));
        }
        Ok(Self { embeddings, ids, labels })
    }

    /// Items with ids `0..n`.
    pub fn indexed(embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..embeddings.len() as u64).collect();
        Self::new(embeddings, ids, None)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.embeddings[0].len() {
            return Err(Error::Shape(format!(
                "query dimension {} vs gallery dimension {}",
                q.len(),
                self.embeddings[0].len()
            )));
        }
        Ok(())
    }
}

/// Top-`k` gallery ids by cosine, descending; ties go to the lower id.
pub fn retrieve(query: &[f64], gallery: &Gallery, k: usize) -> Result<Vec<u64>> {
    if k == 0 || k > gallery.len() {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", gallery.len())));
    }
    gallery.check_query(query)?;
    let mut scored: Vec<(f64, u64)> = gallery
        .embeddings
        .iter()
        .zip(&gallery.ids)
        .map(|(e, &id)| (dot(query, e), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// 0-based rank of the ground-truth item under the `retrieve` ordering.
fn rank_of(query: &[f64], gallery: &Gallery, pos: usize) -> usize {
    let target = dot(query, &gallery.embeddings[pos]);
    let tid = gallery.ids[pos];
    gallery
        .embeddings
        .iter()
        .zip(&gallery.ids)
        .filter(|(e, &id)| {
            let s = dot(query, e);
            s > target || (s == target && id < tid)
        })
        .count()
}

/// Ranks of every query's ground-truth item.
pub fn ground_truth_ranks(queries: &[Vec<f64>], gallery: &Gallery, ground_truth: &[Option<u64>]) -> Result<Vec<usize>> {
    if ground_truth.len() != queries.len() {
        return Err(Error::Data(format!(
            "{} queries but {} ground-truth entries",
            queries.len(),
            ground_truth.len()
        )));
    }
    let positions: Vec<usize> = ground_truth
        .iter()
        .enumerate()
        .map(|(qi, gt)| {
            let id = gt.ok_or_else(|| Error::Data(format!("query {qi} has no ground-truth item")))?;
            gallery
                .ids
                .iter()
                .position(|&g| g == id)
                .ok_or_else(|| Error::Data(format!("ground-truth id {id} of query {qi} not in gallery")))
        })
        .collect::<Result<_>>()?;
    for q in queries {
        gallery.check_query(q)?;
    }
    Ok(queries
        .par_iter()
        .zip(&positions)
        .map(|(q, &p)| rank_of(q, gallery, p))
        .collect())
}

pub fn recall_at_k(queries: &[Vec<f64>], gallery: &Gallery, ground_truth: &[Option<u64>], k: usize) -> Result<f64> {
    Ok(recall_curve(queries, gallery, ground_truth, &[k])?[0])
}

/// Recall at several k from one ranking pass.
pub fn recall_curve(queries: &[Vec<f64>], gallery: &Gallery, ground_truth: &[Option<u64>], ks: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Size("no queries".into()));
    }
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k > gallery.len()) {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", gallery.len())));
    }
    let ranks = ground_truth_ranks(queries, gallery, ground_truth)?;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// `count` independent uniformly random unit vectors.
pub fn random_unit_embeddings(count: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if let Ok(u) = l2_normalize(&v) {
                break u;
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalRow {
    pub k: usize,
    pub recall: f64,
    pub num_queries: usize,
    pub gallery_size: usize,
}

pub fn retrieval_report_csv(rows: &[RetrievalRow]) -> String {
    let mut s = String::from("k,recall,num_queries,gallery_size\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.k, r.recall, r.num_queries, r.gallery_size).unwrap();
    }
    s
}

/// Grid extent and resolution. Row 0 is the northern edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn global(rows: usize, cols: usize) -> Self {
        Self {
            lat_min: -90.0,
            lat_max: 90.0,
            lon_min: -180.0,
            lon_max: 180.0,
            rows,
            cols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("range grid needs at least one row and column".into()));
        }
        let ok = -90.0 <= self.lat_min
            && self.lat_min < self.lat_max
            && self.lat_max <= 90.0
            && -180.0 <= self.lon_min
            && self.lon_min < self.lon_max
            && self.lon_max <= 180.0;
        if !ok {
            return Err(Error::Config(format!("degenerate or out-of-range bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        let dlat = (self.lat_max - self.lat_min) / self.rows as f64;
        let dlon = (self.lon_max - self.lon_min) / self.cols as f64;
        (
            self.lat_max - (r as f64 + 0.5) * dlat,
            self.lon_min + (c as f64 + 0.5) * dlon,
        )
    }
}

/// Per-cell cosine scores; NaN marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeGrid {
    pub spec: GridSpec,
    pub scores: Vec<f64>,
}

impl RangeGrid {
    pub fn score(&self, r: usize, c: usize) -> f64 {
        self.scores[r * self.spec.cols + c]
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.spec.rows).flat_map(move |r| {
            (0..self.spec.cols).map(move |c| {
                let (lat, lon) = self.spec.cell_center(r, c);
                (lat, lon, self.score(r, c))
            })
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lat,lon,score\n");
        for (lat, lon, v) in self.cells() {
            if v.is_nan() {
                writeln!(s, "{lat},{lon},").unwrap();
            } else {
                writeln!(s, "{lat},{lon},{v}").unwrap();
            }
        }
        s
    }

    /// 16-bit binary PGM, big-endian samples, `[-1, 1] -> [0, 65535]`.
    /// Missing cells are written as 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.spec.cols, self.spec.rows).into_bytes();
        for v in &self.scores {
            out.extend_from_slice(&score_to_level(*v).to_be_bytes());
        }
        out
    }

    /// Bounding box, mapping and missing-cell mask for the PGM.
    pub fn pgm_sidecar(&self) -> String {
        let g = &self.spec;
        let mut s = String::new();
        writeln!(s, "lat_min={}", g.lat_min).unwrap();
        writeln!(s, "lat_max={}", g.lat_max).unwrap();
        writeln!(s, "lon_min={}", g.lon_min).unwrap();
        writeln!(s, "lon_max={}", g.lon_max).unwrap();
        writeln!(s, "rows={}", g.rows).unwrap();
        writeln!(s, "cols={}", g.cols).unwrap();
        writeln!(s, "row0=north").unwrap();
        writeln!(s, "mapping=level=round((score+1)/2*65535)").unwrap();
        writeln!(s, "missing_level=0").unwrap();
        s.push_str("mask=\n");
        for r in 0..g.rows {
            let line: String = (0..g.cols)
                .map(|c| if self.score(r, c).is_nan() { '0' } else { '1' })
                .collect();
            s.push_str(&line);
            s.push('\n');
        }
        s
    }

    pub fn write_files(&self, csv: &Path, pgm: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv())?;
        std::fs::write(pgm, self.to_pgm())?;
        let mut side = pgm.as_os_str().to_owned();
        side.push(".txt");
        std::fs::write(side, self.pgm_sidecar())?;
        Ok(())
    }
}

pub fn score_to_level(v: f64) -> u16 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16
}

/// Parses the range CSV back into `(lat, lon, score)` rows.
pub fn parse_range_csv(text: &str) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let mut lines = text.lines();
    if lines.next() != Some("lat,lon,score") {
        return Err(Error::format(0, "missing 'lat,lon,score' header"));
    }
    let mut out = Vec::new();
    let mut offset = "lat,lon,score\n".len();
    for line in lines {
        let bad = || Error::format(offset, format!("bad range row '{line}'"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let lat = f[0].parse().map_err(|_| bad())?;
        let lon = f[1].parse().map_err(|_| bad())?;
        let score = if f[2].is_empty() {
            None
        } else {
            Some(f[2].parse().map_err(|_| bad())?)
        };
        out.push((lat, lon, score));
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Parses a 16-bit P5 PGM into `(cols, rows, levels)`.
pub fn parse_pgm16(buf: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| Error::format(start, "non-ASCII header"))?);
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::format(0, "expected 16-bit P5 PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad PGM size '{s}'")));
    let (cols, rows) = (parse(fields[1])?, parse(fields[2])?);
    pos += 1;
    let body = &buf[pos.min(buf.len())..];
    if body.len() != cols * rows * 2 {
        return Err(Error::format(pos, format!("expected {} data bytes, found {}", cols * rows * 2, body.len())));
    }
    let levels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((cols, rows, levels))
}

/// Source of satellite features for an arbitrary location.
pub trait SatelliteProvider: Sync {
    fn features(&self, lat: f64, lon: f64) -> Option<Vec<f64>>;
}

impl SatelliteProvider for World {
    fn features(&self, lat: f64, lon: f64) -> Option<Vec<f64>> {
        self.sat_at_location(lat, lon)
    }
}

/// Scores every cell against `query`. When `combine` is set and a satellite
/// encoder and provider are given, the cell embedding is the sum of the
/// location and satellite embeddings.
pub fn range_map(
    query: &[f64],
    spec: &GridSpec,
    location: &EncoderHandle,
    satellite: Option<(&EncoderHandle, &dyn SatelliteProvider)>,
    combine: bool,
) -> Result<RangeGrid> {
    spec.validate()?;
    if location.modality() != Modality::Location {
        return Err(Error::TypeMismatch("range_map needs a location encoder".into()));
    }
    if query.len() != location.output_dim() {
        return Err(Error::Shape(format!(
            "query dimension {} vs location embedding dimension {}",
            query.len(),
            location.output_dim()
        )));
    }
    let sat = if combine { satellite } else { None };
    if let Some((enc, _)) = sat {
        if enc.output_dim() != location.output_dim() {
            return Err(Error::Shape("satellite and location embeddings differ in dimension".into()));
        }
    }
    let cells: Vec<(usize, usize)> = (0..spec.rows).flat_map(|r| (0..spec.cols).map(move |c| (r, c))).collect();
    let scores = cells
        .par_iter()
        .map(|&(r, c)| {
            let (lat, lon) = spec.cell_center(r, c);
            let loc = location.encode(&Record::Location { lat, lon })?;
            let emb = match sat {
                None => loc,
                Some((enc, provider)) => {
                    let Some(features) = provider.features(lat, lon) else {
                        return Ok(f64::NAN);
                    };
                    let Ok(s) = enc.encode(&Record::Features(features)) else {
                        return Ok(f64::NAN);
                    };
                    match combine_embeddings(&[loc, s]) {
                        Ok(e) => e,
                        Err(_) => return Ok(f64::NAN),
                    }
                }
            };
            Ok(dot(query, &emb).clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RangeGrid { spec: *spec, scores })
}
