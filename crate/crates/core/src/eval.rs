//! Global-feature extraction and retrieval metrics (mAP, CMC).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView3, Axis};

use crate::backbone::Encoder;
use crate::data::{resize_bilinear, DatasetManifest};
use crate::region::{grid_coords, patchify};
use crate::{Error, Result};

/// Unit-norm descriptors with their labels, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub features: Array2<f64>,
    pub identity_ids: Vec<i64>,
    pub camera_ids: Vec<i64>,
}

impl FeatureMatrix {
    pub fn new(
        features: Array2<f64>,
        identity_ids: Vec<i64>,
        camera_ids: Vec<i64>,
    ) -> Result<Self> {
        if identity_ids.len() != features.nrows() || camera_ids.len() != features.nrows() {
            return Err(Error::arg(format!(
                "{} feature rows but {} identities and {} cameras",
                features.nrows(),
                identity_ids.len(),
                camera_ids.len()
            )));
        }
        Ok(Self {
            features,
            identity_ids,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Header `Q D`, then `identity camera f_1 … f_D` per row.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (i, row) in self.features.axis_iter(Axis(0)).enumerate() {
            write!(out, "{} {}", self.identity_ids[i], self.camera_ids[i]).unwrap();
            for v in row {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Retrieval(format!("feature file: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header `{header}`"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(bad(format!("bad header `{header}`")));
        };
        let mut features = Array2::zeros((rows, cols));
        let mut ids = Vec::with_capacity(rows);
        let mut cams = Vec::with_capacity(rows);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("expected {rows} rows, got {r}")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != cols + 2 {
                return Err(bad(format!("row {} has {} fields", r + 1, fields.len())));
            }
            let parse_int = |s: &str| {
                s.parse::<i64>()
                    .map_err(|_| bad(format!("bad label `{s}`")))
            };
            ids.push(parse_int(fields[0])?);
            cams.push(parse_int(fields[1])?);
            for (c, s) in fields[2..].iter().enumerate() {
                features[[r, c]] = s.parse().map_err(|_| bad(format!("bad value `{s}`")))?;
            }
        }
        if lines.next().is_some() {
            return Err(bad("more rows than the header states".into()));
        }
        Self::new(features, ids, cams)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn l2_normalize(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

/// Unmasked forward of one image (resized to `image_size`) at integer grid
/// positions; returns the L2-normalised global feature.
pub fn image_feature(
    encoder: &Encoder,
    image_size: (usize, usize),
    pixels: ArrayView3<f64>,
) -> Result<Array1<f64>> {
    let resized = resize_bilinear(pixels, image_size.0, image_size.1);
    let tokens = patchify(resized.view(), encoder.config.patch_size)?;
    let (out, _) = encoder.forward(tokens.tokens.view(), &grid_coords(tokens.grid))?;
    Ok(l2_normalize(encoder.global_feature(&out)))
}

/// Features for every record of `manifest`, computed on all available cores.
pub fn extract_features(
    encoder: &Encoder,
    image_size: (usize, usize),
    manifest: &DatasetManifest,
) -> Result<FeatureMatrix> {
    let records = &manifest.records;
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(records.len().max(1));
    let chunk = records.len().div_ceil(workers).max(1);
    let rows: Vec<Array1<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|r| image_feature(encoder, image_size, r.pixels.view()))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("feature worker panicked"))
            .collect::<Result<Vec<_>>>()
            .map(|parts| parts.into_iter().flatten().collect())
    })?;

    let dim = encoder.config.embed_dim;
    let mut features = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in features.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(src);
    }
    FeatureMatrix::new(
        features,
        records.iter().map(|r| r.identity_id).collect(),
        records.iter().map(|r| r.camera_id).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    /// `cmc[k]` is the rank-(k+1) matching rate.
    pub cmc: Vec<f64>,
    /// Average precision per query; `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn evaluated(&self) -> usize {
        self.per_query_ap.len() - self.skipped.len()
    }

    pub fn summary_line(&self) -> String {
        format!("mAP={:.6} rank1={:.6}", self.map, self.rank1())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("metric     value\n");
        writeln!(out, "mAP        {:.4}", self.map).unwrap();
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(out, "{:<10} {v:.4}", format!("rank-{}", k + 1)).unwrap();
        }
        writeln!(out, "queries    {}", self.evaluated()).unwrap();
        writeln!(out, "skipped    {}", self.skipped.len()).unwrap();
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("mAP={}\n", self.map);
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(out, "rank{}={v}", k + 1).unwrap();
        }
        writeln!(out, "queries={}", self.evaluated()).unwrap();
        writeln!(out, "skipped={}", self.skipped.len()).unwrap();
        out
    }
}

/// Ranks the gallery for every query by inner product.
///
/// Gallery entries sharing both identity and camera with the query are
/// dropped. Queries without any remaining same-identity entry are skipped.
pub fn compute_cmc_map(
    query: &FeatureMatrix,
    gallery: &FeatureMatrix,
    max_rank: usize,
) -> Result<RetrievalReport> {
    if max_rank == 0 {
        return Err(Error::arg("max_rank must be at least 1"));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Retrieval(
            "query and gallery must be non-empty".into(),
        ));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::Retrieval(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let sims = query.features.dot(&gallery.features.t());
    let mut cmc_hits = vec![0usize; max_rank];
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut skipped = Vec::new();

    for (q, row) in sims.axis_iter(Axis(0)).enumerate() {
        let (qid, qcam) = (query.identity_ids[q], query.camera_ids[q]);
        let mut order: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(gallery.identity_ids[g] == qid && gallery.camera_ids[g] == qcam))
            .collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let relevant: Vec<bool> = order
            .iter()
            .map(|&g| gallery.identity_ids[g] == qid)
            .collect();

        let Some(first) = relevant.iter().position(|&r| r) else {
            log::warn!("query {q} (identity {qid}) has no valid gallery match; skipped");
            skipped.push(q);
            per_query_ap.push(None);
            continue;
        };
        for hit in cmc_hits.iter_mut().skip(first) {
            *hit += 1;
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (i, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
            found += 1;
            precision_sum += found as f64 / (i + 1) as f64;
        }
        per_query_ap.push(Some(precision_sum / found as f64));
    }

    let evaluated = query.len() - skipped.len();
    if evaluated == 0 {
        return Err(Error::Retrieval(
            "no query has a matching identity in the gallery".into(),
        ));
    }
    let map = per_query_ap.iter().flatten().sum::<f64>() / evaluated as f64;
    let cmc = cmc_hits
        .iter()
        .map(|&h| h as f64 / evaluated as f64)
        .collect();
    Ok(RetrievalReport {
        map,
        cmc,
        per_query_ap,
        skipped,
    })
}
