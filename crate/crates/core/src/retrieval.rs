//! Gallery construction, exact top-k search, the two-stage hierarchical
//! inference, and recall metrics.
//!
//! Search is exact brute force over unit-normalized rows; at desk scale this
//! keeps the evaluation free of approximation confounds. Ranking uses cosine
//! similarity, which on unit vectors orders identically to L2 distance.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use crate::adapter::UnifiedModel;
use crate::encoder::{encode_image, Embedding, ViewEncoder};
use crate::error::{Error, Result};
use crate::geodata::{haversine_m, GpsPoint};
use crate::tensor::Tensor;

pub const GALLERY_MAGIC: &[u8; 4] = b"TMGX";
pub const GALLERY_VERSION: u8 = 1;

/// Geographic metadata per gallery item. Large items also list the ids of
/// their child small tiles.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeoRecord {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub children: Vec<String>,
}

/// Immutable matrix of unit embeddings with ids and geo metadata.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    geo: Vec<GeoRecord>,
    matrix: Vec<f32>,
    index_of: HashMap<String, usize>,
}

/// Ranked neighbors for one query; scores descending, ties by ascending id.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ids: Vec<String>,
    pub scores: Vec<f32>,
}

impl GalleryIndex {
    pub fn build(embeddings: &[Embedding], geo: Vec<GeoRecord>) -> Result<Self> {
        if embeddings.len() != geo.len() {
            return Err(Error::InvalidArgument(format!(
                "{} embeddings vs {} geo records",
                embeddings.len(),
                geo.len()
            )));
        }
        let dim = embeddings.first().map(|e| e.vec.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(embeddings.len());
        let mut matrix = Vec::with_capacity(embeddings.len() * dim);
        let mut index_of = HashMap::new();
        for (i, e) in embeddings.iter().enumerate() {
            if e.vec.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "build_gallery",
                    detail: format!("row {} has dim {} vs {}", i, e.vec.len(), dim),
                });
            }
            let norm: f64 = e.vec.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidArgument(format!(
                    "row {} ({}) is not unit norm: {}",
                    i, e.id, norm
                )));
            }
            if index_of.insert(e.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate gallery id {}", e.id)));
            }
            ids.push(e.id.clone());
            matrix.extend_from_slice(&e.vec);
        }
        Ok(Self { dim, ids, geo, matrix, index_of })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn geo(&self, idx: usize) -> &GeoRecord {
        &self.geo[idx]
    }

    pub fn geo_of(&self, id: &str) -> Option<&GeoRecord> {
        self.index_of.get(id).map(|&i| &self.geo[i])
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.matrix[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Exact top-k by cosine similarity. Selection runs through a bounded
    /// heap; the tests cross-check it against a full sort.
    pub fn topk(&self, query: &Embedding, k: usize) -> Result<RetrievalResult> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k={} outside 1..={} for this gallery",
                k,
                self.len()
            )));
        }
        if query.vec.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "topk",
                detail: format!("query dim {} vs gallery {}", query.vec.len(), self.dim),
            });
        }
        // Worst kept candidate sits on top of the heap.
        #[derive(PartialEq)]
        struct Kept(f32, usize);
        impl Eq for Kept {}
        impl Ord for Kept {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                // Lower score = "greater" (worse); on ties, larger index of
                // the id table's ascending-id ordering is worse.
                other
                    .0
                    .partial_cmp(&self.0)
                    .unwrap()
                    .then_with(|| self.1.cmp(&other.1))
            }
        }
        impl PartialOrd for Kept {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        // Tie-break on ascending id: pre-rank rows by id.
        let mut by_id: Vec<usize> = (0..self.len()).collect();
        by_id.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        let mut id_rank = vec![0usize; self.len()];
        for (rank, &row) in by_id.iter().enumerate() {
            id_rank[row] = rank;
        }

        let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
        for idx in 0..self.len() {
            let row = self.row(idx);
            let score: f32 =
                query.vec.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
            heap.push(Kept(score, id_rank[idx]));
            if heap.len() > k {
                heap.pop();
            }
        }
        let mut kept: Vec<Kept> = heap.into_vec();
        kept.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
        });
        let ids = kept.iter().map(|k| self.ids[by_id[k.1]].clone()).collect();
        let scores = kept.iter().map(|k| k.0).collect();
        Ok(RetrievalResult { query_id: query.id.clone(), ids, scores })
    }

    /// New gallery restricted to `keep`, preserving this gallery's row data.
    pub fn subset(&self, keep: &BTreeSet<String>) -> Result<GalleryIndex> {
        let mut embeddings = Vec::with_capacity(keep.len());
        let mut geo = Vec::with_capacity(keep.len());
        for id in keep {
            let &idx = self
                .index_of
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("id {} not in gallery", id)))?;
            embeddings.push(Embedding { id: id.clone(), vec: self.row(idx).to_vec() });
            geo.push(self.geo[idx].clone());
        }
        GalleryIndex::build(&embeddings, geo)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(GALLERY_MAGIC)?;
        out.write_all(&[GALLERY_VERSION])?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for id in &self.ids {
            write_str(&mut out, id)?;
        }
        for g in &self.geo {
            out.write_all(&g.lat.to_le_bytes())?;
            out.write_all(&g.lon.to_le_bytes())?;
            out.write_all(&(g.children.len() as u32).to_le_bytes())?;
            for c in &g.children {
                write_str(&mut out, c)?;
            }
        }
        for &v in &self.matrix {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != GALLERY_MAGIC {
            return Err(Error::Format(format!("bad gallery magic {:?}", magic)));
        }
        let mut ver = [0u8; 1];
        input.read_exact(&mut ver)?;
        if ver[0] != GALLERY_VERSION {
            return Err(Error::Format(format!("unsupported gallery version {}", ver[0])));
        }
        let m = read_u32(&mut input)? as usize;
        let dim = read_u32(&mut input)? as usize;
        let mut ids = Vec::with_capacity(m);
        for _ in 0..m {
            ids.push(read_str(&mut input)?);
        }
        let mut geo = Vec::with_capacity(m);
        for _ in 0..m {
            let lat = read_f64(&mut input)?;
            let lon = read_f64(&mut input)?;
            let n = read_u32(&mut input)? as usize;
            let mut children = Vec::with_capacity(n);
            for _ in 0..n {
                children.push(read_str(&mut input)?);
            }
            geo.push(GeoRecord { lat, lon, children });
        }
        let mut raw = vec![0u8; m * dim * 4];
        input.read_exact(&mut raw)?;
        let matrix: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut index_of = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index_of.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id {} in gallery file", id)));
            }
        }
        Ok(Self { dim, ids, geo, matrix, index_of })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // In-memory form of `save` for determinism checks.
        let dir = std::env::temp_dir().join(format!("gallery-{}.tmgx", std::process::id()));
        self.save(&dir).expect("tmp gallery write");
        let bytes = std::fs::read(&dir).expect("tmp gallery read");
        let _ = std::fs::remove_file(&dir);
        bytes
    }
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let n = read_u32(input)? as usize;
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Sequence-to-image: encode the video with the unified model and rank the
/// large-aerial gallery.
pub fn seq_to_image(
    street: &UnifiedModel,
    video_id: &str,
    frames: &[Tensor],
    large_index: &GalleryIndex,
    t: usize,
) -> Result<RetrievalResult> {
    let emb = street.encode_video(frames, video_id)?;
    large_index.topk(&emb, t)
}

/// Union of the top-t large items' children, as a filtered view of the full
/// small gallery (which was built with the plain aerial encoder).
pub fn make_small_gallery(
    small_index: &GalleryIndex,
    large_index: &GalleryIndex,
    large_results: &RetrievalResult,
    t: usize,
) -> Result<GalleryIndex> {
    let take = t.min(large_results.ids.len());
    let mut keep = BTreeSet::new();
    for id in &large_results.ids[..take] {
        let geo = large_index
            .geo_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("large id {} unknown", id)))?;
        for child in &geo.children {
            keep.insert(child.clone());
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument("no child tiles under the selected large items".into()));
    }
    small_index.subset(&keep)
}

/// Per-frame top-t candidates from the gallery, using the plain street
/// encoder (adapter disengaged).
pub fn frame_to_frame(
    street_encoder: &ViewEncoder,
    video_id: &str,
    frames: &[Tensor],
    gallery: &GalleryIndex,
    t_candidates: usize,
) -> Result<Vec<RetrievalResult>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let emb = encode_image(street_encoder, frame, &format!("{video_id}_f{i:03}"))?;
            gallery.topk(&emb, t_candidates)
        })
        .collect()
}

/// What counts as a correct retrieval.
pub enum GroundTruth {
    /// Query id -> the single correct gallery id.
    Ids(HashMap<String, String>),
    /// Query id -> true GPS; a ranked item is correct when its gallery
    /// coordinate lies within the threshold.
    Gps { truth: HashMap<String, GpsPoint>, threshold_m: f64 },
}

/// Recall at 1, 5, 10 and 1% as fractions of queries.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RecallReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub r_at_1pct: f64,
    pub gallery_size: usize,
    pub queries: usize,
    pub k_1pct: usize,
    pub threshold_m: Option<f64>,
}

/// Compute recall for ranked results against ground truth.
pub fn recall(
    results: &[RetrievalResult],
    truth: &GroundTruth,
    gallery: &GalleryIndex,
) -> Result<RecallReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let m = gallery.len();
    let k_1pct = ((0.01 * m as f64).ceil() as usize).max(1);
    let ks = [1usize, 5, 10, k_1pct];
    let mut hits = [0usize; 4];
    for r in results {
        let correct_rank = first_correct_rank(r, truth, gallery)?;
        if let Some(rank) = correct_rank {
            for (slot, &k) in ks.iter().enumerate() {
                if rank < k {
                    hits[slot] += 1;
                }
            }
        }
    }
    let q = results.len() as f64;
    Ok(RecallReport {
        r_at_1: hits[0] as f64 / q,
        r_at_5: hits[1] as f64 / q,
        r_at_10: hits[2] as f64 / q,
        r_at_1pct: hits[3] as f64 / q,
        gallery_size: m,
        queries: results.len(),
        k_1pct,
        threshold_m: match truth {
            GroundTruth::Gps { threshold_m, .. } => Some(*threshold_m),
            GroundTruth::Ids(_) => None,
        },
    })
}

fn first_correct_rank(
    r: &RetrievalResult,
    truth: &GroundTruth,
    gallery: &GalleryIndex,
) -> Result<Option<usize>> {
    match truth {
        GroundTruth::Ids(map) => {
            let want = map
                .get(&r.query_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no truth for {}", r.query_id)))?;
            Ok(r.ids.iter().position(|id| id == want))
        }
        GroundTruth::Gps { truth, threshold_m } => {
            let want = truth
                .get(&r.query_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no truth for {}", r.query_id)))?;
            for (rank, id) in r.ids.iter().enumerate() {
                let geo = gallery
                    .geo_of(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("{} not in gallery", id)))?;
                let p = GpsPoint::new(geo.lat, geo.lon)?;
                if haversine_m(p, *want) <= *threshold_m {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        }
    }
}
