//! Dataset manifest: schema, validation, and PNG helpers.
//!
//! A dataset directory holds `manifest.json` plus `tiles/`, `large/` and
//! `frames/` image folders. Every video lists one ground-truth small tile per
//! frame and exactly one large tile; all image paths are relative to the
//! manifest's directory.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geodata::{gps_to_utm, GpsPoint, Hemisphere};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub image: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LargeRecord {
    pub id: String,
    pub image: String,
    pub lat: f64,
    pub lon: f64,
    pub children: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub lat: f64,
    pub lon: f64,
    pub tile_id: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub large_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub tile_px: usize,
    pub tile_m: f64,
    pub k: usize,
    pub tiles: Vec<TileRecord>,
    pub large_tiles: Vec<LargeRecord>,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn tile(&self, id: &str) -> Option<&TileRecord> {
        self.tiles.iter().find(|t| t.id == id)
    }

    pub fn large(&self, id: &str) -> Option<&LargeRecord> {
        self.large_tiles.iter().find(|t| t.id == id)
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }
}

/// Validation output: a manifest plus non-fatal warnings.
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub base_dir: std::path::PathBuf,
    pub warnings: Vec<String>,
}

impl Ingested {
    pub fn image_path(&self, rel: &str) -> std::path::PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load_image(&self, rel: &str) -> Result<Tensor> {
        load_png(&self.image_path(rel))
    }

    /// All frame images of one video, in order.
    pub fn video_frames(&self, video: &VideoRecord) -> Result<Vec<Tensor>> {
        video.frames.iter().map(|f| self.load_image(&f.image)).collect()
    }
}

/// Load and validate a dataset manifest.
///
/// Hard errors: missing files, bad GPS, videos with missing tile references,
/// duplicate ids, UTM zone crossings. Soft warnings: frames whose GPS falls
/// outside their ground-truth tile.
pub fn ingest(manifest_path: &Path) -> Result<Ingested> {
    let file = std::io::BufReader::new(std::fs::File::open(manifest_path).map_err(|e| {
        Error::Dataset(format!("{}: {}", manifest_path.display(), e))
    })?);
    let manifest: DatasetManifest = serde_json::from_reader(file)?;
    let base_dir = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| std::path::PathBuf::from("."));

    let mut warnings = Vec::new();
    let mut zone: Option<(u8, Hemisphere)> = None;
    let mut check_gps = |lat: f64, lon: f64, what: &str| -> Result<crate::geodata::UtmPoint> {
        let p = GpsPoint::new(lat, lon)
            .map_err(|e| Error::Dataset(format!("{}: {}", what, e)))?;
        let u = gps_to_utm(p).map_err(|e| Error::Dataset(format!("{}: {}", what, e)))?;
        match zone {
            None => zone = Some((u.zone, u.hemisphere)),
            Some(z) => {
                if z != (u.zone, u.hemisphere) {
                    return Err(Error::Dataset(format!(
                        "{} crosses UTM zones ({:?} vs {:?})",
                        what,
                        z,
                        (u.zone, u.hemisphere)
                    )));
                }
            }
        }
        Ok(u)
    };

    let mut tile_ids = HashSet::new();
    for t in &manifest.tiles {
        if !tile_ids.insert(t.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate tile id {}", t.id)));
        }
        if !base_dir.join(&t.image).exists() {
            return Err(Error::Dataset(format!("tile {}: image {} missing", t.id, t.image)));
        }
        check_gps(t.lat, t.lon, &format!("tile {}", t.id))?;
    }
    let mut large_ids = HashSet::new();
    for l in &manifest.large_tiles {
        if !large_ids.insert(l.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate large tile id {}", l.id)));
        }
        if !base_dir.join(&l.image).exists() {
            return Err(Error::Dataset(format!("large {}: image {} missing", l.id, l.image)));
        }
        check_gps(l.lat, l.lon, &format!("large {}", l.id))?;
        if l.children.len() != manifest.k * manifest.k {
            return Err(Error::Dataset(format!(
                "large {}: {} children, expected k^2 = {}",
                l.id,
                l.children.len(),
                manifest.k * manifest.k
            )));
        }
        for c in &l.children {
            if !tile_ids.contains(c.as_str()) {
                return Err(Error::Dataset(format!("large {}: unknown child {}", l.id, c)));
            }
        }
    }

    let mut video_ids = HashSet::new();
    for v in &manifest.videos {
        if !video_ids.insert(v.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate video id {}", v.id)));
        }
        if v.frames.is_empty() {
            return Err(Error::Dataset(format!("video {}: no frames", v.id)));
        }
        if !large_ids.contains(v.large_id.as_str()) {
            return Err(Error::Dataset(format!(
                "video {}: unknown large tile {}",
                v.id, v.large_id
            )));
        }
        for (fi, f) in v.frames.iter().enumerate() {
            let what = format!("video {} frame {}", v.id, fi);
            if !base_dir.join(&f.image).exists() {
                return Err(Error::Dataset(format!("{}: image {} missing", what, f.image)));
            }
            if !tile_ids.contains(f.tile_id.as_str()) {
                return Err(Error::Dataset(format!("{}: unknown tile {}", what, f.tile_id)));
            }
            let fu = check_gps(f.lat, f.lon, &what)?;
            let tile = manifest.tile(&f.tile_id).expect("checked above");
            let tu = check_gps(tile.lat, tile.lon, &format!("tile {}", tile.id))?;
            let half = manifest.tile_m / 2.0 + 0.5;
            if (fu.easting - tu.easting).abs() > half || (fu.northing - tu.northing).abs() > half {
                warnings.push(format!(
                    "{}: GPS outside its ground-truth tile {} bounds",
                    what, f.tile_id
                ));
            }
        }
    }

    Ok(Ingested { manifest, base_dir, warnings })
}

/// Save a [0,1] float image as 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "save_png",
            detail: format!("expected [H, W, 3], got {:?}", shape),
        });
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w, h, bytes).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Load an 8-bit PNG to floats in [0,1].
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}
