//! Procedural scene generator.
//!
//! The world is a deterministic texture function over local meters: layered
//! value noise plus a road grid through the small-tile centers. Aerial tiles
//! sample it top-down; street frames sample a forward-facing ground fan along
//! the trajectory, so cross-view matching is learnable texture matching.
//! Trajectories walk the road grid, every frame lies inside exactly one small
//! tile, and each video stays inside one large tile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{
    save_png, DatasetManifest, FrameRecord, LargeRecord, TileRecord, VideoRecord,
};
use super::{gps_to_utm, utm_to_gps, GpsPoint, UtmPoint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    /// GPS anchor of the world's south-west corner.
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Large-tile grid (columns, rows).
    pub large_grid: (usize, usize),
    /// Small tiles per large-tile side.
    pub k: usize,
    /// Small tile side in pixels.
    pub tile_px: usize,
    /// Small tile side in meters.
    pub tile_m: f64,
    pub videos: usize,
    pub frames_per_video: usize,
    /// Path length per frame, meters.
    pub frame_step_m: f64,
    /// Per-frame multiplicative brightness jitter on street renders.
    pub brightness_jitter: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            origin_lat: 40.20,
            origin_lon: -74.60,
            large_grid: (4, 4),
            k: 7,
            tile_px: 64,
            tile_m: 40.0,
            videos: 8,
            frames_per_video: 8,
            frame_step_m: 16.0,
            brightness_jitter: 0.12,
        }
    }
}

impl SceneSpec {
    pub fn small_grid(&self) -> (usize, usize) {
        (self.large_grid.0 * self.k, self.large_grid.1 * self.k)
    }

    fn validate(&self) -> Result<()> {
        if self.large_grid.0 == 0 || self.large_grid.1 == 0 || self.k == 0 {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        if self.tile_px == 0 || self.tile_m <= 0.0 {
            return Err(Error::InvalidArgument("degenerate tile size".into()));
        }
        if self.videos == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidArgument("no videos requested".into()));
        }
        if self.k < 3 {
            return Err(Error::InvalidArgument(
                "need k >= 3 so trajectories can stay off the border".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic texture over local meters.
pub struct WorldTexture {
    seed: u64,
    tile_m: f64,
}

fn hash_cell(seed: u64, octave: u32, channel: u32, ix: i64, iy: i64) -> f32 {
    let mut h = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((octave as u64).wrapping_mul(0xd1b54a32d192ed03))
        .wrapping_add((channel as u64).wrapping_mul(0x94d049bb133111eb))
        .wrapping_add((ix as u64).wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add((iy as u64).wrapping_mul(0x2545f4914f6cdd1d));
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl WorldTexture {
    pub fn new(seed: u64, tile_m: f64) -> Self {
        Self { seed, tile_m }
    }

    fn octave(&self, channel: u32, octave: u32, wavelength: f64, x: f64, y: f64) -> f32 {
        let fx = x / wavelength;
        let fy = y / wavelength;
        let ix = fx.floor() as i64;
        let iy = fy.floor() as i64;
        let tx = smooth(fx - ix as f64);
        let ty = smooth(fy - iy as f64);
        let v00 = hash_cell(self.seed, octave, channel, ix, iy) as f64;
        let v10 = hash_cell(self.seed, octave, channel, ix + 1, iy) as f64;
        let v01 = hash_cell(self.seed, octave, channel, ix, iy + 1) as f64;
        let v11 = hash_cell(self.seed, octave, channel, ix + 1, iy + 1) as f64;
        let a = v00 + (v10 - v00) * tx;
        let b = v01 + (v11 - v01) * tx;
        (a + (b - a) * ty) as f32
    }

    /// RGB in [0,1] at a world position (meters).
    pub fn color(&self, x: f64, y: f64) -> [f32; 3] {
        const WAVES: [(f64, f32); 5] =
            [(170.0, 0.30), (71.0, 0.28), (29.0, 0.22), (11.0, 0.13), (4.3, 0.07)];
        let mut rgb = [0.0f32; 3];
        for (c, slot) in rgb.iter_mut().enumerate() {
            let mut v = 0.0f32;
            for (oct, &(w, weight)) in WAVES.iter().enumerate() {
                v += weight * self.octave(c as u32, oct as u32, w, x, y);
            }
            *slot = v;
        }

        // Road grid through tile centers.
        let half = self.tile_m / 2.0;
        let mx = (x - half).rem_euclid(self.tile_m);
        let my = (y - half).rem_euclid(self.tile_m);
        let dx = mx.min(self.tile_m - mx);
        let dy = my.min(self.tile_m - my);
        let road_half = 2.6;
        if dx < road_half || dy < road_half {
            let base = 0.16 + 0.10 * self.octave(7, 9, 3.0, x, y);
            let mut c = [base, base, base + 0.02];
            // Dashed center line.
            let along = if dx < dy { y } else { x };
            let offset = dx.min(dy);
            if offset < 0.45 && along.rem_euclid(9.0) < 3.6 {
                c = [0.9, 0.85, 0.55];
            }
            return c;
        }
        rgb
    }
}

struct WorldFrame {
    /// South-west corner of the world in UTM.
    base: UtmPoint,
}

impl WorldFrame {
    fn new(spec: &SceneSpec) -> Result<Self> {
        let base = gps_to_utm(GpsPoint::new(spec.origin_lat, spec.origin_lon)?)?;
        Ok(Self { base })
    }

    fn to_gps(&self, x: f64, y: f64) -> Result<GpsPoint> {
        utm_to_gps(UtmPoint {
            zone: self.base.zone,
            hemisphere: self.base.hemisphere,
            easting: self.base.easting + x,
            northing: self.base.northing + y,
        })
    }
}

fn render_tile(tex: &WorldTexture, spec: &SceneSpec, x0: f64, y0: f64) -> Tensor {
    let side_px = spec.tile_px;
    let m_per_px = spec.tile_m / spec.tile_px as f64;
    let mut data = vec![0.0f32; side_px * side_px * 3];
    for py in 0..side_px {
        // Image rows run north to south.
        let y = y0 + (side_px - py) as f64 * m_per_px - 0.5 * m_per_px;
        for px in 0..side_px {
            let x = x0 + (px as f64 + 0.5) * m_per_px;
            let c = tex.color(x, y);
            let idx = (py * side_px + px) * 3;
            data[idx..idx + 3].copy_from_slice(&c);
        }
    }
    Tensor::new(&[side_px, side_px, 3], data).unwrap()
}

/// Forward-facing ground fan: rows sweep depth, columns sweep lateral offset.
fn render_street(
    tex: &WorldTexture,
    spec: &SceneSpec,
    pos: (f64, f64),
    heading: f64,
    brightness: f32,
) -> Tensor {
    let px = spec.tile_px;
    let (fx, fy) = (heading.cos(), heading.sin());
    let (rx, ry) = (fy, -fx);
    let near = 2.0;
    let far = 34.0;
    let w_near = 3.0;
    let w_far = 16.0;
    let mut data = vec![0.0f32; px * px * 3];
    for row in 0..px {
        // Top rows look far ahead.
        let depth_frac = 1.0 - (row as f64 + 0.5) / px as f64;
        let d = near + (far - near) * smooth(depth_frac);
        let halfw = w_near + (w_far - w_near) * depth_frac;
        for col in 0..px {
            let u = (col as f64 + 0.5) / px as f64 * 2.0 - 1.0;
            let wx = pos.0 + fx * d + rx * (u * halfw);
            let wy = pos.1 + fy * d + ry * (u * halfw);
            let c = tex.color(wx, wy);
            let idx = (row * px + col) * 3;
            for ch in 0..3 {
                data[idx + ch] = (c[ch] * brightness).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[px, px, 3], data).unwrap()
}

#[derive(Debug, Clone)]
struct Trajectory {
    positions: Vec<(f64, f64)>,
    headings: Vec<f64>,
    large_idx: (usize, usize),
}

/// Walk the road grid inside one large tile.
fn sample_trajectory(spec: &SceneSpec, rng: &mut ChaCha8Rng, large_idx: (usize, usize)) -> Trajectory {
    let large_side = spec.k as f64 * spec.tile_m;
    let x_min = large_idx.0 as f64 * large_side;
    let y_min = large_idx.1 as f64 * large_side;
    // Start on a road node (tile center) away from the border.
    let nx = rng.random_range(1..spec.k - 1);
    let ny = rng.random_range(1..spec.k - 1);
    let mut pos =
        (x_min + (nx as f64 + 0.5) * spec.tile_m, y_min + (ny as f64 + 0.5) * spec.tile_m);
    let dirs = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
    let mut dir = dirs[rng.random_range(0..4)];

    let keep = |pos: (f64, f64), d: (f64, f64), tile_m: f64| {
        let probe = (pos.0 + d.0 * tile_m, pos.1 + d.1 * tile_m);
        probe.0 > x_min + 0.25 * tile_m
            && probe.0 < x_min + large_side - 0.25 * tile_m
            && probe.1 > y_min + 0.25 * tile_m
            && probe.1 < y_min + large_side - 0.25 * tile_m
    };
    if !keep(pos, dir, spec.tile_m) {
        dir = *dirs.iter().find(|&&d| keep(pos, d, spec.tile_m)).unwrap_or(&dirs[0]);
    }

    let mut positions = Vec::with_capacity(spec.frames_per_video);
    let mut headings = Vec::with_capacity(spec.frames_per_video);
    let mut dist_to_node = spec.tile_m / 2.0;
    for _ in 0..spec.frames_per_video {
        positions.push(pos);
        headings.push(dir.1.atan2(dir.0));
        let mut remaining = spec.frame_step_m;
        while remaining > 0.0 {
            let hop = remaining.min(dist_to_node);
            pos = (pos.0 + dir.0 * hop, pos.1 + dir.1 * hop);
            dist_to_node -= hop;
            remaining -= hop;
            if dist_to_node <= 1e-9 {
                // At a road node: maybe turn, never leave the large tile.
                let mut options: Vec<(f64, f64)> = dirs
                    .iter()
                    .copied()
                    .filter(|&d| (d.0 + dir.0).abs() + (d.1 + dir.1).abs() > 1e-9) // no U-turn
                    .filter(|&d| keep(pos, d, spec.tile_m))
                    .collect();
                if options.is_empty() {
                    options.push((-dir.0, -dir.1));
                }
                let straight = options.iter().position(|&d| d == dir);
                dir = match straight {
                    Some(si) if rng.random_range(0.0..1.0) < 0.6 => options[si],
                    _ => options[rng.random_range(0..options.len())],
                };
                dist_to_node = spec.tile_m;
            }
        }
    }
    Trajectory { positions, headings, large_idx }
}

fn small_tile_id(ix: usize, iy: usize) -> String {
    format!("s_{ix:03}_{iy:03}")
}

fn large_tile_id(ix: usize, iy: usize) -> String {
    format!("L_{ix:02}_{iy:02}")
}

/// Generate the dataset under `out_dir`: tile/large/frame PNGs plus
/// `manifest.json`. Same spec and seed produce bit-identical output.
pub fn generate_scene(
    spec: &SceneSpec,
    seed: u64,
    out_dir: &std::path::Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let frame = WorldFrame::new(spec)?;
    let tex = WorldTexture::new(seed, spec.tile_m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce11a_u64);

    std::fs::create_dir_all(out_dir.join("tiles"))?;
    std::fs::create_dir_all(out_dir.join("large"))?;
    std::fs::create_dir_all(out_dir.join("frames"))?;

    let (sw, sh) = spec.small_grid();
    let mut tiles = Vec::with_capacity(sw * sh);
    for iy in 0..sh {
        for ix in 0..sw {
            let x0 = ix as f64 * spec.tile_m;
            let y0 = iy as f64 * spec.tile_m;
            let img = render_tile(&tex, spec, x0, y0);
            let rel = format!("tiles/{}.png", small_tile_id(ix, iy));
            save_png(&out_dir.join(&rel), &img)?;
            let center = frame.to_gps(x0 + spec.tile_m / 2.0, y0 + spec.tile_m / 2.0)?;
            tiles.push(TileRecord {
                id: small_tile_id(ix, iy),
                image: rel,
                lat: center.lat(),
                lon: center.lon(),
            });
        }
    }

    let large_side_m = spec.k as f64 * spec.tile_m;
    let side_px = spec.k * spec.tile_px;
    let mut large_tiles = Vec::with_capacity(spec.large_grid.0 * spec.large_grid.1);
    for iy in 0..spec.large_grid.1 {
        for ix in 0..spec.large_grid.0 {
            let x0 = ix as f64 * large_side_m;
            let y0 = iy as f64 * large_side_m;
            // Assemble from the same per-tile sampling so children match
            // the large image pixel for pixel.
            let mut data = vec![0.0f32; side_px * side_px * 3];
            let mut children = Vec::with_capacity(spec.k * spec.k);
            for cy in (0..spec.k).rev() {
                for cx in 0..spec.k {
                    let tile = render_tile(
                        &tex,
                        spec,
                        x0 + cx as f64 * spec.tile_m,
                        y0 + cy as f64 * spec.tile_m,
                    );
                    let row0 = (spec.k - 1 - cy) * spec.tile_px;
                    for py in 0..spec.tile_px {
                        let src = py * spec.tile_px * 3;
                        let dst = ((row0 + py) * side_px + cx * spec.tile_px) * 3;
                        data[dst..dst + spec.tile_px * 3]
                            .copy_from_slice(&tile.data()[src..src + spec.tile_px * 3]);
                    }
                    children.push(small_tile_id(ix * spec.k + cx, iy * spec.k + cy));
                }
            }
            let img = Tensor::new(&[side_px, side_px, 3], data)?;
            let rel = format!("large/{}.png", large_tile_id(ix, iy));
            save_png(&out_dir.join(&rel), &img)?;
            let center = frame.to_gps(x0 + large_side_m / 2.0, y0 + large_side_m / 2.0)?;
            large_tiles.push(LargeRecord {
                id: large_tile_id(ix, iy),
                image: rel,
                lat: center.lat(),
                lon: center.lon(),
                children,
            });
        }
    }

    let mut videos = Vec::with_capacity(spec.videos);
    for vid in 0..spec.videos {
        let large_idx =
            (rng.random_range(0..spec.large_grid.0), rng.random_range(0..spec.large_grid.1));
        let traj = sample_trajectory(spec, &mut rng, large_idx);
        let video_id = format!("v_{vid:04}");
        let mut frames = Vec::with_capacity(spec.frames_per_video);
        for (fi, (&p, &h)) in traj.positions.iter().zip(&traj.headings).enumerate() {
            let brightness =
                1.0 + rng.random_range(-spec.brightness_jitter..=spec.brightness_jitter);
            let img = render_street(&tex, spec, p, h, brightness);
            let rel = format!("frames/{video_id}_f{fi:03}.png");
            save_png(&out_dir.join(&rel), &img)?;
            let gps = frame.to_gps(p.0, p.1)?;
            let tile_ix = (p.0 / spec.tile_m).floor() as usize;
            let tile_iy = (p.1 / spec.tile_m).floor() as usize;
            frames.push(FrameRecord {
                image: rel,
                lat: gps.lat(),
                lon: gps.lon(),
                tile_id: small_tile_id(tile_ix, tile_iy),
            });
        }
        videos.push(VideoRecord {
            id: video_id,
            large_id: large_tile_id(traj.large_idx.0, traj.large_idx.1),
            frames,
        });
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        tile_px: spec.tile_px,
        tile_m: spec.tile_m,
        k: spec.k,
        tiles,
        large_tiles,
        videos,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::manifest::load_png;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            large_grid: (2, 2),
            k: 3,
            tile_px: 16,
            tile_m: 40.0,
            videos: 2,
            frames_per_video: 4,
            ..Default::default()
        }
    }

    #[test]
    fn children_count_is_k_squared() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let m = generate_scene(&spec, 3, dir.path()).unwrap();
        assert_eq!(m.large_tiles.len(), 4);
        for lt in &m.large_tiles {
            assert_eq!(lt.children.len(), 9);
        }
        assert_eq!(m.tiles.len(), 36);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = tiny_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_scene(&spec, 7, d1.path()).unwrap();
        let m2 = generate_scene(&spec, 7, d2.path()).unwrap();
        assert_eq!(m1.videos[0].frames[0].lat, m2.videos[0].frames[0].lat);
        let a = std::fs::read(d1.path().join(&m1.tiles[5].image)).unwrap();
        let b = std::fs::read(d2.path().join(&m2.tiles[5].image)).unwrap();
        assert_eq!(a, b, "tile image bytes differ across identical seeds");
        let fa = std::fs::read(d1.path().join(&m1.videos[1].frames[2].image)).unwrap();
        let fb = std::fs::read(d2.path().join(&m2.videos[1].frames[2].image)).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn frames_lie_inside_their_truth_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let m = generate_scene(&spec, 11, dir.path()).unwrap();
        for v in &m.videos {
            for f in &v.frames {
                let tile = m.tiles.iter().find(|t| t.id == f.tile_id).expect("tile exists");
                let fp = gps_to_utm(GpsPoint::new(f.lat, f.lon).unwrap()).unwrap();
                let tp = gps_to_utm(GpsPoint::new(tile.lat, tile.lon).unwrap()).unwrap();
                assert!(
                    (fp.easting - tp.easting).abs() <= spec.tile_m / 2.0 + 0.01,
                    "frame {} east of tile {}",
                    f.image,
                    tile.id
                );
                assert!((fp.northing - tp.northing).abs() <= spec.tile_m / 2.0 + 0.01);
            }
        }
    }

    #[test]
    fn large_tile_image_tiles_into_its_children() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let m = generate_scene(&spec, 13, dir.path()).unwrap();
        let lt = &m.large_tiles[0];
        let large = load_png(&dir.path().join(&lt.image)).unwrap();
        let parts = crate::adapter::tile_large(&large, spec.tile_px).unwrap();
        assert_eq!(parts.len(), lt.children.len());
        for (part, child_id) in parts.iter().zip(&lt.children) {
            let child = m.tiles.iter().find(|t| &t.id == child_id).unwrap();
            let img = load_png(&dir.path().join(&child.image)).unwrap();
            assert_eq!(part.data(), img.data(), "child {} mismatch", child_id);
        }
    }

    #[test]
    fn videos_stay_within_one_large_tile() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let m = generate_scene(&spec, 17, dir.path()).unwrap();
        for v in &m.videos {
            let lt = m.large_tiles.iter().find(|l| l.id == v.large_id).unwrap();
            for f in &v.frames {
                assert!(
                    lt.children.contains(&f.tile_id),
                    "video {} frame tile {} outside large {}",
                    v.id,
                    f.tile_id,
                    lt.id
                );
            }
        }
    }
}
