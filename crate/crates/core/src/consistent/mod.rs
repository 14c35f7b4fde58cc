//! Temporally consistent frame-to-frame prediction.
//!
//! Per-frame retrieval gives each frame a set of candidate tiles; picking one
//! per frame so that consecutive picks stay close is a path-structured
//! generalized traveling salesman problem. This module holds the candidate
//! types and objective, an exact dynamic-programming oracle, nearest-neighbor
//! and dominant-sets baselines, and the autoregressive TransRetriever.

pub mod baselines;
pub mod benchmark;
pub mod dp;
pub mod transretriever;

use crate::error::{Error, Result};
use crate::geodata::{gps_to_utm, utm_to_gps, GpsPoint, Hemisphere, UtmPoint};
use crate::retrieval::{GalleryIndex, RetrievalResult};

/// One candidate tile for one frame.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CandidateToken {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub utm_x: f64,
    pub utm_y: f64,
    pub sim: f32,
}

/// Ordered per-frame candidate sets, all of equal size `t`.
///
/// Short sets pad by duplicating their last candidate with similarity -1 so
/// downstream models see a fixed width.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CandidateSequence {
    pub sets: Vec<Vec<CandidateToken>>,
    pub labels: Option<Vec<usize>>,
}

impl CandidateSequence {
    pub fn new(sets: Vec<Vec<CandidateToken>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument("candidate sequence needs >= 1 frame".into()));
        }
        let t = sets.iter().map(|s| s.len()).max().unwrap();
        if t == 0 {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        let mut sets = sets;
        for set in &mut sets {
            if set.is_empty() {
                return Err(Error::InvalidArgument("empty candidate set".into()));
            }
            while set.len() < t {
                let mut pad = set.last().unwrap().clone();
                pad.sim = -1.0;
                set.push(pad);
            }
            for tok in set.iter() {
                if !tok.utm_x.is_finite() || !tok.utm_y.is_finite() {
                    return Err(Error::InvalidArgument("non-finite candidate coordinate".into()));
                }
                if !(-1.0..=1.0).contains(&tok.sim) {
                    return Err(Error::InvalidArgument(format!(
                        "similarity {} outside [-1, 1]",
                        tok.sim
                    )));
                }
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != sets.len() {
                return Err(Error::InvalidArgument("one label per frame required".into()));
            }
            if labels.iter().zip(&sets).any(|(&l, s)| l >= s.len()) {
                return Err(Error::InvalidArgument("label out of candidate range".into()));
            }
        }
        Ok(Self { sets, labels })
    }

    pub fn frames(&self) -> usize {
        self.sets.len()
    }

    pub fn width(&self) -> usize {
        self.sets[0].len()
    }

    /// Centroid of all candidate UTM points.
    pub fn centroid(&self) -> (f64, f64) {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut count = 0usize;
        for set in &self.sets {
            for tok in set {
                cx += tok.utm_x;
                cy += tok.utm_y;
                count += 1;
            }
        }
        (cx / count as f64, cy / count as f64)
    }

    /// Model inputs: centroid-shifted UTM over a 100 m scale, raw similarity.
    pub fn normalized_inputs(&self) -> Vec<Vec<[f32; 3]>> {
        let (cx, cy) = self.centroid();
        self.sets
            .iter()
            .map(|set| {
                set.iter()
                    .map(|tok| {
                        [
                            ((tok.utm_x - cx) / 100.0) as f32,
                            ((tok.utm_y - cy) / 100.0) as f32,
                            tok.sim,
                        ]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Build candidate tokens from per-frame retrieval results.
///
/// GPS coordinates convert to UTM; a sequence that crosses UTM zones is
/// rejected so distances stay metrically comparable.
pub fn tokenize_candidates(
    frame_results: &[RetrievalResult],
    gallery: &GalleryIndex,
    labels: Option<Vec<usize>>,
) -> Result<CandidateSequence> {
    let mut zone: Option<(u8, Hemisphere)> = None;
    let sets = frame_results
        .iter()
        .map(|r| {
            r.ids
                .iter()
                .zip(&r.scores)
                .map(|(id, &sim)| {
                    let geo = gallery
                        .geo_of(id)
                        .ok_or_else(|| Error::InvalidArgument(format!("{} not in gallery", id)))?;
                    let gps = GpsPoint::new(geo.lat, geo.lon)?;
                    let utm = gps_to_utm(gps)?;
                    match zone {
                        None => zone = Some((utm.zone, utm.hemisphere)),
                        Some(z) => {
                            if z != (utm.zone, utm.hemisphere) {
                                return Err(Error::Geodesy(format!(
                                    "candidates span UTM zones {:?} and {:?}",
                                    z,
                                    (utm.zone, utm.hemisphere)
                                )));
                            }
                        }
                    }
                    Ok(CandidateToken {
                        id: id.clone(),
                        lat: geo.lat,
                        lon: geo.lon,
                        utm_x: utm.easting,
                        utm_y: utm.northing,
                        sim: sim.clamp(-1.0, 1.0),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CandidateSequence::new(sets, labels)
}

/// One chosen candidate per frame plus the DP objective of the choice.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryPrediction {
    pub choices: Vec<usize>,
    pub ids: Vec<String>,
    pub utm: Vec<(f64, f64)>,
    pub gps: Vec<(f64, f64)>,
    pub objective: f64,
}

impl TrajectoryPrediction {
    pub fn from_choices(seq: &CandidateSequence, choices: Vec<usize>, lambda: f64) -> Self {
        assert_eq!(choices.len(), seq.frames());
        let objective = dp::objective(seq, &choices, lambda);
        let ids = choices.iter().zip(&seq.sets).map(|(&j, s)| s[j].id.clone()).collect();
        let utm = choices.iter().zip(&seq.sets).map(|(&j, s)| (s[j].utm_x, s[j].utm_y)).collect();
        let gps = choices.iter().zip(&seq.sets).map(|(&j, s)| (s[j].lat, s[j].lon)).collect();
        Self { choices, ids, utm, gps, objective }
    }

    pub fn gps_points(&self) -> Result<Vec<GpsPoint>> {
        self.gps.iter().map(|&(lat, lon)| GpsPoint::new(lat, lon)).collect()
    }
}

/// Convert a chosen UTM point back to GPS (used when candidates come from an
/// interchange file with UTM only).
pub fn utm_choice_to_gps(zone: u8, hemisphere: Hemisphere, x: f64, y: f64) -> Result<GpsPoint> {
    utm_to_gps(UtmPoint { zone, hemisphere, easting: x, northing: y })
}

/// Per-frame candidate interchange entry (JSON schema: list per frame of
/// {id, lat, lon, utm_x, utm_y, sim}).
pub type InterchangeFile = Vec<Vec<CandidateToken>>;

pub fn write_candidates(path: &std::path::Path, seq: &CandidateSequence) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &seq.sets)?;
    Ok(())
}

pub fn read_candidates(path: &std::path::Path) -> Result<CandidateSequence> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let sets: InterchangeFile = serde_json::from_reader(file)?;
    CandidateSequence::new(sets, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Embedding;
    use crate::retrieval::GeoRecord;

    pub(crate) fn tok(id: &str, x: f64, y: f64, sim: f32) -> CandidateToken {
        CandidateToken { id: id.into(), lat: 0.0, lon: 0.0, utm_x: x, utm_y: y, sim }
    }

    #[test]
    fn single_candidate_normalizes_to_origin() {
        let seq =
            CandidateSequence::new(vec![vec![tok("a", 584000.0, 4507000.0, 0.8)]], None).unwrap();
        let inputs = seq.normalized_inputs();
        assert_eq!(inputs[0][0], [0.0, 0.0, 0.8]);
    }

    #[test]
    fn normalization_is_translation_invariant() {
        let base = vec![
            vec![tok("a", 1000.0, 2000.0, 0.5), tok("b", 1100.0, 2050.0, 0.4)],
            vec![tok("c", 1200.0, 2100.0, 0.6), tok("d", 900.0, 1900.0, 0.3)],
        ];
        let shifted: Vec<Vec<CandidateToken>> = base
            .iter()
            .map(|s| {
                s.iter()
                    .map(|t| {
                        let mut t = t.clone();
                        t.utm_x += 500.0;
                        t.utm_y -= 300.0;
                        t
                    })
                    .collect()
            })
            .collect();
        let a = CandidateSequence::new(base, None).unwrap().normalized_inputs();
        let b = CandidateSequence::new(shifted, None).unwrap().normalized_inputs();
        for (sa, sb) in a.iter().zip(&b) {
            for (ta, tb) in sa.iter().zip(sb) {
                for k in 0..3 {
                    assert!((ta[k] - tb[k]).abs() < 1e-4, "{:?} vs {:?}", ta, tb);
                }
            }
        }
    }

    #[test]
    fn two_frame_fixture_hand_computed() {
        // Four tokens, centroid (550, 1050); scale /100.
        let seq = CandidateSequence::new(
            vec![
                vec![tok("a", 500.0, 1000.0, 0.9), tok("b", 600.0, 1000.0, 0.5)],
                vec![tok("c", 500.0, 1100.0, 0.7), tok("d", 600.0, 1100.0, 0.2)],
            ],
            None,
        )
        .unwrap();
        let inputs = seq.normalized_inputs();
        assert_eq!(inputs[0][0], [-0.5, -0.5, 0.9]);
        assert_eq!(inputs[0][1], [0.5, -0.5, 0.5]);
        assert_eq!(inputs[1][0], [-0.5, 0.5, 0.7]);
        assert_eq!(inputs[1][1], [0.5, 0.5, 0.2]);
    }

    #[test]
    fn ragged_sets_pad_with_sim_minus_one() {
        let seq = CandidateSequence::new(
            vec![
                vec![tok("a", 0.0, 0.0, 0.9), tok("b", 10.0, 0.0, 0.5)],
                vec![tok("c", 0.0, 10.0, 0.7)],
            ],
            None,
        )
        .unwrap();
        assert_eq!(seq.width(), 2);
        assert_eq!(seq.sets[1][1].id, "c");
        assert_eq!(seq.sets[1][1].sim, -1.0);
    }

    #[test]
    fn labels_are_validated() {
        let sets = vec![vec![tok("a", 0.0, 0.0, 0.9), tok("b", 1.0, 0.0, 0.1)]];
        assert!(CandidateSequence::new(sets.clone(), Some(vec![2])).is_err());
        assert!(CandidateSequence::new(sets.clone(), Some(vec![0, 1])).is_err());
        assert!(CandidateSequence::new(sets, Some(vec![1])).is_ok());
    }

    #[test]
    fn tokenize_rejects_mixed_zones() {
        // Two tiles on opposite sides of a zone boundary (lon 5.9 vs 6.1).
        let embeddings = vec![
            Embedding { id: "a".into(), vec: vec![1.0, 0.0] },
            Embedding { id: "b".into(), vec: vec![0.0, 1.0] },
        ];
        let geo = vec![
            GeoRecord { lat: 45.0, lon: 5.9, children: vec![] },
            GeoRecord { lat: 45.0, lon: 6.1, children: vec![] },
        ];
        let g = GalleryIndex::build(&embeddings, geo).unwrap();
        let results = vec![RetrievalResult {
            query_id: "q".into(),
            ids: vec!["a".into(), "b".into()],
            scores: vec![0.9, 0.8],
        }];
        assert!(matches!(tokenize_candidates(&results, &g, None), Err(Error::Geodesy(_))));
    }

    #[test]
    fn interchange_round_trip() {
        let seq = CandidateSequence::new(
            vec![
                vec![tok("a", 500.0, 1000.0, 0.9), tok("b", 600.0, 1000.0, 0.5)],
                vec![tok("c", 500.0, 1100.0, 0.7), tok("d", 600.0, 1100.0, 0.2)],
            ],
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cands.json");
        write_candidates(&path, &seq).unwrap();
        let loaded = read_candidates(&path).unwrap();
        assert_eq!(loaded.frames(), 2);
        assert_eq!(loaded.sets[1][0].id, "c");
        assert_eq!(loaded.sets[0][0].utm_x, 500.0);
    }
}
