//! GeoJSON trajectory export.
//!
//! Output is a FeatureCollection with one Point feature per frame (carrying
//! the frame index, chosen candidate id and similarity) plus a LineString of
//! the whole trajectory when there are at least two frames. Coordinates are
//! [lon, lat] per the GeoJSON convention.

use std::path::Path;

use serde_json::{json, Value};

use crate::consistent::TrajectoryPrediction;
use crate::error::{Error, Result};

pub fn trajectory_geojson(pred: &TrajectoryPrediction, method: &str) -> Value {
    let mut features: Vec<Value> = Vec::with_capacity(pred.gps.len() + 1);
    if pred.gps.len() >= 2 {
        let coords: Vec<Value> =
            pred.gps.iter().map(|&(lat, lon)| json!([lon, lat])).collect();
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "LineString", "coordinates": coords },
            "properties": { "method": method, "objective": pred.objective },
        }));
    }
    for (i, &(lat, lon)) in pred.gps.iter().enumerate() {
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Point", "coordinates": [lon, lat] },
            "properties": {
                "frame": i,
                "id": pred.ids[i],
                "choice": pred.choices[i],
                "method": method,
            },
        }));
    }
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn export_trajectory(pred: &TrajectoryPrediction, method: &str, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &trajectory_geojson(pred, method))?;
    Ok(())
}

/// Read back the LineString (or single Point) coordinates as (lat, lon).
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, f64)>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let v: Value = serde_json::from_reader(file)?;
    let features = v["features"]
        .as_array()
        .ok_or_else(|| Error::Format("not a FeatureCollection".into()))?;
    for f in features {
        if f["geometry"]["type"] == "LineString" {
            let coords = f["geometry"]["coordinates"]
                .as_array()
                .ok_or_else(|| Error::Format("bad LineString".into()))?;
            return coords
                .iter()
                .map(|c| {
                    let lon = c[0].as_f64().ok_or_else(|| Error::Format("bad coord".into()))?;
                    let lat = c[1].as_f64().ok_or_else(|| Error::Format("bad coord".into()))?;
                    Ok((lat, lon))
                })
                .collect();
        }
    }
    // Single-frame export: collect the points.
    features
        .iter()
        .filter(|f| f["geometry"]["type"] == "Point")
        .map(|f| {
            let c = &f["geometry"]["coordinates"];
            let lon = c[0].as_f64().ok_or_else(|| Error::Format("bad coord".into()))?;
            let lat = c[1].as_f64().ok_or_else(|| Error::Format("bad coord".into()))?;
            Ok((lat, lon))
        })
        .collect()
}
