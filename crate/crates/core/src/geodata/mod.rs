//! Geodesy, dataset ingestion, the synthetic scene generator, and trajectory
//! export.
//!
//! GPS/UTM conversion uses the classic USGS transverse Mercator series on the
//! WGS-84 ellipsoid, accurate to about a millimeter inside a zone.

pub mod export;
pub mod manifest;
pub mod synthetic;

use crate::error::{Error, Result};

const WGS84_A: f64 = 6378137.0;
const WGS84_F: f64 = 1.0 / 298.257223563;
const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500000.0;
const FALSE_NORTHING_SOUTH: f64 = 10000000.0;

/// Mean Earth radius for great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6371008.8;

/// 0.05 miles, the frame-level correctness radius.
pub const FRAME_MATCH_THRESHOLD_M: f64 = 80.4672;

/// Geographic point in degrees, validated on construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpsPoint {
    lat: f64,
    lon: f64,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lat.is_finite() {
            return Err(Error::Geodesy(format!("latitude {} out of range", lat)));
        }
        if !(-180.0..180.0).contains(&lon) || !lon.is_finite() {
            return Err(Error::Geodesy(format!("longitude {} out of range", lon)));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Hemisphere {
    North,
    South,
}

/// UTM coordinates in meters, tied to a zone.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtmPoint {
    pub zone: u8,
    pub hemisphere: Hemisphere,
    pub easting: f64,
    pub northing: f64,
}

fn zone_for_lon(lon: f64) -> u8 {
    let z = ((lon + 180.0) / 6.0).floor() as i32 + 1;
    z.clamp(1, 60) as u8
}

fn central_meridian_deg(zone: u8) -> f64 {
    zone as f64 * 6.0 - 183.0
}

/// GPS to UTM on the WGS-84 ellipsoid. Valid for |lat| <= 84 degrees.
pub fn gps_to_utm(p: GpsPoint) -> Result<UtmPoint> {
    if p.lat.abs() > 84.0 {
        return Err(Error::Geodesy(format!("latitude {} outside UTM validity", p.lat)));
    }
    let zone = zone_for_lon(p.lon);
    let lat = p.lat.to_radians();
    let dlon = (p.lon - central_meridian_deg(zone)).to_radians();

    let e2 = WGS84_F * (2.0 - WGS84_F);
    let ep2 = e2 / (1.0 - e2);
    let (sin_lat, cos_lat) = (lat.sin(), lat.cos());

    let n = WGS84_A / (1.0 - e2 * sin_lat * sin_lat).sqrt();
    let t = (lat.tan()) * (lat.tan());
    let c = ep2 * cos_lat * cos_lat;
    let a = cos_lat * dlon;

    let m = meridian_arc(lat, e2);

    let a2 = a * a;
    let a3 = a2 * a;
    let a4 = a3 * a;
    let a5 = a4 * a;
    let a6 = a5 * a;
    let easting = FALSE_EASTING
        + K0 * n
            * (a + (1.0 - t + c) * a3 / 6.0
                + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * a5 / 120.0);
    let mut northing = K0
        * (m + n * lat.tan()
            * (a2 / 2.0
                + (5.0 - t + 9.0 * c + 4.0 * c * c) * a4 / 24.0
                + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * a6 / 720.0));
    let hemisphere = if p.lat < 0.0 {
        northing += FALSE_NORTHING_SOUTH;
        Hemisphere::South
    } else {
        Hemisphere::North
    };
    Ok(UtmPoint { zone, hemisphere, easting, northing })
}

/// UTM back to GPS.
pub fn utm_to_gps(u: UtmPoint) -> Result<GpsPoint> {
    if u.zone < 1 || u.zone > 60 {
        return Err(Error::Geodesy(format!("zone {} out of range", u.zone)));
    }
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let ep2 = e2 / (1.0 - e2);
    let x = u.easting - FALSE_EASTING;
    let y = match u.hemisphere {
        Hemisphere::North => u.northing,
        Hemisphere::South => u.northing - FALSE_NORTHING_SOUTH,
    };

    let m = y / K0;
    let mu = m
        / (WGS84_A
            * (1.0 - e2 / 4.0 - 3.0 * e2 * e2 / 64.0 - 5.0 * e2 * e2 * e2 / 256.0));
    let sqrt1me2 = (1.0 - e2).sqrt();
    let e1 = (1.0 - sqrt1me2) / (1.0 + sqrt1me2);
    let e1_2 = e1 * e1;
    let e1_3 = e1_2 * e1;
    let e1_4 = e1_3 * e1;
    let phi1 = mu
        + (3.0 * e1 / 2.0 - 27.0 * e1_3 / 32.0) * (2.0 * mu).sin()
        + (21.0 * e1_2 / 16.0 - 55.0 * e1_4 / 32.0) * (4.0 * mu).sin()
        + (151.0 * e1_3 / 96.0) * (6.0 * mu).sin()
        + (1097.0 * e1_4 / 512.0) * (8.0 * mu).sin();

    let sin1 = phi1.sin();
    let cos1 = phi1.cos();
    let c1 = ep2 * cos1 * cos1;
    let t1 = phi1.tan() * phi1.tan();
    let n1 = WGS84_A / (1.0 - e2 * sin1 * sin1).sqrt();
    let r1 = WGS84_A * (1.0 - e2) / (1.0 - e2 * sin1 * sin1).powf(1.5);
    let d = x / (n1 * K0);
    let d2 = d * d;
    let d3 = d2 * d;
    let d4 = d3 * d;
    let d5 = d4 * d;
    let d6 = d5 * d;

    let lat = phi1
        - (n1 * phi1.tan() / r1)
            * (d2 / 2.0
                - (5.0 + 3.0 * t1 + 10.0 * c1 - 4.0 * c1 * c1 - 9.0 * ep2) * d4 / 24.0
                + (61.0 + 90.0 * t1 + 298.0 * c1 + 45.0 * t1 * t1 - 252.0 * ep2 - 3.0 * c1 * c1)
                    * d6
                    / 720.0);
    let lon = central_meridian_deg(u.zone).to_radians()
        + (d - (1.0 + 2.0 * t1 + c1) * d3 / 6.0
            + (5.0 - 2.0 * c1 + 28.0 * t1 - 3.0 * c1 * c1 + 8.0 * ep2 + 24.0 * t1 * t1) * d5
                / 120.0)
            / cos1;
    GpsPoint::new(lat.to_degrees(), lon.to_degrees())
}

fn meridian_arc(lat: f64, e2: f64) -> f64 {
    let e4 = e2 * e2;
    let e6 = e4 * e2;
    WGS84_A
        * ((1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0) * lat
            - (3.0 * e2 / 8.0 + 3.0 * e4 / 32.0 + 45.0 * e6 / 1024.0) * (2.0 * lat).sin()
            + (15.0 * e4 / 256.0 + 45.0 * e6 / 1024.0) * (4.0 * lat).sin()
            - (35.0 * e6 / 3072.0) * (6.0 * lat).sin())
}

/// Great-circle distance on the mean-radius sphere.
pub fn haversine_m(a: GpsPoint, b: GpsPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}
