//! Spherical geodesy and polygon geofences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPoint;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `a` towards `b`, degrees clockwise from north in [0, 360).
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlon = (b.lon() - a.lon()).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Point a fraction `f` of the way along the great circle from `a` to `b`.
pub fn interpolate(a: GeoPoint, b: GeoPoint, f: f64) -> GeoPoint {
    let f = f.clamp(0.0, 1.0);
    let delta = haversine_distance(a, b) / EARTH_RADIUS_M;
    if delta < 1e-12 {
        return a;
    }
    let to_vec = |p: GeoPoint| {
        let (lat, lon) = (p.lat().to_radians(), p.lon().to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (va, vb) = (to_vec(a), to_vec(b));
    let wa = ((1.0 - f) * delta).sin() / delta.sin();
    let wb = (f * delta).sin() / delta.sin();
    let v = [
        wa * va[0] + wb * vb[0],
        wa * va[1] + wb * vb[1],
        wa * va[2] + wb * vb[2],
    ];
    let lat = v[2].atan2((v[0] * v[0] + v[1] * v[1]).sqrt()).to_degrees();
    let lon = v[1].atan2(v[0]).to_degrees();
    GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0)).expect("interpolated point in range")
}

/// Destination reached by travelling `distance_m` from `origin` on `bearing_deg`.
pub fn destination(origin: GeoPoint, bearing_deg: f64, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let lat1 = origin.lat().to_radians();
    let lon1 = origin.lon().to_radians();
    let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos()).asin();
    let lon2 = lon1
        + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * lat2.sin());
    let lon = (lon2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint::new(lat2.to_degrees(), lon).expect("destination in range")
}

/// Sum of great-circle distances between consecutive fixes.
pub fn trip_length<I>(fixes: I) -> f64
where
    I: IntoIterator<Item = GeoPoint>,
{
    let mut iter = fixes.into_iter();
    let Some(mut prev) = iter.next() else {
        return 0.0;
    };
    let mut total = 0.0;
    for p in iter {
        total += haversine_distance(prev, p);
        prev = p;
    }
    total
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FenceError {
    #[error("ring {ring} has fewer than 3 distinct vertices")]
    TooFewVertices { ring: usize },
    #[error("ring {ring} repeats vertex {index} consecutively")]
    ConsecutiveDuplicate { ring: usize, index: usize },
    #[error("ring {ring} intersects itself between edges {a} and {b}")]
    SelfIntersection { ring: usize, a: usize, b: usize },
    #[error("fence has no exterior ring")]
    MissingExterior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BoundingBox {
    min_lat: f64,
    max_lat: f64,
    min_lon: f64,
    max_lon: f64,
}

impl BoundingBox {
    fn of(ring: &[GeoPoint]) -> Self {
        let mut b = BoundingBox {
            min_lat: f64::INFINITY,
            max_lat: f64::NEG_INFINITY,
            min_lon: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
        };
        for p in ring {
            b.min_lat = b.min_lat.min(p.lat());
            b.max_lat = b.max_lat.max(p.lat());
            b.min_lon = b.min_lon.min(p.lon());
            b.max_lon = b.max_lon.max(p.lon());
        }
        b
    }

    fn contains(&self, p: GeoPoint) -> bool {
        p.lat() >= self.min_lat
            && p.lat() <= self.max_lat
            && p.lon() >= self.min_lon
            && p.lon() <= self.max_lon
    }
}

/// Polygon with an exterior ring and optional holes, in planar lat/lon.
///
/// Rings are implicitly closed. A repeated closing vertex is dropped on
/// construction. The boundary counts as inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeoFenceSpec", into = "GeoFenceSpec")]
pub struct GeoFence {
    rings: Vec<Vec<GeoPoint>>,
    bbox: BoundingBox,
}

/// Unvalidated fence as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoFenceSpec {
    pub rings: Vec<Vec<GeoPoint>>,
}

impl TryFrom<GeoFenceSpec> for GeoFence {
    type Error = FenceError;

    fn try_from(spec: GeoFenceSpec) -> Result<Self, Self::Error> {
        let mut rings = spec.rings.into_iter();
        let exterior = rings.next().ok_or(FenceError::MissingExterior)?;
        GeoFence::new(exterior, rings.collect())
    }
}

impl From<GeoFence> for GeoFenceSpec {
    fn from(f: GeoFence) -> Self {
        GeoFenceSpec { rings: f.rings }
    }
}

impl GeoFence {
    pub fn new(exterior: Vec<GeoPoint>, holes: Vec<Vec<GeoPoint>>) -> Result<Self, FenceError> {
        let mut rings = Vec::with_capacity(1 + holes.len());
        for (i, mut ring) in std::iter::once(exterior).chain(holes).enumerate() {
            if ring.len() > 1 && ring.first() == ring.last() {
                ring.pop();
            }
            validate_ring(&ring, i)?;
            rings.push(ring);
        }
        let bbox = BoundingBox::of(&rings[0]);
        Ok(Self { rings, bbox })
    }

    /// Axis-aligned rectangle from two opposite corners.
    pub fn rectangle(a: GeoPoint, b: GeoPoint) -> Result<Self, FenceError> {
        let (lat0, lat1) = (a.lat().min(b.lat()), a.lat().max(b.lat()));
        let (lon0, lon1) = (a.lon().min(b.lon()), a.lon().max(b.lon()));
        let p = |lat, lon| GeoPoint::new(lat, lon).expect("corner in range");
        GeoFence::new(
            vec![p(lat0, lon0), p(lat0, lon1), p(lat1, lon1), p(lat1, lon0)],
            vec![],
        )
    }

    pub fn exterior(&self) -> &[GeoPoint] {
        &self.rings[0]
    }

    pub fn holes(&self) -> &[Vec<GeoPoint>] {
        &self.rings[1..]
    }

    pub fn rings(&self) -> &[Vec<GeoPoint>] {
        &self.rings
    }

    /// Planar area in square degrees (shoelace on the exterior minus holes).
    pub fn area_deg2(&self) -> f64 {
        let ring_area = |r: &[GeoPoint]| {
            let n = r.len();
            (0..n)
                .map(|i| {
                    let (a, b) = (r[i], r[(i + 1) % n]);
                    a.lon() * b.lat() - b.lon() * a.lat()
                })
                .sum::<f64>()
                .abs()
                / 2.0
        };
        ring_area(&self.rings[0]) - self.holes().iter().map(|h| ring_area(h)).sum::<f64>()
    }
}

fn validate_ring(ring: &[GeoPoint], ring_idx: usize) -> Result<(), FenceError> {
    let n = ring.len();
    for i in 0..n {
        if n > 1 && ring[i] == ring[(i + 1) % n] {
            return Err(FenceError::ConsecutiveDuplicate {
                ring: ring_idx,
                index: i,
            });
        }
    }
    let mut distinct: Vec<(u64, u64)> = ring
        .iter()
        .map(|p| (p.lat().to_bits(), p.lon().to_bits()))
        .collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(FenceError::TooFewVertices { ring: ring_idx });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Err(FenceError::SelfIntersection {
                    ring: ring_idx,
                    a: i,
                    b: j,
                });
            }
        }
    }
    Ok(())
}

fn cross(o: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    (a.lon() - o.lon()) * (b.lat() - o.lat()) - (a.lat() - o.lat()) * (b.lon() - o.lon())
}

fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    cross(a, b, p) == 0.0
        && p.lon() >= a.lon().min(b.lon())
        && p.lon() <= a.lon().max(b.lon())
        && p.lat() >= a.lat().min(b.lat())
        && p.lat() <= a.lat().max(b.lat())
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

enum RingPosition {
    Inside,
    Boundary,
    Outside,
}

/// Winding-number classification of `p` against a closed ring.
fn classify(p: GeoPoint, ring: &[GeoPoint]) -> RingPosition {
    let n = ring.len();
    let mut winding = 0i32;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if on_segment(p, a, b) {
            return RingPosition::Boundary;
        }
        if a.lat() <= p.lat() {
            if b.lat() > p.lat() && cross(a, b, p) > 0.0 {
                winding += 1;
            }
        } else if b.lat() <= p.lat() && cross(a, b, p) < 0.0 {
            winding -= 1;
        }
    }
    if winding != 0 {
        RingPosition::Inside
    } else {
        RingPosition::Outside
    }
}

/// True iff `p` is inside the exterior ring and not strictly inside any hole.
/// Points on any ring boundary are inside.
pub fn point_in_fence(p: GeoPoint, fence: &GeoFence) -> bool {
    if !fence.bbox.contains(p) {
        return false;
    }
    match classify(p, fence.exterior()) {
        RingPosition::Outside => return false,
        RingPosition::Boundary => return true,
        RingPosition::Inside => {}
    }
    fence
        .holes()
        .iter()
        .all(|hole| !matches!(classify(p, hole), RingPosition::Inside))
}
