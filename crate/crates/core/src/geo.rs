//! Great-circle geometry on WGS-84 coordinates and an immutable KD-tree
//! spatial index.
//!
//! The index stores points as unit vectors on the sphere. Chord length is a
//! monotone function of great-circle distance, so the tree prunes in chord
//! space and every surviving candidate is re-checked with [`haversine_km`].
//! That final check uses the same predicate as a linear scan, which keeps
//! query results identical to brute force.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// IUGG mean Earth radius.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Kilometers per degree of latitude used by the local equirectangular
/// bounding-box conversion.
pub const KM_PER_DEG: f64 = 111.32;

const LEAF_SIZE: usize = 12;
const NONE: u32 = u32::MAX;
// Absolute slack (km) applied when converting chord bounds to distances.
const PRUNE_SLACK_KM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate (lat {lat}, lon {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("bounding box width must be positive, got {0}")]
    InvalidWidth(f64),
    #[error("spatial index is empty")]
    EmptyIndex,
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(GeoError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (slat, clat) = self.lat.to_radians().sin_cos();
        let (slon, clon) = self.lon.to_radians().sin_cos();
        [clat * clon, clat * slon, slat]
    }

    /// Point displaced by the given ground offsets using the local
    /// equirectangular approximation.
    pub fn offset_km(&self, north_km: f64, east_km: f64) -> GeoPoint {
        let lat = (self.lat + north_km / KM_PER_DEG).clamp(-90.0, 90.0);
        let cos = self.lat.to_radians().cos().max(1e-12);
        let mut lon = self.lon + east_km / (KM_PER_DEG * cos);
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint { lat, lon }
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2)
        + a.lat.to_radians().cos() * b.lat.to_radians().cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Square box of the given ground width, axis-aligned in lat/lon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub center: GeoPoint,
    pub width_km: f64,
}

impl BBox {
    pub fn new(center: GeoPoint, width_km: f64) -> Result<Self, GeoError> {
        if !(width_km > 0.0) || !width_km.is_finite() {
            return Err(GeoError::InvalidWidth(width_km));
        }
        Ok(Self { center, width_km })
    }

    /// Half extents in degrees `(dlat, dlon)`.
    pub fn half_extent_deg(&self) -> (f64, f64) {
        let half = self.width_km / 2.0;
        let dlat = half / KM_PER_DEG;
        let dlon = half / (KM_PER_DEG * self.center.lat.to_radians().cos().max(1e-12));
        (dlat, dlon)
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let (dlat, dlon) = self.half_extent_deg();
        (p.lat - self.center.lat).abs() <= dlat && (p.lon - self.center.lon).abs() <= dlon
    }

    /// Radius of a ball around the center that encloses the box.
    fn enclosing_radius_km(&self) -> f64 {
        let (dlat, dlon) = self.half_extent_deg();
        let mut r: f64 = 0.0;
        for (sa, so) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let corner = GeoPoint {
                lat: (self.center.lat + sa * dlat).clamp(-90.0, 90.0),
                lon: self.center.lon + so * dlon,
            };
            r = r.max(haversine_km(&self.center, &corner));
        }
        // Edge midpoints can lie farther than corners near the poles.
        r.max(self.width_km) * 1.05 + 1e-6
    }
}

#[derive(Debug, Clone)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    start: u32,
    end: u32,
    left: u32,
    right: u32,
}

/// A nearest-neighbor hit: the slot of the matched entry and its distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub slot: usize,
    pub distance_km: f64,
}

/// Immutable KD-tree over `(id, point)` entries. Query results are reported
/// as slots into the insertion order; [`SpatialIndex::id`] resolves them.
#[derive(Debug, Clone)]
pub struct SpatialIndex<I> {
    ids: Vec<I>,
    points: Vec<GeoPoint>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl<I: Ord> SpatialIndex<I> {
    pub fn build(entries: Vec<(I, GeoPoint)>) -> Self {
        let (ids, points): (Vec<I>, Vec<GeoPoint>) = entries.into_iter().unzip();
        let xyz: Vec<[f64; 3]> = points.iter().map(GeoPoint::unit_vector).collect();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&xyz, &mut order, 0, points.len(), &mut nodes);
        }
        Self {
            ids,
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn id(&self, slot: usize) -> &I {
        &self.ids[slot]
    }

    pub fn point(&self, slot: usize) -> &GeoPoint {
        &self.points[slot]
    }

    /// Closest entry; equidistant entries resolve to the smallest id.
    pub fn nearest(&self, q: &GeoPoint) -> Result<Hit, GeoError> {
        if self.is_empty() {
            return Err(GeoError::EmptyIndex);
        }
        let qv = q.unit_vector();
        let mut best: Option<Hit> = None;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if let Some(b) = best {
                if lower_bound_km(node, &qv) > b.distance_km + PRUNE_SLACK_KM {
                    continue;
                }
            }
            if node.left == NONE {
                for &slot in &self.order[node.start as usize..node.end as usize] {
                    let slot = slot as usize;
                    let d = haversine_km(q, &self.points[slot]);
                    let better = match best {
                        None => true,
                        Some(b) => match d.partial_cmp(&b.distance_km).unwrap_or(Ordering::Equal) {
                            Ordering::Less => true,
                            Ordering::Equal => self.ids[slot] < self.ids[b.slot],
                            Ordering::Greater => false,
                        },
                    };
                    if better {
                        best = Some(Hit {
                            slot,
                            distance_km: d,
                        });
                    }
                }
            } else {
                // Visit the nearer child first.
                let l = lower_bound_km(&self.nodes[node.left as usize], &qv);
                let r = lower_bound_km(&self.nodes[node.right as usize], &qv);
                if l <= r {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        Ok(best.expect("non-empty index yields a hit"))
    }

    /// Slots of all entries with `haversine_km(q, p) <= r_km`, ascending.
    pub fn within_radius(&self, q: &GeoPoint, r_km: f64) -> Result<Vec<usize>, GeoError> {
        if !(r_km > 0.0) {
            return Err(GeoError::NonPositiveRadius(r_km));
        }
        let mut out = Vec::new();
        self.ball_candidates(q, r_km, |slot| {
            if haversine_km(q, &self.points[slot]) <= r_km {
                out.push(slot);
            }
        });
        out.sort_unstable();
        Ok(out)
    }

    /// Slots of all entries inside the box (boundary inclusive), ascending.
    pub fn within_bbox(&self, bbox: &BBox) -> Vec<usize> {
        let mut out = Vec::new();
        self.ball_candidates(&bbox.center, bbox.enclosing_radius_km(), |slot| {
            if bbox.contains(&self.points[slot]) {
                out.push(slot);
            }
        });
        out.sort_unstable();
        out
    }

    fn ball_candidates(&self, q: &GeoPoint, r_km: f64, mut visit: impl FnMut(usize)) {
        if self.is_empty() {
            return;
        }
        let qv = q.unit_vector();
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if lower_bound_km(node, &qv) > r_km + PRUNE_SLACK_KM {
                continue;
            }
            if node.left == NONE {
                for &slot in &self.order[node.start as usize..node.end as usize] {
                    visit(slot as usize);
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
    }
}

fn lower_bound_km(node: &Node, q: &[f64; 3]) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let gap = if q[k] < node.lo[k] {
            node.lo[k] - q[k]
        } else if q[k] > node.hi[k] {
            q[k] - node.hi[k]
        } else {
            0.0
        };
        d2 += gap * gap;
    }
    let chord = d2.sqrt();
    2.0 * EARTH_RADIUS_KM * (chord / 2.0).min(1.0).asin()
}

fn build_node(
    xyz: &[[f64; 3]],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        let p = xyz[i as usize];
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let idx = nodes.len() as u32;
    nodes.push(Node {
        lo,
        hi,
        start: start as u32,
        end: end as u32,
        left: NONE,
        right: NONE,
    });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        xyz[a as usize][axis]
            .total_cmp(&xyz[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build_node(xyz, order, start, mid, nodes);
    let right = build_node(xyz, order, mid, end, nodes);
    nodes[idx as usize].left = left;
    nodes[idx as usize].right = right;
    idx
}
