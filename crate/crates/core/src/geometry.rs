//! Blockage geometry: building prisms, per-user blocking planes and
//! line-of-sight queries.
//!
//! Every building is a vertical prism over a convex counter-clockwise
//! footprint. Seen from a ground user, one or two side faces of the prism are
//! visible; the non-shared vertical edges and the top edges of those faces
//! are the *visible outer edges*. Each visible outer edge together with the
//! user spans a *blocking plane*. A point is inside the building's shadow
//! (NLoS) when its directed distance is non-positive for **all** planes of
//! that building; it is LoS w.r.t. the whole scene when every building has at
//! least one strictly positive plane.
//!
//! The plane test deliberately over-approximates the shadow: the wedge also
//! covers the region between the user and the building below the top-edge
//! plane. A segment/prism ray-cast is provided as the independent oracle; the
//! tested guarantee is that the plane test never reports LoS for a truly
//! blocked point, and that the two tests agree exactly in the far field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Directed distances within this band around zero are treated as
/// non-positive so classification is deterministic under float noise.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// A point (or free vector) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Point3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// 2-D footprint vertex in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("user at ({x}, {y}) lies inside the footprint of building {building}")]
    UserInsideBuilding { building: usize, x: f64, y: f64 },
    #[error("invalid building {building}: {reason}")]
    InvalidBuilding { building: usize, reason: String },
}

/// Vertical prism obstacle: convex counter-clockwise footprint plus height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingPrism {
    pub footprint: Vec<Point2>,
    pub height: f64,
}

impl BuildingPrism {
    pub fn new(footprint: Vec<Point2>, height: f64) -> Self {
        Self { footprint, height }
    }

    /// Axis-aligned box footprint helper used by scenarios and tests.
    pub fn axis_aligned(x0: f64, x1: f64, y0: f64, y1: f64, height: f64) -> Self {
        Self::new(
            vec![
                Point2::new(x0, y0),
                Point2::new(x1, y0),
                Point2::new(x1, y1),
                Point2::new(x0, y1),
            ],
            height,
        )
    }

    pub fn validate(&self, id: usize) -> Result<(), GeometryError> {
        let n = self.footprint.len();
        if n < 3 {
            return Err(GeometryError::InvalidBuilding {
                building: id,
                reason: format!("footprint has {n} vertices, need at least 3"),
            });
        }
        if !(self.height > 0.0) {
            return Err(GeometryError::InvalidBuilding {
                building: id,
                reason: format!("height {} must be positive", self.height),
            });
        }
        for i in 0..n {
            let a = self.footprint[i];
            let b = self.footprint[(i + 1) % n];
            let c = self.footprint[(i + 2) % n];
            let turn = b.sub(a).cross(c.sub(b));
            if turn <= 0.0 {
                return Err(GeometryError::InvalidBuilding {
                    building: id,
                    reason: "footprint must be strictly convex and counter-clockwise".into(),
                });
            }
        }
        Ok(())
    }

    /// Horizontal centroid of the footprint polygon.
    pub fn footprint_centroid(&self) -> Point2 {
        let n = self.footprint.len() as f64;
        let (sx, sy) = self
            .footprint
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point2::new(sx / n, sy / n)
    }

    /// Prism centroid (footprint centroid at half height).
    pub fn centroid(&self) -> Point3 {
        let c = self.footprint_centroid();
        Point3::new(c.x, c.y, self.height / 2.0)
    }

    /// True when the horizontal projection of `p` lies inside or on the
    /// boundary of the footprint.
    pub fn contains_horizontal(&self, x: f64, y: f64) -> bool {
        let n = self.footprint.len();
        for i in 0..n {
            let a = self.footprint[i];
            let b = self.footprint[(i + 1) % n];
            let cross = b.sub(a).cross(Point2::new(x - a.x, y - a.y));
            if cross < -BOUNDARY_TOL {
                return false;
            }
        }
        true
    }

    /// Farthest footprint vertex distance from a horizontal location.
    pub fn max_vertex_distance(&self, x: f64, y: f64) -> f64 {
        self.footprint
            .iter()
            .map(|v| ((v.x - x).powi(2) + (v.y - y).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }
}

/// One oriented blocking plane through the user and a visible outer edge.
///
/// Oriented so that the shadow reference point `s* = 2·centroid − user` has
/// negative directed distance; "all planes non-positive" then means NLoS.
#[derive(Debug, Clone, Copy)]
pub struct BlockingPlane {
    pub normal: Point3,
    /// `d_origin`: the plane is `normal·x = origin_offset`.
    pub origin_offset: f64,
    pub building_id: usize,
    pub edge_id: usize,
}

/// All blocking planes of one user, grouped by building.
///
/// Buildings whose plane list is empty (user at or above roof height) cast no
/// shadow for this user and are ignored by LoS queries.
#[derive(Debug, Clone)]
pub struct BlockagePlaneSet {
    pub user_id: usize,
    pub planes_by_building: Vec<Vec<BlockingPlane>>,
}

/// Signed distance of `p` to the plane along its unit normal.
pub fn directed_distance(plane: &BlockingPlane, p: Point3) -> f64 {
    plane.normal.dot(p) - plane.origin_offset
}

/// Builds the blocking planes cast by one building for one user.
///
/// Returns an empty list when the user is at or above the building height.
/// Errors when the user's horizontal projection lies inside the footprint.
pub fn build_blockage(
    user: Point3,
    building: &BuildingPrism,
    building_id: usize,
) -> Result<Vec<BlockingPlane>, GeometryError> {
    if building.contains_horizontal(user.x, user.y) {
        return Err(GeometryError::UserInsideBuilding {
            building: building_id,
            x: user.x,
            y: user.y,
        });
    }
    if user.z >= building.height {
        return Ok(Vec::new());
    }

    let n = building.footprint.len();
    let h = building.height;
    let user2 = Point2::new(user.x, user.y);

    // A side face is visible when its outward horizontal normal forms an
    // obtuse angle with the user-to-face vector; an edge-on view (dot = 0)
    // does not count.
    let mut visible = vec![false; n];
    for i in 0..n {
        let a = building.footprint[i];
        let b = building.footprint[(i + 1) % n];
        let d = b.sub(a);
        let outward = Point2::new(d.y, -d.x);
        let mid = Point2::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
        let to_face = mid.sub(user2);
        visible[i] = outward.x * to_face.x + outward.y * to_face.y < 0.0;
    }

    let centroid = building.centroid();
    let shadow_ref = centroid.scale(2.0).sub(user);

    let mut planes = Vec::new();
    let mut edge_id = 0;
    let mut push_plane = |l1: Point3, l2: Point3, planes: &mut Vec<BlockingPlane>| {
        let mut normal = l1.sub(user).cross(l2.sub(user));
        let len = normal.norm();
        debug_assert!(len > 1e-12, "degenerate blocking plane");
        normal = normal.scale(1.0 / len);
        let mut offset = normal.dot(user);
        if normal.dot(shadow_ref) - offset > 0.0 {
            normal = normal.scale(-1.0);
            offset = -offset;
        }
        planes.push(BlockingPlane {
            normal,
            origin_offset: offset,
            building_id,
            edge_id,
        });
        edge_id += 1;
    };

    for i in 0..n {
        if !visible[i] {
            continue;
        }
        let a = building.footprint[i];
        let b = building.footprint[(i + 1) % n];
        // Top edge of the visible face.
        push_plane(
            Point3::new(a.x, a.y, h),
            Point3::new(b.x, b.y, h),
            &mut planes,
        );
        // Vertical edges, skipping those shared with another visible face.
        let prev = (i + n - 1) % n;
        if !visible[prev] {
            push_plane(Point3::new(a.x, a.y, 0.0), Point3::new(a.x, a.y, h), &mut planes);
        }
        let next = (i + 1) % n;
        if !visible[next] {
            push_plane(Point3::new(b.x, b.y, 0.0), Point3::new(b.x, b.y, h), &mut planes);
        }
    }
    Ok(planes)
}

/// Builds the full plane set of one user over all buildings.
pub fn build_blockage_set(
    user_id: usize,
    user: Point3,
    buildings: &[BuildingPrism],
) -> Result<BlockagePlaneSet, GeometryError> {
    let mut planes_by_building = Vec::with_capacity(buildings.len());
    for (q, b) in buildings.iter().enumerate() {
        planes_by_building.push(build_blockage(user, b, q)?);
    }
    Ok(BlockagePlaneSet {
        user_id,
        planes_by_building,
    })
}

/// LoS test: every building (with a nonempty plane list) must have at least
/// one plane with strictly positive directed distance at `p`.
pub fn is_los(blockage: &BlockagePlaneSet, p: Point3) -> bool {
    for planes in &blockage.planes_by_building {
        if planes.is_empty() {
            continue;
        }
        let escaped = planes
            .iter()
            .any(|plane| directed_distance(plane, p) > BOUNDARY_TOL);
        if !escaped {
            return false;
        }
    }
    true
}

/// Independent oracle: does the open segment (user, p) pierce any prism?
///
/// Exact parametric clipping of the segment against each prism's half-planes
/// and height slab; blocked when a nonempty open parameter interval remains.
pub fn raycast_blocked(user: Point3, p: Point3, buildings: &[BuildingPrism]) -> bool {
    // a·x ≤ b along x(t) = user + t·d; returns false when the whole line is
    // outside the half-space.
    fn clip(interval: &mut (f64, f64), a_dot_d: f64, a_dot_user: f64, b: f64) -> bool {
        if a_dot_d.abs() < 1e-15 {
            a_dot_user <= b
        } else {
            let t = (b - a_dot_user) / a_dot_d;
            if a_dot_d > 0.0 {
                interval.1 = interval.1.min(t);
            } else {
                interval.0 = interval.0.max(t);
            }
            true
        }
    }

    let d = p.sub(user);
    'buildings: for building in buildings {
        let mut interval = (0.0_f64, 1.0_f64);
        let n = building.footprint.len();
        for i in 0..n {
            let a = building.footprint[i];
            let bpt = building.footprint[(i + 1) % n];
            let e = bpt.sub(a);
            // Outward normal (e.y, -e.x): inside is (n·x ≤ n·a).
            let nx = e.y;
            let ny = -e.x;
            if !clip(
                &mut interval,
                nx * d.x + ny * d.y,
                nx * user.x + ny * user.y,
                nx * a.x + ny * a.y,
            ) {
                continue 'buildings;
            }
        }
        if !clip(&mut interval, d.z, user.z, building.height) {
            continue; // z ≤ h
        }
        if !clip(&mut interval, -d.z, -user.z, 0.0) {
            continue; // z ≥ 0
        }
        if interval.0 < interval.1 {
            return true;
        }
    }
    false
}

/// One linearized LoS half-space `normal·x ≥ offset + margin` for the
/// position subproblem.
#[derive(Debug, Clone)]
pub struct LosHalfSpace {
    pub user_id: usize,
    pub building_id: usize,
    pub normal: Point3,
    /// Constraint is `normal·x ≥ offset + margin`; `offset` is the plane's
    /// origin offset, so the left slack equals directed distance − margin.
    pub offset: f64,
    pub margin: f64,
    /// False when every plane of the building was non-positive at the
    /// reference point (the least-violated plane is still emitted).
    pub feasible_at_ref: bool,
}

impl LosHalfSpace {
    pub fn slack(&self, x: Point3) -> f64 {
        self.normal.dot(x) - self.offset - self.margin
    }
}

/// For each (served user, building) pair emits the single plane with maximal
/// directed distance at `x_ref` as a half-space constraint. Pairs whose best
/// plane is non-positive are flagged infeasible-at-reference but still
/// emitted, pushing the position toward the LoS region.
pub fn active_los_constraints(
    blockage: &[BlockagePlaneSet],
    served_users: &[usize],
    x_ref: Point3,
    margin: f64,
) -> Vec<LosHalfSpace> {
    let mut out = Vec::new();
    for &k in served_users {
        let set = &blockage[k];
        for (q, planes) in set.planes_by_building.iter().enumerate() {
            if planes.is_empty() {
                continue;
            }
            let mut best = &planes[0];
            let mut best_dd = directed_distance(best, x_ref);
            for plane in &planes[1..] {
                let dd = directed_distance(plane, x_ref);
                if dd > best_dd {
                    best_dd = dd;
                    best = plane;
                }
            }
            out.push(LosHalfSpace {
                user_id: k,
                building_id: q,
                normal: best.normal,
                offset: best.origin_offset,
                margin,
                feasible_at_ref: best_dd > BOUNDARY_TOL,
            });
        }
    }
    out
}
