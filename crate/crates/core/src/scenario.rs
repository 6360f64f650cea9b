//! Scenario definition, file schema, seeded generation and initialization.
//!
//! A scenario file is a single JSON document (schema version 1) holding the
//! area, buildings, users, fleet size, capacities, propagation parameters,
//! the transmit-power budget and the solver configuration. Gains are stored
//! in dB and powers carry a unit tag (watts or dBm); both convert to linear
//! once at load. Saving re-emits the stored values verbatim, so
//! save → load → save is byte-identical.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{db_to_linear, dbm_to_watts, PropagationParams};
use crate::geometry::{build_blockage_set, BuildingPrism, GeometryError, Point3};
use crate::rsma::{Association, NetworkState};
use crate::solver::{equal_split_power, gain_table, AreaBounds, ProblemSetup, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("scenario generation failed: {0}")]
    GenerationFailure(String),
    #[error("initialization infeasible: {0}")]
    InfeasibleInit(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Power with an explicit unit tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PowerValue {
    Watts(f64),
    Dbm(f64),
}

impl PowerValue {
    pub fn watts(self) -> f64 {
        match self {
            PowerValue::Watts(w) => w,
            PowerValue::Dbm(d) => dbm_to_watts(d),
        }
    }
}

/// Propagation parameters as stored on disk: reference gains in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropagationSpec {
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    pub beta_los_db: f64,
    pub beta_nlos_db: f64,
    pub noise_power: PowerValue,
}

impl Default for PropagationSpec {
    fn default() -> Self {
        Self {
            alpha_los: 2.0,
            alpha_nlos: 3.3,
            beta_los_db: -46.43,
            beta_nlos_db: -56.43,
            noise_power: PowerValue::Dbm(-107.0),
        }
    }
}

impl PropagationSpec {
    pub fn to_linear(self) -> PropagationParams {
        PropagationParams {
            alpha_los: self.alpha_los,
            alpha_nlos: self.alpha_nlos,
            beta_los: db_to_linear(self.beta_los_db),
            beta_nlos: db_to_linear(self.beta_nlos_db),
            noise_power: self.noise_power.watts(),
        }
    }
}

/// Parameters of the seeded scenario generator: axis-aligned rectangular
/// buildings, tall on the left half and low on the right, users uniform over
/// the free space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GenSpec {
    pub area: AreaBounds,
    pub user_count: usize,
    pub uav_count: usize,
    pub capacity_per_uav: usize,
    pub buildings_per_half: usize,
    /// Height range (m) of the left-half buildings.
    pub tall_height_range: (f64, f64),
    /// Height range (m) of the right-half buildings.
    pub low_height_range: (f64, f64),
    pub footprint_side_range: (f64, f64),
    /// Minimum gap between footprints and to the area edge (m).
    pub building_gap: f64,
    /// Minimum horizontal distance between a user and any footprint (m).
    pub user_clearance: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            area: AreaBounds { x_min: 0.0, x_max: 800.0, y_min: 0.0, y_max: 800.0 },
            user_count: 12,
            uav_count: 3,
            capacity_per_uav: 6,
            buildings_per_half: 9,
            tall_height_range: (60.0, 95.0),
            low_height_range: (15.0, 40.0),
            footprint_side_range: (30.0, 80.0),
            building_gap: 10.0,
            user_clearance: 2.0,
        }
    }
}

/// A complete simulation scenario in its on-disk representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Scenario {
    pub schema_version: u32,
    pub area_bounds: AreaBounds,
    pub buildings: Vec<BuildingPrism>,
    pub users: Vec<Point3>,
    pub uav_count: usize,
    pub capacities: Vec<usize>,
    pub propagation: PropagationSpec,
    pub p_max: PowerValue,
    pub solver: SolverConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generator: Option<GenSpec>,
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.uav_count < 1 {
            return Err(ScenarioError::Invalid("need at least one UAV".into()));
        }
        if self.capacities.len() != self.uav_count {
            return Err(ScenarioError::Invalid(format!(
                "capacities has {} entries for {} UAVs",
                self.capacities.len(),
                self.uav_count
            )));
        }
        let total_capacity: usize = self.capacities.iter().sum();
        if total_capacity < self.users.len() {
            return Err(ScenarioError::Invalid(format!(
                "total capacity {total_capacity} cannot host {} users",
                self.users.len()
            )));
        }
        for (q, b) in self.buildings.iter().enumerate() {
            b.validate(q)?;
        }
        let a = self.area_bounds;
        for (k, u) in self.users.iter().enumerate() {
            if !u.is_finite() || u.x < a.x_min || u.x > a.x_max || u.y < a.y_min || u.y > a.y_max {
                return Err(ScenarioError::Invalid(format!(
                    "user {k} lies outside the area bounds"
                )));
            }
            for (q, b) in self.buildings.iter().enumerate() {
                if b.contains_horizontal(u.x, u.y) {
                    return Err(ScenarioError::Invalid(format!(
                        "user {k} lies inside the footprint of building {q}"
                    )));
                }
            }
        }
        self.propagation
            .to_linear()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(self.p_max.watts() > 0.0) {
            return Err(ScenarioError::Invalid("p_max must be positive".into()));
        }
        Ok(())
    }

    /// Builds the optimizer's view of the world (blockage sets included).
    pub fn setup(&self) -> Result<ProblemSetup, ScenarioError> {
        self.validate()?;
        let blockage = self
            .users
            .iter()
            .enumerate()
            .map(|(k, &u)| build_blockage_set(k, u, &self.buildings))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProblemSetup {
            users: self.users.clone(),
            buildings: self.buildings.clone(),
            blockage,
            params: self.propagation.to_linear(),
            p_max: self.p_max.watts(),
            area: self.area_bounds,
            capacities: self.capacities.clone(),
        })
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if scenario.schema_version != SCHEMA_VERSION {
        return Err(ScenarioError::SchemaVersionMismatch {
            found: scenario.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    scenario.validate()?;
    Ok(scenario)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let mut text = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn overlaps(a: &(f64, f64, f64, f64), b: &(f64, f64, f64, f64), gap: f64) -> bool {
    a.0 - gap < b.1 && b.0 - gap < a.1 && a.2 - gap < b.3 && b.2 - gap < a.3
}

/// Deterministically generates a scenario from the spec and seed.
pub fn generate_scenario(spec: &GenSpec, seed: u64) -> Result<Scenario, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = spec.area;
    let x_mid = 0.5 * (a.x_min + a.x_max);
    let gap = spec.building_gap;

    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut heights: Vec<f64> = Vec::new();
    for half in 0..2 {
        let (x_lo, x_hi, height_range) = if half == 0 {
            (a.x_min + gap, x_mid - gap, spec.tall_height_range)
        } else {
            (x_mid + gap, a.x_max - gap, spec.low_height_range)
        };
        for i in 0..spec.buildings_per_half {
            let mut placed = false;
            for _ in 0..1000 {
                let w = rng.gen_range(spec.footprint_side_range.0..=spec.footprint_side_range.1);
                let d = rng.gen_range(spec.footprint_side_range.0..=spec.footprint_side_range.1);
                let x0 = rng.gen_range(x_lo..(x_hi - w));
                let y0 = rng.gen_range((a.y_min + gap)..(a.y_max - gap - d));
                let candidate = (x0, x0 + w, y0, y0 + d);
                if boxes.iter().all(|b| !overlaps(b, &candidate, gap)) {
                    boxes.push(candidate);
                    heights.push(rng.gen_range(height_range.0..=height_range.1));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(ScenarioError::GenerationFailure(format!(
                    "could not place building {i} in half {half} after 1000 attempts"
                )));
            }
        }
    }
    let buildings: Vec<BuildingPrism> = boxes
        .iter()
        .zip(&heights)
        .map(|(&(x0, x1, y0, y1), &h)| BuildingPrism::axis_aligned(x0, x1, y0, y1, h))
        .collect();

    let mut users = Vec::with_capacity(spec.user_count);
    for k in 0..spec.user_count {
        let mut placed = false;
        for _ in 0..1000 {
            let x = rng.gen_range(a.x_min..a.x_max);
            let y = rng.gen_range(a.y_min..a.y_max);
            let clear = buildings.iter().all(|b| {
                !b.contains_horizontal(x, y)
                    && !b.contains_horizontal(x + spec.user_clearance, y)
                    && !b.contains_horizontal(x - spec.user_clearance, y)
                    && !b.contains_horizontal(x, y + spec.user_clearance)
                    && !b.contains_horizontal(x, y - spec.user_clearance)
            });
            if clear {
                users.push(Point3::new(x, y, 0.0));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(ScenarioError::GenerationFailure(format!(
                "could not place user {k} after 1000 attempts"
            )));
        }
    }

    let scenario = Scenario {
        schema_version: SCHEMA_VERSION,
        area_bounds: a,
        buildings,
        users,
        uav_count: spec.uav_count,
        capacities: vec![spec.capacity_per_uav; spec.uav_count],
        propagation: PropagationSpec::default(),
        p_max: PowerValue::Watts(1.0),
        solver: SolverConfig::default(),
        seed,
        generator: Some(spec.clone()),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Seed of the bundled regression-anchor scenario.
pub const BUNDLED_SEED: u64 = 18;

/// Seeds used by the bundled baseline comparison.
pub const BUNDLED_COMPARE_SEEDS: [u64; 5] = [2, 12, 18, 32, 37];

/// The regression-anchor scenario: 3 UAVs, 12 users, 800×800 m.
pub fn bundled_default() -> Scenario {
    generate_scenario(&GenSpec::default(), BUNDLED_SEED).expect("bundled scenario generates")
}

/// Bundled variants with a different user count (9 and 18 ship as files).
pub fn bundled_variant(user_count: usize) -> Scenario {
    let spec = GenSpec { user_count, ..GenSpec::default() };
    generate_scenario(&spec, BUNDLED_SEED).expect("bundled variant generates")
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Seeded k-means on horizontal coordinates; returns cluster assignment per
/// user. Empty clusters steal the farthest member of the largest cluster.
fn kmeans_clusters(users: &[Point3], k: usize, seed: u64) -> Vec<usize> {
    let n = users.len();
    let k = k.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct random users as initial centers.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut centers: Vec<(f64, f64)> = order[..k].iter().map(|&i| (users[i].x, users[i].y)).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, u) in users.iter().enumerate() {
            let best = (0..k)
                .min_by(|&p, &q| {
                    let dp = (u.x - centers[p].0).powi(2) + (u.y - centers[p].1).powi(2);
                    let dq = (u.x - centers[q].0).powi(2) + (u.y - centers[q].1).powi(2);
                    dp.partial_cmp(&dq).unwrap().then(p.cmp(&q))
                })
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // Repair empty clusters.
        for c in 0..k {
            if !assign.iter().any(|&a| a == c) {
                let (largest, _) = (0..k)
                    .map(|cc| (cc, assign.iter().filter(|&&a| a == cc).count()))
                    .max_by_key(|&(cc, count)| (count, usize::MAX - cc))
                    .unwrap();
                let center = centers[largest];
                let victim = (0..n)
                    .filter(|&i| assign[i] == largest)
                    .max_by(|&i, &j| {
                        let di = (users[i].x - center.0).powi(2) + (users[i].y - center.1).powi(2);
                        let dj = (users[j].x - center.0).powi(2) + (users[j].y - center.1).powi(2);
                        di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                    })
                    .unwrap();
                assign[victim] = c;
                changed = true;
            }
        }
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let inv = 1.0 / members.len() as f64;
            centers[c] = members
                .iter()
                .fold((0.0, 0.0), |(sx, sy), &i| (sx + users[i].x * inv, sy + users[i].y * inv));
        }
        if !changed {
            break;
        }
    }
    assign
}

fn cluster_medoid(users: &[Point3], members: &[usize]) -> usize {
    *members
        .iter()
        .min_by(|&&i, &&j| {
            let cost = |a: usize| -> f64 {
                members
                    .iter()
                    .map(|&b| {
                        ((users[a].x - users[b].x).powi(2) + (users[a].y - users[b].y).powi(2))
                            .sqrt()
                    })
                    .sum()
            };
            cost(i).partial_cmp(&cost(j)).unwrap().then(i.cmp(&j))
        })
        .expect("nonempty cluster")
}

/// Deterministic initial state: k-means clusters, UAVs at the configured
/// altitude above cluster medoids, greedy best-gain association under
/// capacities and an equal power split.
pub fn initialize(scenario: &Scenario, setup: &ProblemSetup) -> Result<NetworkState, ScenarioError> {
    let num_users = scenario.users.len();
    let num_uavs = scenario.uav_count;
    let altitude = scenario.solver.init_altitude;

    let assign = kmeans_clusters(&scenario.users, num_uavs, scenario.seed);
    let mut positions = Vec::with_capacity(num_uavs);
    let area_center = Point3::new(
        0.5 * (scenario.area_bounds.x_min + scenario.area_bounds.x_max),
        0.5 * (scenario.area_bounds.y_min + scenario.area_bounds.y_max),
        altitude,
    );
    for m in 0..num_uavs {
        let members: Vec<usize> = (0..num_users).filter(|&i| assign[i] == m).collect();
        if members.is_empty() {
            // More UAVs than users: park the spares over the area center.
            positions.push(area_center);
        } else {
            let medoid = cluster_medoid(&scenario.users, &members);
            positions.push(Point3::new(scenario.users[medoid].x, scenario.users[medoid].y, altitude));
        }
    }

    let gains = gain_table(setup, &positions, false)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

    // Greedy association in descending best-gain order.
    let mut order: Vec<usize> = (0..num_users).collect();
    let best_gain = |k: usize| -> f64 {
        (0..num_uavs).map(|m| gains.gains[k][m]).fold(f64::NEG_INFINITY, f64::max)
    };
    order.sort_by(|&a, &b| best_gain(b).partial_cmp(&best_gain(a)).unwrap().then(a.cmp(&b)));

    let mut load = vec![0usize; num_uavs];
    let mut server: Vec<Option<usize>> = vec![None; num_users];
    for &k in &order {
        let mut prefs: Vec<usize> = (0..num_uavs).collect();
        prefs.sort_by(|&p, &q| {
            gains.gains[k][q].partial_cmp(&gains.gains[k][p]).unwrap().then(p.cmp(&q))
        });
        let target = prefs.into_iter().find(|&m| load[m] < scenario.capacities[m]);
        match target {
            Some(m) => {
                load[m] += 1;
                server[k] = Some(m);
            }
            None => {
                return Err(ScenarioError::InfeasibleInit(format!(
                    "capacities cannot host user {k}"
                )))
            }
        }
    }

    let values: Vec<Vec<f64>> = (0..num_users)
        .map(|k| {
            (0..num_uavs)
                .map(|m| if server[k] == Some(m) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let power = equal_split_power(num_users, num_uavs, &server, scenario.p_max.watts(), true);

    Ok(NetworkState {
        positions,
        power,
        assoc: Association { values, capacities: scenario.capacities.clone() },
    })
}
