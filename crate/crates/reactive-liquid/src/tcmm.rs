//! Incremental trajectory clustering: points merge into the nearest micro-cluster
//! feature vector within a distance threshold or start a new one; a periodic
//! macro step runs weighted k-means over the micro-cluster centers. Micro-cluster
//! changes are published as event-source deltas that reconstruct the cluster set
//! exactly when replayed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Numerical slack for the radius-squared invariant.
pub const RADIUS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub taxi_id: u64,
    /// Epoch seconds.
    pub t: i64,
    pub lon: f64,
    pub lat: f64,
}

impl TrajectoryPoint {
    pub fn in_range(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon) && (-90.0..=90.0).contains(&self.lat)
    }
}

/// Micro-cluster identity: the writing task's origin plus a local counter, so
/// ids are unique across tasks without coordination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MicroClusterId {
    pub origin: u32,
    pub seq: u32,
}

impl std::fmt::Display for MicroClusterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "o{}:{}", self.origin, self.seq)
    }
}

/// Temporal cluster feature vector: point count, linear sum, sum of squared
/// norms, and the covered time span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroClusterCF {
    pub id: MicroClusterId,
    pub n: u64,
    pub ls: [f64; 2],
    pub ss: f64,
    pub t_start: i64,
    pub t_end: i64,
}

impl MicroClusterCF {
    pub fn from_point(id: MicroClusterId, p: &TrajectoryPoint) -> Self {
        Self {
            id,
            n: 1,
            ls: [p.lon, p.lat],
            ss: p.lon * p.lon + p.lat * p.lat,
            t_start: p.t,
            t_end: p.t,
        }
    }

    /// Absorbs one point: N+1, LS += (lon, lat), SS += lon^2 + lat^2,
    /// t_end = max(t_end, t).
    pub fn add(&mut self, p: &TrajectoryPoint) {
        self.n += 1;
        self.ls[0] += p.lon;
        self.ls[1] += p.lat;
        self.ss += p.lon * p.lon + p.lat * p.lat;
        self.t_end = self.t_end.max(p.t);
        debug_assert!(self.radius2() >= -RADIUS_EPS);
    }

    pub fn center(&self) -> [f64; 2] {
        let n = self.n as f64;
        [self.ls[0] / n, self.ls[1] / n]
    }

    pub fn radius2(&self) -> f64 {
        let c = self.center();
        self.ss / self.n as f64 - (c[0] * c[0] + c[1] * c[1])
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Event-sourced change record for the micro-cluster set. The merged variant
/// carries the absorbed point and the cluster's new summary, so folding deltas
/// (even duplicated ones) converges on the writer's exact state.
#[derive(Debug, Clone, PartialEq)]
pub enum MicroDelta {
    Created {
        cf: MicroClusterCF,
    },
    Merged {
        id: MicroClusterId,
        point: TrajectoryPoint,
        cf: MicroClusterCF,
    },
}

impl MicroDelta {
    pub fn cf(&self) -> &MicroClusterCF {
        match self {
            MicroDelta::Created { cf } => cf,
            MicroDelta::Merged { cf, .. } => cf,
        }
    }
}

/// One task's cluster set plus its id allocator.
#[derive(Debug, Clone)]
pub struct MicroClusterSet {
    pub origin: u32,
    next_seq: u32,
    clusters: BTreeMap<MicroClusterId, MicroClusterCF>,
}

impl MicroClusterSet {
    pub fn new(origin: u32) -> Self {
        Self {
            origin,
            next_seq: 0,
            clusters: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> impl Iterator<Item = &MicroClusterCF> {
        self.clusters.values()
    }

    pub fn total_points(&self) -> u64 {
        self.clusters.values().map(|c| c.n).sum()
    }

    /// Merges the point into the nearest cluster within `d_max` (ties go to the
    /// lower cluster id) or creates a singleton cluster.
    pub fn update(&mut self, point: &TrajectoryPoint, d_max: f64) -> MicroDelta {
        debug_assert!(d_max > 0.0);
        let pos = [point.lon, point.lat];
        let mut best: Option<(MicroClusterId, f64)> = None;
        for (id, cf) in &self.clusters {
            let d2 = dist2(cf.center(), pos);
            // Strict < keeps the lowest id on equal distance (iteration is in
            // id order).
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((*id, d2));
            }
        }
        match best {
            Some((id, d2)) if d2 <= d_max * d_max => {
                let cf = self.clusters.get_mut(&id).unwrap();
                cf.add(point);
                MicroDelta::Merged {
                    id,
                    point: *point,
                    cf: *cf,
                }
            }
            _ => {
                let id = MicroClusterId {
                    origin: self.origin,
                    seq: self.next_seq,
                };
                self.next_seq += 1;
                let cf = MicroClusterCF::from_point(id, point);
                self.clusters.insert(id, cf);
                MicroDelta::Created { cf }
            }
        }
    }

    /// Rebuilds writer state from a replayed delta. The id allocator advances
    /// past every seen id of this origin so replay never reuses ids.
    pub fn apply_delta(&mut self, delta: &MicroDelta) {
        let cf = *delta.cf();
        if cf.id.origin == self.origin {
            self.next_seq = self.next_seq.max(cf.id.seq + 1);
        }
        self.clusters.insert(cf.id, cf);
    }
}

/// Folds a delta into a read-side view (used by the macro job). A cluster's
/// point count only grows, so keeping the summary with the larger N makes the
/// fold insensitive to duplicated or reordered deltas.
pub fn fold_delta(view: &mut BTreeMap<MicroClusterId, MicroClusterCF>, delta: &MicroDelta) {
    let cf = *delta.cf();
    match view.get(&cf.id) {
        Some(existing) if existing.n >= cf.n => {}
        _ => {
            view.insert(cf.id, cf);
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeltaCodecError {
    #[error("truncated delta record")]
    Truncated,
    #[error("unknown delta tag {0}")]
    UnknownTag(u8),
}

/// Little-endian tagged record, fields in declaration order.
pub fn encode_delta(delta: &MicroDelta) -> Vec<u8> {
    let mut out = Vec::with_capacity(80);
    match delta {
        MicroDelta::Created { cf } => {
            out.push(0);
            encode_cf(&mut out, cf);
        }
        MicroDelta::Merged { id, point, cf } => {
            out.push(1);
            out.extend_from_slice(&id.origin.to_le_bytes());
            out.extend_from_slice(&id.seq.to_le_bytes());
            out.extend_from_slice(&point.taxi_id.to_le_bytes());
            out.extend_from_slice(&point.t.to_le_bytes());
            out.extend_from_slice(&point.lon.to_le_bytes());
            out.extend_from_slice(&point.lat.to_le_bytes());
            encode_cf(&mut out, cf);
        }
    }
    out
}

fn encode_cf(out: &mut Vec<u8>, cf: &MicroClusterCF) {
    out.extend_from_slice(&cf.id.origin.to_le_bytes());
    out.extend_from_slice(&cf.id.seq.to_le_bytes());
    out.extend_from_slice(&cf.n.to_le_bytes());
    out.extend_from_slice(&cf.ls[0].to_le_bytes());
    out.extend_from_slice(&cf.ls[1].to_le_bytes());
    out.extend_from_slice(&cf.ss.to_le_bytes());
    out.extend_from_slice(&cf.t_start.to_le_bytes());
    out.extend_from_slice(&cf.t_end.to_le_bytes());
}

pub fn decode_delta(bytes: &[u8]) -> Result<MicroDelta, DeltaCodecError> {
    let mut cursor = Cursor { bytes, at: 0 };
    let tag = cursor.u8()?;
    match tag {
        0 => Ok(MicroDelta::Created {
            cf: decode_cf(&mut cursor)?,
        }),
        1 => {
            let id = MicroClusterId {
                origin: cursor.u32()?,
                seq: cursor.u32()?,
            };
            let point = TrajectoryPoint {
                taxi_id: cursor.u64()?,
                t: cursor.i64()?,
                lon: cursor.f64()?,
                lat: cursor.f64()?,
            };
            let cf = decode_cf(&mut cursor)?;
            Ok(MicroDelta::Merged { id, point, cf })
        }
        t => Err(DeltaCodecError::UnknownTag(t)),
    }
}

fn decode_cf(cursor: &mut Cursor<'_>) -> Result<MicroClusterCF, DeltaCodecError> {
    Ok(MicroClusterCF {
        id: MicroClusterId {
            origin: cursor.u32()?,
            seq: cursor.u32()?,
        },
        n: cursor.u64()?,
        ls: [cursor.f64()?, cursor.f64()?],
        ss: cursor.f64()?,
        t_start: cursor.i64()?,
        t_end: cursor.i64()?,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DeltaCodecError> {
        let end = self.at.checked_add(n).ok_or(DeltaCodecError::Truncated)?;
        let s = self
            .bytes
            .get(self.at..end)
            .ok_or(DeltaCodecError::Truncated)?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DeltaCodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DeltaCodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DeltaCodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, DeltaCodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DeltaCodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Result of one macro-clustering epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroClusters {
    pub epoch: u64,
    pub centers: Vec<[f64; 2]>,
    pub assignment: BTreeMap<MicroClusterId, u32>,
}

/// Weighted k-means over micro-cluster centers (weights are point counts).
/// Initial centers are k distinct micro centers picked by seeded sampling;
/// iteration stops when no center moves more than 1e-6 or after `max_iters`.
/// `k` is clamped to the number of micro clusters.
pub fn macro_cluster(
    micros: &BTreeMap<MicroClusterId, MicroClusterCF>,
    k: u32,
    max_iters: u32,
    seed: u64,
    epoch: u64,
) -> MacroClusters {
    assert!(k >= 1, "k must be at least 1");
    assert!(!micros.is_empty(), "micro set must be non-empty");
    let items: Vec<(&MicroClusterId, [f64; 2], f64)> = micros
        .iter()
        .map(|(id, cf)| (id, cf.center(), cf.n as f64))
        .collect();
    let k = (k as usize).min(items.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut centers: Vec<[f64; 2]> = indices[..k].iter().map(|&i| items[i].1).collect();

    let mut assignment = vec![0u32; items.len()];
    for _ in 0..max_iters {
        for (i, (_, pos, _)) in items.iter().enumerate() {
            assignment[i] = nearest_center(&centers, *pos);
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut weights = vec![0.0f64; k];
        for (i, (_, pos, w)) in items.iter().enumerate() {
            let c = assignment[i] as usize;
            sums[c][0] += pos[0] * w;
            sums[c][1] += pos[1] * w;
            weights[c] += w;
        }
        let mut max_move2 = 0.0f64;
        for c in 0..k {
            if weights[c] > 0.0 {
                let fresh = [sums[c][0] / weights[c], sums[c][1] / weights[c]];
                max_move2 = max_move2.max(dist2(centers[c], fresh));
                centers[c] = fresh;
            }
        }
        if max_move2 < 1e-6 * 1e-6 {
            break;
        }
    }
    for (i, (_, pos, _)) in items.iter().enumerate() {
        assignment[i] = nearest_center(&centers, *pos);
    }

    MacroClusters {
        epoch,
        centers,
        assignment: items
            .iter()
            .enumerate()
            .map(|(i, (id, _, _))| (**id, assignment[i]))
            .collect(),
    }
}

fn nearest_center(centers: &[[f64; 2]], pos: [f64; 2]) -> u32 {
    let mut best = 0u32;
    let mut best_d2 = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d2 = dist2(*center, pos);
        if d2 < best_d2 {
            best_d2 = d2;
            best = c as u32;
        }
    }
    best
}

/// Total weighted within-cluster sum of squared distances.
pub fn weighted_wcss(
    micros: &BTreeMap<MicroClusterId, MicroClusterCF>,
    centers: &[[f64; 2]],
    assignment: &BTreeMap<MicroClusterId, u32>,
) -> f64 {
    micros
        .iter()
        .map(|(id, cf)| {
            let c = centers[assignment[id] as usize];
            cf.n as f64 * dist2(cf.center(), c)
        })
        .sum()
}

/// Payload of a macro-deltas message: epoch, then each center, little-endian.
pub fn encode_macro(m: &MacroClusters) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.centers.len() * 16);
    out.extend_from_slice(&m.epoch.to_le_bytes());
    out.extend_from_slice(&(m.centers.len() as u32).to_le_bytes());
    for c in &m.centers {
        out.extend_from_slice(&c[0].to_le_bytes());
        out.extend_from_slice(&c[1].to_le_bytes());
    }
    out
}

/// Broker payload of one trajectory point: taxi_id, t, lon, lat, little-endian.
pub fn encode_point(p: &TrajectoryPoint) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[0..8].copy_from_slice(&p.taxi_id.to_le_bytes());
    out[8..16].copy_from_slice(&p.t.to_le_bytes());
    out[16..24].copy_from_slice(&p.lon.to_le_bytes());
    out[24..32].copy_from_slice(&p.lat.to_le_bytes());
    out
}

pub fn decode_point(bytes: &[u8]) -> Result<TrajectoryPoint, DeltaCodecError> {
    if bytes.len() < 32 {
        return Err(DeltaCodecError::Truncated);
    }
    Ok(TrajectoryPoint {
        taxi_id: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
        t: i64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        lon: f64::from_le_bytes(bytes[16..24].try_into().unwrap()),
        lat: f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    })
}

use crate::mailbox::WorkItem;
use crate::processing::{JobLogic, LogicError, StepResult};
use crate::time::Micros;

/// Cost model and threshold for the micro-clustering job.
#[derive(Debug, Clone, Copy)]
pub struct MicroJobParams {
    pub d_max: f64,
    /// Base modeled processing cost per point.
    pub cost_base: Micros,
    /// Additional cost per existing cluster scanned by the nearest search;
    /// this is what makes processing decelerate as the cluster set grows.
    pub cost_per_cluster: Micros,
}

/// Micro-clustering job logic: merge-or-create over the task's cluster set,
/// emitting one delta per point keyed by cluster id. The delta doubles as the
/// task's state-change event.
pub struct TcmmMicroLogic {
    params: MicroJobParams,
    set: MicroClusterSet,
}

impl TcmmMicroLogic {
    pub fn new(origin: u32, params: MicroJobParams) -> Self {
        Self {
            params,
            set: MicroClusterSet::new(origin),
        }
    }
}

impl JobLogic for TcmmMicroLogic {
    fn apply(&mut self, item: &WorkItem, _now: Micros) -> Result<StepResult, LogicError> {
        let point = decode_point(&item.payload)
            .map_err(|e| LogicError(format!("bad point payload: {e}")))?;
        let cost = self.params.cost_base + self.params.cost_per_cluster * self.set.len() as Micros;
        let delta = self.set.update(&point, self.params.d_max);
        let cf = *delta.cf();
        let bytes = encode_delta(&delta);
        Ok(StepResult {
            cost,
            outputs: vec![(Some(cf.id.to_string().into_bytes()), bytes.clone())],
            state_event: Some(bytes),
            crdt_put: Some((cf.id, cf)),
        })
    }

    fn restore(&mut self, event: &[u8]) -> Option<(MicroClusterId, MicroClusterCF)> {
        let delta = decode_delta(event).ok()?;
        self.set.apply_delta(&delta);
        let cf = *delta.cf();
        Some((cf.id, cf))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MacroJobParams {
    pub k: u32,
    pub period: Micros,
    pub max_iters: u32,
    /// Modeled cost to fold one delta into the view.
    pub fold_cost: Micros,
    /// Modeled clustering cost per (micro cluster x k) pair per epoch.
    pub cost_per_item: Micros,
}

/// Macro-clustering job logic: folds micro deltas into a view and periodically
/// runs weighted k-means over the job's merged view, publishing one epoch per
/// period. Folded deltas are re-recorded as this task's own state events.
pub struct TcmmMacroLogic {
    params: MacroJobParams,
    view: BTreeMap<MicroClusterId, MicroClusterCF>,
    epoch: u64,
}

impl TcmmMacroLogic {
    pub fn new(params: MacroJobParams) -> Self {
        Self {
            params,
            view: BTreeMap::new(),
            epoch: 0,
        }
    }
}

impl JobLogic for TcmmMacroLogic {
    fn apply(&mut self, item: &WorkItem, _now: Micros) -> Result<StepResult, LogicError> {
        let delta = decode_delta(&item.payload)
            .map_err(|e| LogicError(format!("bad delta payload: {e}")))?;
        fold_delta(&mut self.view, &delta);
        let cf = *delta.cf();
        Ok(StepResult {
            cost: self.params.fold_cost,
            outputs: Vec::new(),
            state_event: Some(item.payload.to_vec()),
            crdt_put: Some((cf.id, cf)),
        })
    }

    fn restore(&mut self, event: &[u8]) -> Option<(MicroClusterId, MicroClusterCF)> {
        let delta = decode_delta(event).ok()?;
        fold_delta(&mut self.view, &delta);
        let cf = *delta.cf();
        Some((cf.id, cf))
    }

    fn timer_period(&self) -> Option<Micros> {
        Some(self.params.period)
    }

    fn on_timer(
        &mut self,
        _now: Micros,
        seed_base: u64,
        merged: &BTreeMap<MicroClusterId, MicroClusterCF>,
    ) -> Option<StepResult> {
        if merged.is_empty() {
            return None;
        }
        let epoch = self.epoch;
        self.epoch += 1;
        let seed = seed_base ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let clusters = macro_cluster(merged, self.params.k, self.params.max_iters, seed, epoch);
        let cost = self.params.cost_per_item
            * merged.len() as Micros
            * u64::from(self.params.k.min(merged.len() as u32));
        Some(StepResult {
            cost,
            outputs: vec![(None, encode_macro(&clusters))],
            state_event: None,
            crdt_put: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lon: f64, lat: f64) -> TrajectoryPoint {
        TrajectoryPoint {
            taxi_id: 1,
            t: 0,
            lon,
            lat,
        }
    }

    fn id(seq: u32) -> MicroClusterId {
        MicroClusterId { origin: 0, seq }
    }

    #[test]
    fn cf_from_point_definition() {
        let cf = MicroClusterCF::from_point(id(0), &pt(2.0, 3.0));
        assert_eq!(cf.n, 1);
        assert_eq!(cf.ls, [2.0, 3.0]);
        assert_eq!(cf.ss, 13.0);
    }

    #[test]
    fn cf_add_hand_arithmetic() {
        let mut cf = MicroClusterCF::from_point(id(0), &pt(0.0, 0.0));
        cf.add(&pt(2.0, 0.0));
        assert_eq!(cf.n, 2);
        assert_eq!(cf.ls, [2.0, 0.0]);
        assert_eq!(cf.ss, 4.0);
        assert_eq!(cf.center(), [1.0, 0.0]);
        assert!((cf.radius2().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cf_add_is_order_insensitive_over_sums() {
        let points = [pt(1.0, 2.0), pt(3.0, -1.0), pt(0.5, 0.5), pt(1.0, 2.0)];
        let mut forward = MicroClusterCF::from_point(id(0), &points[0]);
        for p in &points[1..] {
            forward.add(p);
        }
        let mut backward = MicroClusterCF::from_point(id(0), &points[3]);
        for p in points[..3].iter().rev() {
            backward.add(p);
        }
        assert_eq!(forward.n, backward.n);
        assert!((forward.ls[0] - backward.ls[0]).abs() < 1e-12);
        assert!((forward.ss - backward.ss).abs() < 1e-12);
        // Adding a point twice is not adding it once.
        assert_ne!(forward.n, 3);
    }

    #[test]
    fn update_on_empty_set_creates() {
        let mut set = MicroClusterSet::new(0);
        let d = set.update(&pt(1.0, 1.0), 2.0);
        assert!(matches!(d, MicroDelta::Created { .. }));
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn update_merges_nearest_within_threshold() {
        let mut set = MicroClusterSet::new(0);
        set.update(&pt(0.0, 0.0), 2.0);
        set.update(&pt(10.0, 0.0), 2.0);
        let d = set.update(&pt(1.0, 0.0), 2.0);
        match d {
            MicroDelta::Merged { id: got, cf, .. } => {
                assert_eq!(got, id(0));
                assert_eq!(cf.n, 2);
            }
            other => panic!("expected merge, got {other:?}"),
        }
    }

    #[test]
    fn update_creates_beyond_threshold() {
        let mut set = MicroClusterSet::new(0);
        set.update(&pt(0.0, 0.0), 2.0);
        let d = set.update(&pt(5.0, 0.0), 2.0);
        assert!(matches!(d, MicroDelta::Created { .. }));
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn equal_distance_tie_goes_to_lower_id() {
        let mut set = MicroClusterSet::new(0);
        set.update(&pt(-1.0, 0.0), 0.5); // cluster 0
        set.update(&pt(1.0, 0.0), 0.5); // cluster 1
        let d = set.update(&pt(0.0, 0.0), 2.0);
        match d {
            MicroDelta::Merged { id: got, .. } => assert_eq!(got, id(0)),
            other => panic!("expected merge, got {other:?}"),
        }
    }

    #[test]
    fn d_max_limits() {
        // d_max -> 0+: one cluster per distinct point.
        let mut tiny = MicroClusterSet::new(0);
        let pts = [pt(0.0, 0.0), pt(0.1, 0.0), pt(0.2, 0.0), pt(0.1, 0.0)];
        for p in &pts {
            tiny.update(p, 1e-12);
        }
        assert_eq!(tiny.len(), 3); // the duplicate merged at distance zero

        // d_max -> infinity: exactly one cluster.
        let mut huge = MicroClusterSet::new(0);
        for p in &pts {
            huge.update(p, f64::INFINITY);
        }
        assert_eq!(huge.len(), 1);
        assert_eq!(huge.total_points(), 4);
    }

    #[test]
    fn conservation_of_point_counts() {
        let mut set = MicroClusterSet::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = pt(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            set.update(&p, 0.3);
        }
        assert_eq!(set.total_points(), 500);
        for cf in set.clusters() {
            assert!(cf.radius2() >= -RADIUS_EPS);
            assert!(cf.t_start <= cf.t_end);
        }
    }

    /// Independent single-threaded reference: a plain list scanned with sqrt
    /// distances, first-lowest index wins ties.
    fn reference_clusters(points: &[TrajectoryPoint], d_max: f64) -> Vec<(u64, f64, f64, f64)> {
        let mut clusters: Vec<(u64, f64, f64, f64)> = Vec::new(); // (n, ls0, ls1, ss)
        for p in points {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in clusters.iter().enumerate() {
                let cx = c.1 / c.0 as f64;
                let cy = c.2 / c.0 as f64;
                let d = ((cx - p.lon).powi(2) + (cy - p.lat).powi(2)).sqrt();
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, d)) if d <= d_max => {
                    let c = &mut clusters[i];
                    c.0 += 1;
                    c.1 += p.lon;
                    c.2 += p.lat;
                    c.3 += p.lon * p.lon + p.lat * p.lat;
                }
                _ => clusters.push((1, p.lon, p.lat, p.lon * p.lon + p.lat * p.lat)),
            }
        }
        clusters
    }

    #[test]
    fn matches_reference_implementation_on_synthetic_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut points = Vec::new();
        for i in 0..1000 {
            points.push(TrajectoryPoint {
                taxi_id: i % 10,
                t: i as i64,
                lon: rng.gen_range(-2.0..2.0),
                lat: rng.gen_range(-2.0..2.0),
            });
        }
        let d_max = 0.35;
        let mut set = MicroClusterSet::new(0);
        for p in &points {
            set.update(p, d_max);
        }
        let reference = reference_clusters(&points, d_max);
        assert_eq!(set.len(), reference.len());
        // Creation order matches id order, so compare position-wise.
        for (got, want) in set.clusters().zip(reference.iter()) {
            assert_eq!(got.n, want.0);
            assert!((got.ls[0] - want.1).abs() < 1e-9);
            assert!((got.ls[1] - want.2).abs() < 1e-9);
            assert!((got.ss - want.3).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_codec_round_trip() {
        let mut set = MicroClusterSet::new(3);
        let deltas = vec![
            set.update(&pt(1.5, -2.25), 0.5),
            set.update(&pt(1.6, -2.25), 0.5),
            set.update(&pt(30.0, 7.0), 0.5),
        ];
        for d in &deltas {
            let bytes = encode_delta(d);
            assert_eq!(&decode_delta(&bytes).unwrap(), d);
        }
        assert_eq!(
            decode_delta(&[9, 0, 0]),
            Err(DeltaCodecError::UnknownTag(9))
        );
        let short = &encode_delta(&deltas[0])[..10];
        assert_eq!(decode_delta(short), Err(DeltaCodecError::Truncated));
    }

    #[test]
    fn replaying_deltas_reconstructs_exact_set() {
        let mut set = MicroClusterSet::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut deltas = Vec::new();
        for i in 0..400 {
            let p = TrajectoryPoint {
                taxi_id: 1,
                t: i,
                lon: rng.gen_range(-1.0..1.0),
                lat: rng.gen_range(-1.0..1.0),
            };
            deltas.push(set.update(&p, 0.25));
        }
        let mut rebuilt = MicroClusterSet::new(1);
        for d in &deltas {
            rebuilt.apply_delta(d);
        }
        let a: Vec<&MicroClusterCF> = set.clusters().collect();
        let b: Vec<&MicroClusterCF> = rebuilt.clusters().collect();
        assert_eq!(a, b);

        // A fresh point after replay gets a fresh id, not a reused one.
        let next = rebuilt.update(&pt(50.0, 50.0), 0.25);
        let existing: Vec<MicroClusterId> = set.clusters().map(|c| c.id).collect();
        assert!(!existing.contains(&next.cf().id));
    }

    fn micro_fixture(points: &[(f64, f64, u64)]) -> BTreeMap<MicroClusterId, MicroClusterCF> {
        points
            .iter()
            .enumerate()
            .map(|(i, (lon, lat, n))| {
                let cid = id(i as u32);
                let mut cf = MicroClusterCF::from_point(cid, &pt(*lon, *lat));
                cf.n = *n;
                cf.ls = [lon * *n as f64, lat * *n as f64];
                (cid, cf)
            })
            .collect()
    }

    #[test]
    fn macro_degenerate_and_separable_cases() {
        let same = micro_fixture(&[(2.0, 2.0, 1), (2.0, 2.0, 5), (2.0, 2.0, 2)]);
        let m = macro_cluster(&same, 1, 50, 1, 0);
        assert_eq!(m.centers.len(), 1);
        assert!((m.centers[0][0] - 2.0).abs() < 1e-12);

        let two = micro_fixture(&[(0.0, 0.0, 1), (10.0, 10.0, 1)]);
        let m = macro_cluster(&two, 2, 50, 1, 0);
        let mut centers = m.centers.clone();
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(centers[0], [0.0, 0.0]);
        assert_eq!(centers[1], [10.0, 10.0]);

        // k larger than the set clamps.
        let m = macro_cluster(&two, 9, 50, 1, 0);
        assert_eq!(m.centers.len(), 2);
    }

    #[test]
    fn macro_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64, u64)> = (0..50)
            .map(|_| {
                (
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(1..20),
                )
            })
            .collect();
        let micros = micro_fixture(&pts);
        let a = macro_cluster(&micros, 3, 50, 77, 0);
        let b = macro_cluster(&micros, 3, 50, 77, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn macro_beats_random_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64, u64)> = (0..50)
            .map(|_| {
                (
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(1..20),
                )
            })
            .collect();
        let micros = micro_fixture(&pts);
        let m = macro_cluster(&micros, 3, 50, 13, 0);
        let kmeans_wcss = weighted_wcss(&micros, &m.centers, &m.assignment);

        // Brute-force random baseline: same centers count, random membership.
        let mut baseline = f64::INFINITY;
        for trial in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
            let assignment: BTreeMap<MicroClusterId, u32> = micros
                .keys()
                .map(|id| (*id, r.gen_range(0..3u32)))
                .collect();
            let mut sums = [[0.0f64; 2]; 3];
            let mut ws = [0.0f64; 3];
            for (id, cf) in &micros {
                let c = assignment[id] as usize;
                let w = cf.n as f64;
                sums[c][0] += cf.center()[0] * w;
                sums[c][1] += cf.center()[1] * w;
                ws[c] += w;
            }
            let centers: Vec<[f64; 2]> = (0..3)
                .map(|c| {
                    if ws[c] > 0.0 {
                        [sums[c][0] / ws[c], sums[c][1] / ws[c]]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect();
            baseline = baseline.min(weighted_wcss(&micros, &centers, &assignment));
        }
        assert!(kmeans_wcss <= baseline);
    }

    #[test]
    fn macro_wcss_non_increasing_over_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<(f64, f64, u64)> = (0..60)
            .map(|_| {
                (
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(1..10),
                )
            })
            .collect();
        let micros = micro_fixture(&pts);
        let mut prev = f64::INFINITY;
        for iters in 1..12u32 {
            let m = macro_cluster(&micros, 4, iters, 99, 0);
            let wcss = weighted_wcss(&micros, &m.centers, &m.assignment);
            assert!(wcss <= prev + 1e-9, "wcss rose: {prev} -> {wcss}");
            prev = wcss;
        }
    }
}
