//! Depth-weighted lifting of image features and sum-pooling of the lifted
//! point cloud onto the BEV grid.
//!
//! Pooling reduces every cell in one canonical order: camera key, then point
//! index within the camera's frustum. [`voxel_pool_naive`] scatters points in
//! that order directly; [`PoolPlan`] sorts point references by
//! `(cell, camera key, point index)` once and reduces contiguous runs, which
//! produces bit-identical sums and can be reused while the rig is fixed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::FrustumPoints;
use crate::grid::BevGridSpec;
use crate::par;
use crate::tensor::{Scalar, Tensor};

pub use crate::grid::bev_cell_of;

/// Depth-weighted features of one camera and the ego-frame points they sit at.
#[derive(Debug, Clone)]
pub struct LiftedFeatures<T: Scalar = f32> {
    /// Permutation-invariant camera identity used for the reduction order.
    pub camera_key: usize,
    /// `C × D × H' × W'`.
    pub features: Tensor<T>,
    pub points: Arc<FrustumPoints>,
}

/// Outer product of per-pixel context vectors with per-pixel depth
/// distributions: `out[.., c, d, h, w] = context[.., c, h, w] * depth[.., d, h, w]`.
///
/// Accepts `C×H×W` / `D×H×W` or a leading batch axis on both.
pub fn lift<T: Scalar>(context: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = match (context.shape(), depth.shape()) {
        (&[c, h, w], &[d, h2, w2]) if (h, w) == (h2, w2) => (1, c, d, h, w),
        (&[n, c, h, w], &[n2, d, h2, w2]) if (n, h, w) == (n2, h2, w2) => (n, c, d, h, w),
        (a, b) => {
            return Err(Error::shape(
                "lift",
                format!("context {a:?} and depth {b:?} disagree on batch or spatial size"),
            ))
        }
    };
    let hw = h * w;
    let ctx = context.data();
    let dep = depth.data();
    let mut out = vec![T::zero(); n * c * d * hw];
    par::for_each_chunk(&mut out, d * hw, |nc, block| {
        let (b, ci) = (nc / c, nc % c);
        let cv = &ctx[(b * c + ci) * hw..][..hw];
        for di in 0..d {
            let dv = &dep[(b * d + di) * hw..][..hw];
            let o = &mut block[di * hw..(di + 1) * hw];
            for p in 0..hw {
                o[p] = cv[p] * dv[p];
            }
        }
    });
    let mut shape = if context.ndim() == 4 { vec![n] } else { vec![] };
    shape.extend_from_slice(&[c, d, h, w]);
    let (cc, dc) = (context.clone(), depth.clone());
    Ok(Tensor::from_op(
        "lift",
        shape,
        out,
        vec![context.clone(), depth.clone()],
        Box::new(move |g| {
            let ctx = cc.data();
            let dep = dc.data();
            let mut gc = vec![T::zero(); n * c * hw];
            let mut gd = vec![T::zero(); n * d * hw];
            for b in 0..n {
                for ci in 0..c {
                    let gcv = &mut gc[(b * c + ci) * hw..][..hw];
                    for di in 0..d {
                        let gv = &g[((b * c + ci) * d + di) * hw..][..hw];
                        let dv = &dep[(b * d + di) * hw..][..hw];
                        for p in 0..hw {
                            gcv[p] = gcv[p] + gv[p] * dv[p];
                        }
                    }
                }
                for di in 0..d {
                    let gdv = &mut gd[(b * d + di) * hw..][..hw];
                    for ci in 0..c {
                        let gv = &g[((b * c + ci) * d + di) * hw..][..hw];
                        let cv = &ctx[(b * c + ci) * hw..][..hw];
                        for p in 0..hw {
                            gdv[p] = gdv[p] + gv[p] * cv[p];
                        }
                    }
                }
            }
            vec![Some(gc), Some(gd)]
        }),
    ))
}

/// One camera's worth of points feeding the pool.
#[derive(Debug, Clone, Copy)]
pub struct PoolSource<'a> {
    /// Batch element the camera belongs to.
    pub sample: usize,
    pub camera_key: usize,
    pub points: &'a [[f64; 3]],
}

/// A point reference for [`PoolPlan::from_records`]; the feature of channel
/// `c` lives at `features[(slot * C + c) * points_per_slot + offset]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub sample: usize,
    pub camera_key: usize,
    pub point_index: usize,
    pub slot: usize,
    pub offset: usize,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Entry {
    out: u32,
    camera_key: u32,
    point: u32,
    slot: u32,
    offset: u32,
}

const OUTSIDE: u32 = u32::MAX;

/// Sorted point-to-cell assignment shared by forward and backward pooling.
#[derive(Debug, Clone)]
pub struct PoolPlan {
    spec: BevGridSpec,
    batch: usize,
    slots: usize,
    points_per_slot: usize,
    /// `slot * points_per_slot + offset` of every in-bounds point, in
    /// canonical order.
    order: Vec<u32>,
    /// `(out index, start, end)` runs of `order` sharing a cell.
    segments: Vec<(u32, u32, u32)>,
    /// First segment of each batch element, plus a sentinel.
    sample_segments: Vec<usize>,
    /// Output index of each `slot * points_per_slot + offset`, or `OUTSIDE`.
    assignment: Vec<u32>,
    /// Batch element of each slot.
    slot_samples: Vec<usize>,
}

fn check_size(spec: &BevGridSpec, batch: usize, slots: usize, per: usize) -> Result<()> {
    if (batch * spec.cells()) as u64 >= OUTSIDE as u64 || (slots * per) as u64 >= OUTSIDE as u64 {
        return Err(Error::invalid("pool_plan", "problem too large for 32-bit indices"));
    }
    Ok(())
}

impl PoolPlan {
    /// Plan for `sources[k]` occupying feature slot `k`. All sources must
    /// have the same number of points.
    pub fn new(spec: &BevGridSpec, batch: usize, sources: &[PoolSource<'_>]) -> Result<Self> {
        let per = sources.first().map(|s| s.points.len()).unwrap_or(0);
        if sources.iter().any(|s| s.points.len() != per) {
            return Err(Error::shape("pool_plan", "cameras have different frustum sizes"));
        }
        check_size(spec, batch, sources.len(), per)?;
        if let Some(s) = sources.iter().find(|s| s.sample >= batch) {
            return Err(Error::invalid("pool_plan", format!("sample {} outside batch {batch}", s.sample)));
        }
        let mut slot_order: Vec<usize> = (0..sources.len()).collect();
        slot_order.sort_by_key(|&k| (sources[k].sample, sources[k].camera_key));
        if slot_order
            .windows(2)
            .any(|w| (sources[w[0]].sample, sources[w[0]].camera_key) == (sources[w[1]].sample, sources[w[1]].camera_key))
        {
            return Err(Error::invalid("pool_plan", "duplicate (sample, camera) reference"));
        }

        // Counting sort by output cell. Visiting slots by camera key and
        // points in order keeps each run in canonical order.
        let cells = spec.cells();
        let mut assignment = vec![OUTSIDE; sources.len() * per];
        let mut starts = vec![0u32; batch * cells + 1];
        for (slot, s) in sources.iter().enumerate() {
            let base = (s.sample * cells) as u32;
            for (a, p) in assignment[slot * per..(slot + 1) * per].iter_mut().zip(s.points) {
                if let Some(flat) = spec.flat_cell_of(p[0], p[1]) {
                    *a = base + flat as u32;
                    starts[*a as usize + 1] += 1;
                }
            }
        }
        for i in 1..starts.len() {
            starts[i] += starts[i - 1];
        }
        let total = starts[batch * cells] as usize;
        let mut cursor = starts.clone();
        let mut order = vec![0u32; total];
        for &slot in &slot_order {
            for (g, &a) in (slot * per..).zip(&assignment[slot * per..(slot + 1) * per]) {
                if a != OUTSIDE {
                    order[cursor[a as usize] as usize] = g as u32;
                    cursor[a as usize] += 1;
                }
            }
        }
        let segments = (0..batch * cells)
            .filter(|&o| starts[o + 1] > starts[o])
            .map(|o| (o as u32, starts[o], starts[o + 1]))
            .collect();
        let slot_samples = sources.iter().map(|s| s.sample).collect();
        Ok(Self::assemble(spec, batch, per, order, segments, assignment, slot_samples))
    }

    /// Plan from an arbitrary list of point references. The result does not
    /// depend on the order of `records`.
    pub fn from_records(
        spec: &BevGridSpec,
        batch: usize,
        slots: usize,
        points_per_slot: usize,
        records: &[PointRecord],
    ) -> Result<Self> {
        check_size(spec, batch, slots, points_per_slot)?;
        let cells = spec.cells();
        let mut entries = Vec::with_capacity(records.len());
        for r in records {
            if r.sample >= batch || r.slot >= slots || r.offset >= points_per_slot {
                return Err(Error::invalid(
                    "pool_plan",
                    format!("record {r:?} outside batch {batch} / slots {slots} / points {points_per_slot}"),
                ));
            }
            if let Some(flat) = spec.flat_cell_of(r.position[0], r.position[1]) {
                entries.push(Entry {
                    out: (r.sample * cells + flat) as u32,
                    camera_key: r.camera_key as u32,
                    point: r.point_index as u32,
                    slot: r.slot as u32,
                    offset: r.offset as u32,
                });
            }
        }
        entries.sort_unstable();
        if entries
            .windows(2)
            .any(|w| (w[0].out, w[0].camera_key, w[0].point) == (w[1].out, w[1].camera_key, w[1].point))
        {
            return Err(Error::invalid("pool_plan", "duplicate (sample, camera, point) reference"));
        }

        let mut segments = Vec::new();
        let mut start = 0usize;
        for i in 1..=entries.len() {
            if i == entries.len() || entries[i].out != entries[start].out {
                segments.push((entries[start].out, start as u32, i as u32));
                start = i;
            }
        }
        let mut assignment = vec![OUTSIDE; slots * points_per_slot];
        // Slots with no in-bounds points never reach the reduction, so any
        // sample will do for them.
        let mut slot_samples = vec![0; slots];
        for e in &entries {
            assignment[e.slot as usize * points_per_slot + e.offset as usize] = e.out;
            slot_samples[e.slot as usize] = e.out as usize / cells;
        }
        let order = entries
            .iter()
            .map(|e| (e.slot as usize * points_per_slot + e.offset as usize) as u32)
            .collect();
        Ok(Self::assemble(spec, batch, points_per_slot, order, segments, assignment, slot_samples))
    }

    fn assemble(
        spec: &BevGridSpec,
        batch: usize,
        points_per_slot: usize,
        order: Vec<u32>,
        segments: Vec<(u32, u32, u32)>,
        assignment: Vec<u32>,
        slot_samples: Vec<usize>,
    ) -> Self {
        let cells = spec.cells();
        let mut sample_segments = Vec::with_capacity(batch + 1);
        let mut s = 0usize;
        for b in 0..=batch {
            let bound = (b * cells) as u32;
            while s < segments.len() && segments[s].0 < bound {
                s += 1;
            }
            sample_segments.push(s);
        }
        PoolPlan {
            spec: *spec,
            batch,
            slots: slot_samples.len(),
            points_per_slot,
            order,
            segments,
            sample_segments,
            assignment,
            slot_samples,
        }
    }

    pub fn spec(&self) -> &BevGridSpec {
        &self.spec
    }

    /// Number of point references inside the grid.
    pub fn in_bounds(&self) -> usize {
        self.order.len()
    }

    pub fn occupied_cells(&self) -> usize {
        self.segments.len()
    }

    fn check_features<T: Scalar>(&self, features: &Tensor<T>) -> Result<usize> {
        let shape = features.shape();
        let per: usize = shape.iter().skip(2).product();
        if shape.len() < 2 || shape[0] != self.slots || per != self.points_per_slot {
            return Err(Error::shape(
                "voxel_pool",
                format!(
                    "features {shape:?} do not match plan ({} slots × C × {} points)",
                    self.slots, self.points_per_slot
                ),
            ));
        }
        Ok(shape[1])
    }

    /// Segmented sum; `slots[k]` holds slot `k`'s `C × points` features.
    /// Each channel of a sample is gathered from one contiguous row holding
    /// that channel for every slot.
    fn reduce<T: Scalar>(&self, slots: &[&[T]], channels: usize) -> Vec<T> {
        let cells = self.spec.cells();
        let per = self.points_per_slot;
        let mut out = vec![T::zero(); self.batch * channels * cells];
        par::for_each_chunk(&mut out, cells, |bc, plane| {
            let (b, c) = (bc / channels, bc % channels);
            let segs = &self.segments[self.sample_segments[b]..self.sample_segments[b + 1]];
            if segs.is_empty() {
                return;
            }
            let mut row = vec![T::zero(); slots.len() * per];
            for (k, s) in slots.iter().enumerate().filter(|(k, _)| self.slot_samples[*k] == b) {
                row[k * per..(k + 1) * per].copy_from_slice(&s[c * per..(c + 1) * per]);
            }
            let base = (b * cells) as u32;
            for &(o, start, end) in segs {
                let mut acc = T::zero();
                for &g in &self.order[start as usize..end as usize] {
                    acc = acc + row[g as usize];
                }
                plane[(o - base) as usize] = acc;
            }
        });
        out
    }

    /// Routes the gradient of each cell back to every in-bounds point that
    /// fed it; points outside the grid get zero.
    pub fn gradient<T: Scalar>(&self, upstream: &[T], channels: usize) -> Vec<T> {
        let cells = self.spec.cells();
        let per = self.points_per_slot;
        let mut grad = vec![T::zero(); self.slots * channels * per];
        par::for_each_chunk(&mut grad, per, |sc, row| {
            let (slot, c) = (sc / channels, sc % channels);
            for (g, &o) in row.iter_mut().zip(&self.assignment[slot * per..(slot + 1) * per]) {
                if o != OUTSIDE {
                    let (b, cell) = (o as usize / cells, o as usize % cells);
                    *g = upstream[(b * channels + c) * cells + cell];
                }
            }
        });
        grad
    }

    /// Sum-pools `slots × C × ...` features into a `batch × C × grid_x × grid_y`
    /// map.
    pub fn pool<T: Scalar>(self: &Arc<Self>, features: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.check_features(features)?;
        let size = channels * self.points_per_slot;
        let slots: Vec<&[T]> = (0..self.slots).map(|k| &features.data()[k * size..(k + 1) * size]).collect();
        let out = self.reduce(&slots, channels);
        let plan = Arc::clone(self);
        Ok(Tensor::from_op(
            "voxel_pool",
            vec![self.batch, channels, self.spec.grid_x, self.spec.grid_y],
            out,
            vec![features.clone()],
            Box::new(move |g| vec![Some(plan.gradient(g, channels))]),
        ))
    }
}

fn check_lifted<T: Scalar>(lifted: &[LiftedFeatures<T>]) -> Result<(usize, usize)> {
    let first = lifted
        .first()
        .ok_or_else(|| Error::invalid("voxel_pool", "no cameras to pool"))?;
    let c = first.features.shape()[0];
    let per = first.points.len();
    for l in lifted {
        let s = l.features.shape();
        if s.len() != 4 || s[0] != c {
            return Err(Error::shape("voxel_pool", format!("camera features {s:?} do not share C = {c}")));
        }
        let p = &l.points;
        if s[1..] != [p.depth_bins, p.height, p.width] || p.len() != per {
            return Err(Error::shape(
                "voxel_pool",
                format!("features {s:?} do not match frustum {}×{}×{}", p.depth_bins, p.height, p.width),
            ));
        }
    }
    Ok((c, per))
}

/// Reference scatter: walks cameras by key and points in order, adding each
/// in-bounds feature onto its cell. Output `C × grid_x × grid_y`.
pub fn voxel_pool_naive<T: Scalar>(lifted: &[LiftedFeatures<T>], spec: &BevGridSpec) -> Result<Tensor<T>> {
    let (channels, per) = if lifted.is_empty() { (1, 0) } else { check_lifted(lifted)? };
    let cells = spec.cells();
    let mut order: Vec<usize> = (0..lifted.len()).collect();
    order.sort_by_key(|&k| lifted[k].camera_key);

    let mut out = vec![T::zero(); channels * cells];
    let mut assignment: Vec<Vec<Option<usize>>> = vec![Vec::new(); lifted.len()];
    for &k in &order {
        let cam = &lifted[k];
        let f = cam.features.data();
        assignment[k] = cam.points.points.iter().map(|p| spec.flat_cell_of(p[0], p[1])).collect();
        for (p, cell) in assignment[k].iter().enumerate() {
            let Some(cell) = *cell else { continue };
            for c in 0..channels {
                let o = &mut out[c * cells + cell];
                *o = *o + f[c * per + p];
            }
        }
    }
    let parents: Vec<Tensor<T>> = lifted.iter().map(|l| l.features.clone()).collect();
    Ok(Tensor::from_op(
        "voxel_pool_naive",
        vec![channels, spec.grid_x, spec.grid_y],
        out,
        parents,
        Box::new(move |g| {
            assignment
                .iter()
                .map(|cells_of| {
                    let mut gf = vec![T::zero(); channels * per];
                    for (p, cell) in cells_of.iter().enumerate() {
                        if let Some(cell) = *cell {
                            for c in 0..channels {
                                gf[c * per + p] = g[c * cells + cell];
                            }
                        }
                    }
                    Some(gf)
                })
                .collect()
        }),
    ))
}

/// Sort-and-segment pooling of one sample's cameras; bit-identical to
/// [`voxel_pool_naive`]. Output `C × grid_x × grid_y`.
pub fn voxel_pool_sorted<T: Scalar>(lifted: &[LiftedFeatures<T>], spec: &BevGridSpec) -> Result<Tensor<T>> {
    if lifted.is_empty() {
        return Ok(Tensor::zeros(&[1, spec.grid_x, spec.grid_y]));
    }
    let (channels, _) = check_lifted(lifted)?;
    let sources: Vec<PoolSource> = lifted
        .iter()
        .map(|l| PoolSource {
            sample: 0,
            camera_key: l.camera_key,
            points: &l.points.points,
        })
        .collect();
    let plan = Arc::new(PoolPlan::new(spec, 1, &sources)?);
    let slots: Vec<&[T]> = lifted.iter().map(|l| l.features.data()).collect();
    let out = plan.reduce(&slots, channels);
    let parents: Vec<Tensor<T>> = lifted.iter().map(|l| l.features.clone()).collect();
    let size = channels * plan.points_per_slot;
    Ok(Tensor::from_op(
        "voxel_pool",
        vec![channels, spec.grid_x, spec.grid_y],
        out,
        parents,
        Box::new(move |g| {
            let grad = plan.gradient(g, channels);
            (0..plan.slots).map(|k| Some(grad[k * size..(k + 1) * size].to_vec())).collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_frustum, CameraRig, DepthBins};
    use crate::tensor::gradcheck::{grad_check, random_tensor};
    use crate::tensor::{narrow_channels, reshape, softmax_over_channels};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f64; 3]>) -> Arc<FrustumPoints> {
        let n = points.len();
        Arc::new(FrustumPoints {
            depth_bins: 1,
            height: 1,
            width: n,
            points,
        })
    }

    fn camera(key: usize, points: Vec<[f64; 3]>, feats: Vec<f32>, c: usize) -> LiftedFeatures<f32> {
        let n = points.len();
        LiftedFeatures {
            camera_key: key,
            features: Tensor::from_vec(&[c, 1, 1, n], feats).unwrap(),
            points: cloud(points),
        }
    }

    fn random_cameras(seed: u64, cams: usize, per: usize, c: usize, spread: f64) -> Vec<LiftedFeatures<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<usize> = (0..cams).collect();
        keys.shuffle(&mut rng);
        keys.into_iter()
            .map(|key| {
                let pts = (0..per)
                    .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-2.0..2.0)])
                    .collect();
                let f = (0..c * per).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                camera(key, pts, f, c)
            })
            .collect()
    }

    #[test]
    fn lift_outer_product() {
        let ctx = Tensor::<f64>::from_vec(&[2, 1, 1], vec![2.0, 3.0]).unwrap();
        let dep = Tensor::<f64>::from_vec(&[2, 1, 1], vec![0.25, 0.75]).unwrap();
        let g = lift(&ctx, &dep).unwrap();
        assert_eq!(g.shape(), &[2, 2, 1, 1]);
        assert_eq!(g.data(), &[0.5, 1.5, 0.75, 2.25]);
    }

    #[test]
    fn lift_one_hot_places_context_in_bin() {
        let ctx = random_tensor::<f64>(&[3, 2, 2], 4);
        let mut d = vec![0.0; 5 * 4];
        d[2 * 4..3 * 4].fill(1.0);
        let dep = Tensor::from_vec(&[5, 2, 2], d).unwrap();
        let g = lift(&ctx, &dep).unwrap();
        for c in 0..3 {
            for k in 0..5 {
                for p in 0..4 {
                    let want = if k == 2 { ctx.data()[c * 4 + p] } else { 0.0 };
                    assert_eq!(g.data()[(c * 5 + k) * 4 + p], want);
                }
            }
        }
    }

    #[test]
    fn lift_rejects_mismatched_pixels() {
        let ctx = Tensor::<f32>::zeros(&[3, 2, 2]);
        let dep = Tensor::<f32>::zeros(&[4, 2, 3]);
        assert!(matches!(lift(&ctx, &dep), Err(Error::Shape { .. })));
    }

    #[test]
    fn lift_gradient() {
        let r = grad_check(|t| lift(&t[0], &t[1]), &[vec![2, 3, 2, 4], vec![2, 5, 2, 4]], 1e-6, 9);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn two_points_one_cell_add() {
        let spec = BevGridSpec::surround();
        let cam = camera(0, vec![[0.1, 0.1, 0.0], [0.2, 0.15, 1.0]], vec![1.0, 3.0, 2.0, 4.0], 2);
        for pooled in [voxel_pool_naive(std::slice::from_ref(&cam), &spec), voxel_pool_sorted(&[cam], &spec)] {
            let pooled = pooled.unwrap();
            let cell = spec.flat_cell_of(0.1, 0.1).unwrap();
            assert_eq!(pooled.data()[cell], 4.0);
            assert_eq!(pooled.data()[spec.cells() + cell], 6.0);
        }
    }

    #[test]
    fn origin_point_hits_only_center_cell() {
        let spec = BevGridSpec::surround();
        let cam = camera(0, vec![[0.0, 0.0, 0.0]], vec![1.5], 1);
        let pooled = voxel_pool_sorted(&[cam], &spec).unwrap();
        let nonzero: Vec<usize> = (0..spec.cells()).filter(|&i| pooled.data()[i] != 0.0).collect();
        assert_eq!(nonzero, vec![100 * 200 + 100]);
    }

    #[test]
    fn empty_and_out_of_bounds_give_zeros() {
        let spec = BevGridSpec::new(8.0, 8.0, 0.5, 0.5).unwrap();
        let empty = voxel_pool_sorted::<f32>(&[], &spec).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let far = camera(0, vec![[50.0, 0.0, 0.0], [0.0, -4.0001, 0.0], [4.0, 0.0, 0.0]], vec![1.0; 3], 1);
        for pooled in [voxel_pool_naive(std::slice::from_ref(&far), &spec), voxel_pool_sorted(&[far], &spec)] {
            assert!(pooled.unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mass_is_conserved() {
        let spec = BevGridSpec::new(20.0, 20.0, 0.5, 0.5).unwrap();
        let cams = random_cameras(3, 3, 400, 4, 14.0);
        let pooled = voxel_pool_sorted(&cams, &spec).unwrap();
        for c in 0..4 {
            let got: f64 = pooled.data()[c * spec.cells()..(c + 1) * spec.cells()].iter().map(|&v| v as f64).sum();
            let want: f64 = cams
                .iter()
                .flat_map(|cam| {
                    cam.points.points.iter().enumerate().filter_map(move |(p, pt)| {
                        spec.cell_of(pt[0], pt[1]).map(|_| cam.features.data()[c * 400 + p] as f64)
                    })
                })
                .sum();
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn sorted_matches_naive_bit_exactly() {
        let spec = BevGridSpec::new(16.0, 16.0, 0.25, 0.25).unwrap();
        for seed in 0..8 {
            let cams = random_cameras(seed, 4, 250, 8, 9.0);
            let a = voxel_pool_naive(&cams, &spec).unwrap();
            let b = voxel_pool_sorted(&cams, &spec).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn gradient_routes_to_contributing_points() {
        let spec = BevGridSpec::new(8.0, 8.0, 1.0, 1.0).unwrap();
        let pts = vec![[0.2, 0.2, 0.0], [0.7, 0.9, 0.0], [30.0, 0.0, 0.0]];
        let plan = Arc::new(
            PoolPlan::new(&spec, 1, &[PoolSource { sample: 0, camera_key: 0, points: &pts }]).unwrap(),
        );
        let mut up = vec![0.0f64; spec.cells()];
        let cell = spec.flat_cell_of(0.2, 0.2).unwrap();
        up[cell] = 2.5;
        let g = plan.gradient(&up, 1);
        assert_eq!(g, vec![2.5, 2.5, 0.0]);
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let spec = BevGridSpec::new(6.0, 6.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<[f64; 3]> = (0..12).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), 0.0]).collect();
        let pts = cloud(pts);
        let r = grad_check(
            |t| {
                let cam = LiftedFeatures { camera_key: 0, features: t[0].clone(), points: pts.clone() };
                voxel_pool_sorted(&[cam], &spec)
            },
            &[vec![3, 1, 1, 12]],
            1e-6,
            13,
        );
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            |t| {
                let cam = LiftedFeatures { camera_key: 0, features: t[0].clone(), points: pts.clone() };
                voxel_pool_naive(&[cam], &spec)
            },
            &[vec![3, 1, 1, 12]],
            1e-6,
            14,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn lift_and_pool_composite_gradient() {
        let rig = CameraRig::surround(64, 32);
        let bins = DepthBins::new(1.0, 9.0, 2.0).unwrap();
        let spec = BevGridSpec::new(20.0, 20.0, 1.0, 1.0).unwrap();
        let frusta: Vec<Arc<FrustumPoints>> = rig
            .iter()
            .take(2)
            .map(|c| Arc::new(build_frustum(&c.intrinsics, &c.extrinsics, 16, &bins).unwrap()))
            .collect();
        let r = grad_check(
            |t| {
                let lifted = (0..2)
                    .map(|k| {
                        let depth = softmax_over_channels(&t[0], 4 * k, 4 * k + 4)?;
                        let ctxk = reshape(&narrow_channels(&t[1], 3 * k, 3 * k + 3)?, &[3, 2, 4])?;
                        let dk = crate::tensor::reshape(&depth, &[4, 2, 4])?;
                        Ok(LiftedFeatures { camera_key: k, features: lift(&ctxk, &dk)?, points: frusta[k].clone() })
                    })
                    .collect::<Result<Vec<_>>>()?;
                voxel_pool_sorted(&lifted, &spec)
            },
            &[vec![1, 8, 2, 4], vec![1, 6, 2, 4]],
            1e-4,
            15,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn translation_by_one_cell_shifts_output() {
        let spec = BevGridSpec::new(10.0, 10.0, 0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                // Keep points away from cell edges so the shift is exact.
                let i = rng.gen_range(2..16) as f64;
                let j = rng.gen_range(0..20) as f64;
                [i * 0.5 - 5.0 + 0.25, j * 0.5 - 5.0 + 0.25, 0.0]
            })
            .collect();
        let f: Vec<f32> = (0..60).map(|_| rng.gen_range(0.1f32..1.0)).collect();
        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 0.5, p[1], p[2]]).collect();
        let a = voxel_pool_sorted(&[camera(0, pts, f.clone(), 1)], &spec).unwrap();
        let b = voxel_pool_sorted(&[camera(0, shifted, f, 1)], &spec).unwrap();
        for i in 0..spec.grid_x - 1 {
            for j in 0..spec.grid_y {
                assert_eq!(a.data()[i * spec.grid_y + j], b.data()[(i + 1) * spec.grid_y + j]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn marginalizing_depth_recovers_context(seed in 0u64..1000, d in 1usize..9) {
            let ctx = random_tensor::<f32>(&[4, 3, 5], seed);
            let logits = random_tensor::<f32>(&[1, d, 3, 5], seed + 1);
            let dep = crate::tensor::reshape(&softmax_over_channels(&logits, 0, d).unwrap(), &[d, 3, 5]).unwrap();
            let g = lift(&ctx, &dep).unwrap();
            for c in 0..4 {
                for p in 0..15 {
                    let s: f32 = (0..d).map(|k| g.data()[(c * d + k) * 15 + p]).sum();
                    prop_assert!((s - ctx.data()[c * 15 + p]).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn camera_list_order_is_irrelevant(seed in 0u64..500) {
            let spec = BevGridSpec::new(12.0, 12.0, 0.5, 0.5).unwrap();
            let mut cams = random_cameras(seed, 4, 120, 3, 5.0);
            let a = voxel_pool_sorted(&cams, &spec).unwrap();
            cams.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 7));
            let b = voxel_pool_sorted(&cams, &spec).unwrap();
            let c = voxel_pool_naive(&cams, &spec).unwrap();
            prop_assert_eq!(a.data(), b.data());
            prop_assert_eq!(a.data(), c.data());
        }

        #[test]
        fn shuffled_point_records_give_identical_output(seed in 0u64..500) {
            let spec = BevGridSpec::new(6.0, 6.0, 1.0, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let mut records: Vec<PointRecord> = (0..n)
                .map(|k| PointRecord {
                    sample: 0,
                    camera_key: k % 3,
                    point_index: k / 3,
                    slot: 0,
                    offset: k,
                    position: [rng.gen_range(-3.5..3.5), rng.gen_range(-3.5..3.5), 0.0],
                })
                .collect();
            let feats: Vec<f32> = (0..2 * n).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
            let features = Tensor::from_vec(&[1, 2, n], feats.clone()).unwrap();
            let a = Arc::new(PoolPlan::from_records(&spec, 1, 1, n, &records).unwrap()).pool(&features).unwrap();

            // Move every record (and its feature) to a new position in the list.
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut moved = vec![0.0f32; 2 * n];
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..2 {
                    moved[c * n + new] = feats[c * n + old];
                }
            }
            records = perm.iter().enumerate().map(|(new, &old)| PointRecord { offset: new, ..records[old] }).collect();
            let features = Tensor::from_vec(&[1, 2, n], moved).unwrap();
            let b = Arc::new(PoolPlan::from_records(&spec, 1, 1, n, &records).unwrap()).pool(&features).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
