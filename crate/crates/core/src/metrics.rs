//! Training losses, IoU evaluation and vehicle centroid extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::tensor::{Scalar, Tensor};

/// Mean binary cross-entropy between per-class logits and a 0/1 target of the
/// same shape, in the stable form `max(z, 0) - z*t + ln(1 + e^-|z|)`.
pub fn bce_occupancy<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "bce_occupancy",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    if let Some(v) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(Error::invalid("bce_occupancy", format!("target must be binary, found {v:?}")));
    }
    let n = logits.numel();
    let total: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| {
            let (z, t) = (z.as_f64(), t.as_f64());
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum();
    let (z, t) = (logits.clone(), target.clone());
    Ok(Tensor::from_op(
        "bce_occupancy",
        vec![1],
        vec![T::of(total / n as f64)],
        vec![logits.clone()],
        Box::new(move |g| {
            let k = g[0] / T::of(n as f64);
            let gi = z
                .data()
                .iter()
                .zip(t.data())
                .map(|(&z, &t)| (crate::tensor::logistic(z) - t) * k)
                .collect();
            vec![Some(gi)]
        }),
    ))
}

/// Mean absolute difference. The derivative at zero difference is taken as 0.
pub fn l1_appearance<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "l1_appearance",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.numel();
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    let (p, t) = (pred.clone(), target.clone());
    Ok(Tensor::from_op(
        "l1_appearance",
        vec![1],
        vec![T::of(total / n as f64)],
        vec![pred.clone()],
        Box::new(move |g| {
            let k = g[0] / T::of(n as f64);
            let gi = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&p, &t)| {
                    if p > t {
                        k
                    } else if p < t {
                        -k
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(gi)]
        }),
    ))
}

/// Running intersection and union counts per class, summed over every
/// sample added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    /// Adds one `S × X × Y` prediction; cells with `prob > threshold` count
    /// as positive.
    pub fn add(&mut self, pred_prob: &[f32], target: &[f32], threshold: f32) -> Result<()> {
        let classes = self.intersection.len();
        if pred_prob.len() != target.len() || classes == 0 || !pred_prob.len().is_multiple_of(classes) {
            return Err(Error::shape(
                "iou",
                format!("prediction of {} values vs target of {} for {classes} classes", pred_prob.len(), target.len()),
            ));
        }
        let plane = pred_prob.len() / classes;
        for s in 0..classes {
            let range = s * plane..(s + 1) * plane;
            for (&p, &t) in pred_prob[range.clone()].iter().zip(&target[range]) {
                let (p, t) = (p > threshold, t > 0.5);
                self.intersection[s] += (p && t) as u64;
                self.union[s] += (p || t) as u64;
            }
        }
        Ok(())
    }

    /// IoU per class; a class empty in both prediction and target scores 1.
    pub fn iou(&self) -> Vec<f64> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect()
    }
}

/// IoU per class of a single `S × X × Y` prediction.
pub fn iou_per_class(pred_prob: &Tensor<f32>, target: &Tensor<f32>, threshold: f32) -> Result<Vec<f64>> {
    if pred_prob.shape() != target.shape() || pred_prob.ndim() != 3 {
        return Err(Error::shape(
            "iou_per_class",
            format!("prediction {:?} vs target {:?}", pred_prob.shape(), target.shape()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("iou_per_class", format!("threshold {threshold} outside (0, 1)")));
    }
    let mut acc = IouAccumulator::new(pred_prob.shape()[0]);
    acc.add(pred_prob.data(), target.data(), threshold)?;
    Ok(acc.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleCentroid {
    pub x: f64,
    pub y: f64,
    pub longitudinal_distance: f64,
    pub cells: usize,
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Labels 4-connected components of a row-major `grid_x × grid_y` mask.
/// Returns one label per cell (`usize::MAX` for background) and the count.
pub fn label_components(mask: &[bool], grid_x: usize, grid_y: usize) -> (Vec<usize>, usize) {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for i in 0..grid_x {
        for j in 0..grid_y {
            let k = i * grid_y + j;
            if !mask[k] {
                continue;
            }
            for n in [(i > 0).then(|| k - grid_y), (j > 0).then(|| k - 1)].into_iter().flatten() {
                if mask[n] {
                    let (a, b) = (find(&mut parent, k), find(&mut parent, n));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; mask.len()];
    let mut root_label = vec![usize::MAX; mask.len()];
    let mut count = 0;
    for k in 0..mask.len() {
        if mask[k] {
            let r = find(&mut parent, k);
            if root_label[r] == usize::MAX {
                root_label[r] = count;
                count += 1;
            }
            labels[k] = root_label[r];
        }
    }
    (labels, count)
}

/// Centroids of the 4-connected vehicle blobs, nearest (by `|x|`) first.
pub fn vehicle_centroids(mask: &[bool], spec: &BevGridSpec) -> Result<Vec<VehicleCentroid>> {
    if mask.len() != spec.cells() {
        return Err(Error::shape(
            "vehicle_centroids",
            format!("mask of {} cells vs grid of {}", mask.len(), spec.cells()),
        ));
    }
    let (labels, count) = label_components(mask, spec.grid_x, spec.grid_y);
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); count];
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let l = labels[i * spec.grid_y + j];
            if l != usize::MAX {
                let (x, y) = spec.cell_center(i, j);
                sums[l].0 += x;
                sums[l].1 += y;
                sums[l].2 += 1;
            }
        }
    }
    let mut out: Vec<VehicleCentroid> = sums
        .into_iter()
        .map(|(sx, sy, n)| {
            let (x, y) = (sx / n as f64, sy / n as f64);
            VehicleCentroid {
                x,
                y,
                longitudinal_distance: x.abs(),
                cells: n,
            }
        })
        .collect();
    out.sort_by(|a, b| a.longitudinal_distance.total_cmp(&b.longitudinal_distance));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: Vec<ClassIou>,
    /// Absent when the appearance head is disabled.
    pub appearance_l1: Option<f64>,
    pub samples: usize,
    pub threshold: f32,
    /// How IoU was aggregated across samples.
    pub iou_reduction: String,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn new(classes: &[String], acc: &IouAccumulator, appearance_l1: Option<f64>, samples: usize, threshold: f32, fingerprint: &str) -> Self {
        let iou = acc.iou();
        MetricsReport {
            iou: classes
                .iter()
                .enumerate()
                .map(|(s, name)| ClassIou {
                    class: name.clone(),
                    iou: iou[s],
                    intersection: acc.intersection[s],
                    union: acc.union[s],
                })
                .collect(),
            appearance_l1,
            samples,
            threshold,
            iou_reduction: "intersection and union summed over the split; empty/empty counts as 1".into(),
            config_fingerprint: fingerprint.into(),
        }
    }

    pub fn class_iou(&self, class: &str) -> Option<f64> {
        self.iou.iter().find(|c| c.class == class).map(|c| c.iou)
    }
}
