//! Detection post-processing math: box overlap, suppression, class
//! probabilities, training loss terms and the pixel/belt calibration.
//!
//! Everything here is a pure function of its inputs.

use thiserror::Error;

use crate::scalar::{Real, Scalar};

/// Number of grain classes produced by the classifier head.
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("loss target must have one-hot class probabilities and objectness 0 or 1")]
    NonOneHotTarget,
    #[error("negative loss weight")]
    NegativeWeight,
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("pixel {point} lies outside the {size} image")]
    OutOfImage { point: String, size: String },
}

/// Axis-aligned box in continuous image pixels, stored in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x_min: T,
    y_min: T,
    x_max: T,
    y_max: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max]
            .iter()
            .all(|v| v.is_finite_value());
        if !finite {
            return Err(GeometryError::InvalidBox("non-finite coordinate".into()));
        }
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(GeometryError::InvalidBox(format!(
                "corners out of order: ({x_min:?}, {y_min:?}) .. ({x_max:?}, {y_max:?})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from the center/size parameterisation a detector head emits.
    pub fn from_center(cx: T, cy: T, width: T, height: T) -> Result<Self, GeometryError> {
        if width < T::zero() || height < T::zero() {
            return Err(GeometryError::InvalidBox("negative size".into()));
        }
        let two = T::one() + T::one();
        let hw = width / two;
        let hh = height / two;
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn x_min(&self) -> T {
        self.x_min
    }
    pub fn y_min(&self) -> T {
        self.y_min
    }
    pub fn x_max(&self) -> T {
        self.x_max
    }
    pub fn y_max(&self) -> T {
        self.y_max
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::one() + T::one();
        (
            (self.x_min + self.x_max) / two,
            (self.y_min + self.y_max) / two,
        )
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min_of(other.x_max) - self.x_min.max_of(other.x_min);
        let h = self.y_max.min_of(other.y_max) - self.y_min.max_of(other.y_min);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Uniform scaling about the image origin; `factor` must be positive.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    /// Intersects the box with `[0, width] x [0, height]`. Returns `None`
    /// when nothing of the box remains inside the image.
    pub fn clipped(&self, width: T, height: T) -> Option<Self> {
        let x_min = self.x_min.max_of(T::zero());
        let y_min = self.y_min.max_of(T::zero());
        let x_max = self.x_max.min_of(width);
        let y_max = self.y_max.min_of(height);
        if x_min > x_max || y_min > y_max {
            return None;
        }
        Some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }
}

/// Intersection over union (Jaccard index). A zero-area union yields 0.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    inter / union
}

/// One detector output: a box, its objectness and a class distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    objectness: T,
    class_probs: [T; NUM_CLASSES],
}

impl<T: Real> Detection<T> {
    pub fn new(
        bbox: BBox<T>,
        objectness: T,
        class_probs: [T; NUM_CLASSES],
    ) -> Result<Self, GeometryError> {
        if !(objectness >= T::zero() && objectness <= T::one()) {
            return Err(GeometryError::InvalidDetection(format!(
                "objectness {objectness:?} outside [0, 1]"
            )));
        }
        check_distribution(&class_probs).map_err(GeometryError::InvalidDetection)?;
        Ok(Self {
            bbox,
            objectness,
            class_probs,
        })
    }

    pub fn objectness(&self) -> T {
        self.objectness
    }

    pub fn class_probs(&self) -> &[T; NUM_CLASSES] {
        &self.class_probs
    }

    /// Index of the most probable class; ties go to the lower index.
    pub fn argmax_class(&self) -> usize {
        argmax(&self.class_probs)
    }
}

pub(crate) fn check_distribution<T: Real>(probs: &[T]) -> Result<(), String> {
    if let Some(p) = probs.iter().find(|p| !(**p >= T::zero()) || !p.is_finite()) {
        return Err(format!("class probability {p:?} is negative or non-finite"));
    }
    let sum = probs.iter().fold(T::zero(), |acc, p| acc + *p);
    if (sum - T::one()).abs() > T::PROB_TOLERANCE {
        return Err(format!("class probabilities sum to {sum:?}"));
    }
    Ok(())
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Detections are visited in descending objectness (stable for equal
/// scores); a detection is dropped when its IoU with an already kept one
/// exceeds `iou_threshold`. The result keeps that descending order.
pub fn nms<T: Real>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .objectness
            .partial_cmp(&dets[a].objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut kept: Vec<Detection<T>> = Vec::with_capacity(dets.len());
    let mut suppressed = vec![false; order.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        kept.push(dets[i]);
        for (later, &j) in order.iter().enumerate().skip(rank + 1) {
            if !suppressed[later] && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    kept
}

/// Raw classifier scores before normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logits<T>(pub [T; NUM_CLASSES]);

impl<T: Real> Logits<T> {
    pub fn new(z: [T; NUM_CLASSES]) -> Result<Self, GeometryError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidDetection("non-finite logit".into()));
        }
        Ok(Self(z))
    }

    pub fn softmax(&self) -> [T; NUM_CLASSES] {
        softmax(&self.0)
    }
}

/// Numerically stable softmax (max-subtracted) over any fixed-size vector.
pub fn softmax<T: Real, const N: usize>(z: &[T; N]) -> [T; N] {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = [T::zero(); N];
    let mut sum = T::zero();
    for (o, v) in out.iter_mut().zip(z) {
        *o = (*v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    out
}

/// Binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
pub fn bce<T: Real>(p: T, y: bool) -> T {
    let eps = T::BCE_EPSILON;
    let p = p.max(eps).min(T::one() - eps);
    if y {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub lambda_box: T,
    pub lambda_obj: T,
    pub lambda_cls: T,
}

impl<T: Real> LossWeights<T> {
    pub fn new(lambda_box: T, lambda_obj: T, lambda_cls: T) -> Result<Self, GeometryError> {
        if lambda_box < T::zero() || lambda_obj < T::zero() || lambda_cls < T::zero() {
            return Err(GeometryError::NegativeWeight);
        }
        Ok(Self {
            lambda_box,
            lambda_obj,
            lambda_cls,
        })
    }

    pub fn uniform() -> Self {
        Self {
            lambda_box: T::one(),
            lambda_obj: T::one(),
            lambda_cls: T::one(),
        }
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub box_term: T,
    pub obj_term: T,
    pub cls_term: T,
}

/// Detector training loss: `λ_box (1 - IoU) + λ_obj BCE(objectness) +
/// λ_cls mean_c BCE(p_c)`. The per-class BCE is averaged over all classes.
pub fn composite_loss<T: Real>(
    pred: &Detection<T>,
    target: &Detection<T>,
    w: &LossWeights<T>,
) -> Result<LossBreakdown<T>, GeometryError> {
    let target_obj = binary_label(target.objectness).ok_or(GeometryError::NonOneHotTarget)?;
    let mut target_labels = [false; NUM_CLASSES];
    for (label, p) in target_labels.iter_mut().zip(target.class_probs.iter()) {
        *label = binary_label(*p).ok_or(GeometryError::NonOneHotTarget)?;
    }
    if target_labels.iter().filter(|l| **l).count() != 1 {
        return Err(GeometryError::NonOneHotTarget);
    }

    let box_term = w.lambda_box * (T::one() - iou(&pred.bbox, &target.bbox));
    let obj_term = w.lambda_obj * bce(pred.objectness, target_obj);
    let cls_sum = pred
        .class_probs
        .iter()
        .zip(target_labels)
        .fold(T::zero(), |acc, (p, y)| acc + bce(*p, y));
    let cls_term = w.lambda_cls * cls_sum / T::lit(NUM_CLASSES as f64);
    Ok(LossBreakdown {
        total: box_term + obj_term + cls_term,
        box_term,
        obj_term,
        cls_term,
    })
}

fn binary_label<T: Real>(v: T) -> Option<bool> {
    if v == T::one() {
        Some(true)
    } else if v == T::zero() {
        Some(false)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint<T> {
    pub x: T,
    pub y: T,
}

/// Position on the belt: `along` follows belt travel, `cross` spans its width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeltPoint<T> {
    pub along: T,
    pub cross: T,
}

/// Linear camera model. The image vertical axis follows belt travel and the
/// horizontal axis runs across the belt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration<T> {
    pub mm_per_px_along: T,
    pub mm_per_px_cross: T,
    /// Pixel that maps to belt coordinate (0, 0).
    pub origin_px: PixelPoint<T>,
    pub image_width: T,
    pub image_height: T,
}

impl<T: Scalar> Calibration<T> {
    pub fn new(
        mm_per_px_along: T,
        mm_per_px_cross: T,
        origin_px: PixelPoint<T>,
        image_width: T,
        image_height: T,
    ) -> Result<Self, GeometryError> {
        if !(mm_per_px_along > T::zero() && mm_per_px_cross > T::zero()) {
            return Err(GeometryError::InvalidCalibration(
                "scales must be positive".into(),
            ));
        }
        if !(image_width > T::zero() && image_height > T::zero()) {
            return Err(GeometryError::InvalidCalibration(
                "image size must be positive".into(),
            ));
        }
        Ok(Self {
            mm_per_px_along,
            mm_per_px_cross,
            origin_px,
            image_width,
            image_height,
        })
    }

    pub fn contains(&self, p: PixelPoint<T>) -> bool {
        p.x >= T::zero() && p.x <= self.image_width && p.y >= T::zero() && p.y <= self.image_height
    }

    pub fn px_to_belt(&self, p: PixelPoint<T>) -> Result<BeltPoint<T>, GeometryError> {
        if !self.contains(p) {
            return Err(GeometryError::OutOfImage {
                point: format!("({:?}, {:?})", p.x, p.y),
                size: format!("{:?}x{:?}", self.image_width, self.image_height),
            });
        }
        Ok(BeltPoint {
            along: (p.y - self.origin_px.y) * self.mm_per_px_along,
            cross: (p.x - self.origin_px.x) * self.mm_per_px_cross,
        })
    }

    pub fn belt_to_px(&self, b: BeltPoint<T>) -> PixelPoint<T> {
        PixelPoint {
            x: b.cross / self.mm_per_px_cross + self.origin_px.x,
            y: b.along / self.mm_per_px_along + self.origin_px.y,
        }
    }
}
