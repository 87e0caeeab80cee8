//! Reference implementations the library is checked against. Each one is
//! written from the definition, not from the library code.
#![allow(dead_code)]

use lentil_sort::geometry::{iou, Detection, NUM_CLASSES};
use lentil_sort::{BBox64, Detection64, LineConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CELL_PX: f64 = 0.001;

/// Number of grid cells whose centres fall in `[lo, hi]`.
fn cells_in(lo: f64, hi: f64) -> i64 {
    // Cell k covers [k*c, (k+1)*c) and has its centre at (k + 0.5) * c.
    let first = (lo / CELL_PX - 0.5).ceil() as i64;
    let last = (hi / CELL_PX - 0.5).floor() as i64;
    (last - first + 1).max(0)
}

fn cells_in_box(b: &BBox64) -> i64 {
    cells_in(b.x_min(), b.x_max()) * cells_in(b.y_min(), b.y_max())
}

/// IoU by counting 0.001 px cells. A cell lies in an axis-aligned box iff
/// its centre lies in both of the box's intervals, so counting per axis is
/// the same as scanning the 2-D grid.
pub fn raster_iou(a: &BBox64, b: &BBox64) -> f64 {
    let ix = cells_in(a.x_min().max(b.x_min()), a.x_max().min(b.x_max()));
    let iy = cells_in(a.y_min().max(b.y_min()), a.y_max().min(b.y_max()));
    let inter = ix * iy;
    let union = cells_in_box(a) + cells_in_box(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Full 2-D scan over integer-px boxes at 0.001 px. Returns (inter, union)
/// cell counts.
pub fn raster_scan_2d(a: [i64; 4], b: [i64; 4]) -> (i64, i64) {
    let scale = (1.0 / CELL_PX) as i64;
    let inside = |r: [i64; 4], x: i64, y: i64| {
        x >= r[0] * scale && x < r[2] * scale && y >= r[1] * scale && y < r[3] * scale
    };
    let (x0, y0) = (a[0].min(b[0]) * scale, a[1].min(b[1]) * scale);
    let (x1, y1) = (a[2].max(b[2]) * scale, a[3].max(b[3]) * scale);
    let (mut inter, mut union) = (0i64, 0i64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += i64::from(ia && ib);
            union += i64::from(ia || ib);
        }
    }
    (inter, union)
}

/// Quadratic NMS reference: rank by descending objectness (stable), then
/// keep a detection iff no higher-ranked kept detection overlaps it by more
/// than the threshold. Returns the kept indices in rank order.
pub fn nms_reference(dets: &[Detection64], threshold: f64) -> Vec<usize> {
    let n = dets.len();
    let mut overlap = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            overlap[i][j] = iou(&dets[i].bbox, &dets[j].bbox);
        }
    }
    let mut rank: Vec<usize> = (0..n).collect();
    for i in 1..n {
        let mut k = i;
        while k > 0 && dets[rank[k - 1]].objectness() < dets[rank[k]].objectness() {
            rank.swap(k - 1, k);
            k -= 1;
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &rank {
        if kept.iter().all(|&k| overlap[k][i] <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn uniform_probs() -> [f64; NUM_CLASSES] {
    [1.0 / NUM_CLASSES as f64; NUM_CLASSES]
}

pub fn one_hot(class: usize) -> [f64; NUM_CLASSES] {
    let mut p = [0.0; NUM_CLASSES];
    p[class] = 1.0;
    p
}

pub fn random_box<R: Rng>(rng: &mut R, max_side: f64) -> BBox64 {
    let w = rng.random_range(5.0..max_side);
    let h = rng.random_range(5.0..max_side);
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    BBox64::new(x, y, x + w, y + h).unwrap()
}

/// Ten boxes with distinct objectness, clustered so that many overlap.
pub fn random_instance<R: Rng>(rng: &mut R) -> Vec<Detection64> {
    (0..10)
        .map(|_| {
            let b = random_box(rng, 50.0);
            Detection::new(b, rng.random_range(0.0..1.0), uniform_probs()).unwrap()
        })
        .collect()
}

/// `fire_at` written out from the transport equation: the grain last seen
/// at `along` at time `t` covers the remaining distance to the ejection
/// point at belt speed, and the valve is opened early by its switch time.
pub fn closed_form_fire_at(t: f64, along: f64, config: &LineConfig) -> f64 {
    let distance = config.firing_line_mm + config.nozzle_offset_mm - along;
    t + distance / config.belt_speed - config.valve_switch_ms / 1000.0
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
