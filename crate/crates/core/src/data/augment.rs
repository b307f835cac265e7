use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 5.0;

const STD_FLOOR: f64 = 1e-12;

/// Rotates every channel of a `C×H×W` image about its center, resampling
/// bilinearly. Samples that fall outside the source read as 0.
pub fn rotate_augment(image: &Tensor, angle_deg: f64) -> Result<Tensor> {
    if !(angle_deg.abs() <= MAX_ROTATION_DEG) {
        return Err(Error::config(format!(
            "rotation {angle_deg}° outside ±{MAX_ROTATION_DEG}°"
        )));
    }
    let [c, h, w] = *image.shape() else {
        return Err(Error::Dimension {
            op: "rotate_augment",
            lhs: image.shape().to_vec(),
            rhs: vec![],
        });
    };
    if angle_deg == 0.0 {
        return Ok(image.clone());
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: output pixel p reads source R(-θ)·p
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (ty, tx, weight) in taps {
                if weight == 0.0 || ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                for ch in 0..c {
                    out[(ch * h + y) * w + x] += weight * src[(ch * h + ty) * w + tx];
                }
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Uniform angle in `[−5°, +5°]`.
pub fn random_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)
}

/// Shifts and scales an image to zero mean and unit variance over all of
/// its values. A constant image maps to zeros.
pub fn normalize_image(image: &Tensor) -> Tensor {
    let n = image.len().max(1) as f64;
    let mean = image.sum() / n;
    let var = image.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return Tensor::zeros(image.shape());
    }
    image.map(|x| (x - mean) / std)
}

/// Copies per minority item, original included, so that the minority
/// total lands within one multiple of the majority: `round(major/minor)`.
pub fn rebalance_multiplier(majority: usize, minority: usize) -> Result<usize> {
    if minority == 0 {
        return Err(Error::input("cannot rebalance an empty class"));
    }
    Ok(((majority as f64 / minority as f64).round() as usize).max(1))
}

/// Grows every class smaller than the largest one by adding augmented
/// copies. `augment(item, k)` builds the `k`-th copy, `k ≥ 1`; copies are
/// placed right after their source. `multiplier` overrides the computed
/// [`rebalance_multiplier`].
pub fn rebalance<T, K, C, A>(items: Vec<T>, class_of: C, multiplier: Option<usize>, mut augment: A) -> Result<Vec<T>>
where
    K: Ord + Copy + std::fmt::Debug,
    C: Fn(&T) -> K,
    A: FnMut(&T, usize) -> Result<T>,
{
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for item in &items {
        *counts.entry(class_of(item)).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::input(format!("rebalance needs two classes, found {:?}", counts.keys())));
    }
    let majority = *counts.values().max().expect("non-empty");
    let mut factors = BTreeMap::new();
    for (&class, &n) in &counts {
        let m = match multiplier {
            Some(m) if n < majority => m.max(1),
            _ => rebalance_multiplier(majority, n)?,
        };
        log::debug!("rebalance {class:?}: {n} × {m}");
        factors.insert(class, m);
    }

    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let m = factors[&class_of(&item)];
        let copies = (1..m).map(|k| augment(&item, k)).collect::<Result<Vec<_>>>()?;
        out.push(item);
        out.extend(copies);
    }
    Ok(out)
}
