use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const BINS: usize = 256;

/// Global threshold maximizing the between-class variance of a 256-bin
/// histogram. Returns `None` for a constant image.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    let width = (hi - lo) as f64 / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + ((best_bin + 1) as f64 * width) as f32)
}

/// Foreground mask of one plane: above the Otsu threshold, or above zero
/// when the plane is constant.
pub fn binarize(values: &[f32]) -> Vec<bool> {
    match otsu_threshold(values) {
        Some(th) => values.iter().map(|&v| v >= th).collect(),
        None => values.iter().map(|&v| v > 0.0).collect(),
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-item IoU between the binarized `generated` images and binary `control` masks.
pub fn adherence_each(generated: &FeatureMap, control: &FeatureMap) -> Result<Vec<f64>> {
    control.expect_shape(generated.shape(), "adherence control")?;
    if let Some(v) = control.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!(
            "adherence expects a binary control mask, found {v}"
        )));
    }
    let per = generated.numel() / generated.shape()[0];
    Ok(generated
        .data()
        .chunks(per)
        .zip(control.data().chunks(per))
        .map(|(g, c)| {
            let c: Vec<bool> = c.iter().map(|&v| v == 1.0).collect();
            iou(&binarize(g), &c)
        })
        .collect())
}

/// Mean IoU over the batch, in `[0, 1]`.
pub fn adherence(generated: &FeatureMap, control: &FeatureMap) -> Result<f64> {
    let each = adherence_each(generated, control)?;
    Ok(each.iter().sum::<f64>() / each.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(f: impl Fn(usize, usize) -> bool) -> FeatureMap {
        FeatureMap::from_fn([1, 1, 8, 8], |i| if f(i / 8, i % 8) { 1.0 } else { 0.0 })
    }

    #[test]
    fn set_examples() {
        let a = plane(|_, x| x < 4);
        let b = plane(|_, x| x < 6);
        assert_eq!(adherence(&a, &a).unwrap(), 1.0);
        assert_eq!(adherence(&a, &plane(|_, x| x >= 4)).unwrap(), 0.0);
        assert!((adherence(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = plane(|_, _| false);
        assert_eq!(adherence(&empty, &empty).unwrap(), 1.0);
        assert!(adherence(&a, &FeatureMap::full([1, 1, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn otsu_separates_two_levels() {
        let img = FeatureMap::from_fn([1, 1, 8, 8], |i| {
            if i % 8 < 3 {
                0.4 + (i % 5) as f32 * 0.01
            } else {
                -0.9
            }
        });
        let mask = plane(|_, x| x < 3);
        assert_eq!(adherence(&img, &mask).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(bits_a in proptest::collection::vec(any::<bool>(), 64),
                                 bits_b in proptest::collection::vec(any::<bool>(), 64)) {
            let a = plane(|y, x| bits_a[y * 8 + x]);
            let b = plane(|y, x| bits_b[y * 8 + x]);
            let ab = adherence(&a, &b).unwrap();
            prop_assert_eq!(ab, adherence(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
