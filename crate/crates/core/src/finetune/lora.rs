//! Low-rank additive weight updates `W' = W + (alpha / r) * B * A` that can
//! be attached to and detached from a parameter store without retraining.
//! Convolution kernels are treated as `(out, in * kh * kw)` matrices.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraTarget {
    pub name: String,
    /// `(r, k)`.
    pub a: Tensor,
    /// `(d, r)`.
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    name: String,
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
}

/// `(d, k)` view of a weight: matrices as-is, kernels flattened after axis 0.
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [d, k] => Some((*d, *k)),
        [d, i, h, w] => Some((*d, i * h * w)),
        _ => None,
    }
}

impl LoraAdapter {
    /// Adapter over `targets` with `A ~ N(0, 1/k)` and `B = 0`, so attaching it
    /// leaves every weight unchanged.
    pub fn new<T: Element>(
        name: impl Into<String>,
        store: &ParamStore<T>,
        targets: &[String],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(targets.len());
        for name in targets {
            let entry = store.entry(store.id(name)?);
            let (d, k) = matrix_dims(&entry.shape).ok_or_else(|| {
                Error::Config(format!(
                    "LoRA target `{name}` has shape {:?}; expected a matrix or kernel",
                    entry.shape
                ))
            })?;
            let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).unwrap();
            let a = Tensor::from_fn([rank, k], |_| normal.sample(&mut rng) as f32);
            out.push(LoraTarget {
                name: name.clone(),
                a,
                b: Tensor::zeros([d, rank]),
            });
        }
        Ok(LoraAdapter {
            name: name.into(),
            rank,
            alpha,
            targets: out,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) * B * A` for one target, computed in double precision.
    pub fn delta(&self, target: &LoraTarget) -> Vec<f64> {
        let (d, k, r) = (target.b.shape()[0], target.a.shape()[1], self.rank);
        let (a, b) = (target.a.data(), target.b.data());
        let s = self.scale();
        let mut out = vec![0.0; d * k];
        for i in 0..d {
            for j in 0..k {
                out[i * k + j] = s
                    * (0..r)
                        .map(|q| b[i * r + q] as f64 * a[q * k + j] as f64)
                        .sum::<f64>();
            }
        }
        out
    }

    fn check(&self, target: &LoraTarget, shape: &[usize]) -> Result<()> {
        let (d, k) = matrix_dims(shape).ok_or_else(|| {
            Error::Config(format!(
                "LoRA target `{}` is not a matrix or kernel",
                target.name
            ))
        })?;
        if target.a.shape() != [self.rank, k] || target.b.shape() != [d, self.rank] {
            return Err(Error::shape(
                format!("LoRA factors for `{}`", target.name),
                &[d, self.rank, k],
                &[
                    target.b.shape()[0],
                    target.a.shape()[0],
                    target.a.shape()[1],
                ],
            ));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = AdapterMeta {
            name: self.name.clone(),
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.iter().map(|t| t.name.clone()).collect(),
        };
        let mut a =
            Archive::new(serde_json::to_string(&meta).map_err(|e| Error::Archive(e.to_string()))?);
        for t in &self.targets {
            a.push(format!("lora.{}.A", t.name), t.a.clone());
            a.push(format!("lora.{}.B", t.name), t.b.clone());
        }
        Ok(a)
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let meta: AdapterMeta =
            serde_json::from_str(&a.config).map_err(|e| Error::Archive(e.to_string()))?;
        let mut targets = Vec::with_capacity(meta.targets.len());
        for name in meta.targets {
            let ta = a.take(&format!("lora.{name}.A"))?;
            let tb = a.take(&format!("lora.{name}.B"))?;
            targets.push(LoraTarget { name, a: ta, b: tb });
        }
        Ok(LoraAdapter {
            name: meta.name,
            rank: meta.rank,
            alpha: meta.alpha,
            targets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

/// Original values replaced by [`lora_attach`].
#[derive(Debug)]
#[must_use = "detach restores the original weights"]
pub struct LoraAttachment {
    pub adapter: String,
    saved: Vec<(ParamId, Tensor)>,
}

/// Add the adapter's update to every target weight in place.
pub fn lora_attach(adapter: &LoraAdapter, store: &mut ParamStore<f32>) -> Result<LoraAttachment> {
    let mut ids = Vec::with_capacity(adapter.targets.len());
    for t in &adapter.targets {
        let id = store.id(&t.name)?;
        adapter.check(t, &store.entry(id).shape)?;
        ids.push(id);
    }
    let mut saved = Vec::with_capacity(ids.len());
    for (t, id) in adapter.targets.iter().zip(ids) {
        let delta = adapter.delta(t);
        let w = store.value_mut(id);
        saved.push((id, w.clone()));
        for (v, d) in w.data_mut().iter_mut().zip(delta) {
            if d != 0.0 {
                *v = (*v as f64 + d) as f32;
            }
        }
    }
    Ok(LoraAttachment {
        adapter: adapter.name.clone(),
        saved,
    })
}

/// Restore the weights saved at attach time.
pub fn lora_detach(attachment: LoraAttachment, store: &mut ParamStore<f32>) {
    for (id, value) in attachment.saved {
        *store.value_mut(id) = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(name, t).unwrap();
        s
    }

    #[test]
    fn two_by_two_hand_case() {
        let mut s = store_with("w", Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let adapter = LoraAdapter {
            name: "hand".into(),
            rank: 1,
            alpha: 1.0,
            targets: vec![LoraTarget {
                name: "w".into(),
                a: Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(),
                b: Tensor::new([2, 1], vec![1.0, 0.0]).unwrap(),
            }],
        };
        let h = lora_attach(&adapter, &mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[2.0, 1.0, 0.0, 1.0]);
        lora_detach(h, &mut s);
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_factors_add_identity() {
        let w = Tensor::from_fn([3, 3], |i| i as f32 * 0.5 - 1.0);
        let mut s = store_with("w", w.clone());
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let adapter = LoraAdapter {
            name: "eye".into(),
            rank: 3,
            alpha: 3.0,
            targets: vec![LoraTarget {
                name: "w".into(),
                a: eye.clone(),
                b: eye.clone(),
            }],
        };
        let h = lora_attach(&adapter, &mut s).unwrap();
        let expect = w.zip_map(&eye, |a, b| a + b).unwrap();
        assert!(s.get("w").unwrap().bit_eq(&expect));
        lora_detach(h, &mut s);
        assert!(s.get("w").unwrap().bit_eq(&w));
    }

    #[test]
    fn zero_b_is_identity_and_kernels_flatten() {
        let k = Tensor::from_fn([4, 2, 3, 3], |i| (i as f32).sin());
        let mut s = store_with("conv.weight", k.clone());
        s.add("conv.bias", Tensor::zeros([4])).unwrap();
        let mut adapter = LoraAdapter::new("z", &s, &["conv.weight".into()], 2, 4.0, 1).unwrap();
        assert_eq!(adapter.targets[0].a.shape(), &[2, 18]);
        assert_eq!(adapter.targets[0].b.shape(), &[4, 2]);
        let h = lora_attach(&adapter, &mut s).unwrap();
        assert!(s.get("conv.weight").unwrap().bit_eq(&k));
        lora_detach(h, &mut s);
        adapter.targets[0].b = Tensor::full([4, 2], 0.1);
        let h = lora_attach(&adapter, &mut s).unwrap();
        assert!(!s.get("conv.weight").unwrap().bit_eq(&k));
        lora_detach(h, &mut s);
        assert!(s.get("conv.weight").unwrap().bit_eq(&k));
        assert!(LoraAdapter::new("bad", &s, &["conv.bias".into()], 1, 1.0, 0).is_err());
        assert!(LoraAdapter::new("bad", &s, &["conv.weight".into()], 0, 1.0, 0).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let s = store_with("w", Tensor::zeros([3, 5]));
        let mut a = LoraAdapter::new("style", &s, &["w".into()], 2, 2.0, 9).unwrap();
        a.targets[0].b = Tensor::from_fn([3, 2], |i| i as f32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("style.cdar");
        a.save(&p).unwrap();
        assert_eq!(LoraAdapter::load(&p).unwrap(), a);
    }
}
