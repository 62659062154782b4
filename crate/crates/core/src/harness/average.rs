use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{checkpoint, Model, ModelParams};
use crate::numerics::Tensor;

/// Element-wise mean of parameter sets, accumulated in f64.
pub fn average_params(sets: &[ModelParams<f32>]) -> Result<ModelParams<f32>> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| Error::Contract("nothing to average".into()))?;
    for p in rest {
        first.check_compatible(p)?;
    }
    let n = sets.len() as f64;
    let mut out = BTreeMap::new();
    for (name, t) in first.iter() {
        let mut acc: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        for p in rest {
            for (a, &x) in acc.iter_mut().zip(p.get(name)?.data()) {
                *a += x as f64;
            }
        }
        let mean = acc.into_iter().map(|a| (a / n) as f32).collect();
        let mut avg = Tensor::new(t.shape().to_vec(), mean)?;
        avg.set_requires_grad(t.requires_grad());
        out.insert(name.to_string(), avg);
    }
    Ok(ModelParams::from_map(out))
}

/// Loads the checkpoints and averages their parameters. Sidecars must
/// agree on model type, architecture and vocabulary.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Model<f32>> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Contract("no checkpoints to average".into()))?;
    let mut model = checkpoint::load(first.as_ref())?;
    let side = checkpoint::load_sidecar(first.as_ref())?;
    let mut sets = vec![model.params.clone()];
    for p in &paths[1..] {
        let other = checkpoint::load_sidecar(p.as_ref())?;
        if other != side {
            return Err(Error::CheckpointIncompatible(format!(
                "{} was trained with a different model description",
                p.as_ref().display()
            )));
        }
        sets.push(checkpoint::load_params(p.as_ref())?);
    }
    model.params = average_params(&sets)?;
    Ok(model)
}

/// The `n` best candidates by score, highest first; equal scores prefer
/// the later entry.
pub fn select_top(candidates: &[(PathBuf, f64)], n: usize) -> Vec<PathBuf> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(b.cmp(&a)));
    idx.into_iter().take(n).map(|i| candidates[i].0.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelType, Vocab};
    use crate::numerics::Rng;

    fn small(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            downsample_factor: 2,
            dropout_rate: 0.0,
            feat_dim: 3,
        };
        let mut m = Model::new(cfg, Vocab::synthetic(4), ModelType::MaskCtc, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::stream(seed, 3);
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.normal() as f32);
        }
        m
    }

    #[test]
    fn one_set_is_identity() {
        let m = small(1);
        assert_eq!(average_params(std::slice::from_ref(&m.params)).unwrap(), m.params);
    }

    #[test]
    fn opposite_sets_cancel() {
        let a = small(1);
        let mut b = a.clone();
        b.params.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x = -*x));
        let avg = average_params(&[a.params, b.params]).unwrap();
        assert!(avg.iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn files_match_direct_mean() {
        let dir = tempfile::tempdir().unwrap();
        let models: Vec<Model<f32>> = (0..3).map(small).collect();
        let paths: Vec<PathBuf> = (0..3).map(|i| dir.path().join(format!("{i}.mctc"))).collect();
        for (m, p) in models.iter().zip(&paths) {
            checkpoint::save(m, p).unwrap();
        }
        let avg = average_checkpoints(&paths).unwrap();
        for (name, t) in avg.params.iter() {
            for (i, &x) in t.data().iter().enumerate() {
                let sum: f64 = models.iter().map(|m| m.params.get(name).unwrap().data()[i] as f64).sum();
                assert_eq!(x, (sum / 3.0) as f32);
            }
        }
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let a = small(1);
        let mut cfg = a.config.clone();
        cfg.d_model = 4;
        let b: Model<f32> = Model::new(cfg, a.vocab.clone(), a.kind, &mut Rng::new(2)).unwrap();
        assert!(matches!(
            average_params(&[a.params.clone(), b.params.clone()]),
            Err(Error::CheckpointIncompatible(_))
        ));
        let c: Model<f32> = Model::new(a.config.clone(), a.vocab.clone(), ModelType::CtcOnly, &mut Rng::new(2)).unwrap();
        assert!(average_params(&[a.params, c.params]).is_err());
        assert!(average_params(&[]).is_err());
    }

    #[test]
    fn top_selection() {
        let c: Vec<(PathBuf, f64)> = [0.5, 0.9, 0.7, 0.9, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &s)| (PathBuf::from(i.to_string()), s))
            .collect();
        let names: Vec<String> = select_top(&c, 3).iter().map(|p| p.display().to_string()).collect();
        assert_eq!(names, ["3", "1", "2"]);
        assert_eq!(select_top(&c, 10).len(), 5);
    }
}
