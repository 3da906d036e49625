//! Binary checkpoints.
//!
//! Layout (little-endian): magic `RSPKCHK1`, `u32` version, `u32` length plus
//! a UTF-8 JSON block with the model config, `u64` step, `u8` flag plus `f64`
//! validation perplexity, `u32` parameter count and one record per parameter
//! (`u32` name length, name, `u32` rank, `u64` dims, `f64` values), then a
//! `u8` flag and optional Adam state (three `f64` hyperparameters, `u64` step,
//! first and second moments in parameter order).

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::training::{Adam, AdamConfig};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RSPKCHK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub step: u64,
    pub val_ppl: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, val_ppl: Option<f64>, optimizer: Option<&Adam>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: optimizer.cloned(),
            step,
            val_ppl,
        }
    }

    /// Builds a model holding exactly these parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Copies the parameters into `model`, which must share the configuration.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::Mismatch(format!(
                "checkpoint config {} does not match model config {}",
                serde_json::to_string(&self.config)?,
                serde_json::to_string(model.config())?
            )));
        }
        if self.params.len() != model.params().len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, value) in self.params.iter() {
            model.params_mut().set(name, value.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&self.config)?;
        write_u32(w, json.len())?;
        w.write_all(&json)?;
        w.write_all(&self.step.to_le_bytes())?;
        match self.val_ppl {
            Some(p) => {
                w.write_all(&[1])?;
                w.write_all(&p.to_le_bytes())?;
            }
            None => w.write_all(&[0])?,
        }
        write_u32(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rank())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(adam) => {
                w.write_all(&[1])?;
                let c = adam.config;
                write_f64s(w, &[c.beta1, c.beta2, c.eps])?;
                w.write_all(&adam.step_count().to_le_bytes())?;
                for t in adam.first_moments().iter().chain(adam.second_moments()) {
                    write_f64s(w, t.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let len = read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        read_exact(r, &mut json)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        let step = read_u64(r)?;
        let val_ppl = match read_u8(r)? {
            0 => None,
            1 => Some(read_f64(r)?),
            f => return Err(Error::Format(format!("bad perplexity flag {f}"))),
        };
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let mut name = vec![0u8; n];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            if params.id(&name).is_some() {
                return Err(Error::Format(format!("parameter `{name}` appears twice")));
            }
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Format(format!("parameter `{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
            let implausible = || Error::Format(format!("parameter `{name}` has implausible shape {dims:?}"));
            let size = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .filter(|&s| s > 0 && s < (1 << 32))
                .and_then(|s| usize::try_from(s).ok())
                .ok_or_else(implausible)?;
            let shape = dims.iter().map(|&d| d as usize).collect();
            let data = read_f64s(r, size)?;
            params.add(name, Tensor::new(shape, data)?);
        }
        let optimizer = match read_u8(r)? {
            0 => None,
            1 => {
                let h = read_f64s(r, 3)?;
                let config = AdamConfig {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                };
                let opt_step = read_u64(r)?;
                let mut moments = Vec::with_capacity(2 * params.len());
                for _ in 0..2 {
                    for t in params.values() {
                        moments.push(Tensor::new(t.shape().to_vec(), read_f64s(r, t.len())?)?);
                    }
                }
                let v = moments.split_off(params.len());
                Some(Adam::from_parts(config, opt_step, moments, v, params.values())?)
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            step,
            val_ppl,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32 field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let bytes = n
        .checked_mul(8)
        .ok_or_else(|| Error::Format(format!("{n} values do not fit in memory")))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Element-wise mean over the `k` checkpoints with the lowest validation
/// perplexity (ties go to the earlier step).
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::Input("cannot average zero checkpoints".into()));
    }
    let mut ranked: Vec<(&Checkpoint, f64)> = Vec::new();
    for c in checkpoints {
        let ppl = c
            .val_ppl
            .ok_or_else(|| Error::Input(format!("checkpoint at step {} has no validation perplexity", c.step)))?;
        ranked.push((c, ppl));
    }
    if ranked.len() < k {
        return Err(Error::Input(format!("need {k} checkpoints, have {}", ranked.len())));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.step.cmp(&b.0.step)));
    ranked.truncate(k);

    let first = ranked[0].0;
    for (c, _) in &ranked[1..] {
        if c.config != first.config {
            return Err(Error::Mismatch(format!(
                "cannot average checkpoints of different architectures (steps {} and {})",
                first.step, c.step
            )));
        }
    }
    // running mean: exact when all inputs agree
    let mut params = first.params.clone();
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        let shape = params.get(id).shape().to_vec();
        for (n, (c, _)) in ranked.iter().enumerate().skip(1) {
            let t = c
                .params
                .by_name(&name)
                .filter(|t| t.shape() == shape.as_slice())
                .ok_or_else(|| Error::Mismatch(format!("parameter `{name}` differs between checkpoints")))?;
            let count = (n + 1) as f64;
            for (m, x) in params.get_mut(id).data_mut().iter_mut().zip(t.data()) {
                *m += (x - *m) / count;
            }
        }
    }
    let ppls: Vec<f64> = ranked.iter().map(|r| r.1).collect();
    log::info!("averaged {k} checkpoints with perplexities {ppls:?}");
    Ok(Checkpoint {
        config: first.config.clone(),
        params,
        optimizer: None,
        step: ranked.iter().map(|(c, _)| c.step).max().unwrap_or(0),
        val_ppl: None,
    })
}

/// Loads every file and averages as [`average_checkpoints`].
pub fn average_checkpoint_files<P: AsRef<Path>>(paths: &[P], k: usize) -> Result<Checkpoint> {
    let loaded = paths
        .iter()
        .map(|p| Checkpoint::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&loaded, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::position::PositionMode;

    fn small(d: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 2 * d,
            input_dim: 3,
            vocab_size: 7,
            max_len: 16,
            position_mode: PositionMode::Relative,
            ..ModelConfig::default()
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_with_optimizer() {
        let model = Model::new(small(8), 3).unwrap();
        let mut params = model.params().values().to_vec();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let grads: Vec<Tensor> = params.iter().map(|p| p.map(|v| v.sin())).collect();
        adam.update(&mut params, &grads, 0.01).unwrap();
        let c = Checkpoint::from_model(&model, 42, Some(3.25), Some(&adam));
        let buf = bytes(&c);
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_model().unwrap().params(), model.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = Checkpoint::from_model(&Model::new(small(8), 1).unwrap(), 0, None, None);
        let buf = bytes(&c);
        let mut flipped = buf.clone();
        flipped[0] ^= 1;
        assert!(matches!(
            Checkpoint::read_from(&mut flipped.as_slice()),
            Err(Error::Format(_))
        ));
        let mut version = buf.clone();
        version[8] = 9;
        let err = Checkpoint::read_from(&mut version.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        for cut in [4, 20, buf.len() / 2, buf.len() - 1] {
            let err = Checkpoint::read_from(&mut &buf[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{cut}: {err}");
        }
    }

    #[test]
    fn cross_config_load_names_both() {
        let c = Checkpoint::from_model(&Model::new(small(4), 1).unwrap(), 0, None, None);
        let mut target = Model::new(small(8), 1).unwrap();
        let err = c.apply_to(&mut target).unwrap_err().to_string();
        assert!(err.contains("\"d_model\":4") && err.contains("\"d_model\":8"), "{err}");
    }

    #[test]
    fn averaging_identities() {
        let model = Model::new(small(8), 5).unwrap();
        let c = Checkpoint::from_model(&model, 1, Some(2.0), None);
        let same = average_checkpoints(&[c.clone(), c.clone(), c.clone()], 3).unwrap();
        assert_eq!(same.params, c.params);

        let mut neg = c.clone();
        for t in neg.params.values_mut() {
            *t = t.map(|v| -v);
        }
        let zero = average_checkpoints(&[c.clone(), neg], 2).unwrap();
        assert!(zero.params.values().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn selection_is_by_perplexity_then_step() {
        let a = Model::new(small(8), 1).unwrap();
        let b = Model::new(small(8), 2).unwrap();
        let old = Checkpoint::from_model(&a, 100, Some(5.0), None);
        let new = Checkpoint::from_model(&b, 900, Some(9.0), None);
        let best = average_checkpoints(&[new.clone(), old.clone()], 1).unwrap();
        assert_eq!(best.params, old.params);
        let tie = Checkpoint::from_model(&b, 50, Some(5.0), None);
        let best = average_checkpoints(&[old, tie.clone()], 1).unwrap();
        assert_eq!(best.params, tie.params);

        let other = Checkpoint::from_model(&Model::new(small(4), 1).unwrap(), 1, Some(1.0), None);
        assert!(average_checkpoints(&[other, new.clone()], 2).is_err());
        assert!(average_checkpoints(&[new], 2).is_err());
    }
}
