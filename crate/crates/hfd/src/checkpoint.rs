//! Checkpoint container.
//!
//! Layout (little-endian): `HFDK | version u8 | header_len u32 | header
//! (JSON) | tensors (f64) | crc32 u32`. The tensors are the EMA weights,
//! followed, when the optimizer state is included, by the raw weights and
//! both Adam moments, all in parameter order.

use std::path::Path;

use hfd_core::denoise::{LossKind, NetConfig, Tensor, TinyCondNet, TrainConfig, TrainState};
use hfd_core::NoiseSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, HfdError, Result};

pub const MAGIC: [u8; 4] = *b"HFDK";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> HfdError {
    HfdError::Checkpoint(msg.into())
}

/// Hash of everything a trained model depends on at sampling time: loss
/// kind, network shape and noise schedule.
pub fn config_hash(kind: LossKind, net: &NetConfig, sched: &NoiseSchedule) -> String {
    let canonical = serde_json::to_string(&(kind, net, sched)).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: LossKind,
    net: NetConfig,
    train: TrainConfig,
    step: u64,
    config_hash: String,
    shapes: Vec<Vec<usize>>,
    has_state: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: LossKind,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub step: u64,
    /// Averaged weights used for sampling.
    pub ema: Vec<Tensor>,
    /// Raw weights and Adam moments, present when training can resume.
    pub state: Option<(Vec<Tensor>, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn from_state(kind: LossKind, net: NetConfig, state: &TrainState, with_state: bool) -> Self {
        Self {
            kind,
            net,
            train: state.config.clone(),
            step: state.step,
            ema: state.ema.clone(),
            state: with_state.then(|| (state.params.clone(), state.adam_m.clone(), state.adam_v.clone())),
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(self.kind, &self.net, &self.train.sched)
    }

    /// The sampling network with EMA weights.
    pub fn network(&self) -> Result<TinyCondNet> {
        Ok(TinyCondNet::with_params(self.net.clone(), self.ema.clone())?)
    }

    /// Optimizer state for resuming; the step counter carries over.
    pub fn resume_state(&self) -> Result<TrainState> {
        let (params, m, v) = self.state.clone().ok_or_else(|| bad("no optimizer state stored"))?;
        let st = TrainState {
            step: self.step,
            params,
            adam_m: m,
            adam_v: v,
            ema: self.ema.clone(),
            config: self.train.clone(),
        };
        st.validate()?;
        Ok(st)
    }

    /// Refuses a model trained for another loss, schedule or conditioning.
    pub fn check_compatible(&self, kind: LossKind, sched: &NoiseSchedule, context_channels: usize) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("trained for {:?}, requested {kind:?}", self.kind)));
        }
        if kind == LossKind::Diffusion && self.train.sched != *sched {
            return Err(bad("noise schedule differs from the one used in training"));
        }
        if self.net.context_channels != context_channels {
            return Err(bad(format!(
                "expects {} context channels, got {context_channels} (HFD+ setting mismatch?)",
                self.net.context_channels
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            net: self.net.clone(),
            train: self.train.clone(),
            step: self.step,
            config_hash: self.config_hash(),
            shapes: self.ema.iter().map(|t| t.shape.clone()).collect(),
            has_state: self.state.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.ema.iter().for_each(|t| put(&t.data));
        if let Some((p, m, v)) = &self.state {
            p.iter().for_each(|t| put(&t.data));
            m.iter().for_each(|g| put(g));
            v.iter().for_each(|g| put(g));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != crc {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
        let json = body.get(9..9 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let mut rest = &body[9 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < 8 * n {
                return Err(bad("truncated tensors"));
            }
            let (head, tail) = rest.split_at(8 * n);
            rest = tail;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let sizes: Vec<usize> = h.shapes.iter().map(|s| s.iter().product()).collect();
        let tensors = |take: &mut dyn FnMut(usize) -> Result<Vec<f64>>| -> Result<Vec<Tensor>> {
            h.shapes.iter().zip(&sizes).map(|(s, &n)| Ok(Tensor::from_vec(s, take(n)?))).collect()
        };
        let ema = tensors(&mut take)?;
        let state = if h.has_state {
            let p = tensors(&mut take)?;
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some((p, m, v))
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let ck = Self {
            kind: h.kind,
            net: h.net,
            train: h.train,
            step: h.step,
            ema,
            state,
        };
        if ck.config_hash() != h.config_hash {
            return Err(bad("config hash mismatch"));
        }
        // Shapes must match the declared network.
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_at(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hfd_core::SeededStream;

    fn sample_ckpt(with_state: bool) -> Checkpoint {
        let net_cfg = NetConfig::gradcheck(3, 3);
        let net = TinyCondNet::new(net_cfg.clone(), &SeededStream::new(1)).unwrap();
        let mut st = TrainState::new(net.params().to_vec(), TrainConfig::default()).unwrap();
        st.step = 17;
        st.adam_m[0][0] = 0.25;
        Checkpoint::from_state(LossKind::Diffusion, net_cfg, &st, with_state)
    }

    #[test]
    fn round_trip() {
        for with in [false, true] {
            let c = sample_ckpt(with);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(back, c);
        }
        let st = sample_ckpt(true).resume_state().unwrap();
        assert_eq!((st.step, st.adam_m[0][0]), (17, 0.25));
        assert!(sample_ckpt(false).resume_state().is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample_ckpt(true).to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 9]).is_err());
        let mut flipped = b.clone();
        flipped[40] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn compatibility() {
        let c = sample_ckpt(false);
        let s = NoiseSchedule::default();
        c.check_compatible(LossKind::Diffusion, &s, 3).unwrap();
        assert!(c.check_compatible(LossKind::RectFlow, &s, 3).is_err());
        assert!(c.check_compatible(LossKind::Diffusion, &NoiseSchedule::new(1.0).unwrap(), 3).is_err());
        assert!(c.check_compatible(LossKind::Diffusion, &s, 4).is_err());
        let other = config_hash(LossKind::Diffusion, &c.net, &NoiseSchedule::new(1.0).unwrap());
        assert_ne!(other, c.config_hash());
    }
}
