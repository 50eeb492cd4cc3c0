//! Binary checkpoint of a training run: parameters, centers, Adam state and
//! the generator state, little-endian.
//!
//! Layout: `FDRM`, u32 version, u32 P, D, M, K, then f64 arrays W_d (M×P×D),
//! W_s (M×D×D), W_e (M×D×D), W_cls (D×K), latent centers (M×D), class
//! centers (K×M), Adam first then second moments in the same parameter order,
//! u64 Adam step count, u64 generator state.

use std::fs;
use std::path::Path;

use crate::data::ByteCursor;
use crate::error::{FdrlError, Result};
use crate::model::{CenterBank, HyperParams, ModelParams};
use crate::numerics::DenseMatrix;
use crate::trainer::Trainer;

pub const CKPT_MAGIC: [u8; 4] = *b"FDRM";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// `M × D`
    pub latent_centers: DenseMatrix,
    /// `K × M`
    pub class_centers: DenseMatrix,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step_count: u64,
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            params: t.params.clone(),
            latent_centers: t.centers.latent.centers.clone(),
            class_centers: t.centers.class.centers.clone(),
            first_moment: t.adam.first_moment.clone(),
            second_moment: t.adam.second_moment.clone(),
            step_count: t.adam.step_count,
            rng_state: t.rng.state(),
        }
    }

    /// `(M, D, P, K)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.params.dims()
    }

    /// Fails unless the stored shapes match `hp`.
    pub fn check_against(&self, hp: &HyperParams) -> Result<()> {
        let (m, d, p, k) = self.dims();
        let want = (hp.n_latent, hp.latent_dim, hp.input_dim, hp.n_classes);
        if (m, d, p, k) != want {
            return Err(FdrlError::Format(format!(
                "checkpoint has M={m} D={d} P={p} K={k}, expected M={} D={} P={} K={}",
                want.0, want.1, want.2, want.3
            )));
        }
        Ok(())
    }

    /// Centers with the stored values and `hp`'s update rate.
    pub fn centers(&self, hp: &HyperParams) -> CenterBank {
        let mut bank = CenterBank::new(hp);
        bank.latent.centers = self.latent_centers.clone();
        bank.class.centers = self.class_centers.clone();
        bank
    }

    pub fn encode(&self) -> Vec<u8> {
        let (m, d, p, k) = self.dims();
        let n_params: usize = self.params.matrices().map(|w| w.data().len()).sum();
        let mut out = Vec::with_capacity(24 + 8 * (3 * n_params + m * d + k * m) + 16);
        out.extend_from_slice(&CKPT_MAGIC);
        for v in [CKPT_VERSION, p as u32, d as u32, m as u32, k as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put = |w: &DenseMatrix| {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.params.matrices().for_each(&mut put);
        put(&self.latent_centers);
        put(&self.class_centers);
        self.first_moment.matrices().for_each(&mut put);
        self.second_moment.matrices().for_each(&mut put);
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != CKPT_MAGIC {
            return Err(FdrlError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(FdrlError::Format(format!("unsupported checkpoint version {version}")));
        }
        let p = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let m = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        if p == 0 || d == 0 || m == 0 || k == 0 {
            return Err(FdrlError::Format(format!("checkpoint has a zero dimension: P={p} D={d} M={m} K={k}")));
        }
        let n_params = m * (p * d + 2 * d * d) + d * k;
        let expected = 8 * (3 * n_params + m * d + k * m) + 16;
        if cur.remaining() != expected {
            return Err(FdrlError::Format(format!(
                "checkpoint body is {} bytes, expected {expected} for P={p} D={d} M={m} K={k}",
                cur.remaining()
            )));
        }

        let read_params = |cur: &mut ByteCursor| -> Result<ModelParams> {
            let mut w = ModelParams::zeros(m, d, p, k);
            for mat in w.matrices_mut() {
                for v in mat.data_mut() {
                    *v = cur.f64()?;
                }
            }
            Ok(w)
        };
        let params = read_params(&mut cur)?;
        let mut latent_centers = DenseMatrix::zeros(m, d);
        let mut class_centers = DenseMatrix::zeros(k, m);
        for mat in [&mut latent_centers, &mut class_centers] {
            for v in mat.data_mut() {
                *v = cur.f64()?;
            }
        }
        let first_moment = read_params(&mut cur)?;
        let second_moment = read_params(&mut cur)?;
        let step_count = cur.u64()?;
        let rng_state = cur.u64()?;
        Ok(Self {
            params,
            latent_centers,
            class_centers,
            first_moment,
            second_moment,
            step_count,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
