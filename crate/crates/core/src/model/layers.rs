// Transformer building blocks recorded on a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Tape, Var};

use super::params::{AttnIds, EncoderLayerIds, FfnIds, NormIds};

pub(crate) const NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Stochastic parts of a training-mode forward pass.
pub struct TrainNoise {
    pub rng: ChaCha8Rng,
    pub dropout: f64,
    pub energy_noise: f64,
}

/// Cached keys and values of one self-attention layer for incremental use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub rows: usize,
}

/// Forward context: a tape, the bound parameters and optional training noise.
pub struct Fwd<'t, 'a> {
    pub t: &'t mut Tape<'a>,
    pub p: &'t [Var],
    pub noise: Option<&'t mut TrainNoise>,
    pub heads: usize,
}

impl Fwd<'_, '_> {
    pub fn param(&self, id: usize) -> Var {
        self.p[id]
    }

    pub fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Result<Var> {
        let y = self.t.matmul(x, self.p[w])?;
        match b {
            Some(b) => self.t.add_bias(y, self.p[b]),
            None => Ok(y),
        }
    }

    pub fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        self.t.layer_norm(x, self.p[ids.gain], self.p[ids.bias], NORM_EPS)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(noise) = self.noise.as_deref_mut() else {
            return Ok(x);
        };
        if noise.dropout == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - noise.dropout;
        let n = self.t.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if noise.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = self.t.shape(x).to_vec();
        let m = self.t.constant(&shape, mask)?;
        self.t.mul(x, m)
    }

    /// Gaussian perturbation of monotonic energies (training only).
    pub fn energy_noise(&mut self, e: Var) -> Result<Var> {
        let Some(noise) = self.noise.as_deref_mut() else {
            return Ok(e);
        };
        if noise.energy_noise == 0.0 {
            return Ok(e);
        }
        let n = self.t.value(e).len();
        let std = noise.energy_noise;
        let z: Vec<f64> = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut noise.rng))
            .collect();
        let shape = self.t.shape(e).to_vec();
        let z = self.t.constant(&shape, z)?;
        self.t.add(e, z)
    }

    pub fn ffn(&mut self, x: Var, ids: FfnIds) -> Result<Var> {
        let h = self.linear(x, ids.w1, Some(ids.b1))?;
        let h = self.t.relu(h);
        self.linear(h, ids.w2, Some(ids.b2))
    }

    /// Multi-head self-attention over `x` (already normalized). With a cache,
    /// `x` holds rows following the cached ones and the cache is extended.
    pub fn self_attention(
        &mut self,
        x: Var,
        ids: AttnIds,
        cache: Option<&mut KvCache>,
        causal: bool,
    ) -> Result<Var> {
        let n = self.t.shape(x)[0];
        let d = self.t.shape(x)[1];
        let q = self.linear(x, ids.wq, None)?;
        let k_new = self.linear(x, ids.wk, None)?;
        let v_new = self.linear(x, ids.wv, None)?;
        let (k, v, offset) = match cache {
            Some(c) => {
                let offset = c.rows;
                let (k, v) = if offset == 0 {
                    (k_new, v_new)
                } else {
                    let kc = self.t.constant(&[offset, d], c.keys.clone())?;
                    let vc = self.t.constant(&[offset, d], c.values.clone())?;
                    (self.t.concat_rows(&[kc, k_new])?, self.t.concat_rows(&[vc, v_new])?)
                };
                c.keys.extend_from_slice(self.t.value(k_new));
                c.values.extend_from_slice(self.t.value(v_new));
                c.rows += n;
                (k, v, offset)
            }
            None => (k_new, v_new, 0),
        };
        let total = offset + n;
        let mask = if causal && total > 1 {
            let data = (0..n)
                .flat_map(|i| (0..total).map(move |j| if j > offset + i { MASKED } else { 0.0 }))
                .collect();
            Some(self.t.constant(&[n, total], data)?)
        } else {
            None
        };
        let heads = self.heads;
        let dh = d / heads;
        let kt = self.t.transpose(k)?;
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.t.cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.t.rows(kt, h * dh, (h + 1) * dh)?;
            let vh = self.t.cols(v, h * dh, (h + 1) * dh)?;
            let s = self.t.matmul(qh, kh)?;
            let mut s = self.t.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = self.t.add(s, m)?;
            }
            let a = self.t.softmax(s, 1)?;
            ctx.push(self.t.matmul(a, vh)?);
        }
        let c = if heads == 1 { ctx[0] } else { self.t.concat_cols(&ctx)? };
        self.linear(c, ids.wo, None)
    }

    /// Pre-norm encoder layer.
    pub fn encoder_layer(
        &mut self,
        x: Var,
        ids: &EncoderLayerIds,
        cache: Option<&mut KvCache>,
        causal: bool,
    ) -> Result<Var> {
        let a = self.norm(x, ids.norm_attn)?;
        let a = self.self_attention(a, ids.attn, cache, causal)?;
        let a = self.dropout(a)?;
        let x = self.t.add(x, a)?;
        let f = self.norm(x, ids.norm_ffn)?;
        let f = self.ffn(f, ids.ffn)?;
        let f = self.dropout(f)?;
        self.t.add(x, f)
    }

    /// Adds sinusoidal encodings for absolute positions `offset..offset+n`.
    pub fn add_positions(&mut self, x: Var, offset: usize) -> Result<Var> {
        let shape = self.t.shape(x).to_vec();
        let pe = sinusoidal(offset, shape[0], shape[1]);
        let pe = self.t.constant(&shape, pe)?;
        self.t.add(x, pe)
    }
}

/// Row-major `[n×d]` sinusoidal position table starting at `offset`.
///
/// Column 0 holds the Nyquist-frequency wave `cos(π·pos) = (−1)^pos`
/// instead of `sin(pos)`, so position parity is linearly readable; the
/// other columns follow the usual sin/cos pairs.
pub fn sinusoidal(offset: usize, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for pos in offset..offset + n {
        for k in 0..d {
            if k == 0 {
                out.push(if pos % 2 == 0 { 1.0 } else { -1.0 });
                continue;
            }
            let rate = 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out.push(if k % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_first_row() {
        let pe = sinusoidal(0, 2, 4);
        assert_eq!(&pe[..4], &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe[4], -1.0);
        assert!((pe[5] - 1f64.cos()).abs() < 1e-15);
        assert_eq!(sinusoidal(1, 1, 4), pe[4..].to_vec());
        let far = sinusoidal(7, 2, 4);
        assert_eq!((far[0], far[4]), (-1.0, 1.0));
    }
}
