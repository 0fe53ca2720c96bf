//! Receiver: zero padding, I/Q demodulation into token features, JSCC
//! decoding to a coarse cloud and two ×4 offset upsampling stages.

use num_complex::Complex64;
use tokcomm_tensor::{Activation, Graph, Linear, Mlp, ParamStore, RandomSource, Var};

use crate::config::ModelConfig;
use crate::encoder::PtBlock;
use crate::error::{CoreError, Result};
use crate::modulator::SymbolStream;

/// Copies per point in each upsampling stage.
pub const UPSAMPLE: usize = 4;
const STAGES: usize = 2;

/// Appends complex zeros up to `n_mod` symbols.
pub fn zero_pad(received: &SymbolStream, n_mod: usize) -> Result<SymbolStream> {
    if received.len() > n_mod {
        return Err(CoreError::Contract(format!(
            "{} received symbols exceed N_mod. = {n_mod}",
            received.len()
        )));
    }
    let mut out = received.clone();
    out.symbols.resize(n_mod, Complex64::new(0.0, 0.0));
    out.mask = None;
    Ok(out)
}

/// Graph form of [`zero_pad`] on an R × 2 symbol matrix.
pub fn zero_pad_var(g: &mut Graph, x: Var, n_mod: usize) -> Result<Var> {
    if g.value(x).rows() > n_mod {
        return Err(CoreError::Contract(format!(
            "{} received symbols exceed N_mod. = {n_mod}",
            g.value(x).rows()
        )));
    }
    Ok(g.pad_rows(x, n_mod)?)
}

/// Two non-overlapping expansion maps, one per I/Q component. With kernel
/// equal to stride over a length-N_mod. input, each is a dense
/// N_mod. → (N/16 · N_demod.) map; the branches are summed.
#[derive(Clone, Debug)]
pub struct Demodulator {
    pub in_phase: Linear,
    pub quadrature: Linear,
    pub tokens: usize,
    pub dim: usize,
}

impl Demodulator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let tokens = cfg.decoded_tokens();
        let dim = cfg.demod_dim;
        Ok(Self {
            in_phase: Linear::new(store, "demod.i", cfg.n_mod, tokens * dim, rng)?,
            quadrature: Linear::new(store, "demod.q", cfg.n_mod, tokens * dim, rng)?,
            tokens,
            dim,
        })
    }

    /// N_mod. × 2 padded symbols to N/16 × N_demod. features, tokens as rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, padded: Var) -> Result<Var> {
        let n_mod = self.in_phase.input;
        if g.shape(padded) != [n_mod, 2] {
            return Err(CoreError::Config(format!(
                "demodulator expects {n_mod} x 2 symbols, got {:?}",
                g.shape(padded)
            )));
        }
        let i = g.slice_cols(padded, 0, 1)?;
        let q = g.slice_cols(padded, 1, 2)?;
        let i = g.reshape(i, &[1, n_mod])?;
        let q = g.reshape(q, &[1, n_mod])?;
        let fi = self.in_phase.forward(g, store, i)?;
        let fq = self.quadrature.forward(g, store, q)?;
        let merged = g.add(fi, fq)?;
        Ok(g.reshape(merged, &[self.tokens, self.dim])?)
    }
}

/// Decoded token coordinates and their refined features.
#[derive(Clone, Copy, Debug)]
pub struct DecodedTokens {
    /// N/16 × 3.
    pub coords: Var,
    /// N/16 × N_demod.
    pub features: Var,
}

/// Linear head to coarse coordinates, a PT block over them and a second
/// linear head to the token coordinates.
#[derive(Clone, Debug)]
pub struct JsccDecoder {
    pub coarse: Linear,
    pub block: PtBlock,
    pub head: Linear,
}

impl JsccDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let d = cfg.demod_dim;
        Ok(Self {
            coarse: Linear::new(store, "dec.coarse", d, 3, rng)?,
            block: PtBlock::new(store, "dec.pt", d, cfg.attention_k, rng)?,
            head: Linear::new(store, "dec.head", d, 3, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<DecodedTokens> {
        let coarse = self.coarse.forward(g, store, features)?;
        let refined = self.block.forward(g, store, features, coarse)?;
        let coords = self.head.forward(g, store, refined)?;
        Ok(DecodedTokens {
            coords,
            features: refined,
        })
    }
}

/// One ×4 stage: per copy k, an offset head Δ_k (tanh-ended) and a feature
/// head Φ_k.
#[derive(Clone, Debug)]
pub struct UpsampleStage {
    pub offsets: Vec<Mlp>,
    pub features: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Detokenizer {
    pub stages: Vec<UpsampleStage>,
    pub range: f64,
}

impl Detokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let d = cfg.demod_dim;
        let h = cfg.upsample_hidden;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let mut offsets = Vec::with_capacity(UPSAMPLE);
            let mut features = Vec::with_capacity(UPSAMPLE);
            for k in 0..UPSAMPLE {
                offsets.push(Mlp::new(
                    store,
                    &format!("detok.{s}.delta{k}"),
                    d,
                    &[h, 3],
                    Activation::Relu,
                    Activation::Tanh,
                    rng,
                )?);
                features.push(Mlp::new(
                    store,
                    &format!("detok.{s}.phi{k}"),
                    d,
                    &[d],
                    Activation::Relu,
                    Activation::Relu,
                    rng,
                )?);
            }
            stages.push(UpsampleStage { offsets, features });
        }
        Ok(Self {
            stages,
            range: cfg.offset_range,
        })
    }

    /// N/16 tokens to N points. Copies are stacked copy-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: DecodedTokens) -> Result<Var> {
        let (mut x, mut f) = (tokens.coords, tokens.features);
        for stage in &self.stages {
            let mut xs = Vec::with_capacity(UPSAMPLE);
            let mut fs = Vec::with_capacity(UPSAMPLE);
            for (delta, phi) in stage.offsets.iter().zip(&stage.features) {
                let d = delta.forward(g, store, f)?;
                let d = g.scale(d, self.range);
                xs.push(g.add(x, d)?);
                fs.push(phi.forward(g, store, f)?);
            }
            x = g.concat_rows(&xs)?;
            f = g.concat_rows(&fs)?;
        }
        Ok(x)
    }
}
