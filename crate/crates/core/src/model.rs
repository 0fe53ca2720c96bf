//! The end-to-end system: tokenizer, both encoder branches, channel
//! adapters, rate allocator, modulator, channel and receiver.

use tokcomm_tensor::{Graph, ParamStore, RandomSource, Var};

use crate::channel::{channel_var, noise_power_for, ChannelRealization};
use crate::config::{ChannelKind, ModelConfig, RateLoss};
use crate::decoder::{zero_pad_var, Demodulator, Detokenizer, JsccDecoder};
use crate::encoder::{AuxEncoder, ChannelAdapter, MainEncoder};
use crate::error::{CoreError, Result};
use crate::geometry::PointCloud;
use crate::modulator::{
    make_codebook, modulate, normalize_power_var, Codebook, ModPath, ModulateOptions, RateAllocator,
    RateDecision,
};
use crate::tokenizer::PointTokenizer;

/// Channel used for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub csi_noise: f64,
}

impl ChannelSpec {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
            csi_noise: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub modulation: ModulateOptions,
    /// Gumbel noise in the rate allocator's level choice.
    pub rate_noise: bool,
    /// `None` skips the channel entirely (the decoder sees the normalized
    /// symbols as sent).
    pub channel: Option<ChannelSpec>,
}

impl ForwardOptions {
    pub fn train(cfg: &ModelConfig, channel: ChannelSpec) -> Self {
        Self {
            modulation: ModulateOptions::new(cfg.estimator, cfg.temperature),
            rate_noise: true,
            channel: Some(channel),
        }
    }

    /// Deterministic evaluation: no Gumbel or dither noise.
    pub fn eval(cfg: &ModelConfig, channel: Option<ChannelSpec>) -> Self {
        Self {
            modulation: ModulateOptions::new(cfg.estimator, cfg.temperature).eval(),
            rate_noise: false,
            channel,
        }
    }

    pub fn relaxed(mut self) -> Self {
        self.modulation.path = ModPath::Relaxed;
        self
    }
}

/// Everything one cloud produced in a forward pass.
#[derive(Clone, Debug)]
pub struct Transmission {
    /// N × 3 reconstruction.
    pub recon: Var,
    /// N_mod. × 2 modulated symbols before masking and normalization.
    pub symbols: Var,
    /// N_send × 2 normalized symbols handed to the channel.
    pub sent: Var,
    pub n_send: usize,
    /// Differentiable N_send (expected count in the backward pass).
    pub n_send_var: Var,
    pub level: usize,
    pub realization: Option<ChannelRealization>,
}

#[derive(Clone, Debug)]
pub struct TokComm {
    pub cfg: ModelConfig,
    pub codebook: Codebook,
    pub n_main: usize,
    pub n_aux: usize,
    pub tokenizer: PointTokenizer,
    pub main: MainEncoder,
    pub aux: Option<AuxEncoder>,
    pub adapters: Option<(ChannelAdapter, ChannelAdapter)>,
    pub rate: Option<RateAllocator>,
    pub demod: Demodulator,
    pub decoder: JsccDecoder,
    pub detok: Detokenizer,
}

impl TokComm {
    /// Builds the model and a fresh parameter store initialized from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RandomSource::new(seed).fork(0x1417);
        let (n_main, n_aux) = cfg.branch_sizes()?;
        let tokenizer = PointTokenizer::new(&mut store, cfg, &mut rng)?;
        let main = MainEncoder::new(&mut store, cfg, &mut rng)?;
        let aux = if n_aux > 0 {
            Some(AuxEncoder::new(&mut store, cfg, &mut rng)?)
        } else {
            None
        };
        let adapters = if cfg.channel_adapter {
            Some((
                ChannelAdapter::new(&mut store, "adapter.main", cfg, &mut rng)?,
                ChannelAdapter::new(&mut store, "adapter.aux", cfg, &mut rng)?,
            ))
        } else {
            None
        };
        let rate = if cfg.rate_allocator {
            Some(RateAllocator::new(&mut store, n_main, n_aux, cfg.temperature, &mut rng)?)
        } else {
            None
        };
        let model = Self {
            cfg: cfg.clone(),
            codebook: make_codebook(cfg.order)?,
            n_main,
            n_aux,
            tokenizer,
            main,
            aux,
            adapters,
            rate,
            demod: Demodulator::new(&mut store, cfg, &mut rng)?,
            decoder: JsccDecoder::new(&mut store, cfg, &mut rng)?,
            detok: Detokenizer::new(&mut store, cfg, &mut rng)?,
        };
        Ok((model, store))
    }

    /// N_mod. × 2√M logits (main rows first), adapted to `snr_db` when the
    /// adapters are enabled.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        snr_db: Option<f64>,
        rng: &mut RandomSource,
    ) -> Result<Var> {
        if cloud.len() != self.cfg.n_points {
            return Err(CoreError::Argument(format!(
                "model expects {} points, cloud has {}",
                self.cfg.n_points,
                cloud.len()
            )));
        }
        let tokens = self.tokenizer.tokenize(g, store, cloud, rng)?;
        let mut main = self.main.forward(g, store, &tokens, rng)?;
        let mut aux = match &self.aux {
            Some(a) => Some(a.forward(g, store, &tokens)?),
            None => None,
        };
        if let Some((am, aa)) = &self.adapters {
            let snr = snr_db.ok_or_else(|| {
                CoreError::Domain("the channel adapter needs a finite channel condition".into())
            })?;
            main = am.forward(g, store, main, snr)?;
            aux = match aux {
                Some(y) => Some(aa.forward(g, store, y, snr)?),
                None => None,
            };
        }
        Ok(match aux {
            Some(y) => g.concat_rows(&[main, y])?,
            None => main,
        })
    }

    fn decide_rate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        logits: Var,
        noise: bool,
        rng: &mut RandomSource,
    ) -> Result<RateDecision> {
        match &self.rate {
            Some(r) => r.forward(g, store, logits, noise, rng),
            None => Ok(RateAllocator::full(g, self.n_main, self.n_aux)),
        }
    }

    /// Receiver half: pad, demodulate, decode, upsample.
    pub fn receive(&self, g: &mut Graph, store: &ParamStore, received: Var) -> Result<Var> {
        let padded = zero_pad_var(g, received, self.cfg.n_mod)?;
        let feats = self.demod.forward(g, store, padded)?;
        let tokens = self.decoder.forward(g, store, feats)?;
        self.detok.forward(g, store, tokens)
    }

    /// Forward pass over a batch. Power normalization uses one scale for
    /// all symbols the batch transmits.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clouds: &[&PointCloud],
        opts: &ForwardOptions,
        rng: &mut RandomSource,
    ) -> Result<Vec<Transmission>> {
        if clouds.is_empty() {
            return Err(CoreError::Argument("empty batch".into()));
        }
        let snr = opts.channel.map(|c| c.snr_db).filter(|s| s.is_finite());
        let mut staged = Vec::with_capacity(clouds.len());
        for cloud in clouds {
            let logits = self.logits(g, store, cloud, snr, rng)?;
            let decision = self.decide_rate(g, store, logits, opts.rate_noise, rng)?;
            let symbols = modulate(g, logits, &self.codebook, &opts.modulation, rng)?;
            let masked = g.mul_col(symbols, decision.keep)?;
            let sent = g.slice_rows(masked, 0, decision.n_send)?;
            staged.push((symbols, sent, decision));
        }
        let blocks: Vec<Var> = staged.iter().map(|s| s.1).collect();
        let total: usize = staged.iter().map(|s| s.2.n_send).sum();
        let normalized = normalize_power_var(g, &blocks, total, 1.0)?;

        let mut out = Vec::with_capacity(clouds.len());
        for ((symbols, _, decision), sent) in staged.into_iter().zip(normalized) {
            let (received, realization) = match opts.channel {
                Some(c) => {
                    let (y, r) =
                        channel_var(g, sent, c.kind, noise_power_for(c.snr_db), c.csi_noise, rng)?;
                    (y, Some(r))
                }
                None => (sent, None),
            };
            let recon = self.receive(g, store, received)?;
            out.push(Transmission {
                recon,
                symbols,
                sent,
                n_send: decision.n_send,
                n_send_var: decision.n_send_var,
                level: decision.level,
                realization,
            });
        }
        Ok(out)
    }

    /// Mean Chamfer over the batch plus λ times the mean rate term when
    /// the rate allocator is enabled. Returns (loss, mean Chamfer).
    pub fn loss(
        &self,
        g: &mut Graph,
        clouds: &[&PointCloud],
        sent: &[Transmission],
        lambda: f64,
        orientation: RateLoss,
    ) -> Result<(Var, Var)> {
        let mut cds = Vec::with_capacity(clouds.len());
        let mut rates = Vec::with_capacity(clouds.len());
        for (cloud, t) in clouds.iter().zip(sent) {
            let target = g.constant(cloud.to_tensor());
            cds.push(g.chamfer(target, t.recon)?);
            let n_mod = self.cfg.n_mod as f64;
            rates.push(match orientation {
                RateLoss::Penalty => g.scale(t.n_send_var, 1.0 / n_mod),
                RateLoss::Verbatim => {
                    let inv = g.powf(t.n_send_var, -1.0);
                    g.scale(inv, n_mod)
                }
            });
        }
        let cd = g.concat_rows(&cds)?;
        let cd = g.mean(cd);
        if self.rate.is_none() {
            return Ok((cd, cd));
        }
        let rate = g.concat_rows(&rates)?;
        let rate = g.mean(rate);
        let rate = g.scale(rate, lambda);
        Ok((g.add(cd, rate)?, cd))
    }

    /// Reconstructs one cloud in evaluation mode.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        cloud: &PointCloud,
        channel: Option<ChannelSpec>,
        rng: &mut RandomSource,
    ) -> Result<(PointCloud, usize)> {
        let mut g = Graph::new();
        let opts = ForwardOptions::eval(&self.cfg, channel);
        let t = self.forward_batch(&mut g, store, &[cloud], &opts, rng)?.remove(0);
        Ok((PointCloud::from_tensor(g.value(t.recon))?, t.n_send))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{synth_shape, ShapeKind};

    #[test]
    fn desk_forward_shapes_and_grid() {
        let cfg = ModelConfig::default();
        let (model, store) = TokComm::new(&cfg, 1).unwrap();
        let cloud = synth_shape(ShapeKind::Sphere, 256, &mut RandomSource::new(0)).unwrap();
        let mut g = Graph::new();
        let opts = ForwardOptions::train(&cfg, ChannelSpec::awgn(5.0));
        let out = model
            .forward_batch(&mut g, &store, &[&cloud], &opts, &mut RandomSource::new(2))
            .unwrap();
        assert_eq!(g.shape(out[0].recon), &[256, 3]);
        assert_eq!(g.shape(out[0].symbols), &[40, 2]);
        assert!(g
            .value(out[0].symbols)
            .data()
            .iter()
            .all(|&v| model.codebook.contains(v)));
        let p = g.value(out[0].sent).data().iter().map(|v| v * v).sum::<f64>() / 40.0;
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adapter_rejects_unbounded_snr() {
        let cfg = ModelConfig::default();
        let (model, store) = TokComm::new(&cfg, 1).unwrap();
        let cloud = synth_shape(ShapeKind::Plane, 256, &mut RandomSource::new(0)).unwrap();
        let r = model.reconstruct(
            &store,
            &cloud,
            Some(ChannelSpec::awgn(f64::INFINITY)),
            &mut RandomSource::new(0),
        );
        assert!(matches!(r, Err(CoreError::Domain(_))));
    }

    #[test]
    fn noiseless_channel_matches_channel_free_pass() {
        let cfg = ModelConfig {
            channel_adapter: false,
            ..ModelConfig::default()
        };
        let (model, store) = TokComm::new(&cfg, 3).unwrap();
        let cloud = synth_shape(ShapeKind::Torus, 256, &mut RandomSource::new(0)).unwrap();
        let (a, _) = model
            .reconstruct(&store, &cloud, Some(ChannelSpec::awgn(f64::INFINITY)), &mut RandomSource::new(0))
            .unwrap();
        let (b, _) = model.reconstruct(&store, &cloud, None, &mut RandomSource::new(0)).unwrap();
        assert_eq!(a, b);
    }
}
