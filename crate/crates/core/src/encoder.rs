//! Vector-attention point transformer blocks, the two JSCC encoder branches
//! and the SNR-conditioned channel adapter.

use tokcomm_tensor::{Activation, Graph, Linear, Mlp, ParamStore, RandomSource, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{knn, NeighborTable, Point};
use crate::tokenizer::{SetAbstraction, SetAbstractionConfig, TokenSet};

/// Projections φ, ψ, α and the two-layer MLPs γ (attention) and δ (position).
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub dim: usize,
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub gamma: Mlp,
    pub delta: Mlp,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RandomSource) -> Result<Self> {
        let two_layer = |store: &mut ParamStore, sub: &str, input: usize, rng: &mut RandomSource| {
            Mlp::new(
                store,
                &format!("{name}.{sub}"),
                input,
                &[dim, dim],
                Activation::Relu,
                Activation::None,
                rng,
            )
        };
        Ok(Self {
            dim,
            phi: Linear::new(store, &format!("{name}.phi"), dim, dim, rng)?,
            psi: Linear::new(store, &format!("{name}.psi"), dim, dim, rng)?,
            alpha: Linear::new(store, &format!("{name}.alpha"), dim, dim, rng)?,
            gamma: two_layer(store, "gamma", dim, rng)?,
            delta: two_layer(store, "delta", 3, rng)?,
        })
    }

    /// Attends every token over the neighbours listed in `table`. `pos`
    /// holds the token coordinates (n × 3) and may itself be tracked.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pos: Var,
        table: &NeighborTable,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let k = table.k;
        if g.value(x).cols() != self.dim || table.rows() != n || g.value(pos).rows() != n {
            return Err(CoreError::Contract(format!(
                "attention over {:?} tokens with positions {:?} and {} neighbour rows",
                g.shape(x),
                g.shape(pos),
                table.rows()
            )));
        }
        let query_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();

        let q = self.phi.forward(g, store, x)?;
        let kx = self.psi.forward(g, store, x)?;
        let v = self.alpha.forward(g, store, x)?;
        let q = g.gather_rows(q, &query_idx)?;
        let kx = g.gather_rows(kx, &table.indices)?;
        let v = g.gather_rows(v, &table.indices)?;

        let pi = g.gather_rows(pos, &query_idx)?;
        let pj = g.gather_rows(pos, &table.indices)?;
        let rel = g.sub(pi, pj)?;
        let enc = self.delta.forward(g, store, rel)?;

        let qk = g.sub(q, kx)?;
        let pre = g.add(qk, enc)?;
        let logits = self.gamma.forward(g, store, pre)?;
        if g.value(logits).cols() != g.value(v).cols() {
            return Err(CoreError::Contract("attention weights and values differ in width".into()));
        }
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let logits = g.reshape(logits, &[n, k, self.dim])?;
        let weights = g.softmax(logits, 1, 1.0)?;

        let values = g.add(v, enc)?;
        let values = g.reshape(values, &[n, k, self.dim])?;
        let mixed = g.mul(weights, values)?;
        Ok(g.sum_axis(mixed, 1)?)
    }
}

/// kNN table over token coordinates, with `k` clamped to the token count.
pub fn attention_neighbors(coords: &[Point], k: usize) -> Result<NeighborTable> {
    knn(coords, coords, k.min(coords.len()))
}

/// Linear, vector attention, linear, plus a residual from the block input.
#[derive(Clone, Debug)]
pub struct PtBlock {
    pub input: Linear,
    pub attention: AttentionLayer,
    pub output: Linear,
    pub k: usize,
}

impl PtBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        k: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.in"), dim, dim, rng)?,
            attention: AttentionLayer::new(store, &format!("{name}.attn"), dim, rng)?,
            output: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            k,
        })
    }

    /// Neighbours come from kNN over the forward value of `pos`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Var) -> Result<Var> {
        let coords: Vec<Point> = g
            .value(pos)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let table = attention_neighbors(&coords, self.k)?;
        let h = self.input.forward(g, store, x)?;
        let h = self.attention.forward(g, store, h, pos, &table)?;
        let h = self.output.forward(g, store, h)?;
        Ok(g.add(h, x)?)
    }
}

/// Row-major flatten of an n × c matrix to a single row, then a linear map
/// to `rows × width`, reshaped back into logit rows.
#[derive(Clone, Debug)]
struct FlattenHead {
    linear: Linear,
    rows: usize,
    width: usize,
}

impl FlattenHead {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        rows: usize,
        width: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, input, rows * width, rng)?,
            rows,
            width,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let flat = g.reshape(x, &[1, g.value(x).len()])?;
        let y = self.linear.forward(g, store, flat)?;
        Ok(g.reshape(y, &[self.rows, self.width])?)
    }
}

fn logit_mlp(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Mlp> {
    Ok(Mlp::new(
        store,
        name,
        cfg.token_dim,
        &[cfg.mlp_hidden, cfg.mlp_hidden, cfg.logit_width()],
        Activation::Relu,
        Activation::None,
        rng,
    )?)
}

/// PT block, set abstraction to N″ tokens, PT block, MLP, flatten + linear.
#[derive(Clone, Debug)]
pub struct MainEncoder {
    pub pt1: PtBlock,
    pub sa: SetAbstraction,
    pub pt2: PtBlock,
    pub mlp: Mlp,
    head: FlattenHead,
}

impl MainEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let (n_main, _) = cfg.branch_sizes()?;
        let c = cfg.token_dim;
        Ok(Self {
            pt1: PtBlock::new(store, "main.pt1", c, cfg.attention_k, rng)?,
            sa: SetAbstraction::new(
                store,
                "main.sa",
                c,
                SetAbstractionConfig {
                    samples: cfg.n_tokens_main,
                    radius: cfg.radius_main,
                    k: cfg.group_k,
                    widths: vec![c, c],
                    fps: cfg.fps,
                },
                rng,
            )?,
            pt2: PtBlock::new(store, "main.pt2", c, cfg.attention_k, rng)?,
            mlp: logit_mlp(store, "main.mlp", cfg, rng)?,
            head: FlattenHead::new(
                store,
                "main.head",
                cfg.n_tokens_main * cfg.logit_width(),
                n_main,
                cfg.logit_width(),
                rng,
            )?,
        })
    }

    /// Returns the N_main × 2√M logit matrix.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &TokenSet,
        rng: &mut RandomSource,
    ) -> Result<Var> {
        let pos = g.constant(tokens.centroid_tensor());
        let h = self.pt1.forward(g, store, tokens.embeddings, pos)?;
        let coarse = self.sa.forward(g, store, &tokens.centroids, Some(h), rng)?;
        let pos2 = g.constant(coarse.centroid_tensor());
        let h = self.pt2.forward(g, store, coarse.embeddings, pos2)?;
        let y = self.mlp.forward(g, store, h)?;
        self.head.forward(g, store, y)
    }
}

/// The main branch without its second set abstraction and PT block.
#[derive(Clone, Debug)]
pub struct AuxEncoder {
    pub pt: PtBlock,
    pub mlp: Mlp,
    head: FlattenHead,
}

impl AuxEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let (_, n_aux) = cfg.branch_sizes()?;
        Ok(Self {
            pt: PtBlock::new(store, "aux.pt", cfg.token_dim, cfg.attention_k, rng)?,
            mlp: logit_mlp(store, "aux.mlp", cfg, rng)?,
            head: FlattenHead::new(
                store,
                "aux.head",
                cfg.n_tokens * cfg.logit_width(),
                n_aux.max(1),
                cfg.logit_width(),
                rng,
            )?,
        })
    }

    /// Returns the N_auxi. × 2√M logit matrix.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSet) -> Result<Var> {
        let pos = g.constant(tokens.centroid_tensor());
        let h = self.pt.forward(g, store, tokens.embeddings, pos)?;
        let y = self.mlp.forward(g, store, h)?;
        self.head.forward(g, store, y)
    }
}

/// Appends SNR/10 to every logit row and maps back to 2√M. The output
/// replaces the logits.
#[derive(Clone, Debug)]
pub struct ChannelAdapter {
    pub mlp: Mlp,
}

impl ChannelAdapter {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let w = cfg.logit_width();
        Ok(Self {
            mlp: Mlp::new(
                store,
                name,
                w + 1,
                &[cfg.adapter_hidden, w],
                Activation::Relu,
                Activation::None,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, logits: Var, snr_db: f64) -> Result<Var> {
        if !snr_db.is_finite() {
            return Err(CoreError::Domain(format!(
                "channel condition must be a finite SNR, got {snr_db}"
            )));
        }
        let rows = g.value(logits).rows();
        let cond = g.constant(Tensor::filled(&[rows, 1], snr_db / 10.0));
        let x = g.concat_cols(&[logits, cond])?;
        Ok(self.mlp.forward(g, store, x)?)
    }
}
