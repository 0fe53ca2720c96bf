//! Set abstraction: sample centroids, group their neighbourhoods, lift each
//! group through a shared pointwise network and max-pool it into a token.

use tokcomm_tensor::{Activation, Graph, Mlp, ParamStore, RandomSource, Tensor, Var};

use crate::config::{FpsMode, ModelConfig};
use crate::error::{CoreError, Result};
use crate::geometry::{ball_query, fps, FpsStart, Point, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct SetAbstractionConfig {
    pub samples: usize,
    pub radius: f64,
    pub k: usize,
    /// Pointwise layer widths; the last one is the token width C′.
    pub widths: Vec<usize>,
    pub fps: FpsMode,
}

/// Tokens: one embedding row per centroid.
#[derive(Clone, Debug)]
pub struct TokenSet {
    /// N′ × C′ embeddings.
    pub embeddings: Var,
    /// Centroid coordinates, one per token.
    pub centroids: Vec<Point>,
    /// Centroid indices into the parent set.
    pub parent_indices: Vec<usize>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid_tensor(&self) -> Tensor {
        points_tensor(&self.centroids)
    }
}

pub(crate) fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(&[points.len(), 3], points.iter().flatten().copied().collect())
        .expect("N x 3 layout")
}

/// Tensor shapes at each step of a set abstraction pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    pub sampled: Vec<usize>,
    pub grouped: Vec<usize>,
    pub with_coords: Vec<usize>,
    pub local: Vec<usize>,
    pub lifted: Vec<usize>,
    pub pooled: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub config: SetAbstractionConfig,
    pub in_features: usize,
    pub pointwise: Mlp,
}

impl SetAbstraction {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        config: SetAbstractionConfig,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if config.samples == 0 {
            return Err(CoreError::Config("set abstraction needs at least one sample".into()));
        }
        if config.widths.is_empty() {
            return Err(CoreError::Config("set abstraction needs pointwise widths".into()));
        }
        let pointwise = Mlp::new(
            store,
            name,
            in_features + 3,
            &config.widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        )?;
        Ok(Self {
            config,
            in_features,
            pointwise,
        })
    }

    pub fn out_features(&self) -> usize {
        self.pointwise.output_width()
    }

    /// Runs one pass over `coords`. Without `features` the coordinates
    /// themselves serve as the per-point features.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &[Point],
        features: Option<Var>,
        rng: &mut RandomSource,
    ) -> Result<TokenSet> {
        self.forward_traced(g, store, coords, features, rng).map(|(t, _)| t)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &[Point],
        features: Option<Var>,
        rng: &mut RandomSource,
    ) -> Result<(TokenSet, ShapeTrace)> {
        let cfg = &self.config;
        let features = match features {
            Some(f) => f,
            None => g.constant(points_tensor(coords)),
        };
        let c = g.value(features).cols();
        if c != self.in_features || g.value(features).rows() != coords.len() {
            return Err(CoreError::Contract(format!(
                "features {:?} do not match {} points x {} channels",
                g.shape(features),
                coords.len(),
                self.in_features
            )));
        }
        let start = match cfg.fps {
            FpsMode::Fixed => FpsStart::Index(0),
            FpsMode::Random => FpsStart::Random,
        };
        let centroids = fps(coords, cfg.samples, start, rng)?;
        let table = ball_query(coords, &centroids.coords, cfg.radius, cfg.k)?;
        let (n, k) = (centroids.len(), cfg.k);

        let grouped = g.gather_rows(features, &table.indices)?;
        let local = g.constant(points_tensor(&table.relative));
        let stacked = g.concat_cols(&[grouped, local])?;
        let lifted = self.pointwise.forward(g, store, stacked)?;
        let width = g.value(lifted).cols();
        let cube = g.reshape(lifted, &[n, k, width])?;
        let pooled = g.max_axis(cube, 1)?;

        let trace = ShapeTrace {
            input: vec![coords.len(), 3],
            sampled: vec![n, 3],
            grouped: vec![n, k, c],
            with_coords: vec![n, k, c + 3],
            local: vec![n, k, c + 3],
            lifted: vec![n, k, width],
            pooled: g.shape(pooled).to_vec(),
        };
        let tokens = TokenSet {
            embeddings: pooled,
            centroids: centroids.coords,
            parent_indices: centroids.indices,
        };
        Ok((tokens, trace))
    }
}

/// First-stage set abstraction over raw coordinates (C = 3).
#[derive(Clone, Debug)]
pub struct PointTokenizer {
    pub sa: SetAbstraction,
}

impl PointTokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        let sa = SetAbstraction::new(
            store,
            "tokenizer.sa",
            3,
            SetAbstractionConfig {
                samples: cfg.n_tokens,
                radius: cfg.radius_tokenizer,
                k: cfg.group_k,
                widths: vec![cfg.sa_hidden, cfg.token_dim],
                fps: cfg.fps,
            },
            rng,
        )?;
        Ok(Self { sa })
    }

    pub fn tokenize(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        rng: &mut RandomSource,
    ) -> Result<TokenSet> {
        if self.sa.config.samples > cloud.len() {
            return Err(CoreError::Argument(format!(
                "cannot draw {} tokens from {} points",
                self.sa.config.samples,
                cloud.len()
            )));
        }
        self.sa.forward(g, store, cloud.points(), None, rng)
    }
}
