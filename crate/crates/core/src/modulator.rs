//! Differentiable QAM modulation. The forward value always lands on the
//! square M-QAM grid; gradients flow through a relaxation chosen by the
//! estimator.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use tokcomm_tensor::{gumbel_noise, Activation, Graph, Mlp, ParamStore, RandomSource, Tensor, Var};

use crate::config::{Estimator, RATE_LEVELS};
use crate::error::{CoreError, Result};

/// Per-axis levels of a square M-QAM constellation with unit mean energy.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub order: usize,
    pub levels: Vec<f64>,
}

impl Codebook {
    pub fn new(order: usize) -> Result<Self> {
        let side = match order {
            4 => 2,
            16 => 4,
            64 => 8,
            256 => 16,
            _ => {
                return Err(CoreError::Argument(format!(
                    "M = {order} is not a supported square QAM order"
                )))
            }
        };
        // Mean energy of the raw grid {±1, ±3, ...}² is 2(M − 1)/3.
        let s = (1.5 / (order as f64 - 1.0)).sqrt();
        let levels = (0..side)
            .map(|k| (2.0 * k as f64 - (side as f64 - 1.0)) * s)
            .collect();
        Ok(Self { order, levels })
    }

    pub fn side(&self) -> usize {
        self.levels.len()
    }

    /// Half the distance between neighbouring levels.
    pub fn half_step(&self) -> f64 {
        0.5 * (self.levels[1] - self.levels[0])
    }

    pub fn column(&self) -> Tensor {
        Tensor::new(&[self.side(), 1], self.levels.clone()).expect("column layout")
    }

    pub fn contains(&self, v: f64) -> bool {
        self.levels.contains(&v)
    }

    /// All M grid points, in-phase major.
    pub fn points(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.order);
        for &i in &self.levels {
            for &q in &self.levels {
                out.push(Complex64::new(i, q));
            }
        }
        out
    }
}

pub fn make_codebook(order: usize) -> Result<Codebook> {
    Codebook::new(order)
}

/// Nearest level; exact ties go to the lower level.
pub fn hard_quantize(z: f64, cb: &Codebook) -> f64 {
    let mut best = cb.levels[0];
    let mut dist = (best - z).abs();
    for &c in &cb.levels[1..] {
        let d = (c - z).abs();
        if d < dist {
            best = c;
            dist = d;
        }
    }
    best
}

/// Distance-softmax average of the levels.
pub fn soft_quantize(z: f64, cb: &Codebook, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(CoreError::Domain(format!("temperature {temperature} must be positive")));
    }
    let d: Vec<f64> = cb.levels.iter().map(|c| -(c - z).abs() / temperature).collect();
    let mx = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = d.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().zip(&cb.levels).map(|(w, c)| w * c).sum::<f64>() / total)
}

/// Gumbel-softmax over one half of a logit row.
pub fn gumbel_soft_probs(logits: &[f64], temperature: f64, noise: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(CoreError::Domain(format!("temperature {temperature} must be positive")));
    }
    let v: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, y)| (y + noise.map_or(0.0, |n| n[j])) / temperature)
        .collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// Inner product of a probability vector with the levels.
pub fn initial_position(t: &[f64], cb: &Codebook) -> f64 {
    t.iter().zip(&cb.levels).map(|(p, c)| p * c).sum()
}

/// Graph form of the soft quantizer for a column of positions `z` (R × 1).
pub fn soft_quantize_var(g: &mut Graph, z: Var, cb: &Codebook, temperature: f64) -> Result<Var> {
    let rows = g.value(z).rows();
    let side = cb.side();
    let ones = g.constant(Tensor::filled(&[1, side], 1.0));
    let spread = g.matmul(z, ones)?;
    let grid = g.constant(
        Tensor::new(&[rows, side], cb.levels.iter().copied().cycle().take(rows * side).collect())
            .expect("grid layout"),
    );
    let diff = g.sub(grid, spread)?;
    let dist = g.abs(diff);
    let neg = g.scale(dist, -1.0);
    let w = g.softmax(neg, 1, temperature)?;
    let col = g.constant(cb.column());
    Ok(g.matmul(w, col)?)
}

/// Which value the modulator emits in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModPath {
    /// Grid point, with gradients routed through the estimator's surrogate.
    Hard,
    /// The surrogate itself; used to check gradients of the relaxation.
    Relaxed,
}

#[derive(Clone, Copy, Debug)]
pub struct ModulateOptions {
    pub estimator: Estimator,
    pub temperature: f64,
    /// Draw Gumbel (and dither) noise; off in evaluation.
    pub noise: bool,
    pub path: ModPath,
    /// Cut the surrogate off the tape so no gradient reaches the logits.
    pub sever: bool,
}

impl ModulateOptions {
    pub fn new(estimator: Estimator, temperature: f64) -> Self {
        Self {
            estimator,
            temperature,
            noise: true,
            path: ModPath::Hard,
            sever: false,
        }
    }

    pub fn eval(mut self) -> Self {
        self.noise = false;
        self
    }
}

/// Modulates one half (√M logit columns) of every row into an R × 1 column.
fn modulate_axis(
    g: &mut Graph,
    half: Var,
    cb: &Codebook,
    opts: &ModulateOptions,
    rng: &mut RandomSource,
) -> Result<Var> {
    let shape = g.shape(half).to_vec();
    let tau = gumbel_noise(rng, &shape, opts.noise);
    let tau = g.constant(tau);
    let noisy = g.add(half, tau)?;
    let probs = g.softmax(noisy, 1, opts.temperature)?;
    let col = g.constant(cb.column());
    let z = g.matmul(probs, col)?;

    let (surrogate, position) = match opts.estimator {
        Estimator::GumbelSoftq => (soft_quantize_var(g, z, cb, opts.temperature)?, z),
        Estimator::Ste => (z, z),
        Estimator::UniformNoise => {
            let h = cb.half_step();
            let rows = shape[0];
            let u: Vec<f64> = (0..rows)
                .map(|_| if opts.noise { rng.uniform(-h, h) } else { 0.0 })
                .collect();
            let u = g.constant(Tensor::new(&[rows, 1], u)?);
            let zu = g.add(z, u)?;
            (zu, zu)
        }
    };
    let surrogate = if opts.sever { g.detach(surrogate) } else { surrogate };
    match opts.path {
        ModPath::Relaxed => Ok(surrogate),
        ModPath::Hard => {
            let hard = g.value(position).map(|v| hard_quantize(v, cb));
            Ok(g.straight_through(surrogate, hard)?)
        }
    }
}

/// Maps an R × 2√M logit matrix to R symbols as an R × 2 matrix of
/// (in-phase, quadrature) pairs.
pub fn modulate(
    g: &mut Graph,
    logits: Var,
    cb: &Codebook,
    opts: &ModulateOptions,
    rng: &mut RandomSource,
) -> Result<Var> {
    let side = cb.side();
    if g.value(logits).cols() != 2 * side || g.shape(logits).len() != 2 {
        return Err(CoreError::Contract(format!(
            "logits {:?} do not have 2√M = {} columns",
            g.shape(logits),
            2 * side
        )));
    }
    let yi = g.slice_cols(logits, 0, side)?;
    let yq = g.slice_cols(logits, side, 2 * side)?;
    let zi = modulate_axis(g, yi, cb, opts, rng)?;
    let zq = modulate_axis(g, yq, cb, opts, rng)?;
    Ok(g.concat_cols(&[zi, zq])?)
}

/// Complex symbols with the scale and mask they were produced with.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolStream {
    pub symbols: Vec<Complex64>,
    pub scale: f64,
    pub mask: Option<Vec<bool>>,
}

impl SymbolStream {
    pub fn new(symbols: Vec<Complex64>) -> Self {
        Self {
            symbols,
            scale: 1.0,
            mask: None,
        }
    }

    /// Reads an R × 2 (I, Q) matrix.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 2 {
            return Err(CoreError::Contract(format!("expected R x 2 symbols, got {:?}", t.shape())));
        }
        Ok(Self::new(
            t.data().chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect(),
        ))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.symbols.len(), 2],
            self.symbols.iter().flat_map(|z| [z.re, z.im]).collect(),
        )
        .expect("R x 2 layout")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Mean of |z|² over the stream.
    pub fn power(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.symbols.len().max(1) as f64
    }
}

/// Rescales so the mean symbol power equals `target`.
pub fn normalize_power(stream: &SymbolStream, target: f64) -> Result<SymbolStream> {
    if stream.is_empty() {
        return Err(CoreError::Argument("cannot normalize an empty stream".into()));
    }
    let p = stream.power();
    if !(p > 0.0) {
        return Err(CoreError::Domain("stream has zero power; scale is undefined".into()));
    }
    let s = (target / p).sqrt();
    Ok(SymbolStream {
        symbols: stream.symbols.iter().map(|z| z * s).collect(),
        scale: stream.scale * s,
        mask: stream.mask.clone(),
    })
}

/// Graph form over several R_b × 2 blocks sharing one scale: the mean
/// power is taken over all `count` transmitted symbols.
pub fn normalize_power_var(g: &mut Graph, blocks: &[Var], count: usize, target: f64) -> Result<Vec<Var>> {
    if blocks.is_empty() || count == 0 {
        return Err(CoreError::Argument("cannot normalize an empty stream".into()));
    }
    let mut total = None;
    for &b in blocks {
        let sq = g.mul(b, b)?;
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("non-empty");
    if !(g.value(total).item() > 0.0) {
        return Err(CoreError::Domain("stream has zero power; scale is undefined".into()));
    }
    let power = g.scale(total, 1.0 / (count as f64 * target));
    let scale = g.powf(power, -0.5);
    blocks.iter().map(|&b| Ok(g.mul_scalar(b, scale)?)).collect()
}

/// Widths of the progressive MLP: divide by four while the result stays
/// above the level count, then end at the level count.
pub fn progressive_widths(input: usize) -> Vec<usize> {
    let mut widths = Vec::new();
    let mut w = input;
    while w.div_ceil(4) > RATE_LEVELS {
        w = w.div_ceil(4);
        widths.push(w);
    }
    widths.push(RATE_LEVELS);
    widths
}

/// Number of auxiliary symbols kept at rate level `level` (1-based).
pub fn kept_auxiliary(level: usize, n_aux: usize) -> usize {
    (level * n_aux).div_ceil(RATE_LEVELS)
}

/// Prefix-of-ones mask over the auxiliary symbols.
pub fn thermal_mask(level: usize, n_aux: usize) -> Vec<bool> {
    let kept = kept_auxiliary(level, n_aux);
    (0..n_aux).map(|j| j < kept).collect()
}

#[derive(Clone, Debug)]
pub struct RateDecision {
    /// Selected level in 1..=5.
    pub level: usize,
    pub one_hot: Vec<f64>,
    /// Auxiliary-symbol mask (prefix of ones).
    pub mask: Vec<bool>,
    pub n_main: usize,
    pub n_send: usize,
    /// Full N_mod. × 1 keep mask: ones for main symbols, thermal for the rest.
    pub keep: Var,
    /// N_send with a softmax-expected backward path.
    pub n_send_var: Var,
}

/// Chooses how many auxiliary symbols to transmit from the full logit matrix.
#[derive(Clone, Debug)]
pub struct RateAllocator {
    pub mlp: Mlp,
    pub n_main: usize,
    pub n_aux: usize,
    pub temperature: f64,
}

impl RateAllocator {
    pub fn new(
        store: &mut ParamStore,
        n_main: usize,
        n_aux: usize,
        temperature: f64,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let n_mod = n_main + n_aux;
        Ok(Self {
            mlp: Mlp::new(
                store,
                "rate.mlp",
                n_mod,
                &progressive_widths(n_mod),
                Activation::Relu,
                Activation::None,
                rng,
            )?,
            n_main,
            n_aux,
            temperature,
        })
    }

    /// Level 5: every symbol is kept.
    pub fn full(g: &mut Graph, n_main: usize, n_aux: usize) -> RateDecision {
        let n_mod = n_main + n_aux;
        RateDecision {
            level: RATE_LEVELS,
            one_hot: (0..RATE_LEVELS).map(|i| (i + 1 == RATE_LEVELS) as u8 as f64).collect(),
            mask: vec![true; n_aux],
            n_main,
            n_send: n_mod,
            keep: g.constant(Tensor::filled(&[n_mod, 1], 1.0)),
            n_send_var: g.constant(Tensor::scalar(n_mod as f64)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        logits: Var,
        noise: bool,
        rng: &mut RandomSource,
    ) -> Result<RateDecision> {
        let n_mod = self.n_main + self.n_aux;
        if g.value(logits).rows() != n_mod {
            return Err(CoreError::Contract(format!(
                "rate allocator expects {n_mod} logit rows, got {:?}",
                g.shape(logits)
            )));
        }
        // Pool over each row's position logits, leaving one value per symbol.
        let pooled = g.max_axis(logits, 1)?;
        let pooled = g.reshape(pooled, &[1, n_mod])?;
        let scores = self.mlp.forward(g, store, pooled)?;
        let tau = g.constant(gumbel_noise(rng, &[1, RATE_LEVELS], noise));
        let noisy = g.add(scores, tau)?;
        let soft = g.softmax(noisy, 1, self.temperature)?;
        let vals = g.value(noisy).data();
        let mut best = 0;
        for i in 1..RATE_LEVELS {
            if vals[i] > vals[best] {
                best = i;
            }
        }
        let level = best + 1;
        let one_hot: Vec<f64> = (0..RATE_LEVELS).map(|i| (i == best) as u8 as f64).collect();
        let hot = g.straight_through(soft, Tensor::new(&[1, RATE_LEVELS], one_hot.clone())?)?;

        // Thermal matrix: row ℓ − 1 holds the mask of level ℓ.
        let mut thermal = vec![0.0; RATE_LEVELS * self.n_aux];
        for l in 1..=RATE_LEVELS {
            for j in 0..kept_auxiliary(l, self.n_aux) {
                thermal[(l - 1) * self.n_aux + j] = 1.0;
            }
        }
        let main = g.constant(Tensor::filled(&[self.n_main, 1], 1.0));
        let keep = if self.n_aux > 0 {
            let t = g.constant(Tensor::new(&[RATE_LEVELS, self.n_aux], thermal)?);
            let aux = g.matmul(hot, t)?;
            let aux = g.reshape(aux, &[self.n_aux, 1])?;
            g.concat_rows(&[main, aux])?
        } else {
            main
        };

        let counts: Vec<f64> = (1..=RATE_LEVELS)
            .map(|l| (self.n_main + kept_auxiliary(l, self.n_aux)) as f64)
            .collect();
        let counts = g.constant(Tensor::new(&[RATE_LEVELS, 1], counts)?);
        let expected = g.matmul(soft, counts)?;
        let n_send = self.n_main + kept_auxiliary(level, self.n_aux);
        let n_send_var = g.straight_through(expected, Tensor::new(&[1, 1], vec![n_send as f64])?)?;
        Ok(RateDecision {
            level,
            one_hot,
            mask: thermal_mask(level, self.n_aux),
            n_main: self.n_main,
            n_send,
            keep,
            n_send_var,
        })
    }
}

/// Empirical frequency of each grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationRow {
    pub i: f64,
    pub q: f64,
    pub probability: f64,
}

pub fn constellation_histogram(cb: &Codebook, symbols: &[Complex64]) -> Result<Vec<ConstellationRow>> {
    let side = cb.side();
    let mut counts = vec![0usize; side * side];
    for z in symbols {
        let a = cb.levels.iter().position(|&c| c == z.re);
        let b = cb.levels.iter().position(|&c| c == z.im);
        match (a, b) {
            (Some(a), Some(b)) => counts[a * side + b] += 1,
            _ => return Err(CoreError::Contract(format!("symbol {z} is off the grid"))),
        }
    }
    let total = symbols.len().max(1) as f64;
    Ok(cb
        .points()
        .into_iter()
        .zip(counts)
        .map(|(p, c)| ConstellationRow {
            i: p.re,
            q: p.im,
            probability: c as f64 / total,
        })
        .collect())
}

/// Shannon entropy in bits of a probability table.
pub fn entropy_bits(rows: &[ConstellationRow]) -> f64 {
    rows.iter()
        .filter(|r| r.probability > 0.0)
        .map(|r| -r.probability * r.probability.log2())
        .sum()
}

pub fn write_constellation_csv<W: Write>(out: W, rows: &[ConstellationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebooks_have_unit_energy() {
        let qpsk = make_codebook(4).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((qpsk.levels[0] + h).abs() < 1e-15 && (qpsk.levels[1] - h).abs() < 1e-15);
        let q16 = make_codebook(16).unwrap();
        let s = 1.0 / 10f64.sqrt();
        for (a, b) in q16.levels.iter().zip([-3.0 * s, -s, s, 3.0 * s]) {
            assert!((a - b).abs() < 1e-15);
        }
        for m in [4, 16, 64, 256] {
            let cb = make_codebook(m).unwrap();
            let e = cb.points().iter().map(|z| z.norm_sqr()).sum::<f64>() / m as f64;
            assert!((e - 1.0).abs() < 1e-12);
        }
        assert!(make_codebook(8).is_err());
    }

    #[test]
    fn quantizer_examples() {
        let cb = make_codebook(4).unwrap();
        let h = cb.levels[1];
        assert!((h - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(hard_quantize(0.2, &cb), h);
        assert_eq!(hard_quantize(h, &cb), h);
        assert_eq!(hard_quantize(0.0, &cb), -h);
        for t in [0.1, 1.0, 3.0] {
            assert!(soft_quantize(0.0, &cb, t).unwrap().abs() < 1e-15);
        }
        let q16 = make_codebook(16).unwrap();
        let at = q16.levels[2];
        assert!((soft_quantize(at, &q16, 1e-3).unwrap() - at).abs() < 1e-6);
        assert!(soft_quantize(0.0, &cb, 0.0).is_err());
    }

    #[test]
    fn probability_examples() {
        let p = gumbel_soft_probs(&[0.3; 4], 1.5, None).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = gumbel_soft_probs(&[0.1, 0.9, 0.2, 0.4], 1e-3, None).unwrap();
        assert!(p[1] > 0.999);
        assert!(gumbel_soft_probs(&[0.0; 4], -1.0, None).is_err());
        let cb = make_codebook(16).unwrap();
        assert_eq!(initial_position(&[0.0, 0.0, 1.0, 0.0], &cb), cb.levels[2]);
        assert!(initial_position(&[0.25; 4], &cb).abs() < 1e-15);
        let qpsk = make_codebook(4).unwrap();
        assert_eq!(initial_position(&[0.5, 0.5], &qpsk), 0.0);
    }

    #[test]
    fn progressive_widths_shrink_to_five() {
        assert_eq!(progressive_widths(40), vec![10, 5]);
        assert_eq!(progressive_widths(300), vec![75, 19, 5]);
        assert_eq!(progressive_widths(20), vec![5]);
    }

    #[test]
    fn level_to_count_mapping() {
        assert_eq!(kept_auxiliary(5, 8), 8);
        assert_eq!(kept_auxiliary(3, 100), 60);
        assert_eq!(kept_auxiliary(1, 8), 2);
        assert_eq!(kept_auxiliary(4, 0), 0);
        let m = thermal_mask(2, 10);
        assert_eq!(m.iter().filter(|&&b| b).count(), 4);
        assert!(m.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn normalize_examples() {
        let s = SymbolStream::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, -1.0)]);
        let n = normalize_power(&s, 1.0).unwrap();
        assert_eq!(n.symbols, s.symbols);
        let doubled = SymbolStream::new(s.symbols.iter().map(|z| z * 2.0).collect());
        let back = normalize_power(&doubled, 1.0).unwrap();
        for (a, b) in back.symbols.iter().zip(&s.symbols) {
            assert!((a - b).norm() < 1e-15);
        }
        let zero = SymbolStream::new(vec![Complex64::new(0.0, 0.0)]);
        assert!(normalize_power(&zero, 1.0).is_err());
    }

    #[test]
    fn histogram_rejects_off_grid_symbols() {
        let cb = make_codebook(4).unwrap();
        assert!(constellation_histogram(&cb, &[Complex64::new(0.1, 0.1)]).is_err());
        let rows = constellation_histogram(&cb, &cb.points()).unwrap();
        assert!((rows.iter().map(|r| r.probability).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((entropy_bits(&rows) - 2.0).abs() < 1e-12);
    }
}
