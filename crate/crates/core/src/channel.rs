//! AWGN and block-fading Rayleigh channels, SNR bookkeeping, zero-forcing
//! equalization and CSI perturbation.
//!
//! Graph versions treat an R × 2 (I, Q) matrix as R complex samples and
//! apply complex scalars as 2 × 2 real matrices.

use num_complex::Complex64;
use tokcomm_tensor::{Graph, RandomSource, Tensor, Var};

use crate::config::ChannelKind;
use crate::error::{CoreError, Result};
use crate::modulator::SymbolStream;

/// One channel use: the gain, the noise power and the receiver's estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRealization {
    pub kind: ChannelKind,
    pub gain: Complex64,
    pub noise_power: f64,
    pub csi: Complex64,
}

pub fn snr_db(signal_power: f64, noise_power: f64) -> Result<f64> {
    if !(signal_power > 0.0 && noise_power > 0.0) {
        return Err(CoreError::Domain(format!(
            "SNR needs positive powers, got signal {signal_power} and noise {noise_power}"
        )));
    }
    Ok(10.0 * (signal_power / noise_power).log10())
}

/// Noise power giving `snr` dB at unit signal power; zero at +∞.
pub fn noise_power_for(snr: f64) -> f64 {
    if snr == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr / 10.0)
    }
}

/// Circularly symmetric complex Gaussian with total variance `power`.
pub fn complex_gaussian(power: f64, source: &mut RandomSource) -> Complex64 {
    let s = (power / 2.0).sqrt();
    Complex64::new(s * source.normal(), s * source.normal())
}

pub fn transmit_awgn(stream: &SymbolStream, noise_power: f64, source: &mut RandomSource) -> Result<SymbolStream> {
    check_noise(noise_power)?;
    let mut out = stream.clone();
    for z in &mut out.symbols {
        *z += complex_gaussian(noise_power, source);
    }
    Ok(out)
}

/// Block fading: one gain h ~ CN(0, 1) for the whole stream. Returns the
/// received stream, the realization and the received signal power
/// mean |h z|².
pub fn transmit_rayleigh(
    stream: &SymbolStream,
    noise_power: f64,
    source: &mut RandomSource,
) -> Result<(SymbolStream, ChannelRealization, f64)> {
    let h = complex_gaussian(1.0, source);
    transmit_with_gain(stream, h, noise_power, source)
}

pub fn transmit_with_gain(
    stream: &SymbolStream,
    h: Complex64,
    noise_power: f64,
    source: &mut RandomSource,
) -> Result<(SymbolStream, ChannelRealization, f64)> {
    check_noise(noise_power)?;
    let mut out = stream.clone();
    let mut received = 0.0;
    for z in &mut out.symbols {
        let faded = h * *z;
        received += faded.norm_sqr();
        *z = faded + complex_gaussian(noise_power, source);
    }
    let realization = ChannelRealization {
        kind: ChannelKind::Rayleigh,
        gain: h,
        noise_power,
        csi: h,
    };
    Ok((out, realization, received / stream.len().max(1) as f64))
}

pub fn zf_equalize(received: &SymbolStream, csi: Complex64) -> Result<SymbolStream> {
    let m = csi.norm_sqr();
    if m == 0.0 {
        return Err(CoreError::Domain("zero-forcing needs a non-zero channel estimate".into()));
    }
    let inv = csi.conj() / m;
    let mut out = received.clone();
    for z in &mut out.symbols {
        *z *= inv;
    }
    Ok(out)
}

/// ĥ = h + CN(0, noise_power).
pub fn perturb_csi(h: Complex64, noise_power: f64, source: &mut RandomSource) -> Result<Complex64> {
    check_noise(noise_power)?;
    if noise_power == 0.0 {
        return Ok(h);
    }
    Ok(h + complex_gaussian(noise_power, source))
}

fn check_noise(p: f64) -> Result<()> {
    if p >= 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Domain(format!("noise power {p} must be finite and non-negative")))
    }
}

/// Right-multiplication matrix of the complex scalar `c` on (I, Q) rows.
fn complex_matrix(c: Complex64) -> Tensor {
    Tensor::new(&[2, 2], vec![c.re, c.im, -c.im, c.re]).expect("2 x 2")
}

pub fn mul_complex_var(g: &mut Graph, x: Var, c: Complex64) -> Result<Var> {
    let m = g.constant(complex_matrix(c));
    Ok(g.matmul(x, m)?)
}

fn add_noise_var(g: &mut Graph, x: Var, noise_power: f64, source: &mut RandomSource) -> Result<Var> {
    if noise_power == 0.0 {
        return Ok(x);
    }
    let s = (noise_power / 2.0).sqrt();
    let noise = Tensor::new(
        g.shape(x),
        (0..g.value(x).len()).map(|_| s * source.normal()).collect(),
    )?;
    let n = g.constant(noise);
    Ok(g.add(x, n)?)
}

/// Passes R × 2 symbols through the channel and equalizes them. For
/// Rayleigh the receiver uses a CSI estimate perturbed by `csi_noise`.
pub fn channel_var(
    g: &mut Graph,
    x: Var,
    kind: ChannelKind,
    noise_power: f64,
    csi_noise: f64,
    source: &mut RandomSource,
) -> Result<(Var, ChannelRealization)> {
    check_noise(noise_power)?;
    match kind {
        ChannelKind::Awgn => {
            let y = add_noise_var(g, x, noise_power, source)?;
            let one = Complex64::new(1.0, 0.0);
            Ok((
                y,
                ChannelRealization {
                    kind,
                    gain: one,
                    noise_power,
                    csi: one,
                },
            ))
        }
        ChannelKind::Rayleigh => {
            let h = complex_gaussian(1.0, source);
            let faded = mul_complex_var(g, x, h)?;
            let y = add_noise_var(g, faded, noise_power, source)?;
            let csi = perturb_csi(h, csi_noise, source)?;
            let m = csi.norm_sqr();
            if m == 0.0 {
                return Err(CoreError::Domain("zero-forcing needs a non-zero channel estimate".into()));
            }
            let eq = mul_complex_var(g, y, csi.conj() / m)?;
            Ok((
                eq,
                ChannelRealization {
                    kind,
                    gain: h,
                    noise_power,
                    csi,
                },
            ))
        }
    }
}
