//! Skin chromaticity under Wien's approximation and the kernel
//! initialisation built from it.
//!
//! For channel i with wavelength λᵢ, reflectance Sᵢ, delta amplitude fᵢ and
//! colour temperature T:
//!
//! ```text
//! cᵢ = [fᵢ λᵢ⁻⁵ Sᵢ / (∏ⱼ fⱼ λⱼ⁻⁵ Sⱼ)^⅓] · [exp(−k₂/(λᵢT)) / exp(⅓ Σⱼ −k₂/(λⱼT))]
//!    =            Aᵢ                   ·                 Bᵢ
//! ```
//!
//! `A` does not depend on T (illumination robust); `B` carries all of the
//! colour-temperature dependence. Both factors, and therefore `c`, have a
//! product of exactly one across the three channels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiationConstants {
    /// Planck constant, J·s.
    pub h: f64,
    /// Boltzmann constant, J/K.
    pub k_b: f64,
    /// Speed of light, m/s.
    pub c_light: f64,
}

impl RadiationConstants {
    pub const DEFAULT: RadiationConstants = RadiationConstants {
        h: 6.626e-34,
        k_b: 1.381e-23,
        c_light: 3e8,
    };

    /// Second radiation constant h·c/k_B in m·K.
    pub fn k2(&self) -> f64 {
        self.h * self.c_light / self.k_b
    }
}

impl Default for RadiationConstants {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Tri-chromatic wavelength bands in nm: red, green, blue.
pub const WAVELENGTH_BANDS_NM: [(f64, f64); 3] = [(620.0, 750.0), (495.0, 570.0), (450.0, 495.0)];

// exp() of anything below this underflows toward zero in f64.
const MIN_EXPONENT: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChromaticityParams {
    pub lambda_nm: [f64; 3],
    pub reflectance: [f64; 3],
    pub delta: [f64; 3],
    pub t_kelvin: f64,
}

impl Default for ChromaticityParams {
    fn default() -> Self {
        Self {
            lambda_nm: [685.0, 532.5, 472.5],
            reflectance: [1.0; 3],
            delta: [1.0; 3],
            t_kelvin: 5000.0,
        }
    }
}

impl ChromaticityParams {
    /// Positivity plus the per-channel wavelength bands.
    pub fn validate(&self) -> Result<()> {
        self.validate_relaxed()?;
        for (i, (&l, &(lo, hi))) in self.lambda_nm.iter().zip(&WAVELENGTH_BANDS_NM).enumerate() {
            if !(lo..=hi).contains(&l) {
                return Err(Error::Argument(format!(
                    "wavelength {} = {l} nm outside [{lo}, {hi}] nm",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Positivity and finiteness only; lets degenerate inputs such as equal
    /// wavelengths through for checking identities.
    pub fn validate_relaxed(&self) -> Result<()> {
        let all = self
            .lambda_nm
            .iter()
            .chain(&self.reflectance)
            .chain(&self.delta)
            .chain(std::iter::once(&self.t_kelvin));
        for &v in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!(
                    "chromaticity parameters must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn lambda_m(&self, i: usize) -> f64 {
        self.lambda_nm[i] * 1e-9
    }

    /// Wien exponents −k₂/(λᵢT).
    fn exponents(&self, k2: f64, t_kelvin: f64) -> Result<[f64; 3]> {
        let mut x = [0.0; 3];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = -k2 / (self.lambda_m(i) * t_kelvin);
            if !xi.is_finite() || *xi < MIN_EXPONENT {
                return Err(Error::Numeric(format!(
                    "Wien exponent −k2/(λ{}·T) = {xi:e} at T = {t_kelvin} K is out of range",
                    i + 1
                )));
            }
        }
        Ok(x)
    }
}

/// Which validation [`chromaticity`] and [`decompose`] apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Validation {
    #[default]
    Strict,
    Relaxed,
}

fn check(params: &ChromaticityParams, validation: Validation) -> Result<()> {
    match validation {
        Validation::Strict => params.validate(),
        Validation::Relaxed => params.validate_relaxed(),
    }
}

fn finite_positive(v: [f64; 3], what: &str) -> Result<[f64; 3]> {
    if v.iter().all(|x| x.is_finite() && *x > 0.0) {
        Ok(v)
    } else {
        Err(Error::Numeric(format!(
            "{what} is not finite and positive: {v:?}"
        )))
    }
}

/// Evaluates the skin-colour formation formula term by term, as written.
pub fn chromaticity(
    params: &ChromaticityParams,
    constants: &RadiationConstants,
    validation: Validation,
) -> Result<[f64; 3]> {
    check(params, validation)?;
    let x = params.exponents(constants.k2(), params.t_kelvin)?;
    let num: [f64; 3] = std::array::from_fn(|i| {
        params.delta[i] * params.lambda_m(i).powi(-5) * params.reflectance[i]
    });
    let geo = (num[0] * num[1] * num[2]).cbrt();
    let denom_exp = ((x[0] + x[1] + x[2]) / 3.0).exp();
    let c = std::array::from_fn(|i| num[i] / geo * (x[i].exp() / denom_exp));
    finite_positive(c, "chromaticity")
}

/// Illumination-robust part A and temperature-dependent part B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Decomposition {
    pub fn product(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.a[i] * self.b[i])
    }
}

/// A from log-domain geometric-mean normalisation (independent of T).
pub fn a_part(params: &ChromaticityParams) -> [f64; 3] {
    let logs: [f64; 3] = std::array::from_fn(|i| {
        params.delta[i].ln() - 5.0 * params.lambda_m(i).ln() + params.reflectance[i].ln()
    });
    let mean = (logs[0] + logs[1] + logs[2]) / 3.0;
    std::array::from_fn(|i| (logs[i] - mean).exp())
}

/// B at temperature `t_kelvin`, from exponent differences.
pub fn b_part(
    params: &ChromaticityParams,
    constants: &RadiationConstants,
    t_kelvin: f64,
) -> Result<[f64; 3]> {
    if !(t_kelvin.is_finite() && t_kelvin > 0.0) {
        return Err(Error::Argument(format!(
            "temperature {t_kelvin} K must be positive"
        )));
    }
    let x = params.exponents(constants.k2(), t_kelvin)?;
    let mean = (x[0] + x[1] + x[2]) / 3.0;
    finite_positive(std::array::from_fn(|i| (x[i] - mean).exp()), "B part")
}

pub fn decompose(
    params: &ChromaticityParams,
    constants: &RadiationConstants,
    validation: Validation,
) -> Result<Decomposition> {
    check(params, validation)?;
    let a = finite_positive(a_part(params), "A part")?;
    let b = b_part(params, constants, params.t_kelvin)?;
    Ok(Decomposition { a, b })
}

/// Kernel layout `[out_channels, 3, height, width]`; the second axis is the
/// colour channel that selects A/B components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInitSpec {
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub t_mean: f64,
    pub t_std: f64,
    pub seed: u64,
}

impl Default for KernelInitSpec {
    fn default() -> Self {
        Self {
            out_channels: 1,
            height: 3,
            width: 3,
            t_mean: 5000.0,
            t_std: 500.0,
            seed: 42,
        }
    }
}

/// Input channels of the kernel (R, G, B).
pub const KERNEL_IN_CHANNELS: usize = 3;

/// Redraws allowed when a temperature sample comes out non-positive.
pub const MAX_TEMPERATURE_REDRAWS: usize = 100;

impl KernelInitSpec {
    pub fn shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            KERNEL_IN_CHANNELS,
            self.height,
            self.width,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Argument(format!(
                "kernel shape {:?} must be positive",
                self.shape()
            )));
        }
        if !(self.t_std >= 0.0 && self.t_std.is_finite() && self.t_mean.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature distribution N({}, {}) is invalid",
                self.t_mean, self.t_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub shape: [usize; 4],
    /// Row-major over `shape`.
    pub values: Vec<f64>,
    /// The temperature drawn for each element.
    pub temperatures: Vec<f64>,
}

impl Kernel {
    pub fn channel_of(&self, element: usize) -> usize {
        let [_, c, h, w] = self.shape;
        (element / (h * w)) % c
    }
}

/// Draws one temperature for `element`. Each element has its own ChaCha
/// stream, so the tensor is the same however elements are scheduled.
fn sample_temperature(spec: &KernelInitSpec, element: usize) -> Result<f64> {
    if spec.t_std == 0.0 {
        return if spec.t_mean > 0.0 {
            Ok(spec.t_mean)
        } else {
            Err(Error::Numeric(format!(
                "mean temperature {} K is not positive",
                spec.t_mean
            )))
        };
    }
    let normal = Normal::new(spec.t_mean, spec.t_std)
        .map_err(|e| Error::Argument(format!("temperature distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(element as u64);
    for _ in 0..MAX_TEMPERATURE_REDRAWS {
        let t = normal.sample(&mut rng);
        if t > 0.0 {
            return Ok(t);
        }
    }
    Err(Error::Numeric(format!(
        "no positive temperature from N({}, {}) after {MAX_TEMPERATURE_REDRAWS} draws",
        spec.t_mean, spec.t_std
    )))
}

/// Elementwise product of the constant A kernel (broadcast per input
/// channel) and a B kernel evaluated at Gaussian-drawn temperatures.
pub fn init_kernel(
    spec: &KernelInitSpec,
    params_base: &ChromaticityParams,
    constants: &RadiationConstants,
) -> Result<Kernel> {
    spec.validate()?;
    params_base.validate()?;
    let a = a_part(params_base);
    let shape = spec.shape();
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    let mut temperatures = Vec::with_capacity(n);
    let plane = spec.height * spec.width;
    for e in 0..n {
        let ch = (e / plane) % KERNEL_IN_CHANNELS;
        let t = sample_temperature(spec, e)?;
        let b = b_part(params_base, constants, t)?;
        values.push(a[ch] * b[ch]);
        temperatures.push(t);
    }
    Ok(Kernel {
        shape,
        values,
        temperatures,
    })
}

/// Writes the kernel in the shaped binary matrix format: n = out channels,
/// dim = 3·height·width, shape recorded in the header.
pub fn export_kernel(kernel: &Kernel, path: &Path) -> Result<()> {
    if kernel.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kernel contains non-finite values".into()));
    }
    let [out, c, h, w] = kernel.shape;
    crate::refine::write_matrix(path, out, c * h * w, Some(&kernel.shape), &kernel.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    const K: RadiationConstants = RadiationConstants::DEFAULT;

    #[test]
    fn k2_matches_hand_value() {
        // 6.626e-34 * 3e8 / 1.381e-23
        assert!((K.k2() - 1.4393917451122376e-2).abs() < 1e-15);
    }

    #[test]
    fn symmetric_input_gives_unit_chromaticity() {
        let p = ChromaticityParams {
            lambda_nm: [550.0; 3],
            reflectance: [0.4; 3],
            delta: [2.0; 3],
            t_kelvin: 4000.0,
        };
        assert!(chromaticity(&p, &K, Validation::Strict).is_err());
        let c = chromaticity(&p, &K, Validation::Relaxed).unwrap();
        for ci in c {
            approx::assert_abs_diff_eq!(ci, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reference_point_agrees_both_ways() {
        let p = ChromaticityParams {
            lambda_nm: [700.0, 550.0, 450.0],
            reflectance: [1.0; 3],
            delta: [1.0; 3],
            t_kelvin: 5000.0,
        };
        let c = chromaticity(&p, &K, Validation::Strict).unwrap();
        let d = decompose(&p, &K, Validation::Strict).unwrap();
        for (x, y) in c.iter().zip(d.product()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        approx::assert_abs_diff_eq!(c.iter().product::<f64>(), 1.0, epsilon = 1e-12);
        // λ⁻⁵ favours blue, the Wien factor favours red
        assert!(d.a[0] < d.a[2]);
        assert!(d.b[0] > d.b[2]);
    }

    #[test]
    fn a_ignores_temperature_and_b_ignores_reflectance() {
        let p = ChromaticityParams::default();
        let hot = ChromaticityParams {
            t_kelvin: 9000.0,
            ..p
        };
        assert_eq!(a_part(&p), a_part(&hot));
        let shiny = ChromaticityParams {
            reflectance: [0.2, 0.5, 0.9],
            delta: [3.0, 1.0, 0.5],
            ..p
        };
        assert_eq!(
            b_part(&p, &K, 5000.0).unwrap(),
            b_part(&shiny, &K, 5000.0).unwrap()
        );
    }

    #[test]
    fn common_delta_scale_cancels() {
        let p = ChromaticityParams {
            delta: [0.3, 1.7, 2.2],
            ..ChromaticityParams::default()
        };
        let scaled = ChromaticityParams {
            delta: p.delta.map(|d| d * 42.0),
            ..p
        };
        let c1 = chromaticity(&p, &K, Validation::Strict).unwrap();
        let c2 = chromaticity(&scaled, &K, Validation::Strict).unwrap();
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn b_tends_to_one_at_high_temperature() {
        let b = b_part(&ChromaticityParams::default(), &K, 1e12).unwrap();
        for bi in b {
            assert!((bi - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_cold_is_a_numeric_error() {
        let p = ChromaticityParams {
            t_kelvin: 0.01,
            ..ChromaticityParams::default()
        };
        let err = chromaticity(&p, &K, Validation::Strict).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("exponent"));
    }

    #[test]
    fn out_of_band_wavelength_is_rejected() {
        let p = ChromaticityParams {
            lambda_nm: [600.0, 532.5, 472.5],
            ..ChromaticityParams::default()
        };
        assert!(matches!(
            decompose(&p, &K, Validation::Strict),
            Err(Error::Argument(_))
        ));
        let p = ChromaticityParams {
            reflectance: [0.0, 1.0, 1.0],
            ..ChromaticityParams::default()
        };
        assert!(p.validate_relaxed().is_err());
    }

    #[test]
    fn degenerate_gaussian_reproduces_chromaticity() {
        let spec = KernelInitSpec {
            t_std: 0.0,
            ..KernelInitSpec::default()
        };
        let p = ChromaticityParams::default();
        let k = init_kernel(&spec, &p, &K).unwrap();
        let c = chromaticity(&p, &K, Validation::Strict).unwrap();
        for (e, v) in k.values.iter().enumerate() {
            assert!((v - c[k.channel_of(e)]).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_deterministic_per_seed() {
        let p = ChromaticityParams::default();
        let spec = KernelInitSpec {
            out_channels: 4,
            ..KernelInitSpec::default()
        };
        let a = init_kernel(&spec, &p, &K).unwrap();
        let b = init_kernel(&spec, &p, &K).unwrap();
        assert_eq!(a, b);
        let other = init_kernel(&KernelInitSpec { seed: 7, ..spec }, &p, &K).unwrap();
        assert_ne!(a.values, other.values);
    }

    #[test]
    fn impossible_truncation_fails() {
        let spec = KernelInitSpec {
            t_mean: -1e6,
            t_std: 1.0,
            ..KernelInitSpec::default()
        };
        assert!(matches!(
            init_kernel(&spec, &ChromaticityParams::default(), &K),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn export_writes_shaped_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.bin");
        let spec = KernelInitSpec {
            out_channels: 2,
            height: 1,
            width: 2,
            ..KernelInitSpec::default()
        };
        let k = init_kernel(&spec, &ChromaticityParams::default(), &K).unwrap();
        export_kernel(&k, &path).unwrap();
        let m = crate::refine::read_matrix(&path).unwrap();
        assert_eq!(m.shape, Some(vec![2, 3, 1, 2]));
        assert_eq!((m.n, m.dim), (2, 6));
        for (x, y) in m.data.iter().zip(&k.values) {
            assert!((x - y).abs() <= 1e-6 * y.abs());
        }
    }
}
