//! System description for `ẋ = A(t)x + f(t,x) + F(t)` and mechanical derivation
//! of Lipschitz envelopes from polynomial nonlinearities.
//!
//! Every time-dependent coefficient is a [`TrigAffineScalar`]: a constant plus a
//! finite sum of sinusoids. That class keeps `sup_t |c(t)|` exactly computable,
//! which is what the envelope and forcing bounds need.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {what} has size {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("monomial in component {component} has total degree 0; f(t, 0) = 0 requires degree >= 1")]
    ConstantMonomial { component: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One sinusoid `amplitude * sin(angular_frequency * t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub amplitude: f64,
    #[serde(alias = "frequency")]
    pub angular_frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Harmonic {
    pub fn new(amplitude: f64, angular_frequency: f64, phase: f64) -> Self {
        Self {
            amplitude,
            angular_frequency,
            phase,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.angular_frequency * t + self.phase).sin()
    }
}

/// Scalar function `c + Σ aᵢ sin(ωᵢ t + φᵢ)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigAffineScalar {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
}

impl TrigAffineScalar {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            harmonics: Vec::new(),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn sine(amplitude: f64, angular_frequency: f64) -> Self {
        Self::constant(0.0).with_harmonic(amplitude, angular_frequency, 0.0)
    }

    pub fn with_harmonic(mut self, amplitude: f64, angular_frequency: f64, phase: f64) -> Self {
        self.harmonics
            .push(Harmonic::new(amplitude, angular_frequency, phase));
        self
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.constant + self.harmonics.iter().map(|h| h.eval(t)).sum::<f64>()
    }

    /// `|c| + Σ|aᵢ|`, an upper bound on `sup_t |self(t)|`.
    pub fn sup_abs(&self) -> f64 {
        self.constant.abs() + self.harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>()
    }

    /// `c + Σ|aᵢ|`, an upper bound on `sup_t self(t)`.
    pub fn sup(&self) -> f64 {
        self.constant + self.harmonics.iter().map(|h| h.amplitude.abs()).sum::<f64>()
    }

    /// True when the function vanishes for every `t`.
    pub fn is_identically_zero(&self) -> bool {
        self.constant == 0.0 && self.harmonics.iter().all(|h| h.amplitude == 0.0)
    }

    /// Copy with every harmonic removed.
    pub fn frozen(&self) -> Self {
        Self::constant(self.constant)
    }

    pub fn is_finite(&self) -> bool {
        self.constant.is_finite()
            && self.harmonics.iter().all(|h| {
                h.amplitude.is_finite() && h.angular_frequency.is_finite() && h.phase.is_finite()
            })
    }
}

/// Square matrix with trig-affine entries, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFunction {
    n: usize,
    entries: Vec<TrigAffineScalar>,
}

impl MatrixFunction {
    pub fn new(n: usize, entries: Vec<TrigAffineScalar>) -> Result<Self, ModelError> {
        if n == 0 || entries.len() != n * n {
            return Err(ModelError::Dimension {
                what: "matrix entries",
                got: entries.len(),
                expected: n * n,
            });
        }
        if !entries.iter().all(TrigAffineScalar::is_finite) {
            return Err(ModelError::NonFinite("A(t)"));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: Vec<Vec<TrigAffineScalar>>) -> Result<Self, ModelError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(ModelError::Dimension {
                what: "matrix row",
                got: bad.len(),
                expected: n,
            });
        }
        Self::new(n, rows.into_iter().flatten().collect())
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square());
        let n = m.nrows();
        let entries = (0..n * n)
            .map(|idx| TrigAffineScalar::constant(m[(idx / n, idx % n)]))
            .collect();
        Self { n, entries }
    }

    pub fn zeros(n: usize) -> Self {
        Self::constant(&DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entry(&self, row: usize, col: usize) -> &TrigAffineScalar {
        &self.entries[row * self.n + col]
    }

    pub fn rows(&self) -> Vec<Vec<TrigAffineScalar>> {
        self.entries.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.entries[i * self.n + j].eval(t))
    }

    /// Writes `A(t) x` into `out`.
    pub fn apply(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.entries[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(x).map(|(a, xj)| a.eval(t) * xj).sum();
        }
    }

    /// The mean matrix: every harmonic part zeroed.
    pub fn frozen_mean(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.entries[i * self.n + j].constant)
    }

    pub fn is_constant(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.harmonics.iter().all(|h| h.amplitude == 0.0))
    }
}

/// `coefficient(t) · Π x_m^{e_m}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coefficient: TrigAffineScalar,
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn new(coefficient: TrigAffineScalar, exponents: Vec<u32>) -> Self {
        Self {
            coefficient,
            exponents,
        }
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let c = self.coefficient.eval(t);
        if c == 0.0 {
            return 0.0;
        }
        self.exponents
            .iter()
            .zip(x)
            .fold(c, |acc, (&e, &xi)| acc * xi.powi(e as i32))
    }
}

/// Polynomial vector field, one list of monomials per component.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialField {
    components: Vec<Vec<Monomial>>,
}

impl PolynomialField {
    pub fn new(components: Vec<Vec<Monomial>>) -> Result<Self, ModelError> {
        let n = components.len();
        for (ci, comp) in components.iter().enumerate() {
            for m in comp {
                if m.exponents.len() != n {
                    return Err(ModelError::Dimension {
                        what: "monomial exponents",
                        got: m.exponents.len(),
                        expected: n,
                    });
                }
                if m.degree() == 0 {
                    return Err(ModelError::ConstantMonomial { component: ci });
                }
                if !m.coefficient.is_finite() {
                    return Err(ModelError::NonFinite("f(t,x) coefficient"));
                }
            }
        }
        Ok(Self { components })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            components: vec![Vec::new(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Vec<Monomial>] {
        &self.components
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, comp) in out.iter_mut().zip(&self.components) {
            *o = comp.iter().map(|m| m.eval(t, x)).sum();
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out);
        out
    }
}

/// External forcing `F(t)` with its cached amplitude `F̂ ≥ sup_t ‖F(t)‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingTerm {
    components: Vec<TrigAffineScalar>,
    amplitude_hat: f64,
}

impl ForcingTerm {
    pub fn new(components: Vec<TrigAffineScalar>) -> Result<Self, ModelError> {
        if !components.iter().all(TrigAffineScalar::is_finite) {
            return Err(ModelError::NonFinite("F(t)"));
        }
        let amplitude_hat = components
            .iter()
            .map(|c| c.sup_abs().powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(Self {
            components,
            amplitude_hat,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            components: vec![TrigAffineScalar::zero(); n],
            amplitude_hat: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[TrigAffineScalar] {
        &self.components
    }

    pub fn amplitude_hat(&self) -> f64 {
        self.amplitude_hat
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(t);
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.components.iter().map(|c| c.eval(t)).collect()
    }

    pub fn norm_at(&self, t: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.eval(t).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude_hat == 0.0
    }
}

/// `F̂ = sup_t ‖F(t)‖`, bounded by the 2-norm of per-component sup bounds.
pub fn forcing_amplitude(forcing: &ForcingTerm) -> f64 {
    forcing.amplitude_hat()
}

/// Complete description of one system of the form `ẋ = A(t)x + f(t,x) + F(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub a: MatrixFunction,
    pub f: PolynomialField,
    pub forcing: ForcingTerm,
    pub t0: f64,
    pub horizon: f64,
    /// Radius of the ball where the envelope is valid; `None` means global.
    pub omega2_radius: Option<f64>,
}

impl SystemSpec {
    pub fn new(
        a: MatrixFunction,
        f: PolynomialField,
        forcing: ForcingTerm,
        t0: f64,
        horizon: f64,
        omega2_radius: Option<f64>,
    ) -> Result<Self, ModelError> {
        let n = a.dim();
        if f.dim() != n {
            return Err(ModelError::Dimension {
                what: "f(t,x)",
                got: f.dim(),
                expected: n,
            });
        }
        if forcing.dim() != n {
            return Err(ModelError::Dimension {
                what: "F(t)",
                got: forcing.dim(),
                expected: n,
            });
        }
        if !t0.is_finite() {
            return Err(ModelError::NonFinite("t0"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if let Some(r) = omega2_radius {
            if !(r > 0.0) {
                return Err(ModelError::InvalidArgument(format!(
                    "omega2_radius must be positive, got {r}"
                )));
            }
        }
        Ok(Self {
            a,
            f,
            forcing,
            t0,
            horizon,
            omega2_radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// Writes `A(t)x + f(t,x) + F(t)` into `out`.
    pub fn rhs_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        self.a.apply(t, x, out);
        for (i, comp) in self.f.components().iter().enumerate() {
            out[i] += comp.iter().map(|m| m.eval(t, x)).sum::<f64>();
        }
        for i in 0..n {
            out[i] += self.forcing.components()[i].eval(t);
        }
    }

    pub fn homogeneous(&self) -> Self {
        Self {
            forcing: ForcingTerm::zero(self.dim()),
            ..self.clone()
        }
    }
}

/// `A(t)x + f(t,x) + F(t)`.
pub fn eval_rhs(spec: &SystemSpec, t: f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim()];
    spec.rhs_into(t, x, &mut out);
    out
}

/// `c_d(t) = Σ |coefficient_j(t)|` over the monomials of one total degree.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CoefficientProfile {
    parts: Vec<TrigAffineScalar>,
}

impl CoefficientProfile {
    pub fn eval(&self, t: f64) -> f64 {
        self.parts.iter().map(|p| p.eval(t).abs()).sum()
    }

    /// Exact harmonic sup bound.
    pub fn sup(&self) -> f64 {
        self.parts.iter().map(TrigAffineScalar::sup_abs).sum()
    }

    pub fn parts(&self) -> &[TrigAffineScalar] {
        &self.parts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeTerm {
    pub degree: u32,
    pub profile: CoefficientProfile,
    /// `ĉ_d = sup_t c_d(t)`.
    pub sup: f64,
}

/// `L(t, ρ) = Σ_d c_d(t) ρ^d` with `‖f(t,x)‖₂ ≤ L(t, ‖x‖₂)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LipschitzEnvelope {
    terms: Vec<EnvelopeTerm>,
}

impl LipschitzEnvelope {
    /// Envelope built directly from constant coefficients `(degree, c)`.
    pub fn from_constants(terms: &[(u32, f64)]) -> Self {
        let mut env = Self::default();
        for &(d, c) in terms {
            assert!(d >= 1, "envelope degree must be >= 1");
            env.add(d, TrigAffineScalar::constant(c));
        }
        env
    }

    fn add(&mut self, degree: u32, coefficient: TrigAffineScalar) {
        let pos = self.terms.iter().position(|t| t.degree >= degree);
        match pos {
            Some(i) if self.terms[i].degree == degree => {
                let term = &mut self.terms[i];
                term.sup += coefficient.sup_abs();
                term.profile.parts.push(coefficient);
            }
            Some(i) => self.terms.insert(i, Self::term(degree, coefficient)),
            None => self.terms.push(Self::term(degree, coefficient)),
        }
    }

    fn term(degree: u32, coefficient: TrigAffineScalar) -> EnvelopeTerm {
        EnvelopeTerm {
            degree,
            sup: coefficient.sup_abs(),
            profile: CoefficientProfile {
                parts: vec![coefficient],
            },
        }
    }

    pub fn terms(&self) -> &[EnvelopeTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.sup == 0.0)
    }

    pub fn eval(&self, t: f64, rho: f64) -> f64 {
        self.terms
            .iter()
            .map(|term| term.profile.eval(t) * rho.powi(term.degree as i32))
            .sum()
    }

    /// `L̂(ρ) = Σ ĉ_d ρ^d`.
    pub fn eval_sup(&self, rho: f64) -> f64 {
        self.terms
            .iter()
            .map(|term| term.sup * rho.powi(term.degree as i32))
            .sum()
    }

    /// `(degree, ĉ_d)` pairs, ascending degree.
    pub fn sup_coefficients(&self) -> Vec<(u32, f64)> {
        self.terms.iter().map(|t| (t.degree, t.sup)).collect()
    }

    /// A single power law `c ρ^α` with a constant coefficient, if that is what this is.
    pub fn single_power(&self) -> Option<(f64, u32)> {
        let live: Vec<_> = self.terms.iter().filter(|t| t.sup > 0.0).collect();
        match live.as_slice() {
            [term] if term.profile.parts.iter().all(|p| p.harmonics.is_empty()) => {
                Some((term.sup, term.degree))
            }
            _ => None,
        }
    }
}

/// Builds `L(t, ρ)` from a polynomial field using `‖f‖₂ ≤ ‖f‖₁` and `|x_m|^k ≤ ‖x‖₂^k`:
/// each monomial's absolute coefficient lands in the bucket of its total degree.
pub fn derive_envelope(f: &PolynomialField) -> LipschitzEnvelope {
    let mut env = LipschitzEnvelope::default();
    for comp in f.components() {
        for m in comp {
            if m.coefficient.is_identically_zero() {
                continue;
            }
            env.add(m.degree(), m.coefficient.clone());
        }
    }
    env
}

/// Classical Lipschitz bound `‖f(t,x)‖ ≤ l(t)‖x‖` on the ball `‖x‖ ≤ R`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLipschitz {
    pub radius: f64,
    pub l_hat: f64,
    envelope: LipschitzEnvelope,
}

impl LinearLipschitz {
    /// `l(t) = Σ c_d(t) R^{d-1}`.
    pub fn profile(&self, t: f64) -> f64 {
        self.envelope
            .terms()
            .iter()
            .map(|term| term.profile.eval(t) * self.radius.powi(term.degree as i32 - 1))
            .sum()
    }
}

pub fn lipschitz_constant(env: &LipschitzEnvelope, radius: f64) -> Result<LinearLipschitz, ModelError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(ModelError::InvalidArgument(format!(
            "Lipschitz radius must be positive, got {radius}"
        )));
    }
    let l_hat = env
        .terms()
        .iter()
        .map(|term| term.sup * radius.powi(term.degree as i32 - 1))
        .sum();
    Ok(LinearLipschitz {
        radius,
        l_hat,
        envelope: env.clone(),
    })
}

/// Stand-in radius for the classical Lipschitz constant when none is supplied:
/// `R = κ·X₀`, with `κ` taken from the energy norm of the undamped frozen system.
///
/// For a 2-D companion-form mean matrix `[[0, 1], [-ω₀², ·]]` this is
/// `κ = sqrt(max(ω₀², 1) / min(ω₀², 1))`. Other systems fall back to `κ = 1`.
pub fn default_lipschitz_radius(a: &MatrixFunction, x0_level: f64) -> f64 {
    let m = a.frozen_mean();
    let kappa = if m.nrows() == 2 && m[(0, 0)] == 0.0 && m[(0, 1)] == 1.0 && m[(1, 0)] < 0.0 {
        let w2 = -m[(1, 0)];
        (w2.max(1.0) / w2.min(1.0)).sqrt()
    } else {
        1.0
    };
    kappa * x0_level
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paper_system(a1: f64, a2: f64, alpha2: f64, a: f64) -> SystemSpec {
        let c = TrigAffineScalar::constant;
        let a_mat = MatrixFunction::from_rows(vec![
            vec![c(0.0), c(1.0)],
            vec![
                c(-4.0)
                    .with_harmonic(-a1, std::f64::consts::PI, 0.0)
                    .with_harmonic(-a2, 7.0, 0.0),
                c(-0.2),
            ],
        ])
        .unwrap();
        let f = PolynomialField::new(vec![vec![], vec![Monomial::new(c(-alpha2), vec![0, 3])]]).unwrap();
        let forcing = ForcingTerm::new(vec![
            c(0.0),
            TrigAffineScalar::sine(a, 2.0 * std::f64::consts::PI),
        ])
        .unwrap();
        SystemSpec::new(a_mat, f, forcing, 0.0, 10.0, None).unwrap()
    }

    #[test]
    fn rhs_of_unperturbed_system() {
        let spec = paper_system(0.0, 0.0, 0.1, 0.0);
        let v = eval_rhs(&spec, 0.0, &[1.0, 0.0]);
        assert_eq!(v, vec![0.0, -4.0]);
        assert_eq!(eval_rhs(&spec, 3.0, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn rhs_pure_forcing() {
        let c = TrigAffineScalar::constant;
        let spec = SystemSpec::new(
            MatrixFunction::zeros(2),
            PolynomialField::zero(2),
            ForcingTerm::new(vec![c(0.0), TrigAffineScalar::sine(0.01, 2.0 * std::f64::consts::PI)]).unwrap(),
            0.0,
            1.0,
            None,
        )
        .unwrap();
        let v = eval_rhs(&spec, 0.25, &[0.0, 0.0]);
        assert_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.01, epsilon = 1e-15);
    }

    #[test]
    fn envelope_of_mixed_field() {
        let c = TrigAffineScalar::constant;
        let f = PolynomialField::new(vec![
            vec![Monomial::new(c(1.0), vec![1, 3])],
            vec![Monomial::new(c(1.0), vec![2, 0])],
        ])
        .unwrap();
        let env = derive_envelope(&f);
        assert_eq!(env.sup_coefficients(), vec![(2, 1.0), (4, 1.0)]);
        assert_relative_eq!(env.eval(0.0, 2.0), 16.0 + 4.0);
    }

    #[test]
    fn envelope_of_cubic_damping() {
        let spec = paper_system(0.5, 0.5, 0.1, 0.0);
        let env = derive_envelope(&spec.f);
        assert_eq!(env.sup_coefficients(), vec![(3, 0.1)]);
        assert!(derive_envelope(&PolynomialField::zero(3)).is_zero());
        assert_eq!(env.single_power(), Some((0.1, 3)));
    }

    #[test]
    fn duffing_and_van_der_pol_share_envelope() {
        let c = TrigAffineScalar::constant;
        let vdp = PolynomialField::new(vec![vec![], vec![Monomial::new(c(-0.1), vec![0, 3])]]).unwrap();
        let duffing = PolynomialField::new(vec![vec![], vec![Monomial::new(c(-0.1), vec![3, 0])]]).unwrap();
        assert_eq!(derive_envelope(&vdp), derive_envelope(&duffing));
    }

    #[test]
    fn lipschitz_constants() {
        let cubic = LipschitzEnvelope::from_constants(&[(3, 0.1)]);
        assert_relative_eq!(lipschitz_constant(&cubic, 2.0).unwrap().l_hat, 0.4, epsilon = 1e-15);
        let mixed = LipschitzEnvelope::from_constants(&[(4, 1.0), (2, 1.0)]);
        assert_relative_eq!(lipschitz_constant(&mixed, 1.0).unwrap().l_hat, 2.0);
        let zero = LipschitzEnvelope::default();
        assert_eq!(lipschitz_constant(&zero, 5.0).unwrap().l_hat, 0.0);
        assert!(matches!(
            lipschitz_constant(&cubic, 0.0),
            Err(ModelError::InvalidArgument(_))
        ));
    }

    #[test]
    fn forcing_amplitudes() {
        let c = TrigAffineScalar::constant;
        let single = ForcingTerm::new(vec![c(0.0), TrigAffineScalar::sine(0.01, 2.0 * std::f64::consts::PI)]).unwrap();
        assert_relative_eq!(forcing_amplitude(&single), 0.01);
        assert_eq!(forcing_amplitude(&ForcingTerm::zero(2)), 0.0);
        let two = ForcingTerm::new(vec![
            TrigAffineScalar::sine(0.03, 1.0),
            TrigAffineScalar::constant(0.0).with_harmonic(0.04, 1.0, std::f64::consts::FRAC_PI_2),
        ])
        .unwrap();
        assert_relative_eq!(forcing_amplitude(&two), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn degree_zero_monomial_rejected() {
        let err = PolynomialField::new(vec![vec![Monomial::new(TrigAffineScalar::constant(1.0), vec![0, 0])], vec![]]);
        assert_eq!(err, Err(ModelError::ConstantMonomial { component: 0 }));
    }

    #[test]
    fn default_radius_uses_energy_ratio() {
        let spec = paper_system(0.5, 0.5, 0.1, 0.0);
        assert_relative_eq!(default_lipschitz_radius(&spec.a, 0.5), 1.0);
    }

    #[test]
    fn sampled_envelope_and_forcing_bounds() {
        let c = TrigAffineScalar::constant;
        let f = PolynomialField::new(vec![
            vec![
                Monomial::new(c(0.3).with_harmonic(0.2, 1.3, 0.1), vec![1, 1, 0]),
                Monomial::new(TrigAffineScalar::sine(-0.5, 2.0), vec![0, 0, 3]),
            ],
            vec![Monomial::new(c(-1.0), vec![2, 0, 1])],
            vec![
                Monomial::new(c(0.7), vec![0, 2, 0]),
                Monomial::new(c(0.1).with_harmonic(0.4, 0.5, 0.0), vec![1, 0, 0]),
            ],
        ])
        .unwrap();
        let env = derive_envelope(&f);
        let forcing = ForcingTerm::new(vec![
            TrigAffineScalar::sine(0.3, 1.0),
            c(0.1).with_harmonic(0.2, 3.0, 0.5),
            c(0.0),
        ])
        .unwrap();
        let radius = 4.0;
        let lin = lipschitz_constant(&env, radius).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let t: f64 = rng.random_range(-50.0..50.0);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-6.0..6.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fx = f.eval(t, &x);
            let fnorm = fx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let l = env.eval(t, norm);
            assert!(fnorm <= l * (1.0 + 1e-12) + 1e-300, "envelope violated");
            assert!(l >= 0.0);
            assert!(forcing.norm_at(t) <= forcing.amplitude_hat() + 1e-15);
            if norm <= radius {
                assert!(fnorm <= lin.profile(t) * norm * (1.0 + 1e-12) + 1e-300);
                assert!(l <= lin.profile(t) * norm * (1.0 + 1e-12) + 1e-300);
                assert!(lin.profile(t) <= lin.l_hat * (1.0 + 1e-12));
            }
        }
    }
}
