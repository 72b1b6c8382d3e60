//! Problem definitions: coefficient fields, affine parameter maps, priors.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvrbError};

/// One-dimensional factor of a separable field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    One,
    Cos(u32),
    Sin(u32),
}

impl Trig {
    fn eval(self, t: f64) -> f64 {
        match self {
            Trig::One => 1.0,
            Trig::Cos(k) => (k as f64 * PI * t).cos(),
            Trig::Sin(k) => (k as f64 * PI * t).sin(),
        }
    }
}

pub type FieldFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// A θ-independent spatial field `a_j(x)` or load density `f_j(x)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// `amplitude * x(x1) * y(x2)`.
    Separable {
        amplitude: f64,
        x: Trig,
        y: Trig,
    },
    /// Indicator of the half-open box `[x0,x1) x [y0,y1)`.
    Indicator {
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    },
    #[serde(skip)]
    Function(FieldFn),
}

impl fmt::Debug for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Constant { value } => write!(f, "Constant({value})"),
            FieldSpec::Separable { amplitude, x, y } => {
                write!(f, "Separable({amplitude}, {x:?}, {y:?})")
            }
            FieldSpec::Indicator { x0, x1, y0, y1 } => {
                write!(f, "Indicator([{x0},{x1})x[{y0},{y1}))")
            }
            FieldSpec::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl FieldSpec {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        match self {
            FieldSpec::Constant { value } => *value,
            FieldSpec::Separable { amplitude, x, y } => amplitude * x.eval(p[0]) * y.eval(p[1]),
            FieldSpec::Indicator { x0, x1, y0, y1 } => {
                if p[0] >= *x0 && p[0] < *x1 && p[1] >= *y0 && p[1] < *y1 {
                    1.0
                } else {
                    0.0
                }
            }
            FieldSpec::Function(f) => f(p),
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        matches!(self, FieldSpec::Constant { .. } | FieldSpec::Indicator { .. })
    }
}

/// θ-dependence `c_j(θ)` of one affine term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Coefficient {
    Constant { value: f64 },
    /// `scale * θ_index`
    Linear { index: usize, scale: f64 },
    /// `exp(θ_index / 2)`
    ExpHalf { index: usize },
    /// Placeholder for coefficient fields that do not separate from θ; always rejected.
    Nonaffine { description: String },
}

impl Coefficient {
    pub fn one() -> Self {
        Coefficient::Constant { value: 1.0 }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            Coefficient::Constant { value } => *value,
            Coefficient::Linear { index, scale } => scale * theta[*index],
            Coefficient::ExpHalf { index } => (0.5 * theta[*index]).exp(),
            Coefficient::Nonaffine { .. } => f64::NAN,
        }
    }

    /// `(index, d c / d θ_index)` for the single parameter this coefficient depends on.
    pub fn derivative(&self, theta: &[f64]) -> Option<(usize, f64)> {
        match self {
            Coefficient::Constant { .. } | Coefficient::Nonaffine { .. } => None,
            Coefficient::Linear { index, scale } => Some((*index, *scale)),
            Coefficient::ExpHalf { index } => Some((*index, 0.5 * (0.5 * theta[*index]).exp())),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Coefficient::Nonaffine { description } => Err(SvrbError::Unsupported(format!(
                "non-affine coefficient '{description}'"
            ))),
            Coefficient::Linear { index, .. } | Coefficient::ExpHalf { index } if *index >= dim => {
                Err(SvrbError::Config(format!(
                    "coefficient references theta[{index}] but dim = {dim}"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineTerm {
    pub field: FieldSpec,
    pub coefficient: Coefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PriorSpec {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    StandardGaussian { dim: usize },
}

impl PriorSpec {
    pub fn uniform_symmetric(dim: usize, half_width: f64) -> Self {
        PriorSpec::UniformBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::UniformBox { lo, .. } => lo.len(),
            PriorSpec::StandardGaussian { dim } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PriorSpec::UniformBox { lo, hi } = self {
            if lo.len() != hi.len() || lo.is_empty() {
                return Err(SvrbError::Config("uniform prior bounds have mismatched length".into()));
            }
            if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                return Err(SvrbError::Config("uniform prior requires lo < hi componentwise".into()));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            PriorSpec::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect(),
            PriorSpec::StandardGaussian { dim } => {
                (0..*dim).map(|_| StandardNormal.sample(rng)).collect()
            }
        }
    }

    /// `∇ log p0(θ)`; zero in the interior of a uniform box.
    pub fn score(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            PriorSpec::UniformBox { .. } => vec![0.0; theta.len()],
            PriorSpec::StandardGaussian { .. } => theta.iter().map(|t| -t).collect(),
        }
    }

    /// `log p0(θ)` up to an additive constant; `-inf` outside a uniform box.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            PriorSpec::UniformBox { lo, hi } => {
                let inside = theta
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(t, (a, b))| t >= a && t <= b);
                if inside {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorSpec::StandardGaussian { .. } => -0.5 * theta.iter().map(|t| t * t).sum::<f64>(),
        }
    }

    /// Projects onto the closed support; returns the number of clamped components.
    pub fn clamp(&self, theta: &mut [f64]) -> usize {
        match self {
            PriorSpec::UniformBox { lo, hi } => {
                let mut count = 0;
                for (t, (a, b)) in theta.iter_mut().zip(lo.iter().zip(hi)) {
                    if *t < *a {
                        *t = *a;
                        count += 1;
                    } else if *t > *b {
                        *t = *b;
                        count += 1;
                    }
                }
                count
            }
            PriorSpec::StandardGaussian { .. } => 0,
        }
    }
}

/// Fully explicit problem description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomCase {
    pub diffusion: Vec<AffineTerm>,
    pub load: Vec<AffineTerm>,
    pub prior: PriorSpec,
    /// Observation points; defaults to the interior 7x7 grid.
    #[serde(default)]
    pub observations: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseKind {
    /// `a = 5 + sum_j θ_j cos(j1 π x1) cos(j2 π x2)`, θ ~ U([-√3, √3]^4), f = 1.
    Uniform4,
    /// `a = sum_j exp(θ_j/2) χ_{D_j}` over the 3x3 partition, θ ~ N(0, I_9), f = 1.
    Gaussian9,
    Custom(CustomCase),
}

fn default_noise_level() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_floor() -> f64 {
    1e-8
}
fn default_obs_grid() -> usize {
    7
}

/// Linear solver for the high-fidelity systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearSolver {
    #[default]
    Cholesky,
    /// Jacobi-preconditioned conjugate gradients.
    Cg { max_iter: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub case: CaseKind,
    /// Cells per side.
    pub mesh: usize,
    /// Observation points form the interior `g x g` grid at `i/(g+1)`.
    #[serde(default = "default_obs_grid")]
    pub observation_grid: usize,
    /// σ = noise_level * max_i o_i(u(θ_ref)).
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    #[serde(default)]
    pub theta_ref: Option<Vec<f64>>,
    /// Parameter generating the synthetic data; defaults to θ_ref.
    #[serde(default)]
    pub theta_data: Option<Vec<f64>>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_true")]
    pub add_noise: bool,
    #[serde(default = "default_floor")]
    pub coercivity_floor: f64,
    #[serde(default)]
    pub solver: LinearSolver,
}

impl CaseConfig {
    pub fn new(case: CaseKind, mesh: usize) -> Self {
        Self {
            case,
            mesh,
            observation_grid: default_obs_grid(),
            noise_level: default_noise_level(),
            theta_ref: None,
            theta_data: None,
            data_seed: 0,
            add_noise: true,
            coercivity_floor: default_floor(),
            solver: LinearSolver::Cholesky,
        }
    }

    pub fn uniform4(mesh: usize) -> Self {
        Self::new(CaseKind::Uniform4, mesh)
    }

    pub fn gaussian9(mesh: usize) -> Self {
        Self::new(CaseKind::Gaussian9, mesh)
    }

    pub fn noiseless(mut self) -> Self {
        self.add_noise = false;
        self
    }

    /// Expands the named cases into explicit terms.
    pub fn resolve(&self) -> Result<CustomCase> {
        match &self.case {
            CaseKind::Uniform4 => {
                let mut diffusion = vec![AffineTerm {
                    field: FieldSpec::Constant { value: 5.0 },
                    coefficient: Coefficient::one(),
                }];
                for (j, (j1, j2)) in [(1, 1), (1, 2), (2, 1), (2, 2)].into_iter().enumerate() {
                    diffusion.push(AffineTerm {
                        field: FieldSpec::Separable {
                            amplitude: 1.0,
                            x: Trig::Cos(j1),
                            y: Trig::Cos(j2),
                        },
                        coefficient: Coefficient::Linear { index: j, scale: 1.0 },
                    });
                }
                Ok(CustomCase {
                    diffusion,
                    load: vec![unit_load()],
                    prior: PriorSpec::uniform_symmetric(4, 3f64.sqrt()),
                    observations: None,
                })
            }
            CaseKind::Gaussian9 => {
                let mut diffusion = Vec::with_capacity(9);
                for row in 0..3 {
                    for col in 0..3 {
                        let third = 1.0 / 3.0;
                        let edge = |k: usize| if k == 3 { 1.0 + 1e-12 } else { k as f64 * third };
                        diffusion.push(AffineTerm {
                            field: FieldSpec::Indicator {
                                x0: edge(col),
                                x1: edge(col + 1),
                                y0: edge(row),
                                y1: edge(row + 1),
                            },
                            coefficient: Coefficient::ExpHalf { index: 3 * row + col },
                        });
                    }
                }
                Ok(CustomCase {
                    diffusion,
                    load: vec![unit_load()],
                    prior: PriorSpec::StandardGaussian { dim: 9 },
                    observations: None,
                })
            }
            CaseKind::Custom(c) => Ok(c.clone()),
        }
    }
}

fn unit_load() -> AffineTerm {
    AffineTerm {
        field: FieldSpec::Constant { value: 1.0 },
        coefficient: Coefficient::one(),
    }
}

pub(crate) fn validate_terms(case: &CustomCase) -> Result<()> {
    let dim = case.prior.dim();
    case.prior.validate()?;
    if case.diffusion.is_empty() || case.load.is_empty() {
        return Err(SvrbError::Config("at least one diffusion and one load term required".into()));
    }
    for t in case.diffusion.iter().chain(&case.load) {
        t.coefficient.validate(dim)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn coefficient_derivatives() {
        let c = Coefficient::ExpHalf { index: 1 };
        let th = [0.3, -0.4];
        let (i, d) = c.derivative(&th).unwrap();
        let fd = (c.value(&[0.3, -0.4 + 1e-6]) - c.value(&[0.3, -0.4 - 1e-6])) / 2e-6;
        assert_eq!(i, 1);
        assert!((d - fd).abs() < 1e-9);
        assert!(Coefficient::Nonaffine { description: "x".into() }.validate(2).is_err());
    }

    #[test]
    fn prior_behaviour() {
        let p = PriorSpec::StandardGaussian { dim: 2 };
        assert_eq!(p.score(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(p.score(&[1.0, 0.0]), vec![-1.0, 0.0]);
        let u = PriorSpec::uniform_symmetric(3, 1.0);
        assert_eq!(u.score(&[0.2, 0.1, -0.5]), vec![0.0; 3]);
        let mut th = [2.0, 0.0, -3.0];
        assert_eq!(u.clamp(&mut th), 2);
        assert_eq!(th, [1.0, 0.0, -1.0]);
        assert_eq!(u.log_density(&[1.5, 0.0, 0.0]), f64::NEG_INFINITY);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = u.sample(&mut rng);
            assert!(s.iter().all(|x| x.abs() <= 1.0));
        }
        assert!(PriorSpec::UniformBox { lo: vec![1.0], hi: vec![1.0] }.validate().is_err());
    }

    #[test]
    fn gaussian9_partition() {
        let c = CaseConfig::gaussian9(9).resolve().unwrap();
        assert_eq!(c.diffusion.len(), 9);
        // bottom-left, bottom-right and top-right cells
        assert_eq!(c.diffusion[0].field.eval([0.1, 0.1]), 1.0);
        assert_eq!(c.diffusion[2].field.eval([0.9, 0.1]), 1.0);
        assert_eq!(c.diffusion[8].field.eval([1.0, 1.0]), 1.0);
        assert_eq!(CaseConfig::gaussian9(8).resolve().unwrap().diffusion.len(), 9);
    }

    #[test]
    fn case_json_roundtrip() {
        let json = r#"{"case":{"kind":"uniform4"},"mesh":16,"data_seed":4}"#;
        let c: CaseConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.mesh, 16);
        assert!(c.add_noise);
        let bad = r#"{"case":{"kind":"uniform4"},"mesh":16,"bogus":1}"#;
        assert!(serde_json::from_str::<CaseConfig>(bad).is_err());
    }
}
