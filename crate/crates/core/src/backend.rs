//! Potential/gradient providers for the sampler.

use crate::error::Result;
use crate::fem::AffineProblem;
use crate::hifi;
use crate::rb::{self, ReducedModel};
use crate::svgd::{initial_particles_where, CostKind, Evaluation, PosteriorBackend};

/// Seeded prior draws restricted to parameters with a coercive coefficient field.
pub fn prior_ensemble(problem: &AffineProblem, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    initial_particles_where(problem.prior(), count, seed, |t| problem.check_coercivity(t).is_ok())
}

/// Full finite-element potential and adjoint gradient.
pub struct HiFiBackend<'p> {
    problem: &'p AffineProblem,
}

impl<'p> HiFiBackend<'p> {
    pub fn new(problem: &'p AffineProblem) -> Self {
        Self { problem }
    }
}

impl PosteriorBackend for HiFiBackend<'_> {
    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        let e = hifi::grad_potential(self.problem, theta)?;
        Ok(Evaluation {
            eta: e.eta,
            grad: e.grad_eta,
        })
    }

    fn potential(&self, theta: &[f64]) -> Result<f64> {
        hifi::potential(self.problem, theta).map(|(eta, _)| eta)
    }

    fn descriptor(&self) -> &'static str {
        "hifi"
    }

    fn cost_kind(&self) -> CostKind {
        CostKind::HiFi
    }

    fn admissible(&self, theta: &[f64]) -> bool {
        self.problem.check_coercivity(theta).is_ok()
    }
}

/// Which reduced potential is handed to the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RbPotentialKind {
    /// `η_r` with its Lagrangian gradient.
    Plain,
    /// `η_r + Δ_r` with the exact corrected gradient.
    #[default]
    Corrected,
}

pub(crate) fn rb_evaluate(
    rm: &ReducedModel,
    problem: &AffineProblem,
    kind: RbPotentialKind,
    theta: &[f64],
) -> Result<Evaluation> {
    problem.check_coercivity(theta)?;
    let on = rm.online(problem, theta)?;
    let u_r = on.state()?;
    let psi_r = on.adjoint(&u_r)?;
    let eta_r = on.eta(&u_r);
    match kind {
        RbPotentialKind::Plain => Ok(Evaluation {
            eta: eta_r,
            grad: on.grad_eta_r(&u_r, &psi_r),
        }),
        RbPotentialKind::Corrected => {
            let delta = on.dwr(&u_r, &psi_r);
            let (psi_hat, u_hat) = on.incrementals(&u_r, &psi_r)?;
            Ok(Evaluation {
                eta: eta_r + delta,
                grad: on.grad_eta_delta(&u_r, &psi_r, &u_hat, &psi_hat),
            })
        }
    }
}

pub(crate) fn rb_value(rm: &ReducedModel, problem: &AffineProblem, kind: RbPotentialKind, theta: &[f64]) -> Result<f64> {
    problem.check_coercivity(theta)?;
    let p = rb::rb_potential(rm, problem, theta)?;
    Ok(match kind {
        RbPotentialKind::Plain => p.eta_r,
        RbPotentialKind::Corrected => p.eta_delta,
    })
}

/// A frozen reduced model.
pub struct RbFixedBackend<'p> {
    problem: &'p AffineProblem,
    model: ReducedModel,
    kind: RbPotentialKind,
}

impl<'p> RbFixedBackend<'p> {
    pub fn new(problem: &'p AffineProblem, model: ReducedModel) -> Self {
        Self {
            problem,
            model,
            kind: RbPotentialKind::default(),
        }
    }

    pub fn with_kind(mut self, kind: RbPotentialKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn model(&self) -> &ReducedModel {
        &self.model
    }

    pub fn into_model(self) -> ReducedModel {
        self.model
    }
}

impl PosteriorBackend for RbFixedBackend<'_> {
    fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        rb_evaluate(&self.model, self.problem, self.kind, theta)
    }

    fn potential(&self, theta: &[f64]) -> Result<f64> {
        rb_value(&self.model, self.problem, self.kind, theta)
    }

    fn descriptor(&self) -> &'static str {
        "rb-fixed"
    }

    fn cost_kind(&self) -> CostKind {
        CostKind::ReducedOnline
    }

    fn admissible(&self, theta: &[f64]) -> bool {
        self.problem.check_coercivity(theta).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::CaseConfig;

    #[test]
    fn hifi_backend_matches_solver() {
        let p = AffineProblem::assemble(&CaseConfig::uniform4(8)).unwrap();
        let b = HiFiBackend::new(&p);
        let th = [0.3, -0.2, 0.5, 0.1];
        let e = b.evaluate(&th).unwrap();
        let r = hifi::grad_potential(&p, &th).unwrap();
        assert_eq!(e.eta, r.eta);
        assert_eq!(e.grad, r.grad_eta);
        assert_eq!(b.potential(&th).unwrap(), r.eta);
        assert_eq!(b.descriptor(), "hifi");
    }

    #[test]
    fn rb_backend_is_exact_at_snapshot() {
        let p = AffineProblem::assemble(&CaseConfig::uniform4(8)).unwrap();
        let th = [0.3, -0.2, 0.5, 0.1];
        let h = hifi::grad_potential(&p, &th).unwrap();
        let mut rm = ReducedModel::empty(&p);
        rm.enrich(&p, &h.u, &h.psi, &th);
        let b = RbFixedBackend::new(&p, rm);
        let e = b.evaluate(&th).unwrap();
        assert!((e.eta - h.eta).abs() < 1e-9 * h.eta.max(1.0));
        let plain = RbFixedBackend::new(&p, b.into_model()).with_kind(RbPotentialKind::Plain);
        assert!((plain.potential(&th).unwrap() - h.eta).abs() < 1e-9 * h.eta.max(1.0));
    }
}
