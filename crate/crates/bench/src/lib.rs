//! Fixtures shared by the solver benches.

use attralign_core::alignment::{Oracle, RbfOracle, TargetPreset, TargetSpec};
use attralign_core::controller::SolverConfig;
use attralign_core::dynamics::{ControlledDynamics, TimeGrid, TOY_EDM_HORIZON};
use attralign_core::generative::{GenerativeModel, MixtureSpec};
use attralign_core::numerics::{Matrix, Rng};

/// The 0.8/0.2 toy under analytic EDM dynamics with a uniform target.
pub struct Toy {
    pub dynamics: ControlledDynamics,
    pub grid: TimeGrid,
    pub oracle: RbfOracle,
    pub target: TargetSpec,
    pub x_init: Matrix,
    pub solver: SolverConfig,
}

pub fn toy(batch: usize, steps: usize) -> Toy {
    let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).expect("valid toy");
    let oracle = RbfOracle::from_mixture(&mixture, attralign_core::alignment::DEFAULT_TEMPERATURE).expect("valid oracle");
    let target = TargetSpec::preset(TargetPreset::Uniform, &oracle.axes(), false).expect("valid target");
    let dynamics =
        ControlledDynamics::edm(GenerativeModel::AnalyticMixture(mixture), TOY_EDM_HORIZON).expect("valid dynamics");
    let grid = TimeGrid::edm_uniform(TOY_EDM_HORIZON, steps).expect("valid grid");
    let x_init = dynamics.sample_prior(&mut Rng::new(0), batch);
    let solver = SolverConfig {
        batch,
        steps,
        ..SolverConfig::toy()
    };
    Toy {
        dynamics,
        grid,
        oracle,
        target,
        x_init,
        solver,
    }
}
