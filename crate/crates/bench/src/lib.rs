//! Shared fixtures for the criterion benches.

use rlsd_core::{make_suite, InitConfig, PolicyParams, Suite, SuiteConfig, TaskFamily, TrainerConfig};

/// Default-sized suite and its initial parameters.
pub fn fixture(family: TaskFamily, count: usize) -> (Suite, PolicyParams) {
    let suite = make_suite(&SuiteConfig::new(family, count, 0)).expect("suite");
    let params = InitConfig::default().params(&suite).expect("params");
    (suite, params)
}

/// A short training configuration on a small suite.
pub fn short_config(steps: usize) -> TrainerConfig {
    TrainerConfig {
        steps,
        suite: SuiteConfig::new(TaskFamily::ModularArithmeticChain, 24, 0),
        ..TrainerConfig::default()
    }
}
