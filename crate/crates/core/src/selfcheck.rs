//! The full set of finite-difference checks, shared by the CLI and tests.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Feedback, ModelGradCheck};
use crate::nn::gradcheck::{
    grad_check, BatchNormCheck, ConvCheck, Corrupted, Differentiable, EluCheck, GradCheckReport, LinearCheck, LstmCheck,
    DEFAULT_EPS,
};
use crate::nn::BnMode;

pub const TOLERANCE: f64 = 1e-4;

pub const CHECK_NAMES: [&str; 9] = [
    "linear",
    "lstm",
    "conv",
    "batchnorm_train",
    "batchnorm_infer",
    "elu",
    "bptt_auto_conditioned",
    "bptt_teacher_forced",
    "bptt_no_feedback",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
    pub report: GradCheckReport,
}

fn harness(name: &str, seed: u64) -> Box<dyn Differentiable> {
    match name {
        "linear" => Box::new(LinearCheck::new(seed)),
        "lstm" => Box::new(LstmCheck::new(seed)),
        "conv" => Box::new(ConvCheck::new(seed)),
        "batchnorm_train" => Box::new(BatchNormCheck::new(seed, BnMode::Train)),
        "batchnorm_infer" => Box::new(BatchNormCheck::new(seed, BnMode::Infer)),
        "elu" => Box::new(EluCheck::new(seed)),
        "bptt_auto_conditioned" => Box::new(ModelGradCheck::new(seed, 3, Feedback::AutoConditioned)),
        "bptt_teacher_forced" => Box::new(ModelGradCheck::new(seed, 3, Feedback::TeacherForced)),
        "bptt_no_feedback" => Box::new(ModelGradCheck::new(seed, 3, Feedback::None)),
        _ => unreachable!("unknown check {name}"),
    }
}

impl Differentiable for Box<dyn Differentiable> {
    fn tensor_names(&self) -> Vec<String> {
        (**self).tensor_names()
    }

    fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        (**self).tensor_mut(index)
    }

    fn loss(&mut self) -> Result<f64> {
        (**self).loss()
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        (**self).gradients()
    }
}

/// Runs every check. `corrupt` names one check whose analytic gradient is
/// deliberately scaled, as a negative control.
pub fn run_all(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(c) = corrupt {
        if !CHECK_NAMES.contains(&c) {
            return Err(Error::InvalidInput(format!("unknown check {c:?}")));
        }
    }
    CHECK_NAMES
        .iter()
        .map(|&name| {
            let inner = harness(name, seed);
            let report = if corrupt == Some(name) {
                grad_check(&mut Corrupted { inner, factor: 1.05 }, DEFAULT_EPS)?
            } else {
                let mut inner = inner;
                grad_check(&mut inner, DEFAULT_EPS)?
            };
            let max_rel_error = report.max_rel_error();
            Ok(CheckResult {
                name,
                max_rel_error,
                passed: report.passes(TOLERANCE),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_check_is_the_only_failure() {
        let results = run_all(5, Some("lstm")).unwrap();
        for r in &results {
            assert_eq!(r.passed, r.name != "lstm", "{}: {}", r.name, r.max_rel_error);
        }
        assert!(run_all(5, Some("nope")).is_err());
    }
}
