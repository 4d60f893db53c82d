//! Core algorithms for the self-distillation lab.

pub mod advantage;
pub mod env;
pub mod error;
pub mod policy;
pub mod report;
pub mod theory;
pub mod trainer;

pub use env::{
    exact_accuracy, leakage_probe_score, make_suite, parse_suite, privileged_posterior, verify, write_suite,
    Instance, JointEntry, JointModel, PrefixExpansion, PrivilegedEntry, Suite, SuiteConfig, TaskFamily,
    VerifierResult,
};
pub use error::{LabError, Result};
pub use policy::{
    marginal_teacher_dist, sample_rollout, set_exact_tabular, ConditionalPolicy, ContextKey, FeatureKind,
    FeatureMap, PolicyParams, Privileged, PrivilegedId, PrivilegedShift, PromptId, Rollout, SampleMode, SparseGrad,
    TabularPolicy, Token, TokenDistribution, Vocab,
};
pub use advantage::{
    additive_combo_grad, evidence_weight, group_advantages, grpo_surrogate, opd_grad, opsd_grad, privileged_gain,
    rlsd_token_advantage, rlsd_token_advantage_with, sdpo_context, token_credits, CreditConfig, Divergence,
    GroupBatch, OpsdVariant, RlsdForm, SuccessStore, SurrogateGrad, TokenAdvantages, TokenCredit,
};
pub use trainer::{
    lambda_schedule, run, teacher_snapshot, CreditTrace, InitConfig, MetricRecord, Method, RlsdContext, RunLog,
    TeacherStrategy, Trainer, TrainerConfig,
};
pub use theory::{
    check_bandwidth_variants, check_bayesian_identity, check_gradient_decomposition, check_kl_decomposition,
    check_leakage_free, check_trilemma, BandwidthReport, BayesReport, DecompositionReport, GradDecompositionReport,
    LeakageReport, TheoryConfig, TheoryReport, TrilemmaReport,
};
pub use report::{export_credit_heatmap_data, export_series, Series};
