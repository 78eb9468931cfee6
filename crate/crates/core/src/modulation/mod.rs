//! Virtual modulation: lagged neural dynamics, perturbed rollouts, the
//! virtual doctor, and Shapley target selection.

mod doctor;
mod dynamics;
mod shapley;

pub use doctor::{
    classify, fc_shift_correlation, logistic_loss_grad, network_features, recovery_rate, train_classifier, Diagnosis, DoctorConfig,
    VirtualDoctor, DISORDER, HEALTHY,
};
pub use dynamics::{
    dynamics_loss, dynamics_loss_grad, lagged_design, perturbed_rollout, rollout, train_dynamics, train_dynamics_multi, DynamicsConfig,
    DynamicsModel, PerturbationSpec, LAGS,
};
pub use shapley::{feature_shapley, select_targets, shapley_values, FeatureAttribution, ShapleyReport, EXACT_LIMIT};
