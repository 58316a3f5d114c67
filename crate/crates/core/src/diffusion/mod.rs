//! Noise schedule, guided ε-prediction, the stochastic DDIM policy and the
//! ε-regression loss.

mod loss;
mod sampler;
mod schedule;

pub use loss::{
    draw_noise, per_sample_loss_with, pretraining_loss, pretraining_loss_with, squared_error_rows, NoiseDraw,
};
pub use sampler::{
    gaussian_log_prob, generate_samples, guided_eps_graph, log_prob_graph, predict_eps, reverse_mean_graph,
    reverse_step_params, sample_trajectories, sample_trajectory, SamplerConfig, StepCoeffs, Trajectory, X0_CLAMP,
};
pub use schedule::{forward_noise, NoiseSchedule};
