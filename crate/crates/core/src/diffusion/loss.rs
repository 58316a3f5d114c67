use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::{forward_noise, NoiseSchedule};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::mlp::{mlp_forward_graph, time_embedding, ParamNodes, TIME_EMBED_DIM};
use crate::tasks::{ContextLayout, SceneSample};
use crate::tensor::Tensor;

/// Noise drawn for one element of an ε-regression batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
    pub drop_context: bool,
}

pub fn draw_noise(
    n: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    context_dropout: f64,
    rng: &mut impl Rng,
) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=schedule.steps());
            let eps = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let drop_context = rng.random::<f64>() < context_dropout;
            NoiseDraw { t, eps, drop_context }
        })
        .collect()
}

/// `‖ε - pred‖²` per row (`n x 1`).
pub fn squared_error_rows(g: &mut Graph, pred: NodeId, eps: &Tensor) -> Result<NodeId> {
    let e = g.constant(eps.clone());
    let d = g.sub(e, pred)?;
    let sq = g.square(d);
    Ok(g.sum_cols(sq))
}

/// Per-sample ε-regression losses (`n x 1`) for the given draws.
/// `contexts` holds encoded context rows; dropped rows are zeroed here.
pub fn per_sample_loss_with(
    g: &mut Graph,
    params: &ParamNodes,
    x0: &Tensor,
    contexts: &Tensor,
    draws: &[NoiseDraw],
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let n = x0.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty pretraining batch".into()));
    }
    if draws.len() != n || contexts.rows() != n {
        return Err(Error::shape("pretraining_loss", &[n], &[draws.len(), contexts.rows()]));
    }
    let (dim, cdim) = (x0.cols(), contexts.cols());
    let width = dim + TIME_EMBED_DIM + cdim;
    let mut input = Vec::with_capacity(n * width);
    let mut eps = Vec::with_capacity(n * dim);
    for (i, d) in draws.iter().enumerate() {
        if d.eps.len() != dim {
            return Err(Error::shape("pretraining_loss", &[dim], &[d.eps.len()]));
        }
        input.extend(forward_noise(x0.row(i), d.t, &d.eps, schedule)?);
        input.extend_from_slice(&time_embedding(d.t, schedule.steps()));
        if d.drop_context {
            input.extend(std::iter::repeat_n(0.0, cdim));
        } else {
            input.extend_from_slice(contexts.row(i));
        }
        eps.extend_from_slice(&d.eps);
    }
    let input = g.constant(Tensor::matrix(n, width, input)?);
    let pred = mlp_forward_graph(g, params, input)?;
    squared_error_rows(g, pred, &Tensor::matrix(n, dim, eps)?)
}

/// Batch mean of [`per_sample_loss_with`].
pub fn pretraining_loss_with(
    g: &mut Graph,
    params: &ParamNodes,
    x0: &Tensor,
    contexts: &Tensor,
    draws: &[NoiseDraw],
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let rows = per_sample_loss_with(g, params, x0, contexts, draws, schedule)?;
    Ok(g.mean(rows))
}

/// `mean_i ‖ε_i - ε_θ(x_t, t, c_i)‖²` with fresh draws of `t`, `ε` and context dropout.
pub fn pretraining_loss(
    g: &mut Graph,
    params: &ParamNodes,
    batch: &[SceneSample],
    layout: &ContextLayout,
    schedule: &NoiseSchedule,
    context_dropout: f64,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining batch".into()));
    }
    let x0 = Tensor::from_rows(&batch.iter().map(|s| s.x0.as_slice()).collect::<Vec<_>>())?;
    let ctx = Tensor::from_rows(&batch.iter().map(|s| layout.encode(&s.context)).collect::<Vec<_>>())?;
    let draws = draw_noise(batch.len(), x0.cols(), schedule, context_dropout, rng);
    pretraining_loss_with(g, params, &x0, &ctx, &draws, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::forward_backward;
    use crate::mlp::{DenoiserParams, MlpConfig};
    use crate::tasks::{Context, World, WorldSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn oracle_prediction_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = draw_noise(8, 4, &schedule(), 0.1, &mut rng);
        let eps = Tensor::from_rows(&draws.iter().map(|d| d.eps.clone()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let pred = g.constant(eps.clone());
        let rows = squared_error_rows(&mut g, pred, &eps).unwrap();
        let loss = g.mean(rows);
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_sample_dim() {
        let world = World::new(WorldSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let layout = world.layout.clone();
        let cfg = MlpConfig {
            sample_dim: 4,
            context_dim: layout.dim(),
            hidden: vec![8],
        };
        let params = DenoiserParams::zeros(cfg);
        let batch: Vec<SceneSample> = (0..10_000)
            .map(|i| SceneSample {
                x0: vec![0.1 * (i % 7) as f64, -0.5, 1.0, 0.3],
                context: Context::Preference { prompt: i % 24 },
                attribute: None,
            })
            .collect();
        let mut g = Graph::new();
        let pn = ParamNodes::constants(&mut g, &params);
        let loss = pretraining_loss(
            &mut g,
            &pn,
            &batch,
            &layout,
            &schedule(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let v = g.value(loss).item().unwrap();
        assert!((v - 4.0).abs() < 0.05 * 4.0, "{v}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = MlpConfig {
            sample_dim: 2,
            context_dim: 1,
            hidden: vec![2],
        };
        let params = DenoiserParams::zeros(cfg);
        let mut g = Graph::new();
        let pn = ParamNodes::constants(&mut g, &params);
        let x0 = Tensor::zeros(&[0, 2]);
        let ctx = Tensor::zeros(&[0, 1]);
        assert!(per_sample_loss_with(&mut g, &pn, &x0, &ctx, &[], &schedule()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 2-d samples, 2-d context, one hidden layer of 3: 3*12+3 + 2*3+2 = 47 parameters.
        let cfg = MlpConfig {
            sample_dim: 2,
            context_dim: 2,
            hidden: vec![3],
        };
        assert_eq!(cfg.num_params(), 47);
        let params = DenoiserParams::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3));
        let sch = schedule();
        let x0 = Tensor::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.8]]).unwrap();
        let ctx = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let draws = draw_noise(3, 2, &sch, 0.3, &mut ChaCha8Rng::seed_from_u64(4));

        let loss_at = |p: &DenoiserParams| -> f64 {
            let mut g = Graph::new();
            let pn = ParamNodes::constants(&mut g, p);
            let l = pretraining_loss_with(&mut g, &pn, &x0, &ctx, &draws, &sch).unwrap();
            g.value(l).item().unwrap()
        };
        let mut g = Graph::new();
        let pn = ParamNodes::leaves(&mut g, &params);
        let l = pretraining_loss_with(&mut g, &pn, &x0, &ctx, &draws, &sch).unwrap();
        let (_, grads) = forward_backward(&g, l).unwrap();
        let analytic = pn.flat_grad(&grads);

        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-6,
                "param {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }
}
