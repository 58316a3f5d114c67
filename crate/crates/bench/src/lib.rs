//! Fixtures shared by the benchmarks.

use dftune_core::config::RunConfig;
use dftune_core::mlp::DenoiserParams;
use dftune_core::rl::{stream_rng, Env};
use dftune_core::tasks::SceneSample;

pub struct Fixture {
    pub cfg: RunConfig,
    pub env: Env,
    pub params: DenoiserParams,
    pub data: Vec<SceneSample>,
}

/// Default-config world and an initialized (untrained) model.
pub fn fixture() -> Fixture {
    let mut cfg = RunConfig::default();
    cfg.data.size = 2_000;
    let env = cfg.env().expect("default config is valid");
    let params = DenoiserParams::init(cfg.mlp_config(&env.world), &mut stream_rng(cfg.seed, 22));
    let data = cfg.dataset(&env.world).expect("dataset");
    Fixture { cfg, env, params, data }
}

pub fn rng(stream: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(0, stream)
}
