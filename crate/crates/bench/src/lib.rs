//! Fixtures shared by the criterion benchmarks under `benches/`.

use defxattn::attention::{AttentionParams, TokenField, WindowLayout};
use defxattn::network::{init_params, ModelConfig};
use defxattn::nn::{self, Rng64};
use defxattn::{ParameterStore, Tensor};
use rand::SeedableRng;

/// One attention block with random inputs on a token grid.
pub struct BlockFixture {
    pub store: ParameterStore,
    pub params: AttentionParams,
    pub base: TokenField,
    pub reference: TokenField,
    pub layout: WindowLayout,
}

impl BlockFixture {
    pub fn new(grid: [usize; 3], window: [usize; 3], channels: usize, heads: usize) -> Self {
        let mut rng = Rng64::seed_from_u64(0);
        let params = AttentionParams::new("bench", channels, heads, 3).expect("valid block");
        let mut store = ParameterStore::new();
        params.init(&mut store, &mut rng).expect("fresh store");
        let mut field = || {
            let t = nn::normal(&mut rng, &[grid[0], grid[1], grid[2], channels], 1.0);
            TokenField::from_tensor(t).expect("channel-last tokens")
        };
        let base = field();
        let reference = field();
        Self {
            store,
            params,
            base,
            reference,
            layout: WindowLayout::new(grid, window, [0; 3]).expect("valid layout"),
        }
    }
}

/// Desk-scale model weights and a random moving/fixed pair.
pub fn model_fixture(cfg: &ModelConfig) -> (ParameterStore, Tensor, Tensor) {
    let mut rng = Rng64::seed_from_u64(1);
    let [h, w, d] = cfg.image;
    let store = init_params(cfg, 0).expect("valid config");
    let m = nn::normal(&mut rng, &[1, h, w, d], 1.0);
    let f = nn::normal(&mut rng, &[1, h, w, d], 1.0);
    (store, m, f)
}
