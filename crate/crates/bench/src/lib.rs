//! Shared fixtures for the benchmarks in `benches/`.

use poiaudit_core::data::{synth_generate, SynthConfig};
use poiaudit_core::{MobilityDataset, ModelConfig, PoiModel};

/// Desk-sized synthetic data and an untrained desk-sized model.
pub fn desk_fixture() -> (MobilityDataset, PoiModel) {
    let (ds, _) = synth_generate(&SynthConfig {
        n_days: 20,
        ..SynthConfig::default()
    })
    .expect("synthetic data");
    let model = PoiModel::new(
        ModelConfig {
            user_embed_dim: 16,
            loc_embed_dim: 16,
            hidden_dim: 32,
            ..ModelConfig::default()
        },
        ds.n_users,
        ds.n_locations(),
    )
    .expect("model");
    (ds, model)
}
