//! Shared test fixtures.

use crate::pool::{Deployment, ModelPool, ModelSpec};

pub(crate) fn free_pool(n: usize) -> ModelPool {
    let models = (0..n)
        .map(|i| ModelSpec {
            id: i,
            name: format!("m{i}"),
            capability_rank: i,
            deployment: Deployment::Local,
            price_in_mc: 0,
            price_out_mc: 0,
            endpoint: None,
            api_key_env: None,
        })
        .collect();
    ModelPool::from_specs(models, 0)
}

/// Reference 9-model pool: 4 free local models, 5 cloud models with
/// increasing prices.
pub(crate) fn priced_pool9() -> ModelPool {
    let prices: [(u64, u64); 9] = [
        (0, 0),
        (0, 0),
        (0, 0),
        (0, 0),
        (70, 180),
        (150, 350),
        (450, 1050),
        (1800, 4200),
        (9000, 21000),
    ];
    let models = prices
        .iter()
        .enumerate()
        .map(|(i, &(pi, po))| ModelSpec {
            id: i,
            name: format!("m{i}"),
            capability_rank: i,
            deployment: if pi == 0 && po == 0 {
                Deployment::Local
            } else {
                Deployment::Cloud
            },
            price_in_mc: pi,
            price_out_mc: po,
            endpoint: None,
            api_key_env: None,
        })
        .collect();
    ModelPool::from_specs(models, 3)
}
