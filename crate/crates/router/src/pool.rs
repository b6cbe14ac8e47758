//! Model pool registry: capability-ranked model identities with pricing,
//! local/cloud classification, and the capability-group partition used by
//! the allocation search.
//!
//! Costs are carried as integer micro-cents so that ledger sums are exact:
//! prices are cents per 1000 tokens with up to three decimal places, which
//! makes `price_millicents_per_1k * tokens` an exact integer micro-cent
//! amount.
//!
//! # Example
//!
//! ```
//! use model_router::pool::{usage_cost, ModelPool, TokenUsage};
//!
//! let pool = ModelPool::load(r#"
//!     [[models]]
//!     name = "local-a"
//!     deployment = "local"
//!
//!     [[models]]
//!     name = "cloud-a"
//!     deployment = "cloud"
//!     price_in_cents_per_1k = 0.5
//!     price_out_cents_per_1k = 1.5
//! "#).unwrap();
//!
//! // capability is the normalized rank; the last model is the strongest
//! assert_eq!(pool.capability(1), 1.0);
//!
//! // 1000 prompt + 1000 completion tokens on the cloud model: 2 cents, exactly
//! let cost = usage_cost(TokenUsage::new(1000, 1000), pool.get(1));
//! assert_eq!(cost.microcents(), 2_000_000);
//!
//! // local models are free
//! assert_eq!(usage_cost(TokenUsage::new(1000, 1000), pool.get(0)).microcents(), 0);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deployment {
    Local,
    Cloud,
}

/// Exact monetary amount in integer micro-cents (1 cent = 1_000_000).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Cost(pub u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn microcents(self) -> u64 {
        self.0
    }

    /// Milli-cents as an exact rational may be fractional; reports use cents.
    pub fn cents(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self { prompt_tokens, completion_tokens }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// 0-based pool index; equals `capability_rank`.
    pub id: usize,
    pub name: String,
    /// Strictly increasing with ability; 0..n-1 within a pool.
    pub capability_rank: usize,
    pub deployment: Deployment,
    /// Milli-cents per 1000 input tokens.
    pub price_in_mc: u64,
    /// Milli-cents per 1000 output tokens.
    pub price_out_mc: u64,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
}

impl ModelSpec {
    pub fn is_local(&self) -> bool {
        self.deployment == Deployment::Local
    }
}

/// Cost of one call: `price_in * in/1000 + price_out * out/1000`,
/// computed exactly in integer micro-cents. Local models are free.
pub fn usage_cost(usage: TokenUsage, model: &ModelSpec) -> Cost {
    Cost(model.price_in_mc * usage.prompt_tokens + model.price_out_mc * usage.completion_tokens)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPool {
    models: Vec<ModelSpec>,
    /// Index of the designated evaluation model used for token counting and
    /// baseline correctness checks.
    pub eval_model_id: usize,
}

#[derive(Debug, Deserialize)]
struct PoolConfigDoc {
    #[serde(default)]
    eval_model: Option<usize>,
    models: Vec<PoolModelDoc>,
}

#[derive(Debug, Deserialize)]
struct PoolModelDoc {
    name: String,
    deployment: Deployment,
    #[serde(default)]
    price_in_cents_per_1k: f64,
    #[serde(default)]
    price_out_cents_per_1k: f64,
    #[serde(default)]
    endpoint: Option<String>,
    #[serde(default)]
    api_key_env: Option<String>,
}

fn price_to_millicents(cents_per_1k: f64, name: &str) -> Result<u64> {
    if cents_per_1k < 0.0 {
        return Err(Error::NegativePrice(name.to_string()));
    }
    let mc = cents_per_1k * 1000.0;
    let rounded = mc.round();
    if (mc - rounded).abs() > 1e-6 {
        return Err(Error::InvalidPoolConfig(format!(
            "price {cents_per_1k} on {name} has more than 3 decimal places of cents"
        )));
    }
    Ok(rounded as u64)
}

impl ModelPool {
    /// Parse a TOML pool config. Indices are assigned by listed order, which
    /// is also the capability order (weakest first).
    pub fn load(config_document: &str) -> Result<ModelPool> {
        let doc: PoolConfigDoc = toml::from_str(config_document)
            .map_err(|e| Error::InvalidPoolConfig(e.to_string()))?;
        if doc.models.is_empty() {
            return Err(Error::InvalidPoolConfig("pool lists no models".into()));
        }
        let mut models = Vec::with_capacity(doc.models.len());
        for (id, m) in doc.models.into_iter().enumerate() {
            if models.iter().any(|s: &ModelSpec| s.name == m.name) {
                return Err(Error::DuplicateName(m.name));
            }
            let price_in_mc = price_to_millicents(m.price_in_cents_per_1k, &m.name)?;
            let price_out_mc = price_to_millicents(m.price_out_cents_per_1k, &m.name)?;
            if m.deployment == Deployment::Local && (price_in_mc != 0 || price_out_mc != 0) {
                return Err(Error::LocalWithNonzeroPrice(m.name));
            }
            models.push(ModelSpec {
                id,
                name: m.name,
                capability_rank: id,
                deployment: m.deployment,
                price_in_mc,
                price_out_mc,
                endpoint: m.endpoint,
                api_key_env: m.api_key_env,
            });
        }
        let eval_model_id = doc.eval_model.unwrap_or(models.len() / 2);
        if eval_model_id >= models.len() {
            return Err(Error::InvalidPoolConfig(format!(
                "eval_model {eval_model_id} out of range"
            )));
        }
        Ok(ModelPool { models, eval_model_id })
    }

    pub fn from_specs(models: Vec<ModelSpec>, eval_model_id: usize) -> ModelPool {
        ModelPool { models, eval_model_id }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn get(&self, id: usize) -> &ModelSpec {
        &self.models[id]
    }

    pub fn eval_model(&self) -> &ModelSpec {
        &self.models[self.eval_model_id]
    }

    pub fn top_model(&self) -> &ModelSpec {
        self.models.last().expect("pool is non-empty")
    }

    /// Locally deployed subset (the fee-free end of the pool).
    pub fn local_models(&self) -> impl Iterator<Item = &ModelSpec> {
        self.models.iter().filter(|m| m.is_local())
    }

    pub fn cloud_models(&self) -> impl Iterator<Item = &ModelSpec> {
        self.models.iter().filter(|m| !m.is_local())
    }

    /// Normalized capability in [0,1]: rank/(n-1); 1.0 for a singleton pool.
    pub fn capability(&self, id: usize) -> f64 {
        if self.models.len() <= 1 {
            1.0
        } else {
            self.models[id].capability_rank as f64 / (self.models.len() - 1) as f64
        }
    }
}

/// Contiguous capability-ordered split of the pool into three groups.
/// Remainder models go to the lower groups so the cheap end is never
/// under-represented.
#[derive(Debug, Clone)]
pub struct GroupedPool {
    pub slm_group: Vec<ModelSpec>,
    pub mlm_group: Vec<ModelSpec>,
    pub llm_group: Vec<ModelSpec>,
}

impl GroupedPool {
    pub fn group(&self, tier: Tier) -> &[ModelSpec] {
        match tier {
            Tier::Slm => &self.slm_group,
            Tier::Mlm => &self.mlm_group,
            Tier::Llm => &self.llm_group,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tier {
    Slm,
    Mlm,
    Llm,
}

impl Tier {
    pub fn up(self) -> Option<Tier> {
        match self {
            Tier::Slm => Some(Tier::Mlm),
            Tier::Mlm => Some(Tier::Llm),
            Tier::Llm => None,
        }
    }

    pub fn down(self) -> Option<Tier> {
        match self {
            Tier::Slm => None,
            Tier::Mlm => Some(Tier::Slm),
            Tier::Llm => Some(Tier::Mlm),
        }
    }
}

pub fn partition_groups(pool: &ModelPool) -> Result<GroupedPool> {
    let n = pool.len();
    if n < 3 {
        return Err(Error::PoolTooSmall(n));
    }
    let base = n / 3;
    let rem = n % 3;
    // remainder goes to the lower groups
    let s1 = base + usize::from(rem >= 1);
    let s2 = base + usize::from(rem >= 2);
    let models = pool.models();
    Ok(GroupedPool {
        slm_group: models[..s1].to_vec(),
        mlm_group: models[s1..s1 + s2].to_vec(),
        llm_group: models[s1 + s2..].to_vec(),
    })
}

/// Lower median of a capability-ordered group.
pub fn medium_model(group: &[ModelSpec]) -> Result<&ModelSpec> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok(&group[(group.len() - 1) / 2])
}
