//! In-process cache of exact reference prices.

use std::collections::HashMap;

use anyhow::Result;
use tnprice_core::asian::{price_asian_bruteforce, AsianSpec};
use tnprice_core::basket::{price_basket_bruteforce, BasketSpec};
use tnprice_core::Error;

/// Reference lookup result: `price` is `None` when the oracle refused the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub price: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Default)]
pub struct ReferenceCache {
    entries: HashMap<String, Reference>,
    computations: usize,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of oracle evaluations performed (cache misses).
    pub fn computations(&self) -> usize {
        self.computations
    }

    fn lookup(&mut self, key: String, compute: impl FnOnce() -> tnprice_core::Result<f64>) -> Result<Reference> {
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        self.computations += 1;
        let reference = match compute() {
            Ok(price) => Reference {
                price: Some(price),
                warning: None,
            },
            Err(err @ Error::BruteForceRefused { .. }) => Reference {
                price: None,
                warning: Some(format!("no reference price, abs_error left empty: {err}")),
            },
            Err(err) => return Err(err.into()),
        };
        self.entries.insert(key, reference.clone());
        Ok(reference)
    }

    pub fn asian(&mut self, spec: &AsianSpec) -> Result<Reference> {
        let key = format!("asian:{}", serde_json::to_string(spec)?);
        self.lookup(key, || price_asian_bruteforce(spec).map(|r| r.price))
    }

    pub fn basket(&mut self, spec: &BasketSpec) -> Result<Reference> {
        let key = format!("basket:{}", serde_json::to_string(spec)?);
        self.lookup(key, || price_basket_bruteforce(spec).map(|r| r.price))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_specs_hit_the_cache() {
        let mut cache = ReferenceCache::new();
        let spec = AsianSpec::standard(10);
        let a = cache.asian(&spec).unwrap();
        let b = cache.asian(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.computations(), 1);
        cache.asian(&AsianSpec { strike: 90.0, ..spec }).unwrap();
        assert_eq!(cache.computations(), 2);
    }

    #[test]
    fn refusal_becomes_a_warning() {
        let mut cache = ReferenceCache::new();
        let r = cache.asian(&AsianSpec::standard(30)).unwrap();
        assert_eq!(r.price, None);
        assert!(r.warning.unwrap().contains("abs_error"));
        cache.asian(&AsianSpec::standard(30)).unwrap();
        assert_eq!(cache.computations(), 1);
    }
}
