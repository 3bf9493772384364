use serde::{Deserialize, Serialize};

/// Which engine produced a price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bruteforce,
    Ttcross,
    Variational,
    Montecarlo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bruteforce => "bruteforce",
            Method::Ttcross => "ttcross",
            Method::Variational => "variational",
            Method::Montecarlo => "montecarlo",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bruteforce" | "brute-force" => Ok(Method::Bruteforce),
            "ttcross" => Ok(Method::Ttcross),
            "variational" => Ok(Method::Variational),
            "montecarlo" | "monte-carlo" | "mc" => Ok(Method::Montecarlo),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Price estimate plus the parameters and diagnostics of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub price: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bond_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sweeps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seconds spent in the pricing call.
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PriceReport {
    pub fn new(method: Method, price: f64) -> Self {
        Self {
            price,
            method,
            bond_dim: None,
            n_samples: None,
            n_sweeps: None,
            seed: None,
            wall_time: 0.0,
            std_error: None,
            warnings: Vec::new(),
        }
    }
}
