//! Binomial scheme parameters, path arithmetic and the recombining-tree pricer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter choice for the single-asset binomial walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Cox-Ross-Rubinstein: `u = exp(vol sqrt(dt))`, `d = 1/u`.
    Crr,
    /// Rendleman-Bartter: equal up/down probabilities.
    Rb,
}

impl Scheme {
    pub fn params(self, rate: f64, vol: f64, dt: f64) -> Result<SchemeParams> {
        match self {
            Scheme::Crr => crr_params(rate, vol, dt),
            Scheme::Rb => rb_params(rate, vol, dt),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "crr" => Ok(Scheme::Crr),
            "rb" => Ok(Scheme::Rb),
            other => Err(format!("unknown scheme `{other}` (expected crr or rb)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeTag {
    Crr,
    Rb,
    DecoupledRb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeParams {
    pub u: f64,
    pub d: f64,
    pub p_u: f64,
    pub dt: f64,
    pub tag: SchemeTag,
}

impl SchemeParams {
    pub fn p_d(&self) -> f64 {
        1.0 - self.p_u
    }

    /// One-step expected growth factor `p_u u + p_d d`.
    pub fn mean_growth(&self) -> f64 {
        self.p_u * self.u + self.p_d() * self.d
    }
}

pub fn crr_params(rate: f64, vol: f64, dt: f64) -> Result<SchemeParams> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if !(vol > 0.0) {
        return Err(Error::DegenerateScheme);
    }
    let u = (vol * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p_u = ((rate * dt).exp() - d) / (u - d);
    if !(0.0..=1.0).contains(&p_u) {
        return Err(Error::ProbabilityOutOfRange(p_u));
    }
    Ok(SchemeParams {
        u,
        d,
        p_u,
        dt,
        tag: SchemeTag::Crr,
    })
}

pub fn rb_params(rate: f64, vol: f64, dt: f64) -> Result<SchemeParams> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let drift = (rate - 0.5 * vol * vol) * dt;
    let diffusion = vol * dt.sqrt();
    Ok(SchemeParams {
        u: (drift + diffusion).exp(),
        d: (drift - diffusion).exp(),
        p_u: 0.5,
        dt,
        tag: SchemeTag::Rb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionRight {
    Call,
    Put,
}

impl OptionRight {
    #[inline]
    pub fn payoff(self, spot: f64, strike: f64) -> f64 {
        match self {
            OptionRight::Call => (spot - strike).max(0.0),
            OptionRight::Put => (strike - spot).max(0.0),
        }
    }
}

impl std::str::FromStr for OptionRight {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "call" => Ok(OptionRight::Call),
            "put" => Ok(OptionRight::Put),
            other => Err(format!("unknown option right `{other}` (expected call or put)")),
        }
    }
}

impl std::str::FromStr for ExerciseStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "european" => Ok(ExerciseStyle::European),
            "american" => Ok(ExerciseStyle::American),
            other => Err(format!("unknown exercise style `{other}` (expected european or american)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExerciseStyle {
    European,
    American,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleAssetSpec {
    pub s0: f64,
    pub strike: f64,
    pub rate: f64,
    pub vol: f64,
    pub expiry: f64,
    pub steps: usize,
    pub right: OptionRight,
    pub style: ExerciseStyle,
}

impl SingleAssetSpec {
    pub fn validate(&self) -> Result<()> {
        validate_market(self.s0, self.strike, self.vol, self.expiry, self.steps)
    }

    pub fn dt(&self) -> f64 {
        self.expiry / self.steps as f64
    }
}

pub(crate) fn validate_market(s0: f64, strike: f64, vol: f64, expiry: f64, steps: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidSpec(msg));
    if !(s0 > 0.0 && s0.is_finite()) {
        return bad(format!("initial price must be positive, got {s0}"));
    }
    if !(strike >= 0.0 && strike.is_finite()) {
        return bad(format!("strike must be non-negative, got {strike}"));
    }
    if !(vol >= 0.0 && vol.is_finite()) {
        return bad(format!("volatility must be non-negative, got {vol}"));
    }
    if !(expiry > 0.0 && expiry.is_finite()) {
        return bad(format!("expiry must be positive, got {expiry}"));
    }
    if steps == 0 {
        return bad("at least one time step is required".into());
    }
    Ok(())
}

fn check_bits(bits: &[u8]) -> Result<()> {
    match bits.iter().position(|&b| b > 1) {
        Some(position) => Err(Error::NonBinary {
            position,
            value: bits[position] as usize,
        }),
        None => Ok(()),
    }
}

/// Running prices `S0 * prod_{k<=i} u^{x_k} d^{1-x_k}` for `i = 1..N`.
pub fn path_price_product(bits: &[u8], s0: f64, params: &SchemeParams) -> Result<Vec<f64>> {
    check_bits(bits)?;
    let mut s = s0;
    Ok(bits
        .iter()
        .map(|&b| {
            s *= if b == 1 { params.u } else { params.d };
            s
        })
        .collect())
}

/// `prod_k p_u^{x_k} (1 - p_u)^{1 - x_k}`; any nonzero bit counts as an up move.
pub fn path_probability(bits: &[u8], p_u: f64) -> f64 {
    bits.iter()
        .map(|&b| if b != 0 { p_u } else { 1.0 - p_u })
        .product()
}

/// Recombining-tree backward induction (early exercise for American style).
pub fn tree_price(spec: &SingleAssetSpec, scheme: Scheme) -> Result<f64> {
    spec.validate()?;
    let dt = spec.dt();
    let params = scheme.params(spec.rate, spec.vol, dt)?;
    let n = spec.steps;
    let disc = (-spec.rate * dt).exp();
    let spot = |i: usize, j: usize| spec.s0 * params.u.powi(j as i32) * params.d.powi((i - j) as i32);

    let mut values: Vec<f64> = (0..=n)
        .map(|j| spec.right.payoff(spot(n, j), spec.strike))
        .collect();
    for i in (0..n).rev() {
        for j in 0..=i {
            let hold = disc * (params.p_u * values[j + 1] + params.p_d() * values[j]);
            values[j] = match spec.style {
                ExerciseStyle::European => hold,
                ExerciseStyle::American => hold.max(spec.right.payoff(spot(i, j), spec.strike)),
            };
        }
        values.truncate(i + 1);
    }
    Ok(values[0])
}
