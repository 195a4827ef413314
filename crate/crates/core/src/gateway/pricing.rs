use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GatewayError;

const BUILTIN: &str = include_str!("../../data/prices.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    /// Currency per one million input tokens.
    pub input_per_million: f64,
    /// Currency per one million output tokens.
    pub output_per_million: f64,
}

/// Versioned per-model token prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSheet {
    pub version: String,
    #[serde(default = "usd")]
    pub currency: String,
    pub models: BTreeMap<String, ModelPrice>,
}

fn usd() -> String {
    "USD".into()
}

impl PriceSheet {
    /// The sheet committed alongside this crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled price sheet is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let sheet: PriceSheet =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("price sheet: {e}")))?;
        for (name, p) in &sheet.models {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(p.input_per_million) || !ok(p.output_per_million) {
                return Err(GatewayError::Config(format!(
                    "price sheet: negative or non-finite price for `{name}`"
                )));
            }
        }
        Ok(sheet)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn estimate_cost(&self, input_tokens: u64, output_tokens: u64, model: &str) -> Result<f64, GatewayError> {
        estimate_cost(self, input_tokens, output_tokens, model)
    }
}

/// `input/1e6 * input_price + output/1e6 * output_price`.
pub fn estimate_cost(
    sheet: &PriceSheet,
    input_tokens: u64,
    output_tokens: u64,
    model: &str,
) -> Result<f64, GatewayError> {
    let price = sheet
        .models
        .get(model)
        .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))?;
    Ok(input_tokens as f64 / 1e6 * price.input_per_million
        + output_tokens as f64 / 1e6 * price.output_per_million)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_prices() {
        let sheet = PriceSheet::builtin();
        assert_eq!(sheet.estimate_cost(1_000_000, 1_000_000, "gpt-3.5-turbo").unwrap(), 2.0);
        assert_eq!(sheet.estimate_cost(1_000_000, 1_000_000, "gpt-4-turbo").unwrap(), 40.0);
        assert_eq!(sheet.estimate_cost(0, 0, "gpt-4-turbo").unwrap(), 0.0);
    }

    #[test]
    fn unknown_model() {
        assert_eq!(
            PriceSheet::builtin().estimate_cost(1, 1, "nope"),
            Err(GatewayError::UnknownModel("nope".into()))
        );
    }

    #[test]
    fn negative_price_rejected() {
        let text = r#"{"version":"x","models":{"m":{"input_per_million":-1,"output_per_million":1}}}"#;
        assert!(PriceSheet::from_json(text).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_linear(a_in in 0u64..10_000_000, a_out in 0u64..10_000_000,
                          b_in in 0u64..10_000_000, b_out in 0u64..10_000_000) {
            let sheet = PriceSheet::builtin();
            for model in ["gpt-3.5-turbo", "gpt-4-turbo"] {
                let whole = sheet.estimate_cost(a_in + b_in, a_out + b_out, model).unwrap();
                let parts = sheet.estimate_cost(a_in, a_out, model).unwrap()
                    + sheet.estimate_cost(b_in, b_out, model).unwrap();
                prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
            }
        }
    }
}
