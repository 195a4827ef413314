use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::PriceSheet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub provider_id: String,
    pub model_name: String,
    pub stage: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl LedgerTotals {
    pub fn add(&mut self, input_tokens: u64, output_tokens: u64) {
        self.calls += 1;
        self.input_tokens += input_tokens;
        self.output_tokens += output_tokens;
    }
}

impl std::ops::AddAssign for LedgerTotals {
    fn add_assign(&mut self, rhs: Self) {
        self.calls += rhs.calls;
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

/// Append-only record of completed provider calls, shared across gateways.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    entries: Arc<Mutex<Vec<LedgerEntry>>>,
}

impl Ledger {
    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger poisoned").clone()
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals_where(|_| true)
    }

    pub fn totals_for_stage(&self, stage: &str) -> LedgerTotals {
        self.totals_where(|e| e.stage == stage)
    }

    pub fn totals_for_provider(&self, provider_id: &str) -> LedgerTotals {
        self.totals_where(|e| e.provider_id == provider_id)
    }

    fn totals_where(&self, keep: impl Fn(&LedgerEntry) -> bool) -> LedgerTotals {
        let entries = self.entries.lock().expect("ledger poisoned");
        let mut t = LedgerTotals::default();
        for e in entries.iter().filter(|e| keep(e)) {
            t.add(e.input_tokens, e.output_tokens);
        }
        t
    }

    /// Dollar cost of every recorded call whose model appears in `sheet`.
    /// Calls to unpriced models (mocks, embedders) are skipped.
    pub fn priced_cost(&self, sheet: &PriceSheet) -> f64 {
        let entries = self.entries.lock().expect("ledger poisoned");
        entries
            .iter()
            .filter_map(|e| sheet.estimate_cost(e.input_tokens, e.output_tokens, &e.model_name).ok())
            .fold(0.0, |acc, c| acc + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, i: u64, o: u64) -> LedgerEntry {
        LedgerEntry {
            provider_id: "p".into(),
            model_name: "gpt-3.5-turbo".into(),
            stage: stage.into(),
            input_tokens: i,
            output_tokens: o,
        }
    }

    #[test]
    fn totals_sum_entries() {
        let l = Ledger::default();
        l.record(entry("coarse", 10, 2));
        l.record(entry("judge", 5, 1));
        l.record(entry("coarse", 1, 1));
        assert_eq!(
            l.totals(),
            LedgerTotals {
                calls: 3,
                input_tokens: 16,
                output_tokens: 4
            }
        );
        assert_eq!(l.totals_for_stage("coarse").calls, 2);
        assert_eq!(l.totals_for_provider("p").calls, 3);
        let cost = l.priced_cost(&PriceSheet::builtin());
        assert!((cost - (16.0 * 0.5 + 4.0 * 1.5) / 1e6).abs() < 1e-15);
    }
}
