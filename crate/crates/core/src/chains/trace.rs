//! Per-step chain records and their JSON-lines encoding.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::guidance::GuidanceConfig;
use crate::world::ConceptId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub z_before: Vec<f64>,
    pub z_after: Vec<f64>,
    pub eps_cond: Vec<f64>,
    /// Absent on negative-prompting steps, which never query the null condition.
    pub eps_uncond: Option<Vec<f64>>,
    pub eps_neg: Option<Vec<f64>>,
    pub eps_combined: Vec<f64>,
    pub k_t: usize,
    pub negative_concept: Option<ConceptId>,
    pub denoiser_calls_so_far: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub config: GuidanceConfig,
    pub condition: ConceptId,
    /// Ordered `t = T, T-1, ..., 1`.
    pub records: Vec<StepRecord>,
    pub final_sample: Vec<f64>,
    pub total_denoiser_calls: u64,
}

impl ChainTrace {
    /// Sum of the DNS budgets actually spent.
    pub fn total_k(&self) -> u64 {
        self.records.iter().map(|r| r.k_t as u64).sum()
    }

    /// Writes a header line with the config, then one line per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a GuidanceConfig,
            condition: ConceptId,
            total_steps: usize,
            final_sample: &'a [f64],
            total_denoiser_calls: u64,
        }
        let header = Header {
            config: &self.config,
            condition: self.condition,
            total_steps: self.records.len(),
            final_sample: &self.final_sample,
            total_denoiser_calls: self.total_denoiser_calls,
        };
        write_json_line(&mut out, &header)?;
        for record in &self.records {
            write_json_line(&mut out, record)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> serde_json::Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: GuidanceConfig,
            condition: ConceptId,
            final_sample: Vec<f64>,
            total_denoiser_calls: u64,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().unwrap_or("{}"))?;
        let records = lines.map(serde_json::from_str).collect::<serde_json::Result<Vec<StepRecord>>>()?;
        Ok(Self {
            config: header.config,
            condition: header.condition,
            records,
            final_sample: header.final_sample,
            total_denoiser_calls: header.total_denoiser_calls,
        })
    }
}

/// Serializes `value` as one JSON line with 17 significant digits per float.
pub fn write_json_line<W: Write, T: Serialize + ?Sized>(out: &mut W, value: &T) -> io::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut *out, Sig17);
    value.serialize(&mut ser).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

/// Formats a float with 17 significant digits, the shortest width that is
/// always round-trip exact for `f64`.
pub fn format_f64(v: f64) -> String {
    if v == 0.0 {
        // keep the sign of negative zero
        return if v.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    format!("{v:.16e}")
}

struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_f64(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Strategy;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    proptest! {
        #[test]
        fn float_format_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let text = format_f64(v);
            prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let record = StepRecord {
            t: 1,
            z_before: vec![0.1, 1.0 / 3.0],
            z_after: vec![-2.5e-300, 7.0],
            eps_cond: vec![std::f64::consts::PI, 0.0],
            eps_uncond: None,
            eps_neg: Some(vec![1e10, -1e-10]),
            eps_combined: vec![0.2, 0.3],
            k_t: 2,
            negative_concept: Some(ConceptId(1)),
            denoiser_calls_so_far: 6,
        };
        let trace = ChainTrace {
            config: GuidanceConfig::new(Strategy::Answer, 7.5).with_k(5).with_seed(99),
            condition: ConceptId(0),
            records: vec![record],
            final_sample: vec![-2.5e-300, 7.0],
            total_denoiser_calls: 6,
        };
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("3.3333333333333331e-1"));
        assert_eq!(ChainTrace::read_jsonl(&text).unwrap(), trace);
    }
}
