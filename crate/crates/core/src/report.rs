//! JSON and CSV emission for module reports.

use std::io::Write;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Versioned wrapper around every emitted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub report: T,
}

/// Reports that know their own schema name.
pub trait Report: Serialize {
    const KIND: &'static str;
}

pub fn emit_json<T: Report>(report: &T, out: impl Write) -> Result<()> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: T::KIND.to_string(),
        report,
    };
    serde_json::to_writer_pretty(out, &env)?;
    Ok(())
}

pub fn to_json_string<T: Report>(report: &T) -> Result<String> {
    let mut buf = Vec::new();
    emit_json(report, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn parse_json<T: Report + DeserializeOwned>(s: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(s)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema version {}", env.schema_version)));
    }
    if env.kind != T::KIND {
        return Err(Error::Format(format!("expected report kind {}, got {}", T::KIND, env.kind)));
    }
    Ok(env.report)
}

/// f64 fields that may be infinite. Non-finite values are written as the
/// strings `"inf"`, `"-inf"` and `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float '{other}'"))),
            },
        }
    }
}

impl Report for crate::redundancy::PearsonReport {
    const KIND: &'static str = "pearson";
}

impl Report for Vec<crate::redundancy::CompressionReport> {
    const KIND: &'static str = "compression-sweep";
}

impl Report for crate::prune::PruneStats {
    const KIND: &'static str = "prune-stats";
}

impl Report for crate::recovery::RecoveryErrorReport {
    const KIND: &'static str = "recovery-error";
}

impl Report for crate::noise::MomentPair {
    const KIND: &'static str = "noise-moments";
}

impl Report for crate::noise::AggregationReport {
    const KIND: &'static str = "aggregation-variance";
}

impl Report for crate::pipeline::PipelineStats {
    const KIND: &'static str = "pipeline-stats";
}

impl Report for crate::pipeline::GapReport {
    const KIND: &'static str = "commutation-gap";
}

impl Report for crate::latency::LatencyCurve {
    const KIND: &'static str = "latency-curve";
}

/// CSV with header `kept_fraction,mean_ms,std_ms`.
pub fn latency_csv(curve: &crate::latency::LatencyCurve, mut out: impl Write) -> Result<()> {
    writeln!(out, "kept_fraction,mean_ms,std_ms")?;
    for s in &curve.samples {
        writeln!(out, "{},{},{}", s.kept_fraction, s.mean_ms, s.std_ms)?;
    }
    Ok(())
}
