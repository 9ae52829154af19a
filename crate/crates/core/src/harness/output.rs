//! Text outputs: 6-significant-digit floats, CSV and JSON lines.

use super::bench::BenchRow;
use super::run::SweepRecord;
use crate::error::Result;
use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade.
    let rounded: f64 = format!("{:.5e}", x).parse().unwrap_or(x);
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    if !(-4..6).contains(&exp) {
        let s = format!("{:.5e}", x);
        let (mant, e) = s.split_once('e').unwrap_or((&s, "0"));
        let e: i32 = e.parse().unwrap_or(0);
        let sign = if e < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), e.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub const SWEEP_HEADER: &str = "method,K,seed,lambda,metric_pre,metric_post,params,fwd_us,mask";

/// Key identifying a sweep row.
pub type SweepKey = (String, usize, u64, String);

fn lambda_field(l: Option<f64>) -> String {
    l.map(fmt_g6).unwrap_or_default()
}

pub fn sweep_key(r: &SweepRecord, requested_k: Option<usize>) -> SweepKey {
    (r.method.name().to_string(), requested_k.unwrap_or(r.k), r.seed, lambda_field(r.lambda))
}

pub fn sweep_row(r: &SweepRecord, requested_k: Option<usize>) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.method,
        requested_k.unwrap_or(r.k),
        r.seed,
        lambda_field(r.lambda),
        fmt_g6(r.metric_pre),
        fmt_g6(r.metric_post),
        r.params,
        fmt_g6(r.fwd_us),
        r.mask
    )
}

/// Keys already present in a sweep CSV.
pub fn existing_keys(path: &Path) -> Result<HashSet<SweepKey>> {
    let mut keys = HashSet::new();
    if !path.exists() {
        return Ok(keys);
    }
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            continue;
        }
        if let (Ok(k), Ok(seed)) = (f[1].parse(), f[2].parse()) {
            keys.insert((f[0].to_string(), k, seed, f[3].to_string()));
        }
    }
    Ok(keys)
}

/// Appends `line` to `path`, writing `header` first if the file is new.
pub fn append_line(path: &Path, header: Option<&str>, line: &str) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        if let Some(h) = header {
            writeln!(f, "{h}")?;
        }
    }
    writeln!(f, "{line}")?;
    Ok(())
}

pub const BENCH_HEADER: &str = "kept,pruned_pct,params,median_us,jitter,unstable,speedup_pct,shrink_pct,max_abs_diff";

pub fn bench_row(r: &BenchRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.kept,
        fmt_g6(r.pruned_pct),
        r.params,
        fmt_g6(r.median_us),
        fmt_g6(r.jitter),
        r.unstable,
        fmt_g6(r.speedup_pct),
        fmt_g6(r.shrink_pct),
        fmt_g6(r.max_abs_diff)
    )
}

/// Writes a whole CSV file.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

/// Serializes `value` as one JSON line with floats rounded to 6 significant
/// digits.
pub fn json_line<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = round_json(serde_json::to_value(value)?);
    Ok(serde_json::to_string(&v)?)
}

fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            fmt_g6(x)
                .parse::<f64>()
                .ok()
                .and_then(serde_json::Number::from_f64)
                .map(Value::Number)
                .unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}
