//! Number formatting and `key=value` files shared by every on-disk format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl ParseError {
    pub fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Self {
        ParseError::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ParseError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// `%.9g`: nine significant digits, trailing zeros stripped, exponent form
/// outside `1e-4 <= |v| < 1e9`. Infinities print as `inf`.
pub fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the value a nine-digit rendering parses back to.
pub fn quantize9(v: f64) -> f64 {
    fmt_sig9(v).parse().expect("formatted float parses")
}

/// Parses a float as written by [`fmt_sig9`] (also accepts `inf`).
pub fn parse_f64(tok: &str) -> Option<f64> {
    match tok {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

/// Sorted `key=value` map. Lines starting with `#` and blank lines are
/// ignored when reading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(pub BTreeMap<String, String>);

impl KvMap {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ParseError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ParseError::malformed(origin, i + 1, "expected key=value"));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ParseError::malformed(origin, i + 1, "empty key"));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn read(path: &Path) -> Result<Self, ParseError> {
        let text = std::fs::read_to_string(path).map_err(|e| ParseError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn insert(&mut self, k: impl Into<String>, v: impl ToString) {
        self.0.insert(k.into(), v.to_string());
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }
}

/// Writes rows of numbers as CSV using [`fmt_sig9`].
pub fn render_grid(rows: impl IntoIterator<Item = impl IntoIterator<Item = f64>>) -> String {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt_sig9).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_like_percent_g() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.1), "0.1");
        assert_eq!(fmt_sig9(-2.5), "-2.5");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(12.345678912345), "12.3456789");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1234567891.0), "1.23456789e+09");
        assert_eq!(fmt_sig9(0.0001), "0.0001");
        assert_eq!(fmt_sig9(0.00001234), "1.234e-05");
        assert_eq!(fmt_sig9(9.9999999999), "10");
        assert_eq!(fmt_sig9(f64::INFINITY), "inf");
        assert_eq!(parse_f64("inf"), Some(f64::INFINITY));
    }

    #[test]
    fn kv_parse_and_render() {
        let kv = KvMap::parse("# c\nb = 2\n\na=x=y\n", Path::new("t")).unwrap();
        assert_eq!(kv.get("a"), Some("x=y"));
        assert_eq!(kv.render(), "a=x=y\nb=2\n");
        let err = KvMap::parse("ok=1\nbroken\n", Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("t:2"));
    }

    proptest! {
        #[test]
        fn quantized_values_round_trip_exactly(v in -1e12f64..1e12, e in -12i32..12) {
            let x = v * 10f64.powi(e);
            let q = quantize9(x);
            prop_assert_eq!(quantize9(q).to_bits(), q.to_bits());
            prop_assert_eq!(parse_f64(&fmt_sig9(q)).unwrap().to_bits(), q.to_bits());
            if x != 0.0 {
                prop_assert!(((q - x) / x).abs() <= 5e-9);
            }
        }
    }
}
