//! Versioned JSON checkpoints with bit-exact hex-float parameter values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

const MANTISSA_BITS: u32 = 52;
const MANTISSA_MASK: u64 = (1 << MANTISSA_BITS) - 1;
const EXP_BIAS: i64 = 1023;

/// Formats a finite `f64` as a canonical C99-style hex float, e.g. `0x1.8p+1`.
pub fn format_hex(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::Checkpoint(format!("cannot store non-finite value {x}")));
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let mant = bits & MANTISSA_MASK;
    let (lead, e) = match (exp, mant) {
        (0, 0) => return Ok(format!("{sign}0x0p+0")),
        (0, _) => (0, 1 - EXP_BIAS),
        _ => (1, exp - EXP_BIAS),
    };
    let frac = format!("{mant:013x}");
    let frac = frac.trim_end_matches('0');
    let dot = if frac.is_empty() { "" } else { "." };
    let esign = if e >= 0 { "+" } else { "" };
    Ok(format!("{sign}0x{lead}{dot}{frac}p{esign}{e}"))
}

/// Parses the output of [`format_hex`].
pub fn parse_hex(s: &str) -> Result<f64> {
    let bad = || Error::Checkpoint(format!("malformed hex float '{s}'"));
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mantissa, exponent) = rest.split_once('p').ok_or_else(bad)?;
    let e: i64 = exponent.parse().map_err(|_| bad())?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let mant = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(&format!("{frac:0<13}"), 16).map_err(|_| bad())?
    };
    let magnitude = match lead {
        "1" => {
            if !(1 - EXP_BIAS..=EXP_BIAS).contains(&e) {
                return Err(bad());
            }
            (((e + EXP_BIAS) as u64) << MANTISSA_BITS) | mant
        }
        "0" if mant == 0 && e == 0 => 0,
        "0" if e == 1 - EXP_BIAS => mant,
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(magnitude | (u64::from(negative) << 63)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Document {
    format_version: u32,
    spec: ModelSpec,
    window: usize,
    max_speed: f64,
    params: Vec<TensorRecord>,
}

/// A trained model together with the preprocessing it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub window: usize,
    pub max_speed: f64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .model
            .tensors()
            .into_iter()
            .map(|(name, m)| {
                Ok(TensorRecord {
                    name,
                    shape: [m.rows(), m.cols()],
                    values: m.data().iter().map(|&v| format_hex(v)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = Document {
            format_version: FORMAT_VERSION,
            spec: self.model.spec().clone(),
            window: self.window,
            max_speed: self.max_speed,
            params,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        doc.spec.validate()?;
        let mut model = Model::zeros(doc.spec)?;
        {
            let mut slots = model.tensors_mut();
            let want: Vec<String> = slots.iter().map(|(n, m)| format!("{n}{:?}", m.shape())).collect();
            let got: Vec<String> = doc
                .params
                .iter()
                .map(|r| format!("{}({}, {})", r.name, r.shape[0], r.shape[1]))
                .collect();
            if want != got {
                let missing: Vec<&String> = want.iter().filter(|w| !got.contains(w)).collect();
                let extra: Vec<&String> = got.iter().filter(|g| !want.contains(g)).collect();
                return Err(Error::Checkpoint(format!(
                    "parameter tensors do not match the spec: expected but absent {missing:?}, present but unexpected {extra:?}"
                )));
            }
            for ((name, slot), rec) in slots.iter_mut().zip(&doc.params) {
                if rec.values.len() != slot.data().len() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: {} values for shape {:?}",
                        rec.values.len(),
                        slot.shape()
                    )));
                }
                for (dst, v) in slot.data_mut().iter_mut().zip(&rec.values) {
                    *dst = parse_hex(v)?;
                }
            }
        }
        if doc.window == 0 {
            return Err(Error::Checkpoint("window length must be positive".into()));
        }
        if !(doc.max_speed > 0.0) {
            return Err(Error::Checkpoint("max_speed must be positive".into()));
        }
        Ok(Self {
            model,
            window: doc.window,
            max_speed: doc.max_speed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
