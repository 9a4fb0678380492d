//! Serde adapters writing reals as shortest round-trip decimal strings.

use serde::{Deserialize, Deserializer, Serializer};

pub fn format(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn parse(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse()
}

pub fn serialize<S: Serializer>(x: &f64, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(&format(*x))
}

/// A real written either as a decimal string or as a bare JSON number.
#[derive(Deserialize)]
#[serde(untagged)]
enum Real {
    Text(String),
    Number(f64),
}

impl Real {
    fn value<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            Real::Number(x) => Ok(x),
            Real::Text(s) => parse(&s).map_err(|e| E::custom(format!("invalid real {s:?}: {e}"))),
        }
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    Real::deserialize(de)?.value()
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(xs: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let mut seq = ser.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&format(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Real>::deserialize(de)?.into_iter().map(Real::value).collect()
    }
}
