//! Small serialization helpers.

/// Serializes an `f64` as a JSON number, or as the strings `"inf"` /
/// `"-inf"` when infinite. JSON has no infinity literal.
pub mod f64_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct W(#[serde(with = "super::f64_or_inf")] f64);

    #[test]
    fn infinity_round_trips_as_text() {
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<W>("\"inf\"").unwrap(), W(f64::INFINITY));
        assert_eq!(serde_json::from_str::<W>("1.5").unwrap(), W(1.5));
        assert!(serde_json::from_str::<W>("\"big\"").is_err());
    }
}
