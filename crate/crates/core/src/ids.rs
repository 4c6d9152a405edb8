//! Opaque identifier newtypes.
//!
//! Identifiers are non-empty tokens without whitespace. The characters `(`,
//! `)`, `,` and `"` are rejected so identifiers can appear unquoted inside
//! state literals and quoted inside DOT output, and the reserved tokens `_`,
//! `null` and `∅` are rejected because they carry meaning in slot encodings.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid identifier {token:?}: {reason}")]
pub struct InvalidId {
    pub token: String,
    pub reason: &'static str,
}

pub(crate) fn check_token(token: &str) -> Result<(), InvalidId> {
    let fail = |reason| {
        Err(InvalidId {
            token: token.to_string(),
            reason,
        })
    };
    if token.is_empty() {
        return fail("empty");
    }
    if matches!(token, "_" | "null" | "∅") {
        return fail("reserved token");
    }
    if token.chars().any(char::is_whitespace) {
        return fail("contains whitespace");
    }
    if token.chars().any(|c| matches!(c, '(' | ')' | ',' | '"')) {
        return fail("contains one of ( ) , \"");
    }
    Ok(())
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(token: impl Into<String>) -> Result<Self, InvalidId> {
                let token = token.into();
                check_token(&token)?;
                Ok(Self(token))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = InvalidId;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                Self::new(raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

id_type!(
    /// A named place the mobile base can occupy.
    LocationId
);
id_type!(
    /// A manipulable object.
    ObjectId
);
id_type!(
    /// A semantic-level skill, unique within one graph.
    SkillId
);
id_type!(
    /// A fine-grained action-level primitive.
    ActionSkillId
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_tokens() {
        for bad in ["", "_", "null", "∅", "a b", "a,b", "(x", "q\"", "tab\there"] {
            assert!(LocationId::new(bad).is_err(), "{bad:?} accepted");
        }
        assert_eq!(ObjectId::new("bowl").unwrap().as_str(), "bowl");
        assert!(SkillId::new("pick_bowl_pantry").is_ok());
    }

    #[test]
    fn serde_validates() {
        let ok: SkillId = serde_json::from_str("\"nav_a_b\"").unwrap();
        assert_eq!(ok.to_string(), "nav_a_b");
        assert!(serde_json::from_str::<SkillId>("\"has space\"").is_err());
    }
}
