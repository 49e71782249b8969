//! Structured text configuration.

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses TOML into `T`, reporting failures with the dotted field path
/// prefixed by `root`.
pub fn parse_toml<T: DeserializeOwned>(text: &str, root: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config(root, e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." {
            root.to_string()
        } else {
            format!("{root}.{inner}")
        };
        Error::config(path, e.into_inner().message().to_string())
    })
}
