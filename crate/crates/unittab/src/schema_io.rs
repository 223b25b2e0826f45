//! Schema documents and their content hash.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use unittab_core::schema::Schema;

use crate::error::{Error, Result};

/// Pretty JSON; attributes come out sorted by name.
pub fn schema_to_json(schema: &Schema) -> Result<String> {
    Ok(serde_json::to_string_pretty(schema)?)
}

/// Parses and checks a schema document.
pub fn schema_from_json(text: &str) -> Result<Schema> {
    let schema: Schema = serde_json::from_str(text)?;
    schema.check()?;
    Ok(schema)
}

/// Hex SHA-256 of the compact JSON form.
pub fn schema_hash(schema: &Schema) -> Result<String> {
    let bytes = serde_json::to_vec(schema)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_schema(path: &Path, schema: &Schema) -> Result<()> {
    fs::write(path, schema_to_json(schema)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    schema_from_json(&text)
}
