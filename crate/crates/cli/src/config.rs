//! Flat TOML config files merged under command-line flags.
//!
//! A config file holds the same keys as the long flags of a command, with
//! dashes written as underscores. Flags that were given win over the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Merges `flags` over the optional config file and returns the resolved
/// settings together with the merged key-value table.
pub fn resolve<T>(flags: &T, config: Option<&Path>) -> Result<(T, toml::Table)>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    let given = toml::Table::try_from(flags).context("encoding flags")?;
    for (k, v) in given {
        table.insert(k, v);
    }
    let resolved: T = table
        .clone()
        .try_into()
        .with_context(|| match config {
            Some(p) => format!("invalid settings in {} or flags", p.display()),
            None => "invalid flags".to_string(),
        })?;
    Ok((resolved, table))
}

/// Output directory: `--out`, else `$SOSMC_OUTPUT_ROOT/<command>`, else `runs/<command>`.
pub fn output_dir(out: Option<&PathBuf>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os("SOSMC_OUTPUT_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(command)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        a: Option<u64>,
        b: Option<String>,
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "a = 1\nb = \"file\"\n").unwrap();
        let flags = Demo {
            a: None,
            b: Some("flag".into()),
        };
        let (r, table) = resolve(&flags, Some(&path)).unwrap();
        assert_eq!(r, Demo { a: Some(1), b: Some("flag".into()) });
        assert_eq!(table.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "c = 1\n").unwrap();
        let flags = Demo { a: None, b: None };
        assert!(resolve(&flags, Some(&path)).is_err());
    }
}
