//! Long-form flag parsing.
//!
//! All flags are `--kebab-case`; values follow as the next argument. A parse
//! failure is a usage error (exit code 2).

use std::collections::BTreeMap;

#[derive(Debug)]
pub struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Flags {
    /// `known_switches` take no value; every other `--flag` consumes one.
    pub fn parse(args: &[String], known_switches: &[&str]) -> Result<Flags, UsageError> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| UsageError(format!("unexpected argument {arg:?}")))?;
            if name.is_empty() {
                return Err(UsageError("empty flag name".into()));
            }
            if known_switches.contains(&name) {
                switches.push(name.to_string());
            } else {
                let value = it
                    .next()
                    .ok_or_else(|| UsageError(format!("flag --{name} needs a value")))?;
                values.insert(name.to_string(), value.clone());
            }
        }
        Ok(Flags { values, switches })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    /// Comma-separated list value.
    pub fn get_list(&self, name: &str) -> Option<Vec<String>> {
        self.get(name).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
    }
}
