//! Scenario config files (TOML).
//!
//! ```toml
//! scenario = "kernel-leak"
//! profile = ["coffeelake-r"]
//! trials = 1000
//! seed = 7
//! kpti = false
//!
//! [overrides]
//! fillers = 2
//!
//! [[pages]]
//! vpn = 0x13
//! frame = 0x13
//! flags = "present,user,writable,accessed"
//!
//! [kernel_writer]
//! offsets = [7, 300]
//! secret_bytes = [42, 17]
//! ```

use std::collections::BTreeMap;

use serde::Deserialize;

use super::PageOverride;
use crate::victims::KernelWriterConfig;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ProfileList {
    #[default]
    Unset,
    One(String),
    Many(Vec<String>),
}

impl ProfileList {
    pub fn names(&self) -> Vec<String> {
        match self {
            ProfileList::Unset => Vec::new(),
            ProfileList::One(s) => vec![s.clone()],
            ProfileList::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PageConfig {
    pub vpn: u64,
    pub frame: u64,
    pub flags: String,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Option<String>,
    #[serde(default)]
    pub profile: ProfileList,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub kpti: Option<bool>,
    pub hyperthread: Option<bool>,
    pub countermeasure: Option<bool>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Value>,
    #[serde(default)]
    pub pages: Vec<PageConfig>,
    pub kernel_writer: Option<KernelWriterConfig>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Override values as the strings the scenarios parse.
    pub fn override_strings(&self) -> BTreeMap<String, String> {
        self.overrides
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect()
    }

    pub fn page_overrides(&self) -> Result<Vec<PageOverride>, String> {
        self.pages
            .iter()
            .map(|p| {
                let mut pte: crate::memory::PageTableEntry = p.flags.parse().map_err(|e| format!("page {:#x}: {e}", p.vpn))?;
                pte.frame = p.frame;
                Ok(PageOverride { vpn: p.vpn, pte })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let cfg = ScenarioConfig::parse(
            r#"
            scenario = "kernel-leak"
            profile = ["coffeelake-r", "skylake"]
            trials = 10
            seed = 7
            [overrides]
            fillers = 3
            jitter = 50.5
            [[pages]]
            vpn = 0x13
            frame = 0x13
            flags = "present,user,accessed"
            [kernel_writer]
            offsets = [7, 300]
            secret_bytes = [42, 17]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.profile.names(), vec!["coffeelake-r", "skylake"]);
        assert_eq!(cfg.override_strings()["fillers"], "3");
        assert_eq!(cfg.override_strings()["jitter"], "50.5");
        let pages = cfg.page_overrides().unwrap();
        assert_eq!(pages[0].vpn, 0x13);
        assert!(pages[0].pte.present && !pages[0].pte.dirty);
        assert_eq!(cfg.kernel_writer.unwrap().secret_bytes, vec![42, 17]);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ScenarioConfig::parse("trails = 3").is_err());
        assert_eq!(ScenarioConfig::parse("profile = \"skylake\"").unwrap().profile.names(), vec!["skylake"]);
    }
}
