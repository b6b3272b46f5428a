// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ablation::{AblationKind, HeadSets};
use crate::error::{ProbeError, Result};
use crate::hub::{HubConfig, Schedule};
use crate::probes::{CueAggregation, HeadId};
use crate::stimuli::ColumnMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Phase1,
    #[serde(rename = "stress_1back")]
    StressOneBack,
    StressPositional,
    StressPos,
    Composite,
    Ablation,
    Modnoun,
}

impl Analysis {
    pub const ALL: [Analysis; 7] = [
        Self::Phase1,
        Self::StressOneBack,
        Self::StressPositional,
        Self::StressPos,
        Self::Composite,
        Self::Ablation,
        Self::Modnoun,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Phase1 => "phase1",
            Self::StressOneBack => "stress_1back",
            Self::StressPositional => "stress_positional",
            Self::StressPos => "stress_pos",
            Self::Composite => "composite",
            Self::Ablation => "ablation",
            Self::Modnoun => "modnoun",
        }
    }

    /// Computed per (model, step) rather than over a whole sweep.
    pub fn is_per_step(&self) -> bool {
        !matches!(self, Self::Composite)
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Analysis {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ProbeError::Config(format!("unknown analysis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub label: String,
    /// Local root holding `step<N>/` checkpoint directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Hub repository, e.g. `EleutherAI/pythia-14m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo_id: Option<String>,
    /// Run (seed) label; models sharing `label` are pooled in the
    /// modifier-noun coupling with one dummy per run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<String>,
}

impl ModelSpec {
    /// `label` or `label/run`.
    pub fn id(&self) -> String {
        match &self.run {
            Some(r) => format!("{}/{r}", self.label),
            None => self.label.clone(),
        }
    }

    pub fn run_label(&self) -> String {
        self.run.clone().unwrap_or_else(|| self.label.clone())
    }

    /// Name used to pick default ablation head sets.
    pub fn family(&self) -> &str {
        self.repo_id.as_deref().unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawcSchema {
    /// Column names of the published RAW-C file.
    #[default]
    Rawc,
    /// Columns written by `stimuli::write_pairs`.
    Canonical,
}

impl RawcSchema {
    pub fn columns(&self) -> ColumnMap {
        match self {
            Self::Rawc => ColumnMap::rawc(),
            Self::Canonical => ColumnMap::canonical(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Datasets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rawc: Option<PathBuf>,
    /// Column layout of `rawc`; detected from the header when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rawc_schema: Option<RawcSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positional: Option<PathBuf>,
    /// Bleached phrase used to derive positional items from `rawc` when no
    /// `positional` file is given.
    #[serde(default = "default_phrase")]
    pub positional_phrase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modnoun: Option<PathBuf>,
}

fn default_phrase() -> String {
    "kind of".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Model family for the default head sets; the model's repo id or
    /// label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// `zero` and/or `copy`.
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    /// Checkpoint whose Q/K weights `copy` restores; the earliest scheduled
    /// step is used when this one is unavailable.
    #[serde(default = "default_copy_step")]
    pub copy_source_step: u64,
    /// Head groups written as `"3,1"` or `"(3,1)"`; overrides the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Vec<Vec<String>>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            preset: None,
            kinds: default_kinds(),
            copy_source_step: default_copy_step(),
            targets: None,
            baselines: None,
        }
    }
}

fn default_kinds() -> Vec<String> {
    vec!["zero".into(), "copy".into()]
}

fn default_copy_step() -> u64 {
    1
}

impl AblationConfig {
    pub fn kinds(&self, copy_step: u64) -> Result<Vec<AblationKind>> {
        self.kinds
            .iter()
            .map(|k| match k.as_str() {
                "zero" => Ok(AblationKind::Zero),
                "copy" => Ok(AblationKind::CopyFromStep(copy_step)),
                other => Err(ProbeError::Config(format!(
                    "unknown ablation kind `{other}` (zero, copy)"
                ))),
            })
            .collect()
    }

    /// User head sets when both groups are given.
    pub fn user_sets(&self) -> Result<Option<HeadSets>> {
        let parse = |groups: &Vec<Vec<String>>| -> Result<Vec<Vec<HeadId>>> {
            groups
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|s| s.parse::<HeadId>().map_err(|e| ProbeError::Config(e.to_string())))
                        .collect()
                })
                .collect()
        };
        match (&self.targets, &self.baselines) {
            (None, None) => Ok(None),
            (Some(t), Some(b)) => Ok(Some(HeadSets {
                targets: parse(t)?,
                baselines: parse(b)?,
            })),
            _ => Err(ProbeError::Config(
                "ablation targets and baselines must be given together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub aggregation: CueAggregation,
    /// Hidden layer tracked across steps; chosen at the final step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked_layer: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_workers", alias = "worker_count")]
    pub workers: usize,
    pub schedule: Schedule,
    pub analyses: Vec<Analysis>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub datasets: Datasets,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub hub: HubSection,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    /// Parse, resolve relative paths against the file's directory, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ProbeError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for m in &mut self.models {
            if let Some(p) = &mut m.path {
                fix(p);
            }
        }
        let d = &mut self.datasets;
        for p in [&mut d.rawc, &mut d.positional, &mut d.pos, &mut d.modnoun]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(p) = &mut self.hub.cache_root {
            fix(p);
        }
    }

    pub fn wants(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ProbeError::Config(m));
        if self.analyses.is_empty() {
            return err("analyses is empty".into());
        }
        if self.models.is_empty() {
            return err("no models configured".into());
        }
        if self.workers == 0 {
            return err("workers must be at least 1".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            if m.path.is_some() == m.repo_id.is_some() {
                return err(format!("model `{}` needs exactly one of path, repo_id", m.label));
            }
            if m.label.is_empty() || m.label.contains(':') || m.run.as_deref().is_some_and(|r| r.contains(':')) {
                return err(format!("model label `{}` must be non-empty and free of ':'", m.label));
            }
            if !ids.insert(m.id()) {
                return err(format!("model `{}` listed twice", m.id()));
            }
        }
        crate::hub::checkpoint_schedule(&self.schedule).map_err(|e| ProbeError::Config(e.to_string()))?;

        if self.wants(Analysis::Composite) {
            let missing: Vec<&str> = [
                Analysis::Phase1,
                Analysis::StressOneBack,
                Analysis::StressPositional,
                Analysis::StressPos,
            ]
            .iter()
            .filter(|a| !self.wants(**a))
            .map(Analysis::as_str)
            .collect();
            if !missing.is_empty() {
                return err(format!("composite requires {}", missing.join(", ")));
            }
        }
        if self.wants(Analysis::Ablation) && !self.wants(Analysis::Phase1) {
            return err("ablation requires phase1 (for intact R² and the tracked layer)".into());
        }

        let d = &self.datasets;
        let need = |a: Analysis, p: &Option<PathBuf>, key: &str| -> Result<()> {
            if !self.wants(a) {
                return Ok(());
            }
            match p {
                None => Err(ProbeError::Config(format!("{a} needs datasets.{key}"))),
                Some(p) if !p.is_file() => Err(ProbeError::Config(format!(
                    "datasets.{key} `{}` does not exist",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        need(Analysis::Phase1, &d.rawc, "rawc")?;
        need(Analysis::StressOneBack, &d.rawc, "rawc")?;
        need(Analysis::Ablation, &d.rawc, "rawc")?;
        need(Analysis::StressPos, &d.pos, "pos")?;
        need(Analysis::Modnoun, &d.modnoun, "modnoun")?;
        if d.positional.is_some() {
            need(Analysis::StressPositional, &d.positional, "positional")?;
        } else {
            need(Analysis::StressPositional, &d.rawc, "rawc")?;
        }

        if self.wants(Analysis::Ablation) {
            self.ablation.kinds(self.ablation.copy_source_step)?;
            self.ablation.user_sets()?;
        }
        Ok(())
    }

    pub fn hub_config(&self) -> HubConfig {
        let mut h = HubConfig::from_env();
        if std::env::var_os(crate::hub::ENV_ENDPOINT).is_none() {
            if let Some(e) = &self.hub.endpoint {
                h.endpoint = e.clone();
            }
        }
        if std::env::var_os(crate::hub::ENV_CACHE).is_none() {
            if let Some(c) = &self.hub.cache_root {
                h.cache_root = c.clone();
            }
        }
        h
    }
}
