//! Scenario files: network, agents, timing and a scripted event list.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::DEFAULT_GUARD_MHZ;
use crate::error::ScenarioError;
use crate::kira::Topology;
use crate::sm::{SmConfig, DEFAULT_APPLY_MS, DEFAULT_INTENT_HOLD_MS, DEFAULT_OFFER_MS};
use crate::snc::{Archetype, SncConfig};
use crate::spectrum::{Band, SimTime};

fn default_guard() -> u32 {
    DEFAULT_GUARD_MHZ
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delays {
    #[serde(default = "Delays::default_per_hop")]
    pub per_hop_ms: f64,
    /// Length of one routing exchange round.
    #[serde(default = "Delays::default_round")]
    pub round_ms: SimTime,
}

impl Delays {
    fn default_per_hop() -> f64 {
        0.2
    }
    fn default_round() -> SimTime {
        10
    }

    /// Whole milliseconds for a path of `hops` links, rounded up.
    pub fn message_delay_ms(&self, hops: usize) -> SimTime {
        (self.per_hop_ms * hops as f64).ceil() as SimTime
    }
}

impl Default for Delays {
    fn default() -> Self {
        Self { per_hop_ms: Self::default_per_hop(), round_ms: Self::default_round() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timers {
    #[serde(default = "Timers::offer")]
    pub offer_ms: SimTime,
    #[serde(default = "Timers::apply")]
    pub apply_ms: SimTime,
    #[serde(default = "Timers::hold")]
    pub intent_hold_ms: SimTime,
}

impl Timers {
    fn offer() -> SimTime {
        DEFAULT_OFFER_MS
    }
    fn apply() -> SimTime {
        DEFAULT_APPLY_MS
    }
    fn hold() -> SimTime {
        DEFAULT_INTENT_HOLD_MS
    }
}

impl Default for Timers {
    fn default() -> Self {
        Self { offer_ms: Self::offer(), apply_ms: Self::apply(), intent_hold_ms: Self::hold() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    RegisterSn,
    CallAgv,
    #[serde(rename = "TOGGLE_SN2")]
    ToggleSn2,
    MoveNode,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub at_ms: SimTime,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub args: serde_json::Value,
}

/// A scripted action with its arguments resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptAction {
    RegisterSn { sn_id: String },
    CallAgv { sn_id: String },
    ToggleSn2 { sn_id: String, on: bool },
    MoveNode { node: String, anchor: String },
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub band: Band,
    #[serde(default = "default_guard")]
    pub guard_mhz: u32,
    pub sm_node: String,
    pub topology: Topology,
    pub agents: Vec<SncConfig>,
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub delays: Delays,
    #[serde(default)]
    pub timers: Timers,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SnArgs {
    #[serde(default)]
    sn_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToggleArgs {
    #[serde(default)]
    sn_id: Option<String>,
    on: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MoveArgs {
    node: String,
    anchor: String,
}

/// 1-based line of the `nth` occurrence of `key` after the first `section`.
fn locate(text: &str, section: &str, key: &str, nth: usize) -> Option<usize> {
    let start = text.find(&format!("\"{section}\""))?;
    let needle = format!("\"{key}\"");
    let mut pos = start;
    for _ in 0..=nth {
        pos += text[pos..].find(&needle)? + 1;
    }
    Some(text[..pos].matches('\n').count() + 1)
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate_with_text(Some(text))?;
        Ok(scenario)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.validate_with_text(None)
    }

    fn validate_with_text(&self, text: Option<&str>) -> Result<(), ScenarioError> {
        let err = |path: String, line: Option<usize>, message: String| ScenarioError::Invalid {
            path,
            line,
            message,
        };
        let at = |section: &str, key: &str, nth: usize| text.and_then(|t| locate(t, section, key, nth));

        if !self.band.is_on_grid(self.guard_mhz) {
            return Err(err(
                "guard_mhz".into(),
                at("guard_mhz", "guard_mhz", 0),
                format!("{} is not a multiple of the grid", self.guard_mhz),
            ));
        }
        if !self.topology.contains(&self.sm_node) {
            return Err(err(
                "sm_node".into(),
                at("sm_node", "sm_node", 0),
                format!("unknown node {:?}", self.sm_node),
            ));
        }
        if !self.delays.per_hop_ms.is_finite() || self.delays.per_hop_ms < 0.0 {
            return Err(err("delays.per_hop_ms".into(), at("delays", "per_hop_ms", 0), "must be >= 0".into()));
        }
        if self.delays.round_ms == 0 {
            return Err(err("delays.round_ms".into(), at("delays", "round_ms", 0), "must be positive".into()));
        }

        let mut ids = BTreeSet::new();
        let mut homes = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let path = format!("agents[{i}]");
            let line = at("agents", "sn_id", 2 * i);
            let fail = |m: String| err(path.clone(), line, m);
            a.validate().map_err(|e| fail(e.message))?;
            a.demand.check_against(&self.band).map_err(|e| fail(e.message))?;
            if !ids.insert(a.sn_id.as_str()) {
                return Err(fail(format!("duplicate sn_id {:?}", a.sn_id)));
            }
            if !self.topology.contains(&a.home_node) {
                return Err(fail(format!("unknown home_node {:?}", a.home_node)));
            }
            if !homes.insert(a.home_node.as_str()) {
                return Err(fail(format!("home_node {:?} already hosts an agent", a.home_node)));
            }
            if let Some(agv) = &a.agv {
                if self.topology.anchor_of(&a.home_node).is_none() {
                    return Err(fail(format!("AGV home_node {:?} must be a mobile node", a.home_node)));
                }
                for w in &agv.waypoints {
                    if !self.topology.contains(w) || w == &a.home_node {
                        return Err(fail(format!("bad waypoint {w:?}")));
                    }
                }
            }
        }

        let mut ends = 0;
        for (i, _) in self.events.iter().enumerate() {
            let action = self.resolve(i).map_err(|m| {
                err(format!("events[{i}]"), at("events", "at_ms", i), m)
            })?;
            if action == ScriptAction::End {
                ends += 1;
            }
        }
        if ends != 1 {
            return Err(err(
                "events".into(),
                at("events", "events", 0),
                format!("END must appear exactly once, found {ends}"),
            ));
        }
        Ok(())
    }

    fn sole_agent(&self, pred: impl Fn(&SncConfig) -> bool, what: &str) -> Result<String, String> {
        let matching: Vec<&SncConfig> = self.agents.iter().filter(|a| pred(a)).collect();
        match matching.as_slice() {
            [one] => Ok(one.sn_id.clone()),
            [] => Err(format!("no {what} agent")),
            _ => Err(format!("several {what} agents; name one with sn_id")),
        }
    }

    /// Parses the arguments of event `i`.
    pub fn resolve(&self, i: usize) -> Result<ScriptAction, String> {
        let e = &self.events[i];
        let args = if e.args.is_null() { serde_json::json!({}) } else { e.args.clone() };
        let agent = |sn: &str| self.agents.iter().find(|a| a.sn_id == sn);
        match e.action {
            ActionKind::RegisterSn => {
                let a: SnArgs = serde_json::from_value(args).map_err(|e| e.to_string())?;
                let sn_id = a.sn_id.ok_or("REGISTER_SN needs sn_id")?;
                agent(&sn_id).ok_or(format!("unknown sn_id {sn_id:?}"))?;
                Ok(ScriptAction::RegisterSn { sn_id })
            }
            ActionKind::CallAgv => {
                let a: SnArgs = serde_json::from_value(args).map_err(|e| e.to_string())?;
                let sn_id = match a.sn_id {
                    Some(sn) => sn,
                    None => self.sole_agent(|a| a.agv.is_some(), "AGV")?,
                };
                if agent(&sn_id).is_none_or(|a| a.agv.is_none()) {
                    return Err(format!("{sn_id:?} is not an AGV agent"));
                }
                Ok(ScriptAction::CallAgv { sn_id })
            }
            ActionKind::ToggleSn2 => {
                let a: ToggleArgs = serde_json::from_value(args).map_err(|e| e.to_string())?;
                let sn_id = match a.sn_id {
                    Some(sn) => sn,
                    None => self.sole_agent(|a| a.archetype == Archetype::Sensing, "SENSING")?,
                };
                if agent(&sn_id).is_none_or(|a| a.archetype != Archetype::Sensing) {
                    return Err(format!("{sn_id:?} is not a SENSING agent"));
                }
                Ok(ScriptAction::ToggleSn2 { sn_id, on: a.on })
            }
            ActionKind::MoveNode => {
                let a: MoveArgs = serde_json::from_value(args).map_err(|e| e.to_string())?;
                if self.topology.anchor_of(&a.node).is_none() {
                    return Err(format!("{:?} is not a mobile node", a.node));
                }
                if !self.topology.contains(&a.anchor) || a.anchor == a.node {
                    return Err(format!("bad anchor {:?}", a.anchor));
                }
                Ok(ScriptAction::MoveNode { node: a.node, anchor: a.anchor })
            }
            ActionKind::End => Ok(ScriptAction::End),
        }
    }

    /// Resolved actions sorted by time, keeping file order for ties.
    pub fn script(&self) -> Vec<(SimTime, ScriptAction)> {
        let mut out: Vec<(SimTime, ScriptAction)> = (0..self.events.len())
            .map(|i| (self.events[i].at_ms, self.resolve(i).expect("validated scenario")))
            .collect();
        out.sort_by_key(|(t, _)| *t);
        out
    }

    pub fn sm_config(&self) -> SmConfig {
        SmConfig {
            band: self.band,
            guard_mhz: self.guard_mhz,
            offer_ms: self.timers.offer_ms,
            apply_ms: self.timers.apply_ms,
            intent_hold_ms: self.timers.intent_hold_ms,
            provisioned: self.agents.iter().map(|a| (a.sn_id.clone(), a.demand.clone())).collect(),
        }
    }
}
