//! Sub-network controller agents.
//!
//! Each agent is an event-driven actor: the engine feeds it [`AgentInput`]s
//! and carries out the returned [`AgentEffect`]s. Agents discover the
//! manager through the DHT, negotiate, apply allocations at the announced
//! activation instant and report telemetry. The nomadic archetype also runs
//! the AGV mission.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;
use crate::protocol::{Message, RejectReason, Telemetry, WireDemand};
use crate::spectrum::{DemandProfile, QosPriority, SimTime, SpectrumAllocation};

pub const DISCOVERY_BASE_MS: SimTime = 500;
pub const DISCOVERY_CAP_MS: SimTime = 8_000;
pub const REJECT_RETRY_MS: SimTime = 10_000;
pub const TELEMETRY_MS: SimTime = 1_000;
pub const DEFAULT_HOP_INTERVAL_MS: SimTime = 1_000;
pub const DEFAULT_DWELL_MS: SimTime = 5_000;

/// Exponential backoff: 500, 1000, 2000, ... capped at 8000 ms.
pub fn backoff_ms(attempt: u32) -> SimTime {
    DISCOVERY_BASE_MS.saturating_mul(1u64 << attempt.min(16)).min(DISCOVERY_CAP_MS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Archetype {
    Control,
    Sensing,
    Nomadic,
}

impl Archetype {
    pub fn priority(self) -> QosPriority {
        match self {
            Archetype::Control => QosPriority::CONTROL,
            Archetype::Nomadic => QosPriority::NOMADIC,
            Archetype::Sensing => QosPriority::SENSING,
        }
    }
}

fn default_base() -> f64 {
    2.0
}
fn default_jitter() -> f64 {
    1.0
}
fn default_degrade() -> f64 {
    5.0
}
fn default_hop() -> SimTime {
    DEFAULT_HOP_INTERVAL_MS
}
fn default_dwell() -> SimTime {
    DEFAULT_DWELL_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgvConfig {
    /// Anchors visited on the way out; the last one is the machine.
    pub waypoints: Vec<String>,
    #[serde(default = "default_dwell")]
    pub dwell_ms: SimTime,
    #[serde(default = "default_hop")]
    pub hop_interval_ms: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SncConfig {
    pub sn_id: String,
    pub archetype: Archetype,
    pub demand: DemandProfile,
    pub home_node: String,
    #[serde(default = "default_base")]
    pub latency_base_ms: f64,
    #[serde(default = "default_jitter")]
    pub latency_jitter_ms: f64,
    #[serde(default = "default_degrade")]
    pub degrade_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agv: Option<AgvConfig>,
}

impl SncConfig {
    pub fn new(sn_id: &str, archetype: Archetype, min: u32, pref: u32, home_node: &str) -> Self {
        let demand = DemandProfile::new(sn_id, archetype.priority(), min, pref, 0)
            .expect("caller passes a valid demand");
        Self {
            sn_id: sn_id.to_string(),
            archetype,
            demand,
            home_node: home_node.to_string(),
            latency_base_ms: default_base(),
            latency_jitter_ms: default_jitter(),
            degrade_factor: default_degrade(),
            agv: None,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.demand.sn_id != self.sn_id {
            return Err(ValidationError::new(format!(
                "agent {}: demand belongs to {}",
                self.sn_id, self.demand.sn_id
            )));
        }
        if self.demand.priority != self.archetype.priority() {
            return Err(ValidationError::new(format!(
                "agent {}: archetype {:?} requires priority {}, got {}",
                self.sn_id,
                self.archetype,
                self.archetype.priority(),
                self.demand.priority
            )));
        }
        let finite = [self.latency_base_ms, self.latency_jitter_ms, self.degrade_factor];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ValidationError::new(format!(
                "agent {}: latency parameters must be finite and non-negative",
                self.sn_id
            )));
        }
        match (&self.agv, self.archetype) {
            (Some(agv), Archetype::Nomadic) => {
                if agv.waypoints.is_empty() {
                    return Err(ValidationError::new(format!("agent {}: empty waypoints", self.sn_id)));
                }
                if agv.hop_interval_ms == 0 {
                    return Err(ValidationError::new(format!(
                        "agent {}: hop_interval_ms must be positive",
                        self.sn_id
                    )));
                }
            }
            (Some(_), _) => {
                return Err(ValidationError::new(format!(
                    "agent {}: only NOMADIC agents may have an agv section",
                    self.sn_id
                )));
            }
            (None, _) => {}
        }
        Ok(())
    }
}

/// One control-loop latency sample for a block of `granted_width` MHz.
pub fn control_latency_sample(config: &SncConfig, granted_width: u32, rng: &mut impl Rng) -> f64 {
    let jitter = if config.latency_jitter_ms > 0.0 {
        rng.gen_range(0.0..config.latency_jitter_ms)
    } else {
        0.0
    };
    let nominal = config.latency_base_ms + jitter;
    if granted_width < config.demand.min_bw_mhz {
        nominal * config.degrade_factor
    } else {
        nominal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgvPhase {
    Docked,
    Summoned,
    Traversing,
    AtMachine,
    Returning,
}

impl AgvPhase {
    pub fn next(self) -> AgvPhase {
        match self {
            AgvPhase::Docked => AgvPhase::Summoned,
            AgvPhase::Summoned => AgvPhase::Traversing,
            AgvPhase::Traversing => AgvPhase::AtMachine,
            AgvPhase::AtMachine => AgvPhase::Returning,
            AgvPhase::Returning => AgvPhase::Docked,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgvPhase::Docked => "DOCKED",
            AgvPhase::Summoned => "SUMMONED",
            AgvPhase::Traversing => "TRAVERSING",
            AgvPhase::AtMachine => "AT_MACHINE",
            AgvPhase::Returning => "RETURNING",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgvState {
    pub phase: AgvPhase,
    pub waypoints: Vec<String>,
    pub dwell_ms: SimTime,
    pub hop_interval_ms: SimTime,
    pub dock: String,
    pub mission: u64,
}

impl AgvState {
    fn advance(&mut self) {
        self.phase = self.phase.next();
    }

    /// Anchors visited on the way back, ending at the dock.
    fn return_leg(&self) -> Vec<String> {
        let mut leg: Vec<String> = self.waypoints.iter().rev().skip(1).cloned().collect();
        leg.push(self.dock.clone());
        leg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("AGV mission already in progress ({0:?})")]
pub struct MissionBusy(pub AgvPhase);

/// Negotiation progress of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "state")]
pub enum Link {
    Idle,
    Discovering { attempt: u32 },
    Registering,
    Offered { epoch: u64 },
    Committed,
    RetryWait,
    /// Gave up for good after `invalid_demand`.
    Stopped,
    /// Released, toggled off, or docked.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentTimer {
    Discover { gen: u64 },
    Retry { gen: u64 },
    Resend { gen: u64, message: Message },
    Activate { epoch: u64 },
    Telemetry { gen: u64 },
    Hop { mission: u64, step: usize },
    Dwell { mission: u64 },
    ReturnHop { mission: u64, step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentInput {
    Start,
    Deliver(Message),
    Timer(AgentTimer),
    /// The engine could not route a message this agent sent.
    SendFailed(Message),
    Toggle(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEffect {
    Send { to: String, message: Message },
    Timer { at: SimTime, timer: AgentTimer },
    Relocate { anchor: String },
}

/// Ambient capabilities the engine lends an agent for one step.
pub struct AgentCtx<'a, R: Rng> {
    pub now: SimTime,
    pub rng: &'a mut R,
    /// DHT lookup of the manager's address from a node.
    pub lookup: &'a dyn Fn(&str) -> Option<String>,
}

#[derive(Debug, Clone)]
pub struct SncAgent {
    config: SncConfig,
    link: Link,
    sm_addr: Option<String>,
    gen: u64,
    applied_epoch: u64,
    tuned: Option<SpectrumAllocation>,
    pending: Option<(u64, SpectrumAllocation)>,
    release_on_commit: bool,
    sensing_on: bool,
    resend_attempt: u32,
    agv: Option<AgvState>,
    last_latency_ms: Option<f64>,
    effects: Vec<AgentEffect>,
}

impl SncAgent {
    /// `dock` is the initial anchor of a mobile agent.
    pub fn new(config: SncConfig, dock: Option<String>) -> Self {
        let agv = config.agv.as_ref().map(|a| AgvState {
            phase: AgvPhase::Docked,
            waypoints: a.waypoints.clone(),
            dwell_ms: a.dwell_ms,
            hop_interval_ms: a.hop_interval_ms,
            dock: dock.unwrap_or_else(|| a.waypoints[0].clone()),
            mission: 0,
        });
        Self {
            config,
            link: Link::Idle,
            sm_addr: None,
            gen: 0,
            applied_epoch: 0,
            tuned: None,
            pending: None,
            release_on_commit: false,
            sensing_on: false,
            resend_attempt: 0,
            agv,
            last_latency_ms: None,
            effects: Vec::new(),
        }
    }

    pub fn config(&self) -> &SncConfig {
        &self.config
    }

    pub fn sn_id(&self) -> &str {
        &self.config.sn_id
    }

    pub fn node(&self) -> &str {
        &self.config.home_node
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn applied_epoch(&self) -> u64 {
        self.applied_epoch
    }

    /// The block the radio is tuned to, if any.
    pub fn tuned(&self) -> Option<&SpectrumAllocation> {
        self.tuned.as_ref()
    }

    pub fn agv(&self) -> Option<&AgvState> {
        self.agv.as_ref()
    }

    pub fn agv_phase(&self) -> Option<AgvPhase> {
        self.agv.as_ref().map(|a| a.phase)
    }

    pub fn last_latency_ms(&self) -> Option<f64> {
        self.last_latency_ms
    }

    pub fn sensing_on(&self) -> bool {
        self.sensing_on
    }

    pub fn status_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sn_id": self.config.sn_id,
            "archetype": self.config.archetype,
            "node": self.config.home_node,
            "link": self.link,
            "epoch": self.applied_epoch,
            "tuned": self.tuned,
            "agv_phase": self.agv_phase(),
            "latency_ms": self.last_latency_ms,
        })
    }

    pub fn handle<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, input: AgentInput) -> Vec<AgentEffect> {
        match input {
            AgentInput::Start => {
                if self.config.archetype == Archetype::Sensing {
                    self.sensing_on = true;
                }
                if matches!(self.link, Link::Idle | Link::Off | Link::RetryWait) {
                    self.bootstrap(ctx);
                }
            }
            AgentInput::Deliver(m) => self.on_message(ctx, m),
            AgentInput::Timer(t) => self.on_timer(ctx, t),
            AgentInput::SendFailed(m) => self.on_send_failed(ctx, m),
            AgentInput::Toggle(on) => self.toggle(ctx, on),
        }
        std::mem::take(&mut self.effects)
    }

    /// Starts an AGV mission. Refused unless docked.
    pub fn call<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>) -> Result<Vec<AgentEffect>, MissionBusy> {
        let now = ctx.now;
        let agv = self.agv.as_mut().ok_or(MissionBusy(AgvPhase::Docked))?;
        if agv.phase != AgvPhase::Docked {
            return Err(MissionBusy(agv.phase));
        }
        agv.advance();
        agv.mission += 1;
        let mission = agv.mission;
        let hop = agv.hop_interval_ms;
        let eta_ms = now + agv.waypoints.len() as SimTime * hop;
        if self.sm_addr.is_none() {
            self.sm_addr = (ctx.lookup)(&self.config.home_node);
        }
        let sn_id = self.config.sn_id.clone();
        self.send(Message::Intent { sn_id, eta_ms });
        self.timer(now + hop, AgentTimer::Hop { mission, step: 0 });
        Ok(std::mem::take(&mut self.effects))
    }

    fn send(&mut self, message: Message) {
        match &self.sm_addr {
            Some(to) => self.effects.push(AgentEffect::Send { to: to.clone(), message }),
            None => {}
        }
    }

    fn timer(&mut self, at: SimTime, timer: AgentTimer) {
        self.effects.push(AgentEffect::Timer { at, timer });
    }

    fn reset_link(&mut self, link: Link) {
        self.gen += 1;
        self.link = link;
    }

    fn untune(&mut self) {
        self.tuned = None;
        self.pending = None;
    }

    fn bootstrap<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>) {
        self.release_on_commit = false;
        self.reset_link(Link::Discovering { attempt: 0 });
        self.discover(ctx, 0);
    }

    fn discover<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, attempt: u32) {
        match (ctx.lookup)(&self.config.home_node) {
            Some(addr) => {
                self.sm_addr = Some(addr);
                self.link = Link::Registering;
                self.resend_attempt = 0;
                let demand = WireDemand::from(&self.config.demand);
                self.send(Message::Register { demand });
            }
            None => {
                self.link = Link::Discovering { attempt: attempt + 1 };
                self.timer(ctx.now + backoff_ms(attempt), AgentTimer::Discover { gen: self.gen });
            }
        }
    }

    fn retry_later<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>) {
        self.reset_link(Link::RetryWait);
        self.timer(ctx.now + REJECT_RETRY_MS, AgentTimer::Retry { gen: self.gen });
    }

    fn on_message<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, m: Message) {
        self.resend_attempt = 0;
        match m {
            Message::Offer { epoch, .. } => {
                if matches!(self.link, Link::Registering | Link::Offered { .. }) {
                    self.link = Link::Offered { epoch };
                    let sn_id = self.config.sn_id.clone();
                    self.send(Message::Accept { sn_id, epoch });
                }
            }
            Message::Reject { reason, .. } => match reason {
                RejectReason::InvalidDemand => self.reset_link(Link::Stopped),
                RejectReason::Preempted => {
                    self.untune();
                    self.retry_later(ctx);
                }
                RejectReason::StaleEpoch => {}
                RejectReason::InsufficientSpectrum
                | RejectReason::AlreadyRegistered
                | RejectReason::OfferExpired => {
                    if matches!(self.link, Link::Registering | Link::Offered { .. }) {
                        self.retry_later(ctx);
                    }
                }
            },
            Message::Commit { allocation, epoch, activate_at, .. } => {
                if !matches!(self.link, Link::Registering | Link::Offered { .. } | Link::Committed) {
                    return;
                }
                if self.link != Link::Committed {
                    self.reset_link(Link::Committed);
                    self.timer(ctx.now + TELEMETRY_MS, AgentTimer::Telemetry { gen: self.gen });
                }
                self.schedule_apply(ctx, allocation, epoch, activate_at);
                if self.release_on_commit {
                    self.leave();
                }
            }
            Message::ReallocNotice { allocation, epoch, activate_at, .. } => {
                if self.link == Link::Committed {
                    self.schedule_apply(ctx, allocation, epoch, activate_at);
                }
            }
            Message::Release { .. } => {
                self.untune();
                self.reset_link(Link::Off);
                if self.config.archetype == Archetype::Sensing {
                    self.sensing_on = false;
                }
            }
            _ => {}
        }
    }

    /// Stores a notified block for activation and acknowledges it. Epochs
    /// at or below the newest known one are ignored.
    fn schedule_apply<R: Rng>(
        &mut self,
        ctx: &mut AgentCtx<'_, R>,
        allocation: SpectrumAllocation,
        epoch: u64,
        activate_at: SimTime,
    ) {
        let newest = self.pending.as_ref().map_or(0, |(e, _)| *e).max(self.applied_epoch);
        let sn_id = self.config.sn_id.clone();
        if epoch < newest {
            return;
        }
        if epoch > newest {
            self.pending = Some((epoch, allocation));
            if activate_at <= ctx.now {
                self.activate(epoch);
            } else {
                self.timer(activate_at, AgentTimer::Activate { epoch });
            }
        }
        self.send(Message::ReallocAck { sn_id, epoch });
    }

    fn activate(&mut self, epoch: u64) {
        let Some((e, alloc)) = self.pending.clone() else { return };
        if e != epoch || epoch <= self.applied_epoch {
            return;
        }
        debug_assert_eq!(alloc.sn_id, self.config.sn_id);
        self.tuned = Some(alloc);
        self.applied_epoch = epoch;
        self.pending = None;
    }

    fn leave(&mut self) {
        self.release_on_commit = false;
        let sn_id = self.config.sn_id.clone();
        self.send(Message::Release { sn_id });
        self.untune();
        self.reset_link(Link::Off);
    }

    fn on_timer<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, t: AgentTimer) {
        match t {
            AgentTimer::Discover { gen } => {
                if gen == self.gen {
                    if let Link::Discovering { attempt } = self.link {
                        self.discover(ctx, attempt);
                    }
                }
            }
            AgentTimer::Retry { gen } => {
                if gen == self.gen && self.link == Link::RetryWait {
                    self.bootstrap(ctx);
                }
            }
            AgentTimer::Resend { gen, message } => {
                if gen == self.gen {
                    self.send(message);
                }
            }
            AgentTimer::Activate { epoch } => self.activate(epoch),
            AgentTimer::Telemetry { gen } => {
                if gen != self.gen || self.link != Link::Committed {
                    return;
                }
                let latency_ms = match (&self.tuned, self.config.archetype) {
                    (Some(a), Archetype::Control) => {
                        Some(control_latency_sample(&self.config, a.width_mhz, ctx.rng))
                    }
                    _ => None,
                };
                self.last_latency_ms = latency_ms;
                let t = Telemetry {
                    sn_id: self.config.sn_id.clone(),
                    epoch: self.applied_epoch,
                    start_mhz: self.tuned.as_ref().map(|a| a.start_mhz),
                    width_mhz: self.tuned.as_ref().map(|a| a.width_mhz),
                    latency_ms,
                    phase: self.agv_phase().map(|p| p.as_str().to_string()),
                    node: Some(self.config.home_node.clone()),
                };
                self.send(Message::Telemetry(t));
                self.timer(ctx.now + TELEMETRY_MS, AgentTimer::Telemetry { gen });
            }
            AgentTimer::Hop { mission, step } => self.hop(ctx, mission, step),
            AgentTimer::Dwell { mission } => {
                let Some(agv) = self.agv.as_mut() else { return };
                if agv.mission != mission || agv.phase != AgvPhase::AtMachine {
                    return;
                }
                agv.advance();
                let hop = agv.hop_interval_ms;
                self.timer(ctx.now + hop, AgentTimer::ReturnHop { mission, step: 0 });
            }
            AgentTimer::ReturnHop { mission, step } => self.return_hop(ctx, mission, step),
        }
    }

    fn hop<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, mission: u64, step: usize) {
        let Some(agv) = self.agv.as_mut() else { return };
        if agv.mission != mission {
            return;
        }
        match (agv.phase, step) {
            (AgvPhase::Summoned, 0) => agv.advance(),
            (AgvPhase::Traversing, s) if s > 0 => {}
            _ => return,
        }
        let anchor = agv.waypoints[step].clone();
        let last = step + 1 == agv.waypoints.len();
        let (hop, dwell) = (agv.hop_interval_ms, agv.dwell_ms);
        if last {
            agv.advance();
        }
        self.effects.push(AgentEffect::Relocate { anchor });
        if last {
            self.bootstrap(ctx);
            self.timer(ctx.now + dwell, AgentTimer::Dwell { mission });
        } else {
            self.timer(ctx.now + hop, AgentTimer::Hop { mission, step: step + 1 });
        }
    }

    fn return_hop<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, mission: u64, step: usize) {
        let Some(agv) = self.agv.as_mut() else { return };
        if agv.mission != mission || agv.phase != AgvPhase::Returning {
            return;
        }
        let leg = agv.return_leg();
        let hop = agv.hop_interval_ms;
        let last = step + 1 == leg.len();
        if last {
            agv.advance();
        }
        self.effects.push(AgentEffect::Relocate { anchor: leg[step].clone() });
        if !last {
            self.timer(ctx.now + hop, AgentTimer::ReturnHop { mission, step: step + 1 });
            return;
        }
        match self.link {
            Link::Committed => self.leave(),
            Link::Registering | Link::Offered { .. } => self.release_on_commit = true,
            _ => self.reset_link(Link::Off),
        }
    }

    fn toggle<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, on: bool) {
        if self.config.archetype != Archetype::Sensing || on == self.sensing_on {
            return;
        }
        self.sensing_on = on;
        if on {
            self.bootstrap(ctx);
            return;
        }
        match self.link {
            Link::Committed => self.leave(),
            Link::Registering | Link::Offered { .. } => self.release_on_commit = true,
            _ => {
                self.untune();
                self.reset_link(Link::Off);
            }
        }
    }

    fn on_send_failed<R: Rng>(&mut self, ctx: &mut AgentCtx<'_, R>, message: Message) {
        match message {
            Message::Register { .. } | Message::Accept { .. } | Message::Release { .. } | Message::Intent { .. } => {
                let delay = backoff_ms(self.resend_attempt);
                self.resend_attempt += 1;
                self.timer(ctx.now + delay, AgentTimer::Resend { gen: self.gen, message });
            }
            _ => {}
        }
    }
}
