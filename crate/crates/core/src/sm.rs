//! The spectrum manager.
//!
//! All durable state lives in [`SmState`] and changes only through
//! [`SmState::apply`], one ledger event at a time. Handlers decide which
//! events to emit and which messages and timers follow from them; replaying
//! a ledger is a fold over the same `apply`.
//!
//! Negotiations are serialized: while one offer is outstanding, further
//! registrations, releases, intents and hold expiries wait in a FIFO and run
//! once the offer is accepted or expires.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::allocator::{compute_plan, AllocatorInput, DEFAULT_GUARD_MHZ};
use crate::error::LedgerError;
use crate::protocol::{
    EventBody, Hold, IntentStatus, LedgerEvent, Message, RejectReason, ReleaseInitiator, Telemetry,
    WireDemand,
};
use crate::spectrum::{
    plan_utilization, AllocationPlan, Band, DemandProfile, QosPriority, SimTime, SpectrumAllocation,
};

pub const DEFAULT_OFFER_MS: SimTime = 5_000;
pub const DEFAULT_APPLY_MS: SimTime = 100;
pub const DEFAULT_INTENT_HOLD_MS: SimTime = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmConfig {
    pub band: Band,
    pub guard_mhz: u32,
    pub offer_ms: SimTime,
    pub apply_ms: SimTime,
    pub intent_hold_ms: SimTime,
    /// Profiles known ahead of registration, used to honour intents.
    pub provisioned: BTreeMap<String, DemandProfile>,
}

impl Default for SmConfig {
    fn default() -> Self {
        Self {
            band: Band::overlayer(),
            guard_mhz: DEFAULT_GUARD_MHZ,
            offer_ms: DEFAULT_OFFER_MS,
            apply_ms: DEFAULT_APPLY_MS,
            intent_hold_ms: DEFAULT_INTENT_HOLD_MS,
            provisioned: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Unregistered,
    PendingOffer,
    Committed,
    Degraded,
    Released,
}

impl SessionState {
    /// Holds spectrum (or is about to).
    pub fn is_active(self) -> bool {
        matches!(self, SessionState::PendingOffer | SessionState::Committed | SessionState::Degraded)
    }

    pub fn has_allocation(self) -> bool {
        matches!(self, SessionState::Committed | SessionState::Degraded)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiationSession {
    pub sn_id: String,
    pub state: SessionState,
    pub demand: DemandProfile,
    pub current_alloc: Option<SpectrumAllocation>,
    pub offer_deadline: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub sn_id: String,
    pub epoch: u64,
    pub deadline: SimTime,
    pub plan: AllocationPlan,
    pub holds: Vec<Hold>,
}

/// Everything the ledger determines. Serialized as the snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmState {
    pub last_seq: u64,
    pub epoch: u64,
    pub plan: AllocationPlan,
    pub sessions: BTreeMap<String, NegotiationSession>,
    pub holds: BTreeMap<String, Hold>,
    pub pending_offer: Option<Proposal>,
    /// Sessions notified of an epoch they have not acknowledged yet.
    pub awaiting_ack: BTreeMap<String, u64>,
}

impl Default for SmState {
    fn default() -> Self {
        Self {
            last_seq: 0,
            epoch: 0,
            plan: AllocationPlan::empty(0),
            sessions: BTreeMap::new(),
            holds: BTreeMap::new(),
            pending_offer: None,
            awaiting_ack: BTreeMap::new(),
        }
    }
}

impl SmState {
    pub fn apply(&mut self, event: &LedgerEvent) {
        self.last_seq = event.seq;
        match &event.body {
            EventBody::Register { .. } | EventBody::Accept { .. } | EventBody::Intent { .. } => {}
            EventBody::Offer { sn_id, demand, epoch, deadline, plan, holds, .. } => {
                self.sessions.insert(
                    sn_id.clone(),
                    NegotiationSession {
                        sn_id: sn_id.clone(),
                        state: SessionState::PendingOffer,
                        demand: demand.clone(),
                        current_alloc: None,
                        offer_deadline: Some(*deadline),
                    },
                );
                self.pending_offer = Some(Proposal {
                    sn_id: sn_id.clone(),
                    epoch: *epoch,
                    deadline: *deadline,
                    plan: plan.clone(),
                    holds: holds.clone(),
                });
            }
            EventBody::Commit { sn_id, epoch, plan, holds, .. } => {
                self.epoch = *epoch;
                self.plan = plan.clone();
                self.holds = holds.iter().map(|h| (h.sn_id.clone(), h.clone())).collect();
                if let Some(sn) = sn_id {
                    if let Some(s) = self.sessions.get_mut(sn) {
                        s.state = SessionState::Committed;
                        s.offer_deadline = None;
                    }
                    if self.pending_offer.as_ref().is_some_and(|p| &p.sn_id == sn) {
                        self.pending_offer = None;
                    }
                    self.awaiting_ack.insert(sn.clone(), *epoch);
                }
                for s in self.sessions.values_mut() {
                    if s.state.has_allocation() {
                        s.current_alloc = plan.get(&s.sn_id).cloned();
                    }
                }
            }
            EventBody::Reject { sn_id, reason, .. } => match reason {
                RejectReason::OfferExpired => {
                    if let Some(s) = self.sessions.get_mut(sn_id) {
                        s.state = SessionState::Unregistered;
                        s.offer_deadline = None;
                        s.current_alloc = None;
                    }
                    if self.pending_offer.as_ref().is_some_and(|p| &p.sn_id == sn_id) {
                        self.pending_offer = None;
                    }
                }
                RejectReason::Preempted => self.deactivate(sn_id),
                _ => {}
            },
            EventBody::Release { sn_id, .. } => self.deactivate(sn_id),
            EventBody::ReallocNotice { sn_id, epoch, .. } => {
                self.awaiting_ack.insert(sn_id.clone(), *epoch);
            }
            EventBody::ReallocAck { sn_id, epoch } => {
                if self.awaiting_ack.get(sn_id) == Some(epoch) {
                    self.awaiting_ack.remove(sn_id);
                }
                if *epoch == self.epoch {
                    if let Some(s) = self.sessions.get_mut(sn_id) {
                        if s.state == SessionState::Degraded {
                            s.state = SessionState::Committed;
                        }
                    }
                }
            }
            EventBody::Degrade { sn_id, .. } => {
                self.awaiting_ack.remove(sn_id);
                if let Some(s) = self.sessions.get_mut(sn_id) {
                    if s.state.has_allocation() {
                        s.state = SessionState::Degraded;
                    }
                }
            }
        }
    }

    fn deactivate(&mut self, sn_id: &str) {
        self.awaiting_ack.remove(sn_id);
        if let Some(s) = self.sessions.get_mut(sn_id) {
            s.state = SessionState::Released;
            s.current_alloc = None;
            s.offer_deadline = None;
        }
    }

    /// Sessions that currently own a block.
    pub fn allocated_sessions(&self) -> impl Iterator<Item = &NegotiationSession> {
        self.sessions.values().filter(|s| s.state.has_allocation())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("state serializes")
    }
}

/// Rebuilds the state from a ledger. `seq` must run 1, 2, 3, ...
pub fn replay(events: &[LedgerEvent]) -> Result<SmState, LedgerError> {
    let mut state = SmState::default();
    for (i, e) in events.iter().enumerate() {
        if e.seq != state.last_seq + 1 {
            return Err(LedgerError::Corrupt {
                line: i + 1,
                reason: format!("expected seq {}, found {}", state.last_seq + 1, e.seq),
            });
        }
        state.apply(e);
    }
    Ok(state)
}

pub const METRICS_HEADER: &str = "time_ms,kind,sn_id,epoch,start_mhz,width_mhz,utilization";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub time_ms: SimTime,
    pub kind: &'static str,
    pub sn_id: Option<String>,
    pub epoch: u64,
    pub start_mhz: Option<u32>,
    pub width_mhz: Option<u32>,
    pub utilization: f64,
}

impl MetricsRow {
    /// Row for `event`, read against the state right after applying it.
    pub fn new(event: &LedgerEvent, state: &SmState, band: &Band) -> Self {
        let sn_id = event.body.sn_id().map(str::to_string);
        let alloc = event
            .body
            .allocation()
            .or_else(|| sn_id.as_deref().and_then(|sn| state.plan.get(sn)));
        Self {
            time_ms: event.time,
            kind: event.body.kind(),
            epoch: event.body.epoch().unwrap_or(state.epoch),
            start_mhz: alloc.map(|a| a.start_mhz),
            width_mhz: alloc.map(|a| a.width_mhz),
            sn_id,
            utilization: plan_utilization(&state.plan, band),
        }
    }

    pub fn to_csv_line(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{:.4}",
            self.time_ms,
            self.kind,
            self.sn_id.as_deref().unwrap_or(""),
            self.epoch,
            opt(&self.start_mhz),
            opt(&self.width_mhz),
            self.utilization
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SmTimer {
    OfferDeadline { sn_id: String, epoch: u64 },
    Activate { epoch: u64 },
    HoldExpiry { sn_id: String, expires_at: SimTime },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send { to: String, message: Message },
    Timer { at: SimTime, timer: SmTimer },
}

#[derive(Debug, Clone, PartialEq)]
enum Deferred {
    Register(WireDemand),
    Release { sn_id: String, initiator: ReleaseInitiator },
    Intent { sn_id: String, eta_ms: SimTime },
    HoldExpiry { sn_id: String, expires_at: SimTime },
}

#[derive(Debug, Clone)]
pub struct SpectrumManager {
    config: SmConfig,
    state: SmState,
    ledger: Vec<LedgerEvent>,
    metrics: Vec<MetricsRow>,
    deferred: VecDeque<Deferred>,
    telemetry: BTreeMap<String, Telemetry>,
    effects: Vec<Effect>,
    now: SimTime,
}

impl SpectrumManager {
    pub fn new(config: SmConfig) -> Self {
        Self {
            config,
            state: SmState::default(),
            ledger: Vec::new(),
            metrics: Vec::new(),
            deferred: VecDeque::new(),
            telemetry: BTreeMap::new(),
            effects: Vec::new(),
            now: 0,
        }
    }

    pub fn config(&self) -> &SmConfig {
        &self.config
    }

    pub fn state(&self) -> &SmState {
        &self.state
    }

    pub fn ledger(&self) -> &[LedgerEvent] {
        &self.ledger
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Latest telemetry per sub-network. Not part of the ledger.
    pub fn telemetry(&self) -> &BTreeMap<String, Telemetry> {
        &self.telemetry
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    /// Processes one inbound controller message.
    pub fn handle_message(&mut self, now: SimTime, message: Message) -> Vec<Effect> {
        self.now = now;
        match message {
            Message::Register { demand } => self.register(demand),
            Message::Accept { sn_id, epoch } => self.accept(&sn_id, epoch),
            Message::Release { sn_id } => self.release(sn_id, ReleaseInitiator::Snc),
            Message::Intent { sn_id, eta_ms } => self.intent(sn_id, eta_ms),
            Message::ReallocAck { sn_id, epoch } => self.realloc_ack(&sn_id, epoch),
            Message::Telemetry(t) => self.on_telemetry(t),
            // manager-bound traffic only
            Message::Offer { .. }
            | Message::Reject { .. }
            | Message::Commit { .. }
            | Message::ReallocNotice { .. } => {}
        }
        std::mem::take(&mut self.effects)
    }

    /// Operator-initiated release; the controller is told to stop.
    pub fn operator_release(&mut self, now: SimTime, sn_id: &str) -> Vec<Effect> {
        self.now = now;
        self.release(sn_id.to_string(), ReleaseInitiator::Sm);
        std::mem::take(&mut self.effects)
    }

    /// Operator-initiated intent, equivalent to an INTENT message.
    pub fn operator_intent(&mut self, now: SimTime, sn_id: &str, eta_ms: SimTime) -> Vec<Effect> {
        self.now = now;
        self.intent(sn_id.to_string(), eta_ms);
        std::mem::take(&mut self.effects)
    }

    pub fn fire(&mut self, now: SimTime, timer: SmTimer) -> Vec<Effect> {
        self.now = now;
        match timer {
            SmTimer::OfferDeadline { sn_id, epoch } => {
                let live = self
                    .state
                    .pending_offer
                    .as_ref()
                    .is_some_and(|p| p.sn_id == sn_id && p.epoch == epoch);
                if live {
                    self.expire_offer(&sn_id);
                    self.drain();
                }
            }
            SmTimer::Activate { epoch } => {
                let late: Vec<String> = self
                    .state
                    .awaiting_ack
                    .iter()
                    .filter(|(_, e)| **e == epoch)
                    .map(|(sn, _)| sn.clone())
                    .collect();
                for sn_id in late {
                    self.emit(EventBody::Degrade { sn_id, epoch });
                }
            }
            SmTimer::HoldExpiry { sn_id, expires_at } => self.hold_expiry(sn_id, expires_at),
        }
        std::mem::take(&mut self.effects)
    }

    fn emit(&mut self, body: EventBody) {
        let event = LedgerEvent { seq: self.state.last_seq + 1, time: self.now, body };
        self.state.apply(&event);
        self.metrics.push(MetricsRow::new(&event, &self.state, &self.config.band));
        self.ledger.push(event);
    }

    fn send(&mut self, to: &str, message: Message) {
        self.effects.push(Effect::Send { to: to.to_string(), message });
    }

    fn timer(&mut self, at: SimTime, timer: SmTimer) {
        self.effects.push(Effect::Timer { at, timer });
    }

    fn reject(&mut self, sn_id: &str, reason: RejectReason, epoch: Option<u64>) {
        self.emit(EventBody::Reject { sn_id: sn_id.to_string(), reason, epoch });
        self.send(sn_id, Message::Reject { sn_id: sn_id.to_string(), reason });
    }

    fn busy(&self) -> bool {
        self.state.pending_offer.is_some()
    }

    fn drain(&mut self) {
        while !self.busy() {
            let Some(next) = self.deferred.pop_front() else { break };
            match next {
                Deferred::Register(demand) => self.process_register(demand),
                Deferred::Release { sn_id, initiator } => self.release(sn_id, initiator),
                Deferred::Intent { sn_id, eta_ms } => self.intent(sn_id, eta_ms),
                Deferred::HoldExpiry { sn_id, expires_at } => self.hold_expiry(sn_id, expires_at),
            }
        }
    }

    /// Plan for all allocated sessions plus holds, plus `extra`, leaving
    /// out the hold of `skip_hold`.
    fn recompute(
        &self,
        extra: Option<&DemandProfile>,
        skip_hold: Option<&str>,
    ) -> (AllocationPlan, Vec<Hold>) {
        let mut demands: Vec<DemandProfile> =
            self.state.allocated_sessions().map(|s| s.demand.clone()).collect();
        let holds: Vec<&Hold> = self
            .state
            .holds
            .values()
            .filter(|h| Some(h.sn_id.as_str()) != skip_hold)
            .filter(|h| extra.is_none_or(|d| d.sn_id != h.sn_id))
            .collect();
        demands.extend(holds.iter().map(|h| h.demand.clone()));
        demands.extend(extra.cloned());
        let pinned: Vec<SpectrumAllocation> = self
            .state
            .allocated_sessions()
            .filter(|s| s.demand.priority.is_sticky())
            .filter_map(|s| s.current_alloc.clone())
            .collect();
        let input = AllocatorInput::new(self.config.band, self.config.guard_mhz, demands)
            .with_pinned(pinned)
            .with_prev_epoch(self.state.epoch);
        let plan = compute_plan(&input).expect("manager state yields a valid allocator input");
        let new_holds = holds
            .into_iter()
            .filter_map(|h| {
                plan.get(&h.sn_id).map(|a| Hold { allocation: a.clone(), ..h.clone() })
            })
            .collect();
        (plan, new_holds)
    }

    fn register(&mut self, demand: WireDemand) {
        if self.busy() {
            let queued = self
                .deferred
                .iter()
                .any(|d| matches!(d, Deferred::Register(q) if q.sn_id == demand.sn_id));
            let pending_self =
                self.state.pending_offer.as_ref().is_some_and(|p| p.sn_id == demand.sn_id);
            if !queued && !pending_self {
                self.emit(EventBody::Register { demand: demand.clone(), deferred: true });
                self.deferred.push_back(Deferred::Register(demand));
            } else if pending_self {
                // the controller lost our offer; repeat it
                self.emit(EventBody::Register { demand: demand.clone(), deferred: false });
                let p = self.state.pending_offer.clone().expect("pending");
                let allocation = p.plan.get(&p.sn_id).cloned().expect("offered block");
                self.send(
                    &p.sn_id,
                    Message::Offer {
                        sn_id: p.sn_id.clone(),
                        allocation,
                        epoch: p.epoch,
                        deadline: p.deadline,
                    },
                );
            }
            return;
        }
        self.emit(EventBody::Register { demand: demand.clone(), deferred: false });
        self.process_register(demand);
    }

    fn process_register(&mut self, wire: WireDemand) {
        let sn_id = wire.sn_id.clone();
        let demand = QosPriority::new(wire.priority)
            .and_then(|p| {
                DemandProfile::new(&wire.sn_id, p, wire.min_bw_mhz, wire.pref_bw_mhz, self.now)
            })
            .and_then(|d| d.check_against(&self.config.band).map(|_| d));
        let demand = match demand {
            Ok(d) => d,
            Err(_) => return self.reject(&sn_id, RejectReason::InvalidDemand, None),
        };
        if self.state.sessions.get(&sn_id).is_some_and(|s| s.state.is_active()) {
            return self.reject(&sn_id, RejectReason::AlreadyRegistered, None);
        }
        let epoch = self.state.epoch + 1;
        let held = self.state.holds.get(&sn_id).filter(|h| h.demand.same_requirement(&demand));
        let (demand, plan, holds) = if let Some(hold) = held {
            let mut plan = self.state.plan.clone();
            plan.epoch = epoch;
            for a in &mut plan.allocations {
                a.epoch = epoch;
            }
            let holds = self
                .state
                .holds
                .values()
                .filter(|h| h.sn_id != sn_id)
                .map(|h| Hold { allocation: plan.get(&h.sn_id).cloned().expect("held"), ..h.clone() })
                .collect();
            (hold.demand.clone(), plan, holds)
        } else {
            let (plan, holds) = self.recompute(Some(&demand), Some(&sn_id));
            (demand, plan, holds)
        };
        let Some(allocation) = plan.get(&sn_id).cloned() else {
            return self.reject(&sn_id, RejectReason::InsufficientSpectrum, None);
        };
        let deadline = self.now + self.config.offer_ms;
        self.emit(EventBody::Offer {
            sn_id: sn_id.clone(),
            demand,
            allocation: allocation.clone(),
            epoch,
            deadline,
            plan,
            holds,
        });
        self.send(&sn_id, Message::Offer { sn_id: sn_id.clone(), allocation, epoch, deadline });
        self.timer(deadline, SmTimer::OfferDeadline { sn_id, epoch });
    }

    fn accept(&mut self, sn_id: &str, epoch: u64) {
        let proposal = self.state.pending_offer.clone().filter(|p| p.sn_id == sn_id);
        let Some(p) = proposal else {
            let expired = self
                .state
                .sessions
                .get(sn_id)
                .is_some_and(|s| s.state == SessionState::Unregistered);
            let reason =
                if expired { RejectReason::OfferExpired } else { RejectReason::StaleEpoch };
            return self.reject(sn_id, reason, Some(epoch));
        };
        if epoch != p.epoch {
            return self.reject(sn_id, RejectReason::StaleEpoch, Some(epoch));
        }
        if self.now > p.deadline {
            self.expire_offer(sn_id);
            return self.drain();
        }
        self.emit(EventBody::Accept { sn_id: sn_id.to_string(), epoch });
        self.commit(Some(sn_id), p.plan, p.holds);
        self.drain();
    }

    fn expire_offer(&mut self, sn_id: &str) {
        let epoch = self.state.pending_offer.as_ref().map(|p| p.epoch);
        self.reject(sn_id, RejectReason::OfferExpired, epoch);
    }

    /// Two-phase switch to `plan`: notices now, activation after `apply_ms`.
    fn commit(&mut self, cause: Option<&str>, plan: AllocationPlan, holds: Vec<Hold>) {
        let preempted: Vec<String> = self
            .state
            .allocated_sessions()
            .filter(|s| Some(s.sn_id.as_str()) != cause && plan.get(&s.sn_id).is_none())
            .map(|s| s.sn_id.clone())
            .collect();
        for sn in &preempted {
            self.reject(sn, RejectReason::Preempted, Some(plan.epoch));
        }

        let previous = self.state.plan.clone();
        let epoch = plan.epoch;
        let activate_at = self.now + self.config.apply_ms;
        let fresh_holds: Vec<(String, SimTime)> = holds
            .iter()
            .filter(|h| self.state.holds.get(&h.sn_id).is_none_or(|old| old.expires_at != h.expires_at))
            .map(|h| (h.sn_id.clone(), h.expires_at))
            .collect();
        self.emit(EventBody::Commit {
            sn_id: cause.map(str::to_string),
            epoch,
            activate_at,
            plan: plan.clone(),
            holds,
        });
        if let Some(sn) = cause {
            let allocation = plan.get(sn).cloned().expect("committed newcomer is allocated");
            self.send(sn, Message::Commit { sn_id: sn.to_string(), allocation, epoch, activate_at });
        }
        let notify: Vec<(String, SpectrumAllocation)> = self
            .state
            .allocated_sessions()
            .filter(|s| Some(s.sn_id.as_str()) != cause)
            .filter_map(|s| {
                let alloc = plan.get(&s.sn_id)?;
                let moved = previous.get(&s.sn_id).is_none_or(|old| !old.same_block(alloc));
                let lagging = s.state == SessionState::Degraded
                    || self.state.awaiting_ack.contains_key(&s.sn_id);
                (moved || lagging).then(|| (s.sn_id.clone(), alloc.clone()))
            })
            .collect();
        for (sn_id, allocation) in notify {
            self.notice(sn_id, allocation, epoch, activate_at);
        }
        for (sn_id, expires_at) in fresh_holds {
            self.timer(expires_at, SmTimer::HoldExpiry { sn_id, expires_at });
        }
        self.timer(activate_at, SmTimer::Activate { epoch });
    }

    fn notice(&mut self, sn_id: String, allocation: SpectrumAllocation, epoch: u64, activate_at: SimTime) {
        self.emit(EventBody::ReallocNotice {
            sn_id: sn_id.clone(),
            allocation: allocation.clone(),
            epoch,
            activate_at,
        });
        self.send(&sn_id, Message::ReallocNotice { sn_id: sn_id.clone(), allocation, epoch, activate_at });
    }

    fn release(&mut self, sn_id: String, initiator: ReleaseInitiator) {
        if self.busy() {
            self.deferred.push_back(Deferred::Release { sn_id, initiator });
            return;
        }
        if !self.state.sessions.get(&sn_id).is_some_and(|s| s.state.has_allocation()) {
            return;
        }
        self.emit(EventBody::Release { sn_id: sn_id.clone(), initiator });
        if initiator == ReleaseInitiator::Sm {
            self.send(&sn_id, Message::Release { sn_id: sn_id.clone() });
        }
        let (plan, holds) = self.recompute(None, None);
        self.commit(None, plan, holds);
    }

    fn intent(&mut self, sn_id: String, eta_ms: SimTime) {
        if self.busy() {
            self.deferred.push_back(Deferred::Intent { sn_id, eta_ms });
            return;
        }
        let known = self
            .config
            .provisioned
            .get(&sn_id)
            .or_else(|| self.state.sessions.get(&sn_id).map(|s| &s.demand))
            .cloned();
        let Some(mut demand) = known else {
            return self.emit(EventBody::Intent { sn_id, eta_ms, status: IntentStatus::UnknownSn });
        };
        if self.state.sessions.get(&sn_id).is_some_and(|s| s.state.is_active()) {
            return self.emit(EventBody::Intent { sn_id, eta_ms, status: IntentStatus::AlreadyActive });
        }
        demand.registered_at = self.now;
        let (plan, mut holds) = self.recompute(Some(&demand), Some(&sn_id));
        let Some(allocation) = plan.get(&sn_id).cloned() else {
            return self.emit(EventBody::Intent { sn_id, eta_ms, status: IntentStatus::NoSpace });
        };
        self.emit(EventBody::Intent { sn_id: sn_id.clone(), eta_ms, status: IntentStatus::Reserved });
        holds.push(Hold {
            sn_id,
            demand,
            expires_at: eta_ms + self.config.intent_hold_ms,
            allocation,
        });
        holds.sort_by(|a, b| a.sn_id.cmp(&b.sn_id));
        self.commit(None, plan, holds);
    }

    fn hold_expiry(&mut self, sn_id: String, expires_at: SimTime) {
        if self.state.holds.get(&sn_id).is_none_or(|h| h.expires_at != expires_at) {
            return;
        }
        if self.busy() {
            self.deferred.push_back(Deferred::HoldExpiry { sn_id, expires_at });
            return;
        }
        let (plan, holds) = self.recompute(None, Some(&sn_id));
        self.commit(None, plan, holds);
    }

    fn realloc_ack(&mut self, sn_id: &str, epoch: u64) {
        let awaited = self.state.awaiting_ack.get(sn_id) == Some(&epoch);
        let recovers = epoch == self.state.epoch
            && self.state.sessions.get(sn_id).is_some_and(|s| s.state == SessionState::Degraded);
        if awaited || recovers {
            self.emit(EventBody::ReallocAck { sn_id: sn_id.to_string(), epoch });
        }
    }

    fn on_telemetry(&mut self, t: Telemetry) {
        let sn_id = t.sn_id.clone();
        let tuned = (t.epoch, t.start_mhz, t.width_mhz);
        self.telemetry.insert(sn_id.clone(), t);
        let Some(session) = self.state.sessions.get(&sn_id) else { return };
        if session.state != SessionState::Degraded {
            return;
        }
        let Some(alloc) = session.current_alloc.clone() else { return };
        if tuned == (self.state.epoch, Some(alloc.start_mhz), Some(alloc.width_mhz)) {
            let epoch = self.state.epoch;
            self.emit(EventBody::ReallocAck { sn_id, epoch });
        } else if !self.state.awaiting_ack.contains_key(&sn_id) {
            let epoch = self.state.epoch;
            let activate_at = self.now + self.config.apply_ms;
            let allocation = SpectrumAllocation { epoch, ..alloc };
            self.notice(sn_id, allocation, epoch, activate_at);
            self.timer(activate_at, SmTimer::Activate { epoch });
        }
    }
}
