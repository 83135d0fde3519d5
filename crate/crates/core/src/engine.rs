//! Deterministic discrete-event engine tying the network, the manager and
//! the controller agents together.
//!
//! One thread, one seeded generator, and a queue ordered by
//! `(time_ms, insertion seq)`. Messages travel along kira-lite routes and
//! take `ceil(per_hop_ms * hops)` ms.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InvariantBreach, ScenarioError};
use crate::kira::{KiraNetwork, NodeId, SM_SERVICE_KEY};
use crate::protocol::{Envelope, LedgerEvent};
use crate::scenario::{Scenario, ScriptAction};
use crate::sm::{Effect, SmTimer, SpectrumManager, METRICS_HEADER};
use crate::snc::{AgentCtx, AgentEffect, AgentInput, AgentTimer, AgvPhase, MissionBusy, SncAgent};
use crate::spectrum::SimTime;

/// Value published under the manager's DHT key: `<node id>@<node name>`.
pub fn sm_record(node: &str) -> String {
    format!("{}@{node}", NodeId::from_name(node))
}

pub fn parse_sm_record(value: &str) -> Option<String> {
    value.split_once('@').map(|(_, node)| node.to_string())
}

#[derive(Debug, Clone)]
enum Action {
    ToSm { envelope: Envelope },
    ToAgent { sn_id: String, envelope: Envelope },
    SmTimer(SmTimer),
    AgentTimer { sn_id: String, timer: AgentTimer },
    Script(ScriptAction),
    Reconverge { generation: u64 },
}

#[derive(Debug)]
struct Queued {
    time: SimTime,
    seq: u64,
    action: Action,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct EngineStats {
    pub events_processed: u64,
    pub messages_delivered: u64,
    pub messages_dropped: u64,
    pub relocations: u64,
    pub reconvergences: u64,
    pub longest_path: usize,
}

/// Files produced by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub ledger_jsonl: String,
    pub metrics_csv: String,
    pub snapshot_json: String,
}

impl RunOutput {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ledger.jsonl"), &self.ledger_jsonl)?;
        std::fs::write(dir.join("metrics.csv"), &self.metrics_csv)?;
        std::fs::write(dir.join("snapshot.json"), &self.snapshot_json)?;
        Ok(())
    }
}

pub struct Engine {
    scenario: Scenario,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued>,
    rng: ChaCha8Rng,
    net: KiraNetwork,
    sm: SpectrumManager,
    agents: BTreeMap<String, SncAgent>,
    wire_seq: BTreeMap<String, u64>,
    generation: u64,
    ended: bool,
    stats: EngineStats,
    /// Messages for sub-networks that are not simulated here.
    external_out: Vec<(String, Envelope)>,
}

const SM_SENDER: &str = "";

impl Engine {
    /// Builds the engine; `seed` overrides the scenario's seed.
    pub fn new(scenario: Scenario, seed: Option<u64>) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let seed = seed.unwrap_or(scenario.seed);
        let mut net = KiraNetwork::new(scenario.topology.clone());
        net.dht_put(&scenario.sm_node, SM_SERVICE_KEY, &sm_record(&scenario.sm_node));
        let agents = scenario
            .agents
            .iter()
            .map(|cfg| {
                let dock = scenario.topology.anchor_of(&cfg.home_node).map(str::to_string);
                (cfg.sn_id.clone(), SncAgent::new(cfg.clone(), dock))
            })
            .collect();
        let sm = SpectrumManager::new(scenario.sm_config());
        let mut engine = Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            net,
            sm,
            agents,
            wire_seq: BTreeMap::new(),
            generation: 0,
            ended: false,
            stats: EngineStats::default(),
            external_out: Vec::new(),
            scenario,
        };
        for (at, action) in engine.scenario.script() {
            engine.schedule(at, Action::Script(action));
        }
        Ok(engine)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn sm(&self) -> &SpectrumManager {
        &self.sm
    }

    pub fn network(&self) -> &KiraNetwork {
        &self.net
    }

    pub fn agents(&self) -> &BTreeMap<String, SncAgent> {
        &self.agents
    }

    pub fn agent(&self, sn_id: &str) -> Option<&SncAgent> {
        self.agents.get(sn_id)
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn ledger(&self) -> &[LedgerEvent] {
        self.sm.ledger()
    }

    fn schedule(&mut self, time: SimTime, action: Action) {
        self.seq += 1;
        self.queue.push(Queued { time: time.max(self.now), seq: self.seq, action });
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        if self.ended {
            return None;
        }
        self.queue.peek().map(|q| q.time)
    }

    /// Processes every event up to and including `until` (all when `None`),
    /// or until END. Simulated time then rests at `until` if given.
    pub fn run_until(&mut self, until: Option<SimTime>) -> Result<(), InvariantBreach> {
        while let Some(t) = self.next_event_time() {
            if until.is_some_and(|u| t > u) {
                break;
            }
            self.step()?;
        }
        if let Some(u) = until {
            if !self.ended {
                self.now = self.now.max(u);
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), InvariantBreach> {
        self.run_until(None)
    }

    /// Processes the next queued event.
    pub fn step(&mut self) -> Result<bool, InvariantBreach> {
        if self.ended {
            return Ok(false);
        }
        let Some(q) = self.queue.pop() else { return Ok(false) };
        if q.time < self.now {
            return Err(self.breach(format!("event time went backwards: {} < {}", q.time, self.now)));
        }
        self.now = q.time;
        self.stats.events_processed += 1;
        self.dispatch(q.action)?;
        self.check_invariants()?;
        Ok(true)
    }

    fn breach(&self, message: String) -> InvariantBreach {
        InvariantBreach { time_ms: self.now, message }
    }

    fn check_invariants(&self) -> Result<(), InvariantBreach> {
        let s = &self.scenario;
        self.sm
            .state()
            .plan
            .validate(&s.band, s.guard_mhz, None)
            .map_err(|e| self.breach(format!("active plan invalid: {}", e.message)))?;
        for (sn, agent) in &self.agents {
            if let Some(t) = agent.tuned() {
                if &t.sn_id != sn || !s.band.contains(t.start_mhz, t.width_mhz) {
                    return Err(self.breach(format!("{sn} tuned outside its grant: {t}")));
                }
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, action: Action) -> Result<(), InvariantBreach> {
        match action {
            Action::ToSm { envelope } => {
                let effects = self.sm.handle_message(self.now, envelope.message);
                self.apply_sm_effects(effects)
            }
            Action::ToAgent { sn_id, envelope } => {
                self.agent_input(&sn_id, AgentInput::Deliver(envelope.message))
            }
            Action::SmTimer(t) => {
                let effects = self.sm.fire(self.now, t);
                self.apply_sm_effects(effects)
            }
            Action::AgentTimer { sn_id, timer } => self.agent_input(&sn_id, AgentInput::Timer(timer)),
            Action::Script(a) => self.script(a),
            Action::Reconverge { generation } => {
                if generation == self.generation {
                    self.net.reconverge();
                    self.stats.reconvergences += 1;
                }
                Ok(())
            }
        }
    }

    fn script(&mut self, action: ScriptAction) -> Result<(), InvariantBreach> {
        match action {
            ScriptAction::RegisterSn { sn_id } => self.agent_input(&sn_id, AgentInput::Start),
            ScriptAction::CallAgv { sn_id } => {
                // a call during a mission is ignored
                let _ = self.call_agv(&sn_id)?;
                Ok(())
            }
            ScriptAction::ToggleSn2 { sn_id, on } => self.agent_input(&sn_id, AgentInput::Toggle(on)),
            ScriptAction::MoveNode { node, anchor } => self.relocate(&node, &anchor),
            ScriptAction::End => {
                self.ended = true;
                Ok(())
            }
        }
    }

    fn next_wire_seq(&mut self, sender: &str) -> u64 {
        let s = self.wire_seq.entry(sender.to_string()).or_insert(0);
        *s += 1;
        *s
    }

    fn route_delay(&mut self, from: &str, to: &str) -> Result<Option<SimTime>, InvariantBreach> {
        let path = match self.net.route(from, to) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        let mut seen = std::collections::BTreeSet::new();
        if !path.iter().all(|n| seen.insert(n.as_str())) {
            return Err(self.breach(format!("routing loop {from} -> {to}: {path:?}")));
        }
        self.stats.longest_path = self.stats.longest_path.max(path.len());
        Ok(Some(self.scenario.delays.message_delay_ms(path.len() - 1)))
    }

    fn apply_sm_effects(&mut self, effects: Vec<Effect>) -> Result<(), InvariantBreach> {
        for e in effects {
            match e {
                Effect::Timer { at, timer } => self.schedule(at, Action::SmTimer(timer)),
                Effect::Send { to, message } => {
                    let seq = self.next_wire_seq(SM_SENDER);
                    let envelope = Envelope::new(seq, self.now, message);
                    let Some(node) = self.agents.get(&to).map(|a| a.node().to_string()) else {
                        self.external_out.push((to, envelope));
                        continue;
                    };
                    let sm_node = self.scenario.sm_node.clone();
                    match self.route_delay(&sm_node, &node)? {
                        Some(d) => {
                            self.stats.messages_delivered += 1;
                            self.schedule(self.now + d, Action::ToAgent { sn_id: to, envelope });
                        }
                        None => self.stats.messages_dropped += 1,
                    }
                }
            }
        }
        Ok(())
    }

    fn agent_input(&mut self, sn_id: &str, input: AgentInput) -> Result<(), InvariantBreach> {
        let Engine { agents, rng, net, now, .. } = self;
        let Some(agent) = agents.get_mut(sn_id) else { return Ok(()) };
        let lookup = |node: &str| net.dht_get(node, SM_SERVICE_KEY).ok().and_then(|v| parse_sm_record(&v));
        let mut ctx = AgentCtx { now: *now, rng, lookup: &lookup };
        let effects = agent.handle(&mut ctx, input);
        self.apply_agent_effects(sn_id, effects)
    }

    fn apply_agent_effects(&mut self, sn_id: &str, effects: Vec<AgentEffect>) -> Result<(), InvariantBreach> {
        for e in effects {
            match e {
                AgentEffect::Timer { at, timer } => {
                    self.schedule(at, Action::AgentTimer { sn_id: sn_id.to_string(), timer })
                }
                AgentEffect::Relocate { anchor } => {
                    let node = self.agents[sn_id].node().to_string();
                    self.relocate(&node, &anchor)?;
                }
                AgentEffect::Send { to, message } => {
                    let node = self.agents[sn_id].node().to_string();
                    match self.route_delay(&node, &to)? {
                        Some(d) => {
                            self.stats.messages_delivered += 1;
                            let seq = self.next_wire_seq(sn_id);
                            let envelope = Envelope::new(seq, self.now, message);
                            self.schedule(self.now + d, Action::ToSm { envelope });
                        }
                        None => {
                            self.stats.messages_dropped += 1;
                            self.agent_input(sn_id, AgentInput::SendFailed(message))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Moves a mobile node and schedules re-convergence after
    /// `round_ms * (diameter + 1)`.
    pub fn relocate(&mut self, node: &str, anchor: &str) -> Result<(), InvariantBreach> {
        if let Err(e) = self.net.relocate(node, anchor) {
            return Err(self.breach(format!("relocation failed: {}", e.message)));
        }
        if self.net.is_stale() {
            self.stats.relocations += 1;
            self.generation += 1;
            let window = self.scenario.delays.round_ms * u64::from(self.net.topology().convergence_rounds());
            let generation = self.generation;
            self.schedule(self.now + window, Action::Reconverge { generation });
        }
        Ok(())
    }

    /// Presses the call button of an AGV agent.
    pub fn call_agv(&mut self, sn_id: &str) -> Result<Result<(), MissionBusy>, InvariantBreach> {
        let Engine { agents, rng, net, now, .. } = self;
        let Some(agent) = agents.get_mut(sn_id) else { return Ok(Err(MissionBusy(AgvPhase::Docked))) };
        let lookup = |node: &str| net.dht_get(node, SM_SERVICE_KEY).ok().and_then(|v| parse_sm_record(&v));
        let mut ctx = AgentCtx { now: *now, rng, lookup: &lookup };
        match agent.call(&mut ctx) {
            Ok(effects) => {
                self.apply_agent_effects(sn_id, effects)?;
                self.check_invariants()?;
                Ok(Ok(()))
            }
            Err(busy) => Ok(Err(busy)),
        }
    }

    pub fn toggle(&mut self, sn_id: &str, on: bool) -> Result<(), InvariantBreach> {
        self.agent_input(sn_id, AgentInput::Toggle(on))?;
        self.check_invariants()
    }

    pub fn operator_intent(&mut self, sn_id: &str, eta_ms: SimTime) -> Result<(), InvariantBreach> {
        let effects = self.sm.operator_intent(self.now, sn_id, eta_ms);
        self.apply_sm_effects(effects)?;
        self.check_invariants()
    }

    pub fn operator_release(&mut self, sn_id: &str) -> Result<(), InvariantBreach> {
        let effects = self.sm.operator_release(self.now, sn_id);
        self.apply_sm_effects(effects)?;
        self.check_invariants()
    }

    /// Hands a message from an external controller straight to the manager.
    pub fn inject(&mut self, envelope: Envelope) {
        self.schedule(self.now, Action::ToSm { envelope });
    }

    pub fn take_external_outbox(&mut self) -> Vec<(String, Envelope)> {
        std::mem::take(&mut self.external_out)
    }

    pub fn outputs(&self) -> RunOutput {
        let ledger_jsonl: String = self.sm.ledger().iter().map(|e| e.to_line() + "\n").collect();
        let mut metrics_csv = String::from(METRICS_HEADER);
        metrics_csv.push('\n');
        for row in self.sm.metrics() {
            metrics_csv.push_str(&row.to_csv_line());
            metrics_csv.push('\n');
        }
        let mut snapshot_json =
            serde_json::to_string_pretty(&self.sm.state().to_json()).expect("snapshot serializes");
        snapshot_json.push('\n');
        RunOutput { ledger_jsonl, metrics_csv, snapshot_json }
    }

    /// Live view for the dashboard: snapshot plus network and agents.
    pub fn state_json(&self) -> serde_json::Value {
        let topo = self.net.topology();
        let hops_to_sm: BTreeMap<&str, Option<u32>> = self
            .net
            .tables()
            .iter()
            .map(|(n, t)| {
                let sm = NodeId::from_name(&self.scenario.sm_node);
                let h = if n == &self.scenario.sm_node { Some(0) } else { t.entries.get(&sm).map(|e| e.hop_count) };
                (n.as_str(), h)
            })
            .collect();
        serde_json::json!({
            "time_ms": self.now,
            "snapshot": self.sm.state().to_json(),
            "band": self.scenario.band,
            "guard_mhz": self.scenario.guard_mhz,
            "topology": {
                "sm_node": self.scenario.sm_node,
                "nodes": topo.nodes().collect::<Vec<_>>(),
                "links": topo.links().collect::<Vec<_>>(),
                "attachments": topo.attachments(),
                "hops_to_sm": hops_to_sm,
                "stale": self.net.is_stale(),
            },
            "agents": self.agents.values().map(SncAgent::status_json).collect::<Vec<_>>(),
            "telemetry": self.sm.telemetry(),
        })
    }

    pub fn routing_dump(&self) -> serde_json::Value {
        self.net.routing_dump()
    }
}

/// Runs a scenario to completion and returns its output files.
pub fn simulate(scenario: Scenario, seed: Option<u64>, until: Option<SimTime>) -> Result<(Engine, RunOutput), SimError> {
    let mut engine = Engine::new(scenario, seed)?;
    engine.run_until(until)?;
    let out = engine.outputs();
    Ok((engine, out))
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Breach(#[from] InvariantBreach),
}
