//! Wire messages between controllers and the spectrum manager, and the
//! append-only ledger the manager persists.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::LedgerError;
use crate::spectrum::{AllocationPlan, DemandProfile, SimTime, SpectrumAllocation};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InsufficientSpectrum,
    AlreadyRegistered,
    InvalidDemand,
    StaleEpoch,
    OfferExpired,
    Preempted,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::InsufficientSpectrum => "insufficient_spectrum",
            RejectReason::AlreadyRegistered => "already_registered",
            RejectReason::InvalidDemand => "invalid_demand",
            RejectReason::StaleEpoch => "stale_epoch",
            RejectReason::OfferExpired => "offer_expired",
            RejectReason::Preempted => "preempted",
        }
    }
}

/// Periodic controller status, shown on the dashboard only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telemetry {
    pub sn_id: String,
    pub epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_mhz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_mhz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
}

/// Raw demand as sent on the wire; validated by the manager so malformed
/// requests can be answered with `invalid_demand`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireDemand {
    pub sn_id: String,
    pub priority: u8,
    pub min_bw_mhz: u32,
    pub pref_bw_mhz: u32,
    #[serde(default)]
    pub registered_at: SimTime,
}

impl From<&DemandProfile> for WireDemand {
    fn from(d: &DemandProfile) -> Self {
        Self {
            sn_id: d.sn_id.clone(),
            priority: d.priority.level(),
            min_bw_mhz: d.min_bw_mhz,
            pref_bw_mhz: d.pref_bw_mhz,
            registered_at: d.registered_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    // controller -> manager
    Register { demand: WireDemand },
    Accept { sn_id: String, epoch: u64 },
    /// Either direction: a controller leaving, or the manager evicting it.
    Release { sn_id: String },
    Intent { sn_id: String, eta_ms: SimTime },
    ReallocAck { sn_id: String, epoch: u64 },
    Telemetry(Telemetry),
    // manager -> controller
    Offer { sn_id: String, allocation: SpectrumAllocation, epoch: u64, deadline: SimTime },
    Reject { sn_id: String, reason: RejectReason },
    Commit { sn_id: String, allocation: SpectrumAllocation, epoch: u64, activate_at: SimTime },
    ReallocNotice { sn_id: String, allocation: SpectrumAllocation, epoch: u64, activate_at: SimTime },
}

impl Message {
    pub fn sn_id(&self) -> &str {
        match self {
            Message::Register { demand } => &demand.sn_id,
            Message::Telemetry(t) => &t.sn_id,
            Message::Accept { sn_id, .. }
            | Message::Release { sn_id }
            | Message::Intent { sn_id, .. }
            | Message::ReallocAck { sn_id, .. }
            | Message::Offer { sn_id, .. }
            | Message::Reject { sn_id, .. }
            | Message::Commit { sn_id, .. }
            | Message::ReallocNotice { sn_id, .. } => sn_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::Accept { .. } => "ACCEPT",
            Message::Release { .. } => "RELEASE",
            Message::Intent { .. } => "INTENT",
            Message::ReallocAck { .. } => "REALLOC_ACK",
            Message::Telemetry(_) => "TELEMETRY",
            Message::Offer { .. } => "OFFER",
            Message::Reject { .. } => "REJECT",
            Message::Commit { .. } => "COMMIT",
            Message::ReallocNotice { .. } => "REALLOC_NOTICE",
        }
    }
}

/// `{v, kind, seq, time, payload}` on one line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub seq: u64,
    pub time: SimTime,
    #[serde(flatten)]
    pub message: Message,
}

impl Envelope {
    pub fn new(seq: u64, time: SimTime, message: Message) -> Self {
        Self { v: WIRE_VERSION, seq, time, message }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        let env: Envelope = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if env.v != WIRE_VERSION {
            return Err(format!("unsupported wire version {}", env.v));
        }
        Ok(env)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseInitiator {
    Snc,
    Sm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentStatus {
    Reserved,
    UnknownSn,
    AlreadyActive,
    NoSpace,
}

/// Reservation made on behalf of an announced sub-network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hold {
    pub sn_id: String,
    pub demand: DemandProfile,
    pub expires_at: SimTime,
    pub allocation: SpectrumAllocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    Register {
        demand: WireDemand,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        deferred: bool,
    },
    Offer {
        sn_id: String,
        demand: DemandProfile,
        allocation: SpectrumAllocation,
        epoch: u64,
        deadline: SimTime,
        plan: AllocationPlan,
        holds: Vec<Hold>,
    },
    Accept {
        sn_id: String,
        epoch: u64,
    },
    Commit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sn_id: Option<String>,
        epoch: u64,
        activate_at: SimTime,
        plan: AllocationPlan,
        holds: Vec<Hold>,
    },
    Reject {
        sn_id: String,
        reason: RejectReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epoch: Option<u64>,
    },
    Release {
        sn_id: String,
        initiator: ReleaseInitiator,
    },
    Intent {
        sn_id: String,
        eta_ms: SimTime,
        status: IntentStatus,
    },
    ReallocNotice {
        sn_id: String,
        allocation: SpectrumAllocation,
        epoch: u64,
        activate_at: SimTime,
    },
    ReallocAck {
        sn_id: String,
        epoch: u64,
    },
    Degrade {
        sn_id: String,
        epoch: u64,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Register { .. } => "REGISTER",
            EventBody::Offer { .. } => "OFFER",
            EventBody::Accept { .. } => "ACCEPT",
            EventBody::Commit { .. } => "COMMIT",
            EventBody::Reject { .. } => "REJECT",
            EventBody::Release { .. } => "RELEASE",
            EventBody::Intent { .. } => "INTENT",
            EventBody::ReallocNotice { .. } => "REALLOC_NOTICE",
            EventBody::ReallocAck { .. } => "REALLOC_ACK",
            EventBody::Degrade { .. } => "DEGRADE",
        }
    }

    pub fn sn_id(&self) -> Option<&str> {
        match self {
            EventBody::Register { demand, .. } => Some(&demand.sn_id),
            EventBody::Commit { sn_id, .. } => sn_id.as_deref(),
            EventBody::Offer { sn_id, .. }
            | EventBody::Accept { sn_id, .. }
            | EventBody::Reject { sn_id, .. }
            | EventBody::Release { sn_id, .. }
            | EventBody::Intent { sn_id, .. }
            | EventBody::ReallocNotice { sn_id, .. }
            | EventBody::ReallocAck { sn_id, .. }
            | EventBody::Degrade { sn_id, .. } => Some(sn_id),
        }
    }

    pub fn epoch(&self) -> Option<u64> {
        match self {
            EventBody::Register { .. } | EventBody::Release { .. } | EventBody::Intent { .. } => None,
            EventBody::Reject { epoch, .. } => *epoch,
            EventBody::Offer { epoch, .. }
            | EventBody::Accept { epoch, .. }
            | EventBody::Commit { epoch, .. }
            | EventBody::ReallocNotice { epoch, .. }
            | EventBody::ReallocAck { epoch, .. }
            | EventBody::Degrade { epoch, .. } => Some(*epoch),
        }
    }

    /// The block this event is about, if it names one.
    pub fn allocation(&self) -> Option<&SpectrumAllocation> {
        match self {
            EventBody::Offer { allocation, .. } | EventBody::ReallocNotice { allocation, .. } => {
                Some(allocation)
            }
            EventBody::Commit { sn_id: Some(sn), plan, .. } => plan.get(sn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub time: SimTime,
    #[serde(flatten)]
    pub body: EventBody,
}

impl LedgerEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("ledger event serializes")
    }
}

pub fn write_ledger<W: Write>(mut out: W, events: &[LedgerEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(out, "{}", e.to_line())?;
    }
    Ok(())
}

/// Parses JSON-lines, requiring `seq` to run 1, 2, 3, ... without gaps.
/// Blank lines are skipped.
pub fn read_ledger<R: BufRead>(input: R) -> Result<Vec<LedgerEvent>, LedgerError> {
    let mut events: Vec<LedgerEvent> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let event: LedgerEvent = serde_json::from_str(&line)
            .map_err(|e| LedgerError::Corrupt { line: lineno, reason: e.to_string() })?;
        let expected = events.last().map_or(1, |e| e.seq + 1);
        if event.seq != expected {
            return Err(LedgerError::Corrupt {
                line: lineno,
                reason: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::QosPriority;

    #[test]
    fn envelope_shape() {
        let env = Envelope::new(3, 17, Message::Accept { sn_id: "SN-1".into(), epoch: 2 });
        let v: serde_json::Value = serde_json::from_str(&env.to_line()).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["kind"], "ACCEPT");
        assert_eq!(v["seq"], 3);
        assert_eq!(v["time"], 17);
        assert_eq!(v["payload"]["sn_id"], "SN-1");
        assert_eq!(Envelope::from_line(&env.to_line()).unwrap(), env);
    }

    #[test]
    fn envelope_rejects_other_versions() {
        let line = r#"{"v":2,"seq":1,"time":0,"kind":"RELEASE","payload":{"sn_id":"x"}}"#;
        assert!(Envelope::from_line(line).is_err());
    }

    #[test]
    fn reject_reason_strings() {
        let j = serde_json::to_string(&RejectReason::InsufficientSpectrum).unwrap();
        assert_eq!(j, "\"insufficient_spectrum\"");
        assert_eq!(RejectReason::OfferExpired.as_str(), "offer_expired");
    }

    fn ev(seq: u64) -> LedgerEvent {
        LedgerEvent {
            seq,
            time: seq * 10,
            body: EventBody::Release { sn_id: "SN-2".into(), initiator: ReleaseInitiator::Snc },
        }
    }

    #[test]
    fn ledger_roundtrip() {
        let events = vec![ev(1), ev(2), ev(3)];
        let mut buf = Vec::new();
        write_ledger(&mut buf, &events).unwrap();
        assert_eq!(read_ledger(buf.as_slice()).unwrap(), events);
        assert!(read_ledger(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn ledger_gaps_are_corrupt() {
        let mut buf = Vec::new();
        write_ledger(&mut buf, &[ev(1), ev(3)]).unwrap();
        match read_ledger(buf.as_slice()) {
            Err(LedgerError::Corrupt { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut buf = Vec::new();
        write_ledger(&mut buf, &[ev(2)]).unwrap();
        assert!(read_ledger(buf.as_slice()).is_err());
        assert!(read_ledger(&b"{not json\n"[..]).is_err());
    }

    #[test]
    fn ledger_event_is_flat() {
        let d = DemandProfile::new("SN-1", QosPriority::CONTROL, 10, 10, 0).unwrap();
        let e = LedgerEvent {
            seq: 1,
            time: 0,
            body: EventBody::Register { demand: (&d).into(), deferred: false },
        };
        let v: serde_json::Value = serde_json::from_str(&e.to_line()).unwrap();
        assert_eq!(v["kind"], "REGISTER");
        assert_eq!(v["payload"]["demand"]["priority"], 0);
        assert!(v["payload"].get("deferred").is_none());
    }
}
