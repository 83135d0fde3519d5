use std::path::{Path, PathBuf};

use jsonschema::{Registry, Validator};
use nin_dsm_core::engine::simulate;
use nin_dsm_core::protocol::{Envelope, Message, RejectReason, Telemetry, WireDemand};
use nin_dsm_core::scenario::Scenario;
use nin_dsm_core::spectrum::{QosPriority, SpectrumAllocation};
use serde_json::{json, Value};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn validator(name: &str) -> Validator {
    let dir = root().join("schema");
    let common = read_json(&dir.join("common.schema.json"));
    let common_id = common["$id"].as_str().unwrap().to_string();
    let registry = Registry::new().add(common_id, common).unwrap().prepare().unwrap();
    let schema = read_json(&dir.join(name));
    jsonschema::options().with_registry(&registry).build(&schema).unwrap()
}

fn assert_valid(v: &Validator, instance: &Value) {
    let errors: Vec<String> = v.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}\n{instance}");
}

fn bundled_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root().join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    out
}

#[test]
fn bundled_scenarios_conform() {
    let v = validator("scenario.schema.json");
    let files = bundled_scenarios();
    assert!(files.len() >= 2);
    for path in files {
        assert_valid(&v, &read_json(&path));
        let s = Scenario::from_path(&path).unwrap();
        assert_valid(&v, &serde_json::from_str(&s.to_json_pretty()).unwrap());
    }
}

#[test]
fn schema_and_loader_agree_on_malformed_scenarios() {
    let v = validator("scenario.schema.json");
    let base = read_json(&root().join("scenarios/walkthrough.json"));
    let mutations: Vec<Box<dyn Fn(&mut Value)>> = vec![
        Box::new(|s| s["colour"] = json!("red")),
        Box::new(|s| s["agents"][0]["demand"]["priority"] = json!(3)),
        Box::new(|s| s["agents"][0]["archetype"] = json!("ROBOT")),
        Box::new(|s| s["events"][0]["action"] = json!("JUMP")),
        Box::new(|s| s["events"][3]["args"] = json!({})),
        Box::new(|s| s["band"]["grid_mhz"] = json!(0)),
        Box::new(|s| s["agents"][1]["home_node"] = json!(7)),
        Box::new(|s| {
            s.as_object_mut().unwrap().remove("topology");
        }),
    ];
    for (i, m) in mutations.iter().enumerate() {
        let mut s = base.clone();
        m(&mut s);
        assert!(!v.is_valid(&s), "mutation {i} passes the schema");
        assert!(Scenario::from_json_str(&s.to_string()).is_err(), "mutation {i} passes the loader");
    }
}

#[test]
fn ledger_and_snapshot_conform() {
    let event_v = validator("ledger_event.schema.json");
    let snap_v = validator("snapshot.schema.json");
    for path in bundled_scenarios() {
        let (engine, out) = simulate(Scenario::from_path(&path).unwrap(), None, None).unwrap();
        for line in out.ledger_jsonl.lines() {
            assert_valid(&event_v, &serde_json::from_str(line).unwrap());
        }
        assert_valid(&snap_v, &serde_json::from_str(&out.snapshot_json).unwrap());
        assert_valid(&snap_v, &engine.state_json()["snapshot"]);
    }
}

#[test]
fn every_wire_message_conforms() {
    let v = validator("wire.schema.json");
    let alloc = SpectrumAllocation {
        sn_id: "SN-2".into(),
        start_mhz: 3711,
        width_mhz: 60,
        priority: QosPriority::SENSING,
        pinned: false,
        epoch: 2,
    };
    let demand = WireDemand { sn_id: "SN-2".into(), priority: 2, min_bw_mhz: 20, pref_bw_mhz: 60, registered_at: 0 };
    let messages = vec![
        Message::Register { demand },
        Message::Accept { sn_id: "SN-2".into(), epoch: 2 },
        Message::Release { sn_id: "SN-2".into() },
        Message::Intent { sn_id: "SN-3".into(), eta_ms: 12_000 },
        Message::ReallocAck { sn_id: "SN-2".into(), epoch: 3 },
        Message::Telemetry(Telemetry {
            sn_id: "SN-1".into(),
            epoch: 1,
            start_mhz: Some(3700),
            width_mhz: Some(10),
            latency_ms: Some(2.4),
            phase: None,
            node: Some("cnc-cell".into()),
        }),
        Message::Offer { sn_id: "SN-2".into(), allocation: alloc.clone(), epoch: 2, deadline: 5_000 },
        Message::Reject { sn_id: "SN-9".into(), reason: RejectReason::InsufficientSpectrum },
        Message::Commit { sn_id: "SN-2".into(), allocation: alloc.clone(), epoch: 2, activate_at: 105 },
        Message::ReallocNotice { sn_id: "SN-2".into(), allocation: alloc, epoch: 3, activate_at: 10_101 },
    ];
    for (i, m) in messages.into_iter().enumerate() {
        let line = Envelope::new(i as u64, 1_000, m).to_line();
        assert_valid(&v, &serde_json::from_str(&line).unwrap());
    }
    assert!(!v.is_valid(&json!({"v": 2, "seq": 0, "time": 0, "kind": "RELEASE", "payload": {"sn_id": "a"}})));
    assert!(!v.is_valid(&json!({"v": 1, "seq": 0, "time": 0, "kind": "RELEASE", "payload": {}})));
}
