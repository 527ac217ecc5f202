//! Test-only helpers: an independent reference replay of the barrier rules
//! over a Timekeeper event log.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub mod device_model;

use timewarp::barrier::LogRecord;
use timewarp::wire::Role;

#[derive(Debug, Default)]
pub struct Replay {
    /// (offset_ns, seq) of every broadcast the reference decided to issue.
    pub expected: Vec<(i64, u64)>,
    /// (offset_ns, seq) of every broadcast record found in the log.
    pub logged: Vec<(i64, u64)>,
    pub violations: Vec<String>,
    pub rounds: usize,
}

#[derive(Default)]
struct Actor {
    parked: bool,
    group: Option<String>,
}

/// Replays `log` through a straightforward single-threaded model of the
/// barrier and checks each logged resolution against it.
pub fn replay(log: &[LogRecord], cooldown_ns: i64) -> Replay {
    let mut out = Replay::default();
    let mut actors: HashMap<String, Actor> = HashMap::new();
    let mut pending: BTreeMap<String, i64> = BTreeMap::new();
    let mut groups: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut sealed = false;
    let mut offset: i64 = 0;
    let mut seq: u64 = 0;
    let mut last_broadcast: Option<i64> = None;
    let mut deferred = false;
    let mut owe_resolution: Option<usize> = None;

    let complete = |actors: &HashMap<String, Actor>, pending: &BTreeMap<String, i64>| {
        let effective: BTreeSet<&String> = actors
            .iter()
            .filter(|(_, a)| !a.parked && a.group.is_none())
            .map(|(id, _)| id)
            .collect();
        !effective.is_empty() && effective == pending.keys().collect::<BTreeSet<_>>()
    };

    for (i, record) in log.iter().enumerate() {
        let is_resolution = matches!(record, LogRecord::Resolve { .. } | LogRecord::Deferred { .. });
        if let Some(at) = owe_resolution.take() {
            if !is_resolution {
                out.violations.push(format!("record {at}: complete round not resolved"));
            }
        }
        match record {
            LogRecord::Register { client_id, role, .. } => {
                if *role == Role::Actor {
                    actors.insert(client_id.clone(), Actor::default());
                }
            }
            LogRecord::Seal { .. } => sealed = true,
            LogRecord::JumpRequest { client_id, target, .. } => {
                if let Some(a) = actors.get_mut(client_id) {
                    a.parked = false;
                    a.group = None;
                }
                pending.insert(client_id.clone(), target.as_nanos());
            }
            LogRecord::Park { client_id, .. } => {
                if let Some(a) = actors.get_mut(client_id) {
                    a.parked = true;
                    a.group = None;
                }
                pending.remove(client_id);
            }
            LogRecord::CollectiveEnter { client_id, group_id, .. } => {
                if let Some(a) = actors.get_mut(client_id) {
                    a.parked = false;
                    a.group = Some(group_id.clone());
                }
                pending.remove(client_id);
                groups.entry(group_id.clone()).or_default().insert(client_id.clone());
            }
            LogRecord::CollectiveRelease { group_id, members, .. } => {
                let arrived = groups.remove(group_id).unwrap_or_default();
                let members: BTreeSet<String> = members.iter().cloned().collect();
                if arrived != members {
                    out.violations.push(format!("record {i}: release of {group_id} names {members:?}, arrived {arrived:?}"));
                }
                for m in &members {
                    if let Some(a) = actors.get_mut(m) {
                        a.group = None;
                    }
                }
            }
            LogRecord::Deregister { client_id, .. } => {
                if let Some(a) = actors.remove(client_id) {
                    if let Some(g) = a.group {
                        if let Some(set) = groups.get_mut(&g) {
                            set.remove(client_id);
                        }
                    }
                }
                pending.remove(client_id);
            }
            LogRecord::Deferred { wall, until } => {
                if !complete(&actors, &pending) {
                    out.violations.push(format!("record {i}: deferred an incomplete round"));
                }
                let ready = last_broadcast.map_or(i64::MIN, |b| b + cooldown_ns);
                if until.as_nanos() != ready || wall.as_nanos() >= ready {
                    out.violations.push(format!("record {i}: deferral to {until} but cooldown ends at {ready}"));
                }
                deferred = true;
            }
            LogRecord::Resolve {
                wall,
                t_min,
                pending: logged_pending,
                broadcast,
                offset: logged_offset,
                seq: logged_seq,
            } => {
                out.rounds += 1;
                deferred = false;
                let wall = wall.as_nanos();
                if !sealed || !complete(&actors, &pending) {
                    out.violations.push(format!("record {i}: resolution of an incomplete round"));
                }
                let logged: BTreeMap<String, i64> =
                    logged_pending.iter().map(|(k, v)| (k.clone(), v.as_nanos())).collect();
                if logged != pending {
                    out.violations.push(format!("record {i}: pending {logged:?} but reference has {pending:?}"));
                }
                let Some(&min) = pending.values().min() else {
                    continue;
                };
                let max = *pending.values().max().unwrap();
                if min != t_min.as_nanos() {
                    out.violations.push(format!("record {i}: t_min {t_min} but reference has {min}"));
                }
                let wants_broadcast = wall < max;
                if wants_broadcast {
                    if let Some(last) = last_broadcast {
                        if wall - last < cooldown_ns {
                            out.violations.push(format!("record {i}: broadcast {}ns after previous", wall - last));
                        }
                    }
                }
                let previous = offset;
                offset = offset.max(min - wall);
                if wants_broadcast {
                    seq += 1;
                    last_broadcast = Some(wall);
                    out.expected.push((offset, seq));
                }
                if *broadcast != wants_broadcast || logged_offset.as_nanos() != offset || *logged_seq != seq {
                    out.violations.push(format!(
                        "record {i}: logged (broadcast {broadcast}, offset {logged_offset}, seq {logged_seq}) \
                         reference (broadcast {wants_broadcast}, offset {offset}, seq {seq})"
                    ));
                }
                // minimum advancement
                if offset > previous {
                    if wall + offset != min {
                        out.violations.push(format!("record {i}: advanced to {} not t_min {min}", wall + offset));
                    }
                    if pending.values().any(|&t| wall + offset > t) {
                        out.violations.push(format!("record {i}: advanced past a pending target"));
                    }
                }
                pending.clear();
            }
            LogRecord::Broadcast { offset, seq, .. } => out.logged.push((offset.as_nanos(), *seq)),
            LogRecord::Rejected { .. } => {}
        }
        if !is_resolution && !deferred && sealed && complete(&actors, &pending) {
            owe_resolution = Some(i);
        }
    }
    out
}

/// Largest timestamp difference between two event schedules, matched per
/// (request, kind, occurrence). `None` if the schedules differ in shape.
pub fn schedule_deviation(
    a: &[timewarp::engine::TokenEvent],
    b: &[timewarp::engine::TokenEvent],
) -> Option<i64> {
    use timewarp::engine::TokenKind;
    let key = |events: &[timewarp::engine::TokenEvent]| {
        let mut seen: HashMap<(u64, TokenKind), u32> = HashMap::new();
        events
            .iter()
            .map(|e| {
                let n = seen.entry((e.request_id, e.kind)).or_default();
                *n += 1;
                ((e.request_id, e.kind, *n), e.virtual_ts_ns.as_nanos())
            })
            .collect::<BTreeMap<_, _>>()
    };
    let (ka, kb) = (key(a), key(b));
    if ka.len() != kb.len() || ka.keys().ne(kb.keys()) {
        return None;
    }
    Some(ka.values().zip(kb.values()).map(|(x, y)| (x - y).abs()).max().unwrap_or(0))
}
