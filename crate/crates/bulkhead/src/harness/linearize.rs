//! Wing & Gong linearizability search over key-value store histories.
//!
//! The search linearizes each operation as early as possible, backtracking
//! when stuck and memoizing (linearized-set, state) pairs it has already
//! ruled out. Intended for small histories (a handful of clients, tens of
//! operations each); closed-loop clients keep the concurrency window narrow,
//! which is what the cache exploits.

use std::collections::{BTreeMap, HashSet};

use crate::app::{KvsOp, KvsResult};
use crate::config::ClientId;

#[derive(Debug, Clone)]
pub struct KvsCall {
    pub client: ClientId,
    pub invoke: u64,
    pub response: u64,
    pub op: KvsOp,
    pub result: KvsResult,
}

#[derive(Debug, Clone)]
pub struct Counterexample {
    /// Operations that could not be linearized, as (client, invoke tick).
    pub stuck: Vec<(ClientId, u64)>,
}

type State = BTreeMap<Vec<u8>, Vec<u8>>;

/// Apply an operation with its observed result to a model state; returns
/// whether the observation is legal.
fn step(state: &State, op: &KvsOp, result: &KvsResult) -> Option<State> {
    match (op, result) {
        // A tampered/corrupted op executed as a no-op: always legal, state
        // unchanged.
        (_, KvsResult::Noop) => Some(state.clone()),
        (KvsOp::Put { key, value }, KvsResult::Ok) => {
            let mut s = state.clone();
            s.insert(key.clone(), value.clone());
            Some(s)
        }
        (KvsOp::Get { key }, KvsResult::Value(v)) => {
            (state.get(key) == Some(v)).then(|| state.clone())
        }
        (KvsOp::Get { key }, KvsResult::NotFound) => {
            (!state.contains_key(key)).then(|| state.clone())
        }
        (KvsOp::Delete { key }, KvsResult::Value(v)) => {
            if state.get(key) == Some(v) {
                let mut s = state.clone();
                s.remove(key);
                Some(s)
            } else {
                None
            }
        }
        (KvsOp::Delete { key }, KvsResult::NotFound) => {
            (!state.contains_key(key)).then(|| state.clone())
        }
        _ => None,
    }
}

/// Entries of the doubly-linked event list: call/return pairs plus a head
/// sentinel at index 0.
struct Entries {
    next: Vec<usize>,
    prev: Vec<usize>,
    /// For a call entry, the op index; return entries mirror their call.
    op: Vec<usize>,
    is_call: Vec<bool>,
    /// For a call entry, the index of its return entry.
    ret_of: Vec<usize>,
}

impl Entries {
    fn build(history: &[KvsCall]) -> Entries {
        // Calls sort before returns at equal ticks, widening concurrency
        // windows rather than inventing artificial orderings.
        let mut events: Vec<(u64, u8, usize, bool)> = Vec::new();
        for (i, call) in history.iter().enumerate() {
            events.push((call.invoke, 0, i, true));
            events.push((call.response, 1, i, false));
        }
        events.sort_by_key(|(t, phase, i, _)| (*t, *phase, *i));

        let count = events.len() + 1; // sentinel at 0
        let mut e = Entries {
            next: vec![0; count],
            prev: vec![0; count],
            op: vec![usize::MAX; count],
            is_call: vec![false; count],
            ret_of: vec![usize::MAX; count],
        };
        let mut call_index: Vec<usize> = vec![usize::MAX; history.len()];
        for (pos, (_, _, i, is_call)) in events.iter().enumerate() {
            let node = pos + 1;
            e.prev[node] = node - 1;
            e.next[node - 1] = node;
            e.op[node] = *i;
            e.is_call[node] = *is_call;
            if *is_call {
                call_index[*i] = node;
            } else {
                e.ret_of[call_index[*i]] = node;
            }
        }
        e.next[count - 1] = 0;
        e.prev[0] = count - 1;
        e
    }

    fn unlink(&mut self, node: usize) {
        let (p, n) = (self.prev[node], self.next[node]);
        self.next[p] = n;
        self.prev[n] = p;
    }

    fn relink(&mut self, node: usize) {
        let (p, n) = (self.prev[node], self.next[node]);
        self.next[p] = node;
        self.prev[n] = node;
    }

    /// Remove a call and its return from the list.
    fn lift(&mut self, call: usize) {
        self.unlink(self.ret_of[call]);
        self.unlink(call);
    }

    /// Reinsert in reverse order of removal.
    fn unlift(&mut self, call: usize) {
        self.relink(call);
        self.relink(self.ret_of[call]);
    }

    fn first(&self) -> usize {
        self.next[0]
    }

    fn is_empty(&self) -> bool {
        self.next[0] == 0
    }
}

/// Check a complete history. All calls must have responses.
pub fn check_kvs_linearizable(history: &[KvsCall]) -> Result<(), Counterexample> {
    if history.is_empty() {
        return Ok(());
    }
    let mut entries = Entries::build(history);
    let mut state: State = State::new();
    let mut linearized = vec![false; history.len()];
    let mut cache: HashSet<(Vec<bool>, State)> = HashSet::new();
    // (call node, state before it linearized)
    let mut stack: Vec<(usize, State)> = Vec::new();
    let mut curr = entries.first();

    loop {
        if entries.is_empty() {
            return Ok(());
        }
        if curr == 0 {
            // Walked off the end: backtrack.
            match stack.pop() {
                None => {
                    let stuck = history
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !linearized[*i])
                        .map(|(_, c)| (c.client, c.invoke))
                        .collect();
                    return Err(Counterexample { stuck });
                }
                Some((call, old_state)) => {
                    state = old_state;
                    linearized[entries.op[call]] = false;
                    entries.unlift(call);
                    curr = entries.next[call];
                    continue;
                }
            }
        }
        if entries.is_call[curr] {
            let i = entries.op[curr];
            let call = &history[i];
            if let Some(new_state) = step(&state, &call.op, &call.result) {
                let mut tmp = linearized.clone();
                tmp[i] = true;
                if cache.insert((tmp, new_state.clone())) {
                    linearized[i] = true;
                    stack.push((curr, std::mem::replace(&mut state, new_state)));
                    entries.lift(curr);
                    curr = entries.first();
                    continue;
                }
            }
            curr = entries.next[curr];
        } else {
            // Hit a return whose call was not linearized: the op that
            // returned here must linearize before this point. Backtrack.
            match stack.pop() {
                None => {
                    let stuck = history
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !linearized[*i])
                        .map(|(_, c)| (c.client, c.invoke))
                        .collect();
                    return Err(Counterexample { stuck });
                }
                Some((call, old_state)) => {
                    state = old_state;
                    linearized[entries.op[call]] = false;
                    entries.unlift(call);
                    curr = entries.next[call];
                }
            }
        }
    }
}
