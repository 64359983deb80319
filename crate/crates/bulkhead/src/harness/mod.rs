//! Scenario runner, byzantine fault injection, and the safety, liveness and
//! confidentiality oracles.

pub mod checkers;
pub mod faults;
pub mod linearize;
pub mod runner;
pub mod scenario;

pub use runner::{generate_ops, run, run_with_options, RunResult, RunStats};
pub use scenario::{
    AttestReject, FaultBehavior, FaultSpec, FaultTarget, Scenario, Workload, CANARY, CLIENT_BASE,
};

use rand::Rng;

use crate::app::KvsOp;

/// One operation of the standard KVS workload: a PUT with a canary-bearing
/// value, or a GET over the same small key space.
pub fn kvs_workload_op(
    w: &Workload,
    rng: &mut impl Rng,
    client_index: u32,
    op_no: u32,
) -> Vec<u8> {
    let key = format!("k{}", rng.gen_range(0..w.keyspace)).into_bytes();
    let is_put = op_no == 0 || rng.gen_bool(w.put_ratio);
    let op = if is_put {
        let mut value = CANARY.to_vec();
        value.push(client_index as u8);
        value.extend_from_slice(&op_no.to_be_bytes());
        if value.len() < w.payload_size {
            value.resize(w.payload_size, 0x5A);
        }
        KvsOp::Put { key, value }
    } else {
        KvsOp::Get { key }
    };
    op.encode()
}
