//! Benchmark sweeps over the simulated transport: throughput, latency, and
//! the ecall/ocall counters behind the batching-amortization numbers. Each
//! point repeats five times and reports the mean.

use crate::app::AppKind;
use crate::broker::BrokerCounters;
use crate::config::CompartmentKind;
use crate::harness::{run_with_options, Scenario, Workload};

pub const BENCH_REPEATS: u64 = 5;

#[derive(Debug, Clone)]
pub struct BenchPoint {
    pub clients: u32,
    pub outstanding: u32,
    pub batch_max: usize,
    pub app: AppKind,
    pub total_ops: u32,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub clients: u32,
    pub outstanding: u32,
    pub batch_max: usize,
    pub app: &'static str,
    pub completed: f64,
    pub ticks: f64,
    /// Completed operations per 1000 virtual ticks.
    pub throughput: f64,
    pub mean_latency: f64,
    pub p99_latency: f64,
    pub ecalls_prep: f64,
    pub ecalls_conf: f64,
    pub ecalls_exec: f64,
    pub ecalls_per_request: f64,
    /// Output drains from Execution enclaves (response collection).
    pub exec_output_ocalls: f64,
    /// Persisted ledger blocks.
    pub persist_blocks: f64,
}

impl BenchRow {
    /// Persistence/IO effects out of the Execution enclave: response drains
    /// plus block writes.
    pub fn exec_io_effects(&self) -> f64 {
        self.exec_output_ocalls + self.persist_blocks
    }
}

fn scenario_for(point: &BenchPoint, seed: u64) -> Scenario {
    let per_client = point.total_ops / point.clients.max(1);
    let mut workload = Workload::kvs(point.clients, per_client);
    workload.outstanding = point.outstanding;
    let mut s = Scenario::new("bench", workload);
    s.seed = seed;
    s.app = point.app;
    s.cluster.batch_max = point.batch_max;
    s.tick_budget = 50_000_000;
    s
}

/// Run one sweep point: `BENCH_REPEATS` seeded runs, averaged.
pub fn run_point(point: &BenchPoint, base_seed: u64) -> BenchRow {
    let mut row = BenchRow {
        clients: point.clients,
        outstanding: point.outstanding,
        batch_max: point.batch_max,
        app: match point.app {
            AppKind::Kvs => "kvs",
            AppKind::Ledger => "ledger",
        },
        completed: 0.0,
        ticks: 0.0,
        throughput: 0.0,
        mean_latency: 0.0,
        p99_latency: 0.0,
        ecalls_prep: 0.0,
        ecalls_conf: 0.0,
        ecalls_exec: 0.0,
        ecalls_per_request: 0.0,
        exec_output_ocalls: 0.0,
        persist_blocks: 0.0,
    };
    for rep in 0..BENCH_REPEATS {
        let scenario = scenario_for(point, base_seed + rep);
        let result = run_with_options(&scenario, false);
        let completed = result.stats.completed.max(1) as f64;
        row.completed += completed;
        row.ticks += result.stats.ticks as f64;
        row.throughput += completed / (result.stats.ticks.max(1) as f64) * 1000.0;
        let mut lat: Vec<u64> = result.stats.latencies.clone();
        lat.sort_unstable();
        if !lat.is_empty() {
            row.mean_latency += lat.iter().sum::<u64>() as f64 / lat.len() as f64;
            row.p99_latency += lat[(lat.len() * 99 / 100).min(lat.len() - 1)] as f64;
        }
        let sums = sum_counters(&result.counters);
        row.ecalls_prep += sums.0 as f64;
        row.ecalls_conf += sums.1 as f64;
        row.ecalls_exec += sums.2 as f64;
        row.ecalls_per_request += (sums.0 + sums.1 + sums.2) as f64 / completed;
        row.exec_output_ocalls += sums.3 as f64;
        row.persist_blocks += sums.4 as f64;
    }
    let n = BENCH_REPEATS as f64;
    for v in [
        &mut row.completed,
        &mut row.ticks,
        &mut row.throughput,
        &mut row.mean_latency,
        &mut row.p99_latency,
        &mut row.ecalls_prep,
        &mut row.ecalls_conf,
        &mut row.ecalls_exec,
        &mut row.ecalls_per_request,
        &mut row.exec_output_ocalls,
        &mut row.persist_blocks,
    ] {
        **v /= n;
    }
    row
}

fn sum_counters(counters: &[BrokerCounters]) -> (u64, u64, u64, u64, u64) {
    let mut prep = 0;
    let mut conf = 0;
    let mut exec = 0;
    let mut out = 0;
    let mut blocks = 0;
    for c in counters {
        prep += c.ecalls.get(&CompartmentKind::Preparation).copied().unwrap_or(0);
        conf += c.ecalls.get(&CompartmentKind::Confirmation).copied().unwrap_or(0);
        exec += c.ecalls.get(&CompartmentKind::Execution).copied().unwrap_or(0);
        out += c.exec_output_ocalls;
        blocks += c.persist_blocks;
    }
    (prep, conf, exec, out, blocks)
}

pub const CSV_HEADER: &str = "clients,outstanding,batch,app,completed,ticks,throughput_per_ktick,mean_latency,p99_latency,ecalls_prep,ecalls_conf,ecalls_exec,ecalls_per_request,exec_output_ocalls,persist_blocks";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.1},{:.1},{:.4},{:.1},{:.1},{:.1},{:.1},{:.1},{:.3},{:.1},{:.1}\n",
            r.clients,
            r.outstanding,
            r.batch_max,
            r.app,
            r.completed,
            r.ticks,
            r.throughput,
            r.mean_latency,
            r.p99_latency,
            r.ecalls_prep,
            r.ecalls_conf,
            r.ecalls_exec,
            r.ecalls_per_request,
            r.exec_output_ocalls,
            r.persist_blocks,
        ));
    }
    out
}

/// A static SVG bar chart of ecalls-per-request across the sweep: the
/// post-run plot artifact.
pub fn to_svg(rows: &[BenchRow]) -> String {
    let width = 760.0;
    let height = 340.0;
    let margin = 60.0;
    let max_v = rows
        .iter()
        .map(|r| r.ecalls_per_request)
        .fold(1.0f64, f64::max);
    let bar_w = (width - 2.0 * margin) / rows.len().max(1) as f64 * 0.7;
    let step = (width - 2.0 * margin) / rows.len().max(1) as f64;

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    svg.push_str(&format!(
        r#"<text x="{}" y="20" font-size="14">ecalls per executed request</text>"#,
        margin
    ));
    svg.push_str(&format!(
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        m = margin,
        b = height - margin,
        r = width - margin
    ));
    for (i, row) in rows.iter().enumerate() {
        let h = (row.ecalls_per_request / max_v) * (height - 2.0 * margin);
        let x = margin + i as f64 * step + (step - bar_w) / 2.0;
        let y = height - margin - h;
        svg.push_str(&format!(
            r#"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{h:.1}" fill="#4477aa"/>"#
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
            x + bar_w / 2.0,
            y - 4.0,
            row.ecalls_per_request
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} b{}</text>"#,
            x + bar_w / 2.0,
            height - margin + 14.0,
            row.app,
            row.batch_max
        ));
    }
    svg.push_str("</svg>");
    svg
}
