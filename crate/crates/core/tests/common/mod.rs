//! Independent oracles shared by test targets.

#![allow(dead_code)]

/// Every legal path of the padded grid, as the list of its real-cell costs
/// summed. Moves: right or diagonal anywhere, down only in the padding
/// columns `0` and `ts + 1`.
pub fn path_costs(cost: &[f64], tq: usize, ts: usize) -> Vec<f64> {
    fn walk(cost: &[f64], tq: usize, ts: usize, i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
        let here = if j == 0 || j == ts + 1 { 0.0 } else { cost[i * ts + j - 1] };
        let acc = acc + here;
        if i == tq - 1 && j == ts + 1 {
            out.push(acc);
            return;
        }
        if j < ts + 1 {
            walk(cost, tq, ts, i, j + 1, acc, out);
            if i + 1 < tq {
                walk(cost, tq, ts, i + 1, j + 1, acc, out);
            }
        }
        if (j == 0 || j == ts + 1) && i + 1 < tq {
            walk(cost, tq, ts, i + 1, j, acc, out);
        }
    }
    let mut out = Vec::new();
    walk(cost, tq, ts, 0, 0, 0.0, &mut out);
    out
}

pub fn enumerate_soft(cost: &[f64], tq: usize, ts: usize, gamma: f64) -> f64 {
    let costs = path_costs(cost, tq, ts);
    let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = costs.iter().map(|c| (-(c - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}
