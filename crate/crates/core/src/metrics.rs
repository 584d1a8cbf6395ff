//! Segmentation metrics, per-case records and the derived report tables:
//! results, client utility, leave-one-out robustness and training cost.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Shape};

/// Dice similarity `2|A∩B| / (|A|+|B|)`; 1.0 when both masks are empty.
pub fn dsc(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    pred.shape().expect_eq(&truth.shape())?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.voxels().iter().zip(truth.voxels()) {
        inter += (p & t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground voxels with at least one face neighbour in the background
/// (4-connectivity in 2D, 6 in 3D). Outside the grid counts as background.
pub fn boundary(mask: &MaskVolume) -> Vec<bool> {
    let s = mask.shape();
    let mut out = vec![false; s.len()];
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < s.depth
            && (y as usize) < s.height
            && (x as usize) < s.width
            && mask.get(z as usize, y as usize, x as usize)
    };
    let mut neighbours = vec![(0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
    if !s.is_2d() {
        neighbours.extend([(-1, 0, 0), (1, 0, 0)]);
    }
    for (idx, o) in out.iter_mut().enumerate() {
        if mask.voxels()[idx] == 0 {
            continue;
        }
        let (z, y, x) = s.coords(idx);
        let (z, y, x) = (z as isize, y as isize, x as isize);
        *o = neighbours.iter().any(|&(dz, dy, dx)| !fg(z + dz, y + dy, x + dx));
    }
    out
}

const FAR: f64 = 1e30;

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `sites` (unit spacing). Separable lower-envelope transform; all
/// intermediate values are integers, so results are exact.
pub fn squared_edt(sites: &[bool], shape: Shape) -> Vec<f64> {
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let extents = [shape.depth, shape.height, shape.width];
    let strides = [shape.height * shape.width, shape.width, 1];
    for axis in 0..3 {
        let n = extents[axis];
        if n == 1 {
            continue;
        }
        let mut f = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..shape.len() {
            let (z, y, x) = shape.coords(start);
            if [z, y, x][axis] != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = d[start + i * strides[axis]];
            }
            edt_1d(&f, &mut out);
            for i in 0..n {
                d[start + i * strides[axis]] = out[i];
            }
        }
    }
    d
}

fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    // skip leading sites at infinity so envelopes never start on one
    let first = match f.iter().position(|&x| x < FAR) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = FAR);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never underflows
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Normalized surface distance at tolerance `tau` (voxels): the fraction of
/// boundary voxels of both masks lying within `tau` of the other mask's
/// boundary. 1.0 when both boundaries are empty.
pub fn nsd(pred: &MaskVolume, truth: &MaskVolume, tau: f64) -> Result<f64> {
    pred.shape().expect_eq(&truth.shape())?;
    if !(tau > 0.0) {
        return Err(Error::config(format!("NSD tolerance {tau} must be > 0")));
    }
    let shape = pred.shape();
    let bp = boundary(pred);
    let bt = boundary(truth);
    let np = bp.iter().filter(|&&b| b).count();
    let nt = bt.iter().filter(|&&b| b).count();
    if np + nt == 0 {
        return Ok(1.0);
    }
    if np == 0 || nt == 0 {
        return Ok(0.0);
    }
    let tau2 = tau * tau;
    let dt = squared_edt(&bt, shape);
    let dp = squared_edt(&bp, shape);
    let close_p = bp.iter().zip(&dt).filter(|(&b, &d)| b && d <= tau2).count();
    let close_t = bt.iter().zip(&dp).filter(|(&b, &d)| b && d <= tau2).count();
    Ok((close_p + close_t) as f64 / (np + nt) as f64)
}

/// One evaluated test case; the source of truth for every report table.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub seed: u64,
    pub fold: usize,
    pub strategy: String,
    /// Test-set id: the center the case came from.
    pub center: String,
    pub case_id: usize,
    pub dsc: f64,
    pub nsd: f64,
}

pub const CASE_HEADER: [&str; 7] = ["seed", "fold", "strategy", "center", "case_id", "dsc", "nsd"];

/// Metric values are written with 17 significant digits so re-aggregation
/// from the CSV reproduces the in-memory tables exactly.
pub fn write_case_records<W: Write>(records: &[CaseRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CASE_HEADER)?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.fold.to_string(),
            r.strategy.clone(),
            r.center.clone(),
            r.case_id.to_string(),
            format!("{:.17e}", r.dsc),
            format!("{:.17e}", r.nsd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_case_records(text: &[u8]) -> Result<Vec<CaseRecord>> {
    let mut r = csv::Reader::from_reader(text);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CASE_HEADER {
        return Err(Error::format(0, "unexpected case-record header"));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        let bad = |what: &str| Error::format(offset, format!("bad {what} field"));
        if row.len() != CASE_HEADER.len() {
            return Err(Error::format(offset, "wrong field count"));
        }
        out.push(CaseRecord {
            seed: row[0].parse().map_err(|_| bad("seed"))?,
            fold: row[1].parse().map_err(|_| bad("fold"))?,
            strategy: row[2].to_string(),
            center: row[3].to_string(),
            case_id: row[4].parse().map_err(|_| bad("case_id"))?,
            dsc: row[5].parse().map_err(|_| bad("dsc"))?,
            nsd: row[6].parse().map_err(|_| bad("nsd"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellStats {
    pub dsc: f64,
    pub nsd: f64,
    /// Standard deviation across folds of the per-fold mean DSC.
    pub dsc_fold_std: f64,
    pub cases: usize,
}

/// Mean DSC/NSD per (test set, strategy). A view computed from case records.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub test_sets: Vec<String>,
    pub strategies: Vec<String>,
    pub cells: BTreeMap<(String, String), CellStats>,
}

impl ResultsTable {
    /// Aggregates records in the given row and column order. Rows or columns
    /// without records are dropped.
    pub fn from_records(records: &[CaseRecord], test_sets: &[String], strategies: &[String]) -> Self {
        let mut groups: BTreeMap<(String, String), BTreeMap<(u64, usize), Vec<&CaseRecord>>> = BTreeMap::new();
        for r in records {
            groups
                .entry((r.center.clone(), r.strategy.clone()))
                .or_default()
                .entry((r.seed, r.fold))
                .or_default()
                .push(r);
        }
        let mut cells = BTreeMap::new();
        for (key, by_fold) in groups {
            let all: Vec<&&CaseRecord> = by_fold.values().flatten().collect();
            let n = all.len();
            let dsc = all.iter().map(|r| r.dsc).sum::<f64>() / n as f64;
            let nsd = all.iter().map(|r| r.nsd).sum::<f64>() / n as f64;
            let fold_means: Vec<f64> =
                by_fold.values().map(|v| v.iter().map(|r| r.dsc).sum::<f64>() / v.len() as f64).collect();
            let m = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
            let std = (fold_means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / fold_means.len() as f64).sqrt();
            cells.insert(key, CellStats { dsc, nsd, dsc_fold_std: std, cases: n });
        }
        let test_sets: Vec<String> =
            test_sets.iter().filter(|t| cells.keys().any(|(c, _)| c == *t)).cloned().collect();
        let strategies: Vec<String> =
            strategies.iter().filter(|s| cells.keys().any(|(_, k)| k == *s)).cloned().collect();
        Self { test_sets, strategies, cells }
    }

    pub fn get(&self, test_set: &str, strategy: &str) -> Option<&CellStats> {
        self.cells.get(&(test_set.to_string(), strategy.to_string()))
    }

    /// Unweighted mean over test sets of the per-set mean DSC.
    pub fn average_dsc(&self, strategy: &str) -> Option<f64> {
        let vals: Vec<f64> = self.test_sets.iter().filter_map(|t| self.get(t, strategy)).map(|c| c.dsc).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["test_set", "strategy", "dsc", "nsd", "dsc_fold_std", "cases"])?;
        for t in &self.test_sets {
            for s in &self.strategies {
                if let Some(c) = self.get(t, s) {
                    w.write_record([
                        t.clone(),
                        s.clone(),
                        format!("{:.6}", c.dsc),
                        format!("{:.6}", c.nsd),
                        format!("{:.6}", c.dsc_fold_std),
                        c.cases.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Test sets as rows, strategies as columns, mean DSC in each cell, plus
    /// an average row.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| test set |");
        for k in &self.strategies {
            s.push_str(&format!(" {k} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.strategies.len()));
        s.push('\n');
        for t in &self.test_sets {
            s.push_str(&format!("| {t} |"));
            for k in &self.strategies {
                match self.get(t, k) {
                    Some(c) => s.push_str(&format!(" {:.2} |", c.dsc)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s.push_str("| Average |");
        for k in &self.strategies {
            match self.average_dsc(k) {
                Some(v) => s.push_str(&format!(" {v:.2} |")),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
        s
    }
}

/// Mean DSC of `strategy` over every record whose center is in `centers`.
pub fn pooled_dsc(records: &[CaseRecord], strategy: &str, centers: &BTreeSet<String>) -> Option<f64> {
    let vals: Vec<f64> =
        records.iter().filter(|r| r.strategy == strategy && centers.contains(&r.center)).map(|r| r.dsc).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub client: String,
    pub method: String,
    pub delta_local: f64,
    pub delta_external: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtilityReport {
    pub rows: Vec<UtilityRow>,
}

impl UtilityReport {
    pub fn get(&self, client: &str, method: &str) -> Option<&UtilityRow> {
        self.rows.iter().find(|r| r.client == client && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["client", "method", "delta_local", "delta_external"])?;
        for r in &self.rows {
            w.write_record([
                r.client.clone(),
                r.method.clone(),
                format!("{:.6}", r.delta_local),
                format!("{:.6}", r.delta_external),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Client utility of collaborative `methods` relative to each client's local
/// model. `local_models` maps a client (and its test set id) to the strategy
/// name of its local model. The external set of a client is the union of all
/// test sets except its own.
pub fn utility_report(
    records: &[CaseRecord],
    local_models: &[(String, String)],
    methods: &[String],
) -> UtilityReport {
    let all_centers: BTreeSet<String> = records.iter().map(|r| r.center.clone()).collect();
    let mut rows = Vec::new();
    for (client, local) in local_models {
        let own: BTreeSet<String> = [client.clone()].into();
        let external: BTreeSet<String> = all_centers.iter().filter(|c| *c != client).cloned().collect();
        let (Some(l_loc), Some(l_ext)) = (pooled_dsc(records, local, &own), pooled_dsc(records, local, &external))
        else {
            warn!("client {client}: no local or external test cases, excluded from utility report");
            continue;
        };
        for m in methods {
            if let (Some(c_loc), Some(c_ext)) = (pooled_dsc(records, m, &own), pooled_dsc(records, m, &external)) {
                rows.push(UtilityRow {
                    client: client.clone(),
                    method: m.clone(),
                    delta_local: c_loc - l_loc,
                    delta_external: c_ext - l_ext,
                });
            }
        }
    }
    UtilityReport { rows }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    pub strategies: Vec<String>,
    pub test_sets: Vec<String>,
    /// `|DSC_with - DSC_without|` per (test set, strategy).
    pub deltas: BTreeMap<(String, String), f64>,
}

impl RobustnessTable {
    pub fn average(&self, strategy: &str) -> Option<f64> {
        let v: Vec<f64> =
            self.test_sets.iter().filter_map(|t| self.deltas.get(&(t.clone(), strategy.to_string()))).copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["test_set".to_string()];
        header.extend(self.strategies.iter().cloned());
        w.write_record(&header)?;
        for t in &self.test_sets {
            let mut row = vec![t.clone()];
            for s in &self.strategies {
                row.push(format!("{:.6}", self.deltas[&(t.clone(), s.clone())]));
            }
            w.write_record(&row)?;
        }
        let mut avg = vec!["Average".to_string()];
        for s in &self.strategies {
            avg.push(format!("{:.6}", self.average(s).unwrap_or(0.0)));
        }
        w.write_record(&avg)?;
        w.flush()?;
        Ok(())
    }
}

/// Absolute per-test-set DSC change between a full run and a leave-one-out
/// run, for each strategy present in both.
pub fn robustness_delta(with: &ResultsTable, without: &ResultsTable, strategies: &[String]) -> Result<RobustnessTable> {
    if with.test_sets != without.test_sets {
        return Err(Error::structural(format!(
            "test coverage differs: {:?} vs {:?}",
            with.test_sets, without.test_sets
        )));
    }
    let mut deltas = BTreeMap::new();
    for t in &with.test_sets {
        for s in strategies {
            match (with.get(t, s), without.get(t, s)) {
                (Some(a), Some(b)) => {
                    deltas.insert((t.clone(), s.clone()), (a.dsc - b.dsc).abs());
                }
                (None, None) => {}
                _ => return Err(Error::structural(format!("strategy {s} missing on {t} in one run"))),
            }
        }
    }
    let strategies = strategies.iter().filter(|s| deltas.keys().any(|(_, k)| k == *s)).cloned().collect();
    Ok(RobustnessTable { strategies, test_sets: with.test_sets.clone(), deltas })
}

/// How a strategy moves model bytes during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traffic {
    /// No exchange (pooled data).
    Centralized,
    /// One upload of the client's own model.
    Local,
    /// Every client uploads once.
    Consensus,
    /// Download + upload per client per round.
    Federated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEntry {
    pub strategy: String,
    pub traffic: Traffic,
    pub train_seconds: f64,
    pub infer_seconds_per_case: f64,
}

/// Training cost bookkeeping for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLedger {
    pub model_bytes: u64,
    pub clients: u64,
    pub rounds: u64,
    pub entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn new(model_bytes: u64, clients: u64, rounds: u64) -> Self {
        Self { model_bytes, clients, rounds, entries: Vec::new() }
    }

    /// `2 * M * m_s * R`.
    pub fn fl_bytes(&self) -> u64 {
        2 * self.clients * self.model_bytes * self.rounds
    }

    /// `M * m_s`.
    pub fn cbm_bytes(&self) -> u64 {
        self.clients * self.model_bytes
    }

    /// `M * m_s * (2R - 1)`.
    pub fn fl_cbm_difference(&self) -> u64 {
        self.clients * self.model_bytes * (2 * self.rounds - 1)
    }

    pub fn bytes_for(&self, traffic: Traffic) -> u64 {
        match traffic {
            Traffic::Centralized => 0,
            Traffic::Local => self.model_bytes,
            Traffic::Consensus => self.cbm_bytes(),
            Traffic::Federated => self.fl_bytes(),
        }
    }

    pub fn record(&mut self, strategy: impl Into<String>, traffic: Traffic, train_seconds: f64, infer_seconds_per_case: f64) {
        self.entries.push(CostEntry { strategy: strategy.into(), traffic, train_seconds, infer_seconds_per_case });
    }
}

pub const MEBIBYTE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub strategy: String,
    pub train_seconds: f64,
    pub infer_seconds_per_case: f64,
    pub bandwidth_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub model_bytes: u64,
    pub clients: u64,
    pub rounds: u64,
    pub fl_bytes: u64,
    pub cbm_bytes: u64,
    pub difference_bytes: u64,
}

impl CostReport {
    pub fn difference_gib(&self) -> f64 {
        self.difference_bytes as f64 / (1u64 << 30) as f64
    }

    /// Columns: strategy, train_seconds, infer_seconds_per_case,
    /// bandwidth_bytes, bandwidth_mb. A trailing `FL-CBM difference` row
    /// carries the bandwidth gap.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["strategy", "train_seconds", "infer_seconds_per_case", "bandwidth_bytes", "bandwidth_mb"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                format!("{:.3}", r.train_seconds),
                format!("{:.6}", r.infer_seconds_per_case),
                r.bandwidth_bytes.to_string(),
                format!("{:.6}", r.bandwidth_bytes as f64 / MEBIBYTE as f64),
            ])?;
        }
        w.write_record([
            "FL-CBM difference".to_string(),
            String::new(),
            String::new(),
            self.difference_bytes.to_string(),
            format!("{:.6}", self.difference_bytes as f64 / MEBIBYTE as f64),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub fn cost_report(ledger: &CostLedger) -> CostReport {
    let rows = ledger
        .entries
        .iter()
        .map(|e| CostRow {
            strategy: e.strategy.clone(),
            train_seconds: e.train_seconds,
            infer_seconds_per_case: e.infer_seconds_per_case,
            bandwidth_bytes: ledger.bytes_for(e.traffic),
        })
        .collect();
    CostReport {
        rows,
        model_bytes: ledger.model_bytes,
        clients: ledger.clients,
        rounds: ledger.rounds,
        fl_bytes: ledger.fl_bytes(),
        cbm_bytes: ledger.cbm_bytes(),
        difference_bytes: ledger.fl_cbm_difference(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> MaskVolume {
        MaskVolume::new(Shape::plane(h, w), bits.to_vec()).unwrap()
    }

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> MaskVolume {
        MaskVolume::from_fn(Shape::plane(h, w), |_, y, x| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
    }

    /// Exhaustive nearest-boundary search.
    fn brute_nsd(a: &MaskVolume, b: &MaskVolume, tau: f64) -> f64 {
        let s = a.shape();
        let ba: Vec<usize> = boundary(a).iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
        let bb: Vec<usize> = boundary(b).iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
        if ba.is_empty() && bb.is_empty() {
            return 1.0;
        }
        let d2 = |i: usize, j: usize| {
            let (z1, y1, x1) = s.coords(i);
            let (z2, y2, x2) = s.coords(j);
            let f = |p: usize, q: usize| (p as f64 - q as f64).powi(2);
            f(z1, z2) + f(y1, y2) + f(x1, x2)
        };
        let close = |from: &[usize], to: &[usize]| {
            from.iter().filter(|&&i| to.iter().map(|&j| d2(i, j)).fold(f64::INFINITY, f64::min) <= tau * tau).count()
        };
        (close(&ba, &bb) + close(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
    }

    #[test]
    fn dsc_examples() {
        let a = mask(2, 2, &[1, 1, 0, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(2, 2, &[0, 0, 1, 1])).unwrap(), 0.0);
        let truth = mask(2, 2, &[1, 1, 1, 1]);
        assert!((dsc(&a, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = mask(2, 2, &[0; 4]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(dsc(&a, &mask(1, 4, &[1, 1, 0, 0])).is_err());
    }

    #[test]
    fn boundary_of_square() {
        let m = square(6, 6, 1, 1, 4);
        let b = boundary(&m);
        assert_eq!(b.iter().filter(|&&x| x).count(), 12);
        assert!(!b[m.shape().index(0, 2, 2)]);
    }

    #[test]
    fn edt_matches_brute_force_3d() {
        let shape = Shape::new(4, 5, 6).unwrap();
        let mut rng = crate::numcore::Rng::new(3, 0);
        for _ in 0..20 {
            let sites: Vec<bool> = (0..shape.len()).map(|_| rng.uniform() < 0.08).collect();
            let d = squared_edt(&sites, shape);
            for i in 0..shape.len() {
                let (z, y, x) = shape.coords(i);
                let mut best = FAR;
                for (j, &s) in sites.iter().enumerate() {
                    if s {
                        let (a, b, c) = shape.coords(j);
                        let dd = (z as f64 - a as f64).powi(2) + (y as f64 - b as f64).powi(2) + (x as f64 - c as f64).powi(2);
                        best = best.min(dd);
                    }
                }
                assert_eq!(d[i], best);
            }
        }
    }

    #[test]
    fn nsd_shift_examples() {
        let truth = square(8, 8, 2, 2, 4);
        assert_eq!(nsd(&truth, &truth, 1.0).unwrap(), 1.0);
        let shifted1 = square(8, 8, 2, 3, 4);
        assert_eq!(nsd(&shifted1, &truth, 1.0).unwrap(), 1.0);
        assert_eq!(brute_nsd(&shifted1, &truth, 1.0), 1.0);
        let shifted3 = square(8, 8, 2, 5, 3);
        let v = nsd(&shifted3, &truth, 1.0).unwrap();
        assert!(v < 1.0);
        assert_eq!(v, brute_nsd(&shifted3, &truth, 1.0));
        let empty = MaskVolume::zeros(Shape::plane(8, 8));
        assert_eq!(nsd(&empty, &empty, 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&empty, &truth, 1.0).unwrap(), 0.0);
        assert!(nsd(&truth, &truth, 0.0).is_err());
    }

    #[test]
    fn cost_report_reference_scale() {
        let mut ledger = CostLedger::new(30 * MEBIBYTE, 4, 40);
        ledger.record("FedAvg", Traffic::Federated, 0.0, 0.0);
        ledger.record("MV", Traffic::Consensus, 0.0, 0.0);
        ledger.record("Local C01", Traffic::Local, 0.0, 0.0);
        ledger.record("Centralized", Traffic::Centralized, 0.0, 0.0);
        let r = cost_report(&ledger);
        assert_eq!(r.rows[0].bandwidth_bytes, 9600 * MEBIBYTE);
        assert_eq!(r.rows[1].bandwidth_bytes, 120 * MEBIBYTE);
        assert_eq!(r.rows[2].bandwidth_bytes, 30 * MEBIBYTE);
        assert_eq!(r.rows[3].bandwidth_bytes, 0);
        assert_eq!(r.difference_bytes, 9480 * MEBIBYTE);
        assert!((r.difference_gib() - 9.25).abs() < 0.01);
        let one = cost_report(&CostLedger::new(1000, 1, 1));
        assert_eq!(one.fl_bytes, 2000);
        assert_eq!(one.difference_bytes, 1000);
    }

    fn rec(strategy: &str, center: &str, fold: usize, dsc: f64) -> CaseRecord {
        CaseRecord { seed: 0, fold, strategy: strategy.into(), center: center.into(), case_id: 0, dsc, nsd: dsc }
    }

    #[test]
    fn utility_examples() {
        let records = vec![
            rec("Local A", "A", 0, 0.8),
            rec("Local A", "B", 0, 0.5),
            rec("Fused", "A", 0, 1.0),
            rec("Fused", "B", 0, 0.9),
            rec("Same", "A", 0, 0.8),
            rec("Same", "B", 0, 0.5),
        ];
        let u = utility_report(&records, &[("A".into(), "Local A".into())], &["Fused".into(), "Same".into()]);
        let f = u.get("A", "Fused").unwrap();
        assert!((f.delta_local - 0.2).abs() < 1e-12);
        assert!((f.delta_external - 0.4).abs() < 1e-12);
        let s = u.get("A", "Same").unwrap();
        assert_eq!((s.delta_local, s.delta_external), (0.0, 0.0));
        // client without test cases is skipped
        let u = utility_report(&records, &[("Z".into(), "Local Z".into())], &["Fused".into()]);
        assert!(u.rows.is_empty());
    }

    #[test]
    fn robustness_examples() {
        let sets = vec!["A".to_string(), "B".to_string()];
        let strats = vec!["X".to_string()];
        let t1 = ResultsTable::from_records(&[rec("X", "A", 0, 0.8), rec("X", "B", 0, 0.6)], &sets, &strats);
        let t2 = ResultsTable::from_records(&[rec("X", "A", 0, 0.7), rec("X", "B", 0, 0.7)], &sets, &strats);
        let same = robustness_delta(&t1, &t1, &strats).unwrap();
        assert_eq!(same.average("X"), Some(0.0));
        let d = robustness_delta(&t1, &t2, &strats).unwrap();
        assert!((d.average("X").unwrap() - 0.1).abs() < 1e-12);
        let t3 = ResultsTable::from_records(&[rec("X", "A", 0, 0.7)], &sets, &strats);
        assert!(robustness_delta(&t1, &t3, &strats).is_err());
    }

    #[test]
    fn results_table_fold_std_and_markdown() {
        let recs = vec![rec("X", "A", 0, 0.8), rec("X", "A", 1, 0.6), rec("Y", "A", 0, 0.5)];
        let t = ResultsTable::from_records(&recs, &["A".into(), "B".into()], &["X".into(), "Y".into(), "Z".into()]);
        assert_eq!(t.test_sets, vec!["A"]);
        assert_eq!(t.strategies, vec!["X", "Y"]);
        let c = t.get("A", "X").unwrap();
        assert!((c.dsc - 0.7).abs() < 1e-12 && (c.dsc_fold_std - 0.1).abs() < 1e-12);
        let md = t.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| A |")).count(), 1);
    }

    #[test]
    fn case_records_round_trip() {
        let recs = vec![rec("X", "A", 0, 0.123456789012345678), rec("Local C01", "B", 3, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_case_records(&recs, &mut buf).unwrap();
        assert_eq!(read_case_records(&buf).unwrap(), recs);
        assert!(read_case_records(b"a,b\n1,2\n").is_err());
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = (MaskVolume, MaskVolume)> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..=1, h * w),
                proptest::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(a, b)| (mask(h, w, &a), mask(h, w, &b)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn nsd_matches_brute_force((a, b) in arb_mask(10), tau in prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 3.0])) {
            let fast = nsd(&a, &b, tau).unwrap();
            prop_assert_eq!(fast, brute_nsd(&a, &b, tau));
            prop_assert!((0.0..=1.0).contains(&fast));
            prop_assert_eq!(fast, nsd(&b, &a, tau).unwrap());
        }

        #[test]
        fn dsc_symmetric_and_bounded((a, b) in arb_mask(10)) {
            let d = dsc(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dsc(&b, &a).unwrap());
        }
    }
}
