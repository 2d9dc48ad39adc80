//! Baseline versus ACPO comparison and the per-phase overhead tables.

use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::cost::{ratio_f64, CostModel};
use crate::mlif::MlInterface;
use crate::passes::{Overhead, PipelineConfig};
use crate::suite::{Benchmark, SuiteError};
use crate::trainer::geomean;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramReport {
    pub program: String,
    pub default_cost: f64,
    pub acpo_cost: f64,
    pub default_size: usize,
    pub acpo_size: usize,
    #[serde(skip)]
    pub overhead: Overhead,
    /// Model-driven regions only, in decision order.
    #[serde(skip)]
    pub regions: Vec<(String, Overhead)>,
}

impl ProgramReport {
    pub fn speedup(&self) -> f64 {
        self.default_cost / self.acpo_cost
    }

    pub fn bloat(&self) -> f64 {
        self.acpo_size as f64 / self.default_size as f64
    }
}

/// Build each program with the default pipeline and with `acpo`.
pub fn compare(
    suite: &[Benchmark],
    acpo: &PipelineConfig,
    mlif: Option<&Arc<MlInterface>>,
    cm: &CostModel,
) -> Result<Vec<ProgramReport>, SuiteError> {
    suite
        .iter()
        .map(|b| {
            let base = b.measure(&PipelineConfig::default(), None, cm)?;
            let (out, ml) = b.build(acpo, mlif, cm)?;
            let regions = out
                .trace
                .records
                .iter()
                .filter(|r| r.overhead != Overhead::default() || r.advice.is_some())
                .map(|r| (r.region.clone(), r.overhead))
                .collect();
            Ok(ProgramReport {
                program: b.name.clone(),
                default_cost: ratio_f64(&base.cost),
                acpo_cost: ratio_f64(&ml.cost),
                default_size: base.size,
                acpo_size: ml.size,
                overhead: out.trace.overhead,
                regions,
            })
        })
        .collect()
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

pub fn comparison_table(rows: &[ProgramReport]) -> String {
    let mut s = String::from("program,cost_default,cost_acpo,speedup,size_default,size_acpo,size_bloat\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.program,
            r.default_cost,
            r.acpo_cost,
            num(r.speedup()),
            r.default_size,
            r.acpo_size,
            num(r.bloat())
        ));
    }
    let sp: Vec<f64> = rows.iter().map(ProgramReport::speedup).collect();
    let bl: Vec<f64> = rows.iter().map(ProgramReport::bloat).collect();
    s.push_str(&format!("geomean,,,{},,,{}\n", num(geomean(&sp)), num(geomean(&bl))));
    s
}

fn micros(d: Duration) -> String {
    format!("{:.1}", d.as_secs_f64() * 1e6)
}

/// One row per phase, one column per program plus a total, in microseconds.
pub fn overhead_table(rows: &[ProgramReport]) -> String {
    let mut total = Overhead::default();
    rows.iter().for_each(|r| total.add(&r.overhead));
    let mut s = String::from("phase_us");
    for r in rows {
        s.push(',');
        s.push_str(&r.program);
    }
    s.push_str(",total\n");
    for (i, name) in Overhead::ROWS.iter().enumerate() {
        s.push_str(name);
        for r in rows {
            s.push(',');
            s.push_str(&micros(r.overhead.rows()[i].1));
        }
        s.push(',');
        s.push_str(&micros(total.rows()[i].1));
        s.push('\n');
    }
    s
}

/// Per-region breakdown: `program,region` then the five phases.
pub fn region_overhead_table(rows: &[ProgramReport]) -> String {
    let mut s = String::from("program,region");
    for n in Overhead::ROWS {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for r in rows {
        for (region, o) in &r.regions {
            s.push_str(&format!("{},{}", r.program, region));
            for (_, d) in o.rows() {
                s.push(',');
                s.push_str(&micros(d));
            }
            s.push('\n');
        }
    }
    s
}
