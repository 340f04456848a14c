//! Run outputs: the results document written as JSON and the per-route CSV
//! tables. All floating-point output is full double precision (17
//! significant digits), CSVs carry a header row and LF line endings, and
//! every emitted number is checked to be finite.

use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::bsde::{GridSolution, PricingResult, RouteDiagnostics};
use crate::error::{IndiffError, Result};
use crate::fde::PicardRecord;
use crate::girsanov::BlockRecord;
use crate::grid::TimeGrid;
use crate::market::{ConstantsLedger, Scenario};

/// One route's summary in the results document.
#[derive(Debug, Clone, Serialize)]
pub struct RouteEntry {
    pub route: String,
    pub price: f64,
    pub price_stderr: f64,
    pub converged: bool,
    pub diagnostics: RouteDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleEntry {
    pub price: f64,
    pub nodes: usize,
}

/// Pairwise gap between two computed prices.
#[derive(Debug, Clone, Serialize)]
pub struct GapEntry {
    pub a: String,
    pub b: String,
    pub abs: f64,
    pub rel: f64,
}

/// Everything that legitimately varies between two identical runs lives
/// here, so byte-identity of the rest of the document can be asserted.
#[derive(Debug, Clone, Serialize, Default)]
pub struct Meta {
    /// Seconds since the Unix epoch at the time of writing.
    pub unix_time_seconds: u64,
    /// Wall-clock seconds per route.
    pub runtime_seconds: BTreeMap<String, f64>,
    pub version: String,
}

/// The results document: one run of the pricer over a set of routes.
#[derive(Debug, Clone, Serialize)]
pub struct ResultsDoc {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub lambda: f64,
    pub m_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub constants: ConstantsLedger,
    pub routes: Vec<RouteEntry>,
    pub oracle: Option<OracleEntry>,
    pub gaps: Vec<GapEntry>,
    pub meta: Meta,
}

fn ensure_finite(label: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(IndiffError::NonFinite(format!("{label} = {x}")))
    }
}

/// Full-precision scientific formatting: 17 significant digits.
fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

impl ResultsDoc {
    /// Validate that every number in the document is finite. JSON cannot
    /// represent non-finite floats, and silently emitting `null` in their
    /// place would corrupt downstream tooling.
    pub fn check_finite(&self) -> Result<()> {
        ensure_finite("lambda", self.lambda)?;
        for r in &self.routes {
            ensure_finite(&format!("{} price", r.route), r.price)?;
            ensure_finite(&format!("{} stderr", r.route), r.price_stderr)?;
        }
        if let Some(o) = &self.oracle {
            ensure_finite("oracle price", o.price)?;
        }
        for g in &self.gaps {
            ensure_finite(&format!("gap {}-{}", g.a, g.b), g.abs)?;
            ensure_finite(&format!("relative gap {}-{}", g.a, g.b), g.rel)?;
        }
        ensure_finite("k1", self.constants.k1)?;
        ensure_finite("k2", self.constants.k2)?;
        ensure_finite("k4", self.constants.k4)?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        self.check_finite()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = self.to_json_string()?;
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// All pairwise absolute and relative gaps among the given prices. The
/// relative gap is taken against the larger magnitude (zero when both
/// prices vanish).
pub fn compute_gaps(prices: &[(&str, f64)]) -> Vec<GapEntry> {
    let mut gaps = Vec::new();
    for i in 0..prices.len() {
        for j in i + 1..prices.len() {
            let (na, pa) = prices[i];
            let (nb, pb) = prices[j];
            let abs = (pa - pb).abs();
            let denom = pa.abs().max(pb.abs());
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            gaps.push(GapEntry {
                a: na.to_string(),
                b: nb.to_string(),
                abs,
                rel,
            });
        }
    }
    gaps
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Per-route profile: mean hedge and mean optimal position per grid time.
pub fn write_route_profile(path: &Path, grid: &TimeGrid, result: &PricingResult) -> Result<()> {
    let n = grid.n_steps();
    let m = result.hedge.nrows();
    let mut w = open(path)?;
    writeln!(w, "t,mean_hedge,mean_strategy")?;
    for k in 0..n {
        let mh = result.hedge.column(k).sum() / m as f64;
        let ms = result.optimal_strategy.column(k).sum() / m as f64;
        ensure_finite("mean hedge", mh)?;
        ensure_finite("mean strategy", ms)?;
        writeln!(w, "{},{},{}", fmt(grid.t(k)), fmt(mh), fmt(ms))?;
    }
    w.flush()?;
    Ok(())
}

/// Backward-induction grid summary: mean conditional values of the two
/// solves and the number of truncated paths per grid time.
pub fn write_bsde_grid(
    path: &Path,
    grid: &TimeGrid,
    sol_lambda: &GridSolution,
    sol_zero: &GridSolution,
) -> Result<()> {
    let n = grid.n_steps();
    let mut w = open(path)?;
    writeln!(w, "t,mean_y_lambda,mean_y_zero,clip_count")?;
    for k in 0..=n {
        let yl = sol_lambda.mean_y_at(k);
        let y0 = sol_zero.mean_y_at(k);
        ensure_finite("mean conditional value", yl)?;
        ensure_finite("mean zero-claim value", y0)?;
        // Clip counters are per step; the terminal time has no projection.
        let clips = if k < n {
            sol_lambda.clip_y[k]
                + sol_zero.clip_y[k]
                + sol_lambda.clip_z[k]
                + sol_zero.clip_z[k]
        } else {
            0
        };
        writeln!(w, "{},{},{},{clips}", fmt(grid.t(k)), fmt(yl), fmt(y0))?;
    }
    w.flush()?;
    Ok(())
}

/// Contraction log of the claim-split fixed-point iteration.
pub fn write_fde_convergence(path: &Path, records: &[PicardRecord]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "block,iteration,norm_diff,ratio")?;
    for r in records {
        ensure_finite("norm_diff", r.norm_diff)?;
        let ratio = match r.ratio {
            Some(x) => {
                ensure_finite("ratio", x)?;
                fmt(x)
            }
            None => String::new(),
        };
        writeln!(w, "{},{},{},{}", r.block, r.iteration, fmt(r.norm_diff), ratio)?;
    }
    w.flush()?;
    Ok(())
}

/// Contraction log of the blockwise forward iteration.
pub fn write_girsanov_convergence(path: &Path, records: &[BlockRecord]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "block,iteration,s_norm_diff,ratio,vanish_residual")?;
    for r in records {
        ensure_finite("s_norm_diff", r.s_norm_diff)?;
        ensure_finite("vanish_residual", r.vanish_residual)?;
        let ratio = match r.ratio {
            Some(x) => {
                ensure_finite("ratio", x)?;
                fmt(x)
            }
            None => String::new(),
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            r.block,
            r.iteration,
            fmt(r.s_norm_diff),
            ratio,
            fmt(r.vanish_residual)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market;
    use crate::presets;
    use ndarray::Array2;

    fn demo_doc() -> ResultsDoc {
        let scenario = presets::capped_claim_two_assets();
        let constants = market::validate_scenario(&scenario).unwrap();
        ResultsDoc {
            schema_version: 1,
            scenario,
            lambda: 1.0,
            m_paths: 1000,
            n_steps: 10,
            seed: 42,
            constants,
            routes: vec![RouteEntry {
                route: "bsde".into(),
                price: 1.0042,
                price_stderr: 0.003,
                converged: true,
                diagnostics: RouteDiagnostics {
                    route: "bsde".into(),
                    clip_y: 0,
                    clip_z: 0,
                    notes: vec![],
                },
            }],
            oracle: Some(OracleEntry {
                price: 1.0043,
                nodes: 128,
            }),
            gaps: compute_gaps(&[("bsde", 1.0042), ("oracle", 1.0043)]),
            meta: Meta {
                unix_time_seconds: 1_700_000_000,
                runtime_seconds: BTreeMap::from([("bsde".to_string(), 1.25)]),
                version: "0.1.0".into(),
            },
        }
    }

    #[test]
    fn document_is_byte_stable_outside_meta() {
        let doc_a = demo_doc();
        let mut doc_b = demo_doc();
        doc_b.meta.unix_time_seconds = 1_800_000_000;
        doc_b.meta.runtime_seconds.insert("bsde".into(), 99.0);
        let strip = |s: &str| -> serde_json::Value {
            let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
            v.as_object_mut().unwrap().remove("meta");
            v
        };
        let sa = doc_a.to_json_string().unwrap();
        let sa2 = doc_a.to_json_string().unwrap();
        assert_eq!(sa, sa2, "same document must serialize identically");
        let sb = doc_b.to_json_string().unwrap();
        assert_ne!(sa, sb);
        assert_eq!(strip(&sa), strip(&sb));
    }

    #[test]
    fn non_finite_values_are_rejected_not_emitted() {
        let mut doc = demo_doc();
        doc.routes[0].price = f64::NAN;
        assert!(matches!(
            doc.to_json_string().unwrap_err(),
            IndiffError::NonFinite(_)
        ));

        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let result = PricingResult {
            price: 0.0,
            price_stderr: 0.0,
            hedge: Array2::from_elem((3, 2), f64::INFINITY),
            optimal_strategy: Array2::zeros((3, 2)),
            diagnostics: RouteDiagnostics {
                route: "bsde".into(),
                clip_y: 0,
                clip_z: 0,
                notes: vec![],
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let err = write_route_profile(&dir.path().join("p.csv"), &grid, &result).unwrap_err();
        assert!(matches!(err, IndiffError::NonFinite(_)));
    }

    #[test]
    fn grid_table_covers_every_grid_time() {
        let scenario = presets::capped_claim_two_assets();
        let grid = TimeGrid::uniform(scenario.t_horizon, 4).unwrap();
        let brownian =
            crate::paths::BrownianBatch::generate(&grid, 1000, scenario.d, 11).unwrap();
        let paths = crate::paths::AssetPaths::evolve(&scenario, &grid, &brownian).unwrap();
        let ctxs =
            crate::regression::build_contexts(crate::regression::BasisSpec::default(), &paths)
                .unwrap();
        let sol =
            crate::bsde::solve_bsde(&scenario, &grid, &paths, &brownian, &ctxs, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_bsde_grid(&path, &grid, &sol, &sol).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        // Header plus one row per grid time, terminal included.
        assert_eq!(body.lines().count(), 1 + grid.n_steps() + 1);
        assert!(body.starts_with("t,mean_y_lambda,mean_y_zero,clip_count\n"));
    }

    #[test]
    fn gaps_cover_all_pairs_with_relative_scaling() {
        let gaps = compute_gaps(&[("a", 1.0), ("b", 1.1), ("c", 0.0)]);
        assert_eq!(gaps.len(), 3);
        let ab = &gaps[0];
        assert!((ab.abs - 0.1).abs() < 1e-15);
        assert!((ab.rel - 0.1 / 1.1).abs() < 1e-15);
        let zero = compute_gaps(&[("a", 0.0), ("b", 0.0)]);
        assert_eq!(zero[0].rel, 0.0);
    }

    #[test]
    fn csv_tables_have_headers_lf_and_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.csv");
        let records = vec![
            PicardRecord {
                block: 1,
                iteration: 1,
                norm_diff: 0.125,
                ratio: None,
            },
            PicardRecord {
                block: 1,
                iteration: 2,
                norm_diff: 0.0625,
                ratio: Some(0.5),
            },
        ];
        write_fde_convergence(&path, &records).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let expected = "block,iteration,norm_diff,ratio\n\
                        1,1,1.2500000000000000e-1,\n\
                        1,2,6.2500000000000000e-2,5.0000000000000000e-1\n";
        assert_eq!(body, expected);

        let gir = vec![BlockRecord {
            block: 2,
            iteration: 1,
            s_norm_diff: 0.001,
            ratio: None,
            vanish_residual: 2.0_f64.powi(-56),
        }];
        let gpath = dir.path().join("gconv.csv");
        write_girsanov_convergence(&gpath, &gir).unwrap();
        let gbody = std::fs::read_to_string(&gpath).unwrap();
        assert!(gbody.starts_with("block,iteration,s_norm_diff,ratio,vanish_residual\n"));
        assert!(gbody.ends_with("1.3877787807814457e-17\n"));
        assert!(!gbody.contains('\r'));
    }
}
