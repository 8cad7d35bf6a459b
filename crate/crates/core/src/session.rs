//! One attention head end to end: prefill factorization, then the per-token
//! decode loop over the two-tier cache.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::{proxy_scores, select_active, CacheStats, SelectionSet, TieredKVCache};
use crate::decode::{
    decode_compress, update_projections, CompressedToken, DecodeConfig, TokenStep,
};
use crate::error::{LrqkError, Result};
use crate::matrix::{fro_norm_sq, Matrix};
use crate::oracle::{exact_attention, exact_topk, selection_recall, AttentionResult};
use crate::prefill::{
    prefill_factorize_traced, relative_residuals, LowRankFactors, PrefillConfig, PrefillInput,
    PrefillTrace, Projections, Residuals,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub prefill: PrefillConfig,
    pub decode: DecodeConfig,
    pub k_budget: usize,
    pub lite_budget: usize,
    /// Compare every step against full-history oracles. Costs `O(t·d)` per step.
    pub track_quality: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prefill: PrefillConfig::default(),
            decode: DecodeConfig::default(),
            k_budget: 2048,
            lite_budget: 64,
            track_quality: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.prefill.validate(dim)?;
        self.decode.validate()?;
        if self.k_budget == 0 || self.lite_budget == 0 {
            return Err(LrqkError::InvalidConfig(
                "k_budget and lite_budget must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Index of the decoded token in the full sequence.
    pub step: usize,
    pub miss_count: usize,
    pub selected_count: usize,
    /// `None` when quality tracking is off.
    pub recall_vs_exact: Option<f64>,
    pub output_err: Option<f64>,
}

/// Everything a decode step produced, for callers that want to check it.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: StepReport,
    pub compressed: CompressedToken,
    pub selection: SelectionSet,
    pub attention: AttentionResult,
}

#[derive(Debug, Clone)]
pub struct Session {
    cfg: SessionConfig,
    factors: LowRankFactors,
    trace: PrefillTrace,
    residuals: Residuals,
    proj: Projections,
    cache: TieredKVCache,
    stats: CacheStats,
}

impl Session {
    /// Factorizes the prompt and seeds the cache with its rows.
    pub fn prefill(input: &PrefillInput, v: &Matrix, cfg: SessionConfig) -> Result<Self> {
        cfg.validate(input.dim())?;
        if v.shape() != input.k().shape() {
            return Err(LrqkError::shape(
                "session_prefill",
                format!("V {:?} against K {:?}", v.shape(), input.k().shape()),
            ));
        }
        let (factors, trace) = prefill_factorize_traced(input, &cfg.prefill)?;
        let residuals = relative_residuals(input, &factors)?;
        let mut cache =
            TieredKVCache::new(input.dim(), cfg.prefill.rank, cfg.k_budget, cfg.lite_budget)?;
        cache.seed_prompt(input.k(), v, &factors.a_k)?;
        let proj = Projections {
            b_q: factors.b_q.clone(),
            b_k: factors.b_k.clone(),
        };
        Ok(Self {
            cfg,
            factors,
            trace,
            residuals,
            proj,
            cache,
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    /// Factors as returned by prefill; the projections drift from these
    /// during decode.
    pub fn prefill_factors(&self) -> &LowRankFactors {
        &self.factors
    }

    pub fn prefill_trace(&self) -> &PrefillTrace {
        &self.trace
    }

    pub fn prefill_residuals(&self) -> Residuals {
        self.residuals
    }

    pub fn projections(&self) -> &Projections {
        &self.proj
    }

    pub fn cache(&self) -> &TieredKVCache {
        &self.cache
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn decode_step(&mut self, step: &TokenStep) -> Result<StepReport> {
        self.decode_step_detailed(step).map(|o| o.report)
    }

    pub fn decode_step_detailed(&mut self, step: &TokenStep) -> Result<StepOutcome> {
        let (a_k_res, k_res) = self.cache.resident_rows()?;
        let (compressed, mut ws) =
            decode_compress(step, &self.proj, &a_k_res, &k_res, &self.cfg.decode)?;
        update_projections(step, &compressed, &mut self.proj, &mut ws)?;
        let t = self
            .cache
            .append_token(&step.k, &step.v, &compressed.k_hat)?;

        let scores = proxy_scores(&compressed.q_hat, self.cache.proxies())?;
        let selection = select_active(&scores, t, self.cfg.k_budget, self.cfg.lite_budget)?;
        let (k_sel, v_sel) = self.cache.fetch_and_merge(&selection, &mut self.stats)?;
        let attention = exact_attention(&step.q, &k_sel, &v_sel)?;

        let (recall_vs_exact, output_err) = if self.cfg.track_quality {
            let keys = self.cache.slow_keys();
            let exact = exact_topk(&step.q, keys, self.cfg.k_budget)?;
            let recall = selection_recall(&selection.omega, &exact)?;
            let full = exact_attention(&step.q, keys, self.cache.slow_values())?;
            (
                Some(recall),
                Some(relative_l2(&attention.output, &full.output)?),
            )
        } else {
            (None, None)
        };

        let last = self
            .stats
            .per_step
            .last()
            .expect("fetch_and_merge records the step");
        let report = StepReport {
            step: t,
            miss_count: last.miss,
            selected_count: last.selected,
            recall_vs_exact,
            output_err,
        };
        Ok(StepOutcome {
            report,
            compressed,
            selection,
            attention,
        })
    }
}

/// `‖a − b‖ / ‖b‖`, or `‖a − b‖` when `b` is zero.
fn relative_l2(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = fro_norm_sq(&a.sub(b)?).sqrt();
    let base = fro_norm_sq(b).sqrt();
    Ok(if base > 0.0 { diff / base } else { diff })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub steps: usize,
    pub c_miss: u64,
    pub c_total: u64,
    /// `c_miss / c_total`; `None` with no steps.
    pub mean_miss_rate: Option<f64>,
    pub mean_recall: Option<f64>,
    pub p50_output_err: Option<f64>,
    pub p95_output_err: Option<f64>,
    pub prefill_residuals: Residuals,
    pub prefill_sweeps: usize,
    pub config: SessionConfig,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub reports: Vec<StepReport>,
    pub stats: CacheStats,
    pub trace: PrefillTrace,
    pub summary: SimulationSummary,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Prefill on `input`, then decode `steps` in order.
pub fn run_simulation(
    input: &PrefillInput,
    v: &Matrix,
    steps: &[TokenStep],
    cfg: SessionConfig,
) -> Result<SimulationResult> {
    let mut session = Session::prefill(input, v, cfg)?;
    let reports = steps
        .iter()
        .map(|s| session.decode_step(s))
        .collect::<Result<Vec<_>>>()?;

    let recalls: Vec<f64> = reports.iter().filter_map(|r| r.recall_vs_exact).collect();
    let errs: Vec<f64> = reports.iter().filter_map(|r| r.output_err).collect();
    let stats = session.stats.clone();
    let summary = SimulationSummary {
        steps: reports.len(),
        c_miss: stats.c_miss,
        c_total: stats.c_total,
        mean_miss_rate: stats.miss_rate().ok(),
        mean_recall: (!recalls.is_empty())
            .then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        p50_output_err: percentile(&errs, 50.0),
        p95_output_err: percentile(&errs, 95.0),
        prefill_residuals: session.residuals,
        prefill_sweeps: session.trace.sweeps(),
        config: cfg,
    };
    Ok(SimulationResult {
        reports,
        stats,
        trace: session.trace,
        summary,
    })
}

/// `step,selected,miss,recall,output_err`; untracked metrics are left empty.
pub fn write_report_csv<W: Write>(out: W, reports: &[StepReport]) -> Result<()> {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "selected", "miss", "recall", "output_err"])?;
    for r in reports {
        w.write_record([
            r.step.to_string(),
            r.selected_count.to_string(),
            r.miss_count.to_string(),
            opt(r.recall_vs_exact),
            opt(r.output_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}
