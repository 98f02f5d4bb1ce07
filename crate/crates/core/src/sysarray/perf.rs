//! Throughput and efficiency arithmetic.

use super::TraceReport;

#[derive(Debug, Clone, PartialEq)]
pub struct PerfSummary {
    pub n: usize,
    pub frequency_hz: f64,
    /// Sustained rate of the traced run, `ops_per_cycle * f`.
    pub ops_per_second: f64,
    /// `2 * n^2 * f`: every node doing a multiply and an add each cycle.
    pub peak_ops_per_second: f64,
    pub utilization: f64,
    pub power_w: Option<f64>,
    pub ops_per_joule: Option<f64>,
    pub peak_ops_per_joule: Option<f64>,
    pub rounding_units: usize,
    pub dsp_units: usize,
    pub rounding_overhead: f64,
}

impl PerfSummary {
    pub fn gops(&self) -> f64 {
        self.ops_per_second / 1e9
    }

    pub fn peak_gops(&self) -> f64 {
        self.peak_ops_per_second / 1e9
    }

    pub fn gops_per_watt(&self) -> Option<f64> {
        self.ops_per_joule.map(|v| v / 1e9)
    }

    pub fn peak_gops_per_watt(&self) -> Option<f64> {
        self.peak_ops_per_joule.map(|v| v / 1e9)
    }
}

/// Scale a trace by a clock frequency and, optionally, a power figure.
/// Returns `None` unless `frequency_hz` is positive and finite.
pub fn perf_report(trace: &TraceReport, frequency_hz: f64, power_w: Option<f64>) -> Option<PerfSummary> {
    if !(frequency_hz > 0.0 && frequency_hz.is_finite()) {
        return None;
    }
    let n = trace.n;
    let peak = 2.0 * (n * n) as f64 * frequency_hz;
    let ops = trace.ops_per_cycle * frequency_hz;
    let power_w = power_w.filter(|p| *p > 0.0);
    Some(PerfSummary {
        n,
        frequency_hz,
        ops_per_second: ops,
        peak_ops_per_second: peak,
        utilization: trace.utilization,
        power_w,
        ops_per_joule: power_w.map(|p| ops / p),
        peak_ops_per_joule: power_w.map(|p| peak / p),
        rounding_units: trace.rounding_units,
        dsp_units: trace.dsp_units,
        rounding_overhead: trace.rounding_units as f64 / trace.dsp_units as f64,
    })
}

impl std::fmt::Display for PerfSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "array            {0}x{0}", self.n)?;
        writeln!(f, "frequency        {:.1} MHz", self.frequency_hz / 1e6)?;
        writeln!(f, "utilization      {:.4}", self.utilization)?;
        writeln!(f, "throughput       {:.2} G-ops/s (peak {:.2})", self.gops(), self.peak_gops())?;
        if let (Some(p), Some(e), Some(pe)) = (self.power_w, self.gops_per_watt(), self.peak_gops_per_watt()) {
            writeln!(f, "efficiency       {e:.2} G-ops/s/W at {p} W (peak {pe:.2})")?;
        }
        write!(
            f,
            "rounding units   {} of {} DSP units ({:.2}%)",
            self.rounding_units,
            self.dsp_units,
            100.0 * self.rounding_overhead
        )
    }
}
