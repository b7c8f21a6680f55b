//! Analytic multiply-add ledger for the windowed attention mechanisms, with
//! an optional cross-check against the runtime attention counters.
//!
//! Counts are per window and per block. Softmax, normalization and
//! activation costs are excluded.

use std::io::Write;

use rand::SeedableRng;

use crate::attention::{
    attention_macs, cross_attention, expanded_window_ca, reset_attention_macs, AttentionParams, Mechanism, TokenField,
    WindowLayout,
};
use crate::error::{config_err, Result};
use crate::nn::{self, Rng64};
use crate::tensor::{ParameterStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Self- or cross-attention within equal rectangular windows.
    FixedWindow,
    /// Base-window queries against an enlarged search window.
    ExpandedWindow,
    /// Equal windows with offset-sampled queries.
    DwMca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [Self::FixedWindow, Self::ExpandedWindow, Self::DwMca];

    pub fn name(self) -> &'static str {
        match self {
            Self::FixedWindow => "fixed_window",
            Self::ExpandedWindow => "expanded_window",
            Self::DwMca => "dw_mca",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityConfig {
    pub label: String,
    pub window: [usize; 3],
    /// Search-window enlargement per axis.
    pub factors: [usize; 3],
    pub channels: usize,
    pub heads: usize,
    pub offset_kernel: usize,
    /// Token grid used for instrumented runs.
    pub grid: [usize; 3],
}

impl ComplexityConfig {
    /// Window (5,6,7), C = 96, 4 heads, m = 5, threefold search windows.
    pub fn full() -> Self {
        Self {
            label: "full".into(),
            window: [5, 6, 7],
            factors: [3, 3, 3],
            channels: 96,
            heads: 4,
            offset_kernel: 5,
            grid: [40, 48, 56],
        }
    }

    /// Window 2³, C = 8, 2 heads, m = 3 on a 4³ grid.
    pub fn desk() -> Self {
        Self {
            label: "desk".into(),
            window: [2, 2, 2],
            factors: [3, 3, 3],
            channels: 8,
            heads: 2,
            offset_kernel: 3,
            grid: [4, 4, 4],
        }
    }

    pub fn n_b(&self) -> u64 {
        self.window.iter().product::<usize>() as u64
    }

    /// Search-window size, without border clamping.
    pub fn n_s(&self) -> u64 {
        self.n_b() * self.factors.iter().product::<usize>() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.contains(&0) || self.factors.contains(&0) || self.grid.contains(&0) {
            return Err(config_err!("{}: extents and factors must be positive", self.label));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(config_err!(
                "{}: {} channels not divisible by {} heads",
                self.label,
                self.channels,
                self.heads
            ));
        }
        Ok(())
    }
}

/// Multiply-adds of one window of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    pub kind: AttentionKind,
    pub qkv: u64,
    pub scores: u64,
    pub weighted_values: u64,
    pub offset_network: u64,
    pub sampling: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.weighted_values + self.offset_network + self.sampling
    }

    /// Scores plus attention-weighted values.
    pub fn attention(&self) -> u64 {
        self.scores + self.weighted_values
    }
}

pub fn attention_flops(kind: AttentionKind, cfg: &ComplexityConfig) -> FlopReport {
    let c = cfg.channels as u64;
    let nb = cfg.n_b();
    let ns = cfg.n_s();
    let m3 = (cfg.offset_kernel as u64).pow(3);
    let h = cfg.heads as u64;
    match kind {
        AttentionKind::FixedWindow => FlopReport {
            kind,
            qkv: 3 * nb * c * c,
            scores: nb * nb * c,
            weighted_values: nb * nb * c,
            offset_network: 0,
            sampling: 0,
        },
        AttentionKind::ExpandedWindow => FlopReport {
            kind,
            qkv: nb * c * c + 2 * ns * c * c,
            scores: nb * ns * c,
            weighted_values: nb * ns * c,
            offset_network: 0,
            sampling: 0,
        },
        AttentionKind::DwMca => FlopReport {
            kind,
            qkv: 3 * nb * c * c,
            scores: nb * nb * c,
            weighted_values: nb * nb * c,
            // Depthwise m³ kernel, then pointwise C → 3·heads.
            offset_network: nb * m3 * c + nb * c * 3 * h,
            // Eight trilinear corners per query channel.
            sampling: 8 * nb * c,
        },
    }
}

/// Score and weighted-value multiplies counted while running one block of
/// `kind` on `cfg.grid` with random weights.
pub fn instrumented_counts(kind: AttentionKind, cfg: &ComplexityConfig, seed: u64) -> Result<(u64, u64)> {
    cfg.validate()?;
    let mut rng = Rng64::seed_from_u64(seed);
    let params = AttentionParams::new("cx", cfg.channels, cfg.heads, cfg.offset_kernel)?;
    let mut store = ParameterStore::new();
    params.init(&mut store, &mut rng)?;
    let g = cfg.grid;
    let field = |rng: &mut Rng64| {
        let t = nn::normal(rng, &[g[0], g[1], g[2], cfg.channels], 1.0);
        TokenField::from_tensor(t)
    };
    let xb = field(&mut rng)?;
    let xr = field(&mut rng)?;
    let layout = WindowLayout::new(g, cfg.window, [0; 3])?;
    reset_attention_macs();
    match kind {
        AttentionKind::ExpandedWindow => {
            expanded_window_ca(&store, &params, &xb, &xr, &layout, cfg.factors)?;
        }
        AttentionKind::FixedWindow | AttentionKind::DwMca => {
            let mech = if kind == AttentionKind::DwMca {
                Mechanism::Deformable
            } else {
                Mechanism::FixedWindow
            };
            let mut tape = Tape::new();
            let b = tape.bind(&store);
            let vb = tape.constant(xb.into_tensor());
            let vr = tape.constant(xr.into_tensor());
            cross_attention(&mut tape, &b, &params, vb, vr, &layout, mech, None)?;
        }
    }
    let m = attention_macs();
    Ok((m.scores, m.values))
}

/// One mechanism under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub config: ComplexityConfig,
    pub report: FlopReport,
    /// `total / total(fixed window)`.
    pub ratio_total: f64,
    /// `attention / attention(fixed window)`.
    pub ratio_attention: f64,
    /// Instrumented `(scores, weighted values)` over the whole grid, next
    /// to the analytic per-window counts times the window count.
    pub instrumented: Option<InstrumentedCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrumentedCheck {
    pub analytic_scores: u64,
    pub analytic_values: u64,
    pub counted_scores: u64,
    pub counted_values: u64,
}

impl InstrumentedCheck {
    pub fn matches(&self) -> bool {
        self.analytic_scores == self.counted_scores && self.analytic_values == self.counted_values
    }
}

/// Rows for every mechanism of every config; `instrument` additionally runs
/// each mechanism and records the counted multiplies.
pub fn complexity_report(configs: &[ComplexityConfig], instrument: bool) -> Result<Vec<ComplexityRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        cfg.validate()?;
        let base = attention_flops(AttentionKind::FixedWindow, cfg);
        for kind in AttentionKind::ALL {
            let report = attention_flops(kind, cfg);
            let instrumented = if instrument {
                let n_windows: u64 = (0..3).map(|a| cfg.grid[a].div_ceil(cfg.window[a]) as u64).product();
                let (s, v) = instrumented_counts(kind, cfg, 0)?;
                Some(InstrumentedCheck {
                    analytic_scores: report.scores * n_windows,
                    analytic_values: report.weighted_values * n_windows,
                    counted_scores: s,
                    counted_values: v,
                })
            } else {
                None
            };
            rows.push(ComplexityRow {
                config: cfg.clone(),
                report,
                ratio_total: report.total() as f64 / base.total() as f64,
                ratio_attention: report.attention() as f64 / base.attention() as f64,
                instrumented,
            });
        }
    }
    Ok(rows)
}

pub const COMPLEXITY_CSV_HEADER: &str = "config,mechanism,n_b,n_s,channels,heads,offset_kernel,qkv,scores,weighted_values,offset_network,sampling,total,ratio_total,ratio_attention,instr_scores,instr_values,instr_match";

pub fn write_complexity_csv(rows: &[ComplexityRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{COMPLEXITY_CSV_HEADER}")?;
    for r in rows {
        let c = &r.config;
        let f = &r.report;
        let n_s = if f.kind == AttentionKind::ExpandedWindow {
            c.n_s()
        } else {
            c.n_b()
        };
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            c.label,
            f.kind.name(),
            c.n_b(),
            n_s,
            c.channels,
            c.heads,
            c.offset_kernel,
            f.qkv,
            f.scores,
            f.weighted_values,
            f.offset_network,
            f.sampling,
            f.total(),
            r.ratio_total,
            r.ratio_attention
        )?;
        match &r.instrumented {
            Some(i) => writeln!(w, ",{},{},{}", i.counted_scores, i.counted_values, i.matches())?,
            None => writeln!(w, ",,,")?,
        }
    }
    Ok(())
}

/// Human-readable summary of the report.
pub fn write_complexity_summary(rows: &[ComplexityRow], mut w: impl Write) -> Result<()> {
    for r in rows {
        write!(
            w,
            "{:<8} {:<16} total {:>14}  x{:<8.3} attention x{:<8.3}",
            r.config.label,
            r.report.kind.name(),
            r.report.total(),
            r.ratio_total,
            r.ratio_attention
        )?;
        if let Some(i) = &r.instrumented {
            let note = if i.matches() {
                "counted = analytic"
            } else {
                "counted differs (border clamping)"
            };
            write!(w, "  [{note}]")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
