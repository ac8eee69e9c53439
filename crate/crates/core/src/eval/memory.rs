//! Inference memory accounting.
//!
//! Analytic counts are attention score cells (query x key entries of one
//! head in one layer) and stored context vectors for a scenario of a current
//! sentence of `m` tokens, a target of `t` tokens and `c` previous
//! sentences of `m` tokens each.
//!
//! | variant | encoder cells | decoder cross cells | context tokens |
//! |---|---|---|---|
//! | sentence_level | m^2 | t m | 0 |
//! | single_encoder | (m (c+1))^2 | t m (c+1) | 0 |
//! | multi_encoder | m^2, plus (m c)^2 in the context encoder | t (m + m c) | m c |
//! | caching_tokens | m^2 | t m | m c |
//! | caching_sentence | m^2 | t m | c + 1 |
//! | pooling (k) | m^2 | t m | ceil(m/k) (c+1) |
//! | group / select (k) | m^2 | t m | k (c+1) |
//!
//! Caching variants attend to their context tokens in a separate
//! context-attention (`t x context tokens` cells) and keep `cached_tokens`
//! vectors for the previous sentences: the context tokens minus the
//! current sentence's own block.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use candle_core::DType;

use crate::data::vocab::{BOS, RESERVED};
use crate::model::{Integration, Model, ModelConfig, Preset, Variant};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub m: usize,
    pub t: usize,
    pub c: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub variant: Variant,
    pub m: usize,
    pub t: usize,
    pub c: usize,
    pub k: usize,
    pub encoder_cells: u64,
    pub context_encoder_cells: u64,
    /// Cells spent by shortening (refinement attention over the sentence).
    pub shortening_cells: u64,
    pub decoder_cross_cells: u64,
    pub decoder_context_cells: u64,
    /// Vectors kept for previous sentences.
    pub cached_tokens: u64,
    /// Vectors the decoder attends to as context.
    pub context_tokens: u64,
    /// Measured operation-memory peak in bytes, when a probe was used.
    pub peak_bytes: Option<u64>,
}

pub type MemoryReport = Vec<MemoryRow>;

/// Analytic counts for one variant under its default integration.
pub fn memory_row(variant: Variant, s: Scenario) -> Result<MemoryRow> {
    if s.m == 0 || s.t == 0 || s.k == 0 {
        return Err(Error::InvalidInput("scenario dimensions must be positive".into()));
    }
    let (m, t, c, k) = (s.m as u64, s.t as u64, s.c as u64, s.k as u64);
    let mut row = MemoryRow {
        variant,
        m: s.m,
        t: s.t,
        c: s.c,
        k: s.k,
        encoder_cells: m * m,
        context_encoder_cells: 0,
        shortening_cells: 0,
        decoder_cross_cells: t * m,
        decoder_context_cells: 0,
        cached_tokens: 0,
        context_tokens: 0,
        peak_bytes: None,
    };
    let has_context = c > 0;
    let pooled = m.div_ceil(k);
    // Per-sentence block size and refinement cost of the caching variants.
    let block = match variant {
        Variant::SentenceLevel => {
            return Ok(row);
        }
        Variant::SingleEncoder => {
            let n = m * (c + 1);
            row.encoder_cells = n * n;
            row.decoder_cross_cells = t * n;
            return Ok(row);
        }
        Variant::MultiEncoder => {
            row.context_encoder_cells = (m * c) * (m * c);
            row.context_tokens = m * c;
            if variant.default_integration() == Integration::Concat {
                row.decoder_cross_cells = t * (m + m * c);
            } else {
                row.decoder_context_cells = t * m * c;
            }
            return Ok(row);
        }
        Variant::CachingTokens => m,
        Variant::CachingSentence => 1,
        Variant::ShortMax | Variant::ShortAvg | Variant::ShortLinear => {
            row.shortening_cells = if has_context { pooled * m } else { 0 };
            pooled
        }
        Variant::ShortGroup | Variant::ShortSelect => {
            row.shortening_cells = if has_context { k * m } else { 0 };
            k
        }
    };
    if has_context {
        row.cached_tokens = block * c;
        row.context_tokens = if variant.includes_current() { block * (c + 1) } else { block * c };
        row.decoder_context_cells = t * row.context_tokens;
    }
    Ok(row)
}

/// Analytic rows for every requested variant.
pub fn memory_report(s: Scenario, variants: &[Variant]) -> Result<MemoryReport> {
    variants.iter().map(|&v| memory_row(v, s)).collect()
}

/// Tab-separated rendering with a header line.
pub fn report_tsv(report: &[MemoryRow]) -> String {
    let mut out = String::from(
        "variant\tm\tt\tc\tk\tencoder_cells\tcontext_encoder_cells\tshortening_cells\tdecoder_cross_cells\tdecoder_context_cells\tcached_tokens\tcontext_tokens\tpeak_bytes\n",
    );
    for r in report {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.m,
            r.t,
            r.c,
            r.k,
            r.encoder_cells,
            r.context_encoder_cells,
            r.shortening_cells,
            r.decoder_cross_cells,
            r.decoder_context_cells,
            r.cached_tokens,
            r.context_tokens,
            r.peak_bytes.map_or_else(|| "-".to_string(), |b| b.to_string()),
        ));
    }
    out
}

/// Runs inference over one document the way a translation would: every
/// sentence is prepared against the context so far, decoded over a
/// `target_len` prefix and committed. Wrap in [`PeakAlloc::measure`] to
/// obtain operation memory.
pub fn run_document(model: &Model, sources: &[Vec<u32>], target_len: usize) -> Result<()> {
    let mut doc = model.new_document();
    let prefix = vec![BOS; target_len.max(1)];
    for src in sources {
        let prepared = model.prepare(src, &doc)?;
        model.decode_logits(&prepared.memory, std::slice::from_ref(&prefix))?;
        model.commit(&mut doc, src, &prepared)?;
    }
    Ok(())
}

/// Peak heap bytes of running [`run_document`] over `c + 1` sentences of
/// `m` tokens with an untrained desk model, measured by `probe` (which must
/// be the global allocator). A warm-up pass runs first so one-time
/// allocations are not counted.
pub fn measure_peak(probe: &PeakAlloc, variant: Variant, s: Scenario) -> Result<u64> {
    let vocab = 64;
    let mut cfg = ModelConfig::new(Preset::Desk, variant, vocab, vocab)
        .with_context(s.c)
        .with_k(s.k);
    cfg.max_positions = cfg.max_positions.max(s.m * (s.c + 1) + s.c + 1).max(s.t + 1);
    cfg.validate()?;
    let model = Model::new(cfg, DType::F32)?;
    let span = (vocab - RESERVED) as u32;
    let sources: Vec<Vec<u32>> = (0..=s.c as u32)
        .map(|i| (0..s.m as u32).map(|j| RESERVED as u32 + (i * 7 + j * 3) % span).collect())
        .collect();
    run_document(&model, &sources, s.t)?;
    let (result, peak) = probe.measure(|| run_document(&model, &sources, s.t));
    result?;
    Ok(peak as u64)
}

/// Counting wrapper around the system allocator. Install it with
/// `#[global_allocator]` in a binary to measure peak heap usage.
pub struct PeakAlloc {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl PeakAlloc {
    pub const fn new() -> Self {
        Self {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current usage.
    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::SeqCst);
    }

    /// Peak bytes allocated above the usage at entry while running `f`.
    pub fn measure<T>(&self, f: impl FnOnce() -> T) -> (T, usize) {
        let base = self.current();
        self.reset_peak();
        let out = f();
        (out, self.peak().saturating_sub(base))
    }
}

impl Default for PeakAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = self.current.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            self.peak.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        self.current.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let grow = new_size - layout.size();
                let now = self.current.fetch_add(grow, Ordering::SeqCst) + grow;
                self.peak.fetch_max(now, Ordering::SeqCst);
            } else {
                self.current.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}
