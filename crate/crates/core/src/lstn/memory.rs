//! Key/value memory of the propagation network.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Key and value tokens produced by one block for one frame.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub frame: usize,
    /// `(B, H_f·W_f, C)`.
    pub key: Tensor,
    /// `(B, H_f·W_f, C)`.
    pub value: Tensor,
    pub grid: (usize, usize),
}

/// The entries of every block for a single frame.
#[derive(Debug, Clone)]
pub struct FrameMemory {
    pub frame: usize,
    pub entries: Vec<MemoryEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryStats {
    pub long_writes: usize,
    pub long_reads: usize,
    pub short_writes: usize,
    pub short_reads: usize,
}

/// Long-term slot holding the seed frame and short-term slot holding the
/// most recent frame.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    long_term: Option<FrameMemory>,
    short_term: Option<FrameMemory>,
    stats: MemoryStats,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.long_term.is_none() && self.short_term.is_none()
    }

    pub fn stats(&self) -> MemoryStats {
        self.stats
    }

    pub fn write_long_term(&mut self, memory: FrameMemory) -> Result<()> {
        if self.long_term.is_some() {
            return Err(Error::Contract("long-term memory is written only once".into()));
        }
        self.long_term = Some(memory);
        self.stats.long_writes += 1;
        Ok(())
    }

    pub fn write_short_term(&mut self, memory: FrameMemory) {
        self.short_term = Some(memory);
        self.stats.short_writes += 1;
    }

    pub fn long_term(&self) -> Result<&FrameMemory> {
        self.long_term
            .as_ref()
            .ok_or_else(|| Error::Contract("memory bank has no long-term entry".into()))
    }

    pub fn short_term(&self) -> Result<&FrameMemory> {
        self.short_term
            .as_ref()
            .ok_or_else(|| Error::Contract("memory bank has no short-term entry".into()))
    }

    pub(crate) fn note_reads(&mut self, long: bool, short: bool) {
        self.stats.long_reads += long as usize;
        self.stats.short_reads += short as usize;
    }
}
