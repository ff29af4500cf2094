//! Sliding-window cache of clean (noise-free) keys and values.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Unrotated key and value rows for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// One frame of per-location entries. `None` marks a location with nothing stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFrame {
    pub t: usize,
    pub clean: bool,
    pub entries: Vec<Option<KvPair>>,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    hp: usize,
    wp: usize,
    window: usize,
    frames: VecDeque<CleanFrame>,
}

impl KvCache {
    pub fn new(hp: usize, wp: usize, window: usize) -> Result<Self> {
        if window == 0 || hp == 0 || wp == 0 {
            return Err(Error::Invalid("cache needs window >= 1 and a non-empty grid".into()));
        }
        Ok(Self {
            hp,
            wp,
            window,
            frames: VecDeque::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Inserts a clean frame (replacing any frame with the same `t`) and evicts
    /// the oldest frames beyond the window.
    pub fn append(&mut self, frame: CleanFrame) -> Result<()> {
        if !frame.clean {
            return Err(Error::NotClean(frame.t));
        }
        if frame.entries.len() != self.hp * self.wp {
            return Err(Error::Shape(format!(
                "frame has {} entries, grid is {}x{}",
                frame.entries.len(),
                self.hp,
                self.wp
            )));
        }
        match self.frames.binary_search_by_key(&frame.t, |f| f.t) {
            Ok(i) => self.frames[i] = frame,
            Err(i) => self.frames.insert(i, frame),
        }
        while self.frames.len() > self.window {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Frame indices currently held, ascending.
    pub fn retained(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> Option<&KvPair> {
        let i = self.frames.binary_search_by_key(&t, |f| f.t).ok()?;
        self.frames[i].entries[y * self.wp + x].as_ref()
    }

    /// Entry at `(y, x)` whose frame is closest to `p`; ties go to the later frame.
    pub fn closest(&self, y: usize, x: usize, p: usize) -> Option<(usize, &KvPair)> {
        let loc = y * self.wp + x;
        let mut best: Option<(usize, &KvPair)> = None;
        for f in &self.frames {
            let Some(e) = f.entries[loc].as_ref() else { continue };
            let better = match best {
                None => true,
                Some((bt, _)) => f.t.abs_diff(p) <= bt.abs_diff(p),
            };
            if better {
                best = Some((f.t, e));
            }
        }
        best
    }
}

/// Functional form of [`KvCache::append`].
pub fn cache_append(mut cache: KvCache, frame: CleanFrame) -> Result<KvCache> {
    cache.append(frame)?;
    Ok(cache)
}
