//! LRU cache of loaded time steps, so only a bounded subset of a time-varying scene is
//! resident at once.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use super::{parse_scene_file, SceneDesc, SceneError};

pub trait StepLoader {
    fn step_count(&self) -> usize;
    fn load(&mut self, step: usize) -> Result<SceneDesc, SceneError>;
}

impl<L: StepLoader + ?Sized> StepLoader for Box<L> {
    fn step_count(&self) -> usize {
        (**self).step_count()
    }

    fn load(&mut self, step: usize) -> Result<SceneDesc, SceneError> {
        (**self).load(step)
    }
}

/// Loads each step from its own scene document.
pub struct FileStepLoader {
    paths: Vec<PathBuf>,
}

impl FileStepLoader {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        FileStepLoader { paths }
    }
}

impl StepLoader for FileStepLoader {
    fn step_count(&self) -> usize {
        self.paths.len()
    }

    fn load(&mut self, step: usize) -> Result<SceneDesc, SceneError> {
        parse_scene_file(&self.paths[step])
    }
}

/// Adapts a closure; mostly for procedural steps and tests.
pub struct FnStepLoader<F> {
    count: usize,
    load: F,
}

impl<F: FnMut(usize) -> Result<SceneDesc, SceneError>> FnStepLoader<F> {
    pub fn new(count: usize, load: F) -> Self {
        FnStepLoader { count, load }
    }
}

impl<F: FnMut(usize) -> Result<SceneDesc, SceneError>> StepLoader for FnStepLoader<F> {
    fn step_count(&self) -> usize {
        self.count
    }

    fn load(&mut self, step: usize) -> Result<SceneDesc, SceneError> {
        (self.load)(step)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

pub struct TimestepCache<L> {
    capacity: usize,
    loader: L,
    /// Least recently used first.
    resident: VecDeque<(usize, Arc<SceneDesc>)>,
    stats: CacheStats,
    evicted: Vec<usize>,
}

impl<L: StepLoader> TimestepCache<L> {
    pub fn new(capacity: usize, loader: L) -> Self {
        assert!(capacity >= 1, "time-step cache needs capacity >= 1");
        TimestepCache {
            capacity,
            loader,
            resident: VecDeque::new(),
            stats: CacheStats::default(),
            evicted: Vec::new(),
        }
    }

    pub fn fetch(&mut self, step: usize) -> Result<Arc<SceneDesc>, SceneError> {
        let count = self.loader.step_count();
        if step >= count {
            return Err(SceneError::InvalidStep { step, count });
        }
        if let Some(pos) = self.resident.iter().position(|(s, _)| *s == step) {
            self.stats.hits += 1;
            let entry = self.resident.remove(pos).expect("position in range");
            let scene = entry.1.clone();
            self.resident.push_back(entry);
            return Ok(scene);
        }
        self.stats.misses += 1;
        let scene = Arc::new(self.loader.load(step)?);
        self.resident.push_back((step, scene.clone()));
        while self.resident.len() > self.capacity {
            let (old, _) = self.resident.pop_front().expect("non-empty");
            log::debug!("evicting time step {old}");
            self.evicted.push(old);
            self.stats.evictions += 1;
        }
        Ok(scene)
    }

    /// Resident step indices, least recently used first.
    pub fn residents(&self) -> Vec<usize> {
        self.resident.iter().map(|(s, _)| *s).collect()
    }

    pub fn evicted(&self) -> &[usize] {
        &self.evicted
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
