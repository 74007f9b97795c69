//! Where manifest paths resolve to rasters.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::raster::{read_raster, write_raster, Raster};

pub trait RasterStore: Send + Sync {
    fn load(&self, path: &str) -> Result<Arc<Raster>>;
    fn save(&self, path: &str, raster: &Raster) -> Result<()>;
}

/// Resolves manifest paths relative to a root directory.
#[derive(Debug, Clone)]
pub struct DiskStore {
    root: PathBuf,
}

impl DiskStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        self.root.join(path)
    }
}

impl RasterStore for DiskStore {
    fn load(&self, path: &str) -> Result<Arc<Raster>> {
        let full = self.resolve(path);
        if !full.exists() {
            return Err(Error::MissingRaster(full.display().to_string()));
        }
        read_raster(full).map(Arc::new)
    }

    fn save(&self, path: &str, raster: &Raster) -> Result<()> {
        let full = self.resolve(path);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_raster(raster, full)
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    rasters: RwLock<HashMap<String, Arc<Raster>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rasters.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RasterStore for MemoryStore {
    fn load(&self, path: &str) -> Result<Arc<Raster>> {
        self.rasters
            .read()
            .unwrap()
            .get(path)
            .cloned()
            .ok_or_else(|| Error::MissingRaster(path.to_string()))
    }

    fn save(&self, path: &str, raster: &Raster) -> Result<()> {
        raster.check_finite()?;
        self.rasters
            .write()
            .unwrap()
            .insert(path.to_string(), Arc::new(raster.clone()));
        Ok(())
    }
}
