//! Per-grain view over annotated images with a shared LRU image cache.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use pollen_core::detect::GrainDetection;
use pollen_core::raster::Raster;

use crate::annot::read_annotations;
use crate::error::Result;

pub const DEFAULT_CACHE_CAPACITY: usize = 64;

/// Source of decoded images.
pub trait ImageLoader: Send + Sync {
    fn load(&self, path: &Path) -> Result<Raster>;
}

/// Decodes from disk with [`crate::io::load_image`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FileLoader;

impl ImageLoader for FileLoader {
    fn load(&self, path: &Path) -> Result<Raster> {
        crate::io::load_image(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub annotation_path: PathBuf,
    pub image_path: PathBuf,
    pub grain: GrainDetection,
}

struct Cache {
    images: LruCache<PathBuf, Arc<Raster>>,
    decodes: HashMap<PathBuf, usize>,
}

pub struct GrainDataset<L: ImageLoader = FileLoader> {
    entries: Vec<DatasetEntry>,
    capacity: usize,
    cache: Mutex<Cache>,
    loader: L,
}

impl GrainDataset<FileLoader> {
    /// One entry per grain of every annotation file, in file then grain
    /// order. Images are resolved next to their annotation file.
    pub fn open(annotations: &[PathBuf]) -> Result<Self> {
        let mut entries = Vec::new();
        for a in annotations {
            let file = read_annotations(a)?;
            let dir = a.parent().unwrap_or(Path::new(""));
            let image_path = dir.join(&file.image_name);
            entries.extend(file.grains.into_iter().map(|grain| DatasetEntry {
                annotation_path: a.clone(),
                image_path: image_path.clone(),
                grain,
            }));
        }
        Self::with_loader(entries, DEFAULT_CACHE_CAPACITY, FileLoader)
    }
}

impl<L: ImageLoader> GrainDataset<L> {
    pub fn with_loader(entries: Vec<DatasetEntry>, capacity: usize, loader: L) -> Result<Self> {
        let cap = NonZeroUsize::new(capacity)
            .ok_or_else(|| pollen_core::Error::Parameter("cache capacity must be positive".into()))?;
        Ok(Self {
            entries,
            capacity,
            cache: Mutex::new(Cache { images: LruCache::new(cap), decodes: HashMap::new() }),
            loader,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    /// Decoded image and grain record for entry `index`.
    pub fn get(&self, index: usize) -> Result<(Arc<Raster>, GrainDetection)> {
        let entry = self
            .entries
            .get(index)
            .ok_or(pollen_core::Error::Bounds { index, len: self.entries.len() })?;
        let image = self.image(&entry.image_path)?;
        Ok((image, entry.grain.clone()))
    }

    /// The image at `path`, decoding it only on a cache miss. The lock is
    /// held across the decode so concurrent misses decode once.
    pub fn image(&self, path: &Path) -> Result<Arc<Raster>> {
        let mut cache = self.cache.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
        if let Some(img) = cache.images.get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(self.loader.load(path)?);
        *cache.decodes.entry(path.to_path_buf()).or_default() += 1;
        cache.images.put(path.to_path_buf(), Arc::clone(&img));
        Ok(img)
    }

    /// How many times `path` has been decoded.
    pub fn decode_count(&self, path: &Path) -> usize {
        self.cache.lock().map(|c| c.decodes.get(path).copied().unwrap_or(0)).unwrap_or(0)
    }

    /// Images currently resident.
    pub fn resident(&self) -> usize {
        self.cache.lock().map(|c| c.images.len()).unwrap_or(0)
    }
}
