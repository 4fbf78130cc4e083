//! Patch datasets cropped from PGM/PPM images.
//!
//! A dataset directory holds one container per patch (`patch_000000.cimt`,
//! entry `patch`, `[3, P, P]` f32) and `manifest.csv` with columns
//! `index,file,source,x,y,split`.

use std::fs;
use std::path::{Path, PathBuf};

use cimnet_core::train::PatchSource;
use cimnet_core::{Rng, Tensor};
use serde::Deserialize;

use crate::container::{Payload, TensorContainer};
use crate::error::{io_err, Error, Result};
use crate::image::{read_pnm, to_rgb};
use crate::report::write_csv;

pub const MANIFEST: &str = "manifest.csv";
pub const PATCH_ENTRY: &str = "patch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 80/10/10 split of `n` items: counts of train, val and test.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub patches: usize,
    pub sources: usize,
    /// Images smaller than the patch size.
    pub skipped: Vec<PathBuf>,
    pub splits: (usize, usize, usize),
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "ppm"))
}

/// Crops `n` random `patch × patch` squares from the images in `src` and
/// writes them with a manifest to `out`.
pub fn build_dataset(src: &Path, n: usize, patch: usize, seed: u64, out: &Path) -> Result<DatasetSummary> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(src)
        .map_err(io_err(src))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(src)))
        .collect::<Result<_>>()?;
    files.retain(|p| is_pnm(p));
    files.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        let img = to_rgb(&read_pnm(&f)?)?;
        let [_, _, h, w] = img.dims4()?;
        if h < patch || w < patch {
            skipped.push(f);
        } else {
            images.push((f, img));
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no image in {} is at least {patch}x{patch}", src.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut order: Vec<usize> = (0..n).collect();
    Rng::substream(seed, "split", 0).shuffle(&mut order);
    let (n_train, n_val, _) = split_counts(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut rows = Vec::with_capacity(n);
    for (i, part) in split.iter().enumerate() {
        let mut rng = Rng::substream(seed, "crop", i as u64);
        let (path, img) = &images[rng.below(images.len())];
        let [_, _, h, w] = img.dims4()?;
        let y = rng.below(h - patch + 1);
        let x = rng.below(w - patch + 1);
        let crop = crop(img, y, x, patch);
        let file = format!("patch_{i:06}.cimt");
        let mut c = TensorContainer::new();
        c.insert(PATCH_ENTRY, Payload::F32(crop))?;
        c.save(out.join(&file))?;
        let source = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(vec![i.to_string(), file, source, x.to_string(), y.to_string(), part.as_str().into()]);
    }
    write_csv(out.join(MANIFEST), &["index", "file", "source", "x", "y", "split"], &rows)?;
    Ok(DatasetSummary { patches: n, sources: images.len(), skipped, splits: split_counts(n) })
}

fn crop(img: &Tensor<f32>, y: usize, x: usize, p: usize) -> Tensor<f32> {
    let [_, c, h, w] = img.dims4().unwrap();
    let mut data = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for r in y..y + p {
            let start = (ch * h + r) * w + x;
            data.extend_from_slice(&img.data()[start..start + p]);
        }
    }
    Tensor::from_vec(&[c, p, p], data).unwrap()
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    #[allow(dead_code)]
    index: usize,
    file: String,
    #[allow(dead_code)]
    source: String,
    #[allow(dead_code)]
    x: usize,
    #[allow(dead_code)]
    y: usize,
    split: String,
}

/// Patches of one split of a dataset directory, read from disk on demand.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    files: Vec<PathBuf>,
}

impl DatasetSource {
    pub fn open(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read(&path).map_err(io_err(&path))?;
        let mut files = Vec::new();
        for row in csv::Reader::from_reader(text.as_slice()).deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if row.split == split.as_str() {
                files.push(dir.join(row.file));
            }
        }
        Ok(Self { files })
    }

    pub fn load(path: &Path) -> Result<Tensor<f32>> {
        Ok(TensorContainer::load(path)?.f32(PATCH_ENTRY)?.clone())
    }

    /// Side length of the stored patches.
    pub fn patch_size(&self) -> Result<Option<usize>> {
        match self.files.first() {
            None => Ok(None),
            Some(f) => Ok(Self::load(f)?.shape().last().copied()),
        }
    }
}

impl PatchSource for DatasetSource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn patch(&self, index: usize) -> cimnet_core::Result<Tensor<f32>> {
        Self::load(&self.files[index]).map_err(|e| cimnet_core::Error::Config(e.to_string()))
    }
}
