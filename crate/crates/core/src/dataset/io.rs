//! On-disk corpus layout: `images/<id>.ppm`, `labels/<id>.pgm` and a
//! `catalog.txt` of `id<TAB>name` lines.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use super::{BinaryMask, Catalog, GrayImage, RgbImage, Sample, SegDataset};
use crate::{Error, Result};

/// A pair skipped while loading, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: SegDataset,
    pub rejected: Vec<Rejected>,
}

pub fn save_dataset(dataset: &SegDataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in dataset.samples() {
        let (w, h) = s.image.dimensions();
        write_pnm(
            &images.join(format!("{}.ppm", s.id)),
            s.image.as_raw(),
            w,
            h,
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        )?;
        write_pnm(
            &labels.join(format!("{}.pgm", s.id)),
            s.labels.as_raw(),
            w,
            h,
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        )?;
    }
    let catalog = root.join("catalog.txt");
    fs::write(&catalog, dataset.catalog().to_text()).map_err(|e| Error::io(&catalog, e))
}

/// Writes a mask as an 8-bit graymap (0 background, 255 foreground).
pub fn write_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = mask.to_gray_image();
    write_pnm(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

fn write_pnm(path: &Path, raw: &[u8], w: u32, h: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(raw, w, h, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads `root/images`, `root/labels` and `root/catalog.txt`.
pub fn load_dataset_root(root: &Path) -> Result<LoadedDataset> {
    let catalog_path = root.join("catalog.txt");
    let text = fs::read_to_string(&catalog_path).map_err(|e| Error::io(&catalog_path, e))?;
    let catalog = Catalog::parse(&text)?;
    load_dataset(&root.join("images"), &root.join("labels"), &catalog)
}

/// Pairs files by stem. Pairs with a missing partner, an unreadable file,
/// a multi-channel raster or mismatched sizes are skipped and reported; a
/// label outside `catalog` is a hard error.
pub fn load_dataset(image_dir: &Path, raster_dir: &Path, catalog: &Catalog) -> Result<LoadedDataset> {
    let images = files_by_stem(image_dir)?;
    let rasters = files_by_stem(raster_dir)?;
    if images.is_empty() && rasters.is_empty() {
        return Err(Error::Dataset(format!(
            "no files in {} or {}",
            image_dir.display(),
            raster_dir.display()
        )));
    }
    let mut rejected = Vec::new();
    let mut samples = Vec::new();
    for id in rasters.keys().filter(|id| !images.contains_key(*id)) {
        rejected.push(Rejected {
            id: id.clone(),
            reason: "label raster without image".into(),
        });
    }
    for (id, image_path) in &images {
        let Some(raster_path) = rasters.get(id) else {
            rejected.push(Rejected {
                id: id.clone(),
                reason: "image without label raster".into(),
            });
            continue;
        };
        match load_pair(image_path, raster_path) {
            Ok((image, labels)) => samples.push(Sample {
                id: id.clone(),
                image: Arc::new(image),
                labels: Arc::new(labels),
            }),
            Err(reason) => rejected.push(Rejected { id: id.clone(), reason }),
        }
    }
    rejected.sort_by(|a, b| a.id.cmp(&b.id));
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable image/label pairs ({} rejected)",
            rejected.len()
        )));
    }
    Ok(LoadedDataset {
        dataset: SegDataset::new(samples, catalog.clone())?,
        rejected,
    })
}

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn load_pair(image_path: &Path, raster_path: &Path) -> std::result::Result<(RgbImage, GrayImage), String> {
    let image = image::open(image_path)
        .map_err(|e| format!("cannot read {}: {e}", image_path.display()))?
        .to_rgb8();
    let labels = match image::open(raster_path).map_err(|e| format!("cannot read {}: {e}", raster_path.display()))? {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(format!("label raster has colour type {:?}, expected 8-bit single channel", other.color())),
    };
    if image.dimensions() != labels.dimensions() {
        return Err(format!(
            "size mismatch: image {:?}, labels {:?}",
            image.dimensions(),
            labels.dimensions()
        ));
    }
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    #[test]
    fn round_trip_preserves_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_images: 12,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset_root(dir.path()).unwrap();
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.dataset, ds);
    }

    #[test]
    fn empty_directories_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        let catalog = Catalog::new([(1, "x".to_string())]).unwrap();
        assert!(load_dataset(&dir.path().join("a"), &dir.path().join("b"), &catalog).is_err());
    }

    #[test]
    fn mismatched_pair_is_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_images: 4,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 9).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let small = BinaryMask::filled(8, 8, false);
        write_mask_pgm(&small, &dir.path().join("labels/0002.pgm")).unwrap();
        fs::remove_file(dir.path().join("labels/0003.pgm")).unwrap();
        let loaded = load_dataset_root(dir.path()).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        let ids: Vec<&str> = loaded.rejected.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["0002", "0003"]);
    }

    #[test]
    fn out_of_catalog_label_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_images: 3,
            ..SyntheticConfig::default()
        };
        save_dataset(&generate_synthetic(&cfg, 2).unwrap(), dir.path()).unwrap();
        let narrow = Catalog::new([(1, "only".to_string())]).unwrap();
        let r = load_dataset(&dir.path().join("images"), &dir.path().join("labels"), &narrow);
        assert!(matches!(r, Err(Error::Dataset(_))));
    }
}
