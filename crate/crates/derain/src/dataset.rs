//! On-disk dataset layout:
//!
//! ```text
//! <root>/rain/<id>.png      rainy observations
//! <root>/norain/<id>.png    clean backgrounds
//! <root>/latents/<id>.rcdt  per-image rain maps (H, W, N), when generated
//! <root>/C_true.rcdt        the shared kernel bank (k, k, N, 3)
//! ```
//!
//! Matching ids pair the two image directories; scanning returns pairs in
//! sorted id order so write-then-scan round-trips.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgio;
use crate::model::Image;
use crate::synth::SynthPair;
use crate::tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PairPaths {
    pub id: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

/// Write a full synthetic dataset, including the shared bank and per-image
/// map latents.
pub fn write_dataset(root: &Path, bank_tensor: &tensor::Tensor, pairs: &[SynthPair]) -> Result<()> {
    std::fs::create_dir_all(root.join("rain"))?;
    std::fs::create_dir_all(root.join("norain"))?;
    std::fs::create_dir_all(root.join("latents"))?;
    tensor::save_rcdt(root.join("C_true.rcdt"), bank_tensor)?;
    for (idx, pair) in pairs.iter().enumerate() {
        let id = format!("{idx:04}");
        imgio::save_png(&root.join("rain").join(format!("{id}.png")), &pair.o)?;
        imgio::save_png(&root.join("norain").join(format!("{id}.png")), &pair.b_true)?;
        tensor::save_rcdt(
            root.join("latents").join(format!("{id}.rcdt")),
            &pair.m_true.to_tensor(),
        )?;
    }
    Ok(())
}

/// Scan a dataset root for rain/norain pairs with matching ids, sorted by id.
pub fn scan_pairs(root: &Path) -> Result<Vec<PairPaths>> {
    let rain_dir = root.join("rain");
    let clean_dir = root.join("norain");
    if !rain_dir.is_dir() || !clean_dir.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} must contain rain/ and norain/ directories",
            root.display()
        )));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&rain_dir)? {
        let path = entry?.path();
        if path.extension().map_or(false, |e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let rainy = rain_dir.join(format!("{id}.png"));
        let clean = clean_dir.join(format!("{id}.png"));
        if !clean.is_file() {
            return Err(Error::Data(format!("no clean counterpart for id {id}")));
        }
        pairs.push(PairPaths { id, rainy, clean });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no image pairs under {}", root.display())));
    }
    Ok(pairs)
}

/// Load all pairs as (rainy, clean) images, sorted by id.
pub fn load_pairs(root: &Path) -> Result<Vec<(Image, Image)>> {
    scan_pairs(root)?
        .into_iter()
        .map(|p| Ok((imgio::load_png(&p.rainy)?, imgio::load_png(&p.clean)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    #[test]
    fn write_then_scan_roundtrips_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let (bank, pairs) = generate_dataset(&cfg, 3, 16, 16, 1).unwrap();
        write_dataset(dir.path(), &bank.to_tensor(), &pairs).unwrap();

        let scanned = scan_pairs(dir.path()).unwrap();
        assert_eq!(scanned.len(), 3);
        let ids: Vec<&str> = scanned.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["0000", "0001", "0002"]);

        let loaded = load_pairs(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        // png quantization: loaded values within half a step of the originals
        for ((o, b), pair) in loaded.iter().zip(&pairs) {
            assert!(o.sub(&pair.o.clamp(0.0, 1.0)).max_abs() <= 0.5 / 255.0 + 1e-12);
            assert!(b.sub(&pair.b_true).max_abs() <= 0.5 / 255.0 + 1e-12);
        }

        let bank_back = tensor::load_rcdt(dir.path().join("C_true.rcdt")).unwrap();
        assert_eq!(bank_back.shape(), bank.to_tensor().shape());
    }

    #[test]
    fn missing_counterpart_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("rain")).unwrap();
        std::fs::create_dir_all(dir.path().join("norain")).unwrap();
        imgio::save_png(&dir.path().join("rain/0000.png"), &Image::constant(4, 4, 0.5)).unwrap();
        assert!(matches!(scan_pairs(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("rain")).unwrap();
        std::fs::create_dir_all(dir.path().join("norain")).unwrap();
        assert!(matches!(scan_pairs(dir.path()), Err(Error::Data(_))));
    }
}
