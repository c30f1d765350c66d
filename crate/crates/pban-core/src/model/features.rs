//! Stage feature-map export: runs the network over an image's patch grid
//! and writes one grayscale PNG per (branch, block, stage), stitched back
//! into the image's patch layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Var;
use crate::data::image::{extract_patches, write_gray_png, ImageRGB};
use crate::error::{PbanError, Result};
use crate::model::{verify_weights, Forward, NamedWeights, PBANConfig, Variant, STAGE_LABELS};
use crate::tensor::Tensor;

/// Network input spatial size; images are tiled into non-overlapping
/// squares of this size and remainders are discarded.
pub const PATCH_SIZE: usize = 32;

/// Patches per forward pass when sweeping an image.
const CHUNK: usize = 4;

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

/// Stacks [3,P,P] patches into one [B,3,P,P] batch.
pub(crate) fn stack_patches(patches: &[Tensor<f32>]) -> Tensor<f32> {
    let per = 3 * PATCH_SIZE * PATCH_SIZE;
    let mut data = Vec::with_capacity(patches.len() * per);
    for p in patches {
        data.extend_from_slice(p.as_slice());
    }
    Tensor::from_fn(&[patches.len(), 3, PATCH_SIZE, PATCH_SIZE], |i| data[i])
}

/// Runs the model over `sr` (and `hr` for the two-branch variant), writes
/// one stitched grayscale PNG per captured stage into `out_dir`, and
/// returns the written paths in name order. Map values are min-max scaled
/// to [0,255] per file; a constant map writes as all zeros.
pub fn dump_features(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    sr: &ImageRGB,
    hr: Option<&ImageRGB>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    verify_weights(cfg, weights)?;
    let hr = match (cfg.variant, hr) {
        (Variant::Fr, Some(hr)) => Some(hr),
        (Variant::Fr, None) => {
            return Err(PbanError::Parameter(
                "two-branch model requires a reference image".into(),
            ))
        }
        (Variant::Nr, _) => None,
    };
    if let Some(hr) = hr {
        if (hr.width, hr.height) != (sr.width, sr.height) {
            return Err(PbanError::Data(format!(
                "image sizes differ: {}x{} vs reference {}x{}",
                sr.width, sr.height, hr.width, hr.height
            )));
        }
    }
    let sr_patches = extract_patches(sr, PATCH_SIZE)?;
    if sr_patches.is_empty() {
        return Err(PbanError::Data(format!(
            "image {}x{} is smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch",
            sr.width, sr.height
        )));
    }
    let hr_patches = hr.map(|hr| extract_patches(hr, PATCH_SIZE)).transpose()?;
    let rows = sr.height / PATCH_SIZE;
    let cols = sr.width / PATCH_SIZE;

    // (branch, block, stage index) -> one tile per patch, in grid order.
    let mut maps: BTreeMap<(String, usize, usize), Vec<Vec<f32>>> = BTreeMap::new();
    let total = sr_patches.len();
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let sr_batch = Var::constant(stack_patches(&sr_patches[start..end]));
        let mut hook = |branch: &str, block: usize, label: &str, t: &Tensor<f32>| {
            let stage = STAGE_LABELS
                .iter()
                .position(|l| *l == label)
                .expect("unknown stage label");
            let shape = t.shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let data = t.as_slice();
            let entry = maps.entry((branch.to_string(), block, stage)).or_default();
            for item in 0..b {
                let mut tile = vec![0f32; h * w];
                for ch in 0..c {
                    let base = (item * c + ch) * h * w;
                    for (acc, v) in tile.iter_mut().zip(&data[base..base + h * w]) {
                        *acc += v;
                    }
                }
                for v in &mut tile {
                    *v /= c as f32;
                }
                entry.push(tile);
            }
        };
        let mut fwd = Forward::eval(weights, cfg).with_capture(&mut hook);
        match &hr_patches {
            Some(hp) => {
                let hr_batch = Var::constant(stack_patches(&hp[start..end]));
                fwd.fr(&hr_batch, &sr_batch)?;
            }
            None => {
                fwd.nr(&sr_batch)?;
            }
        }
        start = end;
    }

    fs::create_dir_all(out_dir).map_err(|e| PbanError::io(out_dir, e))?;
    let mut files = Vec::new();
    for ((branch, block, stage), tiles) in &maps {
        if tiles.len() != total {
            return Err(PbanError::Contract(format!(
                "stage {branch}/{block}/{stage} captured {} tiles for {total} patches",
                tiles.len()
            )));
        }
        let (gw, gh) = (cols * PATCH_SIZE, rows * PATCH_SIZE);
        let mut grid = vec![0f32; gw * gh];
        for (i, tile) in tiles.iter().enumerate() {
            let (py, px) = (i / cols, i % cols);
            for y in 0..PATCH_SIZE {
                let drow = (py * PATCH_SIZE + y) * gw + px * PATCH_SIZE;
                grid[drow..drow + PATCH_SIZE]
                    .copy_from_slice(&tile[y * PATCH_SIZE..(y + 1) * PATCH_SIZE]);
            }
        }
        let lo = grid.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = grid.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let bytes: Vec<u8> = if hi > lo {
            grid.iter()
                .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
                .collect()
        } else {
            vec![0u8; grid.len()]
        };
        let prefix = if branch.is_empty() { "main" } else { branch };
        let name = format!(
            "{prefix}_block{block}_s{}_{}.png",
            stage + 1,
            slug(STAGE_LABELS[*stage])
        );
        let path = out_dir.join(name);
        write_gray_png(&path, &bytes, gw, gh)?;
        files.push(path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::read_image;
    use crate::model::init_weights;

    fn test_image(width: usize, height: usize, f: impl Fn(usize) -> f32) -> ImageRGB {
        let t = Tensor::from_fn(&[3, height, width], |i| f(i).clamp(0.0, 1.0));
        ImageRGB::from_pixels(t).unwrap()
    }

    #[test]
    fn two_branch_dump_writes_ten_maps_per_block_pair() {
        let cfg = PBANConfig::micro();
        let w = init_weights::<f32>(&cfg, 11).unwrap();
        let sr = test_image(64, 32, |i| (i % 97) as f32 / 96.0);
        let hr = test_image(64, 32, |i| (i % 89) as f32 / 88.0);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_features(&w, &cfg, &sr, Some(&hr), dir.path()).unwrap();
        assert_eq!(files.len(), 2 * 5 * cfg.blocks);
        for f in &files {
            let img = read_image(f).unwrap();
            assert_eq!((img.width, img.height), (64, 32), "{f:?}");
        }
        let names: Vec<String> = files
            .iter()
            .map(|f| f.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert!(names.contains(&"hr_block0_s1_image-before-pba.png".to_string()));
        assert!(names.contains(&"sr_block0_s5_after-pba-block.png".to_string()));
    }

    #[test]
    fn dump_is_deterministic() {
        let cfg = PBANConfig::micro();
        let w = init_weights::<f32>(&cfg, 5).unwrap();
        let sr = test_image(32, 32, |i| (i % 53) as f32 / 52.0);
        let hr = test_image(32, 32, |i| (i % 31) as f32 / 30.0);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = dump_features(&w, &cfg, &sr, Some(&hr), d1.path()).unwrap();
        let f2 = dump_features(&w, &cfg, &sr, Some(&hr), d2.path()).unwrap();
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn constant_stage_map_writes_as_all_zeros() {
        let cfg = PBANConfig::micro();
        let mut w = init_weights::<f32>(&cfg, 2).unwrap();
        // Silence the hr encoder (zero conv and BN scale) so its output, the
        // first captured stage, is exactly constant.
        for path in [
            "hr.encoder.conv.weight",
            "hr.encoder.conv.bias",
            "hr.encoder.bn.gamma",
            "hr.encoder.bn.beta",
        ] {
            let shape = w.get(path).unwrap().shape().to_vec();
            w.insert(path.to_string(), Tensor::zeros(&shape));
        }
        let img = test_image(32, 32, |i| (i % 13) as f32 / 12.0);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_features(&w, &cfg, &img, Some(&img), dir.path()).unwrap();
        let s1 = files
            .iter()
            .find(|f| f.to_str().unwrap().contains("hr_block0_s1"))
            .unwrap();
        let out = read_image(s1).unwrap();
        assert!(out.pixels.as_slice().iter().all(|&v| v == 0.0));
        // The untouched sr branch still produces a non-constant map.
        let sr1 = files
            .iter()
            .find(|f| f.to_str().unwrap().contains("sr_block0_s1"))
            .unwrap();
        let sr_out = read_image(sr1).unwrap();
        assert!(sr_out.pixels.as_slice().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn undersized_or_mismatched_images_are_rejected() {
        let cfg = PBANConfig::micro();
        let w = init_weights::<f32>(&cfg, 2).unwrap();
        let small = test_image(16, 16, |_| 0.1);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            dump_features(&w, &cfg, &small, Some(&small), dir.path()),
            Err(PbanError::Data(_))
        ));
        let a = test_image(32, 32, |_| 0.1);
        let b = test_image(64, 32, |_| 0.1);
        assert!(matches!(
            dump_features(&w, &cfg, &a, Some(&b), dir.path()),
            Err(PbanError::Data(_))
        ));
        assert!(matches!(
            dump_features(&w, &cfg, &a, None, dir.path()),
            Err(PbanError::Parameter(_))
        ));
    }

    #[test]
    fn single_branch_variant_dumps_five_maps_per_block() {
        let mut cfg = PBANConfig::micro();
        cfg.variant = Variant::Nr;
        cfg.attention_mode = crate::model::AttentionMode::SelfAttention;
        cfg.fusion_dims = vec![cfg.head_dims[2], 16, 1];
        cfg.validate().unwrap();
        let w = init_weights::<f32>(&cfg, 3).unwrap();
        let img = test_image(32, 64, |i| (i % 71) as f32 / 70.0);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_features(&w, &cfg, &img, None, dir.path()).unwrap();
        assert_eq!(files.len(), 5 * cfg.blocks);
        assert!(files
            .iter()
            .all(|f| f.file_name().unwrap().to_str().unwrap().starts_with("main_")));
    }
}
