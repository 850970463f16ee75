//! Attention-map extraction and latent-embedding export for external
//! projection tools.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::contrastive::AlignmentModel;
use crate::data_model::{Cohort, ImageStack, Modality, IMG_SIZE};
use crate::encoders::ModalityEncoder;
use crate::patching;
use crate::{Error, Result};

/// Head-averaged attention from the [CLS] query to every patch key in the
/// final block, for an already patchified sequence. Softmax row sums are
/// checked at extraction.
pub fn cls_attention(
    encoder: &ModalityEncoder,
    seq: &patching::TokenSequence,
) -> Result<Array1<f64>> {
    let (_, cache) = encoder.encoder.encode(seq, None)?;
    let last = cache
        .block_caches
        .last()
        .ok_or_else(|| Error::Invalid("encoder has no attention blocks to introspect".into()))?;
    let probs = &last.attn.probs;
    let n_keys = seq.num_tokens();
    let mut averaged = Array1::zeros(n_keys);
    for head in probs {
        let row_sum: f64 = head.row(0).sum();
        if (row_sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "attention row sum {row_sum} != 1 at extraction"
            )));
        }
        for k in 0..n_keys {
            averaged[k] += head[[0, k + 1]] / probs.len() as f64;
        }
    }
    Ok(averaged)
}

/// [CLS] self-attention of the final block, head-averaged, reshaped to the
/// patch grid, bilinearly up-sampled to `224x224` and min-max normalized
/// to `[0, 1]`.
pub fn attention_map(encoder: &ModalityEncoder, stack: &ImageStack) -> Result<Array2<f64>> {
    if encoder.modality() != Modality::Localizer {
        return Err(Error::Invalid(format!(
            "attention maps are extracted from the image encoder, not {:?}",
            encoder.modality()
        )));
    }
    let patch = encoder.encoder.cfg.patch_size;
    let grid = IMG_SIZE / patch;
    let seq = patching::patchify_image(stack, patch)?;
    let attn = cls_attention(encoder, &seq)?;

    let coarse = Array2::from_shape_fn((grid, grid), |(gy, gx)| attn[gy * grid + gx]);
    let mut map = bilinear_upsample(&coarse, IMG_SIZE);

    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (max - min).max(1e-12);
    map.mapv_inplace(|v| (v - min) / range);
    Ok(map)
}

/// Bilinear up-sampling with half-pixel alignment.
fn bilinear_upsample(coarse: &Array2<f64>, size: usize) -> Array2<f64> {
    let grid = coarse.nrows();
    let scale = size as f64 / grid as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(grid - 1);
        let x1 = (x0 + 1).min(grid - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        (coarse[[y0, x0]] * (1.0 - fx) + coarse[[y0, x1]] * fx) * (1.0 - fy)
            + (coarse[[y1, x0]] * (1.0 - fx) + coarse[[y1, x1]] * fx) * fy
    })
}

/// Saves an attention map as an 8-bit grayscale PNG.
pub fn save_attention_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Invalid(format!("writing {path:?}: {e}")))
}

/// One row per (subject, modality): the 256-dim projection plus the four
/// headline phenotypes and sex for coloring by external tools.
pub fn export_embeddings(
    model: &AlignmentModel,
    cohort: &Cohort,
    tag: &str,
    dir: &Path,
) -> Result<std::path::PathBuf> {
    let subjects: Vec<&crate::data_model::SubjectRecord> = cohort.subjects.iter().collect();
    let embeddings = crate::contrastive::embed_batch(model, &subjects, &cohort.schema)?;

    let index_of = |name: &str| -> Result<usize> {
        cohort
            .schema
            .phenotype_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("schema lacks phenotype {name}")))
    };
    let (i_lvm, i_lvef, i_rvef, i_rvedv) =
        (index_of("LVM[g]")?, index_of("LVEF[%]")?, index_of("RVEF[%]")?, index_of("RVEDV[mL]")?);
    let sex_feature = cohort
        .schema
        .categorical
        .iter()
        .position(|c| c.name == "sex")
        .ok_or_else(|| Error::Config("schema lacks a sex feature".into()))?;

    let mut out = String::from("subject_id,modality");
    for d in 0..crate::contrastive::PROJ_DIM {
        out.push_str(&format!(",dim_{d}"));
    }
    out.push_str(",lvm,lvef,rvef,rvedv,sex\n");

    for (subject, embedding) in subjects.iter().zip(&embeddings) {
        let phenos = &subject.phenotypes.values;
        let sex = subject.tabular.as_ref().map_or(0, |t| t.categorical[sex_feature]);
        for (code, z) in [("L", &embedding.z_l), ("E", &embedding.z_e), ("T", &embedding.z_t)] {
            let Some(z) = z else { continue };
            out.push_str(&subject.subject_id);
            out.push(',');
            out.push_str(code);
            for v in z.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(
                ",{},{},{},{},{}\n",
                phenos[i_lvm], phenos[i_lvef], phenos[i_rvef], phenos[i_rvedv], sex
            ));
        }
    }
    let path = dir.join(format!("embeddings_{tag}.csv"));
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
