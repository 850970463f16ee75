use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{
    Cohort, DataKind, EcgRecord, ImageStack, PhenotypeVector, SubjectRecord, TabularRecord,
    TabularSchema, ALL_DATA_KINDS, DEFAULT_SAMPLING_RATE_HZ, ECG_LEADS, ECG_SECONDS, IMG_SIZE,
    SLICES,
};
use crate::{Error, Result};

pub const SCHEMA_FILE: &str = "schema.json";
pub const PHENOTYPES_FILE: &str = "phenotypes.json";

/// Result of loading a cohort directory: the valid records, the rejected
/// subject ids with reasons, and every file that was actually opened (the
/// access log used by the modality-gating tests).
#[derive(Debug)]
pub struct LoadOutcome {
    pub cohort: Cohort,
    pub rejected: Vec<(String, String)>,
    pub files_read: Vec<PathBuf>,
}

/// Loads a complete cohort: records missing any of localizer/ecg/tabular
/// (or with invalid phenotypes) are rejected with a reason.
pub fn load_cohort(root: &Path) -> Result<LoadOutcome> {
    load_cohort_subset(root, &ALL_DATA_KINDS)
}

/// Loads only the requested per-subject files; completeness is enforced
/// for the requested kinds only. Phenotypes and the schema are always
/// required.
pub fn load_cohort_subset(root: &Path, kinds: &[DataKind]) -> Result<LoadOutcome> {
    let schema_path = root.join(SCHEMA_FILE);
    let mut files_read = vec![schema_path.clone()];
    let schema: TabularSchema = read_json(&schema_path)?;
    schema.validate().map_err(|e| Error::Config(format!("malformed schema: {e}")))?;

    let mut subject_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subject_dirs.sort();

    let mut subjects = Vec::new();
    let mut rejected = Vec::new();
    for dir in subject_dirs {
        let subject_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("non-UTF8 subject directory {dir:?}")))?
            .to_string();
        match load_subject(&dir, &subject_id, &schema, kinds, &mut files_read) {
            Ok(record) => subjects.push(record),
            Err(reason) => rejected.push((subject_id, reason.to_string())),
        }
    }
    Ok(LoadOutcome { cohort: Cohort::new(subjects, schema)?, rejected, files_read })
}

fn load_subject(
    dir: &Path,
    subject_id: &str,
    schema: &TabularSchema,
    kinds: &[DataKind],
    files_read: &mut Vec<PathBuf>,
) -> Result<SubjectRecord> {
    let mut record = SubjectRecord {
        subject_id: subject_id.to_string(),
        localizer: None,
        cmr: None,
        ecg: None,
        tabular: None,
        phenotypes: load_phenotypes(dir, schema, files_read)?,
        split: None,
    };
    for &kind in kinds {
        let path = dir.join(kind.file_name());
        if !path.exists() {
            return Err(Error::Invalid(format!("missing modality: {}", kind.file_name())));
        }
        files_read.push(path.clone());
        match kind {
            DataKind::Localizer => record.localizer = Some(load_stack(&path)?),
            DataKind::Cmr => record.cmr = Some(load_stack(&path)?),
            DataKind::Ecg => record.ecg = Some(load_ecg(&path)?),
            DataKind::Tabular => record.tabular = Some(load_tabular(&path, schema)?),
        }
    }
    Ok(record)
}

fn load_stack(path: &Path) -> Result<ImageStack> {
    let (shape, data) = read_npy_f32(path)?;
    if shape != [SLICES, IMG_SIZE, IMG_SIZE] {
        return Err(Error::Shape(format!("{path:?}: unexpected shape {shape:?}")));
    }
    let voxels = Array3::from_shape_vec((SLICES, IMG_SIZE, IMG_SIZE), data)
        .map_err(|e| Error::Shape(format!("{path:?}: {e}")))?;
    ImageStack::validated(voxels)
}

fn load_ecg(path: &Path) -> Result<EcgRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let timesteps = ECG_SECONDS * DEFAULT_SAMPLING_RATE_HZ as usize;
    let expected = ECG_LEADS * timesteps * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{path:?}: expected {expected} bytes ([{ECG_LEADS}, {timesteps}] f32), got {}",
            bytes.len()
        )));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let samples = Array2::from_shape_vec((ECG_LEADS, timesteps), samples)
        .map_err(|e| Error::Shape(format!("{path:?}: {e}")))?;
    EcgRecord::validated(samples, DEFAULT_SAMPLING_RATE_HZ)
}

fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<TabularRecord> {
    #[derive(serde::Deserialize)]
    struct TabularFile {
        numeric: BTreeMap<String, f64>,
        categorical: BTreeMap<String, usize>,
    }
    let file: TabularFile = read_json(path)?;
    let n_base = schema.numeric.len() - if schema.inject_phenotypes { super::PHENOTYPE_COUNT } else { 0 };
    let mut numeric = Vec::with_capacity(n_base);
    for feature in schema.numeric.iter().take(n_base) {
        let value = file
            .numeric
            .get(&feature.name)
            .ok_or_else(|| Error::Invalid(format!("tabular missing numeric feature {}", feature.name)))?;
        numeric.push(*value);
    }
    let mut categorical = Vec::with_capacity(schema.categorical.len());
    for feature in &schema.categorical {
        let value = file.categorical.get(&feature.name).ok_or_else(|| {
            Error::Invalid(format!("tabular missing categorical feature {}", feature.name))
        })?;
        categorical.push(*value);
    }
    let record = TabularRecord { numeric, categorical };
    schema.record_matches(&record)?;
    Ok(record)
}

fn load_phenotypes(
    dir: &Path,
    schema: &TabularSchema,
    files_read: &mut Vec<PathBuf>,
) -> Result<PhenotypeVector> {
    let path = dir.join(PHENOTYPES_FILE);
    if !path.exists() {
        return Err(Error::Invalid("missing phenotypes.json".into()));
    }
    files_read.push(path.clone());
    let map: BTreeMap<String, f64> = read_json(&path)?;
    if map.len() != schema.phenotype_names.len() {
        return Err(Error::Invalid(format!(
            "phenotype length ≠ {} (got {})",
            schema.phenotype_names.len(),
            map.len()
        )));
    }
    let mut values = Vec::with_capacity(schema.phenotype_names.len());
    for name in &schema.phenotype_names {
        let value = map
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("phenotypes missing {name}")))?;
        values.push(*value);
    }
    PhenotypeVector::validated(values)
}

/// Writes the full cohort in the canonical directory layout.
pub fn save_cohort(cohort: &Cohort, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join(SCHEMA_FILE), &cohort.schema)?;
    for subject in &cohort.subjects {
        let dir = root.join(&subject.subject_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Some(stack) = &subject.localizer {
            write_npy_f32(
                &dir.join(DataKind::Localizer.file_name()),
                &[SLICES, IMG_SIZE, IMG_SIZE],
                stack.voxels.as_slice().expect("standard layout"),
            )?;
        }
        if let Some(stack) = &subject.cmr {
            write_npy_f32(
                &dir.join(DataKind::Cmr.file_name()),
                &[SLICES, IMG_SIZE, IMG_SIZE],
                stack.voxels.as_slice().expect("standard layout"),
            )?;
        }
        if let Some(ecg) = &subject.ecg {
            let path = dir.join(DataKind::Ecg.file_name());
            let mut bytes = Vec::with_capacity(ecg.samples.len() * 4);
            for &v in ecg.samples.as_slice().expect("standard layout") {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(tabular) = &subject.tabular {
            let n_base = cohort.schema.numeric.len()
                - if cohort.schema.inject_phenotypes { super::PHENOTYPE_COUNT } else { 0 };
            let numeric: BTreeMap<&str, f64> = cohort
                .schema
                .numeric
                .iter()
                .take(n_base)
                .zip(&tabular.numeric)
                .map(|(f, &v)| (f.name.as_str(), v))
                .collect();
            let categorical: BTreeMap<&str, usize> = cohort
                .schema
                .categorical
                .iter()
                .zip(&tabular.categorical)
                .map(|(f, &v)| (f.name.as_str(), v))
                .collect();
            write_json(
                &dir.join(DataKind::Tabular.file_name()),
                &serde_json::json!({ "numeric": numeric, "categorical": categorical }),
            )?;
        }
        let phenotypes: BTreeMap<&str, f64> = cohort
            .schema
            .phenotype_names
            .iter()
            .map(|n| n.as_str())
            .zip(subject.phenotypes.values.iter().copied())
            .collect();
        write_json(&dir.join(PHENOTYPES_FILE), &phenotypes)?;
    }
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ── Minimal NPY v1.0 (C-order f32) ─────────────────────────────────────────

/// Writes a little-endian f32 array in NPY v1.0 format.
pub fn write_npy_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "npy shape {shape:?} wants {count} elements, got {}",
            data.len()
        )));
    }
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header =
        format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    let unpadded = 8 + 2 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(padding));
    header.push('\n');

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(b"\x93NUMPY\x01\x00").map_err(io_err)?;
    w.write_all(&(header.len() as u16).to_le_bytes()).map_err(io_err)?;
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a little-endian C-order f32 NPY file (v1.0 or v2.0 header).
pub fn read_npy_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic[..6] != b"\x93NUMPY" {
        return Err(Error::Invalid(format!("{path:?}: not an NPY file")));
    }
    let header_len = match magic[6] {
        1 => {
            let mut b = [0u8; 2];
            file.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            file.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Invalid(format!("{path:?}: unsupported NPY version {v}"))),
    };
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header = String::from_utf8_lossy(&header);
    if !header.contains("'<f4'") {
        return Err(Error::Invalid(format!("{path:?}: only '<f4' arrays supported")));
    }
    if !header.contains("False") {
        return Err(Error::Invalid(format!("{path:?}: fortran_order arrays unsupported")));
    }
    let shape = parse_shape(&header)
        .ok_or_else(|| Error::Invalid(format!("{path:?}: malformed NPY shape")))?;
    let count: usize = shape.iter().product();
    let mut bytes = Vec::with_capacity(count * 4);
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(Error::Shape(format!(
            "{path:?}: payload is {} bytes, shape {shape:?} wants {}",
            bytes.len(),
            count * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

fn parse_shape(header: &str) -> Option<Vec<usize>> {
    let start = header.find("'shape':")? + "'shape':".len();
    let open = header[start..].find('(')? + start + 1;
    let close = header[open..].find(')')? + open;
    header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect()
}
