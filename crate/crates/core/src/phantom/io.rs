use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{canonical_sequences, PhantomError, StudyVolume};
use crate::grid::{Grid3, Mask3, Shape3, Spacing3};

const VOL_MAGIC: &[u8; 8] = b"SQFVOL\x01\x00";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GT_FILE: &str = "gt.vol";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub canonical_sequences: Vec<String>,
    pub patients: Vec<PatientEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Stored sequences, canonical ones first in canonical order.
    pub sequences: Vec<String>,
    /// Presence flags aligned with `canonical_sequences`.
    pub presence: Vec<bool>,
    pub has_gt: bool,
    pub gt_lesion_count: usize,
}

impl Manifest {
    pub fn grid_entries(&self) -> usize {
        self.patients.iter().map(|p| p.sequences.len()).sum()
    }

    pub fn mask_entries(&self) -> usize {
        self.patients.iter().filter(|p| p.has_gt).count()
    }
}

/// Writes a raw little-endian float volume with a shape/spacing header.
pub fn write_vol(path: &Path, grid: &Grid3, spacing: Spacing3) -> Result<(), PhantomError> {
    let file = File::create(path).map_err(|e| PhantomError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(VOL_MAGIC)?;
        for &n in &grid.shape() {
            w.write_u64::<LittleEndian>(n as u64)?;
        }
        for &s in &spacing {
            w.write_f64::<LittleEndian>(s)?;
        }
        for &v in grid.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()
    })();
    res.map_err(|e| PhantomError::io(path, e))
}

pub fn read_vol(path: &Path) -> Result<(Grid3, Spacing3), PhantomError> {
    let file = File::open(path).map_err(|e| PhantomError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| PhantomError::io(path, e))?;
    if &magic != VOL_MAGIC {
        return Err(PhantomError::Corrupt(format!("{} is not a volume file", path.display())));
    }
    let res = (|| -> std::io::Result<(Shape3, Spacing3, Vec<f32>)> {
        let mut shape = [0usize; 3];
        for s in &mut shape {
            *s = r.read_u64::<LittleEndian>()? as usize;
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            *s = r.read_f64::<LittleEndian>()?;
        }
        let n = shape.iter().product::<usize>();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "trailing bytes after volume data",
            ));
        }
        Ok((shape, spacing, data))
    })();
    let (shape, spacing, data) = res.map_err(|e| {
        PhantomError::Corrupt(format!("{}: {e}", path.display()))
    })?;
    let grid = Grid3::from_vec(shape, data).expect("length checked by read");
    Ok((grid, spacing))
}

fn ordered_names(volume: &StudyVolume, canonical: &[String]) -> Vec<String> {
    let mut out: Vec<String> = canonical
        .iter()
        .filter(|n| volume.sequences.contains_key(*n))
        .cloned()
        .collect();
    out.extend(
        volume
            .sequences
            .keys()
            .filter(|n| !canonical.contains(n))
            .cloned(),
    );
    out
}

/// Writes `volumes` under `root` and returns the manifest path.
pub fn write_dataset(
    volumes: &[StudyVolume],
    root: &Path,
    overwrite: bool,
) -> Result<PathBuf, PhantomError> {
    let mut seen = HashSet::new();
    for v in volumes {
        if !seen.insert(v.patient_id.as_str()) {
            return Err(PhantomError::DuplicatePatient(v.patient_id.clone()));
        }
    }
    if root.exists() && !overwrite {
        let mut entries = fs::read_dir(root).map_err(|e| PhantomError::io(root, e))?;
        if entries.next().is_some() {
            return Err(PhantomError::RootNotEmpty(root.display().to_string()));
        }
    }
    fs::create_dir_all(root).map_err(|e| PhantomError::io(root, e))?;

    let canonical = canonical_sequences();
    let mut patients = Vec::with_capacity(volumes.len());
    for v in volumes {
        let shape = v
            .shape()
            .ok_or_else(|| PhantomError::Corrupt(format!("patient {} has no grids", v.patient_id)))?;
        let dir = root.join(&v.patient_id);
        fs::create_dir_all(&dir).map_err(|e| PhantomError::io(&dir, e))?;
        let names = ordered_names(v, &canonical);
        for name in &names {
            let grid = &v.sequences[name];
            if grid.shape() != shape {
                return Err(PhantomError::Corrupt(format!(
                    "patient {} sequence {name} has shape {:?}, expected {shape:?}",
                    v.patient_id,
                    grid.shape()
                )));
            }
            write_vol(&dir.join(format!("{name}.vol")), grid, v.spacing_mm)?;
        }
        if let Some(gt) = &v.gt_mask {
            write_vol(&dir.join(GT_FILE), &gt.to_grid(), v.spacing_mm)?;
        }
        patients.push(PatientEntry {
            id: v.patient_id.clone(),
            shape,
            spacing_mm: v.spacing_mm,
            presence: v.presence(&canonical),
            sequences: names,
            has_gt: v.gt_mask.is_some(),
            gt_lesion_count: v.gt_lesion_count,
        });
    }
    let manifest = Manifest {
        version: 1,
        canonical_sequences: canonical,
        patients,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| PhantomError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(root: &Path) -> Result<Manifest, PhantomError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| PhantomError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for p in &manifest.patients {
        if p.presence.len() != manifest.canonical_sequences.len() {
            return Err(PhantomError::Corrupt(format!(
                "patient {} presence vector has {} entries, expected {}",
                p.id,
                p.presence.len(),
                manifest.canonical_sequences.len()
            )));
        }
    }
    Ok(manifest)
}

/// Reads a dataset. With a filter, only the named sequences are loaded; the
/// rest are left absent.
pub fn read_dataset(
    root: &Path,
    sequence_filter: Option<&BTreeSet<String>>,
) -> Result<Vec<StudyVolume>, PhantomError> {
    if let Some(f) = sequence_filter {
        if f.is_empty() {
            return Err(PhantomError::EmptyFilter);
        }
    }
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let dir = root.join(&p.id);
        let mut sequences = BTreeMap::new();
        for name in &p.sequences {
            if sequence_filter.is_some_and(|f| !f.contains(name)) {
                continue;
            }
            let (grid, spacing) = read_vol(&dir.join(format!("{name}.vol")))?;
            check_header(&p.id, name, grid.shape(), spacing, p)?;
            sequences.insert(name.clone(), grid);
        }
        if sequences.is_empty() {
            return Err(PhantomError::EmptyFilter);
        }
        let gt_mask = if p.has_gt {
            let (grid, spacing) = read_vol(&dir.join(GT_FILE))?;
            check_header(&p.id, GT_FILE, grid.shape(), spacing, p)?;
            Some(Mask3::from_grid(&grid))
        } else {
            None
        };
        out.push(StudyVolume {
            patient_id: p.id.clone(),
            sequences,
            spacing_mm: p.spacing_mm,
            gt_mask,
            gt_lesion_count: p.gt_lesion_count,
        });
    }
    Ok(out)
}

fn check_header(
    id: &str,
    name: &str,
    shape: Shape3,
    spacing: Spacing3,
    entry: &PatientEntry,
) -> Result<(), PhantomError> {
    if shape != entry.shape || spacing != entry.spacing_mm {
        return Err(PhantomError::Corrupt(format!(
            "patient {id} file {name}: header shape {shape:?} spacing {spacing:?} disagrees with manifest {:?} {:?}",
            entry.shape, entry.spacing_mm
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn spec() -> PhantomSpec {
        PhantomSpec {
            grid_shape: [8, 16, 16],
            n_lesions_range: [1, 2],
            lesion_radius_range_mm: [1.0, 2.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_phantom(&spec(), "a").unwrap();
        write_dataset(std::slice::from_ref(&v), dir.path(), false).unwrap();
        let back = read_dataset(dir.path(), None).unwrap();
        assert_eq!(back, vec![v]);
    }

    #[test]
    fn manifest_counts_entries() {
        let dir = tempfile::tempdir().unwrap();
        let vols: Vec<_> = ["a", "b"]
            .iter()
            .map(|id| generate_phantom(&spec(), id).unwrap())
            .collect();
        write_dataset(&vols, dir.path(), false).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.grid_entries(), 8);
        assert_eq!(m.mask_entries(), 2);
    }

    #[test]
    fn missing_pre_contrast_is_recorded_in_presence() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = generate_phantom(&spec(), "oslo").unwrap();
        v.sequences.remove("CUBE-pre");
        write_dataset(&[v], dir.path(), false).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.patients[0].presence, vec![false, true, true, true]);
        let back = read_dataset(dir.path(), None).unwrap();
        assert!(!back[0].sequences.contains_key("CUBE-pre"));
        assert_eq!(back[0].sequences.len(), 3);
    }

    #[test]
    fn filter_leaves_sequences_absent() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_phantom(&spec(), "a").unwrap();
        write_dataset(&[v], dir.path(), false).unwrap();
        let filter: BTreeSet<String> = ["CUBE-pre", "CUBE-post", "FLAIR"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let back = read_dataset(dir.path(), Some(&filter)).unwrap();
        assert_eq!(back[0].sequences.len(), 3);
        assert!(!back[0].sequences.contains_key("BRAVO-post"));
        assert!(matches!(
            read_dataset(dir.path(), Some(&BTreeSet::new())),
            Err(PhantomError::EmptyFilter)
        ));
    }

    #[test]
    fn refuses_non_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), b"x").unwrap();
        let v = generate_phantom(&spec(), "a").unwrap();
        assert!(matches!(
            write_dataset(std::slice::from_ref(&v), dir.path(), false),
            Err(PhantomError::RootNotEmpty(_))
        ));
        write_dataset(&[v], dir.path(), true).unwrap();
    }

    #[test]
    fn shape_mismatch_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_phantom(&spec(), "a").unwrap();
        write_dataset(&[v], dir.path(), false).unwrap();
        let bad = Grid3::zeros([8, 16, 15]);
        write_vol(&dir.path().join("a").join("FLAIR.vol"), &bad, [1.0; 3]).unwrap();
        assert!(matches!(
            read_dataset(dir.path(), None),
            Err(PhantomError::Corrupt(_))
        ));
    }
}
