//! Segmentation label vocabulary, label-map merging, and ROI math.
//!
//! Whole-body CT segmentations arrive with 117 fine-grained structure
//! labels (plus background 0). For organ-centric reasoning these collapse
//! into 56 merged structures: bilateral pairs fuse, vertebra groups fuse
//! into lumbar/thoracic/cervical blocks, the twelve ribs per side fuse,
//! and the colon is renamed to colorectum. [`RemapTable`] carries that
//! total, surjective mapping; [`LabelVolume`] applies it to voxel grids
//! and answers bounding-box and ROI queries.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::chain::Organ;

/// Number of merged labels including background.
pub const MERGED_LABEL_COUNT: usize = 57;
/// Number of source labels including background.
pub const SOURCE_LABEL_COUNT: usize = 118;

struct MergedEntry {
    id: u16,
    name: &'static str,
    sources: &'static [u16],
}

/// The merged vocabulary: id, name, and the source labels that fold into it.
static MERGED_TABLE: [MergedEntry; MERGED_LABEL_COUNT] = [
    MergedEntry { id: 0, name: "background", sources: &[0] },
    MergedEntry { id: 1, name: "spleen", sources: &[1] },
    MergedEntry { id: 2, name: "kidney_right", sources: &[2] },
    MergedEntry { id: 3, name: "kidney_left", sources: &[3] },
    MergedEntry { id: 4, name: "gallbladder", sources: &[4] },
    MergedEntry { id: 5, name: "liver", sources: &[5] },
    MergedEntry { id: 6, name: "stomach", sources: &[6] },
    MergedEntry { id: 7, name: "pancreas", sources: &[7] },
    MergedEntry { id: 8, name: "adrenal_gland_right", sources: &[8] },
    MergedEntry { id: 9, name: "adrenal_gland_left", sources: &[9] },
    MergedEntry { id: 10, name: "lung_upper_lobe_left", sources: &[10] },
    MergedEntry { id: 11, name: "lung_lower_lobe_left", sources: &[11] },
    MergedEntry { id: 12, name: "lung_upper_lobe_right", sources: &[12] },
    MergedEntry { id: 13, name: "lung_middle_lobe_right", sources: &[13] },
    MergedEntry { id: 14, name: "lung_lower_lobe_right", sources: &[14] },
    MergedEntry { id: 15, name: "esophagus", sources: &[15] },
    MergedEntry { id: 16, name: "trachea", sources: &[16] },
    MergedEntry { id: 17, name: "thyroid_gland", sources: &[17] },
    MergedEntry { id: 18, name: "small_bowel", sources: &[18] },
    MergedEntry { id: 19, name: "duodenum", sources: &[19] },
    MergedEntry { id: 20, name: "colorectum", sources: &[20] },
    MergedEntry { id: 21, name: "urinary_bladder", sources: &[21] },
    MergedEntry { id: 22, name: "prostate", sources: &[22] },
    MergedEntry { id: 23, name: "kidney_cyst", sources: &[23, 24] },
    MergedEntry { id: 24, name: "vertebrae_S1", sources: &[26] },
    MergedEntry { id: 25, name: "lumbar_vertebrae", sources: &[27, 28, 29, 30, 31] },
    MergedEntry {
        id: 26,
        name: "thoracic_vertebrae",
        sources: &[32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43],
    },
    MergedEntry { id: 27, name: "cervical_vertebrae", sources: &[44, 45, 46, 47, 48, 49, 50] },
    MergedEntry { id: 28, name: "sacrum", sources: &[25] },
    MergedEntry { id: 29, name: "humerus", sources: &[69, 70] },
    MergedEntry { id: 30, name: "scapula", sources: &[71, 72] },
    MergedEntry { id: 31, name: "clavicula", sources: &[73, 74] },
    MergedEntry { id: 32, name: "femur", sources: &[75, 76] },
    MergedEntry { id: 33, name: "hip", sources: &[77, 78] },
    MergedEntry {
        id: 34,
        name: "rib_left",
        sources: &[92, 93, 94, 95, 96, 97, 98, 99, 100, 101, 102, 103],
    },
    MergedEntry {
        id: 35,
        name: "rib_right",
        sources: &[104, 105, 106, 107, 108, 109, 110, 111, 112, 113, 114, 115],
    },
    MergedEntry { id: 36, name: "sternum", sources: &[116] },
    MergedEntry { id: 37, name: "costal_cartilages", sources: &[117] },
    MergedEntry { id: 38, name: "heart", sources: &[51] },
    MergedEntry { id: 39, name: "aorta", sources: &[52] },
    MergedEntry { id: 40, name: "pulmonary_vein", sources: &[53] },
    MergedEntry { id: 41, name: "brachiocephalic_trunk", sources: &[54] },
    MergedEntry { id: 42, name: "subclavian_artery", sources: &[55, 56] },
    MergedEntry { id: 43, name: "common_carotid_artery", sources: &[57, 58] },
    MergedEntry { id: 44, name: "brachiocephalic_vein", sources: &[59, 60] },
    MergedEntry { id: 45, name: "atrial_appendage_left", sources: &[61] },
    MergedEntry { id: 46, name: "superior_vena_cava", sources: &[62] },
    MergedEntry { id: 47, name: "inferior_vena_cava", sources: &[63] },
    MergedEntry { id: 48, name: "portal_vein_and_splenic_vein", sources: &[64] },
    MergedEntry { id: 49, name: "iliac_artery", sources: &[65, 66] },
    MergedEntry { id: 50, name: "iliac_vena", sources: &[67, 68] },
    MergedEntry { id: 51, name: "gluteus", sources: &[80, 81, 82, 83, 84, 85] },
    MergedEntry { id: 52, name: "autochthon", sources: &[86, 87] },
    MergedEntry { id: 53, name: "iliopsoas", sources: &[88, 89] },
    MergedEntry { id: 54, name: "spinal_cord", sources: &[79] },
    MergedEntry { id: 55, name: "brain", sources: &[90] },
    MergedEntry { id: 56, name: "skull", sources: &[91] },
];

/// Alternate names accepted by [`match_organ`], mapped to canonical names.
static SYNONYMS: [(&str, &str); 12] = [
    ("colon", "colorectum"),
    ("rectum", "colorectum"),
    ("large_bowel", "colorectum"),
    ("bladder", "urinary_bladder"),
    ("thyroid", "thyroid_gland"),
    ("small_intestine", "small_bowel"),
    ("left_kidney", "kidney_left"),
    ("right_kidney", "kidney_right"),
    ("left_adrenal_gland", "adrenal_gland_left"),
    ("right_adrenal_gland", "adrenal_gland_right"),
    ("vena_cava_inferior", "inferior_vena_cava"),
    ("vena_cava_superior", "superior_vena_cava"),
];

/// Errors from label and volume operations.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("source label {0} outside the known vocabulary")]
    UnknownLabel(u16),
    #[error("organ {query:?} not recognized; closest names: {}", suggestions.join(", "))]
    UnknownOrgan { query: String, suggestions: Vec<String> },
    #[error("label {0} absent from volume")]
    LabelAbsent(u16),
    #[error("dims {dims:?} imply {expected} voxels, got {got}")]
    DimMismatch { dims: [usize; 3], expected: usize, got: usize },
}

/// All merged label names in id order, starting with `background`.
pub fn builtin_label_names() -> impl Iterator<Item = &'static str> {
    MERGED_TABLE.iter().map(|e| e.name)
}

/// `(alias, canonical name)` pairs accepted by [`match_organ`].
pub fn synonym_pairs() -> impl Iterator<Item = (&'static str, &'static str)> {
    SYNONYMS.iter().copied()
}

/// The source-to-merged label mapping.
///
/// Total over sources 0..=117 and surjective onto merged 0..=56; the
/// constructor asserts both so a corrupted table cannot load silently.
pub struct RemapTable {
    forward: [u16; SOURCE_LABEL_COUNT],
}

impl RemapTable {
    pub fn builtin() -> RemapTable {
        const UNSET: u16 = u16::MAX;
        let mut forward = [UNSET; SOURCE_LABEL_COUNT];
        for entry in &MERGED_TABLE {
            assert!(!entry.sources.is_empty(), "merged label {} has no sources", entry.id);
            for &src in entry.sources {
                assert_eq!(
                    forward[src as usize], UNSET,
                    "source label {src} mapped twice"
                );
                forward[src as usize] = entry.id;
            }
        }
        assert!(
            forward.iter().all(|&m| m != UNSET),
            "remap table does not cover every source label"
        );
        RemapTable { forward }
    }

    /// Merged label for a source label.
    pub fn remap(&self, source: u16) -> Result<u16, LabelError> {
        self.forward
            .get(source as usize)
            .copied()
            .ok_or(LabelError::UnknownLabel(source))
    }
}

/// Merged label for a single source label.
pub fn remap_label(source: u16) -> Result<u16, LabelError> {
    RemapTable::builtin().remap(source)
}

/// Canonical name of a merged label.
pub fn label_name(merged: u16) -> Option<&'static str> {
    MERGED_TABLE.get(merged as usize).map(|e| e.name)
}

/// Source labels that fold into a merged label.
pub fn merged_sources(merged: u16) -> Option<&'static [u16]> {
    MERGED_TABLE.get(merged as usize).map(|e| e.sources)
}

/// Merged label id of one of the five task organs.
pub fn organ_label(organ: Organ) -> u16 {
    match organ {
        Organ::Liver => 5,
        Organ::Stomach => 6,
        Organ::Pancreas => 7,
        Organ::Esophagus => 15,
        Organ::Colon => 20,
    }
}

fn normalize_organ_query(raw: &str) -> String {
    let mut out = String::new();
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            pending_sep = !out.is_empty();
        } else {
            if pending_sep {
                out.push('_');
                pending_sep = false;
            }
            for low in ch.to_lowercase() {
                out.push(low);
            }
        }
    }
    out
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = alloc::vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        core::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Resolves an organ name to its merged label.
///
/// Matching is case- and separator-insensitive and consults a synonym
/// list (`colon` resolves to `colorectum`, `bladder` to
/// `urinary_bladder`, ...). Unknown names fail with the three closest
/// canonical names by edit distance, so a typo in a CLI flag gets a
/// usable hint instead of a bare rejection.
pub fn match_organ(query: &str) -> Result<(u16, &'static str), LabelError> {
    let needle = normalize_organ_query(query);
    if !needle.is_empty() {
        // Names are normalized on both sides so mixed-case table entries
        // (vertebrae_S1) match their own spelling and case-insensitive
        // variants alike.
        for entry in &MERGED_TABLE {
            if normalize_organ_query(entry.name) == needle {
                return Ok((entry.id, entry.name));
            }
        }
        for (alias, canonical) in &SYNONYMS {
            if normalize_organ_query(alias) == needle {
                let entry = MERGED_TABLE
                    .iter()
                    .find(|e| e.name == *canonical)
                    .expect("synonym targets a canonical name");
                return Ok((entry.id, entry.name));
            }
        }
    }
    let mut ranked: Vec<(usize, &'static str)> = MERGED_TABLE
        .iter()
        .map(|e| (levenshtein(&needle, e.name), e.name))
        .collect();
    ranked.sort();
    Err(LabelError::UnknownOrgan {
        query: query.to_owned(),
        suggestions: ranked.iter().take(3).map(|(_, n)| (*n).to_string()).collect(),
    })
}

/// Inclusive voxel bounding box along the three axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Bbox {
    pub h: [usize; 2],
    pub w: [usize; 2],
    pub d: [usize; 2],
}

impl Bbox {
    /// Extents of the box, inclusive of both bounds.
    pub fn dims(&self) -> [usize; 3] {
        [
            self.h[1] - self.h[0] + 1,
            self.w[1] - self.w[0] + 1,
            self.d[1] - self.d[0] + 1,
        ]
    }
}

/// A labeled region summary: the tight box around one label and how many
/// voxels carry it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Roi {
    pub label: u16,
    pub bbox: Bbox,
    pub voxel_count: usize,
}

/// A dense voxel grid of labels, `(height, width, depth)` with `height`
/// slowest and `depth` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    voxels: Vec<u16>,
    spacing: Option<[f64; 3]>,
}

impl LabelVolume {
    pub fn new(
        dims: [usize; 3],
        voxels: Vec<u16>,
        spacing: Option<[f64; 3]>,
    ) -> Result<LabelVolume, LabelError> {
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(LabelError::DimMismatch {
                dims,
                expected,
                got: voxels.len(),
            });
        }
        Ok(LabelVolume { dims, voxels, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn voxels(&self) -> &[u16] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> u16 {
        self.voxels[(h * self.dims[1] + w) * self.dims[2] + d]
    }

    /// Voxel counts per label present in the volume.
    pub fn histogram(&self) -> BTreeMap<u16, usize> {
        let mut counts = BTreeMap::new();
        for &v in &self.voxels {
            *counts.entry(v).or_insert(0usize) += 1;
        }
        counts
    }

    /// Applies the built-in merge table to every voxel.
    ///
    /// Fails on the first voxel holding a label outside the source
    /// vocabulary, identifying that label.
    pub fn remap(&self, table: &RemapTable) -> Result<LabelVolume, LabelError> {
        let mut voxels = Vec::with_capacity(self.voxels.len());
        for &v in &self.voxels {
            voxels.push(table.remap(v)?);
        }
        Ok(LabelVolume {
            dims: self.dims,
            voxels,
            spacing: self.spacing,
        })
    }

    /// Tight inclusive bounding box of one label, if present.
    pub fn bounding_box(&self, label: u16) -> Option<Bbox> {
        let [hn, wn, dn] = self.dims;
        let mut bounds: Option<Bbox> = None;
        for h in 0..hn {
            for w in 0..wn {
                let row = (h * wn + w) * dn;
                for d in 0..dn {
                    if self.voxels[row + d] == label {
                        match &mut bounds {
                            None => {
                                bounds = Some(Bbox {
                                    h: [h, h],
                                    w: [w, w],
                                    d: [d, d],
                                })
                            }
                            Some(b) => {
                                b.h[0] = b.h[0].min(h);
                                b.h[1] = b.h[1].max(h);
                                b.w[0] = b.w[0].min(w);
                                b.w[1] = b.w[1].max(w);
                                b.d[0] = b.d[0].min(d);
                                b.d[1] = b.d[1].max(d);
                            }
                        }
                    }
                }
            }
        }
        bounds
    }

    /// Crops the volume to the tight bounding box of a label, keeping all
    /// voxel values inside the box. Spacing carries over unchanged.
    pub fn extract_roi(&self, label: u16) -> Result<(LabelVolume, Bbox), LabelError> {
        let bbox = self
            .bounding_box(label)
            .ok_or(LabelError::LabelAbsent(label))?;
        let [rh, rw, rd] = bbox.dims();
        let mut voxels = Vec::with_capacity(rh * rw * rd);
        for h in bbox.h[0]..=bbox.h[1] {
            for w in bbox.w[0]..=bbox.w[1] {
                for d in bbox.d[0]..=bbox.d[1] {
                    voxels.push(self.get(h, w, d));
                }
            }
        }
        Ok((
            LabelVolume {
                dims: [rh, rw, rd],
                voxels,
                spacing: self.spacing,
            },
            bbox,
        ))
    }

    /// Number of voxels equal to `label`.
    pub fn count_label(&self, label: u16) -> usize {
        self.voxels.iter().filter(|&&v| v == label).count()
    }

    /// Region summary for a label: tight box plus exact voxel count.
    pub fn roi(&self, label: u16) -> Result<Roi, LabelError> {
        let bbox = self
            .bounding_box(label)
            .ok_or(LabelError::LabelAbsent(label))?;
        Ok(Roi { label, bbox, voxel_count: self.count_label(label) })
    }
}
