//! Onboarded template collection and its `GPST` container.
//!
//! ```text
//! magic "GPST" | version u16 | manifest length u32 | manifest JSON
//! | block count u32 | count x (offset u64, length u64) | GPFG blocks
//! ```
//! Offsets are absolute. Template `k` owns blocks `2k` (invariant grid) and
//! `2k + 1` (variant grid); templates are stored in viewpoint order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_u16, put_u32, put_u64, ByteReader};
use crate::error::{invalid, Error, Result};
use crate::estimator::TemplateCamera;
use crate::featuregrid::{decode_grid, encode_grid, CropTransform, FeatureGrid, PatchGeometry};
use crate::geometry::{icosphere_viewpoints, CameraIntrinsics, Rotation3, ViewpointSet};
use crate::manifest::{load_grid, read_json, CropRecord, IntrinsicsRecord, TemplateManifest, TEMPLATE_MANIFEST};
use crate::matching::TemplateIndex;

pub const STORE_MAGIC: &[u8; 4] = b"GPST";
pub const STORE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub viewpoint: usize,
    pub r_ae: Rotation3,
    pub invariant: FeatureGrid,
    pub variant: FeatureGrid,
    pub crop: CropTransform,
    pub tz: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Template {
    pub fn camera(&self) -> TemplateCamera {
        TemplateCamera {
            r_ae: self.r_ae,
            crop: *self.crop.affine(),
            tz: self.tz,
            intrinsics: self.intrinsics,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTemplate {
    viewpoint: usize,
    crop: CropRecord,
    tz: f64,
    intrinsics: IntrinsicsRecord,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    object_id: u32,
    subdivisions: u32,
    patch_size: u32,
    grid_side: u32,
    image_side: u32,
    templates: Vec<StoredTemplate>,
}

/// Templates of one object, one per icosphere viewpoint, plus the packed
/// retrieval index over their invariant grids.
#[derive(Clone, Debug)]
pub struct TemplateStore {
    object_id: u32,
    viewpoints: ViewpointSet,
    geometry: PatchGeometry,
    templates: Vec<Template>,
    index: TemplateIndex,
}

fn onboarding(viewpoint: usize, message: impl Into<String>) -> Error {
    Error::Onboarding {
        template: format!("viewpoint {viewpoint}"),
        message: message.into(),
    }
}

impl TemplateStore {
    /// Validates and orders templates. Every viewpoint of the icosphere must
    /// appear exactly once.
    pub fn new(object_id: u32, subdivisions: u32, geometry: PatchGeometry, mut templates: Vec<Template>) -> Result<Self> {
        let viewpoints = icosphere_viewpoints(subdivisions)?;
        templates.sort_by_key(|t| t.viewpoint);
        let mut present = vec![false; viewpoints.len()];
        for t in &templates {
            if t.viewpoint >= viewpoints.len() {
                return Err(onboarding(
                    t.viewpoint,
                    format!("outside the {} viewpoints of subdivision {subdivisions}", viewpoints.len()),
                ));
            }
            if std::mem::replace(&mut present[t.viewpoint], true) {
                return Err(onboarding(t.viewpoint, "duplicate viewpoint"));
            }
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(onboarding(missing, "missing template"));
        }
        let (inv_dim, var_dim) = (templates[0].invariant.dim(), templates[0].variant.dim());
        for t in &templates {
            let v = t.viewpoint;
            for (grid, kind, dim, variant) in [(&t.invariant, "invariant", inv_dim, false), (&t.variant, "variant", var_dim, true)] {
                if !grid.matches_geometry(&geometry) {
                    return Err(onboarding(
                        v,
                        format!(
                            "{kind} grid is {}x{}, expected {}x{}",
                            grid.height(),
                            grid.width(),
                            geometry.grid_side,
                            geometry.grid_side
                        ),
                    ));
                }
                if grid.dim() != dim {
                    return Err(onboarding(v, format!("{kind} grid has dim {}, expected {dim}", grid.dim())));
                }
                if grid.is_variant() != variant {
                    return Err(onboarding(v, format!("{kind} grid has the wrong variant flag")));
                }
            }
            if !(t.tz > 0.0) {
                return Err(onboarding(v, format!("template depth {} must be positive", t.tz)));
            }
            if (t.r_ae.angle_to(&viewpoints.viewpoints[v].rotation)) > 1e-9 {
                return Err(onboarding(v, "rotation does not match the viewpoint"));
            }
        }
        let index = TemplateIndex::build(templates.iter().map(|t| &t.invariant))?;
        Ok(Self {
            object_id,
            viewpoints,
            geometry,
            templates,
            index,
        })
    }

    /// Reads `templates.json` and its grids from `dir`.
    pub fn onboard(dir: &Path, subdivisions: u32, geometry: PatchGeometry) -> Result<Self> {
        let manifest: TemplateManifest = read_json(&dir.join(TEMPLATE_MANIFEST))?;
        if let Some(s) = manifest.subdivisions {
            if s != subdivisions {
                return Err(invalid(format!(
                    "manifest declares subdivisions {s}, configured {subdivisions}"
                )));
            }
        }
        let viewpoints = icosphere_viewpoints(subdivisions)?;
        let mut templates = Vec::with_capacity(manifest.templates.len());
        for e in &manifest.templates {
            let v = e.viewpoint;
            let vp = viewpoints.viewpoints.get(v).ok_or_else(|| {
                onboarding(v, format!("outside the {} viewpoints of subdivision {subdivisions}", viewpoints.len()))
            })?;
            let load = |rel: &Path| load_grid(dir, rel).map_err(|e| onboarding(v, format!("{}: {e}", rel.display())));
            templates.push(Template {
                viewpoint: v,
                r_ae: vp.rotation,
                invariant: load(&e.invariant)?,
                variant: load(&e.variant)?,
                crop: e.crop.to_crop().map_err(|err| onboarding(v, err.to_string()))?,
                tz: e.tz,
                intrinsics: e.intrinsics.to_intrinsics().map_err(|err| onboarding(v, err.to_string()))?,
            });
        }
        Self::new(manifest.object_id, subdivisions, geometry, templates)
    }

    pub fn object_id(&self) -> u32 {
        self.object_id
    }

    pub fn viewpoints(&self) -> &ViewpointSet {
        &self.viewpoints
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn index(&self) -> &TemplateIndex {
        &self.index
    }

    pub fn cameras(&self) -> Vec<TemplateCamera> {
        self.templates.iter().map(Template::camera).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = StoreHeader {
            object_id: self.object_id,
            subdivisions: self.viewpoints.subdivisions,
            patch_size: self.geometry.patch_size,
            grid_side: self.geometry.grid_side,
            image_side: self.geometry.image_side,
            templates: self
                .templates
                .iter()
                .map(|t| StoredTemplate {
                    viewpoint: t.viewpoint,
                    crop: CropRecord::from(&t.crop),
                    tz: t.tz,
                    intrinsics: IntrinsicsRecord::from(&t.intrinsics),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let blocks: Vec<Vec<u8>> = self
            .templates
            .iter()
            .flat_map(|t| [encode_grid(&t.invariant), encode_grid(&t.variant)])
            .collect();
        let mut out = Vec::new();
        out.write_all(STORE_MAGIC)?;
        put_u16(&mut out, STORE_VERSION)?;
        put_u32(&mut out, json.len() as u32)?;
        out.extend_from_slice(&json);
        put_u32(&mut out, blocks.len() as u32)?;
        let mut offset = (out.len() + 16 * blocks.len()) as u64;
        for b in &blocks {
            put_u64(&mut out, offset)?;
            put_u64(&mut out, b.len() as u64)?;
            offset += b.len() as u64;
        }
        for b in &blocks {
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STORE_MAGIC)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported GPST version {version}"),
            });
        }
        let json_len = r.u32()? as usize;
        let json_at = r.offset();
        let header: StoreHeader = serde_json::from_slice(&r.bytes(json_len)?).map_err(|e| Error::Format {
            offset: json_at,
            message: format!("manifest: {e}"),
        })?;
        let count_at = r.offset();
        let count = r.u32()? as usize;
        if count != 2 * header.templates.len() {
            return Err(Error::Format {
                offset: count_at,
                message: format!("{count} blocks for {} templates", header.templates.len()),
            });
        }
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            index.push((r.u64()?, r.u64()?));
        }
        let mut grids = Vec::with_capacity(count);
        let mut furthest = r.offset();
        for (k, &(offset, len)) in index.iter().enumerate() {
            let end = offset.checked_add(len).filter(|&e| e <= bytes.len() as u64).ok_or(Error::Truncated {
                offset: bytes.len() as u64,
                expected: (offset.saturating_add(len)).saturating_sub(bytes.len() as u64) as usize,
            })?;
            if offset < r.offset() {
                return Err(Error::Format {
                    offset: count_at + 4 + 16 * k as u64,
                    message: format!("block {k} offset {offset} overlaps the header"),
                });
            }
            grids.push(decode_grid(&bytes[offset as usize..end as usize], offset)?);
            furthest = furthest.max(end);
        }
        if furthest != bytes.len() as u64 {
            return Err(Error::Format {
                offset: furthest,
                message: format!("{} trailing bytes after the last block", bytes.len() as u64 - furthest),
            });
        }
        let geometry = PatchGeometry::new(header.patch_size, header.grid_side, header.image_side)?;
        let viewpoints = icosphere_viewpoints(header.subdivisions)?;
        let mut grids = grids.into_iter();
        let mut templates = Vec::with_capacity(header.templates.len());
        for t in header.templates {
            let vp = viewpoints
                .viewpoints
                .get(t.viewpoint)
                .ok_or_else(|| onboarding(t.viewpoint, "viewpoint out of range"))?;
            templates.push(Template {
                viewpoint: t.viewpoint,
                r_ae: vp.rotation,
                invariant: grids.next().expect("block count checked"),
                variant: grids.next().expect("block count checked"),
                crop: t.crop.to_crop()?,
                tz: t.tz,
                intrinsics: t.intrinsics.to_intrinsics()?,
            });
        }
        Self::new(header.object_id, header.subdivisions, geometry, templates)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Stores keyed by object id.
pub type StoreSet = BTreeMap<u32, TemplateStore>;
