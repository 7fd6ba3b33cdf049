//! Color-coded mask conversion for the aerial benchmark layout.
//!
//! The upstream dataset ships masks as RGB rasters with one color per
//! category; training wants single-channel class-id masks. The color table
//! lives in `data/isaid_palette.json` (embedded as the default) and can be
//! overridden with a custom file of the same schema.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PALETTE_JSON: &str = include_str!("../../data/isaid_palette.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub color: [u8; 3],
    pub id: u8,
    pub name: String,
}

pub fn parse_palette(json: &str) -> Result<Vec<PaletteEntry>> {
    serde_json::from_str(json).map_err(|e| Error::Config(format!("palette table: {e}")))
}

pub fn load_palette(path: Option<&Path>) -> Result<Vec<PaletteEntry>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_palette(&text)
        }
        None => parse_palette(DEFAULT_PALETTE_JSON),
    }
}

pub fn palette_lookup(entries: &[PaletteEntry]) -> HashMap<[u8; 3], u8> {
    entries.iter().map(|e| (e.color, e.id)).collect()
}

/// Converts one RGB mask to class ids; an unknown color is an error naming
/// the triple (strict table lookup, no nearest-color guessing).
pub fn convert_color_mask(rgb: &Array3<u8>, table: &HashMap<[u8; 3], u8>) -> Result<Array2<u8>> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB mask, got {c} channels")));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let key = [rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]];
            match table.get(&key) {
                Some(&id) => out[[y, x]] = id,
                None => {
                    return Err(Error::Data(format!(
                        "unknown mask color RGB({}, {}, {}) at ({y}, {x})",
                        key[0], key[1], key[2]
                    )))
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_has_sixteen_entries() {
        let entries = parse_palette(DEFAULT_PALETTE_JSON).unwrap();
        assert_eq!(entries.len(), 16);
        assert_eq!(entries[0].id, 0);
        assert_eq!(entries[0].color, [0, 0, 0]);
        let ids: Vec<u8> = entries.iter().map(|e| e.id).collect();
        assert_eq!(ids, (0..16).collect::<Vec<u8>>());
    }

    #[test]
    fn conversion_is_strict() {
        let entries = parse_palette(DEFAULT_PALETTE_JSON).unwrap();
        let table = palette_lookup(&entries);
        let mut rgb = Array3::zeros((1, 2, 3));
        // background + ship
        rgb[[0, 1, 2]] = 63;
        let mask = convert_color_mask(&rgb, &table).unwrap();
        assert_eq!(mask[[0, 0]], 0);
        assert_eq!(mask[[0, 1]], 1);

        let mut bad = Array3::zeros((1, 1, 3));
        bad[[0, 0, 0]] = 17;
        let err = convert_color_mask(&bad, &table).unwrap_err();
        assert!(err.to_string().contains("RGB(17, 0, 0)"), "{err}");
    }
}
