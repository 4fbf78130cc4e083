//! Model configs shipped in `presets/`.

use cimnet_core::zoo::{Preset, ZooConfig, STRIDES};

use crate::config::ModelConfig;
use crate::error::Result;

/// Input size of the shipped full-width presets.
pub const PRESET_SIZE: usize = 96;

/// Widths of the desk-scale variant.
pub const TINY_WIDTHS: [usize; 3] = [8, 16, 32];

/// Every shipped config, keyed by file stem.
pub fn shipped_presets() -> Result<Vec<(String, ModelConfig)>> {
    let cfg = ZooConfig::default();
    let mut out = Vec::new();
    for p in Preset::ALL {
        let strides: &[usize] = if p == Preset::FastDvdBlock { &[1] } else { &STRIDES };
        for &s in strides {
            let g = p.build(s, PRESET_SIZE, PRESET_SIZE, &cfg)?;
            out.push((g.name().to_owned(), ModelConfig::from_graph(&g)));
        }
    }
    let g = Preset::CimNet.build(2, 32, 32, &ZooConfig::with_widths(TINY_WIDTHS))?;
    let mut tiny = ModelConfig::from_graph(&g);
    tiny.name = "cimnet-v1-tiny-s2".into();
    out.push((tiny.name.clone(), tiny));
    Ok(out)
}
