//! Layer file format.
//!
//! ```text
//! {"d_out":4,"d_in":4,"n":2,"b":2,"r":2,"orientation":"column_sliced","corner":{...}}
//! ## L
//! <n matrices, text format>
//! ## S
//! <one n × r matrix, row k = S_k; omitted for merged corners>
//! ## R
//! <n matrices, text format>
//! ```
//!
//! A layer whose `L` is NF4-quantized carries `"quant":{"group_size":g}` in
//! the header and an `## L nf4` section instead of `## L`
//! (see [`crate::quant`]).

use serde::{Deserialize, Serialize};

use super::{BlockShape, BlockTTLayer, DesignCorner, Orientation};
use crate::error::{Error, Result};
use crate::linalg::text::{write_matrix, LineCursor};
use crate::linalg::DenseMatrix;

pub const L_MARKER: &str = "## L";
pub const L_NF4_MARKER: &str = "## L nf4";
pub const S_MARKER: &str = "## S";
pub const R_MARKER: &str = "## R";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantHeader {
    pub group_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerHeader {
    pub d_out: usize,
    pub d_in: usize,
    pub n: usize,
    pub b: usize,
    pub r: usize,
    pub orientation: Orientation,
    pub corner: DesignCorner,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantHeader>,
}

impl LayerHeader {
    pub fn of(layer: &BlockTTLayer) -> Self {
        let shape = layer.shape();
        Self {
            d_out: layer.d_out(),
            d_in: layer.d_in(),
            n: shape.n,
            b: shape.b,
            r: layer.rank(),
            orientation: shape.orientation,
            corner: layer.corner(),
            quant: None,
        }
    }

    pub fn shape(&self) -> BlockShape {
        BlockShape { n: self.n, b: self.b, orientation: self.orientation }
    }
}

pub(crate) fn write_header(out: &mut String, header: &LayerHeader) {
    out.push_str(&serde_json::to_string(header).expect("header serializes"));
    out.push('\n');
}

pub(crate) fn write_s_and_r(out: &mut String, layer: &BlockTTLayer) {
    if let Some(s) = layer.s_blocks() {
        out.push_str(S_MARKER);
        out.push('\n');
        let s = DenseMatrix::from_rows(s).expect("rectangular S");
        write_matrix(out, &s);
    }
    out.push_str(R_MARKER);
    out.push('\n');
    for r in layer.r_blocks() {
        write_matrix(out, r);
    }
}

pub fn layer_to_text(layer: &BlockTTLayer) -> String {
    let mut out = String::new();
    write_header(&mut out, &LayerHeader::of(layer));
    out.push_str(L_MARKER);
    out.push('\n');
    for l in layer.l_blocks() {
        write_matrix(&mut out, l);
    }
    write_s_and_r(&mut out, layer);
    out
}

pub(crate) fn read_header(cursor: &mut LineCursor<'_>) -> Result<LayerHeader> {
    let (n, line) = cursor.next_line()?;
    let header: LayerHeader =
        serde_json::from_str(line).map_err(|e| Error::parse(n, format!("bad layer header: {e}")))?;
    let shape = header.shape();
    shape.validate(header.d_out, header.d_in)?;
    if header.r != shape.rank(header.d_out, header.d_in) {
        return Err(Error::parse(n, format!("rank {} is not full for this shape", header.r)));
    }
    Ok(header)
}

/// Reads the `## S` (if the corner has one) and `## R` sections and builds
/// the layer around the given `L` blocks.
pub(crate) fn read_s_and_r(
    cursor: &mut LineCursor<'_>,
    header: &LayerHeader,
    l_core: Vec<DenseMatrix>,
) -> Result<BlockTTLayer> {
    let s_core = if header.corner.has_separate_s() {
        cursor.expect_line(S_MARKER)?;
        let s = cursor.read_matrix()?;
        if s.shape() != (header.n, header.r) {
            return Err(Error::dim(format!("S section must be {}x{}", header.n, header.r)));
        }
        Some((0..header.n).map(|k| s.row(k).to_vec()).collect())
    } else {
        None
    };
    cursor.expect_line(R_MARKER)?;
    let r_core = (0..header.n).map(|_| cursor.read_matrix()).collect::<Result<Vec<_>>>()?;
    cursor.expect_end()?;
    BlockTTLayer::from_parts(header.d_out, header.d_in, header.shape(), header.corner, l_core, s_core, r_core)
}

/// Parses a plain (unquantized) layer file.
pub fn layer_from_text(text: &str) -> Result<BlockTTLayer> {
    let mut cursor = LineCursor::new(text);
    let header = read_header(&mut cursor)?;
    if header.quant.is_some() {
        return Err(Error::parse(1, "layer has a quantized L; load it with quant::quantized_layer_from_text"));
    }
    cursor.expect_line(L_MARKER)?;
    let l_core = (0..header.n).map(|_| cursor.read_matrix()).collect::<Result<Vec<_>>>()?;
    read_s_and_r(&mut cursor, &header, l_core)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;

    #[test]
    fn round_trip_every_corner() {
        let w = gaussian(6, 6, 3, 1.0);
        for corner in DesignCorner::PEFT.iter().chain([&DesignCorner::FULL]) {
            let shape = BlockShape { n: 3, b: 2, orientation: corner.natural_orientation() };
            let layer = BlockTTLayer::block_svd_init(&w, shape, *corner).unwrap();
            let text = layer_to_text(&layer);
            assert_eq!(layer_from_text(&text).unwrap(), layer);
        }
    }

    #[test]
    fn header_is_first_line_json() {
        let layer =
            BlockTTLayer::block_svd_init(&DenseMatrix::identity(4), BlockShape::column(2, 2), DesignCorner::DEFAULT)
                .unwrap();
        let text = layer_to_text(&layer);
        let first = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert_eq!(v["n"], 2);
        assert_eq!(v["orientation"], "column_sliced");
        assert_eq!(v["corner"]["s_placement"], "separate");
    }

    #[test]
    fn rejects_bad_files() {
        assert!(layer_from_text("not json").is_err());
        let layer =
            BlockTTLayer::block_svd_init(&DenseMatrix::identity(4), BlockShape::column(2, 2), DesignCorner::DEFAULT)
                .unwrap();
        let text = layer_to_text(&layer);
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(layer_from_text(&truncated).is_err());
        let bad_rank = text.replacen("\"r\":2", "\"r\":3", 1);
        assert!(layer_from_text(&bad_rank).is_err());
    }
}
