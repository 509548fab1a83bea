//! Indexed-colour PNG encoding of label maps (DAVIS annotation format).
//!
//! Palette index `i` is object id `i`. The palette is the 256-entry VOC
//! colormap; only indices carry meaning. The declared id set is stored in a
//! `tEXt` chunk so ids without pixels survive a round trip.

use std::io::Cursor;

use thiserror::Error;

use crate::mask::{LabelMap, MaskError, ObjectId};

const IDS_KEYWORD: &str = "object_ids";

#[derive(Debug, Error)]
pub enum PngError {
    #[error("png is not indexed-colour (found {0:?})")]
    NotIndexed(png::ColorType),
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("malformed object id chunk: {0:?}")]
    BadIdChunk(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// The 256-entry PASCAL VOC colormap, built by spreading the low bits of each
/// index across the high bits of R, G and B.
pub fn voc_colormap() -> [[u8; 3]; 256] {
    let mut map = [[0u8; 3]; 256];
    for (i, entry) in map.iter_mut().enumerate() {
        let mut c = i;
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        *entry = [r, g, b];
    }
    map
}

fn flat_palette() -> Vec<u8> {
    voc_colormap().iter().flatten().copied().collect()
}

/// Encodes a label map as an 8-bit indexed PNG.
pub fn write_mask_png(map: &LabelMap) -> Result<Vec<u8>, PngError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width(), map.height());
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(flat_palette());
        enc.set_compression(png::Compression::Balanced);
        let ids = map.object_ids().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        enc.add_text_chunk(IDS_KEYWORD.to_string(), ids)?;
        let mut writer = enc.write_header()?;
        writer.write_image_data(map.labels())?;
        writer.finish()?;
    }
    Ok(out)
}

fn parse_ids(text: &str) -> Result<Vec<ObjectId>, PngError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| s.parse::<ObjectId>().map_err(|_| PngError::BadIdChunk(text.to_string())))
        .collect()
}

/// Decodes an indexed PNG into a label map. Bit depths below 8 are unpacked.
/// Without an id chunk the declared ids are the nonzero indices present.
pub fn read_mask_png(bytes: &[u8]) -> Result<LabelMap, PngError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let (color, depth, width, height) = {
        let info = reader.info();
        (info.color_type, info.bit_depth, info.width, info.height)
    };
    if color != png::ColorType::Indexed {
        return Err(PngError::NotIndexed(color));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut buf)?;
    let bits = depth as usize;
    let mut labels = Vec::with_capacity(width as usize * height as usize);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size) {
        if bits == 8 {
            labels.extend_from_slice(&row[..width as usize]);
        } else {
            let per_byte = 8 / bits;
            let mask = (1u8 << bits) - 1;
            for x in 0..width as usize {
                let byte = row[x / per_byte];
                let shift = 8 - bits * (x % per_byte + 1);
                labels.push((byte >> shift) & mask);
            }
        }
    }
    let declared = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == IDS_KEYWORD)
        .map(|c| parse_ids(&c.text))
        .transpose()?;
    let map = match declared {
        Some(ids) => LabelMap::new(width, height, labels, ids)?,
        None => LabelMap::from_raster(width, height, labels)?,
    };
    Ok(map)
}
