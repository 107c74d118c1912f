//! Mined-triplet JSON lines and miner inputs.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use fsir_core::triplet::{CaptionedItem, MinedTriplet};
use fsir_core::EmbeddingCorpus;

use crate::binio::read_file;
use crate::error::{Error, Result};

pub fn write_triplets<W: Write>(mut w: W, triplets: &[MinedTriplet]) -> std::io::Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Streams triplets one line at a time, reusing a single line buffer.
pub struct TripletReader<R> {
    inner: R,
    line: String,
    line_no: usize,
}

impl<R: BufRead> TripletReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: String::new(),
            line_no: 0,
        }
    }

    /// Capacity of the line buffer, i.e. the memory held between items.
    pub fn buffer_capacity(&self) -> usize {
        self.line.capacity()
    }
}

impl<R: BufRead> Iterator for TripletReader<R> {
    type Item = Result<MinedTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line.clear();
            self.line_no += 1;
            let line = self.line_no;
            match self.inner.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) if self.line.trim().is_empty() => continue,
                Ok(_) => {
                    return Some(serde_json::from_str(&self.line).map_err(|e| Error::Line {
                        line,
                        message: e.to_string(),
                    }))
                }
                Err(e) => {
                    return Some(Err(Error::Line {
                        line,
                        message: e.to_string(),
                    }))
                }
            }
        }
    }
}

pub fn read_triplets(path: &Path) -> Result<Vec<MinedTriplet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    TripletReader::new(std::io::BufReader::new(f)).collect()
}

/// JSON object mapping caption ids to image ids.
pub fn read_caption_map(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

/// One item per caption, in caption-id order.
pub fn captioned_items(
    images: &EmbeddingCorpus,
    captions: &EmbeddingCorpus,
    caption_map: &BTreeMap<String, String>,
) -> Result<Vec<CaptionedItem>> {
    caption_map
        .iter()
        .map(|(caption_id, image_id)| {
            let missing = |id: &str| fsir_core::Error::MissingEmbedding(id.into());
            Ok(CaptionedItem {
                image_id: image_id.clone(),
                image_embedding: images.get(image_id).ok_or_else(|| missing(image_id))?.vector.clone(),
                caption_id: caption_id.clone(),
                caption_embedding: captions
                    .get(caption_id)
                    .ok_or_else(|| missing(caption_id))?
                    .vector
                    .clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triplet(i: usize) -> MinedTriplet {
        MinedTriplet {
            query_text_id: format!("cap{i}"),
            reference_id: format!("img{}", i + 1),
            target_id: format!("img{i}"),
            image_similarity: 0.5 + i as f64 * 0.01,
            caption_similarity: 0.7,
        }
    }

    #[test]
    fn round_trip() {
        let ts: Vec<_> = (0..3).map(triplet).collect();
        let mut buf = Vec::new();
        write_triplets(&mut buf, &ts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"img_sim\""));
        let back: Vec<_> = TripletReader::new(&buf[..]).collect::<Result<_>>().unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn malformed_line_has_number() {
        let mut buf = Vec::new();
        write_triplets(&mut buf, &[triplet(0)]).unwrap();
        buf.extend_from_slice(b"\n{\"query_text_id\": 3}\n");
        let results: Vec<_> = TripletReader::new(&buf[..]).collect();
        match &results[1] {
            Err(e @ Error::Line { line: 3, .. }) => assert_eq!(e.code(), "SCHEMA_ERROR"),
            other => panic!("{other:?}"),
        }
    }
}
