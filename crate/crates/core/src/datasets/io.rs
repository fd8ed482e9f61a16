//! Line-delimited dataset files: a header object, then one record per line.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::vision::ImageGrid;

use super::{Caption, McqItem, Sample, TaskTag};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    task: TaskTag,
    query: String,
    labels: String,
    correct: Option<usize>,
    height: usize,
    width: usize,
    channels: usize,
    /// Base64 of 8-bit interleaved pixels.
    pixels: String,
}

fn write_records<R: Serialize>(w: &mut impl Write, format: &str, records: &[R]) -> Result<()> {
    let header = Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
        count: records.len(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_records<R: DeserializeOwned>(r: impl BufRead, format: &str) -> Result<Vec<R>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "expected {format} v{FORMAT_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    if out.len() != header.count {
        return Err(Error::Dataset(format!(
            "header announces {} records, file has {}",
            header.count,
            out.len()
        )));
    }
    Ok(out)
}

pub fn write_samples(w: &mut impl Write, samples: &[Sample]) -> Result<()> {
    let v = Vocab::standard();
    let records: Vec<SampleRecord> = samples
        .iter()
        .map(|s| SampleRecord {
            task: s.task,
            query: v.decode(&s.query),
            labels: v.decode(&s.labels),
            correct: s.correct,
            height: s.image.height(),
            width: s.image.width(),
            channels: s.image.channels(),
            pixels: STANDARD.encode(s.image.to_u8()),
        })
        .collect();
    write_records(w, "lvlm-samples", &records)
}

pub fn read_samples(r: impl BufRead) -> Result<Vec<Sample>> {
    let records: Vec<SampleRecord> = read_records(r, "lvlm-samples")?;
    records
        .into_iter()
        .map(|rec| {
            let bytes = STANDARD
                .decode(rec.pixels.as_bytes())
                .map_err(|e| Error::Dataset(format!("bad pixel payload: {e}")))?;
            let image = ImageGrid::from_u8(rec.height, rec.width, rec.channels, &bytes)?;
            Sample::from_text(image, &rec.query, &rec.labels, rec.task, rec.correct)
        })
        .collect()
}

pub fn write_mcq(w: &mut impl Write, items: &[McqItem]) -> Result<()> {
    write_records(w, "lvlm-mcq", items)
}

pub fn read_mcq(r: impl BufRead) -> Result<Vec<McqItem>> {
    let items: Vec<McqItem> = read_records(r, "lvlm-mcq")?;
    for i in &items {
        i.check()?;
    }
    Ok(items)
}

pub fn write_captions(w: &mut impl Write, captions: &[Caption]) -> Result<()> {
    write_records(w, "lvlm-captions", captions)
}

pub fn read_captions(r: impl BufRead) -> Result<Vec<Caption>> {
    read_records(r, "lvlm-captions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_captions, gen_samples, TaskMix};
    use crate::rng::SeedStream;

    #[test]
    fn samples_round_trip() {
        let s = gen_samples(&SeedStream::new(2), 6, TaskMix::ALL, 36).unwrap();
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn captions_round_trip_and_header_checked() {
        let c = gen_captions(5, &SeedStream::new(3));
        let mut buf = Vec::new();
        write_captions(&mut buf, &c).unwrap();
        assert_eq!(read_captions(buf.as_slice()).unwrap(), c);
        assert!(read_mcq(buf.as_slice()).is_err());
        let truncated: Vec<u8> = buf.split(|&b| b == b'\n').take(3).collect::<Vec<_>>().join(&b'\n');
        assert!(read_captions(truncated.as_slice()).is_err());
    }
}
