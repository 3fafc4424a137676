//! Newline-delimited dataset files: one header record with the token-id
//! table, then one flat record per sample.

use super::{DomainSpec, Sample, SamplerSpec, Vocab};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// First record of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub vocab: Vocab,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DomainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSpec>,
}

impl DatasetHeader {
    pub fn new(vocab: Vocab, spec: Option<DomainSpec>, sampler: Option<SamplerSpec>) -> Self {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            vocab,
            spec,
            sampler,
        }
    }
}

/// Streamed dataset writer.
pub struct DatasetWriter<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(out: W, header: &DatasetHeader) -> Result<Self> {
        let mut w = DatasetWriter {
            out: BufWriter::new(out),
        };
        w.write_line(header)?;
        Ok(w)
    }

    pub fn write_sample(&mut self, sample: &Sample) -> Result<()> {
        self.write_line(sample)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a full dataset from a reader, validating every record.
pub fn read_dataset<R: Read>(reader: R) -> Result<(DatasetHeader, Vec<Sample>)> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::Parse("empty dataset file".into())),
    };
    let header = parse_header(&header_line)?;
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_record(&line, &header).map_err(|e| {
            Error::Parse(format!("record {}: {e}", idx + 1))
        })?);
    }
    Ok((header, samples))
}

/// Parse and validate the header record.
pub fn parse_header(line: &str) -> Result<DatasetHeader> {
    let header: DatasetHeader =
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    Ok(header)
}

/// Parse and validate one sample record against the header's vocab.
pub fn parse_record(line: &str, header: &DatasetHeader) -> Result<Sample> {
    let sample: Sample = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    validate_sample(&sample, &header.vocab)?;
    Ok(sample)
}

fn validate_sample(sample: &Sample, vocab: &Vocab) -> Result<()> {
    let n = sample.input.len();
    if sample.target.len() != n || sample.mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "lengths input={} target={} mask={}",
            n,
            sample.target.len(),
            sample.mask.len()
        )));
    }
    if n == 0 {
        return Err(Error::ShapeMismatch("empty sample".into()));
    }
    let vsize = vocab.size() as u32;
    for &id in &sample.input {
        if id >= vsize || id == Vocab::IGNORE {
            return Err(Error::VocabMismatch(format!("input token {id}")));
        }
    }
    for (i, &id) in sample.target.iter().enumerate() {
        if id >= vsize {
            return Err(Error::VocabMismatch(format!("target token {id}")));
        }
        if sample.mask[i] == (id == Vocab::IGNORE) {
            return Err(Error::VocabMismatch(format!(
                "mask/IGNORE disagreement at position {i}"
            )));
        }
    }
    if let Some(((s1, l1), (s2, l2))) = sample.meta.digit_spans {
        for (s, l) in [(s1, l1), (s2, l2)] {
            if s + l > n {
                return Err(Error::ShapeMismatch(format!("digit span ({s},{l}) out of bounds")));
            }
        }
    }
    Ok(())
}

/// Write a dataset file at `path`.
pub fn write_dataset_file<'a, I>(path: &Path, header: &DatasetHeader, samples: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let file = std::fs::File::create(path)?;
    let mut w = DatasetWriter::new(file, header)?;
    for s in samples {
        w.write_sample(s)?;
    }
    w.finish()
}

/// Read a dataset file at `path`.
pub fn read_dataset_file(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{encode_add, SamplerSpec};
    use crate::digits::Digits;

    #[test]
    fn roundtrip_through_bytes() {
        let vocab = Vocab::arithmetic();
        let header = DatasetHeader::new(vocab, None, Some(SamplerSpec::uniform(7)));
        let samples: Vec<Sample> = (0..5u64)
            .map(|v| encode_add(&Digits::from_u64(v * 37), &Digits::from_u64(v), 4).unwrap())
            .collect();
        let mut buf = Vec::new();
        {
            let mut w = DatasetWriter::new(&mut buf, &header).unwrap();
            for s in &samples {
                w.write_sample(s).unwrap();
            }
            w.finish().unwrap();
        }
        let (h2, s2) = read_dataset(&buf[..]).unwrap();
        assert_eq!(h2, header);
        assert_eq!(s2, samples);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_dataset(&b""[..]).is_err());
        assert!(read_dataset(&b"not json\n"[..]).is_err());
        let bad_version = br#"{"format_version":99,"vocab":{"text_tokens":0}}"#;
        assert!(read_dataset(&bad_version[..]).is_err());
        // Header fine, record with mask/IGNORE disagreement.
        let data = br#"{"format_version":1,"vocab":{"text_tokens":0}}
{"input_ids":[1,10,2],"target_ids":[13,13,3],"mask":[false,true,true],"meta":{"op":"add","l":1,"len_a":1,"len_b":1,"complexity":0}}
"#;
        assert!(read_dataset(&data[..]).is_err());
    }
}
